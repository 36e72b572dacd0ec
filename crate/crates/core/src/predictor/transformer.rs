//! A small encoder-only Transformer with rotary position embeddings.
//!
//! Weights are stored as `f32` (the weight-file precision); activations are
//! computed in `f64`. The forward pass exposes two hooks used by the
//! efficiency modules: per-layer activation fake-quantization on the inputs
//! of every linear layer, and bipartite token merging around attention.

use serde::{Deserialize, Serialize};

use super::rope::{rope_theta, ROPE_BASE};
use super::{check_time, Predictor, PredictorOutput, NULL_CONDITION};
use crate::error::{invalid, Result};
use crate::grid::{ByteReader, TokenGrid};
use crate::quant::quantize_dequantize_slice;
use crate::rng::{tags, RngStream};
use crate::tome::{self, MergePlan};

const WEIGHT_MAGIC: &[u8; 4] = b"MGTW";
const WEIGHT_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub width: usize,
    pub height: usize,
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub num_conditions: u32,
    /// The first `joint_layers` blocks are treated as multi-modal (joint)
    /// blocks; token merging is only allowed there unless forced.
    pub joint_layers: usize,
    pub rope_base: f64,
    /// Standard deviation multiplier of the output head at initialization.
    pub output_scale: f64,
    /// Log-normal spread of norm gains at initialization; 0 gives unit gains.
    /// Positive values produce outlier channels with uneven activation ranges.
    pub gain_spread: f64,
    /// Multiplier on the query/key projection std at initialization; larger
    /// values give sharper, more position-dependent attention.
    pub qk_gain: f64,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            vocab: 64,
            d_model: 32,
            heads: 4,
            layers: 2,
            mlp_hidden: 128,
            num_conditions: 4,
            joint_layers: 1,
            rope_base: ROPE_BASE,
            output_scale: 4.0,
            gain_spread: 0.0,
            qk_gain: 1.0,
            seed: 7,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.vocab == 0 {
            return invalid("transformer grid and vocabulary must be non-empty");
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return invalid(format!("d_model must be even, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 || (self.d_model / self.heads) % 2 != 0 {
            return invalid(format!(
                "d_model {} must split into {} heads of even width",
                self.d_model, self.heads
            ));
        }
        if self.layers == 0 || self.mlp_hidden == 0 || self.num_conditions == 0 {
            return invalid("layers, mlp_hidden and num_conditions must be positive");
        }
        if self.joint_layers > self.layers {
            return invalid("joint_layers cannot exceed layers");
        }
        if !(self.rope_base > 0.0) || !self.output_scale.is_finite() {
            return invalid("rope_base must be positive and output_scale finite");
        }
        if !(self.gain_spread >= 0.0 && self.gain_spread.is_finite()) {
            return invalid("gain_spread must be finite and non-negative");
        }
        if !(self.qk_gain > 0.0 && self.qk_gain.is_finite()) {
            return invalid("qk_gain must be positive and finite");
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.width * self.height
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Number of linear layers: four per block plus the output head.
    pub fn linear_count(&self) -> usize {
        4 * self.layers + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Linear {
    pub(crate) out: usize,
    pub(crate) inp: usize,
    /// Row-major `out x inp`; row `o` is output channel `o`.
    pub(crate) w: Vec<f32>,
    pub(crate) b: Vec<f32>,
}

impl Linear {
    fn init(out: usize, inp: usize, std: f64, rng: &mut RngStream) -> Self {
        let w = (0..out * inp).map(|_| (std * rng.normal()) as f32).collect();
        Self { out, inp, w, b: vec![0.0; out] }
    }

    fn apply(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut y = vec![0.0; n * self.out];
        for t in 0..n {
            let xi = &x[t * self.inp..(t + 1) * self.inp];
            let yo = &mut y[t * self.out..(t + 1) * self.out];
            for (o, yv) in yo.iter_mut().enumerate() {
                let row = &self.w[o * self.inp..(o + 1) * self.inp];
                let mut acc = self.b[o] as f64;
                for (w, v) in row.iter().zip(xi) {
                    acc += *w as f64 * v;
                }
                *yv = acc;
            }
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Norm {
    g: Vec<f32>,
    b: Vec<f32>,
}

impl Norm {
    fn new(d: usize) -> Self {
        Self { g: vec![1.0; d], b: vec![0.0; d] }
    }

    fn init(d: usize, spread: f64, rng: &mut RngStream) -> Self {
        if spread == 0.0 {
            return Self::new(d);
        }
        Self { g: (0..d).map(|_| (spread * rng.normal()).exp() as f32).collect(), b: vec![0.0; d] }
    }

    fn apply(&self, x: &[f64], n: usize) -> Vec<f64> {
        let d = self.g.len();
        let mut y = vec![0.0; n * d];
        for t in 0..n {
            let xi = &x[t * d..(t + 1) * d];
            let mean = xi.iter().sum::<f64>() / d as f64;
            let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..d {
                y[t * d + c] = (xi[c] - mean) * inv * self.g[c] as f64 + self.b[c] as f64;
            }
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1: Norm,
    qkv: Linear,
    attn_out: Linear,
    ln2: Norm,
    up: Linear,
    down: Linear,
}

/// How merged tokens obtain their rotary matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeMerge {
    /// Elementwise mean of the group's rotation matrices.
    #[default]
    Average,
    /// Reuse the surviving destination token's own matrix (negative control).
    Destination,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TomeSettings {
    pub ratio: f64,
    pub rope: RopeMerge,
    /// Also merge in single-stream (non-joint) blocks.
    pub force_all_layers: bool,
}

impl Default for TomeSettings {
    fn default() -> Self {
        Self { ratio: 0.0, rope: RopeMerge::Average, force_all_layers: false }
    }
}

/// Collects the input activations of every linear layer.
#[derive(Clone, Debug, Default)]
pub struct ActivationRecorder {
    pub values: Vec<Vec<f64>>,
}

impl ActivationRecorder {
    pub fn new(layers: usize) -> Self {
        Self { values: vec![Vec::new(); layers] }
    }
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Per linear layer: `Some(scale)` fake-quantizes that layer's input.
    pub act_scales: Option<&'a [Option<f64>]>,
    pub act_bits: u32,
    pub tome: Option<&'a TomeSettings>,
    pub recorder: Option<&'a mut ActivationRecorder>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Tokens seen by attention in each block.
    pub attention_tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyTransformer {
    cfg: TransformerConfig,
    tok_emb: Vec<f32>,
    cond_emb: Vec<f32>,
    blocks: Vec<Block>,
    ln_f: Norm,
    head: Linear,
}

impl TinyTransformer {
    /// Seeded random initialization; identical seeds give identical weights.
    pub fn new(cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut rng = RngStream::new(cfg.seed, tags::INIT);
        let tok_emb = (0..(cfg.vocab + 1) * d).map(|_| rng.normal() as f32).collect();
        let cond_emb = (0..(cfg.num_conditions as usize + 1) * d).map(|_| rng.normal() as f32).collect();
        let std_in = |n: usize| 1.0 / (n as f64).sqrt();
        let spread = cfg.gain_spread;
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                ln1: Norm::init(d, spread, &mut rng),
                qkv: {
                    let mut l = Linear::init(3 * d, d, std_in(d), &mut rng);
                    let g = cfg.qk_gain as f32;
                    l.w[..2 * d * d].iter_mut().for_each(|w| *w *= g);
                    l
                },
                attn_out: Linear::init(d, d, std_in(d), &mut rng),
                ln2: Norm::init(d, spread, &mut rng),
                up: Linear::init(cfg.mlp_hidden, d, std_in(d), &mut rng),
                down: Linear::init(d, cfg.mlp_hidden, std_in(cfg.mlp_hidden), &mut rng),
            })
            .collect();
        let ln_f = Norm::init(d, spread, &mut rng);
        let head = Linear::init(cfg.vocab, d, cfg.output_scale * std_in(d), &mut rng);
        Ok(Self { ln_f, head, tok_emb, cond_emb, blocks, cfg })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn is_joint(&self, layer: usize) -> bool {
        layer < self.cfg.joint_layers
    }

    /// Names of the linear layers in forward order.
    pub fn linear_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.cfg.linear_count());
        for l in 0..self.cfg.layers {
            for part in ["qkv", "attn_out", "mlp_up", "mlp_down"] {
                names.push(format!("block{l}.{part}"));
            }
        }
        names.push("head".to_string());
        names
    }

    pub(crate) fn linear(&self, idx: usize) -> &Linear {
        let (l, part) = (idx / 4, idx % 4);
        if l == self.cfg.layers {
            return &self.head;
        }
        let b = &self.blocks[l];
        match part {
            0 => &b.qkv,
            1 => &b.attn_out,
            2 => &b.up,
            _ => &b.down,
        }
    }

    pub(crate) fn linear_mut(&mut self, idx: usize) -> &mut Linear {
        let (l, part) = (idx / 4, idx % 4);
        if l == self.cfg.layers {
            return &mut self.head;
        }
        let b = &mut self.blocks[l];
        match part {
            0 => &mut b.qkv,
            1 => &mut b.attn_out,
            2 => &mut b.up,
            _ => &mut b.down,
        }
    }

    fn tensors(&self) -> Vec<&Vec<f32>> {
        let mut t = vec![&self.tok_emb, &self.cond_emb];
        for b in &self.blocks {
            t.extend([
                &b.ln1.g, &b.ln1.b, &b.qkv.w, &b.qkv.b, &b.attn_out.w, &b.attn_out.b, &b.ln2.g, &b.ln2.b,
                &b.up.w, &b.up.b, &b.down.w, &b.down.b,
            ]);
        }
        t.extend([&self.ln_f.g, &self.ln_f.b, &self.head.w, &self.head.b]);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut t = vec![&mut self.tok_emb, &mut self.cond_emb];
        for b in &mut self.blocks {
            t.extend([
                &mut b.ln1.g,
                &mut b.ln1.b,
                &mut b.qkv.w,
                &mut b.qkv.b,
                &mut b.attn_out.w,
                &mut b.attn_out.b,
                &mut b.ln2.g,
                &mut b.ln2.b,
                &mut b.up.w,
                &mut b.up.b,
                &mut b.down.w,
                &mut b.down.b,
            ]);
        }
        t.extend([&mut self.ln_f.g, &mut self.ln_f.b, &mut self.head.w, &mut self.head.b]);
        t
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Weight-file encoding: magic, version, architecture header, then every
    /// tensor as little-endian `f32` in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.cfg;
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        for v in [
            c.vocab,
            c.width,
            c.height,
            c.d_model,
            c.heads,
            c.layers,
            c.mlp_hidden,
            c.num_conditions as usize,
            c.joint_layers,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.rope_base.to_le_bytes());
        out.extend_from_slice(&c.output_scale.to_le_bytes());
        out.extend_from_slice(&c.gain_spread.to_le_bytes());
        out.extend_from_slice(&c.qk_gain.to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(WEIGHT_MAGIC)?;
        r.version()?;
        let mut h = [0usize; 9];
        for v in h.iter_mut() {
            *v = r.u32()? as usize;
        }
        let rope_base = r.f64()?;
        let output_scale = r.f64()?;
        let gain_spread = r.f64()?;
        let qk_gain = r.f64()?;
        let seed = (r.u32()? as u64) | ((r.u32()? as u64) << 32);
        let cfg = TransformerConfig {
            vocab: h[0],
            width: h[1],
            height: h[2],
            d_model: h[3],
            heads: h[4],
            layers: h[5],
            mlp_hidden: h[6],
            num_conditions: h[7] as u32,
            joint_layers: h[8],
            rope_base,
            output_scale,
            gain_spread,
            qk_gain,
            seed,
        };
        let header_end = r.offset;
        cfg.validate().map_err(|e| crate::Error::Decode { offset: header_end, message: e.to_string() })?;
        let mut model = Self::new(cfg)?;
        for t in model.tensors_mut() {
            for v in t.iter_mut() {
                *v = r.f32()?;
            }
        }
        r.finish()?;
        Ok(model)
    }

    fn embed(&self, grid: &TokenGrid, condition: u32, t: f64) -> Result<Vec<f64>> {
        let c = &self.cfg;
        if grid.width() != c.width || grid.height() != c.height || grid.vocab() != c.vocab {
            return invalid(format!(
                "grid {}x{} (V={}) does not match model {}x{} (V={})",
                grid.width(),
                grid.height(),
                grid.vocab(),
                c.width,
                c.height,
                c.vocab
            ));
        }
        let cond_row = if condition == NULL_CONDITION {
            c.num_conditions as usize
        } else if condition < c.num_conditions {
            condition as usize
        } else {
            return invalid(format!("condition {condition} unknown to the model"));
        };
        let d = c.d_model;
        let half = d / 2;
        let time: Vec<f64> = (0..d)
            .map(|i| {
                let k = i % half;
                let freq = (-(ROPE_BASE.ln()) * k as f64 / half as f64).exp();
                let angle = 1000.0 * t * freq;
                if i < half {
                    angle.sin()
                } else {
                    angle.cos()
                }
            })
            .collect();
        let cond = &self.cond_emb[cond_row * d..(cond_row + 1) * d];
        let mut x = vec![0.0; grid.len() * d];
        for (pos, &cell) in grid.cells().iter().enumerate() {
            let tok = &self.tok_emb[cell as usize * d..(cell as usize + 1) * d];
            for i in 0..d {
                x[pos * d + i] = tok[i] as f64 + cond[i] as f64 + time[i];
            }
        }
        Ok(x)
    }

    /// Rotation table `(cos, sin)` per token and per head pair.
    fn rotations(&self, n: usize) -> Vec<(f64, f64)> {
        let dh = self.cfg.head_dim();
        let pairs = dh / 2;
        let mut rot = Vec::with_capacity(n * pairs);
        for j in 0..n {
            for k in 0..pairs {
                let (s, c) = (j as f64 * rope_theta(k, dh, self.cfg.rope_base)).sin_cos();
                rot.push((c, s));
            }
        }
        rot
    }

    fn rotate(&self, x: &mut [f64], rot: &[(f64, f64)], n: usize) {
        let d = self.cfg.d_model;
        let dh = self.cfg.head_dim();
        let pairs = dh / 2;
        for t in 0..n {
            for h in 0..self.cfg.heads {
                for k in 0..pairs {
                    let (c, s) = rot[t * pairs + k];
                    let i = t * d + h * dh + 2 * k;
                    let (a, b) = (x[i], x[i + 1]);
                    x[i] = c * a - s * b;
                    x[i + 1] = s * a + c * b;
                }
            }
        }
    }

    fn attention(&self, q: &[f64], k: &[f64], v: &[f64], n: usize) -> Vec<f64> {
        let d = self.cfg.d_model;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; n];
        for h in 0..self.cfg.heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k[j * d + off..j * d + off + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, s) in scores.iter().enumerate() {
                    let w = s / sum;
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
        out
    }

    fn hook(&self, idx: usize, x: &mut [f64], opts: &mut ForwardOptions<'_>) {
        if let Some(rec) = opts.recorder.as_deref_mut() {
            rec.values[idx].extend_from_slice(x);
        }
        if let Some(Some(scale)) = opts.act_scales.and_then(|s| s.get(idx)) {
            quantize_dequantize_slice(x, opts.act_bits, *scale);
        }
    }

    /// Full forward pass with optional quantization, merging and recording.
    pub fn forward_with(
        &self,
        grid: &TokenGrid,
        condition: u32,
        t: f64,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<(PredictorOutput, ForwardStats)> {
        check_time(t)?;
        if let Some(scales) = opts.act_scales {
            if scales.len() != self.cfg.linear_count() {
                return invalid("activation scale table does not match the model's linear layers");
            }
        }
        if let Some(tm) = opts.tome {
            if !(0.0..1.0).contains(&tm.ratio) {
                return invalid(format!("merge ratio must lie in [0, 1), got {}", tm.ratio));
            }
        }
        let n = grid.len();
        let d = self.cfg.d_model;
        let mut x = self.embed(grid, condition, t)?;
        let base_rot = self.rotations(n);
        let mut stats = ForwardStats::default();

        for (l, block) in self.blocks.iter().enumerate() {
            let mut h = block.ln1.apply(&x, n);
            self.hook(4 * l, &mut h, opts);
            let qkv = block.qkv.apply(&h, n);
            let mut q = vec![0.0; n * d];
            let mut k = vec![0.0; n * d];
            let mut v = vec![0.0; n * d];
            for tkn in 0..n {
                let row = &qkv[tkn * 3 * d..(tkn + 1) * 3 * d];
                q[tkn * d..(tkn + 1) * d].copy_from_slice(&row[..d]);
                k[tkn * d..(tkn + 1) * d].copy_from_slice(&row[d..2 * d]);
                v[tkn * d..(tkn + 1) * d].copy_from_slice(&row[2 * d..]);
            }

            let plan: Option<MergePlan> = match opts.tome {
                Some(tm) if tm.ratio > 0.0 && (self.is_joint(l) || tm.force_all_layers) => {
                    let p = tome::build_merge_plan(&k, n, d, tm.ratio)?;
                    (p.merge_count() > 0).then_some(p)
                }
                _ => None,
            };

            let mut o = match &plan {
                None => {
                    self.rotate(&mut q, &base_rot, n);
                    self.rotate(&mut k, &base_rot, n);
                    stats.attention_tokens.push(n);
                    let mut a = self.attention(&q, &k, &v, n);
                    self.hook(4 * l + 1, &mut a, opts);
                    block.attn_out.apply(&a, n)
                }
                Some(p) => {
                    let m = p.survivor_count();
                    let mut qm = tome::merge(&q, d, p)?;
                    let mut km = tome::merge(&k, d, p)?;
                    let vm = tome::merge(&v, d, p)?;
                    let rope = opts.tome.map(|t| t.rope).unwrap_or_default();
                    let rot = merged_rotations(&base_rot, self.cfg.head_dim() / 2, p, rope);
                    self.rotate(&mut qm, &rot, m);
                    self.rotate(&mut km, &rot, m);
                    stats.attention_tokens.push(m);
                    let mut a = self.attention(&qm, &km, &vm, m);
                    self.hook(4 * l + 1, &mut a, opts);
                    let om = block.attn_out.apply(&a, m);
                    tome::unmerge(&om, d, p)?
                }
            };
            for (xv, ov) in x.iter_mut().zip(o.drain(..)) {
                *xv += ov;
            }

            let mut h2 = block.ln2.apply(&x, n);
            self.hook(4 * l + 2, &mut h2, opts);
            let mut up = block.up.apply(&h2, n);
            up.iter_mut().for_each(|u| *u = gelu(*u));
            self.hook(4 * l + 3, &mut up, opts);
            let down = block.down.apply(&up, n);
            for (xv, dv) in x.iter_mut().zip(down) {
                *xv += dv;
            }
        }

        let mut hf = self.ln_f.apply(&x, n);
        self.hook(4 * self.cfg.layers, &mut hf, opts);
        let logits = self.head.apply(&hf, n);
        Ok((PredictorOutput::new(n, self.cfg.vocab, logits)?, stats))
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Rotation table for the reduced sequence of a merge plan.
fn merged_rotations(base: &[(f64, f64)], pairs: usize, plan: &MergePlan, mode: RopeMerge) -> Vec<(f64, f64)> {
    let m = plan.survivor_count();
    let mut rot = vec![(0.0, 0.0); m * pairs];
    match mode {
        RopeMerge::Destination => {
            for (slot, &orig) in plan.survivors().iter().enumerate() {
                rot[slot * pairs..(slot + 1) * pairs].copy_from_slice(&base[orig * pairs..(orig + 1) * pairs]);
            }
        }
        RopeMerge::Average => {
            let counts = plan.multiplicities();
            for (orig, &slot) in plan.slots().iter().enumerate() {
                for k in 0..pairs {
                    let (c, s) = base[orig * pairs + k];
                    let r = &mut rot[slot * pairs + k];
                    r.0 += c;
                    r.1 += s;
                }
            }
            for (slot, &cnt) in counts.iter().enumerate() {
                for r in &mut rot[slot * pairs..(slot + 1) * pairs] {
                    r.0 /= cnt as f64;
                    r.1 /= cnt as f64;
                }
            }
        }
    }
    rot
}

impl Predictor for TinyTransformer {
    fn vocab(&self) -> usize {
        self.cfg.vocab
    }

    fn predict(&self, grid: &TokenGrid, condition: u32, t: f64) -> Result<PredictorOutput> {
        Ok(self.forward_with(grid, condition, t, &mut ForwardOptions::default())?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TransformerConfig {
        TransformerConfig { width: 4, height: 4, vocab: 16, ..Default::default() }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = TinyTransformer::new(small()).unwrap();
        let b = TinyTransformer::new(small()).unwrap();
        assert_eq!(a, b);
        let c = TinyTransformer::new(TransformerConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let m = TinyTransformer::new(small()).unwrap();
        let mut g = TokenGrid::new(4, 4, 16).unwrap();
        g.set(3, 5).unwrap();
        let a = m.predict(&g, 1, 0.25).unwrap();
        let b = m.predict(&g, 1, 0.25).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.positions(), 16);
        assert_eq!(a.vocab(), 16);
        assert!(a.logits().iter().all(|v| v.is_finite()));
        assert_ne!(a, m.predict(&g, NULL_CONDITION, 0.25).unwrap());
        assert_ne!(a, m.predict(&g, 1, 0.75).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = TinyTransformer::new(small()).unwrap();
        let g = TokenGrid::new(4, 4, 16).unwrap();
        assert!(m.predict(&g, 4, 0.0).is_err());
        assert!(m.predict(&g, 0, 1.5).is_err());
        assert!(m.predict(&TokenGrid::new(2, 8, 16).unwrap(), 0, 0.0).is_err());
        assert!(TinyTransformer::new(TransformerConfig { d_model: 30, ..small() }).is_err());
        assert!(TinyTransformer::new(TransformerConfig { heads: 3, ..small() }).is_err());
    }

    #[test]
    fn weight_file_roundtrip() {
        let m = TinyTransformer::new(small()).unwrap();
        let bytes = m.to_bytes();
        let back = TinyTransformer::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(TinyTransformer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(m.linear_names().len(), 9);
    }

    #[test]
    fn recorder_sees_every_linear_input() {
        let m = TinyTransformer::new(small()).unwrap();
        let g = TokenGrid::new(4, 4, 16).unwrap();
        let mut rec = ActivationRecorder::new(9);
        let (out, stats) = m
            .forward_with(&g, 0, 0.0, &mut ForwardOptions { recorder: Some(&mut rec), ..Default::default() })
            .unwrap();
        assert_eq!(out, m.predict(&g, 0, 0.0).unwrap());
        assert_eq!(stats.attention_tokens, vec![16, 16]);
        assert_eq!(rec.values[0].len(), 16 * 32);
        assert_eq!(rec.values[3].len(), 16 * 128);
    }
}
