//! Symmetric fake quantization and magnitude-driven secondary calibration.
//!
//! Weights are quantized per output channel, activations per tensor. Only
//! the inputs of linear layers are activation-quantized, and only on the
//! layers a [`QuantSpec`] flags.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::TokenGrid;
use crate::predictor::{
    ActivationRecorder, ForwardOptions, Predictor, PredictorOutput, TinyTransformer,
};
use crate::rng::{tags, RngStream};

pub const WEIGHT_BITS: u32 = 4;
pub const ACT_BITS: u32 = 8;
/// Clip ratios tried by the secondary range search.
pub const CLIP_GRID: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const DEFAULT_FRACTION: f64 = 1.0 / 3.0;

fn qmax(bits: u32) -> f64 {
    ((1u64 << (bits - 1)) - 1) as f64
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 4 || bits == 8 {
        Ok(())
    } else {
        invalid(format!("bit width must be 4 or 8, got {bits}"))
    }
}

/// Unchecked in-place fake quantization. `scale` must be positive.
pub(crate) fn quantize_dequantize_slice(xs: &mut [f64], bits: u32, scale: f64) {
    let m = qmax(bits);
    for x in xs {
        *x = (*x / scale).round().clamp(-m, m) * scale;
    }
}

/// `clamp(round(x / scale), -qmax, qmax) * scale` elementwise.
pub fn quantize_dequantize(xs: &[f64], bits: u32, scale: f64) -> Result<Vec<f64>> {
    check_bits(bits)?;
    if !(scale > 0.0) || !scale.is_finite() {
        return invalid(format!("scale must be positive and finite, got {scale}"));
    }
    if let Some(i) = xs.iter().position(|v| !v.is_finite()) {
        return invalid(format!("non-finite input at index {i}"));
    }
    let mut out = xs.to_vec();
    quantize_dequantize_slice(&mut out, bits, scale);
    Ok(out)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Statistic used to rank layers by activation magnitude.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeStat {
    #[default]
    Peak,
    Percentile999,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCalib {
    pub name: String,
    /// Peak absolute activation.
    pub peak: f64,
    /// 99.9th percentile of absolute activation.
    pub p999: f64,
    pub min: f64,
    pub max: f64,
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl LayerCalib {
    pub fn magnitude(&self, stat: MagnitudeStat) -> f64 {
        match stat {
            MagnitudeStat::Peak => self.peak,
            MagnitudeStat::Percentile999 => self.p999,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibRecord {
    pub layers: Vec<LayerCalib>,
}

/// A calibration input: grid, condition and time.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibInput {
    pub grid: TokenGrid,
    pub condition: u32,
    pub t: f64,
}

impl CalibInput {
    /// Time is taken as the unmasked fraction of the grid.
    pub fn from_grid(grid: TokenGrid, condition: u32) -> Self {
        let t = 1.0 - grid.masked_count() as f64 / grid.len() as f64;
        Self { grid, condition, t }
    }
}

/// Float forwards over the calibration set, recording every linear input.
pub fn primary_calibrate(model: &TinyTransformer, inputs: &[CalibInput]) -> Result<CalibRecord> {
    if inputs.is_empty() {
        return invalid("calibration set is empty");
    }
    let names = model.linear_names();
    let mut rec = ActivationRecorder::new(names.len());
    for inp in inputs {
        model.forward_with(
            &inp.grid,
            inp.condition,
            inp.t,
            &mut ForwardOptions { recorder: Some(&mut rec), ..Default::default() },
        )?;
    }
    let layers = names
        .into_iter()
        .zip(rec.values)
        .map(|(name, samples)| {
            let mut abs: Vec<f64> = samples.iter().map(|v| v.abs()).collect();
            abs.sort_by(f64::total_cmp);
            let peak = abs.last().copied().unwrap_or(0.0);
            let idx = ((abs.len() as f64 * 0.999).ceil() as usize).clamp(1, abs.len().max(1)) - 1;
            let p999 = abs.get(idx).copied().unwrap_or(0.0);
            let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
            let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            LayerCalib { name, peak, p999, min, max, samples }
        })
        .collect();
    Ok(CalibRecord { layers })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub name: String,
    pub act_quant: bool,
    /// Clip ratio applied to the recorded peak.
    pub clip: f64,
    /// Per-tensor activation scale; present when `act_quant` is set.
    pub act_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    /// `None` leaves weights in float.
    pub weight_bits: Option<u32>,
    /// Per-channel clip-ratio search for weight scales instead of `max / qmax`.
    #[serde(default)]
    pub weight_range_search: bool,
    pub act_bits: u32,
    pub layers: Vec<LayerQuant>,
}

impl QuantSpec {
    /// Float weights and no activation quantization.
    pub fn identity(model: &TinyTransformer) -> Self {
        Self {
            weight_bits: None,
            weight_range_search: false,
            act_bits: ACT_BITS,
            layers: model
                .linear_names()
                .into_iter()
                .map(|name| LayerQuant { name, act_quant: false, clip: 1.0, act_scale: None })
                .collect(),
        }
    }

    /// W4 weights with no activation quantization.
    pub fn weights_only(model: &TinyTransformer) -> Self {
        Self { weight_bits: Some(WEIGHT_BITS), ..Self::identity(model) }
    }

    pub fn flagged(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.act_quant).map(|(i, _)| i).collect()
    }

    pub fn validate_for(&self, model: &TinyTransformer) -> Result<()> {
        if let Some(b) = self.weight_bits {
            check_bits(b)?;
        }
        check_bits(self.act_bits)?;
        let names = model.linear_names();
        if names.len() != self.layers.len() || names.iter().zip(&self.layers).any(|(n, l)| *n != l.name) {
            return invalid("quant spec layers do not match the model");
        }
        for l in &self.layers {
            if !(l.clip > 0.0) {
                return invalid(format!("layer {}: clip must be positive", l.name));
            }
            if l.act_quant && !l.act_scale.is_some_and(|s| s > 0.0 && s.is_finite()) {
                return invalid(format!("layer {}: flagged without a positive scale", l.name));
            }
        }
        Ok(())
    }

    fn act_scales(&self) -> Vec<Option<f64>> {
        self.layers.iter().map(|l| if l.act_quant { l.act_scale } else { None }).collect()
    }
}

fn act_scale(peak: f64, clip: f64, bits: u32) -> f64 {
    if peak > 0.0 {
        clip * peak / qmax(bits)
    } else {
        1.0
    }
}

/// Exhaustive clip-ratio search minimizing quantization MSE on `samples`.
pub fn search_clip(samples: &[f64], peak: f64, bits: u32) -> f64 {
    let mut best = (f64::INFINITY, 1.0);
    let mut buf = samples.to_vec();
    for &clip in &CLIP_GRID {
        buf.copy_from_slice(samples);
        quantize_dequantize_slice(&mut buf, bits, act_scale(peak, clip, bits));
        let e = mse(samples, &buf);
        if e < best.0 {
            best = (e, clip);
        }
    }
    best.1
}

fn spec_with(record: &CalibRecord, selected: &[usize], search: bool) -> QuantSpec {
    let layers = record
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let on = selected.contains(&i);
            let clip = if on && search { search_clip(&l.samples, l.peak, ACT_BITS) } else { 1.0 };
            LayerQuant {
                name: l.name.clone(),
                act_quant: on,
                clip,
                act_scale: on.then(|| act_scale(l.peak, clip, ACT_BITS)),
            }
        })
        .collect();
    QuantSpec { weight_bits: Some(WEIGHT_BITS), weight_range_search: true, act_bits: ACT_BITS, layers }
}

fn selection_count(layers: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return invalid(format!("fraction must lie in (0, 1], got {fraction}"));
    }
    Ok((fraction * layers as f64 + 1e-9).floor() as usize)
}

/// Indices of the `floor(fraction * L)` smallest-magnitude layers.
pub fn select_layers(record: &CalibRecord, fraction: f64, stat: MagnitudeStat) -> Result<Vec<usize>> {
    let n = selection_count(record.layers.len(), fraction)?;
    let mut order: Vec<usize> = (0..record.layers.len()).collect();
    order.sort_by(|&a, &b| {
        record.layers[a].magnitude(stat).total_cmp(&record.layers[b].magnitude(stat)).then(a.cmp(&b))
    });
    order.truncate(n);
    order.sort_unstable();
    Ok(order)
}

/// Flags the smallest-magnitude layers and range-searches their clip ratio.
pub fn secondary_calibrate(record: &CalibRecord, fraction: f64, stat: MagnitudeStat) -> Result<QuantSpec> {
    let selected = select_layers(record, fraction, stat)?;
    Ok(spec_with(record, &selected, true))
}

/// Baseline: a seeded random subset of the same size at clip 1.
pub fn random_fraction_spec(record: &CalibRecord, fraction: f64, seed: u64) -> Result<QuantSpec> {
    let n = selection_count(record.layers.len(), fraction)?;
    let mut rng = RngStream::new(seed, tags::CALIB);
    let mut pool: Vec<usize> = (0..record.layers.len()).collect();
    for i in 0..n {
        let j = i + rng.index(pool.len() - i);
        pool.swap(i, j);
    }
    let mut selected = pool[..n].to_vec();
    selected.sort_unstable();
    Ok(spec_with(record, &selected, false))
}

/// Per-channel weight fake quantization of every linear layer. Scales are
/// `max|w| / qmax`, or the MSE-best clip ratio of that when `range_search`.
pub fn quantize_weights(model: &TinyTransformer, bits: u32, range_search: bool) -> Result<TinyTransformer> {
    check_bits(bits)?;
    let m = qmax(bits);
    let mut q = model.clone();
    for idx in 0..model.config().linear_count() {
        let lin = q.linear_mut(idx);
        let inp = lin.inp;
        for row in lin.w.chunks_mut(inp) {
            let vals: Vec<f64> = row.iter().map(|v| *v as f64).collect();
            let peak = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if peak == 0.0 {
                continue;
            }
            let clip = if range_search { search_clip(&vals, peak, bits) } else { 1.0 };
            let scale = clip * peak / m;
            for v in row.iter_mut() {
                *v = (((*v as f64) / scale).round().clamp(-m, m) * scale) as f32;
            }
        }
    }
    Ok(q)
}

/// A model with quantized weights and per-layer activation scales.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    model: TinyTransformer,
    act_scales: Vec<Option<f64>>,
    act_bits: u32,
}

impl QuantizedModel {
    pub fn new(model: &TinyTransformer, spec: &QuantSpec) -> Result<Self> {
        spec.validate_for(model)?;
        let model = match spec.weight_bits {
            Some(b) => quantize_weights(model, b, spec.weight_range_search)?,
            None => model.clone(),
        };
        Ok(Self { model, act_scales: spec.act_scales(), act_bits: spec.act_bits })
    }

    pub fn model(&self) -> &TinyTransformer {
        &self.model
    }
}

impl Predictor for QuantizedModel {
    fn vocab(&self) -> usize {
        self.model.config().vocab
    }

    fn predict(&self, grid: &TokenGrid, condition: u32, t: f64) -> Result<PredictorOutput> {
        let mut opts =
            ForwardOptions { act_scales: Some(&self.act_scales), act_bits: self.act_bits, ..Default::default() };
        Ok(self.model.forward_with(grid, condition, t, &mut opts)?.0)
    }
}

pub fn fake_quant_forward(
    model: &TinyTransformer,
    spec: &QuantSpec,
    grid: &TokenGrid,
    condition: u32,
    t: f64,
) -> Result<PredictorOutput> {
    QuantizedModel::new(model, spec)?.predict(grid, condition, t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub weight_bytes: usize,
    pub scale_bytes: usize,
    pub other_bytes: usize,
}

impl Footprint {
    pub fn total(&self) -> usize {
        self.weight_bytes + self.scale_bytes + self.other_bytes
    }
}

/// Analytic parameter storage: quantized linear weights at `bits/8` bytes
/// plus a 4-byte scale per output channel; everything else 4 bytes.
pub fn bit_footprint(model: &TinyTransformer, spec: &QuantSpec) -> Result<Footprint> {
    spec.validate_for(model)?;
    let mut fp = Footprint { weight_bytes: 0, scale_bytes: 0, other_bytes: 0 };
    let mut linear_weights = 0;
    for idx in 0..model.config().linear_count() {
        let lin = model.linear(idx);
        linear_weights += lin.w.len();
        match spec.weight_bits {
            Some(b) => {
                fp.weight_bytes += (lin.w.len() * b as usize).div_ceil(8);
                fp.scale_bytes += 4 * lin.out;
            }
            None => fp.weight_bytes += 4 * lin.w.len(),
        }
    }
    fp.other_bytes = 4 * (model.parameter_count() - linear_weights);
    Ok(fp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::TransformerConfig;
    use proptest::prelude::*;

    fn model() -> TinyTransformer {
        TinyTransformer::new(TransformerConfig { width: 4, height: 4, vocab: 16, ..Default::default() }).unwrap()
    }

    fn record(mags: &[f64]) -> CalibRecord {
        CalibRecord {
            layers: mags
                .iter()
                .enumerate()
                .map(|(i, &m)| LayerCalib {
                    name: format!("l{i}"),
                    peak: m,
                    p999: m,
                    min: -m,
                    max: m,
                    samples: vec![m, -m / 2.0],
                })
                .collect(),
        }
    }

    #[test]
    fn examples() {
        assert_eq!(quantize_dequantize(&[0.0], 8, 0.1).unwrap(), vec![0.0]);
        let w = [0.3, -1.75, 0.9];
        let s = 1.75 / 7.0;
        assert_eq!(quantize_dequantize(&w, 4, s).unwrap()[1], -1.75);
        assert!(quantize_dequantize(&[f64::NAN], 8, 1.0).is_err());
        assert!(quantize_dequantize(&[1.0], 8, 0.0).is_err());
        assert!(quantize_dequantize(&[1.0], 3, 1.0).is_err());
    }

    #[test]
    fn selection() {
        let r = record(&[5.0, 1.0, 3.0]);
        assert_eq!(select_layers(&r, DEFAULT_FRACTION, MagnitudeStat::Peak).unwrap(), vec![1]);
        let r9 = record(&[9.0, 1.0, 4.0, 4.0, 2.0, 8.0, 7.0, 0.5, 6.0]);
        assert_eq!(select_layers(&r9, DEFAULT_FRACTION, MagnitudeStat::Peak).unwrap(), vec![1, 4, 7]);
        let spec = secondary_calibrate(&r9, DEFAULT_FRACTION, MagnitudeStat::Peak).unwrap();
        assert_eq!(spec.flagged(), vec![1, 4, 7]);
        assert_eq!(random_fraction_spec(&r9, DEFAULT_FRACTION, 3).unwrap().flagged().len(), 3);
        assert!(select_layers(&r9, 0.0, MagnitudeStat::Peak).is_err());
        // Ties resolve by layer index.
        assert_eq!(select_layers(&record(&[2.0, 1.0, 1.0]), DEFAULT_FRACTION, MagnitudeStat::Peak).unwrap(), vec![1]);
    }

    #[test]
    fn clip_search_never_worse_than_full_range() {
        let mut rng = RngStream::new(11, 0);
        let xs: Vec<f64> = (0..4096).map(|_| rng.normal()).collect();
        let peak = xs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let clip = search_clip(&xs, peak, 8);
        let err = |c: f64| mse(&xs, &quantize_dequantize(&xs, 8, act_scale(peak, c, 8)).unwrap());
        assert!(err(clip) <= err(1.0));
        assert!(CLIP_GRID.contains(&clip));
    }

    #[test]
    fn calibration_covers_every_layer() {
        let m = model();
        let g = TokenGrid::new(4, 4, 16).unwrap();
        let inputs = vec![CalibInput::from_grid(g.clone(), 0)];
        let r = primary_calibrate(&m, &inputs).unwrap();
        assert_eq!(r.layers.len(), 9);
        assert!(r.layers.iter().all(|l| l.peak >= 0.0 && l.peak >= l.p999 && !l.samples.is_empty()));
        assert_eq!(r, primary_calibrate(&m, &inputs).unwrap());
        assert!(primary_calibrate(&m, &[]).is_err());
        // Normalized inputs are bounded by construction of the layer norm.
        let ln_peak = r.layers[0].peak;
        assert!(ln_peak <= (m.config().d_model as f64).sqrt());
    }

    #[test]
    fn identity_spec_is_bit_exact() {
        let m = model();
        let mut g = TokenGrid::new(4, 4, 16).unwrap();
        g.set(0, 3).unwrap();
        let spec = QuantSpec::identity(&m);
        assert_eq!(fake_quant_forward(&m, &spec, &g, 1, 0.5).unwrap(), m.predict(&g, 1, 0.5).unwrap());
        let fp = bit_footprint(&m, &spec).unwrap();
        assert_eq!(fp.total(), 4 * m.parameter_count());
    }

    #[test]
    fn footprints() {
        let m = model();
        let float = bit_footprint(&m, &QuantSpec::identity(&m)).unwrap();
        let w4 = bit_footprint(&m, &QuantSpec::weights_only(&m)).unwrap();
        assert_eq!(w4.weight_bytes * 8, float.weight_bytes);
        assert!(w4.total() < float.total());
        assert_eq!(w4.other_bytes, float.other_bytes);
    }

    #[test]
    fn spec_mismatch_rejected() {
        let m = model();
        let mut spec = QuantSpec::identity(&m);
        spec.layers.pop();
        assert!(fake_quant_forward(&m, &spec, &TokenGrid::new(4, 4, 16).unwrap(), 0, 0.0).is_err());
        let mut spec = QuantSpec::identity(&m);
        spec.layers[0].act_quant = true;
        assert!(spec.validate_for(&m).is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = secondary_calibrate(&record(&[3.0, 1.0, 2.0]), DEFAULT_FRACTION, MagnitudeStat::Peak).unwrap();
        let back: QuantSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    proptest! {
        #[test]
        fn error_bound_and_idempotence(xs in prop::collection::vec(-100.0f64..100.0, 1..64), scale in 0.01f64..2.0, wide in any::<bool>()) {
            let bits = if wide { 8 } else { 4 };
            let once = quantize_dequantize(&xs, bits, scale).unwrap();
            let twice = quantize_dequantize(&once, bits, scale).unwrap();
            prop_assert_eq!(&once, &twice);
            for (x, q) in xs.iter().zip(&once) {
                if x.abs() <= qmax(bits) * scale {
                    prop_assert!((x - q).abs() <= scale / 2.0 + 1e-12 * scale);
                }
            }
        }
    }
}
