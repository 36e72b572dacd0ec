//! Consecutive-step KL divergence and resampling from the normalized
//! absolute difference of two distributions.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::ProbField;
use crate::rng::RngStream;
use crate::sampler::gumbel_select;

pub const PROB_FLOOR: f64 = 1e-10;
/// Below this total absolute difference the difference distribution is undefined.
pub const DIFF_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifferentialConfig {
    /// Percentage of newly predicted positions to resample.
    pub z: f64,
}

impl Default for DifferentialConfig {
    fn default() -> Self {
        Self { z: 75.0 }
    }
}

impl DifferentialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.z) {
            return invalid(format!("z must lie in [0, 100], got {}", self.z));
        }
        Ok(())
    }
}

/// Floors every entry at [`PROB_FLOOR`] and renormalizes.
pub fn floor_renormalize(row: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = row.iter().map(|p| p.max(PROB_FLOOR)).collect();
    let s: f64 = floored.iter().sum();
    floored.into_iter().map(|p| p / s).collect()
}

fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    let p = floor_renormalize(p);
    let q = floor_renormalize(q);
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn check_shapes(a: &ProbField, b: &ProbField) -> Result<()> {
    if a.positions() != b.positions() || a.vocab() != b.vocab() {
        return invalid(format!(
            "shape mismatch: {}x{} vs {}x{}",
            a.positions(),
            a.vocab(),
            b.positions(),
            b.vocab()
        ));
    }
    Ok(())
}

/// `KL(p_j || p_prev_j)` for every position `j`.
pub fn kl_set(p: &ProbField, p_prev: &ProbField) -> Result<Vec<f64>> {
    check_shapes(p, p_prev)?;
    Ok((0..p.positions()).map(|j| kl_row(p.row(j), p_prev.row(j))).collect())
}

/// KL restricted to `positions`.
pub fn kl_at(p: &ProbField, p_prev: &ProbField, positions: &[usize]) -> Result<Vec<f64>> {
    check_shapes(p, p_prev)?;
    Ok(positions.iter().map(|&j| kl_row(p.row(j), p_prev.row(j))).collect())
}

/// `|p - q| / sum|p - q|` over floored fields; `None` when the two rows agree.
pub fn difference_distribution(p: &[f64], q: &[f64]) -> Option<Vec<f64>> {
    let p = floor_renormalize(p);
    let q = floor_renormalize(q);
    let diff: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).collect();
    let s: f64 = diff.iter().sum();
    (s >= DIFF_EPS).then(|| diff.into_iter().map(|d| d / s).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resampled {
    pub chosen: Vec<(usize, u32)>,
    /// Positions redrawn from the difference distribution, with that distribution.
    pub redrawn: Vec<(usize, Vec<f64>)>,
}

/// Redraws the `floor(z% * n)` lowest-KL newly predicted positions from the
/// difference distribution. Positions where the two rows agree keep their token.
pub fn differential_resample(
    p: &ProbField,
    p_prev: &ProbField,
    chosen: &[(usize, u32)],
    z: f64,
    temperature: f64,
    rng: &mut RngStream,
) -> Result<Resampled> {
    DifferentialConfig { z }.validate()?;
    check_shapes(p, p_prev)?;
    let count = ((z / 100.0) * chosen.len() as f64 + 1e-9).floor() as usize;
    let mut out = Resampled { chosen: chosen.to_vec(), redrawn: Vec::new() };
    if count == 0 {
        return Ok(out);
    }
    let positions: Vec<usize> = chosen.iter().map(|c| c.0).collect();
    let d = kl_at(p, p_prev, &positions)?;
    let mut order: Vec<usize> = (0..chosen.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(chosen[a].0.cmp(&chosen[b].0)));
    order.truncate(count);
    order.sort_by_key(|&k| chosen[k].0);
    for k in order {
        let pos = chosen[k].0;
        if let Some(pt) = difference_distribution(p.row(pos), p_prev.row(pos)) {
            out.chosen[k].1 = gumbel_select(&pt, rng, temperature)? as u32;
            out.redrawn.push((pos, pt));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(rows: &[&[f64]]) -> ProbField {
        ProbField::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn kl_examples() {
        let a = field(&[&[0.5, 0.5]]);
        let b = field(&[&[0.25, 0.75]]);
        assert_eq!(kl_set(&a, &a).unwrap(), vec![0.0]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_set(&a, &b).unwrap()[0] - expected).abs() < 1e-15);
        assert!((expected - 0.143_841_036_225_890_1).abs() < 1e-15);
        assert!(kl_set(&a, &field(&[&[1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn difference_example() {
        // 0.6 - 0.2 and 0.8 - 0.4 differ by one ulp in binary floating point.
        let pt = difference_distribution(&[0.6, 0.4], &[0.2, 0.8]).unwrap();
        assert!(pt.iter().all(|p| (p - 0.5).abs() <= f64::EPSILON));
        assert!(difference_distribution(&[0.3, 0.7], &[0.3, 0.7]).is_none());
    }

    #[test]
    fn z_zero_and_full() {
        let p = field(&[&[0.6, 0.4], &[0.9, 0.1], &[0.5, 0.5]]);
        let q = field(&[&[0.2, 0.8], &[0.1, 0.9], &[0.5, 0.5]]);
        let chosen = vec![(0, 0), (1, 0), (2, 1)];
        let mut rng = RngStream::new(3, 3);
        let r = differential_resample(&p, &q, &chosen, 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(r.chosen, chosen);
        assert_eq!(rng.counter(), 0);
        let r = differential_resample(&p, &q, &chosen, 100.0, 1.0, &mut rng).unwrap();
        // Position 2 has identical rows and keeps its token.
        assert_eq!(r.redrawn.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(r.chosen[2], (2, 1));
        assert!(differential_resample(&p, &q, &chosen, 101.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn lowest_kl_selected_first() {
        let p = field(&[&[0.6, 0.4], &[0.9, 0.1]]);
        let q = field(&[&[0.5, 0.5], &[0.1, 0.9]]);
        let mut rng = RngStream::new(1, 1);
        let r = differential_resample(&p, &q, &[(0, 0), (1, 0)], 50.0, 1.0, &mut rng).unwrap();
        assert_eq!(r.redrawn.len(), 1);
        assert_eq!(r.redrawn[0].0, 0);
    }

    fn naive_kl(p: &[f64], q: &[f64]) -> f64 {
        let mut ps = 0.0;
        let mut qs = 0.0;
        for k in 0..p.len() {
            ps += if p[k] < PROB_FLOOR { PROB_FLOOR } else { p[k] };
            qs += if q[k] < PROB_FLOOR { PROB_FLOOR } else { q[k] };
        }
        let mut acc = 0.0;
        for k in 0..p.len() {
            let a = if p[k] < PROB_FLOOR { PROB_FLOOR } else { p[k] } / ps;
            let b = if q[k] < PROB_FLOOR { PROB_FLOOR } else { q[k] } / qs;
            acc += a * (a.ln() - b.ln());
        }
        acc
    }

    fn arb_row(v: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, v).prop_filter_map("zero row", |r| {
            let s: f64 = r.iter().sum();
            (s > 1e-6).then(|| r.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn kl_matches_naive_and_is_nonnegative(p in arb_row(6), q in arb_row(6)) {
            let a = field(&[&p]);
            let b = field(&[&q]);
            let d = kl_set(&a, &b).unwrap()[0];
            prop_assert!(d >= -1e-9);
            prop_assert!((d - naive_kl(&p, &q)).abs() <= 1e-12);
        }

        #[test]
        fn difference_distribution_sums_to_one(p in arb_row(5), q in arb_row(5)) {
            if let Some(pt) = difference_distribution(&p, &q) {
                prop_assert!((pt.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}
