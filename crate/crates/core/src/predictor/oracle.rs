use std::collections::BTreeMap;

use super::{check_time, Predictor, PredictorOutput, NULL_CONDITION};
use crate::error::{invalid, Result};
use crate::grid::{ProbField, TokenGrid};
use crate::rng::RngStream;

const LOG_FLOOR: f64 = 1e-300;

/// A predictor with exactly known, grid-independent per-position marginals.
///
/// Each condition owns a fixed [`ProbField`]; the logits it returns are the
/// log marginals, so the sampler's behaviour under it can be checked against
/// brute-force enumeration.
#[derive(Clone, Debug)]
pub struct FactorizedOracle {
    width: usize,
    height: usize,
    vocab: usize,
    conditions: BTreeMap<u32, ProbField>,
    null: ProbField,
}

fn renormalized(field: &ProbField) -> ProbField {
    let mut f = field.clone();
    for pos in 0..f.positions() {
        let row = f.row_mut(pos);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    f
}

impl FactorizedOracle {
    /// `null` defaults to the mean of the conditional marginals.
    pub fn new(
        width: usize,
        height: usize,
        conditions: BTreeMap<u32, ProbField>,
        null: Option<ProbField>,
    ) -> Result<Self> {
        let k = width * height;
        let first = match conditions.values().next() {
            Some(f) => f,
            None => return invalid("oracle needs at least one condition"),
        };
        let vocab = first.vocab();
        if conditions.contains_key(&NULL_CONDITION) {
            return invalid("condition id u32::MAX is reserved for the unconditional branch");
        }
        for (id, f) in &conditions {
            if f.positions() != k || f.vocab() != vocab {
                return invalid(format!(
                    "condition {id}: field is {}x{}, expected {k}x{vocab}",
                    f.positions(),
                    f.vocab()
                ));
            }
        }
        let null = match null {
            Some(n) => {
                if n.positions() != k || n.vocab() != vocab {
                    return invalid("null marginals have the wrong shape");
                }
                n
            }
            None => {
                let mut data = vec![0.0; k * vocab];
                for f in conditions.values() {
                    for (d, p) in data.iter_mut().zip(f.data()) {
                        *d += p / conditions.len() as f64;
                    }
                }
                ProbField::new(k, vocab, data)?
            }
        };
        Ok(Self {
            width,
            height,
            vocab,
            conditions: conditions.iter().map(|(&id, f)| (id, renormalized(f))).collect(),
            null: renormalized(&null),
        })
    }

    /// Single condition `0` with uniform marginals.
    pub fn uniform(width: usize, height: usize, vocab: usize) -> Self {
        let field = ProbField::uniform(width * height, vocab);
        Self::new(width, height, BTreeMap::from([(0, field)]), None).expect("uniform oracle is valid")
    }

    /// Random marginals for conditions `0..num_conditions`: each row is the
    /// softmax of i.i.d. Gaussian logits scaled by `sharpness`.
    pub fn synthetic(
        width: usize,
        height: usize,
        vocab: usize,
        num_conditions: u32,
        sharpness: f64,
        seed: u64,
    ) -> Result<Self> {
        if width == 0 || height == 0 || vocab == 0 || num_conditions == 0 {
            return invalid("synthetic oracle needs positive dimensions and conditions");
        }
        let k = width * height;
        let root = RngStream::new(seed, 0);
        let conditions = (0..num_conditions)
            .map(|c| {
                let mut rng = root.derive(c as u64);
                let logits: Vec<f64> = (0..k * vocab).map(|_| sharpness * rng.normal()).collect();
                (c, ProbField::from_logits(k, vocab, &logits))
            })
            .collect();
        Self::new(width, height, conditions, None)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn marginals(&self, condition: u32) -> Result<&ProbField> {
        if condition == NULL_CONDITION {
            return Ok(&self.null);
        }
        match self.conditions.get(&condition) {
            Some(f) => Ok(f),
            None => invalid(format!("condition {condition} unknown to the oracle")),
        }
    }

    pub fn condition_ids(&self) -> Vec<u32> {
        self.conditions.keys().copied().collect()
    }
}

impl Predictor for FactorizedOracle {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn predict(&self, grid: &TokenGrid, condition: u32, t: f64) -> Result<PredictorOutput> {
        check_time(t)?;
        if grid.width() != self.width || grid.height() != self.height || grid.vocab() != self.vocab {
            return invalid(format!(
                "grid {}x{} (V={}) does not match oracle {}x{} (V={})",
                grid.width(),
                grid.height(),
                grid.vocab(),
                self.width,
                self.height,
                self.vocab
            ));
        }
        let field = self.marginals(condition)?;
        let logits = field.data().iter().map(|p| p.max(LOG_FLOOR).ln()).collect();
        PredictorOutput::new(field.positions(), self.vocab, logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_are_flat() {
        let o = FactorizedOracle::uniform(3, 2, 5);
        let mut g = TokenGrid::new(3, 2, 5).unwrap();
        g.set(1, 4).unwrap();
        let out = o.predict(&g, 0, 0.3).unwrap();
        for p in 0..6 {
            let row = out.row(p);
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn softmax_recovers_marginals() {
        let f = ProbField::new(1, 2, vec![0.9, 0.1]).unwrap();
        let o = FactorizedOracle::new(1, 1, BTreeMap::from([(0, f)]), None).unwrap();
        let g = TokenGrid::new(1, 1, 2).unwrap();
        let p = o.predict(&g, 0, 0.0).unwrap().softmax();
        assert!((p.row(0)[0] - 0.9).abs() < 1e-12);
        assert!((p.row(0)[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn synthetic_roundtrips_through_softmax() {
        let o = FactorizedOracle::synthetic(4, 4, 16, 3, 2.0, 11).unwrap();
        let g = TokenGrid::new(4, 4, 16).unwrap();
        for c in [0, 1, 2, NULL_CONDITION] {
            let p = o.predict(&g, c, 0.5).unwrap().softmax();
            let m = o.marginals(c).unwrap();
            for (a, b) in p.data().iter().zip(m.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_marginal_stays_finite() {
        let f = ProbField::new(1, 2, vec![1.0, 0.0]).unwrap();
        let o = FactorizedOracle::new(1, 1, BTreeMap::from([(0, f)]), None).unwrap();
        let g = TokenGrid::new(1, 1, 2).unwrap();
        let p = o.predict(&g, 0, 0.0).unwrap().softmax();
        assert_eq!(p.row(0)[0], 1.0);
    }

    #[test]
    fn unknown_condition_rejected() {
        let o = FactorizedOracle::uniform(2, 2, 3);
        let g = TokenGrid::new(2, 2, 3).unwrap();
        assert!(o.predict(&g, 5, 0.0).is_err());
        assert!(o.predict(&g, NULL_CONDITION, 0.0).is_ok());
        let wrong = TokenGrid::new(3, 2, 3).unwrap();
        assert!(o.predict(&wrong, 0, 0.0).is_err());
    }
}
