//! Per-branch cross-entropy, the triplet margin loss on concatenated
//! features, and their weighted total.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

static CLAMPED_LOGS: AtomicU64 = AtomicU64::new(0);

/// Number of cross-entropy evaluations whose target probability was clamped.
pub fn clamped_log_count() -> u64 {
    CLAMPED_LOGS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub margin: f64,
    /// Weight of the triplet term, `eta`.
    pub triplet_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            margin: 5.0,
            triplet_weight: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.margin > 0.0, Config, "triplet margin must be > 0, got {}", self.margin);
        ensure!(
            self.triplet_weight >= 0.0,
            Config,
            "triplet weight must be >= 0, got {}",
            self.triplet_weight
        );
        Ok(())
    }
}

/// `-log(prob[target])`.
pub fn cross_entropy(prob: &[f64], target: usize) -> Result<f64> {
    ensure!(
        target < prob.len(),
        Contract,
        "target class {target} out of range for {} classes",
        prob.len()
    );
    let p = prob[target];
    if p < PROB_FLOOR {
        CLAMPED_LOGS.fetch_add(1, Ordering::Relaxed);
        return Ok(-PROB_FLOOR.ln());
    }
    Ok(-p.ln())
}

/// Gradient of `cross_entropy(softmax(logits), target)` with respect to the
/// logits: `prob - onehot(target)`.
pub fn softmax_cross_entropy_backward(prob: &[f64], target: usize) -> Result<Vec<f64>> {
    ensure!(
        target < prob.len(),
        Contract,
        "target class {target} out of range for {} classes",
        prob.len()
    );
    let mut g = prob.to_vec();
    g[target] -= 1.0;
    Ok(g)
}

#[derive(Debug, Clone, Copy)]
pub struct TripletFeatures<'a> {
    pub anchor: &'a [f64],
    pub positive: &'a [f64],
    pub negative: &'a [f64],
}

impl<'a> TripletFeatures<'a> {
    pub fn new(anchor: &'a [f64], positive: &'a [f64], negative: &'a [f64]) -> Result<Self> {
        ensure!(!anchor.is_empty(), Contract, "triplet features must be nonempty");
        ensure!(
            anchor.len() == positive.len() && anchor.len() == negative.len(),
            Contract,
            "triplet feature lengths differ: {} / {} / {}",
            anchor.len(),
            positive.len(),
            negative.len()
        );
        Ok(TripletFeatures {
            anchor,
            positive,
            negative,
        })
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(0, m + |a - p| - |a - n|)`.
pub fn triplet_margin(t: &TripletFeatures<'_>, margin: f64) -> f64 {
    (margin + euclidean(t.anchor, t.positive) - euclidean(t.anchor, t.negative)).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Gradients of [`triplet_margin`]. Zero when the hinge is inactive or sits
/// exactly on its boundary; the norm gradient at a zero distance is zero.
pub fn triplet_margin_backward(t: &TripletFeatures<'_>, margin: f64) -> TripletGrads {
    let n = t.anchor.len();
    let mut grads = TripletGrads {
        anchor: vec![0.0; n],
        positive: vec![0.0; n],
        negative: vec![0.0; n],
    };
    let d_ap = euclidean(t.anchor, t.positive);
    let d_an = euclidean(t.anchor, t.negative);
    if margin + d_ap - d_an <= 0.0 {
        return grads;
    }
    if d_ap > 0.0 {
        for i in 0..n {
            let u = (t.anchor[i] - t.positive[i]) / d_ap;
            grads.anchor[i] += u;
            grads.positive[i] -= u;
        }
    }
    if d_an > 0.0 {
        for i in 0..n {
            let u = (t.anchor[i] - t.negative[i]) / d_an;
            grads.anchor[i] -= u;
            grads.negative[i] += u;
        }
    }
    grads
}

/// `sum of branch cross-entropies + eta * triplet`, for one image's
/// `expected_branches` distributions.
pub fn total_loss(
    branch_probs: &[Vec<f64>],
    target: usize,
    triplet: &TripletFeatures<'_>,
    weights: &LossWeights,
    expected_branches: usize,
) -> Result<f64> {
    ensure!(
        branch_probs.len() == expected_branches,
        Contract,
        "expected {expected_branches} branch distributions, got {}",
        branch_probs.len()
    );
    let mut ce = 0.0;
    for p in branch_probs {
        ce += cross_entropy(p, target)?;
    }
    Ok(ce + weights.triplet_weight * triplet_margin(triplet, weights.margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_gradcheck, GradcheckConfig};
    use crate::ops::softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        let ce = cross_entropy(&[0.25; 4], 2).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!((ce - 1.386294).abs() < 1e-6);
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn clamped_log_is_counted() {
        let before = clamped_log_count();
        let ce = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!(ce.is_finite() && ce > 690.0);
        assert!(clamped_log_count() > before);
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-6,
            ..Default::default()
        };
        for _ in 0..10 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let target = rng.gen_range(0..5);
            let g = softmax_cross_entropy_backward(&softmax(&logits), target).unwrap();
            let rep = finite_diff_gradcheck(
                |l| cross_entropy(&softmax(l), target).unwrap(),
                &logits,
                &g,
                &cfg,
            )
            .unwrap();
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn triplet_examples() {
        let a = [0.0, 0.0];
        let t = TripletFeatures::new(&a, &[3.0, 4.0], &[-4.0, 3.0]).unwrap();
        assert_eq!(triplet_margin(&t, 5.0), 5.0);
        let t = TripletFeatures::new(&a, &[3.0, 4.0], &[6.0, 8.0]).unwrap();
        assert_eq!(triplet_margin(&t, 5.0), 0.0);
        assert_eq!(triplet_margin_backward(&t, 5.0).anchor, vec![0.0, 0.0]);
        let t = TripletFeatures::new(&a, &[3.0, 4.0], &[0.0, 1.0]).unwrap();
        assert_eq!(triplet_margin(&t, 5.0), 9.0);
        let t = TripletFeatures::new(&a, &[1.0, 0.0], &[20.0, 0.0]).unwrap();
        assert_eq!(triplet_margin(&t, 5.0), 0.0);
    }

    #[test]
    fn coincident_points_have_zero_norm_gradient() {
        let a = [1.0, 2.0];
        let t = TripletFeatures::new(&a, &a, &[1.0, 3.0]).unwrap();
        let g = triplet_margin_backward(&t, 5.0);
        assert_eq!(g.positive, vec![0.0, 0.0]);
        assert!(g.anchor.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-5,
            ..Default::default()
        };
        for _ in 0..20 {
            let v = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            let (a, p, n) = (v(&mut rng), v(&mut rng), v(&mut rng));
            let t = TripletFeatures::new(&a, &p, &n).unwrap();
            let g = triplet_margin_backward(&t, 1.0);
            let loss = |x: &[f64]| triplet_margin(&TripletFeatures::new(x, &p, &n).unwrap(), 1.0);
            if (1.0 + euclidean(&a, &p) - euclidean(&a, &n)).abs() < 1e-3 {
                continue;
            }
            let rep = finite_diff_gradcheck(loss, &a, &g.anchor, &cfg).unwrap();
            assert!(rep.passed, "{rep:?}");
            let loss = |x: &[f64]| triplet_margin(&TripletFeatures::new(&a, &p, x).unwrap(), 1.0);
            let rep = finite_diff_gradcheck(loss, &n, &g.negative, &cfg).unwrap();
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn total_loss_examples() {
        let a = [0.0, 0.0];
        let far = TripletFeatures::new(&a, &[0.0, 1.0], &[0.0, 100.0]).unwrap();
        let probs = vec![vec![0.5, 0.5], vec![0.25, 0.75]];
        let w0 = LossWeights {
            margin: 5.0,
            triplet_weight: 0.0,
        };
        let near = TripletFeatures::new(&a, &[3.0, 4.0], &[0.0, 1.0]).unwrap();
        let ce = 2f64.ln() + (1.0 / 0.75f64).ln();
        assert!((total_loss(&probs, 1, &near, &w0, 2).unwrap() - ce).abs() < 1e-12);
        let perfect = vec![vec![0.0, 1.0]; 3];
        assert_eq!(total_loss(&perfect, 1, &far, &LossWeights::default(), 3).unwrap(), 0.0);
        let full = total_loss(&probs, 1, &near, &LossWeights::default(), 2).unwrap();
        assert!((full - (ce + 10.0 * 9.0)).abs() < 1e-12);
        assert!(total_loss(&probs, 1, &near, &w0, 3).is_err());
    }

    #[test]
    fn mismatched_triplet_lengths_rejected() {
        assert!(TripletFeatures::new(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
        assert!(TripletFeatures::new(&[], &[], &[]).is_err());
    }
}
