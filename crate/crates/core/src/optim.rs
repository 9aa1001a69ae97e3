//! SGD with classic momentum and L2 weight decay folded into the gradient:
//!
//! ```text
//! v <- momentum * v + grad + weight_decay * param
//! param <- param - lr * v
//! ```
//!
//! Parameters are split into groups so the angle parameters can use their own
//! learning rate and be frozen independently of the rest of the network.

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Network,
    Spt,
}

/// A collection of parameter slices with a stable visiting order.
pub trait Parameters {
    fn param_slices(&self) -> Vec<(ParamGroup, &[f64])>;
    fn param_slices_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])>;
}

impl Parameters for Vec<f64> {
    fn param_slices(&self) -> Vec<(ParamGroup, &[f64])> {
        vec![(ParamGroup::Network, self.as_slice())]
    }

    fn param_slices_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        vec![(ParamGroup::Network, self.as_mut_slice())]
    }
}

/// All parameters concatenated in visiting order.
pub fn flatten<P: Parameters>(params: &P) -> Vec<f64> {
    params.param_slices().into_iter().flat_map(|(_, s)| s.iter().copied()).collect()
}

/// Inverse of [`flatten`].
pub fn assign_flat<P: Parameters>(params: &mut P, flat: &[f64]) -> Result<()> {
    let mut slices = params.param_slices_mut();
    let total: usize = slices.iter().map(|(_, s)| s.len()).sum();
    ensure!(
        total == flat.len(),
        Contract,
        "{} values for {total} parameters",
        flat.len()
    );
    let mut offset = 0;
    for (_, s) in slices.iter_mut() {
        s.copy_from_slice(&flat[offset..offset + s.len()]);
        offset += s.len();
    }
    Ok(())
}

/// `dst += src`, slice by slice.
pub fn accumulate<P: Parameters>(dst: &mut P, src: &P) -> Result<()> {
    let src = src.param_slices();
    let mut dst = dst.param_slices_mut();
    ensure!(src.len() == dst.len(), Contract, "parameter layouts differ");
    for ((_, d), (_, s)) in dst.iter_mut().zip(&src) {
        ensure!(d.len() == s.len(), Contract, "parameter slice lengths differ");
        crate::tensor::add_into(d, s);
    }
    Ok(())
}

pub fn scale<P: Parameters>(params: &mut P, factor: f64) {
    for (_, s) in params.param_slices_mut() {
        s.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Euclidean norm of each group, `(network, spt)`.
pub fn group_norms<P: Parameters>(params: &P) -> (f64, f64) {
    let (mut net, mut spt) = (0.0, 0.0);
    for (g, s) in params.param_slices() {
        let sq: f64 = s.iter().map(|v| v * v).sum();
        match g {
            ParamGroup::Network => net += sq,
            ParamGroup::Spt => spt += sq,
        }
    }
    (net.sqrt(), spt.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub spt_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub spt_frozen: bool,
    velocity: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(lr: f64, spt_lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        ensure!(lr >= 0.0 && spt_lr >= 0.0, Config, "learning rates must be >= 0");
        ensure!(
            (0.0..1.0).contains(&momentum),
            Config,
            "momentum must lie in [0,1), got {momentum}"
        );
        ensure!(weight_decay >= 0.0, Config, "weight decay must be >= 0");
        Ok(OptimState {
            lr,
            spt_lr,
            momentum,
            weight_decay,
            spt_frozen: false,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    fn lr_for(&self, group: ParamGroup) -> Option<f64> {
        match group {
            ParamGroup::Network => Some(self.lr),
            ParamGroup::Spt if self.spt_frozen => None,
            ParamGroup::Spt => Some(self.spt_lr),
        }
    }
}

/// Applies one momentum step to every parameter slice of `params`.
///
/// Frozen groups are left untouched, including their velocity buffers.
pub fn sgd_step<P: Parameters>(params: &mut P, grads: &P, state: &mut OptimState) -> Result<()> {
    let grads = grads.param_slices();
    let mut slices = params.param_slices_mut();
    ensure!(
        slices.len() == grads.len(),
        Contract,
        "{} parameter slices but {} gradient slices",
        slices.len(),
        grads.len()
    );
    if state.velocity.is_empty() {
        state.velocity = slices.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
    }
    ensure!(
        state.velocity.len() == slices.len(),
        Contract,
        "optimizer state was built for {} slices, got {}",
        state.velocity.len(),
        slices.len()
    );
    for (i, ((group, param), (_, grad))) in slices.iter_mut().zip(&grads).enumerate() {
        ensure!(
            param.len() == grad.len() && param.len() == state.velocity[i].len(),
            Contract,
            "slice {i}: parameter, gradient and velocity lengths disagree"
        );
        let Some(lr) = state.lr_for(*group) else {
            continue;
        };
        let (momentum, wd) = (state.momentum, state.weight_decay);
        let velocity = &mut state.velocity[i];
        for ((p, g), v) in param.iter_mut().zip(grad.iter()).zip(velocity.iter_mut()) {
            *v = momentum * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity_without_decay() {
        let mut p = vec![1.0, -2.0];
        let g = vec![0.0, 0.0];
        let mut st = OptimState::new(0.1, 0.0, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn single_plain_step() {
        let mut p = vec![1.0];
        let mut st = OptimState::new(0.1, 0.0, 0.0, 0.0).unwrap();
        sgd_step(&mut p, &vec![1.0], &mut st).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence_by_hand() {
        // v1 = 1, p1 = 1 - 0.1 = 0.9; v2 = 0.9 + 1 = 1.9, p2 = 0.9 - 0.19 = 0.71
        let mut p = vec![1.0];
        let mut st = OptimState::new(0.1, 0.0, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &vec![1.0], &mut st).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        sgd_step(&mut p, &vec![1.0], &mut st).unwrap();
        assert!((p[0] - 0.71).abs() < 1e-15);
        assert!((st.velocity()[0][0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = vec![0.5, 1.5, -3.0];
        let g = vec![10.0, -4.0, 2.0];
        let mut st = OptimState::new(0.0, 0.0, 0.9, 1e-4).unwrap();
        for _ in 0..3 {
            sgd_step(&mut p, &g, &mut st).unwrap();
        }
        assert_eq!(p, vec![0.5, 1.5, -3.0]);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(OptimState::new(0.1, 0.0, 1.0, 0.0).is_err());
        assert!(OptimState::new(-0.1, 0.0, 0.5, 0.0).is_err());
        assert!(OptimState::new(0.1, 0.0, 0.5, -1.0).is_err());
    }

    #[test]
    fn flatten_round_trip_and_accumulate() {
        let mut p = vec![1.0, 2.0, 3.0];
        assign_flat(&mut p, &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(flatten(&p), vec![4.0, 5.0, 6.0]);
        accumulate(&mut p, &vec![1.0, 1.0, 1.0]).unwrap();
        scale(&mut p, 0.5);
        assert_eq!(p, vec![2.5, 3.0, 3.5]);
        assert!(assign_flat(&mut p, &[1.0]).is_err());
        assert_eq!(group_norms(&vec![3.0, 4.0]), (5.0, 0.0));
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let mut p = vec![1.0, 2.0];
        let mut st = OptimState::new(0.1, 0.0, 0.0, 0.0).unwrap();
        assert!(sgd_step(&mut p, &vec![1.0], &mut st).is_err());
    }
}
