//! Staged training. Stage 1 trains the network with the sampled angles
//! frozen, stage 2 also updates `lambda` at its own learning rate, stage 3
//! freezes the angles again. Learning rates decay stepwise on a global epoch
//! counter.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ase::Gating;
use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::losses::{
    cross_entropy, softmax_cross_entropy_backward, triplet_margin, triplet_margin_backward, LossWeights,
    TripletFeatures,
};
use crate::network::{backward, forward, ModelParams, NetworkConfig};
use crate::optim::{accumulate, group_norms, scale, sgd_step, OptimState};
use crate::seed::rng_for;
use crate::spt::{lambda_to_theta, lambda_to_z};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Never update `lambda`.
    pub fixed_theta: bool,
    /// Single stream on the untransformed sketch.
    pub no_spt: bool,
    /// Bypass the gate inside every extractor.
    pub no_ase: bool,
    /// Drop the triplet term.
    pub no_triplet: bool,
}

impl Ablation {
    pub fn network(&self, base: &NetworkConfig) -> NetworkConfig {
        let mut c = base.clone();
        if self.no_spt {
            c.polar = false;
        }
        if self.no_ase {
            c.gating = Gating::Bypassed;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs of the warmup, joint and refinement stages.
    pub stage_epochs: [usize; 3],
    pub base_lr: f64,
    pub spt_lr: f64,
    pub lr_decay: f64,
    /// Epochs between decays; `None` means half the total epoch count.
    pub decay_period: Option<usize>,
    pub batch_triplets: usize,
    /// Triplets per epoch; `None` means a third of the training images.
    pub triplets_per_epoch: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub model_seed: u64,
    pub sampler_seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage_epochs: [5, 10, 5],
            base_lr: 0.05,
            spt_lr: 1e-4,
            lr_decay: 0.1,
            decay_period: None,
            batch_triplets: 16,
            triplets_per_epoch: Some(256),
            momentum: 0.9,
            weight_decay: 1e-4,
            loss: LossWeights::default(),
            model_seed: 1,
            sampler_seed: 2,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.stage_epochs.iter().sum()
    }

    pub fn period(&self) -> usize {
        self.decay_period.unwrap_or(self.total_epochs() / 2).max(1)
    }

    /// Effective loss weights after the ablation switches.
    pub fn loss_weights(&self) -> LossWeights {
        let mut w = self.loss;
        if self.ablation.no_triplet {
            w.triplet_weight = 0.0;
        }
        w
    }

    /// 1-based stage of a 0-based epoch.
    pub fn stage_of(&self, epoch: usize) -> usize {
        let [e1, e2, _] = self.stage_epochs;
        if epoch < e1 {
            1
        } else if epoch < e1 + e2 {
            2
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_lr > 0.0 && self.spt_lr >= 0.0, Config, "learning rates must be positive");
        ensure!(
            self.lr_decay > 0.0 && self.lr_decay <= 1.0,
            Config,
            "decay factor must lie in (0,1], got {}",
            self.lr_decay
        );
        ensure!(self.batch_triplets >= 1, Config, "batch must hold at least one triplet");
        ensure!(self.triplets_per_epoch != Some(0), Config, "epoch must hold at least one triplet");
        ensure!(self.decay_period != Some(0), Config, "decay period must be >= 1");
        self.loss.validate()?;
        OptimState::new(self.base_lr, self.spt_lr, self.momentum, self.weight_decay).map(|_| ())
    }
}

/// `(base, spt)` learning rates at a 0-based global epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> (f64, f64) {
    let f = config.lr_decay.powi((epoch / config.period()) as i32);
    (config.base_lr * f, config.spt_lr * f)
}

/// Indices into the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TripletPlan {
    pub batches: Vec<Vec<Triplet>>,
    /// Positives that share the anchor's variant because no other variant
    /// exists for that identity.
    pub same_variant_positives: usize,
}

/// Deterministic batches for one epoch. Anchor identities cycle through a
/// shuffled identity order; the anchor image is uniform within the
/// identity, the positive is drawn from the identity's other variants when
/// there are any, the negative uniformly from all other identities' images.
pub fn make_triplet_batches(
    data: &Dataset,
    triplets: usize,
    batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<TripletPlan> {
    ensure!(batch >= 1 && triplets >= 1, Config, "batch and epoch sizes must be >= 1");
    let ids = data.identities();
    ensure!(
        ids.len() >= 2,
        Config,
        "triplets need at least 2 identities, got {}",
        ids.len()
    );
    let members: Vec<Vec<usize>> = ids
        .iter()
        .map(|&id| (0..data.len()).filter(|&i| data.meta[i].identity == id).collect())
        .collect();
    let mut rng = rng_for(seed, &[40, epoch as u64]);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut plan = TripletPlan::default();
    let mut all = Vec::with_capacity(triplets);
    while all.len() < triplets {
        order.shuffle(&mut rng);
        for &k in &order {
            if all.len() == triplets {
                break;
            }
            let own = &members[k];
            let anchor = own[rng.gen_range(0..own.len())];
            let variant = data.meta[anchor].variant;
            let cross: Vec<usize> = own.iter().copied().filter(|&i| data.meta[i].variant != variant).collect();
            let positive = if cross.is_empty() {
                plan.same_variant_positives += 1;
                let rest: Vec<usize> = own.iter().copied().filter(|&i| i != anchor).collect();
                if rest.is_empty() {
                    anchor
                } else {
                    rest[rng.gen_range(0..rest.len())]
                }
            } else {
                cross[rng.gen_range(0..cross.len())]
            };
            let mut other = rng.gen_range(0..ids.len() - 1);
            if other >= k {
                other += 1;
            }
            let theirs = &members[other];
            let negative = theirs[rng.gen_range(0..theirs.len())];
            all.push(Triplet {
                anchor,
                positive,
                negative,
            });
        }
    }
    plan.batches = all.chunks(batch).map(|c| c.to_vec()).collect();
    Ok(plan)
}

/// Per-epoch checks on every stream's angle parametrization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub z_monotone: bool,
    pub theta_in_range: bool,
    pub positive_mass: bool,
}

impl ParamCheck {
    pub fn ok(&self) -> bool {
        self.z_monotone && self.theta_in_range && self.positive_mass
    }
}

pub fn check_parametrization(model: &ModelParams) -> ParamCheck {
    let mut check = ParamCheck {
        z_monotone: true,
        theta_in_range: true,
        positive_mass: true,
    };
    for (s, stream) in model.streams.iter().enumerate() {
        let Some(p) = &stream.spt else { continue };
        let cfg = model.config.spt_config(s);
        if !(p.positive_mass() > 0.0) {
            check.positive_mass = false;
            continue;
        }
        match (lambda_to_z(&p.lambda), lambda_to_theta(&p.lambda, &cfg)) {
            (Ok(z), Ok(theta)) => {
                check.z_monotone &= z.windows(2).all(|w| w[0] <= w[1]);
                let (lo, hi) = cfg.angle_bounds();
                check.theta_in_range &= theta.iter().all(|t| (lo..=hi).contains(t));
            }
            _ => check.positive_mass = false,
        }
    }
    check
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub spt_lr: f64,
    /// Mean over images of the summed branch cross-entropies.
    pub mean_ce: f64,
    /// Mean over triplets of the hinge.
    pub mean_triplet: f64,
    /// Mean over triplets of the full objective.
    pub total: f64,
    /// Sampled angles of every stream at the end of the epoch.
    pub theta: Vec<Vec<f64>>,
    pub guard_resets: usize,
    pub same_variant_positives: usize,
    pub check: ParamCheck,
}

pub enum TrainEvent<'a> {
    Epoch(&'a EpochLog),
    StageEnd { stage: usize, model: &'a ModelParams },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub log: Vec<EpochLog>,
}

struct TripletResult {
    grads: ModelParams,
    ce: f64,
    hinge: f64,
    total: f64,
}

fn triplet_step(
    model: &ModelParams,
    data: &Dataset,
    labels: &[usize],
    t: &Triplet,
    weights: &LossWeights,
    with_lambda: bool,
) -> Result<TripletResult> {
    let idx = [t.anchor, t.positive, t.negative];
    let traces = idx
        .iter()
        .map(|&i| forward(model, data.images[i].tensor(), true))
        .collect::<Result<Vec<_>>>()?;
    let feats: Vec<Vec<f64>> = traces.iter().map(|tr| tr.features()).collect();
    let tf = TripletFeatures::new(&feats[0], &feats[1], &feats[2])?;
    let hinge = triplet_margin(&tf, weights.margin);
    let tg = triplet_margin_backward(&tf, weights.margin);
    let d_feats = [tg.anchor, tg.positive, tg.negative];
    let mut ce = 0.0;
    let mut grads: Option<ModelParams> = None;
    for (k, (&i, tr)) in idx.iter().zip(&traces).enumerate() {
        let probs = tr.branch_probs();
        let mut d_logits = Vec::with_capacity(probs.len());
        for p in &probs {
            ce += cross_entropy(p, labels[i])?;
            d_logits.push(softmax_cross_entropy_backward(p, labels[i])?);
        }
        let d_f: Vec<f64> = d_feats[k].iter().map(|g| g * weights.triplet_weight).collect();
        let g = backward(model, data.images[i].tensor(), tr, Some(&d_f), Some(&d_logits), with_lambda)?;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => accumulate(acc, &g)?,
        }
    }
    Ok(TripletResult {
        grads: grads.expect("three images"),
        ce,
        hinge,
        total: ce + weights.triplet_weight * hinge,
    })
}

fn norms_report(model: &ModelParams) -> String {
    let (net, spt) = group_norms(model);
    format!("parameter norms: network {net:.6e}, lambda {spt:.6e}")
}

/// Runs all three stages on `data`, whose identities are mapped to class
/// indices in sorted order.
pub fn train(
    mut model: ModelParams,
    data: &Dataset,
    config: &TrainConfig,
    mut observer: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let ids = data.identities();
    ensure!(
        ids.len() == model.config.classes,
        Config,
        "model has {} classes but the training set has {} identities",
        model.config.classes,
        ids.len()
    );
    let labels: Vec<usize> = data
        .meta
        .iter()
        .map(|m| ids.binary_search(&m.identity).expect("identity listed"))
        .collect();
    let weights = config.loss_weights();
    let triplets = config
        .triplets_per_epoch
        .unwrap_or_else(|| data.len().div_ceil(3))
        .max(1);
    let mut opt = OptimState::new(config.base_lr, config.spt_lr, config.momentum, config.weight_decay)?;
    let mut log = Vec::with_capacity(config.total_epochs());
    for epoch in 0..config.total_epochs() {
        let stage = config.stage_of(epoch);
        let learn_lambda = stage == 2 && !config.ablation.fixed_theta && model.has_lambda();
        let (lr, spt_lr) = lr_at(epoch, config);
        opt.lr = lr;
        opt.spt_lr = spt_lr;
        opt.spt_frozen = !learn_lambda;
        let plan = make_triplet_batches(data, triplets, config.batch_triplets, config.sampler_seed, epoch)?;
        let (mut ce_sum, mut hinge_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut guard_resets = 0;
        for (b, batch) in plan.batches.iter().enumerate() {
            let results = batch
                .par_iter()
                .map(|t| triplet_step(&model, data, &labels, t, &weights, learn_lambda))
                .collect::<Result<Vec<_>>>()?;
            let mut grads: Option<ModelParams> = None;
            let mut batch_total = 0.0;
            for r in results {
                ce_sum += r.ce;
                hinge_sum += r.hinge;
                total_sum += r.total;
                batch_total += r.total;
                match &mut grads {
                    None => grads = Some(r.grads),
                    Some(acc) => accumulate(acc, &r.grads)?,
                }
            }
            if !batch_total.is_finite() {
                let members: Vec<String> = batch
                    .iter()
                    .map(|t| format!("({},{},{})", t.anchor, t.positive, t.negative))
                    .collect();
                return Err(Error::NonFinite(format!(
                    "loss {batch_total} in epoch {epoch}, batch {b}; triplets {}; {}",
                    members.join(" "),
                    norms_report(&model)
                )));
            }
            let mut grads = grads.expect("nonempty batch");
            scale(&mut grads, 1.0 / batch.len() as f64);
            sgd_step(&mut model, &grads, &mut opt)?;
            for s in &mut model.streams {
                if let Some(p) = &mut s.spt {
                    if p.guard_degenerate() {
                        guard_resets += 1;
                    }
                }
            }
        }
        let n = triplets as f64;
        let entry = EpochLog {
            epoch,
            stage,
            lr,
            spt_lr,
            mean_ce: ce_sum / (3.0 * n),
            mean_triplet: hinge_sum / n,
            total: total_sum / n,
            theta: model
                .streams
                .iter()
                .enumerate()
                .filter_map(|(s, st)| {
                    st.spt
                        .as_ref()
                        .map(|p| lambda_to_theta(&p.lambda, &model.config.spt_config(s)))
                })
                .collect::<Result<_>>()?,
            guard_resets,
            same_variant_positives: plan.same_variant_positives,
            check: check_parametrization(&model),
        };
        if !entry.check.ok() {
            return Err(Error::Degenerate(format!(
                "angle parametrization invariant violated after epoch {epoch}: {:?}",
                entry.check
            )));
        }
        observer(TrainEvent::Epoch(&entry))?;
        log.push(entry);
        if epoch + 1 == config.total_epochs() || config.stage_of(epoch + 1) != stage {
            observer(TrainEvent::StageEnd { stage, model: &model })?;
        }
    }
    Ok(TrainOutcome { model, log })
}

/// `epoch,stage,lr,mean_ce,mean_triplet,total`.
pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,stage,lr,mean_ce,mean_triplet,total\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.stage, e.lr, e.mean_ce, e.mean_triplet, e.total
        ));
    }
    out
}

/// `stream,index,theta` rows for one epoch.
pub fn theta_csv(theta: &[Vec<f64>]) -> String {
    let mut out = String::from("stream,index,theta\n");
    for (s, t) in theta.iter().enumerate() {
        for (i, v) in t.iter().enumerate() {
            out.push_str(&format!("{s},{i},{v}\n"));
        }
    }
    out
}
