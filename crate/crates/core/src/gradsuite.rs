//! Finite-difference checks of every differentiable operation, each over
//! many seeded random instances. Instances whose kink points (ReLU
//! pre-activations, bilinear breakpoints, the hinge) lie within a small gap
//! of the evaluation point are redrawn and counted as rejected.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ase::ase_init;
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_gradcheck, GradcheckConfig};
use crate::losses::{cross_entropy, softmax_cross_entropy_backward, triplet_margin, triplet_margin_backward, TripletFeatures};
use crate::network::{backward, build_model, forward, ModelParams, NetworkConfig, DEFAULT_STREAMS};
use crate::ops::{
    conv2d, conv2d_backward, linear, linear_backward, relu, relu_backward, sigmoid, sigmoid_backward, softmax,
    stripe_avgpool, stripe_avgpool_backward,
};
use crate::optim::{assign_flat, flatten};
use crate::seed::rng_for;
use crate::spt::{
    build_grid, lambda_to_z, spt_backward, spt_forward, to_pixel, z_backward, PolarTransform, SamplingGrid, SptConfig,
    SptParams,
};
use crate::tensor::Tensor;

/// Minimum distance of any kink argument from its breakpoint.
const KINK_GAP: f64 = 1e-3;
const MAX_ATTEMPTS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Ops,
    Ase,
    Losses,
    Spt,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 5] = [Scope::Ops, Scope::Ase, Scope::Losses, Scope::Spt, Scope::Model];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Ase => "ase",
            Scope::Losses => "losses",
            Scope::Spt => "spt",
            Scope::Model => "model",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck scope {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub master_seed: u64,
    /// Negates every analytic gradient; the suite must then fail.
    pub flip_sign: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: 20,
            master_seed: 0,
            flip_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub scope: Scope,
    pub seeds: usize,
    /// Instances redrawn because a kink was too close.
    pub rejected: usize,
    pub worst_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<7} {:<18} seeds={} rejected={} worst_rel={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.scope.name(),
            self.name,
            self.seeds,
            self.rejected,
            self.worst_rel_error,
            self.tolerance
        )
    }
}

struct Instance {
    point: Vec<f64>,
    analytic: Vec<f64>,
    loss: Box<dyn FnMut(&[f64]) -> f64>,
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Option<Instance>>;

struct Check {
    name: &'static str,
    scope: Scope,
    config: GradcheckConfig,
    build: Builder,
}

const SMOOTH: GradcheckConfig = GradcheckConfig {
    step: 1e-4,
    tolerance: 1e-5,
    floor: 1e-8,
};

const POLAR: GradcheckConfig = GradcheckConfig {
    step: 1e-6,
    tolerance: 1e-4,
    floor: 1e-8,
};

fn checks() -> Vec<Check> {
    let c = |name, scope, config, build| Check {
        name,
        scope,
        config,
        build,
    };
    vec![
        c("conv2d", Scope::Ops, SMOOTH, conv_instance as Builder),
        c("linear", Scope::Ops, SMOOTH, linear_instance),
        c("relu", Scope::Ops, SMOOTH, relu_instance),
        c("sigmoid", Scope::Ops, SMOOTH, sigmoid_instance),
        c("stripe_avgpool", Scope::Ops, SMOOTH, pool_instance),
        c("ase_forward", Scope::Ase, SMOOTH, ase_instance),
        c("softmax_ce", Scope::Losses, SMOOTH, ce_instance),
        c("triplet_margin", Scope::Losses, SMOOTH, triplet_instance),
        c("z_backward", Scope::Spt, SMOOTH, z_instance),
        c("spt_backward", Scope::Spt, POLAR, spt_theta_instance),
        c("spt_lambda_chain", Scope::Spt, POLAR, spt_lambda_instance),
        c("micro_model", Scope::Model, POLAR, model_instance),
    ]
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).expect("shape matches data")
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn clear_of_kink(v: f64) -> bool {
    v == 0.0 || v.abs() > KINK_GAP
}

fn conv_instance(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    let (ishape, kshape) = ([2, 5, 6], [3, 2, 3, 3]);
    let input = uniform(rng, 60, -1.0, 1.0);
    let kernels = uniform(rng, 54, -1.0, 1.0);
    let out = conv2d(&tensor(&ishape, &input), &tensor(&kshape, &kernels), stride, pad)?;
    let probe = uniform(rng, out.len(), -1.0, 1.0);
    let g = conv2d_backward(
        &tensor(&ishape, &input),
        &tensor(&kshape, &kernels),
        stride,
        pad,
        &tensor(out.shape(), &probe),
    )?;
    let mut analytic = g.input.data().to_vec();
    analytic.extend_from_slice(g.param("kernels").expect("kernel grad").data());
    Ok(Some(Instance {
        point: [input, kernels].concat(),
        analytic,
        loss: Box::new(move |p| {
            let out = conv2d(&tensor(&ishape, &p[..60]), &tensor(&kshape, &p[60..]), stride, pad).unwrap();
            inner(out.data(), &probe)
        }),
    }))
}

fn linear_instance(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let (rows, cols) = (4, 5);
    let point = uniform(rng, cols + rows * cols + rows, -1.0, 1.0);
    let probe = uniform(rng, rows, -1.0, 1.0);
    let split = move |p: &[f64]| (p[..cols].to_vec(), tensor(&[rows, cols], &p[cols..cols + rows * cols]), p[cols + rows * cols..].to_vec());
    let (x, w, _) = split(&point);
    let g = linear_backward(&x, &w, true, &probe)?;
    let mut analytic = g.input.data().to_vec();
    analytic.extend_from_slice(g.param("weight").expect("weight grad").data());
    analytic.extend_from_slice(g.param("bias").expect("bias grad").data());
    Ok(Some(Instance {
        point,
        analytic,
        loss: Box::new(move |p| {
            let (x, w, b) = split(p);
            inner(&linear(&x, &w, Some(&b)).unwrap(), &probe)
        }),
    }))
}

fn relu_instance(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let x = uniform(rng, 12, -2.0, 2.0);
    if !x.iter().all(|&v| v.abs() > KINK_GAP) {
        return Ok(None);
    }
    let probe = uniform(rng, 12, -1.0, 1.0);
    let analytic = relu_backward(&tensor(&[12], &x), &tensor(&[12], &probe))?.into_data();
    Ok(Some(Instance {
        point: x,
        analytic,
        loss: Box::new(move |p| inner(relu(&tensor(&[12], p)).data(), &probe)),
    }))
}

fn sigmoid_instance(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let x = uniform(rng, 12, -4.0, 4.0);
    let probe = uniform(rng, 12, -1.0, 1.0);
    let analytic = sigmoid_backward(&tensor(&[12], &x), &tensor(&[12], &probe))?.into_data();
    Ok(Some(Instance {
        point: x,
        analytic,
        loss: Box::new(move |p| inner(sigmoid(&tensor(&[12], p)).data(), &probe)),
    }))
}

fn pool_instance(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let (shape, stripes) = ([3, 6, 4], 3);
    let fmap = uniform(rng, 72, -1.0, 1.0);
    let probe: Vec<Vec<f64>> = (0..stripes).map(|_| uniform(rng, 3, -1.0, 1.0)).collect();
    let analytic = stripe_avgpool_backward(&shape, stripes, &probe)?.into_data();
    Ok(Some(Instance {
        point: fmap,
        analytic,
        loss: Box::new(move |p| {
            let pooled = stripe_avgpool(&tensor(&shape, p), stripes).unwrap();
            pooled.iter().zip(&probe).map(|(a, b)| inner(a, b)).sum()
        }),
    }))
}

fn ase_instance(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let (width, reduction) = (6, 2);
    let mut params = ase_init(width, reduction, rng)?;
    params.adapter_bias = uniform(rng, width, -0.5, 0.5);
    let a = uniform(rng, width, -1.0, 1.0);
    if !linear(&a, &params.reduce, None)?.into_iter().all(clear_of_kink) {
        return Ok(None);
    }
    let probe = uniform(rng, width, -1.0, 1.0);
    let g = crate::ase::ase_backward(&a, &params, &probe)?;
    let mut analytic = g.input.data().to_vec();
    for name in ["reduce", "expand", "adapter_weight", "adapter_bias"] {
        analytic.extend_from_slice(g.param(name).expect("ase grad").data());
    }
    let shapes = [
        params.reduce.shape().to_vec(),
        params.expand.shape().to_vec(),
        params.adapter_weight.shape().to_vec(),
    ];
    let mut point = a;
    point.extend_from_slice(params.reduce.data());
    point.extend_from_slice(params.expand.data());
    point.extend_from_slice(params.adapter_weight.data());
    point.extend_from_slice(&params.adapter_bias);
    Ok(Some(Instance {
        point,
        analytic,
        loss: Box::new(move |p| {
            let mut q = params.clone();
            let mut at = width;
            for (t, s) in [&mut q.reduce, &mut q.expand, &mut q.adapter_weight].into_iter().zip(&shapes) {
                let n: usize = s.iter().product();
                *t = tensor(s, &p[at..at + n]);
                at += n;
            }
            q.adapter_bias = p[at..].to_vec();
            inner(&crate::ase::ase_forward(&p[..width], &q).unwrap(), &probe)
        }),
    }))
}

fn ce_instance(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let logits = uniform(rng, 6, -3.0, 3.0);
    let target = rng.gen_range(0..6);
    let analytic = softmax_cross_entropy_backward(&softmax(&logits), target)?;
    Ok(Some(Instance {
        point: logits,
        analytic,
        loss: Box::new(move |p| cross_entropy(&softmax(p), target).unwrap()),
    }))
}

fn triplet_instance(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let margin = 5.0;
    let n = 6;
    let a = uniform(rng, n, -1.0, 1.0);
    let (sp, sn) = (rng.gen_range(0.1..2.0), rng.gen_range(0.1..6.0));
    let p: Vec<f64> = a.iter().map(|v| v + rng.gen_range(-sp..sp)).collect();
    let q: Vec<f64> = a.iter().map(|v| v + rng.gen_range(-sn..sn)).collect();
    let t = TripletFeatures::new(&a, &p, &q)?;
    let (dap, dan) = (crate::losses::euclidean(&a, &p), crate::losses::euclidean(&a, &q));
    if (margin + dap - dan).abs() < KINK_GAP || dap < KINK_GAP || dan < KINK_GAP {
        return Ok(None);
    }
    let g = triplet_margin_backward(&t, margin);
    Ok(Some(Instance {
        point: [a, p, q].concat(),
        analytic: [g.anchor, g.positive, g.negative].concat(),
        loss: Box::new(move |x| {
            let t = TripletFeatures::new(&x[..n], &x[n..2 * n], &x[2 * n..]).unwrap();
            triplet_margin(&t, margin)
        }),
    }))
}

fn z_instance(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let lambda: Vec<f64> = (0..8)
        .map(|_| {
            let v = rng.gen_range(0.02..1.0);
            if rng.gen_bool(0.25) {
                -v
            } else {
                v
            }
        })
        .collect();
    if !lambda.iter().any(|&v| v > 0.0) {
        return Ok(None);
    }
    let probe = uniform(rng, 8, -1.0, 1.0);
    let analytic = z_backward(&lambda, &probe)?;
    Ok(Some(Instance {
        point: lambda,
        analytic,
        loss: Box::new(move |p| inner(&lambda_to_z(p).unwrap(), &probe)),
    }))
}

/// Breakpoint margin over the rows that move with `lambda`; the last row sits
/// at the range end for every `lambda`.
fn moving_margin(grid: &SamplingGrid, side: usize) -> f64 {
    grid.coords[..(grid.rows - 1) * grid.cols]
        .iter()
        .map(|&(x, y)| {
            let (c, r) = to_pixel(x, y, side, side);
            (c - c.round()).abs().min((r - r.round()).abs())
        })
        .fold(f64::INFINITY, f64::min)
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Tensor {
    tensor(&[side, side], &uniform(rng, side * side, 0.0, 1.0))
}

fn stream_config(rng: &mut ChaCha8Rng) -> SptConfig {
    let (a, b) = DEFAULT_STREAMS[rng.gen_range(0..DEFAULT_STREAMS.len())];
    SptConfig::new(8, 8, 2.0, a, b)
}

fn spt_theta_instance(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let config = stream_config(rng);
    let (lo, hi) = config.angle_bounds();
    let mut theta = uniform(rng, config.rows, lo + 0.01, hi - 0.01);
    theta.sort_by(f64::total_cmp);
    if config.start_angle > config.end_angle {
        theta.reverse();
    }
    let image = random_image(rng, 10);
    let grid = build_grid(&theta, &config)?;
    if grid.breakpoint_margin(10, 10) < KINK_GAP {
        return Ok(None);
    }
    let probe = uniform(rng, config.rows * config.cols, -1.0, 1.0);
    let analytic = spt_backward(&image, &grid, &tensor(&[config.rows, config.cols], &probe))?;
    Ok(Some(Instance {
        point: theta,
        analytic,
        loss: Box::new(move |p| {
            let grid = build_grid(p, &config).unwrap();
            inner(spt_forward(&image, &grid).unwrap().data(), &probe)
        }),
    }))
}

fn spt_lambda_instance(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let config = stream_config(rng);
    let params = SptParams {
        lambda: uniform(rng, config.rows, 0.02, 0.1),
    };
    let image = random_image(rng, 10);
    let transform = PolarTransform::new(config, &params)?;
    if moving_margin(&transform.grid, 10) < KINK_GAP {
        return Ok(None);
    }
    let probe = uniform(rng, config.rows * config.cols, -1.0, 1.0);
    let analytic = transform.backward(&params, &image, &tensor(&[config.rows, config.cols], &probe))?;
    Ok(Some(Instance {
        point: params.lambda,
        analytic,
        loss: Box::new(move |p| {
            let t = PolarTransform::new(config, &SptParams { lambda: p.to_vec() }).unwrap();
            inner(t.apply(&image).unwrap().data(), &probe)
        }),
    }))
}

pub fn micro_network() -> NetworkConfig {
    NetworkConfig {
        image_side: 10,
        polar_rows: 8,
        polar_cols: 8,
        stripes: 2,
        stage_widths: vec![2, 2],
        embed_width: 2,
        classes: 2,
        ..NetworkConfig::default()
    }
}

fn model_clear_of_kinks(model: &ModelParams, image: &Tensor) -> Result<bool> {
    let trace = forward(model, image, true)?;
    let side = model.config.image_side;
    for (stream, t) in model.streams.iter().zip(&trace.streams) {
        if let Some(tr) = &t.transform {
            if moving_margin(&tr.grid, side) < KINK_GAP {
                return Ok(false);
            }
        }
        if !t.stage_pre.iter().all(|s| s.data().iter().copied().all(clear_of_kink)) {
            return Ok(false);
        }
        for (a, b) in t.stripes.iter().zip(&stream.branches) {
            if !linear(a, &b.ase.reduce, None)?.into_iter().all(clear_of_kink) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn model_instance(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let c = micro_network();
    let mut model = build_model(&c, rng.gen())?;
    for s in &mut model.streams {
        if let Some(p) = &mut s.spt {
            p.lambda.iter_mut().for_each(|v| *v += rng.gen_range(0.0..0.03));
        }
    }
    let image = random_image(rng, c.image_side);
    if !model_clear_of_kinks(&model, &image)? {
        return Ok(None);
    }
    let probe = uniform(rng, c.feature_len(), -1.0, 1.0);
    let target = rng.gen_range(0..c.classes);
    let trace = forward(&model, &image, true)?;
    let d_logits = trace
        .branch_probs()
        .iter()
        .map(|p| softmax_cross_entropy_backward(p, target))
        .collect::<Result<Vec<_>>>()?;
    let g = backward(&model, &image, &trace, Some(&probe), Some(&d_logits), true)?;
    let point = flatten(&model);
    let mut work = model;
    Ok(Some(Instance {
        point,
        analytic: flatten(&g),
        loss: Box::new(move |p| {
            assign_flat(&mut work, p).unwrap();
            let t = forward(&work, &image, true).unwrap();
            let ce: f64 = t.branch_probs().iter().map(|q| cross_entropy(q, target).unwrap()).sum();
            ce + inner(&t.features(), &probe)
        }),
    }))
}

fn run_check(index: usize, check: &Check, options: &SuiteOptions) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    let mut rejected = 0;
    for seed in 0..options.seeds {
        let mut rng = rng_for(options.master_seed, &[50, index as u64, seed as u64]);
        let mut instance = None;
        for _ in 0..MAX_ATTEMPTS {
            if let Some(i) = (check.build)(&mut rng)? {
                instance = Some(i);
                break;
            }
            rejected += 1;
        }
        let mut inst = instance.ok_or_else(|| {
            Error::Degenerate(format!(
                "{}: no kink-free instance in {MAX_ATTEMPTS} draws for seed {seed}",
                check.name
            ))
        })?;
        if options.flip_sign {
            inst.analytic.iter_mut().for_each(|g| *g = -*g);
        }
        let report = finite_diff_gradcheck(&mut inst.loss, &inst.point, &inst.analytic, &check.config)?;
        worst = if report.max_rel_error.is_nan() { f64::NAN } else { worst.max(report.max_rel_error) };
    }
    Ok(CheckOutcome {
        name: check.name,
        scope: check.scope,
        seeds: options.seeds,
        rejected,
        worst_rel_error: worst,
        tolerance: check.config.tolerance,
        passed: worst < check.config.tolerance,
    })
}

/// Runs every check whose scope is listed.
pub fn run_suite(scopes: &[Scope], options: &SuiteOptions) -> Result<Vec<CheckOutcome>> {
    checks()
        .iter()
        .enumerate()
        .filter(|(_, c)| scopes.contains(&c.scope))
        .map(|(i, c)| run_check(i, c, options))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_roundtrip() {
        for s in Scope::ALL {
            assert_eq!(s.name().parse::<Scope>().unwrap(), s);
        }
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn scope_filter_selects_only_that_scope() {
        let opts = SuiteOptions {
            seeds: 2,
            ..Default::default()
        };
        let out = run_suite(&[Scope::Losses], &opts).unwrap();
        assert_eq!(out.iter().map(|c| c.name).collect::<Vec<_>>(), vec!["softmax_ce", "triplet_margin"]);
        assert!(out.iter().all(|c| c.passed), "{out:?}");
    }

    #[test]
    fn sign_flip_fails_every_check() {
        let opts = SuiteOptions {
            seeds: 2,
            flip_sign: true,
            ..Default::default()
        };
        let out = run_suite(&[Scope::Ops, Scope::Ase, Scope::Losses, Scope::Spt], &opts).unwrap();
        assert!(out.iter().all(|c| !c.passed), "{out:?}");
    }

    #[test]
    fn outcome_line_format() {
        let o = CheckOutcome {
            name: "relu",
            scope: Scope::Ops,
            seeds: 20,
            rejected: 1,
            worst_rel_error: 2.5e-9,
            tolerance: 1e-5,
            passed: true,
        };
        assert_eq!(o.to_string(), "PASS ops     relu               seeds=20 rejected=1 worst_rel=2.500e-9 tol=1e-5");
    }
}
