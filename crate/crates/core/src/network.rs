//! The multistream model. Each stream resamples the sketch with its own polar
//! transform, runs a strided convolutional backbone, pools the feature map
//! into horizontal stripes and passes every stripe through its own gated
//! extractor and classifier head. The identity feature is the concatenation
//! of all adapted stripe vectors, stream-major.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ase::{ase_backward_with, ase_forward_with, ase_init, glorot, AseParams, Gating};
use crate::error::{ensure, Result};
use crate::ops::{
    conv2d, conv2d_backward, linear, relu, relu_backward, softmax, stripe_avgpool,
    stripe_avgpool_backward, take_param,
};
use crate::optim::{ParamGroup, Parameters};
use crate::seed::rng_for;
use crate::spt::{PolarTransform, SptConfig, SptParams};
use crate::tensor::{axpy, Tensor};

pub const DEFAULT_STREAMS: [(f64, f64); 3] = [(PI, -PI), (-PI / 4.0, -3.0 * PI / 4.0), (3.0 * PI / 4.0, PI / 4.0)];

const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub image_side: usize,
    /// Sampled angles `N` per stream.
    pub polar_rows: usize,
    /// Sampled radii `M` per stream.
    pub polar_cols: usize,
    pub max_radius: f64,
    /// `(a, b)` angle range of each stream.
    pub stream_ranges: Vec<(f64, f64)>,
    pub stripes: usize,
    pub stage_widths: Vec<usize>,
    pub kernel: usize,
    /// Stripe vector width `L`; must equal the last stage width.
    pub embed_width: usize,
    pub reduction: usize,
    pub classes: usize,
    /// `false` builds the single-stream variant on the untransformed sketch.
    pub polar: bool,
    pub gating: Gating,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            image_side: 56,
            polar_rows: 56,
            polar_cols: 56,
            max_radius: 2.0,
            stream_ranges: DEFAULT_STREAMS.to_vec(),
            stripes: 7,
            stage_widths: vec![32, 64, 128],
            kernel: 3,
            embed_width: 128,
            reduction: 2,
            classes: 20,
            polar: true,
            gating: Gating::Enabled,
        }
    }
}

fn conv_out(side: usize, kernel: usize) -> usize {
    (side + 2 * CONV_PAD - kernel) / CONV_STRIDE + 1
}

impl NetworkConfig {
    pub fn stream_count(&self) -> usize {
        if self.polar {
            self.stream_ranges.len()
        } else {
            1
        }
    }

    /// `(height, width)` of the raster entering the backbone.
    pub fn backbone_input(&self) -> (usize, usize) {
        if self.polar {
            (self.polar_rows, self.polar_cols)
        } else {
            (self.image_side, self.image_side)
        }
    }

    /// `(height, width)` of the final feature map.
    pub fn feature_map(&self) -> (usize, usize) {
        let (mut h, mut w) = self.backbone_input();
        for _ in &self.stage_widths {
            h = conv_out(h, self.kernel);
            w = conv_out(w, self.kernel);
        }
        (h, w)
    }

    pub fn branch_count(&self) -> usize {
        self.stream_count() * self.stripes
    }

    pub fn feature_len(&self) -> usize {
        self.branch_count() * self.embed_width
    }

    pub fn spt_config(&self, stream: usize) -> SptConfig {
        let (a, b) = self.stream_ranges[stream];
        SptConfig::new(self.polar_rows, self.polar_cols, self.max_radius, a, b)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.image_side >= 2, Config, "image side must be >= 2, got {}", self.image_side);
        ensure!(!self.stage_widths.is_empty(), Config, "backbone needs at least one stage");
        ensure!(
            self.stage_widths.iter().all(|&w| w >= 1),
            Config,
            "stage widths must be >= 1, got {:?}",
            self.stage_widths
        );
        ensure!(self.kernel >= 1, Config, "kernel size must be >= 1");
        ensure!(self.classes >= 2, Config, "need at least 2 classes, got {}", self.classes);
        ensure!(self.stripes >= 1, Config, "need at least one stripe");
        if self.polar {
            ensure!(!self.stream_ranges.is_empty(), Config, "need at least one stream");
            for s in 0..self.stream_ranges.len() {
                self.spt_config(s).validate()?;
            }
        }
        let last = *self.stage_widths.last().expect("nonempty");
        ensure!(
            self.embed_width == last,
            Config,
            "embedding width {} must equal the last stage width {last}",
            self.embed_width
        );
        ensure!(
            self.reduction >= 1 && self.embed_width % self.reduction == 0,
            Config,
            "embedding width {} is not divisible by reduction ratio {}",
            self.embed_width,
            self.reduction
        );
        let (mut h, mut w) = self.backbone_input();
        for _ in &self.stage_widths {
            ensure!(
                h + 2 * CONV_PAD >= self.kernel && w + 2 * CONV_PAD >= self.kernel,
                Config,
                "backbone input {h}x{w} is too small for kernel {}",
                self.kernel
            );
            h = conv_out(h, self.kernel);
            w = conv_out(w, self.kernel);
        }
        ensure!(
            h % self.stripes == 0,
            Config,
            "feature map height {h} is not divisible into {} stripes",
            self.stripes
        );
        Ok(())
    }

    /// Total number of scalar parameters, `lambda` included.
    pub fn param_count(&self) -> usize {
        let (l, c, k) = (self.embed_width, self.classes, self.kernel);
        let mut backbone = 0;
        let mut prev = 1;
        for &w in &self.stage_widths {
            backbone += w * prev * k * k;
            prev = w;
        }
        let hidden = l / self.reduction;
        let branch = 2 * hidden * l + l * l + l + c * l + c;
        let lambda = if self.polar { self.polar_rows } else { 0 };
        self.stream_count() * (lambda + backbone + self.stripes * branch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub ase: AseParams,
    /// `[C, L]`.
    pub cls_weight: Tensor,
    pub cls_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams {
    pub spt: Option<SptParams>,
    /// `[C_out, C_in, k, k]` per stage.
    pub kernels: Vec<Tensor>,
    pub branches: Vec<BranchParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: NetworkConfig,
    pub streams: Vec<StreamParams>,
}

fn he_kernels<R: Rng>(out: usize, inp: usize, k: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (inp * k * k) as f64).sqrt();
    let data = (0..out * inp * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(&[out, inp, k, k], data).expect("positive extents")
}

/// Deterministic initialization; every stream and branch draws from its own
/// seeded generator.
pub fn build_model(config: &NetworkConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let l = config.embed_width;
    let mut streams = Vec::with_capacity(config.stream_count());
    for s in 0..config.stream_count() {
        let mut rng = rng_for(seed, &[1, s as u64]);
        let mut kernels = Vec::with_capacity(config.stage_widths.len());
        let mut prev = 1;
        for &w in &config.stage_widths {
            kernels.push(he_kernels(w, prev, config.kernel, &mut rng));
            prev = w;
        }
        let mut branches = Vec::with_capacity(config.stripes);
        for b in 0..config.stripes {
            let mut rng = rng_for(seed, &[2, s as u64, b as u64]);
            let ase = ase_init(l, config.reduction, &mut rng)?;
            let cls_weight = glorot(config.classes, l, &mut rng);
            branches.push(BranchParams {
                ase,
                cls_weight,
                cls_bias: vec![0.0; config.classes],
            });
        }
        streams.push(StreamParams {
            spt: config.polar.then(|| SptParams::uniform(config.polar_rows)),
            kernels,
            branches,
        });
    }
    Ok(ModelParams {
        config: config.clone(),
        streams,
    })
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config.clone(),
            streams: self
                .streams
                .iter()
                .map(|s| StreamParams {
                    spt: s.spt.as_ref().map(|p| SptParams {
                        lambda: vec![0.0; p.lambda.len()],
                    }),
                    kernels: s.kernels.iter().map(Tensor::zeros_like).collect(),
                    branches: s
                        .branches
                        .iter()
                        .map(|b| BranchParams {
                            ase: b.ase.zeros_like(),
                            cls_weight: b.cls_weight.zeros_like(),
                            cls_bias: vec![0.0; b.cls_bias.len()],
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn has_lambda(&self) -> bool {
        self.streams.iter().any(|s| s.spt.is_some())
    }
}

impl Parameters for ModelParams {
    fn param_slices(&self) -> Vec<(ParamGroup, &[f64])> {
        let mut out = Vec::new();
        for s in &self.streams {
            if let Some(p) = &s.spt {
                out.push((ParamGroup::Spt, p.lambda.as_slice()));
            }
            for k in &s.kernels {
                out.push((ParamGroup::Network, k.data()));
            }
            for b in &s.branches {
                out.push((ParamGroup::Network, b.ase.reduce.data()));
                out.push((ParamGroup::Network, b.ase.expand.data()));
                out.push((ParamGroup::Network, b.ase.adapter_weight.data()));
                out.push((ParamGroup::Network, b.ase.adapter_bias.as_slice()));
                out.push((ParamGroup::Network, b.cls_weight.data()));
                out.push((ParamGroup::Network, b.cls_bias.as_slice()));
            }
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out = Vec::new();
        for s in &mut self.streams {
            if let Some(p) = &mut s.spt {
                out.push((ParamGroup::Spt, p.lambda.as_mut_slice()));
            }
            for k in &mut s.kernels {
                out.push((ParamGroup::Network, k.data_mut()));
            }
            for b in &mut s.branches {
                out.push((ParamGroup::Network, b.ase.reduce.data_mut()));
                out.push((ParamGroup::Network, b.ase.expand.data_mut()));
                out.push((ParamGroup::Network, b.ase.adapter_weight.data_mut()));
                out.push((ParamGroup::Network, b.ase.adapter_bias.as_mut_slice()));
                out.push((ParamGroup::Network, b.cls_weight.data_mut()));
                out.push((ParamGroup::Network, b.cls_bias.as_mut_slice()));
            }
        }
        out
    }
}

/// Activations of one stream kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StreamTrace {
    pub(crate) transform: Option<PolarTransform>,
    /// Input of every backbone stage, stage 0 being the `[1,H,W]` raster.
    pub(crate) stage_inputs: Vec<Tensor>,
    /// Convolution outputs before the ReLU.
    pub(crate) stage_pre: Vec<Tensor>,
    pub stripes: Vec<Vec<f64>>,
    pub adapted: Vec<Vec<f64>>,
    /// Empty when heads were skipped.
    pub probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub streams: Vec<StreamTrace>,
}

impl ForwardTrace {
    pub fn features(&self) -> Vec<f64> {
        self.streams
            .iter()
            .flat_map(|s| s.adapted.iter().flatten().copied())
            .collect()
    }

    /// Branch distributions in stream-major order.
    pub fn branch_probs(&self) -> Vec<Vec<f64>> {
        self.streams.iter().flat_map(|s| s.probs.iter().cloned()).collect()
    }
}

fn check_image(config: &NetworkConfig, image: &Tensor) -> Result<()> {
    ensure!(
        image.shape() == [config.image_side, config.image_side],
        Contract,
        "model expects a {0}x{0} image, got {1:?}",
        config.image_side,
        image.shape()
    );
    Ok(())
}

/// Runs the backbone of one stream on a `[H,W]` raster and returns the final
/// post-ReLU feature map.
pub fn backbone_forward(stream: &StreamParams, raster: &Tensor) -> Result<Tensor> {
    let (_, _, fmap) = backbone_trace(stream, raster)?;
    Ok(fmap)
}

fn backbone_trace(stream: &StreamParams, raster: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>, Tensor)> {
    ensure!(raster.ndim() == 2, Contract, "backbone input must be [H,W], got {:?}", raster.shape());
    let (h, w) = (raster.shape()[0], raster.shape()[1]);
    let mut x = raster.clone().reshape(&[1, h, w])?;
    let mut inputs = Vec::with_capacity(stream.kernels.len());
    let mut pre = Vec::with_capacity(stream.kernels.len());
    for k in &stream.kernels {
        let y = conv2d(&x, k, CONV_STRIDE, CONV_PAD)?;
        let next = relu(&y);
        inputs.push(x);
        pre.push(y);
        x = next;
    }
    Ok((inputs, pre, x))
}

fn stream_forward(
    config: &NetworkConfig,
    index: usize,
    stream: &StreamParams,
    image: &Tensor,
    heads: bool,
) -> Result<StreamTrace> {
    let (transform, raster) = match &stream.spt {
        Some(p) => {
            let t = PolarTransform::new(config.spt_config(index), p)?;
            let v = t.apply(image)?;
            (Some(t), v)
        }
        None => (None, image.clone()),
    };
    let (stage_inputs, stage_pre, fmap) = backbone_trace(stream, &raster)?;
    let stripes = stripe_avgpool(&fmap, config.stripes)?;
    let mut adapted = Vec::with_capacity(stripes.len());
    let mut probs = Vec::new();
    for (stripe, b) in stripes.iter().zip(&stream.branches) {
        let x = ase_forward_with(stripe, &b.ase, config.gating)?;
        if heads {
            probs.push(softmax(&linear(&x, &b.cls_weight, Some(&b.cls_bias))?));
        }
        adapted.push(x);
    }
    Ok(StreamTrace {
        transform,
        stage_inputs,
        stage_pre,
        stripes,
        adapted,
        probs,
    })
}

/// Full forward pass; `heads = false` skips the classifiers.
pub fn forward(model: &ModelParams, image: &Tensor, heads: bool) -> Result<ForwardTrace> {
    check_image(&model.config, image)?;
    let streams = model
        .streams
        .iter()
        .enumerate()
        .map(|(i, s)| stream_forward(&model.config, i, s, image, heads))
        .collect::<Result<_>>()?;
    Ok(ForwardTrace { streams })
}

/// Concatenated identity feature of length `S * B * L`.
pub fn forward_features(model: &ModelParams, image: &Tensor) -> Result<Vec<f64>> {
    Ok(forward(model, image, false)?.features())
}

/// Softmax distribution of every `(stream, branch)` head.
pub fn forward_logits(model: &ModelParams, image: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(forward(model, image, true)?.branch_probs())
}

/// Gradients of a scalar loss given its gradient with respect to the
/// concatenated feature and to every head's pre-softmax logits.
///
/// Either upstream may be `None`. The `lambda` gradient is only computed when
/// `with_lambda` is set; otherwise it is left at zero.
pub fn backward(
    model: &ModelParams,
    image: &Tensor,
    trace: &ForwardTrace,
    d_features: Option<&[f64]>,
    d_logits: Option<&[Vec<f64>]>,
    with_lambda: bool,
) -> Result<ModelParams> {
    let cfg = &model.config;
    check_image(cfg, image)?;
    if let Some(d) = d_features {
        ensure!(
            d.len() == cfg.feature_len(),
            Contract,
            "feature gradient has length {} but features have {}",
            d.len(),
            cfg.feature_len()
        );
    }
    if let Some(d) = d_logits {
        ensure!(
            d.len() == cfg.branch_count(),
            Contract,
            "expected {} logit gradients, got {}",
            cfg.branch_count(),
            d.len()
        );
    }
    let mut grads = model.zeros_like();
    let l = cfg.embed_width;
    for (s, ((stream, st), g)) in model
        .streams
        .iter()
        .zip(&trace.streams)
        .zip(grads.streams.iter_mut())
        .enumerate()
    {
        let mut d_stripes = Vec::with_capacity(cfg.stripes);
        for (b, ((branch, gb), stripe)) in stream
            .branches
            .iter()
            .zip(g.branches.iter_mut())
            .zip(&st.stripes)
            .enumerate()
        {
            let flat = s * cfg.stripes + b;
            let mut d_x = match d_features {
                Some(d) => d[flat * l..(flat + 1) * l].to_vec(),
                None => vec![0.0; l],
            };
            if let Some(d) = d_logits {
                let up = &d[flat];
                ensure!(
                    up.len() == cfg.classes,
                    Contract,
                    "logit gradient {flat} has length {} but there are {} classes",
                    up.len(),
                    cfg.classes
                );
                let x = &st.adapted[b];
                let wd = gb.cls_weight.data_mut();
                for (c, &u) in up.iter().enumerate() {
                    axpy(&mut wd[c * l..(c + 1) * l], u, x);
                    axpy(&mut d_x, u, &branch.cls_weight.data()[c * l..(c + 1) * l]);
                }
                gb.cls_bias.copy_from_slice(up);
            }
            let mut ag = ase_backward_with(stripe, &branch.ase, cfg.gating, &d_x)?;
            gb.ase.reduce = take_param(&mut ag, "reduce");
            gb.ase.expand = take_param(&mut ag, "expand");
            gb.ase.adapter_weight = take_param(&mut ag, "adapter_weight");
            gb.ase.adapter_bias = take_param(&mut ag, "adapter_bias").into_data();
            d_stripes.push(ag.input.into_data());
        }
        let last = st.stage_pre.last().expect("at least one stage");
        let mut d = stripe_avgpool_backward(last.shape(), cfg.stripes, &d_stripes)?;
        for k in (0..stream.kernels.len()).rev() {
            d = relu_backward(&st.stage_pre[k], &d)?;
            let mut cg = conv2d_backward(&st.stage_inputs[k], &stream.kernels[k], CONV_STRIDE, CONV_PAD, &d)?;
            g.kernels[k] = take_param(&mut cg, "kernels");
            d = cg.input;
        }
        if let (true, Some(t), Some(p), Some(gp)) = (with_lambda, &st.transform, &stream.spt, &mut g.spt) {
            let (h, w) = (d.shape()[1], d.shape()[2]);
            let up = d.reshape(&[h, w])?;
            gp.lambda = t.backward(p, image, &up)?;
        }
    }
    Ok(grads)
}
