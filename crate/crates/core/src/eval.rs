//! Single-shot gallery/probe matching with cosine distance and cumulative
//! matching characteristic (CMC) curves averaged over repeated trials.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::{Camera, SampleMeta};
use crate::error::{ensure, Error, Result};
use crate::seed::rng_for;
use crate::tensor::dot;

/// `1 - cos(f1, f2)`, in `[0, 2]`. A zero vector is at distance 1 from
/// everything.
pub fn cosine_distance(f1: &[f64], f2: &[f64]) -> Result<f64> {
    ensure!(
        f1.len() == f2.len(),
        Contract,
        "cannot compare features of length {} and {}",
        f1.len(),
        f2.len()
    );
    let (s1, s2) = (dot(f1, f1), dot(f2, f2));
    if s1 == 0.0 || s2 == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - dot(f1, f2) / (s1 * s2).sqrt()).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    /// Row-major, probes by gallery.
    pub values: Vec<f64>,
    pub probes: Vec<SampleMeta>,
    pub gallery: Vec<SampleMeta>,
}

impl DistanceMatrix {
    pub fn new(values: Vec<f64>, probes: Vec<SampleMeta>, gallery: Vec<SampleMeta>) -> Result<Self> {
        ensure!(
            values.len() == probes.len() * gallery.len(),
            Contract,
            "{} distances for {} probes and {} gallery items",
            values.len(),
            probes.len(),
            gallery.len()
        );
        ensure!(!gallery.is_empty(), Protocol, "gallery is empty");
        ensure!(
            values.iter().all(|v| v.is_finite()),
            NonFinite,
            "distance matrix has non-finite entries"
        );
        Ok(DistanceMatrix {
            values,
            probes,
            gallery,
        })
    }

    pub fn row(&self, probe: usize) -> &[f64] {
        let g = self.gallery.len();
        &self.values[probe * g..(probe + 1) * g]
    }
}

/// Matching rate by rank; entry `k - 1` is rank `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve(pub Vec<f64>);

impl CmcCurve {
    /// Ranks past the gallery size repeat the last entry.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks start at 1");
        self.0[(k - 1).min(self.0.len() - 1)]
    }

    pub fn rank1(&self) -> f64 {
        self.0[0]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_monotone(&self) -> bool {
        self.0.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Ranks each probe's gallery by ascending distance, ties in gallery order,
/// and records the first position holding the probe's identity.
pub fn cmc(matrix: &DistanceMatrix) -> Result<CmcCurve> {
    ensure!(!matrix.probes.is_empty(), Protocol, "no probes");
    let g = matrix.gallery.len();
    let mut hits = vec![0usize; g];
    let mut order: Vec<usize> = Vec::with_capacity(g);
    for (p, probe) in matrix.probes.iter().enumerate() {
        let row = matrix.row(p);
        order.clear();
        order.extend(0..g);
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal));
        if let Some(pos) = order
            .iter()
            .position(|&j| matrix.gallery[j].identity == probe.identity)
        {
            hits[pos] += 1;
        }
    }
    let n = matrix.probes.len() as f64;
    let mut acc = 0;
    Ok(CmcCurve(
        hits.iter()
            .map(|h| {
                acc += h;
                acc as f64 / n
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub gallery: Camera,
    pub probe: Camera,
}

impl Protocol {
    pub const SAME_CLOTHES: Protocol = Protocol {
        gallery: Camera::A,
        probe: Camera::B,
    };
    pub const CROSS_CLOTHES: Protocol = Protocol {
        gallery: Camera::A,
        probe: Camera::C,
    };

    pub fn label(&self) -> String {
        format!("{}{}", self.gallery, self.probe)
    }
}

/// Features with their metadata in canonical (identity, path) order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    features: Vec<Vec<f64>>,
    meta: Vec<SampleMeta>,
}

impl EvalSet {
    pub fn new(features: Vec<Vec<f64>>, meta: Vec<SampleMeta>) -> Result<Self> {
        ensure!(
            features.len() == meta.len(),
            Contract,
            "{} features for {} samples",
            features.len(),
            meta.len()
        );
        let mut pairs: Vec<(SampleMeta, Vec<f64>)> = meta.into_iter().zip(features).collect();
        pairs.sort_by(|a, b| (a.0.identity, &a.0.source).cmp(&(b.0.identity, &b.0.source)));
        let (meta, features) = pairs.into_iter().unzip();
        Ok(EvalSet { features, meta })
    }

    pub fn meta(&self) -> &[SampleMeta] {
        &self.meta
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    fn identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.meta.iter().map(|m| m.identity).collect();
        ids.dedup();
        ids
    }
}

/// One trial: a random gallery image per identity from the gallery camera,
/// every probe-camera image as a probe.
pub fn single_shot_trial<R: Rng>(set: &EvalSet, protocol: Protocol, rng: &mut R) -> Result<CmcCurve> {
    let mut gallery = Vec::new();
    for id in set.identities() {
        let candidates: Vec<usize> = (0..set.meta.len())
            .filter(|&i| set.meta[i].identity == id && set.meta[i].camera == protocol.gallery)
            .collect();
        if candidates.is_empty() {
            return Err(Error::Protocol(format!(
                "identity {id} has no image in gallery camera {}",
                protocol.gallery
            )));
        }
        gallery.push(candidates[rng.gen_range(0..candidates.len())]);
    }
    let probes: Vec<usize> = (0..set.meta.len())
        .filter(|&i| set.meta[i].camera == protocol.probe)
        .collect();
    ensure!(!probes.is_empty(), Protocol, "no images in probe camera {}", protocol.probe);
    let rows: Vec<Vec<f64>> = probes
        .par_iter()
        .map(|&p| {
            gallery
                .iter()
                .map(|&g| cosine_distance(&set.features[p], &set.features[g]))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let matrix = DistanceMatrix::new(
        rows.concat(),
        probes.iter().map(|&i| set.meta[i].clone()).collect(),
        gallery.iter().map(|&i| set.meta[i].clone()).collect(),
    )?;
    cmc(&matrix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedCmc {
    pub protocol: Protocol,
    pub mean: CmcCurve,
    pub trials: Vec<CmcCurve>,
}

pub fn mean_curve(curves: &[CmcCurve]) -> Result<CmcCurve> {
    ensure!(!curves.is_empty(), Contract, "cannot average zero curves");
    let len = curves[0].len();
    ensure!(
        curves.iter().all(|c| c.len() == len),
        Contract,
        "curves have different lengths"
    );
    let n = curves.len() as f64;
    Ok(CmcCurve(
        (0..len)
            .map(|k| curves.iter().map(|c| c.0[k]).sum::<f64>() / n)
            .collect(),
    ))
}

/// `trials` independent single-shot trials, trial `t` seeded from `(seed, t)`.
pub fn repeat_eval(set: &EvalSet, protocol: Protocol, trials: usize, seed: u64) -> Result<RepeatedCmc> {
    ensure!(trials >= 1, Config, "need at least one trial");
    let curves = (0..trials)
        .map(|t| single_shot_trial(set, protocol, &mut rng_for(seed, &[30, t as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(RepeatedCmc {
        protocol,
        mean: mean_curve(&curves)?,
        trials: curves,
    })
}

/// `rank,mean,trial_1..trial_T`.
pub fn cmc_csv(result: &RepeatedCmc) -> String {
    let mut out = String::from("rank,mean");
    for t in 1..=result.trials.len() {
        let _ = write!(out, ",trial_{t}");
    }
    out.push('\n');
    for k in 0..result.mean.len() {
        let _ = write!(out, "{},{}", k + 1, result.mean.0[k]);
        for c in &result.trials {
            let _ = write!(out, ",{}", c.0[k]);
        }
        out.push('\n');
    }
    out
}

pub fn write_cmc_csv(path: &Path, result: &RepeatedCmc) -> Result<()> {
    fs::write(path, cmc_csv(result)).map_err(|e| Error::io(path, e))
}

/// Minimal line plot of one or more CMC curves.
pub fn cmc_svg(curves: &[(&str, &CmcCurve)]) -> String {
    let (w, h, m) = (480.0, 320.0, 40.0);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    let _ = writeln!(
        s,
        "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        w - 2.0 * m,
        h - 2.0 * m
    );
    for (i, (label, c)) in curves.iter().enumerate() {
        let n = c.len().max(2) as f64 - 1.0;
        let pts: Vec<String> = c
            .0
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let x = m + (w - 2.0 * m) * k as f64 / n;
                let y = h - m - (h - 2.0 * m) * v;
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let color = colors[i % colors.len()];
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{label} rank-1 {:.3}</text>",
            m + 8.0,
            m + 16.0 + 14.0 * i as f64,
            c.rank1()
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\">rank</text>", w / 2.0, h - 10.0);
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    /// Upper-tail probability of the statistic under uniformity.
    pub p_value: f64,
    /// Twice the smaller tail; also small for histograms flatter than chance.
    pub p_two_sided: f64,
}

/// Pearson goodness-of-fit of `samples` against the uniform density on the
/// interval spanned by `lo` and `hi`, split into `bins` equal cells.
pub fn chi_square_uniform(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Result<ChiSquare> {
    let (lo, hi) = (lo.min(hi), lo.max(hi));
    ensure!(bins >= 2, Config, "need at least 2 bins, got {bins}");
    ensure!(hi > lo, Config, "empty interval [{lo}, {hi}]");
    ensure!(!samples.is_empty(), Input, "no samples to test");
    ensure!(
        samples.iter().all(|v| (lo..=hi).contains(v)),
        Input,
        "samples leave [{lo}, {hi}]"
    );
    let mut counts = vec![0usize; bins];
    for &v in samples {
        let k = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[k.min(bins - 1)] += 1;
    }
    let expected = samples.len() as f64 / bins as f64;
    let statistic = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum::<f64>();
    let dof = bins - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Config(format!("chi-square: {e}")))?;
    Ok(ChiSquare {
        statistic,
        dof,
        p_value: dist.sf(statistic),
        p_two_sided: (2.0 * dist.sf(statistic).min(dist.cdf(statistic))).min(1.0),
    })
}
