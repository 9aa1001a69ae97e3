use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use contour_spt::checkpoint;
use contour_spt::data::{
    dataset_split, extract_sketch, load_and_normalize, load_dataset, read_raster, save_dataset, synth_generate,
    write_pgm, Dataset, Ingest, SketchImage,
};
use contour_spt::eval::{
    chi_square_uniform, cmc_csv, cmc_svg, repeat_eval, ChiSquare, EvalSet, Protocol, RepeatedCmc,
};
use contour_spt::gradsuite::{run_suite, CheckOutcome, Scope, SuiteOptions};
use contour_spt::network::{build_model, forward_features, ModelParams};
use contour_spt::spt::{PolarTransform, SptParams};
use contour_spt::trainer::{theta_csv, train, train_log_csv, Ablation, EpochLog, TrainEvent};
use contour_spt::{Error, Tensor};
use rayon::prelude::*;

use crate::config::RunConfig;

/// A command-line argument that names something that does not exist.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let path = dir.join(".lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).with_context(|| {
            format!(
                "output directory {} is in use (remove {} if no other run is active)",
                dir.display(),
                path.display()
            )
        })?;
        writeln!(f, "{}", std::process::id()).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(OutputLock { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Generates the synthetic dataset under `<out>/data`; returns the manifest.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let _lock = OutputLock::acquire(&cfg.out)?;
    cfg.synth.validate()?;
    let data = synth_generate(&cfg.synth)?;
    let manifest = save_dataset(&cfg.out.join("data"), &data)?;
    cfg.echo("synth")?;
    eprintln!("wrote {} images, manifest {}", data.len(), manifest.display());
    Ok(manifest)
}

fn load_data(cfg: &RunConfig, side: usize) -> Result<Dataset> {
    let manifest = cfg.manifest();
    if !manifest.exists() {
        return Err(Error::Input(format!("missing manifest {}", manifest.display())).into());
    }
    Ok(load_dataset(&manifest, side, cfg.data.ingest, &cfg.data.edges)?)
}

/// `(train, test)` identities.
fn split(cfg: &RunConfig, data: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok(dataset_split(&data.identities(), cfg.data.train_fraction, cfg.data.split_seed)?)
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("model.sptn")
}

pub struct TrainSummary {
    pub model: ModelParams,
    pub log: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains on the training identities and writes `model.sptn`, one checkpoint
/// per stage, `train_log.csv`, `theta_epochK.csv` and `split.csv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let _lock = OutputLock::acquire(&cfg.out)?;
    let mut cfg = cfg.clone();
    let data = load_data(&cfg, cfg.network.image_side)?;
    let (train_ids, test_ids) = split(&cfg, &data)?;
    cfg.network.classes = train_ids.len();
    let net = cfg.train.ablation.network(&cfg.network);
    cfg.echo("train")?;
    let mut rows = String::from("identity,role\n");
    for (ids, role) in [(&train_ids, "train"), (&test_ids, "test")] {
        for id in ids {
            rows.push_str(&format!("{id},{role}\n"));
        }
    }
    write(&cfg.out.join("split.csv"), rows)?;
    let train_set = data.restrict(&train_ids);
    let model = build_model(&net, cfg.train.model_seed)?;
    eprintln!(
        "training {} parameters on {} images of {} identities",
        model.param_count(),
        train_set.len(),
        train_ids.len()
    );
    let out = cfg.out.clone();
    let mut checkpoints = Vec::new();
    let outcome = train(model, &train_set, &cfg.train, |event| {
        match event {
            TrainEvent::Epoch(e) => {
                eprintln!(
                    "epoch {:>3} stage {} lr {:.2e} ce {:.4} triplet {:.4} total {:.4}",
                    e.epoch, e.stage, e.lr, e.mean_ce, e.mean_triplet, e.total
                );
                if !e.theta.is_empty() {
                    let path = out.join(format!("theta_epoch{}.csv", e.epoch));
                    fs::write(&path, theta_csv(&e.theta)).map_err(|err| Error::io(&path, err))?;
                }
            }
            TrainEvent::StageEnd { stage, model } => {
                let path = out.join("checkpoints").join(format!("stage{stage}.sptn"));
                checkpoint::save(&path, model)?;
                checkpoints.push(path);
            }
        }
        Ok(())
    })?;
    write(&cfg.out.join("train_log.csv"), train_log_csv(&outcome.log))?;
    checkpoint::save(&checkpoint_path(&cfg), &outcome.model)?;
    Ok(TrainSummary {
        model: outcome.model,
        log: outcome.log,
        checkpoints,
    })
}

pub struct EvalSummary {
    pub same_clothes: RepeatedCmc,
    pub cross_clothes: RepeatedCmc,
}

pub fn features(model: &ModelParams, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    Ok(data
        .images
        .par_iter()
        .map(|img| forward_features(model, img.tensor()))
        .collect::<contour_spt::Result<Vec<_>>>()?)
}

/// Runs both protocols on the test identities; writes `eval/cmc_AB.csv`,
/// `eval/cmc_AC.csv`, `eval/rank1.txt` and optionally `eval/cmc.svg`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    let _lock = OutputLock::acquire(&cfg.out)?;
    let ck = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(cfg));
    let model = checkpoint::load(&ck)?;
    let data = load_data(cfg, model.config.image_side)?;
    let (_, test_ids) = split(cfg, &data)?;
    let test = data.restrict(&test_ids);
    let set = EvalSet::new(features(&model, &test)?, test.meta.clone())?;
    let same = repeat_eval(&set, Protocol::SAME_CLOTHES, cfg.eval.trials, cfg.eval.seed)?;
    let cross = repeat_eval(&set, Protocol::CROSS_CLOTHES, cfg.eval.trials, cfg.eval.seed)?;
    let dir = cfg.out.join("eval");
    let mut rank1 = String::new();
    for r in [&same, &cross] {
        let label = r.protocol.label();
        write(&dir.join(format!("cmc_{label}.csv")), cmc_csv(r))?;
        rank1.push_str(&format!("{label} {}\n", r.mean.rank1()));
        println!("{label} rank-1 {:.4} rank-5 {:.4}", r.mean.rank1(), r.mean.rank(5));
    }
    write(&dir.join("rank1.txt"), rank1)?;
    if cfg.eval.svg {
        let (ls, lc) = (same.protocol.label(), cross.protocol.label());
        write(&dir.join("cmc.svg"), cmc_svg(&[(&ls, &same.mean), (&lc, &cross.mean)]))?;
    }
    cfg.echo("eval")?;
    Ok(EvalSummary {
        same_clothes: same,
        cross_clothes: cross,
    })
}

pub struct TransformSummary {
    pub output: Tensor,
    pub theta: Vec<f64>,
    pub uniformity: ChiSquare,
}

/// Bins for the angle histogram.
pub const THETA_BINS: usize = 7;

/// Resamples one image with stream `stream` (1-based) and writes
/// `transform/stream{K}.pgm` and `transform/theta.csv`. Without a checkpoint
/// the angles are uniform.
pub fn cmd_transform(
    cfg: &RunConfig,
    image: &Path,
    stream: usize,
    checkpoint: Option<&Path>,
) -> Result<TransformSummary> {
    let _lock = OutputLock::acquire(&cfg.out)?;
    let model = checkpoint.map(checkpoint::load).transpose()?;
    let net = model.as_ref().map_or(&cfg.network, |m| &m.config);
    if !net.polar {
        return Err(UsageError("the model has no polar streams".into()).into());
    }
    if stream == 0 || stream > net.stream_count() {
        return Err(UsageError(format!(
            "stream index {stream} out of range 1..={}",
            net.stream_count()
        ))
        .into());
    }
    let spt_cfg = net.spt_config(stream - 1);
    let params = match &model {
        Some(m) => m.streams[stream - 1].spt.clone().expect("polar stream carries lambda"),
        None => SptParams::uniform(spt_cfg.rows),
    };
    let raw = read_raster(image)?;
    let sketch: SketchImage = match cfg.data.ingest {
        Ingest::Sketch => load_and_normalize(&raw, net.image_side)?,
        Ingest::Edges => extract_sketch(&raw, &cfg.data.edges)?.resized(net.image_side)?,
    };
    let t = PolarTransform::new(spt_cfg, &params)?;
    let output = t.apply(sketch.tensor())?;
    let bytes: Vec<u8> = output
        .data()
        .iter()
        .map(|v| 255 - (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let dir = cfg.out.join("transform");
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_pgm(&dir.join(format!("stream{stream}.pgm")), spt_cfg.rows, spt_cfg.cols, &bytes)?;
    let theta = t.grid.theta.clone();
    let mut csv = String::from("index,theta\n");
    for (i, v) in theta.iter().enumerate() {
        csv.push_str(&format!("{i},{v}\n"));
    }
    write(&dir.join("theta.csv"), csv)?;
    let uniformity = chi_square_uniform(&theta, spt_cfg.start_angle, spt_cfg.end_angle, THETA_BINS)?;
    println!(
        "theta histogram vs uniform: chi2 {:.3} dof {} p(upper) {:.4} p(two-sided) {:.4}",
        uniformity.statistic, uniformity.dof, uniformity.p_value, uniformity.p_two_sided
    );
    cfg.echo("transform")?;
    Ok(TransformSummary {
        output,
        theta,
        uniformity,
    })
}

/// Runs the finite-difference suite; `None` selects every scope.
pub fn cmd_gradcheck(scope: Option<Scope>, options: &SuiteOptions) -> Result<Vec<CheckOutcome>> {
    let scopes: Vec<Scope> = scope.map_or_else(|| Scope::ALL.to_vec(), |s| vec![s]);
    let out = run_suite(&scopes, options)?;
    for o in &out {
        println!("{o}");
    }
    Ok(out)
}

/// Sets the ablation switches that were given on the command line.
pub fn apply_ablation(cfg: &mut RunConfig, flags: Ablation) {
    let a = &mut cfg.train.ablation;
    a.fixed_theta |= flags.fixed_theta;
    a.no_spt |= flags.no_spt;
    a.no_ase |= flags.no_ase;
    a.no_triplet |= flags.no_triplet;
}
