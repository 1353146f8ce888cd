use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use itx_core::complexity::{run_bench, write_bench_csv};
use itx_core::data::{make_pairs, model_input};
use itx_core::metrics::{write_bland_altman_csv, write_metrics_csv};
use itx_core::mrsim::{gen_gfactor, gen_phantom, make_snr_ladder, ComplexSeries, GFactorMap, LadderLevel, NoiseLadder, Phantom};
use itx_core::sweep::sweep;
use itx_core::train::{split_indices, train, train_from, write_loss_csv, AdamState, Trainer};
use itx_core::{build_hrnet, Model, Tensor5D};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::{read_manifest, ManifestBuilder};

pub const PHANTOM_DIR: &str = "phantom";
pub const LADDER_DIR: &str = "ladder";
pub const TRAIN_DIR: &str = "train";
pub const DENOISE_DIR: &str = "denoise";
pub const SWEEP_DIR: &str = "sweep";
pub const BENCH_DIR: &str = "bench";

/// A required input file or directory that is not there.
#[derive(Debug)]
pub struct MissingInput(pub PathBuf);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} does not exist", self.0.display())
    }
}

impl std::error::Error for MissingInput {}

fn require(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(MissingInput(path.to_path_buf()).into());
    }
    Ok(())
}

fn make_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn save_f64(t: &Tensor5D<f64>, path: &Path) -> anyhow::Result<()> {
    t.cast::<f32>().save(path).with_context(|| format!("writing {}", path.display()))
}

fn load_f64(path: &Path) -> anyhow::Result<Tensor5D<f64>> {
    require(path)?;
    Ok(Tensor5D::<f32>::load(path).with_context(|| format!("reading {}", path.display()))?.cast())
}

/// Writes the ground-truth series and region masks.
pub fn phantom(cfg: &RunConfig, root: &Path) -> anyhow::Result<()> {
    let dir = root.join(PHANTOM_DIR);
    make_dir(&dir)?;
    let p = gen_phantom(&cfg.phantom)?;
    let mut m = ManifestBuilder::new(root, "phantom", json!({ "phantom": cfg.phantom.seed }));
    for (name, t) in [("gt_re", &p.series.re), ("gt_im", &p.series.im), ("blood_mask", &p.blood_mask), ("myo_mask", &p.myo_mask)] {
        let path = dir.join(format!("{name}.itx"));
        save_f64(t, &path)?;
        m.output(&path)?;
    }
    m.details(json!({ "phantom": cfg.phantom }));
    m.finish(&dir)?;
    Ok(())
}

pub fn load_phantom(root: &Path) -> anyhow::Result<Phantom> {
    let dir = root.join(PHANTOM_DIR);
    require(&dir)?;
    let series = ComplexSeries::new(load_f64(&dir.join("gt_re.itx"))?, load_f64(&dir.join("gt_im.itx"))?)?;
    Ok(Phantom { series, blood_mask: load_f64(&dir.join("blood_mask.itx"))?, myo_mask: load_f64(&dir.join("myo_mask.itx"))? })
}

/// Per-level record kept in the ladder manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelRecord {
    pub index: usize,
    pub target: f64,
    pub nn: f64,
    pub measured: f64,
    pub seed: u64,
}

/// Corrupts the stored ground truth at every ladder target.
pub fn corrupt(cfg: &RunConfig, root: &Path, levels: Option<&[f64]>) -> anyhow::Result<Vec<LevelRecord>> {
    let gt_dir = root.join(PHANTOM_DIR);
    let p = load_phantom(root)?;
    let ladder = NoiseLadder { targets: levels.map_or_else(|| cfg.ladder.targets.clone(), <[f64]>::to_vec), ..cfg.ladder.clone() };
    let d = p.series.dims();
    let g = gen_gfactor(cfg.acceleration, d.h, d.w)?;
    let built = make_snr_ladder(&p.series, &g, &ladder)?;

    let dir = root.join(LADDER_DIR);
    make_dir(&dir)?;
    for stale in std::fs::read_dir(&dir)? {
        let path = stale?.path();
        if path.extension().is_some_and(|e| e == "itx") {
            std::fs::remove_file(&path)?;
        }
    }
    let mut m = ManifestBuilder::new(root, "corrupt", json!({ "ladder": ladder.seed }));
    for name in ["gt_re", "gt_im"] {
        m.input(&gt_dir.join(format!("{name}.itx")))?;
    }
    let gpath = dir.join("gfactor.itx");
    save_f64(&g.to_tensor(), &gpath)?;
    m.output(&gpath)?;
    let mut records = vec![];
    for (i, lvl) in built.iter().enumerate() {
        for (part, t) in [("re", &lvl.noisy.re), ("im", &lvl.noisy.im)] {
            let path = dir.join(format!("level{i}_{part}.itx"));
            save_f64(t, &path)?;
            m.output(&path)?;
        }
        records.push(LevelRecord { index: i, target: lvl.target, nn: lvl.nn, measured: lvl.measured, seed: lvl.seed });
    }
    m.details(json!({ "acceleration": cfg.acceleration, "levels": records }));
    m.finish(&dir)?;
    Ok(records)
}

pub fn load_ladder(root: &Path) -> anyhow::Result<(GFactorMap, Vec<LadderLevel>)> {
    let dir = root.join(LADDER_DIR);
    require(&dir)?;
    let manifest = read_manifest(&dir)?;
    let r = manifest.details["acceleration"].as_f64().context("ladder manifest lacks the acceleration")?;
    let records: Vec<LevelRecord> =
        serde_json::from_value(manifest.details["levels"].clone()).context("ladder manifest lacks its levels")?;
    let g = GFactorMap::from_tensor(&load_f64(&dir.join("gfactor.itx"))?, r)?;
    let levels = records
        .into_iter()
        .map(|rec| {
            let re = load_f64(&dir.join(format!("level{}_re.itx", rec.index)))?;
            let im = load_f64(&dir.join(format!("level{}_im.itx", rec.index)))?;
            Ok(LadderLevel { target: rec.target, nn: rec.nn, seed: rec.seed, measured: rec.measured, noisy: ComplexSeries::new(re, im)? })
        })
        .collect::<anyhow::Result<_>>()?;
    Ok((g, levels))
}

/// Optimizer state path that accompanies a model checkpoint.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("adam.itxp")
}

pub struct TrainSummary {
    pub best_val: f64,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Trains on freshly generated pairs. Writes the initial, best-validation and
/// last checkpoints plus the loss log. A resumed run keeps its step counter and
/// follows the schedule implied by the current config.
pub fn train_cmd(cfg: &RunConfig, root: &Path, resume: Option<&Path>, quiet: bool) -> anyhow::Result<TrainSummary> {
    let dir = root.join(TRAIN_DIR);
    make_dir(&dir)?;
    let pairs = make_pairs(&cfg.pair_spec())?;
    let mut m = ManifestBuilder::new(
        root,
        "train",
        json!({ "init": cfg.seed, "pairs": cfg.seed, "train": cfg.train.seed }),
    );
    let report = |t: &Trainer, r: &[itx_core::train::LossRecord]| {
        if !quiet {
            eprintln!("epoch {} step {} train {:.6} val {:.6}", r[0].epoch, t.step, r[0].loss, r[1].loss);
        }
        Ok(())
    };
    let init_path = dir.join("init.itxp");
    let outcome = match resume {
        Some(ck) => {
            require(ck)?;
            let (model, meta) = Model::load(ck)?;
            if model.config != cfg.model {
                anyhow::bail!(itx_core::Error::Shape("checkpoint model config differs from the run config".into()));
            }
            let step = meta["step"].as_u64().context("checkpoint lacks a step counter")? as usize;
            let (train_idx, _) = split_indices(pairs.len(), cfg.train.val_fraction, cfg.train.seed)?;
            let total = cfg.train.epochs * cfg.train.steps_per_epoch(train_idx.len());
            let opt = optimizer_path(ck);
            require(&opt)?;
            let state = AdamState::load(&opt, &model.params)?;
            m.input(ck)?;
            m.input(&opt)?;
            let trainer = Trainer::new(model, cfg.train.clone(), total)?.resume(step, state)?;
            train_from(trainer, &pairs, report)?
        }
        None => {
            let model = build_hrnet::<f32>(&cfg.model, cfg.seed)?;
            model.save(&init_path, json!({ "step": 0 }))?;
            m.output(&init_path)?;
            train(model, &pairs, &cfg.train, report)?
        }
    };
    let best_path = dir.join("model.itxp");
    outcome.best.save(&best_path, json!({ "epoch": outcome.best_epoch, "val_loss": outcome.best_val }))?;
    let last_path = dir.join("last.itxp");
    outcome.trainer.save(&last_path, optimizer_path(&last_path))?;
    let loss_path = dir.join("loss.csv");
    write_loss_csv(BufWriter::new(File::create(&loss_path)?), &outcome.log)?;
    for p in [&best_path, &last_path, &optimizer_path(&last_path), &loss_path] {
        m.output(p)?;
    }
    let summary = TrainSummary { best_val: outcome.best_val, best_epoch: outcome.best_epoch, steps: outcome.trainer.step };
    m.details(json!({
        "model": cfg.model,
        "train": cfg.train,
        "pairs": cfg.pairs,
        "best_epoch": summary.best_epoch,
        "best_val": summary.best_val,
        "steps": summary.steps,
    }));
    m.finish(&dir)?;
    Ok(summary)
}

/// Denoises one complex series stored as a real/imaginary `.itx` pair.
pub fn denoise(
    cfg: &RunConfig,
    root: &Path,
    checkpoint: &Path,
    re: &Path,
    im: &Path,
    gfactor: Option<&Path>,
) -> anyhow::Result<PathBuf> {
    require(checkpoint)?;
    let (model, _) = Model::load(checkpoint)?;
    if model.config != cfg.model {
        anyhow::bail!(itx_core::Error::Shape("checkpoint model config differs from the run config".into()));
    }
    let series = ComplexSeries::new(load_f64(re)?, load_f64(im)?)?;
    let d = series.dims();
    let g = match gfactor {
        Some(p) => GFactorMap::from_tensor(&load_f64(p)?, cfg.acceleration)?,
        None => gen_gfactor(cfg.acceleration, d.h, d.w)?,
    };
    let x = model_input(&series, &g)?;
    if x.dims().c != model.config.c_in {
        anyhow::bail!(itx_core::Error::Shape(format!(
            "checkpoint expects {} input channels, series gives {}",
            model.config.c_in,
            x.dims().c
        )));
    }
    let out = ComplexSeries::from_channels(&model.forward(&x, None)?.cast(), 0)?;

    let dir = root.join(DENOISE_DIR);
    make_dir(&dir)?;
    let mut m = ManifestBuilder::new(root, "denoise", serde_json::Value::Null);
    for p in [checkpoint, re, im].into_iter().chain(gfactor) {
        m.input(p)?;
    }
    for (part, t) in [("re", &out.re), ("im", &out.im)] {
        let path = dir.join(format!("denoised_{part}.itx"));
        save_f64(t, &path)?;
        m.output(&path)?;
    }
    m.finish(&dir)?;
    Ok(dir)
}

/// Scores input and output of every stored ladder level against the phantom.
pub fn sweep_cmd(root: &Path, checkpoint: &Path) -> anyhow::Result<Vec<itx_core::metrics::MetricsReport>> {
    require(checkpoint)?;
    let (model, _) = Model::load(checkpoint)?;
    let phantom = load_phantom(root)?;
    let (g, levels) = load_ladder(root)?;
    let result = sweep(&model, &phantom, &g, &levels)?;

    let dir = root.join(SWEEP_DIR);
    make_dir(&dir)?;
    let mut m = ManifestBuilder::new(root, "sweep", serde_json::Value::Null);
    m.input(checkpoint)?;
    for entry in read_manifest(&root.join(LADDER_DIR))?.outputs {
        m.input(&root.join(entry.path))?;
    }
    let metrics = dir.join("metrics.csv");
    write_metrics_csv(BufWriter::new(File::create(&metrics)?), &result.rows)?;
    let ba = dir.join("bland_altman.csv");
    write_bland_altman_csv(BufWriter::new(File::create(&ba)?), &result.bland_altman)?;
    m.output(&metrics)?;
    m.output(&ba)?;
    m.finish(&dir)?;
    Ok(result.rows)
}

/// Times every attention mechanism and the dense oracle.
pub fn bench(cfg: &RunConfig, root: &Path, quiet: bool) -> anyhow::Result<(f64, f64)> {
    let dir = root.join(BENCH_DIR);
    make_dir(&dir)?;
    let report = run_bench(&cfg.bench, |r| {
        if !quiet {
            eprintln!("{:>6} {:>4}×{:<4} {:.4}s", r.mechanism.name(), r.size, r.size, r.seconds);
        }
    })?;
    let csv = dir.join("bench.csv");
    write_bench_csv(BufWriter::new(File::create(&csv)?), &report)?;
    let mut m = ManifestBuilder::new(root, "bench", serde_json::Value::Null);
    m.output(&csv)?;
    m.details(json!({
        "bench": cfg.bench,
        "decomposed_exponent": report.decomposed_exponent,
        "dense_exponent": report.dense_exponent,
    }));
    m.finish(&dir)?;
    Ok((report.decomposed_exponent, report.dense_exponent))
}
