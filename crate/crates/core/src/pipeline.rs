//! The command workflows: dataset generation, training, evaluation, feature
//! analysis and model information. The CLI is a thin wrapper over these.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{self, FeatureSample, RankReport, DEFAULT_THRESHOLD};
use crate::config::{RunConfig, Source};
use crate::degrade::{self, child_seed, procedural_image, Pair};
use crate::error::{Error, Result};
use crate::io::{read_image, write_image, Checkpoint};
use crate::metrics::{psnr, ssim, SsimParams};
use crate::network::{Census, Model, ModelConfig};
use crate::objectives::{cosine_lr, total_loss, Adam};
use crate::params::{Binding, Session};
use crate::tensor::{DType, Graph, Real, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.mirg";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RUN_CONFIG_FILE: &str = "run_config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Reference parameter totals of the two published model sizes.
pub const TINY_REFERENCE_PARAMS: f64 = 6.21e6;
pub const SMALL_REFERENCE_PARAMS: f64 = 9.68e6;
/// Reference cost of the tiny model on a 224x224 image.
pub const TINY_REFERENCE_FLOPS: f64 = 16e9;

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary file so an interrupted write never replaces a good file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// `*.ppm` files of a directory, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Clean source images named by stem: a directory, or seeded procedural images.
pub fn load_sources(cfg: &RunConfig, input: Option<&Path>) -> Result<Vec<(String, Tensor<f64>)>> {
    let dir = match (input, &cfg.data.source) {
        (Some(d), _) => Some(d.to_path_buf()),
        (None, Source::Dir(d)) => Some(d.clone()),
        (None, Source::Procedural) => None,
    };
    match dir {
        Some(dir) => {
            let paths = list_images(&dir)?;
            if paths.is_empty() {
                return Err(Error::invalid("load_sources", format!("no .ppm images in {}", dir.display())));
            }
            paths
                .iter()
                .map(|p| {
                    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    Ok((stem, read_image(p)?))
                })
                .collect()
        }
        None => {
            let size = cfg.data.source_size;
            let seed = child_seed(cfg.train.seed, 10);
            Ok((0..cfg.data.count)
                .map(|i| (format!("{i:04}"), procedural_image(size, size, child_seed(seed, i as u64))))
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub degraded: String,
    pub clean: String,
    pub spec_hash: String,
}

/// Degrades every source image in full (no cropping) and writes
/// `degraded/NNNN.ppm`, `clean/NNNN.ppm` and `manifest.txt` under `out`.
pub fn cmd_degrade(cfg: &RunConfig, input: Option<&Path>, out: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    let sources = load_sources(cfg, input)?;
    let spec = &cfg.data.spec;
    let hash = spec.hash();
    let seed = child_seed(cfg.train.seed, 11);
    let degraded: Vec<Tensor<f64>> = sources
        .iter()
        .enumerate()
        .map(|(i, (_, img))| {
            let (item, noise_seed) = degrade::seeded(spec, child_seed(seed, i as u64));
            degrade::apply_spec(img, &item, noise_seed)
        })
        .collect::<Result<_>>()?;
    create_dir(&out.join("degraded"))?;
    create_dir(&out.join("clean"))?;
    let mut manifest = Vec::new();
    let mut text = String::new();
    for (i, ((_, clean), deg)) in sources.iter().zip(&degraded).enumerate() {
        let entry = ManifestEntry {
            degraded: format!("degraded/{i:04}.ppm"),
            clean: format!("clean/{i:04}.ppm"),
            spec_hash: hash.clone(),
        };
        write_image(out.join(&entry.degraded), deg)?;
        write_image(out.join(&entry.clean), clean)?;
        writeln!(text, "{} {} {}", entry.degraded, entry.clean, entry.spec_hash).expect("string write");
        manifest.push(entry);
    }
    write_text(&out.join(MANIFEST_FILE), &text)?;
    log::info!("wrote {} pairs to {}", manifest.len(), out.display());
    Ok(manifest)
}

/// Reads `manifest.txt` of a paired directory.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut offset = 0;
    let mut out = Vec::new();
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[..] {
            [] => {}
            [d, c, h] => out.push(ManifestEntry {
                degraded: d.into(),
                clean: c.into(),
                spec_hash: h.into(),
            }),
            _ => {
                return Err(Error::Parse {
                    what: path.display().to_string(),
                    offset,
                    detail: "expected `degraded clean spec_hash`".into(),
                })
            }
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

pub(crate) fn stack<T: Real>(images: &[&Tensor<f64>]) -> Result<Tensor<T>> {
    let shape = images
        .first()
        .ok_or_else(|| Error::invalid("stack", "no images"))?
        .shape()
        .to_vec();
    if images.iter().any(|i| i.shape() != shape.as_slice()) {
        return Err(Error::shape("stack", "images differ in shape"));
    }
    let mut full = vec![images.len()];
    full.extend(&shape);
    let data = images.iter().flat_map(|i| i.data().iter().map(|&v| T::from_f64(v))).collect();
    Tensor::new(full, data)
}

fn unstack<T: Real>(batch: &Tensor<T>) -> Vec<Tensor<f64>> {
    let shape = batch.shape()[1..].to_vec();
    let per: usize = shape.iter().product();
    batch
        .data()
        .chunks(per)
        .map(|c| Tensor::new(shape.clone(), c.iter().map(|v| v.to_f64()).collect()).expect("chunk shape"))
        .collect()
}

/// Training dataset of a run: `data.count` pairs of `train.patch` crops.
pub fn training_pairs(cfg: &RunConfig) -> Result<Vec<Pair>> {
    let sources: Vec<Tensor<f64>> = load_sources(cfg, None)?.into_iter().map(|(_, t)| t).collect();
    degrade::make_dataset(
        &sources,
        &cfg.data.spec,
        cfg.data.count,
        cfg.train.patch,
        cfg.data.flips,
        child_seed(cfg.train.seed, 0),
    )
}

/// Mean L1 and PSNR of a model over pairs, with restorations clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    pub l1: f64,
    pub psnr_restored: f64,
    pub psnr_degraded: f64,
}

/// Scores are computed in f64 whatever the training precision.
pub fn score_pairs<T: Real>(model: &Model<T>, pairs: &[Pair]) -> Result<PairScores> {
    let model = model.cast::<f64>();
    let mut l1 = 0.0;
    let mut pr = 0.0;
    let mut pd = 0.0;
    for chunk in pairs.chunks(8) {
        let degraded: Vec<&Tensor<f64>> = chunk.iter().map(|p| &p.degraded).collect();
        let restored = unstack(&model.restore(&stack::<f64>(&degraded)?)?);
        for (r, p) in restored.iter().zip(chunk) {
            l1 += r.data().iter().zip(p.clean.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / r.len() as f64;
            pr += psnr(&r.map(|v| v.clamp(0.0, 1.0)), &p.clean)?;
            pd += psnr(&p.degraded, &p.clean)?;
        }
    }
    let n = pairs.len().max(1) as f64;
    Ok(PairScores {
        l1: l1 / n,
        psnr_restored: pr / n,
        psnr_degraded: pd / n,
    })
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: usize,
    /// Whole-dataset scores before the first and after the last update.
    pub initial: PairScores,
    pub last: PairScores,
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l1: f64,
    pub fourier: f64,
    pub spd: f64,
    pub total: f64,
}

fn scalar<T: Real>(v: Option<crate::tensor::Var<'_, T>>) -> f64 {
    v.map(|v| v.item().to_f64()).unwrap_or(0.0)
}

fn train_step<T: Real>(
    cfg: &RunConfig,
    model: &Model<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    step: usize,
    lr: f64,
) -> Result<(StepLog, Vec<Tensor<T>>)> {
    let g = Graph::new();
    let s = Session::bind(&g, &model.params, Binding::Trainable);
    let out = model.forward(&s, g.constant(x.clone()))?;
    let contrastive = match &model.spd {
        Some(head) => Some(head.loss(&s, out.shallow, out.latent, cfg.train.tau, cfg.train.symmetric_nce)?),
        None => None,
    };
    let terms = total_loss(
        out.restored,
        g.constant(y.clone()),
        contrastive,
        cfg.train.weights,
        cfg.train.enable_fourier,
    )?;
    let grads = g.backward(terms.total)?;
    let grads = s
        .vars()
        .iter()
        .map(|&v| grads.wrt(v).expect("trainable leaf"))
        .collect();
    let log = StepLog {
        step,
        lr,
        l1: terms.l1.item().to_f64(),
        fourier: scalar(terms.fourier),
        spd: scalar(terms.contrastive),
        total: terms.total.item().to_f64(),
    };
    Ok((log, grads))
}

/// Runs the training loop and writes `checkpoint.mirg`, `train_log.csv` and
/// `run_config.txt` under `out`. The checkpoint is rewritten every
/// `train.checkpoint_every` steps and at the end; a failing step leaves the last
/// good parameters on disk.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    match cfg.train.dtype {
        DType::F32 => train::<f32>(cfg, out),
        DType::F64 => train::<f64>(cfg, out),
    }
}

fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>) -> Result<()> {
    write_atomic(path, &Checkpoint::from_model(model).encode()?)
}

fn train<T: Real>(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let pairs = training_pairs(cfg)?;
    if pairs.is_empty() && cfg.train.steps > 0 {
        return Err(Error::Config("training needs data.count >= 1".into()));
    }
    let mut model = Model::<T>::build(&cfg.model, child_seed(cfg.train.seed, 1))?;
    create_dir(out)?;
    let ablations = cfg.ablations();
    let header = if ablations.is_empty() { "none".to_string() } else { ablations.join(",") };
    write_text(&out.join(RUN_CONFIG_FILE), &format!("# disabled: {header}\n{}", cfg.to_text()))?;
    let census = model.census();
    log::info!(
        "model: {} parameters ({} at inference), {} training pairs",
        census.total(),
        census.inference_total(),
        pairs.len()
    );
    let ckpt = out.join(CHECKPOINT_FILE);
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut csv = String::from("step,lr,l1,fourier,spd,total\n");
    let initial = score_pairs(&model, &pairs)?;
    save_checkpoint(&ckpt, &model)?;

    let t = &cfg.train;
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(t.seed, 2));
    for step in 0..t.steps {
        let lr = cosine_lr(step, t.steps, t.lr0, t.lr_min);
        let idx: Vec<usize> = if t.batch <= pairs.len() {
            sample(&mut rng, pairs.len(), t.batch).into_vec()
        } else {
            (0..t.batch).map(|_| rng.random_range(0..pairs.len())).collect()
        };
        let x = stack::<T>(&idx.iter().map(|&i| &pairs[i].degraded).collect::<Vec<_>>())?;
        let y = stack::<T>(&idx.iter().map(|&i| &pairs[i].clean).collect::<Vec<_>>())?;
        let result = train_step(cfg, &model, &x, &y, step + 1, lr)
            .and_then(|(row, grads)| adam.step(&mut model.params, &grads, lr).map(|_| row));
        let row = match result {
            Ok(row) => row,
            Err(e) => {
                write_text(&log_path, &csv)?;
                save_checkpoint(&ckpt, &model)?;
                log::error!("training aborted at step {}; last good checkpoint kept at {}", step + 1, ckpt.display());
                return Err(e);
            }
        };
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            row.step, row.lr, row.l1, row.fourier, row.spd, row.total
        )
        .expect("string write");
        if step % 25 == 0 || step + 1 == t.steps {
            log::info!("step {} lr {:.3e} l1 {:.5} total {:.5}", row.step, row.lr, row.l1, row.total);
        }
        if t.checkpoint_every > 0 && (step + 1) % t.checkpoint_every == 0 {
            save_checkpoint(&ckpt, &model)?;
            write_text(&log_path, &csv)?;
        }
    }
    save_checkpoint(&ckpt, &model)?;
    write_text(&log_path, &csv)?;
    let last = score_pairs(&model, &pairs)?;
    Ok(TrainReport {
        out_dir: out.to_path_buf(),
        checkpoint: ckpt,
        log: log_path,
        steps: t.steps,
        initial,
        last,
    })
}

/// Parses a training log back into rows.
pub fn read_train_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut offset = 0;
    for (i, line) in text.lines().enumerate() {
        if i > 0 && !line.is_empty() {
            let bad = || Error::Parse {
                what: path.display().to_string(),
                offset,
                detail: format!("malformed log row {line:?}"),
            };
            let v: Vec<f64> = line.split(',').map(|f| f.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            let [step, lr, l1, fourier, spd, total] = v[..] else {
                return Err(bad());
            };
            rows.push(StepLog {
                step: step as usize,
                lr,
                l1,
                fourier,
                spd,
                total,
            });
        }
        offset += line.len() + 1;
    }
    Ok(rows)
}

/// Per-image and mean restoration scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
    pub input_psnr: f64,
    pub input_ssim: f64,
}

fn eval_with<T: Real>(model: &Model<T>, dir: &Path, entries: &[ManifestEntry]) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for e in entries {
        let degraded = read_image(dir.join(&e.degraded))?;
        let clean = read_image(dir.join(&e.clean))?;
        let batch = stack::<T>(&[&degraded])?;
        let restored = unstack(&model.restore(&batch)?).remove(0).map(|v| v.clamp(0.0, 1.0));
        rows.push(EvalRow {
            image: e.degraded.clone(),
            psnr: psnr(&restored, &clean)?,
            ssim: ssim(&restored, &clean, SsimParams::default())?,
            input_psnr: psnr(&degraded, &clean)?,
            input_ssim: ssim(&degraded, &clean, SsimParams::default())?,
        });
    }
    Ok(rows)
}

/// Evaluates a checkpoint on a paired directory (as written by [`cmd_degrade`]) and
/// writes `csv_path` with one row per image plus a final `mean` row.
pub fn cmd_eval(checkpoint: &Path, paired_dir: &Path, csv_path: &Path) -> Result<Vec<EvalRow>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let entries = read_manifest(paired_dir)?;
    if entries.is_empty() {
        return Err(Error::invalid("eval", format!("empty manifest in {}", paired_dir.display())));
    }
    // widening stored f32 weights is exact, and f64 keeps an identity model bit-exact
    let rows = eval_with(&ckpt.to_model::<f64>()?, paired_dir, &entries)?;
    let mut csv = String::from("image,psnr_db,ssim,input_psnr_db,input_ssim\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", r.image, r.psnr, r.ssim, r.input_psnr, r.input_ssim).expect("string write");
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean_row = EvalRow {
        image: "mean".into(),
        psnr: mean(|r| r.psnr),
        ssim: mean(|r| r.ssim),
        input_psnr: mean(|r| r.input_psnr),
        input_ssim: mean(|r| r.input_ssim),
    };
    writeln!(
        csv,
        "mean,{},{},{},{}",
        mean_row.psnr, mean_row.ssim, mean_row.input_psnr, mean_row.input_ssim
    )
    .expect("string write");
    if let Some(parent) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(csv_path, &csv)?;
    let mut all = rows;
    all.push(mean_row);
    Ok(all)
}

/// Tags of the analysed features, in output order.
pub const ANALYSIS_TAGS: [&str; 5] = ["scale1", "scale2", "scale3", "scale4", "latent"];

/// Replaces the harvested features of a tag, for injecting known test signals.
pub type FeatureHook<'a> = &'a dyn Fn(&str) -> Option<FeatureSample>;

/// Encoder features of `images` (`[3, H, W]` each) per analysis tag. `latent` is
/// the channel-projected deepest feature when the model has a contrastive head,
/// and the raw deepest feature otherwise.
pub fn harvest_features<T: Real>(model: &Model<T>, images: &[Tensor<f64>]) -> Result<Vec<FeatureSample>> {
    let batch = stack::<T>(&images.iter().collect::<Vec<_>>())?;
    let g = Graph::new();
    let s = Session::bind(&g, &model.params, Binding::Frozen);
    let out = model.forward(&s, g.constant(batch))?;
    let mut samples = Vec::new();
    for (i, v) in out.scales.iter().enumerate() {
        samples.push(FeatureSample::from_maps(ANALYSIS_TAGS[i], &v.to_tensor())?);
    }
    let latent = match &model.spd {
        Some(head) => head.project_latent(&s, out.latent)?,
        None => {
            log::warn!("model has no contrastive head; latent tag uses the unprojected deepest feature");
            out.latent
        }
    };
    samples.push(FeatureSample::from_maps("latent", &latent.to_tensor())?);
    Ok(samples)
}

/// Writes `cumvar_<tag>.csv`, `spectrum_<tag>.csv`, `sim_<tag>.csv` for every tag and
/// `effrank.csv`, returning the rank reports.
pub fn write_analysis(samples: &[FeatureSample], out: &Path, hook: Option<FeatureHook<'_>>) -> Result<Vec<RankReport>> {
    create_dir(out)?;
    let mut reports = Vec::new();
    for sample in samples {
        let injected = hook.and_then(|h| h(&sample.tag));
        let f = injected.as_ref().unwrap_or(sample);
        let tag = &sample.tag;
        analysis::write_cumvar_csv(&out.join(format!("cumvar_{tag}.csv")), &analysis::pca_cumvar(f)?)?;
        analysis::write_spectrum_csv(&out.join(format!("spectrum_{tag}.csv")), &analysis::svd_spectrum(f)?)?;
        analysis::write_similarity_csv(
            &out.join(format!("sim_{tag}.csv")),
            &analysis::channel_similarity(f),
            f.channels(),
        )?;
        let mut report = RankReport::of(f, DEFAULT_THRESHOLD)?;
        report.tag = tag.clone();
        reports.push(report);
    }
    analysis::write_effrank_csv(&out.join("effrank.csv"), &reports)?;
    Ok(reports)
}

/// Analyses a checkpoint on a set of images.
pub fn cmd_analyze(
    checkpoint: &Path,
    images: &[Tensor<f64>],
    out: &Path,
    hook: Option<FeatureHook<'_>>,
) -> Result<Vec<RankReport>> {
    if images.is_empty() {
        return Err(Error::invalid("analyze", "no images"));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let samples = harvest_features(&ckpt.to_model::<f64>()?, images)?;
    write_analysis(&samples, out, hook)
}

/// Parameter census and cost estimate of a model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoReport {
    pub config: ModelConfig,
    pub census: Census,
    pub flops_extent: usize,
    /// Per-group flops (one multiply-accumulate = 2 flops).
    pub flops: Vec<(String, u64)>,
    pub total_flops: u64,
}

pub fn cmd_info(config: &ModelConfig, flops_extent: usize) -> Result<InfoReport> {
    let model = Model::<f32>::build(config, 0)?;
    let fc = model.count_flops(flops_extent, flops_extent);
    Ok(InfoReport {
        config: config.clone(),
        census: model.census(),
        flops_extent,
        flops: fc.groups(),
        total_flops: fc.total_flops(),
    })
}

impl InfoReport {
    /// Published parameter total for the tiny and small presets (`None` otherwise).
    pub fn reference_params(&self) -> Option<f64> {
        if self.config == ModelConfig::tiny() {
            Some(TINY_REFERENCE_PARAMS)
        } else if self.config == ModelConfig::small() {
            Some(SMALL_REFERENCE_PARAMS)
        } else {
            None
        }
    }

    /// Relative deviation of the total from the reference, if one exists.
    pub fn param_deviation(&self) -> Option<f64> {
        self.reference_params().map(|r| self.census.total() as f64 / r - 1.0)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "parameters by group:").expect("string write");
        for (g, n, train_only) in &self.census.groups {
            let note = if *train_only { "  (training only)" } else { "" };
            writeln!(s, "  {g:<10} {n:>12}{note}").expect("string write");
        }
        writeln!(s, "total parameters      {:>12}", self.census.total()).expect("string write");
        writeln!(s, "inference parameters  {:>12}", self.census.inference_total()).expect("string write");
        if let (Some(r), Some(d)) = (self.reference_params(), self.param_deviation()) {
            writeln!(s, "reference             {:>12.0}  deviation {:+.1}%", r, 100.0 * d).expect("string write");
        }
        let e = self.flops_extent;
        writeln!(s, "flops at {e}x{e} (1 MAC = 2 flops, convolutions and attention products only):")
            .expect("string write");
        for (g, f) in &self.flops {
            writeln!(s, "  {g:<10} {:>12.4e}", *f as f64).expect("string write");
        }
        writeln!(s, "total flops           {:>12.4e}", self.total_flops as f64).expect("string write");
        s
    }
}
