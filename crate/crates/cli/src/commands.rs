//! Command implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lanegen::checkpoint;
use lanegen::dataio::{load_rgb_png, load_split, resize_bilinear, DatasetSplit};
use lanegen::inference::{generate_batch, noise_agreement, write_outputs};
use lanegen::metrics::{report, ConfusionCounts, MetricsReport};
use lanegen::model::Generator;
use lanegen::perturb::{build_adverse_sets, write_adverse_sets};
use lanegen::synth::{synth_dataset_to_disk, SplitCounts};
use lanegen::trainer::{train, TrainConfig, TrainOptions, TrainState};
use lanegen::{ClassPalette, Error, LabelImage, RgbImage};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, Cli, Command, Common};

pub const CHECKSUMS_FILE: &str = "checksums.json";
pub const METRICS_STEM: &str = "metrics";
pub const PERTURB_REPORT: &str = "adverse_report.csv";
pub const ABLATION_TABLE: &str = "ablation.csv";
pub const ABLATION_RUNS: &str = "ablation_runs.csv";
pub const ABLATION_SUMMARY: &str = "ablation_summary.json";

type Result<T> = std::result::Result<T, CliError>;

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_text(path, &text)
}

fn resolve(common: &Common, mut extra: Vec<String>) -> Result<(RunConfig, ClassPalette)> {
    let mut overrides = common.set.clone();
    overrides.append(&mut extra);
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &overrides)?;
    if let Some(p) = &common.palette {
        cfg.palette = Some(p.clone());
    }
    let palette = cfg.palette()?;
    Ok((cfg, palette))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(CliError::Usage(format!("{what} {} is not a directory", path.display())));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(checkpoint::load(path)?)
}

fn load_named_split(data: &Path, split: &str, palette: &ClassPalette, size: usize) -> Result<DatasetSplit> {
    require_dir(data, "data directory")?;
    let dir = data.join(split);
    require_dir(&dir, "split")?;
    let loaded = load_split(&dir, palette, size)?;
    if loaded.is_empty() {
        return Err(Error::Dataset(format!("split `{split}` under {} is empty", data.display())).into());
    }
    Ok(loaded)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let common = cli.common;
    match cli.command {
        Command::Synth { out, seed, counts, size } => {
            let mut extra = Vec::new();
            if let Some(s) = seed {
                extra.push(format!("synth.seed={s}"));
            }
            if let Some(c) = counts {
                let c: SplitCounts = c.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
                extra.push(format!("synth.train={}", c.train));
                extra.push(format!("synth.val={}", c.val));
                extra.push(format!("synth.test={}", c.test));
            }
            if let Some(s) = size {
                extra.push(format!("synth.image_size={s}"));
            }
            let (cfg, palette) = resolve(&common, extra)?;
            cmd_synth(&cfg, &palette, &out)
        }
        Command::Train { data, out, no_adversarial, resume } => {
            let extra = if no_adversarial {
                vec!["train.adversarial_enabled=false".to_string()]
            } else {
                Vec::new()
            };
            let (cfg, palette) = resolve(&common, extra)?;
            cmd_train(&cfg, &palette, &data, &out, resume.as_deref()).map(|_| ())
        }
        Command::Infer { checkpoint, input, out, seed } => {
            let extra = seed.map(|s| vec![format!("infer.seed={s}")]).unwrap_or_default();
            let (cfg, palette) = resolve(&common, extra)?;
            cmd_infer(&cfg, &palette, &checkpoint, &input, &out)
        }
        Command::Eval { checkpoint, data, split, out, seed, self_check, save_outputs } => {
            let extra = seed.map(|s| vec![format!("infer.seed={s}")]).unwrap_or_default();
            let (cfg, palette) = resolve(&common, extra)?;
            let source = match (checkpoint, self_check) {
                (_, true) => EvalSource::GroundTruth,
                (Some(c), false) => EvalSource::Checkpoint(c),
                (None, false) => {
                    return Err(CliError::Usage("eval needs --checkpoint or --self-check".into()));
                }
            };
            cmd_eval(&cfg, &palette, &source, &data, &split, &out, save_outputs).map(|_| ())
        }
        Command::Perturb { data, split, out, seed, checkpoint } => {
            let (cfg, palette) = resolve(&common, Vec::new())?;
            let seed = seed.unwrap_or(cfg.train.seed);
            cmd_perturb(&cfg, &palette, &data, &split, &out, seed, checkpoint.as_deref()).map(|_| ())
        }
        Command::Ablate { data, out, seeds, eval_split } => {
            let (cfg, palette) = resolve(&common, Vec::new())?;
            cmd_ablate(&cfg, &palette, &data, &out, &seeds, &eval_split).map(|_| ())
        }
    }
}

pub fn cmd_synth(cfg: &RunConfig, palette: &ClassPalette, out: &Path) -> Result<()> {
    let s = &cfg.synth;
    cfg.echo(out)?;
    let ds = synth_dataset_to_disk(out, s.seed, s.counts(), palette, s.image_size)?;
    if cfg.palette.is_some() {
        palette.save(out.join("palette.csv"))?;
    }
    log::info!(
        "wrote {} + {} + {} pairs of {}px to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        s.image_size,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Checksums {
    pub epoch: usize,
    pub step: u64,
    pub generator: String,
    pub discriminator: String,
}

/// Trains on `<data>/train`; returns the final state.
pub fn cmd_train(
    cfg: &RunConfig,
    palette: &ClassPalette,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainState> {
    let train_cfg = &cfg.train;
    let state = match resume {
        None => TrainState::new(train_cfg)?,
        Some(path) => {
            let (state, saved) = load_checkpoint(path)?;
            if saved.arch != train_cfg.arch {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained with a different architecture",
                    path.display()
                )));
            }
            if saved.seed != train_cfg.seed
                || saved.batch_size != train_cfg.batch_size
                || saved.source_mode != train_cfg.source_mode
                || saved.adversarial_enabled != train_cfg.adversarial_enabled
            {
                log::warn!("resuming with settings that differ from the checkpoint's; the run will not match an uninterrupted one");
            }
            if state.epoch >= train_cfg.epochs {
                log::warn!("checkpoint is at epoch {}, nothing left to train", state.epoch);
            }
            state
        }
    };
    let split = load_named_split(data, "train", palette, train_cfg.arch.image_size)?;
    cfg.echo(out)?;
    let start = Instant::now();
    let (mut state, rows) = train(
        &split,
        train_cfg,
        palette,
        state,
        &TrainOptions {
            out_dir: Some(out.to_path_buf()),
        },
    )?;
    log::info!(
        "trained {} steps in {:.1}s",
        rows.len(),
        start.elapsed().as_secs_f64()
    );
    let sums = Checksums {
        epoch: state.epoch,
        step: state.step,
        generator: state.generator_checksum(),
        discriminator: state.discriminator_checksum(),
    };
    write_json(&out.join(CHECKSUMS_FILE), &sums)?;
    Ok(state)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn cmd_infer(cfg: &RunConfig, palette: &ClassPalette, ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    require_dir(input, "input")?;
    let (state, _) = load_checkpoint(ckpt)?;
    let size = state.generator.config().image_size;
    let files = png_files(input)?;
    if files.is_empty() {
        return Err(CliError::Usage(format!("no PNG files in {}", input.display())));
    }
    let contexts = files
        .iter()
        .map(|p| load_rgb_png(p).map(|img| resize_bilinear(&img, size, size)))
        .collect::<lanegen::Result<Vec<_>>>()?;
    cfg.echo(out)?;
    let refs: Vec<&RgbImage> = contexts.iter().collect();
    let outputs = generate_batch(&state.generator, &refs, cfg.infer.seed, palette)?;
    for (path, (rgb, labels)) in files.iter().zip(&outputs) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        write_outputs(out, stem, rgb, labels, palette)?;
    }
    log::info!("wrote {} outputs to {}", outputs.len(), out.display());
    Ok(())
}

/// Metrics of one model (or the ground truth) on one split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Generated image and label map per sample, in split order.
    pub outputs: Vec<(RgbImage, LabelImage)>,
    pub ms_per_image: f64,
}

/// Runs generate → quantize over `split` and scores it. Sample `k` uses
/// noise seed `seed + k`.
pub fn evaluate_split(
    generator: &Generator<f32>,
    split: &DatasetSplit,
    palette: &ClassPalette,
    seed: u64,
) -> lanegen::Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::Dataset(format!("split `{}` is empty", split.name)));
    }
    let contexts: Vec<&RgbImage> = split.samples.iter().map(|s| &s.context).collect();
    let start = Instant::now();
    let outputs = generate_batch(generator, &contexts, seed, palette)?;
    let ms_per_image = start.elapsed().as_secs_f64() * 1e3 / split.len() as f64;
    let mut counts = ConfusionCounts::for_palette(palette);
    for (sample, (_, labels)) in split.samples.iter().zip(&outputs) {
        counts.accumulate(labels, &sample.target)?;
    }
    Ok(Evaluation {
        report: report(&counts, Some(palette)),
        outputs,
        ms_per_image,
    })
}

fn self_check_report(split: &DatasetSplit, palette: &ClassPalette) -> lanegen::Result<MetricsReport> {
    let mut counts = ConfusionCounts::for_palette(palette);
    for s in &split.samples {
        counts.accumulate(&s.target, &s.target)?;
    }
    Ok(report(&counts, Some(palette)))
}

#[derive(Debug, Clone)]
pub enum EvalSource {
    Checkpoint(PathBuf),
    /// Score the ground truth against itself.
    GroundTruth,
}

#[derive(Debug, Serialize)]
struct EvalDiagnostics {
    split: String,
    samples: usize,
    seed: u64,
    ms_per_image: f64,
    /// Mean pixel agreement between two noise seeds per context.
    noise_agreement: f64,
}

pub fn cmd_eval(
    cfg: &RunConfig,
    palette: &ClassPalette,
    source: &EvalSource,
    data: &Path,
    split_name: &str,
    out: &Path,
    save_outputs: bool,
) -> Result<MetricsReport> {
    let report = match source {
        EvalSource::GroundTruth => {
            let split = load_named_split(data, split_name, palette, cfg.train.arch.image_size)?;
            cfg.echo(out)?;
            self_check_report(&split, palette)?
        }
        EvalSource::Checkpoint(path) => {
            let (state, _) = load_checkpoint(path)?;
            let gen = &state.generator;
            let split = load_named_split(data, split_name, palette, gen.config().image_size)?;
            cfg.echo(out)?;
            let seed = cfg.infer.seed;
            let eval = evaluate_split(gen, &split, palette, seed)?;
            let mut agreement = 0.0;
            for (k, s) in split.samples.iter().enumerate() {
                let base = seed.wrapping_add(k as u64);
                agreement += noise_agreement(gen, &s.context, (base, base ^ 0x9e37_79b9_7f4a_7c15), palette)?;
            }
            let diag = EvalDiagnostics {
                split: split_name.to_string(),
                samples: split.len(),
                seed,
                ms_per_image: eval.ms_per_image,
                noise_agreement: agreement / split.len() as f64,
            };
            log::info!(
                "{} samples, {:.1} ms/image, noise agreement {:.4}",
                diag.samples,
                diag.ms_per_image,
                diag.noise_agreement
            );
            write_json(&out.join("diagnostics.json"), &diag)?;
            if save_outputs {
                let dir = out.join("outputs");
                for (s, (rgb, labels)) in split.samples.iter().zip(&eval.outputs) {
                    write_outputs(&dir, &s.id, rgb, labels, palette)?;
                }
            }
            eval.report
        }
    };
    report.write(out, METRICS_STEM)?;
    log::info!("mean IOU {}", fmt_opt(report.mean_iou));
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// One line of the clean-vs-adverse report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetSummary {
    pub set: String,
    pub samples: u64,
    pub mean_iou: Option<f64>,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub pixel_accuracy: Option<f64>,
}

impl SetSummary {
    fn new(set: &str, r: &MetricsReport) -> Self {
        Self {
            set: set.to_string(),
            samples: r.samples,
            mean_iou: r.mean_iou,
            mean_precision: r.mean_precision,
            mean_recall: r.mean_recall,
            pixel_accuracy: r.pixel_accuracy,
        }
    }

    pub const CSV_HEADER: &'static str = "set,samples,mean_iou,mean_precision,mean_recall,pixel_accuracy";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.set,
            self.samples,
            fmt_opt(self.mean_iou),
            fmt_opt(self.mean_precision),
            fmt_opt(self.mean_recall),
            fmt_opt(self.pixel_accuracy)
        )
    }
}

/// Checks that every adverse sample kept its source label map bit for bit,
/// both in memory and as written to disk.
fn verify_labels(source: &DatasetSplit, sets: &[DatasetSplit; 3], out: &Path, palette: &ClassPalette) -> Result<usize> {
    let by_id: BTreeMap<&str, &LabelImage> = source.samples.iter().map(|s| (s.id.as_str(), &s.target)).collect();
    let mut checked = 0;
    for set in sets {
        let reloaded = load_split(&out.join(&set.name), palette, set.image_size)?;
        let disk: BTreeMap<&str, &LabelImage> = reloaded.samples.iter().map(|s| (s.id.as_str(), &s.target)).collect();
        for s in &set.samples {
            let (orig_id, _) = s
                .id
                .rsplit_once('_')
                .ok_or_else(|| CliError::Runtime(format!("unexpected adverse id `{}`", s.id)))?;
            let orig = by_id
                .get(orig_id)
                .ok_or_else(|| CliError::Runtime(format!("adverse sample `{}` has no source", s.id)))?;
            if &s.target != *orig || disk.get(s.id.as_str()) != Some(orig) {
                return Err(CliError::Runtime(format!("labels of `{}` changed under perturbation", s.id)));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Builds the adverse sets under `out`; with a checkpoint, evaluates the
/// clean split and each set and returns their summaries (clean first).
pub fn cmd_perturb(
    cfg: &RunConfig,
    palette: &ClassPalette,
    data: &Path,
    split_name: &str,
    out: &Path,
    seed: u64,
    ckpt: Option<&Path>,
) -> Result<Vec<SetSummary>> {
    let model = ckpt.map(load_checkpoint).transpose()?;
    let size = model
        .as_ref()
        .map_or(cfg.train.arch.image_size, |(s, _)| s.generator.config().image_size);
    let split = load_named_split(data, split_name, palette, size)?;
    cfg.echo(out)?;
    let sets = build_adverse_sets(&split, &cfg.perturb, seed)?;
    write_adverse_sets(out, &sets, palette)?;
    let checked = verify_labels(&split, &sets, out, palette)?;
    log::info!("labels of {checked} adverse samples verified unchanged");

    let Some((state, _)) = model else {
        return Ok(Vec::new());
    };
    let mut summaries = Vec::new();
    let metrics_dir = out.join("metrics");
    for (name, s) in std::iter::once((format!("clean_{split_name}"), &split))
        .chain(sets.iter().map(|s| (s.name.clone(), s)))
    {
        let eval = evaluate_split(&state.generator, s, palette, cfg.infer.seed)?;
        eval.report.write(&metrics_dir, &name)?;
        summaries.push(SetSummary::new(&name, &eval.report));
    }
    let mut csv = String::from(SetSummary::CSV_HEADER);
    csv.push('\n');
    for s in &summaries {
        csv.push_str(&s.to_csv());
        csv.push('\n');
    }
    write_text(&out.join(PERTURB_REPORT), &csv)?;
    for s in &summaries {
        log::info!("{:<16} mean IOU {}", s.set, fmt_opt(s.mean_iou));
    }
    Ok(summaries)
}

/// Held-out result of one seed of the ablation.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    pub with_adv: Option<f64>,
    pub without_adv: Option<f64>,
    /// Whether the adversarial run matched or beat the regression-only run.
    pub adv_not_worse: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationSummary {
    pub eval_split: String,
    pub runs: Vec<AblationRun>,
    pub wins: usize,
    /// `with ≥ without` on a strict majority of seeds.
    pub majority: bool,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-class IOU table: one row per non-background class (averaged over
/// seeds), then the mean IOU row.
fn ablation_table(with: &[MetricsReport], without: &[MetricsReport]) -> String {
    let mut csv = String::from("class,iou_with_adv,iou_without_adv\n");
    if let Some(first) = with.first() {
        for c in first.classes.iter().filter(|c| c.id != 0) {
            let per = |reports: &[MetricsReport]| mean_defined(reports.iter().map(|r| r.class(c.id).and_then(|m| m.iou)));
            csv.push_str(&format!("{},{},{}\n", c.name, fmt_opt(per(with)), fmt_opt(per(without))));
        }
    }
    let mean = |reports: &[MetricsReport]| mean_defined(reports.iter().map(|r| r.mean_iou));
    csv.push_str(&format!("mean,{},{}\n", fmt_opt(mean(with)), fmt_opt(mean(without))));
    csv
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    palette: &ClassPalette,
    data: &Path,
    out: &Path,
    seeds: &[u64],
    eval_split: &str,
) -> Result<AblationSummary> {
    if seeds.is_empty() {
        return Err(CliError::Usage("ablate needs at least one seed".into()));
    }
    let held_out = load_named_split(data, eval_split, palette, cfg.train.arch.image_size)?;
    cfg.echo(out)?;
    let mut with = Vec::new();
    let mut without = Vec::new();
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut scores = [None, None];
        for (k, adversarial) in [true, false].into_iter().enumerate() {
            let mut run_cfg = cfg.clone();
            run_cfg.train.seed = seed;
            run_cfg.train.adversarial_enabled = adversarial;
            let tag = if adversarial { "with_adv" } else { "without_adv" };
            let dir = out.join(format!("seed_{seed}")).join(tag);
            log::info!("ablation seed {seed}: training {tag}");
            let state = cmd_train(&run_cfg, palette, data, &dir, None)?;
            let eval = evaluate_split(&state.generator, &held_out, palette, cfg.infer.seed)?;
            eval.report.write(&dir, METRICS_STEM)?;
            scores[k] = eval.report.mean_iou;
            if adversarial {
                with.push(eval.report);
            } else {
                without.push(eval.report);
            }
        }
        let adv_not_worse = matches!(scores, [Some(a), Some(b)] if a >= b);
        log::info!(
            "ablation seed {seed}: mean IOU with {} without {}",
            fmt_opt(scores[0]),
            fmt_opt(scores[1])
        );
        runs.push(AblationRun {
            seed,
            with_adv: scores[0],
            without_adv: scores[1],
            adv_not_worse,
        });
    }
    write_text(&out.join(ABLATION_TABLE), &ablation_table(&with, &without))?;
    let mut csv = String::from("seed,mean_iou_with_adv,mean_iou_without_adv,adv_not_worse\n");
    for r in &runs {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.seed,
            fmt_opt(r.with_adv),
            fmt_opt(r.without_adv),
            r.adv_not_worse
        ));
    }
    write_text(&out.join(ABLATION_RUNS), &csv)?;
    let wins = runs.iter().filter(|r| r.adv_not_worse).count();
    let summary = AblationSummary {
        eval_split: eval_split.to_string(),
        majority: 2 * wins > runs.len(),
        wins,
        runs,
    };
    write_json(&out.join(ABLATION_SUMMARY), &summary)?;
    Ok(summary)
}
