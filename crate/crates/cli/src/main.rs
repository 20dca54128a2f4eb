//! `framers` — pretrain, label, train the selector, compress and evaluate.
//!
//! Every command reads the same run config (`--config`, YAML, merged over a
//! preset), writes under `--out-dir`, and records the effective config and
//! the hashes of the checkpoints it read in `<out>/<command>/`.
//!
//! Seed precedence: `--seed` > `FRAMERS_SEED` > config file > preset.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use framers::checkpoint::{self, CheckpointManifest};
use framers::clipio::{
    denormalize, planted_dataset, read_planted_dataset, read_video_dir, sample_clip, write_planted_dataset,
    write_video_dir, PlantedClip, SourceVideo, VideoClip,
};
use framers::codec::{self, CompressedClip, Policy, PolicyContext};
use framers::framemae::{pretrain, FrameMae};
use framers::labelgen::{build_label_dataset, read_labels};
use framers::selector::{ablation_sweep, train_selector, Selector, SelectorDataset};
use ndarray::Axis;
use serde::Serialize;

use crate::config::{DataSource, Preset, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "framers", version, about = "Frame-masked video autoencoder and key-slot codec")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// YAML run config; omitted keys come from the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when the config names none.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    #[arg(long, global = true, env = "FRAMERS_SEED")]
    seed: Option<u64>,
    /// Root for every artifact (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct Models {
    /// FrameMAE checkpoint directory [default: <out>/framemae]
    #[arg(long)]
    framemae: Option<PathBuf>,
    /// Selector checkpoint directory [default: <out>/selector]
    #[arg(long)]
    selector: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the planted train/label/eval splits to `<out>/data`.
    MakePlanted,
    /// Pretrain the frame-masked autoencoder.
    Pretrain,
    /// Rank every keep-k combination of each label clip with the oracle.
    GenLabels {
        #[command(flatten)]
        models: Models,
    },
    /// Train the key-slot selector on oracle labels.
    TrainSelector {
        #[command(flatten)]
        models: Models,
    },
    /// Sweep selector depth and dropout.
    Ablate {
        #[command(flatten)]
        models: Models,
    },
    /// Pack kept frames of each clip into `.frrs` containers.
    Compress {
        #[command(flatten)]
        models: Models,
        #[arg(long, default_value = "learned")]
        policy: Policy,
        /// Planted-dataset or video directory [default: eval split]
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Rebuild clips from `.frrs` containers.
    Decompress {
        #[command(flatten)]
        models: Models,
        /// A container or a directory of them [default: <out>/compressed]
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compare policies by reconstruction MSE.
    Eval {
        #[command(flatten)]
        models: Models,
        /// Comma-separated [default: codec.policies]
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<Policy>>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// PNG grid: original, masked and reconstructed rows per clip.
    Visualize {
        #[command(flatten)]
        models: Models,
        #[arg(long, default_value = "uniform")]
        policy: Policy,
        #[arg(long, default_value_t = 2)]
        clips: usize,
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MakePlanted => "make-planted",
            Command::Pretrain => "pretrain",
            Command::GenLabels { .. } => "gen-labels",
            Command::TrainSelector { .. } => "train-selector",
            Command::Ablate { .. } => "ablate",
            Command::Compress { .. } => "compress",
            Command::Decompress { .. } => "decompress",
            Command::Eval { .. } => "eval",
            Command::Visualize { .. } => "visualize",
        }
    }
}

/// Failures the user can fix by changing the invocation or config.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => config::load(path, common.preset)?,
        None => RunConfig::preset(common.preset),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Run context
// ---------------------------------------------------------------------------

#[derive(Serialize, Default)]
struct Provenance {
    command: String,
    seed: u64,
    /// Checkpoint or label-set hashes read by the command.
    consumed: BTreeMap<String, String>,
    produced: BTreeMap<String, String>,
}

struct Run {
    cfg: RunConfig,
    /// `<out>/<command>`
    dir: PathBuf,
    prov: Provenance,
}

impl Run {
    fn new(cfg: RunConfig, command: &str) -> Result<Self> {
        let dir = cfg.out_dir.join(command);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.yaml"), serde_yaml::to_string(&cfg)?)?;
        Ok(Self {
            prov: Provenance {
                command: command.to_string(),
                seed: cfg.seed,
                ..Default::default()
            },
            cfg,
            dir,
        })
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.out_dir.join(rel)
    }

    fn finish(self) -> Result<()> {
        fs::write(self.dir.join("provenance.json"), serde_json::to_vec_pretty(&self.prov)?)?;
        Ok(())
    }

    fn load_mae(&mut self, models: &Models) -> Result<FrameMae> {
        let dir = models.framemae.clone().unwrap_or_else(|| self.out("framemae"));
        let (mae, manifest): (FrameMae, CheckpointManifest) =
            checkpoint::load(&dir).with_context(|| format!("loading FrameMAE checkpoint {}", dir.display()))?;
        if mae.config != self.cfg.model {
            bail!(
                "checkpoint {} was trained with a different model config than this run",
                dir.display()
            );
        }
        self.prov.consumed.insert("framemae".into(), manifest.model_hash);
        Ok(mae)
    }

    fn load_selector(&mut self, models: &Models, mae: &FrameMae) -> Result<Selector> {
        let dir = models.selector.clone().unwrap_or_else(|| self.out("selector"));
        let (sel, manifest): (Selector, CheckpointManifest) =
            checkpoint::load(&dir).with_context(|| format!("loading selector checkpoint {}", dir.display()))?;
        let mae_hash = mae.fingerprint();
        if manifest.parent_hash.as_deref() != Some(mae_hash.as_str()) {
            bail!(
                "selector {} was trained on FrameMAE {}, not {mae_hash}",
                dir.display(),
                manifest.parent_hash.as_deref().unwrap_or("<none>")
            );
        }
        self.prov.consumed.insert("selector".into(), manifest.model_hash);
        Ok(sel)
    }

    // Splits are derived from the run seed so every command sees the same
    // clips without passing data between them.
    fn split(&self, name: &str) -> Result<Vec<VideoClip>> {
        let (offset, count) = match name {
            "train" => (0, self.cfg.data.train_clips),
            "label" => (1, self.cfg.data.label_clips),
            _ => (2, self.cfg.data.eval_clips),
        };
        let seed = self.cfg.seed.wrapping_add(offset);
        match self.cfg.data.source {
            DataSource::Planted => Ok(self.planted(name)?.into_iter().map(|p| p.clip).collect()),
            DataSource::Video => {
                let videos = self
                    .cfg
                    .data
                    .videos
                    .iter()
                    .map(|d| read_video_dir(d).with_context(|| format!("reading video {}", d.display())))
                    .collect::<Result<Vec<_>>>()?;
                sample_split(&videos, &self.cfg, count, seed)
            }
        }
    }

    fn planted(&self, name: &str) -> Result<Vec<PlantedClip>> {
        let (offset, count) = match name {
            "train" => (0, self.cfg.data.train_clips),
            "label" => (1, self.cfg.data.label_clips),
            _ => (2, self.cfg.data.eval_clips),
        };
        let m = &self.cfg.model;
        Ok(planted_dataset(
            &m.clip,
            m.temporal_patch,
            self.cfg.data.planted_slots,
            count,
            self.cfg.seed.wrapping_add(offset),
        )?)
    }

    /// `--input` if given (planted dataset or video directory), else the
    /// eval split.
    fn eval_clips(&self, input: Option<&Path>) -> Result<Vec<VideoClip>> {
        let Some(dir) = input else {
            return self.split("eval");
        };
        if !dir.exists() {
            bail!("input {} does not exist", dir.display());
        }
        if dir.join(framers::clipio::LABELS_FILE).exists() {
            let planted = read_planted_dataset(dir)?;
            return Ok(planted.into_iter().map(|p| p.clip).collect());
        }
        let video = read_video_dir(dir)?;
        sample_split(&[video], &self.cfg, self.cfg.data.eval_clips.max(1), self.cfg.seed)
    }
}

fn sample_split(videos: &[SourceVideo], cfg: &RunConfig, count: usize, seed: u64) -> Result<Vec<VideoClip>> {
    (0..count)
        .map(|i| {
            let video = &videos[i % videos.len()];
            Ok(sample_clip(video, &cfg.model.clip, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?)
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn file_stem(clip_id: &str) -> String {
    clip_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn make_planted(run: &mut Run) -> Result<()> {
    for split in ["train", "label", "eval"] {
        let dir = run.out(&format!("data/{split}"));
        let clips = run.planted(split)?;
        write_planted_dataset(&dir, &clips)?;
        eprintln!("wrote {} planted clips to {}", clips.len(), dir.display());
    }
    Ok(())
}

fn cmd_pretrain(run: &mut Run) -> Result<()> {
    let clips = run.split("train")?;
    let (cfg, hp, seed) = (run.cfg.model.clone(), run.cfg.train.clone(), run.cfg.seed);
    let snapshots = run.out("checkpoints");
    let total = hp.steps;
    let (state, trace) = pretrain(&clips, &cfg, &hp, seed, |state, log, due| {
        if log.step % 50 == 0 || log.step + 1 == total {
            eprintln!("step {:>5}  loss {:.6}  lr {:.2e}", log.step, log.loss, log.lr);
        }
        if due {
            checkpoint::save(
                &snapshots.join(format!("step-{:06}", state.step)),
                &state.model,
                state.step,
                seed,
                None,
            )?;
        }
        Ok(())
    })?;
    write_csv(&run.dir.join("loss.csv"), &trace)?;
    let hash = checkpoint::save(&run.out("framemae"), &state.model, state.step, seed, None)?;
    eprintln!("saved FrameMAE {hash}");
    run.prov.produced.insert("framemae".into(), hash);
    Ok(())
}

fn cmd_gen_labels(run: &mut Run, models: &Models) -> Result<()> {
    let mae = run.load_mae(models)?;
    let clips = run.split("label")?;
    let dir = run.out("labels");
    let summary = build_label_dataset(&clips, &mae, run.cfg.codec.k, &dir)?;
    eprintln!(
        "{} labels in {} ({} newly evaluated)",
        summary.total,
        dir.display(),
        summary.evaluated
    );
    run.prov.produced.insert("labels".into(), mae.fingerprint());
    Ok(())
}

fn selector_data(run: &mut Run, mae: &FrameMae) -> Result<SelectorDataset> {
    let dir = run.out("labels");
    if !dir.join(framers::labelgen::LABELS_FILE).exists() {
        bail!("missing labels {} (run gen-labels first)", dir.join(framers::labelgen::LABELS_FILE).display());
    }
    let (manifest, records) = read_labels(&dir)?;
    run.prov.consumed.insert("labels".into(), manifest.model_hash.clone());
    let clips = run.split("label")?;
    Ok(SelectorDataset::build(&clips, &records, mae)?)
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
    top1: f64,
    top5: f64,
}

fn cmd_train_selector(run: &mut Run, models: &Models) -> Result<()> {
    let mae = run.load_mae(models)?;
    let data = selector_data(run, &mae)?;
    let cfg = run.cfg.selector_config();
    let result = train_selector(&data, &cfg, &run.cfg.selector.train, run.cfg.seed)?;
    let rows: Vec<EpochRow> = std::iter::once(&result.initial)
        .chain(&result.trace)
        .map(|m| EpochRow {
            epoch: m.epoch,
            loss: m.loss,
            top1: m.top1,
            top5: m.top5,
        })
        .collect();
    write_csv(&run.dir.join("metrics.csv"), &rows)?;
    let b = result.best;
    eprintln!(
        "best epoch {}: val top-1 {:.2}%, top-5 {:.2}%",
        b.epoch,
        100.0 * b.top1,
        100.0 * b.top5
    );
    let hash = checkpoint::save(
        &run.out("selector"),
        &result.selector,
        b.epoch,
        run.cfg.seed,
        Some(mae.fingerprint()),
    )?;
    run.prov.produced.insert("selector".into(), hash);
    Ok(())
}

fn cmd_ablate(run: &mut Run, models: &Models) -> Result<()> {
    let mae = run.load_mae(models)?;
    let data = selector_data(run, &mae)?;
    let s = &run.cfg.selector;
    let table = ablation_sweep(&data, &run.cfg.selector_config(), &s.ablation, &s.train, &s.ablation_seeds)?;
    fs::write(run.dir.join("table.txt"), table.to_string())?;
    fs::write(run.dir.join("table.csv"), table.to_csv())?;
    print!("{table}");
    Ok(())
}

fn load_models(run: &mut Run, models: &Models, needs_selector: bool) -> Result<(FrameMae, Option<Selector>)> {
    let mae = run.load_mae(models)?;
    let selector = if needs_selector {
        Some(run.load_selector(models, &mae)?)
    } else {
        None
    };
    Ok((mae, selector))
}

fn cmd_compress(run: &mut Run, models: &Models, policy: Policy, input: Option<&Path>) -> Result<()> {
    let (mae, selector) = load_models(run, models, policy == Policy::Learned)?;
    let ctx = PolicyContext {
        mae: Some(&mae),
        selector: selector.as_ref(),
        seed: run.cfg.seed,
    };
    let clips = run.eval_clips(input)?;
    let dir = run.out("compressed");
    fs::create_dir_all(&dir)?;
    let mut bytes_total = 0;
    let mut retained = 0.0;
    for clip in &clips {
        let cc = codec::compress(clip, policy, run.cfg.codec.k, &ctx)?;
        retained = cc.retained_fraction();
        let bytes = cc.to_bytes()?;
        bytes_total += bytes.len();
        fs::write(dir.join(format!("{}.frrs", file_stem(&clip.clip_id))), bytes)?;
    }
    let raw = clips.iter().map(|c| c.pixels.len()).sum::<usize>();
    eprintln!(
        "{} clips -> {} ({bytes_total} bytes, {:.1}% of 8-bit raw; retained fraction {retained})",
        clips.len(),
        dir.display(),
        100.0 * bytes_total as f64 / raw.max(1) as f64,
    );
    Ok(())
}

fn containers(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        bail!("no containers at {}", input.display());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "frrs"))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_decompress(run: &mut Run, models: &Models, input: Option<&Path>) -> Result<()> {
    let mae = run.load_mae(models)?;
    let input = input.map(Path::to_path_buf).unwrap_or_else(|| run.out("compressed"));
    let files = containers(&input)?;
    let out = run.out("decompressed");
    for path in &files {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let cc = CompressedClip::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        let clip = codec::decompress(&cc, &mae)?;
        let video = SourceVideo {
            name: clip.clip_id.clone(),
            fps: 0.0,
            frames: denormalize(clip.pixels.view())?,
        };
        write_video_dir(&out.join(file_stem(&clip.clip_id)), &video)?;
    }
    eprintln!("{} clips -> {}", files.len(), out.display());
    Ok(())
}

fn cmd_eval(run: &mut Run, models: &Models, policies: Option<Vec<Policy>>, input: Option<&Path>) -> Result<()> {
    let policies = policies.unwrap_or_else(|| run.cfg.codec.policies.clone());
    let (mae, selector) = load_models(run, models, policies.contains(&Policy::Learned))?;
    let ctx = PolicyContext {
        mae: Some(&mae),
        selector: selector.as_ref(),
        seed: run.cfg.seed,
    };
    let clips = run.eval_clips(input)?;
    let report = codec::compare_policies(&clips, &policies, run.cfg.codec.k, &ctx)?;
    fs::write(run.dir.join("report.csv"), report.to_csv())?;
    fs::write(run.dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn to_rgb(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn cmd_visualize(run: &mut Run, models: &Models, policy: Policy, count: usize, input: Option<&Path>) -> Result<()> {
    let (mae, selector) = load_models(run, models, policy == Policy::Learned)?;
    let ctx = PolicyContext {
        mae: Some(&mae),
        selector: selector.as_ref(),
        seed: run.cfg.seed,
    };
    let clips: Vec<VideoClip> = run.eval_clips(input)?.into_iter().take(count).collect();
    if clips.is_empty() {
        bail!("no clips to visualize");
    }
    let c = &run.cfg.model.clip;
    let (fw, fh) = (c.width as u32, c.height as u32);
    let mut img = image::RgbImage::new(fw * c.frames as u32, fh * 3 * clips.len() as u32);
    for (ci, clip) in clips.iter().enumerate() {
        let cc = codec::compress(clip, policy, run.cfg.codec.k, &ctx)?;
        let rebuilt = codec::decompress(&cc, &mae)?;
        let kept: Vec<usize> = cc
            .meta
            .kept_slots
            .iter()
            .flat_map(|&s| framers::clipio::slot_frames(s, cc.meta.temporal_patch))
            .collect();
        for (row, source) in [(0, &clip.pixels), (1, &clip.pixels), (2, &rebuilt.pixels)] {
            for (f, frame) in source.axis_iter(Axis(0)).enumerate() {
                let hidden = row == 1 && !kept.contains(&f);
                for ((y, x, _), _) in frame.indexed_iter().filter(|((_, _, ch), _)| *ch == 0) {
                    let px = if hidden {
                        image::Rgb([0, 0, 0])
                    } else {
                        let at = |ch: usize| to_rgb(frame[[y, x, ch.min(c.channels - 1)]]);
                        image::Rgb([at(0), at(1), at(2)])
                    };
                    img.put_pixel(
                        f as u32 * fw + x as u32,
                        (ci as u32 * 3 + row) * fh + y as u32,
                        px,
                    );
                }
            }
        }
    }
    let path = run.dir.join("grid.png");
    img.save(&path).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("{} clips x 3 rows -> {}", clips.len(), path.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common).map_err(UsageError)?;
    let mut run = Run::new(cfg, cli.command.name())?;
    match &cli.command {
        Command::MakePlanted => make_planted(&mut run)?,
        Command::Pretrain => cmd_pretrain(&mut run)?,
        Command::GenLabels { models } => cmd_gen_labels(&mut run, models)?,
        Command::TrainSelector { models } => cmd_train_selector(&mut run, models)?,
        Command::Ablate { models } => cmd_ablate(&mut run, models)?,
        Command::Compress { models, policy, input } => cmd_compress(&mut run, models, *policy, input.as_deref())?,
        Command::Decompress { models, input } => cmd_decompress(&mut run, models, input.as_deref())?,
        Command::Eval {
            models,
            policies,
            input,
        } => cmd_eval(&mut run, models, policies.clone(), input.as_deref())?,
        Command::Visualize {
            models,
            policy,
            clips,
            input,
        } => cmd_visualize(&mut run, models, *policy, *clips, input.as_deref())?,
    }
    run.finish()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
