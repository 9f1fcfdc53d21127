//! Subcommands of the `vidswap` binary.

pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vidswap_core::checkpoint::{file_hash, Archive};
use vidswap_core::codec::{pretrain_codec, psnr, Codec};
use vidswap_core::dil::{pretrain_identity_encoder, IdentityEncoder};
use vidswap_core::eval::evaluate;
use vidswap_core::metrics::{pretrain_factor_regressor, FactorRegressor, FvdExtractor};
use vidswap_core::trainer::{
    fit, read_metrics_log, swap, FitOptions, Model, Pretrained, TrainState, CHECKPOINT_FILE, METRICS_FILE,
};
use vidswap_core::videodata::io::{read_clip, read_image, write_clip, write_dataset};
use vidswap_core::videodata::{ClipSource, DiskDataset, IdentityCodebook, SourceFace, SyntheticDataset};
use vidswap_core::{Error, EvalReport, MetricsRecord, Result, RunConfig};

use plot::{bars, legend, smooth, stacked_lines, Panel, Series, PALETTE};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("VIDSWAP_GIT_DESCRIBE"), ")");

pub const CONFIG_FILE: &str = "config.toml";
pub const VERSION_FILE: &str = "VERSION";
pub const CODEC_FILE: &str = "codec.safetensors";
pub const IDENC_FILE: &str = "idenc.safetensors";
pub const REGRESSOR_FILE: &str = "regressor.safetensors";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const REPORT_FILE: &str = "report.json";
pub const PAIRS_FILE: &str = "pairs.ndjson";
pub const TRACES_FILE: &str = "vidd_traces.json";

#[derive(Debug, Parser)]
#[command(name = "vidswap", version = VERSION, about = "Video face swapping with latent diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override, e.g. `--set train.total_steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Run directory holding every stage's outputs (overrides `out_dir`).
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Run seed, copied into every module seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset to disk.
    SynthData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        identities: Option<usize>,
        /// Dataset directory [default: <run>/data].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the latent codec and measure `sigma_data`.
    PretrainCodec {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the identity encoder and the evaluation factor regressor.
    PretrainIdenc {
        /// Only train the identity encoder.
        #[arg(long)]
        skip_regressor: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train the swap model.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from `<run>/train/checkpoint.safetensors`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Swap a source face into a target clip.
    Swap {
        /// Source face image (PNG, idenc input size).
        #[arg(long)]
        source: PathBuf,
        /// Target clip directory with frames and masks.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output clip directory [default: <run>/swap].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Force the attribute frame mask to zero.
        #[arg(long)]
        no_fal: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score swaps on a held-out dataset and draw plots.
    Eval {
        /// Held-out dataset [default: <run>/test].
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report directory [default: <run>/eval, or <run>/eval_no_fal].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Force the attribute frame mask to zero.
        #[arg(long)]
        no_fal: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Draw loss curves, metric bars and VIDD traces.
    Plot {
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Directory written by `eval`.
        #[arg(long)]
        eval_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => 3,
        Error::Io(_) | Error::MissingFile(_) | Error::Image(_) | Error::Json(_) => 4,
        Error::Tensor(_) => 1,
        _ => 2,
    }
}

fn resolve_config(common: &Common, extra: &[String]) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut sets = common.sets.clone();
    if let Some(d) = &common.run_dir {
        sets.push(format!("out_dir={}", toml_string(&d.to_string_lossy())));
    }
    if let Some(s) = common.seed {
        sets.push(format!("seed={s}"));
    }
    sets.extend_from_slice(extra);
    base.with_overrides(&sets)?.resolve()
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

/// Writes the resolved config and the version string into `dir`.
pub fn write_run_files(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    cfg.save(dir.join(CONFIG_FILE))?;
    fs::write(dir.join(VERSION_FILE), format!("{VERSION}\n"))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.out_dir.clone(),
        }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn test(&self) -> PathBuf {
        self.root.join("test")
    }
    pub fn codec(&self) -> PathBuf {
        self.root.join("codec")
    }
    pub fn idenc(&self) -> PathBuf {
        self.root.join("idenc")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.train().join(CHECKPOINT_FILE)
    }
    pub fn pretrained(&self) -> Result<Pretrained> {
        let codec = Codec::from_archive(&Archive::load(require(&self.codec().join(CODEC_FILE))?)?)?;
        let idenc = IdentityEncoder::from_archive(&Archive::load(require(&self.idenc().join(IDENC_FILE))?)?)?;
        Pretrained::new(&codec, &idenc)
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[vidswap] {}", msg.as_ref());
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            n,
            frames,
            identities,
            out,
            force,
            common,
        } => {
            let mut extra = Vec::new();
            if let Some(n) = n {
                extra.push(format!("data.clips={n}"));
            }
            if let Some(f) = frames {
                extra.push(format!("data.frames={f}"));
            }
            if let Some(i) = identities {
                extra.push(format!("data.identities={i}"));
            }
            let cfg = resolve_config(&common, &extra)?;
            let out = out.unwrap_or_else(|| RunPaths::new(&cfg).data());
            synth_data(&cfg, &out, force)
        }
        Command::PretrainCodec { data, common } => {
            let cfg = resolve_config(&common, &[])?;
            let paths = RunPaths::new(&cfg);
            pretrain_codec_cmd(&cfg, &data.unwrap_or_else(|| paths.data()), &paths.codec())
        }
        Command::PretrainIdenc { skip_regressor, common } => {
            let cfg = resolve_config(&common, &[])?;
            pretrain_idenc_cmd(&cfg, &RunPaths::new(&cfg).idenc(), !skip_regressor)
        }
        Command::Train {
            data,
            steps,
            resume,
            common,
        } => {
            let extra: Vec<String> = steps.map(|s| format!("train.total_steps={s}")).into_iter().collect();
            let cfg = resolve_config(&common, &extra)?;
            let paths = RunPaths::new(&cfg);
            train_cmd(&cfg, &data.unwrap_or_else(|| paths.data()), resume)
        }
        Command::Swap {
            source,
            target,
            checkpoint,
            out,
            no_fal,
            common,
        } => {
            let extra: Vec<String> = no_fal.then(|| "swap.use_attributes=false".to_string()).into_iter().collect();
            let cfg = resolve_config(&common, &extra)?;
            let paths = RunPaths::new(&cfg);
            let checkpoint = checkpoint.unwrap_or_else(|| paths.checkpoint());
            let out = out.unwrap_or_else(|| paths.root.join("swap"));
            swap_cmd(&cfg, &checkpoint, &source, &target, &out)
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            no_fal,
            common,
        } => {
            let extra: Vec<String> = no_fal.then(|| "swap.use_attributes=false".to_string()).into_iter().collect();
            let cfg = resolve_config(&common, &extra)?;
            let paths = RunPaths::new(&cfg);
            let out = out.unwrap_or_else(|| paths.root.join(if no_fal { "eval_no_fal" } else { "eval" }));
            eval_cmd(
                &cfg,
                &checkpoint.unwrap_or_else(|| paths.checkpoint()),
                &data.unwrap_or_else(|| paths.test()),
                &out,
            )
        }
        Command::Plot {
            metrics,
            eval_dir,
            out,
            common,
        } => {
            let cfg = resolve_config(&common, &[])?;
            let paths = RunPaths::new(&cfg);
            let out = out.unwrap_or_else(|| paths.root.join("plots"));
            let metrics = metrics.unwrap_or_else(|| paths.train().join(METRICS_FILE));
            let eval_dir = eval_dir.unwrap_or_else(|| paths.root.join("eval"));
            write_run_files(&out, &cfg)?;
            let n = plot_cmd(Some(metrics.as_path()).filter(|p| p.exists()), Some(eval_dir.as_path()).filter(|p| p.exists()), &out)?;
            if n == 0 {
                return Err(Error::MissingFile(metrics));
            }
            Ok(())
        }
    }
}

pub fn synth_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} is not empty; pass --force to replace it", out.display()),
            )));
        }
        fs::remove_dir_all(out)?;
    }
    let ds = SyntheticDataset::new(cfg.data)?;
    log(format!("rendering {} clips of {} frames into {}", ds.len(), cfg.data.frames, out.display()));
    write_dataset(&ds, out)?;
    write_run_files(out, cfg)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CodecSummary {
    pub sigma_data: f64,
    pub psnr_db: f64,
    pub final_loss: Option<f64>,
    pub weights_sha256: String,
}

fn pretrain_codec_cmd(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let data = DiskDataset::open(data_dir, false)?;
    log(format!("pretraining codec on {} clips", data.len()));
    let (codec, losses) = pretrain_codec(cfg.codec, &cfg.codec_train, &data)?;
    let probe = data.clip(data.len() - 1)?;
    let recon = codec.decode_frames(&codec.encode_frames(&probe.frames)?)?;
    write_run_files(out, cfg)?;
    let path = out.join(CODEC_FILE);
    codec.to_archive()?.save(&path)?;
    let summary = CodecSummary {
        sigma_data: codec.sigma_data,
        psnr_db: psnr(&recon, &probe.frames)?,
        final_loss: losses.last().copied(),
        weights_sha256: file_hash(&path)?,
    };
    log(format!("sigma_data {:.4}, PSNR {:.2} dB", summary.sigma_data, summary.psnr_db));
    write_json(&out.join("summary.json"), &summary)
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut s = String::new();
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&serde_json::to_string(&serde_json::json!({ "step": i, "loss": l }))?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn pretrain_idenc_cmd(cfg: &RunConfig, out: &Path, with_regressor: bool) -> Result<()> {
    let codebook = IdentityCodebook::default();
    log(format!("pretraining identity encoder for {} steps", cfg.idenc_train.steps));
    let (enc, losses) = pretrain_identity_encoder(cfg.idenc.clone(), &cfg.idenc_train, &codebook)?;
    write_run_files(out, cfg)?;
    enc.to_archive()?.save(out.join(IDENC_FILE))?;
    write_losses(&out.join("idenc_losses.ndjson"), &losses)?;
    if with_regressor {
        log(format!("pretraining factor regressor for {} steps", cfg.regressor_train.steps));
        let (reg, losses) = pretrain_factor_regressor(cfg.regressor.clone(), &cfg.regressor_train, &codebook)?;
        reg.to_archive()?.save(out.join(REGRESSOR_FILE))?;
        write_losses(&out.join("regressor_losses.ndjson"), &losses)?;
    }
    Ok(())
}

fn train_cmd(cfg: &RunConfig, data_dir: &Path, resume: bool) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let pre = paths.pretrained()?;
    cfg.model.check_compatible(&pre)?;
    let data = DiskDataset::open(data_dir, true)?;
    let out = paths.train();
    let mut state = if resume {
        let mut s = TrainState::load(require(&paths.checkpoint())?, &pre)?;
        if s.model_config != cfg.model {
            return Err(Error::Config("--resume with a different model config".into()));
        }
        let mut saved = s.config.clone();
        saved.total_steps = cfg.train.total_steps;
        if saved != cfg.train {
            return Err(Error::Config("--resume with different training settings (only total_steps may change)".into()));
        }
        s.config.total_steps = cfg.train.total_steps;
        log(format!("resuming at step {}", s.step));
        s
    } else {
        TrainState::new(cfg.model.clone(), cfg.train.clone(), &pre)?
    };
    write_run_files(&out, cfg)?;
    let total = cfg.train.total_steps;
    let every = (total / 20).max(1);
    log(format!("training {} -> {} on {} clips", state.step, total, data.len()));
    let opts = FitOptions {
        out_dir: Some(out.clone()),
        stop_at: None,
    };
    fit(&mut state, &pre, &data, &opts, |r| {
        if (r.step + 1) % every == 0 || r.step + 1 == total {
            log(format!(
                "step {:>6}  total {:.4}  dm {:.4}  fal {:.4}  id {:.4}  d {:.4}",
                r.step + 1,
                r.loss_total,
                r.loss_dm,
                r.loss_fal,
                r.loss_id,
                r.loss_d
            ));
        }
    })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub checkpoint_sha256: String,
    pub model_sha256: String,
    pub codec_sha256: String,
    pub idenc_sha256: String,
    pub source: PathBuf,
    pub target: PathBuf,
    pub swap: vidswap_core::SwapOptions,
    pub frames: usize,
    pub windowed: bool,
}

fn swap_cmd(cfg: &RunConfig, checkpoint: &Path, source: &Path, target: &Path, out: &Path) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let pre = paths.pretrained()?;
    let model = Model::load(require(checkpoint)?, &pre)?;
    let source_face = SourceFace {
        image: read_image(source)?,
        factors: None,
    };
    let target_clip = read_clip(target, true)?;
    let clip_len = cfg.swap.clip_len.unwrap_or(model.config.denoiser.frames);
    if target_clip.len() > clip_len {
        log(format!(
            "target has {} frames > clip length {clip_len}: temporal co-denoising with overlap {}",
            target_clip.len(),
            cfg.swap.overlap
        ));
    }
    let result = swap(&model, &pre, &source_face, &target_clip, &cfg.swap)?;
    if out.exists() {
        fs::remove_dir_all(out)?;
    }
    write_clip(&result.clip, out)?;
    write_run_files(out, cfg)?;
    let prov = Provenance {
        version: VERSION.to_string(),
        checkpoint_sha256: file_hash(checkpoint)?,
        model_sha256: model.weights_hash()?,
        codec_sha256: pre.codec_hash()?,
        idenc_sha256: pre.idenc_hash()?,
        source: source.to_path_buf(),
        target: target.to_path_buf(),
        swap: cfg.swap.clone(),
        frames: result.clip.len(),
        windowed: result.windowed,
    };
    write_json(&out.join(PROVENANCE_FILE), &prov)
}

fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let pre = paths.pretrained()?;
    let model = Model::load(require(checkpoint)?, &pre)?;
    let regressor = FactorRegressor::from_archive(&Archive::load(require(&paths.idenc().join(REGRESSOR_FILE))?)?)?;
    let extractor = FvdExtractor::pinned()?;
    let data = DiskDataset::open(data_dir, true)?;
    log(format!(
        "evaluating {} pairs on {} (attributes {})",
        cfg.eval.pairs,
        data_dir.display(),
        if cfg.swap.use_attributes { "on" } else { "off" }
    ));
    let ev = evaluate(&model, &pre, &regressor, &extractor, &data, &cfg.eval, &cfg.swap)?;
    write_run_files(out, cfg)?;
    write_json(&out.join(REPORT_FILE), &ev.report)?;
    let mut rows = String::new();
    for r in &ev.rows {
        rows.push_str(&serde_json::to_string(r)?);
        rows.push('\n');
    }
    fs::write(out.join(PAIRS_FILE), rows)?;
    write_json(&out.join(TRACES_FILE), &ev.vidd_traces)?;
    log(format!(
        "idr {:.3}  ids {:.3}  attr {:.4}  vidd {:.4}  fvd {:.3}",
        ev.report.idr,
        ev.report.ids,
        ev.report.attr_errors.mean(),
        ev.report.vidd,
        ev.report.fvd
    ));
    let metrics = paths.train().join(METRICS_FILE);
    plot_cmd(Some(metrics.as_path()).filter(|p| p.exists()), Some(out), out)?;
    Ok(())
}

const LOSS_TERMS: [&str; 6] = ["loss_total", "loss_dm", "loss_fal", "loss_id", "loss_d", "r1_penalty"];

fn loss_value(r: &MetricsRecord, term: &str) -> f64 {
    match term {
        "loss_total" => r.loss_total,
        "loss_dm" => r.loss_dm,
        "loss_fal" => r.loss_fal,
        "loss_id" => r.loss_id,
        "loss_d" => r.loss_d,
        _ => r.r1_penalty,
    }
}

/// Draws whatever inputs exist; returns the number of charts written.
pub fn plot_cmd(metrics: Option<&Path>, eval_dir: Option<&Path>, out: &Path) -> Result<usize> {
    fs::create_dir_all(out)?;
    let mut written = 0;
    if let Some(m) = metrics {
        let records = read_metrics_log(m)?;
        let k = (records.len() / 50).max(1);
        let panels: Vec<Panel> = LOSS_TERMS
            .iter()
            .enumerate()
            .map(|(i, term)| {
                let raw: Vec<(f64, f64)> = records.iter().map(|r| (r.step as f64, loss_value(r, term))).collect();
                Panel {
                    title: term.to_string(),
                    series: vec![Series {
                        label: term.to_string(),
                        points: smooth(&raw, k),
                        color: PALETTE[i % PALETTE.len()],
                    }],
                }
            })
            .collect();
        stacked_lines(&panels, 640, 160).save(out.join("loss_curves.png"))?;
        let entries: Vec<_> = panels.iter().map(|p| (p.title.clone(), p.series[0].color)).collect();
        fs::write(
            out.join("loss_curves.txt"),
            legend(&format!("loss curves, top to bottom, moving average over {k} steps"), &entries),
        )?;
        written += 1;
    }
    if let Some(dir) = eval_dir {
        let report_path = dir.join(REPORT_FILE);
        if report_path.exists() {
            let r: EvalReport = read_json(&report_path)?;
            let values = vec![
                ("idr".to_string(), r.idr),
                ("ids".to_string(), r.ids),
                ("attr_pose".to_string(), r.attr_errors.pose),
                ("attr_lighting".to_string(), r.attr_errors.lighting),
                ("attr_expression".to_string(), r.attr_errors.expression),
                ("vidd".to_string(), r.vidd),
            ];
            bars(&values, 480, 240).save(out.join("metrics.png"))?;
            let entries: Vec<_> = values
                .iter()
                .enumerate()
                .map(|(i, (l, v))| (format!("{l} = {v:.4}"), PALETTE[i % PALETTE.len()]))
                .collect();
            fs::write(out.join("metrics.txt"), legend("metric bars, left to right", &entries))?;
            written += 1;
        }
        let traces_path = dir.join(TRACES_FILE);
        if traces_path.exists() {
            let traces: Vec<Vec<f64>> = read_json(&traces_path)?;
            let series: Vec<Series> = traces
                .iter()
                .enumerate()
                .map(|(i, t)| Series {
                    label: format!("pair {i}"),
                    points: t.iter().enumerate().map(|(j, v)| (j as f64, *v)).collect(),
                    color: PALETTE[i % PALETTE.len()],
                })
                .collect();
            stacked_lines(
                &[Panel {
                    title: "vidd".into(),
                    series,
                }],
                640,
                240,
            )
            .save(out.join("vidd_traces.png"))?;
            fs::write(
                out.join("vidd_traces.txt"),
                "per-frame identity distance between consecutive output frames, one line per pair\n",
            )?;
            written += 1;
        }
    }
    Ok(written)
}
