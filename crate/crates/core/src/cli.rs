//! Command-line entry points. Logs go to stderr; every result goes to a file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::clustering::{elbow_select, latent_records, soft_assign, write_latents, ClusterConfig};
use crate::config::RunConfig;
use crate::data::{generate_dataset, read_dataset, split, write_dataset, Sample};
use crate::model::{checksum, load_checkpoint, save_checkpoint, ModelParams};
use crate::training::{
    ablate_beta, encode_samples, evaluate, init_stage2, stage2_samples, train_stage1, train_stage2, write_history,
    AblationRow, AdamState, EpochRecord, EvalMetrics,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_KS: [usize; 6] = [5, 10, 15, 20, 30, 40];

#[derive(Debug, Parser)]
#[command(
    name = "posecluster",
    version,
    about = "Two-stage pose estimation with latent clustering"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Run Stage 1 and Stage 2 and write checkpoints, history and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// WCSS curve and elbow choice of K on a Stage-1 latent space.
    Elbow(ElbowArgs),
    /// Stage 2 for several clustering weights from one shared Stage-1 model.
    AblateBeta(AblateArgs),
    /// Write latent codes and soft assignments of a dataset.
    ExportLatents(ExportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output dataset file (JSON Lines).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset file written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, history.csv, metrics.json and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip Stage 1 and start from this Stage-1 checkpoint.
    #[arg(long)]
    pub from_stage1: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset file written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output metrics file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ElbowArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset file written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Stage-1 checkpoint whose latent space is clustered.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for elbow.json and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Candidate cluster counts.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    pub ks: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset file written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for ablation.csv, ablation.json and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Clustering weights to compare.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 10.0, 100.0, 1000.0])]
    pub betas: Vec<f64>,
    /// Reuse this Stage-1 checkpoint instead of training Stage 1.
    #[arg(long)]
    pub from_stage1: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset file written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint with cluster centers.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output file (JSON Lines).
    #[arg(long)]
    pub out: PathBuf,
}

/// How small the clustering branch is next to the data it summarizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringFootprint {
    /// Learnable cluster embeddings used by the clustering term (K).
    pub embedding_count: usize,
    /// Samples in the dataset file (N).
    pub dataset_size: usize,
    /// Samples encoded for k-means initialization.
    pub clustered_samples: usize,
    /// `K <= N / 10`.
    pub k_at_most_tenth_of_n: bool,
}

impl ClusteringFootprint {
    pub fn new(k: usize, dataset_size: usize, clustered_samples: usize) -> Self {
        ClusteringFootprint {
            embedding_count: k,
            dataset_size,
            clustered_samples,
            k_at_most_tenth_of_n: k * 10 <= dataset_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub generator: u64,
    pub train: u64,
    pub cluster: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    /// Artifact name to path; every listed file exists once the run completes.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub clustering: Option<ClusteringFootprint>,
    pub started_unix_s: f64,
    pub finished_unix_s: Option<f64>,
    pub complete: bool,
    pub error: Option<String>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seeds: Seeds {
                generator: config.generator.seed,
                train: config.train.seed,
                cluster: config.train.cluster.seed,
            },
            artifacts: BTreeMap::new(),
            clustering: None,
            started_unix_s: now(),
            finished_unix_s: None,
            complete: false,
            error: None,
        }
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Tracks the artifacts of one run and keeps its manifest file current.
struct Run {
    manifest: RunManifest,
    path: PathBuf,
}

impl Run {
    fn start(command: &str, config: &RunConfig, path: PathBuf) -> anyhow::Result<Run> {
        let run = Run {
            manifest: RunManifest::new(command, config),
            path,
        };
        run.manifest.write(&run.path)?;
        Ok(run)
    }

    fn artifact(&mut self, name: &str, path: &Path) -> anyhow::Result<()> {
        self.manifest.artifacts.insert(name.to_string(), path.to_path_buf());
        self.manifest.write(&self.path)
    }

    fn finish<T>(mut self, result: anyhow::Result<T>) -> anyhow::Result<T> {
        self.manifest.finished_unix_s = Some(now());
        self.manifest.complete = result.is_ok();
        if let Err(e) = &result {
            self.manifest.error = Some(format!("{e:#}"));
        }
        self.manifest.write(&self.path)?;
        result
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_samples(path: &Path, config: &RunConfig) -> anyhow::Result<Vec<Sample>> {
    let (header, samples) = read_dataset(path)?;
    if header.generator.input_dim != config.encoder.input_dim {
        bail!(
            "dataset has {} features per sample but encoder.input_dim = {}",
            header.generator.input_dim,
            config.encoder.input_dim
        );
    }
    Ok(samples)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Elbow(a) => cmd_elbow(&a),
        Command::AblateBeta(a) => cmd_ablate_beta(&a),
        Command::ExportLatents(a) => cmd_export_latents(&a),
    }
}

/// Manifest path for a single-file output: `<file>.manifest.json`.
pub fn sidecar_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> anyhow::Result<()> {
    let config = load_config(&args.common)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut run = Run::start("gen-data", &config, sidecar_manifest(&args.out))?;
    let result = (|| {
        let samples = generate_dataset(&config.generator)?;
        write_dataset(&args.out, &config.generator, &samples)?;
        run.artifact("dataset", &args.out)?;
        log::info!("wrote {} samples to {}", samples.len(), args.out.display());
        Ok(())
    })();
    run.finish(result)
}

/// Artifacts of a two-stage run that later commands reuse.
pub struct TwoStageOutput {
    pub stage1: ModelParams,
    pub history: Vec<EpochRecord>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Splits the data and produces the Stage-1 model, trained or loaded.
fn stage1_model(
    config: &RunConfig,
    samples: &[Sample],
    from_stage1: Option<&Path>,
    out: &Path,
    run: &mut Run,
    adam: &mut AdamState,
) -> anyhow::Result<TwoStageOutput> {
    let (train, val) = split(samples, config.split.train_fraction, config.train.seed)?;
    let clean: Vec<Sample> = train.iter().filter(|s| !s.occluded).cloned().collect();
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;

    let (stage1, history) = match from_stage1 {
        Some(dir) => {
            if !config.train.reset_adam_between_stages {
                bail!("resuming from a Stage-1 checkpoint requires train.reset_adam_between_stages = true");
            }
            let mut params = load_checkpoint(dir)?;
            params.centers = None;
            log::info!("loaded Stage-1 model from {} ({})", dir.display(), checksum(&params));
            (params, Vec::new())
        }
        None => {
            let mut params = ModelParams::init(&config.encoder, config.bins.num_bins, config.train.seed)?;
            let interval = config.train.checkpoint_interval;
            let mut saved = Vec::new();
            let history = train_stage1(
                &mut params,
                &clean,
                Some(&val),
                &config.train,
                &config.bins,
                adam,
                &mut |rec, p| {
                    if rec.epoch % interval == 0 {
                        let dir = ckpt_dir.join(format!("stage1_epoch{:03}", rec.epoch));
                        save_checkpoint(p, &dir)?;
                        saved.push((format!("checkpoint_stage1_epoch{:03}", rec.epoch), dir));
                    }
                    Ok(())
                },
            )?;
            for (name, dir) in saved {
                run.artifact(&name, &dir)?;
            }
            let dir = ckpt_dir.join("stage1");
            save_checkpoint(&params, &dir)?;
            run.artifact("checkpoint_stage1", &dir)?;
            (params, history)
        }
    };
    Ok(TwoStageOutput {
        stage1,
        history,
        train,
        val,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub stage1_checksum: String,
    pub final_checksum: String,
    pub kmeans_wcss: f64,
    pub stage1: EvalMetrics,
    #[serde(rename = "final")]
    pub final_: EvalMetrics,
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let config = load_config(&args.common)?;
    create_dir(&args.out)?;
    let mut run = Run::start("train", &config, args.out.join(MANIFEST_FILE))?;
    let result = train_inner(args, &config, &mut run);
    run.finish(result)
}

fn train_inner(args: &TrainArgs, config: &RunConfig, run: &mut Run) -> anyhow::Result<()> {
    let samples = load_samples(&args.data, config)?;
    run.artifact("dataset", &args.data)?;
    let mut adam = AdamState::new();
    let out = &args.out;
    let TwoStageOutput {
        stage1,
        mut history,
        train,
        val,
    } = stage1_model(config, &samples, args.from_stage1.as_deref(), out, run, &mut adam)?;
    let tc = &config.train;
    let stage1_metrics = evaluate(&stage1, &val, &config.bins, tc.weights())?;

    let mut params = stage1.clone();
    let km = init_stage2(&mut params, &train, &tc.cluster)?;
    run.manifest.clustering = Some(ClusteringFootprint::new(tc.cluster.k, samples.len(), train.len()));
    let init_dir = out.join("checkpoints").join("stage2_init");
    save_checkpoint(&params, &init_dir)?;
    run.artifact("checkpoint_stage2_init", &init_dir)?;

    if tc.reset_adam_between_stages {
        adam = AdamState::new();
    }
    let stage2_train = stage2_samples(&train, tc.stage2_include_clean);
    let ckpt_dir = out.join("checkpoints");
    let mut saved = Vec::new();
    let h2 = train_stage2(
        &mut params,
        &stage2_train,
        Some(&val),
        tc,
        &config.bins,
        &mut adam,
        &mut |rec, p| {
            if rec.epoch % tc.checkpoint_interval == 0 {
                let dir = ckpt_dir.join(format!("stage2_epoch{:03}", rec.epoch));
                save_checkpoint(p, &dir)?;
                saved.push((format!("checkpoint_stage2_epoch{:03}", rec.epoch), dir));
            }
            Ok(())
        },
    )?;
    for (name, dir) in saved {
        run.artifact(&name, &dir)?;
    }
    history.extend(h2);

    let final_dir = ckpt_dir.join("final");
    save_checkpoint(&params, &final_dir)?;
    run.artifact("checkpoint_final", &final_dir)?;
    let history_path = out.join("history.csv");
    write_history(&history_path, &history)?;
    run.artifact("history", &history_path)?;

    let metrics = TrainMetrics {
        stage1_checksum: checksum(&stage1),
        final_checksum: checksum(&params),
        kmeans_wcss: km.wcss,
        stage1: stage1_metrics,
        final_: evaluate(&params, &val, &config.bins, tc.weights())?,
    };
    let metrics_path = out.join("metrics.json");
    write_json(&metrics_path, &metrics)?;
    run.artifact("metrics", &metrics_path)?;
    log::info!(
        "final validation MAE: combined {:.3}, occluded {:?}",
        metrics.final_.mae.combined.mean,
        metrics.final_.mae.occluded.map(|m| m.mean)
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let config = load_config(&args.common)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut run = Run::start("eval", &config, sidecar_manifest(&args.out))?;
    let result = (|| {
        let samples = load_samples(&args.data, &config)?;
        let params = load_checkpoint(&args.checkpoint)?;
        let metrics = evaluate(&params, &samples, &config.bins, config.train.weights())?;
        write_json(&args.out, &metrics)?;
        run.artifact("metrics", &args.out)?;
        Ok(())
    })();
    run.finish(result)
}

pub fn cmd_elbow(args: &ElbowArgs) -> anyhow::Result<()> {
    let config = load_config(&args.common)?;
    create_dir(&args.out)?;
    let mut run = Run::start("elbow", &config, args.out.join(MANIFEST_FILE))?;
    let result = (|| {
        let Some(ckpt) = &args.checkpoint else {
            bail!("elbow runs on a trained latent space; pass --checkpoint with a Stage-1 checkpoint");
        };
        let params = load_checkpoint(ckpt)?;
        let samples = load_samples(&args.data, &config)?;
        let (train, _) = split(&samples, config.split.train_fraction, config.train.seed)?;
        let latents = encode_samples(&params, &train)?;
        let cluster = ClusterConfig {
            k: config.train.cluster.k.max(2),
            ..config.train.cluster.clone()
        };
        let report = elbow_select(&latents, &args.ks, &cluster)?;
        let path = args.out.join("elbow.json");
        write_json(&path, &report)?;
        run.artifact("elbow", &path)?;
        log::info!(
            "elbow choice: k = {} (low confidence: {})",
            report.chosen_k,
            report.low_confidence
        );
        Ok(())
    })();
    run.finish(result)
}

fn mae_cells(m: Option<crate::training::SubsetMae>) -> [String; 4] {
    match m {
        Some(m) => [m.yaw, m.pitch, m.roll, m.mean].map(|v| v.to_string()),
        None => Default::default(),
    }
}

/// Writes ablation rows as a CSV with one row per beta.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["beta".to_string()];
    for subset in ["clean", "occluded", "combined"] {
        for col in ["yaw", "pitch", "roll", "mean"] {
            header.push(format!("{subset}_{col}"));
        }
    }
    header.extend(["stage1_checksum".into(), "final_checksum".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.beta.to_string()];
        rec.extend(mae_cells(r.metrics.mae.clean));
        rec.extend(mae_cells(r.metrics.mae.occluded));
        rec.extend(mae_cells(Some(r.metrics.mae.combined)));
        rec.extend([r.stage1_checksum.clone(), r.final_checksum.clone()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_ablate_beta(args: &AblateArgs) -> anyhow::Result<()> {
    let config = load_config(&args.common)?;
    create_dir(&args.out)?;
    let mut run = Run::start("ablate-beta", &config, args.out.join(MANIFEST_FILE))?;
    let result = (|| {
        if args.betas.is_empty() {
            bail!("--betas must list at least one value");
        }
        let samples = load_samples(&args.data, &config)?;
        run.artifact("dataset", &args.data)?;
        let mut adam = AdamState::new();
        let two = stage1_model(
            &config,
            &samples,
            args.from_stage1.as_deref(),
            &args.out,
            &mut run,
            &mut adam,
        )?;
        let tc = &config.train;
        let mut start = two.stage1.clone();
        init_stage2(&mut start, &two.train, &tc.cluster)?;
        run.manifest.clustering = Some(ClusteringFootprint::new(tc.cluster.k, samples.len(), two.train.len()));
        let stage2_train = stage2_samples(&two.train, tc.stage2_include_clean);
        let rows = ablate_beta(&start, &stage2_train, &two.val, tc, &config.bins, &args.betas)?;
        let csv_path = args.out.join("ablation.csv");
        write_ablation_csv(&csv_path, &rows)?;
        run.artifact("ablation_csv", &csv_path)?;
        let json_path = args.out.join("ablation.json");
        write_json(&json_path, &rows)?;
        run.artifact("ablation_json", &json_path)?;
        for r in &rows {
            log::info!(
                "beta {}: occluded MAE {:?}",
                r.beta,
                r.metrics.mae.occluded.map(|m| m.mean)
            );
        }
        Ok(())
    })();
    run.finish(result)
}

pub fn cmd_export_latents(args: &ExportArgs) -> anyhow::Result<()> {
    let config = load_config(&args.common)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut run = Run::start("export-latents", &config, sidecar_manifest(&args.out))?;
    let result = (|| {
        let params = load_checkpoint(&args.checkpoint)?;
        let Some(centers) = &params.centers else {
            bail!("checkpoint {} has no cluster centers", args.checkpoint.display());
        };
        let samples = load_samples(&args.data, &config)?;
        let latents = encode_samples(&params, &samples)?;
        let q = soft_assign(&latents, centers)?;
        let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
        write_latents(&args.out, &latent_records(&ids, &latents, &q)?)?;
        run.artifact("latents", &args.out)?;
        Ok(())
    })();
    run.finish(result)
}
