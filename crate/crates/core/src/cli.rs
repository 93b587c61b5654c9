//! Command-line workflows: synthetic corpus generation, training, evaluation
//! and the two baselines.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;

use crate::baselines::{baseline1_scores, baseline2_inputs, Baseline2Params};
use crate::checkpoint::{Checkpoint, SavedModel};
use crate::embedstore::{load_embeddings_any, EmbeddingTable, EnrollmentStrategy};
use crate::fusionnet::train::score_items;
use crate::fusionnet::{train_model, init_params, TrainConfig, TrainHistory, DEFAULT_HIDDEN};
use crate::metrics::{compute_report, det_curve, histogram, ScoredTrial};
use crate::pipeline::{asv_only_scores, fusion_dims, fusion_inputs, utterance_scores};
use crate::protocol::{parse_enrollment, parse_trials, validate_protocol, ProtocolSet, Trial};
use crate::syndata::{generate, ModelSignal, SyntheticCorpusSpec};

const SUBCOMMANDS: [&str; 5] = ["gen-synth", "train", "evaluate", "baseline1", "baseline2-train"];

#[derive(Debug, Parser)]
#[command(name = "sasv", version, about = "Spoofing-aware speaker verification fusion toolkit")]
pub struct Cli {
    /// Flat `key=value` file of flag defaults; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for trial scoring. Never changes any output byte.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Seed for all randomness.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus: protocols, embedding tables, CM scores.
    GenSynth(GenSynthArgs),
    /// Train the fusion network with dev-set model selection.
    Train(TrainArgs),
    /// Score an evaluation protocol and write the EER report.
    Evaluate(EvaluateArgs),
    /// Score-sum fusion of SV and CM scores.
    Baseline1(Baseline1Args),
    /// Train the single-head embedding-concatenation baseline.
    #[command(name = "baseline2-train")]
    Baseline2Train(Baseline2TrainArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Speakers per partition.
    #[arg(long, default_value_t = 5)]
    pub num_speakers: usize,
    /// Bona fide utterances per speaker, enrollment included.
    #[arg(long, default_value_t = 20)]
    pub utts: usize,
    #[arg(long, default_value_t = 10)]
    pub spoofs: usize,
    #[arg(long, default_value_t = 2)]
    pub enroll: usize,
    #[arg(long, default_value_t = 2)]
    pub asv_models: usize,
    #[arg(long, default_value_t = 2)]
    pub cm_models: usize,
    /// Embedding dimension of every model.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 3.0)]
    pub strength: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub train_trials: PathBuf,
    #[arg(long)]
    pub train_enroll: PathBuf,
    #[arg(long)]
    pub dev_trials: PathBuf,
    #[arg(long)]
    pub dev_enroll: PathBuf,
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HIDDEN)]
    pub hidden: Vec<usize>,
    #[arg(long, default_value = "mean-of-normalized")]
    pub strategy: EnrollmentStrategy,
    /// Output directory for `model.ckpt` and `history.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: PartitionArgs,
    /// ASV embedding table; repeat for several models.
    #[arg(long, required = true)]
    pub asv: Vec<PathBuf>,
    /// CM embedding table; repeat for several models.
    #[arg(long, required = true)]
    pub cm: Vec<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct Baseline2TrainArgs {
    #[command(flatten)]
    pub data: PartitionArgs,
    #[arg(long)]
    pub asv: PathBuf,
    /// Omit to train an SV-only classifier.
    #[arg(long)]
    pub cm: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct EvalData {
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long)]
    pub enroll: PathBuf,
    #[arg(long)]
    pub asv: Vec<PathBuf>,
    #[arg(long)]
    pub cm: Vec<PathBuf>,
    #[arg(long, default_value = "mean-of-normalized")]
    pub strategy: EnrollmentStrategy,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory for the report and score files.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `det.csv` with this many points.
    #[arg(long)]
    pub det_points: Option<usize>,
    /// Also write `hist.csv` with this many shared bins.
    #[arg(long)]
    pub hist_bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreFileArgs {
    /// Per-trial SV scores, `<speaker_id> <test_utt_id> <score>`. Without it
    /// the mean cosine over the `--asv` tables is used.
    #[arg(long)]
    pub sv_scores: Option<PathBuf>,
    /// Per-utterance CM scores, `<utt_id> <score>`.
    #[arg(long)]
    pub cm_scores: Option<PathBuf>,
    /// Multiplier applied to the CM scores before summing.
    #[arg(long, default_value_t = 1.0)]
    pub cm_scale: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: EvalData,
    #[command(flatten)]
    pub report: ReportArgs,
    /// Fusion or Baseline2 checkpoint.
    #[arg(long, conflicts_with = "baseline1")]
    pub checkpoint: Option<PathBuf>,
    /// Score with Baseline1 instead of a checkpoint.
    #[arg(long)]
    pub baseline1: bool,
    /// Require the checkpoint to hold a Baseline2 model.
    #[arg(long)]
    pub baseline2: bool,
    #[command(flatten)]
    pub scores: ScoreFileArgs,
}

#[derive(Debug, Args)]
pub struct Baseline1Args {
    #[command(flatten)]
    pub data: EvalData,
    #[command(flatten)]
    pub report: ReportArgs,
    #[command(flatten)]
    pub scores: ScoreFileArgs,
}

/// Splices `key=value` lines from the `--config` file into the argument list
/// right after the subcommand, skipping keys already given as flags.
pub fn expand_config(args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            config = strs.get(i + 1).cloned();
        } else if let Some(v) = a.strip_prefix("--config=") {
            config = Some(v.to_string());
        }
    }
    let Some(config) = config else { return Ok(args) };
    let Some(sub) = strs.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&config).with_context(|| format!("reading config file {config}"))?;
    let given: HashSet<&str> = strs
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a))
        .collect();
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{config}:{}: expected key=value", n + 1);
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key == "config" || given.contains(key.as_str()) {
            continue;
        }
        match value {
            "true" => extra.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => extra.push(OsString::from(format!("--{key}={value}"))),
        }
    }
    let mut out = args;
    out.splice(sub + 1..sub + 1, extra);
    Ok(out)
}

/// Parses `args` (program name first), applies `--config` and runs the
/// chosen subcommand.
pub fn run_from<I: IntoIterator<Item = OsString>>(args: I) -> anyhow::Result<()> {
    let args = expand_config(args.into_iter().collect())?;
    let cli = Cli::try_parse_from(args)?;
    run(cli)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.threads {
        Some(n) => {
            ensure!(n > 0, "--threads must be at least 1");
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            pool.install(|| dispatch(&cli))
        }
        None => dispatch(&cli),
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a, cli.seed),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Baseline1(a) => {
            let protocol = load_protocol("eval", &a.data.trials, &a.data.enroll)?;
            let scored = baseline1_trial_scores(&protocol, &a.data, &a.scores)?;
            write_report(&protocol, &scored, &a.report)
        }
        Command::Baseline2Train(a) => cmd_baseline2_train(a, cli.seed),
    }
}

fn gen_synth(a: &GenSynthArgs, seed: u64) -> anyhow::Result<()> {
    let signal = ModelSignal { dim: a.dim, strength: a.strength };
    let spec = SyntheticCorpusSpec {
        num_speakers: a.num_speakers,
        utts_per_speaker: a.utts,
        spoofs_per_speaker: a.spoofs,
        enroll_per_speaker: a.enroll,
        asv_models: vec![signal; a.asv_models],
        cm_models: vec![signal; a.cm_models],
        noise_std: a.noise,
        seed,
    };
    let corpus = generate(&spec)?;
    let written = corpus.write_to_dir(&a.out).with_context(|| format!("writing corpus to {}", a.out.display()))?;
    let mut manifest = String::new();
    for p in &written {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        manifest.push_str(&name);
        manifest.push('\n');
        println!("{}", p.display());
    }
    let manifest_path = a.out.join("manifest.txt");
    write_file(&manifest_path, manifest.as_bytes())?;
    println!("{}", manifest_path.display());
    Ok(())
}

fn train_config(h: &HyperArgs, seed: u64) -> TrainConfig {
    TrainConfig { learning_rate: h.lr, batch_size: h.batch_size, epochs: h.epochs, seed, ..Default::default() }
}

fn cmd_train(a: &TrainArgs, seed: u64) -> anyhow::Result<()> {
    let train = load_protocol("train", &a.data.train_trials, &a.data.train_enroll)?;
    let dev = load_protocol("dev", &a.data.dev_trials, &a.data.dev_enroll)?;
    let asv = load_tables(&a.asv)?;
    let cm = load_tables(&a.cm)?;
    let strategy = a.hyper.strategy;
    let train_set = fusion_inputs(&train, &asv, &cm, strategy)?;
    let dev_set = fusion_inputs(&dev, &asv, &cm, strategy)?;
    let config = train_config(&a.hyper, seed);
    let initial = init_params(&fusion_dims(&asv, &cm, &a.hyper.hidden), seed)?;
    let outcome = train_model(initial, &train_set, &dev_set, &config)?;
    save_training(&a.hyper.out, SavedModel::Fusion(outcome.best), &outcome.history, outcome.best_epoch)
}

fn cmd_baseline2_train(a: &Baseline2TrainArgs, seed: u64) -> anyhow::Result<()> {
    let train = load_protocol("train", &a.data.train_trials, &a.data.train_enroll)?;
    let dev = load_protocol("dev", &a.data.dev_trials, &a.data.dev_enroll)?;
    let asv = load_table(&a.asv)?;
    let cm = a.cm.as_deref().map(load_table).transpose()?;
    let strategy = a.hyper.strategy;
    let train_set = baseline2_inputs(&train, &asv, cm.as_ref(), strategy)?;
    let dev_set = baseline2_inputs(&dev, &asv, cm.as_ref(), strategy)?;
    let config = train_config(&a.hyper, seed);
    let initial = Baseline2Params::init(asv.dim(), cm.as_ref().map_or(0, EmbeddingTable::dim), &a.hyper.hidden, seed)?;
    let outcome = train_model(initial, &train_set, &dev_set, &config)?;
    save_training(&a.hyper.out, SavedModel::Baseline2(outcome.best), &outcome.history, outcome.best_epoch)
}

fn save_training(out: &Path, model: SavedModel, history: &TrainHistory, best: Option<usize>) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("model.ckpt"), &Checkpoint::new(model).to_bytes())?;
    write_file(&out.join("history.csv"), history.to_csv().as_bytes())?;
    match best {
        Some(e) => println!(
            "best epoch {e}: dev sasv_eer={:.4}",
            history.epochs[e].dev.sasv.rate
        ),
        None => println!("no epochs run; saved initial parameters"),
    }
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let protocol = load_protocol("eval", &a.data.trials, &a.data.enroll)?;
    let scored = if a.baseline1 {
        baseline1_trial_scores(&protocol, &a.data, &a.scores)?
    } else {
        let Some(path) = &a.checkpoint else {
            bail!("evaluate needs --checkpoint or --baseline1");
        };
        let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        match ck.model {
            SavedModel::Fusion(_) if a.baseline2 => {
                bail!("{} holds a fusion model, not a Baseline2 model", path.display())
            }
            SavedModel::Fusion(params) => {
                let asv = load_tables(&a.data.asv)?;
                let cm = load_tables(&a.data.cm)?;
                let dims = params.dims();
                let cm_dim: usize = cm.iter().map(EmbeddingTable::dim).sum();
                ensure!(
                    dims.num_sv == asv.len() && dims.cm_input_dim == cm_dim,
                    "checkpoint expects {} ASV tables and CM width {}, got {} and {}",
                    dims.num_sv,
                    dims.cm_input_dim,
                    asv.len(),
                    cm_dim
                );
                score_items(&params, &fusion_inputs(&protocol, &asv, &cm, a.data.strategy)?)?
            }
            SavedModel::Baseline2(params) => {
                ensure!(a.data.asv.len() == 1, "a Baseline2 checkpoint needs exactly one --asv table");
                ensure!(a.data.cm.len() <= 1, "a Baseline2 checkpoint takes at most one --cm table");
                let asv = load_table(&a.data.asv[0])?;
                let cm = a.data.cm.first().map(|p| load_table(p)).transpose()?;
                let cm_dim = cm.as_ref().map_or(0, EmbeddingTable::dim);
                ensure!(
                    params.asv_dim == asv.dim() && params.cm_dim == cm_dim,
                    "checkpoint expects ASV width {} and CM width {}, got {} and {}",
                    params.asv_dim,
                    params.cm_dim,
                    asv.dim(),
                    cm_dim
                );
                score_items(&params, &baseline2_inputs(&protocol, &asv, cm.as_ref(), a.data.strategy)?)?
            }
        }
    };
    write_report(&protocol, &scored, &a.report)
}

fn baseline1_trial_scores(
    protocol: &ProtocolSet,
    data: &EvalData,
    files: &ScoreFileArgs,
) -> anyhow::Result<Vec<ScoredTrial>> {
    let Some(cm_path) = &files.cm_scores else {
        bail!("Baseline1 needs --cm-scores");
    };
    let sv: Vec<f64> = match &files.sv_scores {
        Some(path) => {
            let table = read_trial_scores(path)?;
            protocol
                .trials
                .iter()
                .map(|t| {
                    table.get(&(t.speaker_id.clone(), t.test_utt_id.clone())).copied().with_context(|| {
                        format!("no SV score for trial {} {} in {}", t.speaker_id, t.test_utt_id, path.display())
                    })
                })
                .collect::<anyhow::Result<_>>()?
        }
        None => {
            ensure!(!data.asv.is_empty(), "Baseline1 needs --sv-scores or at least one --asv table");
            let asv = load_tables(&data.asv)?;
            asv_only_scores(protocol, &asv, data.strategy)?.into_iter().map(|s| s.score).collect()
        }
    };
    let cm_table = read_utterance_scores(cm_path)?;
    let cm: Vec<f64> = utterance_scores(protocol, |u| cm_table.get(u).copied())
        .with_context(|| format!("CM scores from {}", cm_path.display()))?
        .into_iter()
        .map(|s| s.score)
        .collect();
    let labels: Vec<_> = protocol.trials.iter().map(|t| t.label).collect();
    Ok(baseline1_scores(&sv, &cm, &labels, files.cm_scale)?)
}

fn write_report(protocol: &ProtocolSet, scored: &[ScoredTrial], r: &ReportArgs) -> anyhow::Result<()> {
    let report = compute_report(scored)?;
    fs::create_dir_all(&r.out).with_context(|| format!("creating {}", r.out.display()))?;
    let text = report.to_text();
    write_file(&r.out.join("report.txt"), text.as_bytes())?;
    let mut json = serde_json::to_string_pretty(&report.to_json())?;
    json.push('\n');
    write_file(&r.out.join("report.json"), json.as_bytes())?;
    write_file(&r.out.join("scores.txt"), format_trial_scores(&protocol.trials, scored).as_bytes())?;
    if let Some(n) = r.det_points {
        let (pos, neg): (Vec<&ScoredTrial>, Vec<&ScoredTrial>) = scored.iter().partition(|s| s.label.is_positive());
        let pos: Vec<f64> = pos.iter().map(|s| s.score).collect();
        let neg: Vec<f64> = neg.iter().map(|s| s.score).collect();
        write_file(&r.out.join("det.csv"), det_curve(&pos, &neg, n)?.to_csv().as_bytes())?;
    }
    if let Some(bins) = r.hist_bins {
        write_file(&r.out.join("hist.csv"), histogram(scored, bins)?.to_csv().as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

/// `<speaker_id> <test_utt_id> <label> <score>` per trial.
pub fn format_trial_scores(trials: &[Trial], scored: &[ScoredTrial]) -> String {
    trials
        .iter()
        .zip(scored)
        .map(|(t, s)| format!("{} {} {} {}\n", t.speaker_id, t.test_utt_id, t.label, s.score))
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_protocol(name: &str, trials: &Path, enroll: &Path) -> anyhow::Result<ProtocolSet> {
    let t = parse_trials(&read_text(trials)?).with_context(|| format!("parsing {}", trials.display()))?;
    let e = parse_enrollment(&read_text(enroll)?).with_context(|| format!("parsing {}", enroll.display()))?;
    validate_protocol(name, t, e).with_context(|| format!("validating {}", trials.display()))
}

fn load_table(path: &Path) -> anyhow::Result<EmbeddingTable> {
    load_embeddings_any(path).with_context(|| format!("loading embeddings {}", path.display()))
}

fn load_tables(paths: &[PathBuf]) -> anyhow::Result<Vec<EmbeddingTable>> {
    paths.iter().map(|p| load_table(p)).collect()
}

fn parse_score(path: &Path, line_no: usize, field: &str) -> anyhow::Result<f64> {
    let v: f64 = field
        .parse()
        .with_context(|| format!("{}:{line_no}: bad score '{field}'", path.display()))?;
    ensure!(v.is_finite(), "{}:{line_no}: non-finite score", path.display());
    Ok(v)
}

fn score_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i, l.split_whitespace().collect()))
}

/// Reads `<utt_id> <score>` lines.
pub fn read_utterance_scores(path: &Path) -> anyhow::Result<IndexMap<String, f64>> {
    let text = read_text(path)?;
    let mut out = IndexMap::new();
    for (n, f) in score_lines(&text) {
        let [utt, score] = f.as_slice() else {
            bail!("{}:{n}: expected `<utt_id> <score>`", path.display());
        };
        out.insert(utt.to_string(), parse_score(path, n, score)?);
    }
    Ok(out)
}

/// Reads `<speaker_id> <test_utt_id> <score>` lines.
pub fn read_trial_scores(path: &Path) -> anyhow::Result<IndexMap<(String, String), f64>> {
    let text = read_text(path)?;
    let mut out = IndexMap::new();
    for (n, f) in score_lines(&text) {
        let [spk, utt, score] = f.as_slice() else {
            bail!("{}:{n}: expected `<speaker_id> <test_utt_id> <score>`", path.display());
        };
        out.insert((spk.to_string(), utt.to_string()), parse_score(path, n, score)?);
    }
    Ok(out)
}
