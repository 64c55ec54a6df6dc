//! Command-line surface: every stage of the pipeline as a subcommand, with
//! mandatory seeds and machine-readable CSV/JSON outputs.
//!
//! Artifacts carry their resolved configuration: CSV files start with a `#`
//! header line, JSON files embed a `config` object, and the synthetic-corpus
//! manifest starts with a `#` header line. Exit codes: 0 success, 1
//! validation error, 2 runtime error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio;
use crate::dataset::{self, FilterSpec, Manifest, Split};
use crate::evalrep::{self, Polarity, ScoreSet};
use crate::forensic::{self, CaseConfig, CaseScore, EmbeddingStore};
use crate::net::{self, Network};
use crate::quality::{self, LabeledEmbeddingSet};
use crate::spectrogram::{self, SpectrogramConfig};
use crate::triplet::{self, LabeledPatchSet, TrainBudget, TrainConfig};

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid invocation: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn runtime(err: impl std::fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "tlfv",
    about = "Speaker-embedding toolkit: triplet-loss training over spectrogram patches, likelihood-ratio scoring, and biometric evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corpus utilities
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Extract patch tensors from a manifest of WAV recordings
    Preprocess(PreprocessArgs),
    /// Train the embedding network with the triplet loss
    Train(TrainArgs),
    /// Embedding-space quality metrics over a split (optionally filtered)
    Quality(QualityArgs),
    /// Build the genuine/impostor case roster
    Cases(CasesArgs),
    /// Score a case roster with both likelihood-ratio approximations
    Score(ScoreArgs),
    /// Evaluate a score file: EER, AUC, sensitivity, DET/ROC, histograms
    Report(ReportArgs),
    /// Project embeddings of a split to 2-D for plotting
    Project(ProjectArgs),
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Generate a synthetic-speaker corpus (WAV files + manifest)
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for WAV files and manifest.jsonl
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    speakers: usize,
    #[arg(long)]
    utterances: usize,
    /// Base seed; speaker s uses speaker_seed = seed + s
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 4.0)]
    duration_s: f64,
    #[arg(long, env = "TLFV_WORKERS")]
    workers: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct SpectroArgs {
    /// Patch duration in milliseconds
    #[arg(long, default_value_t = 2000)]
    t_ms: u64,
    /// Analysis window in milliseconds
    #[arg(long, default_value_t = 100)]
    w_ms: u64,
    /// Hop in milliseconds
    #[arg(long, default_value_t = 50)]
    h_ms: u64,
    /// Pre-emphasis coefficient
    #[arg(long, default_value_t = 0.97)]
    pre_emphasis: f32,
}

impl SpectroArgs {
    fn config(&self) -> CliResult<SpectrogramConfig> {
        SpectrogramConfig::new(self.t_ms, self.w_ms, self.h_ms).map_err(|e| validation(e.to_string()))
    }

    fn describe(&self) -> String {
        format!(
            "t_ms={} w_ms={} h_ms={} pre_emphasis={}",
            self.t_ms, self.w_ms, self.h_ms, self.pre_emphasis
        )
    }
}

#[derive(Args, Debug, Clone)]
struct SplitArgs {
    /// Which split to operate on
    #[arg(long, value_parser = parse_split_choice, default_value = "validation")]
    split: SplitChoice,
    /// Seed for the speaker-disjoint split shuffle
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// train,validation,test fractions
    #[arg(long, value_parser = parse_fractions, default_value = "0.8,0.1,0.1")]
    fractions: (f64, f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SplitChoice {
    One(Split),
    All,
}

fn parse_split_choice(s: &str) -> Result<SplitChoice, String> {
    match s {
        "train" => Ok(SplitChoice::One(Split::Train)),
        "validation" => Ok(SplitChoice::One(Split::Validation)),
        "test" => Ok(SplitChoice::One(Split::Test)),
        "all" => Ok(SplitChoice::All),
        other => Err(format!(
            "unknown split '{other}' (use train, validation, test, or all)"
        )),
    }
}

fn parse_fractions(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated fractions".into());
    }
    let f: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    Ok((f[0], f[1], f[2]))
}

impl SplitArgs {
    fn describe(&self) -> String {
        let split = match self.split {
            SplitChoice::One(s) => s.to_string(),
            SplitChoice::All => "all".into(),
        };
        format!(
            "split={split} split_seed={} fractions={},{},{}",
            self.split_seed, self.fractions.0, self.fractions.1, self.fractions.2
        )
    }
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for patch tensors and index.jsonl
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    spectro: SpectroArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Patches sampled per recording
    #[arg(long, default_value_t = 15)]
    patches_per_recording: usize,
    /// Seed for patch start sampling
    #[arg(long)]
    seed: u64,
    #[arg(long, env = "TLFV_WORKERS")]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory produced by `preprocess`
    #[arg(long)]
    patches: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV output path
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    /// Wall-clock budget in seconds; overrides --steps when set
    #[arg(long)]
    seconds: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    margin: f64,
    #[arg(long, default_value_t = 8)]
    speakers_per_batch: usize,
    #[arg(long, default_value_t = 4)]
    patches_per_speaker: usize,
    #[arg(long, value_parser = parse_mining, default_value = "semi_hard")]
    mining: triplet::MiningStrategy,
    /// Batch/mining seed
    #[arg(long)]
    seed: u64,
    /// Parameter initialization seed
    #[arg(long)]
    init_seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, value_parser = parse_optimizer, default_value = "sgd_momentum")]
    optimizer: net::Optimizer,
}

fn parse_mining(s: &str) -> Result<triplet::MiningStrategy, String> {
    match s {
        "random" => Ok(triplet::MiningStrategy::Random),
        "semi_hard" => Ok(triplet::MiningStrategy::SemiHard),
        other => Err(format!("unknown mining strategy '{other}'")),
    }
}

fn parse_optimizer(s: &str) -> Result<net::Optimizer, String> {
    match s {
        "sgd" => Ok(net::Optimizer::Sgd),
        "sgd_momentum" => Ok(net::Optimizer::SgdMomentum),
        other => Err(format!("unknown optimizer '{other}'")),
    }
}

#[derive(Args, Debug)]
struct QualityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    spectro: SpectroArgs,
    /// Conjunctive metadata filters, e.g. --filter gender=F --filter dialect=Spain
    #[arg(long = "filter")]
    filters: Vec<String>,
    #[arg(long, default_value_t = 15)]
    patches_per_recording: usize,
    /// Seed for patch start sampling
    #[arg(long)]
    seed: u64,
    /// JSON report output
    #[arg(long)]
    out: PathBuf,
    /// Optional one-row CSV output
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, env = "TLFV_WORKERS")]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct CasesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// Roster JSON output
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    population: usize,
    #[arg(long, default_value_t = 3)]
    reference_recordings: usize,
    #[arg(long, default_value_t = 15)]
    patches_per_recording: usize,
    /// Genuine/impostor case pairs per eligible speaker
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    /// Case construction seed
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    roster: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Calibration sidecar; defaults to <checkpoint>.calibration.json
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    spectro: SpectroArgs,
    /// Seed for patch start sampling
    #[arg(long)]
    seed: u64,
    /// Scores CSV output
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "TLFV_WORKERS")]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Scores CSV produced by `score`
    #[arg(long)]
    scores: PathBuf,
    /// Output directory for summary.json and curve/histogram CSVs
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 30)]
    bins: usize,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    spectro: SpectroArgs,
    #[arg(long = "filter")]
    filters: Vec<String>,
    #[arg(long, default_value_t = 20)]
    patches_per_recording: usize,
    /// Seed for patch start sampling
    #[arg(long)]
    seed: u64,
    /// Projection CSV output
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "TLFV_WORKERS")]
    workers: Option<usize>,
}

/// Entry point for the `tlfv` binary; returns the process exit code.
pub fn dispatch(args: &[String]) -> u8 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();

    let mut argv = vec!["tlfv".to_string()];
    argv.extend_from_slice(args);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version with success exit
            if e.use_stderr() {
                eprint!("{e}");
                return 1;
            }
            print!("{e}");
            return 0;
        }
    };

    let result = match cli.command {
        Command::Dataset(DatasetCommand::Synth(args)) => run_synth(args),
        Command::Preprocess(args) => run_preprocess(args),
        Command::Train(args) => run_train(args),
        Command::Quality(args) => run_quality(args),
        Command::Cases(args) => run_cases(args),
        Command::Score(args) => run_score(args),
        Command::Report(args) => run_report(args),
        Command::Project(args) => run_project(args),
    };
    match result {
        Ok(()) => 0,
        Err(e @ CliError::Validation(_)) => {
            eprintln!("{e}");
            1
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("{e}");
            2
        }
    }
}

fn thread_pool(workers: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(validation("--workers must be at least 1"));
        }
        builder = builder.num_threads(w);
    }
    builder.build().map_err(runtime)
}

fn run_synth(args: SynthArgs) -> CliResult {
    use rayon::prelude::*;
    if args.speakers == 0 || args.utterances == 0 {
        return Err(validation("--speakers and --utterances must be positive"));
    }
    if args.duration_s < 2.5 {
        return Err(validation("--duration-s must be at least 2.5"));
    }
    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    let pool = thread_pool(args.workers)?;

    let jobs: Vec<(u64, u64)> = (0..args.speakers as u64)
        .flat_map(|s| (0..args.utterances as u64).map(move |u| (s, u)))
        .collect();
    let records: Vec<dataset::RecordingMeta> = pool.install(|| {
        jobs.par_iter()
            .map(|&(s, u)| {
                let speaker_seed = args.seed + s;
                let clip = dataset::synth_speaker_clip(speaker_seed, u, args.duration_s);
                let file = format!("spk{speaker_seed}_u{u:02}.wav");
                audio::write_wav_file(&clip, &args.out.join(&file)).map(|_| {
                    let f0 = dataset::synth_f0_hz(speaker_seed);
                    dataset::RecordingMeta {
                        path: file,
                        speaker_id: format!("spk{speaker_seed}"),
                        gender: if f0 < 165.0 {
                            dataset::Gender::M
                        } else {
                            dataset::Gender::F
                        },
                        age_group: dataset::AgeGroup::Adult,
                        native: dataset::Native::Yes,
                        dialect: "synthetic".into(),
                        duration_s: clip.duration_s(),
                    }
                })
            })
            .collect::<Result<Vec<_>, _>>()
    })
    .map_err(runtime)?;

    let manifest = Manifest {
        records,
        split_seed: 0,
    };
    let path = args.out.join("manifest.jsonl");
    let mut out = Vec::new();
    writeln!(
        out,
        "# tlfv dataset synth speakers={} utterances={} seed={} duration_s={}",
        args.speakers, args.utterances, args.seed, args.duration_s
    )
    .map_err(runtime)?;
    dataset::write_manifest(&manifest, &mut out).map_err(runtime)?;
    std::fs::write(&path, out).map_err(runtime)?;
    info!(
        "wrote {} recordings for {} speakers to {}",
        manifest.records.len(),
        args.speakers,
        args.out.display()
    );
    Ok(())
}

fn load_manifest_checked(path: &Path) -> CliResult<Manifest> {
    let (manifest, warnings) = dataset::load_manifest(path).map_err(runtime)?;
    if warnings > 0 {
        warn!("{warnings} unrecognized metadata values folded to 'unknown'");
    }
    Ok(manifest)
}

/// Apply the split selection to a manifest, returning the surviving records.
fn select_split(manifest: &Manifest, split: &SplitArgs) -> CliResult<Manifest> {
    match split.split {
        SplitChoice::All => Ok(manifest.clone()),
        SplitChoice::One(which) => {
            let assignment =
                dataset::split_speakers(manifest, split.fractions, split.split_seed)
                    .map_err(|e| validation(e.to_string()))?;
            Ok(manifest.filter(|r| assignment.get(&r.speaker_id) == Some(&which)))
        }
    }
}

fn parse_filters(terms: &[String]) -> CliResult<FilterSpec> {
    let mut spec = FilterSpec::default();
    for term in terms {
        spec.parse_term(term).map_err(validation)?;
    }
    Ok(spec)
}

/// Load a recording, condition it (16 kHz mono, pre-emphasis), and sample
/// `count` patches deterministically from a per-recording seed.
fn extract_recording_patches(
    wav_path: &Path,
    meta: &dataset::RecordingMeta,
    config: &SpectrogramConfig,
    pre_emphasis: f32,
    count: usize,
    seed: u64,
) -> Result<Vec<spectrogram::SpectrogramPatch>, String> {
    let clip = audio::read_wav_file(wav_path).map_err(|e| format!("{}: {e}", wav_path.display()))?;
    let clip = audio::resample(&clip, audio::CANONICAL_RATE_HZ)
        .map_err(|e| format!("{}: {e}", wav_path.display()))?;
    let clip = audio::pre_emphasize(&clip, pre_emphasis);
    let bands = spectrogram::stft_bands(&clip, config)
        .map_err(|e| format!("{}: {e}", wav_path.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(recording_seed(seed, &meta.path));
    spectrogram::sample_patches(
        &bands,
        config,
        count,
        &mut rng,
        &meta.path,
        Some(&meta.speaker_id),
    )
    .map_err(|e| format!("{}: {e}", wav_path.display()))
}

fn recording_seed(seed: u64, path: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in path.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn resolve_wav(manifest_path: &Path, record_path: &str) -> PathBuf {
    let p = Path::new(record_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(p)
    }
}

fn run_preprocess(args: PreprocessArgs) -> CliResult {
    use rayon::prelude::*;
    let config = args.spectro.config()?;
    if args.patches_per_recording == 0 {
        return Err(validation("--patches-per-recording must be positive"));
    }
    let manifest = load_manifest_checked(&args.manifest)?;
    let selected = select_split(&manifest, &args.split)?;
    if selected.records.is_empty() {
        return Err(validation("no recordings selected"));
    }
    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    let pool = thread_pool(args.workers)?;

    #[derive(serde::Serialize)]
    struct IndexEntry<'a> {
        tensor: String,
        speaker_id: &'a str,
        source: &'a str,
        width: usize,
        count: usize,
    }

    let results: Vec<(String, usize, usize)> = pool.install(|| {
        selected
            .records
            .par_iter()
            .enumerate()
            .map(|(i, rec)| {
                let wav = resolve_wav(&args.manifest, &rec.path);
                let patches = extract_recording_patches(
                    &wav,
                    rec,
                    &config,
                    args.spectro.pre_emphasis,
                    args.patches_per_recording,
                    args.seed,
                )
                .map_err(CliError::Runtime)?;
                let file = format!("patches-{i:05}.bin");
                spectrogram::write_patch_tensor(&patches, &args.out.join(&file))
                    .map_err(runtime)?;
                Ok((file, patches[0].width, patches.len()))
            })
            .collect::<CliResult<Vec<_>>>()
    })?;

    let mut index = Vec::new();
    writeln!(
        index,
        "# tlfv preprocess manifest={} {} {} patches_per_recording={} seed={}",
        args.manifest.display(),
        args.spectro.describe(),
        args.split.describe(),
        args.patches_per_recording,
        args.seed
    )
    .map_err(runtime)?;
    for (rec, (file, width, count)) in selected.records.iter().zip(&results) {
        serde_json::to_writer(
            &mut index,
            &IndexEntry {
                tensor: file.clone(),
                speaker_id: &rec.speaker_id,
                source: &rec.path,
                width: *width,
                count: *count,
            },
        )
        .map_err(runtime)?;
        index.push(b'\n');
    }
    std::fs::write(args.out.join("index.jsonl"), index).map_err(runtime)?;
    info!(
        "extracted {} patches from {} recordings into {}",
        results.iter().map(|(_, _, c)| c).sum::<usize>(),
        results.len(),
        args.out.display()
    );
    Ok(())
}

fn load_patch_set(dir: &Path) -> CliResult<LabeledPatchSet> {
    #[derive(serde::Deserialize)]
    struct IndexEntry {
        tensor: String,
        speaker_id: String,
        source: String,
        width: usize,
        #[allow(dead_code)]
        count: usize,
    }

    let index = std::fs::read_to_string(dir.join("index.jsonl")).map_err(runtime)?;
    let mut patches = Vec::new();
    for line in index.lines() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let entry: IndexEntry = serde_json::from_str(line).map_err(runtime)?;
        let (width, values) =
            spectrogram::read_patch_tensor(&dir.join(&entry.tensor)).map_err(runtime)?;
        if width != entry.width {
            return Err(CliError::Runtime(format!(
                "{}: header width {width} does not match index width {}",
                entry.tensor, entry.width
            )));
        }
        for vals in values {
            patches.push(spectrogram::SpectrogramPatch {
                values: vals,
                width,
                config: SpectrogramConfig::new(2000, 100, 50).unwrap(),
                start_ms: 0,
                source_id: entry.source.clone(),
                speaker_id: Some(entry.speaker_id.clone()),
            });
        }
    }
    LabeledPatchSet::from_patches(patches).map_err(|e| CliError::Runtime(e.to_string()))
}

fn run_train(args: TrainArgs) -> CliResult {
    let set = load_patch_set(&args.patches)?;
    let net_config = {
        let mut c = net::NetConfig::for_width(set.width, args.init_seed)
            .map_err(|e| validation(e.to_string()))?;
        c.learning_rate = args.learning_rate;
        c.optimizer = args.optimizer;
        c
    };
    let budget = match args.seconds {
        Some(s) if s <= 0.0 => return Err(validation("--seconds must be positive")),
        Some(s) => TrainBudget::Seconds(s),
        None => TrainBudget::Steps(args.steps),
    };
    let train_config = TrainConfig {
        margin: args.margin,
        speakers_per_batch: args.speakers_per_batch,
        patches_per_speaker: args.patches_per_speaker,
        budget,
        mining: args.mining,
        seed: args.seed,
    };
    train_config
        .validate()
        .map_err(|e| validation(e.to_string()))?;
    if args.margin < 0.0 {
        return Err(validation("--margin must be >= 0"));
    }

    info!(
        "training on {} patches from {} speakers (width {})",
        set.n_patches(),
        set.n_speakers(),
        set.width
    );
    let network = net::build::<f32>(net_config).map_err(|e| validation(e.to_string()))?;
    let (network, trace) =
        triplet::train(network, &set, &train_config).map_err(|e| CliError::Runtime(e.to_string()))?;

    net::save_checkpoint(&network, &args.out).map_err(runtime)?;

    // calibrate the lr_d normalizer on the training embeddings
    use rayon::prelude::*;
    let jobs: Vec<(usize, usize)> = (0..set.n_speakers())
        .flat_map(|s| (0..set.patches[s].len()).map(move |i| (s, i)))
        .collect();
    let embeddings: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(s, i)| forward_values(&network, &set.patches[s][i]).map_err(runtime))
        .collect::<CliResult<_>>()?;
    let labels: Vec<String> = jobs
        .iter()
        .map(|&(s, _)| set.speakers[s].clone())
        .collect();
    let labeled = LabeledEmbeddingSet::new(embeddings, labels).map_err(runtime)?;
    let calibration = forensic::calibrate_n(&labeled).map_err(runtime)?;
    let cal_path = calibration_path(&args.out);
    let cal_json = serde_json::json!({
        "config": train_run_description(&args, set.width),
        "n": calibration.n,
        "provenance": calibration.provenance,
    });
    std::fs::write(
        &cal_path,
        serde_json::to_string_pretty(&cal_json).map_err(runtime)?,
    )
    .map_err(runtime)?;

    if let Some(loss_csv) = &args.loss_csv {
        let mut out = Vec::new();
        triplet::write_trace_csv(&trace, &train_run_description(&args, set.width), &mut out)
            .map_err(runtime)?;
        std::fs::write(loss_csv, out).map_err(runtime)?;
    }
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        info!(
            "trained {} steps: loss {:.4} -> {:.4}; checkpoint {}",
            trace.len(),
            first.loss,
            last.loss,
            args.out.display()
        );
    }
    Ok(())
}

fn train_run_description(args: &TrainArgs, width: usize) -> String {
    format!(
        "tlfv train width={width} steps={} seconds={:?} margin={} speakers_per_batch={} patches_per_speaker={} mining={:?} seed={} init_seed={} learning_rate={} optimizer={:?}",
        args.steps,
        args.seconds,
        args.margin,
        args.speakers_per_batch,
        args.patches_per_speaker,
        args.mining,
        args.seed,
        args.init_seed,
        args.learning_rate,
        args.optimizer
    )
}

fn calibration_path(checkpoint: &Path) -> PathBuf {
    let mut os = checkpoint.as_os_str().to_os_string();
    os.push(".calibration.json");
    PathBuf::from(os)
}

fn forward_values(net: &Network<f32>, values: &[f32]) -> Result<Vec<f64>, net::NetError> {
    let patch = spectrogram::SpectrogramPatch {
        values: values.to_vec(),
        width: net.input_width(),
        config: SpectrogramConfig::new(2000, 100, 50).unwrap(),
        start_ms: 0,
        source_id: String::new(),
        speaker_id: None,
    };
    net.forward(&patch).map(|e| e.values)
}

/// Compute embeddings for every selected recording, keyed by
/// (speaker, recording path). Parallel over recordings, deterministic
/// regardless of worker count.
fn embed_recordings(
    network: &Network<f32>,
    manifest_path: &Path,
    records: &[dataset::RecordingMeta],
    spectro: &SpectroArgs,
    count: usize,
    seed: u64,
    workers: Option<usize>,
) -> CliResult<EmbeddingStore> {
    use rayon::prelude::*;
    let config = spectro.config()?;
    let width = config.patch_width_frames();
    if width != network.input_width() {
        return Err(validation(format!(
            "patch width {} (t/h) does not match checkpoint width {}",
            width,
            network.input_width()
        )));
    }
    let pool = thread_pool(workers)?;
    let embedded: Vec<((String, String), Vec<Vec<f64>>)> = pool.install(|| {
        records
            .par_iter()
            .map(|rec| {
                let wav = resolve_wav(manifest_path, &rec.path);
                let patches = extract_recording_patches(
                    &wav,
                    rec,
                    &config,
                    spectro.pre_emphasis,
                    count,
                    seed,
                )
                .map_err(CliError::Runtime)?;
                let mut embeddings = Vec::with_capacity(patches.len());
                for p in &patches {
                    embeddings.push(network.forward(p).map_err(runtime)?.values);
                }
                Ok(((rec.speaker_id.clone(), rec.path.clone()), embeddings))
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    Ok(embedded.into_iter().collect())
}

fn run_quality(args: QualityArgs) -> CliResult {
    let manifest = load_manifest_checked(&args.manifest)?;
    let selected = select_split(&manifest, &args.split)?;
    let filter = parse_filters(&args.filters)?;
    let filtered = selected.filter(|r| filter.matches(r));
    if filtered.records.is_empty() {
        return Err(validation("no recordings match the split and filters"));
    }
    let network = net::load_checkpoint(&args.checkpoint).map_err(runtime)?;
    let store = embed_recordings(
        &network,
        &args.manifest,
        &filtered.records,
        &args.spectro,
        args.patches_per_recording,
        args.seed,
        args.workers,
    )?;

    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    for ((speaker, _), embs) in &store {
        for e in embs {
            embeddings.push(e.clone());
            labels.push(speaker.clone());
        }
    }
    let set = LabeledEmbeddingSet::new(embeddings, labels).map_err(runtime)?;
    let report = quality::compute_quality(&set).map_err(runtime)?;

    let description = format!(
        "tlfv quality checkpoint={} manifest={} {} {} filters={:?} patches_per_recording={} seed={}",
        args.checkpoint.display(),
        args.manifest.display(),
        args.split.describe(),
        args.spectro.describe(),
        args.filters,
        args.patches_per_recording,
        args.seed
    );
    let json = serde_json::json!({
        "config": description,
        "report": report,
    });
    std::fs::write(&args.out, serde_json::to_string_pretty(&json).map_err(runtime)?)
        .map_err(runtime)?;
    if let Some(csv) = &args.csv {
        let content = format!(
            "# {description}\n{}\n{}\n",
            quality::QualityReport::csv_header(),
            report.csv_row()
        );
        std::fs::write(csv, content).map_err(runtime)?;
    }
    info!(
        "quality over {} embeddings of {} speakers: iad={:.4} oad={:.4} dr={:.4} msc={:.4}",
        report.n_embeddings, report.n_speakers, report.iad, report.oad, report.dr, report.msc
    );
    Ok(())
}

fn run_cases(args: CasesArgs) -> CliResult {
    let manifest = load_manifest_checked(&args.manifest)?;
    let selected = select_split(&manifest, &args.split)?;
    if selected.records.is_empty() {
        return Err(validation("no recordings in the selected split"));
    }
    let mut by_speaker: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for rec in &selected.records {
        by_speaker
            .entry(rec.speaker_id.clone())
            .or_default()
            .push(rec.path.clone());
    }
    let cfg = CaseConfig {
        reference_recordings: args.reference_recordings,
        patches_per_recording: args.patches_per_recording,
        population_size: args.population,
        rounds: args.rounds,
        seed: args.seed,
    };
    let (cases, report) = forensic::build_cases(&by_speaker, &cfg).map_err(runtime)?;
    if !report.skipped_speakers.is_empty() {
        warn!(
            "skipped {} speakers lacking a questioned recording: {:?}",
            report.skipped_speakers.len(),
            report.skipped_speakers
        );
    }

    let json = serde_json::json!({
        "config": {
            "manifest": args.manifest.display().to_string(),
            "split": args.split.describe(),
            "case_config": cfg,
        },
        "build_report": report,
        "cases": cases,
    });
    std::fs::write(&args.out, serde_json::to_string_pretty(&json).map_err(runtime)?)
        .map_err(runtime)?;
    info!(
        "built {} cases over {} eligible speakers into {}",
        cases.len(),
        report.eligible_speakers,
        args.out.display()
    );
    Ok(())
}

fn run_score(args: ScoreArgs) -> CliResult {
    use rayon::prelude::*;

    #[derive(serde::Deserialize)]
    struct Roster {
        config: serde_json::Value,
        cases: Vec<forensic::CaseSpec>,
    }
    let roster: Roster =
        serde_json::from_str(&std::fs::read_to_string(&args.roster).map_err(runtime)?)
            .map_err(runtime)?;
    let case_cfg: CaseConfig =
        serde_json::from_value(roster.config["case_config"].clone()).map_err(runtime)?;
    let network = net::load_checkpoint(&args.checkpoint).map_err(runtime)?;
    let cal_path = args
        .calibration
        .clone()
        .unwrap_or_else(|| calibration_path(&args.checkpoint));
    let calibration: forensic::CalibrationConstant = {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&cal_path).map_err(runtime)?)
                .map_err(runtime)?;
        forensic::CalibrationConstant {
            n: v["n"]
                .as_f64()
                .ok_or_else(|| CliError::Runtime("calibration file lacks 'n'".into()))?,
            provenance: v["provenance"].as_str().unwrap_or("").to_string(),
        }
    };

    // embed exactly the recordings the roster references
    let manifest = load_manifest_checked(&args.manifest)?;
    let mut needed: std::collections::BTreeSet<(String, String)> = std::collections::BTreeSet::new();
    for c in &roster.cases {
        for r in &c.reference_recordings {
            needed.insert((c.reference_speaker.clone(), r.clone()));
        }
        needed.insert((c.questioned_speaker.clone(), c.questioned_recording.clone()));
        for (s, recs) in &c.population {
            for r in recs {
                needed.insert((s.clone(), r.clone()));
            }
        }
    }
    let records: Vec<dataset::RecordingMeta> = manifest
        .records
        .iter()
        .filter(|r| needed.contains(&(r.speaker_id.clone(), r.path.clone())))
        .cloned()
        .collect();
    if records.len() != needed.len() {
        return Err(CliError::Runtime(format!(
            "roster references {} recordings but only {} are present in the manifest",
            needed.len(),
            records.len()
        )));
    }
    let store = embed_recordings(
        &network,
        &args.manifest,
        &records,
        &args.spectro,
        case_cfg.patches_per_recording,
        args.seed,
        args.workers,
    )?;

    let pool = thread_pool(args.workers)?;
    let scores: Vec<CaseScore> = pool.install(|| {
        roster
            .cases
            .par_iter()
            .map(|spec| {
                let case = forensic::assemble_case(spec, &store, &case_cfg).map_err(runtime)?;
                let d = forensic::lr_d(&case, &calibration).map_err(runtime)?;
                let (dr, degenerate) = forensic::lr_dr(&case).map_err(runtime)?;
                Ok(CaseScore {
                    case_id: spec.case_id.clone(),
                    truth: spec.truth,
                    lr_d: d,
                    lr_dr: dr,
                    degenerate,
                })
            })
            .collect::<CliResult<Vec<_>>>()
    })?;

    let mut out = Vec::new();
    writeln!(
        out,
        "# tlfv score roster={} checkpoint={} calibration_n={} {} seed={}",
        args.roster.display(),
        args.checkpoint.display(),
        calibration.n,
        args.spectro.describe(),
        args.seed
    )
    .map_err(runtime)?;
    writeln!(out, "case_id,truth,lr_d,lr_dr,degenerate").map_err(runtime)?;
    for s in &scores {
        writeln!(
            out,
            "{},{},{},{},{}",
            s.case_id, s.truth, s.lr_d, s.lr_dr, s.degenerate
        )
        .map_err(runtime)?;
    }
    std::fs::write(&args.out, out).map_err(runtime)?;
    info!("scored {} cases into {}", scores.len(), args.out.display());
    Ok(())
}

fn parse_scores_csv(path: &Path) -> CliResult<Vec<CaseScore>> {
    let text = std::fs::read_to_string(path).map_err(runtime)?;
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() || line.starts_with("case_id,") {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(CliError::Runtime(format!(
                "{}:{}: expected 5 columns, got {}",
                path.display(),
                i + 1,
                parts.len()
            )));
        }
        let truth = match parts[1] {
            "genuine" => forensic::Truth::Genuine,
            "impostor" => forensic::Truth::Impostor,
            other => {
                return Err(CliError::Runtime(format!(
                    "{}:{}: unknown truth label '{other}'",
                    path.display(),
                    i + 1
                )))
            }
        };
        let parse = |s: &str| -> CliResult<f64> {
            s.parse::<f64>()
                .map_err(|e| CliError::Runtime(format!("{}:{}: {e}", path.display(), i + 1)))
        };
        scores.push(CaseScore {
            case_id: parts[0].to_string(),
            truth,
            lr_d: parse(parts[2])?,
            lr_dr: parse(parts[3])?,
            degenerate: parts[4] == "true",
        });
    }
    Ok(scores)
}

fn run_report(args: ReportArgs) -> CliResult {
    if args.bins == 0 {
        return Err(validation("--bins must be at least 1"));
    }
    let scores = parse_scores_csv(&args.scores)?;
    if scores.is_empty() {
        return Err(CliError::Runtime("score file holds no cases".into()));
    }
    std::fs::create_dir_all(&args.out_dir).map_err(runtime)?;

    let split_by_truth = |pick: fn(&CaseScore) -> f64, polarity: Polarity| -> ScoreSet {
        ScoreSet::new(
            scores
                .iter()
                .filter(|s| s.truth == forensic::Truth::Genuine)
                .map(pick)
                .collect(),
            scores
                .iter()
                .filter(|s| s.truth == forensic::Truth::Impostor)
                .map(pick)
                .collect(),
            polarity,
        )
    };

    let mut summary = serde_json::Map::new();
    summary.insert(
        "config".into(),
        serde_json::json!(format!(
            "tlfv report scores={} bins={}",
            args.scores.display(),
            args.bins
        )),
    );

    for (name, raw) in [
        ("lr_d", split_by_truth(|s| s.lr_d, Polarity::LowerIsGenuine)),
        (
            "lr_dr",
            split_by_truth(|s| s.lr_dr, Polarity::HigherIsGenuine),
        ),
    ] {
        let normalized = evalrep::normalize_polarity(&raw);
        let curve = evalrep::det_curve(&normalized).map_err(runtime)?;
        let (eer_value, eer_threshold) = evalrep::eer(&normalized).map_err(runtime)?;
        let auc_value = evalrep::auc(&normalized).map_err(runtime)?;
        let d_prime_value = evalrep::d_prime(&normalized).map_err(runtime)?;
        let hist = evalrep::histogram(&raw, args.bins).map_err(runtime)?;

        let header = format!(
            "tlfv report metric={name} scores={} genuine={} impostor={}",
            args.scores.display(),
            raw.genuine.len(),
            raw.impostor.len()
        );
        let mut det = Vec::new();
        evalrep::write_curve_csv(&curve, &header, &mut det).map_err(runtime)?;
        std::fs::write(args.out_dir.join(format!("det_{name}.csv")), det).map_err(runtime)?;

        let mut roc = Vec::new();
        writeln!(roc, "# {header}").map_err(runtime)?;
        writeln!(roc, "fpr,tpr").map_err(runtime)?;
        for p in &curve {
            writeln!(roc, "{},{}", p.fmr, 1.0 - p.fnmr).map_err(runtime)?;
        }
        std::fs::write(args.out_dir.join(format!("roc_{name}.csv")), roc).map_err(runtime)?;

        let mut hist_out = Vec::new();
        evalrep::write_histogram_csv(&hist, &header, &mut hist_out).map_err(runtime)?;
        std::fs::write(args.out_dir.join(format!("hist_{name}.csv")), hist_out)
            .map_err(runtime)?;

        summary.insert(
            name.into(),
            serde_json::json!({
                "eer": eer_value,
                "eer_threshold": eer_threshold,
                "auc": auc_value,
                "d_prime": d_prime_value,
                "genuine_mean": raw.genuine.iter().sum::<f64>() / raw.genuine.len() as f64,
                "impostor_mean": raw.impostor.iter().sum::<f64>() / raw.impostor.len() as f64,
            }),
        );
        info!(
            "{name}: eer={eer_value:.4} auc={auc_value:.4} d_prime={d_prime_value:.4}"
        );
    }

    std::fs::write(
        args.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(summary)).map_err(runtime)?,
    )
    .map_err(runtime)?;
    Ok(())
}

fn run_project(args: ProjectArgs) -> CliResult {
    let manifest = load_manifest_checked(&args.manifest)?;
    let selected = select_split(&manifest, &args.split)?;
    let filter = parse_filters(&args.filters)?;
    let filtered = selected.filter(|r| filter.matches(r));
    if filtered.records.is_empty() {
        return Err(validation("no recordings match the split and filters"));
    }
    let network = net::load_checkpoint(&args.checkpoint).map_err(runtime)?;
    let store = embed_recordings(
        &network,
        &args.manifest,
        &filtered.records,
        &args.spectro,
        args.patches_per_recording,
        args.seed,
        args.workers,
    )?;

    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    for ((speaker, _), embs) in &store {
        for e in embs {
            embeddings.push(e.clone());
            labels.push(speaker.clone());
        }
    }
    let set = LabeledEmbeddingSet::new(embeddings, labels).map_err(runtime)?;
    let projection = evalrep::project_2d(&set).map_err(runtime)?;

    let header = format!(
        "tlfv project checkpoint={} manifest={} {} {} patches_per_recording={} seed={} eigenvalues={},{}",
        args.checkpoint.display(),
        args.manifest.display(),
        args.split.describe(),
        args.spectro.describe(),
        args.patches_per_recording,
        args.seed,
        projection.eigenvalues[0],
        projection.eigenvalues[1]
    );
    let mut out = Vec::new();
    evalrep::write_projection_csv(&projection, &header, &mut out).map_err(runtime)?;
    std::fs::write(&args.out, out).map_err(runtime)?;
    info!(
        "projected {} embeddings into {}",
        projection.points.len(),
        args.out.display()
    );
    Ok(())
}
