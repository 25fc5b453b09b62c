//! Command-line front end and HTTP chat service.

pub mod server;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};

use recindial::checkpoint;
use recindial::corpus::redial::{self, read_jsonl};
use recindial::corpus::{LinkMap, PairRecord};
use recindial::evalsuite::{self, MetricsReport};
use recindial::pipeline::{self, Dataset, ExperimentConfig, Recommender};
use recindial::synth::{self, SynthConfig};
use recindial::{ChatEngine, Checkpoint, DecodeConfig, ItemId};

pub const ENV_CHECKPOINT: &str = "RECINDIAL_CHECKPOINT";
pub const ENV_PORT: &str = "RECINDIAL_PORT";
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Parser)]
#[command(name = "recindial", version, about = "Conversational recommender with a vocabulary pointer and knowledge bias")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct GlobalArgs {
    /// TOML experiment config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Checkpoint file (overridden by RECINDIAL_CHECKPOINT).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Directory written by `preprocess`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub beam_width: Option<usize>,
    #[arg(long, global = true)]
    pub topk: Option<usize>,
    #[arg(long, global = true)]
    pub nmax: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Listen port for `serve` (overridden by RECINDIAL_PORT).
    #[arg(long, global = true)]
    pub port: Option<u16>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic ReDial-format corpus with its KG and link map.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        dialogues: usize,
    },
    /// Normalize a ReDial-format corpus into a data directory.
    Preprocess {
        #[arg(long)]
        corpus: PathBuf,
        /// Tab-separated head, relation, tail.
        #[arg(long)]
        triples: Option<PathBuf>,
        /// JSON object from item ids and surface forms to entity ids.
        #[arg(long)]
        link_map: Option<PathBuf>,
    },
    /// Train on the data directory and write a checkpoint.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        /// Where to write the training report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Decode a split and write a transcript (JSON lines).
    Generate {
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score a transcript against gold pairs.
    Evaluate {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Training mention counts for the frequency buckets.
        #[arg(long)]
        counts: Option<PathBuf>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP chat service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Concurrent inference calls.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 30)]
        idle_minutes: u64,
        /// Restore sessions from and save them to this file.
        #[arg(long)]
        sessions_file: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

#[derive(Debug)]
pub enum CliError {
    /// Missing or inconsistent arguments; exit code 2.
    Usage(String),
    Run(recindial::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<recindial::Error> for CliError {
    fn from(e: recindial::Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(recindial::Error::io(path, e))
}

impl GlobalArgs {
    /// Applies the environment overrides.
    pub fn with_env(mut self, env: impl Fn(&str) -> Option<String>) -> CliResult<Self> {
        if let Some(ck) = env(ENV_CHECKPOINT).filter(|s| !s.is_empty()) {
            self.checkpoint = Some(PathBuf::from(ck));
        }
        if let Some(port) = env(ENV_PORT).filter(|s| !s.is_empty()) {
            let port = port.parse().map_err(|_| CliError::Usage(format!("{ENV_PORT}={port} is not a port number")))?;
            self.port = Some(port);
        }
        Ok(self)
    }

    fn data_dir(&self) -> CliResult<&Path> {
        self.data_dir.as_deref().ok_or_else(|| CliError::Usage("--data-dir is required".into()))
    }

    fn checkpoint(&self) -> CliResult<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("--checkpoint (or {ENV_CHECKPOINT}) is required")))
    }

    /// The config file, or the config stored in `fallback`, or defaults.
    fn experiment(&self, fallback: Option<&serde_json::Value>) -> CliResult<ExperimentConfig> {
        let mut config = match (&self.config, fallback) {
            (Some(path), _) => load_config(path)?,
            (None, Some(v)) => serde_json::from_value(v.clone()).map_err(recindial::Error::from)?,
            (None, None) => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.train.seed = seed;
            config.preprocess.split_seed = seed;
        }
        config.decode = self.decode(config.decode);
        Ok(config)
    }

    fn decode(&self, mut d: DecodeConfig) -> DecodeConfig {
        if let Some(w) = self.beam_width {
            d.beam_width = w;
        }
        if let Some(k) = self.topk {
            d.top_k = k;
        }
        if let Some(n) = self.nmax {
            d.n_max = n;
        }
        d
    }
}

pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Runs one parsed command line. Environment overrides must already be
/// applied to `cli.global`.
pub fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth { out, dialogues } => synth_cmd(g, out, *dialogues),
        Command::Preprocess { corpus, triples, link_map } => preprocess(g, corpus, triples.as_deref(), link_map.as_deref()),
        Command::Train { epochs, report } => train(g, *epochs, report.as_deref()),
        Command::Generate { split, out, threads } => generate(g, *split, out, *threads),
        Command::Evaluate { transcript, gold, counts, json, out } => {
            let report = evaluate(g, transcript, gold, counts.as_deref())?;
            let text = serde_json::to_string_pretty(&report).map_err(recindial::Error::from)?;
            if let Some(out) = out {
                std::fs::write(out, &text).map_err(|e| io_err(out, e))?;
            }
            if *json {
                println!("{text}");
            } else {
                print!("{}", report.to_text());
            }
            Ok(())
        }
        Command::Serve { host, workers, idle_minutes, sessions_file } => {
            let opts = server::ServeOptions {
                host: host.clone(),
                port: g.port.unwrap_or(DEFAULT_PORT),
                workers: workers.unwrap_or_else(pipeline::default_threads).max(1),
                idle: Duration::from_secs(idle_minutes.saturating_mul(60)),
                sessions_file: sessions_file.clone(),
            };
            let (engine, hash) = load_engine(g, opts.idle)?;
            server::serve(engine, hash, opts)
        }
    }
}

fn synth_cmd(g: &GlobalArgs, out: &Path, dialogues: usize) -> CliResult<()> {
    let corpus = synth::generate(&SynthConfig { dialogues, seed: g.seed.unwrap_or(0), ..SynthConfig::default() })?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    corpus.write_redial(&out.join("redial.jsonl"))?;
    corpus.write_triples(&out.join(pipeline::TRIPLES_FILE))?;
    corpus.write_link_map(&out.join(pipeline::LINK_MAP_FILE))?;
    println!("wrote {dialogues} dialogues, {} items, {} triples to {}", corpus.items.len(), corpus.triples.len(), out.display());
    Ok(())
}

fn preprocess(g: &GlobalArgs, corpus: &Path, triples: Option<&Path>, link_map: Option<&Path>) -> CliResult<()> {
    let config = g.experiment(None)?;
    let dir = g.data_dir()?;
    let load = redial::load_redial(corpus)?;
    let triples = triples.map(pipeline::read_triples).transpose()?.unwrap_or_default();
    let link_map = link_map.map(LinkMap::load).transpose()?.unwrap_or_default();
    if link_map.is_empty() {
        log::warn!("no link map: the knowledge bias will be zero for every context");
    }
    let data = pipeline::build_dataset(load.dialogues, load.item_names, triples, link_map, &config.preprocess)?;
    data.save(dir)?;
    println!(
        "{} dialogues, vocabulary {} ({} items), pairs train {} valid {} test {}, {} unknown mentions",
        data.dialogues.len(),
        data.vocab.len(),
        data.vocab.n_item_partition(),
        data.split.train.len(),
        data.split.valid.len(),
        data.split.test.len(),
        load.unknown_mentions.len()
    );
    Ok(())
}

fn train(g: &GlobalArgs, epochs: Option<usize>, report_path: Option<&Path>) -> CliResult<()> {
    let mut config = g.experiment(None)?;
    if let Some(e) = epochs {
        config.train.epochs = e;
    }
    let data = Dataset::load(g.data_dir()?)?;
    let ck_path = g.checkpoint()?;
    let started = Instant::now();
    let out = pipeline::train_on(&data, &config)?;
    out.checkpoint.save(ck_path)?;
    for e in &out.report.epochs {
        println!("epoch {} train ppl {:.3} valid ppl {:.3} ({:.1}s)", e.epoch, e.train_ppl, e.valid_ppl, e.seconds);
    }
    println!("best epoch {}; {:.1}s total; checkpoint {}", out.report.best_epoch, started.elapsed().as_secs_f64(), ck_path.display());
    let report_path = report_path.map(Path::to_path_buf).unwrap_or_else(|| ck_path.with_extension("report.json"));
    let json = serde_json::to_string_pretty(&out.report).map_err(recindial::Error::from)?;
    std::fs::write(&report_path, json).map_err(|e| io_err(&report_path, e))?;
    Ok(())
}

/// Checkpoint plus the config it was trained with (or `--config`).
fn load_model(g: &GlobalArgs, data: &Dataset) -> CliResult<(Recommender, ExperimentConfig)> {
    let ck = Checkpoint::load(g.checkpoint()?)?;
    let stored = ck.meta.get("config").cloned();
    let config = g.experiment(stored.as_ref())?;
    let rec = Recommender::from_checkpoint(ck, data, config.kg.add_inverse)?;
    Ok((rec, config))
}

fn generate(g: &GlobalArgs, split: SplitName, out: &Path, threads: Option<usize>) -> CliResult<()> {
    let data = Dataset::load(g.data_dir()?)?;
    let (rec, config) = load_model(g, &data)?;
    let pairs = match split {
        SplitName::Train => &data.split.train,
        SplitName::Valid => &data.split.valid,
        SplitName::Test => &data.split.test,
    };
    let started = Instant::now();
    let records = rec.generate_all(pairs, &config.decode, threads.unwrap_or_else(pipeline::default_threads).max(1))?;
    evalsuite::write_transcript(out, &records)?;
    println!("{} responses in {:.1}s -> {}", records.len(), started.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn read_counts(path: &Path) -> CliResult<HashMap<ItemId, usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text).map_err(recindial::Error::from)?)
}

/// Scores `transcript` against `gold`. Mention counts come from `counts`,
/// else the data directory, else a counts file beside the gold file. PPL is
/// reported when a checkpoint and data directory are both given.
pub fn evaluate(g: &GlobalArgs, transcript: &Path, gold: &Path, counts: Option<&Path>) -> CliResult<MetricsReport> {
    let records = evalsuite::read_transcript(transcript)?;
    let gold_records: Vec<PairRecord> = read_jsonl(gold)?;
    let counts_path = counts.map(Path::to_path_buf).or_else(|| {
        let beside_data = g.data_dir.as_ref().map(|d| d.join(pipeline::COUNTS_FILE));
        let beside_gold = gold.parent().map(|d| d.join(pipeline::COUNTS_FILE));
        [beside_data, beside_gold].into_iter().flatten().find(|p| p.exists())
    });
    let mention_counts = match counts_path {
        Some(p) => read_counts(&p)?,
        None => {
            log::warn!("no mention counts found; frequency buckets will be empty");
            HashMap::new()
        }
    };
    let (ppl, config) = match (&g.checkpoint, &g.data_dir) {
        (Some(_), Some(dir)) => {
            let data = Dataset::load(dir)?;
            let (rec, config) = load_model(g, &data)?;
            let pairs: Vec<_> = gold_records.iter().map(|p| p.to_pair(&data.vocab)).collect::<Result<_, _>>()?;
            (Some(rec.perplexity(&pairs)?), config)
        }
        _ => (None, g.experiment(None)?),
    };
    let instances = evalsuite::join_transcript_records(&records, &gold_records)?;
    Ok(MetricsReport::compute(&instances, &mention_counts, ppl, config.item_ratio)?)
}

/// Loads the data directory and checkpoint into a chat engine; also returns
/// the checkpoint file hash.
pub fn load_engine(g: &GlobalArgs, idle: Duration) -> CliResult<(Arc<ChatEngine>, String)> {
    let data = Dataset::load(g.data_dir()?)?;
    let hash = checkpoint::file_hash(g.checkpoint()?)?;
    let (rec, config) = load_model(g, &data)?;
    Ok((Arc::new(ChatEngine::new(Arc::new(rec), config.decode, idle)), hash))
}
