//! Command-line front end.
//!
//! Every option can also come from a TOML file given with `--config`. Keys use
//! the long flag name with underscores; a table named after the subcommand
//! overrides top-level keys, and flags override both.

use std::fs::{self, File};
use std::io::{BufRead, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use persona_core::corpus::{
    build_probe_set, build_vocab, make_instances, read_corpus, write_jsonl, CorpusFormat, DialogueEpisode, Persona,
    Responders, Speaker, SyntheticConfig, Turn, Vocab,
};
use persona_core::metrics::{evaluate_transmitter, probe_receiver, EvalOptions};
use persona_core::neural::{Checkpoint, OptimizerConfig, SequenceModelConfig};
use persona_core::receiver::{impression_items, persona_pool, train_receiver, Receiver, ReceiverConfig, ReceiverTrainConfig};
use persona_core::selfplay::{finetune, RewardModels, SelfPlayConfig};
use persona_core::transmitter::{
    prepare_instances, train_supervised, DecodeParams, EncodedContext, RankMode, TrainConfig, Transmitter,
};

use crate::api::router;
use crate::error::ServiceError;
use crate::session::{Engine, Session, SessionStore};

pub const CKPT_DIR_ENV: &str = "PERSONA_CKPT_DIR";

#[derive(Debug, Parser)]
#[command(name = "persona", version, about = "Persona-conditioned dialogue models")]
pub struct Cli {
    /// TOML file with defaults for any option.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory used for checkpoint paths that are not given explicitly.
    #[arg(long, global = true, env = CKPT_DIR_ENV)]
    pub ckpt_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse or synthesize a corpus, write it as JSONL plus a vocabulary.
    PrepareData(PrepareData),
    TrainTransmitter(TrainTransmitter),
    TrainReceiver(TrainReceiver),
    SelfplayFinetune(SelfplayFinetune),
    /// Hits@1, perplexity, F1 and BLEU of a transmitter.
    Evaluate(Evaluate),
    /// Persona-ranking probe of a receiver.
    ProbeReceiver(ProbeReceiver),
    /// One response for a persona and history.
    Generate(Generate),
    /// Terminal chat.
    Chat(Chat),
    /// HTTP chat API.
    Serve(Serve),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    ParlaiText,
    Jsonl,
}

impl From<Format> for CorpusFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::ParlaiText => CorpusFormat::ParlaiText,
            Format::Jsonl => CorpusFormat::Jsonl,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    Desk,
}

impl Preset {
    fn config(self, vocab: usize, causal: bool) -> SequenceModelConfig {
        match self {
            Preset::Tiny => SequenceModelConfig::tiny(vocab, causal),
            Preset::Desk => SequenceModelConfig::desk(vocab, causal),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rank {
    Combined,
    Classifier,
    Lm,
}

impl From<Rank> for RankMode {
    fn from(r: Rank) -> Self {
        match r {
            Rank::Combined => RankMode::Combined,
            Rank::Classifier => RankMode::ClassifierOnly,
            Rank::Lm => RankMode::LmOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct PrepareData {
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Generate a synthetic corpus with this many personas instead of reading one.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub turns: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub min_freq: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Training {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Args)]
pub struct TrainTransmitter {
    #[command(flatten)]
    pub train: Training,
}

#[derive(Debug, Args)]
pub struct TrainReceiver {
    #[command(flatten)]
    pub train: Training,
}

#[derive(Debug, Args)]
pub struct SelfplayFinetune {
    #[arg(long)]
    pub user: Option<PathBuf>,
    #[arg(long)]
    pub agent: Option<PathBuf>,
    #[arg(long)]
    pub receiver: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub dialogues: Option<usize>,
    #[arg(long)]
    pub turns: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSONL reward log; defaults to `<out>.rewards.jsonl`.
    #[arg(long)]
    pub reward_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub rank: Option<Rank>,
    /// Skip decoding; F1 and BLEU are then omitted.
    #[arg(long)]
    pub no_decode: bool,
}

#[derive(Debug, Args)]
pub struct ProbeReceiver {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub distractors: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Decoding {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Generate {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// One profile sentence per line.
    #[arg(long)]
    pub persona: PathBuf,
    /// One utterance per line, alternating, the partner speaking last.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub decoding: Decoding,
}

#[derive(Debug, Args)]
pub struct Models {
    #[arg(long)]
    pub transmitter: Option<PathBuf>,
    #[arg(long)]
    pub receiver: Option<PathBuf>,
    /// Corpus whose personas new sessions draw from.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub decoding: Decoding,
}

#[derive(Debug, Args)]
pub struct Chat {
    #[command(flatten)]
    pub models: Models,
    /// Bot persona, one profile per line; drawn from `--data` otherwise.
    #[arg(long)]
    pub persona: Option<PathBuf>,
    #[arg(long)]
    pub show_perception: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[command(flatten)]
    pub models: Models,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Directory of session logs; sessions found there are restored.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Config-file lookup with subcommand tables over top-level keys.
#[derive(Debug, Default)]
pub struct FileConfig {
    table: toml::Table,
    section: String,
}

impl FileConfig {
    pub fn load(path: Option<&Path>, section: &str) -> Result<Self, ServiceError> {
        let table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| ServiceError::Io(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| ServiceError::Invalid(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        Ok(FileConfig {
            table,
            section: section.to_string(),
        })
    }

    pub fn from_str(text: &str, section: &str) -> Result<Self, ServiceError> {
        Ok(FileConfig {
            table: text.parse().map_err(|e: toml::de::Error| ServiceError::Invalid(e.to_string()))?,
            section: section.to_string(),
        })
    }

    fn lookup<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, ServiceError> {
        let scoped = self.table.get(&self.section).and_then(|s| s.as_table()).and_then(|t| t.get(key));
        match scoped.or_else(|| self.table.get(key).filter(|v| !v.is_table())) {
            Some(v) => v
                .clone()
                .try_into()
                .map(Some)
                .map_err(|e| ServiceError::Invalid(format!("config key '{key}': {e}"))),
            None => Ok(None),
        }
    }

    /// Flag, else config value, else `default`.
    pub fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, ServiceError> {
        Ok(self.maybe(flag, key)?.unwrap_or(default))
    }

    pub fn maybe<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, ServiceError> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.lookup(key),
        }
    }

    /// A required path: flag, config, or `<ckpt_dir>/<fallback>`.
    pub fn path(&self, flag: Option<PathBuf>, key: &str, dir: Option<&Path>, fallback: &str) -> Result<PathBuf, ServiceError> {
        if let Some(p) = self.maybe(flag, key)? {
            return Ok(p);
        }
        match dir {
            Some(d) => Ok(d.join(fallback)),
            None => Err(ServiceError::Invalid(format!(
                "--{} is required (or set {CKPT_DIR_ENV})",
                key.replace('_', "-")
            ))),
        }
    }

    fn required<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<T, ServiceError> {
        self.maybe(flag, key)?
            .ok_or_else(|| ServiceError::Invalid(format!("--{} is required", key.replace('_', "-"))))
    }
}

fn section_name(c: &Command) -> &'static str {
    match c {
        Command::PrepareData(_) => "prepare-data",
        Command::TrainTransmitter(_) => "train-transmitter",
        Command::TrainReceiver(_) => "train-receiver",
        Command::SelfplayFinetune(_) => "selfplay-finetune",
        Command::Evaluate(_) => "evaluate",
        Command::ProbeReceiver(_) => "probe-receiver",
        Command::Generate(_) => "generate",
        Command::Chat(_) => "chat",
        Command::Serve(_) => "serve",
    }
}

/// Vocabulary sidecar written next to a prepared corpus.
pub fn vocab_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".vocab.json");
    PathBuf::from(s)
}

fn load_corpus(path: &Path) -> Result<Vec<DialogueEpisode>, ServiceError> {
    Ok(read_corpus(path, CorpusFormat::Jsonl)?)
}

fn load_vocab(data: &Path, episodes: &[DialogueEpisode]) -> Result<Vocab, ServiceError> {
    let side = vocab_path(data);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| ServiceError::Io(format!("{}: {e}", side.display())))?;
        Ok(Vocab::from_json(&text)?)
    } else {
        Ok(build_vocab(episodes, 1)?)
    }
}

fn load_transmitter(path: &Path) -> Result<Transmitter, ServiceError> {
    Ok(Transmitter::from_checkpoint(Checkpoint::load(path, None)?)?)
}

fn load_receiver(path: &Path) -> Result<Receiver, ServiceError> {
    Ok(Receiver::from_checkpoint(Checkpoint::load(path, None)?)?)
}

fn read_lines(path: &Path) -> Result<Vec<String>, ServiceError> {
    let text = fs::read_to_string(path).map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), ServiceError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))
}

fn decode_params(cfg: &FileConfig, d: &Decoding) -> Result<DecodeParams, ServiceError> {
    let base = DecodeParams::default();
    let p = DecodeParams {
        alpha: cfg.pick(d.alpha, "alpha", base.alpha)?,
        beam_size: cfg.pick(d.beam, "beam", base.beam_size)?,
        max_steps: cfg.pick(d.max_steps, "max_steps", base.max_steps)?,
        ..base
    };
    p.validate()?;
    Ok(p)
}

/// Parses `argv` and runs the command. Clap errors (help, unknown flags)
/// come back as `Err` of the outer result so the caller can exit with
/// clap's own status.
pub fn run<I, T, W>(argv: I, out: &mut W) -> Result<Result<(), ServiceError>, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
    W: Write,
{
    let cli = Cli::try_parse_from(argv)?;
    Ok(dispatch(cli, &mut std::io::stdin().lock(), out))
}

pub fn dispatch<R: BufRead, W: Write>(cli: Cli, input: &mut R, out: &mut W) -> Result<(), ServiceError> {
    let cfg = FileConfig::load(cli.config.as_deref(), section_name(&cli.command))?;
    let dir = cli.ckpt_dir.as_deref();
    match cli.command {
        Command::PrepareData(a) => prepare_data(&cfg, a, out),
        Command::TrainTransmitter(a) => train_transmitter(&cfg, dir, a.train, out),
        Command::TrainReceiver(a) => train_receiver_cmd(&cfg, dir, a.train, out),
        Command::SelfplayFinetune(a) => selfplay(&cfg, dir, a, out),
        Command::Evaluate(a) => evaluate(&cfg, dir, a, out),
        Command::ProbeReceiver(a) => probe(&cfg, dir, a, out),
        Command::Generate(a) => generate(&cfg, dir, a, out),
        Command::Chat(a) => chat(&cfg, dir, a, input, out),
        Command::Serve(a) => serve(&cfg, dir, a),
    }
}

fn io_err(e: std::io::Error) -> ServiceError {
    ServiceError::Io(e.to_string())
}

fn prepare_data<W: Write>(cfg: &FileConfig, a: PrepareData, out: &mut W) -> Result<(), ServiceError> {
    let dest: PathBuf = cfg.required(a.out, "out")?;
    let min_freq = cfg.pick(a.min_freq, "min_freq", 1)?;
    let episodes = match (cfg.maybe(a.synthetic, "synthetic")?, cfg.maybe(a.input, "in")?) {
        (Some(n), None) => {
            let mut sc = SyntheticConfig::new(n, cfg.pick(a.turns, "turns", 3)?, cfg.pick(a.seed, "seed", 0)?);
            sc.num_episodes = cfg.maybe(a.episodes, "episodes")?;
            sc.generate()?
        }
        (None, Some(path)) => read_corpus(&path, cfg.pick(a.format, "format", Format::Jsonl)?.into())?,
        _ => return Err(ServiceError::Invalid("give exactly one of --in and --synthetic".into())),
    };
    let vocab = build_vocab(&episodes, min_freq)?;
    let f = File::create(&dest).map_err(|e| ServiceError::Io(format!("{}: {e}", dest.display())))?;
    write_jsonl(&episodes, BufWriter::new(f))?;
    fs::write(vocab_path(&dest), vocab.to_json()?).map_err(io_err)?;
    writeln!(out, "{} episodes, {} tokens -> {}", episodes.len(), vocab.len(), dest.display()).map_err(io_err)?;
    Ok(())
}

fn train_transmitter<W: Write>(cfg: &FileConfig, dir: Option<&Path>, a: Training, out: &mut W) -> Result<(), ServiceError> {
    let data: PathBuf = cfg.required(a.data, "data")?;
    let dest = cfg.path(a.out, "out", dir, "transmitter.ckpt")?;
    let episodes = load_corpus(&data)?;
    let vocab = load_vocab(&data, &episodes)?;
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let preset = cfg.pick(a.preset, "preset", Preset::Tiny)?;
    let mut t = Transmitter::new(vocab.clone(), preset.config(vocab.len(), true), seed)?;
    let instances = make_instances(&episodes, Responders::Both, seed)?;
    let prepared = prepare_instances(&t, &instances)?;
    let tc = TrainConfig {
        epochs: cfg.pick(a.epochs, "epochs", 2)?,
        batch_size: cfg.pick(a.batch_size, "batch_size", 8)?,
        optimizer: OptimizerConfig::with_lr(cfg.pick(a.lr, "lr", OptimizerConfig::supervised().learning_rate)?),
        shuffle_seed: seed,
    };
    let logs = train_supervised(&mut t, &prepared, &tc, |l| {
        let _ = writeln!(out, "epoch {} mle {:.4} nup {:.4}", l.epoch, l.mle, l.nup);
    })?;
    let meta = serde_json::json!({ "data": data, "epochs": logs.len(), "instances": prepared.len() });
    t.to_checkpoint(meta)?.save(&dest)?;
    writeln!(out, "saved {}", dest.display()).map_err(io_err)
}

fn train_receiver_cmd<W: Write>(cfg: &FileConfig, dir: Option<&Path>, a: Training, out: &mut W) -> Result<(), ServiceError> {
    let data: PathBuf = cfg.required(a.data, "data")?;
    let dest = cfg.path(a.out, "out", dir, "receiver.ckpt")?;
    let episodes = load_corpus(&data)?;
    let vocab = load_vocab(&data, &episodes)?;
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let preset = cfg.pick(a.preset, "preset", Preset::Tiny)?;
    let mut r = Receiver::new(vocab.clone(), ReceiverConfig::new(preset.config(vocab.len(), false)), seed)?;
    let rc = ReceiverTrainConfig {
        epochs: cfg.pick(a.epochs, "epochs", 2)?,
        batch_size: cfg.pick(a.batch_size, "batch_size", 8)?,
        optimizer: OptimizerConfig::with_lr(cfg.pick(a.lr, "lr", OptimizerConfig::supervised().learning_rate)?),
        seed,
    };
    let items = impression_items(&episodes);
    let pool = persona_pool(&episodes);
    train_receiver(&mut r, &items, &pool, &rc, |l| {
        let _ = writeln!(out, "epoch {} loss {:.4} tau {:.3}", l.epoch, l.loss, l.tau_end);
    })?;
    r.to_checkpoint(serde_json::json!({ "data": data }))?.save(&dest)?;
    writeln!(out, "saved {}", dest.display()).map_err(io_err)
}

fn selfplay<W: Write>(cfg: &FileConfig, dir: Option<&Path>, a: SelfplayFinetune, out: &mut W) -> Result<(), ServiceError> {
    let user = load_transmitter(&cfg.path(a.user, "user", dir, "transmitter.ckpt")?)?;
    let agent_path = cfg.path(a.agent, "agent", dir, "transmitter.ckpt")?;
    let mut agent = load_transmitter(&agent_path)?;
    let reference = agent.clone();
    let receiver = load_receiver(&cfg.path(a.receiver, "receiver", dir, "receiver.ckpt")?)?;
    let data: PathBuf = cfg.required(a.data, "data")?;
    let episodes = load_corpus(&data)?;
    let dest = cfg.path(a.out, "out", dir, "agent.ckpt")?;
    let log_path = match cfg.maybe(a.reward_log, "reward_log")? {
        Some(p) => p,
        None => {
            let mut s = dest.as_os_str().to_owned();
            s.push(".rewards.jsonl");
            PathBuf::from(s)
        }
    };
    let base = SelfPlayConfig::default();
    let mut sc = SelfPlayConfig {
        num_dialogues: cfg.pick(a.dialogues, "dialogues", base.num_dialogues)?,
        batch_size: cfg.pick(a.batch_size, "batch_size", base.batch_size)?,
        optimizer: OptimizerConfig::with_lr(cfg.pick(a.lr, "lr", base.optimizer.learning_rate)?),
        seed: cfg.pick(a.seed, "seed", base.seed)?,
        ..base
    };
    sc.simulation.turns = cfg.pick(a.turns, "turns", sc.simulation.turns)?;
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| ServiceError::Io(format!("{}: {e}", log_path.display())))?);
    let models = RewardModels {
        reference: &reference,
        receiver: &receiver,
    };
    let mut write_err = None;
    let logs = finetune(&user, &mut agent, models, &episodes, &sc, |b| {
        if let Err(e) = b.write_jsonl(&mut log) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    log.flush().map_err(io_err)?;
    let meta = serde_json::json!({ "selfplay_dialogues": sc.num_dialogues, "batches": logs.len() });
    agent.to_checkpoint(meta)?.save(&dest)?;
    if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
        writeln!(out, "R3 {:.4} -> {:.4} over {} batches", first.r3, last.r3, logs.len()).map_err(io_err)?;
    }
    writeln!(out, "saved {} (reward log {})", dest.display(), log_path.display()).map_err(io_err)
}

fn evaluate<W: Write>(cfg: &FileConfig, dir: Option<&Path>, a: Evaluate, out: &mut W) -> Result<(), ServiceError> {
    let t = load_transmitter(&cfg.path(a.ckpt, "ckpt", dir, "transmitter.ckpt")?)?;
    let data: PathBuf = cfg.required(a.data, "data")?;
    let episodes = load_corpus(&data)?;
    let base = EvalOptions::default();
    let opts = EvalOptions {
        alpha: cfg.pick(a.alpha, "alpha", base.alpha)?,
        rank_mode: cfg.pick(a.rank, "rank", Rank::Combined)?.into(),
        decode: if a.no_decode { None } else { base.decode },
        keep_rows: false,
    };
    let report = evaluate_transmitter(&t, &episodes, &opts)?;
    if let Some(p) = cfg.maybe(a.report, "report")? {
        write_json(&p, &report)?;
    }
    writeln!(out, "{}", serde_json::to_string(&report)?).map_err(io_err)
}

fn probe<W: Write>(cfg: &FileConfig, dir: Option<&Path>, a: ProbeReceiver, out: &mut W) -> Result<(), ServiceError> {
    let r = load_receiver(&cfg.path(a.ckpt, "ckpt", dir, "receiver.ckpt")?)?;
    let data: PathBuf = cfg.required(a.data, "data")?;
    let episodes = load_corpus(&data)?;
    let set = build_probe_set(&episodes, cfg.pick(a.distractors, "distractors", 31)?, cfg.pick(a.seed, "seed", 0)?)?;
    let report = probe_receiver(&r, &set, false)?;
    if let Some(p) = cfg.maybe(a.report, "report")? {
        write_json(&p, &report)?;
    }
    writeln!(out, "{}", serde_json::to_string(&report)?).map_err(io_err)
}

fn generate<W: Write>(cfg: &FileConfig, dir: Option<&Path>, a: Generate, out: &mut W) -> Result<(), ServiceError> {
    let t = load_transmitter(&cfg.path(a.ckpt, "ckpt", dir, "transmitter.ckpt")?)?;
    let persona = Persona::new(read_lines(&a.persona)?)?;
    let lines = match &a.history {
        Some(p) => read_lines(p)?,
        None => Vec::new(),
    };
    // The last line belongs to the partner; speakers alternate backwards.
    let n = lines.len();
    let history: Vec<Turn> = lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| Turn::new(if (n - i) % 2 == 1 { Speaker::A } else { Speaker::B }, l))
        .collect();
    let params = decode_params(cfg, &a.decoding)?;
    let ctx = EncodedContext::new(t.vocab(), &persona, &history, Speaker::B);
    let beam = t.decode_beam(&ctx, &params)?;
    writeln!(out, "{}", beam.best().text).map_err(io_err)
}

fn engine(cfg: &FileConfig, dir: Option<&Path>, m: Models) -> Result<Engine, ServiceError> {
    let t = load_transmitter(&cfg.path(m.transmitter, "transmitter", dir, "transmitter.ckpt")?)?;
    let r = load_receiver(&cfg.path(m.receiver, "receiver", dir, "receiver.ckpt")?)?;
    let personas = match cfg.maybe(m.data, "data")? {
        Some(p) => persona_pool(&load_corpus(&p)?),
        None => Vec::new(),
    };
    let mut e = Engine::new(t, r, personas);
    e.decode = decode_params(cfg, &m.decoding)?;
    Ok(e)
}

fn chat<R: BufRead, W: Write>(
    cfg: &FileConfig,
    dir: Option<&Path>,
    a: Chat,
    input: &mut R,
    out: &mut W,
) -> Result<(), ServiceError> {
    let show = a.show_perception || cfg.pick(None, "show_perception", false)?;
    let persona_file = cfg.maybe(a.persona, "persona")?;
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let engine = Arc::new(engine(cfg, dir, a.models)?);
    let rt = tokio::runtime::Builder::new_current_thread().build().map_err(io_err)?;
    let store = SessionStore::new(engine, None, seed)?;
    let persona = persona_file.map(|p| read_lines(&p)).transpose()?;
    let session: Session = rt.block_on(store.create(persona, None))?;
    writeln!(out, "persona:").map_err(io_err)?;
    for p in &session.bot_persona {
        writeln!(out, "  {p}").map_err(io_err)?;
    }
    let mut line = String::new();
    loop {
        line.clear();
        write!(out, "> ").map_err(io_err)?;
        out.flush().map_err(io_err)?;
        if input.read_line(&mut line).map_err(io_err)? == 0 {
            break;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text == "/quit" {
            break;
        }
        let ex = rt.block_on(store.post_message(&session.id, text.to_string()))?;
        writeln!(out, "bot: {}", ex.reply).map_err(io_err)?;
        if show {
            writeln!(out, "  perception: you {:.3}, bot {:.3}", ex.rows[0].bot_score, ex.rows[1].bot_score).map_err(io_err)?;
        }
    }
    Ok(())
}

fn serve(cfg: &FileConfig, dir: Option<&Path>, a: Serve) -> Result<(), ServiceError> {
    let host = cfg.pick(a.host, "host", "127.0.0.1".to_string())?;
    let port = cfg.pick(a.port, "port", 8080u16)?;
    let log_dir = cfg.maybe(a.log_dir, "log_dir")?;
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let engine = Arc::new(engine(cfg, dir, a.models)?);
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| ServiceError::Invalid(format!("address {host}:{port}: {e}")))?;
    let rt = tokio::runtime::Runtime::new().map_err(io_err)?;
    rt.block_on(async move {
        let store = Arc::new(SessionStore::new(engine, log_dir, seed)?);
        let restored = store.restore().await?;
        if restored > 0 {
            log::info!("restored {restored} sessions");
        }
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(io_err)?;
        log::info!("listening on {addr}");
        axum::serve(listener, router(store))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(io_err)
    })
}
