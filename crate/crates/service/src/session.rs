//! Chat sessions, their perception rows, and the append-only session log.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

use persona_core::corpus::{Persona, Speaker, Turn};
use persona_core::text::tokenize;
use persona_core::transmitter::{DecodeParams, EncodedContext, RankMode, Transmitter};
use persona_core::receiver::Receiver;

use crate::error::ServiceError;

/// The human speaks as A, the bot as B.
pub const HUMAN: Speaker = Speaker::A;
pub const BOT: Speaker = Speaker::B;

/// Models shared read-only by every session.
pub struct Engine {
    pub transmitter: Transmitter,
    pub receiver: Receiver,
    /// Personas a session may draw its bot persona from.
    pub personas: Vec<Persona>,
    pub decode: DecodeParams,
}

impl Engine {
    pub fn new(transmitter: Transmitter, receiver: Receiver, personas: Vec<Persona>) -> Self {
        Engine {
            transmitter,
            receiver,
            personas,
            decode: DecodeParams::default(),
        }
    }

    /// Highest-ranked non-empty beam candidate for the bot's next turn.
    pub fn reply(&self, persona: &Persona, history: &[Turn]) -> Result<String, ServiceError> {
        let ctx = EncodedContext::new(self.transmitter.vocab(), persona, history, BOT);
        let beam = self.transmitter.decode_beam_ranked(&ctx, &self.decode, RankMode::Combined)?;
        let mut order: Vec<usize> = (0..beam.candidates.len()).collect();
        let alpha = self.decode.alpha;
        order.sort_by(|&a, &b| {
            let (sa, sb) = (
                beam.candidates[a].rank_score(alpha, RankMode::Combined),
                beam.candidates[b].rank_score(alpha, RankMode::Combined),
            );
            sb.total_cmp(&sa)
        });
        order
            .into_iter()
            .map(|i| &beam.candidates[i].text)
            .find(|t| !tokenize(t).is_empty())
            .cloned()
            .ok_or_else(|| ServiceError::Generation("every beam candidate was empty".into()))
    }

    /// Relevance row `h·Wᵀ/√d` and perception score of one utterance.
    pub fn perceive(&self, utterance: &str, persona: &Persona) -> Result<(Vec<f64>, f64), ServiceError> {
        let tau = self.receiver.inference_tau();
        let (scores, rows) = self.receiver.perception_rows(&[utterance], persona, tau)?;
        Ok((rows.row(0).to_vec(), scores[0]))
    }
}

/// Perception of one utterance against the bot persona, and against the
/// human persona when the session has one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionRow {
    pub speaker: Speaker,
    pub text: String,
    pub bot_relevance: Vec<f64>,
    pub bot_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_relevance: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub bot_persona: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_persona: Option<Vec<String>>,
    pub history: Vec<Turn>,
    pub perception: Vec<PerceptionRow>,
    /// Milliseconds since the Unix epoch.
    pub created: u64,
}

impl Session {
    fn persona(profiles: &[String]) -> Result<Persona, ServiceError> {
        Persona::new(profiles.iter().cloned()).map_err(|e| ServiceError::Invalid(e.to_string()))
    }

    fn row(&self, engine: &Engine, speaker: Speaker, text: &str) -> Result<PerceptionRow, ServiceError> {
        let (bot_relevance, bot_score) = engine.perceive(text, &Self::persona(&self.bot_persona)?)?;
        let human = match &self.human_persona {
            Some(p) => Some(engine.perceive(text, &Self::persona(p)?)?),
            None => None,
        };
        Ok(PerceptionRow {
            speaker,
            text: text.to_string(),
            bot_relevance,
            bot_score,
            human_relevance: human.as_ref().map(|h| h.0.clone()),
            human_score: human.map(|h| h.1),
        })
    }

    /// Appends the human turn and the bot's reply, with their perception rows.
    pub fn exchange(&mut self, engine: &Engine, text: &str) -> Result<Exchange, ServiceError> {
        let text = text.trim();
        if tokenize(text).is_empty() {
            return Err(ServiceError::Invalid("message text is empty".into()));
        }
        let persona = Self::persona(&self.bot_persona)?;
        let mut history = self.history.clone();
        history.push(Turn::new(HUMAN, text));
        let reply = engine.reply(&persona, &history)?;
        let rows = vec![self.row(engine, HUMAN, text)?, self.row(engine, BOT, &reply)?];
        let ex = Exchange {
            human: text.to_string(),
            reply,
            rows,
        };
        self.apply(&ex);
        Ok(ex)
    }

    fn apply(&mut self, ex: &Exchange) {
        self.history.push(Turn::new(HUMAN, ex.human.clone()));
        self.history.push(Turn::new(BOT, ex.reply.clone()));
        self.perception.extend(ex.rows.iter().cloned());
    }

    /// Utterance × bot-profile relevance grid.
    pub fn grid(&self) -> PerceptionGrid {
        PerceptionGrid {
            profiles: self.bot_persona.clone(),
            utterances: self.perception.iter().map(|r| r.text.clone()).collect(),
            speakers: self.perception.iter().map(|r| r.speaker).collect(),
            scores: self.perception.iter().map(|r| r.bot_score).collect(),
            grid: self.perception.iter().map(|r| r.bot_relevance.clone()).collect(),
        }
    }
}

/// One human message and the bot's answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub human: String,
    pub reply: String,
    pub rows: Vec<PerceptionRow>,
}

/// Heatmap payload: one row per utterance, one column per bot profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionGrid {
    pub profiles: Vec<String>,
    pub utterances: Vec<String>,
    pub speakers: Vec<Speaker>,
    pub scores: Vec<f64>,
    pub grid: Vec<Vec<f64>>,
}

/// One line of a session log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub ts: u64,
    pub session: String,
    pub event: String,
    pub payload: serde_json::Value,
}

const EV_CREATED: &str = "created";
const EV_EXCHANGE: &str = "exchange";

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Sessions in memory, mirrored to `<log_dir>/<id>.jsonl` when a log
/// directory is configured.
pub struct SessionStore {
    engine: Arc<Engine>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    log_dir: Option<PathBuf>,
    rng: Mutex<ChaCha8Rng>,
}

impl SessionStore {
    pub fn new(engine: Arc<Engine>, log_dir: Option<PathBuf>, seed: u64) -> Result<Self, ServiceError> {
        if let Some(dir) = &log_dir {
            fs::create_dir_all(dir).map_err(|e| ServiceError::Io(format!("{}: {e}", dir.display())))?;
        }
        Ok(SessionStore {
            engine,
            sessions: RwLock::new(HashMap::new()),
            log_dir,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    /// Rebuilds every session found in the log directory.
    pub async fn restore(&self) -> Result<usize, ServiceError> {
        let Some(dir) = &self.log_dir else { return Ok(0) };
        let mut restored = 0;
        let entries = fs::read_dir(dir).map_err(|e| ServiceError::Io(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| ServiceError::Io(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let s = replay(&path)?;
            self.sessions.write().await.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            restored += 1;
        }
        Ok(restored)
    }

    pub async fn create(
        &self,
        bot_persona: Option<Vec<String>>,
        human_persona: Option<Vec<String>>,
    ) -> Result<Session, ServiceError> {
        let bot_persona = match bot_persona {
            Some(p) => {
                Session::persona(&p)?;
                p
            }
            None => {
                let mut rng = self.rng.lock().await;
                let p = self
                    .engine
                    .personas
                    .choose(&mut *rng)
                    .ok_or_else(|| ServiceError::Invalid("no personas available to draw from".into()))?;
                log::info!("drew persona {} for a new session", p.id);
                p.profiles.clone()
            }
        };
        if let Some(h) = &human_persona {
            Session::persona(h)?;
        }
        let session = Session {
            id: uuid::Uuid::new_v4().to_string(),
            bot_persona,
            human_persona,
            history: Vec::new(),
            perception: Vec::new(),
            created: now_ms(),
        };
        self.log(&session.id, EV_CREATED, serde_json::to_value(&session)?)?;
        self.sessions
            .write()
            .await
            .insert(session.id.clone(), Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    async fn handle(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub async fn get(&self, id: &str) -> Result<Session, ServiceError> {
        Ok(self.handle(id).await?.lock().await.clone())
    }

    /// Runs one exchange; the session stays locked while the model works.
    pub async fn post_message(&self, id: &str, text: String) -> Result<Exchange, ServiceError> {
        let handle = self.handle(id).await?;
        let mut guard = handle.lock().await;
        let mut session = guard.clone();
        let engine = self.engine.clone();
        let (session, ex) = tokio::task::spawn_blocking(move || {
            let ex = session.exchange(&engine, &text)?;
            Ok::<_, ServiceError>((session, ex))
        })
        .await
        .map_err(|e| ServiceError::Generation(e.to_string()))??;
        self.log(id, EV_EXCHANGE, serde_json::to_value(&ex)?)?;
        *guard = session;
        Ok(ex)
    }

    fn log(&self, id: &str, event: &str, payload: serde_json::Value) -> Result<(), ServiceError> {
        let Some(dir) = &self.log_dir else { return Ok(()) };
        let ev = LogEvent {
            ts: now_ms(),
            session: id.to_string(),
            event: event.to_string(),
            payload,
        };
        let path = dir.join(format!("{id}.jsonl"));
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))?;
        let mut line = serde_json::to_string(&ev)?;
        line.push('\n');
        f.write_all(line.as_bytes())
            .map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))
    }
}

/// Rebuilds a session from its log.
pub fn replay(path: &Path) -> Result<Session, ServiceError> {
    let f = File::open(path).map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))?;
    let mut session: Option<Session> = None;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| ServiceError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: LogEvent = serde_json::from_str(&line)?;
        match (ev.event.as_str(), session.as_mut()) {
            (EV_CREATED, None) => session = Some(serde_json::from_value(ev.payload)?),
            (EV_EXCHANGE, Some(s)) => s.apply(&serde_json::from_value(ev.payload)?),
            (other, _) => {
                return Err(ServiceError::Invalid(format!(
                    "{}:{}: unexpected '{other}' event",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    session.ok_or_else(|| ServiceError::Invalid(format!("{}: empty session log", path.display())))
}
