use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueEpisode, Persona, Speaker, TokenId, Turn};
use crate::error::{Error, Result};
use crate::transmitter::{DecodeParams, EncodedContext, RankMode, Sample, Transmitter};

/// The user speaks as A, the agent as B.
pub const USER: Speaker = Speaker::A;
pub const AGENT: Speaker = Speaker::B;

/// One sampled agent utterance with the state it was sampled from.
#[derive(Clone, Debug)]
pub struct AgentTurn {
    pub context: EncodedContext,
    pub sample: Sample,
    pub text: String,
}

/// A simulated conversation `x₁*, a₁, x₂*, a₂, …, x_N*, a_N`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub user_persona: Persona,
    pub agent_persona: Persona,
    pub utterances: Vec<Turn>,
    pub agent_turns: Vec<AgentTurn>,
}

impl Trajectory {
    pub fn num_turns(&self) -> usize {
        self.agent_turns.len()
    }

    /// `x_1*, …, x_N*`.
    pub fn user_texts(&self) -> Vec<&str> {
        self.texts(USER)
    }

    pub fn agent_texts(&self) -> Vec<&str> {
        self.texts(AGENT)
    }

    fn texts(&self, s: Speaker) -> Vec<&str> {
        self.utterances
            .iter()
            .filter(|t| t.speaker == s)
            .map(|t| t.text.as_str())
            .collect()
    }

    /// Agent utterances that repeat an earlier agent utterance verbatim.
    pub fn repeated_agent_turns(&self) -> usize {
        let texts = self.agent_texts();
        (1..texts.len()).filter(|&i| texts[..i].contains(&texts[i])).count()
    }
}

/// Decoding settings of the two speakers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationParams {
    pub turns: usize,
    pub user_decode: DecodeParams,
    pub agent_decode: DecodeParams,
}

impl Default for SimulationParams {
    fn default() -> Self {
        SimulationParams {
            turns: 3,
            user_decode: DecodeParams::default(),
            agent_decode: DecodeParams::multinomial(),
        }
    }
}

impl SimulationParams {
    pub fn validate(&self) -> Result<()> {
        if self.turns == 0 {
            return Err(Error::InvalidArgument("turns must be positive".into()));
        }
        self.user_decode.validate()?;
        self.agent_decode.validate()
    }
}

/// The first A utterance of an episode with both personas, if any.
pub fn starter(episode: &DialogueEpisode) -> Option<(&Persona, &Persona, &str)> {
    let user = episode.persona_a.as_ref()?;
    let first = episode.turns.iter().find(|t| t.speaker == USER)?;
    Some((user, &episode.persona_b, first.text.as_str()))
}

/// Plays `params.turns` exchanges. The user answers with ranked beam search,
/// the agent samples.
pub fn simulate_dialogue<R: Rng + ?Sized>(
    user: &Transmitter,
    agent: &Transmitter,
    episode: &DialogueEpisode,
    params: &SimulationParams,
    rng: &mut R,
) -> Result<Trajectory> {
    params.validate()?;
    let (user_persona, agent_persona, first) = starter(episode)
        .ok_or_else(|| Error::InvalidArgument("episode lacks a user persona or an A turn".into()))?;
    let mut user_ctx = EncodedContext::new(user.vocab(), user_persona, &[], USER);
    let mut agent_ctx = EncodedContext::new(agent.vocab(), agent_persona, &[], AGENT);
    let mut utterances = Vec::with_capacity(2 * params.turns);
    let mut agent_turns = Vec::with_capacity(params.turns);

    let mut say = |speaker: Speaker, tokens: Vec<TokenId>, text: String, u: &mut EncodedContext, a: &mut EncodedContext| {
        u.push(speaker == USER, tokens.clone());
        a.push(speaker == AGENT, tokens);
        utterances.push(Turn::new(speaker, text));
    };

    let x1 = user.vocab().encode(first);
    say(USER, x1, first.to_string(), &mut user_ctx, &mut agent_ctx);
    for n in 0..params.turns {
        if n > 0 {
            let beam = user.decode_beam_ranked(&user_ctx, &params.user_decode, RankMode::Combined)?;
            let best = beam.best();
            let text = best.text.clone();
            say(USER, best.tokens.clone(), text, &mut user_ctx, &mut agent_ctx);
        }
        let sample = agent.sample_multinomial(&agent_ctx, &params.agent_decode, rng)?;
        let text = agent.vocab().decode(&sample.tokens);
        agent_turns.push(AgentTurn {
            context: agent_ctx.clone(),
            sample: sample.clone(),
            text: text.clone(),
        });
        say(AGENT, sample.tokens, text, &mut user_ctx, &mut agent_ctx);
    }
    Ok(Trajectory {
        user_persona: user_persona.clone(),
        agent_persona: agent_persona.clone(),
        utterances,
        agent_turns,
    })
}
