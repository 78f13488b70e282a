use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reinforce::reinforce_step;
use super::rewards::{
    batch_advantages, reward_coherence, reward_language_style, reward_persona_perception, total_reward,
    RewardWeights, TurnReward,
};
use super::trajectory::{simulate_dialogue, starter, SimulationParams, Trajectory};
use crate::corpus::{DialogueEpisode, Persona};
use crate::error::{Error, Result};
use crate::neural::{Adam, OptimizerConfig};
use crate::receiver::Receiver;
use crate::text::tokenize;
use crate::transmitter::Transmitter;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfPlayConfig {
    pub num_dialogues: usize,
    pub simulation: SimulationParams,
    pub gamma: f64,
    pub weights: RewardWeights,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SelfPlayConfig {
    fn default() -> Self {
        SelfPlayConfig {
            num_dialogues: 2000,
            simulation: SimulationParams::default(),
            gamma: 0.5,
            weights: RewardWeights::default(),
            optimizer: OptimizerConfig::self_play(),
            batch_size: 8,
            seed: 0,
        }
    }
}

impl SelfPlayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.batch_size == 0 || self.num_dialogues == 0 {
            return Err(Error::InvalidArgument("batch_size and num_dialogues must be positive".into()));
        }
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.simulation.validate()
    }
}

/// Frozen models that score a trajectory.
#[derive(Clone, Copy)]
pub struct RewardModels<'a> {
    /// Supervised transmitter: language model for r1, classifier for r2.
    pub reference: &'a Transmitter,
    pub receiver: &'a Receiver,
}

/// Rewards of every agent turn plus the perception scores behind r3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub turns: Vec<TurnReward>,
    pub agent_perception: Vec<f64>,
    pub user_perception: Vec<f64>,
}

/// Perception score at the receiver's inference temperature; 0 for an
/// utterance with no tokens.
pub fn perception(receiver: &Receiver, utterance: &str, persona: &Persona) -> Result<f64> {
    if tokenize(utterance).is_empty() {
        return Ok(0.0);
    }
    receiver.perception_score(utterance, persona, receiver.inference_tau())
}

pub fn compute_rewards(
    traj: &Trajectory,
    models: RewardModels<'_>,
    gamma: f64,
    weights: &RewardWeights,
) -> Result<RewardBreakdown> {
    let agent_perception = traj
        .agent_texts()
        .iter()
        .map(|u| perception(models.receiver, u, &traj.agent_persona))
        .collect::<Result<Vec<_>>>()?;
    let user_perception = traj
        .user_texts()
        .iter()
        .map(|u| perception(models.receiver, u, &traj.user_persona))
        .collect::<Result<Vec<_>>>()?;
    let mut turns = Vec::with_capacity(traj.num_turns());
    for (k, turn) in traj.agent_turns.iter().enumerate() {
        let r1 = reward_language_style(models.reference, &turn.sample.scored_tokens())?;
        let r2 = reward_coherence(models.reference, &turn.context, &turn.sample.tokens)?;
        let r3 = reward_persona_perception(&agent_perception, &user_perception, k + 1, gamma)?;
        turns.push(TurnReward {
            r1,
            r2,
            r3,
            total: total_reward(r1, r2, r3, weights),
        });
    }
    Ok(RewardBreakdown {
        turns,
        agent_perception,
        user_perception,
    })
}

/// Mean rewards of one mini-batch; one JSONL record of the reward log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub batch: usize,
    pub dialogues: usize,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub reward: f64,
    /// Fraction of agent turns repeating an earlier agent turn verbatim.
    pub cycle_rate: f64,
}

impl BatchLog {
    pub fn write_jsonl<W: Write>(&self, out: &mut W) -> Result<()> {
        serde_json::to_writer(&mut *out, self)?;
        out.write_all(b"\n").map_err(|e| Error::io("reward log", e))
    }
}

/// Self-play fine-tuning of `agent` against the frozen `user`.
///
/// Each mini-batch draws episodes for its starters, simulates them with the
/// current agent, and takes one REINFORCE step with the batch-mean baseline
/// over all agent turns.
pub fn finetune(
    user: &Transmitter,
    agent: &mut Transmitter,
    models: RewardModels<'_>,
    episodes: &[DialogueEpisode],
    cfg: &SelfPlayConfig,
    mut on_batch: impl FnMut(&BatchLog),
) -> Result<Vec<BatchLog>> {
    cfg.validate()?;
    let usable: Vec<&DialogueEpisode> = episodes.iter().filter(|e| starter(e).is_some()).collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument("no episode has a user persona and an A turn".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.optimizer.clone(), agent.params())?;
    let mut logs = Vec::new();
    let mut done = 0;
    while done < cfg.num_dialogues {
        let size = cfg.batch_size.min(cfg.num_dialogues - done);
        let mut actions = Vec::new();
        let mut stored = Vec::new();
        let mut rewards = Vec::new();
        let mut sums = [0.0; 3];
        let mut repeats = 0;
        for _ in 0..size {
            let episode = usable.choose(&mut rng).expect("non-empty");
            let traj = simulate_dialogue(user, agent, episode, &cfg.simulation, &mut rng)?;
            let breakdown = compute_rewards(&traj, models, cfg.gamma, &cfg.weights)?;
            repeats += traj.repeated_agent_turns();
            for (turn, r) in traj.agent_turns.iter().zip(&breakdown.turns) {
                actions.push(agent.sample_layout(&turn.context, &turn.sample)?);
                stored.push(turn.sample.logprobs.clone());
                rewards.push(r.total);
                sums[0] += r.r1;
                sums[1] += r.r2;
                sums[2] += r.r3;
            }
        }
        let advantages = batch_advantages(&rewards)?;
        let weighted: Vec<_> = actions.into_iter().zip(advantages).collect();
        reinforce_step(agent, &mut adam, &weighted, &stored)?;

        let n = rewards.len() as f64;
        let log = BatchLog {
            batch: logs.len(),
            dialogues: size,
            r1: sums[0] / n,
            r2: sums[1] / n,
            r3: sums[2] / n,
            reward: rewards.iter().sum::<f64>() / n,
            cycle_rate: repeats as f64 / n,
        };
        log::info!(
            "self-play batch {}: R1 {:.4} R2 {:.4} R3 {:.4} R {:.4} cycles {:.3}",
            log.batch,
            log.r1,
            log.r2,
            log.r3,
            log.reward,
            log.cycle_rate
        );
        on_batch(&log);
        logs.push(log);
        done += size;
    }
    Ok(logs)
}
