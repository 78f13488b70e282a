//! Self-play fine-tuning of the agent against a frozen user.

mod finetune;
mod reinforce;
mod rewards;
mod trajectory;

pub use finetune::{compute_rewards, finetune, perception, BatchLog, RewardBreakdown, RewardModels, SelfPlayConfig};
pub use reinforce::{policy_gradient, reinforce_step, Policy, SoftmaxBandit, LOGPROB_TOLERANCE};
pub use rewards::{
    batch_advantages, reward_coherence, reward_language_style, reward_persona_perception, total_reward,
    RewardWeights, TurnReward,
};
pub use trajectory::{simulate_dialogue, starter, AgentTurn, SimulationParams, Trajectory, AGENT, USER};
