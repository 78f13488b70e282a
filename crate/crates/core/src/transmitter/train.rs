use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layout::TokenLayout;
use super::model::Transmitter;
use crate::corpus::TrainingInstance;
use crate::error::{Error, Result};
use crate::neural::{Adam, Gradients, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            optimizer: OptimizerConfig::supervised(),
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Gold and distractor layouts of one instance, both closed by `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedInstance {
    pub gold: TokenLayout,
    pub distractor: TokenLayout,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mle: f64,
    pub nup: f64,
    pub calibration: f64,
}

impl EpochLog {
    pub fn joint(&self) -> f64 {
        self.mle + self.nup
    }
}

pub fn prepare_instances(t: &Transmitter, instances: &[TrainingInstance]) -> Result<Vec<PreparedInstance>> {
    instances
        .iter()
        .map(|inst| {
            let gold = t.build_input(&inst.persona, &inst.history, inst.responder, Some(&inst.gold), true)?;
            let distractor = t.build_input(&inst.persona, &inst.history, inst.responder, Some(&inst.distractor), true)?;
            Ok(PreparedInstance { gold, distractor })
        })
        .collect()
}

/// Joint MLE + next-utterance training with Adam over shuffled mini-batches.
/// `on_epoch` receives each epoch's mean losses.
pub fn train_supervised(
    t: &mut Transmitter,
    data: &[PreparedInstance],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training instances".into()));
    }
    let mut adam = Adam::new(config.optimizer.clone(), t.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut log = EpochLog {
            epoch,
            ..Default::default()
        };
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(t.params());
            for &i in batch {
                let (loss, g) = t.joint_loss_with_grad(&data[i].gold, &data[i].distractor)?;
                grads.accumulate(&g);
                log.mle += loss.mle;
                log.nup += loss.nup;
                log.calibration += loss.calibration;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(t.params_mut(), &grads)?;
            log.steps += 1;
        }
        let n = data.len() as f64;
        log.mle /= n;
        log.nup /= n;
        log.calibration /= n;
        log::info!(
            "transmitter epoch {epoch}: mle {:.4} nup {:.4} calibration {:.4}",
            log.mle,
            log.nup,
            log.calibration
        );
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Token-weighted mean NLL over the gold responses.
pub fn eval_mle(t: &Transmitter, data: &[PreparedInstance]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for inst in data {
        let nlls = t.token_nlls(&inst.gold)?;
        total += nlls.iter().sum::<f64>();
        count += nlls.len();
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no tokens to evaluate".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic, make_instances, Responders};
    use crate::neural::{grad_check, SequenceModelConfig};

    fn setup(n_inst: usize) -> (Transmitter, Vec<PreparedInstance>) {
        let eps = generate_synthetic(6, 2, 4).unwrap();
        let vocab = build_vocab(&eps, 1).unwrap();
        let t = Transmitter::new(vocab.clone(), SequenceModelConfig::tiny(vocab.len(), true), 9).unwrap();
        let mut inst = make_instances(&eps, Responders::Both, 1).unwrap();
        inst.truncate(n_inst);
        let data = prepare_instances(&t, &inst).unwrap();
        (t, data)
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let (t, data) = setup(1);
        let inst = data[0].clone();
        let report = grad_check(
            |p| {
                let tp = t.with_params(p.clone())?;
                let (l, g) = tp.joint_loss_with_grad(&inst.gold, &inst.distractor)?;
                Ok((l.mle + l.nup + l.calibration, g))
            },
            t.params(),
            24,
            1e-5,
            3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn calibration_only_moves_null_bias() {
        let (mut t, data) = setup(1);
        let d = t.model().config().model_dim;
        t.set_nup_head(ndarray::Array2::from_elem((d, 1), 0.05), 0.1, 0.7).unwrap();
        let (_, joint) = t.joint_loss_with_grad(&data[0].gold, &data[0].distractor).unwrap();
        let (_, mle) = t.mle_loss_with_grad(&data[0].gold).unwrap();
        let (_, nup) = t.nup_loss_with_grad(&data[0].gold, &data[0].distractor).unwrap();
        let null = t.params().id("nup.null").unwrap();
        for (id, name, _) in t.params().iter() {
            let sum = mle.get(id) + nup.get(id);
            let diff = (joint.get(id) - &sum).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if id == null {
                assert!(joint.get(id)[[0, 0]].abs() > 0.0);
            } else {
                assert!(diff < 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn early_epochs_reduce_loss() {
        let (mut t, data) = setup(8);
        let cfg = TrainConfig {
            epochs: 3,
            optimizer: OptimizerConfig::with_lr(3e-3),
            ..Default::default()
        };
        let mut seen = 0;
        let logs = train_supervised(&mut t, &data, &cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, 3);
        assert!(logs[2].joint() < logs[0].joint(), "{logs:?}");
    }

    #[test]
    fn rejects_empty_corpus() {
        let (mut t, _) = setup(1);
        assert!(train_supervised(&mut t, &[], &TrainConfig::default(), |_| {}).is_err());
    }
}
