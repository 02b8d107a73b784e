//! Mini-batch training loop shared by the diffusion policy and the
//! baselines.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use eqdiff_tensor::{cosine_lr, Adam, AdamConfig, Graph, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LrDecay, OptimizerConfig};
use crate::diffusion::{training_loss_graph, JointBatch};
use crate::error::{Error, Result};
use crate::network::PolicyNetwork;
use crate::schedule::NoiseSchedule;
use crate::types::StateActionPair;

const VALIDATION_STREAM: u64 = 0x7661_6c69_6461_7465;

/// A model with a differentiable per-batch objective.
pub trait Trainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn batch_loss(&self, g: &mut Graph, batch: &JointBatch, rng: &mut ChaCha8Rng) -> Var;
}

impl Trainable for PolicyNetwork {
    fn params(&self) -> &ParamStore {
        PolicyNetwork::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        PolicyNetwork::params_mut(self)
    }

    fn batch_loss(&self, g: &mut Graph, batch: &JointBatch, rng: &mut ChaCha8Rng) -> Var {
        let sched = NoiseSchedule::from_config(self.config()).expect("validated config");
        training_loss_graph(g, self, batch, &sched, rng)
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub adam: Adam,
    pub best_val: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(opt: &OptimizerConfig, params: &ParamStore, seed: u64) -> Self {
        let config = AdamConfig {
            beta1: opt.betas[0] as f32,
            beta2: opt.betas[1] as f32,
            eps: opt.eps as f32,
        };
        Self {
            seed,
            epoch: 0,
            adam: Adam::new(config, params),
            best_val: f64::INFINITY,
            best_epoch: 0,
            log: Vec::new(),
        }
    }
}

/// Deterministic shuffle-and-split; `fraction` of the pairs (at least one
/// when there are two or more) go to validation.
pub fn split_train_val(pairs: &[StateActionPair], fraction: f64, seed: u64) -> (Vec<StateActionPair>, Vec<StateActionPair>) {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (pairs.len() as f64 * fraction).round() as usize;
    if n_val == 0 && fraction > 0.0 && pairs.len() >= 2 {
        n_val = 1;
    }
    let val = idx[..n_val].iter().map(|&i| pairs[i].clone()).collect();
    let train = idx[n_val..].iter().map(|&i| pairs[i].clone()).collect();
    (train, val)
}

/// Runs epochs and tracks the best-validation weights.
pub struct Trainer<M> {
    pub model: M,
    pub state: TrainState,
    pub optimizer: OptimizerConfig,
    /// Weights at the best validation loss so far.
    pub best: Option<ParamStore>,
    /// Appends one JSON record per epoch when set.
    pub log_path: Option<PathBuf>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

impl<M: Trainable> Trainer<M> {
    pub fn new(model: M, optimizer: OptimizerConfig, seed: u64) -> Self {
        let state = TrainState::new(&optimizer, model.params(), seed);
        Self {
            model,
            state,
            optimizer,
            best: None,
            log_path: None,
        }
    }

    fn lr(&self, epoch: usize) -> f64 {
        let o = &self.optimizer;
        match o.lr_decay {
            LrDecay::Constant => o.lr,
            LrDecay::Cosine => cosine_lr(o.lr as f32, o.min_lr as f32, epoch, o.epochs) as f64,
        }
    }

    /// Mean loss over `pairs` with fixed draws, so values are comparable
    /// across epochs.
    pub fn evaluate(&self, pairs: &[StateActionPair]) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed);
        rng.set_stream(VALIDATION_STREAM);
        let mut total = 0.0;
        for (i, chunk) in pairs.chunks(self.optimizer.batch_size.max(1)).enumerate() {
            let batch = JointBatch::from_pairs(chunk)?;
            let mut g = Graph::inference(self.model.params());
            let loss = self.model.batch_loss(&mut g, &batch, &mut rng);
            let v = g.value(loss).data()[0] as f64;
            if !v.is_finite() {
                return Err(Error::Numeric {
                    what: "validation loss".into(),
                    index: i,
                });
            }
            total += v * chunk.len() as f64;
        }
        Ok(total / pairs.len().max(1) as f64)
    }

    /// One pass over `train`. Returns the mean batch loss.
    fn train_epoch(&mut self, train: &[StateActionPair]) -> Result<f64> {
        let epoch = self.state.epoch;
        let mut rng = epoch_rng(self.state.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let lr = self.lr(epoch) as f32;
        let bs = self.optimizer.batch_size.max(1);
        let mut total = 0.0;
        let mut batches = 0;
        for (i, idx) in order.chunks(bs).enumerate() {
            let pairs: Vec<StateActionPair> = idx.iter().map(|&k| train[k].clone()).collect();
            let batch = JointBatch::from_pairs(&pairs)?;
            let mut grads = {
                let mut g = Graph::new(self.model.params());
                let loss = self.model.batch_loss(&mut g, &batch, &mut rng);
                let v = g.value(loss).data()[0] as f64;
                if !v.is_finite() {
                    return Err(Error::Numeric {
                        what: format!("training loss in epoch {}", epoch + 1),
                        index: i,
                    });
                }
                total += v;
                batches += 1;
                g.backward(loss)
            };
            if !grads.is_finite() {
                return Err(Error::Numeric {
                    what: format!("gradient in epoch {}", epoch + 1),
                    index: i,
                });
            }
            if self.optimizer.grad_clip > 0.0 {
                grads.clip_global_norm(self.optimizer.grad_clip);
            }
            self.state.adam.step(self.model.params_mut(), &grads, lr);
        }
        Ok(total / batches.max(1) as f64)
    }

    /// Trains until `until_epoch` epochs have completed. Validation falls
    /// back to the training pairs when `val` is empty.
    pub fn run(
        &mut self,
        train: &[StateActionPair],
        val: &[StateActionPair],
        until_epoch: usize,
        mut callback: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let val = if val.is_empty() { train } else { val };
        while self.state.epoch < until_epoch {
            let lr = self.lr(self.state.epoch);
            let train_loss = self.train_epoch(train)?;
            self.state.epoch += 1;
            let val_loss = self.evaluate(val)?;
            let rec = EpochRecord {
                epoch: self.state.epoch,
                train_loss,
                val_loss,
                lr,
            };
            if val_loss < self.state.best_val {
                self.state.best_val = val_loss;
                self.state.best_epoch = rec.epoch;
                self.best = Some(self.model.params().clone());
            }
            if let Some(path) = &self.log_path {
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                writeln!(f, "{}", serde_json::to_string(&rec).expect("plain record")).map_err(|e| Error::io(path, e))?;
            }
            self.state.log.push(rec);
            callback(&rec);
        }
        Ok(())
    }

    /// The model with its best-validation weights (the current ones if no
    /// epoch has run yet).
    pub fn best_model(&self) -> M
    where
        M: Clone,
    {
        let mut m = self.model.clone();
        if let Some(best) = &self.best {
            *m.params_mut() = best.clone();
        }
        m
    }
}

/// Trains a diffusion policy for `cfg.optimizer.epochs` epochs.
pub fn train_policy(
    net: PolicyNetwork,
    train: &[StateActionPair],
    val: &[StateActionPair],
    seed: u64,
    callback: impl FnMut(&EpochRecord),
) -> Result<Trainer<PolicyNetwork>> {
    let opt = net.config().optimizer.clone();
    let mut trainer = Trainer::new(net, opt.clone(), seed);
    trainer.run(train, val, opt.epochs, callback)?;
    Ok(trainer)
}
