//! Adam optimizer and the analyzer/predictor training loops.
//!
//! Loops are fully deterministic given (parameters, RNG state, corpus):
//! batches are drawn from a caller-owned seeded RNG whose state is part of
//! every checkpoint, so a resumed run replays the exact batch sequence.

use crate::analyzer::{Analyzer, FeatureSequence, Msmcr};
use crate::config::TrainingConfig;
use crate::corpus::CorpusItem;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::predictor::Predictor;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Name-keyed tensors (parameter gradients, optimizer moments).
pub type NamedTensors = BTreeMap<String, Array2<f64>>;

/// Adaptive-moment gradient descent with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainingConfig) -> Self {
        Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn hyperparams(&self) -> (f64, f64, f64) {
        (self.beta1, self.beta2, self.eps)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Moment tensors for checkpointing, in deterministic name order.
    pub fn state(&self) -> (&NamedTensors, &NamedTensors) {
        (&self.m, &self.v)
    }

    pub fn restore(
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: NamedTensors,
        v: NamedTensors,
    ) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t,
            m,
            v,
        }
    }

    /// One update over the supplied gradients. Parameters without a gradient
    /// this step are untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(String, Array2<f64>)],
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let param = store.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            if m.dim() != g.dim() {
                return Err(Error::contract(format!(
                    "gradient shape changed for {name}"
                )));
            }
            for ((pv, gv), (mv, vv)) in param
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One line of the structured loss log (serialized as JSON lines).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogRecord {
    pub iter: u64,
    pub lr: f64,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

/// Hook invoked at checkpoint boundaries and at the end of a loop.
pub type CheckpointHook<'a, M> = &'a mut dyn FnMut(u64, &M, &Adam, &ChaCha20Rng) -> Result<()>;

/// Seed-derivation tags; every command and test derives its RNG streams
/// from `training.seed` through these, so runs are reproducible across
/// entry points.
pub mod seed_tags {
    pub const ANALYZER_PARAMS: u64 = 1;
    pub const ANALYZER_BATCHES: u64 = 2;
    pub const PREDICTOR_PARAMS: u64 = 3;
    pub const PREDICTOR_BATCHES: u64 = 4;
}

fn draw_batch(rng: &mut ChaCha20Rng, n_items: usize, batch_size: usize) -> Vec<usize> {
    (0..batch_size).map(|_| rng.gen_range(0..n_items)).collect()
}

/// A completed (or resumed-and-completed) analyzer training run.
pub struct AnalyzerRun {
    pub analyzer: Analyzer,
    pub log: Vec<LogRecord>,
    pub opt: Adam,
    pub rng: ChaCha20Rng,
}

/// Fresh analyzer training from an experiment config: parameter and batch
/// RNG streams are derived from `training.seed` via [`seed_tags`].
pub fn run_analyzer_experiment(
    cfg: &crate::config::ExperimentConfig,
    features: &[FeatureSequence],
    checkpoint: Option<CheckpointHook<Analyzer>>,
) -> Result<AnalyzerRun> {
    use crate::vq::mix_seed;
    use rand::SeedableRng;
    let seed = cfg.training.seed;
    let mut analyzer = Analyzer::new(
        cfg.analyzer.clone(),
        mix_seed(seed, seed_tags::ANALYZER_PARAMS),
    )?;
    let mut opt = Adam::from_config(&cfg.training);
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, seed_tags::ANALYZER_BATCHES));
    let log = train_analyzer(&mut analyzer, features, &cfg.training, &mut opt, &mut rng, checkpoint)?;
    Ok(AnalyzerRun {
        analyzer,
        log,
        opt,
        rng,
    })
}

/// A completed predictor training run.
pub struct PredictorRun {
    pub predictor: Predictor,
    pub log: Vec<LogRecord>,
    pub opt: Adam,
    pub rng: ChaCha20Rng,
}

/// Fresh predictor training against a frozen analyzer; teacher
/// representations are extracted here with `analyze`.
pub fn run_predictor_experiment(
    cfg: &crate::config::ExperimentConfig,
    analyzer: &Analyzer,
    items: &[CorpusItem],
    checkpoint: Option<CheckpointHook<Predictor>>,
) -> Result<PredictorRun> {
    use crate::vq::mix_seed;
    use rand::SeedableRng;
    let seed = cfg.training.seed;
    let mut predictor = Predictor::new(
        cfg.predictor.clone(),
        analyzer,
        mix_seed(seed, seed_tags::PREDICTOR_PARAMS),
    )?;
    let teachers = items
        .iter()
        .map(|item| analyzer.analyze(&item.features))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::from_config(&cfg.training);
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, seed_tags::PREDICTOR_BATCHES));
    let log = train_predictor(
        &mut predictor,
        items,
        &teachers,
        &cfg.training,
        &mut opt,
        &mut rng,
        checkpoint,
    )?;
    Ok(PredictorRun {
        predictor,
        log,
        opt,
        rng,
    })
}

/// Runs the analyzer loop from its current iteration up to
/// `cfg.analyzer_iters`. Returns one log record per iteration.
pub fn train_analyzer(
    analyzer: &mut Analyzer,
    features: &[FeatureSequence],
    cfg: &TrainingConfig,
    opt: &mut Adam,
    rng: &mut ChaCha20Rng,
    checkpoint: Option<CheckpointHook<Analyzer>>,
) -> Result<Vec<LogRecord>> {
    if features.is_empty() {
        return Err(Error::input("empty training corpus"));
    }
    let total_iters = cfg.analyzer_iters as u64;
    let mut log = Vec::new();
    let mut hook = checkpoint;
    while analyzer.iteration() < total_iters {
        let iter = analyzer.iteration();
        let lr = cfg.learning_rate(iter as usize, cfg.analyzer_iters);
        let idx = draw_batch(rng, features.len(), cfg.batch_size);
        let batch: Vec<FeatureSequence> = idx.iter().map(|i| features[*i].clone()).collect();
        let report = analyzer.train_step(&batch, opt, lr)?;
        let mut terms = BTreeMap::new();
        terms.insert("recon".to_string(), report.recon_mse);
        for (j, v) in report.commit_per_stage.iter().enumerate() {
            terms.insert(format!("commit_{}", j + 1), *v);
        }
        for (j, v) in report.predict_per_stage.iter().enumerate() {
            terms.insert(format!("predict_{}", j + 1), *v);
        }
        log.push(LogRecord {
            iter,
            lr,
            total: report.total,
            terms,
        });
        let done = analyzer.iteration();
        if let Some(hook) = hook.as_mut() {
            if done.is_multiple_of(cfg.checkpoint_every as u64) || done == total_iters {
                hook(done, analyzer, opt, rng)?;
            }
        }
    }
    Ok(log)
}

/// Runs the predictor loop against precomputed teacher representations
/// (aligned with `items`).
pub fn train_predictor(
    predictor: &mut Predictor,
    items: &[CorpusItem],
    teachers: &[Msmcr],
    cfg: &TrainingConfig,
    opt: &mut Adam,
    rng: &mut ChaCha20Rng,
    checkpoint: Option<CheckpointHook<Predictor>>,
) -> Result<Vec<LogRecord>> {
    if items.is_empty() {
        return Err(Error::input("empty training corpus"));
    }
    if items.len() != teachers.len() {
        return Err(Error::contract("corpus/teacher length mismatch"));
    }
    let total_iters = cfg.predictor_iters as u64;
    let mut log = Vec::new();
    let mut hook = checkpoint;
    while predictor.iteration() < total_iters {
        let iter = predictor.iteration();
        let lr = cfg.learning_rate(iter as usize, cfg.predictor_iters);
        let idx = draw_batch(rng, items.len(), cfg.batch_size);
        let batch: Vec<(&CorpusItem, &Msmcr)> =
            idx.iter().map(|i| (&items[*i], &teachers[*i])).collect();
        let report = predictor.train_step(&batch, opt, lr)?;
        let mut terms = BTreeMap::new();
        terms.insert("mse".to_string(), report.mse);
        terms.insert("triplet".to_string(), report.triplet);
        terms.insert("duration".to_string(), report.duration);
        log.push(LogRecord {
            iter,
            lr,
            total: report.total,
            terms,
        });
        let done = predictor.iteration();
        if let Some(hook) = hook.as_mut() {
            if done.is_multiple_of(cfg.checkpoint_every as u64) || done == total_iters {
                hook(done, predictor, opt, rng)?;
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn adam_zero_lr_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.create("p", 2, 2, Init::XavierUniform, 1);
        let before = store.get("p").unwrap().clone();
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        let g = Array2::from_elem((2, 2), 0.5);
        opt.step(&mut store, &[("p".to_string(), g)], 0.0).unwrap();
        assert_eq!(store.get("p").unwrap(), &before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_in_gradient_direction() {
        let mut store = ParamStore::new();
        store.create("p", 1, 2, Init::Zeros, 1);
        let mut opt = Adam::new(0.9, 0.999, 0.0);
        let g = ndarray::array![[0.3, -0.7]];
        opt.step(&mut store, &[("p".to_string(), g)], 0.01).unwrap();
        let p = store.get("p").unwrap();
        // with bias correction the first update is exactly lr * sign(g)
        assert!((p[[0, 0]] + 0.01).abs() < 1e-12);
        assert!((p[[0, 1]] - 0.01).abs() < 1e-12);
    }
}
