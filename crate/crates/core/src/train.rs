//! Minibatch training with AdamW and resumable checkpoints.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{adamw_step, checkpoint, AdamWConfig, AdamWState, Tape};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::{joint_loss_on, LossBreakdown, LossOptions};
use crate::model::{ModelConfig, ModelInput, Qeot};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::triple::Triple;

const STEP_RECORD: &str = "train.step";
const M_PREFIX: &str = "adamw.m/";
const V_PREFIX: &str = "adamw.v/";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds the batch order; parameter init is seeded by the model config.
    pub seed: u64,
    pub adam: AdamWConfig,
    pub loss: LossOptions,
    /// Train on only the first `Q` gold triples of samples with more than `Q`.
    pub truncate_gold: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            seed: 0,
            adam: AdamWConfig::default(),
            loss: LossOptions::default(),
            truncate_gold: false,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub ent: f64,
    pub rel: f64,
    pub l1: f64,
    pub giou: f64,
    pub lr: f64,
}

impl StepLog {
    fn mean(step: usize, lr: f64, losses: &[LossBreakdown]) -> Self {
        let n = losses.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| losses.iter().map(f).sum::<f64>() / n;
        Self {
            step,
            total: avg(|b| b.total),
            ent: avg(|b| b.ent),
            rel: avg(|b| b.rel),
            l1: avg(|b| b.l1),
            giou: avg(|b| b.giou),
            lr,
        }
    }
}

/// Sample indices for a 0-based `step`: consecutive slots of an epoch-wise
/// shuffled order, a pure function of `(seed, step)`.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut perms: HashMap<usize, Vec<usize>> = HashMap::new();
    (step * batch..(step + 1) * batch)
        .map(|slot| {
            let epoch = slot / n;
            let perm = perms.entry(epoch).or_insert_with(|| {
                let mut p: Vec<usize> = (0..n).collect();
                SplitMix64::substream(seed, &format!("epoch.{epoch}")).shuffle(&mut p);
                p
            });
            perm[slot % n]
        })
        .collect()
}

fn targets(sample: &Sample, queries: usize, truncate: bool) -> &[Triple] {
    if truncate && sample.gold.len() > queries {
        &sample.gold[..queries]
    } else {
        &sample.gold
    }
}

/// Forward, loss and backward for one sample; gradients are added to the store scaled by `scale`.
pub fn accumulate_sample(model: &mut Qeot, sample: &Sample, opts: &LossOptions, truncate: bool, scale: f64) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let input = ModelInput {
        tokens: &sample.tokens,
        grid: &sample.grid,
    };
    let vars = model.forward_on(&mut tape, input)?;
    let gold = targets(sample, model.config.queries, truncate);
    let (root, breakdown) = joint_loss_on(&mut tape, &vars, gold, *opts).map_err(|e| match e {
        Error::NonFiniteLoss(_) => Error::NonFiniteLoss(sample.id.clone()),
        e => e,
    })?;
    let grads = tape.backward(root)?;
    grads.accumulate(&tape, &mut model.params, scale);
    Ok(breakdown)
}

/// One optimizer step on a batch; the batch loss is the mean of the sample losses.
pub fn train_step(
    model: &mut Qeot,
    batch: &[&Sample],
    opts: &LossOptions,
    state: &mut AdamWState,
    adam: &AdamWConfig,
    truncate: bool,
) -> Result<Vec<LossBreakdown>> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    model.params.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let losses = batch
        .iter()
        .map(|s| accumulate_sample(model, s, opts, truncate, scale))
        .collect::<Result<Vec<_>>>()?;
    adamw_step(&mut model.params, state, adam)?;
    Ok(losses)
}

pub struct Trainer {
    pub model: Qeot,
    pub optim: AdamWState,
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Qeot, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        config.loss.weights.validate()?;
        let optim = AdamWState::new(&model.params);
        Ok(Self {
            model,
            optim,
            config,
            step: 0,
        })
    }

    /// Runs until `config.steps` steps are complete, calling `on_step` after each.
    pub fn run(&mut self, samples: &[Sample], mut on_step: impl FnMut(&Trainer, &StepLog) -> Result<()>) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        while self.step < self.config.steps {
            let log = self.step_once(samples)?;
            on_step(self, &log)?;
        }
        Ok(())
    }

    pub fn step_once(&mut self, samples: &[Sample]) -> Result<StepLog> {
        let cfg = self.config;
        let idx = batch_indices(cfg.seed, self.step, cfg.batch_size, samples.len());
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let losses = train_step(&mut self.model, &batch, &cfg.loss, &mut self.optim, &cfg.adam, cfg.truncate_gold)
            .map_err(|e| match e {
                Error::NonFiniteGrad(p) => Error::NonFiniteGrad(format!("{p} at step {}", self.step + 1)),
                e => e,
            })?;
        self.step += 1;
        Ok(StepLog::mean(self.step, cfg.adam.lr, &losses))
    }

    /// Parameters, optimizer moments and step count as named records.
    pub fn records(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (i, p) in self.model.params.iter().enumerate() {
            let shape = p.value.shape();
            out.push((format!("{M_PREFIX}{}", p.name), Tensor::new(shape.to_vec(), self.optim.m[i].clone()).expect("moment shape")));
            out.push((format!("{V_PREFIX}{}", p.name), Tensor::new(shape.to_vec(), self.optim.v[i].clone()).expect("moment shape")));
        }
        out.push((STEP_RECORD.into(), Tensor::scalar(self.step as f64)));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.records())
    }

    /// Rebuilds a trainer from checkpoint records; missing optimizer records start from zero.
    pub fn from_records(model_cfg: ModelConfig, config: TrainConfig, records: Vec<(String, Tensor)>) -> Result<Self> {
        let model = Qeot::new(model_cfg)?;
        let mut t = Trainer::new(model, config)?;
        t.load_records(records)?;
        Ok(t)
    }

    pub fn resume(model_cfg: ModelConfig, config: TrainConfig, path: &Path) -> Result<Self> {
        Self::from_records(model_cfg, config, checkpoint::read(path)?)
    }

    fn load_records(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (name, value) in records {
            if name == STEP_RECORD {
                self.step = value.item() as usize;
                self.optim.step = self.step as u64;
            } else if let Some(p) = name.strip_prefix(M_PREFIX) {
                let i = self.moment_slot(p, &value)?;
                self.optim.m[i] = value.into_data();
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                let i = self.moment_slot(p, &value)?;
                self.optim.v[i] = value.into_data();
            } else {
                self.model.params.set(&name, value)?;
                seen.insert(name);
            }
        }
        if let Some(p) = self.model.params.iter().find(|p| !seen.contains(&p.name)) {
            return Err(Error::Checkpoint(format!("parameter `{}` missing from checkpoint", p.name)));
        }
        Ok(())
    }

    fn moment_slot(&self, name: &str, value: &Tensor) -> Result<usize> {
        let id = self
            .model
            .params
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`")))?;
        if self.model.params.value(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!("optimizer state shape mismatch for `{name}`")));
        }
        Ok(self.model.params.ids().position(|i| i == id).expect("id from store"))
    }
}

/// Loads parameters only, for evaluation and inspection.
pub fn load_model(model_cfg: ModelConfig, path: &Path) -> Result<Qeot> {
    let mut model = Qeot::new(model_cfg)?;
    let mut seen = std::collections::HashSet::new();
    for (name, value) in checkpoint::read(path)? {
        if name == STEP_RECORD || name.starts_with(M_PREFIX) || name.starts_with(V_PREFIX) {
            continue;
        }
        model.params.set(&name, value)?;
        seen.insert(name);
    }
    if let Some(p) = model.params.iter().find(|p| !seen.contains(&p.name)) {
        return Err(Error::Checkpoint(format!("parameter `{}` missing from checkpoint", p.name)));
    }
    Ok(model)
}
