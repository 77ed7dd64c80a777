use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, ForwardOptions, Model, ModelConfig};
use crate::tensor::Tape;

use super::corpus::Corpus;
use super::optim::{clip_global_norm, AdamW, Moments, Schedule};
use super::trie::PathTrie;

pub const CHECKPOINT_KIND: &str = "moe-lab-trainer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per step; each holds `seq_len` predictions.
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    #[serde(default = "default_min_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default)]
    pub optimizer: AdamW,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Fraction of `steps` at which the early checkpoint is written.
    #[serde(default = "default_early")]
    pub early_fraction: f64,
    /// Sequences per evaluation pass.
    #[serde(default = "default_eval_rows")]
    pub eval_rows: usize,
    /// Fill the `tokens_per_sec` column. Wall-clock values make the metric
    /// log differ between otherwise identical runs.
    #[serde(default)]
    pub record_throughput: bool,
}

fn default_min_ratio() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    1.0
}
fn default_early() -> f64 {
    0.0125
}
fn default_eval_rows() -> usize {
    16
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            peak_lr: 3e-4,
            warmup: 100,
            min_lr_ratio: default_min_ratio(),
            optimizer: AdamW::default(),
            grad_clip: default_clip(),
            checkpoint_every: 0,
            early_fraction: default_early(),
            eval_rows: default_eval_rows(),
            record_throughput: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("train.peak_lr", "must be a positive number"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::config("train.min_lr_ratio", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.early_fraction) {
            return Err(Error::config("train.early_fraction", "must lie in [0, 1]"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("train.optimizer", "betas must lie in [0, 1)"));
        }
        if o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(Error::config("train.optimizer", "eps must be positive and weight_decay non-negative"));
        }
        if self.eval_rows == 0 {
            return Err(Error::config("train.eval_rows", "must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { peak_lr: self.peak_lr, warmup: self.warmup, total: self.steps, min_ratio: self.min_lr_ratio }
    }

    /// Step after which the early checkpoint is taken (at least 1).
    pub fn early_step(&self) -> usize {
        ((self.steps as f64 * self.early_fraction).ceil() as usize).clamp(1, self.steps)
    }
}

/// What one optimizer step observed.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// 1-based index of the completed update.
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub aux: f64,
    /// Top-k assignment counts per layer and expert.
    pub loads: Vec<Vec<usize>>,
    /// Fraction of tokens whose top-1 path lies in the restriction trie.
    pub compliance: Option<f64>,
    pub tokens: usize,
    pub seconds: f64,
}

impl StepStats {
    /// `max / mean` expert load per layer.
    pub fn load_ratios(&self) -> Vec<f64> {
        self.loads
            .iter()
            .map(|c| {
                let mean = c.iter().sum::<usize>() as f64 / c.len() as f64;
                *c.iter().max().unwrap_or(&0) as f64 / mean
            })
            .collect()
    }
}

/// A model, its optimizer state, and the position in the run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub seed: u64,
    /// Number of completed updates.
    pub step: usize,
    pub restrict: Option<PathTrie>,
    body_moments: Moments<f32>,
    router_moments: Moments<f32>,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = Model::init(model_config, seed)?;
        Ok(Self::with_model(model, config, seed))
    }

    pub fn with_model(model: Model<f32>, config: TrainConfig, seed: u64) -> Self {
        let body_moments = Moments::zeros_like(model.body());
        let router_moments = Moments::zeros_like(model.router().params());
        Self { model, config, seed, step: 0, restrict: None, body_moments, router_moments }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// One update on the batch for the current step.
    pub fn step(&mut self, corpus: &Corpus) -> Result<StepStats> {
        let started = Instant::now();
        let mc = self.model.config().clone();
        let rows = self.config.batch_size;
        let (inputs, targets) = corpus.batch(self.seed, self.step as u64, rows, mc.seq_len)?;
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape)?;
        let opts = ForwardOptions { restrict: self.restrict.as_ref(), dispatch: None };
        let fwd = self.model.forward(&mut tape, &bound, &inputs, rows, mc.seq_len, opts)?;
        let loss = self.model.loss(&mut tape, &fwd, &targets)?;
        let ce = tape.data(loss.ce)[0] as f64;
        let aux = loss.aux.map_or(0.0, |a| tape.data(a)[0] as f64);
        if !ce.is_finite() || !aux.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let loads = (0..mc.n_layers).map(|l| fwd.loads(l, mc.n_experts)).collect();
        let compliance = self.restrict.as_ref().map(|trie| {
            let ok = (0..fwd.n_tokens).filter(|&t| trie.contains(&fwd.path(t))).count();
            ok as f64 / fwd.n_tokens as f64
        });

        let mut grads = tape.backward(loss.total)?;
        let body_vars = bound.body_vars().to_vec();
        let router_vars = bound.router().vars().to_vec();
        drop(bound);
        let mut all: Vec<Option<Vec<f32>>> = body_vars.iter().chain(&router_vars).map(|&v| grads.take(v)).collect();
        clip_global_norm(&mut all, self.config.grad_clip);
        let router_grads = all.split_off(body_vars.len());

        let t = self.step + 1;
        let lr = self.config.schedule().lr_at(t);
        let opt = self.config.optimizer.clone();
        opt.update(self.model.body_mut(), &mut self.body_moments, &all, lr, t as u64);
        opt.update(self.model.router_mut().params_mut(), &mut self.router_moments, &router_grads, lr, t as u64);
        self.model.router_mut().clamp_temperatures();
        self.step = t;
        Ok(StepStats { step: t, lr, ce, aux, loads, compliance, tokens: inputs.len(), seconds: started.elapsed().as_secs_f64() })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.config = json!({
            "kind": CHECKPOINT_KIND,
            "model": self.model.config(),
            "train": self.config,
            "seed": self.seed,
            "step": self.step,
            "restrict": self.restrict.as_ref().map(|t| t.paths()),
        });
        let moments = |prefix: &str, m: &Moments<f32>, store| {
            m.named(store).into_iter().map(move |(n, t)| (format!("{prefix}{n}"), t)).collect::<Vec<_>>()
        };
        ck.arrays.extend(moments("opt.body.", &self.body_moments, self.model.body()));
        ck.arrays.extend(moments("opt.router.", &self.router_moments, self.model.router().params()));
        ck
    }

    /// Restores a trainer; checkpoints holding only a model resume with
    /// fresh optimizer state at step 0.
    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        let model = Model::<f32>::from_checkpoint(&mut ck)?;
        let field = |k: &str| ck.config.get(k).cloned();
        let config: TrainConfig = match field("train") {
            Some(v) => serde_json::from_value(v)?,
            None => TrainConfig::default(),
        };
        let seed = field("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let step = field("step").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let restrict = match field("restrict") {
            Some(v) if !v.is_null() => {
                let paths: Vec<Vec<usize>> = serde_json::from_value(v)?;
                Some(PathTrie::new(&paths, model.config().n_layers, model.config().n_experts)?)
            }
            _ => None,
        };
        let mut tr = Self::with_model(model, config, seed);
        tr.step = step;
        tr.restrict = restrict;
        let body = ck.take_prefixed("opt.body.");
        if !body.is_empty() {
            tr.body_moments = Moments::from_named(tr.model.body(), &body)?;
            tr.router_moments = Moments::from_named(tr.model.router().params(), &ck.take_prefixed("opt.router."))?;
        }
        Ok(tr)
    }
}

/// CSV writer for per-step metrics.
pub struct MetricsLog<W: Write> {
    out: W,
    record_throughput: bool,
    compliance: bool,
}

pub const METRICS_FORMAT: &str = "moe-lab-metrics";
pub const METRICS_VERSION: u32 = 1;

impl<W: Write> MetricsLog<W> {
    /// Writes the version line and the column header. `compliance` adds a
    /// trailing column for restricted runs.
    pub fn new(mut out: W, config_hash: &str, n_layers: usize, record_throughput: bool, compliance: bool) -> Result<Self> {
        writeln!(out, "# {METRICS_FORMAT} v{METRICS_VERSION} config={config_hash}")?;
        let mut cols = vec!["step".to_string(), "lr".into(), "ce_nats".into(), "aux_loss".into(), "ppl".into(), "tokens_per_sec".into()];
        cols.extend((1..=n_layers).map(|l| format!("max_load_ratio_layer{l}")));
        if compliance {
            cols.push("trie_compliance".into());
        }
        writeln!(out, "{}", cols.join(","))?;
        Ok(Self { out, record_throughput, compliance })
    }

    pub fn write(&mut self, s: &StepStats) -> Result<()> {
        let tps = if self.record_throughput && s.seconds > 0.0 { format!("{:.1}", s.tokens as f64 / s.seconds) } else { String::new() };
        let mut row = format!("{},{:e},{:.6},{:.6},{:.6},{}", s.step, s.lr, s.ce, s.aux, s.ce.exp(), tps);
        for r in s.load_ratios() {
            row.push_str(&format!(",{r:.4}"));
        }
        if self.compliance {
            row.push_str(&format!(",{:.6}", s.compliance.unwrap_or(1.0)));
        }
        writeln!(self.out, "{row}")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
