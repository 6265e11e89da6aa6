//! Losses, the AdamW optimizer and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{derive_seed, Pair};
use crate::error::{Error, Result};
use crate::geometry::{dualquat_from_transform, DualQuaternion, Quaternion};
use crate::network::{Checkpoint, Model, ModelConfig, ModelParams, ParamVars, PreparedPair};
use crate::tolerance::ZERO_NORM;

/// Weight of the rotation term: `L = beta * L_real + L_dual`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
}

impl LossConfig {
    pub fn kitti() -> Self {
        Self { beta: 200.0 }
    }

    pub fn modelnet() -> Self {
        Self { beta: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta >= 0.0 && self.beta.is_finite() {
            Ok(())
        } else {
            Err(Error::Config("loss beta must be finite and non-negative".into()))
        }
    }
}

/// `|p_gt - p / |p||^2`.
pub fn loss_real(pred: &DualQuaternion, gt: &DualQuaternion) -> Result<f64> {
    let n = pred.real.norm();
    if n <= ZERO_NORM || !n.is_finite() {
        return Err(Error::Degenerate(format!("predicted real part has norm {n:e}")));
    }
    let d = gt.real.to_array();
    let p = pred.real.to_array();
    Ok((0..4).map(|i| (d[i] - p[i] / n).powi(2)).sum())
}

/// `|q_gt - q|^2`.
pub fn loss_dual(pred: &DualQuaternion, gt: &DualQuaternion) -> f64 {
    let (a, b) = (gt.dual.to_array(), pred.dual.to_array());
    (0..4).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Batch means of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub real: f64,
    pub dual: f64,
    pub total: f64,
}

pub fn loss_combined(preds: &[DualQuaternion], gts: &[DualQuaternion], config: &LossConfig) -> Result<LossParts> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            gts.len()
        )));
    }
    let n = preds.len() as f64;
    let mut real = 0.0;
    let mut dual = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        real += loss_real(p, g)?;
        dual += loss_dual(p, g);
    }
    let (real, dual) = (real / n, dual / n);
    Ok(LossParts {
        real,
        dual,
        total: config.beta * real + dual,
    })
}

/// Loss terms for one sample on a tape from a `[1, 8]` prediction.
#[derive(Debug, Clone, Copy)]
pub struct TapedLoss {
    pub real: Var,
    pub dual: Var,
    pub total: Var,
}

pub fn taped_loss(tape: &mut Tape, pred: Var, gt: &DualQuaternion, config: &LossConfig) -> Result<TapedLoss> {
    let p = tape.slice_cols(pred, 0, 4)?;
    let p = tape.normalize_rows(p)?;
    let q = tape.slice_cols(pred, 4, 8)?;
    let gp = tape.constant(Tensor::row(&gt.real.to_array()));
    let gq = tape.constant(Tensor::row(&gt.dual.to_array()));
    let dr = tape.sub(gp, p)?;
    let dd = tape.sub(gq, q)?;
    let real = tape.mean_squared_norm(dr)?;
    let dual = tape.mean_squared_norm(dd)?;
    let weighted = tape.scale(real, config.beta);
    let total = tape.add(weighted, dual)?;
    Ok(TapedLoss { real, dual, total })
}

/// Ground-truth label of a pair.
pub fn label(pair: &Pair) -> DualQuaternion {
    dualquat_from_transform(&pair.gt)
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every`
    /// steps.
    #[serde(default)]
    pub decay_every: Option<usize>,
    #[serde(default = "one")]
    pub decay_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_every: None,
            decay_factor: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.decay_factor > 0.0
            && self.decay_every != Some(0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("optimizer settings out of range".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, shapes: &[[usize; 2]]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn for_params(config: OptimizerConfig, params: &ModelParams) -> Self {
        let shapes: Vec<[usize; 2]> = params.named().iter().map(|(_, t)| t.shape()).collect();
        Self::new(config, &shapes)
    }

    /// Learning rate for the next step.
    pub fn current_lr(&self) -> f64 {
        match self.config.decay_every {
            Some(every) => self.config.lr * self.config.decay_factor.powi((self.step as usize / every) as i32),
            None => self.config.lr,
        }
    }
}

/// One AdamW update. Parameters are first scaled by `1 - lr * lambda`. A
/// non-finite gradient leaves everything untouched and reports the
/// parameter.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || names.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "optimizer_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::Divergence {
                step: state.step as usize,
                detail: format!("non-finite gradient for {name}"),
            });
        }
    }
    let c = state.config;
    let lr = state.current_lr();
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - lr * c.weight_decay;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Everything the training loop needs besides data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Worker threads for per-sample passes; results do not depend on it.
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_batch() -> usize {
    8
}

fn default_threads() -> usize {
    1
}

impl TrainConfig {
    pub fn new(model: ModelConfig, loss: LossConfig, epochs: usize, seed: u64) -> Self {
        Self {
            model,
            loss,
            optimizer: OptimizerConfig::default(),
            batch_size: default_batch(),
            epochs,
            max_steps: None,
            seed,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_real: f64,
    pub l_dual: f64,
    pub l: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Optional side outputs of [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for per-epoch checkpoints.
    pub checkpoint_dir: Option<&'a Path>,
    /// Start from these parameters instead of a fresh initialization.
    pub init: Option<ModelParams>,
    /// Called after every step.
    pub on_step: Option<&'a mut dyn FnMut(&LossRecord)>,
}

struct SampleResult {
    real: f64,
    dual: f64,
    grads: Vec<Tensor>,
}

fn sample_pass(
    model: &Model,
    prep: &PreparedPair,
    gt: &DualQuaternion,
    loss: &LossConfig,
    weight: f64,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, model.params(), true);
    let out = model.forward_prepared_on_tape(&mut tape, &pv, prep)?;
    let l = taped_loss(&mut tape, out, gt, loss)?;
    let scaled = tape.scale(l.total, weight);
    tape.backward(scaled)?;
    Ok(SampleResult {
        real: tape.value(l.real).item(),
        dual: tape.value(l.dual).item(),
        grads: pv.vars().iter().map(|&v| tape.grad_or_zeros(v)).collect(),
    })
}

/// Runs the per-sample passes of a batch, in sample order regardless of
/// the thread count.
fn batch_pass(
    model: &Model,
    items: &[(&PreparedPair, DualQuaternion)],
    loss: &LossConfig,
    threads: usize,
) -> Vec<Result<SampleResult>> {
    let weight = 1.0 / items.len() as f64;
    let threads = threads.clamp(1, items.len());
    if threads == 1 {
        return items.iter().map(|(p, g)| sample_pass(model, p, g, loss, weight)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|(p, g)| sample_pass(model, p, g, loss, weight))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Shuffled mini-batch training with per-step loss history and per-epoch
/// checkpoints. On divergence the last good parameters are written to
/// `checkpoint_last_good.json` (when a checkpoint directory is set) and the
/// error is returned.
pub fn train(pairs: &[Pair], config: &TrainConfig, mut options: TrainOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<DualQuaternion> = pairs.iter().map(label).collect();
    if let Some(i) = labels.iter().position(|l| l.real.w <= 0.0) {
        return Err(Error::InvalidArgument(format!("pair {i} has a label with w <= 0")));
    }
    let params = match options.init.take() {
        Some(p) => p,
        None => crate::network::init_params(&config.model, config.seed)?,
    };
    let mut model = Model::new(config.model.clone(), params)?;
    let prepared: Vec<PreparedPair> = pairs
        .iter()
        .map(|p| model.prepare(&p.template, &p.source))
        .collect::<Result<_>>()?;
    let names: Vec<String> = model.params().named().into_iter().map(|(n, _)| n).collect();
    let mut state = OptimizerState::for_params(config.optimizer, model.params());
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    let mut step = 0;

    'epochs: for epoch in 0..config.epochs {
        if step >= max_steps {
            break;
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64)));
        for batch in order.chunks(config.batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            let items: Vec<(&PreparedPair, DualQuaternion)> =
                batch.iter().map(|&i| (&prepared[i], labels[i])).collect();
            let results = batch_pass(&model, &items, &config.loss, config.threads);
            let reduced = reduce(results, names.len()).map_err(|e| match e {
                Error::Degenerate(detail) => Error::Divergence { step, detail },
                other => other,
            });
            let outcome = reduced.and_then(|(real, dual, grads)| {
                let n = batch.len() as f64;
                let record = LossRecord {
                    step,
                    l_real: real / n,
                    l_dual: dual / n,
                    l: config.loss.beta * real / n + dual / n,
                };
                if !record.l.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        detail: format!("loss is {}", record.l),
                    });
                }
                let mut params = model.params().clone();
                optimizer_step(&mut params.tensors_mut(), &names, &grads, &mut state)
                    .map_err(|e| match e {
                        Error::Divergence { detail, .. } => Error::Divergence { step, detail },
                        other => other,
                    })?;
                Ok((record, params))
            });
            match outcome {
                Ok((record, params)) => {
                    model = Model::new(config.model.clone(), params)?;
                    if let Some(cb) = options.on_step.as_mut() {
                        cb(&record);
                    }
                    history.push(record);
                    step += 1;
                }
                Err(e) => {
                    if let Some(dir) = options.checkpoint_dir {
                        Checkpoint::from_model(&model).save(dir.join("checkpoint_last_good.json"))?;
                    }
                    return Err(e);
                }
            }
        }
        if let Some(dir) = options.checkpoint_dir {
            let path = dir.join(format!("checkpoint_epoch_{:04}.json", epoch + 1));
            Checkpoint::from_model(&model).save(&path)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        checkpoints,
    })
}

fn reduce(results: Vec<Result<SampleResult>>, n_params: usize) -> Result<(f64, f64, Vec<Tensor>)> {
    let mut real = 0.0;
    let mut dual = 0.0;
    let mut total: Option<Vec<Tensor>> = None;
    for r in results {
        let r = r?;
        real += r.real;
        dual += r.dual;
        match total.as_mut() {
            None => total = Some(r.grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&r.grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let grads = total.unwrap_or_default();
    debug_assert_eq!(grads.len(), n_params);
    Ok((real, dual, grads))
}

/// Loss history as CSV: `step,L_real,L_dual,L`.
pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,L_real,L_dual,L\n");
    for r in history {
        s.push_str(&format!("{},{:?},{:?},{:?}\n", r.step, r.l_real, r.l_dual, r.l));
    }
    s
}

pub fn write_loss_history(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_history_csv(history)).map_err(|e| Error::io(path, e))
}

/// Textual training manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Dataset directory or manifest, relative to the manifest file.
    pub dataset: String,
    #[serde(default)]
    pub init_checkpoint: Option<String>,
}

impl TrainManifest {
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let m: TrainManifest = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(1);
            Error::parse(source_name, line, e.message().to_string())
        })?;
        m.train.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// Quaternion helper for tests and callers building labels by hand.
pub fn dual_label(real: [f64; 4], dual: [f64; 4]) -> DualQuaternion {
    DualQuaternion::new(Quaternion::from_array(real), Quaternion::from_array(dual))
}
