//! Adversarial training through the gradient reversal layer, and last-layer
//! fine-tuning.
//!
//! One step forwards a labelled source batch and an unlabelled target batch
//! separately (each normalizes with its own batch statistics), then
//! back-propagates `L_pore + L_d_src + L_d_tgt`. The reversal layer between
//! the pore map and the domain classifier turns the domain terms into
//! `-lambda * dL_d` for the regressor while the classifier itself descends
//! `L_d` unscaled.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndgrad::{Grid4, ParamGroup, Shape4, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataprep::DomainSample;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::porenet::{save_checkpoint, BnUse, Checkpoint, PoreNet, TrainingMeta, OUTPUT_BN, OUTPUT_CONV};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    /// Plain gradient descent, mirroring the textbook update equations.
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    /// Patches per domain per iteration.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    /// Save a checkpoint every this many epochs (0: final checkpoint only).
    pub checkpoint_every: usize,
    /// Multiply the domain-classifier gradient by `lambda` (the literal
    /// saddle-point update) instead of training it on the plain domain loss.
    pub scale_domain_by_lambda: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.005,
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            optimizer: Optimizer::Adam,
            adam: AdamConfig::default(),
            checkpoint_every: 0,
            scale_domain_by_lambda: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and non-negative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::config("adam", "betas must lie in [0, 1) and epsilon be positive"));
        }
        Ok(())
    }
}

/// Iterations in one pass over `target_len` patches.
pub fn iterations_per_epoch(target_len: usize, batch_size: usize) -> usize {
    target_len.div_ceil(batch_size)
}

/// Losses of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: u64,
    pub epoch: usize,
    pub l_pore: f64,
    pub l_d_src: f64,
    pub l_d_tgt: f64,
    /// `L_pore - lambda (L_d_src + L_d_tgt)`.
    pub e: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "iter,epoch,L_pore,L_d_src,L_d_tgt,E,seconds";

impl IterationLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.iter, self.epoch, self.l_pore, self.l_d_src, self.l_d_tgt, self.e, self.seconds
        )
    }
}

/// Per-parameter optimizer state: first/second moments and step count.
#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: Optimizer,
    adam: AdamConfig,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, adam: AdamConfig) -> Self {
        OptimizerState {
            kind,
            adam,
            moments: BTreeMap::new(),
        }
    }

    pub fn adam() -> Self {
        Self::new(Optimizer::Adam, AdamConfig::default())
    }

    /// Apply one update with learning rate `lr` to every parameter that has
    /// an entry in `grads`.
    pub fn step(&mut self, net: &mut PoreNet<f32>, grads: &BTreeMap<String, Grid4<f32>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = net
                .params
                .get_mut(name)
                .ok_or_else(|| Error::config("optimizer", format!("unknown parameter {name}")))?;
            let value = p.value.data_mut();
            match self.kind {
                Optimizer::Sgd => {
                    for (w, &gi) in value.iter_mut().zip(g.data()) {
                        *w = (*w as f64 - lr * gi as f64) as f32;
                    }
                }
                Optimizer::Adam => adam_update(&self.adam, self.moments.entry(name.clone()).or_default(), value, g.data(), lr),
            }
        }
        Ok(())
    }
}

fn adam_update(cfg: &AdamConfig, st: &mut Moments, value: &mut [f32], grad: &[f32], lr: f64) {
    if st.m.is_empty() {
        st.m = vec![0.0; value.len()];
        st.v = vec![0.0; value.len()];
    }
    st.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(st.t);
    let c2 = 1.0 - b2.powi(st.t);
    for i in 0..value.len() {
        let g = grad[i] as f64;
        let m = b1 * st.m[i] as f64 + (1.0 - b1) * g;
        let v = b2 * st.v[i] as f64 + (1.0 - b2) * g * g;
        st.m[i] = m as f32;
        st.v[i] = v as f32;
        let step = lr * (m / c1) / ((v / c2).sqrt() + cfg.epsilon);
        value[i] = (value[i] as f64 - step) as f32;
    }
}

fn stack_patches(samples: &[&DomainSample], size: usize) -> Result<Grid4<f32>> {
    let mut data = Vec::with_capacity(samples.len() * size * size);
    for s in samples {
        data.extend_from_slice(s.patch().data());
    }
    Ok(Grid4::from_vec(Shape4::new(samples.len(), 1, size, size), data)?)
}

fn stack_labels(samples: &[&DomainSample], size: usize) -> Result<Grid4<f32>> {
    let mut data = Vec::with_capacity(samples.len() * size * size);
    for s in samples {
        let label = s
            .label()
            .ok_or_else(|| Error::config("source batch", "every source sample needs a pore label"))?;
        data.extend_from_slice(label.data());
    }
    Ok(Grid4::from_vec(Shape4::new(samples.len(), 1, size, size), data)?)
}

fn check_domains(samples: &[&DomainSample], domain: usize, what: &'static str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty(what));
    }
    if samples.iter().any(|s| s.domain() != domain) {
        return Err(Error::config(what, format!("all samples must have domain {domain}")));
    }
    Ok(())
}

fn scalar(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).item().expect("scalar loss") as f64
}

/// Gradients and losses of one adversarial iteration, before any update.
pub struct StepGrads {
    pub grads: BTreeMap<String, Grid4<f32>>,
    pub l_pore: f64,
    pub l_d_src: f64,
    pub l_d_tgt: f64,
}

/// Forward both batches and back-propagate the joint objective.
///
/// `reversal: None` removes the reversal layer entirely (the domain loss then
/// trains the regressor to *help* the classifier); it exists for paired
/// gradient comparisons. Batch-norm running statistics are updated.
pub fn adversarial_gradients(
    net: &mut PoreNet<f32>,
    src: &[&DomainSample],
    tgt: &[&DomainSample],
    reversal: Option<f32>,
) -> Result<StepGrads> {
    check_domains(src, 0, "source batch")?;
    check_domains(tgt, 1, "target batch")?;
    let size = net.arch.pore.input_size;
    let mut tape = Tape::new();
    let vars = net.params.attach(&mut tape);
    let xs = tape.constant(stack_patches(src, size)?);
    let ys = tape.constant(stack_labels(src, size)?);
    let xt = tape.constant(stack_patches(tgt, size)?);
    let arch = net.arch.clone();
    let yhat_s = arch.forward_pore(&mut tape, &vars, &mut BnUse::Train(&mut net.bn), xs)?;
    let yhat_t = arch.forward_pore(&mut tape, &vars, &mut BnUse::Train(&mut net.bn), xt)?;
    let l_pore = tape.mse_loss(yhat_s, ys)?;
    let p_s = arch.forward_domain(&mut tape, &vars, yhat_s, reversal)?;
    let p_t = arch.forward_domain(&mut tape, &vars, yhat_t, reversal)?;
    let l_src = tape.cross_entropy(p_s, &vec![0; src.len()])?;
    let l_tgt = tape.cross_entropy(p_t, &vec![1; tgt.len()])?;
    let l_d = tape.residual_add(l_src, l_tgt)?;
    let total = tape.residual_add(l_pore, l_d)?;
    tape.backward(total)?;
    Ok(StepGrads {
        grads: vars.gradients(&tape),
        l_pore: scalar(&tape, l_pore),
        l_d_src: scalar(&tape, l_src),
        l_d_tgt: scalar(&tape, l_tgt),
    })
}

/// Gradients of the pore loss alone on a source batch (no domain branch).
pub fn pore_only_gradients(net: &mut PoreNet<f32>, src: &[&DomainSample]) -> Result<(BTreeMap<String, Grid4<f32>>, f64)> {
    check_domains(src, 0, "source batch")?;
    let size = net.arch.pore.input_size;
    let mut tape = Tape::new();
    let vars = net.params.attach(&mut tape);
    let xs = tape.constant(stack_patches(src, size)?);
    let ys = tape.constant(stack_labels(src, size)?);
    let arch = net.arch.clone();
    let yhat = arch.forward_pore(&mut tape, &vars, &mut BnUse::Train(&mut net.bn), xs)?;
    let loss = tape.mse_loss(yhat, ys)?;
    tape.backward(loss)?;
    Ok((vars.gradients(&tape), scalar(&tape, loss)))
}

fn guard(iteration: u64, losses: &[(&str, f64)], grads: &BTreeMap<String, Grid4<f32>>) -> Result<()> {
    for (name, v) in losses {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                detail: format!("{name} = {v}"),
            });
        }
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite {
            iteration,
            detail: format!("gradient of {name}"),
        });
    }
    Ok(())
}

/// One adversarial iteration: gradients, NaN guard, optimizer update.
pub fn train_step(
    net: &mut PoreNet<f32>,
    opt: &mut OptimizerState,
    src: &[&DomainSample],
    tgt: &[&DomainSample],
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<IterationLog> {
    let start = Instant::now();
    let mut g = adversarial_gradients(net, src, tgt, Some(cfg.lambda as f32))?;
    guard(
        iteration,
        &[("L_pore", g.l_pore), ("L_d_src", g.l_d_src), ("L_d_tgt", g.l_d_tgt)],
        &g.grads,
    )?;
    if cfg.scale_domain_by_lambda {
        let lambda = cfg.lambda as f32;
        for name in net.params.group_names(ParamGroup::Domain) {
            if let Some(grad) = g.grads.get_mut(name) {
                *grad = grad.map(|v| v * lambda);
            }
        }
    }
    opt.step(net, &g.grads, cfg.learning_rate)?;
    Ok(IterationLog {
        iter: iteration,
        epoch: 0,
        l_pore: g.l_pore,
        l_d_src: g.l_d_src,
        l_d_tgt: g.l_d_tgt,
        e: g.l_pore - cfg.lambda * (g.l_d_src + g.l_d_tgt),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Supervised step on the pore loss only; the domain classifier is untouched.
pub fn pore_only_step(
    net: &mut PoreNet<f32>,
    opt: &mut OptimizerState,
    src: &[&DomainSample],
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<IterationLog> {
    let start = Instant::now();
    let (mut grads, l_pore) = pore_only_gradients(net, src)?;
    guard(iteration, &[("L_pore", l_pore)], &grads)?;
    grads.retain(|name, _| net.params.get(name).is_some_and(|p| p.group == ParamGroup::Pore));
    opt.step(net, &grads, cfg.learning_rate)?;
    Ok(IterationLog {
        iter: iteration,
        epoch: 0,
        l_pore,
        l_d_src: 0.0,
        l_d_tgt: 0.0,
        e: l_pore,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Endless sequence of indices, reshuffled at the start of every pass.
struct CyclicShuffle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclicShuffle {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        CyclicShuffle {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<IterationLog>,
}

/// Full training run. An epoch is one pass over the target patches in a
/// seeded shuffle (the last batch may be short); source batches come from an
/// independent reshuffling cyclic iterator. With `out_dir`, writes
/// `train_log.csv`, periodic `epoch_NNN.ckpt` files and `model.ckpt`.
///
/// With an empty `target` set and `lambda = 0` this degenerates to
/// supervised training; epochs then count passes over the source set.
pub fn train(
    mut net: PoreNet<f32>,
    source: &[DomainSample],
    target: &[DomainSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&IterationLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Empty("source set"));
    }
    let adversarial = !target.is_empty();
    if !adversarial && cfg.lambda != 0.0 {
        return Err(Error::Empty("target set"));
    }
    let pass_len = if adversarial { target.len() } else { source.len() };
    let per_epoch = iterations_per_epoch(pass_len, cfg.batch_size);
    let mut tgt_rng = stream_rng(cfg.seed, 1);
    let mut src_iter = CyclicShuffle::new(source.len(), stream_rng(cfg.seed, 2));
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.adam);
    let mut logs = Vec::with_capacity(per_epoch * cfg.epochs);
    let mut csv = format!("{LOG_HEADER}\n");
    let started = Instant::now();
    let stage = if adversarial { "adversarial" } else { "pore_only" };
    let meta_at = |epoch: usize, iterations: u64| TrainingMeta {
        epoch: epoch as u64,
        iterations,
        seed: cfg.seed,
        lambda: cfg.lambda,
        learning_rate: cfg.learning_rate,
        stage: stage.to_string(),
    };
    let mut iter = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..target.len()).collect();
        order.shuffle(&mut tgt_rng);
        for b in 0..per_epoch {
            let mut log = if adversarial {
                let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
                let tgt: Vec<&DomainSample> = idx.iter().map(|&i| &target[i]).collect();
                let src: Vec<&DomainSample> = src_iter.take(cfg.batch_size).into_iter().map(|i| &source[i]).collect();
                train_step(&mut net, &mut opt, &src, &tgt, cfg, iter)?
            } else {
                let n = cfg.batch_size.min(pass_len - b * cfg.batch_size);
                let src: Vec<&DomainSample> = src_iter.take(n).into_iter().map(|i| &source[i]).collect();
                pore_only_step(&mut net, &mut opt, &src, cfg, iter)?
            };
            log.epoch = epoch;
            log.seconds = started.elapsed().as_secs_f64();
            let _ = writeln!(csv, "{}", log.csv_row());
            progress(&log);
            logs.push(log);
            iter += 1;
        }
        if let Some(dir) = out_dir {
            atomic_write(&dir.join("train_log.csv"), csv.as_bytes())?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                let ckpt = Checkpoint::new(net.clone(), meta_at(epoch, iter));
                save_checkpoint(&ckpt, &dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            }
        }
    }
    let checkpoint = Checkpoint::new(net, meta_at(cfg.epochs, iter));
    if let Some(dir) = out_dir {
        save_checkpoint(&checkpoint, &dir.join("model.ckpt"))?;
    }
    Ok(TrainOutcome { checkpoint, logs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            learning_rate: 0.01,
            batch_size: 8,
            seed: 0,
            optimizer: Optimizer::Adam,
            adam: AdamConfig::default(),
        }
    }
}

/// Parameters re-trained by [`finetune_last_layer`].
pub fn last_layer_params() -> [String; 3] {
    [
        format!("{OUTPUT_CONV}.weight"),
        format!("{OUTPUT_BN}.gamma"),
        format!("{OUTPUT_BN}.beta"),
    ]
}

/// Trunk features are cached when they fit in this many bytes.
const FEATURE_CACHE_BYTES: usize = 1 << 30;

/// Re-initialize and retrain only the output convolution and its batch norm
/// on labelled patches, with the MSE objective. Every other layer is frozen:
/// its weights are untouched and its batch norm runs on running statistics.
pub fn finetune_last_layer(
    ckpt: &Checkpoint,
    labeled: &[DomainSample],
    cfg: &FinetuneConfig,
    mut progress: impl FnMut(&IterationLog),
) -> Result<TrainOutcome> {
    if labeled.is_empty() {
        return Err(Error::Empty("fine-tuning set"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::config("finetune", "epochs, batch_size and learning_rate must be positive"));
    }
    if labeled.iter().any(|s| s.label().is_none()) {
        return Err(Error::config("fine-tuning set", "every patch needs a pore label"));
    }
    let mut net = ckpt.net.clone();
    let arch = net.arch.clone();
    arch.reinit_output_layer(&mut net.params, &mut net.bn, cfg.seed)?;
    let trainable = last_layer_params();
    let size = arch.pore.input_size;
    let channels = *arch.pore.channels().last().expect("validated plan");
    let feature_bytes = labeled.len() * channels * size * size * 4;

    let trunk = |net: &PoreNet<f32>, samples: &[&DomainSample]| -> Result<Grid4<f32>> {
        let mut tape = Tape::new();
        let vars = net.attach_frozen(&mut tape);
        let x = tape.constant(stack_patches(samples, size)?);
        let f = arch.forward_trunk(&mut tape, &vars, &mut BnUse::Eval(&net.bn), x, None)?;
        Ok(tape.value(f).clone())
    };
    let cache: Option<Vec<Grid4<f32>>> = if feature_bytes <= FEATURE_CACHE_BYTES {
        Some(
            labeled
                .iter()
                .map(|s| trunk(&net, &[s]))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let mut opt = OptimizerState::new(cfg.optimizer, cfg.adam);
    let mut rng = stream_rng(cfg.seed, 3);
    let per_epoch = iterations_per_epoch(labeled.len(), cfg.batch_size);
    let mut logs = Vec::new();
    let started = Instant::now();
    let mut iter = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng);
        for b in 0..per_epoch {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
            let batch: Vec<&DomainSample> = idx.iter().map(|&i| &labeled[i]).collect();
            let features = match &cache {
                Some(c) => Grid4::stack(&idx.iter().map(|&i| &c[i]).collect::<Vec<_>>())?,
                None => trunk(&net, &batch)?,
            };
            let mut tape = Tape::new();
            let vars = net.attach_with(&mut tape, |n| trainable.iter().any(|t| t == n));
            let f = tape.constant(features);
            let y = tape.constant(stack_labels(&batch, size)?);
            let layers = [OUTPUT_BN];
            let yhat = arch.forward_output(&mut tape, &vars, &mut BnUse::TrainOnly(&mut net.bn, &layers), f)?;
            let loss = tape.mse_loss(yhat, y)?;
            tape.backward(loss)?;
            let l_pore = scalar(&tape, loss);
            let grads: BTreeMap<String, Grid4<f32>> = vars
                .gradients(&tape)
                .into_iter()
                .filter(|(n, _)| trainable.contains(n))
                .collect();
            guard(iter, &[("L_pore", l_pore)], &grads)?;
            opt.step(&mut net, &grads, cfg.learning_rate)?;
            let log = IterationLog {
                iter,
                epoch,
                l_pore,
                l_d_src: 0.0,
                l_d_tgt: 0.0,
                e: l_pore,
                seconds: started.elapsed().as_secs_f64(),
            };
            progress(&log);
            logs.push(log);
            iter += 1;
        }
    }
    let meta = TrainingMeta {
        epoch: cfg.epochs as u64,
        iterations: iter,
        seed: cfg.seed,
        lambda: ckpt.meta.lambda,
        learning_rate: cfg.learning_rate,
        stage: "finetune".to_string(),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(net, meta),
        logs,
    })
}

/// Eval-mode pore-map MSE over labelled patches.
pub fn evaluate_mse(net: &PoreNet<f32>, samples: &[DomainSample], batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let size = net.arch.pore.input_size;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&DomainSample> = chunk.iter().collect();
        let y = net.predict(stack_patches(&refs, size)?)?;
        let labels = stack_labels(&refs, size)?;
        for (a, b) in y.data().iter().zip(labels.data()) {
            let d = *a as f64 - *b as f64;
            sum += d * d;
        }
        count += labels.numel();
    }
    Ok(sum / count as f64)
}
