//! The residual pore-map regressor, its domain classifier, and checkpoints.
//!
//! Layer names follow the table layout of the backbone: `conv1` is the stem,
//! `conv{s}_{b}` is residual block `b` of stage `s` (stages start at 2), and
//! `conv6` is the single-channel output convolution. Every convolution is
//! followed by batch normalization, so convolutions carry no bias.
//!
//! Residual block: `conv_a -> bn_a -> relu -> conv_b -> bn_b`, plus the skip
//! path (a 1x1 `proj` + `proj_bn` when the width changes), then ReLU.

mod checkpoint;
mod config;

use std::collections::BTreeMap;

use ndgrad::{BnMode, Grid4, ParamGroup, ParamSet, ParamVars, Real, RunningStats, Shape4, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DomainHeadConfig, ResPoreConfig, WidthMultiplier};

/// Running statistics of every batch-norm layer, keyed by layer name.
pub type BnState = BTreeMap<String, RunningStats>;

/// Name of the output convolution re-trained by last-layer fine-tuning.
pub const OUTPUT_CONV: &str = "conv6";
/// Batch norm following [`OUTPUT_CONV`].
pub const OUTPUT_BN: &str = "bn6";

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Zero-mean normal with variance `2 / fan_in`.
    HeNormal { fan_in: usize },
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

/// One learnable tensor of the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape4,
    pub group: ParamGroup,
    init: Init,
}

fn conv_spec(name: String, c_out: usize, c_in: usize, k: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape: Shape4::new(c_out, c_in, k, k),
        group: ParamGroup::Pore,
        init: Init::HeNormal {
            fan_in: c_in * k * k,
        },
    }
}

fn bn_specs(prefix: &str, c: usize) -> [ParamSpec; 2] {
    let spec = |suffix: &str, init| ParamSpec {
        name: format!("{prefix}.{suffix}"),
        shape: Shape4::new(c, 1, 1, 1),
        group: ParamGroup::Pore,
        init,
    };
    [spec("gamma", Init::Ones), spec("beta", Init::Zeros)]
}

pub(crate) fn block_name(stage: usize, block: usize) -> String {
    format!("conv{}_{}", stage + 2, block + 1)
}

/// Architecture description shared by parameter construction, forward
/// passes and checkpoint validation.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub pore: ResPoreConfig,
    pub head: DomainHeadConfig,
}

impl Architecture {
    pub fn new(pore: ResPoreConfig, head: DomainHeadConfig) -> Result<Self> {
        pore.validate()?;
        head.validate(&pore)?;
        Ok(Architecture { pore, head })
    }

    /// Every learnable tensor, in construction (initialization) order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let ch = self.pore.channels();
        let k = self.pore.block_kernel;
        let mut specs = vec![conv_spec("conv1.weight".into(), ch[0], 1, self.pore.first_kernel)];
        specs.extend(bn_specs("bn1", ch[0]));
        let mut c_in = ch[0];
        for (s, &c) in ch[1..].iter().enumerate() {
            for b in 0..self.pore.blocks_per_stage {
                let name = block_name(s, b);
                specs.push(conv_spec(format!("{name}.conv_a.weight"), c, c_in, k));
                specs.extend(bn_specs(&format!("{name}.bn_a"), c));
                specs.push(conv_spec(format!("{name}.conv_b.weight"), c, c, k));
                specs.extend(bn_specs(&format!("{name}.bn_b"), c));
                if c_in != c {
                    specs.push(conv_spec(format!("{name}.proj.weight"), c, c_in, 1));
                    specs.extend(bn_specs(&format!("{name}.proj_bn"), c));
                }
                c_in = c;
            }
        }
        specs.push(conv_spec(format!("{OUTPUT_CONV}.weight"), 1, c_in, k));
        specs.extend(bn_specs(OUTPUT_BN, 1));
        for (i, (fan_in, fan_out)) in self.head.layer_dims().into_iter().enumerate() {
            specs.push(ParamSpec {
                name: format!("domain.fc{}.weight", i + 1),
                shape: Shape4::new(fan_out, fan_in, 1, 1),
                group: ParamGroup::Domain,
                init: Init::Uniform { fan_in },
            });
            specs.push(ParamSpec {
                name: format!("domain.fc{}.bias", i + 1),
                shape: Shape4::new(fan_out, 1, 1, 1),
                group: ParamGroup::Domain,
                init: Init::Zeros,
            });
        }
        specs
    }

    /// Batch-norm layers and their widths, in forward order.
    pub fn bn_layers(&self) -> Vec<(String, usize)> {
        self.param_specs()
            .iter()
            .filter_map(|s| {
                s.name
                    .strip_suffix(".gamma")
                    .map(|layer| (layer.to_string(), s.shape.n()))
            })
            .collect()
    }

    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamSet<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for spec in self.param_specs() {
            let value = init_tensor(spec.shape, spec.init, &mut rng);
            params.insert(spec.name, spec.group, value)?;
        }
        Ok(params)
    }

    pub fn init_bn(&self) -> BnState {
        self.bn_layers()
            .into_iter()
            .map(|(name, c)| (name, RunningStats::new(c)))
            .collect()
    }

    /// Re-draw the output convolution and reset its batch norm, as the start of
    /// last-layer fine-tuning.
    pub fn reinit_output_layer<T: Real>(
        &self,
        params: &mut ParamSet<T>,
        bn: &mut BnState,
        seed: u64,
    ) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in self.param_specs() {
            if spec.name.starts_with(&format!("{OUTPUT_CONV}."))
                || spec.name.starts_with(&format!("{OUTPUT_BN}."))
            {
                let p = params
                    .get_mut(&spec.name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", spec.name)))?;
                p.value = init_tensor(spec.shape, spec.init, &mut rng);
            }
        }
        bn.insert(OUTPUT_BN.to_string(), RunningStats::new(1));
        Ok(())
    }

    fn check_input(&self, x: Shape4) -> Result<()> {
        let s = self.pore.input_size;
        if x.c() != 1 || x.h() != s || x.w() != s {
            return Err(Error::config(
                "input",
                format!("expected n x 1 x {s} x {s} patches, got {x}"),
            ));
        }
        Ok(())
    }

    /// Everything before the output convolution: stem and residual stages.
    pub fn forward_trunk<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        bn: &mut BnUse<'_>,
        x: Var,
        mut trace: Option<&mut Vec<(String, Shape4)>>,
    ) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let mut record = |tape: &Tape<T>, name: &str, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((name.to_string(), tape.value(v).shape()));
            }
        };
        let h = tape.conv2d_same(x, vars.get("conv1.weight")?, None)?;
        let h = bn.apply(tape, vars, "bn1", h)?;
        let mut h = tape.relu(h);
        record(tape, "conv1", h);
        let ch = self.pore.channels();
        let mut c_in = ch[0];
        for (s, &c) in ch[1..].iter().enumerate() {
            for b in 0..self.pore.blocks_per_stage {
                let name = block_name(s, b);
                h = residual_block(tape, vars, bn, &name, h, c_in != c)?;
                record(tape, &name, h);
                c_in = c;
            }
        }
        Ok(h)
    }

    /// Output convolution, batch norm and the final ReLU.
    pub fn forward_output<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        bn: &mut BnUse<'_>,
        features: Var,
    ) -> Result<Var> {
        let h = tape.conv2d_same(features, vars.get(&format!("{OUTPUT_CONV}.weight"))?, None)?;
        let h = bn.apply(tape, vars, OUTPUT_BN, h)?;
        Ok(tape.relu(h))
    }

    /// Pore intensity map for a batch of `n x 1 x S x S` patches.
    pub fn forward_pore<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        bn: &mut BnUse<'_>,
        x: Var,
    ) -> Result<Var> {
        let f = self.forward_trunk(tape, vars, bn, x, None)?;
        self.forward_output(tape, vars, bn, f)
    }

    /// Same as [`forward_pore`](Self::forward_pore), recording the shape
    /// after every stage.
    pub fn forward_pore_traced<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        bn: &mut BnUse<'_>,
        x: Var,
    ) -> Result<(Var, Vec<(String, Shape4)>)> {
        let mut trace = Vec::new();
        let f = self.forward_trunk(tape, vars, bn, x, Some(&mut trace))?;
        let y = self.forward_output(tape, vars, bn, f)?;
        trace.push((OUTPUT_CONV.to_string(), tape.value(y).shape()));
        Ok((y, trace))
    }

    /// Domain probabilities (`n x 2`) for a pore map.
    ///
    /// `reversal` inserts the gradient reversal layer with the given factor;
    /// `None` connects the classifier directly.
    pub fn forward_domain<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        yhat: Var,
        reversal: Option<T>,
    ) -> Result<Var> {
        let s = tape.value(yhat).shape();
        if s.sample_len() != self.head.input_dim {
            return Err(Error::config(
                "domain input",
                format!("pore map {s} does not flatten to {}", self.head.input_dim),
            ));
        }
        let h = match reversal {
            Some(lambda) => tape.gradient_reversal(yhat, lambda),
            None => yhat,
        };
        let mut h = tape.flatten(h);
        let layers = self.head.layer_dims().len();
        for i in 1..=layers {
            let w = vars.get(&format!("domain.fc{i}.weight"))?;
            let b = vars.get(&format!("domain.fc{i}.bias"))?;
            h = tape.linear(h, w, b)?;
            if i < layers {
                h = tape.relu(h);
            }
        }
        Ok(tape.softmax_rows(h))
    }
}

/// One basic block; `project` adds the 1x1 convolution + batch norm skip path.
pub fn residual_block<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    bn: &mut BnUse<'_>,
    name: &str,
    x: Var,
    project: bool,
) -> Result<Var> {
    let h = tape.conv2d_same(x, vars.get(&format!("{name}.conv_a.weight"))?, None)?;
    let h = bn.apply(tape, vars, &format!("{name}.bn_a"), h)?;
    let h = tape.relu(h);
    let h = tape.conv2d_same(h, vars.get(&format!("{name}.conv_b.weight"))?, None)?;
    let h = bn.apply(tape, vars, &format!("{name}.bn_b"), h)?;
    let skip = if project {
        let p = tape.conv2d_same(x, vars.get(&format!("{name}.proj.weight"))?, None)?;
        bn.apply(tape, vars, &format!("{name}.proj_bn"), p)?
    } else {
        x
    };
    let sum = tape.residual_add(h, skip)?;
    Ok(tape.relu(sum))
}

fn init_tensor<T: Real>(shape: Shape4, init: Init, rng: &mut ChaCha8Rng) -> Grid4<T> {
    let n = shape.numel();
    let data: Vec<T> = match init {
        Init::HeNormal { fan_in } => {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            (0..n).map(|_| T::lit(normal.sample(rng))).collect()
        }
        Init::Uniform { fan_in } => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect()
        }
        Init::Ones => vec![T::one(); n],
        Init::Zeros => vec![T::zero(); n],
    };
    Grid4::from_vec(shape, data).expect("spec shape matches data")
}

/// How batch-norm layers behave during a forward pass.
pub enum BnUse<'a> {
    /// Running statistics, read only.
    Eval(&'a BnState),
    /// Batch statistics; running statistics are updated.
    Train(&'a mut BnState),
    /// Only the named layers train; the rest use running statistics.
    TrainOnly(&'a mut BnState, &'a [&'a str]),
}

impl BnUse<'_> {
    fn apply<T: Real>(&mut self, tape: &mut Tape<T>, vars: &ParamVars, layer: &str, x: Var) -> Result<Var> {
        let gamma = vars.get(&format!("{layer}.gamma"))?;
        let beta = vars.get(&format!("{layer}.beta"))?;
        let missing = || Error::Checkpoint(format!("no running statistics for {layer}"));
        let out = match self {
            BnUse::Eval(state) => {
                let mut stats = state.get(layer).ok_or_else(missing)?.clone();
                tape.batch_norm(x, gamma, beta, &mut stats, BnMode::Eval)?
            }
            BnUse::Train(state) => {
                let stats = state.get_mut(layer).ok_or_else(missing)?;
                tape.batch_norm(x, gamma, beta, stats, BnMode::train())?
            }
            BnUse::TrainOnly(state, trainable) => {
                if trainable.contains(&layer) {
                    let stats = state.get_mut(layer).ok_or_else(missing)?;
                    tape.batch_norm(x, gamma, beta, stats, BnMode::train())?
                } else {
                    let mut stats = state.get(layer).ok_or_else(missing)?.clone();
                    tape.batch_norm(x, gamma, beta, &mut stats, BnMode::Eval)?
                }
            }
        };
        Ok(out)
    }
}

/// The composite network: pore-map regressor plus domain classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PoreNet<T: Real> {
    pub arch: Architecture,
    pub params: ParamSet<T>,
    pub bn: BnState,
}

impl<T: Real> PoreNet<T> {
    pub fn build(pore: ResPoreConfig, head: DomainHeadConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(pore, head)?;
        let params = arch.init_params(seed)?;
        let bn = arch.init_bn();
        Ok(PoreNet { arch, params, bn })
    }

    /// Regressor sized for `pore` with the default head widths.
    pub fn with_default_head(pore: ResPoreConfig, seed: u64) -> Result<Self> {
        let head = DomainHeadConfig::for_map(&pore);
        Self::build(pore, head, seed)
    }

    /// Eval-mode pore maps for a batch, without recording gradients.
    pub fn predict(&self, x: Grid4<T>) -> Result<Grid4<T>> {
        let mut tape = Tape::new();
        let vars = self.attach_frozen(&mut tape);
        let xv = tape.constant(x);
        let y = self
            .arch
            .forward_pore(&mut tape, &vars, &mut BnUse::Eval(&self.bn), xv)?;
        Ok(tape.value(y).clone())
    }

    /// Register parameters as constants (no gradients).
    pub fn attach_frozen(&self, tape: &mut Tape<T>) -> ParamVars {
        self.attach_with(tape, |_| false)
    }

    /// Register parameters, requiring gradients only where `trainable` holds.
    pub fn attach_with(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> ParamVars {
        ParamVars::from_iter(
            self.params
                .iter()
                .map(|(name, p)| (name.to_string(), tape.leaf(p.value.clone(), trainable(name)))),
        )
    }

    pub fn cast<U: Real>(&self) -> PoreNet<U> {
        PoreNet {
            arch: self.arch.clone(),
            params: self.params.cast(),
            bn: self.bn.clone(),
        }
    }
}
