//! Per-channel batch normalization.

use serde::{Deserialize, Serialize};

use crate::error::{NdError, Result};
use crate::grid::Grid4;
use crate::real::Real;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running mean and variance tracked across training batches.
///
/// Freshly initialized statistics are mean 0 and variance 1, so evaluation
/// before any training step is the identity up to the affine parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    /// Normalize with batch statistics and fold them into the running stats.
    Train { momentum: f64 },
    /// Normalize with the running stats.
    Eval,
}

impl BnMode {
    pub fn train() -> Self {
        BnMode::Train {
            momentum: BN_MOMENTUM,
        }
    }
}

pub(crate) struct BnForward<T> {
    pub out: Grid4<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn forward<T: Real>(
    x: &Grid4<T>,
    gamma: &Grid4<T>,
    beta: &Grid4<T>,
    stats: &mut RunningStats,
    mode: BnMode,
) -> Result<BnForward<T>> {
    let [n, c, _, _] = x.shape().0;
    if gamma.numel() != c || beta.numel() != c {
        return Err(NdError::shape(
            "batch_norm",
            format!(
                "gamma {} / beta {} vs {c} channels",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if stats.channels() != c {
        return Err(NdError::shape(
            "batch_norm",
            format!("running stats for {} channels, input has {c}", stats.channels()),
        ));
    }
    let plane = x.shape().plane();
    let count = n * plane;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    match mode {
        BnMode::Train { momentum } => {
            for ch in 0..c {
                let mut sum = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for v in &x.data()[base..base + plane] {
                        sum += v.to_f64().unwrap_or(f64::NAN);
                    }
                }
                let m = sum / count as f64;
                let mut sq = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for v in &x.data()[base..base + plane] {
                        let d = v.to_f64().unwrap_or(f64::NAN) - m;
                        sq += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = sq / count as f64;
                let unbiased = if count > 1 {
                    var[ch] * count as f64 / (count - 1) as f64
                } else {
                    var[ch]
                };
                stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * m;
                stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * unbiased;
            }
        }
        BnMode::Eval => {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::lit(1.0 / (v + BN_EPSILON).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
    let mut out = Grid4::zeros(x.shape());
    let mut xhat = vec![T::zero(); x.numel()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let (g, b, m, is) = (gamma.data()[ch], beta.data()[ch], mean_t[ch], inv_std[ch]);
            let src = &x.data()[base..base + plane];
            let xh = &mut xhat[base..base + plane];
            for (h, &v) in xh.iter_mut().zip(src) {
                *h = (v - m) * is;
            }
            for (o, &h) in out.data_mut()[base..base + plane].iter_mut().zip(xh.iter()) {
                *o = g * h + b;
            }
        }
    }
    Ok(BnForward { out, xhat, inv_std })
}

pub(crate) struct BnGrads<T> {
    pub dx: Option<Grid4<T>>,
    pub dgamma: Grid4<T>,
    pub dbeta: Grid4<T>,
}

pub(crate) fn backward<T: Real>(
    dout: &Grid4<T>,
    gamma: &Grid4<T>,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    need_dx: bool,
) -> BnGrads<T> {
    let [n, c, _, _] = dout.shape().0;
    let plane = dout.shape().plane();
    let count = T::count(n * plane);
    let mut dgamma = Grid4::zeros(gamma.shape());
    let mut dbeta = Grid4::zeros(gamma.shape());
    for ch in 0..c {
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for (&d, &h) in dout.data()[base..base + plane]
                .iter()
                .zip(&xhat[base..base + plane])
            {
                sg += d * h;
                sb += d;
            }
        }
        dgamma.data_mut()[ch] = sg;
        dbeta.data_mut()[ch] = sb;
    }
    let dx = need_dx.then(|| {
        let mut dx = Grid4::zeros(dout.shape());
        for ch in 0..c {
            let g = gamma.data()[ch];
            let is = inv_std[ch];
            // with batch statistics, the mean and variance also depend on x
            let (sum_d, sum_dh) = if train {
                (dbeta.data()[ch], dgamma.data()[ch])
            } else {
                (T::zero(), T::zero())
            };
            for s in 0..n {
                let base = (s * c + ch) * plane;
                let d = &dout.data()[base..base + plane];
                let h = &xhat[base..base + plane];
                let o = &mut dx.data_mut()[base..base + plane];
                if train {
                    let scale = g * is / count;
                    for i in 0..plane {
                        o[i] = scale * (count * d[i] - sum_d - h[i] * sum_dh);
                    }
                } else {
                    for i in 0..plane {
                        o[i] = g * is * d[i];
                    }
                }
            }
        }
        dx
    });
    BnGrads { dx, dgamma, dbeta }
}
