//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{NdError, Result};
use crate::grid::Grid4;
use crate::tape::{Tape, Var};

/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compare analytic gradients of `f` with central differences.
///
/// `f` builds a scalar from the leaves it is handed (in the order of
/// `inputs`). At most `max_per_input` evenly spaced elements of each input
/// are perturbed; pass `usize::MAX` to check all of them.
pub fn check_gradients<F>(
    inputs: &[Grid4<f64>],
    step: f64,
    max_per_input: usize,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Grid4<f64>], with_grad: bool| -> Result<(f64, Vec<Grid4<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = tape
            .value(out)
            .item()
            .ok_or(NdError::NotScalar {
                shape: tape.value(out).shape(),
            })?;
        let mut grads = Vec::new();
        if with_grad {
            tape.backward(out)?;
            for (v, input) in vars.iter().zip(values) {
                grads.push(
                    tape.grad(*v)
                        .cloned()
                        .unwrap_or_else(|| Grid4::zeros(input.shape())),
                );
            }
        }
        Ok((loss, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work: Vec<Grid4<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = if max_per_input >= n {
            1
        } else {
            n.div_ceil(max_per_input.max(1))
        };
        for e in (0..n).step_by(stride) {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[i].data_mut()[e] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((i, e, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
