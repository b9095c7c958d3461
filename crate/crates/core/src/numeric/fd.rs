//! Central finite-difference gradient checking.
//!
//! Kept independent of the backward pass: the numeric side only ever calls
//! the forward closure on perturbed copies of the inputs.

use crate::error::Result;

use super::tensor::Tensor;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_elem: usize,
    pub tol: f64,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compare analytic gradients of a scalar-valued `f` against central
/// differences with the given step, elementwise over every input.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    // Analytic side: rebuild inputs as tracked leaves so the caller does not
    // have to pass params.
    let tracked: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.data().to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    let loss = f(&tracked)?;
    let grads = loss.backward()?;

    let mut max_rel_err: f64 = 0.0;
    let mut worst_input = 0;
    let mut worst_elem = 0;

    for (ii, base) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(&tracked[ii]) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; base.numel()],
        };
        for ei in 0..base.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = base.data().to_vec();
                data[ei] += delta;
                let mut probe: Vec<Tensor> = Vec::with_capacity(inputs.len());
                for (j, t) in inputs.iter().enumerate() {
                    if j == ii {
                        probe.push(Tensor::new(data.clone(), t.shape())?);
                    } else {
                        probe.push(t.clone());
                    }
                }
                Ok(f(&probe)?.item())
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            let a = analytic[ei];
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-8);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_input = ii;
                worst_elem = ei;
            }
        }
    }

    Ok(FdReport {
        max_rel_err,
        worst_input,
        worst_elem,
        tol,
    })
}
