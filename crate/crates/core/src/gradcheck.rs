//! Central finite-difference check of tape gradients.
//!
//! The graph is rebuilt from scratch for every perturbed evaluation, so the
//! check only relies on forward values. Non-scalar outputs are reduced with
//! a fixed random probe, `sum(probe * out)`, which exercises every output
//! element with a different weight.

use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor of the relative error, for near-zero gradients.
    pub floor: f64,
    /// Elements checked per input; all when `None`.
    pub max_per_input: Option<usize>,
    /// Seed of the probe and of the element subset.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            floor: 1e-6,
            max_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the largest error.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Elements whose difference quotients disagree between `h` and `h / 2`
    /// by more than the tolerance, i.e. a kink lies within `h`.
    pub skipped: usize,
}

fn scalar_loss<F>(f: &F, inputs: &[Tensor], probe: &mut Option<Tensor>, seed: u64) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = if tape.value(out).len() == 1 {
        out
    } else {
        let shape = tape.value(out).shape().to_vec();
        let p = probe.get_or_insert_with(|| {
            let mut r = rng::stream(seed, 1);
            Tensor::from_fn(&shape, |_| r.sample::<f64, _>(StandardNormal))
        });
        let p = tape.constant(p.clone());
        let prod = tape.hadamard(out, p)?;
        tape.sum(prod)
    };
    Ok((tape, vars, loss))
}

/// Compares `d f / d inputs` from the tape with central differences.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut probe = None;
    let (mut tape, vars, loss) = scalar_loss(&f, inputs, &mut probe, cfg.seed)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| alloc::vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let eval = |inputs: &[Tensor], probe: &mut Option<Tensor>| -> Result<f64> {
        let (tape, _, loss) = scalar_loss(&f, inputs, probe, cfg.seed)?;
        Ok(tape.value(loss).item())
    };
    let quotient = |work: &mut Vec<Tensor>, probe: &mut Option<Tensor>, i: usize, j: usize, h: f64| -> Result<f64> {
        let x = work[i].data()[j];
        work[i].data_mut()[j] = x + h;
        let plus = eval(work, probe)?;
        work[i].data_mut()[j] = x - h;
        let minus = eval(work, probe)?;
        work[i].data_mut()[j] = x;
        Ok((plus - minus) / (2.0 * h))
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(cfg.floor);

    let mut pick = rng::stream(cfg.seed, 2);
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        skipped: 0,
    };
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let elements: Vec<usize> = match cfg.max_per_input {
            Some(m) if m < n => (0..m).map(|_| pick.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in elements {
            let fd = quotient(&mut work, &mut probe, i, j, cfg.step)?;
            let e = rel(analytic[i][j], fd);
            if !e.is_finite() {
                return Err(Error::contract("check_gradients", "non-finite gradient"));
            }
            if e > 1e-4 {
                // a kink inside the stencil makes the two step sizes disagree
                let fd_half = quotient(&mut work, &mut probe, i, j, cfg.step / 2.0)?;
                if rel(fd, fd_half) > 1e-4 {
                    report.skipped += 1;
                    continue;
                }
            }
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // relu's gradient is exact, so checking sum(relu(x)) passes...
        let x = Tensor::vector(&[0.3, -0.7, 1.2]);
        let r = check_gradients(&[x.clone()], &GradCheckConfig::default(), |t, v| Ok(t.relu(v[0]))).unwrap();
        assert!(r.max_rel_error < 1e-6);
        assert_eq!(r.checked, 3);
        // ...while a forward that differs from its recorded op is caught:
        // scale by a constant that changes between evaluations.
        let calls = core::cell::Cell::new(0u32);
        let r = check_gradients(&[x], &GradCheckConfig::default(), |t, v| {
            calls.set(calls.get() + 1);
            let f = t.constant(Tensor::scalar(if calls.get() == 1 { 1.0 } else { 2.0 }));
            t.scale(v[0], f)
        })
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
