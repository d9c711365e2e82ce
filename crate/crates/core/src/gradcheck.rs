//! Central-difference gradient verification.
//!
//! Numerical derivatives are always taken in fp64; the analytic side can run
//! on an fp64 or fp32 graph.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Element;

/// A scalar function of a parameter store that can be evaluated at any
/// precision.
pub trait Differentiable {
    fn loss<T: Element>(&self, tape: &mut Tape<T>, params: &ParamStore<T>) -> Result<Var>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step, must lie in `[1e-6, 1e-4]`.
    pub step: f64,
    /// Denominator floor in `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

/// Errors are measured per parameter tensor: the largest elementwise
/// deviation divided by the tensor's gradient scale,
/// `max|a − n| / max(max|a|, max|n|, floor)`. Elements whose true gradient
/// is (near) zero are thereby judged against the magnitude of their
/// neighbours rather than against finite-difference roundoff.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the largest deviation in the worst
    /// tensor.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Relative error per parameter tensor, in store order.
    pub per_param: Vec<(String, f64)>,
    /// Largest elementwise `|a − n| / max(|a|, |n|, floor)`; informational.
    pub max_elementwise_rel_err: f64,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<D: Differentiable>(f: &D, params: &ParamStore<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = f.loss(&mut tape, params)?;
    tape.value(loss).item()
}

/// Compares the analytic gradient of `f` (computed at precision `T`) with
/// fp64 central differences for every element of every parameter.
pub fn grad_check<T: Element, D: Differentiable>(
    f: &D,
    params: &ParamStore<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&opts.step) {
        return Err(Error::Contract(format!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            opts.step
        )));
    }
    let cast: ParamStore<T> = params.cast();
    let mut tape = Tape::new();
    let loss = f.loss(&mut tape, &cast)?;
    let grads = tape.backward(loss)?;

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        per_param: Vec::new(),
        max_elementwise_rel_err: 0.0,
    };
    let h = opts.step;
    for id in params.ids() {
        let name = params.name(id).to_string();
        let analytic = grads.param(id);
        let (mut max_diff, mut max_a, mut max_n, mut at) = (0f64, 0f64, 0f64, 0usize);
        for i in 0..params.get(id).numel() {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = eval_loss(f, &probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = eval_loss(f, &probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g.data()[i].as_f64());
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{name}`[{i}]: analytic {a}, numeric {numeric}"
                )));
            }
            let diff = (a - numeric).abs();
            if diff > max_diff {
                max_diff = diff;
                at = i;
            }
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
            report.max_elementwise_rel_err = report
                .max_elementwise_rel_err
                .max(relative_error(a, numeric, opts.floor));
            report.checked += 1;
        }
        let err = max_diff / max_a.max(max_n).max(opts.floor);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.worst = Some((name.clone(), at));
        }
        report.per_param.push((name, err));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamId;
    use crate::params::ParamRole;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Linear {
        x: Tensor<f64>,
    }

    impl Differentiable for Linear {
        fn loss<T: Element>(&self, tape: &mut Tape<T>, p: &ParamStore<T>) -> Result<Var> {
            let x = tape.constant(self.x.cast());
            let w = p.bind(tape, ParamId(0));
            let b = p.bind(tape, ParamId(1));
            let y = tape.matmul_nt(x, w)?;
            let y = tape.add_bias(y, b, 1)?;
            let y = tape.gelu(y);
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        }
    }

    fn linear_setup() -> (Linear, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamStore::new();
        p.add("w", ParamRole::Static, Tensor::randn(&[3, 4], 0.5, &mut rng)).unwrap();
        p.add("b", ParamRole::Static, Tensor::randn(&[3], 0.5, &mut rng)).unwrap();
        (
            Linear {
                x: Tensor::randn(&[5, 4], 1.0, &mut rng),
            },
            p,
        )
    }

    #[test]
    fn linear_layer_fp64() {
        let (f, p) = linear_setup();
        let r = grad_check::<f64, _>(&f, &p, GradCheckOptions::default()).unwrap();
        assert_eq!(r.checked, 15);
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
    }

    #[test]
    fn linear_layer_fp32_graph() {
        let (f, p) = linear_setup();
        let opts = GradCheckOptions {
            step: 1e-4,
            floor: 1e-3,
        };
        let r = grad_check::<f32, _>(&f, &p, opts).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn step_outside_range_rejected() {
        let (f, p) = linear_setup();
        let opts = GradCheckOptions {
            step: 1e-2,
            ..Default::default()
        };
        assert!(grad_check::<f64, _>(&f, &p, opts).is_err());
    }

    struct Blowup;

    impl Differentiable for Blowup {
        fn loss<T: Element>(&self, tape: &mut Tape<T>, p: &ParamStore<T>) -> Result<Var> {
            let w = p.bind(tape, ParamId(0));
            let inf = tape.constant(Tensor::full(&[1], T::infinity()));
            let y = tape.mul(w, inf)?;
            Ok(tape.sum(y))
        }
    }

    #[test]
    fn non_finite_names_parameter() {
        let mut p = ParamStore::new();
        p.add("exploding", ParamRole::Static, Tensor::ones(&[1])).unwrap();
        let err = grad_check::<f64, _>(&Blowup, &p, GradCheckOptions::default()).unwrap_err();
        assert!(err.to_string().contains("exploding"), "{err}");
    }
}
