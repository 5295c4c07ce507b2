//! Central finite differences against tape gradients.

use std::fmt;

use crate::error::Result;
use crate::real::{r, Real};
use crate::tensor::{Tape, Tensor, Var};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    /// Set when the function itself failed; the check then fails.
    pub error: Option<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_err <= self.tol
    }

    fn failed(tol: f64, e: impl ToString) -> Self {
        Self {
            max_rel_err: f64::INFINITY,
            tol,
            worst: None,
            analytic_at_worst: f64::NAN,
            numeric_at_worst: f64::NAN,
            checked: 0,
            error: Some(e.to_string()),
        }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(e) = &self.error {
            return write!(f, "error: {e}");
        }
        write!(
            f,
            "max rel err {:.3e} (tol {:.1e}) over {} elements",
            self.max_rel_err, self.tol, self.checked
        )?;
        if let Some((i, j)) = self.worst {
            write!(
                f,
                ", worst input {i}[{j}]: tape {:.6e} vs fd {:.6e}",
                self.analytic_at_worst, self.numeric_at_worst
            )?;
        }
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

fn eval<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    v.item().ok_or_else(|| crate::Error::NotScalar {
        shape: v.shape().to_vec(),
    })
}

/// Compares the tape gradient of scalar-valued `f` w.r.t. every element of
/// every input against `(f(x + h) - f(x - h)) / 2h`.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], h: f64, tol: f64) -> CheckReport
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let analytic: Vec<Tensor<T>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.var(x.clone())).collect();
        let grads = match f(&tape, &vars).and_then(|loss| tape.backward(loss)) {
            Ok(g) => g,
            Err(e) => return CheckReport::failed(tol, e),
        };
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let mut report = CheckReport {
        max_rel_err: 0.0,
        tol,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        error: None,
    };
    let hh: T = r(h);
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (ii, grad) in analytic.iter().enumerate() {
        for j in 0..work[ii].numel() {
            let orig = work[ii].data()[j];
            work[ii].data_mut()[j] = orig + hh;
            let plus = eval(&f, &work);
            work[ii].data_mut()[j] = orig - hh;
            let minus = eval(&f, &work);
            work[ii].data_mut()[j] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p.to_f64_lossy(), m.to_f64_lossy()),
                (Err(e), _) | (_, Err(e)) => return CheckReport::failed(tol, e),
            };
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[j].to_f64_lossy();
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = e;
                report.worst = Some((ii, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report
}

/// Reduces an arbitrary-shaped output to a scalar with fixed pseudo-random
/// weights, so every output element influences the checked gradient.
pub fn weighted_sum<'t, T: Real>(out: Var<'t, T>, seed: u64) -> Result<Var<'t, T>> {
    let n = out.value().numel();
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let w = Tensor::from_fn(&out.shape(), |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        r::<T>(((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0)
    });
    debug_assert_eq!(w.numel(), n);
    out.mul_const(w)?.sum()
}
