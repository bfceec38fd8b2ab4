//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = T::one().max(analytic.abs()).max(numeric.abs());
    (analytic - numeric).abs() / denom
}

/// Which scalar coordinates of the inputs to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// A seeded random fraction (at least one coordinate per input).
    Fraction {
        fraction: f64,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport<T> {
    pub max_rel_error: T,
    pub coords_checked: usize,
}

/// Compares `analytic` gradients against central differences of `value`
/// around `point`. `value` is evaluated with one coordinate perturbed at a
/// time and must be a pure function of its argument.
pub fn check_against<T: Scalar>(
    mut value: impl FnMut(&[Tensor<T>]) -> Result<T>,
    point: &[Tensor<T>],
    analytic: &[Tensor<T>],
    coords: Coords,
    step: T,
) -> Result<GradCheckReport<T>> {
    if point.len() != analytic.len() {
        return Err(Error::contract("one analytic gradient per input required"));
    }
    let mut work: Vec<Tensor<T>> = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        coords_checked: 0,
    };
    let two = T::lit(2.0);
    for (k, (p, a)) in point.iter().zip(analytic).enumerate() {
        if p.shape() != a.shape() {
            return Err(Error::shape("grad_check", p.shape(), a.shape()));
        }
        let picks: Vec<usize> = match coords {
            Coords::All => (0..p.len()).collect(),
            Coords::Fraction { fraction, seed } => {
                let n = ((p.len() as f64 * fraction).ceil() as usize).clamp(1, p.len().max(1));
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9));
                let mut v = sample(&mut rng, p.len(), n).into_vec();
                v.sort_unstable();
                v
            }
        };
        for i in picks {
            let orig = p.data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = value(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = value(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (two * step);
            let err = relative_error(a.data()[i], numeric);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

/// Gradient check of a scalar function of several tensors built on a tape.
pub fn grad_check_inputs<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    coords: Coords,
    step: T,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let eval = |xs: &[Tensor<T>]| -> Result<T> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars)?;
        scalar_of(&out.value())
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vars)?;
    scalar_of(&out.value())?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
        })
        .collect();
    check_against(eval, inputs, &analytic, coords, step)
}

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central differences with the given step.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    grad_check_inputs(
        |tape, xs| f(tape, xs[0]),
        std::slice::from_ref(x),
        Coords::All,
        step,
    )
    .map(|r| r.max_rel_error)
}

fn scalar_of<T: Scalar>(t: &Tensor<T>) -> Result<T> {
    if t.len() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar-valued function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
