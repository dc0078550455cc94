//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{backprop_gradients, Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over every probed coordinate.
    pub max_rel_error: f64,
    pub probes: usize,
}

/// Compare the tape gradient of `f` against central differences with step
/// `eps` at (up to `per_input`) random coordinates of each input.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`
/// where `floor` is 1% of the largest numeric gradient magnitude seen for
/// that input, so coordinates whose true gradient is essentially zero are
/// judged against the scale of the tensor rather than against round-off.
pub fn check_gradients<F, R>(
    inputs: &[Tensor<f64>],
    eps: f64,
    per_input: Option<usize>,
    rng: &mut R,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut work = inputs.to_vec();
    for (i, (x, &v)) in inputs.iter().zip(&vars).enumerate() {
        let zero = Tensor::zeros(x.shape());
        let analytic = grads.wrt(v).unwrap_or(&zero);
        let idx: Vec<usize> = match per_input {
            Some(n) if n < x.len() => sample(rng, x.len(), n).into_vec(),
            _ => (0..x.len()).collect(),
        };
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = x.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        let (w, n) = score(analytic.data(), &idx, &numeric, 1e-10);
        worst = worst.max(w);
        probes += n;
    }
    Ok(GradCheck {
        max_rel_error: worst,
        probes,
    })
}

/// [`check_gradients`] for named parameters: `f` builds the loss from the
/// store it is handed, which is perturbed one coordinate at a time.
///
/// Differences are also floored at `1e-6·max(1, |loss|)`: a whole network's
/// loss carries round-off of about 1e-16·|loss|, i.e. ~1e-10 in the
/// difference quotient at `eps = 1e-6`, and some parameters (key biases under
/// softmax) have an exactly zero gradient.
pub fn check_param_gradients<F, R>(
    params: &ParamStore<f64>,
    eps: f64,
    per_param: Option<usize>,
    rng: &mut R,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let floor = 1e-6 * tape.value(loss).data()[0].abs().max(1.0);
    let grads = backprop_gradients(loss, params, tape)?;
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut work = params.clone();
    for (name, x) in params.iter() {
        let idx: Vec<usize> = match per_param {
            Some(n) if n < x.len() => sample(rng, x.len(), n).into_vec(),
            _ => (0..x.len()).collect(),
        };
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = x.data()[j];
            work.get_mut(name).expect("same names").data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(name).expect("same names").data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(name).expect("same names").data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        let (w, n) = score(grads[name.as_str()].data(), &idx, &numeric, floor);
        worst = worst.max(w);
        probes += n;
    }
    Ok(GradCheck {
        max_rel_error: worst,
        probes,
    })
}

fn score(analytic: &[f64], idx: &[usize], numeric: &[f64], abs_floor: f64) -> (f64, usize) {
    let scale = numeric.iter().fold(0.0f64, |m, n| m.max(n.abs()));
    let floor = (0.01 * scale).max(abs_floor);
    let worst = idx
        .iter()
        .zip(numeric)
        .map(|(&j, &n)| {
            let a = analytic[j];
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0f64, f64::max);
    (worst, idx.len())
}
