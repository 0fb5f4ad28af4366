use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParameterSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates sampled per parameter tensor.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 64,
            seed: 0,
        }
    }
}

fn evaluate<F>(params: &ParameterSet, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut g = Graph::new(params);
    let out = f(&mut g)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape("gradient_check function must return a scalar"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v}")));
    }
    Ok(v)
}

/// Denominator floor for the relative error. Central differences carry
/// rounding noise near `ε·|f| / step` (about 1e-11 at the default step), so a
/// gradient that is exactly zero, such as an attention key bias, would
/// otherwise read as a relative error of order 1e-3.
const FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences. Returns the maximum relative error
/// `|a − c| / max(|a|, |c|, FLOOR)` over the sampled coordinates of every
/// trainable parameter.
pub fn gradient_check<F>(params: &ParameterSet, config: &GradCheckConfig, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    if config.step <= 0.0 {
        return Err(Error::InvalidInput("gradient_check step must be positive".into()));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        if !g.value(out).is_finite() {
            return Err(Error::Numeric("function value".into()));
        }
        g.backward(out)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for id in params.ids() {
        if !params.is_trainable(params.group(id)) {
            continue;
        }
        let n = params.value(id).len();
        let coords: Vec<usize> = if n <= config.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, config.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let original = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = original + config.step;
            let plus = evaluate(&work, &f)?;
            work.value_mut(id).data_mut()[i] = original - config.step;
            let minus = evaluate(&work, &f)?;
            work.value_mut(id).data_mut()[i] = original;

            let central = (plus - minus) / (2.0 * config.step);
            let a = analytic.component(id, i);
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
