//! Central finite-difference check of the analytic gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{loss, loss_and_grad, Instance, ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Tensors larger than this are checked on a random subset of coordinates.
    pub max_coords: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-4,
            max_coords: 64,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn set_coord(params: &mut ModelParams, tensor: usize, coord: usize, value: f64) -> f64 {
    let mut k = 0;
    let mut old = 0.0;
    params.visit_mut(|_, t| {
        if k == tensor {
            old = t[coord];
            t[coord] = value;
        }
        k += 1;
    });
    old
}

/// Checks the model's own gradient.
pub fn grad_check(cfg: &ModelConfig, params: &ModelParams, inst: &Instance, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(cfg, params, inst)?;
    grad_check_against(cfg, params, inst, &analytic, gc)
}

/// Compares a supplied gradient with finite differences of the loss.
pub fn grad_check_against(
    cfg: &ModelConfig,
    params: &ModelParams,
    inst: &Instance,
    analytic: &ModelParams,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    analytic.visit(|name, t| grads.push((name.to_string(), t.to_vec())));
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let mut work = params.clone();
    let mut tensors = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    for (ti, (name, g)) in grads.iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let coords: Vec<usize> = if g.len() <= gc.max_coords {
            (0..g.len()).collect()
        } else {
            let mut c = sample(&mut rng, g.len(), gc.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = TensorCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &c in &coords {
            let x = set_coord(&mut work, ti, c, 0.0);
            set_coord(&mut work, ti, c, x + gc.epsilon);
            let plus = loss(cfg, &work, inst)?;
            set_coord(&mut work, ti, c, x - gc.epsilon);
            let minus = loss(cfg, &work, inst)?;
            set_coord(&mut work, ti, c, x);
            let numeric = (plus - minus) / (2.0 * gc.epsilon);
            let mut err = relative_error(g[c], numeric, gc.floor);
            if err.is_nan() {
                err = f64::INFINITY;
            }
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_analytic = g[c];
                check.worst_numeric = numeric;
            }
        }
        max_rel_error = max_rel_error.max(check.max_rel_error);
        tensors.push(check);
    }
    Ok(GradCheckReport { tensors, max_rel_error })
}
