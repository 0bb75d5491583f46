//! Central finite-difference verification of [`Layer::backward`].
//!
//! The scalar under test is `L = sum(forward(x) * R)` for a fixed random
//! projection `R`, so `dL/dy = R` is fed to `backward`. Non-trainable
//! buffers (batch-norm running statistics) are not checked.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{zero_grads, Layer, Mode, NnError, Tensor3};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Check a random subset of this many coordinates when the fragment has
    /// more. `None` checks everything.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            mode: Mode::Train,
            seed: 0,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinate with the largest error, e.g. `input[17]` or `attn.wq[3]`.
    pub worst: String,
    /// Coordinates whose one-sided differences disagree by more than smooth
    /// curvature allows, i.e. a ReLU or max boundary lies within `eps`.
    /// Central differences are meaningless there.
    pub kinks: usize,
}

/// One-sided slopes of a C2 function differ by about `eps * f''`; a jump
/// larger than this multiple of `eps` is treated as a kink.
pub const KINK_CURVATURE: f64 = 100.0;

fn is_kink(forward: f64, backward: f64, eps: f64) -> bool {
    (forward - backward).abs() > KINK_CURVATURE * eps * forward.abs().max(backward.abs()).max(1.0)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Copy)]
enum Coord {
    Input(usize),
    Param(usize, usize),
}

fn objective(layer: &mut dyn Layer, x: &Tensor3, r: &Tensor3, mode: Mode) -> Result<f64, NnError> {
    let y = layer.forward(x, mode)?;
    Ok((&y * r).sum())
}

pub fn grad_check(
    layer: &mut dyn Layer,
    input: &Tensor3,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    zero_grads(layer);
    let y = layer.forward(input, opts.mode)?;
    let r = Tensor3::from_shape_simple_fn(y.raw_dim(), || rng.random_range(-1.0..1.0));
    let dx = layer.backward(&r)?;
    let dx = dx.as_standard_layout().into_owned();

    let trainable: Vec<usize> = layer
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, _)| i)
        .collect();
    let analytic_params: Vec<Vec<f64>> = {
        let params = layer.params();
        trainable
            .iter()
            .map(|&i| params[i].grad.iter().copied().collect())
            .collect()
    };

    let mut coords: Vec<Coord> = (0..input.len()).map(Coord::Input).collect();
    for (slot, grads) in analytic_params.iter().enumerate() {
        coords.extend((0..grads.len()).map(|j| Coord::Param(slot, j)));
    }
    if let Some(k) = opts.max_coords {
        if coords.len() > k {
            let mut picked = sample(&mut rng, coords.len(), k).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }

    let names: Vec<String> = {
        let params = layer.params();
        trainable.iter().map(|&i| params[i].name.clone()).collect()
    };
    let mut x = input.as_standard_layout().into_owned();
    let l0 = objective(layer, &x, &r, opts.mode)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
        kinks: 0,
    };
    for coord in coords {
        let (analytic, lp, lm, label) = match coord {
            Coord::Input(i) => {
                let orig = x.as_slice().expect("standard")[i];
                x.as_slice_mut().expect("standard")[i] = orig + opts.eps;
                let lp = objective(layer, &x, &r, opts.mode)?;
                x.as_slice_mut().expect("standard")[i] = orig - opts.eps;
                let lm = objective(layer, &x, &r, opts.mode)?;
                x.as_slice_mut().expect("standard")[i] = orig;
                let analytic = dx.as_slice().expect("standard")[i];
                (analytic, lp, lm, format!("input[{i}]"))
            }
            Coord::Param(slot, j) => {
                let pi = trainable[slot];
                let orig = layer.params()[pi].value.as_slice().expect("standard")[j];
                let set = |layer: &mut dyn Layer, v: f64| {
                    layer.params_mut()[pi].value.as_slice_mut().expect("standard")[j] = v;
                };
                set(layer, orig + opts.eps);
                let lp = objective(layer, &x, &r, opts.mode)?;
                set(layer, orig - opts.eps);
                let lm = objective(layer, &x, &r, opts.mode)?;
                set(layer, orig);
                let analytic = analytic_params[slot][j];
                (analytic, lp, lm, format!("{}[{j}]", names[slot]))
            }
        };
        let numeric = (lp - lm) / (2.0 * opts.eps);
        if is_kink((lp - l0) / opts.eps, (l0 - lm) / opts.eps, opts.eps) {
            report.kinks += 1;
        }
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = label;
        }
    }
    // leave no dangling caches from the perturbation passes
    zero_grads(layer);
    Ok(report)
}
