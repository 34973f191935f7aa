use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, ParamId};
use crate::error::Result;
use crate::model::InstructionModel;

/// One sampled coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> usize {
        self.coordinates.iter().filter(|c| c.rel_err <= self.tolerance).count()
    }

    pub fn pass_fraction(&self) -> f64 {
        self.passed() as f64 / self.coordinates.len().max(1) as f64
    }

    pub fn max_rel_err(&self) -> f64 {
        self.coordinates.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps coordinates with
/// vanishing gradients from dividing rounding noise by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of `objective` with central differences on
/// `count` coordinates drawn uniformly from the scalars of `ids`.
pub fn gradcheck<F>(
    model: &mut InstructionModel,
    ids: &[ParamId],
    count: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
    objective: F,
) -> Result<GradCheckReport>
where
    F: Fn(&InstructionModel) -> Result<(f64, Gradients)>,
{
    let (_, grads) = objective(model)?;
    let sizes: Vec<usize> = ids.iter().map(|&id| model.params.get(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coordinates = Vec::with_capacity(count);
    for _ in 0..count {
        let mut flat = rng.random_range(0..total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let id = ids[k];
        let cols = model.params.get(id).ncols();
        let at = [flat / cols, flat % cols];
        let analytic = grads.get(id).map_or(0.0, |g| g[at]);
        let original = model.params.get(id)[at];
        let mut eval_at = |v: f64| -> Result<f64> {
            model.params.get_mut(id)[at] = v;
            Ok(objective(model)?.0)
        };
        let plus = eval_at(original + step)?;
        let minus = eval_at(original - step)?;
        eval_at(original)?;
        let numeric = (plus - minus) / (2.0 * step);
        coordinates.push(CoordinateCheck {
            param: model.params.name(id).to_string(),
            index: flat,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { coordinates, tolerance })
}
