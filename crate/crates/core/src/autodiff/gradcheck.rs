//! Central-difference verification of analytic gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Coordinates drawn uniformly without replacement across all tensors.
    pub samples: usize,
    pub seed: u64,
    /// Relative error below which a coordinate passes without kink analysis.
    pub tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            samples: 200,
            seed: 0,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates excluded because the one-sided slopes disagree (ReLU kink,
    /// pooling or argmin tie inside the step).
    pub skipped_kinks: usize,
    /// `(tensor, index)` of the worst checked coordinate.
    pub worst: Option<(usize, usize)>,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `gradient(params)` against central differences of `value` at
/// randomly sampled coordinates.
pub fn grad_check<V, G>(
    params: &mut [Tensor<f64>],
    mut value: V,
    gradient: G,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    V: FnMut(&[Tensor<f64>]) -> Result<f64>,
    G: FnOnce(&[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>,
{
    if cfg.h <= 0.0 {
        return Err(Error::Config(format!("grad_check step must be positive, got {}", cfg.h)));
    }
    let analytic = gradient(params)?;
    if analytic.len() != params.len()
        || analytic.iter().zip(params.iter()).any(|(g, p)| g.shape() != p.shape())
    {
        return Err(Error::Contract("gradient shapes do not match parameter shapes".into()));
    }
    let f0 = value(params)?;
    let noise = 4.0 * f64::EPSILON * f0.abs().max(1.0) / cfg.h;

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.len();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks = sample(&mut rng, total, cfg.samples.min(total)).into_vec();
    picks.sort_unstable();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    for flat in picks {
        let t = offsets.partition_point(|&o| o <= flat) - 1;
        let i = flat - offsets[t];
        let orig = params[t].data()[i];
        params[t].data_mut()[i] = orig + cfg.h;
        let fp = value(params)?;
        params[t].data_mut()[i] = orig - cfg.h;
        let fm = value(params)?;
        params[t].data_mut()[i] = orig;

        let a = analytic[t].data()[i];
        let cd = (fp - fm) / (2.0 * cfg.h);
        // Slopes this close to zero (e.g. shift-invariant BN betas) cannot be
        // resolved to a relative error by the difference quotient.
        let unresolvable = a.abs().max(cd.abs()) < 1e3 * noise && (a - cd).abs() <= noise;
        let err = if unresolvable { 0.0 } else { rel_err(a, cd) };
        if err > cfg.tol {
            let fwd = (fp - f0) / cfg.h;
            let bwd = (f0 - fm) / cfg.h;
            let gap = (fwd - bwd).abs();
            if gap >= (a - cd).abs() && gap > 1e3 * noise {
                report.skipped_kinks += 1;
                continue;
            }
        }
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((t, i));
        }
    }
    Ok(report)
}
