//! Calibration-map tuning by minimizing the mean squared efficiency gap.
//!
//! The threshold is recomputed from `d_tau` at every objective evaluation,
//! so the loss is continuous but only piecewise smooth in the parameters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate_threshold, check_alpha, min_calibration_size, Tau};
use crate::dataset::{split_dataset, LogitsDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::maps::{CalibrationMap, MapKind, Precision};
use crate::score::{draw_u, rank_row, ScoreSpec};

/// `tau - score`; non-negative exactly when the label is in the set.
pub fn efficiency_gap(tau: f64, score_true: f64) -> f64 {
    tau - score_true
}

/// Which APS variant the loss is evaluated with.
///
/// `Randomized` exists only for ablation studies; it yields worse tuned
/// maps and is never the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScore {
    #[default]
    NonRandomized,
    Randomized { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub grid_points: usize,
    pub refine_tol: f64,
    pub gd_step: f64,
    pub gd_max_iters: usize,
    pub gd_max_halvings: usize,
    pub gd_grad_eps: f64,
    pub convergence: f64,
    /// Shuffles the validation set before halving it.
    pub seed: u64,
    pub loss_score: LossScore,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            t_min: 0.05,
            t_max: 5.0,
            grid_points: 64,
            refine_tol: 1e-4,
            gd_step: 0.1,
            gd_max_iters: 500,
            gd_max_halvings: 20,
            gd_grad_eps: 1e-4,
            convergence: 1e-8,
            seed: 0,
            loss_score: LossScore::NonRandomized,
        }
    }
}

impl TuneConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(positive(self.t_min) && positive(self.t_max) && self.t_min <= self.t_max) {
            return Err(Error::Config(format!(
                "temperature bounds must be positive and ordered, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.grid_points == 0 || self.gd_max_iters == 0 {
            return Err(Error::Config("grid points and iteration count must be at least 1".into()));
        }
        for (name, v) in [
            ("refine_tol", self.refine_tol),
            ("gd_step", self.gd_step),
            ("gd_grad_eps", self.gd_grad_eps),
            ("convergence", self.convergence),
        ] {
            if !positive(v) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Log-uniform temperature grid over `[t_min, t_max]`.
    pub fn temperature_grid(&self) -> Vec<f64> {
        log_grid(self.t_min, self.t_max, self.grid_points)
    }
}

/// `n` log-uniformly spaced points from `lo` to `hi`, endpoints included.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| match i {
            0 => lo,
            _ if i == n - 1 => hi,
            _ => (a + (b - a) * i as f64 / (n - 1) as f64).exp(),
        })
        .collect()
}

/// Written next to tuned parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub alpha: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub stalled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tuned {
    pub map: CalibrationMap,
    pub report: TuneReport,
}

/// APS true-label scores of `ds` under `map`; `u_offset` indexes the draws
/// when the loss is randomized.
fn loss_scores(map: &CalibrationMap, ds: &LogitsDataset, loss: LossScore, u_offset: u64) -> Vec<f64> {
    let k = ds.num_classes();
    let spec = ScoreSpec::aps(false);
    ds.logits()
        .par_chunks(k)
        .zip(ds.labels().par_iter())
        .enumerate()
        .map_init(
            || vec![0.0; k],
            |buf, (i, (row, &y))| {
                map.apply_into(row, buf, Precision::F64);
                let ranked = rank_row(buf);
                let u = match loss {
                    LossScore::NonRandomized => 1.0,
                    LossScore::Randomized { seed } => draw_u(seed, u_offset + i as u64),
                };
                spec.score_at_rank(&ranked, ranked.rank(y as usize), u)
            },
        )
        .collect()
}

/// Mean over `d_loss` of the squared efficiency gap, with the threshold
/// calibrated on `d_tau` under the same map.
pub fn confts_loss(map: &CalibrationMap, d_tau: &LogitsDataset, d_loss: &LogitsDataset, alpha: f64) -> Result<f64> {
    confts_loss_with(map, d_tau, d_loss, alpha, LossScore::NonRandomized)
}

pub fn confts_loss_with(
    map: &CalibrationMap,
    d_tau: &LogitsDataset,
    d_loss: &LogitsDataset,
    alpha: f64,
    loss: LossScore,
) -> Result<f64> {
    check_alpha(alpha)?;
    if d_tau.num_classes() != d_loss.num_classes() {
        return Err(Error::ClassMismatch {
            expected: d_tau.num_classes(),
            found: d_loss.num_classes(),
        });
    }
    map.check_classes(d_tau.num_classes())?;
    let tau_scores = loss_scores(map, d_tau, loss, 0);
    let tau = match calibrate_threshold(&tau_scores, alpha)? {
        Tau::Value(t) => t,
        Tau::IncludeAll => {
            return Err(Error::ThresholdDegenerate {
                n: d_tau.len(),
                alpha,
                needed: min_calibration_size(alpha),
            })
        }
    };
    let mut sq: Vec<f64> = loss_scores(map, d_loss, loss, d_tau.len() as u64)
        .into_iter()
        .map(|s| efficiency_gap(tau, s).powi(2))
        .collect();
    // summing in sorted order makes the loss independent of row order
    sq.sort_unstable_by(f64::total_cmp);
    Ok(sq.iter().sum::<f64>() / sq.len() as f64)
}

/// Halves `validation` into `(d_tau, d_loss)` after a seeded shuffle.
pub fn split_validation(validation: &LogitsDataset, seed: u64) -> Result<(LogitsDataset, LogitsDataset)> {
    let mut parts = split_dataset(validation, &SplitSpec::halves("tau", "loss", seed))?;
    Ok((parts.remove("tau").unwrap(), parts.remove("loss").unwrap()))
}

pub fn tune_temperature(validation: &LogitsDataset, alpha: f64, cfg: &TuneConfig) -> Result<Tuned> {
    let (d_tau, d_loss) = split_validation(validation, cfg.seed)?;
    tune_temperature_on(&d_tau, &d_loss, alpha, cfg)
}

/// Grid search on a log grid, then golden-section refinement between the
/// neighbours of the best grid point.
pub fn tune_temperature_on(d_tau: &LogitsDataset, d_loss: &LogitsDataset, alpha: f64, cfg: &TuneConfig) -> Result<Tuned> {
    cfg.validate()?;
    let loss_at = |t: f64| -> Result<f64> {
        confts_loss_with(&CalibrationMap::temperature(t)?, d_tau, d_loss, alpha, cfg.loss_score)
    };
    let grid = cfg.temperature_grid();
    let losses = grid.par_iter().map(|&t| loss_at(t)).collect::<Result<Vec<f64>>>()?;
    let best = (0..grid.len()).fold(0, |b, i| if losses[i] < losses[b] { i } else { b });
    let (mut t_best, mut l_best) = (grid[best], losses[best]);
    let mut iterations = grid.len();

    let mut lo = grid[best.saturating_sub(1)];
    let mut hi = grid[(best + 1).min(grid.len() - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = if hi - lo > cfg.refine_tol {
        iterations += 2;
        (loss_at(c)?, loss_at(d)?)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    while hi - lo > cfg.refine_tol {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = loss_at(c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = loss_at(d)?;
        }
        iterations += 1;
    }
    for (t, l) in [(c, fc), (d, fd)] {
        if l < l_best {
            t_best = t;
            l_best = l;
        }
    }
    Ok(Tuned {
        map: CalibrationMap::temperature(t_best)?,
        report: TuneReport {
            alpha,
            final_loss: l_best,
            iterations,
            stalled: false,
        },
    })
}

pub fn tune_map(validation: &LogitsDataset, alpha: f64, kind: MapKind, cfg: &TuneConfig) -> Result<Tuned> {
    let (d_tau, d_loss) = split_validation(validation, cfg.seed)?;
    tune_map_on(&d_tau, &d_loss, alpha, kind, cfg)
}

/// Starting point of gradient descent for `kind`.
pub fn initial_map(kind: MapKind, num_classes: usize) -> Result<CalibrationMap> {
    match kind {
        MapKind::Identity => Err(Error::Config("the identity map has no parameters to tune".into())),
        MapKind::Temperature => CalibrationMap::temperature(1.0),
        MapKind::Platt => CalibrationMap::platt(1.0, 0.0),
        MapKind::Vector => CalibrationMap::vector(vec![1.0; num_classes], vec![0.0; num_classes]),
    }
}

/// Temperature goes through [`tune_temperature_on`]; Platt and vector maps
/// use finite-difference gradient descent with a backtracking line search.
pub fn tune_map_on(
    d_tau: &LogitsDataset,
    d_loss: &LogitsDataset,
    alpha: f64,
    kind: MapKind,
    cfg: &TuneConfig,
) -> Result<Tuned> {
    if kind == MapKind::Temperature {
        return tune_temperature_on(d_tau, d_loss, alpha, cfg);
    }
    cfg.validate()?;
    let start = initial_map(kind, d_tau.num_classes())?;
    let eval = |p: &[f64]| -> Result<f64> {
        match start.with_params(p) {
            Ok(map) => confts_loss_with(&map, d_tau, d_loss, alpha, cfg.loss_score),
            // a step that leaves the valid region is simply rejected
            Err(Error::Map(_)) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    };
    descend(eval, start.params(), cfg).and_then(|(params, report)| {
        Ok(Tuned {
            map: start.with_params(&params)?,
            report: TuneReport { alpha, ..report },
        })
    })
}

/// Gradient descent with central-difference gradients. After an accepted
/// step the next trial step doubles; rejected trials halve it.
pub fn descend<F>(f: F, mut x: Vec<f64>, cfg: &TuneConfig) -> Result<(Vec<f64>, TuneReport)>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut fx = f(&x)?;
    let mut step = cfg.gd_step;
    let mut iterations = 0;
    let mut stalled = false;
    let mut probe = x.clone();
    while iterations < cfg.gd_max_iters {
        let mut grad = vec![0.0; x.len()];
        for i in 0..x.len() {
            probe[i] = x[i] + cfg.gd_grad_eps;
            let up = f(&probe)?;
            probe[i] = x[i] - cfg.gd_grad_eps;
            let down = f(&probe)?;
            probe[i] = x[i];
            grad[i] = (up - down) / (2.0 * cfg.gd_grad_eps);
        }
        let mut accepted = None;
        for _ in 0..=cfg.gd_max_halvings {
            let trial: Vec<f64> = x.iter().zip(&grad).map(|(v, g)| v - step * g).collect();
            let ft = f(&trial)?;
            if ft < fx {
                accepted = Some((trial, ft));
                break;
            }
            step /= 2.0;
        }
        let Some((next, f_next)) = accepted else {
            stalled = true;
            break;
        };
        iterations += 1;
        let change = (fx - f_next) / fx.abs().max(f64::MIN_POSITIVE);
        x = next;
        probe.clone_from(&x);
        fx = f_next;
        if change < cfg.convergence {
            break;
        }
        step *= 2.0;
    }
    Ok((
        x,
        TuneReport {
            alpha: f64::NAN,
            final_loss: fx,
            iterations,
            stalled,
        },
    ))
}
