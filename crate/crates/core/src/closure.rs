//! End-to-end closure study: does calibration recover a known setting?
//!
//! The protocol: fix a ground-truth setting theta*, simulate the campaign and
//! fit the observed coefficient vector x_true; generate a training set over
//! the prior, train the ratio classifier, and sample the posterior at
//! x_true. The inferred setting is then judged in observable space: the
//! campaign is re-simulated at the posterior point estimate with fresh seeds
//! and the re-fitted coefficients are compared to x_true, coefficient by
//! coefficient, against a baseline that re-simulates at a random prior draw
//! instead.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::calibration::mcmc::{
    proposal_scales, sample_posterior, summarize, PosteriorSummary,
};
use crate::calibration::{
    coefficients_for, generate_training_set, train_calibrator, CalibrationError, PriorBox,
    SimulationStudy, TrainingTuple,
};
use crate::engine::substream_seed;

/// Budgets and inputs of one closure study.
pub struct ClosureSpec<'a> {
    pub study: SimulationStudy<'a>,
    pub prior: PriorBox,
    pub theta_true: [f64; 3],
    /// Training draws from the prior.
    pub n_train: usize,
    pub dims: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Post burn-in sampler states.
    pub n_samples: usize,
    pub burn_in: usize,
    /// Proposal standard deviation as a fraction of each prior range.
    pub proposal_frac: f64,
    /// Fresh-seed re-simulations at each judged setting.
    pub n_resim: usize,
    pub seed: u64,
}

/// Re-simulation accuracy of one setting against the true coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResimStats {
    pub theta: [f64; 3],
    /// Median over runs of |x_true - x| / |x_true| per coefficient.
    pub per_coefficient_median_error: [f64; 3],
    /// Median over runs of the summed per-coefficient relative error.
    pub median_total_error: f64,
    /// Median fitted coefficients over the runs.
    pub median_coefficients: [f64; 3],
    /// Runs that produced a usable fit.
    pub runs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosureReport {
    pub theta_true: [f64; 3],
    pub x_true: [f64; 3],
    pub posterior: PosteriorSummary,
    pub final_training_loss: f64,
    /// Re-simulation at the posterior mode.
    pub calibrated: ResimStats,
    /// Re-simulation at a random prior draw, same seeds and budget.
    pub baseline: ResimStats,
}

fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Re-simulates the campaign `n_resim` times at `theta` with fresh seeds and
/// scores the fitted coefficients against `x_true`.
pub fn resim_stats(
    study: &SimulationStudy<'_>,
    theta: [f64; 3],
    x_true: &[f64; 3],
    n_resim: usize,
    seed: u64,
) -> Result<ResimStats, CalibrationError> {
    let mut fitted: Vec<[f64; 3]> = Vec::with_capacity(n_resim);
    for k in 0..n_resim {
        let run_seed = substream_seed(seed, &format!("resim-{k}"));
        if let Some(x) = coefficients_for(study, theta, run_seed)? {
            fitted.push(x);
        }
    }
    if fitted.is_empty() {
        return Err(CalibrationError::Invalid(format!(
            "no usable fit in {n_resim} re-simulations at theta {theta:?}"
        )));
    }
    let per_coefficient_median_error = std::array::from_fn(|d| {
        let mut errs: Vec<f64> =
            fitted.iter().map(|x| (x_true[d] - x[d]).abs() / x_true[d].abs()).collect();
        median(&mut errs)
    });
    let mut totals: Vec<f64> = fitted
        .iter()
        .map(|x| (0..3).map(|d| (x_true[d] - x[d]).abs() / x_true[d].abs()).sum())
        .collect();
    let median_coefficients = std::array::from_fn(|d| {
        let mut vals: Vec<f64> = fitted.iter().map(|x| x[d]).collect();
        median(&mut vals)
    });
    Ok(ResimStats {
        theta,
        per_coefficient_median_error,
        median_total_error: median(&mut totals),
        median_coefficients,
        runs: fitted.len(),
    })
}

/// Runs the full study. Every stage draws its randomness from a labelled
/// substream of `spec.seed`, so reports are reproducible end to end.
pub fn run_closure(spec: &ClosureSpec<'_>) -> Result<ClosureReport, CalibrationError> {
    let seed = spec.seed;
    let x_true = coefficients_for(&spec.study, spec.theta_true, substream_seed(seed, "truth"))?
        .ok_or_else(|| {
            CalibrationError::Invalid("ground-truth run produced no usable fit".into())
        })?;

    let tuples: Vec<TrainingTuple> = generate_training_set(
        &spec.study,
        &spec.prior,
        spec.n_train,
        substream_seed(seed, "train-gen"),
    )?;
    let (bundle, report) = train_calibrator(
        &tuples,
        &spec.prior,
        &spec.dims,
        spec.epochs,
        spec.batch,
        spec.lr,
        substream_seed(seed, "train"),
    );

    let scales = proposal_scales(&spec.prior, spec.proposal_frac);
    let chain = sample_posterior(
        &bundle,
        &x_true,
        spec.n_samples,
        spec.burn_in,
        &scales,
        substream_seed(seed, "mcmc"),
    );
    let posterior = summarize(&chain, &spec.prior);

    let calibrated =
        resim_stats(&spec.study, posterior.mode, &x_true, spec.n_resim, substream_seed(seed, "resim"))?;
    let mut baseline_rng = rand_chacha::ChaCha8Rng::seed_from_u64(substream_seed(seed, "baseline"));
    let theta_baseline = spec.prior.sample(&mut baseline_rng);
    let baseline =
        resim_stats(&spec.study, theta_baseline, &x_true, spec.n_resim, substream_seed(seed, "resim"))?;

    Ok(ClosureReport {
        theta_true: spec.theta_true,
        x_true,
        posterior,
        final_training_loss: *report.epoch_losses.last().unwrap_or(&f64::NAN),
        calibrated,
        baseline,
    })
}

impl ClosureReport {
    /// Human-readable summary table of the recovered setting and the
    /// re-simulation accuracy per coefficient.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let pct = |v: f64| format!("{:.2}%", 100.0 * v);
        out.push_str("setting        true        mode        median\n");
        for (name, d) in [("overhead", 0), ("mu", 1), ("sigma", 2)] {
            out.push_str(&format!(
                "{name:<14} {:<11.5} {:<11.5} {:<11.5}\n",
                self.theta_true[d], self.posterior.mode[d], self.posterior.median[d]
            ));
        }
        out.push_str(&format!(
            "acceptance rate {:.3}, {} samples\n\n",
            self.posterior.acceptance_rate, self.posterior.n_samples
        ));
        out.push_str(
            "run         a_sim       E(a_sim)    b_sim       E(b_sim)    c_sim       E(c_sim)    sum(E)\n",
        );
        out.push_str(&format!(
            "true        {:<11.5} {:<11} {:<11.5} {:<11} {:<11.5} {:<11} {:<11}\n",
            self.x_true[0], "-", self.x_true[1], "-", self.x_true[2], "-", "-"
        ));
        for (name, stats) in [("calibrated", &self.calibrated), ("baseline", &self.baseline)] {
            out.push_str(&format!(
                "{name:<11} {:<11.5} {:<11} {:<11.5} {:<11} {:<11.5} {:<11} {:<11}\n",
                stats.median_coefficients[0],
                pct(stats.per_coefficient_median_error[0]),
                stats.median_coefficients[1],
                pct(stats.per_coefficient_median_error[1]),
                stats.median_coefficients[2],
                pct(stats.per_coefficient_median_error[2]),
                pct(stats.median_total_error),
            ));
        }
        out
    }
}
