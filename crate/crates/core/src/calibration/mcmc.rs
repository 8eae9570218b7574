//! Metropolis-Hastings over the setting space, driven by a learned log
//! ratio.
//!
//! The sampler never evaluates a likelihood: the classifier logit stands in
//! for `log p(x_obs | theta)` up to a theta-independent constant, which
//! cancels in the acceptance ratio. Proposals are independent Gaussian steps
//! per dimension; anything outside the prior box is rejected outright.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::{CalibrationError, CalibratorBundle, PriorBox, HISTOGRAM_BINS};

#[derive(Debug, Clone)]
pub struct MarkovChain {
    /// Post burn-in states, one per sampling-phase iteration.
    pub states: Vec<[f64; 3]>,
    pub burn_in: usize,
    /// Acceptances / proposals over the sampling phase only.
    pub acceptance_rate: f64,
}

/// Per-dimension proposal standard deviations as a fraction of each prior
/// range.
pub fn proposal_scales(prior: &PriorBox, frac: f64) -> [f64; 3] {
    std::array::from_fn(|d| frac * prior.width(d))
}

/// Samples `n_samples` states after `burn_in` iterations, starting from
/// `init` (or a prior draw). `log_ratio` receives a candidate theta and
/// returns the learned log likelihood ratio at the observed summary.
pub fn sample<F: FnMut(&[f64; 3]) -> f64>(
    mut log_ratio: F,
    prior: &PriorBox,
    n_samples: usize,
    burn_in: usize,
    scales: &[f64; 3],
    seed: u64,
    init: Option<[f64; 3]>,
) -> MarkovChain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps: [rand_distr::Normal<f64>; 3] =
        std::array::from_fn(|d| rand_distr::Normal::new(0.0, scales[d]).expect("finite scale"));

    let mut current = init.unwrap_or_else(|| prior.sample(&mut rng));
    assert!(prior.contains(&current), "initial state must lie in the prior box");
    let mut current_lr = log_ratio(&current);

    let mut states = Vec::with_capacity(n_samples);
    let mut accepted = 0usize;
    for it in 0..burn_in + n_samples {
        let candidate: [f64; 3] =
            std::array::from_fn(|d| current[d] + steps[d].sample(&mut rng));
        let mut accept = false;
        if prior.contains(&candidate) {
            let cand_lr = log_ratio(&candidate);
            // ln u < delta  <=>  u < min(1, exp(delta)) for uniform u.
            let u: f64 = rng.gen_range(0.0..1.0f64);
            if u.ln() < cand_lr - current_lr {
                current = candidate;
                current_lr = cand_lr;
                accept = true;
            }
        }
        if it >= burn_in {
            states.push(current);
            if accept {
                accepted += 1;
            }
        }
    }
    MarkovChain {
        states,
        burn_in,
        acceptance_rate: if n_samples > 0 { accepted as f64 / n_samples as f64 } else { 0.0 },
    }
}

/// Runs the sampler against a trained bundle at the observed coefficient
/// vector.
pub fn sample_posterior(
    bundle: &CalibratorBundle,
    x_obs: &[f64; 3],
    n_samples: usize,
    burn_in: usize,
    scales: &[f64; 3],
    seed: u64,
) -> MarkovChain {
    sample(
        |theta| bundle.log_ratio(theta, x_obs),
        &bundle.prior,
        n_samples,
        burn_in,
        scales,
        seed,
        None,
    )
}

/// Per-axis histogram mode over the prior range: the centre of the fullest
/// of `bins` equal-width bins, ties resolved toward the lower bin.
pub fn posterior_mode(states: &[[f64; 3]], prior: &PriorBox, bins: usize) -> [f64; 3] {
    assert!(bins >= 1 && !states.is_empty());
    std::array::from_fn(|d| {
        let lo = prior.lo[d];
        let width = prior.width(d) / bins as f64;
        let mut counts = vec![0usize; bins];
        for s in states {
            let b = (((s[d] - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let best = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        lo + (best as f64 + 0.5) * width
    })
}

/// Per-axis median; even-length chains average the two central order
/// statistics.
pub fn posterior_median(states: &[[f64; 3]]) -> [f64; 3] {
    assert!(!states.is_empty());
    std::array::from_fn(|d| {
        let mut v: Vec<f64> = states.iter().map(|s| s[d]).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    })
}

/// The point estimates and sampler health reported after a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mode: [f64; 3],
    pub median: [f64; 3],
    pub acceptance_rate: f64,
    pub n_samples: usize,
}

pub fn summarize(chain: &MarkovChain, prior: &PriorBox) -> PosteriorSummary {
    PosteriorSummary {
        mode: posterior_mode(&chain.states, prior, HISTOGRAM_BINS),
        median: posterior_median(&chain.states),
        acceptance_rate: chain.acceptance_rate,
        n_samples: chain.states.len(),
    }
}

/// Chain CSV schema: `overhead,mu,sigma`, one post burn-in state per row.
#[derive(Debug, Serialize, Deserialize)]
struct ChainRow {
    overhead: f64,
    mu: f64,
    sigma: f64,
}

pub fn write_chain_csv(path: &Path, states: &[[f64; 3]]) -> Result<(), CalibrationError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in states {
        w.serialize(ChainRow { overhead: s[0], mu: s[1], sigma: s[2] })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_chain_csv(path: &Path) -> Result<Vec<[f64; 3]>, CalibrationError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: ChainRow = row?;
        out.push([row.overhead, row.mu, row.sigma]);
    }
    Ok(out)
}

pub fn write_summary_json(
    path: &Path,
    summary: &PosteriorSummary,
) -> Result<(), CalibrationError> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn prior() -> PriorBox {
        PriorBox::new([0.0, 0.0, 0.0], [0.5, 10.0, 5.0]).unwrap()
    }

    #[test]
    fn constant_ratio_explores_the_whole_box() {
        let p = prior();
        let chain =
            sample(|_| 0.0, &p, 20_000, 1_000, &proposal_scales(&p, 0.5), 3, None);
        assert_eq!(chain.states.len(), 20_000);
        assert!(chain.states.iter().all(|s| p.contains(s)));
        // Under a flat ratio the posterior is the prior; each axis mean
        // should sit near the box centre.
        for d in 0..3 {
            let mean: f64 =
                chain.states.iter().map(|s| s[d]).sum::<f64>() / chain.states.len() as f64;
            let centre = 0.5 * (p.lo[d] + p.hi[d]);
            assert!(
                (mean - centre).abs() < 0.05 * p.width(d),
                "axis {d}: mean {mean} vs centre {centre}"
            );
        }
        assert!(chain.acceptance_rate > 0.2 && chain.acceptance_rate < 1.0);
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let p = prior();
        let scales = proposal_scales(&p, 0.05);
        let a = sample(|_| 0.0, &p, 500, 100, &scales, 9, None);
        let b = sample(|_| 0.0, &p, 500, 100, &scales, 9, None);
        assert_eq!(a.states, b.states);
        let c = sample(|_| 0.0, &p, 500, 100, &scales, 10, None);
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn peaked_ratio_concentrates_the_chain() {
        let p = prior();
        let target = [0.4, 2.0, 1.0];
        let chain = sample(
            |th| {
                -200.0
                    * (0..3)
                        .map(|d| ((th[d] - target[d]) / p.width(d)).powi(2))
                        .sum::<f64>()
            },
            &p,
            20_000,
            2_000,
            &proposal_scales(&p, 0.05),
            4,
            Some([0.25, 5.0, 2.5]),
        );
        let mode = posterior_mode(&chain.states, &p, HISTOGRAM_BINS);
        let median = posterior_median(&chain.states);
        for d in 0..3 {
            assert!(
                (mode[d] - target[d]).abs() < 0.1 * p.width(d),
                "axis {d} mode {} vs {}",
                mode[d],
                target[d]
            );
            assert!((median[d] - target[d]).abs() < 0.1 * p.width(d));
        }
    }

    #[test]
    fn histogram_mode_takes_lower_bin_on_ties() {
        let p = PriorBox::new([0.0, 0.0, 0.0], [0.5, 1.0, 1.0]).unwrap();
        // Two states in bin 3, two in bin 7, rest spread singly.
        let b = |i: usize| (i as f64 + 0.5) / 10.0;
        let states: Vec<[f64; 3]> = vec![
            [0.1, b(3), 0.5],
            [0.1, b(3), 0.5],
            [0.1, b(7), 0.5],
            [0.1, b(7), 0.5],
            [0.1, b(1), 0.5],
        ];
        let mode = posterior_mode(&states, &p, 10);
        assert_relative_eq!(mode[1], b(3), epsilon = 1e-12);
    }

    #[test]
    fn median_handles_even_and_odd_lengths() {
        let s = |v: f64| [v, 0.0, 0.0];
        assert_eq!(posterior_median(&[s(3.0), s(1.0), s(2.0)])[0], 2.0);
        assert_eq!(posterior_median(&[s(4.0), s(1.0), s(2.0), s(3.0)])[0], 2.5);
    }

    #[test]
    fn out_of_box_proposals_never_accepted() {
        let p = prior();
        // Huge steps: nearly every proposal leaves the box; the chain must
        // still only ever hold in-box states.
        let chain =
            sample(|_| 0.0, &p, 5_000, 0, &[10.0, 200.0, 100.0], 8, Some([0.25, 5.0, 2.5]));
        assert!(chain.states.iter().all(|s| p.contains(s)));
        assert!(chain.acceptance_rate < 0.2, "rate {}", chain.acceptance_rate);
    }

    #[test]
    fn chain_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.csv");
        let states = vec![[0.02, 36.9, 14.4], [0.03, 35.0, 12.0]];
        write_chain_csv(&path, &states).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "overhead,mu,sigma");
        assert_eq!(read_chain_csv(&path).unwrap(), states);
    }

    #[test]
    fn summary_serialises_with_health_fields() {
        let p = prior();
        let chain = sample(|_| 0.0, &p, 1_000, 100, &proposal_scales(&p, 0.3), 5, None);
        let summary = summarize(&chain, &p);
        assert_eq!(summary.n_samples, 1_000);
        assert!(summary.acceptance_rate > 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.json");
        write_summary_json(&path, &summary).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"mode\""));
        assert!(text.contains("\"acceptance_rate\""));
    }
}
