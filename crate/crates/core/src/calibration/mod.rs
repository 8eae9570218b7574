//! Likelihood-free calibration of the simulator settings.
//!
//! A campaign is summarised by its fitted coefficient vector x = (a, b, c)
//! from the transfer-time regression. The settings under inference are
//! theta = (overhead, mu, sigma): the protocol overhead fraction and the
//! background-load mean and standard deviation. The pipeline draws theta from
//! a uniform prior box, simulates the campaign under each draw, and trains a
//! classifier to tell jointly simulated (theta, x) pairs from shuffled
//! controls. The classifier's logit estimates `log p(x | theta) / p(x)` up to
//! a constant, which is exactly the likelihood term Metropolis-Hastings
//! needs; no closed-form likelihood ever enters the loop.

pub mod mcmc;
pub mod mlp;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{fit_transfer_model, AnalysisError};
use crate::config::PriorConfig;
use crate::engine::{run, substream_seed, RunOptions, SimError};
use crate::grid::{AppliedSetting, Grid};
use crate::workload::Workload;
use mlp::{MlpClassifier, TrainReport};

/// Classifier input width: normalised theta (3) plus normalised x (3).
pub const INPUT_DIM: usize = 6;
/// Default network shape, input to logit.
pub const DEFAULT_DIMS: [usize; 6] = [INPUT_DIM, 128, 128, 128, 128, 1];
pub const DEFAULT_BATCH: usize = 128;
pub const DEFAULT_LR: f64 = 1e-3;
/// Default per-dimension Metropolis proposal scale, as a fraction of the
/// prior range.
pub const DEFAULT_PROPOSAL_FRAC: f64 = 0.05;
/// Bins per axis for the posterior-mode histogram.
pub const HISTOGRAM_BINS: usize = 50;

/// Budgets of the largest validation study run with this pipeline, kept as a
/// starting point for production-grade posteriors on a big machine. Desk
/// runs use the much smaller command-line defaults instead, trading some
/// posterior sharpness for minutes of single-core runtime.
pub const REFERENCE_N_TRAIN: usize = 12_700_000;
pub const REFERENCE_EPOCHS: usize = 263;
pub const REFERENCE_LR: f64 = 1e-4;
pub const REFERENCE_BURN_IN: usize = 100_000;
pub const REFERENCE_SAMPLES: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration io: {0}")]
    Io(#[from] std::io::Error),
    #[error("calibration json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("calibration csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Invalid(String),
    #[error("classifier bundle version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
}

/// The simulator settings under inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatorSetting {
    pub overhead: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl SimulatorSetting {
    pub fn from_array(a: [f64; 3]) -> Self {
        SimulatorSetting { overhead: a[0], mu: a[1], sigma: a[2] }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.overhead, self.mu, self.sigma]
    }

    /// The grid override this setting induces, optionally scoped to one
    /// protocol and a subset of links.
    pub fn to_applied(
        self,
        protocol: Option<String>,
        links: Option<Vec<String>>,
    ) -> AppliedSetting {
        AppliedSetting {
            overhead: self.overhead,
            bg_mu: self.mu,
            bg_sigma: self.sigma,
            protocol,
            links,
        }
    }
}

/// Axis-aligned uniform prior over (overhead, mu, sigma).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl PriorBox {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Result<Self, CalibrationError> {
        for d in 0..3 {
            if !(lo[d].is_finite() && hi[d].is_finite() && lo[d] < hi[d]) {
                return Err(CalibrationError::Invalid(format!(
                    "prior axis {d}: need finite lo < hi, got [{}, {}]",
                    lo[d], hi[d]
                )));
            }
        }
        if lo[0] < 0.0 || hi[0] >= 1.0 {
            return Err(CalibrationError::Invalid(format!(
                "overhead prior [{}, {}] must stay within [0, 1)",
                lo[0], hi[0]
            )));
        }
        if lo[2] < 0.0 {
            return Err(CalibrationError::Invalid(format!(
                "sigma prior lower bound {} must be non-negative",
                lo[2]
            )));
        }
        Ok(PriorBox { lo, hi })
    }

    pub fn from_config(cfg: &PriorConfig) -> Result<Self, CalibrationError> {
        PriorBox::new(
            [cfg.overhead[0], cfg.mu[0], cfg.sigma[0]],
            [cfg.overhead[1], cfg.mu[1], cfg.sigma[1]],
        )
    }

    pub fn contains(&self, theta: &[f64; 3]) -> bool {
        (0..3).all(|d| theta[d] >= self.lo[d] && theta[d] <= self.hi[d])
    }

    pub fn width(&self, d: usize) -> f64 {
        self.hi[d] - self.lo[d]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        std::array::from_fn(|d| rng.gen_range(self.lo[d]..self.hi[d]))
    }
}

/// Maps (theta, x) into the unit hypercube: theta by the prior bounds, x by
/// the empirical range of the training coefficients. Persisted with the
/// classifier so inference encodes inputs identically to training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub theta_lo: [f64; 3],
    pub theta_hi: [f64; 3],
    pub x_lo: [f64; 3],
    pub x_hi: [f64; 3],
}

impl Normalizer {
    pub fn fit<'a, I: IntoIterator<Item = &'a [f64; 3]>>(prior: &PriorBox, xs: I) -> Self {
        let mut x_lo = [f64::INFINITY; 3];
        let mut x_hi = [f64::NEG_INFINITY; 3];
        for x in xs {
            for d in 0..3 {
                x_lo[d] = x_lo[d].min(x[d]);
                x_hi[d] = x_hi[d].max(x[d]);
            }
        }
        Normalizer { theta_lo: prior.lo, theta_hi: prior.hi, x_lo, x_hi }
    }

    fn scale(v: f64, lo: f64, hi: f64) -> f64 {
        let width = hi - lo;
        if width > 0.0 {
            (v - lo) / width
        } else {
            v - lo
        }
    }

    fn unscale(u: f64, lo: f64, hi: f64) -> f64 {
        let width = hi - lo;
        if width > 0.0 {
            lo + u * width
        } else {
            lo + u
        }
    }

    pub fn encode(&self, theta: &[f64; 3], x: &[f64; 3]) -> [f64; INPUT_DIM] {
        std::array::from_fn(|i| {
            if i < 3 {
                Self::scale(theta[i], self.theta_lo[i], self.theta_hi[i])
            } else {
                Self::scale(x[i - 3], self.x_lo[i - 3], self.x_hi[i - 3])
            }
        })
    }

    /// Inverse of [`Normalizer::encode`].
    pub fn decode(&self, enc: &[f64; INPUT_DIM]) -> ([f64; 3], [f64; 3]) {
        let theta = std::array::from_fn(|d| {
            Self::unscale(enc[d], self.theta_lo[d], self.theta_hi[d])
        });
        let x = std::array::from_fn(|d| Self::unscale(enc[d + 3], self.x_lo[d], self.x_hi[d]));
        (theta, x)
    }
}

/// One (theta, x) pair produced by simulating under theta and fitting the
/// transfer model. Serialises to the training CSV schema
/// `overhead,mu,sigma,a,b,c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingTuple {
    pub overhead: f64,
    pub mu: f64,
    pub sigma: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl TrainingTuple {
    pub fn theta(&self) -> [f64; 3] {
        [self.overhead, self.mu, self.sigma]
    }

    pub fn x(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }
}

pub fn write_training_csv(path: &Path, rows: &[TrainingTuple]) -> Result<(), CalibrationError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_training_csv(path: &Path) -> Result<Vec<TrainingTuple>, CalibrationError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// The fixed campaign a calibration study simulates: grid, workload, scope of
/// the setting override, and the horizon per run.
#[derive(Clone)]
pub struct SimulationStudy<'a> {
    pub grid: &'a Grid,
    pub workload: &'a Workload,
    /// Protocol whose overhead the setting overrides; `None` applies to all.
    pub protocol: Option<String>,
    /// Links whose background load the setting overrides; `None` applies to
    /// all.
    pub links: Option<Vec<String>>,
    pub horizon: u64,
}

/// Simulates the campaign under `theta` and fits the transfer model. Returns
/// `Ok(None)` when the run yields too few observations or a degenerate
/// design (the draw is then retried with a fresh theta).
pub fn coefficients_for(
    study: &SimulationStudy<'_>,
    theta: [f64; 3],
    seed: u64,
) -> Result<Option<[f64; 3]>, CalibrationError> {
    let setting = SimulatorSetting::from_array(theta)
        .to_applied(study.protocol.clone(), study.links.clone());
    let opts = RunOptions::new(seed, study.horizon);
    let result = run(study.grid, study.workload, Some(&setting), &opts)?;
    match fit_transfer_model(&result.observations) {
        Ok(fit) => Ok(Some([fit.coefficients[0], fit.coefficients[1], fit.coefficients[2]])),
        Err(AnalysisError::NotEnoughData { .. }) | Err(AnalysisError::Degenerate(_)) => Ok(None),
        Err(e) => Err(CalibrationError::Invalid(format!("fit failed: {e}"))),
    }
}

const MAX_RETRY_WAVES: usize = 16;

/// Draws `n` settings from the prior, simulates each and returns the joint
/// (theta, x) tuples. Runs within a wave execute in parallel; results are
/// deterministic for a fixed seed regardless of thread count. Draws whose
/// run cannot be summarised (degenerate fit) are replaced in later waves.
pub fn generate_training_set(
    study: &SimulationStudy<'_>,
    prior: &PriorBox,
    n: usize,
    seed: u64,
) -> Result<Vec<TrainingTuple>, CalibrationError> {
    let mut draw_rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, "training-draws"));
    let mut out: Vec<Option<TrainingTuple>> = vec![None; n];
    for wave in 0..MAX_RETRY_WAVES {
        let missing: Vec<usize> =
            (0..n).filter(|&i| out[i].is_none()).collect();
        if missing.is_empty() {
            break;
        }
        let batch: Vec<(usize, [f64; 3], u64)> = missing
            .iter()
            .map(|&i| {
                let theta = prior.sample(&mut draw_rng);
                let run_seed = substream_seed(seed, &format!("run-{wave}-{i}"));
                (i, theta, run_seed)
            })
            .collect();
        let results: Vec<(usize, Result<Option<TrainingTuple>, CalibrationError>)> = batch
            .into_par_iter()
            .map(|(i, theta, run_seed)| {
                let res = coefficients_for(study, theta, run_seed).map(|opt| {
                    opt.map(|x| TrainingTuple {
                        overhead: theta[0],
                        mu: theta[1],
                        sigma: theta[2],
                        a: x[0],
                        b: x[1],
                        c: x[2],
                    })
                });
                (i, res)
            })
            .collect();
        for (i, res) in results {
            out[i] = res?;
        }
    }
    let tuples: Vec<TrainingTuple> = out.into_iter().flatten().collect();
    if tuples.len() < n {
        return Err(CalibrationError::Invalid(format!(
            "only {} of {n} draws produced a usable fit after {MAX_RETRY_WAVES} waves",
            tuples.len()
        )));
    }
    Ok(tuples)
}

/// Labelled, normalised classifier data: positives are the joint tuples,
/// negatives decouple theta from x by giving each x the theta of another
/// draw (a cyclic shift, so no control keeps its own theta).
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub norm: Normalizer,
}

pub fn build_dataset(tuples: &[TrainingTuple], prior: &PriorBox, seed: u64) -> Dataset {
    assert!(tuples.len() >= 2, "need at least two tuples to build controls");
    let n = tuples.len();
    let xs: Vec<[f64; 3]> = tuples.iter().map(|t| t.x()).collect();
    let norm = Normalizer::fit(prior, xs.iter());
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, "dataset-shift"));
    let shift = rng.gen_range(1..n);
    let mut x = Vec::with_capacity(2 * n * INPUT_DIM);
    let mut y = Vec::with_capacity(2 * n);
    for (i, t) in tuples.iter().enumerate() {
        x.extend_from_slice(&norm.encode(&t.theta(), &xs[i]));
        y.push(1.0);
        x.extend_from_slice(&norm.encode(&tuples[(i + shift) % n].theta(), &xs[i]));
        y.push(0.0);
    }
    Dataset { x, y, norm }
}

/// Everything inference needs, persisted as one JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibratorBundle {
    pub version: u32,
    pub prior: PriorBox,
    pub norm: Normalizer,
    pub net: MlpClassifier,
}

pub const BUNDLE_VERSION: u32 = 1;

impl CalibratorBundle {
    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let f = std::fs::File::open(path)?;
        let bundle: CalibratorBundle = serde_json::from_reader(std::io::BufReader::new(f))?;
        if bundle.version != BUNDLE_VERSION {
            return Err(CalibrationError::Version {
                found: bundle.version,
                expected: BUNDLE_VERSION,
            });
        }
        Ok(bundle)
    }

    /// Classifier logit for a (theta, x) pair: the estimated log ratio
    /// `log p(x | theta) / p(x)` up to an additive constant.
    pub fn log_ratio(&self, theta: &[f64; 3], x: &[f64; 3]) -> f64 {
        self.net.log_odds(&self.norm.encode(theta, x))
    }
}

/// Trains the ratio classifier on the joint tuples. Each minibatch of
/// positives is paired with an equal number of controls built by permuting
/// theta within the batch (a cyclic shift, so no control keeps its own
/// theta); controls are therefore re-drawn every epoch. Returns the bundle
/// with its normaliser and prior, plus the per-epoch loss trace.
pub fn train_calibrator(
    tuples: &[TrainingTuple],
    prior: &PriorBox,
    dims: &[usize],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> (CalibratorBundle, TrainReport) {
    use rand::seq::SliceRandom;
    assert!(tuples.len() >= 2, "need at least two tuples to build controls");
    assert!(batch >= 2, "batch must hold at least two tuples to permute");
    assert_eq!(dims[0], INPUT_DIM);

    let xs: Vec<[f64; 3]> = tuples.iter().map(|t| t.x()).collect();
    let thetas: Vec<[f64; 3]> = tuples.iter().map(|t| t.theta()).collect();
    let norm = Normalizer::fit(prior, xs.iter());

    let mut net = MlpClassifier::new(dims, substream_seed(seed, "net-init"));
    let mut opt = mlp::Adam::new(lr, net.n_params());
    let mut params = net.params();
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, "train-shuffle"));
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(batch) {
            let mut bx = Vec::with_capacity(2 * chunk.len() * INPUT_DIM);
            let mut by = Vec::with_capacity(2 * chunk.len());
            for &i in chunk {
                bx.extend_from_slice(&norm.encode(&thetas[i], &xs[i]));
                by.push(1.0);
            }
            if chunk.len() >= 2 {
                let shift = rng.gen_range(1..chunk.len());
                for (k, &i) in chunk.iter().enumerate() {
                    let j = chunk[(k + shift) % chunk.len()];
                    bx.extend_from_slice(&norm.encode(&thetas[j], &xs[i]));
                    by.push(0.0);
                }
            }
            let (loss, grads) = net.loss_and_grad(&bx, &by);
            let flat = net.flatten_grad(&grads);
            opt.step(&mut params, &flat);
            net.set_params(&params);
            total += loss;
            batches += 1.0;
        }
        epoch_losses.push(total / batches);
    }
    (
        CalibratorBundle { version: BUNDLE_VERSION, prior: *prior, norm, net },
        TrainReport { epoch_losses },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{TopologyConfig, WorkloadConfig};
    use crate::workload::materialize;
    use approx::assert_relative_eq;

    fn prior() -> PriorBox {
        PriorBox::new([0.0, 10.0, 0.0], [0.2, 60.0, 30.0]).unwrap()
    }

    #[test]
    fn prior_validation() {
        assert!(PriorBox::new([0.0, 0.0, 0.0], [0.5, 1.0, 1.0]).is_ok());
        assert!(PriorBox::new([0.5, 0.0, 0.0], [0.4, 1.0, 1.0]).is_err());
        assert!(PriorBox::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).is_err());
        assert!(PriorBox::new([-0.1, 0.0, 0.0], [0.5, 1.0, 1.0]).is_err());
        assert!(PriorBox::new([0.0, 0.0, -1.0], [0.5, 1.0, 1.0]).is_err());
        assert!(PriorBox::new([0.0, f64::NAN, 0.0], [0.5, 1.0, 1.0]).is_err());
    }

    #[test]
    fn prior_sampling_stays_inside_and_is_seeded() {
        let p = prior();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let th = p.sample(&mut rng);
            assert!(p.contains(&th), "{th:?}");
        }
        let mut a = ChaCha8Rng::seed_from_u64(2);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(p.sample(&mut a), p.sample(&mut b));
    }

    #[test]
    fn normalizer_maps_ranges_to_unit_interval() {
        let p = prior();
        let xs = vec![[1.0, 5.0, -2.0], [3.0, 5.0, 2.0]];
        let n = Normalizer::fit(&p, xs.iter());
        let enc = n.encode(&p.lo, &xs[0]);
        assert_eq!(enc[0], 0.0);
        assert_eq!(enc[1], 0.0);
        assert_eq!(enc[2], 0.0);
        assert_eq!(enc[3], 0.0);
        // x axis 1 is degenerate (both 5.0): encodes to 0 without dividing
        // by zero.
        assert_eq!(enc[4], 0.0);
        let enc_hi = n.encode(&p.hi, &xs[1]);
        assert_eq!(enc_hi[0], 1.0);
        assert_eq!(enc_hi[3], 1.0);
        assert_eq!(enc_hi[5], 1.0);
        assert!(enc.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dataset_is_balanced_with_shifted_controls() {
        let tuples: Vec<TrainingTuple> = (0..10)
            .map(|i| TrainingTuple {
                overhead: 0.01 * i as f64,
                mu: 10.0 + i as f64,
                sigma: 1.0 + i as f64,
                a: i as f64,
                b: 2.0 * i as f64,
                c: 3.0 * i as f64,
            })
            .collect();
        let p = prior();
        let data = build_dataset(&tuples, &p, 7);
        assert_eq!(data.y.len(), 20);
        assert_eq!(data.x.len(), 20 * INPUT_DIM);
        assert_eq!(data.y.iter().filter(|&&v| v == 1.0).count(), 10);
        // Controls never keep their own theta: rows alternate joint/control;
        // the control keeps the x but takes another draw's theta.
        for i in 0..10 {
            let joint = &data.x[(2 * i) * INPUT_DIM..(2 * i) * INPUT_DIM + INPUT_DIM];
            let ctrl = &data.x[(2 * i + 1) * INPUT_DIM..(2 * i + 1) * INPUT_DIM + INPUT_DIM];
            assert_ne!(joint[..3], ctrl[..3], "theta part must come from another draw");
            assert_eq!(joint[3..], ctrl[3..], "x part is shared");
        }
    }

    #[test]
    fn normalizer_round_trips_theta_and_x() {
        let p = prior();
        let xs = vec![[0.011, 0.013, 0.021], [0.052, 0.048, 0.09], [0.02, 0.03, 0.04]];
        let n = Normalizer::fit(&p, xs.iter());
        let theta = [0.137, 42.25, 7.75];
        let x = [0.0301, 0.0405, 0.0333];
        let (theta_back, x_back) = n.decode(&n.encode(&theta, &x));
        for d in 0..3 {
            assert!((theta_back[d] - theta[d]).abs() < 1e-12, "theta axis {d}");
            assert!((x_back[d] - x[d]).abs() < 1e-12, "x axis {d}");
        }
    }

    #[test]
    fn training_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        let rows = vec![
            TrainingTuple { overhead: 0.02, mu: 36.9, sigma: 14.4, a: 0.0238, b: 0.0239, c: 0.049 },
            TrainingTuple { overhead: 0.1, mu: 20.0, sigma: 5.0, a: 0.05, b: 0.051, c: 0.09 },
        ];
        write_training_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "overhead,mu,sigma,a,b,c");
        let back = read_training_csv(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn bundle_round_trip_and_version_gate() {
        let p = prior();
        let norm = Normalizer {
            theta_lo: p.lo,
            theta_hi: p.hi,
            x_lo: [0.0, 0.0, 0.0],
            x_hi: [1.0, 1.0, 1.0],
        };
        let bundle = CalibratorBundle {
            version: BUNDLE_VERSION,
            prior: p,
            norm,
            net: MlpClassifier::new(&[INPUT_DIM, 8, 1], 4),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.json");
        bundle.save(&path).unwrap();
        let back = CalibratorBundle::load(&path).unwrap();
        let theta = [0.1, 30.0, 10.0];
        let x = [0.5, 0.25, 0.75];
        assert_relative_eq!(bundle.log_ratio(&theta, &x), back.log_ratio(&theta, &x));

        let mut wrong = bundle.clone();
        wrong.version = BUNDLE_VERSION + 1;
        wrong.save(&path).unwrap();
        assert!(matches!(
            CalibratorBundle::load(&path),
            Err(CalibrationError::Version { .. })
        ));
    }

    #[test]
    fn tiny_study_generates_deterministic_tuples() {
        let topo: TopologyConfig = serde_json::from_str(
            r#"{
              "protocols": [{"name": "p", "overhead": 0.0}],
              "data_centers": [
                {"id": "a", "storage_elements": [{"id": "se", "capacity_mb": 1e9}]},
                {"id": "b", "worker_nodes": [{"id": "wn", "slots": 8}]}
              ],
              "links": [{"src": "se", "dst": "wn", "bandwidth_mbps": 800.0,
                         "bg_update_period": 30}]
            }"#,
        )
        .unwrap();
        let grid = Grid::build(&topo).unwrap();
        let wl_cfg: WorkloadConfig = serde_json::from_str(
            r#"{"generator": {"steps": 3, "period_ticks": 400,
                 "jobs_per_step": [2, 3], "threads": [1, 2], "file_mb": [50.0, 400.0],
                 "profile": "remote_access", "protocol": "p", "src": "se", "seed": 5}}"#,
        )
        .unwrap();
        let workload = materialize(&wl_cfg, 0).unwrap();
        let study = SimulationStudy {
            grid: &grid,
            workload: &workload,
            protocol: None,
            links: None,
            horizon: 5_000,
        };
        let p = PriorBox::new([0.0, 0.0, 0.0], [0.2, 6.0, 2.0]).unwrap();
        let a = generate_training_set(&study, &p, 6, 11).unwrap();
        let b = generate_training_set(&study, &p, 6, 11).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        for t in &a {
            assert!(p.contains(&t.theta()));
            assert!(t.a.is_finite() && t.b.is_finite() && t.c.is_finite());
            assert!(t.a > 0.0, "size coefficient should be positive, got {}", t.a);
        }
        let c = generate_training_set(&study, &p, 6, 12).unwrap();
        assert_ne!(a, c);
    }
}
