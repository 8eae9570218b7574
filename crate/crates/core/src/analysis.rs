//! Observation records and the transfer-time regression.
//!
//! Every completed transfer yields one observation row (T, S, ConTh, ConPr):
//! duration in ticks, file size, and the competing traffic recorded from
//! sibling threads of the same process and from other processes. The model
//! fitted here is a linear hyperplane through the origin,
//! `T = a*S + b*ConTh + c*ConPr`, so a run is summarised by the coefficient
//! vector (a, b, c).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transfer::ProfileKind;

/// One completed transfer. Serialises to the observation CSV schema
/// `T,S,ConTh,ConPr,start_tick,link,job,profile`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Ticks the transfer held bandwidth, first to last inclusive.
    #[serde(rename = "T")]
    pub t_ticks: u64,
    /// Transferred volume in MB.
    #[serde(rename = "S")]
    pub s_mb: f64,
    /// MB moved concurrently by sibling threads of the same process.
    #[serde(rename = "ConTh")]
    pub conth_mb: f64,
    /// MB moved concurrently by other campaign processes on the link.
    #[serde(rename = "ConPr")]
    pub conpr_mb: f64,
    /// First tick the transfer held bandwidth.
    pub start_tick: u64,
    pub link: String,
    pub job: String,
    pub profile: ProfileKind,
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("observation io: {0}")]
    Csv(#[from] csv::Error),
    #[error("{n} rows cannot identify {p} coefficients")]
    NotEnoughData { n: usize, p: usize },
    #[error("design column `{0}` is zero or collinear with earlier columns")]
    Degenerate(String),
    #[error("non-finite value in regression inputs")]
    NonFinite,
}

pub fn write_observations(path: &Path, obs: &[Observation]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    for o in obs {
        w.serialize(o)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_observations(path: &Path) -> Result<Vec<Observation>, AnalysisError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// An origin-constrained least-squares fit.
///
/// With no intercept, `r_squared` is the uncentred version 1 - RSS / sum(y^2)
/// and the F statistic tests all `df_model` coefficients against the zero
/// model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
    pub f_statistic: f64,
    pub df_model: usize,
    pub df_residual: usize,
    pub n: usize,
}

/// Least squares through the origin via Householder QR.
///
/// `rows` are the design-matrix rows; `names` label the columns for error
/// reporting. Rank deficiency is reported against the first offending column.
pub fn fit_origin_ols(
    rows: &[Vec<f64>],
    y: &[f64],
    names: &[&str],
) -> Result<RegressionFit, AnalysisError> {
    let n = rows.len();
    let p = names.len();
    assert_eq!(y.len(), n, "response length must match row count");
    if n <= p {
        return Err(AnalysisError::NotEnoughData { n, p });
    }
    if rows.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }

    // Column-major working copy; each Householder reflection zeroes one
    // column below the diagonal and is applied to the remaining columns and
    // the response.
    let mut cols: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            rows.iter()
                .map(|r| {
                    assert_eq!(r.len(), p, "ragged design row");
                    r[j]
                })
                .collect()
        })
        .collect();
    let mut rhs = y.to_vec();
    let tss: f64 = y.iter().map(|v| v * v).sum();
    let col_norms: Vec<f64> =
        cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();

    for k in 0..p {
        let norm = cols[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * col_norms[k].max(1.0) {
            return Err(AnalysisError::Degenerate(names[k].to_owned()));
        }
        let alpha = if cols[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = cols[k][k..].to_vec();
        v[0] -= alpha;
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv > 0.0 {
            let reflect = |col: &mut [f64]| {
                let dot: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
                let scale = 2.0 * dot / vtv;
                for (c, vi) in col.iter_mut().zip(v.iter()) {
                    *c -= scale * vi;
                }
            };
            for col in cols.iter_mut().skip(k + 1) {
                reflect(&mut col[k..]);
            }
            reflect(&mut rhs[k..]);
        }
        cols[k][k] = alpha;
        if alpha.abs() <= 1e-12 * col_norms[k].max(1.0) {
            return Err(AnalysisError::Degenerate(names[k].to_owned()));
        }
    }

    // Back substitution on the upper-triangular factor.
    let mut beta = vec![0.0; p];
    for i in (0..p).rev() {
        let mut acc = rhs[i];
        for j in (i + 1)..p {
            acc -= cols[j][i] * beta[j];
        }
        beta[i] = acc / cols[i][i];
    }

    let rss: f64 = rhs[p..].iter().map(|v| v * v).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN };
    let df_residual = n - p;
    let f_statistic = if rss > 0.0 {
        ((tss - rss) / p as f64) / (rss / df_residual as f64)
    } else {
        f64::INFINITY
    };
    Ok(RegressionFit {
        names: names.iter().map(|s| (*s).to_owned()).collect(),
        coefficients: beta,
        r_squared,
        f_statistic,
        df_model: p,
        df_residual,
        n,
    })
}

/// Fits `T = a*S + b*ConTh + c*ConPr` over the given observations.
pub fn fit_transfer_model(obs: &[Observation]) -> Result<RegressionFit, AnalysisError> {
    let rows: Vec<Vec<f64>> =
        obs.iter().map(|o| vec![o.s_mb, o.conth_mb, o.conpr_mb]).collect();
    let y: Vec<f64> = obs.iter().map(|o| o.t_ticks as f64).collect();
    fit_origin_ols(&rows, &y, &["S", "ConTh", "ConPr"])
}

/// Fits the reduced single-threaded model `T = a*S + c*ConPr`, for profiles
/// whose processes never run sibling threads.
pub fn fit_reduced_model(obs: &[Observation]) -> Result<RegressionFit, AnalysisError> {
    let rows: Vec<Vec<f64>> = obs.iter().map(|o| vec![o.s_mb, o.conpr_mb]).collect();
    let y: Vec<f64> = obs.iter().map(|o| o.t_ticks as f64).collect();
    fit_origin_ols(&rows, &y, &["S", "ConPr"])
}

/// A per-window fit; `fit` is `None` when the window holds too few rows or a
/// degenerate design.
#[derive(Debug)]
pub struct WindowFit {
    pub window_start: u64,
    pub n: usize,
    pub fit: Option<RegressionFit>,
}

/// Splits observations into consecutive `window_ticks`-wide buckets by start
/// tick and fits the transfer model per bucket, covering the full range from
/// the first to the last populated window.
pub fn windowed_fits(obs: &[Observation], window_ticks: u64) -> Vec<WindowFit> {
    assert!(window_ticks >= 1, "window must be at least one tick");
    if obs.is_empty() {
        return Vec::new();
    }
    let bucket = |o: &Observation| o.start_tick / window_ticks;
    let lo = obs.iter().map(&bucket).min().unwrap();
    let hi = obs.iter().map(&bucket).max().unwrap();
    (lo..=hi)
        .map(|b| {
            let subset: Vec<Observation> =
                obs.iter().filter(|o| bucket(o) == b).cloned().collect();
            WindowFit {
                window_start: b * window_ticks,
                n: subset.len(),
                fit: fit_transfer_model(&subset).ok(),
            }
        })
        .collect()
}

/// |reference - estimate| / |reference|; `None` when the reference is zero.
pub fn relative_error(reference: f64, estimate: f64) -> Option<f64> {
    if reference == 0.0 {
        return None;
    }
    Some((reference - estimate).abs() / reference.abs())
}

/// Sum of per-coefficient relative errors; `None` when any reference
/// coefficient is zero or the lengths differ.
pub fn total_relative_error(reference: &[f64], estimate: &[f64]) -> Option<f64> {
    if reference.len() != estimate.len() {
        return None;
    }
    reference
        .iter()
        .zip(estimate.iter())
        .map(|(&r, &e)| relative_error(r, e))
        .sum::<Option<f64>>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(n: usize, beta: &[f64], noise: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = beta.len();
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..p).map(|_| rng.gen_range(0.5..10.0)).collect()).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| {
                let clean: f64 = r.iter().zip(beta).map(|(x, b)| x * b).sum();
                clean + noise * rng.gen_range(-1.0..1.0)
            })
            .collect();
        (rows, y)
    }

    /// Solves the 3x3 normal equations directly; the oracle for the QR path.
    fn normal_equations_3(rows: &[Vec<f64>], y: &[f64]) -> [f64; 3] {
        let mut xtx = [[0.0f64; 3]; 3];
        let mut xty = [0.0; 3];
        for (r, &yi) in rows.iter().zip(y) {
            for i in 0..3 {
                for j in 0..3 {
                    xtx[i][j] += r[i] * r[j];
                }
                xty[i] += r[i] * yi;
            }
        }
        let det = |m: &[[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(&xtx);
        let mut out = [0.0; 3];
        for k in 0..3 {
            let mut m = xtx;
            for i in 0..3 {
                m[i][k] = xty[i];
            }
            out[k] = det(&m) / d;
        }
        out
    }

    #[test]
    fn exact_data_recovers_coefficients_exactly() {
        let (rows, y) = synthetic(50, &[2.0, 3.0, 4.0], 0.0, 1);
        let fit = fit_origin_ols(&rows, &y, &["a", "b", "c"]).unwrap();
        assert_relative_eq!(fit.coefficients[0], 2.0, epsilon = 1e-10);
        assert_relative_eq!(fit.coefficients[1], 3.0, epsilon = 1e-10);
        assert_relative_eq!(fit.coefficients[2], 4.0, epsilon = 1e-10);
        assert_relative_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
        assert!(fit.f_statistic > 1e6);
        assert_eq!(fit.df_model, 3);
        assert_eq!(fit.df_residual, 47);
    }

    #[test]
    fn qr_matches_normal_equations_on_noisy_data() {
        for seed in 0..20 {
            let (rows, y) = synthetic(80, &[0.01, 0.02, 0.005], 0.5, seed);
            let fit = fit_origin_ols(&rows, &y, &["a", "b", "c"]).unwrap();
            let oracle = normal_equations_3(&rows, &y);
            for k in 0..3 {
                assert_relative_eq!(fit.coefficients[k], oracle[k], max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn column_scaling_scales_coefficients_inversely() {
        let (rows, y) = synthetic(60, &[1.0, 2.0, 3.0], 0.3, 9);
        let fit = fit_origin_ols(&rows, &y, &["a", "b", "c"]).unwrap();
        let scaled: Vec<Vec<f64>> =
            rows.iter().map(|r| vec![r[0] * 100.0, r[1], r[2]]).collect();
        let fit2 = fit_origin_ols(&scaled, &y, &["a", "b", "c"]).unwrap();
        assert_relative_eq!(fit2.coefficients[0], fit.coefficients[0] / 100.0, max_relative = 1e-9);
        assert_relative_eq!(fit2.coefficients[1], fit.coefficients[1], max_relative = 1e-9);
        assert_relative_eq!(fit2.r_squared, fit.r_squared, max_relative = 1e-12);
    }

    #[test]
    fn row_order_does_not_matter() {
        let (rows, y) = synthetic(40, &[1.0, 1.0, 1.0], 0.2, 4);
        let fit = fit_origin_ols(&rows, &y, &["a", "b", "c"]).unwrap();
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.reverse();
        idx.swap(0, 5);
        let rows2: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
        let y2: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let fit2 = fit_origin_ols(&rows2, &y2, &["a", "b", "c"]).unwrap();
        for k in 0..3 {
            assert_relative_eq!(fit.coefficients[k], fit2.coefficients[k], max_relative = 1e-9);
        }
    }

    #[test]
    fn collinear_column_is_named() {
        let (mut rows, y) = synthetic(30, &[1.0, 2.0, 0.0], 0.0, 7);
        for r in &mut rows {
            r[2] = 2.5 * r[0];
        }
        let err = fit_origin_ols(&rows, &y, &["S", "ConTh", "ConPr"]).unwrap_err();
        match err {
            AnalysisError::Degenerate(name) => assert_eq!(name, "ConPr"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn zero_column_is_degenerate() {
        let (mut rows, y) = synthetic(30, &[1.0, 2.0, 1.0], 0.1, 8);
        for r in &mut rows {
            r[1] = 0.0;
        }
        let err = fit_origin_ols(&rows, &y, &["S", "ConTh", "ConPr"]).unwrap_err();
        assert!(matches!(err, AnalysisError::Degenerate(n) if n == "ConTh"));
    }

    #[test]
    fn too_few_rows_rejected() {
        let rows = vec![vec![1.0, 2.0, 3.0]; 3];
        let y = vec![1.0; 3];
        let err = fit_origin_ols(&rows, &y, &["a", "b", "c"]).unwrap_err();
        assert!(matches!(err, AnalysisError::NotEnoughData { n: 3, p: 3 }));
    }

    #[test]
    fn non_finite_rejected() {
        let mut rows = vec![vec![1.0, 2.0, 3.0]; 5];
        rows[4][1] = f64::NAN;
        let y = vec![1.0; 5];
        assert!(matches!(
            fit_origin_ols(&rows, &y, &["a", "b", "c"]),
            Err(AnalysisError::NonFinite)
        ));
    }

    #[test]
    fn f_statistic_formula() {
        let (rows, y) = synthetic(25, &[1.5, 0.5, 2.0], 1.0, 11);
        let fit = fit_origin_ols(&rows, &y, &["a", "b", "c"]).unwrap();
        let tss: f64 = y.iter().map(|v| v * v).sum();
        let rss = tss * (1.0 - fit.r_squared);
        let f = ((tss - rss) / 3.0) / (rss / 22.0);
        assert_relative_eq!(fit.f_statistic, f, max_relative = 1e-9);
    }

    fn obs(t: u64, s: f64, conth: f64, conpr: f64) -> Observation {
        Observation {
            t_ticks: t,
            s_mb: s,
            conth_mb: conth,
            conpr_mb: conpr,
            start_tick: t,
            link: "se->wn".into(),
            job: "job-0".into(),
            profile: ProfileKind::RemoteAccess,
        }
    }

    #[test]
    fn transfer_model_uses_all_three_regressors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Observation> = (0..60)
            .map(|i| {
                let s: f64 = rng.gen_range(100.0..3000.0);
                let conth: f64 = rng.gen_range(0.0..2000.0);
                let conpr: f64 = rng.gen_range(0.0..4000.0);
                let t = (0.01 * s + 0.01 * conth + 0.01 * conpr).round() as u64 + (i % 2);
                obs(t.max(1), s, conth, conpr)
            })
            .collect();
        let fit = fit_transfer_model(&data).unwrap();
        assert_eq!(fit.names, vec!["S", "ConTh", "ConPr"]);
        for c in &fit.coefficients {
            assert_relative_eq!(*c, 0.01, max_relative = 0.2);
        }
    }

    #[test]
    fn windowed_fits_cover_the_populated_range() {
        let mut data = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for w in [0u64, 2] {
            for _ in 0..30 {
                let s: f64 = rng.gen_range(100.0..3000.0);
                let conth: f64 = rng.gen_range(0.0..2000.0);
                let conpr: f64 = rng.gen_range(0.0..4000.0);
                let mut o = obs(
                    ((0.01 * (s + conth + conpr)).round() as u64).max(1),
                    s,
                    conth,
                    conpr,
                );
                o.start_tick = w * 1000 + rng.gen_range(0..1000);
                data.push(o);
            }
        }
        let fits = windowed_fits(&data, 1000);
        assert_eq!(fits.len(), 3);
        assert_eq!(fits[0].window_start, 0);
        assert_eq!(fits[0].n, 30);
        assert!(fits[0].fit.is_some());
        assert_eq!(fits[1].n, 0);
        assert!(fits[1].fit.is_none());
        assert_eq!(fits[2].window_start, 2000);
        assert!(fits[2].fit.is_some());
    }

    #[test]
    fn relative_error_examples() {
        assert_relative_eq!(relative_error(0.02385, 0.02352).unwrap(), 0.01384, epsilon = 1e-4);
        assert_relative_eq!(relative_error(0.04886, 0.049).unwrap(), 0.002865, epsilon = 1e-4);
        assert_eq!(relative_error(0.0, 1.0), None);
        let total =
            total_relative_error(&[1.0, 2.0, 4.0], &[1.1, 1.8, 4.0]).unwrap();
        assert_relative_eq!(total, 0.1 + 0.1 + 0.0, epsilon = 1e-12);
        assert_eq!(total_relative_error(&[0.0, 1.0], &[1.0, 1.0]), None);
        assert_eq!(total_relative_error(&[1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn csv_round_trip_preserves_schema_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let data = vec![
            obs(10, 1000.0, 0.0, 500.0),
            Observation { profile: ProfileKind::DataPlacement, ..obs(20, 2000.0, 100.0, 0.0) },
        ];
        write_observations(&path, &data).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header, "T,S,ConTh,ConPr,start_tick,link,job,profile");
        assert!(text.lines().nth(2).unwrap().contains("data_placement"));
        let back = read_observations(&path).unwrap();
        assert_eq!(back, data);
    }
}
