//! Error metrics: RMSE, MAE and relative pose errors over subsequences.

use serde::{Deserialize, Serialize};

use crate::autodiff::Array2;
use crate::error::{Error, Result};
use crate::models::wrap_angle;

fn differences(estimates: &Array2, truth: &Array2, angle_dims: &[usize]) -> Result<Vec<f64>> {
    if estimates.shape() != truth.shape() {
        return Err(Error::structural(format!(
            "estimates are {}x{}, truth is {}x{}",
            estimates.rows(),
            estimates.cols(),
            truth.rows(),
            truth.cols()
        )));
    }
    if let Some(&d) = angle_dims.iter().find(|&&d| d >= truth.cols()) {
        return Err(Error::structural(format!("angle dim {d} out of range")));
    }
    let mut diff = estimates.sub(truth);
    for r in 0..diff.rows() {
        for &d in angle_dims {
            diff[(r, d)] = wrap_angle(diff[(r, d)]);
        }
    }
    Ok(diff.into_vec())
}

/// Root mean squared error over all entries; angle dims use wrapped
/// differences.
pub fn rmse(estimates: &Array2, truth: &Array2, angle_dims: &[usize]) -> Result<f64> {
    let d = differences(estimates, truth, angle_dims)?;
    Ok((d.iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64).sqrt())
}

/// Mean absolute error over all entries; angle dims use wrapped differences.
pub fn mae(estimates: &Array2, truth: &Array2, angle_dims: &[usize]) -> Result<f64> {
    let d = differences(estimates, truth, angle_dims)?;
    Ok(d.iter().map(|v| v.abs()).sum::<f64>() / d.len().max(1) as f64)
}

/// Errors for one subsequence length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthError {
    pub length: usize,
    pub subsequences: usize,
    /// Metres of translation error per metre travelled.
    pub translational_error: f64,
    /// Degrees of rotation error per metre travelled.
    pub rotational_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdometryErrorReport {
    /// Mean over every evaluated subsequence of every length.
    pub translational_error: f64,
    pub rotational_error: f64,
    /// Lengths that were actually evaluated.
    pub subsequence_lengths: Vec<usize>,
    pub per_length: Vec<LengthError>,
    pub warnings: Vec<String>,
}

impl OdometryErrorReport {
    /// Pool per-trajectory reports, weighting each length by its number of
    /// subsequences.
    pub fn combine(reports: &[Self]) -> Self {
        let mut lengths: Vec<usize> = reports.iter().flat_map(|r| r.subsequence_lengths.iter().copied()).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let per_length: Vec<LengthError> = lengths
            .iter()
            .map(|&length| {
                let parts: Vec<&LengthError> =
                    reports.iter().flat_map(|r| r.per_length.iter().filter(|l| l.length == length)).collect();
                let n: usize = parts.iter().map(|l| l.subsequences).sum();
                let weighted = |f: fn(&LengthError) -> f64| {
                    parts.iter().map(|l| f(l) * l.subsequences as f64).sum::<f64>() / n as f64
                };
                LengthError {
                    length,
                    subsequences: n,
                    translational_error: weighted(|l| l.translational_error),
                    rotational_error: weighted(|l| l.rotational_error),
                }
            })
            .collect();
        let total: usize = per_length.iter().map(|l| l.subsequences).sum();
        let overall = |f: fn(&LengthError) -> f64| {
            if total == 0 {
                0.0
            } else {
                per_length.iter().map(|l| f(l) * l.subsequences as f64).sum::<f64>() / total as f64
            }
        };
        let mut warnings: Vec<String> = reports.iter().flat_map(|r| r.warnings.iter().cloned()).collect();
        warnings.dedup();
        Self {
            translational_error: overall(|l| l.translational_error),
            rotational_error: overall(|l| l.rotational_error),
            subsequence_lengths: lengths,
            per_length,
            warnings,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("length,subsequences,translational_m_per_m,rotational_deg_per_m\n");
        for l in &self.per_length {
            out += &format!("{},{},{},{}\n", l.length, l.subsequences, l.translational_error, l.rotational_error);
        }
        let total: usize = self.per_length.iter().map(|l| l.subsequences).sum();
        out += &format!("all,{total},{},{}\n", self.translational_error, self.rotational_error);
        out
    }
}

/// Motion from pose `a` to pose `b` expressed in the frame of `a`.
fn relative(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    let (s, c) = a[2].sin_cos();
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    [c * dx + s * dy, -s * dx + c * dy, wrap_angle(b[2] - a[2])]
}

fn path_length(poses: &[[f64; 3]]) -> f64 {
    poses.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum()
}

/// Relative pose error over every subsequence of `L` consecutive poses for
/// each requested length. For a subsequence from pose `i` to `j = i+L-1`,
/// the error transform is `(Ê_i⁻¹Ê_j)⁻¹(P_i⁻¹P_j)`; its translation norm
/// and rotation angle are divided by the true path length from `i` to `j`.
/// Lengths longer than the trajectory are skipped with a warning;
/// subsequences with zero path length are left out.
pub fn odometry_errors(est_poses: &[[f64; 3]], true_poses: &[[f64; 3]], lengths: &[usize]) -> Result<OdometryErrorReport> {
    if est_poses.len() != true_poses.len() {
        return Err(Error::structural(format!(
            "{} estimated poses but {} true poses",
            est_poses.len(),
            true_poses.len()
        )));
    }
    let n = true_poses.len();
    let mut report = OdometryErrorReport {
        translational_error: 0.0,
        rotational_error: 0.0,
        subsequence_lengths: Vec::new(),
        per_length: Vec::new(),
        warnings: Vec::new(),
    };
    let (mut t_all, mut r_all, mut count_all) = (0.0, 0.0, 0usize);
    for &len in lengths {
        if len < 2 || len > n {
            let msg = format!("subsequence length {len} skipped: trajectory has {n} poses");
            log::warn!("{msg}");
            report.warnings.push(msg);
            continue;
        }
        let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
        for i in 0..=n - len {
            let j = i + len - 1;
            let dist = path_length(&true_poses[i..=j]);
            if !(dist > 0.0) {
                continue;
            }
            let truth = relative(true_poses[i], true_poses[j]);
            let est = relative(est_poses[i], est_poses[j]);
            let err = relative(est, truth);
            t_sum += err[0].hypot(err[1]) / dist;
            r_sum += err[2].abs().to_degrees() / dist;
            count += 1;
        }
        if count == 0 {
            let msg = format!("subsequence length {len} skipped: no motion");
            log::warn!("{msg}");
            report.warnings.push(msg);
            continue;
        }
        report.subsequence_lengths.push(len);
        report.per_length.push(LengthError {
            length: len,
            subsequences: count,
            translational_error: t_sum / count as f64,
            rotational_error: r_sum / count as f64,
        });
        t_all += t_sum;
        r_all += r_sum;
        count_all += count;
    }
    if count_all > 0 {
        report.translational_error = t_all / count_all as f64;
        report.rotational_error = r_all / count_all as f64;
    }
    Ok(report)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::contract("need at least two matching points"));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::contract("log-log slope needs positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::contract("x values are all equal"));
    }
    Ok(sxy / sxx)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
