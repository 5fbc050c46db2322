//! Pearson correlation, its analytic gradient, the attended-correlation and
//! contrastive correlation losses, per-segment correlation records, and the
//! winner-take-all decoding-accuracy rule.

use crate::error::{CorrArg, Error, Result};
use serde::{Deserialize, Serialize};

/// Concurrent speech envelopes for one segment: `streams[j]` is the length-T
/// envelope of speaker `j`; `attended_index` marks the attended stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeSet {
    pub streams: Vec<Vec<f64>>,
    pub attended_index: usize,
}

impl EnvelopeSet {
    pub fn new(streams: Vec<Vec<f64>>, attended_index: usize) -> Result<Self> {
        if streams.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 envelope streams, got {}",
                streams.len()
            )));
        }
        let t = streams[0].len();
        if t < 2 {
            return Err(Error::Config("envelope streams need at least 2 samples".into()));
        }
        if streams.iter().any(|s| s.len() != t) {
            return Err(Error::ShapeMismatch("envelope streams differ in length".into()));
        }
        if attended_index >= streams.len() {
            return Err(Error::Config(format!(
                "attended index {attended_index} out of range for {} streams",
                streams.len()
            )));
        }
        Ok(Self { streams, attended_index })
    }

    pub fn n_samples(&self) -> usize {
        self.streams[0].len()
    }

    pub fn n_speakers(&self) -> usize {
        self.streams.len()
    }

    pub fn attended(&self) -> &[f64] {
        &self.streams[self.attended_index]
    }

    /// Unattended streams in column order, skipping the attended one.
    pub fn unattended(&self) -> impl Iterator<Item = &[f64]> {
        let att = self.attended_index;
        self.streams
            .iter()
            .enumerate()
            .filter(move |(j, _)| *j != att)
            .map(|(_, s)| s.as_slice())
    }
}

/// Per-segment correlation triple: attended PCC, unattended PCCs in column
/// order, and their difference delta = rho_a - mean(rho_u).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub rho_a: f64,
    pub rho_u: Vec<f64>,
    pub delta: f64,
}

/// Supported training objectives. The negative-sum variant is deliberately not
/// part of this enum; see [`loss_neg_sum`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Pcc,
    DeltaPcc,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Pcc => write!(f, "pcc"),
            LossKind::DeltaPcc => write!(f, "delta_pcc"),
        }
    }
}

struct Centered {
    centered: Vec<f64>,
    ss: f64, // sum of squares of the centered values
}

fn center(x: &[f64]) -> Centered {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let ss = centered.iter().map(|v| v * v).sum::<f64>();
    Centered { centered, ss }
}

/// Zero-variance test robust to rounding of a constant input.
fn is_degenerate(c: &Centered, x: &[f64]) -> bool {
    let msq = x.iter().map(|v| v * v).sum::<f64>();
    c.ss <= msq * 1e-24
}

fn check_pair(x: &[f64], z: &[f64]) -> Result<(Centered, Centered)> {
    if x.len() != z.len() {
        return Err(Error::ShapeMismatch(format!(
            "sequence lengths differ: {} vs {}",
            x.len(),
            z.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Config("pearson needs at least 2 samples".into()));
    }
    if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Config("pearson input contains non-finite values".into()));
    }
    let cx = center(x);
    let cz = center(z);
    if is_degenerate(&cx, x) {
        return Err(Error::DegenerateVariance { arg: CorrArg::First, detail: None });
    }
    if is_degenerate(&cz, z) {
        return Err(Error::DegenerateVariance { arg: CorrArg::Second, detail: None });
    }
    Ok((cx, cz))
}

/// Sample Pearson correlation coefficient of two length-T sequences.
pub fn pearson(x: &[f64], z: &[f64]) -> Result<f64> {
    let (cx, cz) = check_pair(x, z)?;
    let cov = cx
        .centered
        .iter()
        .zip(&cz.centered)
        .map(|(a, b)| a * b)
        .sum::<f64>();
    Ok(cov / (cx.ss.sqrt() * cz.ss.sqrt()))
}

/// Gradient of `pearson(x, z)` with respect to `x`:
/// `d r / d x_t = z~_t / (|x~| |z~|) - r x~_t / |x~|^2`. The result has zero mean.
pub fn pearson_grad(x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let (cx, cz) = check_pair(x, z)?;
    let nx = cx.ss.sqrt();
    let nz = cz.ss.sqrt();
    let cov = cx
        .centered
        .iter()
        .zip(&cz.centered)
        .map(|(a, b)| a * b)
        .sum::<f64>();
    let r = cov / (nx * nz);
    Ok(cx
        .centered
        .iter()
        .zip(&cz.centered)
        .map(|(xt, zt)| zt / (nx * nz) - r * xt / cx.ss)
        .collect())
}

/// Epsilon-stabilized value and gradient of pearson with respect to the first
/// argument. Used on the training path so a collapsed (constant) prediction
/// still yields a finite pull toward the reference; the reference itself must
/// be non-degenerate. The gradient is the exact gradient of the stabilized
/// value.
pub(crate) fn pearson_value_grad_stabilized(
    x: &[f64],
    z: &[f64],
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    if x.len() != z.len() {
        return Err(Error::ShapeMismatch(format!(
            "sequence lengths differ: {} vs {}",
            x.len(),
            z.len()
        )));
    }
    let cx = center(x);
    let cz = center(z);
    if is_degenerate(&cz, z) {
        return Err(Error::DegenerateVariance { arg: CorrArg::Second, detail: None });
    }
    let sx = cx.ss + eps;
    let sz = cz.ss + eps;
    let denom = (sx * sz).sqrt();
    let cov = cx
        .centered
        .iter()
        .zip(&cz.centered)
        .map(|(a, b)| a * b)
        .sum::<f64>();
    let r = cov / denom;
    let grad = cx
        .centered
        .iter()
        .zip(&cz.centered)
        .map(|(xt, zt)| zt / denom - r * xt / sx)
        .collect();
    Ok((r, grad))
}

fn check_env(yhat: &[f64], env: &EnvelopeSet) -> Result<()> {
    if yhat.len() != env.n_samples() {
        return Err(Error::ShapeMismatch(format!(
            "prediction length {} vs envelope length {}",
            yhat.len(),
            env.n_samples()
        )));
    }
    Ok(())
}

fn map_yhat_degenerate(e: Error) -> Error {
    match e {
        Error::DegenerateVariance { arg: CorrArg::First, .. } => Error::DegeneratePrediction,
        other => other,
    }
}

/// Attended-correlation loss: `L = -pearson(yhat, attended)` with its gradient
/// with respect to `yhat`.
pub fn loss_pcc(yhat: &[f64], env: &EnvelopeSet) -> Result<(f64, Vec<f64>)> {
    check_env(yhat, env)?;
    let att = env.attended();
    let r = pearson(yhat, att).map_err(map_yhat_degenerate)?;
    let g = pearson_grad(yhat, att).map_err(map_yhat_degenerate)?;
    Ok((-r, g.into_iter().map(|v| -v).collect()))
}

/// Contrastive correlation loss:
/// `L = -rho_a + mean_j rho_{u,j}` with its gradient with respect to `yhat`.
pub fn loss_delta_pcc(yhat: &[f64], env: &EnvelopeSet) -> Result<(f64, Vec<f64>)> {
    check_env(yhat, env)?;
    let t = yhat.len();
    let att = env.attended();
    let mut value = -pearson(yhat, att).map_err(map_yhat_degenerate)?;
    let mut grad: Vec<f64> = pearson_grad(yhat, att)
        .map_err(map_yhat_degenerate)?
        .into_iter()
        .map(|v| -v)
        .collect();
    let m = (env.n_speakers() - 1) as f64;
    for (j, u) in env.unattended().enumerate() {
        let r = pearson(yhat, u).map_err(|e| match e {
            Error::DegenerateVariance { arg: CorrArg::Second, .. } => Error::DegenerateVariance {
                arg: CorrArg::Second,
                detail: Some(format!("unattended stream {j}")),
            },
            other => map_yhat_degenerate(other),
        })?;
        value += r / m;
        let g = pearson_grad(yhat, u).map_err(map_yhat_degenerate)?;
        for t_i in 0..t {
            grad[t_i] += g[t_i] / m;
        }
    }
    Ok((value, grad))
}

/// The ill-posed negative-sum objective `L = -rho_a + sum_j rho_{u,j}`.
///
/// Kept outside [`LossKind`] on purpose: with three or more speakers a model
/// can lower this loss by driving every correlation negative instead of
/// separating the attended stream. Exposed so that collapse is demonstrable.
pub fn loss_neg_sum(yhat: &[f64], env: &EnvelopeSet) -> Result<(f64, Vec<f64>)> {
    check_env(yhat, env)?;
    let t = yhat.len();
    let att = env.attended();
    let mut value = -pearson(yhat, att).map_err(map_yhat_degenerate)?;
    let mut grad: Vec<f64> = pearson_grad(yhat, att)
        .map_err(map_yhat_degenerate)?
        .into_iter()
        .map(|v| -v)
        .collect();
    for u in env.unattended() {
        value += pearson(yhat, u).map_err(map_yhat_degenerate)?;
        let g = pearson_grad(yhat, u).map_err(map_yhat_degenerate)?;
        for t_i in 0..t {
            grad[t_i] += g[t_i];
        }
    }
    Ok((value, grad))
}

/// Correlates the prediction against every stream and assembles the record.
pub fn correlate_all(yhat: &[f64], env: &EnvelopeSet) -> Result<CorrelationRecord> {
    check_env(yhat, env)?;
    let rho_a = pearson(yhat, env.attended()).map_err(map_yhat_degenerate)?;
    let mut rho_u = Vec::with_capacity(env.n_speakers() - 1);
    for (j, u) in env.unattended().enumerate() {
        let r = pearson(yhat, u).map_err(|e| match e {
            Error::DegenerateVariance { arg: CorrArg::Second, .. } => Error::DegenerateVariance {
                arg: CorrArg::Second,
                detail: Some(format!("unattended stream {j}")),
            },
            other => map_yhat_degenerate(other),
        })?;
        rho_u.push(r);
    }
    let mean_u = rho_u.iter().sum::<f64>() / rho_u.len() as f64;
    Ok(CorrelationRecord { rho_a, delta: rho_a - mean_u, rho_u })
}

/// Fraction of records where the attended stream strictly beats every
/// unattended stream. Ties count as incorrect.
pub fn decoding_accuracy(records: &[CorrelationRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("correlation records"));
    }
    let correct = records
        .iter()
        .filter(|r| r.rho_u.iter().all(|&u| r.rho_a > u))
        .count();
    Ok(correct as f64 / records.len() as f64)
}
