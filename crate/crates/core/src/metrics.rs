//! Quantitative instruments: SNR, Price of Stability, Price of Anarchy,
//! empirical Rademacher complexity, a uniform-stability probe, and exact
//! (epsilon, delta) differential-privacy verification for finite mechanisms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::sample_variance;

/// Numerical slack for the DP verdict, absorbing `exp(ln 3) != 3` float
/// round-off without hiding real violations.
pub const DP_TOLERANCE: f64 = 1e-12;

/// A per-epoch series (typically validation accuracies) tagged with the
/// noise level that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub values: Vec<f64>,
    pub sigma: f64,
    pub label: String,
}

impl MetricSeries {
    pub fn new(values: Vec<f64>, sigma: f64, label: impl Into<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("metric series".into()));
        }
        Ok(MetricSeries {
            values,
            sigma,
            label: label.into(),
        })
    }
}

/// Signal-to-noise ratio in decibels, with a distinguished sentinel for a
/// noise series with zero variance (sigma had no measurable effect).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Snr {
    Db(f64),
    Infinite,
}

impl Snr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Snr::Db(v) => Some(*v),
            Snr::Infinite => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Snr::Db(_))
    }
}

impl std::fmt::Display for Snr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Snr::Db(v) => write!(f, "{v}"),
            Snr::Infinite => write!(f, "inf"),
        }
    }
}

/// `10 * log10(Var(signal) / Var(noise))` where the noise realization is the
/// per-epoch gap `signal[e] - noisy[e]` and both variances use the N-1
/// divisor.
pub fn snr_db(signal: &MetricSeries, noisy: &MetricSeries) -> Result<Snr> {
    if signal.values.len() != noisy.values.len() {
        return Err(Error::Metric(format!(
            "series lengths differ: {} vs {}",
            signal.values.len(),
            noisy.values.len()
        )));
    }
    if signal.values.len() < 2 {
        return Err(Error::Metric("series need at least 2 epochs".into()));
    }
    let noise: Vec<f64> = signal
        .values
        .iter()
        .zip(noisy.values.iter())
        .map(|(s, n)| s - n)
        .collect();
    let var_signal = sample_variance(&signal.values);
    let var_noise = sample_variance(&noise);
    if var_signal == 0.0 {
        return Err(Error::Metric(
            "degenerate base series (zero variance)".into(),
        ));
    }
    if var_noise == 0.0 {
        return Ok(Snr::Infinite);
    }
    Ok(Snr::Db(10.0 * (var_signal / var_noise).log10()))
}

/// Test-accuracy ratio of the noisy model against the base model.
pub fn price_of_stability(test_acc_sigma: f64, test_acc_base: f64) -> Result<f64> {
    if test_acc_base.is_nan() || test_acc_base <= 0.0 {
        return Err(Error::Metric("base test accuracy must be positive".into()));
    }
    Ok(test_acc_sigma / test_acc_base)
}

/// Test-loss ratio of the noisy model against the base model.
pub fn price_of_anarchy(test_loss_sigma: f64, test_loss_base: f64) -> Result<f64> {
    if test_loss_base.is_nan() || test_loss_base <= 0.0 {
        return Err(Error::Metric("base test loss must be positive".into()));
    }
    Ok(test_loss_sigma / test_loss_base)
}

/// One row of a sigma sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub train_acc: f64,
    pub val_series: MetricSeries,
    pub test_acc: f64,
    pub test_loss: f64,
    pub snr: Snr,
    pub pos: f64,
    pub poa: f64,
}

/// A full sweep: rows sorted by sigma with exactly one base row at sigma 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn validate(&self) -> Result<()> {
        let zero_rows = self.rows.iter().filter(|r| r.sigma == 0.0).count();
        if zero_rows != 1 {
            return Err(Error::Metric(format!(
                "sweep must contain exactly one sigma=0 row, found {zero_rows}"
            )));
        }
        if self.rows.windows(2).any(|w| w[0].sigma > w[1].sigma) {
            return Err(Error::Metric("sweep rows must be sorted by sigma".into()));
        }
        Ok(())
    }

    pub fn base_row(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.sigma == 0.0)
    }

    /// CSV with the exact column set behind the sweep figures.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma,train_acc,test_acc,test_loss,snr_db,pos,poa\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.2},{},{},{},{},{},{}\n",
                r.sigma, r.train_acc, r.test_acc, r.test_loss, r.snr, r.pos, r.poa
            ));
        }
        out
    }
}

/// The noise level with the highest finite SNR; ties break toward the
/// larger sigma (stronger privacy at equal signal quality).
pub fn optimal_sigma_by_snr(sweep: &SweepResult) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for row in &sweep.rows {
        if row.sigma <= 0.0 {
            continue;
        }
        if let Snr::Db(db) = row.snr {
            let better = match best {
                None => true,
                Some((best_db, _)) => db >= best_db,
            };
            if better {
                best = Some((db, row.sigma));
            }
        }
    }
    best.map(|(_, sigma)| sigma)
        .ok_or_else(|| Error::Metric("no sigma>0 row with finite SNR".into()))
}

/// Monte-Carlo estimate of the empirical Rademacher complexity of a finite
/// hypothesis class over the given inputs: the mean over random +/-1 label
/// vectors of the best correlation any hypothesis achieves.
pub fn rademacher_estimate<X, H>(
    hypotheses: &[H],
    inputs: &[X],
    trials: usize,
    rng: &mut RngStream,
) -> Result<f64>
where
    H: Fn(&X) -> f64,
{
    if hypotheses.is_empty() {
        return Err(Error::Empty("hypothesis set".into()));
    }
    if inputs.is_empty() {
        return Err(Error::Empty("input sample".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let n = inputs.len();
    // Predictions are fixed; precompute the (hypothesis x input) table.
    let preds: Vec<Vec<f64>> = hypotheses
        .iter()
        .map(|h| inputs.iter().map(h).collect())
        .collect();
    let mut sum = 0.0;
    let mut signs = vec![0.0; n];
    for _ in 0..trials {
        for s in signs.iter_mut() {
            *s = rng.sign();
        }
        let mut best = f64::NEG_INFINITY;
        for row in &preds {
            let mut corr = 0.0;
            for (p, s) in row.iter().zip(signs.iter()) {
                corr += p * s;
            }
            corr /= n as f64;
            if corr > best {
                best = corr;
            }
        }
        sum += best;
    }
    Ok(sum / trials as f64)
}

/// Empirical lower bound on the uniform-stability coefficient beta: train on
/// S and on S with one point replaced (same seeds), then take the largest
/// per-point loss difference over the evaluation points.
///
/// `train_fn` must be deterministic; it returns a per-point loss function.
pub fn stability_probe<Z, L, F>(
    train_fn: F,
    dataset: &[Z],
    replace_index: usize,
    z_prime: &Z,
    eval_points: &[Z],
) -> Result<f64>
where
    Z: Clone,
    F: Fn(&[Z]) -> L,
    L: Fn(&Z) -> f64,
{
    if replace_index >= dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "replace_index {replace_index} out of range for dataset of {}",
            dataset.len()
        )));
    }
    if eval_points.is_empty() {
        return Err(Error::Empty("evaluation points".into()));
    }
    let mut altered = dataset.to_vec();
    altered[replace_index] = z_prime.clone();
    let loss_s = train_fn(dataset);
    let loss_s_prime = train_fn(&altered);
    let mut beta = 0.0f64;
    for z in eval_points {
        beta = beta.max((loss_s(z) - loss_s_prime(z)).abs());
    }
    Ok(beta)
}

/// Largest l1 change in a query's output over neighboring dataset pairs.
pub fn l1_sensitivity<D>(query: impl Fn(&D) -> Vec<f64>, neighbor_pairs: &[(D, D)]) -> Result<f64> {
    if neighbor_pairs.is_empty() {
        return Err(Error::Empty("neighbor pair list".into()));
    }
    let mut worst = 0.0f64;
    for (x, y) in neighbor_pairs {
        let qx = query(x);
        let qy = query(y);
        if qx.len() != qy.len() {
            return Err(Error::Metric("query output lengths differ".into()));
        }
        let dist: f64 = qx.iter().zip(qy.iter()).map(|(a, b)| (a - b).abs()).sum();
        worst = worst.max(dist);
    }
    Ok(worst)
}

/// A randomized mechanism over a finite outcome set, given as one
/// probability vector per dataset id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMechanism {
    outcome_count: usize,
    distributions: BTreeMap<String, Vec<f64>>,
}

impl FiniteMechanism {
    pub fn new(distributions: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let mut outcome_count = None;
        for (id, probs) in &distributions {
            match outcome_count {
                None => outcome_count = Some(probs.len()),
                Some(n) if n != probs.len() => {
                    return Err(Error::InvalidArgument(format!(
                        "distribution '{id}' has {} outcomes, expected {n}",
                        probs.len()
                    )))
                }
                _ => {}
            }
            if probs.iter().any(|p| *p < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "distribution '{id}' has a negative probability"
                )));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "distribution '{id}' sums to {sum}, expected 1"
                )));
            }
        }
        let outcome_count =
            outcome_count.ok_or_else(|| Error::Empty("mechanism has no distributions".into()))?;
        Ok(FiniteMechanism {
            outcome_count,
            distributions,
        })
    }

    pub fn outcome_count(&self) -> usize {
        self.outcome_count
    }

    pub fn distribution(&self, id: &str) -> Result<&[f64]> {
        self.distributions
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown dataset id '{id}'")))
    }
}

/// Verdict of an (epsilon, delta)-DP check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpVerdict {
    pub holds: bool,
    /// Worst slack over all ordered pairs: the probability mass by which the
    /// binding outcome set exceeds `exp(epsilon) * P[M(y)]`.
    pub worst_set_mass: f64,
}

/// Exact verification of `P[M(x) in S] <= exp(eps) * P[M(y) in S] + delta`
/// for every ordered neighbor pair.
///
/// For a discrete mechanism the binding set is
/// `S = {o : P[M(x)=o] > exp(eps) * P[M(y)=o]}`; checking its mass against
/// delta is equivalent to checking all 2^n outcome subsets.
pub fn dp_check(
    mech: &FiniteMechanism,
    neighbor_pairs: &[(String, String)],
    epsilon: f64,
    delta: f64,
) -> Result<DpVerdict> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be finite and non-negative, got {epsilon}"
        )));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!(
            "delta must be in [0, 1], got {delta}"
        )));
    }
    if neighbor_pairs.is_empty() {
        return Err(Error::Empty("neighbor pair list".into()));
    }
    let e_eps = epsilon.exp();
    let mut worst = 0.0f64;
    for (x, y) in neighbor_pairs {
        let px = mech.distribution(x)?;
        let py = mech.distribution(y)?;
        let mass: f64 = px
            .iter()
            .zip(py.iter())
            .map(|(a, b)| (a - e_eps * b).max(0.0))
            .sum();
        worst = worst.max(mass);
    }
    Ok(DpVerdict {
        holds: worst <= delta + DP_TOLERANCE,
        worst_set_mass: worst,
    })
}
