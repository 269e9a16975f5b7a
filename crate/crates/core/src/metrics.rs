//! Streaming moments, squared bias of the second moment, and standardized
//! rank aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Running means of `x` and `x²` with constant memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub count: usize,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    /// Points rejected because they (or their transform) were not finite.
    pub dropped: usize,
}

impl RunningMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            first: vec![0.0; dim],
            second: vec![0.0; dim],
            dropped: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Merges a batch: the new mean is `(m/n)·old + (b/n)·batch mean` with
    /// `n = m + b`.
    pub fn update(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        self.update_with(batch, |x| Some(x.to_vec()))
    }

    /// Like [`update`](Self::update) but accumulates `transform(x)`. Points
    /// whose transform fails or is not finite are dropped and counted.
    pub fn update_with<F>(&mut self, batch: &[Vec<f64>], mut transform: F) -> Result<()>
    where
        F: FnMut(&[f64]) -> Option<Vec<f64>>,
    {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let d = self.dim();
        if let Some(bad) = batch.iter().find(|x| x.len() != d) {
            return Err(Error::Input(format!(
                "point has length {}, accumulator dimension is {d}",
                bad.len()
            )));
        }
        let mut s1 = vec![0.0; d];
        let mut s2 = vec![0.0; d];
        let mut b = 0usize;
        for x in batch {
            match transform(x) {
                Some(y) if y.len() == d && y.iter().all(|v| v.is_finite()) => {
                    for k in 0..d {
                        s1[k] += y[k];
                        s2[k] += y[k] * y[k];
                    }
                    b += 1;
                }
                _ => self.dropped += 1,
            }
        }
        if b == 0 {
            return Ok(());
        }
        let bf = b as f64;
        for k in 0..d {
            s1[k] /= bf;
            s2[k] /= bf;
        }
        self.merge_means(b, &s1, &s2);
        Ok(())
    }

    /// Combines two accumulators with the same weighted rule.
    pub fn merge(&mut self, other: &RunningMoments) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::Input("accumulator dimensions differ".into()));
        }
        self.dropped += other.dropped;
        if other.count > 0 {
            self.merge_means(other.count, &other.first, &other.second);
        }
        Ok(())
    }

    fn merge_means(&mut self, b: usize, first: &[f64], second: &[f64]) {
        let m = self.count as f64;
        let n = (self.count + b) as f64;
        let (wa, wb) = (m / n, b as f64 / n);
        for k in 0..self.dim() {
            self.first[k] = wa * self.first[k] + wb * first[k];
            self.second[k] = wa * self.second[k] + wb * second[k];
        }
        self.count += b;
    }

    /// Per-coordinate `E[x²] − E[x]²`.
    pub fn variance(&self) -> Vec<f64> {
        self.first
            .iter()
            .zip(&self.second)
            .map(|(m, s)| s - m * m)
            .collect()
    }
}

/// `max_d (est_d − true_d)² / var_d`.
pub fn squared_bias(
    estimated_second: &[f64],
    true_second: &[f64],
    true_variance: &[f64],
) -> Result<f64> {
    let d = estimated_second.len();
    if true_second.len() != d || true_variance.len() != d || d == 0 {
        return Err(Error::Input(
            "moment vectors must be non-empty and equally long".into(),
        ));
    }
    if true_variance.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Input("variances must be positive".into()));
    }
    let mut worst = 0.0f64;
    for k in 0..d {
        let e = estimated_second[k] - true_second[k];
        let v = e * e / true_variance[k];
        if v.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(v);
    }
    Ok(worst)
}

/// 1-based ascending ranks; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Ranks by ascending value, centred and divided by the sample standard
/// deviation.
pub fn standardize_ranks(values: &[f64]) -> Result<Vec<f64>> {
    let k = values.len();
    if k < 2 {
        return Err(Error::DegenerateRanks(format!(
            "need at least 2 methods, got {k}"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("cannot rank NaN values".into()));
    }
    let ranks = average_ranks(values);
    let mean = ranks.iter().sum::<f64>() / k as f64;
    let var = ranks.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    if var == 0.0 {
        return Err(Error::DegenerateRanks("all values tied".into()));
    }
    let sd = var.sqrt();
    Ok(ranks.iter().map(|r| (r - mean) / sd).collect())
}

/// b² per method on one target.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub target: String,
    pub values: BTreeMap<String, f64>,
}

impl RankTable {
    pub fn new(target: impl Into<String>) -> Self {
        Self {
            target: target.into(),
            values: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, method: impl Into<String>, b2: f64) {
        self.values.insert(method.into(), b2);
    }

    /// Standardized rank per method.
    pub fn standardized(&self) -> Result<BTreeMap<String, f64>> {
        let values: Vec<f64> = self.values.values().copied().collect();
        let sr = standardize_ranks(&values)?;
        Ok(self.values.keys().cloned().zip(sr).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRank {
    pub method: String,
    pub mean_rank: f64,
    /// Standard error of the mean; absent for a single target.
    pub std_error: Option<f64>,
    pub targets: usize,
}

/// Mean standardized rank and its standard error per method, sorted by mean
/// rank (best first).
pub fn aggregate_ranks(tables: &[RankTable]) -> Result<Vec<MethodRank>> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Input("no rank tables to aggregate".into()))?;
    let methods: Vec<&String> = first.values.keys().collect();
    for t in tables {
        if t.values.keys().ne(first.values.keys()) {
            return Err(Error::Input(format!(
                "target `{}` has a different method set than `{}`",
                t.target, first.target
            )));
        }
    }
    let ranks: Vec<BTreeMap<String, f64>> = tables
        .iter()
        .map(|t| t.standardized())
        .collect::<Result<_>>()?;
    let b = tables.len() as f64;
    let mut out: Vec<MethodRank> = methods
        .into_iter()
        .map(|m| {
            let r: Vec<f64> = ranks.iter().map(|t| t[m]).collect();
            let mean = r.iter().sum::<f64>() / b;
            let std_error = (tables.len() > 1).then(|| {
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0);
                (var / b).sqrt()
            });
            MethodRank {
                method: m.clone(),
                mean_rank: mean,
                std_error,
                targets: tables.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.mean_rank
            .total_cmp(&b.mean_rank)
            .then_with(|| a.method.cmp(&b.method))
    });
    Ok(out)
}
