//! Evaluation statistics (Pearson, Spearman, RMSE) and the train-set
//! rank-fit diagnostic.

use std::fmt;
use std::path::Path;

use crate::data::Complex;
use crate::energy::EnergyModel;
use crate::{Error, Result};

/// Product-moment correlation. Returns NaN when either input has zero
/// variance; callers treat that as "worse than any finite value".
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 2, "pearson needs at least 2 points");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Average ranks (1-based; ties get the mean of the ranks they span).
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite values"));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // mean of ranks i+1..=j+1
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    assert_eq!(pred.len(), y.len());
    assert!(!pred.is_empty());
    let s: f64 = pred.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (s / pred.len() as f64).sqrt()
}

/// Test-set summary. `rmse` is absent for models whose predictions are only
/// comparative (DSM-only training), matching the N/A reporting convention.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub pearson: f64,
    pub spearman: f64,
    pub rmse: Option<f64>,
    pub n: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rmse = match self.rmse {
            Some(v) => format!("{v:.4}"),
            None => "N/A".to_string(),
        };
        write!(
            f,
            "n={} pearson={:.4} spearman={:.4} rmse={rmse}",
            self.n, self.pearson, self.spearman
        )
    }
}

/// Predicts every labeled complex and summarizes. `with_rmse: false` renders
/// RMSE as N/A (comparative-only predictions).
pub fn evaluate(model: &EnergyModel, complexes: &[&Complex], with_rmse: bool) -> Result<EvalReport> {
    if complexes.len() < 2 {
        return Err(Error::Data(format!(
            "evaluation needs at least 2 labeled complexes, got {}",
            complexes.len()
        )));
    }
    let mut preds = Vec::with_capacity(complexes.len());
    let mut labels = Vec::with_capacity(complexes.len());
    for c in complexes {
        let y = c
            .affinity
            .ok_or_else(|| Error::Data(format!("{}: evaluation requires a label", c.id)))?;
        preds.push(model.predict(c)?.0);
        labels.push(y);
    }
    Ok(EvalReport {
        pearson: pearson(&preds, &labels),
        spearman: spearman(&preds, &labels),
        rmse: with_rmse.then(|| rmse(&preds, &labels)),
        n: complexes.len(),
    })
}

/// Rank agreement between predictions and labels on training complexes
/// (the rank-fit scatter diagnostic).
#[derive(Debug, Clone)]
pub struct RankFit {
    /// (complex id, true rank, predicted rank)
    pub rows: Vec<(String, f64, f64)>,
    pub spearman: f64,
}

pub fn rank_fit(model: &EnergyModel, complexes: &[&Complex]) -> Result<RankFit> {
    if complexes.len() < 2 {
        return Err(Error::Data(format!(
            "rank fit needs at least 2 complexes, got {}",
            complexes.len()
        )));
    }
    let mut preds = Vec::with_capacity(complexes.len());
    let mut labels = Vec::with_capacity(complexes.len());
    for c in complexes {
        let y = c
            .affinity
            .ok_or_else(|| Error::Data(format!("{}: rank fit requires a label", c.id)))?;
        preds.push(model.predict(c)?.0);
        labels.push(y);
    }
    let true_ranks = average_ranks(&labels);
    let pred_ranks = average_ranks(&preds);
    let rows = complexes
        .iter()
        .zip(true_ranks.iter().zip(&pred_ranks))
        .map(|(c, (&t, &p))| (c.id.clone(), t, p))
        .collect();
    Ok(RankFit {
        rows,
        spearman: pearson(&true_ranks, &pred_ranks),
    })
}

impl RankFit {
    /// CSV with header `id,true_rank,pred_rank`, one row per complex.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("id,true_rank,pred_rank\n");
        for (id, t, p) in &self.rows {
            out.push_str(&format!("{id},{t},{p}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}
