//! Dual-loss training loop: mixed labeled/unlabeled batches, Adam updates,
//! per-epoch validation Pearson, and strict-improvement checkpoint
//! selection. MSE-only and DSM-only ablation modes share the same loop.

use std::collections::BTreeSet;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient, Tape, Tensor};
use crate::data::{featurize, split_complexes, Complex, Manifest, Split};
use crate::energy::{save_checkpoint, energy_t, EnergyModel, ModelConfig};
use crate::losses::{dsm_loss, mse_loss, perturb, total_loss};
use crate::metrics::{evaluate, pearson, EvalReport};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dual,
    MseOnly,
    DsmOnly,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Dual => "dual",
            Mode::MseOnly => "mse_only",
            Mode::DsmOnly => "dsm_only",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda: f64,
    pub sigma_range: [f64; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fraction of the labeled training complexes whose labels are used;
    /// the rest are treated as unlabeled (semi-supervised regime). The subset is
    /// the lexicographically first ids, so competing modes see identical
    /// labels.
    pub labeled_fraction: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Dual,
            lambda: 2.0,
            sigma_range: [0.1, 1.0],
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            labeled_fraction: 1.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_range[0] > 0.0 && self.sigma_range[0] <= self.sigma_range[1]) {
            return Err(Error::Config(format!(
                "sigma_range must satisfy 0 < low <= high, got {:?}",
                self.sigma_range
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction must be in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Adam with the standard bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_mse: Option<f64>,
    pub l_dsm: Option<f64>,
    pub total: f64,
    pub val_pearson: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_model: EnergyModel,
    pub final_model: EnergyModel,
    pub best_val_pearson: f64,
    pub best_epoch: Option<usize>,
    pub checkpoint_path: PathBuf,
    pub history: Vec<EpochMetrics>,
}

/// One training sample: the complex plus whether its label participates.
struct Sample<'a> {
    complex: &'a Complex,
    use_label: bool,
}

/// The lexicographically-first ceil(f * n) labeled train ids; shared across
/// modes so semi-supervised comparisons use identical label subsets.
pub fn labeled_subset(manifest: &Manifest, fraction: f64) -> BTreeSet<String> {
    let mut ids: Vec<&str> = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Train && e.labeled)
        .map(|e| e.id.as_str())
        .collect();
    ids.sort_unstable();
    let keep = (fraction * ids.len() as f64).ceil() as usize;
    ids.into_iter().take(keep).map(String::from).collect()
}

fn training_samples<'a>(
    cfg: &TrainConfig,
    manifest: &Manifest,
    data: &'a [Complex],
) -> Result<Vec<Sample<'a>>> {
    let by_id: BTreeMap<&str, &Complex> = data.iter().map(|c| (c.id.as_str(), c)).collect();
    let kept = labeled_subset(manifest, cfg.labeled_fraction);
    let mut samples = Vec::new();
    let mut n_train = 0usize;
    for e in &manifest.entries {
        if e.split != Split::Train {
            continue;
        }
        n_train += 1;
        let c = *by_id
            .get(e.id.as_str())
            .ok_or_else(|| Error::Data(format!("manifest id {} not present in dataset", e.id)))?;
        let labeled = e.labeled && c.affinity.is_some() && kept.contains(&e.id);
        match cfg.mode {
            Mode::MseOnly => {
                if labeled {
                    samples.push(Sample { complex: c, use_label: true });
                }
            }
            Mode::Dual => samples.push(Sample { complex: c, use_label: labeled }),
            Mode::DsmOnly => samples.push(Sample { complex: c, use_label: false }),
        }
    }
    if n_train == 0 {
        return Err(Error::Config("no training samples in the manifest".into()));
    }
    if cfg.mode != Mode::DsmOnly && !samples.iter().any(|s| s.use_label) {
        return Err(Error::Config("no labeled samples for a mode that needs labels".into()));
    }
    Ok(samples)
}

/// Checkpoint selection score: NaN validation Pearson ranks below anything.
fn selection_score(val_pearson: f64) -> f64 {
    if val_pearson.is_nan() {
        f64::NEG_INFINITY
    } else {
        val_pearson
    }
}

/// Runs the full training loop; writes `metrics.csv` and the best
/// checkpoint (`best.ckpt.json`) under `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    data: &[Complex],
    manifest: &Manifest,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let samples = training_samples(cfg, manifest, data)?;
    let val: Vec<&Complex> = split_complexes(manifest, data, Split::Val)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = EnergyModel::init(cfg.model.clone(), &mut init_rng);
    let mut adam = Adam::new(model.n_params(), cfg.learning_rate);
    // separate streams so modes that skip the DSM branch (mse_only, or
    // lambda = 0) still shuffle identically
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5348_5546));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x4e4f_4953));

    let use_dsm = cfg.mode != Mode::MseOnly && !(cfg.mode == Mode::Dual && cfg.lambda == 0.0);
    let checkpoint_path = out_dir.join("best.ckpt.json");
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut best_model = model.clone();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut sum_mse = 0.0;
        let mut n_mse = 0usize;
        let mut sum_dsm = 0.0;
        let mut n_dsm = 0usize;
        let mut sum_total = 0.0;
        let mut n_total = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let bound = model.bind(Some(&tape));
            let mut batch_total: Option<Tensor> = None;
            let mut sigma_log = Vec::new();

            for &si in batch {
                let s = &samples[si];
                let c = s.complex;
                let mut l_mse_t = None;
                if s.use_label {
                    let (a, x, lig) = featurize(c);
                    let e = energy_t(&bound, &a, &x, &lig)?;
                    let l = mse_loss(&e.value, c.affinity.expect("labeled sample"))?;
                    sum_mse += l.item();
                    n_mse += 1;
                    l_mse_t = Some(l);
                }
                let sample_total = if use_dsm {
                    let sigma = noise_rng.gen_range(cfg.sigma_range[0]..=cfg.sigma_range[1]);
                    sigma_log.push((c.id.clone(), sigma));
                    let rec = perturb(&c.coords, &c.ligand_indices(), sigma, &mut noise_rng)?;
                    let l_dsm = dsm_loss(&bound, c, &rec, &tape)?;
                    sum_dsm += l_dsm.item();
                    n_dsm += 1;
                    total_loss(l_mse_t.as_ref(), &l_dsm, cfg.lambda)?
                } else {
                    l_mse_t.expect("mse branch always labeled")
                };
                sum_total += sample_total.item();
                n_total += 1;
                batch_total = Some(match batch_total {
                    Some(prev) => prev.add(&sample_total)?,
                    None => sample_total,
                });
            }

            let batch_loss = batch_total
                .expect("non-empty batch")
                .mul(&Tensor::scalar(1.0 / batch.len() as f64))?;
            if !batch_loss.item().is_finite() {
                let ids: Vec<&str> = batch.iter().map(|&si| samples[si].complex.id.as_str()).collect();
                return Err(Error::Numerical(format!(
                    "epoch {epoch}: non-finite loss on batch {ids:?} (sigmas: {sigma_log:?})"
                )));
            }
            let wrt = EnergyModel::bound_tensors(&bound);
            let grads = gradient(&batch_loss, &wrt, false)?;
            let flat_grads: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
            let mut flat = model.flat_params();
            adam.step(&mut flat, &flat_grads);
            model.set_flat_params(&flat);
        }

        let val_pearson = validation_pearson(&model, &val)?;
        let score = selection_score(val_pearson);
        if score > best_score {
            best_score = score;
            best_epoch = Some(epoch);
            best_model = model.clone();
            save_checkpoint(&checkpoint_path, &model, cfg.mode.as_str())?;
        }

        history.push(EpochMetrics {
            epoch,
            l_mse: (n_mse > 0).then(|| sum_mse / n_mse as f64),
            l_dsm: (n_dsm > 0).then(|| sum_dsm / n_dsm as f64),
            total: sum_total / n_total as f64,
            val_pearson,
        });
    }

    if best_epoch.is_none() {
        // degenerate run (e.g. constant predictions throughout): persist the
        // final parameters so downstream evaluation has a checkpoint
        save_checkpoint(&checkpoint_path, &model, cfg.mode.as_str())?;
        best_model = model.clone();
    }
    write_metrics_csv(&out_dir.join("metrics.csv"), &history)?;

    Ok(TrainOutcome {
        best_val_pearson: best_score,
        best_epoch,
        best_model,
        final_model: model,
        checkpoint_path,
        history,
    })
}

fn validation_pearson(model: &EnergyModel, val: &[&Complex]) -> Result<f64> {
    if val.len() < 2 {
        return Err(Error::Data(format!(
            "validation split needs at least 2 complexes, got {}",
            val.len()
        )));
    }
    let mut preds = Vec::with_capacity(val.len());
    let mut labels = Vec::with_capacity(val.len());
    for c in val {
        let y = c
            .affinity
            .ok_or_else(|| Error::Data(format!("{}: validation requires a label", c.id)))?;
        preds.push(model.predict(c)?.0);
        labels.push(y);
    }
    Ok(pearson(&preds, &labels))
}

fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut out = String::from("epoch,l_mse,l_dsm,total,val_pearson\n");
    for m in history {
        let fmt_opt = |v: Option<f64>| v.map_or("N/A".to_string(), |x| format!("{x:.6}"));
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            m.epoch,
            fmt_opt(m.l_mse),
            fmt_opt(m.l_dsm),
            m.total,
            m.val_pearson
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// multi-seed experiments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExperimentRow {
    pub label: String,
    pub pearson_mean: f64,
    pub pearson_std: f64,
    pub spearman_mean: f64,
    pub spearman_std: f64,
    /// None in dsm_only mode (comparative-only predictions).
    pub rmse_mean_std: Option<(f64, f64)>,
    pub reports: Vec<EvalReport>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains with seeds {seed, seed+1, seed+2} and evaluates each best
/// checkpoint on the test split.
pub fn run_experiment(
    label: &str,
    cfg: &TrainConfig,
    data: &[Complex],
    manifest: &Manifest,
    out_dir: &Path,
) -> Result<ExperimentRow> {
    let test: Vec<&Complex> = split_complexes(manifest, data, Split::Test)?;
    let with_rmse = cfg.mode != Mode::DsmOnly;
    let mut reports = Vec::new();
    for offset in 0..3u64 {
        let run_cfg = TrainConfig {
            seed: cfg.seed + offset,
            ..cfg.clone()
        };
        let run_dir = out_dir.join(format!("{label}_seed{}", run_cfg.seed));
        let outcome = train(&run_cfg, data, manifest, &run_dir)?;
        reports.push(evaluate(&outcome.best_model, &test, with_rmse)?);
    }
    let (pearson_mean, pearson_std) = mean_std(&reports.iter().map(|r| r.pearson).collect::<Vec<_>>());
    let (spearman_mean, spearman_std) =
        mean_std(&reports.iter().map(|r| r.spearman).collect::<Vec<_>>());
    let rmse_mean_std = with_rmse
        .then(|| mean_std(&reports.iter().map(|r| r.rmse.expect("rmse present")).collect::<Vec<_>>()));
    Ok(ExperimentRow {
        label: label.to_string(),
        pearson_mean,
        pearson_std,
        spearman_mean,
        spearman_std,
        rmse_mean_std,
        reports,
    })
}

/// Renders experiment rows as a small CSV table with mean/std columns.
pub fn experiment_table(rows: &[ExperimentRow]) -> String {
    let mut out = String::from("method,pearson_mean,pearson_std,spearman_mean,spearman_std,rmse_mean,rmse_std\n");
    for r in rows {
        let (rm, rs) = match r.rmse_mean_std {
            Some((m, s)) => (format!("{m:.4}"), format!("{s:.4}")),
            None => ("N/A".to_string(), "N/A".to_string()),
        };
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{rm},{rs}\n",
            r.label, r.pearson_mean, r.pearson_std, r.spearman_mean, r.spearman_std
        ));
    }
    out
}
