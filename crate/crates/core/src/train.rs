//! Loss, Adam, the training loop and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{bce_value, Graph, Mode};
use crate::config::{ModelConfig, SelectionMetric, TrainConfig};
use crate::data::{PhenoStats, Subject, SubjectSample};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{model_forward, predict};
use crate::params::ParamSet;
use crate::rng::{RngStream, Stream};

pub const DECISION_THRESHOLD: f64 = 0.5;

/// Binary cross-entropy with the probability clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(prob: f64, label: u8) -> f64 {
    bce_value(prob, f64::from(label))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            lr: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        let m = state.m.get_mut(name)?.data_mut();
        for (mi, gi) in m.iter_mut().zip(g.data()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v.get_mut(name)?.data_mut();
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let m = state.m.get(name)?.data();
        let v = state.v.get(name)?.data();
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Eval-mode probabilities for every sample, in order.
pub fn predict_all(params: &ParamSet, cfg: &ModelConfig, samples: &[SubjectSample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| predict(params, cfg, &s.segment, &s.pheno))
        .collect()
}

/// Thresholds eval-mode probabilities at 0.5 and scores them.
pub fn evaluate(params: &ParamSet, cfg: &ModelConfig, samples: &[SubjectSample]) -> Result<MetricsReport> {
    let probs = predict_all(params, cfg, samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    compute_metrics(&probs, &labels, DECISION_THRESHOLD)
}

/// Mean BCE over `batch` plus its parameter gradient, all in training mode.
pub fn batch_loss_and_grad(
    params: &ParamSet,
    cfg: &ModelConfig,
    batch: &[SubjectSample],
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(f64, ParamSet)> {
    let mut total = params.zeros_like();
    let mut loss_sum = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let f = model_forward(&mut g, &bound, cfg, &sample.segment, &sample.pheno, mode, rng, false)?;
        let loss = g.bce(f.prob, f64::from(sample.label))?;
        loss_sum += g.value(loss).data()[0];
        let mut grads = g.backward_scaled(loss, scale)?;
        let gp = bound.collect(&g, &mut grads);
        total.add_scaled(&gp, 1.0)?;
    }
    Ok((loss_sum * scale, total))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `None` for epoch 0, the untrained parameters.
    pub train_loss: Option<f64>,
    pub val: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_params: ParamSet,
    pub best_val: MetricsReport,
    pub final_params: ParamSet,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
}

fn better(metric: SelectionMetric, a: &MetricsReport, b: &MetricsReport) -> bool {
    let auc = |r: &MetricsReport| r.auc.unwrap_or(f64::NEG_INFINITY);
    let key = |r: &MetricsReport| match metric {
        SelectionMetric::Acc => (r.acc, auc(r)),
        SelectionMetric::Auc => (auc(r), r.acc),
    };
    // strictly better only, so ties keep the earlier epoch
    key(a) > key(b)
}

/// Trains from `params`, evaluating the validation subjects (center crops)
/// after every epoch and keeping the best epoch by the selection metric.
///
/// Epoch 0 is the initial parameters; with `epochs = 0` they are returned
/// with their validation report.
pub fn train(
    params: ParamSet,
    train_set: &[Subject],
    val_set: &[Subject],
    stats: &PhenoStats,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    if let Some(s) = val_set
        .iter()
        .find(|v| train_set.iter().any(|t| t.series.subject_id == v.series.subject_id))
    {
        return Err(Error::Data(format!(
            "subject {} is in both training and validation sets",
            s.series.subject_id
        )));
    }
    let len = cfg.segment_length;
    let val_samples: Vec<SubjectSample> = val_set
        .iter()
        .map(|s| s.center_sample(len, stats))
        .collect::<Result<_>>()?;

    let adam = AdamConfig::from(cfg);
    let mut state = AdamState::new(&params);
    let mut params = params;

    let initial = EpochRecord {
        epoch: 0,
        train_loss: None,
        val: evaluate(&params, model_cfg, &val_samples)?,
    };
    on_epoch(&initial);
    let mut best = (0, params.clone(), initial.val.clone());
    let mut history = vec![initial];
    let mut steps = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        RngStream::indexed(cfg.seed, Stream::Shuffle, epoch as u64).shuffle(&mut order);
        let mut aug = RngStream::indexed(cfg.seed, Stream::Augmentation, epoch as u64);
        let mut drop = RngStream::indexed(cfg.seed, Stream::Dropout, epoch as u64);
        let samples: Vec<SubjectSample> = order
            .iter()
            .map(|&i| train_set[i].random_sample(len, stats, &mut aug))
            .collect::<Result<_>>()?;

        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for (b, batch) in samples.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) =
                match batch_loss_and_grad(&params, model_cfg, batch, Mode::Train, &mut drop) {
                    Ok(v) => v,
                    Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch, batch: b }),
                    Err(e) => return Err(e),
                };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            adam_step(&mut params, &grads, &mut state, &adam)?;
            loss_sum += loss;
            n_batches += 1;
            steps += 1;
        }

        let record = EpochRecord {
            epoch,
            train_loss: Some(loss_sum / n_batches as f64),
            val: evaluate(&params, model_cfg, &val_samples)?,
        };
        on_epoch(&record);
        if better(cfg.selection_metric, &record.val, &best.2) {
            best = (epoch, params.clone(), record.val.clone());
        }
        history.push(record);
    }

    Ok(TrainOutcome {
        best_epoch: best.0,
        best_params: best.1,
        best_val: best.2,
        final_params: params,
        history,
        steps,
    })
}

pub const HISTORY_HEADER: &str = "epoch\ttrain_loss\tval_acc\tval_spe\tval_sen\tval_auc";

/// One line per epoch under [`HISTORY_HEADER`]; undefined values are `nan`.
pub fn format_history(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch,
            opt(r.train_loss),
            r.val.acc,
            opt(r.val.spe),
            opt(r.val.sen),
            opt(r.val.auc)
        )
        .unwrap();
    }
    s
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, format_history(history)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.5, 1) - 0.693147).abs() < 1e-6);
        assert!((bce_loss(1.0 - 1e-7, 1) - 1e-7).abs() < 1e-12);
        // d/dp at y = 1 is -1/p
        let p = 0.3;
        let h = 1e-6;
        let fd = (bce_loss(p + h, 1) - bce_loss(p - h, 1)) / (2.0 * h);
        assert!((fd + 1.0 / p).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = one(1.25);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::from(&TrainConfig::default());
        adam_step(&mut p, &one(0.0), &mut st, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.25]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one(0.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adam_step(&mut p, &one(1.0), &mut st, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 at t = 1
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn adam_lr_zero_is_identity() {
        let mut p = one(0.7);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        for g in [1.0, -3.0, 0.2] {
            adam_step(&mut p, &one(g), &mut st, &cfg).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
    }
}
