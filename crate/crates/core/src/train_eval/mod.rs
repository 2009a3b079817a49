//! Training with early stopping, evaluation and the two sweep protocols.

pub mod metrics;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Matrix, ParamStore};
use crate::cli_data::Dataset;
use crate::config::{OptimConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model_core::{AmessModel, Sample};
use crate::semantic_sync::{embed_descriptions, LabelDescriptionBank};

pub use metrics::{ClassMetrics, MetricsReport};

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: OptimConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore, config: &OptimConfig) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|(_, _, p)| Matrix::zeros(p.dim())).collect();
        Self {
            config: config.clone(),
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Clip by global norm, then update every parameter in place.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut Gradients) {
        let c = &self.config;
        if c.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if norm > c.grad_clip {
                grads.scale(c.grad_clip / norm);
            }
        }
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= c.lr * (update + c.weight_decay * *p);
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub best: AmessModel,
    pub best_epoch: usize,
    pub best_val: MetricsReport,
    /// Final-epoch parameters, when `optim.keep_last` is set.
    pub last: Option<AmessModel>,
    pub history: Vec<EpochRecord>,
}

/// Restrict the bank to `label_space`, keep the first `m` descriptions per
/// label and embed them.
pub fn prepare_bank(
    config: &TrainConfig,
    bank: &LabelDescriptionBank,
    label_space: &[String],
) -> Result<LabelDescriptionBank> {
    let m = config.data.descriptions_per_label;
    let truncated = bank.subset(label_space)?.truncated(m)?;
    embed_descriptions(&truncated, &config.embedder)
}

fn check_compatible(a: &Dataset, b: &Dataset) -> Result<()> {
    if a.label_space != b.label_space {
        return Err(Error::LabelMismatch(format!(
            "{} and {} splits have different label spaces",
            a.split.as_str(),
            b.split.as_str()
        )));
    }
    if a.input_dims != b.input_dims {
        return Err(Error::shape("split encoder widths", format!("{:?}", a.input_dims), format!("{:?}", b.input_dims)));
    }
    Ok(())
}

fn divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::InvalidInput(detail) if detail.starts_with("non-finite loss") => Error::Divergence { epoch, batch, detail },
        other => other,
    }
}

/// Train on `train`, select by validation accuracy. `bank` must already be
/// embedded (see [`prepare_bank`]).
pub fn train(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    bank: &LabelDescriptionBank,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("train and validation splits must be non-empty"));
    }
    check_compatible(train_set, val_set)?;
    let mut model = AmessModel::new(config, train_set.label_space.clone(), train_set.input_dims)?;
    let bank_index = model.bank_indices(bank)?;
    let mut opt = AdamW::new(&model.params, &config.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(AmessModel, usize, MetricsReport)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.optim.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.optim.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set.samples[i]).collect();
            let drop_rng = (config.model.dropout > 0.0).then_some(&mut rng);
            let (loss, mut grads) = model
                .loss_and_grad(&batch, bank, &bank_index, drop_rng)
                .map_err(|e| divergence(e, epoch, b + 1))?;
            if !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    detail: format!("non-finite gradient (loss {})", loss.total),
                });
            }
            loss_sum += loss.total * batch.len() as f64;
            opt.step(&mut model.params, &mut grads);
            model.params.quantize_f32();
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let report = evaluate(&model, val_set, false)?;
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.4} val_acc {:.4} val_f1 {:.4}",
            report.acc,
            report.f1
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_acc: report.acc,
            val_f1: report.f1,
        });
        if best.as_ref().map_or(true, |(_, _, r)| report.acc > r.acc) {
            best = Some((model.clone(), epoch, report));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.optim.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (best, best_epoch, best_val) = best.ok_or_else(|| Error::Config("optim.epochs must be positive".into()))?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val,
        last: config.optim.keep_last.then_some(model),
        history,
    })
}

/// Metrics of `model` on `data`. In OOS mode the split's out-of-scope label
/// yields the F1-IS and F1-OS columns.
pub fn evaluate(model: &AmessModel, data: &Dataset, oos_mode: bool) -> Result<MetricsReport> {
    if model.label_space != data.label_space {
        return Err(Error::LabelMismatch(format!(
            "checkpoint labels {:?} differ from {} split labels {:?}",
            model.label_space,
            data.split.as_str(),
            data.label_space
        )));
    }
    if model.input_dims != data.input_dims {
        return Err(Error::shape(
            "encoder widths",
            format!("{:?}", model.input_dims),
            format!("{:?}", data.input_dims),
        ));
    }
    let oos = if oos_mode {
        Some(data.oos_index().ok_or_else(|| {
            Error::LabelMismatch(format!("OOS mode needs an oos_label in the {} split", data.split.as_str()))
        })?)
    } else {
        None
    };
    let predicted = data
        .samples
        .par_iter()
        .map(|s| model.predict(s))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
    MetricsReport::from_predictions(&truth, &predicted, &data.label_space, model.config.metrics.average, oos)
}

/// Pooled tokens before the token MLP and synchronized tokens after it,
/// one row per sample.
pub fn collect_tokens(model: &AmessModel, samples: &[&Sample]) -> Result<(Matrix, Matrix)> {
    let d = model.config.model.d_t;
    let pairs = samples.par_iter().map(|s| model.tokens(s)).collect::<Result<Vec<_>>>()?;
    let mut before = Matrix::zeros((samples.len(), d));
    let mut after = Matrix::zeros((samples.len(), d));
    for (i, (b, a)) in pairs.into_iter().enumerate() {
        before.row_mut(i).assign(&b.row(0));
        after.row_mut(i).assign(&a.row(0));
    }
    Ok((before, after))
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Splits used by a sweep: train and select on `train`/`val`, report on `eval`.
#[derive(Clone, Copy, Debug)]
pub struct SweepData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub eval: &'a Dataset,
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub value: usize,
    pub report: MetricsReport,
}

/// Retrain for every anchor count from the same seed. Points run in parallel.
pub fn anchor_sweep(
    config: &TrainConfig,
    k_values: &[usize],
    data: SweepData,
    bank: &LabelDescriptionBank,
) -> Result<Vec<SweepPoint>> {
    if k_values.is_empty() {
        return Err(Error::invalid("no anchor counts given"));
    }
    for &k in k_values {
        if k == 0 || k > config.model.l_t {
            return Err(Error::Config(format!("anchor count {k} outside [1, {}]", config.model.l_t)));
        }
    }
    let embedded = prepare_bank(config, bank, &data.train.label_space)?;
    k_values
        .par_iter()
        .map(|&k| {
            let mut cfg = config.clone();
            cfg.model.k = k;
            let out = train(&cfg, data.train, data.val, &embedded)?;
            let report = evaluate(&out.best, data.eval, false)?;
            Ok(SweepPoint { value: k, report })
        })
        .collect()
}

/// Retrain for every description count, using the first `m` descriptions
/// per label. Points run in parallel.
pub fn description_count_sweep(
    config: &TrainConfig,
    m_values: &[usize],
    data: SweepData,
    bank: &LabelDescriptionBank,
) -> Result<Vec<SweepPoint>> {
    if m_values.is_empty() {
        return Err(Error::invalid("no description counts given"));
    }
    let banks = m_values
        .iter()
        .map(|&m| {
            let mut cfg = config.clone();
            cfg.data.descriptions_per_label = m;
            prepare_bank(&cfg, bank, &data.train.label_space).map(|b| (cfg, b))
        })
        .collect::<Result<Vec<_>>>()?;
    banks
        .par_iter()
        .map(|(cfg, b)| {
            let out = train(cfg, data.train, data.val, b)?;
            let report = evaluate(&out.best, data.eval, false)?;
            Ok(SweepPoint {
                value: cfg.data.descriptions_per_label,
                report,
            })
        })
        .collect()
}

/// CSV with header `<key>,acc,f1`.
pub fn write_sweep_csv(path: &Path, key: &str, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([key, "acc", "f1"])?;
    for p in points {
        w.write_record([p.value.to_string(), p.report.acc.to_string(), p.report.f1.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
