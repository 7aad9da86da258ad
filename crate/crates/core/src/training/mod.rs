//! Mini-batch training with projected Adam, validation-based early
//! stopping, evaluation, and the model-level gradient check.

mod checkpoint;
mod gradcheck;

use std::collections::HashSet;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, QMatrix, ResponseLog, Split};
use crate::diagnet::{
    batch_loss, forward_backward, predict_batch, proficiency_matrix, Architecture, Dropout,
    InteractionSign, ModelParams, Variant,
};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc, bce_loss, doa, EvalReport};
use crate::numerics::{adam_step, AdamConfig, AdamState};

pub use checkpoint::{ids_digest, Checkpoint, CheckpointHeader, TensorEntry, MAGIC};
pub use gradcheck::{check_gradients, GroupCheck};

/// Forward passes during evaluation are chunked to bound memory.
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Hidden widths of the prediction head; empty gives a linear head.
    pub hidden_dims: Vec<usize>,
    /// Student-embedding width; `None` means `max(1, floor(K/4))`.
    pub emb_dim: Option<usize>,
    pub interaction_sign: InteractionSign,
    /// Epochs without validation-AUC improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            variant: Variant::SrNcd,
            epochs: 50,
            batch_size: 256,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
            hidden_dims: vec![512, 256],
            emb_dim: None,
            interaction_sign: InteractionSign::HMinusBeta,
            early_stop_patience: 5,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        if self.hidden_dims.contains(&0) || self.emb_dim == Some(0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn architecture(&self, d: &Dataset) -> Result<Architecture> {
        let mut arch = Architecture::new(
            self.variant,
            d.n_students(),
            d.n_exercises(),
            d.n_concepts(),
            d.hierarchy.as_ref(),
        )?
        .with_hidden(self.hidden_dims.clone())
        .with_sign(self.interaction_sign);
        if let Some(dim) = self.emb_dim {
            arch = arch.with_emb_dim(dim);
        }
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective over the whole training split after the epoch.
    pub train_loss: f64,
    pub valid_acc: Option<f64>,
    pub valid_auc: Option<f64>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (1-based).
    pub best_epoch: usize,
}

/// `epoch,train_loss,valid_acc,valid_auc` rows; undefined metrics are `NA`.
pub fn train_log_csv(log: &[EpochRecord]) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.6}"));
    let mut out = String::from("epoch,train_loss,valid_acc,valid_auc\n");
    for r in log {
        out.push_str(&format!(
            "{},{:.6},{},{}\n",
            r.epoch,
            r.train_loss,
            f(r.valid_acc),
            f(r.valid_auc)
        ));
    }
    out
}

/// Predicted probabilities, chunked.
pub fn predict_logs(params: &ModelParams, logs: &[ResponseLog], q: &QMatrix) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(logs.len());
    for chunk in logs.chunks(EVAL_CHUNK) {
        let ys = predict_batch(params, params.arch.variant, chunk, q)?;
        out.extend(ys.into_iter().map(f64::from));
    }
    Ok(out)
}

fn labelled(logs: &[ResponseLog], preds: &[f64]) -> Vec<(u8, f64)> {
    logs.iter().zip(preds).map(|(l, &p)| (l.score, p)).collect()
}

/// Mean training objective of the current parameters over `logs`.
fn mean_loss(params: &ModelParams, logs: &[ResponseLog], q: &QMatrix) -> Result<f64> {
    let mut total = 0.0;
    for chunk in logs.chunks(EVAL_CHUNK) {
        total += batch_loss(params, params.arch.variant, chunk, q)? * chunk.len() as f64;
    }
    Ok(total / logs.len() as f64)
}

/// Train a fresh model on `split.train`, selecting the epoch with the best
/// validation AUC (earliest on ties). When validation AUC is undefined the
/// final epoch is returned and early stopping is off.
pub fn train(dataset: &Dataset, split: &Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let arch = cfg.architecture(dataset)?;
    let mut params = ModelParams::init(&arch, cfg.seed)?;
    train_params(&mut params, dataset, split, cfg)
}

/// Train existing parameters in place; see [`train`].
pub fn train_params(
    params: &mut ModelParams,
    dataset: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let variant = params.arch.variant;
    let q = &dataset.q;
    let adam = cfg.adam();
    let mut states: Vec<AdamState> = params
        .groups_mut()
        .into_iter()
        .map(|p| AdamState::for_param(p))
        .collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let mut order = split.train.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            params.zero_grad();
            let dropout = if cfg.dropout > 0.0 {
                Some(Dropout {
                    rate: cfg.dropout,
                    rng: &mut dropout_rng,
                })
            } else {
                None
            };
            let loss = forward_backward(params, variant, batch, q, dropout)?;
            if !loss.is_finite() {
                let students: Vec<&str> = batch
                    .iter()
                    .take(8)
                    .map(|l| dataset.ids.students[l.student].as_str())
                    .collect();
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, batch {bi} ({} responses, first students {students:?})",
                    batch.len()
                )));
            }
            for (p, s) in params.groups_mut().into_iter().zip(states.iter_mut()) {
                adam_step(p, s, &adam);
            }
        }
        let train_loss = mean_loss(params, &split.train, q)?;

        let (valid_acc, valid_auc) = if split.valid.is_empty() {
            (None, None)
        } else {
            let preds = predict_logs(params, &split.valid, q)?;
            let pairs = labelled(&split.valid, &preds);
            (Some(accuracy(&pairs)?), auc(&pairs))
        };
        debug!("epoch {epoch}: train_loss={train_loss:.5} valid_acc={valid_acc:?} valid_auc={valid_auc:?}");
        log.push(EpochRecord {
            epoch,
            train_loss,
            valid_acc,
            valid_auc,
        });

        if let Some(v) = valid_auc {
            if best.as_ref().is_none_or(|b| v > b.1) {
                best = Some((epoch, v, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                    info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }

    let (best_epoch, returned) = match best {
        Some((e, _, p)) => (e, p),
        None => (log.len(), params.clone()),
    };
    *params = returned.clone();
    Ok(TrainOutcome {
        params: returned,
        log,
        best_epoch,
    })
}

/// Score `eval_logs` with a trained model.
pub fn evaluate(
    params: &ModelParams,
    q: &QMatrix,
    train_logs: &[ResponseLog],
    eval_logs: &[ResponseLog],
    doa_sample_cap: Option<u64>,
    seed: u64,
) -> Result<EvalReport> {
    if eval_logs.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let preds = predict_logs(params, eval_logs, q)?;
    let pairs = labelled(eval_logs, &preds);
    let test_loss = pairs.iter().map(|&(y, p)| bce_loss(y, p)).sum::<f64>() / pairs.len() as f64;
    let h = proficiency_matrix(params)?;
    let d = doa(&h, eval_logs, q, doa_sample_cap, seed);
    let seen: HashSet<usize> = train_logs.iter().map(|l| l.exercise).collect();
    let cold: HashSet<usize> = eval_logs
        .iter()
        .map(|l| l.exercise)
        .filter(|e| !seen.contains(e))
        .collect();
    Ok(EvalReport {
        n_responses: eval_logs.len(),
        acc: accuracy(&pairs)?,
        auc: auc(&pairs),
        doa: d.mean,
        per_concept_doa: d.per_concept,
        test_loss,
        cold_exercise_count: cold.len(),
    })
}
