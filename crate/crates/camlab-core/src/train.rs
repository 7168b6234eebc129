//! SGD training with a combined objective: cross-entropy plus an optional
//! MSE between the model's true-class activation map and a salience target
//! (the dataset's ground-truth masks, or an adversarial mask).
//!
//! The salience term uses the classic weighted-activation form of the
//! true-class map — for this global-average-pool architecture it equals the
//! gradient-weighted map exactly — normalized on-tape with an epsilon guard
//! so constant maps contribute zero loss instead of dividing by zero.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::seeds;
use crate::sham::ShamMask;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub enum SalienceSource {
    /// Cross-entropy only.
    None,
    /// Per-image masks carried by the dataset.
    Dataset,
    /// One fixed adversarial mask for every sample.
    Sham(ShamMask),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_ce: f64,
    pub lambda_sal: f64,
    pub batch_size: usize,
    pub salience: SalienceSource,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 0.002,
            lambda_ce: 1.0,
            lambda_sal: 1.0,
            batch_size: 16,
            salience: SalienceSource::None,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ce < 0.0 || self.lambda_sal < 0.0 {
            return Err(Error::InvalidConfig("negative loss weight".into()));
        }
        if self.lambda_ce == 0.0 && self.lambda_sal == 0.0 {
            return Err(Error::InvalidConfig("both loss weights are zero".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.lr < 0.0 {
            return Err(Error::InvalidConfig("negative learning rate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Stable cross-entropy: logsumexp(logits) - logits[label].
fn cross_entropy_node(tape: &mut Tape, logits: NodeId, label: usize) -> Result<NodeId> {
    let m = tape.max_over(logits, 0)?;
    let z = tape.sub_bcast(logits, m)?;
    let e = tape.exp(z);
    let s = tape.sum_all(e)?;
    let l = tape.log(s);
    let lse = tape.add(m, l)?;
    let picked = tape.gather(logits, &[label])?;
    let yc = tape.reshape(picked, vec![])?;
    tape.sub(lse, yc)
}

/// The true-class activation map, min-max normalized on-tape. Equals the
/// normalized gradient-weighted map for this architecture.
fn salience_map_node(
    tape: &mut Tape,
    activations: NodeId,
    head_weight: NodeId,
    label: usize,
) -> Result<NodeId> {
    let row = tape.gather(head_weight, &[label])?;
    let k = tape.value(activations).shape()[0];
    let weights = tape.reshape(row, vec![k])?;
    let raw = tape.channel_combine(activations, weights)?;
    let r = tape.relu(raw);
    let (u, v) = {
        let s = tape.value(r).shape();
        (s[0], s[1])
    };
    let flat = tape.reshape(r, vec![u * v])?;
    let mx = tape.max_over(flat, 0)?;
    let neg = tape.scale(flat, -1.0);
    let mxneg = tape.max_over(neg, 0)?;
    let mn = tape.scale(mxneg, -1.0);
    let range = tape.sub(mx, mn)?;
    let eps = tape.constant(1e-12);
    let den = tape.add(range, eps)?;
    let inv = tape.recip(den);
    let shifted = tape.sub_bcast(r, mn)?;
    let norm = tape.mul_bcast(shifted, inv)?;
    tape.reshape(norm, vec![u, v])
}

fn mse_node(tape: &mut Tape, prediction: NodeId, target: NodeId) -> Result<NodeId> {
    let diff = tape.sub(prediction, target)?;
    let sq = tape.elementwise_mul(diff, diff)?;
    let total = tape.sum_all(sq)?;
    let n = tape.value(prediction).numel() as f64;
    Ok(tape.scale(total, 1.0 / n))
}

/// Loss components of one sample (values only, no gradients).
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub cross_entropy: f64,
    pub salience_mse: Option<f64>,
    pub total: f64,
}

struct SampleRun {
    tape: Tape,
    loss_id: NodeId,
    param_ids: Vec<NodeId>,
    parts: LossParts,
    correct: bool,
}

fn run_sample(
    model: &Model,
    image: &Tensor,
    label: usize,
    mask: Option<&Tensor>,
    lambda_ce: f64,
    lambda_sal: f64,
) -> Result<SampleRun> {
    if label >= model.config.class_count {
        return Err(Error::InvalidConfig(format!(
            "label {} out of range for {} classes",
            label, model.config.class_count
        )));
    }
    let fwd = model.forward_with_activations(image)?;
    let correct = argmax(fwd.logits().data()) == label;
    let crate::model::ForwardPass {
        mut tape,
        activations_id,
        logits_id,
        params,
        ..
    } = fwd;
    let ce = cross_entropy_node(&mut tape, logits_id, label)?;
    let ce_val = tape.value(ce).item();
    let weighted_ce = tape.scale(ce, lambda_ce);

    let (loss_id, sal_val) = match mask {
        Some(mask) if lambda_sal > 0.0 => {
            let map = salience_map_node(&mut tape, activations_id, params.head_weight, label)?;
            if tape.value(map).shape() != mask.shape() {
                return Err(Error::ShapeMismatch {
                    op: "salience_target",
                    lhs: tape.value(map).shape().to_vec(),
                    rhs: mask.shape().to_vec(),
                });
            }
            let target = tape.leaf(mask.clone());
            let mse = mse_node(&mut tape, map, target)?;
            let sal_val = tape.value(mse).item();
            let weighted = tape.scale(mse, lambda_sal);
            (tape.add(weighted_ce, weighted)?, Some(sal_val))
        }
        _ => (weighted_ce, None),
    };
    let total = tape.value(loss_id).item();
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", total)));
    }
    Ok(SampleRun {
        tape,
        loss_id,
        param_ids: params.ordered(),
        parts: LossParts {
            cross_entropy: ce_val,
            salience_mse: sal_val,
            total,
        },
        correct,
    })
}

/// Evaluate the loss decomposition of one sample.
pub fn loss_parts(
    model: &Model,
    image: &Tensor,
    label: usize,
    mask: Option<&Tensor>,
    lambda_ce: f64,
    lambda_sal: f64,
) -> Result<LossParts> {
    Ok(run_sample(model, image, label, mask, lambda_ce, lambda_sal)?.parts)
}

struct SampleGrad {
    grads: Vec<Tensor>,
    loss: f64,
    correct: bool,
}

fn sample_grad(
    model: &Model,
    image: &Tensor,
    label: usize,
    mask: Option<&Tensor>,
    tc: &TrainConfig,
) -> Result<SampleGrad> {
    let run = run_sample(model, image, label, mask, tc.lambda_ce, tc.lambda_sal)?;
    let bundle = run.tape.backward(run.loss_id)?;
    let grads = run
        .param_ids
        .iter()
        .map(|&id| {
            bundle
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(run.tape.value(id).shape()))
        })
        .collect();
    Ok(SampleGrad {
        grads,
        loss: run.parts.total,
        correct: run.correct,
    })
}

fn mask_for<'a>(
    dataset: &'a Dataset,
    index: usize,
    salience: &'a SalienceSource,
) -> Result<Option<&'a Tensor>> {
    match salience {
        SalienceSource::None => Ok(None),
        SalienceSource::Dataset => match &dataset.masks {
            Some(masks) => Ok(Some(&masks[index])),
            None => Err(Error::InvalidConfig(
                "dataset carries no salience masks".into(),
            )),
        },
        SalienceSource::Sham(sham) => Ok(Some(&sham.mask)),
    }
}

/// Train a copy of the model with SGD on the combined objective, returning
/// the trained model and a per-epoch loss/accuracy log.
pub fn train(model: &Model, dataset: &Dataset, tc: &TrainConfig) -> Result<(Model, Vec<EpochLog>)> {
    tc.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    if let Some(&bad) = dataset
        .labels
        .iter()
        .find(|&&l| l >= model.config.class_count)
    {
        return Err(Error::InvalidConfig(format!(
            "label {} out of range for {} classes",
            bad, model.config.class_count
        )));
    }
    // Surface a grid mismatch before the first epoch.
    if let SalienceSource::Sham(sham) = &tc.salience {
        let cam = model.config.cam_size;
        if sham.mask.shape() != [cam, cam] {
            return Err(Error::ShapeMismatch {
                op: "salience_target",
                lhs: sham.mask.shape().to_vec(),
                rhs: vec![cam, cam],
            });
        }
    }

    let mut model = model.clone();
    let mut logs = Vec::new();
    let n = dataset.len();
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(tc.seed, 300, epoch as u64, 0));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let grads: Vec<SampleGrad> = batch
                .par_iter()
                .map(|&i| {
                    let mask = mask_for(dataset, i, &tc.salience)?;
                    sample_grad(&model, &dataset.images[i], dataset.labels[i], mask, tc)
                })
                .collect::<Result<Vec<_>>>()?;
            let step = tc.lr / batch.len() as f64;
            let mut params = model.params_mut();
            for sample in &grads {
                loss_sum += sample.loss;
                correct += usize::from(sample.correct);
                for (param, grad) in params.iter_mut().zip(&sample.grads) {
                    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= step * g;
                    }
                }
            }
        }
        logs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        });
    }
    Ok((model, logs))
}

/// Fine-tune with the adversarial mask as the salience target for every
/// sample (combined loss, default one epoch).
pub fn finetune_sham(
    model: &Model,
    dataset: &Dataset,
    sham: &ShamMask,
    tc: &TrainConfig,
) -> Result<(Model, Vec<EpochLog>)> {
    let tc = TrainConfig {
        salience: SalienceSource::Sham(sham.clone()),
        ..tc.clone()
    };
    train(model, dataset, &tc)
}
