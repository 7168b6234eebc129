//! The CAM methods: gradient-weighted maps over the final-conv feature
//! stack, the contrastive variants that swap in a difference-logit target,
//! and the gradient-free comparisons.

use super::targets::{beta_of_competitors, build_target};
use super::{normalize_minmax, upsample_bilinear, CamMethod, SaliencyMap, TargetSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Denominator guard for the per-location second-order coefficients.
const PP_DENOM_GUARD: f64 = 1e-12;
/// Denominator stabilizer for the activation-normalized channel weights.
const XGRAD_EPS: f64 = 1e-8;

/// Forward once, then backpropagate the target to the final-conv stack.
/// Returns (activations, gradient at activations).
fn grad_at_activations(model: &Model, image: &Tensor, target: &TargetSpec) -> Result<(Tensor, Tensor)> {
    let fwd = model.forward_with_activations(image)?;
    let crate::model::ForwardPass {
        mut tape,
        activations_id,
        logits_id,
        ..
    } = fwd;
    let t = build_target(&mut tape, logits_id, target)?;
    let bundle = tape.backward(t)?;
    let activations = tape.value(activations_id).clone();
    let grad = bundle
        .grad(activations_id)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(activations.shape()));
    Ok((activations, grad))
}

fn stack_dims(activations: &Tensor) -> (usize, usize, usize) {
    let s = activations.shape();
    (s[0], s[1], s[2])
}

/// ReLU of a per-channel weighted sum of the stack.
fn weighted_relu_sum(activations: &Tensor, weights: &[f64]) -> Tensor {
    let (k, u, v) = stack_dims(activations);
    debug_assert_eq!(weights.len(), k);
    let mut out = vec![0.0; u * v];
    for ch in 0..k {
        let plane = &activations.data()[ch * u * v..(ch + 1) * u * v];
        for (o, &p) in out.iter_mut().zip(plane) {
            *o += weights[ch] * p;
        }
    }
    for o in &mut out {
        *o = o.max(0.0);
    }
    Tensor::new(vec![u, v], out).unwrap()
}

/// Channel weights are the spatial mean of the target gradient; the map is
/// the ReLU'd weighted activation sum. Single-logit targets give the
/// classic map, contrastive targets its difference-logit variant.
pub fn gradcam_from_parts(activations: &Tensor, grad: &Tensor) -> Tensor {
    let (k, u, v) = stack_dims(activations);
    let z = (u * v) as f64;
    let weights: Vec<f64> = (0..k)
        .map(|ch| grad.data()[ch * u * v..(ch + 1) * u * v].iter().sum::<f64>() / z)
        .collect();
    weighted_relu_sum(activations, &weights)
}

/// Per-location coefficients from the squared/cubed gradient, then the
/// ReLU'd gradient aggregation per channel.
pub fn gradcam_pp_from_parts(activations: &Tensor, grad: &Tensor) -> Tensor {
    let (k, u, v) = stack_dims(activations);
    let mut weights = vec![0.0; k];
    for ch in 0..k {
        let plane_a = &activations.data()[ch * u * v..(ch + 1) * u * v];
        let plane_g = &grad.data()[ch * u * v..(ch + 1) * u * v];
        let sum_a: f64 = plane_a.iter().sum();
        let mut w = 0.0;
        for &g in plane_g.iter() {
            let g2 = g * g;
            let denom = 2.0 * g2 + sum_a * g2 * g;
            let alpha = if denom.abs() < PP_DENOM_GUARD {
                0.0
            } else {
                g2 / denom
            };
            w += alpha * g.max(0.0);
        }
        weights[ch] = w;
    }
    weighted_relu_sum(activations, &weights)
}

/// Elementwise gradient-activation product summed over channels, then ReLU.
pub fn hirescam_from_parts(activations: &Tensor, grad: &Tensor) -> Tensor {
    let (k, u, v) = stack_dims(activations);
    let mut out = vec![0.0; u * v];
    for ch in 0..k {
        let plane_a = &activations.data()[ch * u * v..(ch + 1) * u * v];
        let plane_g = &grad.data()[ch * u * v..(ch + 1) * u * v];
        for i in 0..u * v {
            out[i] += plane_a[i] * plane_g[i];
        }
    }
    for o in &mut out {
        *o = o.max(0.0);
    }
    Tensor::new(vec![u, v], out).unwrap()
}

/// Channel weights are activation-weighted gradients normalized by the
/// channel's activation mass.
pub fn xgradcam_from_parts(activations: &Tensor, grad: &Tensor) -> Tensor {
    let (k, u, v) = stack_dims(activations);
    let mut weights = vec![0.0; k];
    for ch in 0..k {
        let plane_a = &activations.data()[ch * u * v..(ch + 1) * u * v];
        let plane_g = &grad.data()[ch * u * v..(ch + 1) * u * v];
        let sum_a: f64 = plane_a.iter().sum();
        let num: f64 = plane_a.iter().zip(plane_g).map(|(&a, &g)| a * g).sum();
        weights[ch] = num / (sum_a + XGRAD_EPS);
    }
    weighted_relu_sum(activations, &weights)
}

fn method_for(target: &TargetSpec, plus_plus: bool) -> CamMethod {
    match (target, plus_plus) {
        (TargetSpec::SingleLogit(_), false) => CamMethod::GradCam,
        (TargetSpec::SingleLogit(_), true) => CamMethod::GradCamPp,
        (TargetSpec::Contrastive(_, agg), false) => CamMethod::DiffGradCam(*agg),
        (TargetSpec::Contrastive(_, agg), true) => CamMethod::DiffGradCamPp(*agg),
    }
}

pub fn gradcam(model: &Model, image: &Tensor, target: &TargetSpec) -> Result<SaliencyMap> {
    let (activations, grad) = grad_at_activations(model, image, target)?;
    let raw = gradcam_from_parts(&activations, &grad);
    Ok(SaliencyMap::new(raw, method_for(target, false), Some(*target)))
}

pub fn gradcam_pp(model: &Model, image: &Tensor, target: &TargetSpec) -> Result<SaliencyMap> {
    let (activations, grad) = grad_at_activations(model, image, target)?;
    let raw = gradcam_pp_from_parts(&activations, &grad);
    Ok(SaliencyMap::new(raw, method_for(target, true), Some(*target)))
}

pub fn hirescam(model: &Model, image: &Tensor, target: &TargetSpec) -> Result<SaliencyMap> {
    let (activations, grad) = grad_at_activations(model, image, target)?;
    let raw = hirescam_from_parts(&activations, &grad);
    Ok(SaliencyMap::new(raw, CamMethod::HiResCam, Some(*target)))
}

pub fn xgradcam(model: &Model, image: &Tensor, target: &TargetSpec) -> Result<SaliencyMap> {
    let (activations, grad) = grad_at_activations(model, image, target)?;
    let raw = xgradcam_from_parts(&activations, &grad);
    Ok(SaliencyMap::new(raw, CamMethod::XGradCam, Some(*target)))
}

/// First principal component of the `K x (u*v)` activation matrix via
/// power iteration on its Gram matrix, sign-fixed to a non-negative mean.
pub fn eigencam_from_parts(activations: &Tensor) -> Tensor {
    let (k, u, v) = stack_dims(activations);
    let n = u * v;
    let a = activations.data();

    // gram[i][j] = sum_ch A[ch,i] * A[ch,j]
    let mut gram = vec![0.0; n * n];
    for ch in 0..k {
        let plane = &a[ch * n..(ch + 1) * n];
        for i in 0..n {
            let pi = plane[i];
            if pi == 0.0 {
                continue;
            }
            for j in 0..n {
                gram[i * n + j] += pi * plane[j];
            }
        }
    }

    let mut vec_cur = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda_prev = 0.0;
    for _ in 0..1000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            let row = &gram[i * n..(i + 1) * n];
            next[i] = row.iter().zip(&vec_cur).map(|(&g, &x)| g * x).sum();
        }
        let norm = next.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return Tensor::zeros(&[u, v]);
        }
        for x in &mut next {
            *x /= norm;
        }
        vec_cur = next;
        if (norm - lambda_prev).abs() <= 1e-13 * norm.max(1.0) {
            break;
        }
        lambda_prev = norm;
    }
    let mean: f64 = vec_cur.iter().sum::<f64>() / n as f64;
    if mean < 0.0 {
        for x in &mut vec_cur {
            *x = -*x;
        }
    }
    Tensor::new(vec![u, v], vec_cur).unwrap()
}

/// Class-agnostic map from the activation stack alone.
pub fn eigencam(model: &Model, image: &Tensor) -> Result<SaliencyMap> {
    let fwd = model.forward_with_activations(image)?;
    let raw = eigencam_from_parts(fwd.activations());
    Ok(SaliencyMap::new(raw, CamMethod::EigenCam, None))
}

/// Gradient-free map: each channel is weighted by the target score of the
/// image masked by that channel's normalized, upsampled activation, with a
/// softmax over the scores. Runs K extra forward passes sequentially.
pub fn scorecam(model: &Model, image: &Tensor, target: &TargetSpec) -> Result<SaliencyMap> {
    let fwd = model.forward_with_activations(image)?;
    target.validate(fwd.logits().numel())?;
    let activations = fwd.activations().clone();
    let (k, u, v) = stack_dims(&activations);
    let (ch_in, h, w) = (
        image.shape()[0],
        image.shape()[1],
        image.shape()[2],
    );

    let mut scores = Vec::with_capacity(k);
    for chan in 0..k {
        let plane = Tensor::new(
            vec![u, v],
            activations.data()[chan * u * v..(chan + 1) * u * v].to_vec(),
        )?;
        let mask = upsample_bilinear(&normalize_minmax(&plane), h, w)?;
        let mut masked = image.clone();
        for c in 0..ch_in {
            let off = c * h * w;
            for i in 0..h * w {
                masked.data_mut()[off + i] *= mask.data()[i];
            }
        }
        let logits = model.logits(&masked)?;
        let score = match target {
            TargetSpec::SingleLogit(c) => logits.data()[*c],
            TargetSpec::Contrastive(c, agg) => {
                let comp: Vec<f64> = logits
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i != c)
                    .map(|(_, &v)| v)
                    .collect();
                logits.data()[*c] - beta_of_competitors(&comp, *agg)
            }
        };
        scores.push(score);
    }

    // Softmax over channel scores.
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.into_iter().map(|e| e / total).collect();

    let raw = weighted_relu_sum(&activations, &weights);
    Ok(SaliencyMap::new(raw, CamMethod::ScoreCam, Some(*target)))
}

/// Run any method against a chosen class (ignored by class-agnostic ones).
pub fn compute(model: &Model, image: &Tensor, method: CamMethod, class: usize) -> Result<SaliencyMap> {
    if class >= model.config.class_count {
        return Err(Error::InvalidConfig(format!(
            "class {} out of range for {} classes",
            class, model.config.class_count
        )));
    }
    match method {
        CamMethod::GradCam => gradcam(model, image, &TargetSpec::SingleLogit(class)),
        CamMethod::DiffGradCam(agg) => gradcam(model, image, &TargetSpec::Contrastive(class, agg)),
        CamMethod::GradCamPp => gradcam_pp(model, image, &TargetSpec::SingleLogit(class)),
        CamMethod::DiffGradCamPp(agg) => {
            gradcam_pp(model, image, &TargetSpec::Contrastive(class, agg))
        }
        CamMethod::HiResCam => hirescam(model, image, &TargetSpec::SingleLogit(class)),
        CamMethod::XGradCam => xgradcam(model, image, &TargetSpec::SingleLogit(class)),
        CamMethod::EigenCam => eigencam(model, image),
        CamMethod::ScoreCam => scorecam(model, image, &TargetSpec::SingleLogit(class)),
    }
}
