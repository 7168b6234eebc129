//! Class activation mapping: saliency map types, min-max normalization,
//! bilinear upsampling, contrastive targets and the CAM methods themselves.

mod methods;
mod targets;

pub use methods::{
    compute, eigencam, gradcam, gradcam_pp, hirescam, scorecam, xgradcam,
};
pub use targets::{
    beta, beta_of_competitors, build_target, delta, delta_of, softmax_sigmoid_identity,
    LogitVector,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Aggregation function over the non-target logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aggregator {
    Mean,
    Max,
    Lse,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [Aggregator::Mean, Aggregator::Max, Aggregator::Lse];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Mean => "Mean",
            Aggregator::Max => "Max",
            Aggregator::Lse => "LSE",
        }
    }
}

/// What gets backpropagated: a raw logit or a contrastive logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetSpec {
    SingleLogit(usize),
    Contrastive(usize, Aggregator),
}

impl TargetSpec {
    pub fn class(&self) -> usize {
        match self {
            TargetSpec::SingleLogit(c) | TargetSpec::Contrastive(c, _) => *c,
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.class() >= class_count {
            return Err(Error::InvalidConfig(format!(
                "target class {} out of range for {} classes",
                self.class(),
                class_count
            )));
        }
        if matches!(self, TargetSpec::Contrastive(..)) && class_count < 2 {
            return Err(Error::InvalidConfig(
                "contrastive target needs at least 2 classes".into(),
            ));
        }
        Ok(())
    }
}

/// The twelve CAM variants of the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CamMethod {
    GradCam,
    EigenCam,
    HiResCam,
    XGradCam,
    ScoreCam,
    DiffGradCam(Aggregator),
    GradCamPp,
    DiffGradCamPp(Aggregator),
}

impl CamMethod {
    /// Every method, in report order.
    pub fn all() -> Vec<CamMethod> {
        let mut methods = vec![
            CamMethod::GradCam,
            CamMethod::EigenCam,
            CamMethod::HiResCam,
            CamMethod::XGradCam,
            CamMethod::ScoreCam,
        ];
        for agg in Aggregator::ALL {
            methods.push(CamMethod::DiffGradCam(agg));
        }
        methods.push(CamMethod::GradCamPp);
        for agg in Aggregator::ALL {
            methods.push(CamMethod::DiffGradCamPp(agg));
        }
        methods
    }

    pub fn name(self) -> String {
        match self {
            CamMethod::GradCam => "GradCAM".into(),
            CamMethod::EigenCam => "EigenCAM".into(),
            CamMethod::HiResCam => "HiResCAM".into(),
            CamMethod::XGradCam => "XGradCAM".into(),
            CamMethod::ScoreCam => "ScoreCAM".into(),
            CamMethod::DiffGradCam(a) => format!("{}DiffGradCAM", a.name()),
            CamMethod::GradCamPp => "GradCAM++".into(),
            CamMethod::DiffGradCamPp(a) => format!("{}DiffGradCAM++", a.name()),
        }
    }

    pub fn from_name(name: &str) -> Option<CamMethod> {
        CamMethod::all().into_iter().find(|m| m.name() == name)
    }

    /// True for methods whose map does not depend on the target class.
    pub fn class_agnostic(self) -> bool {
        matches!(self, CamMethod::EigenCam)
    }
}

/// A saliency grid over the final-conv spatial extent.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub raw: Tensor,
    /// Min-max normalized to [0,1]; all zeros when the raw map is constant.
    pub normalized: Tensor,
    pub method: CamMethod,
    pub target: Option<TargetSpec>,
}

impl SaliencyMap {
    pub fn new(raw: Tensor, method: CamMethod, target: Option<TargetSpec>) -> SaliencyMap {
        let normalized = normalize_minmax(&raw);
        SaliencyMap {
            raw,
            normalized,
            method,
            target,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.raw.shape()[0], self.raw.shape()[1])
    }
}

/// Min-max normalize to [0,1]; a constant map becomes all zeros so that
/// downstream MSEs stay well defined.
pub fn normalize_minmax(raw: &Tensor) -> Tensor {
    let min = raw.min();
    let max = raw.max();
    if max > min {
        let range = max - min;
        raw.map(|v| (v - min) / range)
    } else {
        Tensor::zeros(raw.shape())
    }
}

/// Corner-aligned bilinear upsampling of a 2-D map.
pub fn upsample_bilinear(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "upsample_bilinear",
            lhs: shape.to_vec(),
            rhs: vec![height, width],
        });
    }
    let (u, v) = (shape[0], shape[1]);
    if height < u || width < v || u == 0 || v == 0 {
        return Err(Error::ShapeMismatch {
            op: "upsample_bilinear",
            lhs: shape.to_vec(),
            rhs: vec![height, width],
        });
    }
    let scale_y = if height > 1 {
        (u - 1) as f64 / (height - 1) as f64
    } else {
        0.0
    };
    let scale_x = if width > 1 {
        (v - 1) as f64 / (width - 1) as f64
    } else {
        0.0
    };
    let mut out = Tensor::zeros(&[height, width]);
    for i in 0..height {
        let y = i as f64 * scale_y;
        let y0 = (y.floor() as usize).min(u - 1);
        let y1 = (y0 + 1).min(u - 1);
        let fy = y - y0 as f64;
        for j in 0..width {
            let x = j as f64 * scale_x;
            let x0 = (x.floor() as usize).min(v - 1);
            let x1 = (x0 + 1).min(v - 1);
            let fx = x - x0 as f64;
            let a = map.at(&[y0, x0]);
            let b = map.at(&[y0, x1]);
            let c = map.at(&[y1, x0]);
            let d = map.at(&[y1, x1]);
            out.data_mut()[i * width + j] = a * (1.0 - fy) * (1.0 - fx)
                + b * (1.0 - fy) * fx
                + c * fy * (1.0 - fx)
                + d * fy * fx;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_affine() {
        let raw = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let n = normalize_minmax(&raw);
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, e) in n.data().iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-15);
        }
    }

    #[test]
    fn normalize_constant_is_zero() {
        let raw = Tensor::filled(&[3, 3], 4.2);
        assert!(normalize_minmax(&raw).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_invariant_under_positive_rescale() {
        let raw = Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.9, 0.0, 2.4, -1.1]).unwrap();
        let a = normalize_minmax(&raw);
        let b = normalize_minmax(&raw.scale(7.25));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn upsample_identity_and_constant() {
        let map = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let same = upsample_bilinear(&map, 2, 2).unwrap();
        assert_eq!(same.data(), map.data());

        let constant = Tensor::filled(&[3, 3], 0.4);
        let up = upsample_bilinear(&constant, 9, 9).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.4).abs() <= 1e-15));
    }

    #[test]
    fn upsample_2x2_to_4x4_lattice() {
        // Corners 0,1,2,3 give the exact plane f(y,x) = x + 2y on [0,1]^2.
        let map = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = upsample_bilinear(&map, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = j as f64 / 3.0 + 2.0 * i as f64 / 3.0;
                assert!((up.at(&[i, j]) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn method_list_has_twelve_names() {
        let names: Vec<String> = CamMethod::all().iter().map(|m| m.name()).collect();
        assert_eq!(names.len(), 12);
        for want in [
            "GradCAM",
            "GradCAM++",
            "EigenCAM",
            "HiResCAM",
            "XGradCAM",
            "ScoreCAM",
            "MeanDiffGradCAM",
            "MaxDiffGradCAM",
            "LSEDiffGradCAM",
            "MeanDiffGradCAM++",
            "MaxDiffGradCAM++",
            "LSEDiffGradCAM++",
        ] {
            assert!(names.iter().any(|n| n == want), "missing {}", want);
        }
        assert_eq!(CamMethod::from_name("LSEDiffGradCAM++"), Some(CamMethod::DiffGradCamPp(Aggregator::Lse)));
    }
}
