//! A small configurable CNN classifier: stacked 3x3 conv blocks with 2x2
//! max pooling between them, global average pooling, and a dense head.
//!
//! The final conv block's ReLU output is the feature-map stack the CAM
//! methods operate on; its spatial size is pinned by the config so the
//! saliency grid is known up front.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side length of the (square) input image.
    pub input_size: usize,
    pub input_channels: usize,
    /// Output channels of each conv block; the last entry is the CAM
    /// channel count K.
    pub conv_widths: Vec<usize>,
    /// Side length of the final-conv feature maps (the CAM grid).
    pub cam_size: usize,
    pub class_count: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default toy geometry: 28x28 grayscale in, three conv blocks, 7x7 CAM.
    pub fn new(class_count: usize, seed: u64) -> Self {
        ModelConfig {
            input_size: 28,
            input_channels: 1,
            conv_widths: vec![16, 32, 32],
            cam_size: 7,
            class_count,
            seed,
        }
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.conv_widths = widths;
        self
    }

    /// Channel count of the final conv block.
    pub fn cam_channels(&self) -> usize {
        *self.conv_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidConfig(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if self.conv_widths.is_empty() || self.conv_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig(format!(
                "conv_widths must be nonempty and positive, got {:?}",
                self.conv_widths
            )));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::InvalidConfig("empty input geometry".into()));
        }
        // One 2x2 pool between consecutive blocks.
        let pools = self.conv_widths.len() - 1;
        let divisor = 1usize << pools;
        if self.input_size % divisor != 0 || self.input_size / divisor != self.cam_size {
            return Err(Error::InvalidConfig(format!(
                "input {} with {} pools gives final conv size {}, config says {}",
                self.input_size,
                pools,
                self.input_size / divisor,
                self.cam_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub conv_weights: Vec<Tensor>,
    pub conv_biases: Vec<Tensor>,
    /// Dense head `[C, K]`.
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Node handles into the tape of one recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub input_id: NodeId,
    /// Final conv block output after ReLU, shape `[K,u,v]`.
    pub activations_id: NodeId,
    pub logits_id: NodeId,
    pub params: ParamNodes,
}

/// Tape leaves of every parameter, in checkpoint directory order.
pub struct ParamNodes {
    pub conv_weights: Vec<NodeId>,
    pub conv_biases: Vec<NodeId>,
    pub head_weight: NodeId,
    pub head_bias: NodeId,
}

impl ParamNodes {
    /// Flat view matching `Model::param_names` order.
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for i in 0..self.conv_weights.len() {
            ids.push(self.conv_weights[i]);
            ids.push(self.conv_biases[i]);
        }
        ids.push(self.head_weight);
        ids.push(self.head_bias);
        ids
    }
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits_id)
    }

    pub fn activations(&self) -> &Tensor {
        self.tape.value(self.activations_id)
    }
}

impl Model {
    /// Deterministically initialize a model from its config seed
    /// (He-style fan-in scaling, zero biases).
    pub fn build(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut conv_weights = Vec::new();
        let mut conv_biases = Vec::new();
        let mut cin = config.input_channels;
        for &cout in &config.conv_widths {
            let fan_in = (cin * 9) as f64;
            conv_weights.push(he_tensor(&mut rng, &[cout, cin, 3, 3], fan_in));
            conv_biases.push(Tensor::zeros(&[cout]));
            cin = cout;
        }
        let k = config.cam_channels();
        let head_weight = he_tensor(&mut rng, &[config.class_count, k], k as f64);
        let head_bias = Tensor::zeros(&[config.class_count]);
        Ok(Model {
            config,
            conv_weights,
            conv_biases,
            head_weight,
            head_bias,
        })
    }

    /// Names of every parameter tensor, in checkpoint directory order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.conv_weights.len() {
            names.push(format!("conv{}.weight", i + 1));
            names.push(format!("conv{}.bias", i + 1));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Parameter tensors in the same order as `param_names`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for i in 0..self.conv_weights.len() {
            out.push(&self.conv_weights[i]);
            out.push(&self.conv_biases[i]);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (w, b) in self.conv_weights.iter_mut().zip(self.conv_biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Record a full forward pass on a fresh tape and keep the handles
    /// needed for CAM extraction and training.
    pub fn forward_with_activations(&self, image: &Tensor) -> Result<ForwardPass> {
        let want = [
            self.config.input_channels,
            self.config.input_size,
            self.config.input_size,
        ];
        if image.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: image.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let mut tape = Tape::new();
        let input_id = tape.leaf(image.clone());
        let mut conv_w_ids = Vec::new();
        let mut conv_b_ids = Vec::new();
        let mut x = input_id;
        let blocks = self.conv_weights.len();
        let mut activations_id = input_id;
        for i in 0..blocks {
            let w = tape.leaf(self.conv_weights[i].clone());
            let b = tape.leaf(self.conv_biases[i].clone());
            conv_w_ids.push(w);
            conv_b_ids.push(b);
            let c = tape.conv2d(x, w, b, 1, 1)?;
            let r = tape.relu(c);
            activations_id = r;
            x = if i + 1 < blocks { tape.max_pool2d(r, 2)? } else { r };
        }
        let hw = tape.leaf(self.head_weight.clone());
        let hb = tape.leaf(self.head_bias.clone());
        let pooled = tape.global_avg_pool(x)?;
        let logits_id = tape.dense(pooled, hw, hb)?;
        Ok(ForwardPass {
            tape,
            input_id,
            activations_id,
            logits_id,
            params: ParamNodes {
                conv_weights: conv_w_ids,
                conv_biases: conv_b_ids,
                head_weight: hw,
                head_bias: hb,
            },
        })
    }

    /// Logits only.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_activations(image)?.logits().clone())
    }

    /// Argmax class of the logits.
    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let logits = self.logits(image)?;
        Ok(argmax(logits.data()))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let _ = values[best];
    best
}

fn he_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: f64) -> Tensor {
    let std = (2.0 / fan_in).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(config: &ModelConfig, fill: f64) -> Tensor {
        Tensor::filled(
            &[config.input_channels, config.input_size, config.input_size],
            fill,
        )
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::build(ModelConfig::new(5, 11)).unwrap();
        let b = Model::build(ModelConfig::new(5, 11)).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        let c = Model::build(ModelConfig::new(5, 12)).unwrap();
        assert_ne!(a.head_weight.data(), c.head_weight.data());
    }

    #[test]
    fn logits_and_activation_shapes() {
        let config = ModelConfig::new(7, 3);
        let model = Model::build(config.clone()).unwrap();
        let fwd = model
            .forward_with_activations(&img(&config, 0.5))
            .unwrap();
        assert_eq!(fwd.logits().shape(), &[7]);
        assert_eq!(fwd.activations().shape(), &[32, 7, 7]);
    }

    #[test]
    fn zero_image_hits_bias_path() {
        // With zero biases everywhere, the all-zero image produces zero logits.
        let config = ModelConfig::new(4, 9);
        let model = Model::build(config.clone()).unwrap();
        let logits = model.logits(&img(&config, 0.0)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_images_identical_logits() {
        let config = ModelConfig::new(3, 21);
        let model = Model::build(config.clone()).unwrap();
        let a = model.logits(&img(&config, 0.37)).unwrap();
        let b = model.logits(&img(&config, 0.37)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn softmax_of_logits_normalizes() {
        let config = ModelConfig::new(6, 2);
        let model = Model::build(config.clone()).unwrap();
        let mut image = img(&config, 0.0);
        for (i, v) in image.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f64) / 101.0;
        }
        let fwd = model.forward_with_activations(&image).unwrap();
        let mut tape = fwd.tape;
        let sm = tape.softmax(fwd.logits_id).unwrap();
        let sum: f64 = tape.value(sm).data().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rejects_bad_spatial_arithmetic() {
        let mut config = ModelConfig::new(3, 1);
        config.input_size = 30; // 30/4 is not the 7x7 grid the config claims
        assert!(Model::build(config).is_err());
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let config = ModelConfig::new(3, 1);
        let model = Model::build(config).unwrap();
        let bad = Tensor::zeros(&[1, 27, 28]);
        assert!(model.forward_with_activations(&bad).is_err());
    }
}
