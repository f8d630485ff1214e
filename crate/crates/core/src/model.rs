//! Small convolutional classifiers used as surrogate and target models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{argmax, Conv2d, Layer, Linear, Sequential};
use crate::tensor::Tensor;

/// Conv blocks (3x3 conv, ReLU, 2x2 max-pool) of the given widths, global
/// average pooling, a ReLU embedding layer and a linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl ConvNetConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            channels: vec![16, 32, 64],
            embed_dim: 128,
            num_classes,
        }
    }

    /// Compact textual form, e.g. `convnet:c=16-32-64;e=128;k=10`.
    pub fn arch_string(&self) -> String {
        let widths: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        format!("convnet:c={};e={};k={}", widths.join("-"), self.embed_dim, self.num_classes)
    }

    pub fn parse_arch(s: &str) -> Option<Self> {
        let rest = s.strip_prefix("convnet:")?;
        let mut channels = None;
        let mut embed_dim = None;
        let mut num_classes = None;
        for part in rest.split(';') {
            let (key, value) = part.split_once('=')?;
            match key {
                "c" => channels = Some(value.split('-').map(|v| v.parse().ok()).collect::<Option<Vec<usize>>>()?),
                "e" => embed_dim = value.parse().ok(),
                "k" => num_classes = value.parse().ok(),
                _ => return None,
            }
        }
        Some(Self {
            channels: channels?,
            embed_dim: embed_dim?,
            num_classes: num_classes?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.channels.is_empty(), Config, "at least one conv block is required");
        ensure!(self.channels.iter().all(|&c| c > 0), Config, "conv widths must be positive");
        ensure!(self.embed_dim >= 2, Config, "embed_dim must be at least 2");
        ensure!(self.num_classes >= 1, Config, "num_classes must be at least 1");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub config: ConvNetConfig,
    pub features: Sequential,
    pub head: Sequential,
}

impl ConvNet {
    pub fn new(config: ConvNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut in_c = 3;
        for &c in &config.channels {
            layers.push(Layer::Conv2d(Conv2d::new(in_c, c, 3, 1, 1, &mut rng)));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            in_c = c;
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Linear(Linear::new(in_c, config.embed_dim, &mut rng)));
        layers.push(Layer::Relu);
        let head = Sequential::new(vec![Layer::Linear(Linear::new(config.embed_dim, config.num_classes, &mut rng))]);
        Ok(Self {
            config,
            features: Sequential::new(layers),
            head,
        })
    }

    /// Penultimate-layer activations, `(n, embed_dim)`.
    pub fn embed(&self, x: &Tensor) -> Tensor {
        self.features.forward(x)
    }

    pub fn logits(&self, x: &Tensor) -> Tensor {
        self.head.forward(&self.features.forward(x))
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let logits = self.logits(x);
        (0..logits.batch()).map(|i| argmax(logits.item(i))).collect()
    }

    /// All parameters, features first.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut p = self.features.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn named_params(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<_> = self
            .features
            .named_params()
            .into_iter()
            .map(|(n, p)| (format!("features.{n}"), p))
            .collect();
        out.extend(self.head.named_params().into_iter().map(|(n, p)| (format!("head.{n}"), p)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_string_round_trips() {
        let cfg = ConvNetConfig {
            channels: vec![8, 16],
            embed_dim: 32,
            num_classes: 7,
        };
        assert_eq!(ConvNetConfig::parse_arch(&cfg.arch_string()), Some(cfg));
        assert_eq!(ConvNetConfig::parse_arch("resnet50"), None);
    }

    #[test]
    fn shapes() {
        let net = ConvNet::new(
            ConvNetConfig {
                channels: vec![4, 8],
                embed_dim: 6,
                num_classes: 3,
            },
            1,
        )
        .unwrap();
        let x = Tensor::zeros([5, 3, 16, 16]);
        assert_eq!(net.embed(&x).shape(), [5, 6, 1, 1]);
        assert_eq!(net.logits(&x).shape(), [5, 3, 1, 1]);
        assert!(net.predict(&x).iter().all(|&p| p < 3));
    }
}
