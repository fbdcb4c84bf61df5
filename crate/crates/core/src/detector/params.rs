use super::config::{DetectorConfig, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, Tensor};

/// Every trainable tensor of the detector, in a fixed order: backbone convs,
/// then the RPN trunk and its two siblings, then the fully connected head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

/// Parameter shapes implied by a configuration and class count.
pub fn parameter_shapes(cfg: &DetectorConfig, n_classes: usize) -> Vec<(String, Vec<usize>)> {
    let mut shapes = Vec::new();
    let mut channels = 3;
    for (i, layer) in cfg.backbone.layers.iter().enumerate() {
        if let LayerSpec::Conv {
            out_channels,
            kernel,
            ..
        } = *layer
        {
            shapes.push((
                format!("backbone.{i}.weight"),
                vec![out_channels, channels, kernel, kernel],
            ));
            shapes.push((format!("backbone.{i}.bias"), vec![out_channels]));
            channels = out_channels;
        }
    }
    let a = cfg.anchors.per_position();
    let r = cfg.rpn_channels;
    let flat = channels * cfg.pool_h * cfg.pool_w;
    let h = cfg.hidden;
    let k = n_classes;
    shapes.extend([
        ("rpn.conv.weight".to_string(), vec![r, channels, 3, 3]),
        ("rpn.conv.bias".to_string(), vec![r]),
        ("rpn.cls.weight".to_string(), vec![2 * a, r, 1, 1]),
        ("rpn.cls.bias".to_string(), vec![2 * a]),
        ("rpn.reg.weight".to_string(), vec![4 * a, r, 1, 1]),
        ("rpn.reg.bias".to_string(), vec![4 * a]),
        ("head.fc.weight".to_string(), vec![flat, h]),
        ("head.fc.bias".to_string(), vec![h]),
        ("head.cls.weight".to_string(), vec![h, k + 1]),
        ("head.cls.bias".to_string(), vec![k + 1]),
        ("head.reg.weight".to_string(), vec![h, 4 * k]),
        ("head.reg.bias".to_string(), vec![4 * k]),
    ]);
    shapes
}

fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[1] * shape[2] * shape[3],
        2 => shape[0],
        _ => 1,
    }
}

impl ModelParameters {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
    pub fn init(cfg: &DetectorConfig, n_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in parameter_shapes(cfg, n_classes) {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)?
            } else {
                Tensor::he_uniform(&shape, fan_in(&shape), &mut rng)?
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParameters { names, tensors })
    }

    pub fn zeros(cfg: &DetectorConfig, n_classes: usize) -> Result<Self> {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in parameter_shapes(cfg, n_classes) {
            tensors.push(Tensor::zeros(&shape)?);
            names.push(name);
        }
        Ok(ModelParameters { names, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn check_against(&self, cfg: &DetectorConfig, n_classes: usize) -> Result<()> {
        let expected = parameter_shapes(cfg, n_classes);
        if expected.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (n, t)) in expected.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::shape(format!(
                    "parameter {n} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}
