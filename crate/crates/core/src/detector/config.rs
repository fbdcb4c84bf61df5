use crate::error::{Error, Result};
use crate::geometry::AnchorConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
}

impl LayerSpec {
    pub fn stride(&self) -> usize {
        match *self {
            LayerSpec::Conv { stride, .. } | LayerSpec::MaxPool { stride, .. } => stride,
            LayerSpec::Relu => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub layers: Vec<LayerSpec>,
    /// Declared total downsampling; must equal the product of layer strides.
    pub downsample: usize,
}

impl Default for BackboneConfig {
    /// Four `conv3x3 → relu → maxpool2` blocks ending at stride 16 with 64
    /// channels.
    fn default() -> Self {
        Self::blocks(&[8, 16, 32, 64])
    }
}

impl BackboneConfig {
    /// One `conv3x3 → relu → maxpool2` block per entry of `channels`.
    pub fn blocks(channels: &[usize]) -> Self {
        let layers = channels
            .iter()
            .flat_map(|&c| {
                [
                    LayerSpec::Conv {
                        out_channels: c,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool {
                        window: 2,
                        stride: 2,
                    },
                ]
            })
            .collect();
        BackboneConfig {
            layers,
            downsample: 1 << channels.len(),
        }
    }

    pub fn stride_product(&self) -> usize {
        self.layers.iter().map(LayerSpec::stride).product()
    }

    pub fn out_channels(&self, in_channels: usize) -> usize {
        self.layers.iter().fold(in_channels, |c, l| match l {
            LayerSpec::Conv { out_channels, .. } => *out_channels,
            _ => c,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            let ok = match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => out_channels > 0 && kernel > 0 && stride > 0,
                LayerSpec::MaxPool { window, stride } => window > 0 && stride > 0,
                LayerSpec::Relu => true,
            };
            if !ok {
                return Err(Error::Config(format!("invalid backbone layer {l:?}")));
            }
        }
        if self.stride_product() != self.downsample {
            return Err(Error::Config(format!(
                "backbone strides multiply to {} but {} was declared",
                self.stride_product(),
                self.downsample
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms_n: usize,
    pub post_nms_n: usize,
    pub nms_threshold: f64,
    /// Minimum proposal side in input pixels.
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms_n: 600,
            post_nms_n: 64,
            nms_threshold: 0.7,
            min_size: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub input_w: usize,
    pub input_h: usize,
    pub anchors: AnchorConfig,
    pub backbone: BackboneConfig,
    pub rpn_channels: usize,
    pub pool_h: usize,
    pub pool_w: usize,
    pub hidden: usize,
    pub proposals: ProposalConfig,
    pub confidence_threshold: f64,
    pub class_nms_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_w: 128,
            input_h: 128,
            anchors: AnchorConfig::default(),
            backbone: BackboneConfig::default(),
            rpn_channels: 64,
            pool_h: 4,
            pool_w: 4,
            hidden: 128,
            proposals: ProposalConfig::default(),
            confidence_threshold: 0.5,
            class_nms_threshold: 0.3,
        }
    }
}

impl DetectorConfig {
    pub fn stride(&self) -> usize {
        self.anchors.stride
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.out_channels(3)
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.input_w / self.stride(), self.input_h / self.stride())
    }

    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        self.backbone.validate()?;
        if self.backbone.downsample != self.anchors.stride {
            return Err(Error::Config(format!(
                "backbone downsampling {} differs from anchor stride {}",
                self.backbone.downsample, self.anchors.stride
            )));
        }
        let s = self.stride();
        if self.input_w == 0
            || self.input_h == 0
            || !self.input_w.is_multiple_of(s)
            || !self.input_h.is_multiple_of(s)
        {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by stride {s}",
                self.input_w, self.input_h
            )));
        }
        if [self.rpn_channels, self.pool_h, self.pool_w, self.hidden].contains(&0) {
            return Err(Error::Config("head sizes must be positive".into()));
        }
        let p = &self.proposals;
        if p.pre_nms_n == 0 || p.post_nms_n == 0 || !(0.0..=1.0).contains(&p.nms_threshold) {
            return Err(Error::Config(format!("invalid proposal settings {p:?}")));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold)
            || !(0.0..=1.0).contains(&self.class_nms_threshold)
        {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
