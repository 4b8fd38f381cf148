use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_arg, Error, Result};

/// One layer of a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool2,
    AvgPool2,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Adds the output of layer `from` to the previous layer's output.
    AddSkip {
        from: usize,
    },
}

/// Architecture plus the four feature-tap layer indices, bottom to top.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub taps: [usize; 4],
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        input_shape: [usize; 3],
        num_classes: usize,
        layers: Vec<LayerSpec>,
        taps: [usize; 4],
    ) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            input_shape,
            num_classes,
            layers,
            taps,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Output shape of every layer; fails on the first incompatible layer.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        let mut current = self.input_shape.to_vec();
        ensure_arg!(current.iter().all(|&d| d > 0), "input shape {current:?} has a zero dimension");
        for (i, layer) in self.layers.iter().enumerate() {
            let next = match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    ensure_arg!(
                        current.len() == 3 && current[0] == in_channels,
                        "layer {i}: conv expects {in_channels} input channels, got shape {current:?}"
                    );
                    ensure_arg!(stride >= 1 && kernel >= 1 && out_channels >= 1, "layer {i}: bad conv hyperparameters");
                    let (h, w) = (current[1] + 2 * pad, current[2] + 2 * pad);
                    ensure_arg!(kernel <= h && kernel <= w, "layer {i}: kernel larger than padded input");
                    vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                LayerSpec::Relu => current.clone(),
                LayerSpec::MaxPool2 | LayerSpec::AvgPool2 => {
                    ensure_arg!(
                        current.len() == 3 && current[1] % 2 == 0 && current[2] % 2 == 0,
                        "layer {i}: 2×2 pooling needs even spatial dims, got {current:?}"
                    );
                    vec![current[0], current[1] / 2, current[2] / 2]
                }
                LayerSpec::Flatten => vec![current.iter().product()],
                LayerSpec::Dense { inputs, outputs } => {
                    ensure_arg!(
                        current.len() == 1 && current[0] == inputs,
                        "layer {i}: dense expects a flat input of {inputs}, got {current:?}"
                    );
                    ensure_arg!(outputs >= 1, "layer {i}: dense with zero outputs");
                    vec![outputs]
                }
                LayerSpec::AddSkip { from } => {
                    ensure_arg!(
                        i >= 1 && from < i - 1,
                        "layer {i}: skip source {from} must precede the previous layer"
                    );
                    ensure_arg!(
                        shapes[from] == current,
                        "layer {i}: skip source shape {:?} differs from {current:?}",
                        shapes[from]
                    );
                    current.clone()
                }
            };
            shapes.push(next.clone());
            current = next;
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(!self.layers.is_empty(), "model {} has no layers", self.name);
        ensure_arg!(self.num_classes >= 2, "model needs at least two classes");
        let shapes = self.output_shapes()?;
        ensure_arg!(
            shapes.last() == Some(&vec![self.num_classes]),
            "model {} ends in shape {:?}, expected [{}]",
            self.name,
            shapes.last(),
            self.num_classes
        );
        ensure_arg!(
            self.taps.windows(2).all(|w| w[0] < w[1]) && self.taps[3] < self.layers.len(),
            "taps {:?} must be strictly increasing layer indices below {}",
            self.taps,
            self.layers.len()
        );
        Ok(())
    }

    /// Layer index of tap `tap` (1-based, bottom to top).
    pub fn tap_layer(&self, tap: usize) -> Result<usize> {
        ensure_arg!((1..=4).contains(&tap), "tap {tap} outside 1..=4");
        Ok(self.taps[tap - 1])
    }

    /// First eight bytes of SHA-256 over the canonical JSON serialization.
    pub fn fingerprint(&self) -> [u8; 8] {
        let canonical = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&canonical);
        digest[..8].try_into().expect("digest has 32 bytes")
    }
}

/// The zoo's architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// Four wide conv-relu-maxpool stages.
    ConvNetA,
    /// Six thinner convolutions mixing 5×5 and 3×3 kernels, average pooling.
    ConvNetB,
    /// Stem plus four residual blocks with identity skips.
    MiniResNet,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::ConvNetA, Architecture::ConvNetB, Architecture::MiniResNet];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::ConvNetA => "ConvNetA",
            Architecture::ConvNetB => "ConvNetB",
            Architecture::MiniResNet => "MiniResNet",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown architecture {s:?} (expected ConvNetA, ConvNetB or MiniResNet)")))
    }
}

fn conv(in_channels: usize, out_channels: usize, kernel: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel,
        stride: 1,
        pad,
    }
}

/// Padding for the first 3×3 convolution so the stem output side is a
/// multiple of 16 (four 2×2 pools).
fn stem_pad(h: usize, w: usize) -> Result<usize> {
    let extra = |s: usize| (16 - s % 16) % 16;
    ensure_arg!(
        extra(h) == extra(w) && extra(h) % 2 == 0,
        "input {h}×{w} cannot be padded evenly to a multiple of 16"
    );
    Ok(1 + extra(h) / 2)
}

impl Architecture {
    pub fn spec(self, num_classes: usize, input_shape: [usize; 3]) -> Result<ModelSpec> {
        let [c, h, w] = input_shape;
        let pad0 = stem_pad(h, w)?;
        let side = (h + 2 * pad0 - 2) / 16;
        let (layers, taps) = match self {
            Architecture::ConvNetA => {
                let widths = [c, 32, 64, 128, 128];
                let mut layers = Vec::new();
                let mut taps = [0; 4];
                for s in 0..4 {
                    let pad = if s == 0 { pad0 } else { 1 };
                    layers.push(conv(widths[s], widths[s + 1], 3, pad));
                    layers.push(LayerSpec::Relu);
                    layers.push(LayerSpec::MaxPool2);
                    taps[s] = layers.len() - 1;
                }
                layers.push(LayerSpec::Flatten);
                layers.push(LayerSpec::Dense {
                    inputs: 128 * side * side,
                    outputs: num_classes,
                });
                (layers, taps)
            }
            Architecture::ConvNetB => {
                let layers = vec![
                    conv(c, 16, 5, pad0 + 1),
                    LayerSpec::Relu,
                    conv(16, 16, 3, 1),
                    LayerSpec::Relu,
                    LayerSpec::AvgPool2, // 4: tap 1
                    conv(16, 32, 5, 2),
                    LayerSpec::Relu,
                    conv(32, 32, 3, 1),
                    LayerSpec::Relu,
                    LayerSpec::AvgPool2, // 9: tap 2
                    conv(32, 48, 3, 1),
                    LayerSpec::Relu,
                    LayerSpec::AvgPool2, // 12: tap 3
                    conv(48, 64, 3, 1),
                    LayerSpec::Relu,
                    LayerSpec::AvgPool2, // 15: tap 4
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        inputs: 64 * side * side,
                        outputs: num_classes,
                    },
                ];
                (layers, [4, 9, 12, 15])
            }
            Architecture::MiniResNet => {
                let mut layers = vec![conv(c, 16, 3, pad0), LayerSpec::Relu, LayerSpec::MaxPool2];
                let mut taps = [0; 4];
                let widths = [16, 32, 64, 64];
                for (b, &width) in widths.iter().enumerate() {
                    if b > 0 {
                        let prev = widths[b - 1];
                        layers.push(conv(prev, width, 3, 1));
                        layers.push(LayerSpec::Relu);
                        if b < 3 {
                            layers.push(LayerSpec::MaxPool2);
                        }
                    }
                    let block_input = layers.len() - 1;
                    layers.push(conv(width, width, 3, 1));
                    layers.push(LayerSpec::Relu);
                    layers.push(conv(width, width, 3, 1));
                    // No activation after the sum: the identity path keeps
                    // gradient flowing even when the branch output is negative.
                    layers.push(LayerSpec::AddSkip { from: block_input });
                    taps[b] = layers.len() - 1;
                }
                layers.push(LayerSpec::AvgPool2);
                layers.push(LayerSpec::Flatten);
                layers.push(LayerSpec::Dense {
                    inputs: 64 * side * side,
                    outputs: num_classes,
                });
                (layers, taps)
            }
        };
        ModelSpec::new(self.name(), input_shape, num_classes, layers, taps)
    }
}
