use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_output_dim, Padding};

fn one() -> usize {
    1
}

fn same() -> Padding {
    Padding::Same
}

/// One entry of a sequential layer stack.
///
/// Convolutions and hidden fully connected layers are followed by a ReLU;
/// the last `Fc` before the loss is the classifier and has no activation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "same")]
        padding: Padding,
        #[serde(default)]
        batch_norm: bool,
    },
    MaxPool,
    Flatten,
    Fc {
        out: usize,
    },
    SoftmaxXent,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, k: usize, batch_norm: bool) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            padding: Padding::Same,
            batch_norm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Activation shape after a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { c, h, w } => c * h * w,
            Shape::Flat(d) => d,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Declarative sequential network description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: InputDims,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Channel interface of one convolution: `n_in` feeding `n_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvInterface {
    pub layer: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub kernel_len: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ArchSpec {
    /// The desk-scale MNIST network: three 3×3 convolutions (32, 64, 128
    /// channels) with batch norm, 2×2 pooling after the first two, and a
    /// linear classifier.
    pub fn mnist() -> Self {
        ArchSpec {
            input: InputDims {
                channels: 1,
                height: 28,
                width: 28,
            },
            classes: 10,
            layers: vec![
                LayerSpec::conv(32, 3, true),
                LayerSpec::MaxPool,
                LayerSpec::conv(64, 3, true),
                LayerSpec::MaxPool,
                LayerSpec::conv(128, 3, true),
                LayerSpec::Flatten,
                LayerSpec::Fc { out: 10 },
                LayerSpec::SoftmaxXent,
            ],
        }
    }

    /// Checks the stack end to end and returns the output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let InputDims {
            channels,
            height,
            width,
        } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Arch("input dims must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Arch(format!(
                "need >= 2 classes, got {}",
                self.classes
            )));
        }
        let loss_layers = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::SoftmaxXent))
            .count();
        if loss_layers != 1 || !matches!(self.layers.last(), Some(LayerSpec::SoftmaxXent)) {
            return Err(Error::Arch(
                "exactly one softmax_xent layer is required and it must be last".into(),
            ));
        }
        let mut shape = Shape::Spatial {
            c: channels,
            h: height,
            w: width,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (layer, shape) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel_h,
                        kernel_w,
                        stride,
                        padding,
                        ..
                    },
                    Shape::Spatial { h, w, .. },
                ) => {
                    if *out_channels == 0 {
                        return Err(Error::Arch(format!("layer {i}: conv with 0 channels")));
                    }
                    let (oh, _) = conv_output_dim("height", h, *kernel_h, *stride, *padding)
                        .map_err(|e| Error::Arch(format!("layer {i}: {e}")))?;
                    let (ow, _) = conv_output_dim("width", w, *kernel_w, *stride, *padding)
                        .map_err(|e| Error::Arch(format!("layer {i}: {e}")))?;
                    Shape::Spatial {
                        c: *out_channels,
                        h: oh,
                        w: ow,
                    }
                }
                (LayerSpec::MaxPool, Shape::Spatial { c, h, w }) => Shape::Spatial {
                    c,
                    h: h.div_ceil(2),
                    w: w.div_ceil(2),
                },
                (LayerSpec::Flatten, s @ Shape::Spatial { .. }) => Shape::Flat(s.len()),
                (LayerSpec::Fc { out }, Shape::Flat(_)) => {
                    if *out == 0 {
                        return Err(Error::Arch(format!("layer {i}: fc with 0 outputs")));
                    }
                    Shape::Flat(*out)
                }
                (LayerSpec::SoftmaxXent, Shape::Flat(d)) => {
                    if d != self.classes {
                        return Err(Error::Arch(format!(
                            "layer {i}: softmax over {d} logits but {} classes",
                            self.classes
                        )));
                    }
                    Shape::Flat(d)
                }
                (layer, shape) => {
                    return Err(Error::Arch(format!(
                        "layer {i}: {layer:?} cannot follow activation shape {shape:?}"
                    )))
                }
            };
            out.push(shape);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Channel interfaces of the convolutions, in order.
    pub fn conv_interfaces(&self) -> Result<Vec<ConvInterface>> {
        let shapes = self.shapes()?;
        let mut n_in = self.input.channels;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Conv {
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } = layer
            {
                let Shape::Spatial { h, w, .. } = shapes[i] else {
                    unreachable!("conv output is spatial")
                };
                out.push(ConvInterface {
                    layer: i,
                    n_in,
                    n_out: *out_channels,
                    kernel_len: kernel_h * kernel_w,
                    out_h: h,
                    out_w: w,
                });
                n_in = *out_channels;
            }
        }
        Ok(out)
    }

    /// Output depths of the convolutions, i.e. the hidden layer sizes that
    /// channel permutations act on.
    pub fn hidden_conv_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let arch: ArchSpec = serde_json::from_str(text)?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arch serializes")
    }
}
