//! Declarative layer stacks and their shape/parameter bookkeeping.

use crate::tensor::{ConvGeometry, Padding};
use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: Padding,
    },
    Relu,
    MaxPool2,
    Flatten,
    Dropout {
        rate: f64,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    /// Terminal marker: the preceding Dense layer emits `classes` logits.
    Output {
        classes: usize,
    },
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Self::Dense { inputs, outputs }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        Self::Conv2d {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    /// Batch normalization with momentum 0.9 and ε = 1e-5.
    pub fn batch_norm(channels: usize) -> Self {
        Self::BatchNorm {
            channels,
            eps: 1e-5,
            momentum: 0.9,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Dense { .. } => "dense",
            Self::Conv2d { .. } => "conv2d",
            Self::Relu => "relu",
            Self::MaxPool2 => "max_pool2",
            Self::Flatten => "flatten",
            Self::Dropout { .. } => "dropout",
            Self::BatchNorm { .. } => "batch_norm",
            Self::Output { .. } => "output",
        }
    }

    /// Shapes of the trainable tensors this layer owns.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Self::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            Self::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => vec![vec![out_channels, in_channels, kernel_h, kernel_w], vec![out_channels]],
            Self::BatchNorm { channels, .. } => vec![vec![channels], vec![channels]],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    fn check_fields(&self, index: usize) -> Result<(), NnError> {
        let bad = |reason: &str| NnError::InvalidLayer {
            index,
            layer: self.name(),
            reason: reason.to_string(),
        };
        match *self {
            Self::Dense { inputs, outputs } if inputs == 0 || outputs == 0 => Err(bad("extents must be positive")),
            Self::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                ..
            } if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 => {
                Err(bad("extents and stride must be positive"))
            }
            Self::Dropout { rate } if !(0.0..1.0).contains(&rate) => Err(bad("dropout rate must lie in [0, 1)")),
            Self::BatchNorm { channels, eps, momentum }
                if channels == 0 || eps <= 0.0 || !eps.is_finite() || !(0.0..=1.0).contains(&momentum) =>
            {
                Err(bad("batch norm needs channels > 0, eps > 0 and momentum in [0, 1]"))
            }
            Self::Output { classes } if classes == 0 => Err(bad("classes must be positive")),
            _ => Ok(()),
        }
    }

    /// Output shape for one example of shape `input`.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>, NnError> {
        self.check_fields(index)?;
        let mismatch = |expected: String| NnError::Composition {
            index,
            layer: self.name(),
            expected,
            found: input.to_vec(),
        };
        match *self {
            Self::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(mismatch(format!("[{inputs}]")));
                }
                Ok(vec![outputs])
            }
            Self::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(mismatch(format!("[{in_channels}, h, w]")));
                }
                let g = ConvGeometry::new(in_channels, input[1], input[2], kernel_h, kernel_w, stride, padding)
                    .map_err(|e| mismatch(e.to_string()))?;
                Ok(vec![out_channels, g.out_h, g.out_w])
            }
            Self::Relu | Self::Dropout { .. } => Ok(input.to_vec()),
            Self::MaxPool2 => {
                if input.len() != 3 || input[1] % 2 != 0 || input[2] % 2 != 0 {
                    return Err(mismatch("[c, even h, even w]".into()));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            Self::Flatten => Ok(vec![input.iter().product()]),
            Self::BatchNorm { channels, .. } => {
                if (input.len() != 1 && input.len() != 3) || input[0] != channels {
                    return Err(mismatch(format!("[{channels}] or [{channels}, h, w]")));
                }
                Ok(input.to_vec())
            }
            Self::Output { classes } => {
                if input != [classes] {
                    return Err(mismatch(format!("[{classes}]")));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// An ordered layer stack over a fixed per-example input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self { input_shape, layers }
    }

    /// Checks that consecutive layers compose and the stack ends in
    /// `Dense → Output`. Returns the per-example shape entering each layer,
    /// followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(NnError::InvalidSpec(format!(
                "input shape {:?} must have positive extents",
                self.input_shape
            )));
        }
        let n = self.layers.len();
        match self.layers.last() {
            Some(LayerSpec::Output { .. }) => {}
            _ => return Err(NnError::InvalidSpec("final layer must be output".into())),
        }
        if n < 2 || !matches!(self.layers[n - 2], LayerSpec::Dense { .. }) {
            return Err(NnError::InvalidSpec("output must directly follow a dense layer".into()));
        }
        if let Some(i) = self.layers[..n - 1].iter().position(|l| matches!(l, LayerSpec::Output { .. })) {
            return Err(NnError::InvalidSpec(format!("output marker at layer {i} is not last")));
        }
        let mut shapes = Vec::with_capacity(n + 1);
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(i, &cur)?;
            shapes.push(cur);
            cur = next;
        }
        shapes.push(cur);
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        self.shapes().map(|_| ())
    }

    /// Sum of weights, biases and batch-norm scale/shift over all layers.
    pub fn param_count(&self) -> Result<usize, NnError> {
        self.validate()?;
        Ok(self.layers.iter().map(LayerSpec::param_count).sum())
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Output { classes }) => *classes,
            _ => 0,
        }
    }

    /// Index of the classifier layer (the Dense right before Output).
    pub fn classifier_index(&self) -> usize {
        self.layers.len().saturating_sub(2)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Width of the activations entering the classifier.
    pub fn penultimate_width(&self) -> usize {
        match self.layers.get(self.classifier_index()) {
            Some(LayerSpec::Dense { inputs, .. }) => *inputs,
            _ => 0,
        }
    }

    /// Layer-type counts `(conv, dense, dropout, batch_norm)`.
    pub fn layer_counts(&self) -> (usize, usize, usize, usize) {
        let count = |f: fn(&LayerSpec) -> bool| self.layers.iter().filter(|l| f(l)).count();
        (
            count(|l| matches!(l, LayerSpec::Conv2d { .. })),
            count(|l| matches!(l, LayerSpec::Dense { .. })),
            count(|l| matches!(l, LayerSpec::Dropout { .. })),
            count(|l| matches!(l, LayerSpec::BatchNorm { .. })),
        )
    }
}
