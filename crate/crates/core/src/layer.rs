use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where interval checking applies inside an EDAC layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalScope {
    /// Every output channel is range-checked; out-of-interval values of
    /// non-replicated channels are zeroed.
    AllChannels,
    /// Only replicated channels are checked; non-replicated channels pass
    /// through (after NaN scrubbing).
    DuplicatedOnly,
}

impl IntervalScope {
    pub fn name(self) -> &'static str {
        match self {
            IntervalScope::AllChannels => "all-channels",
            IntervalScope::DuplicatedOnly => "duplicated-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all-channels" => Ok(IntervalScope::AllChannels),
            "duplicated-only" => Ok(IntervalScope::DuplicatedOnly),
            other => Err(Error::InvalidArgument(format!(
                "unknown interval scope `{other}` (expected `all-channels` or `duplicated-only`)"
            ))),
        }
    }
}

/// Error-detection-and-correction stage inserted after a replicated
/// convolution or fully connected layer.
///
/// `replicas[k]` lists the physical channels of the preceding layer that all
/// carry logical channel `k`: one entry for an unreplicated channel, two for
/// a duplicated one, three for a triplicated one. The groups partition the
/// physical channel range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdacSpec {
    pub replicas: Vec<Vec<usize>>,
    pub scope: IntervalScope,
}

impl EdacSpec {
    pub fn logical_channels(&self) -> usize {
        self.replicas.len()
    }

    pub fn physical_channels(&self) -> usize {
        self.replicas.iter().map(Vec::len).sum()
    }

    /// Checks group sizes and that the groups partition `0..physical`.
    pub fn validate(&self) -> Result<()> {
        let phys = self.physical_channels();
        let mut seen = vec![false; phys];
        for (k, group) in self.replicas.iter().enumerate() {
            if group.is_empty() || group.len() > 3 {
                return Err(Error::InvalidModel(format!(
                    "EDAC logical channel {k} has {} replicas (expected 1..=3)",
                    group.len()
                )));
            }
            for &p in group {
                if p >= phys {
                    return Err(Error::InvalidModel(format!(
                        "EDAC logical channel {k} references physical channel {p}, \
                         but only {phys} exist"
                    )));
                }
                if seen[p] {
                    return Err(Error::InvalidModel(format!(
                        "EDAC physical channel {p} appears in more than one replica group"
                    )));
                }
                seen[p] = true;
            }
        }
        Ok(())
    }
}

/// Architecture of a single layer. Parameter values live in [`LayerParams`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2D {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
        has_bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    ReLU,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Edac(EdacSpec),
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2D { .. } => "Conv2D",
            LayerSpec::FullyConnected { .. } => "FullyConnected",
            LayerSpec::BatchNorm { .. } => "BatchNorm",
            LayerSpec::ReLU => "ReLU",
            LayerSpec::MaxPool { .. } => "MaxPool",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Edac(_) => "EDAC",
        }
    }

    /// True for the layer kinds that own weight channels (the targets of
    /// profiling, vulnerability scoring, replication, and pruning).
    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2D { .. } | LayerSpec::FullyConnected { .. }
        )
    }

    /// Output channel count for parametric layers.
    pub fn out_channels(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv2D { out_channels, .. } => Some(*out_channels),
            LayerSpec::FullyConnected { out_features, .. } => Some(*out_features),
            _ => None,
        }
    }

    /// Shape of one output sample given one input sample (no batch axis).
    /// The error string is wrapped with layer context by the caller.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            LayerSpec::Conv2D {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                ..
            } => {
                let [c, h, w] = *expect_dims::<3>(input)?;
                if c != *in_channels {
                    return Err(format!("expected {in_channels} input channels, got {c}"));
                }
                let h_eff = h + 2 * padding;
                let w_eff = w + 2 * padding;
                if h_eff < *kernel_h || w_eff < *kernel_w {
                    return Err(format!(
                        "kernel {kernel_h}x{kernel_w} does not fit padded input {h_eff}x{w_eff}"
                    ));
                }
                let oh = (h_eff - kernel_h) / stride + 1;
                let ow = (w_eff - kernel_w) / stride + 1;
                Ok(vec![*out_channels, oh, ow])
            }
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                ..
            } => {
                let [f] = *expect_dims::<1>(input)?;
                if f != *in_features {
                    return Err(format!("expected {in_features} input features, got {f}"));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::BatchNorm { channels } => {
                let c = *input
                    .first()
                    .ok_or_else(|| "scalar input".to_string())?;
                if c != *channels {
                    return Err(format!("expected {channels} channels, got {c}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::ReLU => Ok(input.to_vec()),
            LayerSpec::MaxPool { window, stride } => {
                let [c, h, w] = *expect_dims::<3>(input)?;
                if h < *window || w < *window {
                    return Err(format!("window {window} does not fit input {h}x{w}"));
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Edac(spec) => {
                let c = *input
                    .first()
                    .ok_or_else(|| "scalar input".to_string())?;
                if c != spec.physical_channels() {
                    return Err(format!(
                        "expected {} physical channels, got {c}",
                        spec.physical_channels()
                    ));
                }
                let mut out = input.to_vec();
                out[0] = spec.logical_channels();
                Ok(out)
            }
        }
    }
}

fn expect_dims<const N: usize>(input: &[usize]) -> std::result::Result<&[usize; N], String> {
    input
        .try_into()
        .map_err(|_| format!("expected {N}-d sample, got shape {input:?}"))
}

/// Parameter values for a layer, in the layout the engine consumes.
///
/// Conv2D weight is `[out, in, kh, kw]`; FullyConnected weight is
/// `[out, in]`. BatchNorm running statistics are buffers: persisted with the
/// model but not trainable and not fault-injectable.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv2D {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    FullyConnected {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    BatchNorm {
        scale: Tensor,
        shift: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    Edac {
        lower: Tensor,
        upper: Tensor,
    },
    None,
}

/// One layer: architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

impl Layer {
    pub fn new(spec: LayerSpec, params: LayerParams) -> Self {
        Layer { spec, params }
    }

    /// Parameter tensors in canonical order, fault-injectable and counted
    /// towards the model's parameter total. BatchNorm running statistics are
    /// excluded; EDAC interval bounds are included.
    pub fn injectable_tensors(&self) -> Vec<&Tensor> {
        match &self.params {
            LayerParams::Conv2D { weight, bias }
            | LayerParams::FullyConnected { weight, bias } => {
                let mut v = vec![weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            LayerParams::BatchNorm { scale, shift, .. } => vec![scale, shift],
            LayerParams::Edac { lower, upper } => vec![lower, upper],
            LayerParams::None => vec![],
        }
    }

    pub fn injectable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.params {
            LayerParams::Conv2D { weight, bias }
            | LayerParams::FullyConnected { weight, bias } => {
                let mut v = vec![weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            LayerParams::BatchNorm { scale, shift, .. } => vec![scale, shift],
            LayerParams::Edac { lower, upper } => vec![lower, upper],
            LayerParams::None => vec![],
        }
    }

    /// Number of injectable parameters in this layer.
    pub fn param_count(&self) -> usize {
        self.injectable_tensors().iter().map(|t| t.len()).sum()
    }

    /// Reads the injectable parameter at a flat index spanning the canonical
    /// tensor order.
    pub fn param_at(&self, flat: usize) -> Option<f32> {
        let mut idx = flat;
        for t in self.injectable_tensors() {
            if idx < t.len() {
                return Some(t.data()[idx]);
            }
            idx -= t.len();
        }
        None
    }

    /// XORs one bit of the injectable parameter at a flat index.
    pub fn xor_param_bit(&mut self, flat: usize, bit: u32) -> Result<()> {
        if bit > 31 {
            return Err(Error::InvalidArgument(format!(
                "bit index {bit} out of range for f32 (0..=31)"
            )));
        }
        let total = self.param_count();
        let mut idx = flat;
        for t in self.injectable_tensors_mut() {
            if idx < t.len() {
                let v = &mut t.data_mut()[idx];
                *v = f32::from_bits(v.to_bits() ^ (1u32 << bit));
                return Ok(());
            }
            idx -= t.len();
        }
        Err(Error::InvalidArgument(format!(
            "parameter index {flat} out of range for layer with {total} parameters"
        )))
    }
}
