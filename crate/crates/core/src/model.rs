use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::{EdacSpec, Layer, LayerParams, LayerSpec};
use crate::tensor::Tensor;

/// A sequential network: layers applied in order to `[N, C, H, W]` batches.
///
/// `input_shape` is the per-sample `[C, H, W]` the model was built for; it
/// makes the model self-describing so MAC counting and validation need no
/// external context.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

/// Parameter and multiply-accumulate totals for one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub params: u64,
    /// MACs for one input sample: convolution and fully connected
    /// contributions only.
    pub macs: u64,
}

impl ModelGraph {
    pub fn new(layers: Vec<Layer>, input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let model = ModelGraph {
            layers,
            input_shape,
            num_classes,
        };
        model.validate()?;
        Ok(model)
    }

    /// Structural validation: per-layer spec/param agreement, a consistent
    /// shape chain from `input_shape` to the logits, and logits width equal
    /// to `num_classes`.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidModel(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            validate_layer(i, layer)?;
        }
        let out = self.output_sample_shape()?;
        if out != [self.num_classes] {
            return Err(Error::InvalidModel(format!(
                "final output shape {out:?} does not match num_classes {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Per-sample shape after every layer; index 0 is the input shape.
    pub fn sample_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input_shape.to_vec();
        shapes.push(cur.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer
                .spec
                .output_shape(&cur)
                .map_err(|detail| Error::ShapeMismatch {
                    layer: i,
                    kind: layer.spec.kind_name(),
                    detail,
                })?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn output_sample_shape(&self) -> Result<Vec<usize>> {
        Ok(self.sample_shapes()?.pop().unwrap())
    }

    /// Index of the last convolution or fully connected layer — the one that
    /// produces the logits in a baseline model.
    pub fn logit_layer_index(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.spec.is_parametric())
    }

    pub fn has_edac(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.spec, LayerSpec::Edac(_)))
    }

    /// Total injectable parameter count (includes EDAC interval bounds,
    /// excludes BatchNorm running statistics).
    pub fn param_count(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count() as u64).sum()
    }

    /// Parameters held in EDAC interval tensors only.
    pub fn interval_param_count(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| matches!(l.spec, LayerSpec::Edac(_)))
            .map(|l| l.param_count() as u64)
            .sum()
    }

    /// Parameter and per-sample MAC totals.
    ///
    /// MACs: `kh·kw·C_in·C_out·H_out·W_out` per convolution and
    /// `in·out` per fully connected layer. Normalization, activation,
    /// pooling, and EDAC selection work is not counted.
    pub fn count_params_macs(&self) -> Result<CostReport> {
        let shapes = self.sample_shapes()?;
        let mut macs = 0u64;
        for (i, layer) in self.layers.iter().enumerate() {
            match &layer.spec {
                LayerSpec::Conv2D {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    ..
                } => {
                    let out = &shapes[i + 1];
                    let (oh, ow) = (out[1] as u64, out[2] as u64);
                    macs += (kernel_h * kernel_w * in_channels * out_channels) as u64 * oh * ow;
                }
                LayerSpec::FullyConnected {
                    in_features,
                    out_features,
                    ..
                } => {
                    macs += (in_features * out_features) as u64;
                }
                _ => {}
            }
        }
        Ok(CostReport {
            params: self.param_count(),
            macs,
        })
    }

    /// Order-sensitive digest over structure and parameter bits. Used to
    /// reject gradient caches computed against a different model.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_usize(self.num_classes);
        for d in self.input_shape {
            h.write_usize(d);
        }
        for layer in &self.layers {
            h.write_str(layer.spec.kind_name());
            if let LayerSpec::Edac(spec) = &layer.spec {
                for group in &spec.replicas {
                    h.write_usize(group.len());
                    for &p in group {
                        h.write_usize(p);
                    }
                }
            }
            for t in layer.injectable_tensors() {
                h.write_usize(t.len());
                for v in t.data() {
                    h.write_u32(v.to_bits());
                }
            }
            if let LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            } = &layer.params
            {
                for v in running_mean.data().iter().chain(running_var.data()) {
                    h.write_u32(v.to_bits());
                }
            }
        }
        h.finish()
    }
}

fn layer_err(index: usize, kind: &str, detail: String) -> Error {
    Error::InvalidModel(format!("layer {index} ({kind}): {detail}"))
}

fn validate_layer(index: usize, layer: &Layer) -> Result<()> {
    let kind = layer.spec.kind_name();
    let err = |detail: String| Err(layer_err(index, kind, detail));
    match (&layer.spec, &layer.params) {
        (
            LayerSpec::Conv2D {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                has_bias,
                ..
            },
            LayerParams::Conv2D { weight, bias },
        ) => {
            if *stride == 0 {
                return err("stride must be positive".into());
            }
            let want = [*out_channels, *in_channels, *kernel_h, *kernel_w];
            if weight.shape() != want {
                return err(format!(
                    "weight shape {:?} does not match spec {want:?}",
                    weight.shape()
                ));
            }
            check_bias(err, *has_bias, bias, *out_channels)
        }
        (
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                has_bias,
            },
            LayerParams::FullyConnected { weight, bias },
        ) => {
            let want = [*out_features, *in_features];
            if weight.shape() != want {
                return err(format!(
                    "weight shape {:?} does not match spec {want:?}",
                    weight.shape()
                ));
            }
            check_bias(err, *has_bias, bias, *out_features)
        }
        (
            LayerSpec::BatchNorm { channels },
            LayerParams::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
            },
        ) => {
            for (name, t) in [
                ("scale", scale),
                ("shift", shift),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ] {
                if t.shape() != [*channels] {
                    return err(format!(
                        "{name} shape {:?} does not match {channels} channels",
                        t.shape()
                    ));
                }
            }
            Ok(())
        }
        (LayerSpec::Edac(spec), LayerParams::Edac { lower, upper }) => {
            spec.validate()?;
            let logical = spec.logical_channels();
            if lower.shape() != [logical] || upper.shape() != [logical] {
                return err(format!(
                    "interval shapes {:?}/{:?} do not match {logical} logical channels",
                    lower.shape(),
                    upper.shape()
                ));
            }
            Ok(())
        }
        (LayerSpec::MaxPool { window, stride }, LayerParams::None) => {
            if *window == 0 || *stride == 0 {
                return err("window and stride must be positive".into());
            }
            Ok(())
        }
        (LayerSpec::ReLU | LayerSpec::Flatten, LayerParams::None) => Ok(()),
        (spec, _) => err(format!("parameters do not match a {} layer", spec.kind_name())),
    }
}

fn check_bias(
    err: impl FnOnce(String) -> Result<()>,
    has_bias: bool,
    bias: &Option<Tensor>,
    out: usize,
) -> Result<()> {
    match (has_bias, bias) {
        (true, Some(b)) if b.shape() == [out] => Ok(()),
        (true, Some(b)) => err(format!(
            "bias shape {:?} does not match {out} output channels",
            b.shape()
        )),
        (true, None) => err("spec declares a bias but none is present".into()),
        (false, Some(_)) => err("spec declares no bias but one is present".into()),
        (false, None) => Ok(()),
    }
}

struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
    fn write_byte(&mut self, b: u8) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
    }
    fn write_u32(&mut self, v: u32) {
        for b in v.to_le_bytes() {
            self.write_byte(b);
        }
    }
    fn write_usize(&mut self, v: usize) {
        for b in (v as u64).to_le_bytes() {
            self.write_byte(b);
        }
    }
    fn write_str(&mut self, s: &str) {
        for b in s.as_bytes() {
            self.write_byte(*b);
        }
        self.write_byte(0xff);
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Layer builders with Kaiming-uniform weight initialization (bound
/// `sqrt(6 / fan_in)`), zero biases, and identity BatchNorm statistics.
pub mod build {
    use super::*;

    pub fn conv2d(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Layer {
        let fan_in = in_channels * kernel * kernel;
        let weight = kaiming(rng, vec![out_channels, in_channels, kernel, kernel], fan_in);
        Layer::new(
            LayerSpec::Conv2D {
                in_channels,
                out_channels,
                kernel_h: kernel,
                kernel_w: kernel,
                stride,
                padding,
                has_bias: true,
            },
            LayerParams::Conv2D {
                weight,
                bias: Some(Tensor::zeros(&[out_channels])),
            },
        )
    }

    pub fn fully_connected(rng: &mut ChaCha8Rng, in_features: usize, out_features: usize) -> Layer {
        let weight = kaiming(rng, vec![out_features, in_features], in_features);
        Layer::new(
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                has_bias: true,
            },
            LayerParams::FullyConnected {
                weight,
                bias: Some(Tensor::zeros(&[out_features])),
            },
        )
    }

    pub fn batch_norm(channels: usize) -> Layer {
        Layer::new(
            LayerSpec::BatchNorm { channels },
            LayerParams::BatchNorm {
                scale: Tensor::filled(&[channels], 1.0),
                shift: Tensor::zeros(&[channels]),
                running_mean: Tensor::zeros(&[channels]),
                running_var: Tensor::filled(&[channels], 1.0),
            },
        )
    }

    pub fn relu() -> Layer {
        Layer::new(LayerSpec::ReLU, LayerParams::None)
    }

    pub fn max_pool(window: usize, stride: usize) -> Layer {
        Layer::new(LayerSpec::MaxPool { window, stride }, LayerParams::None)
    }

    pub fn flatten() -> Layer {
        Layer::new(LayerSpec::Flatten, LayerParams::None)
    }

    pub fn edac(spec: EdacSpec, lower: Vec<f32>, upper: Vec<f32>) -> Result<Layer> {
        let logical = spec.logical_channels();
        Ok(Layer::new(
            LayerSpec::Edac(spec),
            LayerParams::Edac {
                lower: Tensor::new(vec![logical], lower)?,
                upper: Tensor::new(vec![logical], upper)?,
            },
        ))
    }

    fn kaiming(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f32).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.random::<f32>() * 2.0 * bound - bound)
            .collect();
        Tensor::new(shape, data).unwrap()
    }
}

/// Named architecture presets used by the CLI and the test suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchPreset {
    /// Flatten → FC(64) → ReLU → FC(classes).
    MlpSmall,
    /// Two conv/pool stages without normalization, then two FC layers.
    CnnSmall,
    /// Two conv/BN/pool stages, then two FC layers.
    CnnBn,
}

impl ArchPreset {
    pub fn name(self) -> &'static str {
        match self {
            ArchPreset::MlpSmall => "mlp_small",
            ArchPreset::CnnSmall => "cnn_small",
            ArchPreset::CnnBn => "cnn_bn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp_small" => Ok(ArchPreset::MlpSmall),
            "cnn_small" => Ok(ArchPreset::CnnSmall),
            "cnn_bn" => Ok(ArchPreset::CnnBn),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture preset `{other}` \
                 (expected mlp_small, cnn_small, or cnn_bn)"
            ))),
        }
    }

    /// Builds the preset with freshly initialized parameters.
    pub fn build(self, input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<ModelGraph> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = input_shape;
        let layers = match self {
            ArchPreset::MlpSmall => vec![
                build::flatten(),
                build::fully_connected(&mut rng, c * h * w, 64),
                build::relu(),
                build::fully_connected(&mut rng, 64, num_classes),
            ],
            ArchPreset::CnnSmall | ArchPreset::CnnBn => {
                let with_bn = matches!(self, ArchPreset::CnnBn);
                let mut layers = Vec::new();
                let mut cur = [c, h, w];
                for out_c in [8usize, 16] {
                    layers.push(build::conv2d(&mut rng, cur[0], out_c, 3, 1, 1));
                    if with_bn {
                        layers.push(build::batch_norm(out_c));
                    }
                    layers.push(build::relu());
                    layers.push(build::max_pool(2, 2));
                    cur = [out_c, cur[1] / 2, cur[2] / 2];
                }
                let feat = cur[0] * cur[1] * cur[2];
                layers.push(build::flatten());
                layers.push(build::fully_connected(&mut rng, feat, 32));
                layers.push(build::relu());
                layers.push(build::fully_connected(&mut rng, 32, num_classes));
                layers
            }
        };
        ModelGraph::new(layers, input_shape, num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_count() {
        let m = ArchPreset::CnnBn.build([1, 12, 12], 5, 7).unwrap();
        // conv1 8·1·3·3+8=80, bn1 16, conv2 16·8·3·3+16=1168, bn2 32,
        // fc1 16·3·3·32+32=4640, fc2 32·5+5=165
        let cost = m.count_params_macs().unwrap();
        assert_eq!(cost.params, 80 + 16 + 1168 + 32 + 4640 + 165);
        // conv1 9·1·8·12·12 + conv2 9·8·16·6·6 + fc1 144·32 + fc2 32·5
        assert_eq!(cost.macs, 10_368 + 41_472 + 4_608 + 160);
    }

    #[test]
    fn mlp_preset_shapes() {
        let m = ArchPreset::MlpSmall.build([1, 8, 8], 3, 1).unwrap();
        assert_eq!(m.output_sample_shape().unwrap(), vec![3]);
    }

    #[test]
    fn same_seed_same_model() {
        let a = ArchPreset::CnnSmall.build([1, 12, 12], 5, 42).unwrap();
        let b = ArchPreset::CnnSmall.build([1, 12, 12], 5, 42).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = ArchPreset::CnnSmall.build([1, 12, 12], 5, 43).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn validate_rejects_wrong_logits_width() {
        let mut m = ArchPreset::MlpSmall.build([1, 8, 8], 3, 1).unwrap();
        m.num_classes = 4;
        assert!(m.validate().is_err());
    }

    #[test]
    fn validate_rejects_mismatched_weight_shape() {
        let mut m = ArchPreset::MlpSmall.build([1, 8, 8], 3, 1).unwrap();
        if let LayerParams::FullyConnected { weight, .. } = &mut m.layers[1].params {
            *weight = Tensor::zeros(&[64, 63]);
        }
        assert!(m.validate().is_err());
    }

    #[test]
    fn fingerprint_sensitive_to_single_bit() {
        let mut m = ArchPreset::MlpSmall.build([1, 8, 8], 3, 1).unwrap();
        let before = m.fingerprint();
        m.layers[1].xor_param_bit(0, 0).unwrap();
        assert_ne!(before, m.fingerprint());
    }
}
