//! Modality encoders: small MLPs and CNNs mapping raw inputs onto the shared
//! unit hypersphere.
//!
//! Every encoder ends with a linear projection followed by row-wise L2
//! normalization, so its output always has unit norm and cosine similarity
//! reduces to a dot product. Hidden dense layers use relu; the final layer
//! is linear. Tabular encoders additionally pass their input through the
//! per-column attention gate before the first dense layer, so gate logits
//! train jointly with the encoder weights.
//!
//! Initialization is Glorot-uniform, `U(−b, b)` with
//! `b = sqrt(6 / (fan_in + fan_out))`, drawn from a ChaCha stream seeded by
//! the config seed: layer by layer, weight entries in row-major order.
//! Biases and gate logits start at exact zero, so a freshly initialized gate
//! passes every column at weight 0.5.
//!
//! The label encoder consumes the raw scalar label but lifts it to `1 + y`
//! before the first dense layer: with zero-initialized biases, a raw input
//! of exactly 0 would otherwise propagate an all-zero activation stack into
//! the final normalization, which has no defined direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{apply_gate_on_tape, GateParams};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Matrix, Tape, ValueId};

/// Default width of the shared embedding space.
pub const DEFAULT_PROJECTION_DIM: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ImageCnn,
    ImageMlp,
    TabularMlp,
    LabelMlp,
}

/// Geometry of a channel-major flattened image input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn flat_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

fn default_conv_channels() -> Vec<usize> {
    vec![8, 16]
}

fn default_projection_dim() -> usize {
    DEFAULT_PROJECTION_DIM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Input width for MLP kinds (1 for the label encoder). Derived from
    /// `image_shape` for CNNs.
    #[serde(default)]
    pub input_dim: usize,
    /// Required for `image_cnn`.
    #[serde(default)]
    pub image_shape: Option<ImageShape>,
    /// Output channels of each conv block (`image_cnn` only). Each block is
    /// a 3x3 stride-1 zero-padded convolution, relu, then 2x2 max-pool.
    #[serde(default = "default_conv_channels")]
    pub conv_channels: Vec<usize>,
    /// Hidden dense widths. Must be non-empty for MLP kinds; for CNNs these
    /// are extra dense layers between the flattened features and the
    /// projection (may be empty).
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn image_mlp(input_dim: usize, hidden_dims: Vec<usize>, seed: u64) -> Self {
        EncoderConfig {
            kind: EncoderKind::ImageMlp,
            input_dim,
            image_shape: None,
            conv_channels: Vec::new(),
            hidden_dims,
            projection_dim: DEFAULT_PROJECTION_DIM,
            seed,
        }
    }

    pub fn tabular_mlp(input_dim: usize, hidden_dims: Vec<usize>, seed: u64) -> Self {
        EncoderConfig { kind: EncoderKind::TabularMlp, ..Self::image_mlp(input_dim, hidden_dims, seed) }
    }

    pub fn label_mlp(hidden_dims: Vec<usize>, seed: u64) -> Self {
        EncoderConfig { kind: EncoderKind::LabelMlp, ..Self::image_mlp(1, hidden_dims, seed) }
    }

    /// Default CNN: two conv blocks (channels 8 then 16), then a linear
    /// projection from the flattened pooled features.
    pub fn image_cnn(shape: ImageShape, seed: u64) -> Self {
        EncoderConfig {
            kind: EncoderKind::ImageCnn,
            input_dim: shape.flat_len(),
            image_shape: Some(shape),
            conv_channels: default_conv_channels(),
            hidden_dims: Vec::new(),
            projection_dim: DEFAULT_PROJECTION_DIM,
            seed,
        }
    }

    pub fn with_projection_dim(mut self, dim: usize) -> Self {
        self.projection_dim = dim;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.projection_dim == 0 {
            return Err(Error::Config("encoder projection_dim must be >= 1".into()));
        }
        match self.kind {
            EncoderKind::ImageCnn => {
                let shape = self.image_shape.ok_or_else(|| {
                    Error::Config("image_cnn encoder requires image_shape".into())
                })?;
                if shape.height == 0 || shape.width == 0 || shape.channels == 0 {
                    return Err(Error::Config("image_shape dimensions must be >= 1".into()));
                }
                if self.conv_channels.is_empty() {
                    return Err(Error::Config("image_cnn requires at least one conv block".into()));
                }
                let (mut h, mut w) = (shape.height, shape.width);
                for (i, &c) in self.conv_channels.iter().enumerate() {
                    if c == 0 {
                        return Err(Error::Config(format!("conv block {} has zero channels", i)));
                    }
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Config(format!(
                            "conv block {} pools a {}x{} map; height and width must be even",
                            i, h, w
                        )));
                    }
                    h /= 2;
                    w /= 2;
                }
            }
            EncoderKind::ImageMlp | EncoderKind::TabularMlp => {
                if self.input_dim == 0 {
                    return Err(Error::Config("encoder input_dim must be >= 1".into()));
                }
                if self.hidden_dims.is_empty() {
                    return Err(Error::Config("mlp encoder requires non-empty hidden_dims".into()));
                }
            }
            EncoderKind::LabelMlp => {
                if self.input_dim != 1 {
                    return Err(Error::Config(format!(
                        "label encoder input_dim must be 1, got {}",
                        self.input_dim
                    )));
                }
                if self.hidden_dims.is_empty() {
                    return Err(Error::Config("mlp encoder requires non-empty hidden_dims".into()));
                }
            }
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims entries must be >= 1".into()));
        }
        Ok(())
    }
}

/// One parameterized layer. Conv layers are always followed by relu and a
/// 2x2 max-pool in the forward pass; dense layers are linear, with relu
/// applied between (not after) them.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { weight: Matrix, bias: Matrix },
    Conv { kernel: Matrix, bias: Matrix, geom: ConvGeom },
}

/// A modality encoder's parameters: optional attention gate (tabular only)
/// plus an ordered layer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub gate: Option<GateParams>,
    pub layers: Vec<Layer>,
}

/// Glorot-uniform initialization from the config seed. Deterministic: the
/// same config always yields bitwise-identical parameters.
///
/// Because biases start at zero and hidden activations are ReLU, a *very*
/// narrow hidden layer can zero out an entire sample at initialization
/// (every hidden unit negative), which the embedding norm guard then
/// rejects. The chance is ~2^-width per sample, so hidden widths of 16 or
/// more make it negligible; prefer those over single-digit widths.
pub fn init_params(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut glorot = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| -> Matrix {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
    };

    let mut layers = Vec::new();
    let head_input = match config.kind {
        EncoderKind::ImageCnn => {
            let shape = config.image_shape.expect("validated");
            let (mut h, mut w) = (shape.height, shape.width);
            let mut c_in = shape.channels;
            for &c_out in &config.conv_channels {
                let geom = ConvGeom { in_channels: c_in, height: h, width: w, out_channels: c_out };
                let kernel = glorot(c_out, c_in * 9, c_in * 9, c_out * 9);
                layers.push(Layer::Conv { kernel, bias: Matrix::zeros(1, c_out), geom });
                c_in = c_out;
                h /= 2;
                w /= 2;
            }
            c_in * h * w
        }
        _ => config.input_dim,
    };

    let mut dims = vec![head_input];
    dims.extend_from_slice(&config.hidden_dims);
    dims.push(config.projection_dim);
    for pair in dims.windows(2) {
        let (din, dout) = (pair[0], pair[1]);
        layers.push(Layer::Dense {
            weight: glorot(din, dout, din, dout),
            bias: Matrix::zeros(1, dout),
        });
    }

    let gate = match config.kind {
        EncoderKind::TabularMlp => Some(GateParams::zeros(config.input_dim)),
        _ => None,
    };
    Ok(EncoderParams { config: config.clone(), gate, layers })
}

impl EncoderParams {
    /// Input width the forward pass expects, derived from the actual layers.
    pub fn input_width(&self) -> usize {
        match self.layers.first() {
            Some(Layer::Dense { weight, .. }) => weight.rows(),
            Some(Layer::Conv { geom, .. }) => geom.input_cols(),
            None => 0,
        }
    }

    /// Embedding width, derived from the final layer.
    pub fn output_width(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense { weight, .. }) => weight.cols(),
            Some(Layer::Conv { geom, .. }) => geom.output_cols() / 4,
            None => 0,
        }
    }

    /// Parameter matrices in the canonical flat order: gate logits first (if
    /// present), then each layer's weight/kernel followed by its bias.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        if let Some(g) = &self.gate {
            out.push(&g.theta);
        }
        for layer in &self.layers {
            match layer {
                Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::Conv { kernel, bias, .. } => {
                    out.push(kernel);
                    out.push(bias);
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        if let Some(g) = &mut self.gate {
            out.push(&mut g.theta);
        }
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::Conv { kernel, bias, .. } => {
                    out.push(kernel);
                    out.push(bias);
                }
            }
        }
        out
    }

    /// Parameter names parallel to [`EncoderParams::params`]:
    /// `gate.theta`, `layer0.weight`, `layer0.bias`, ...
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.gate.is_some() {
            out.push("gate.theta".to_string());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let w = match layer {
                Layer::Dense { .. } => "weight",
                Layer::Conv { .. } => "kernel",
            };
            out.push(format!("layer{}.{}", i, w));
            out.push(format!("layer{}.bias", i));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    /// Registers all parameters on a tape, in [`EncoderParams::params`]
    /// order, and returns their node ids.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<ValueId>> {
        self.params().into_iter().map(|m| tape.input(m.clone())).collect()
    }

    /// Forward pass using parameter nodes `ids` (layout from
    /// [`EncoderParams::bind`]) applied to the batch node `x` (`N x input`).
    /// Returns an `N x projection` node with unit-norm rows.
    pub fn forward(&self, tape: &mut Tape, ids: &[ValueId], x: ValueId) -> Result<ValueId> {
        let expected = self.input_width();
        let got = tape.value(x).cols();
        if got != expected {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("input has {} columns, encoder expects {}", got, expected),
            });
        }
        let mut next_id = 0usize;
        let mut take = || {
            let id = ids[next_id];
            next_id += 1;
            id
        };

        let mut h = x;
        if self.gate.is_some() {
            let theta = take();
            h = apply_gate_on_tape(tape, h, theta)?;
        }
        if self.config.kind == EncoderKind::LabelMlp {
            // Fixed affine lift y -> 1 + y. With zero-initialized biases a
            // raw y = 0 would produce an all-zero activation stack and an
            // unnormalizable embedding; shifting the input off zero removes
            // that singularity for every label in [0, 1] while keeping the
            // encoder affine-equivalent and continuous in y.
            let n = tape.value(h).rows();
            let ones = tape.input(Matrix::new(n, 1, vec![1.0; n]))?;
            h = tape.add(h, ones)?;
        }
        let dense_total = self.layers.iter().filter(|l| matches!(l, Layer::Dense { .. })).count();
        let mut dense_seen = 0usize;
        for layer in &self.layers {
            match layer {
                Layer::Conv { geom, .. } => {
                    let (k, b) = (take(), take());
                    let conv = tape.conv3x3(h, k, b, *geom)?;
                    let act = tape.relu(conv)?;
                    h = tape.max_pool2(act, geom.out_channels, geom.height, geom.width)?;
                }
                Layer::Dense { .. } => {
                    let (w, b) = (take(), take());
                    let lin = tape.matmul(h, w)?;
                    h = tape.add_row(lin, b)?;
                    dense_seen += 1;
                    // relu between dense layers; the final layer stays linear.
                    if dense_seen < dense_total {
                        h = tape.relu(h)?;
                    }
                }
            }
        }
        tape.l2_normalize_rows(h)
    }

    /// Encodes a batch without keeping gradients.
    pub fn encode_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape)?;
        let x = tape.input(inputs.clone())?;
        let out = self.forward(&mut tape, &ids, x)?;
        Ok(tape.value(out).clone())
    }

    /// Encodes a single `1 x input` row into a unit embedding.
    pub fn encode(&self, input: &Matrix) -> Result<Embedding> {
        if input.rows() != 1 {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("expected a single row, got {} rows", input.rows()),
            });
        }
        Embedding::from_unit(self.encode_batch(input)?)
    }
}

/// Encodes a spectrum label `y ∈ [0, 1]` with the label encoder. The raw
/// scalar is the network input — labels are never one-hot encoded.
pub fn encode_label(params: &EncoderParams, y: f64) -> Result<Embedding> {
    if params.config.kind != EncoderKind::LabelMlp {
        return Err(Error::Config(format!(
            "encode_label requires a label_mlp encoder, got {:?}",
            params.config.kind
        )));
    }
    if !y.is_finite() || !(0.0..=1.0).contains(&y) {
        return Err(Error::LabelOutOfRange { value: y });
    }
    params.encode(&Matrix::row_vector(vec![y]))
}

/// Batch form of [`encode_label`]: one embedding row per label value.
pub fn encode_labels(params: &EncoderParams, ys: &[f64]) -> Result<Matrix> {
    if params.config.kind != EncoderKind::LabelMlp {
        return Err(Error::Config(format!(
            "encode_labels requires a label_mlp encoder, got {:?}",
            params.config.kind
        )));
    }
    for &y in ys {
        if !y.is_finite() || !(0.0..=1.0).contains(&y) {
            return Err(Error::LabelOutOfRange { value: y });
        }
    }
    let col = Matrix::new(ys.len(), 1, ys.to_vec());
    params.encode_batch(&col)
}

/// A unit-norm row vector in the shared embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Matrix);

impl Embedding {
    /// Tolerance for accepting a row as unit-norm.
    pub const UNIT_TOL: f64 = 1e-9;

    pub fn from_unit(m: Matrix) -> Result<Self> {
        if m.rows() != 1 {
            return Err(Error::Shape {
                op: "embedding",
                detail: format!("expected 1 row, got {}", m.rows()),
            });
        }
        let norm = m.row_norm(0);
        if (norm - 1.0).abs() > Self::UNIT_TOL {
            return Err(Error::NotNormalized { side: "embedding", row: 0, norm });
        }
        Ok(Embedding(m))
    }

    pub fn vector(&self) -> &Matrix {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.data()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    /// Cosine similarity; since both embeddings are unit, this is a dot
    /// product.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.0.row_dot(0, other.vector(), 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{}: {} vs {} (tol {})", what, a, b, tol);
    }

    #[test]
    fn glorot_bound_and_zero_biases() {
        let cfg = EncoderConfig::image_mlp(10, vec![16], 7).with_projection_dim(4);
        let params = init_params(&cfg).unwrap();
        let bound = (6.0f64 / 26.0).sqrt();
        assert_close(bound, 0.4803844614152614, 1e-12, "bound for fan 10->16");
        match &params.layers[0] {
            Layer::Dense { weight, bias } => {
                assert_eq!(weight.shape(), (10, 16));
                let max = weight.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(max <= bound, "weights exceed Glorot bound: {}", max);
                assert!(max > 0.8 * bound, "suspiciously small weights: {}", max);
                assert!(bias.data().iter().all(|&v| v == 0.0), "biases start at exact zero");
            }
            other => panic!("expected dense layer, got {:?}", other),
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = EncoderConfig::tabular_mlp(6, vec![5], 99).with_projection_dim(3);
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a, b, "same seed, bitwise-identical params");
        let c = init_params(&cfg.clone().with_seed(100)).unwrap();
        assert_ne!(a, c, "different seed, different params");
        // Tabular encoders start with a zeroed gate: every weight 0.5.
        let gate = a.gate.as_ref().unwrap();
        assert!(gate.theta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_reduces_to_l2_normalize() {
        let cfg = EncoderConfig::image_mlp(2, vec![2], 0).with_projection_dim(2);
        let params = EncoderParams {
            config: cfg,
            gate: None,
            layers: vec![Layer::Dense {
                weight: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
                bias: Matrix::zeros(1, 2),
            }],
        };
        let e = params.encode(&Matrix::row_vector(vec![3.0, 4.0])).unwrap();
        assert_close(e.as_slice()[0], 0.6, 1e-12, "x normalized");
        assert_close(e.as_slice()[1], 0.8, 1e-12, "y normalized");
    }

    #[test]
    fn encode_outputs_unit_rows_for_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cases = vec![
            init_params(&EncoderConfig::image_mlp(6, vec![8], 1).with_projection_dim(5)).unwrap(),
            init_params(&EncoderConfig::tabular_mlp(4, vec![8, 6], 2).with_projection_dim(5)).unwrap(),
            init_params(&EncoderConfig::label_mlp(vec![4], 3).with_projection_dim(5)).unwrap(),
        ];
        for params in cases {
            let x = Matrix::from_fn(3, params.input_width(), |_, _| rng.gen_range(-1.0..1.0));
            let out = params.encode_batch(&x).unwrap();
            assert_eq!(out.shape(), (3, 5));
            for i in 0..3 {
                assert_close(out.row_norm(i), 1.0, 1e-12, "unit row");
            }
        }
    }

    #[test]
    fn batch_encode_matches_single_encode_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params =
            init_params(&EncoderConfig::tabular_mlp(5, vec![7], 11).with_projection_dim(4)).unwrap();
        let x = Matrix::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
        let batch = params.encode_batch(&x).unwrap();
        for i in 0..4 {
            let single = params.encode(&Matrix::row_vector(x.row(i).to_vec())).unwrap();
            assert_eq!(single.as_slice(), batch.row(i), "row {} differs", i);
        }
    }

    #[test]
    fn default_cnn_shape_chain_from_32x32() {
        let shape = ImageShape { height: 32, width: 32, channels: 1 };
        let cfg = EncoderConfig::image_cnn(shape, 17);
        let params = init_params(&cfg).unwrap();
        // Two blocks: 1->8 channels at 32x32, 8->16 at 16x16; flattened
        // 16*8*8 = 1024 into the 128-wide projection.
        assert_eq!(params.layers.len(), 3);
        match (&params.layers[0], &params.layers[1], &params.layers[2]) {
            (
                Layer::Conv { kernel: k0, geom: g0, .. },
                Layer::Conv { kernel: k1, geom: g1, .. },
                Layer::Dense { weight, .. },
            ) => {
                assert_eq!(k0.shape(), (8, 9));
                assert_eq!((g0.height, g0.width), (32, 32));
                assert_eq!(k1.shape(), (16, 72));
                assert_eq!((g1.height, g1.width), (16, 16));
                assert_eq!(weight.shape(), (1024, 128));
            }
            _ => panic!("unexpected layer stack"),
        }
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let img = Matrix::from_fn(1, shape.flat_len(), |_, _| rng.gen_range(-1.0..1.0));
        let e = params.encode(&img).unwrap();
        assert_eq!(e.dim(), 128);
        assert_close(e.vector().row_norm(0), 1.0, 1e-12, "unit embedding");
    }

    #[test]
    fn cnn_rejects_odd_pooling_dims() {
        let cfg = EncoderConfig::image_cnn(ImageShape { height: 6, width: 6, channels: 1 }, 0);
        // 6x6 pools to 3x3; the second block cannot pool a 3x3 map.
        assert!(matches!(init_params(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn mlp_requires_hidden_layers() {
        let cfg = EncoderConfig::image_mlp(4, vec![], 0);
        assert!(matches!(init_params(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn label_encoder_validates_range_and_kind() {
        let label = init_params(&EncoderConfig::label_mlp(vec![4], 1).with_projection_dim(3)).unwrap();
        for y in [0.0, 0.5, 1.0, 0.25] {
            let e = encode_label(&label, y).unwrap();
            assert_close(e.vector().row_norm(0), 1.0, 1e-12, "unit label embedding");
        }
        for bad in [-0.1, 1.1, f64::NAN] {
            assert!(matches!(encode_label(&label, bad), Err(Error::LabelOutOfRange { .. })));
        }
        let image = init_params(&EncoderConfig::image_mlp(4, vec![4], 1).with_projection_dim(3)).unwrap();
        assert!(matches!(encode_label(&image, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn tabular_gate_half_open_at_init() {
        // With theta = 0 the gate halves every input; verify against a
        // manual forward with x/2.
        let cfg = EncoderConfig::tabular_mlp(3, vec![4], 21).with_projection_dim(3);
        let params = init_params(&cfg).unwrap();
        let x = Matrix::row_vector(vec![0.4, -1.2, 2.0]);
        let gated = params.encode(&x).unwrap();

        let mut ungated = params.clone();
        ungated.gate = None;
        let halved = ungated.encode(&x.scale(0.5)).unwrap();
        assert!(
            gated.vector().max_abs_diff(halved.vector()) < 1e-12,
            "zero-logit gate must equal halving the input"
        );
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let target = Matrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));

        // Tabular MLP (gate + dense) and a tiny CNN.
        let configs = vec![
            EncoderConfig::tabular_mlp(4, vec![5], 31).with_projection_dim(3),
            EncoderConfig::image_cnn(ImageShape { height: 4, width: 4, channels: 1 }, 32)
                .with_projection_dim(3),
        ];
        for mut cfg in configs {
            if cfg.kind == EncoderKind::ImageCnn {
                cfg.conv_channels = vec![2, 3];
            }
            let params = init_params(&cfg).unwrap();
            let x = Matrix::from_fn(2, params.input_width(), |_, _| rng.gen_range(-1.0..1.0));
            let flat: Vec<Matrix> = params.params().into_iter().cloned().collect();
            let err = grad_check(
                |t, ids| {
                    let xi = t.input(x.clone())?;
                    let out = params.forward(t, ids, xi)?;
                    let ti = t.input(target.clone())?;
                    let d = t.sub(out, ti)?;
                    let sq = t.mul(d, d)?;
                    t.mean_all(sq)
                },
                &flat,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{:?} encoder grad error {}", cfg.kind, err);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let params =
            init_params(&EncoderConfig::image_mlp(4, vec![4], 1).with_projection_dim(3)).unwrap();
        let x = Matrix::row_vector(vec![1.0, 2.0, 3.0]);
        let err = params.encode(&x).unwrap_err().to_string();
        assert!(err.contains("3") && err.contains("4"), "message was: {}", err);
    }
}
