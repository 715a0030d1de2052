//! Width-parameterized model families and their forward pass.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, NO_INDEX};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Width multipliers swept by the harness.
pub const WIDTH_GRID: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 3.0, 4.0];

pub const MLP_BASE_WIDTH: usize = 8;
pub const CNN_BASE_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mlp,
    #[serde(rename = "smallcnn")]
    SmallCnn,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::SmallCnn => "smallcnn",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Family::Mlp),
            "smallcnn" => Ok(Family::SmallCnn),
            other => Err(Error::UnsupportedFamily(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub width_multiplier: f64,
    /// Per-sample input shape: `[d]` for MLPs, `[H, W]` or `[1, H, W]` for CNNs.
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub init_seed: u64,
    /// Explicit MLP hidden widths, overriding the width-multiplier rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
}

impl ModelSpec {
    pub fn mlp(
        input_dim: usize,
        class_count: usize,
        width_multiplier: f64,
        init_seed: u64,
    ) -> Self {
        Self {
            family: Family::Mlp,
            width_multiplier,
            input_shape: vec![input_dim],
            class_count,
            init_seed,
            hidden: None,
        }
    }

    /// An MLP with an explicit hidden-layer plan (empty for a linear model).
    pub fn mlp_with_hidden(
        input_dim: usize,
        hidden: Vec<usize>,
        class_count: usize,
        init_seed: u64,
    ) -> Self {
        Self {
            hidden: Some(hidden),
            ..Self::mlp(input_dim, class_count, 1.0, init_seed)
        }
    }

    pub fn small_cnn(
        side: usize,
        class_count: usize,
        width_multiplier: f64,
        init_seed: u64,
    ) -> Self {
        Self {
            family: Family::SmallCnn,
            width_multiplier,
            input_shape: vec![side, side],
            class_count,
            init_seed,
            hidden: None,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn mlp_hidden_widths(&self) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| {
            let w = scaled(MLP_BASE_WIDTH, self.width_multiplier);
            vec![w, w]
        })
    }

    /// Channel plan `(c1, c2)` of the two conv layers.
    pub fn cnn_channels(&self) -> (usize, usize) {
        let c1 = scaled(CNN_BASE_CHANNELS, self.width_multiplier);
        (c1, 2 * c1)
    }
}

fn scaled(base: usize, m: f64) -> usize {
    ((base as f64 * m).round() as usize).max(1)
}

/// Location of one parameter tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    /// `y = x Wᵀ + b`, `W` stored `out × in`.
    Dense {
        weight: usize,
        bias: usize,
    },
    /// 3×3 same-padding convolution over NHWC activations.
    Conv3x3 {
        height: usize,
        width: usize,
        cin: usize,
        weight: usize,
        bias: usize,
    },
    Relu,
    MaxPool2 {
        height: usize,
        width: usize,
        channels: usize,
    },
}

/// Flattened model parameters θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    params: Vec<f64>,
    blocks: Vec<ParamBlock>,
    layers: Vec<Layer>,
}

struct LayoutBuilder {
    blocks: Vec<ParamBlock>,
    layers: Vec<Layer>,
    total: usize,
    /// `(block, fan_in)` for initialization.
    weights: Vec<(usize, usize)>,
}

impl LayoutBuilder {
    fn new() -> Self {
        Self {
            blocks: Vec::new(),
            layers: Vec::new(),
            total: 0,
            weights: Vec::new(),
        }
    }

    fn block(&mut self, name: String, shape: Vec<usize>) -> usize {
        let b = ParamBlock {
            name,
            offset: self.total,
            shape,
        };
        self.total += b.len();
        self.blocks.push(b);
        self.blocks.len() - 1
    }

    fn dense(&mut self, idx: usize, input: usize, output: usize) {
        let weight = self.block(format!("dense{idx}.weight"), vec![output, input]);
        let bias = self.block(format!("dense{idx}.bias"), vec![output]);
        self.weights.push((weight, input));
        self.layers.push(Layer::Dense { weight, bias });
    }

    fn conv(&mut self, idx: usize, height: usize, width: usize, cin: usize, cout: usize) {
        let weight = self.block(format!("conv{idx}.weight"), vec![cout, 9 * cin]);
        let bias = self.block(format!("conv{idx}.bias"), vec![cout]);
        self.weights.push((weight, 9 * cin));
        self.layers.push(Layer::Conv3x3 {
            height,
            width,
            cin,
            weight,
            bias,
        });
    }
}

/// Builds a network with He-scaled Gaussian weights and zero biases.
pub fn build_model(spec: &ModelSpec) -> Result<Network> {
    if !(spec.width_multiplier > 0.0 && spec.width_multiplier.is_finite()) {
        return Err(Error::invalid("width_multiplier must be positive"));
    }
    if spec.class_count == 0 {
        return Err(Error::invalid("class_count must be positive"));
    }
    let mut lb = LayoutBuilder::new();
    match spec.family {
        Family::Mlp => {
            let [input] = spec.input_shape[..] else {
                return Err(Error::invalid(format!(
                    "mlp expects a flat input shape, got {:?}",
                    spec.input_shape
                )));
            };
            let mut prev = input;
            let hidden = spec.mlp_hidden_widths();
            for (i, &h) in hidden.iter().enumerate() {
                lb.dense(i, prev, h);
                lb.layers.push(Layer::Relu);
                prev = h;
            }
            lb.dense(hidden.len(), prev, spec.class_count);
        }
        Family::SmallCnn => {
            let (h, w) = match spec.input_shape[..] {
                [h, w] | [1, h, w] => (h, w),
                _ => {
                    return Err(Error::invalid(format!(
                        "smallcnn expects a single-channel image, got {:?}",
                        spec.input_shape
                    )))
                }
            };
            if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
                return Err(Error::invalid(
                    "smallcnn image sides must be multiples of 4",
                ));
            }
            let (c1, c2) = spec.cnn_channels();
            lb.conv(0, h, w, 1, c1);
            lb.layers.push(Layer::Relu);
            lb.layers.push(Layer::MaxPool2 {
                height: h,
                width: w,
                channels: c1,
            });
            lb.conv(1, h / 2, w / 2, c1, c2);
            lb.layers.push(Layer::Relu);
            lb.layers.push(Layer::MaxPool2 {
                height: h / 2,
                width: w / 2,
                channels: c2,
            });
            lb.dense(2, (h / 4) * (w / 4) * c2, spec.class_count);
        }
    }

    let mut params = vec![0.0; lb.total];
    let mut rng = seed::rng(spec.init_seed);
    for &(block, fan_in) in &lb.weights {
        let std = (2.0 / fan_in as f64).sqrt();
        for p in &mut params[lb.blocks[block].range()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = std * z;
        }
    }
    Ok(Network {
        spec: spec.clone(),
        params,
        blocks: lb.blocks,
        layers: lb.layers,
    })
}

impl Network {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_vector(&self) -> ParamVector {
        ParamVector(self.params.clone())
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ParamLength {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Network> {
        let mut n = self.clone();
        n.set_params(params)?;
        Ok(n)
    }

    /// Pushes one leaf per parameter block onto the tape.
    pub fn param_vars(&self, tape: &mut Tape, tracked: bool) -> Vec<Var> {
        self.blocks
            .iter()
            .map(|b| {
                let v = self.params[b.range()].to_vec();
                if tracked {
                    tape.leaf(b.shape.clone(), v)
                } else {
                    tape.constant(b.shape.clone(), v)
                }
            })
            .collect()
    }

    /// Records the forward pass for an `n × input_len` batch, returning
    /// `n × C` logits.
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        let n = tape.shape(x)[0];
        let mut h = x;
        for layer in &self.layers {
            h = match *layer {
                Layer::Dense { weight, bias } => {
                    let y = tape.matmul(h, params[weight], false, true);
                    tape.add_row_bias(y, params[bias])
                }
                Layer::Relu => tape.relu(h),
                Layer::Conv3x3 {
                    height,
                    width,
                    cin,
                    weight,
                    bias,
                } => {
                    let idx = im2col_index(n, height, width, cin);
                    let cols = tape.gather(h, idx, vec![n * height * width, 9 * cin]);
                    let y = tape.matmul(cols, params[weight], false, true);
                    let y = tape.add_row_bias(y, params[bias]);
                    let cout = tape.shape(y)[1];
                    tape.reshape(y, vec![n, height * width * cout])
                }
                Layer::MaxPool2 {
                    height,
                    width,
                    channels,
                } => {
                    let idx = maxpool_index(tape.value(h), n, height, width, channels);
                    let out = (height / 2) * (width / 2) * channels;
                    tape.gather(h, idx, vec![n, out])
                }
            };
        }
        h
    }

    /// Logits for a flat `n × input_len` batch.
    pub fn logits_batch(&self, inputs: &[f64]) -> Vec<f64> {
        let d = self.input_len();
        assert_eq!(
            inputs.len() % d,
            0,
            "batch length is not a multiple of the input size"
        );
        let n = inputs.len() / d;
        let mut t = Tape::new();
        let params = self.param_vars(&mut t, false);
        let x = t.constant(vec![n, d], inputs.to_vec());
        let y = self.forward_tape(&mut t, &params, x);
        t.value(y).to_vec()
    }

    /// Logits for a single input tensor.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let expected = &self.spec.input_shape;
        let squeeze = |s: &[usize]| s.iter().copied().filter(|&d| d != 1).collect::<Vec<_>>();
        let shape_ok = input.shape() == expected.as_slice()
            || (input.len() == self.input_len() && squeeze(input.shape()) == squeeze(expected));
        if !shape_ok {
            return Err(Error::ShapeMismatch {
                expected: expected.clone(),
                actual: input.shape().to_vec(),
            });
        }
        let logits = self.logits_batch(input.data());
        Ok(Tensor::from_parts_unchecked(
            vec![self.class_count()],
            logits,
        ))
    }

    /// Predicted classes for a flat batch.
    pub fn predict_batch(&self, inputs: &[f64]) -> Vec<usize> {
        let c = self.class_count();
        self.logits_batch(inputs)
            .chunks_exact(c)
            .map(crate::tensor::argmax_class)
            .collect()
    }
}

pub fn param_count(network: &Network) -> usize {
    network.param_count()
}

/// Gather map turning NHWC activations `(n, h, w, c)` into an
/// `(n·h·w) × (9·c)` patch matrix ordered `(ky, kx, c)`.
fn im2col_index(n: usize, h: usize, w: usize, c: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(n * h * w * 9 * c);
    for s in 0..n {
        let base = s * h * w * c;
        for y in 0..h {
            for x in 0..w {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        let xx = x as isize + kx as isize - 1;
                        let inside = yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize;
                        for ch in 0..c {
                            idx.push(if inside {
                                (base + (yy as usize * w + xx as usize) * c + ch) as u32
                            } else {
                                NO_INDEX
                            });
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Gather map selecting the first maximum of every 2×2 window.
fn maxpool_index(values: &[f64], n: usize, h: usize, w: usize, c: usize) -> Rc<[u32]> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * oh * ow * c);
    for s in 0..n {
        let base = s * h * w * c;
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    let mut best = base + (2 * y * w + 2 * x) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                        if values[i] > values[best] {
                            best = i;
                        }
                    }
                    idx.push(best as u32);
                }
            }
        }
    }
    idx.into()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"EFFDIMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes `magic | version u32 LE | spec JSON length u32 LE | spec JSON |
/// P u64 LE | P × f64 LE`.
pub fn write_checkpoint(network: &Network, mut w: impl Write) -> Result<()> {
    let spec = serde_json::to_vec(&network.spec)?;
    let io = |e| Error::Io {
        context: "writing checkpoint".into(),
        source: e,
    };
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(spec.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&spec).map_err(io)?;
    w.write_all(&(network.params.len() as u64).to_le_bytes())
        .map_err(io)?;
    for p in &network.params {
        w.write_all(&p.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Network> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Io {
        context: "reading checkpoint".into(),
        source: e,
    })?;
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let spec_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let spec: ModelSpec = serde_json::from_slice(take(spec_len)?)?;
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let raw = take(count.checked_mul(8).ok_or_else(|| bad("bad length"))?)?;
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut net = build_model(&spec)?;
    net.set_params(&params)
        .map_err(|_| bad("parameter count does not match spec"))?;
    Ok(net)
}

pub fn save_checkpoint(network: &Network, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(network, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
