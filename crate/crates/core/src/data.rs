//! Deterministic desk-scale datasets.
//!
//! Every input lies in `[0, 1]^d` so that l∞ budgets and clipping behave the
//! same on every track.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Batch;
use crate::seed;
use crate::tensor::Tensor;

/// Environment variable naming the directory that holds IDX files.
pub const DATA_DIR_ENV: &str = "EFFDIM_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

/// How a dataset was produced; lets the extra-data path draw more samples
/// from the same process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSource {
    TwoMoons {
        noise: f64,
    },
    Blobs {
        classes: usize,
        spread: f64,
    },
    Glyphs {
        side: usize,
        noise: f64,
    },
    /// Loaded from files; no generator available.
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    split: Split,
    class_count: usize,
    input_shape: Vec<usize>,
    source: DataSource,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        split: Split,
        class_count: usize,
        source: DataSource,
    ) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("dataset must be non-empty"))?;
        let input_shape = first.input.shape().to_vec();
        for s in &samples {
            if s.label >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes: class_count,
                });
            }
            if s.input.shape() != input_shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: input_shape,
                    actual: s.input.shape().to_vec(),
                });
            }
            if let Some(i) = s.input.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("input value {i} outside [0, 1]")));
            }
        }
        Ok(Self {
            samples,
            split,
            class_count,
            input_shape,
            source,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn source(&self) -> &DataSource {
        &self.source
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Flat `n × d` inputs.
    pub fn inputs_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.input_len());
        for s in &self.samples {
            out.extend_from_slice(s.input.data());
        }
        out
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.input_len();
        let mut inputs = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.samples[i].input.data());
            labels.push(self.samples[i].label);
        }
        Batch {
            inputs,
            labels,
            input_len: d,
            adversarial: None,
        }
    }

    pub fn to_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs_flat(),
            labels: self.labels(),
            input_len: self.input_len(),
            adversarial: None,
        }
    }

    /// A seed-selected subset of at most `n` samples, kept in original order.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed::rng(seed));
        idx.truncate(n);
        idx.sort_unstable();
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Dataset {
        Dataset {
            samples: Vec::new(),
            split: self.split,
            class_count: self.class_count,
            input_shape: self.input_shape.clone(),
            source: self.source.clone(),
        }
    }

    /// Concatenation; both sides must share class count and input shape.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if other.class_count != self.class_count || other.input_shape != self.input_shape {
            return Err(Error::invalid("cannot concatenate incompatible datasets"));
        }
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Ok(Dataset {
            samples,
            ..self.clone_empty()
        })
    }

    /// `label,x0,x1,...` CSV with one row per sample and flattened inputs.
    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.input_len()).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec = vec![s.label.to_string()];
            rec.extend(s.input.data().iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("csv output", e))?;
        Ok(())
    }
}

fn sample(point: &[f64], label: usize, shape: Vec<usize>) -> Sample {
    Sample {
        input: Tensor::from_parts_unchecked(
            shape,
            point.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        ),
        label,
    }
}

/// Points, labels and jitter offsets of a raw two-moons draw.
pub type MoonsDraw = (Vec<[f64; 2]>, Vec<usize>, Vec<[f64; 2]>);

/// Raw two-moons points before rescaling: `(points, labels, jitter)`, where
/// `jitter` holds the Gaussian offsets that were added.
pub fn two_moons_raw(n: usize, noise: f64, seed: u64) -> Result<MoonsDraw> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "two-moons needs a positive even n, got {n}"
        )));
    }
    if !(noise >= 0.0) {
        return Err(Error::invalid("noise must be non-negative"));
    }
    let mut rng = seed::rng(seed);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut jitter = Vec::with_capacity(n);
    for class in 0..2 {
        for _ in 0..n / 2 {
            let t = rng.random_range(0.0..=PI);
            let base = if class == 0 {
                [t.cos(), t.sin()]
            } else {
                [1.0 - t.cos(), 0.5 - t.sin()]
            };
            let j: [f64; 2] = [
                noise * {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                },
                noise * {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                },
            ];
            points.push([base[0] + j[0], base[1] + j[1]]);
            labels.push(class);
            jitter.push(j);
        }
    }
    Ok((points, labels, jitter))
}

/// Fixed affine map of the two-moons support (with a 4σ margin) into the
/// unit square, preserving aspect ratio.
pub fn two_moons_rescale(p: [f64; 2], noise: f64) -> [f64; 2] {
    let m = 4.0 * noise;
    let s = 1.0 / (3.0 + 2.0 * m);
    let height = 1.5 + 2.0 * m;
    [
        (p[0] + 1.0 + m) * s,
        (p[1] + 0.5 + m) * s + (1.0 - height * s) / 2.0,
    ]
}

pub fn generate_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let (points, labels, _) = two_moons_raw(n, noise, seed)?;
    let samples = points
        .iter()
        .zip(labels)
        .map(|(p, y)| sample(&two_moons_rescale(*p, noise), y, vec![2]))
        .collect();
    Dataset::new(samples, Split::Train, 2, DataSource::TwoMoons { noise })
}

/// Class centers on the unit circle.
pub fn blob_centers(classes: usize) -> Vec<[f64; 2]> {
    (0..classes)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / classes as f64;
            [a.cos(), a.sin()]
        })
        .collect()
}

pub fn blobs_rescale(p: [f64; 2], spread: f64) -> [f64; 2] {
    let m = 4.0 * spread;
    let s = 1.0 / (2.0 + 2.0 * m);
    [(p[0] + 1.0 + m) * s, (p[1] + 1.0 + m) * s]
}

/// Isotropic Gaussian clusters; classes are as balanced as `n` allows.
pub fn generate_blobs(n: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("blobs need at least two classes"));
    }
    if n == 0 || !(spread >= 0.0) {
        return Err(Error::invalid("blobs need n > 0 and spread >= 0"));
    }
    let centers = blob_centers(classes);
    let mut rng = seed::rng(seed);
    let samples = (0..n)
        .map(|i| {
            let y = i % classes;
            let c = centers[y];
            let p = [
                c[0] + spread * {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                },
                c[1] + spread * {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                },
            ];
            sample(&blobs_rescale(p, spread), y, vec![2])
        })
        .collect();
    Dataset::new(
        samples,
        Split::Train,
        classes,
        DataSource::Blobs { classes, spread },
    )
}

// Seven-segment masks, bit order a b c d e f g.
const SEGMENTS: [u8; 10] = [
    0b1111110, 0b0110000, 0b1101101, 0b1111001, 0b0110011, 0b1011011, 0b1011111, 0b1110000,
    0b1111111, 0b1111011,
];

/// Synthetic digit images: seven-segment glyphs with random placement,
/// stroke width, stroke intensity and additive pixel noise, on a
/// `side × side` canvas. Stand-in for MNIST when no IDX files are present.
pub fn generate_glyphs(n: usize, side: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if side < 16 {
        return Err(Error::invalid("glyph canvas must be at least 16 pixels"));
    }
    if n == 0 || !(noise >= 0.0) {
        return Err(Error::invalid("glyphs need n > 0 and noise >= 0"));
    }
    let mut rng = seed::rng(seed);
    let samples = (0..n)
        .map(|i| {
            let label = i % 10;
            let mut img = vec![0.0; side * side];
            let gw = side * 3 / 7;
            let gh = side * 5 / 7;
            let jitter = (side / 10) as i64;
            let x0 = ((side - gw) / 2) as i64 + rng.random_range(-jitter..=jitter);
            let y0 = ((side - gh) / 2) as i64 + rng.random_range(-jitter..=jitter);
            let t = rng.random_range(2..=3) as i64;
            let ink = rng.random_range(0.6..1.0);
            let (gw, gh) = (gw as i64, gh as i64);
            let mid = y0 + gh / 2 - t / 2;
            // (x, y, w, h) per segment
            let rects = [
                (x0, y0, gw, t),
                (x0 + gw - t, y0, t, gh / 2),
                (x0 + gw - t, y0 + gh / 2, t, gh - gh / 2),
                (x0, y0 + gh - t, gw, t),
                (x0, y0 + gh / 2, t, gh - gh / 2),
                (x0, y0, t, gh / 2),
                (x0, mid, gw, t),
            ];
            for (bit, &(x, y, w, h)) in rects.iter().enumerate() {
                if SEGMENTS[label] & (1 << (6 - bit)) == 0 {
                    continue;
                }
                for yy in y.max(0)..(y + h).min(side as i64) {
                    for xx in x.max(0)..(x + w).min(side as i64) {
                        img[yy as usize * side + xx as usize] = ink;
                    }
                }
            }
            for v in &mut img {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (*v + noise * z).clamp(0.0, 1.0);
            }
            Sample {
                input: Tensor::from_parts_unchecked(vec![side, side], img),
                label,
            }
        })
        .collect();
    Dataset::new(
        samples,
        Split::Train,
        10,
        DataSource::Glyphs { side, noise },
    )
}

/// Draws `n` more samples from a dataset's generating process.
pub fn regenerate(source: &DataSource, n: usize, seed: u64) -> Result<Dataset> {
    match *source {
        DataSource::TwoMoons { noise } => generate_two_moons(n, noise, seed),
        DataSource::Blobs { classes, spread } => generate_blobs(n, classes, spread, seed),
        DataSource::Glyphs { side, noise } => generate_glyphs(n, side, noise, seed),
        DataSource::External => Err(Error::invalid(
            "dataset has no generator; a held-out pool is required",
        )),
    }
}

/// Stratified seeded split into `(train, test)`.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut idx in by_class {
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    let pick = |idx: &[usize], split| Dataset {
        samples: idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
        split,
        ..dataset.clone_empty()
    };
    let (tr, te) = (pick(&train, Split::Train), pick(&test, Split::Test));
    if tr.is_empty() || te.is_empty() {
        return Err(Error::invalid("split produced an empty side"));
    }
    Ok((tr, te))
}

/// Parsed IDX container with raw unsigned-byte payload.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_UBYTE: u8 = 0x08;

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::IdxTruncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::IdxBadMagic([bytes[0], bytes[1]]));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::IdxUnsupportedType(bytes[2]));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::IdxTruncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload = dims.iter().product::<usize>();
    if bytes.len() - header < payload {
        return Err(Error::IdxTruncated {
            expected: header + payload,
            found: bytes.len(),
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..header + payload].to_vec(),
    })
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if dims.iter().product::<usize>() != data.len() || dims.len() > 255 {
        return Err(Error::invalid("IDX dims do not match payload"));
    }
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Loads an IDX file as a tensor with bytes scaled to `[0, 1]`.
pub fn load_idx(path: &Path) -> Result<Tensor> {
    let arr = read_idx(path)?;
    let data = arr.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor::from_parts_unchecked(arr.dims, data))
}

pub fn write_idx(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    let bytes = encode_idx(dims, data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn images_with_labels(
    images: &IdxArray,
    labels: &IdxArray,
    range: std::ops::Range<usize>,
) -> Result<Vec<Sample>> {
    let [count, h, w] = images.dims[..] else {
        return Err(Error::invalid("image file must be 3-dimensional"));
    };
    if labels.dims.len() != 1 || labels.dims[0] != count || range.end > count {
        return Err(Error::invalid("label file does not match image file"));
    }
    Ok(range
        .map(|i| Sample {
            input: Tensor::from_parts_unchecked(
                vec![h, w],
                images.data[i * h * w..(i + 1) * h * w]
                    .iter()
                    .map(|&b| f64::from(b) / 255.0)
                    .collect(),
            ),
            label: labels.data[i] as usize,
        })
        .collect())
}

/// MNIST-format subsets: `(train, test, held-out pool)`, the pool being the
/// training images beyond the first `n_train`.
pub fn load_mnist(
    dir: &Path,
    n_train: usize,
    n_test: usize,
) -> Result<(Dataset, Dataset, Option<Dataset>)> {
    let ti = read_idx(&dir.join("train-images-idx3-ubyte"))?;
    let tl = read_idx(&dir.join("train-labels-idx1-ubyte"))?;
    let vi = read_idx(&dir.join("t10k-images-idx3-ubyte"))?;
    let vl = read_idx(&dir.join("t10k-labels-idx1-ubyte"))?;
    let total = ti.dims.first().copied().unwrap_or(0);
    let n_train = n_train.min(total);
    let test_total = vi.dims.first().copied().unwrap_or(0);
    let train = images_with_labels(&ti, &tl, 0..n_train)?;
    let test = images_with_labels(&vi, &vl, 0..n_test.min(test_total))?;
    let pool = (total > n_train)
        .then(|| images_with_labels(&ti, &tl, n_train..total))
        .transpose()?
        .map(|s| Dataset::new(s, Split::Train, 10, DataSource::External))
        .transpose()?;
    Ok((
        Dataset::new(train, Split::Train, 10, DataSource::External)?,
        Dataset::new(test, Split::Test, 10, DataSource::External)?,
        pool,
    ))
}
