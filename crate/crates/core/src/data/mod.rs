//! Procedural inpainting data: one coloured shape on a soft gradient, plus the
//! morphological benchmark-mask pipeline.

pub mod bench;
pub mod morphology;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::kernels::Exec;
use crate::{Error, Result};

pub use bench::{build_benchset, BenchEntry, BenchManifest};
pub use morphology::{dilate, erode, make_bench_mask};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const NUM_SHAPES: usize = 3;
pub const NUM_COLORS: usize = 6;
pub const NUM_LABELS: usize = NUM_SHAPES * NUM_COLORS;

/// Object colours in `[-1, 1]` RGB. Backgrounds stay far from all of them.
pub const PALETTE: [[f32; 3]; NUM_COLORS] = [
    [0.9, -0.8, -0.8],
    [-0.8, 0.9, -0.8],
    [-0.8, -0.8, 0.9],
    [0.9, 0.9, -0.8],
    [0.9, -0.8, 0.9],
    [-0.8, 0.9, 0.9],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; NUM_SHAPES] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }
}

pub fn encode_label(shape: ShapeKind, color: usize) -> u32 {
    (shape.index() * NUM_COLORS + color) as u32
}

pub fn decode_label(label: u32) -> Result<(ShapeKind, usize)> {
    let l = label as usize;
    if l >= NUM_LABELS {
        return Err(Error::UnknownLabel { label, num_labels: NUM_LABELS });
    }
    Ok((ShapeKind::ALL[l / NUM_COLORS], l % NUM_COLORS))
}

/// Channel-major float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(channels * height * width, data.len()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        Self::from_vec(c, h, w, t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.channels, self.height, self.width), &Device::Cpu)?)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }
}

/// Row-major binary mask; 1 marks the region to inpaint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "mask buffer size");
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn check_binary(&self) -> Result<()> {
        match self.data.iter().find(|v| **v > 1) {
            Some(v) => Err(Error::NonBinaryMask(*v)),
            None => Ok(()),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| *a == 0 || *b != 0)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    /// `(1, H, W)` float tensor of zeros and ones.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|&b| b as f32).collect();
        Ok(Tensor::from_vec(v, (1, self.height, self.width), &Device::Cpu)?)
    }

    /// Run lengths of alternating values in row-major order, starting with a run of zeros.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = 0u8;
        let mut len = 0u32;
        for &v in &self.data {
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[u32]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for (i, &r) in runs.iter().enumerate() {
            data.extend(std::iter::repeat_n((i % 2) as u8, r as usize));
        }
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintSample {
    pub x0: Image,
    pub hole_mask: Mask,
    /// Pixel support of the rendered object.
    pub object_mask: Mask,
    pub label: u32,
    pub seed: u64,
}

/// Mixes a base seed and an index into a well-spread 64-bit seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn muted_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let gray = rng.gen_range(-0.5f32..0.5);
    [0, 1, 2].map(|_| gray + rng.gen_range(-0.15f32..0.15))
}

/// Pixel support of a shape of "radius" `r` centred at `(cy, cx)`.
pub fn render_shape(kind: ShapeKind, cy: usize, cx: usize, r: usize, size: usize) -> Mask {
    let mut m = Mask::zeros(size, size);
    let (cy, cx, r) = (cy as i64, cx as i64, r as i64);
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let (dy, dx) = (y - cy, x - cx);
            let inside = match kind {
                ShapeKind::Circle => dy * dy + dx * dx <= r * r,
                ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
                // apex at the top, base on row cy + r
                ShapeKind::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
            };
            if inside {
                m.set(y as usize, x as usize, 1);
            }
        }
    }
    m
}

/// Deterministic sample for `seed`.
pub fn synth_sample(seed: u64) -> InpaintSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = IMAGE_SIZE;
    let top = muted_color(&mut rng);
    let bottom = muted_color(&mut rng);
    let noise = Normal::new(0.0f32, 0.03).expect("valid sigma");

    let mut x0 = Image::zeros(CHANNELS, size, size);
    for y in 0..size {
        let a = y as f32 / (size - 1) as f32;
        for x in 0..size {
            for c in 0..CHANNELS {
                let v = (1.0 - a) * top[c] + a * bottom[c] + noise.sample(&mut rng);
                x0.set(c, y, x, v);
            }
        }
    }

    let kind = ShapeKind::ALL[rng.gen_range(0..NUM_SHAPES)];
    let color = rng.gen_range(0..NUM_COLORS);
    let r = rng.gen_range(3..=7usize);
    let cy = rng.gen_range(r..size - r);
    let cx = rng.gen_range(r..size - r);
    let object = render_shape(kind, cy, cx, r, size);
    for y in 0..size {
        for x in 0..size {
            if object.get(y, x) == 1 {
                for c in 0..CHANNELS {
                    x0.set(c, y, x, PALETTE[color][c] + noise.sample(&mut rng));
                }
            }
        }
    }
    let hole_mask = morphology::dilate(&object, morphology::BENCH_KERNEL, 1).expect("binary by construction");
    InpaintSample { x0, hole_mask, object_mask: object, label: encode_label(kind, color), seed }
}

/// `n` samples with seeds derived from `seed`.
pub fn synth_dataset(n: usize, seed: u64, exec: Exec) -> Vec<InpaintSample> {
    let make = |i: usize| synth_sample(derive_seed(seed, i as u64));
    match exec {
        Exec::Sequential => (0..n).map(make).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(make).collect()
        }
    }
}

/// Stacks samples into `(x0, hole_mask, labels)` batch tensors.
pub fn stack_batch(samples: &[&InpaintSample]) -> Result<(Tensor, Tensor, Vec<u32>)> {
    let x0: Vec<Tensor> = samples.iter().map(|s| s.x0.to_tensor()).collect::<Result<_>>()?;
    let masks: Vec<Tensor> = samples.iter().map(|s| s.hole_mask.to_tensor()).collect::<Result<_>>()?;
    let labels = samples.iter().map(|s| s.label).collect();
    Ok((Tensor::stack(&x0, 0)?, Tensor::stack(&masks, 0)?, labels))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of distinct training samples.
    pub train_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_size: 64, seed: 0 }
    }
}
