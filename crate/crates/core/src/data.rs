//! Procedurally rendered glyph images with captions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_index, derive_seed, gaussian, rng};
use crate::tensor::Tensor;
use crate::text::{Templates, COLORS, SHAPES};

pub const CHANNELS: usize = 3;
pub const MAX_CLASSES: usize = SHAPES.len() * COLORS.len();

const PALETTE: [[f32; 3]; 5] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.15],
    [0.65, 0.20, 0.85],
];

/// Shape and color index of class `k`. Every class below 25 is a distinct pair.
pub fn class_parts(k: usize) -> (usize, usize) {
    let shape = k % SHAPES.len();
    let color = (k + k / SHAPES.len()) % COLORS.len();
    (shape, color)
}

pub fn class_name(k: usize) -> String {
    let (s, c) = class_parts(k);
    format!("{} {}", COLORS[c], SHAPES[s])
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphDataset {
    /// `N × 3 × H × W`, values in `[0, 1]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub captions: Vec<String>,
    pub seed: u64,
}

fn inside(shape: usize, dx: f32, dy: f32, s: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= s * s,
        1 => dx.abs().max(dy.abs()) <= 0.8 * s,
        2 => dy <= 0.8 * s && dy >= -s && dx.abs() <= 0.5 * (dy + s) * 0.65,
        3 => (dx.abs() <= 0.3 * s && dy.abs() <= s) || (dy.abs() <= 0.3 * s && dx.abs() <= s),
        _ => dx.abs() + dy.abs() <= s,
    }
}

fn render(k: usize, h: usize, w: usize, seed: u64, out: &mut [f32]) {
    let mut r = rng(seed);
    let (shape, color) = class_parts(k);
    let m = h.min(w) as f32;
    let size = m * r.random_range(0.24..0.34);
    let cy = r.random_range(size..h as f32 - size);
    let cx = r.random_range(size..w as f32 - size);
    let base: f32 = r.random_range(0.35..0.55);
    let (fy, fx, ph): (f32, f32, f32) = (
        r.random_range(0.1..0.5),
        r.random_range(0.1..0.5),
        r.random_range(0.0..6.28),
    );
    let tint: [f32; 3] = std::array::from_fn(|_| r.random_range(-0.06..0.06));
    let rgb: [f32; 3] = std::array::from_fn(|c| PALETTE[color][c] + r.random_range(-0.05..0.05));
    for y in 0..h {
        for x in 0..w {
            let dy = y as f32 + 0.5 - cy;
            let dx = x as f32 + 0.5 - cx;
            let on = inside(shape, dx, dy, size);
            let tex = 0.05 * ((fy * y as f32 + fx * x as f32 + ph).sin());
            for c in 0..CHANNELS {
                let v = if on { rgb[c] } else { base + tint[c] + tex };
                let noise: f32 = gaussian(&mut r);
                out[(c * h + y) * w + x] = (v + 0.03 * noise).clamp(0.0, 1.0);
            }
        }
    }
}

/// Builds the dataset for `(seed, n, k, h, w)`; labels cycle so classes are
/// balanced within one sample.
pub fn generate_dataset(seed: u64, n: usize, k: usize, h: usize, w: usize) -> Result<GlyphDataset> {
    if k < 2 || k > MAX_CLASSES {
        return Err(Error::invalid(format!("class count {k} outside 2..={MAX_CLASSES}")));
    }
    if h < 16 || w < 16 {
        return Err(Error::invalid(format!("image size {h}x{w} below 16x16")));
    }
    let templates = Templates::full();
    let img_seed = derive_seed(seed, "glyph-images");
    let cap_seed = derive_seed(seed, "glyph-captions");
    let per = CHANNELS * h * w;
    let mut data = vec![0f32; n * per];
    let mut labels = Vec::with_capacity(n);
    let mut captions = Vec::with_capacity(n);
    for (i, chunk) in data.chunks_mut(per).enumerate() {
        let label = i % k;
        render(label, h, w, derive_index(img_seed, i as u64), chunk);
        let t = rng(derive_index(cap_seed, i as u64)).random_range(0..templates.len());
        captions.push(Templates::expand(&templates.as_slice()[t], &class_name(label)));
        labels.push(label);
    }
    Ok(GlyphDataset {
        images: Tensor::new(vec![n, CHANNELS, h, w], data)?,
        labels,
        class_names: (0..k).map(class_name).collect(),
        captions,
        seed,
    })
}

impl GlyphDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(C, H, W)`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images flattened to `N × (C·H·W)` rows.
    pub fn flat_images(&self) -> Tensor<f32> {
        self.images.clone().as_matrix()
    }

    pub fn subset(&self, idx: &[usize]) -> GlyphDataset {
        GlyphDataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            captions: idx.iter().map(|&i| self.captions[i].clone()).collect(),
            seed: self.seed,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
