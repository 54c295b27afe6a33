//! Synthetic localized-pattern classification data.
//!
//! Every image holds one class pattern at a random position and a random
//! overall amplitude, several weaker distractor patterns drawn from the
//! other classes, and i.i.d. Gaussian noise. Distractors can outnumber the
//! true pattern, so summing detector responses over space is unreliable and
//! the class is decided by the most prominent location.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::{FeatureMap, Real, Shape};

const TEMPLATES: [[&str; 5]; 4] = [
    ["..#..", "..#..", "#####", "..#..", "..#.."],
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    ["#####", "#...#", "#...#", "#...#", "#####"],
    ["#####", ".....", "#####", ".....", "#####"],
];

pub const MAX_CLASSES: usize = TEMPLATES.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub classes: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Side of the (nearest-neighbor rescaled) class pattern.
    pub pattern_size: usize,
    /// Standard deviation of the background noise.
    pub noise: f64,
    /// Distractor patterns per image.
    pub clutter: usize,
    /// Range of the true pattern's amplitude.
    pub amplitude: (f64, f64),
    /// Distractor amplitude as a fraction of the true amplitude.
    pub distractor_ratio: (f64, f64),
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            classes: 4,
            image_size: 16,
            pattern_size: 5,
            noise: 0.3,
            clutter: 3,
            amplitude: (0.5, 2.0),
            distractor_ratio: (0.4, 0.7),
            seed: 0,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return bad(format!("classes must be in 2..={MAX_CLASSES}, got {}", self.classes));
        }
        if self.pattern_size == 0 || self.pattern_size > self.image_size {
            return bad(format!(
                "pattern size {} does not fit image size {}",
                self.pattern_size, self.image_size
            ));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        let (a, b) = self.amplitude;
        let (r, s) = self.distractor_ratio;
        if !(0.0 < a && a <= b && 0.0 <= r && r <= s) {
            return bad("amplitude and ratio ranges must be ordered and positive".into());
        }
        Ok(())
    }

    /// Binary class template at `pattern_size`, row-major.
    pub fn template(&self, class: usize) -> Vec<f64> {
        let p = self.pattern_size;
        let t = &TEMPLATES[class];
        let mut out = Vec::with_capacity(p * p);
        for y in 0..p {
            for x in 0..p {
                let row = t[y * 5 / p].as_bytes();
                out.push(if row[x * 5 / p] == b'#' { 1.0 } else { 0.0 });
            }
        }
        out
    }
}

/// Images `(count, 1, S, S)` with class labels.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: FeatureMap<f32>,
    pub labels: Vec<usize>,
    pub params: GeneratorParams,
}

fn stamp(img: &mut [f64], size: usize, template: &[f64], p: usize, amp: f64, rng: &mut ChaCha8Rng) {
    let y0 = rng.random_range(0..=size - p);
    let x0 = rng.random_range(0..=size - p);
    for y in 0..p {
        for x in 0..p {
            img[(y0 + y) * size + x0 + x] += amp * template[y * p + x];
        }
    }
}

impl SyntheticDataset {
    /// Draws `count` images from the given substream of `params.seed`.
    pub fn generate(params: &GeneratorParams, count: usize, stream: Stream) -> Result<Self> {
        params.validate()?;
        if count == 0 {
            return Err(Error::InvalidParams("dataset must hold at least one image".into()));
        }
        let mut rng = substream(params.seed, stream);
        let size = params.image_size;
        let p = params.pattern_size;
        let templates: Vec<Vec<f64>> = (0..params.classes).map(|c| params.template(c)).collect();
        let mut data = Vec::with_capacity(count * size * size);
        let mut labels = Vec::with_capacity(count);
        let mut img = vec![0.0f64; size * size];
        for _ in 0..count {
            let label = rng.random_range(0..params.classes);
            for v in img.iter_mut() {
                *v = params.noise * rng.sample::<f64, _>(StandardNormal);
            }
            let amp = rng.random_range(params.amplitude.0..=params.amplitude.1);
            stamp(&mut img, size, &templates[label], p, amp, &mut rng);
            for _ in 0..params.clutter {
                let other = (label + rng.random_range(1..params.classes)) % params.classes;
                let ratio = rng.random_range(params.distractor_ratio.0..=params.distractor_ratio.1);
                stamp(&mut img, size, &templates[other], p, amp * ratio, &mut rng);
            }
            data.extend(img.iter().map(|v| *v as f32));
            labels.push(label);
        }
        let images = FeatureMap::new(Shape::new(count, 1, size, size)?, data)?;
        Ok(SyntheticDataset {
            images,
            labels,
            params: params.clone(),
        })
    }

    /// Wraps existing images and labels.
    pub fn from_parts(images: FeatureMap<f32>, labels: Vec<usize>, params: GeneratorParams) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::LengthMismatch {
                expected: images.shape().n,
                found: labels.len(),
            });
        }
        Ok(SyntheticDataset { images, labels, params })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_chw(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s.c, s.h, s.w)
    }

    pub fn batch<T: Real>(&self, indices: &[usize]) -> (FeatureMap<T>, Vec<usize>) {
        let images = self.images.select(indices).cast();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (images, labels)
    }

    /// Same samples in a different order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let (images, labels) = self.batch::<f32>(order);
        SyntheticDataset {
            images,
            labels,
            params: self.params.clone(),
        }
    }
}
