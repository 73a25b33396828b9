//! Procedural patch-segmentation task: colored rectangles on a background,
//! labeled per patch by majority class.

mod metrics;
mod probe;

pub use metrics::{seg_metrics, SegMetrics};
pub use probe::{linear_probe_train, LinearHead, ProbeConfig};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{write_tensor, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    pub classes: usize,
    /// Inclusive range of rectangles per image.
    pub shapes: [usize; 2],
    /// RGB color of each class; class 0 is the background.
    pub palette: Vec<[f64; 3]>,
    pub patch: usize,
    pub noise_std: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            image_size: [64, 64],
            classes: 5,
            shapes: [1, 4],
            palette: vec![
                [0.45, 0.45, 0.45],
                [0.85, 0.25, 0.20],
                [0.20, 0.70, 0.30],
                [0.25, 0.30, 0.85],
                [0.80, 0.75, 0.20],
            ],
            patch: 8,
            noise_std: 0.02,
        }
    }
}

impl TaskSpec {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size[0] / self.patch, self.image_size[1] / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [h, w] = self.image_size;
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.palette.len() != self.classes {
            return bad(format!("palette has {} colors for {} classes", self.palette.len(), self.classes));
        }
        for i in 0..self.classes {
            for j in 0..i {
                if self.palette[i] == self.palette[j] {
                    return bad(format!("classes {j} and {i} share a color"));
                }
            }
        }
        if self.patch == 0 || h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return bad(format!("image {h}×{w} not divisible by patch {}", self.patch));
        }
        if self.shapes[0] > self.shapes[1] {
            return bad(format!("empty shape range {:?}", self.shapes));
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise std must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `[H×W×3]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Per-pixel class before noise, row-major.
    pub pixels: Vec<usize>,
    /// Per-patch class in raster order over the token grid.
    pub patch_labels: Vec<usize>,
}

pub fn generate_sample(rng: &mut Rng, spec: &TaskSpec) -> LabeledSample {
    let [h, w] = spec.image_size;
    let mut pixels = vec![0usize; h * w];
    let count = rng.range_inclusive(spec.shapes[0], spec.shapes[1]);
    for _ in 0..count {
        let class = 1 + rng.below(spec.classes - 1);
        let rh = rng.range_inclusive((h / 8).max(1), (h / 2).max(1));
        let rw = rng.range_inclusive((w / 8).max(1), (w / 2).max(1));
        let y0 = rng.below(h - rh + 1);
        let x0 = rng.below(w - rw + 1);
        for y in y0..y0 + rh {
            pixels[y * w + x0..y * w + x0 + rw].fill(class);
        }
    }
    let mut image = Vec::with_capacity(h * w * 3);
    for &c in &pixels {
        for ch in 0..3 {
            let v = spec.palette[c][ch] + spec.noise_std * rng.normal();
            image.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let patch_labels = majority_labels(&pixels, spec);
    LabeledSample {
        image: Tensor::new(vec![h, w, 3], image).expect("sized above"),
        pixels,
        patch_labels,
    }
}

fn majority_labels(pixels: &[usize], spec: &TaskSpec) -> Vec<usize> {
    let [_, w] = spec.image_size;
    let (_, gw) = spec.grid();
    let mut counts = vec![0u32; spec.tokens() * spec.classes];
    for (i, &c) in pixels.iter().enumerate() {
        let (y, x) = (i / w, i % w);
        let token = (y / spec.patch) * gw + x / spec.patch;
        counts[token * spec.classes + c] += 1;
    }
    counts
        .chunks(spec.classes)
        .map(|row| {
            // first index of the maximum: ties go to the lower class
            let max = *row.iter().max().expect("classes >= 2");
            row.iter().position(|&c| c == max).expect("max present")
        })
        .collect()
}

/// A batch of samples stacked for the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[B×H×W×3]`
    pub images: Tensor<f32>,
    /// `B·N` patch labels, sample-major.
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Sample `i` is drawn from `seed`'s stream `stream` split by `i`, so any
    /// subset can be regenerated independently.
    pub fn generate(spec: &TaskSpec, seed: u64, stream: u64, count: usize) -> Result<Self> {
        spec.validate()?;
        if count == 0 {
            return Err(Error::Config("dataset needs at least one sample".into()));
        }
        let root = Rng::with_stream(seed, stream);
        let [h, w] = spec.image_size;
        let mut images = Vec::with_capacity(count * h * w * 3);
        let mut labels = Vec::with_capacity(count * spec.tokens());
        for i in 0..count {
            let s = generate_sample(&mut root.split(i as u64), spec);
            images.extend_from_slice(s.image.data());
            labels.extend_from_slice(&s.patch_labels);
        }
        Ok(Self {
            images: Tensor::new(vec![count, h, w, 3], images)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            out.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![indices.len(), s[1], s[2], s[3]], out)
    }
}

/// Writes `sample_{index}.jvt` and `sample_{index}_labels.csv` (one row of
/// the token grid per line) into `dir`.
pub fn dump_sample(sample: &LabeledSample, spec: &TaskSpec, dir: &Path, index: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tensor(&dir.join(format!("sample_{index}.jvt")), &sample.image)?;
    let (_, gw) = spec.grid();
    let csv: String = sample
        .patch_labels
        .chunks(gw)
        .map(|row| row.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    fs::write(dir.join(format!("sample_{index}_labels.csv")), csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    #[test]
    fn zero_shapes_is_all_background() {
        let spec = TaskSpec { shapes: [0, 0], ..Default::default() };
        let s = generate_sample(&mut Rng::new(1), &spec);
        assert!(s.patch_labels.iter().all(|&l| l == 0));
        assert_eq!(s.patch_labels.len(), 64);
    }

    #[test]
    fn same_state_same_sample() {
        let spec = TaskSpec::default();
        let a = generate_sample(&mut Rng::at(4, 2, 0), &spec);
        let b = generate_sample(&mut Rng::at(4, 2, 0), &spec);
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn labels_match_pixel_count_oracle() {
        let spec = TaskSpec::default();
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let s = generate_sample(&mut rng, &spec);
            assert_eq!(s.patch_labels, oracle::patch_majority(&s.pixels, (64, 64), 8, 5));
        }
    }

    #[test]
    fn ties_go_to_lower_class() {
        let spec = TaskSpec { image_size: [2, 2], patch: 2, ..Default::default() };
        assert_eq!(majority_labels(&[3, 1, 1, 3], &spec), [1]);
        assert_eq!(majority_labels(&[0, 4, 4, 0], &spec), [0]);
    }

    #[test]
    fn invalid_specs() {
        let base = TaskSpec::default();
        let mut dup = base.clone();
        dup.palette[2] = dup.palette[1];
        for s in [
            TaskSpec { classes: 1, palette: vec![[0.0; 3]], ..base.clone() },
            dup,
            TaskSpec { patch: 7, ..base.clone() },
            TaskSpec { shapes: [3, 1], ..base.clone() },
        ] {
            assert!(matches!(s.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn dataset_samples_are_independent_of_count() {
        let spec = TaskSpec::default();
        let a = Dataset::generate(&spec, 3, 1, 4).unwrap();
        let b = Dataset::generate(&spec, 3, 1, 2).unwrap();
        assert_eq!(a.select(&[0, 1]).unwrap(), b.images);
        assert_eq!(a.labels[..128], b.labels[..]);
        assert_eq!(a.select(&[3]).unwrap().shape(), [1, 64, 64, 3]);
    }

    #[test]
    fn dump_writes_image_and_labels() {
        let spec = TaskSpec::default();
        let s = generate_sample(&mut Rng::new(2), &spec);
        let dir = tempfile::tempdir().unwrap();
        dump_sample(&s, &spec, dir.path(), 0).unwrap();
        let img: Tensor<f32> = crate::tensor::read_tensor(&dir.path().join("sample_0.jvt")).unwrap();
        assert_eq!(img, s.image);
        let csv = std::fs::read_to_string(dir.path().join("sample_0_labels.csv")).unwrap();
        assert_eq!(csv.lines().count(), 8);
    }
}
