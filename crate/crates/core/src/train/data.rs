//! Image classification datasets: procedurally drawn shapes and IDX files.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    SyntheticShapes,
    IdxFiles,
}

/// Images stored contiguously as `(N, C, H, W)` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<f64>,
    image_shape: [usize; 3],
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
    pub source: Source,
}

impl Dataset {
    pub fn new(
        pixels: Vec<f64>,
        image_shape: [usize; 3],
        labels: Vec<usize>,
        classes: usize,
        source: Source,
    ) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || pixels.len() != per * labels.len() {
            let [c, h, w] = image_shape;
            return Err(Error::DataLength {
                shape: vec![labels.len(), c, h, w],
                len: pixels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            pixels,
            image_shape,
            labels,
            classes,
            split: Split::Train,
            source,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    fn per_image(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.per_image();
        &self.pixels[i * per..][..per]
    }

    /// Stacks the selected samples into an `(N, C, H, W)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.per_image());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape;
        Ok((Tensor::from_vec(&[indices.len(), c, h, w], data)?, labels))
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Dataset::new(
            self.pixels[..n * self.per_image()].to_vec(),
            self.image_shape,
            self.labels[..n].to_vec(),
            self.classes,
            self.source,
        )
        .map(|d| d.with_split(self.split))
    }
}

/// Shape families drawn by [`synthetic_shapes`], in label order.
pub const SHAPE_NAMES: [&str; 8] = [
    "bar", "cross", "disk", "ring", "corner", "triangle", "square", "dots",
];

const STROKE: f64 = 0.13;

fn inside(class: usize, a: f64, b: f64, r: f64) -> bool {
    let stroke = |d: f64| d.abs() <= STROKE;
    match class {
        0 => a.abs() <= r && stroke(b),
        1 => (a.abs() <= r && stroke(b)) || (b.abs() <= r && stroke(a)),
        2 => a * a + b * b <= (0.6 * r).powi(2),
        3 => stroke((a * a + b * b).sqrt() - 0.7 * r),
        4 => {
            let h = 0.6 * r;
            (stroke(b + h) && a.abs() <= h + STROKE) || (stroke(a + h) && b.abs() <= h + STROKE)
        }
        5 => {
            let h = 0.8 * r;
            b <= 0.5 * h && a.abs() <= (b + h) * 0.6
        }
        6 => {
            let h = 0.6 * r;
            a.abs().max(b.abs()) <= h + STROKE && a.abs().max(b.abs()) >= h - STROKE
        }
        _ => {
            let h = 0.5 * r;
            [(-h, -h), (h, h), (-h, h), (h, -h)]
                .iter()
                .any(|(u, v)| (a - u).powi(2) + (b - v).powi(2) <= (0.22 * r).powi(2))
        }
    }
}

/// `n_per_class` grayscale images per class, labels interleaved. Each image
/// is one shape at a random rotation, scale and offset on a dark background,
/// with pixel noise, drawn with 3×3 supersampling and mapped to `[-1, 1]`.
pub fn synthetic_shapes(
    n_per_class: usize,
    classes: usize,
    size: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    if !(2..=SHAPE_NAMES.len()).contains(&classes) {
        return Err(Error::InvalidArgument(format!(
            "classes must be in 2..={}, got {classes}",
            SHAPE_NAMES.len()
        )));
    }
    if size < 4 {
        return Err(Error::InvalidArgument(format!("image size must be >= 4, got {size}")));
    }
    let mut pixels = Vec::with_capacity(n_per_class * classes * size * size);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    const SS: usize = 3;
    for _ in 0..n_per_class {
        for class in 0..classes {
            let theta = rng.uniform(0.0, 2.0 * PI);
            let r = rng.uniform(0.55, 0.85);
            let (cx, cy) = (rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15));
            let (sin, cos) = theta.sin_cos();
            for i in 0..size {
                for j in 0..size {
                    let mut hits = 0;
                    for si in 0..SS {
                        for sj in 0..SS {
                            let y = ((i * SS + si) as f64 + 0.5) / (size * SS) as f64 * 2.0 - 1.0 - cy;
                            let x = ((j * SS + sj) as f64 + 0.5) / (size * SS) as f64 * 2.0 - 1.0 - cx;
                            let (a, b) = (cos * x + sin * y, -sin * x + cos * y);
                            hits += usize::from(inside(class, a, b, r));
                        }
                    }
                    let v = -1.0 + 2.0 * hits as f64 / (SS * SS) as f64 + 0.2 * rng.normal();
                    pixels.push(v.clamp(-1.0, 1.0));
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(pixels, [1, size, size], labels, classes, Source::SyntheticShapes)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("{what}: truncated header")))
}

/// Parses an IDX image file (`0x00000803`) and label file (`0x00000801`).
/// Pixels map linearly from `0..=255` to `[-1, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != 0x0803 {
        return Err(Error::Idx(format!("images: bad magic {magic:#010x}")));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let h = be_u32(images, 8, "images")? as usize;
    let w = be_u32(images, 12, "images")? as usize;
    let body = &images[16..];
    if body.len() < n * h * w {
        return Err(Error::Idx(format!(
            "images: truncated, {} of {} pixel bytes",
            body.len(),
            n * h * w
        )));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != 0x0801 {
        return Err(Error::Idx(format!("labels: bad magic {magic:#010x}")));
    }
    let nl = be_u32(labels, 4, "labels")? as usize;
    if nl != n {
        return Err(Error::Idx(format!("{n} images but {nl} labels")));
    }
    let lbody = &labels[8..];
    if lbody.len() < n {
        return Err(Error::Idx(format!("labels: truncated, {} of {n} bytes", lbody.len())));
    }
    let pixels = body[..n * h * w]
        .iter()
        .map(|&p| p as f64 / 255.0 * 2.0 - 1.0)
        .collect();
    let labels: Vec<usize> = lbody[..n].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(pixels, [1, h, w], labels, classes, Source::IdxFiles)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    parse_idx(&std::fs::read(images)?, &std::fs::read(labels)?)
}

/// Serializes a dataset back to IDX bytes (images, labels); inverse of [`parse_idx`] up to quantization.
pub fn to_idx(dataset: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let [_, h, w] = dataset.image_shape;
    let n = dataset.len() as u32;
    let mut img = Vec::new();
    for v in [0x0803u32, n, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        dataset
            .pixels
            .iter()
            .map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::new();
    for v in [0x0801u32, n] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(dataset.labels.iter().map(|&l| l as u8));
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let a = synthetic_shapes(3, 5, 12, &mut Rng::new(1)).unwrap();
        let b = synthetic_shapes(3, 5, 12, &mut Rng::new(1)).unwrap();
        let c = synthetic_shapes(3, 5, 12, &mut Rng::new(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_labels() {
        let d = synthetic_shapes(7, 4, 8, &mut Rng::new(0)).unwrap();
        assert_eq!(d.len(), 28);
        for k in 0..4 {
            assert_eq!(d.labels().iter().filter(|&&y| y == k).count(), 7);
        }
        assert!(d.pixels().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn every_class_draws_something() {
        let d = synthetic_shapes(4, 8, 16, &mut Rng::new(3)).unwrap();
        for i in 0..d.len() {
            let lit = d.image(i).iter().filter(|&&v| v > 0.0).count();
            assert!(lit >= 6 && lit < 200, "class {} lit {lit}", d.labels()[i]);
        }
    }

    #[test]
    fn rejects_bad_class_count() {
        assert!(synthetic_shapes(1, 1, 8, &mut Rng::new(0)).is_err());
        assert!(synthetic_shapes(1, 9, 8, &mut Rng::new(0)).is_err());
    }

    fn idx_bytes(n: u32, nl: u32, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [0x0803u32, n, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        for v in [0x0801u32, nl] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn idx_endpoints_and_shape() {
        let (img, lab) = idx_bytes(2, 2, &[0, 255, 0, 255, 255, 0, 255, 0], &[1, 0]);
        let d = parse_idx(&img, &lab).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.image_shape(), [1, 2, 2]);
        assert_eq!(d.image(0), &[-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(d.classes(), 2);
    }

    #[test]
    fn idx_errors() {
        let (img, lab) = idx_bytes(2, 3, &[0; 8], &[0, 0, 0]);
        assert!(matches!(parse_idx(&img, &lab), Err(Error::Idx(_))));
        let (img, lab) = idx_bytes(2, 2, &[0; 7], &[0, 0]);
        assert!(matches!(parse_idx(&img, &lab), Err(Error::Idx(_))));
        let (mut img, lab) = idx_bytes(2, 2, &[0; 8], &[0, 0]);
        img[3] = 0x01;
        assert!(matches!(parse_idx(&img, &lab), Err(Error::Idx(_))));
        assert!(parse_idx(&img[..6], &lab).is_err());
    }

    #[test]
    fn idx_round_trip() {
        let d = synthetic_shapes(2, 3, 6, &mut Rng::new(4)).unwrap();
        let (img, lab) = to_idx(&d);
        let back = parse_idx(&img, &lab).unwrap();
        assert_eq!(back.labels(), d.labels());
        for (a, b) in back.pixels().iter().zip(d.pixels()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }
}
