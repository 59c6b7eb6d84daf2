//! Procedural shapes dataset.
//!
//! Grayscale `side × side` images with a bright shape on a dark background,
//! pixels in `[-1, 1]`. Each image is rendered from its own derived stream,
//! so any image can be regenerated from `(spec, seed, split, index)` alone.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Circle,
    Square,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Cross];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Cross => "cross",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Shapes,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(DatasetKind::Shapes),
            other => Err(Error::invalid(format!("unknown dataset kind `{other}` (shapes)"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("shapes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub image_side: usize,
    pub samples_per_class: usize,
    /// Maximum center offset from the image center, in pixels.
    pub jitter_position: f64,
    /// Half-extent range of the shape, in pixels.
    pub size_min: f64,
    pub size_max: f64,
    /// Sub-samples per pixel along each axis.
    pub supersample: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Shapes,
            image_side: 16,
            samples_per_class: 1000,
            jitter_position: 2.0,
            size_min: 3.5,
            size_max: 6.0,
            supersample: 4,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("dataset.{field}"), msg));
        if self.image_side < 4 {
            return bad("image_side", format!("must be at least 4, got {}", self.image_side));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class", "must be positive".into());
        }
        if !(self.jitter_position >= 0.0) || !self.jitter_position.is_finite() {
            return bad("jitter_position", format!("must be finite and >= 0, got {}", self.jitter_position));
        }
        if !(self.size_min > 0.0) || !(self.size_max >= self.size_min) || !self.size_max.is_finite() {
            return bad(
                "size_min",
                format!("need 0 < size_min <= size_max, got {}..{}", self.size_min, self.size_max),
            );
        }
        if self.supersample == 0 {
            return bad("supersample", "must be positive".into());
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "dataset-train",
            Split::HeldOut => "dataset-heldout",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub side: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn coverage(class: ShapeClass, u: f64, v: f64, half: f64) -> bool {
    match class {
        ShapeClass::Circle => u * u + v * v <= half * half,
        ShapeClass::Square => u.abs() <= half * 0.8 && v.abs() <= half * 0.8,
        ShapeClass::Cross => {
            let arm = (half * 0.3).max(0.75);
            (u.abs() <= arm && v.abs() <= half) || (v.abs() <= arm && u.abs() <= half)
        }
    }
}

/// Renders one image; the stream decides center jitter and size.
pub fn render_shape(spec: &DatasetSpec, class: ShapeClass, rng: &mut RngStream) -> Vec<f64> {
    let side = spec.image_side;
    let mid = side as f64 / 2.0;
    let cx = mid + (2.0 * rng.uniform() - 1.0) * spec.jitter_position;
    let cy = mid + (2.0 * rng.uniform() - 1.0) * spec.jitter_position;
    let half = spec.size_min + rng.uniform() * (spec.size_max - spec.size_min);
    let ss = spec.supersample;
    let inv = 1.0 / (ss * ss) as f64;
    let mut img = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            let mut hits = 0usize;
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = px as f64 + (sx as f64 + 0.5) / ss as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / ss as f64;
                    if coverage(class, x - cx, y - cy, half) {
                        hits += 1;
                    }
                }
            }
            img.push(2.0 * hits as f64 * inv - 1.0);
        }
    }
    img
}

/// Classes interleave (`index % 3`), so any prefix is near-balanced.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64, split: Split) -> Result<LabeledImages> {
    spec.validate()?;
    let root = RngStream::new(seed, 0).derive(split.tag(), 0);
    let n = spec.samples_per_class * ShapeClass::ALL.len();
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = ShapeClass::ALL[i % ShapeClass::ALL.len()];
        let mut rng = root.derive("image", i as u64);
        images.push(render_shape(spec, class, &mut rng));
        labels.push(class.id());
    }
    Ok(LabeledImages {
        side: spec.image_side,
        images,
        labels,
    })
}
