//! Procedural multi-domain glyph benchmark.
//!
//! Each class is a fixed arrangement of strokes (seven-segment style digits
//! for the first ten classes). Samples are rendered at 16×16 RGB with random
//! foreground and background colors, jittered in position and scale, and then
//! pushed through a domain transform that produces the domain shift.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 16;
pub const CHANNELS: usize = 3;
pub const MAX_CLASSES: usize = 20;

/// Domain-specific image transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Transform {
    Identity,
    /// Rotation of the glyph, degrees in [-45, 45].
    Rotate(f64),
    Invert,
    /// Additive Gaussian noise with standard deviation in [0, 0.5].
    Noise(f64),
    /// Hue rotation about the gray axis, degrees.
    HueShift(f64),
    /// Box blur of the given pixel radius (0..=3).
    Blur(usize),
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidArgument(what));
        match *self {
            Transform::Rotate(t) if !(-45.0..=45.0).contains(&t) => {
                bad(format!("rotation {t} outside [-45, 45] degrees"))
            }
            Transform::Noise(s) if !(0.0..=0.5).contains(&s) => {
                bad(format!("noise sigma {s} outside [0, 0.5]"))
            }
            Transform::HueShift(d) if !d.is_finite() => bad(format!("hue shift {d}")),
            Transform::Blur(r) if r > 3 => bad(format!("blur radius {r} above 3")),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Identity => write!(f, "identity"),
            Transform::Rotate(t) => write!(f, "rotate:{t}"),
            Transform::Invert => write!(f, "invert"),
            Transform::Noise(s) => write!(f, "noise:{s}"),
            Transform::HueShift(d) => write!(f, "hue:{d}"),
            Transform::Blur(r) => write!(f, "blur:{r}"),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.trim().split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s.trim(), None),
        };
        let num = || -> Result<f64> {
            arg.ok_or_else(|| Error::InvalidArgument(format!("transform {kind:?} needs a parameter")))?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad transform parameter in {s:?}")))
        };
        let t = match kind {
            "identity" => Transform::Identity,
            "invert" => Transform::Invert,
            "rotate" => Transform::Rotate(num()?),
            "noise" => Transform::Noise(num()?),
            "hue" => Transform::HueShift(num()?),
            "blur" => {
                let r = num()?;
                if r.fract() != 0.0 || r < 0.0 {
                    return Err(Error::InvalidArgument(format!("blur radius {r}")));
                }
                Transform::Blur(r as usize)
            }
            other => return Err(Error::InvalidArgument(format!("unknown transform {other:?}"))),
        };
        t.validate()?;
        Ok(t)
    }
}

impl TryFrom<String> for Transform {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Transform> for String {
    fn from(t: Transform) -> Self {
        t.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub transform: Transform,
    pub per_class: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn new(transform: Transform, per_class: usize, seed: u64) -> Self {
        DomainSpec {
            transform,
            per_class,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::InvalidArgument("per-class sample count must be >= 1".into()));
        }
        self.transform.validate()
    }
}

/// Images in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "labeled_set",
                format!("images {:?} with {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {y} outside [0, {classes})")));
        }
        Ok(LabeledSet {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Ok(LabeledSet {
            images: self.images.gather_rows(rows)?,
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

type Point = (f64, f64);

// Glyph box corners; x to the right, y down, centered on the origin.
const TL: Point = (-3.0, -5.0);
const TR: Point = (3.0, -5.0);
const ML: Point = (-3.0, 0.0);
const MR: Point = (3.0, 0.0);
const BL: Point = (-3.0, 5.0);
const BR: Point = (3.0, 5.0);

/// Segments a..g of a seven-segment display plus the two diagonals.
const SEGMENTS: [(Point, Point); 9] = [
    (TL, TR),
    (TR, MR),
    (MR, BR),
    (BL, BR),
    (ML, BL),
    (TL, ML),
    (ML, MR),
    (TR, BL),
    (TL, BR),
];

/// Segment masks per class (bit i = segment i).
const GLYPHS: [u16; MAX_CLASSES] = [
    0b000_111111, // 0
    0b000_000110, // 1
    0b001_011011, // 2
    0b001_001111, // 3
    0b001_100110, // 4
    0b001_101101, // 5
    0b001_111101, // 6
    0b000_000111, // 7
    0b001_111111, // 8
    0b001_101111, // 9
    0b010_000000, // /
    0b100_000000, // \
    0b110_000000, // X
    0b010_001001, // Z-like
    0b100_110000, // N-like
    0b000_111000, // L
    0b001_110111, // A
    0b000_110110, // H-like without bar
    0b001_110110, // H
    0b000_001001, // =
];

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

const STROKE_HALF_WIDTH: f64 = 1.0;

/// Stroke coverage in `[0, 1]` for every pixel, one-pixel antialiasing ramp.
fn render_coverage(class: usize, scale: f64, angle_deg: f64, shift: Point) -> Vec<f64> {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let center = IMAGE_SIZE as f64 / 2.0;
    let place = |p: Point| -> Point {
        let (x, y) = (p.0 * scale, p.1 * scale);
        (
            cos * x - sin * y + center + shift.0,
            sin * x + cos * y + center + shift.1,
        )
    };
    let strokes: Vec<(Point, Point)> = SEGMENTS
        .iter()
        .enumerate()
        .filter(|(i, _)| GLYPHS[class] & (1 << i) != 0)
        .map(|(_, &(a, b))| (place(a), place(b)))
        .collect();
    let mut out = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for py in 0..IMAGE_SIZE {
        for px in 0..IMAGE_SIZE {
            let p = (px as f64 + 0.5, py as f64 + 0.5);
            let d = strokes
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            out[py * IMAGE_SIZE + px] = (STROKE_HALF_WIDTH + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    out
}

/// Rotation about the `(1,1,1)` axis, applied to each RGB triple.
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = 1.0 / 3.0;
    let r = 3f64.sqrt().recip() * s;
    let a = c + (1.0 - c) * k;
    let b = (1.0 - c) * k - r;
    let d = (1.0 - c) * k + r;
    [[a, b, d], [d, a, b], [b, d, a]]
}

fn box_blur(img: &mut [f64], radius: usize) {
    if radius == 0 {
        return;
    }
    let n = IMAGE_SIZE as isize;
    let r = radius as isize;
    for ch in 0..CHANNELS {
        let plane = &mut img[ch * IMAGE_SIZE * IMAGE_SIZE..(ch + 1) * IMAGE_SIZE * IMAGE_SIZE];
        let src = plane.to_vec();
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, n - 1);
                        let xx = (x + dx).clamp(0, n - 1);
                        acc += src[(yy * n + xx) as usize];
                    }
                }
                plane[(y * n + x) as usize] = acc / ((2 * r + 1) * (2 * r + 1)) as f64;
            }
        }
    }
}

fn render_sample(class: usize, transform: Transform, rng: &mut SplitMix64) -> Vec<f32> {
    let scale = rng.uniform(0.9, 1.1);
    let shift = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.0, 0.3));
    let fg: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.6, 1.0));
    let angle = match transform {
        Transform::Rotate(t) => t,
        _ => 0.0,
    };
    let cov = render_coverage(class, scale, angle, shift);
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut img = vec![0.0; CHANNELS * plane];
    for ch in 0..CHANNELS {
        for (q, &c) in cov.iter().enumerate() {
            img[ch * plane + q] = bg[ch] + (fg[ch] - bg[ch]) * c;
        }
    }
    match transform {
        Transform::Identity | Transform::Rotate(_) => {}
        Transform::Invert => img.iter_mut().for_each(|v| *v = 1.0 - *v),
        Transform::Noise(sigma) => img.iter_mut().for_each(|v| *v += sigma * rng.normal()),
        Transform::HueShift(deg) => {
            let m = hue_matrix(deg);
            for q in 0..plane {
                let px = [img[q], img[plane + q], img[2 * plane + q]];
                for (ch, row) in m.iter().enumerate() {
                    img[ch * plane + q] = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
                }
            }
        }
        Transform::Blur(r) => box_blur(&mut img, r),
    }
    img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()
}

/// Renders `per_class` samples of each of `classes` classes, class-major.
pub fn gen_domain(spec: &DomainSpec, classes: usize) -> Result<LabeledSet> {
    spec.validate()?;
    if classes == 0 || classes > MAX_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "class count {classes} outside [1, {MAX_CLASSES}]"
        )));
    }
    let base = SplitMix64::new(spec.seed);
    let sample_len = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
    let n = classes * spec.per_class;
    let mut data = Vec::with_capacity(n * sample_len);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let mut rng = base.derive(class as u64);
        for _ in 0..spec.per_class {
            data.extend(render_sample(class, spec.transform, &mut rng));
            labels.push(class);
        }
    }
    let images = Tensor::new(&[n, CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)?;
    LabeledSet::new(images, labels, classes)
}

/// Label-stratified split into `(first, second)` with `fractions.0` of each
/// class going to the first part. Rows keep their original order.
pub fn split(set: &LabeledSet, fractions: (f64, f64), seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    let (a, b) = fractions;
    if a < 0.0 || b < 0.0 || ((a + b) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let base = SplitMix64::new(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for class in 0..set.classes {
        let rows: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == class).collect();
        let take = (a * rows.len() as f64).round() as usize;
        let perm = base.derive(class as u64).permutation(rows.len());
        for (rank, &p) in perm.iter().enumerate() {
            if rank < take {
                first.push(rows[p]);
            } else {
                second.push(rows[p]);
            }
        }
    }
    if first.is_empty() || second.is_empty() {
        return Err(Error::Empty("side of split"));
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((set.subset(&first)?, set.subset(&second)?))
}

/// The four default benchmark domains.
pub fn default_domains() -> Vec<Transform> {
    vec![
        Transform::Identity,
        Transform::Rotate(25.0),
        Transform::Invert,
        Transform::Noise(0.2),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(t: Transform) -> DomainSpec {
        DomainSpec::new(t, 20, 11)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_domain(&spec(Transform::Noise(0.2)), 10).unwrap();
        let b = gen_domain(&spec(Transform::Noise(0.2)), 10).unwrap();
        let bits = |s: &LabeledSet| s.images.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels, b.labels);
        let c = gen_domain(&DomainSpec::new(Transform::Noise(0.2), 20, 12), 10).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn values_in_unit_range_and_balanced() {
        for t in [
            Transform::Identity,
            Transform::Rotate(-30.0),
            Transform::Invert,
            Transform::Noise(0.5),
            Transform::HueShift(120.0),
            Transform::Blur(2),
        ] {
            let s = gen_domain(&spec(t), 10).unwrap();
            assert!(s.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(s.class_counts(), vec![20; 10]);
        }
    }

    #[test]
    fn glyphs_are_distinct() {
        for i in 0..MAX_CLASSES {
            for j in 0..i {
                assert_ne!(GLYPHS[i], GLYPHS[j], "classes {i} and {j}");
            }
            assert_ne!(GLYPHS[i], 0);
        }
    }

    /// Nearest-prototype classifier on jitter-free identity renders.
    #[test]
    fn identity_domain_is_separable_by_prototypes() {
        let set = gen_domain(&DomainSpec::new(Transform::Identity, 50, 3), 10).unwrap();
        let len = IMAGE_SIZE * IMAGE_SIZE;
        let protos: Vec<Vec<f64>> = (0..10).map(|c| render_coverage(c, 1.0, 0.0, (0.0, 0.0))).collect();
        let normalize = |v: &mut Vec<f64>| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter_mut().for_each(|x| *x -= m);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= n);
        };
        let protos: Vec<Vec<f64>> = protos
            .into_iter()
            .map(|mut p| {
                normalize(&mut p);
                p
            })
            .collect();
        let mut correct = 0;
        for i in 0..set.len() {
            let img = &set.images.data()[i * 3 * len..(i + 1) * 3 * len];
            let mut gray: Vec<f64> = (0..len)
                .map(|q| (img[q] + img[len + q] + img[2 * len + q]) as f64)
                .collect();
            normalize(&mut gray);
            // Search over the translation jitter range.
            let mut best = (f64::NEG_INFINITY, 0);
            for (c, _) in protos.iter().enumerate() {
                for sy in -2..=2 {
                    for sx in -2..=2 {
                        let mut p = render_coverage(c, 1.0, 0.0, (sx as f64, sy as f64));
                        normalize(&mut p);
                        let score: f64 = p.iter().zip(&gray).map(|(a, b)| a * b).sum();
                        if score > best.0 {
                            best = (score, c);
                        }
                    }
                }
            }
            if best.1 == set.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / set.len() as f64;
        assert!(acc >= 0.99, "nearest-prototype accuracy {acc}");
    }

    #[test]
    fn transform_parsing() {
        assert_eq!("rotate:25".parse::<Transform>().unwrap(), Transform::Rotate(25.0));
        assert_eq!("noise:0.2".parse::<Transform>().unwrap(), Transform::Noise(0.2));
        assert_eq!("blur:1".parse::<Transform>().unwrap(), Transform::Blur(1));
        assert!("rotate:60".parse::<Transform>().is_err());
        assert!("noise:0.9".parse::<Transform>().is_err());
        assert!("swirl".parse::<Transform>().is_err());
        for t in default_domains() {
            assert_eq!(t.to_string().parse::<Transform>().unwrap(), t);
        }
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let set = gen_domain(&DomainSpec::new(Transform::Identity, 10, 1), 10).unwrap();
        let (a, b) = split(&set, (0.5, 0.5), 9).unwrap();
        assert_eq!((a.len(), b.len()), (50, 50));
        assert_eq!(a.class_counts(), vec![5; 10]);
        assert_eq!(b.class_counts(), vec![5; 10]);
        let (a2, _) = split(&set, (0.5, 0.5), 9).unwrap();
        assert_eq!(a, a2);
        assert!(matches!(split(&set, (1.0, 0.0), 9), Err(Error::Empty(_))));
        assert!(split(&set, (0.7, 0.7), 9).is_err());
    }

    #[test]
    fn hue_matrix_preserves_gray() {
        let m = hue_matrix(77.0);
        for row in m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
