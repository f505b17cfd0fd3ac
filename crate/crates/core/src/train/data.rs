//! Synthetic shapes: colored rectangles and ellipses on a noise background.

use crate::error::{Error, Result};
use crate::model::PYRAMID_STRIDE;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-class dominant colors. Index 0 is unused (background is noise).
pub const SHAPE_COLORS: [[f64; 3]; 8] = [
    [0.5, 0.5, 0.5],
    [0.9, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.2, 0.25, 0.95],
    [0.95, 0.9, 0.1],
    [0.85, 0.2, 0.9],
    [0.1, 0.9, 0.9],
    [0.05, 0.05, 0.05],
];

/// Shape side lengths as a fraction of the image side.
pub const MIN_SIDE: f64 = 0.28;
pub const MAX_SIDE: f64 = 0.44;
/// Background per-channel noise range.
pub const BACKGROUND: (f64, f64) = (0.25, 0.75);
/// Half-width of the noise added to a shape's color.
pub const SHAPE_NOISE: f64 = 0.1;
const MAX_SHAPES: usize = 3;
const PLACEMENT_TRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// Integer label map, row-major `(H, W)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<usize>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            labels: vec![0; h * w],
        }
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l != 0).count() as f64 / self.labels.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image: Tensor,
    pub mask: Mask,
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Placed {
    /// Boxes may touch but not share a pixel.
    fn overlaps(&self, o: &Placed) -> bool {
        self.y < o.y + o.h && o.y < self.y + self.h && self.x < o.x + o.w && o.x < self.x + self.w
    }
}

fn side_range(n: usize) -> (usize, usize) {
    ((MIN_SIDE * n as f64).ceil() as usize, (MAX_SIDE * n as f64).floor() as usize)
}

fn inside(kind: ShapeKind, b: &Placed, y: usize, x: usize) -> bool {
    match kind {
        ShapeKind::Rect => true,
        ShapeKind::Ellipse => {
            let dy = (y as f64 + 0.5 - b.h as f64 / 2.0) / (b.h as f64 / 2.0);
            let dx = (x as f64 + 0.5 - b.w as f64 / 2.0) / (b.w as f64 / 2.0);
            dy * dy + dx * dx <= 1.0
        }
    }
}

/// One `(1, 3, h, w)` image with 1 to 3 non-overlapping shapes, each of a
/// distinct class in `1..c_cls`.
pub fn gen_toy_sample(rng: &mut Rng, h: usize, w: usize, c_cls: usize) -> Result<ToySample> {
    if c_cls < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {c_cls}")));
    }
    if h == 0 || w == 0 || h % PYRAMID_STRIDE != 0 || w % PYRAMID_STRIDE != 0 {
        return Err(Error::InvalidArgument(format!(
            "toy image {h}x{w} must be a positive multiple of {PYRAMID_STRIDE}"
        )));
    }
    let hw = h * w;
    let mut pixels = vec![0.0; 3 * hw];
    for v in &mut pixels {
        *v = rng.uniform(BACKGROUND.0, BACKGROUND.1);
    }

    let mut classes: Vec<usize> = (1..c_cls).collect();
    rng.shuffle(&mut classes);
    let count = rng.range(1, MAX_SHAPES + 1).min(classes.len());
    let (hmin, hmax) = side_range(h);
    let (wmin, wmax) = side_range(w);

    let mut mask = Mask::new(h, w);
    let mut placed: Vec<Placed> = Vec::new();
    for &class in &classes[..count] {
        let kind = if rng.next_f64() < 0.5 { ShapeKind::Rect } else { ShapeKind::Ellipse };
        let mut slot = None;
        for _ in 0..PLACEMENT_TRIES {
            let bh = rng.range(hmin, hmax + 1);
            let bw = rng.range(wmin, wmax + 1);
            let b = Placed {
                y: rng.range(0, h - bh + 1),
                x: rng.range(0, w - bw + 1),
                h: bh,
                w: bw,
            };
            if placed.iter().all(|p| !p.overlaps(&b)) {
                slot = Some(b);
                break;
            }
        }
        // a shape that does not fit is dropped; the first one always fits
        let Some(b) = slot else { continue };
        placed.push(b);
        let color = SHAPE_COLORS[class % SHAPE_COLORS.len()];
        for y in 0..b.h {
            for x in 0..b.w {
                if !inside(kind, &b, y, x) {
                    continue;
                }
                let p = (b.y + y) * w + b.x + x;
                mask.labels[p] = class;
                for (c, base) in color.iter().enumerate() {
                    let v = base + rng.uniform(-SHAPE_NOISE, SHAPE_NOISE);
                    pixels[c * hw + p] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(ToySample {
        image: Tensor::from_vec([1, 3, h, w], pixels)?,
        mask,
    })
}

/// Stacks samples into a `(N, 3, H, W)` image and flat `(N, H, W)` labels.
pub fn collate(samples: &[ToySample]) -> Result<(Tensor, Vec<usize>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let [_, c, h, w] = first.image.dims();
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.dims() != first.image.dims() {
            return Err(Error::shape("collate", format!("{:?} vs {:?}", s.image.dims(), first.image.dims())));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask.labels);
    }
    Ok((Tensor::from_vec([samples.len(), c, h, w], data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = gen_toy_sample(&mut Rng::new(5), 64, 64, 4).unwrap();
        let b = gen_toy_sample(&mut Rng::new(5), 64, 64, 4).unwrap();
        assert_eq!(a, b);
        let c = gen_toy_sample(&mut Rng::new(6), 64, 64, 4).unwrap();
        assert_ne!(a.mask, c.mask);
    }

    #[test]
    fn mask_and_image_ranges() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let s = gen_toy_sample(&mut rng, 64, 128, 3).unwrap();
            assert!(s.mask.labels.iter().all(|&l| l < 3));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn shape_classes_are_distinct() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let s = gen_toy_sample(&mut rng, 64, 64, 8).unwrap();
            let mut present: Vec<usize> = s.mask.labels.clone();
            present.sort();
            present.dedup();
            assert!(present.len() >= 2 && present.len() <= 4, "{present:?}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gen_toy_sample(&mut Rng::new(0), 64, 64, 1).is_err());
        assert!(gen_toy_sample(&mut Rng::new(0), 60, 64, 4).is_err());
    }
}
