//! Reproducible synthetic segmentation samples: ellipses on textured noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Accepted range of the positive-pixel fraction.
pub const FOREGROUND_BAND: (f64, f64) = (0.05, 0.40);

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample<T> {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<T>,
    /// `[1, H, W]` with values in `{0, 1}`.
    pub mask: Tensor<T>,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random<R: Rng>(h: usize, w: usize, rng: &mut R) -> Self {
        let s = h.min(w) as f64;
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        Self {
            cy: rng.gen_range(0.15..0.85) * h as f64,
            cx: rng.gen_range(0.15..0.85) * w as f64,
            a: rng.gen_range(0.08..0.3) * s,
            b: rng.gen_range(0.08..0.3) * s,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Approximate signed distance in pixels, positive inside.
    fn inside_margin(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        (1.0 - (u * u + v * v).sqrt()) * self.a.min(self.b)
    }
}

/// Low-frequency texture: a few random plane waves, roughly in `[-1, 1]`.
fn texture<R: Rng>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = waves
                .iter()
                .map(|&(fy, fx, ph)| (fy * y as f64 + fx * x as f64 + ph).sin())
                .sum();
            out.push(s / 2.0);
        }
    }
    out
}

fn sample<T: Scalar>(
    h: usize,
    w: usize,
    difficulty: f64,
    rng: &mut ChaCha8Rng,
) -> SegmentationSample<T> {
    let n = h * w;
    let (shapes, mask) = loop {
        let count = rng.gen_range(1..=3);
        let shapes: Vec<Ellipse> = (0..count).map(|_| Ellipse::random(h, w, rng)).collect();
        let mask: Vec<bool> = (0..n)
            .map(|i| {
                let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
                shapes.iter().any(|e| e.inside_margin(y, x) > 0.0)
            })
            .collect();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / n as f64;
        if (FOREGROUND_BAND.0..=FOREGROUND_BAND.1).contains(&frac) {
            break (shapes, mask);
        }
    };
    let bg: [f64; 3] = [
        rng.gen_range(0.15..0.35),
        rng.gen_range(0.25..0.4),
        rng.gen_range(0.4..0.6),
    ];
    let fg: [f64; 3] = [
        rng.gen_range(0.7..0.9),
        rng.gen_range(0.45..0.65),
        rng.gen_range(0.25..0.45),
    ];
    let tex = texture(h, w, rng);
    let edge = 2.0 * difficulty;
    let mut image = vec![0.0; 3 * n];
    for i in 0..n {
        let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
        let alpha = if edge > 0.0 {
            let d = shapes
                .iter()
                .map(|e| e.inside_margin(y, x))
                .fold(f64::NEG_INFINITY, f64::max);
            (0.5 + d / edge).clamp(0.0, 1.0)
        } else if mask[i] {
            1.0
        } else {
            0.0
        };
        for c in 0..3 {
            let noise = difficulty * (0.25 * tex[i] + rng.gen_range(-0.1..0.1));
            let v = alpha * fg[c] + (1.0 - alpha) * bg[c] + noise;
            image[c * n + i] = v.clamp(0.0, 1.0);
        }
    }
    let to_t = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<T>>();
    let mask = mask
        .into_iter()
        .map(|m| if m { 1.0 } else { 0.0 })
        .collect();
    SegmentationSample {
        image: Tensor::from_vec(&[3, h, w], to_t(image)).expect("image shape"),
        mask: Tensor::from_vec(&[1, h, w], to_t(mask)).expect("mask shape"),
    }
}

/// `n` samples of `h x w`. `difficulty` in `[0, 1]` scales texture, pixel
/// noise and edge softness; 0 gives flat colors and hard edges.
pub fn synth_dataset<T: Scalar>(
    n: usize,
    h: usize,
    w: usize,
    seed: u64,
    difficulty: f64,
) -> Result<Vec<SegmentationSample<T>>> {
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return arg_err(
            "synth_dataset",
            format!("extent {h}x{w} is not a positive multiple of 32"),
        );
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return arg_err(
            "synth_dataset",
            format!("difficulty {difficulty} outside [0, 1]"),
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sample(h, w, difficulty, &mut rng)).collect())
}

/// Stacks samples into `[B, 3, H, W]` images and `[B, 1, H, W]` masks.
pub fn collate<T: Scalar>(samples: &[&SegmentationSample<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<Tensor<T>> = samples
        .iter()
        .map(|s| {
            s.image
                .reshape(&[1, 3, s.image.shape()[1], s.image.shape()[2]])
        })
        .collect::<Result<_>>()?;
    let masks: Vec<Tensor<T>> = samples
        .iter()
        .map(|s| {
            s.mask
                .reshape(&[1, 1, s.mask.shape()[1], s.mask.shape()[2]])
        })
        .collect::<Result<_>>()?;
    let x = Tensor::concat(&images.iter().collect::<Vec<_>>(), 0)?;
    let y = Tensor::concat(&masks.iter().collect::<Vec<_>>(), 0)?;
    Ok((x, y))
}
