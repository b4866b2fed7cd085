//! Procedural stand-in for FashionMNIST: ten garment-like silhouettes on a
//! square grid, jittered in position, size and brightness, with pixel noise.
//! Output is raw 8-bit pixels so it can be written as IDX and read back
//! through the same loader as the real files.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Example;
use crate::rng;
use crate::Scalar;

pub const NUM_IMAGE_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageTaskSpec {
    pub count: usize,
    /// Images are `side × side`.
    pub side: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise (intensity units in [0,1]).
    pub noise: f64,
}

impl Default for ImageTaskSpec {
    fn default() -> Self {
        Self {
            count: 5000,
            side: 28,
            seed: 0,
            noise: 0.25,
        }
    }
}

/// Axis-aligned box in template coordinates `[-1, 1]²` (u right, v down).
#[derive(Clone, Copy)]
struct Rect(f64, f64, f64, f64);

impl Rect {
    fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.0 && u <= self.2 && v >= self.1 && v <= self.3
    }
}

fn template(class: usize, u: f64, v: f64) -> f64 {
    let any = |rects: &[Rect]| rects.iter().any(|r| r.contains(u, v));
    let hit = match class {
        // t-shirt: body plus short sleeves
        0 => any(&[Rect(-0.45, -0.6, 0.45, 0.8), Rect(-0.85, -0.6, 0.85, -0.2)]),
        // trouser: two legs joined at the waist
        1 => any(&[
            Rect(-0.4, -0.85, 0.4, -0.55),
            Rect(-0.4, -0.85, -0.08, 0.9),
            Rect(0.08, -0.85, 0.4, 0.9),
        ]),
        // pullover: body plus long sleeves
        2 => any(&[Rect(-0.45, -0.6, 0.45, 0.8), Rect(-0.85, -0.6, 0.85, -0.3), Rect(-0.85, -0.6, -0.6, 0.7), Rect(0.6, -0.6, 0.85, 0.7)]),
        // dress: widening trapezoid
        3 => v >= -0.8 && v <= 0.9 && u.abs() <= 0.2 + 0.35 * (v + 0.8),
        // coat: long body with open front, long sleeves
        4 => any(&[Rect(-0.5, -0.7, -0.05, 0.9), Rect(0.05, -0.7, 0.5, 0.9), Rect(-0.85, -0.7, -0.6, 0.8), Rect(0.6, -0.7, 0.85, 0.8)]),
        // sandal: thin straps over a sole
        5 => any(&[Rect(-0.9, 0.45, 0.9, 0.6), Rect(-0.7, 0.05, 0.6, 0.15), Rect(-0.5, -0.3, 0.3, -0.2)]),
        // shirt: body, short sleeves, collar notch
        6 => any(&[Rect(-0.45, -0.6, 0.45, 0.8), Rect(-0.8, -0.6, 0.8, -0.35)]) && !(u.abs() < 0.12 && v < -0.3),
        // sneaker: low wide shape rising to the back
        7 => v >= 0.1 && v <= 0.6 && u >= -0.9 && u <= 0.9 && v >= 0.35 - 0.3 * (u + 0.9),
        // bag: square with a handle
        8 => any(&[Rect(-0.7, -0.2, 0.7, 0.8)]) || (v >= -0.7 && v <= -0.2 && (u.abs() - 0.35).abs() < 0.08) || (u.abs() <= 0.43 && (v + 0.7).abs() < 0.08),
        // ankle boot: shaft plus foot
        9 => any(&[Rect(-0.2, -0.8, 0.35, 0.6), Rect(-0.8, 0.25, 0.35, 0.6)]),
        _ => false,
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Raw `(pixels, labels)` with classes cycling `0..10`.
pub fn gen_image_classes(spec: &ImageTaskSpec) -> (Vec<Vec<u8>>, Vec<u8>) {
    let mut rng = rng::substream(spec.seed, rng::stream::DATA);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("noise sd");
    let side = spec.side as f64;
    let mut images = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let class = i % NUM_IMAGE_CLASSES;
        let scale: f64 = rng.random_range(0.75..1.1);
        let du: f64 = rng.random_range(-0.15..0.15);
        let dv: f64 = rng.random_range(-0.15..0.15);
        let shear: f64 = rng.random_range(-0.2..0.2);
        let brightness: f64 = rng.random_range(0.45..1.0);
        let mut img = Vec::with_capacity(spec.side * spec.side);
        for r in 0..spec.side {
            for c in 0..spec.side {
                let v0 = 2.0 * (r as f64 + 0.5) / side - 1.0;
                let u0 = 2.0 * (c as f64 + 0.5) / side - 1.0;
                let v = (v0 - dv) / scale;
                let u = (u0 - du - shear * v) / scale;
                let val = brightness * template(class, u, v) + noise.sample(&mut rng);
                img.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        images.push(img);
        labels.push(class as u8);
    }
    (images, labels)
}

/// Same data as [`gen_image_classes`], decoded like an IDX file.
pub fn image_examples<T: Scalar>(spec: &ImageTaskSpec) -> Vec<Example<T>> {
    let (images, labels) = gen_image_classes(spec);
    let scale = T::of(1.0 / 255.0);
    images
        .iter()
        .zip(labels)
        .map(|(img, l)| {
            Example::classification(img.iter().map(|&p| T::of(p as f64) * scale).collect(), l as usize)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_are_distinct_and_deterministic() {
        let spec = ImageTaskSpec { count: 20, side: 14, seed: 4, noise: 0.0 };
        let (a, la) = gen_image_classes(&spec);
        let (b, _) = gen_image_classes(&spec);
        assert_eq!(a, b);
        assert_eq!(la[..10], (0..10u8).collect::<Vec<_>>()[..]);
        for img in &a {
            assert_eq!(img.len(), 196);
            assert!(img.iter().any(|&p| p > 0), "blank image");
        }
    }
}
