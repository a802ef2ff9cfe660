//! Procedural content/style image pairs.
//!
//! Content images are a single flat-coloured silhouette (circle, square or
//! triangle) on a plain background. Style images are full-frame two-colour
//! textures (stripes, checkerboard or blocky noise) drawn from a palette
//! disjoint from the content colours.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const DEFAULT_SIZE: usize = 16;

type Rgb = [f64; 3];

const BACKGROUNDS: [Rgb; 3] = [[1.0, 1.0, 1.0], [0.95, 0.92, 0.8], [0.85, 0.85, 0.85]];
const FOREGROUNDS: [Rgb; 4] = [
    [0.85, 0.1, 0.1],
    [0.1, 0.2, 0.85],
    [0.1, 0.55, 0.2],
    [0.1, 0.1, 0.1],
];
const STYLE_PALETTES: [(Rgb, Rgb); 4] = [
    ([1.0, 0.55, 0.0], [0.45, 0.1, 0.6]),
    ([0.0, 0.6, 0.6], [1.0, 0.9, 0.2]),
    ([0.9, 0.2, 0.7], [0.05, 0.1, 0.35]),
    ([0.5, 0.5, 0.1], [1.0, 0.7, 0.75]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Stripes,
    Checker,
    BlockNoise,
}

fn paint(h: usize, w: usize, f: impl Fn(usize, usize) -> Rgb) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(&f(y, x));
        }
    }
    Tensor::new(vec![h, w, 3], data).expect("painted image has h*w*3 values")
}

pub fn content_image<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> (Tensor, Shape) {
    let shape = match rng.random_range(0..3) {
        0 => Shape::Circle,
        1 => Shape::Square,
        _ => Shape::Triangle,
    };
    let bg = BACKGROUNDS[rng.random_range(0..BACKGROUNDS.len())];
    let fg = FOREGROUNDS[rng.random_range(0..FOREGROUNDS.len())];
    let min_dim = h.min(w);
    let r_max = (min_dim / 3).max(2);
    let r = rng.random_range(2.max(min_dim / 5)..=r_max) as f64;
    let ri = r.ceil() as usize;
    let cy = rng.random_range(ri..h.saturating_sub(ri).max(ri + 1)) as f64;
    let cx = rng.random_range(ri..w.saturating_sub(ri).max(ri + 1)) as f64;
    let inside = move |y: usize, x: usize| {
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        match shape {
            Shape::Circle => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
            // apex at the top, base at cy + r
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
        }
    };
    (paint(h, w, |y, x| if inside(y, x) { fg } else { bg }), shape)
}

pub fn style_image<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> (Tensor, Texture) {
    let texture = match rng.random_range(0..3) {
        0 => Texture::Stripes,
        1 => Texture::Checker,
        _ => Texture::BlockNoise,
    };
    let (a, b) = STYLE_PALETTES[rng.random_range(0..STYLE_PALETTES.len())];
    let img = match texture {
        Texture::Stripes => {
            let period = rng.random_range(2..=4usize);
            let orient = rng.random_range(0..3);
            paint(h, w, |y, x| {
                let k = match orient {
                    0 => y,
                    1 => x,
                    _ => x + y,
                };
                if (k / period) % 2 == 0 {
                    a
                } else {
                    b
                }
            })
        }
        Texture::Checker => {
            let cell = rng.random_range(1..=3usize);
            paint(h, w, |y, x| if (y / cell + x / cell) % 2 == 0 { a } else { b })
        }
        Texture::BlockNoise => {
            let (bh, bw) = (h.div_ceil(2), w.div_ceil(2));
            let cells: Vec<bool> = (0..bh * bw).map(|_| rng.random_bool(0.5)).collect();
            paint(h, w, |y, x| if cells[(y / 2) * bw + x / 2] { a } else { b })
        }
    };
    (img, texture)
}

/// Deterministic `(content, style)` pair of `size x size x 3` images in `[0, 1]`.
pub fn generate_synthetic_pair_sized(seed: u64, size: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, _) = content_image(&mut rng, size, size);
    let (s, _) = style_image(&mut rng, size, size);
    (c, s)
}

pub fn generate_synthetic_pair(seed: u64) -> (Tensor, Tensor) {
    generate_synthetic_pair_sized(seed, DEFAULT_SIZE)
}

/// `count` images alternating content and style from consecutive seeds.
pub fn synthetic_dataset(count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(count);
    let mut s = seed;
    while out.len() < count {
        let (c, st) = generate_synthetic_pair_sized(s, size);
        out.push(c);
        if out.len() < count {
            out.push(st);
        }
        s += 1;
    }
    out
}

/// `[0, 1]` pixels to the `[-1, 1]` diffusion range.
pub fn to_signed(img: &Tensor) -> Tensor {
    img.map(|v| v * 2.0 - 1.0)
}

/// Clamps to `[-1, 1]` and maps to `[0, 1]`.
pub fn to_unit(img: &Tensor) -> Tensor {
    img.map(|v| (v.clamp(-1.0, 1.0) + 1.0) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn distinct_colors(t: &Tensor) -> BTreeSet<[u64; 3]> {
        t.data()
            .chunks(3)
            .map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()])
            .collect()
    }

    #[test]
    fn same_seed_same_pair() {
        assert_eq!(generate_synthetic_pair(7), generate_synthetic_pair(7));
        assert_ne!(generate_synthetic_pair(7), generate_synthetic_pair(8));
    }

    #[test]
    fn content_has_two_colors_and_style_is_textured() {
        for seed in 0..50 {
            let (c, s) = generate_synthetic_pair(seed);
            assert_eq!(c.shape(), &[16, 16, 3]);
            assert_eq!(distinct_colors(&c).len(), 2, "seed {seed}");
            assert_eq!(distinct_colors(&s).len(), 2, "seed {seed}");
            assert!(c.data().iter().chain(s.data()).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dataset_size() {
        let d = synthetic_dataset(5, 8, 0);
        assert_eq!(d.len(), 5);
        assert!(d.iter().all(|t| t.shape() == [8, 8, 3]));
    }
}
