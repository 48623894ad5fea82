//! Procedural scenes: a two-color gradient background under a few solid
//! rectangles and ellipses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagestack::{ColorSpace, Image, Shape, ValueRange};

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

/// One unit-range RGB scene of `side`x`side` pixels.
pub fn toy_scene(side: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    if side < 8 {
        return Err(Error::InvalidArgument(format!("toy scenes need a side of at least 8, got {side}")));
    }
    let plane = side * side;
    let mut data = vec![0.0; 3 * plane];
    let (c0, c1) = (color(rng), color(rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let s = side as f64;
    for y in 0..side {
        for x in 0..side {
            // projection onto the gradient direction, mapped to [0, 1]
            let u = ((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5;
            for c in 0..3 {
                data[c * plane + y * side + x] = c0[c] + (c1[c] - c0[c]) * u;
            }
        }
    }
    let shapes = rng.random_range(2..=5);
    for _ in 0..shapes {
        let ellipse = rng.random_bool(0.5);
        let col = color(rng);
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let (rx, ry) = (rng.random_range(s / 10.0..s / 3.0), rng.random_range(s / 10.0..s / 3.0));
        for y in 0..side {
            for x in 0..side {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if ellipse {
                    (px / rx).powi(2) + (py / ry).powi(2) <= 1.0
                } else {
                    px.abs() <= rx && py.abs() <= ry
                };
                if inside {
                    for c in 0..3 {
                        data[c * plane + y * side + x] = col[c];
                    }
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Image::new(Shape::new(3, side, side), data, ValueRange::Unit, ColorSpace::Rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn scenes_are_valid_and_seeded() {
        let a = toy_scene(32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = toy_scene(32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = toy_scene(32, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.check_range().unwrap();
        assert_eq!(a.shape(), Shape::new(3, 32, 32));
        assert!(toy_scene(4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
