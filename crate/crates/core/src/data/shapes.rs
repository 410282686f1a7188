use rand::Rng as _;

use super::raw::{DatasetKind, RawDataset, Split};
use crate::diffusion::Shape;
use crate::rng::seeded;

/// Side length of the synthetic shape images.
pub const SHAPE_SIZE: usize = 16;
/// Class 0: filled squares, 1: filled circles, 2: filled triangles.
pub const SHAPE_CLASSES: usize = 3;
const PER_CLASS: usize = 64;

/// Deterministic synthetic dataset of filled white shapes on black.
pub fn shapes_dataset(split: Split) -> RawDataset {
    let seed = match split {
        Split::Train => 0x5ca1ab1e,
        Split::Test => 0x7e57,
    };
    let n = SHAPE_SIZE;
    let mut out = RawDataset::empty(DatasetKind::Shapes, split, Shape::new(1, n, n));
    for k in 0..PER_CLASS {
        for class in 0..SHAPE_CLASSES {
            let mut rng = seeded(seed, (class * PER_CLASS + k) as u64);
            let half: f64 = rng.random_range(3.0..5.5);
            let margin = half + 0.5;
            let cx: f64 = rng.random_range(margin..n as f64 - margin);
            let cy: f64 = rng.random_range(margin..n as f64 - margin);
            for y in 0..n {
                for x in 0..n {
                    let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let inside = match class {
                        0 => px.abs() <= half && py.abs() <= half,
                        1 => px * px + py * py <= half * half,
                        _ => py <= half && py >= -half && px.abs() <= (py + half) / 2.0,
                    };
                    out.pixels.push(if inside { 255 } else { 0 });
                }
            }
            out.fine.push(class as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = shapes_dataset(Split::Train);
        assert_eq!(a.len(), PER_CLASS * SHAPE_CLASSES);
        for c in 0..SHAPE_CLASSES as u8 {
            assert_eq!(a.fine.iter().filter(|l| **l == c).count(), PER_CLASS);
        }
        assert_eq!(a, shapes_dataset(Split::Train));
        assert_ne!(a.pixels, shapes_dataset(Split::Test).pixels);
    }

    #[test]
    fn shapes_are_visible() {
        let a = shapes_dataset(Split::Train);
        for i in 0..a.len() {
            let lit = a.image_bytes(i).iter().filter(|b| **b == 255).count();
            assert!(lit >= 10, "image {i} has {lit} lit pixels");
        }
    }
}
