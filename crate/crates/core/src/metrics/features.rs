use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diffusion::ImageTensor;
use crate::{Error, Result};

/// Output grid of pixel pooling per channel.
pub const POOL_SIZE: usize = 8;

/// Identifier of the feature space a report was computed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSpace {
    #[default]
    PixelPool,
    Provided,
}

impl fmt::Display for FeatureSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSpace::PixelPool => "pixel-pool",
            FeatureSpace::Provided => "provided",
        })
    }
}

type FeatureFn = dyn Fn(&ImageTensor) -> Vec<f64> + Send + Sync;

/// Maps an image to a feature vector.
pub enum FeatureExtractor {
    /// Area-average each channel down to an 8x8 grid and flatten.
    PixelPool,
    /// A caller-supplied feature network.
    Provided(Box<FeatureFn>),
}

impl fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FeatureExtractor({})", self.space())
    }
}

impl FeatureExtractor {
    pub fn space(&self) -> FeatureSpace {
        match self {
            FeatureExtractor::PixelPool => FeatureSpace::PixelPool,
            FeatureExtractor::Provided(_) => FeatureSpace::Provided,
        }
    }

    pub fn apply(&self, image: &ImageTensor) -> Vec<f64> {
        match self {
            FeatureExtractor::PixelPool => pixel_pool(image),
            FeatureExtractor::Provided(f) => f(image),
        }
    }
}

/// Overlap of pixel `[p, p+1)` with bin `[lo, hi)`.
fn overlap(p: usize, lo: f64, hi: f64) -> f64 {
    ((p + 1) as f64).min(hi) - (p as f64).max(lo)
}

/// Area-weighted average pooling to `POOL_SIZE x POOL_SIZE`. Bins split the
/// image into equal areas, so the feature mean equals the image mean for any
/// input size.
fn pixel_pool(image: &ImageTensor) -> Vec<f64> {
    let s = image.shape();
    let (bh, bw) = (s.height as f64 / POOL_SIZE as f64, s.width as f64 / POOL_SIZE as f64);
    let mut out = Vec::with_capacity(s.channels * POOL_SIZE * POOL_SIZE);
    for c in 0..s.channels {
        let plane = image.channel(c);
        for by in 0..POOL_SIZE {
            let (y0, y1) = (by as f64 * bh, (by + 1) as f64 * bh);
            for bx in 0..POOL_SIZE {
                let (x0, x1) = (bx as f64 * bw, (bx + 1) as f64 * bw);
                let mut acc = 0.0;
                for y in (y0.floor() as usize)..(y1.ceil() as usize).min(s.height) {
                    let wy = overlap(y, y0, y1);
                    if wy <= 0.0 {
                        continue;
                    }
                    for x in (x0.floor() as usize)..(x1.ceil() as usize).min(s.width) {
                        let wx = overlap(x, x0, x1);
                        if wx > 0.0 {
                            acc += wy * wx * plane[y * s.width + x] as f64;
                        }
                    }
                }
                out.push(acc / (bh * bw));
            }
        }
    }
    out
}

/// Feature matrix, one row per image.
pub fn extract_features(images: &[ImageTensor], extractor: &FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;

    if let Some(first) = images.first() {
        if let Some(bad) = images.iter().find(|i| i.shape() != first.shape()) {
            return Err(Error::shape(first.shape(), bad.shape()));
        }
    }
    let feats: Vec<Vec<f64>> = images.par_iter().map(|i| extractor.apply(i)).collect();
    if let Some(first) = feats.first() {
        if let Some(bad) = feats.iter().position(|f| f.len() != first.len()) {
            return Err(Error::ShapeMismatch {
                expected: format!("feature dimension {}", first.len()),
                actual: format!("{} for image {bad}", feats[bad].len()),
            });
        }
    }
    Ok(feats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Shape;
    use crate::rng::seeded;

    #[test]
    fn constant_image_gives_constant_features() {
        let img = ImageTensor::filled(Shape::new(1, 28, 28), 0.25);
        let f = extract_features(&[img], &FeatureExtractor::PixelPool).unwrap();
        assert_eq!(f[0].len(), 64);
        assert!(f[0].iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn dimension_scales_with_channels() {
        let img = ImageTensor::zeros(Shape::new(3, 32, 32));
        assert_eq!(FeatureExtractor::PixelPool.apply(&img).len(), 192);
    }

    #[test]
    fn pooling_preserves_mean() {
        for shape in [Shape::new(1, 28, 28), Shape::new(3, 32, 32), Shape::new(1, 12, 20)] {
            let img = ImageTensor::randn(shape, &mut seeded(4, 0));
            let f = FeatureExtractor::PixelPool.apply(&img);
            let fm = f.iter().sum::<f64>() / f.len() as f64;
            let im = img.data().iter().map(|v| *v as f64).sum::<f64>() / img.data().len() as f64;
            assert!((fm - im).abs() < 1e-9, "{shape}: {fm} vs {im}");
        }
    }

    #[test]
    fn divisible_size_is_block_average() {
        let data: Vec<f32> = (0..256).map(|i| i as f32).collect();
        let img = ImageTensor::new(Shape::new(1, 16, 16), data).unwrap();
        let f = FeatureExtractor::PixelPool.apply(&img);
        assert!((f[0] - (0.0 + 1.0 + 16.0 + 17.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_provided_dimension() {
        let ex = FeatureExtractor::Provided(Box::new(|img: &ImageTensor| {
            vec![0.0; if img.data()[0] > 0.0 { 2 } else { 3 }]
        }));
        let imgs = vec![
            ImageTensor::filled(Shape::new(1, 2, 2), 1.0),
            ImageTensor::filled(Shape::new(1, 2, 2), -1.0),
        ];
        assert!(extract_features(&imgs, &ex).is_err());
    }
}
