use crate::diffusion::ImageTensor;
use crate::{Error, Result};

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
/// Luminance stabiliser for dynamic range 1.
pub const C1: f64 = 0.01 * 0.01;
/// Contrast stabiliser for dynamic range 1.
pub const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

fn ssim_term(mx: f64, my: f64, sxx: f64, syy: f64, sxy: f64) -> f64 {
    ((2.0 * mx * my + C1) * (2.0 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))
}

/// Mean SSIM of one plane already in `[0, 1]`.
fn plane_ssim(x: &[f64], y: &[f64], height: usize, width: usize) -> f64 {
    if height < WINDOW || width < WINDOW {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxx = x.iter().map(|v| v * v).sum::<f64>() / n - mx * mx;
        let syy = y.iter().map(|v| v * v).sum::<f64>() / n - my * my;
        let sxy = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n - mx * my;
        return ssim_term(mx, my, sxx, syy, sxy);
    }
    let g = gaussian_window();
    let (oh, ow) = (height - WINDOW + 1, width - WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (ky, gy) in g.iter().enumerate() {
                let row = (oy + ky) * width + ox;
                for (kx, gx) in g.iter().enumerate() {
                    let w = gy * gx;
                    let (a, b) = (x[row + kx], y[row + kx]);
                    mx += w * a;
                    my += w * b;
                    xx += w * a * a;
                    yy += w * b * b;
                    xy += w * a * b;
                }
            }
            total += ssim_term(mx, my, xx - mx * mx, yy - my * my, xy - mx * my);
        }
    }
    total / (oh * ow) as f64
}

/// SSIM of two images stored in `[0, 1]`, averaged over channels.
pub fn ssim_unit_range(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(x.shape(), y.shape()));
    }
    let s = x.shape();
    let total: f64 = (0..s.channels)
        .map(|c| {
            let a: Vec<f64> = x.channel(c).iter().map(|v| *v as f64).collect();
            let b: Vec<f64> = y.channel(c).iter().map(|v| *v as f64).collect();
            plane_ssim(&a, &b, s.height, s.width)
        })
        .sum();
    Ok(total / s.channels as f64)
}

/// SSIM of two `[-1, 1]` images, evaluated after mapping to `[0, 1]`.
///
/// 11x11 Gaussian window (sigma 1.5) over valid positions; images smaller
/// than the window use one global window.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(x.shape(), y.shape()));
    }
    let to_unit = |img: &ImageTensor| {
        let d = img.data().iter().map(|v| (v + 1.0) / 2.0).collect();
        ImageTensor::new(img.shape(), d)
    };
    ssim_unit_range(&to_unit(x)?, &to_unit(y)?)
}
