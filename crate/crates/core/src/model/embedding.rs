use crate::{Error, Result};

/// Sinusoidal timestep embedding.
///
/// Component pairs `(sin(t w_k), cos(t w_k))` are interleaved, with `w_k`
/// geometric from 1 down to 1/10000 across `dim / 2` bands.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Domain(format!(
            "embedding dim must be positive and even, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            10000f64.powf(-(k as f64) / ((half - 1) as f64))
        };
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_components() {
        for t in [1.0, 7.0, 250.0, 500.0] {
            let e = timestep_embedding(t, 64).unwrap();
            assert_eq!(e.len(), 64);
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_probe() {
        let e = timestep_embedding(0.0, 8).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn neighbouring_steps_differ() {
        let a = timestep_embedding(1.0, 64).unwrap();
        let b = timestep_embedding(2.0, 64).unwrap();
        let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(d > 0.1, "{d}");
    }

    #[test]
    fn all_steps_distinct() {
        let embs: Vec<_> = (1..=500)
            .map(|t| timestep_embedding(t as f64, 32).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 1e-6, "steps {} and {} collide", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(timestep_embedding(1.0, 7).is_err());
    }
}
