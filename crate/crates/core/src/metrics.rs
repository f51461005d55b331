//! Controllability metrics.

use crate::error::{CoreError, Result};

pub const SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Mean SSIM over all valid 7x7 uniform windows of two single-channel maps in `[0, 1]`.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(CoreError::Shape(format!("ssim inputs {} and {} for a {h}x{w} grid", a.len(), b.len())));
    }
    let k = SSIM_WINDOW.min(h).min(w);
    if k == 0 {
        return Err(CoreError::Shape("ssim on an empty image".into()));
    }
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..k {
                for dj in 0..k {
                    let p = (i + di) * w + j + dj;
                    let (x, y) = (a[p] as f64, b[p] as f64);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean IoU over the foreground classes (ids `1..classes`) present in either
/// mask. Id 0 is background and not scored; two empty masks score 1.
pub fn miou(a: &[u8], b: &[u8], classes: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::Shape(format!("mask sizes {} and {}", a.len(), b.len())));
    }
    if let Some(&c) = a.iter().chain(b).find(|&&c| c as usize >= classes) {
        return Err(CoreError::InvalidRange(format!("class id {c} outside 0..{classes}")));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&x, &y) in a.iter().zip(b) {
        if x == y {
            inter[x as usize] += 1;
            union[x as usize] += 1;
        } else {
            union[x as usize] += 1;
            union[y as usize] += 1;
        }
    }
    let present: Vec<f64> = (1..classes).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    Ok(if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 })
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CoreError::Shape(format!("mse inputs of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary { mean: f64::NAN, std: f64::NAN };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Summary { mean, std: var.sqrt() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ssim_reference_cases() {
        let a: Vec<f32> = (0..100).map(|i| ((i * 37) % 11) as f32 / 10.0).collect();
        let b: Vec<f32> = (0..100).map(|i| ((i * 13) % 7) as f32 / 6.0).collect();
        assert!((ssim(&a, &a, 10, 10).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b, 10, 10).unwrap(), ssim(&b, &a, 10, 10).unwrap());
        // Constant windows: means 0 and 1, zero variances and covariance.
        let want = C1 / (1.0 + C1);
        let got = ssim(&[0.0; 64], &[1.0; 64], 8, 8).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(ssim(&a, &b[..50], 10, 10).is_err());
    }

    #[test]
    fn miou_reference_cases() {
        let a = [1u8, 1, 0, 0];
        assert_eq!(miou(&a, &a, 2).unwrap(), 1.0);
        assert_eq!(miou(&[1, 1, 0, 0], &[0, 0, 2, 2], 3).unwrap(), 0.0);
        // Half overlap of equal areas in one class: |∩| = 2, |∪| = 6.
        let got = miou(&[1, 1, 1, 1, 0, 0], &[0, 0, 1, 1, 1, 1], 2).unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(miou(&[0, 0], &[0, 0], 4).unwrap(), 1.0);
        assert!(miou(&[5], &[0], 3).is_err());
    }

    #[test]
    fn summary_matches_definition() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-12);
    }
}
