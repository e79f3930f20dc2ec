use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation over flattened pixels. A constant image scores 0.
pub fn pixcorr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim("pixcorr", &[a.len()], &[b.len()]));
    }
    Ok(pearson(a, b).unwrap_or_else(|| {
        log::warn!("pixcorr of a constant image is undefined; reporting 0");
        0.0
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: SSIM_WINDOW,
            k1: SSIM_K1,
            k2: SSIM_K2,
            range: 1.0,
        }
    }
}

/// Summed-area table with a zero border row and column.
fn integral(values: impl Iterator<Item = f64>, side: usize) -> Vec<f64> {
    let w = side + 1;
    let mut s = vec![0.0; w * w];
    let v: Vec<f64> = values.collect();
    for y in 0..side {
        let mut row = 0.0;
        for x in 0..side {
            row += v[y * side + x];
            s[(y + 1) * w + x + 1] = s[y * w + x + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], side: usize, y: usize, x: usize, k: usize) -> f64 {
    let w = side + 1;
    s[(y + k) * w + x + k] - s[y * w + x + k] - s[(y + k) * w + x] + s[y * w + x]
}

/// Mean SSIM over all `window x window` positions (stride 1, uniform weights,
/// population statistics) of two square images.
pub fn ssim_with(a: &[f64], b: &[f64], side: usize, p: &SsimParams) -> Result<f64> {
    if a.len() != side * side || b.len() != side * side {
        return Err(Error::dim("ssim", &[a.len(), b.len()], &[side, side]));
    }
    if p.window == 0 || p.window > side {
        return Err(Error::Parameter {
            name: "window",
            reason: format!("window {} does not fit a {side}x{side} image", p.window),
        });
    }
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let sa = integral(a.iter().copied(), side);
    let sb = integral(b.iter().copied(), side);
    let saa = integral(a.iter().map(|v| v * v), side);
    let sbb = integral(b.iter().map(|v| v * v), side);
    let sab = integral(a.iter().zip(b).map(|(x, y)| x * y), side);
    let k = p.window;
    let n = (k * k) as f64;
    let positions = side - k + 1;
    let mut total = 0.0;
    for y in 0..positions {
        for x in 0..positions {
            let ma = window_sum(&sa, side, y, x, k) / n;
            let mb = window_sum(&sb, side, y, x, k) / n;
            let va = (window_sum(&saa, side, y, x, k) / n - ma * ma).max(0.0);
            let vb = (window_sum(&sbb, side, y, x, k) / n - mb * mb).max(0.0);
            let bound = (va * vb).sqrt();
            let cov = (window_sum(&sab, side, y, x, k) / n - ma * mb).clamp(-bound, bound);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (positions * positions) as f64)
}

pub fn ssim(a: &[f64], b: &[f64], side: usize) -> Result<f64> {
    ssim_with(a, b, side, &SsimParams::default())
}
