use rustfft::num_complex::Complex64;

use crate::tensor::fft::{self, Direction};

/// Where each source frequency bin lands on an axis of length `m`, with weights.
fn axis_map(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    let wrap = |k: i64| k.rem_euclid(m as i64) as usize;
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..n {
        let k = fft::wavenumber(i, n);
        let even_nyquist = n.is_multiple_of(2) && k == -(n as i64) / 2;
        if m > n {
            if even_nyquist {
                // Split the Nyquist bin symmetrically so the result stays real.
                out.push((i, wrap(k), 0.5));
                out.push((i, wrap(-k), 0.5));
            } else {
                out.push((i, wrap(k), 1.0));
            }
        } else if m < n {
            let half = m as i64 / 2;
            if k.abs() < half || (m % 2 == 1 && k.abs() <= half) {
                out.push((i, wrap(k), 1.0));
            } else if m.is_multiple_of(2) && k.abs() == half {
                out.push((i, wrap(-half), 1.0));
            }
        } else {
            out.push((i, i, 1.0));
        }
    }
    out
}

/// Band-limited resampling of a periodic `[h, w]` field to `[h2, w2]`:
/// zero-padding in Fourier space when refining, truncation when coarsening.
pub fn fourier_resample(field: &[f64], (h, w): (usize, usize), (h2, w2): (usize, usize)) -> Vec<f64> {
    assert_eq!(field.len(), h * w, "field length does not match its shape");
    if (h, w) == (h2, w2) {
        return field.to_vec();
    }
    let mut src = fft::to_complex(field);
    fft::fft2_inplace(&mut src, h, w, Direction::Forward);
    let mut dst = vec![Complex64::new(0.0, 0.0); h2 * w2];
    let rows = axis_map(h, h2);
    let cols = axis_map(w, w2);
    for &(i, i2, wi) in &rows {
        for &(j, j2, wj) in &cols {
            dst[i2 * w2 + j2] += src[i * w + j] * (wi * wj);
        }
    }
    fft::fft2_inplace(&mut dst, h2, w2, Direction::Inverse);
    let scale = 1.0 / (h * w) as f64;
    dst.iter().map(|c| c.re * scale).collect()
}

/// Nearest-neighbour resampling of a binary mask.
pub fn nearest_mask(mask: &[u8], (h, w): (usize, usize), (h2, w2): (usize, usize)) -> Vec<u8> {
    let mut out = Vec::with_capacity(h2 * w2);
    for i in 0..h2 {
        let si = (i * h) / h2;
        for j in 0..w2 {
            let sj = (j * w) / w2;
            out.push(u8::from(mask[si * w + sj] != 0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_sizes_keep_constants() {
        let out = fourier_resample(&vec![2.5; 5 * 7], (5, 7), (9, 4));
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn mask_downsample_picks_even_points() {
        let mask: Vec<u8> = (0..16).map(|p| ((p / 4) % 2) as u8).collect();
        assert_eq!(nearest_mask(&mask, (4, 4), (2, 2)), vec![0, 0, 0, 0]);
        assert_eq!(nearest_mask(&mask, (4, 4), (8, 8)).len(), 64);
    }
}
