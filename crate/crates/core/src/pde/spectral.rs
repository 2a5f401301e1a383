use rustfft::num_complex::Complex64;

use crate::tensor::fft::{self, Direction};

/// Square periodic grid on `[0, 2pi)^2` with integer wavenumbers.
#[derive(Debug, Clone)]
pub struct Periodic2d {
    pub n: usize,
    /// Wavenumber of each FFT bin along one axis.
    pub k: Vec<f64>,
    /// `|k|^2` for every bin of the `[n, n]` spectrum.
    pub k2: Vec<f64>,
    /// 2/3-rule: true where a mode survives dealiasing.
    pub keep: Vec<bool>,
}

impl Periodic2d {
    pub fn new(n: usize) -> Self {
        let k: Vec<f64> = (0..n).map(|i| fft::wavenumber(i, n) as f64).collect();
        let mut k2 = vec![0.0; n * n];
        let mut keep = vec![false; n * n];
        let cutoff = n as f64 / 3.0;
        for i in 0..n {
            for j in 0..n {
                k2[i * n + j] = k[i] * k[i] + k[j] * k[j];
                keep[i * n + j] = k[i].abs() <= cutoff && k[j].abs() <= cutoff;
            }
        }
        Self { n, k, k2, keep }
    }

    pub fn dx(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.n as f64
    }

    /// Grid coordinate `2 pi i / n`.
    pub fn coord(&self, i: usize) -> f64 {
        i as f64 * self.dx()
    }

    /// Unnormalized forward transform of a real field.
    pub fn forward(&self, field: &[f64]) -> Vec<Complex64> {
        let mut buf = fft::to_complex(field);
        fft::fft2_inplace(&mut buf, self.n, self.n, Direction::Forward);
        buf
    }

    /// Inverse transform (with the `1/n^2` factor), keeping the real part.
    pub fn inverse(&self, spectrum: &[Complex64]) -> Vec<f64> {
        let mut buf = spectrum.to_vec();
        fft::fft2_inplace(&mut buf, self.n, self.n, Direction::Inverse);
        let s = 1.0 / (self.n * self.n) as f64;
        buf.iter().map(|c| c.re * s).collect()
    }

    pub fn dealias(&self, spectrum: &mut [Complex64]) {
        for (c, &keep) in spectrum.iter_mut().zip(&self.keep) {
            if !keep {
                *c = Complex64::new(0.0, 0.0);
            }
        }
    }

    /// Spectral derivative along axis 0 (`x`) or axis 1 (`y`).
    pub fn derivative(&self, spectrum: &[Complex64], axis: usize) -> Vec<Complex64> {
        let n = self.n;
        let mut out = spectrum.to_vec();
        for i in 0..n {
            for j in 0..n {
                let k = if axis == 0 { self.k[i] } else { self.k[j] };
                out[i * n + j] *= Complex64::new(0.0, k);
            }
        }
        out
    }
}
