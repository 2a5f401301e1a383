//! Unnormalized 2D FFTs over row-major `[h, w]` complex buffers.
//!
//! Callers apply their own normalization: the differentiable `fft2`/`ifft2`
//! ops scale by `1/sqrt(h*w)`, the PDE solvers use the `1/(h*w)` inverse.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Inverse,
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, Direction), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, dir: Direction) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry((n, dir))
            .or_insert_with(|| match dir {
                Direction::Forward => planner.plan_fft_forward(n),
                Direction::Inverse => planner.plan_fft_inverse(n),
            })
            .clone()
    })
}

/// In-place unnormalized 2D transform of every `[h, w]` slab in `buf`.
pub fn fft2_inplace(buf: &mut [Complex64], h: usize, w: usize, dir: Direction) {
    let slab = h * w;
    assert!(
        slab > 0 && buf.len().is_multiple_of(slab),
        "fft2: buffer is not a whole number of slabs"
    );
    let rows = plan(w, dir);
    let cols = plan(h, dir);
    let mut scratch = vec![Complex64::new(0.0, 0.0); slab];
    for field in buf.chunks_exact_mut(slab) {
        rows.process(field);
        transpose(field, &mut scratch, h, w);
        cols.process(&mut scratch);
        transpose(&scratch, field, w, h);
    }
}

/// In-place unnormalized 1D transform along the contiguous axis of length `n`.
pub fn fft1_inplace(buf: &mut [Complex64], n: usize, dir: Direction) {
    plan(n, dir).process(buf);
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Signed integer wavenumber for FFT bin `i` of an `n`-point transform.
pub fn wavenumber(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

pub fn to_complex(re: &[f64]) -> Vec<Complex64> {
    re.iter().map(|&x| Complex64::new(x, 0.0)).collect()
}

pub fn from_interleaved(data: &[f64]) -> Vec<Complex64> {
    data.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

pub fn to_interleaved(data: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len() * 2);
    for c in data {
        out.push(c.re);
        out.push(c.im);
    }
    out
}
