//! Small DSP utilities: unitary transforms and power helpers.

use std::cell::RefCell;

use rustfft::FftPlanner;

use crate::Cplx;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place unitary DFT (`exp(-j..)`, scaled by `1/sqrt(n)`).
pub(crate) fn dft_unitary(buf: &mut [Cplx]) {
    transform(buf, false);
}

/// In-place unitary inverse DFT (`exp(+j..)`, scaled by `1/sqrt(n)`).
pub(crate) fn idft_unitary(buf: &mut [Cplx]) {
    transform(buf, true);
}

fn transform(buf: &mut [Cplx], inverse: bool) {
    let n = buf.len();
    if n == 0 {
        return;
    }
    let fft = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    });
    fft.process(buf);
    let s = 1.0 / (n as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= s;
    }
}

pub(crate) fn mean_power(x: &[Cplx]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len() as f64
}

/// `sum(conj(a) * b)`.
pub(crate) fn inner(a: &[Cplx], b: &[Cplx]) -> Cplx {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub(crate) fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}
