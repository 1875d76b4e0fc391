//! Complex FFT for the spectral Burgers solver: iterative radix-2 when the
//! length is a power of two, naive DFT otherwise.

use num_complex::Complex64;

pub fn fft(buf: &mut Vec<Complex64>) {
    transform(buf, false);
}

pub fn ifft(buf: &mut Vec<Complex64>) {
    transform(buf, true);
    let n = buf.len() as f64;
    for v in buf.iter_mut() {
        *v /= n;
    }
}

fn transform(buf: &mut Vec<Complex64>, inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        *buf = naive_dft(buf, inverse);
    }
}

fn radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let shift = n.leading_zeros() + 1;
    for i in 0..n {
        let j = i.reverse_bits() >> shift;
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut w = Complex64::new(1.0, 0.0);
            for i in 0..len / 2 {
                let u = buf[start + i];
                let v = buf[start + i + len / 2] * w;
                buf[start + i] = u + v;
                buf[start + i + len / 2] = u - v;
                w *= wlen;
            }
        }
        len <<= 1;
    }
}

fn naive_dft(buf: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = buf.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, &v) in buf.iter().enumerate() {
                let ang = sign * 2.0 * std::f64::consts::PI * (k * j % n) as f64 / n as f64;
                acc += v * Complex64::new(ang.cos(), ang.sin());
            }
            acc
        })
        .collect()
}

/// Signed FFT-order wavenumber index for bin j of n.
pub fn freq_index(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}
