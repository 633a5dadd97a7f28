//! Radix-2 FFT over `f64` with a naive DFT fallback for non-power-of-two
//! lengths (used by spectral metrics on systems like Lorenz-96 whose site
//! count is not a power of two).

use crate::{Error, Result};
use num_complex::Complex64;

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place iterative Cooley-Tukey FFT. `n` must be a power of two.
pub fn fft(buf: &mut [Complex64]) {
    let n = buf.len();
    debug_assert!(is_power_of_two(n));
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = buf[i + k];
                let v = buf[i + k + len / 2] * w;
                buf[i + k] = u + v;
                buf[i + k + len / 2] = u - v;
                w *= wlen;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// In-place inverse FFT (normalized by 1/n).
pub fn ifft(buf: &mut [Complex64]) {
    for v in buf.iter_mut() {
        *v = v.conj();
    }
    fft(buf);
    let n = buf.len() as f64;
    for v in buf.iter_mut() {
        *v = v.conj() / n;
    }
}

/// Forward DFT of a real signal, returning the `m/2 + 1` non-redundant bins.
/// Requires a power-of-two length.
pub fn fft_real(x: &[f64]) -> Result<Vec<Complex64>> {
    let m = x.len();
    if !is_power_of_two(m) {
        return Err(Error::Dimension(format!(
            "fft_real requires a power-of-two length, got {m}"
        )));
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft(&mut buf);
    buf.truncate(m / 2 + 1);
    Ok(buf)
}

/// Full complex spectrum of a real signal of any length. Power-of-two
/// lengths take the radix-2 path, anything else the O(m^2) DFT.
pub fn dft_real_full(x: &[f64]) -> Vec<Complex64> {
    let m = x.len();
    if is_power_of_two(m) {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft(&mut buf);
        return buf;
    }
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, &v) in x.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / m as f64;
            acc += Complex64::new(ang.cos(), ang.sin()) * v;
        }
        *o = acc;
    }
    out
}

/// Energy spectrum |X_k|^2 over all m bins.
pub fn power_spectrum(x: &[f64]) -> Vec<f64> {
    dft_real_full(x).iter().map(|c| c.norm_sqr()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let m = x.len();
        (0..m)
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, &v) in x.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / m as f64;
                    acc += Complex64::new(ang.cos(), ang.sin()) * v;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn constant_signal_concentrates_in_bin_zero() {
        let x = vec![2.5; 16];
        let s = fft_real(&x).unwrap();
        assert!((s[0].re - 2.5 * 16.0).abs() < 1e-12);
        assert!(s[0].im.abs() < 1e-12);
        for b in &s[1..] {
            assert!(b.norm() < 1e-10);
        }
    }

    #[test]
    fn pure_cosine_hits_single_bin() {
        let m = 32;
        let x: Vec<f64> = (0..m)
            .map(|i| (2.0 * std::f64::consts::PI * 3.0 * i as f64 / m as f64).cos())
            .collect();
        let s = fft_real(&x).unwrap();
        for (k, b) in s.iter().enumerate() {
            if k == 3 {
                assert!((b.norm() - m as f64 / 2.0).abs() < 1e-9);
            } else {
                assert!(b.norm() < 1e-9, "bin {k} leaked {}", b.norm());
            }
        }
    }

    #[test]
    fn parseval_against_naive_dft() {
        let mut rng = crate::rng::Rng64::new(11);
        let m = 64;
        let x = rng.normal_vec(m);
        let fast = dft_real_full(&x);
        let slow = naive_dft(&x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-9);
        }
        let lhs: f64 = fast.iter().map(|c| c.norm_sqr()).sum();
        let rhs: f64 = m as f64 * x.iter().map(|v| v * v).sum::<f64>();
        assert!((lhs - rhs).abs() / rhs < 1e-10);
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(fft_real(&[0.0; 12]).is_err());
    }

    #[test]
    fn ifft_roundtrip() {
        let mut rng = crate::rng::Rng64::new(5);
        let x = rng.normal_vec(32);
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft(&mut buf);
        ifft(&mut buf);
        for (a, b) in buf.iter().zip(&x) {
            assert!((a.re - b).abs() < 1e-12);
            assert!(a.im.abs() < 1e-12);
        }
    }
}
