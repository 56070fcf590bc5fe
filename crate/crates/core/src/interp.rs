//! Kaiser-windowed sinc interpolation: fractional delays, integer-factor
//! upsampling and arbitrary-ratio resampling.

use std::f64::consts::PI;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Low-pass interpolation kernel `cutoff * sinc(cutoff * t)` under a Kaiser window
/// that spans `half_width` input samples each side.
#[derive(Debug, Clone, Copy)]
pub struct SincKernel {
    half_width: usize,
    beta: f64,
    cutoff: f64,
    norm: f64,
}

impl SincKernel {
    pub fn new(half_width: usize, beta: f64, cutoff: f64) -> Self {
        SincKernel {
            half_width,
            beta,
            cutoff,
            norm: 1.0 / bessel_i0(beta),
        }
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn eval(&self, t: f64) -> f64 {
        let h = self.half_width as f64;
        if t.abs() >= h {
            return 0.0;
        }
        let r = t / h;
        let w = bessel_i0(self.beta * (1.0 - r * r).sqrt()) * self.norm;
        self.cutoff * sinc(self.cutoff * t) * w
    }

    /// Tap weights for sampling the band-limited signal at `n - delay`, applied to
    /// `x[n - floor(delay) - half_width + j]` for `j` in `0..=2 * half_width`.
    pub fn delay_taps(&self, delay: f64) -> (isize, Vec<f64>) {
        let whole = delay.floor();
        let frac = delay - whole;
        let h = self.half_width as isize;
        let taps = (0..=2 * h)
            .map(|j| self.eval((h - j) as f64 - frac))
            .collect();
        (whole as isize + h, taps)
    }
}

impl Default for SincKernel {
    fn default() -> Self {
        SincKernel::new(32, 8.6, 1.0)
    }
}

/// Adds `gain * x(n - delay)` into `out[n]` for every `n` in `range`, where
/// `x` is treated as zero outside its support.
pub fn add_delayed(
    kernel: &SincKernel,
    x: &[f64],
    delay: f64,
    gain: f64,
    range: std::ops::Range<usize>,
    out: &mut [f64],
) {
    let (offset, taps) = kernel.delay_taps(delay);
    let len = x.len() as isize;
    for n in range {
        let base = n as isize - offset;
        let mut acc = 0.0;
        if base >= 0 && base + taps.len() as isize <= len {
            let src = &x[base as usize..base as usize + taps.len()];
            acc = src.iter().zip(&taps).map(|(a, b)| a * b).sum();
        } else {
            for (j, t) in taps.iter().enumerate() {
                let m = base + j as isize;
                if m >= 0 && m < len {
                    acc += x[m as usize] * t;
                }
            }
        }
        out[n] += gain * acc;
    }
}

/// Polyphase integer-factor interpolator.
#[derive(Debug, Clone)]
pub struct Upsampler {
    factor: usize,
    half_width: usize,
    /// `coeffs[p * taps + j]` weights input `n - half_width + 1 + j` for phase `p`.
    coeffs: Vec<f64>,
}

impl Upsampler {
    pub fn new(factor: usize, half_width: usize) -> Self {
        let kernel = SincKernel::new(half_width, 8.0, 1.0);
        let taps = 2 * half_width;
        let mut coeffs = Vec::with_capacity(factor * taps);
        for p in 0..factor {
            let frac = p as f64 / factor as f64;
            for j in 0..taps {
                coeffs.push(kernel.eval(frac + half_width as f64 - 1.0 - j as f64));
            }
        }
        Upsampler {
            factor,
            half_width,
            coeffs,
        }
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Appends the `factor` interpolated samples for every input index in `range`.
    pub fn process_range(&self, x: &[f64], range: std::ops::Range<usize>, out: &mut Vec<f64>) {
        let taps = 2 * self.half_width;
        let mut window = vec![0.0; taps];
        for n in range {
            let start = n as isize - self.half_width as isize + 1;
            for (j, w) in window.iter_mut().enumerate() {
                let m = start + j as isize;
                *w = if m >= 0 && (m as usize) < x.len() {
                    x[m as usize]
                } else {
                    0.0
                };
            }
            for phase in self.coeffs.chunks_exact(taps) {
                out.push(phase.iter().zip(&window).map(|(c, v)| c * v).sum());
            }
        }
    }
}

/// Band-limited resampling from `from_rate` to `to_rate`.
pub fn resample(x: &[f64], from_rate: f64, to_rate: f64) -> Vec<f64> {
    if (from_rate - to_rate).abs() < 1e-9 {
        return x.to_vec();
    }
    let ratio = from_rate / to_rate;
    let cutoff = (to_rate / from_rate).min(1.0) * 0.97;
    let half = (24.0 / cutoff).ceil() as usize;
    let kernel = SincKernel::new(half, 8.6, cutoff);
    let out_len = (x.len() as f64 / ratio).floor() as usize;
    (0..out_len)
        .map(|n| {
            let t = n as f64 * ratio;
            let centre = t.floor() as isize;
            let lo = (centre - half as isize + 1).max(0);
            let hi = (centre + half as isize).min(x.len() as isize - 1);
            (lo..=hi)
                .map(|m| x[m as usize] * kernel.eval(t - m as f64))
                .sum()
        })
        .collect()
}
