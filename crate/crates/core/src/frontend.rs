//! Digital front end: log-amp linearization, 64:1 decimation, framing and
//! power spectra.
//!
//! The acquisition chain samples each microphone at 1.4 Msps with a 12-bit
//! converter behind a logarithmic amplifier. Codes are mapped back to linear
//! amplitude through the inverse log curve, averaged in blocks of 64 to reach
//! 21 875 Hz, and cut into non-overlapping 2048-sample frames whose
//! Hann-windowed FFT gives a 1024-bin one-sided power spectrum.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Converter clock divided by cycles per conversion: 21 MHz / 15.
pub const ADC_RATE_HZ: u32 = 1_400_000;
pub const ADC_BITS: u32 = 12;
pub const ADC_CODE_MAX: u16 = (1 << ADC_BITS) - 1;
pub const DECIMATION: usize = 64;
/// Output rate of the decimator, 1.4 MHz / 64.
pub const SAMPLE_RATE_HZ: f64 = 21_875.0;
pub const FRAME_LEN: usize = 2048;
pub const PSD_BINS: usize = FRAME_LEN / 2;
/// Frequency spacing of the spectrum bins, 21 875 / 2048 Hz.
pub const BIN_WIDTH_HZ: f64 = SAMPLE_RATE_HZ / FRAME_LEN as f64;

/// Frequency of bin `k` in Hz.
pub fn bin_frequency(k: usize) -> f64 {
    k as f64 * BIN_WIDTH_HZ
}

/// Transfer curve of the logarithmic amplifier feeding the converter.
///
/// `code = alpha * ln(x / x_min)`, clamped to `[0, code_max]`, where
/// `alpha = code_max / ln(x_max / x_min)`. Acoustic pressure rides on the
/// quiescent `operating_point`, so zero pressure maps to the code of the
/// operating point and linearized samples are reported relative to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogAmpModel {
    /// Converter reference voltage (full scale), volts.
    pub v_ref: f64,
    pub code_max: u16,
    /// Log-curve slope in codes per neper.
    pub alpha: f64,
    /// Linear amplitude floor, mapped to code 0.
    pub x_min: f64,
    /// Quiescent linear level the AC signal is superimposed on.
    pub operating_point: f64,
}

impl Default for LogAmpModel {
    fn default() -> Self {
        LogAmpModel::new(1e-3, 1.0, 0.5).expect("default log-amp parameters are valid")
    }
}

impl LogAmpModel {
    /// Builds a 12-bit model spanning `[x_min, x_max]` biased at `operating_point`.
    pub fn new(x_min: f64, x_max: f64, operating_point: f64) -> Result<Self> {
        if !(x_min > 0.0 && x_max > x_min && x_max.is_finite()) {
            return Err(Error::InputDomain(format!(
                "log-amp range must satisfy 0 < x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if !(operating_point > x_min && operating_point < x_max) {
            return Err(Error::InputDomain(format!(
                "operating point {operating_point} outside ({x_min}, {x_max})"
            )));
        }
        let code_max = ADC_CODE_MAX;
        Ok(LogAmpModel {
            v_ref: 3.3,
            code_max,
            alpha: f64::from(code_max) / (x_max / x_min).ln(),
            x_min,
            operating_point,
        })
    }

    /// Linear amplitude that maps to `code_max`.
    pub fn x_max(&self) -> f64 {
        self.x_min * (f64::from(self.code_max) / self.alpha).exp()
    }

    /// Continuous (unquantized) code for linear amplitude `x`, clamped.
    pub fn forward(&self, x: f64) -> f64 {
        if x <= self.x_min {
            return 0.0;
        }
        (self.alpha * (x / self.x_min).ln()).min(f64::from(self.code_max))
    }

    /// Nearest integer code for `x`.
    pub fn quantize(&self, x: f64) -> u16 {
        self.forward(x).round() as u16
    }

    /// Linear amplitude for a (possibly fractional) code.
    pub fn inverse(&self, code: f64) -> f64 {
        self.x_min * (code / self.alpha).exp()
    }

    /// Width of one code step, in linear units, around amplitude `x`.
    pub fn lsb_at(&self, x: f64) -> f64 {
        x * ((1.0 / self.alpha).exp() - 1.0)
    }

    /// Positive AC swing available above the operating point.
    pub fn full_scale(&self) -> f64 {
        self.x_max() - self.operating_point
    }

    /// Maps a linear amplitude to full-scale units about the operating point.
    pub fn to_full_scale(&self, x: f64) -> f64 {
        (x - self.operating_point) / self.full_scale()
    }

    /// Inverse of [`to_full_scale`](Self::to_full_scale).
    pub fn from_full_scale(&self, s: f64) -> f64 {
        self.operating_point + s * self.full_scale()
    }
}

/// Maps an ADC code back to linear amplitude through the inverse log curve.
pub fn linearize(code: u16, model: &LogAmpModel) -> Result<f64> {
    if code > model.code_max {
        return Err(Error::InputDomain(format!(
            "ADC code {code} exceeds {}",
            model.code_max
        )));
    }
    Ok(model.inverse(f64::from(code)))
}

/// Accumulates one block of 64 linear samples into a single output sample.
pub fn decimate64(block: &[f64]) -> Result<f64> {
    decimate_block(block, DECIMATION)
}

/// Mean of `factor` consecutive samples.
pub fn decimate_block(block: &[f64], factor: usize) -> Result<f64> {
    if block.len() != factor || factor == 0 {
        return Err(Error::InputDomain(format!(
            "decimation block must hold {factor} samples, got {}",
            block.len()
        )));
    }
    let acc: f64 = block.iter().sum();
    Ok(acc / factor as f64)
}

/// Channel-interleaved burst of raw converter codes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAdcBlock {
    channel_count: usize,
    sample_rate: u32,
    /// Interleaved codes: `[ch0, ch1, .., chN, ch0, ..]`.
    codes: Vec<u16>,
}

impl RawAdcBlock {
    pub fn new(channel_count: usize, sample_rate: u32, codes: Vec<u16>) -> Result<Self> {
        if channel_count == 0 {
            return Err(Error::InputDomain("raw ADC block needs channels".into()));
        }
        if !codes.len().is_multiple_of(channel_count) {
            return Err(Error::InputDomain(format!(
                "{} codes do not split into {channel_count} channels",
                codes.len()
            )));
        }
        if let Some(bad) = codes.iter().find(|&&c| c > ADC_CODE_MAX) {
            return Err(Error::InputDomain(format!("ADC code {bad} exceeds {ADC_CODE_MAX}")));
        }
        Ok(RawAdcBlock {
            channel_count,
            sample_rate,
            codes,
        })
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.codes.len() / self.channel_count
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn into_codes(self) -> Vec<u16> {
        self.codes
    }

    pub fn channel(&self, ch: usize) -> impl Iterator<Item = u16> + '_ {
        self.codes
            .iter()
            .skip(ch)
            .step_by(self.channel_count)
            .copied()
    }
}

/// Linear multichannel stream at the decimated rate, in full-scale units.
#[derive(Debug, Clone, PartialEq)]
pub struct DecimatedStream {
    pub sample_rate: f64,
    pub effective_bits: u32,
    pub channels: Vec<Vec<f64>>,
}

impl DecimatedStream {
    pub fn new(sample_rate: f64, channels: Vec<Vec<f64>>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InputDomain("stream has no channels".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::InputDomain("channels differ in length".into()));
        }
        Ok(DecimatedStream {
            sample_rate,
            effective_bits: ADC_BITS,
            channels,
        })
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    /// Number of complete non-overlapping spectrum frames.
    pub fn frame_count(&self) -> usize {
        self.len() / FRAME_LEN
    }

    /// Time samples of frame `index` on every channel.
    pub fn frame(&self, index: usize) -> Option<Vec<&[f64]>> {
        let start = index * FRAME_LEN;
        let end = start + FRAME_LEN;
        if end > self.len() {
            return None;
        }
        Some(self.channels.iter().map(|c| &c[start..end]).collect())
    }
}

/// Streaming converter from raw codes to the decimated linear stream.
///
/// Carries partial decimation blocks across calls so a long recording can be
/// fed in arbitrary chunks.
#[derive(Clone)]
pub struct FrontEnd {
    model: LogAmpModel,
    factor: usize,
    table: Vec<f64>,
    acc: Vec<f64>,
    fill: usize,
}

impl fmt::Debug for FrontEnd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FrontEnd")
            .field("model", &self.model)
            .field("factor", &self.factor)
            .finish_non_exhaustive()
    }
}

impl FrontEnd {
    /// Front end for codes arriving at `input_rate`, which must be an integer
    /// multiple of the 21 875 Hz output rate.
    pub fn new(model: LogAmpModel, input_rate: u32, channel_count: usize) -> Result<Self> {
        let factor = decimation_factor(input_rate)?;
        if channel_count == 0 {
            return Err(Error::InputDomain("front end needs channels".into()));
        }
        let table = (0..=model.code_max)
            .map(|c| model.to_full_scale(model.inverse(f64::from(c))))
            .collect();
        Ok(FrontEnd {
            model,
            factor,
            table,
            acc: vec![0.0; channel_count],
            fill: 0,
        })
    }

    pub fn model(&self) -> &LogAmpModel {
        &self.model
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Accumulator word growth over the converter resolution.
    pub fn effective_bits(&self) -> u32 {
        ADC_BITS + self.factor.trailing_zeros()
    }

    /// Consumes interleaved codes and appends completed output samples to `out`.
    pub fn push_interleaved(&mut self, codes: &[u16], out: &mut [Vec<f64>]) -> Result<()> {
        let channels = self.acc.len();
        if out.len() != channels || !codes.len().is_multiple_of(channels) {
            return Err(Error::InputDomain(format!(
                "expected {channels}-channel interleaved codes"
            )));
        }
        let scale = 1.0 / self.factor as f64;
        for frame in codes.chunks_exact(channels) {
            for (acc, &code) in self.acc.iter_mut().zip(frame) {
                let lin = self.table.get(usize::from(code)).ok_or_else(|| {
                    Error::InputDomain(format!("ADC code {code} exceeds {}", self.model.code_max))
                })?;
                *acc += lin;
            }
            self.fill += 1;
            if self.fill == self.factor {
                for (acc, dst) in self.acc.iter_mut().zip(out.iter_mut()) {
                    dst.push(*acc * scale);
                    *acc = 0.0;
                }
                self.fill = 0;
            }
        }
        Ok(())
    }

    /// Converts a complete block; a trailing partial decimation block is dropped.
    pub fn process(model: LogAmpModel, block: &RawAdcBlock) -> Result<DecimatedStream> {
        let mut fe = FrontEnd::new(model, block.sample_rate(), block.channel_count())?;
        let mut out = vec![Vec::with_capacity(block.len() / fe.factor); block.channel_count()];
        fe.push_interleaved(block.codes(), &mut out)?;
        let mut stream = DecimatedStream::new(SAMPLE_RATE_HZ, out)?;
        stream.effective_bits = fe.effective_bits();
        Ok(stream)
    }
}

/// Decimation ratio that brings `input_rate` down to 21 875 Hz.
pub fn decimation_factor(input_rate: u32) -> Result<usize> {
    let out = SAMPLE_RATE_HZ as u32;
    if input_rate < out || !input_rate.is_multiple_of(out) {
        return Err(Error::InputDomain(format!(
            "input rate {input_rate} Hz is not an integer multiple of {out} Hz"
        )));
    }
    Ok((input_rate / out) as usize)
}

/// One-sided spectrum of a single channel frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpectrum {
    /// `|X[k]|^2` for k = 0..1023.
    pub psd: Vec<f64>,
    /// `arg X[k]` in radians.
    pub phase: Vec<f64>,
    pub bins: Vec<Complex64>,
}

/// Spectra of all channels for one 2048-sample frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumFrame {
    pub frame_index: usize,
    pub channels: Vec<ChannelSpectrum>,
}

impl SpectrumFrame {
    pub fn bin_width(&self) -> f64 {
        BIN_WIDTH_HZ
    }

    /// Start time of the frame in seconds.
    pub fn start_secs(&self) -> f64 {
        (self.frame_index * FRAME_LEN) as f64 / SAMPLE_RATE_HZ
    }

    /// Gain-compensated sum of the channel PSDs.
    pub fn combined_psd(&self, gains: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; PSD_BINS];
        for (ch, spec) in self.channels.iter().enumerate() {
            let w = gains.get(ch).map_or(1.0, |g| 1.0 / (g * g));
            for (o, p) in out.iter_mut().zip(&spec.psd) {
                *o += w * p;
            }
        }
        out
    }
}

/// Hann window, periodic form (`0.5 - 0.5 cos(2 pi n / N)`).
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Reusable FFT plan and window for 2048-sample frames.
#[derive(Clone)]
pub struct SpectrumAnalyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl fmt::Debug for SpectrumAnalyzer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectrumAnalyzer")
            .field("len", &self.window.len())
            .finish()
    }
}

impl Default for SpectrumAnalyzer {
    fn default() -> Self {
        SpectrumAnalyzer::new()
    }
}

impl SpectrumAnalyzer {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FRAME_LEN);
        SpectrumAnalyzer {
            fft,
            window: hann_window(FRAME_LEN),
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn compute(&self, frame: &[f64]) -> Result<ChannelSpectrum> {
        if frame.len() != FRAME_LEN {
            return Err(Error::InputDomain(format!(
                "spectrum frame must hold {FRAME_LEN} samples, got {}",
                frame.len()
            )));
        }
        let mut buf: Vec<Complex64> = frame
            .iter()
            .zip(&self.window)
            .map(|(&x, &w)| Complex64::new(x * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf.truncate(PSD_BINS);
        Ok(ChannelSpectrum {
            psd: buf.iter().map(|c| c.norm_sqr()).collect(),
            phase: buf.iter().map(|c| c.arg()).collect(),
            bins: buf,
        })
    }

    /// Spectra of every channel of frame `index` of `stream`.
    pub fn frame(&self, stream: &DecimatedStream, index: usize) -> Option<SpectrumFrame> {
        let samples = stream.frame(index)?;
        let channels = samples
            .into_iter()
            .map(|s| self.compute(s).expect("frame slices are FRAME_LEN long"))
            .collect();
        Some(SpectrumFrame {
            frame_index: index,
            channels,
        })
    }
}

/// Hann-windowed power and phase spectrum of one 2048-sample frame.
pub fn compute_spectrum(frame: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = SpectrumAnalyzer::new().compute(frame)?;
    Ok((spec.psd, spec.phase))
}

/// Scales a PSD to unit L1 norm.
pub fn normalize_psd(psd: &[f64]) -> Result<Vec<f64>> {
    if psd.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::InputDomain("PSD bins must be finite and non-negative".into()));
    }
    let total: f64 = psd.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateInput("PSD has no power".into()));
    }
    Ok(psd.iter().map(|p| p / total).collect())
}
