//! Ground-truth scene generation.
//!
//! A source waveform (harmonic comb plus band-limited broadband noise) is
//! propagated to each microphone with a fractional delay, `1/r` spreading and
//! the microphone gain; background noise is added; the result is upsampled
//! to the converter rate, passed through the log-amp transfer curve and
//! quantized to 12-bit codes with dither.

use std::f64::consts::PI;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::{PulseRecording, PulseRecordingSet};
use crate::doa::ENERGY_WINDOW_LEN;
use crate::error::{Error, Result};
use crate::frontend::{DecimatedStream, FrontEnd, LogAmpModel, RawAdcBlock, ADC_RATE_HZ, SAMPLE_RATE_HZ};
use crate::geometry::{centroid, distance, Point3, SPEED_OF_SOUND};
use crate::interp::{add_delayed, SincKernel, Upsampler};

pub const NYQUIST_HZ: f64 = SAMPLE_RATE_HZ / 2.0;
/// Range below which spreading loss is not applied.
pub const REFERENCE_RANGE: f64 = 1.0;
pub const MIN_RANGE: f64 = 0.1;
pub const MAX_RANGE: f64 = 1000.0;
pub const PULSE_DURATION_S: f64 = 0.005;
pub const PULSE_PADDING_S: f64 = 0.1;
/// Corner of the analog high-pass ahead of the log amplifier.
pub const ANALOG_HIGHPASS_HZ: f64 = 80.0;
/// Fraction of clipped samples above which the converter is reported saturated.
pub const SATURATION_WARN_FRACTION: f64 = 0.01;

/// Spectral shape of a drone's acoustic emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpectrumSpec {
    pub fundamental_hz: f64,
    pub harmonic_count: usize,
    /// Level drop per doubling of harmonic number, dB.
    pub harmonic_rolloff_db: f64,
    /// Broadband power relative to the harmonic power, dB; `None` disables it.
    pub broadband_level_db: Option<f64>,
    pub band_extent_hz: f64,
}

impl SourceSpectrumSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fundamental_hz > 0.0) {
            return Err(Error::InputDomain("fundamental must be positive".into()));
        }
        if !(self.band_extent_hz > 0.0 && self.band_extent_hz <= NYQUIST_HZ) {
            return Err(Error::InputDomain(format!(
                "band extent must lie in (0, {NYQUIST_HZ}] Hz"
            )));
        }
        if self.harmonic_count == 0 {
            return Err(Error::InputDomain("need at least one harmonic".into()));
        }
        Ok(())
    }
}

/// Large airframe: low blade-pass fundamental, energy concentrated low.
pub fn quad_large() -> SourceSpectrumSpec {
    SourceSpectrumSpec {
        fundamental_hz: 110.0,
        harmonic_count: 30,
        harmonic_rolloff_db: 9.0,
        broadband_level_db: Some(-30.0),
        band_extent_hz: 3000.0,
    }
}

pub fn quad_mid() -> SourceSpectrumSpec {
    SourceSpectrumSpec {
        fundamental_hz: 157.0,
        harmonic_count: 35,
        harmonic_rolloff_db: 6.0,
        broadband_level_db: Some(-25.0),
        band_extent_hz: 6000.0,
    }
}

/// Small airframe: higher fundamental and more high-frequency power.
pub fn quad_small() -> SourceSpectrumSpec {
    SourceSpectrumSpec {
        fundamental_hz: 229.0,
        harmonic_count: 45,
        harmonic_rolloff_db: 3.0,
        broadband_level_db: Some(-20.0),
        band_extent_hz: 10_000.0,
    }
}

pub const PRESET_NAMES: [&str; 3] = ["quad-large", "quad-mid", "quad-small"];

pub fn preset(name: &str) -> Option<SourceSpectrumSpec> {
    match name {
        "quad-large" => Some(quad_large()),
        "quad-mid" => Some(quad_mid()),
        "quad-small" => Some(quad_small()),
        _ => None,
    }
}

/// Source waveform at 21 875 Hz with unit RMS.
///
/// Harmonics at or above Nyquist are dropped from the series.
pub fn synth_source(spec: &SourceSpectrumSpec, duration_s: f64, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let len = (duration_s * SAMPLE_RATE_HZ).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; len];
    let mut harmonic_power = 0.0;
    for k in 1..=spec.harmonic_count {
        let f = k as f64 * spec.fundamental_hz;
        if f >= NYQUIST_HZ {
            break;
        }
        let amp = 10f64.powf(-spec.harmonic_rolloff_db * (k as f64).log2() / 20.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        harmonic_power += amp * amp / 2.0;
        let w = 2.0 * PI * f / SAMPLE_RATE_HZ;
        for (n, o) in out.iter_mut().enumerate() {
            *o += amp * (w * n as f64 + phase).sin();
        }
    }
    if let Some(level_db) = spec.broadband_level_db {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let white: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
        let kernel = SincKernel::new(32, 8.6, spec.band_extent_hz / NYQUIST_HZ);
        let mut shaped = vec![0.0; len];
        add_delayed(&kernel, &white, 0.0, 1.0, 0..len, &mut shaped);
        let p: f64 = shaped.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64;
        if p > 0.0 {
            let gain = (harmonic_power * 10f64.powf(level_db / 10.0) / p).sqrt();
            for (o, s) in out.iter_mut().zip(&shaped) {
                *o += gain * s;
            }
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub position: Point3,
}

/// Source position at time `t`, linearly interpolated and held at the ends.
pub fn position_at(trajectory: &[TrajectoryPoint], t: f64) -> Point3 {
    match trajectory {
        [] => [0.0; 3],
        [only] => only.position,
        _ => {
            if t <= trajectory[0].t {
                return trajectory[0].position;
            }
            for w in trajectory.windows(2) {
                if t <= w[1].t {
                    let span = (w[1].t - w[0].t).max(f64::MIN_POSITIVE);
                    let a = (t - w[0].t) / span;
                    return [0, 1, 2].map(|k| w[0].position[k] + a * (w[1].position[k] - w[0].position[k]));
                }
            }
            trajectory[trajectory.len() - 1].position
        }
    }
}

/// Per-microphone signals `g_i s(t - r_i / c) / max(r_i, 1 m)`. The source
/// position is held constant over each 200 ms segment.
pub fn propagate(
    signal: &[f64],
    trajectory: &[TrajectoryPoint],
    mic_positions: &[Point3],
    gains: &[f64],
    c: f64,
) -> Result<Vec<Vec<f64>>> {
    if gains.len() != mic_positions.len() {
        return Err(Error::Geometry("one gain per microphone required".into()));
    }
    if trajectory.is_empty() {
        return Err(Error::Geometry("source trajectory is empty".into()));
    }
    let kernel = SincKernel::default();
    let len = signal.len();
    let mut out = vec![vec![0.0; len]; mic_positions.len()];
    let mut start = 0;
    while start < len {
        let end = (start + ENERGY_WINDOW_LEN).min(len);
        let mid_t = (start + end) as f64 / 2.0 / SAMPLE_RATE_HZ;
        let src = position_at(trajectory, mid_t);
        for ((mic, g), y) in mic_positions.iter().zip(gains).zip(out.iter_mut()) {
            let r = distance(&src, mic);
            if !(MIN_RANGE..=MAX_RANGE).contains(&r) {
                return Err(Error::Geometry(format!(
                    "source at {r:.3} m from a microphone, outside [{MIN_RANGE}, {MAX_RANGE}] m"
                )));
            }
            let delay = r / c * SAMPLE_RATE_HZ;
            add_delayed(&kernel, signal, delay, g / r.max(REFERENCE_RANGE), start..end, y);
        }
        start = end;
    }
    Ok(out)
}

/// Adds independent white Gaussian noise of standard deviation `sigma` to each channel.
pub fn add_noise(channels: &mut [Vec<f64>], sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for ch in channels.iter_mut() {
        for v in ch.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
}

/// Second-order Butterworth high-pass applied in place, standing in for the
/// analog input filter.
pub fn analog_highpass(x: &mut [f64], cutoff_hz: f64, sample_rate: f64) {
    let w0 = 2.0 * PI * cutoff_hz / sample_rate;
    let alpha = w0.sin() / 2f64.sqrt();
    let cw = w0.cos();
    let a0 = 1.0 + alpha;
    let b0 = (1.0 + cw) / 2.0 / a0;
    let b1 = -(1.0 + cw) / a0;
    let a1 = -2.0 * cw / a0;
    let a2 = (1.0 - alpha) / a0;
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let y = b0 * *v + b1 * x1 + b0 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = *v;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Gain staging and converter settings for ADC emulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcSettings {
    pub model: LogAmpModel,
    /// Acoustic amplitude that drives the converter to full scale.
    pub full_scale: f64,
    pub adc_rate: u32,
}

impl AdcSettings {
    /// 1.4 Msps per channel for up to three microphones; with six, each
    /// converter alternates between two inputs at 700 ksps.
    pub fn for_channels(channels: usize) -> Self {
        AdcSettings {
            model: LogAmpModel::default(),
            full_scale: 4.0,
            adc_rate: if channels <= 3 { ADC_RATE_HZ } else { ADC_RATE_HZ / 2 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcReport {
    pub samples: u64,
    pub clipped: u64,
}

impl AdcReport {
    pub fn clipped_fraction(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.clipped as f64 / self.samples as f64
        }
    }

    pub fn saturated(&self) -> bool {
        self.clipped_fraction() > SATURATION_WARN_FRACTION
    }
}

/// Streams interleaved converter codes for `signals` (21 875 Hz, acoustic
/// units) to `sink`, in chunks.
pub fn logamp_adc_stream<F>(signals: &[Vec<f64>], settings: &AdcSettings, seed: u64, mut sink: F) -> Result<AdcReport>
where
    F: FnMut(&[u16]) -> Result<()>,
{
    let factor = crate::frontend::decimation_factor(settings.adc_rate)?;
    let channels = signals.len();
    let len = signals.first().map_or(0, Vec::len);
    if signals.iter().any(|s| s.len() != len) {
        return Err(Error::InputDomain("channels differ in length".into()));
    }
    let up = Upsampler::new(factor, 8);
    let model = &settings.model;
    let code_max = f64::from(model.code_max);
    let (lo, hi) = (model.x_min, model.x_max());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AdcReport { samples: 0, clipped: 0 };
    const CHUNK: usize = 512;
    let mut upsampled = vec![Vec::with_capacity(CHUNK * factor); channels];
    let mut codes = Vec::with_capacity(CHUNK * factor * channels);
    let mut start = 0;
    while start < len {
        let end = (start + CHUNK).min(len);
        for (buf, sig) in upsampled.iter_mut().zip(signals) {
            buf.clear();
            up.process_range(sig, start..end, buf);
        }
        codes.clear();
        for j in 0..(end - start) * factor {
            for buf in &upsampled {
                let x = model.from_full_scale(buf[j] / settings.full_scale);
                if x < lo || x > hi {
                    report.clipped += 1;
                }
                let dithered = model.forward(x) + rng.random_range(-0.5..0.5);
                codes.push(dithered.round().clamp(0.0, code_max) as u16);
            }
        }
        report.samples += codes.len() as u64;
        sink(&codes)?;
        start = end;
    }
    if report.saturated() {
        warn!(
            "converter saturated on {:.1}% of samples",
            100.0 * report.clipped_fraction()
        );
    }
    Ok(report)
}

/// Whole converter output as one block.
pub fn logamp_adc(signals: &[Vec<f64>], settings: &AdcSettings, seed: u64) -> Result<(RawAdcBlock, AdcReport)> {
    let mut all = Vec::new();
    let report = logamp_adc_stream(signals, settings, seed, |c| {
        all.extend_from_slice(c);
        Ok(())
    })?;
    Ok((RawAdcBlock::new(signals.len(), settings.adc_rate, all)?, report))
}

/// Converter emulation followed directly by the front end, without holding
/// the full-rate code stream in memory.
pub fn adc_to_decimated(signals: &[Vec<f64>], settings: &AdcSettings, seed: u64) -> Result<DecimatedStream> {
    let mut fe = FrontEnd::new(settings.model, settings.adc_rate, signals.len())?;
    let mut out = vec![Vec::with_capacity(signals.first().map_or(0, Vec::len)); signals.len()];
    logamp_adc_stream(signals, settings, seed, |codes| fe.push_interleaved(codes, &mut out))?;
    // Back to acoustic units.
    for ch in out.iter_mut() {
        ch.iter_mut().for_each(|v| *v *= settings.full_scale);
    }
    let mut stream = DecimatedStream::new(SAMPLE_RATE_HZ, out)?;
    stream.effective_bits = fe.effective_bits();
    Ok(stream)
}

/// Raised-cosine click of `PULSE_DURATION_S`, peak 1.
pub fn raised_cosine_click() -> Vec<f64> {
    let n = (PULSE_DURATION_S * SAMPLE_RATE_HZ).round() as usize;
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// One recording segment per pulse source: a click propagated to every
/// microphone with 100 ms of silence on either side.
pub fn pulse_scene(
    pulse_positions: &[Point3],
    mic_positions: &[Point3],
    gains: &[f64],
    c: f64,
) -> Result<PulseRecordingSet> {
    let centre = centroid(mic_positions);
    for (i, p) in pulse_positions.iter().enumerate() {
        let r = distance(p, &centre);
        if !(0.5..=5.0).contains(&r) {
            return Err(Error::InputDomain(format!(
                "pulse {i} is {r:.2} m from the array, outside 0.5-5 m"
            )));
        }
        if pulse_positions[..i].iter().any(|q| distance(p, q) < 1e-6) {
            return Err(Error::Geometry(format!("pulse {i} coincides with an earlier pulse")));
        }
    }
    let click = raised_cosine_click();
    let pad = (PULSE_PADDING_S * SAMPLE_RATE_HZ).round() as usize;
    let max_delay = mic_positions
        .iter()
        .flat_map(|m| pulse_positions.iter().map(move |p| distance(p, m)))
        .fold(0.0, f64::max)
        / c
        * SAMPLE_RATE_HZ;
    let len = pad + max_delay.ceil() as usize + click.len() + pad;
    let pulses = pulse_positions
        .iter()
        .map(|p| {
            let mut source = vec![0.0; len];
            source[pad..pad + click.len()].copy_from_slice(&click);
            // Emission time is the padding offset; shift so the nearest
            // arrival lands after the leading silence.
            let channels = propagate(
                &source,
                &[TrajectoryPoint { t: 0.0, position: *p }],
                mic_positions,
                gains,
                c,
            )?;
            Ok(PulseRecording { channels })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PulseRecordingSet {
        sample_rate: SAMPLE_RATE_HZ,
        pulses,
    })
}

/// Concatenates pulse segments into one continuous multichannel stream.
pub fn concatenate_pulses(set: &PulseRecordingSet) -> Vec<Vec<f64>> {
    let m = set.channel_count();
    let mut out = vec![Vec::new(); m];
    for p in &set.pulses {
        for (o, c) in out.iter_mut().zip(&p.channels) {
            o.extend_from_slice(c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Drone,
    Noise,
    Pulses,
}

impl FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drone" => Ok(SceneKind::Drone),
            "noise" => Ok(SceneKind::Noise),
            "pulses" => Ok(SceneKind::Pulses),
            other => Err(Error::Configuration(format!("unknown scene kind `{other}`"))),
        }
    }
}

/// Everything needed to render a scene deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub label: Option<String>,
    pub mic_positions: Vec<Point3>,
    pub mic_gains: Vec<f64>,
    pub source: Option<SourceSpectrumSpec>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub pulse_positions: Vec<Point3>,
    /// Background noise standard deviation in dB re unit source RMS at 1 m.
    pub noise_db: Option<f64>,
    /// Analog high-pass corner; `None` bypasses the filter.
    pub highpass_hz: Option<f64>,
    pub duration_s: f64,
    pub seed: u64,
    pub speed_of_sound: f64,
    pub full_scale: f64,
    pub adc_rate: u32,
}

/// Equilateral triangle with the given side, vertex 0 on the +x axis.
pub fn equilateral_array(side: f64) -> Vec<Point3> {
    let r = side / 3f64.sqrt();
    (0..3)
        .map(|i| {
            let a = (f64::from(i) * 120.0).to_radians();
            [r * a.cos(), r * a.sin(), 0.0]
        })
        .collect()
}

impl SceneConfig {
    /// Stationary drone preset at `position` around a 0.5 m equilateral array.
    pub fn drone(preset_name: &str, position: Point3, duration_s: f64, seed: u64) -> Result<Self> {
        let source = preset(preset_name)
            .ok_or_else(|| Error::Configuration(format!("unknown preset `{preset_name}`")))?;
        Ok(SceneConfig {
            kind: SceneKind::Drone,
            label: Some(preset_name.to_owned()),
            source: Some(source),
            trajectory: vec![TrajectoryPoint { t: 0.0, position }],
            ..SceneConfig::base(duration_s, seed)
        })
    }

    pub fn noise_only(noise_db: f64, duration_s: f64, seed: u64) -> Self {
        SceneConfig {
            kind: SceneKind::Noise,
            noise_db: Some(noise_db),
            ..SceneConfig::base(duration_s, seed)
        }
    }

    fn base(duration_s: f64, seed: u64) -> Self {
        SceneConfig {
            kind: SceneKind::Drone,
            label: None,
            mic_positions: equilateral_array(0.5),
            mic_gains: vec![1.0; 3],
            source: None,
            trajectory: Vec::new(),
            pulse_positions: Vec::new(),
            noise_db: None,
            highpass_hz: Some(ANALOG_HIGHPASS_HZ),
            duration_s,
            seed,
            speed_of_sound: SPEED_OF_SOUND,
            full_scale: 4.0,
            adc_rate: ADC_RATE_HZ,
        }
    }

    pub fn adc_settings(&self) -> AdcSettings {
        AdcSettings {
            model: LogAmpModel::default(),
            full_scale: self.full_scale,
            adc_rate: self.adc_rate,
        }
    }

    /// Parses the `key = value` scene description format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SceneConfig::base(10.0, 0);
        let mut custom = SourceSpectrumSpec {
            fundamental_hz: 0.0,
            harmonic_count: 20,
            harmonic_rolloff_db: 6.0,
            broadband_level_db: None,
            band_extent_hz: NYQUIST_HZ,
        };
        let mut has_custom = false;
        let mut adc_rate = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Configuration(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Configuration(format!("line {}: invalid {what} `{value}`", lineno + 1));
            let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad(key));
            match key {
                "kind" => cfg.kind = value.parse()?,
                "label" => cfg.label = Some(value.to_owned()),
                "preset" => {
                    cfg.source = Some(preset(value).ok_or_else(|| bad("preset"))?);
                    cfg.label.get_or_insert_with(|| value.to_owned());
                }
                "fundamental_hz" => {
                    custom.fundamental_hz = num(value)?;
                    has_custom = true;
                }
                "harmonic_count" => custom.harmonic_count = value.parse().map_err(|_| bad(key))?,
                "harmonic_rolloff_db" => custom.harmonic_rolloff_db = num(value)?,
                "broadband_level_db" => custom.broadband_level_db = Some(num(value)?),
                "band_extent_hz" => custom.band_extent_hz = num(value)?,
                "mics" => cfg.mic_positions = parse_points(value).map_err(|_| bad(key))?,
                "gains" => {
                    cfg.mic_gains = value.split(',').map(num).collect::<Result<_>>()?;
                }
                "source" => {
                    let p = parse_point(value).map_err(|_| bad(key))?;
                    cfg.trajectory = vec![TrajectoryPoint { t: 0.0, position: p }];
                }
                "trajectory" => {
                    cfg.trajectory = value
                        .split(';')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| {
                            let (t, p) = s.split_once(':').ok_or(())?;
                            Ok(TrajectoryPoint {
                                t: t.trim().parse().map_err(|_| ())?,
                                position: parse_point(p)?,
                            })
                        })
                        .collect::<std::result::Result<_, ()>>()
                        .map_err(|_| bad(key))?;
                }
                "pulses" => cfg.pulse_positions = parse_points(value).map_err(|_| bad(key))?,
                "noise_db" => cfg.noise_db = Some(num(value)?),
                "highpass_hz" => cfg.highpass_hz = Some(num(value)?).filter(|f| *f > 0.0),
                "duration" | "duration_s" => cfg.duration_s = num(value)?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key))?,
                "speed_of_sound" => cfg.speed_of_sound = num(value)?,
                "full_scale" => cfg.full_scale = num(value)?,
                "adc_rate" => adc_rate = Some(value.parse().map_err(|_| bad(key))?),
                other => {
                    return Err(Error::Configuration(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        if has_custom {
            custom.validate()?;
            cfg.source = Some(custom);
        }
        if cfg.mic_gains.len() != cfg.mic_positions.len() {
            if cfg.mic_gains.iter().all(|&g| g == 1.0) {
                cfg.mic_gains = vec![1.0; cfg.mic_positions.len()];
            } else {
                return Err(Error::Configuration("one gain per microphone required".into()));
            }
        }
        cfg.adc_rate = adc_rate.unwrap_or(AdcSettings::for_channels(cfg.mic_positions.len()).adc_rate);
        match cfg.kind {
            SceneKind::Drone if cfg.source.is_none() || cfg.trajectory.is_empty() => Err(
                Error::Configuration("drone scene needs a preset or source spectrum and a source position".into()),
            ),
            SceneKind::Pulses if cfg.pulse_positions.is_empty() => {
                Err(Error::Configuration("pulse scene needs pulse positions".into()))
            }
            _ => Ok(cfg),
        }
    }

    /// Acoustic signals at each microphone (21 875 Hz), noise included.
    pub fn render_analog(&self) -> Result<Vec<Vec<f64>>> {
        let mut channels = match self.kind {
            SceneKind::Drone => {
                let spec = self
                    .source
                    .as_ref()
                    .ok_or_else(|| Error::Configuration("drone scene without source".into()))?;
                let s = synth_source(spec, self.duration_s, self.seed)?;
                propagate(&s, &self.trajectory, &self.mic_positions, &self.mic_gains, self.speed_of_sound)?
            }
            SceneKind::Noise => {
                let len = (self.duration_s * SAMPLE_RATE_HZ).round() as usize;
                vec![vec![0.0; len]; self.mic_positions.len()]
            }
            SceneKind::Pulses => concatenate_pulses(&self.render_pulses()?),
        };
        if let Some(db) = self.noise_db {
            add_noise(&mut channels, 10f64.powf(db / 20.0), self.seed ^ 0x6e6f_6973_6521);
        }
        if let Some(fc) = self.highpass_hz {
            for ch in channels.iter_mut() {
                analog_highpass(ch, fc, SAMPLE_RATE_HZ);
            }
        }
        Ok(channels)
    }

    pub fn render_pulses(&self) -> Result<PulseRecordingSet> {
        pulse_scene(&self.pulse_positions, &self.mic_positions, &self.mic_gains, self.speed_of_sound)
    }

    /// Rendered scene through the converter and front end.
    pub fn render_decimated(&self) -> Result<DecimatedStream> {
        adc_to_decimated(&self.render_analog()?, &self.adc_settings(), self.seed ^ 0xadc)
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            kind: self.kind.clone(),
            label: self.label.clone(),
            mic_positions: self.mic_positions.clone(),
            mic_gains: self.mic_gains.clone(),
            trajectory: self.trajectory.clone(),
            pulse_positions: self.pulse_positions.clone(),
            duration_s: self.duration_s,
            seed: self.seed,
            speed_of_sound: self.speed_of_sound,
            sample_rate: SAMPLE_RATE_HZ,
            adc_rate: self.adc_rate,
        }
    }
}

/// Ground truth written next to simulated recordings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub kind: SceneKind,
    pub label: Option<String>,
    pub mic_positions: Vec<Point3>,
    pub mic_gains: Vec<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub pulse_positions: Vec<Point3>,
    pub duration_s: f64,
    pub seed: u64,
    pub speed_of_sound: f64,
    pub sample_rate: f64,
    pub adc_rate: u32,
}

fn parse_point(s: &str) -> std::result::Result<Point3, ()> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| ()))
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        [x, y] => Ok([*x, *y, 0.0]),
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(()),
    }
}

fn parse_points(s: &str) -> std::result::Result<Vec<Point3>, ()> {
    s.split(';').filter(|p| !p.trim().is_empty()).map(parse_point).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::pair_delay;
    use crate::frontend::{bin_frequency, compute_spectrum, BIN_WIDTH_HZ};

    fn band_power(psd: &[f64], f: f64) -> f64 {
        let k = (f / BIN_WIDTH_HZ).round() as usize;
        psd[k - 3..=k + 3].iter().sum()
    }

    fn mean_psd(x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; 1024];
        let frames = x.len() / 2048;
        for f in 0..frames {
            let (psd, _) = compute_spectrum(&x[f * 2048..(f + 1) * 2048]).unwrap();
            acc.iter_mut().zip(&psd).for_each(|(a, p)| *a += p);
        }
        acc
    }

    #[test]
    fn pure_tone_source() {
        let spec = SourceSpectrumSpec {
            fundamental_hz: bin_frequency(40) + 2.0,
            harmonic_count: 1,
            harmonic_rolloff_db: 0.0,
            broadband_level_db: None,
            band_extent_hz: 5000.0,
        };
        let s = synth_source(&spec, 1.0, 3).unwrap();
        let rms = (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
        let psd = mean_psd(&s);
        let argmax = psd.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 40);
    }

    #[test]
    fn rolloff_six_db_per_octave() {
        let spec = SourceSpectrumSpec {
            fundamental_hz: 500.0,
            harmonic_count: 2,
            harmonic_rolloff_db: 6.0,
            broadband_level_db: None,
            band_extent_hz: 5000.0,
        };
        let psd = mean_psd(&synth_source(&spec, 2.0, 9).unwrap());
        let drop = 10.0 * (band_power(&psd, 500.0) / band_power(&psd, 1000.0)).log10();
        assert!((drop - 6.0).abs() <= 1.0, "drop {drop} dB");
    }

    #[test]
    fn source_determinism_and_truncation() {
        let a = synth_source(&quad_small(), 0.5, 42).unwrap();
        assert_eq!(a, synth_source(&quad_small(), 0.5, 42).unwrap());
        assert_ne!(a, synth_source(&quad_small(), 0.5, 43).unwrap());
        // 45 harmonics of 229 Hz run past Nyquist; the series is truncated.
        assert!(synth_source(&quad_small(), 0.1, 1).is_ok());
        let mut bad = quad_small();
        bad.band_extent_hz = 12_000.0;
        assert!(synth_source(&bad, 0.1, 1).is_err());
    }

    #[test]
    fn unit_range_is_a_pure_delay() {
        let s = synth_source(&quad_mid(), 0.3, 5).unwrap();
        let mic = [[0.0, 0.0, 0.0]];
        let out = propagate(&s, &[TrajectoryPoint { t: 0.0, position: [1.0, 0.0, 0.0] }], &mic, &[1.0], 343.0).unwrap();
        let d = SAMPLE_RATE_HZ / 343.0;
        let mut want = vec![0.0; s.len()];
        add_delayed(&SincKernel::default(), &s, d, 1.0, 0..s.len(), &mut want);
        assert_eq!(out[0], want);
    }

    #[test]
    fn doubling_range_halves_amplitude() {
        let s = synth_source(&quad_mid(), 0.2, 5).unwrap();
        let mic = [[0.0, 0.0, 0.0]];
        let at = |r: f64| {
            let y = propagate(&s, &[TrajectoryPoint { t: 0.0, position: [r, 0.0, 0.0] }], &mic, &[1.0], 343.0).unwrap();
            (y[0][1000..3000].iter().map(|v| v * v).sum::<f64>() / 2000.0).sqrt()
        };
        let ratio = at(4.0) / at(2.0);
        assert!((ratio - 0.5).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn rms_follows_spreading_law() {
        let s = synth_source(&quad_large(), 1.0, 8).unwrap();
        let mics = equilateral_array(0.5);
        let gains = [1.0, 0.5, 2.0];
        let src = [3.0, 4.0, 0.0];
        let y = propagate(&s, &[TrajectoryPoint { t: 0.0, position: src }], &mics, &gains, 343.0).unwrap();
        for i in 0..3 {
            let rms = (y[i][200..].iter().map(|v| v * v).sum::<f64>() / (y[i].len() - 200) as f64).sqrt();
            let want = gains[i] / distance(&src, &mics[i]).max(1.0);
            assert!((rms / want - 1.0).abs() < 0.01, "mic {i}: {rms} vs {want}");
        }
    }

    #[test]
    fn inter_mic_delay_matches_geometry() {
        let mics = [[0.0, 0.0, 0.0], [0.6, 0.1, 0.0]];
        let src = [-2.0, 1.3, 0.0];
        let set = pulse_scene(&[src], &mics, &[1.0, 1.0], 343.0).unwrap();
        let (tau, _) = pair_delay(&set.pulses[0].channels[1], &set.pulses[0].channels[0], SAMPLE_RATE_HZ, None).unwrap();
        let want = (distance(&src, &mics[1]) - distance(&src, &mics[0])) / 343.0;
        assert!(((tau - want) * SAMPLE_RATE_HZ).abs() <= 0.1, "{} vs {}", tau * SAMPLE_RATE_HZ, want * SAMPLE_RATE_HZ);
    }

    #[test]
    fn too_close_source_is_rejected() {
        let s = vec![0.0; 100];
        let r = propagate(&s, &[TrajectoryPoint { t: 0.0, position: [0.05, 0.0, 0.0] }], &[[0.0; 3]], &[1.0], 343.0);
        assert!(matches!(r, Err(Error::Geometry(_))));
    }

    #[test]
    fn zero_signal_sits_at_the_operating_point() {
        let settings = AdcSettings::for_channels(1);
        let (block, report) = logamp_adc(&[vec![0.0; 64]], &settings, 1).unwrap();
        let quiescent = settings.model.forward(settings.model.operating_point);
        assert!(block.codes().iter().all(|&c| (f64::from(c) - quiescent).abs() <= 1.0));
        assert_eq!(block.len(), 64 * 64);
        assert_eq!(report.clipped, 0);
    }

    #[test]
    fn adc_is_deterministic_and_flags_saturation() {
        let s = synth_source(&quad_mid(), 0.05, 1).unwrap();
        let settings = AdcSettings::for_channels(1);
        let a = logamp_adc(std::slice::from_ref(&s), &settings, 5).unwrap().0;
        let b = logamp_adc(std::slice::from_ref(&s), &settings, 5).unwrap().0;
        assert_eq!(a, b);
        let loud: Vec<f64> = s.iter().map(|v| v * 10.0).collect();
        assert!(logamp_adc(&[loud], &settings, 5).unwrap().1.saturated());
    }

    #[test]
    fn pulse_scene_symmetry_and_errors() {
        let mics = [[-0.25, 0.0, 0.0], [0.25, 0.0, 0.0]];
        let set = pulse_scene(&[[0.0, 2.0, 0.0]], &mics, &[1.0, 1.0], 343.0).unwrap();
        let (tau, _) = pair_delay(&set.pulses[0].channels[0], &set.pulses[0].channels[1], SAMPLE_RATE_HZ, None).unwrap();
        assert!(tau.abs() < 1e-9);
        assert!(matches!(
            pulse_scene(&[[0.0, 2.0, 0.0], [0.0, 2.0, 0.0]], &mics, &[1.0, 1.0], 343.0),
            Err(Error::Geometry(_))
        ));
        assert!(pulse_scene(&[[0.0, 9.0, 0.0]], &mics, &[1.0, 1.0], 343.0).is_err());
    }

    #[test]
    fn parse_scene_config() {
        let text = "\
# demo
kind = drone
preset = quad-small
mics = 0,0,0; 0.5,0,0; 0.25,0.433,0
gains = 1, 0.5, 2
source = 5, 0, 0
duration = 2.5
seed = 7
noise_db = -60
";
        let cfg = SceneConfig::parse(text).unwrap();
        assert_eq!(cfg.label.as_deref(), Some("quad-small"));
        assert_eq!(cfg.mic_gains, vec![1.0, 0.5, 2.0]);
        assert_eq!(cfg.trajectory[0].position, [5.0, 0.0, 0.0]);
        assert_eq!(cfg.adc_rate, ADC_RATE_HZ);
        assert_eq!(cfg.duration_s, 2.5);
        assert!(SceneConfig::parse("kind = drone\n").is_err());
        assert!(SceneConfig::parse("bogus = 1\n").is_err());
        let six = SceneConfig::parse("kind = noise\nmics = 0,0;1,0;0,1;1,1;0.5,0.5,0.5;0,0,1\n").unwrap();
        assert_eq!(six.adc_rate, 700_000);
    }

    #[test]
    fn highpass_response() {
        let tone = |f: f64| {
            let mut x: Vec<f64> = (0..21_875).map(|n| (2.0 * PI * f * n as f64 / SAMPLE_RATE_HZ).sin()).collect();
            analog_highpass(&mut x, 80.0, SAMPLE_RATE_HZ);
            let tail = &x[10_000..];
            (2.0 * tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64).sqrt()
        };
        assert!((20.0 * tone(80.0).log10() + 3.01).abs() < 0.05);
        assert!(tone(1000.0) > 0.999);
        assert!(tone(10.0) < 0.02);
    }

    #[test]
    fn position_interpolation() {
        let tr = [
            TrajectoryPoint { t: 0.0, position: [0.0, 0.0, 0.0] },
            TrajectoryPoint { t: 2.0, position: [4.0, 2.0, 0.0] },
        ];
        assert_eq!(position_at(&tr, 1.0), [2.0, 1.0, 0.0]);
        assert_eq!(position_at(&tr, 5.0), [4.0, 2.0, 0.0]);
        assert_eq!(position_at(&tr, -1.0), [0.0, 0.0, 0.0]);
    }
}
