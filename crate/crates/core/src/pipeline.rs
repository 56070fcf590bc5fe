//! End-to-end processing of a decimated stream: power gate, classification
//! with temporal confirmation, noise tracking and DOA at 5 Hz.

use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, warn};
use serde::Serialize;

use crate::calibration::{PulseRecording, PulseRecordingSet};
use crate::classifier::{
    classify, decide_second, percentile, self_distances, temporal_confirm, train_signature, Classification,
    SecondDecision, Signature, SignatureLibrary, TemporalState, THRESHOLD_PERCENTILE,
};
use crate::doa::{
    das_beamform, energy_doa, energy_windows, power_gate, signal_psd, wiener_weight, DoaEstimate, DoaMethod, EnergyWindow,
    NoiseProfile, PolarGrid, ScanGrid, DEFAULT_NOISE_LAMBDA, DEFAULT_SCAN_STEP_DEG, ENERGY_WINDOW_LEN,
};
use crate::error::{Error, Result};
use crate::frontend::{bin_frequency, normalize_psd, DecimatedStream, SpectrumAnalyzer, SpectrumFrame, FRAME_LEN, PSD_BINS};
use crate::geometry::{ArrayGeometry, SPEED_OF_SOUND};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub geometry: ArrayGeometry,
    /// Gain-compensated window energy above which a window is gated on.
    pub gate_threshold: f64,
    pub noise_lambda: f64,
    pub scan_step_deg: f64,
    pub speed_of_sound: f64,
    pub beamformer: bool,
    pub energy_grid: PolarGrid,
}

impl PipelineConfig {
    pub fn new(geometry: ArrayGeometry, gate_threshold: f64) -> Self {
        PipelineConfig {
            geometry,
            gate_threshold,
            noise_lambda: DEFAULT_NOISE_LAMBDA,
            scan_step_deg: DEFAULT_SCAN_STEP_DEG,
            speed_of_sound: SPEED_OF_SOUND,
            beamformer: false,
            energy_grid: PolarGrid::default(),
        }
    }
}

/// A confirmed detection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionEvent {
    /// End of the confirming second, seconds from stream start.
    pub t: f64,
    pub uav_id: u8,
    pub uav_name: String,
    /// Distance of the confirming second.
    pub distance: f64,
    /// Latest energy DOA estimate at or before the confirming second.
    pub doa: Option<DoaEstimate>,
    pub second_pair: (u64, u64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub frames: usize,
    pub frames_gated_on: usize,
    pub gated_on_ratio: f64,
    pub doa_estimates: usize,
    pub events: usize,
    pub stream_seconds: f64,
    pub processing_seconds: f64,
    /// Stream duration divided by processing time.
    pub realtime_factor: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub doa: Vec<DoaEstimate>,
    pub decisions: Vec<SecondDecision>,
    pub events: Vec<DetectionEvent>,
    pub summary: Option<RunSummary>,
}

/// Second that contains the last sample of frame `index`.
pub fn frame_second(index: usize, sample_rate: f64) -> u64 {
    (((index + 1) * FRAME_LEN - 1) as f64 / sample_rate).floor() as u64
}

/// Energy window containing the midpoint of frame `index`.
pub fn frame_window(index: usize) -> usize {
    (index * FRAME_LEN + FRAME_LEN / 2) / ENERGY_WINDOW_LEN
}

/// Classifier input: gain-compensated channel sum normalized to unit L1.
pub fn classifier_psd(frame: &SpectrumFrame, gains: &[f64]) -> Result<Vec<f64>> {
    normalize_psd(&frame.combined_psd(gains))
}

fn mean_channel_psd(frame: &SpectrumFrame, gains: &[f64]) -> Vec<f64> {
    let m = frame.channels.len() as f64;
    frame.combined_psd(gains).into_iter().map(|p| p / m).collect()
}

struct SecondAccumulator {
    current: Option<u64>,
    frames: Vec<Classification>,
    state: TemporalState,
}

impl SecondAccumulator {
    fn flush(
        &mut self,
        library: &SignatureLibrary,
        out: &mut PipelineOutput,
    ) -> Result<()> {
        let Some(second) = self.current.take() else {
            return Ok(());
        };
        if let Some(decision) = decide_second(second, &self.frames) {
            let (state, event) = temporal_confirm(self.state, decision, library.distance_threshold)?;
            self.state = state;
            out.decisions.push(decision);
            if let Some(c) = event {
                let uav_name = library.get(c.id).map_or_else(String::new, |s| s.name.clone());
                let doa = out
                    .doa
                    .iter()
                    .rev()
                    .find(|d| d.method == DoaMethod::Energy && d.t < c.t)
                    .cloned();
                out.events.push(DetectionEvent {
                    t: c.t,
                    uav_id: c.id,
                    uav_name,
                    distance: c.distances[1],
                    doa,
                    second_pair: c.second_pair,
                });
            }
        }
        self.frames.clear();
        Ok(())
    }
}

/// Runs the full chain over `stream`. Without a library only DOA and noise
/// tracking are performed.
pub fn run_pipeline(
    stream: &DecimatedStream,
    library: Option<&SignatureLibrary>,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    let started = Instant::now();
    let geometry = &config.geometry;
    if stream.channel_count() != geometry.len() {
        return Err(Error::Precondition(format!(
            "stream has {} channels, geometry {} microphones",
            stream.channel_count(),
            geometry.len()
        )));
    }
    if let Some(lib) = library {
        if lib.is_empty() {
            return Err(Error::Configuration("signature library is empty".into()));
        }
    }
    let gains = geometry.gains();
    let analyzer = SpectrumAnalyzer::new();
    let windows = energy_windows(stream);
    let scan = ScanGrid::for_geometry(geometry, config.scan_step_deg);
    let mut noise = NoiseProfile::new(config.noise_lambda);
    let mut out = PipelineOutput::default();
    let mut acc = SecondAccumulator {
        current: None,
        frames: Vec::new(),
        state: TemporalState::default(),
    };
    let frame_count = stream.frame_count();
    let mut next_frame = 0;
    let mut frames_seen = 0;
    let mut frames_on = 0;

    for window in &windows {
        let gated = power_gate(window, gains, config.gate_threshold);
        let centre = (window.index * ENERGY_WINDOW_LEN + ENERGY_WINDOW_LEN / 2) as f64;
        let mut nearest: Option<(f64, SpectrumFrame)> = None;
        while next_frame < frame_count && frame_window(next_frame) == window.index {
            let frame = analyzer
                .frame(stream, next_frame)
                .ok_or_else(|| Error::ContractViolation("frame index out of range".into()))?;
            frames_seen += 1;
            if gated {
                frames_on += 1;
                if let Some(lib) = library {
                    let second = frame_second(next_frame, stream.sample_rate);
                    if acc.current != Some(second) {
                        acc.flush(lib, &mut out)?;
                        acc.current = Some(second);
                    }
                    acc.frames.push(classify(&classifier_psd(&frame, gains)?, lib)?);
                }
            } else {
                noise.update(&mean_channel_psd(&frame, gains), false)?;
            }
            let mid = (next_frame * FRAME_LEN + FRAME_LEN / 2) as f64;
            if nearest.as_ref().is_none_or(|(d, _)| (mid - centre).abs() < *d) {
                nearest = Some(((mid - centre).abs(), frame));
            }
            next_frame += 1;
        }
        if gated {
            out.doa.extend(window_doa(window, nearest.map(|n| n.1).as_ref(), &noise, &scan, config)?);
        }
    }
    if let Some(lib) = library {
        acc.flush(lib, &mut out)?;
    }

    let processing_seconds = started.elapsed().as_secs_f64();
    let stream_seconds = stream.duration_secs();
    out.summary = Some(RunSummary {
        frames: frames_seen,
        frames_gated_on: frames_on,
        gated_on_ratio: if frames_seen == 0 { 0.0 } else { frames_on as f64 / frames_seen as f64 },
        doa_estimates: out.doa.len(),
        events: out.events.len(),
        stream_seconds,
        processing_seconds,
        realtime_factor: stream_seconds / processing_seconds.max(1e-9),
    });
    debug!("pipeline summary: {:?}", out.summary);
    Ok(out)
}

fn window_doa(
    window: &EnergyWindow,
    frame: Option<&SpectrumFrame>,
    noise: &NoiseProfile,
    scan: &ScanGrid,
    config: &PipelineConfig,
) -> Result<Vec<DoaEstimate>> {
    let mut est = vec![energy_doa(window, &config.geometry, &config.energy_grid)?];
    if config.beamformer && config.geometry.len() >= 2 {
        if let Some(frame) = frame {
            let psd = mean_channel_psd(frame, config.geometry.gains());
            let weights = wiener_weight(&signal_psd(&psd, noise.p_nn()), noise.p_nn())?;
            let mut beam = das_beamform(frame, &config.geometry, &weights, scan, config.speed_of_sound)?.estimate;
            // Report on the same 5 Hz time base as the energy estimate.
            beam.t = window.t;
            est.push(beam);
        }
    }
    Ok(est)
}

/// Fraction of 200 ms windows gated on at each threshold.
pub fn threshold_sweep(stream: &DecimatedStream, gains: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let windows = energy_windows(stream);
    thresholds
        .iter()
        .map(|&t| {
            let on = windows.iter().filter(|w| power_gate(w, gains, t)).count();
            (t, if windows.is_empty() { 0.0 } else { on as f64 / windows.len() as f64 })
        })
        .collect()
}

/// Largest gain-compensated channel energy in each window.
pub fn window_peak_energies(stream: &DecimatedStream, gains: &[f64]) -> Vec<f64> {
    energy_windows(stream)
        .iter()
        .map(|w| {
            w.energies
                .iter()
                .zip(gains)
                .map(|(e, g)| e / (g * g))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Gate threshold midway, in log energy, between the loudest noise-only
/// window and the quietest signal window.
pub fn gate_threshold_between(noise: &DecimatedStream, signal: &DecimatedStream, gains: &[f64]) -> Result<f64> {
    let hi_noise = window_peak_energies(noise, gains).into_iter().fold(0.0, f64::max);
    let lo_signal = window_peak_energies(signal, gains)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if !(lo_signal > hi_noise) || !lo_signal.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "signal windows ({lo_signal:.3e}) do not clear the noise ({hi_noise:.3e})"
        )));
    }
    Ok((hi_noise.max(f64::MIN_POSITIVE) * lo_signal).sqrt())
}

/// Indices of frames whose energy window is gated on; every frame with a
/// complete window when no threshold is given.
pub fn gated_frames(stream: &DecimatedStream, gains: &[f64], gate_threshold: Option<f64>) -> Vec<usize> {
    let windows = energy_windows(stream);
    (0..stream.frame_count())
        .filter(|&idx| match (windows.get(frame_window(idx)), gate_threshold) {
            (Some(w), Some(t)) => power_gate(w, gains, t),
            (Some(_), None) => true,
            (None, _) => false,
        })
        .collect()
}

/// Classifier inputs for the frames selected by [`gated_frames`].
pub fn training_frames(stream: &DecimatedStream, gains: &[f64], gate_threshold: Option<f64>) -> Result<Vec<Vec<f64>>> {
    let analyzer = SpectrumAnalyzer::new();
    gated_frames(stream, gains, gate_threshold)
        .into_iter()
        .map(|idx| {
            let frame = analyzer
                .frame(stream, idx)
                .ok_or_else(|| Error::ContractViolation("frame index out of range".into()))?;
            classifier_psd(&frame, gains)
        })
        .collect()
}

/// Per-second decisions over the gated-on frames, without temporal confirmation.
pub fn classify_seconds(
    stream: &DecimatedStream,
    gains: &[f64],
    gate_threshold: f64,
    library: &SignatureLibrary,
) -> Result<Vec<SecondDecision>> {
    let analyzer = SpectrumAnalyzer::new();
    let mut out = Vec::new();
    let mut current = None;
    let mut bucket = Vec::new();
    for idx in gated_frames(stream, gains, Some(gate_threshold)) {
        let second = frame_second(idx, stream.sample_rate);
        if current.is_some_and(|c| c != second) {
            out.extend(current.and_then(|c| decide_second(c, &bucket)));
            bucket.clear();
        }
        current = Some(second);
        let frame = analyzer
            .frame(stream, idx)
            .ok_or_else(|| Error::ContractViolation("frame index out of range".into()))?;
        bucket.push(classify(&classifier_psd(&frame, gains)?, library)?);
    }
    out.extend(current.and_then(|c| decide_second(c, &bucket)));
    Ok(out)
}

/// Trained signature with the nearest-rank 99th percentile of its own
/// training distances.
pub fn train_with_threshold(frames: &[Vec<f64>], name: &str) -> Result<(Signature, f64)> {
    let sig = train_signature(frames, name)?;
    let p = percentile(&self_distances(&sig, frames), THRESHOLD_PERCENTILE)
        .ok_or(Error::InsufficientTrainingData { frames: 0, required: 1 })?;
    Ok((sig, p))
}

/// Adds `sig` to `library`, raising the library threshold to cover its own
/// percentile if needed.
pub fn add_to_library(library: &mut SignatureLibrary, sig: Signature, threshold: f64) -> Result<u8> {
    let id = library.add(sig)?;
    if !library.distance_threshold.is_finite() || library.distance_threshold < threshold {
        library.distance_threshold = threshold;
    }
    Ok(id)
}

/// Library from named training sets.
pub fn train_library(sets: &[(&str, Vec<Vec<f64>>)]) -> Result<SignatureLibrary> {
    let mut lib = SignatureLibrary::new(0.0);
    for (name, frames) in sets {
        let (sig, p) = train_with_threshold(frames, name)?;
        add_to_library(&mut lib, sig, p)?;
    }
    Ok(lib)
}

/// CSV of the frame-averaged PSD of each channel, one row per bin.
pub fn emit_plot_data(stream: &DecimatedStream) -> Result<String> {
    let analyzer = SpectrumAnalyzer::new();
    let m = stream.channel_count();
    let mut acc = vec![vec![0.0; PSD_BINS]; m];
    let frames = stream.frame_count();
    if frames == 0 {
        return Err(Error::InputDomain("recording is shorter than one frame".into()));
    }
    for idx in 0..frames {
        let f = analyzer.frame(stream, idx).expect("index below frame count");
        for (a, ch) in acc.iter_mut().zip(&f.channels) {
            a.iter_mut().zip(&ch.psd).for_each(|(a, p)| *a += p / frames as f64);
        }
    }
    let mut csv = String::from("bin_hz");
    for c in 0..m {
        let _ = write!(csv, ",ch{c}");
    }
    csv.push('\n');
    for k in 0..PSD_BINS {
        let _ = write!(csv, "{}", bin_frequency(k));
        for a in &acc {
            let _ = write!(csv, ",{:e}", a[k]);
        }
        csv.push('\n');
    }
    Ok(csv)
}

/// Splits a continuous calibration recording into pulse segments separated
/// by at least 50 ms of silence, keeping 50 ms of context on each side.
pub fn segment_pulses(stream: &DecimatedStream) -> Result<PulseRecordingSet> {
    let len = stream.len();
    let fs = stream.sample_rate;
    let env: Vec<f64> = (0..len)
        .map(|n| stream.channels.iter().map(|c| c[n].abs()).fold(0.0, f64::max))
        .collect();
    let peak = env.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::CalibrationSignal("recording is silent".into()));
    }
    let mut sorted = env.clone();
    sorted.sort_by(f64::total_cmp);
    let floor = sorted[len / 2];
    let threshold = (20.0 * floor).max(0.02 * peak);
    let gap = (0.05 * fs) as usize;
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for (n, &e) in env.iter().enumerate() {
        if e > threshold {
            match spans.last_mut() {
                Some(s) if n - s.1 <= gap => s.1 = n,
                _ => spans.push((n, n)),
            }
        }
    }
    let pulses = spans
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            let lo_limit = if i == 0 { 0 } else { (spans[i - 1].1 + a) / 2 };
            let hi_limit = spans.get(i + 1).map_or(len, |s| (b + s.0) / 2);
            let lo = a.saturating_sub(gap).max(lo_limit);
            let hi = (b + gap).min(hi_limit);
            PulseRecording {
                channels: stream.channels.iter().map(|c| c[lo..hi].to_vec()).collect(),
            }
        })
        .collect::<Vec<_>>();
    if pulses.is_empty() {
        warn!("no pulses found in calibration recording");
    }
    Ok(PulseRecordingSet { sample_rate: fs, pulses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{equilateral_array, SceneConfig};

    #[test]
    fn frame_bookkeeping() {
        // Frame 10 ends at sample 22 527, inside second 1.
        assert_eq!(frame_second(9, 21_875.0), 0);
        assert_eq!(frame_second(10, 21_875.0), 1);
        assert_eq!(frame_window(0), 0);
        assert_eq!(frame_window(2), 1);
    }

    #[test]
    fn noise_only_stream_stays_gated_off() {
        let stream = SceneConfig::noise_only(-40.0, 2.0, 3).render_decimated().unwrap();
        let geom = ArrayGeometry::with_unit_gains(equilateral_array(0.5)).unwrap();
        let out = run_pipeline(&stream, None, &PipelineConfig::new(geom, 1e3)).unwrap();
        let s = out.summary.unwrap();
        assert_eq!(s.frames_gated_on, 0);
        assert!(out.doa.is_empty());
        assert!(s.frames >= 20);
    }

    #[test]
    fn drone_gives_doa_at_five_hertz() {
        let stream = SceneConfig::drone("quad-mid", [5.0, 0.0, 0.0], 2.0, 1)
            .unwrap()
            .render_decimated()
            .unwrap();
        let geom = ArrayGeometry::with_unit_gains(equilateral_array(0.5)).unwrap();
        let mut cfg = PipelineConfig::new(geom, 1.0);
        cfg.beamformer = true;
        let out = run_pipeline(&stream, None, &cfg).unwrap();
        let energy = out.doa.iter().filter(|d| d.method == DoaMethod::Energy).count();
        assert_eq!(energy, 10);
        let beams: Vec<_> = out.doa.iter().filter(|d| d.method == DoaMethod::Beamformer).collect();
        assert_eq!(beams.len(), 10);
        for b in beams {
            let err = (b.azimuth_deg + 180.0).rem_euclid(360.0) - 180.0;
            assert!(err.abs() <= 2.0, "azimuth {}", b.azimuth_deg);
        }
    }

    #[test]
    fn plot_csv_shape() {
        let stream = SceneConfig::noise_only(-40.0, 0.5, 3).render_decimated().unwrap();
        let csv = emit_plot_data(&stream).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + PSD_BINS);
        assert_eq!(lines[0], "bin_hz,ch0,ch1,ch2");
        assert!(lines[2].starts_with("10.68115234375,"));
    }

    #[test]
    fn segmentation_recovers_each_pulse() {
        let text = "kind = pulses\npulses = 2,0,0; 0,2,0; -2,0,0; 0,-2,0\nmics = 0.3,0,0; -0.15,0.26,0; -0.15,-0.26,0\n";
        let cfg = SceneConfig::parse(text).unwrap();
        let stream = DecimatedStream::new(21_875.0, cfg.render_analog().unwrap()).unwrap();
        let set = segment_pulses(&stream).unwrap();
        assert_eq!(set.pulses.len(), 4);
    }
}
