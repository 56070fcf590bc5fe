//! Power gating and direction-of-arrival estimation.
//!
//! Two estimators run on a calibrated array:
//!
//! * an energy method, every 200 ms, that fits an inverse-square level model
//!   over a polar grid of candidate source positions, and
//! * a frequency-domain delay-and-sum beamformer that scans far-field
//!   steering directions and weights each bin by `P_ss / (P_ss + P_nn)`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{bin_frequency, DecimatedStream, SpectrumFrame, PSD_BINS, SAMPLE_RATE_HZ};
use crate::geometry::{ArrayGeometry, SPEED_OF_SOUND};

/// 200 ms at 21 875 Hz.
pub const ENERGY_WINDOW_LEN: usize = 4375;
pub const DEFAULT_NOISE_LAMBDA: f64 = 0.05;
pub const DEFAULT_SCAN_STEP_DEG: f64 = 1.0;

/// Per-channel energy over one 200 ms window.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyWindow {
    pub index: usize,
    /// Window start, seconds from stream start.
    pub t: f64,
    pub energies: Vec<f64>,
}

impl EnergyWindow {
    pub fn from_samples(index: usize, channels: &[&[f64]]) -> Self {
        EnergyWindow {
            index,
            t: (index * ENERGY_WINDOW_LEN) as f64 / SAMPLE_RATE_HZ,
            energies: channels
                .iter()
                .map(|c| c.iter().map(|x| x * x).sum())
                .collect(),
        }
    }
}

/// Splits a stream into complete 200 ms windows; a trailing partial window is
/// not emitted.
pub fn energy_windows(stream: &DecimatedStream) -> Vec<EnergyWindow> {
    (0..stream.len() / ENERGY_WINDOW_LEN)
        .map(|w| {
            let range = w * ENERGY_WINDOW_LEN..(w + 1) * ENERGY_WINDOW_LEN;
            let slices: Vec<&[f64]> = stream.channels.iter().map(|c| &c[range.clone()]).collect();
            EnergyWindow::from_samples(w, &slices)
        })
        .collect()
}

/// Gain-compensated energy of each channel.
fn compensated(window: &EnergyWindow, gains: &[f64]) -> Vec<f64> {
    window
        .energies
        .iter()
        .enumerate()
        .map(|(i, e)| e / gains.get(i).map_or(1.0, |g| g * g))
        .collect()
}

/// True when any gain-compensated channel energy exceeds `threshold`.
pub fn power_gate(window: &EnergyWindow, gains: &[f64], threshold: f64) -> bool {
    compensated(window, gains).iter().any(|&e| e > threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoaMethod {
    Energy,
    Beamformer,
}

/// One direction-of-arrival estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoaEstimate {
    pub t: f64,
    pub method: DoaMethod,
    pub azimuth_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elevation_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_2d: Option<[f64; 2]>,
    pub response_power: f64,
    pub ambiguous: bool,
}

/// Polar grid of candidate source positions around the array centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarGrid {
    pub azimuths_deg: Vec<f64>,
    pub ranges_m: Vec<f64>,
}

impl Default for PolarGrid {
    /// 36 azimuths by 8 log-spaced ranges from 0.5 m to 50 m.
    fn default() -> Self {
        PolarGrid::new(36, 8, 0.5, 50.0)
    }
}

impl PolarGrid {
    pub fn new(azimuths: usize, ranges: usize, min_range: f64, max_range: f64) -> Self {
        let step = 360.0 / azimuths as f64;
        let ratio = max_range / min_range;
        PolarGrid {
            azimuths_deg: (0..azimuths).map(|a| a as f64 * step).collect(),
            ranges_m: (0..ranges)
                .map(|r| {
                    if ranges == 1 {
                        min_range
                    } else {
                        min_range * ratio.powf(r as f64 / (ranges - 1) as f64)
                    }
                })
                .collect(),
        }
    }
}

/// Residual of the inverse-square level fit for a candidate source at `xy`,
/// with the source level profiled out.
pub fn energy_fit_residual(log_levels: &[f64], geometry: &ArrayGeometry, xy: [f64; 2]) -> f64 {
    let e: Vec<f64> = log_levels
        .iter()
        .zip(geometry.positions())
        .map(|(l, m)| {
            let r = ((xy[0] - m[0]).powi(2) + (xy[1] - m[1]).powi(2) + m[2].powi(2)).sqrt();
            l + 2.0 * r.max(1e-9).ln()
        })
        .collect();
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    e.iter().map(|v| (v - mean).powi(2)).sum()
}

/// Log of gain-compensated energies, floored away from zero.
pub fn log_levels(window: &EnergyWindow, gains: &[f64]) -> Vec<f64> {
    compensated(window, gains)
        .iter()
        .map(|e| e.max(f64::MIN_POSITIVE).ln())
        .collect()
}

/// Near-field energy DOA: grid least-squares over source position, reporting
/// the azimuth of the best candidate.
pub fn energy_doa(window: &EnergyWindow, geometry: &ArrayGeometry, grid: &PolarGrid) -> Result<DoaEstimate> {
    if window.energies.len() != geometry.len() {
        return Err(Error::Precondition(format!(
            "{} energies for a {}-microphone geometry",
            window.energies.len(),
            geometry.len()
        )));
    }
    let levels = log_levels(window, geometry.gains());
    let mut best: Option<(f64, f64, [f64; 2])> = None;
    for &az in &grid.azimuths_deg {
        let (s, c) = az.to_radians().sin_cos();
        for &r in &grid.ranges_m {
            let xy = [r * c, r * s];
            let cost = energy_fit_residual(&levels, geometry, xy);
            if best.is_none_or(|b| cost < b.0) {
                best = Some((cost, az, xy));
            }
        }
    }
    let (cost, az, xy) = best.ok_or_else(|| Error::Configuration("empty DOA grid".into()))?;
    let comp = compensated(window, geometry.gains());
    let (lo, hi) = comp
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let ambiguous = geometry.aperture() > 0.0 && hi <= 1.01 * lo;
    Ok(DoaEstimate {
        t: window.t,
        method: DoaMethod::Energy,
        azimuth_deg: az,
        elevation_deg: None,
        position_2d: Some(xy),
        response_power: -cost,
        ambiguous,
    })
}

/// Running background-noise PSD, updated only from gated-off frames.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseProfile {
    p_nn: Vec<f64>,
    update_count: u64,
    lambda: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile::new(DEFAULT_NOISE_LAMBDA)
    }
}

impl NoiseProfile {
    pub fn new(lambda: f64) -> Self {
        NoiseProfile {
            p_nn: vec![0.0; PSD_BINS],
            update_count: 0,
            lambda,
        }
    }

    pub fn p_nn(&self) -> &[f64] {
        &self.p_nn
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    /// Exponential average `p_nn <- (1 - lambda) p_nn + lambda psd`; the first
    /// update copies `psd`.
    pub fn update(&mut self, psd: &[f64], gated_on: bool) -> Result<()> {
        if gated_on {
            return Err(Error::ContractViolation(
                "noise profile updated from a gated-on frame".into(),
            ));
        }
        if psd.len() != PSD_BINS || psd.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InputDomain(format!(
                "noise update needs {PSD_BINS} non-negative bins"
            )));
        }
        if self.update_count == 0 {
            self.p_nn.copy_from_slice(psd);
        } else {
            for (n, p) in self.p_nn.iter_mut().zip(psd) {
                *n = (1.0 - self.lambda) * *n + self.lambda * p;
            }
        }
        self.update_count += 1;
        Ok(())
    }
}

/// Spectral-subtraction estimate of the signal PSD, `max(psd - p_nn, 0)`.
pub fn signal_psd(psd: &[f64], p_nn: &[f64]) -> Vec<f64> {
    psd.iter().zip(p_nn).map(|(p, n)| (p - n).max(0.0)).collect()
}

/// Per-bin `p_ss / (p_ss + p_nn)`, zero where both vanish.
pub fn wiener_weight(p_ss: &[f64], p_nn: &[f64]) -> Result<Vec<f64>> {
    if p_ss.len() != p_nn.len() {
        return Err(Error::InputDomain("weight inputs differ in length".into()));
    }
    if p_ss.iter().chain(p_nn).any(|v| !(*v >= 0.0)) {
        return Err(Error::InputDomain("PSD bins must be non-negative".into()));
    }
    Ok(p_ss
        .iter()
        .zip(p_nn)
        .map(|(&s, &n)| if s + n > 0.0 { s / (s + n) } else { 0.0 })
        .collect())
}

/// Steering directions for the beamformer scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrid {
    pub azimuths_deg: Vec<f64>,
    /// `[0.0]` for planar arrays.
    pub elevations_deg: Vec<f64>,
}

impl ScanGrid {
    pub fn azimuth(step_deg: f64) -> Self {
        let n = (360.0 / step_deg).round() as usize;
        ScanGrid {
            azimuths_deg: (0..n).map(|i| i as f64 * step_deg).collect(),
            elevations_deg: vec![0.0],
        }
    }

    /// Azimuth-elevation grid for volumetric arrays, azimuth-only otherwise.
    pub fn for_geometry(geometry: &ArrayGeometry, step_deg: f64) -> Self {
        let mut grid = ScanGrid::azimuth(step_deg);
        if geometry.is_volumetric() {
            let n = (90.0 / step_deg).round() as i64;
            grid.elevations_deg = (-n..=n).map(|i| i as f64 * step_deg).collect();
        }
        grid
    }

    fn has_elevation(&self) -> bool {
        self.elevations_deg.len() > 1
    }
}

/// Far-field arrival delay of each microphone, relative to the centroid, for
/// a plane wave from (`azimuth`, `elevation`).
pub fn steering_delays(geometry: &ArrayGeometry, azimuth_deg: f64, elevation_deg: f64, c: f64) -> Vec<f64> {
    let (sa, ca) = azimuth_deg.to_radians().sin_cos();
    let (se, ce) = elevation_deg.to_radians().sin_cos();
    let u = [ce * ca, ce * sa, se];
    geometry
        .positions()
        .iter()
        .map(|m| -(m[0] * u[0] + m[1] * u[1] + m[2] * u[2]) / c)
        .collect()
}

/// Delay-and-sum output spectrum (mean over microphones) steered at a direction.
pub fn steered_spectrum(
    frame: &SpectrumFrame,
    geometry: &ArrayGeometry,
    azimuth_deg: f64,
    elevation_deg: f64,
    c: f64,
) -> Result<Vec<Complex64>> {
    check_frame(frame, geometry)?;
    let delays = steering_delays(geometry, azimuth_deg, elevation_deg, c);
    let m = geometry.len() as f64;
    Ok((0..PSD_BINS)
        .map(|k| {
            let f = bin_frequency(k);
            frame
                .channels
                .iter()
                .zip(&delays)
                .zip(geometry.gains())
                .map(|((ch, tau), g)| ch.bins[k] * Complex64::from_polar(1.0 / g, 2.0 * PI * f * tau))
                .sum::<Complex64>()
                / m
        })
        .collect())
}

fn check_frame(frame: &SpectrumFrame, geometry: &ArrayGeometry) -> Result<()> {
    if frame.channels.len() != geometry.len() {
        return Err(Error::Precondition(format!(
            "{}-channel frame for a {}-microphone geometry",
            frame.channels.len(),
            geometry.len()
        )));
    }
    Ok(())
}

/// Steered response over a scan grid plus the argmax estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamScan {
    /// `(azimuth, elevation, P)` for every scanned direction.
    pub response: Vec<(f64, f64, f64)>,
    pub estimate: DoaEstimate,
}

/// Frequency-domain delay-and-sum scan:
/// `P = sum_k h[k] |sum_i X_i[k] exp(+j 2 pi f_k tau_i) / g_i|^2`.
pub fn das_beamform(
    frame: &SpectrumFrame,
    geometry: &ArrayGeometry,
    weights: &[f64],
    scan: &ScanGrid,
    c: f64,
) -> Result<BeamScan> {
    check_frame(frame, geometry)?;
    if weights.len() != PSD_BINS {
        return Err(Error::InputDomain(format!("expected {PSD_BINS} weights")));
    }
    let active: Vec<usize> = (0..PSD_BINS).filter(|&k| weights[k] > 0.0).collect();
    let df = bin_frequency(1);
    let mut response = Vec::with_capacity(scan.azimuths_deg.len() * scan.elevations_deg.len());
    let mut rot = vec![Complex64::new(0.0, 0.0); geometry.len()];
    let mut step = vec![Complex64::new(0.0, 0.0); geometry.len()];
    for &el in &scan.elevations_deg {
        for &az in &scan.azimuths_deg {
            let delays = steering_delays(geometry, az, el, c);
            for (s, d) in step.iter_mut().zip(&delays) {
                *s = Complex64::from_polar(1.0, 2.0 * PI * df * d);
            }
            let mut power = 0.0;
            let mut next = 0usize;
            for (r, g) in rot.iter_mut().zip(geometry.gains()) {
                *r = Complex64::new(1.0 / g, 0.0);
            }
            for &k in &active {
                // Advance the per-microphone phasors to bin k.
                while next < k {
                    rot.iter_mut().zip(&step).for_each(|(r, s)| *r *= s);
                    next += 1;
                }
                let sum: Complex64 = frame
                    .channels
                    .iter()
                    .zip(&rot)
                    .map(|(ch, r)| ch.bins[k] * r)
                    .sum();
                power += weights[k] * sum.norm_sqr();
            }
            response.push((az, el, power));
        }
    }
    let (az, el, best) = response
        .iter()
        .copied()
        .fold((0.0, 0.0, f64::NEG_INFINITY), |acc, r| if r.2 > acc.2 { r } else { acc });
    let lowest = response.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let ambiguous = best - lowest <= 1e-9 * best.abs().max(f64::MIN_POSITIVE);
    Ok(BeamScan {
        estimate: DoaEstimate {
            t: frame.start_secs(),
            method: DoaMethod::Beamformer,
            azimuth_deg: az,
            elevation_deg: scan.has_elevation().then_some(el),
            position_2d: None,
            response_power: best,
            ambiguous,
        },
        response,
    })
}

/// Beamformer defaults matching the pipeline configuration.
pub fn default_scan(geometry: &ArrayGeometry) -> ScanGrid {
    ScanGrid::for_geometry(geometry, DEFAULT_SCAN_STEP_DEG)
}

/// Convenience wrapper with the nominal speed of sound.
pub fn das_beamform_default(frame: &SpectrumFrame, geometry: &ArrayGeometry, weights: &[f64]) -> Result<BeamScan> {
    das_beamform(frame, geometry, weights, &default_scan(geometry), SPEED_OF_SOUND)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{ChannelSpectrum, SpectrumAnalyzer};
    use proptest::prelude::*;

    fn triangle() -> ArrayGeometry {
        let r = 0.5 / 3f64.sqrt();
        ArrayGeometry::with_unit_gains(
            (0..3)
                .map(|i| {
                    let a = (f64::from(i) * 120.0).to_radians();
                    [r * a.cos(), r * a.sin(), 0.0]
                })
                .collect(),
        )
        .unwrap()
    }

    fn window(energies: Vec<f64>) -> EnergyWindow {
        EnergyWindow { index: 0, t: 0.0, energies }
    }

    /// Inverse-square energies for a source at `xy`.
    fn energies_for(geometry: &ArrayGeometry, xy: [f64; 2]) -> Vec<f64> {
        geometry
            .positions()
            .iter()
            .map(|m| 1.0 / ((xy[0] - m[0]).powi(2) + (xy[1] - m[1]).powi(2) + m[2].powi(2)))
            .collect()
    }

    #[test]
    fn gate_examples() {
        let w = window(vec![0.0; 3]);
        assert!(!power_gate(&w, &[1.0; 3], 1e-12));
        let w = window(vec![0.0, 1e-9, 0.0]);
        assert!(power_gate(&w, &[1.0; 3], f64::MIN_POSITIVE));
        // Gain compensation: a hot microphone is divided down.
        let w = window(vec![4.0, 0.0, 0.0]);
        assert!(!power_gate(&w, &[2.0, 1.0, 1.0], 1.5));
        assert!(power_gate(&w, &[1.0, 1.0, 1.0], 1.5));
    }

    #[test]
    fn energy_windows_count() {
        let stream = DecimatedStream::new(SAMPLE_RATE_HZ, vec![vec![0.5; 21_875 * 3 + 100]; 2]).unwrap();
        let w = energy_windows(&stream);
        assert_eq!(w.len(), 15);
        assert!((w[5].t - 1.0).abs() < 1e-12);
        assert!((w[0].energies[0] - 0.25 * 4375.0).abs() < 1e-9);
    }

    #[test]
    fn energy_doa_points_at_vertex() {
        let g = triangle();
        // Far along the vertex-1 axis (azimuth 0).
        let est = energy_doa(&window(energies_for(&g, [20.0, 0.0])), &g, &PolarGrid::default()).unwrap();
        assert!(est.azimuth_deg.min(360.0 - est.azimuth_deg) <= 10.0, "{est:?}");
        assert!(!est.ambiguous);
        assert_eq!(est.method, DoaMethod::Energy);
    }

    #[test]
    fn equidistant_source_is_ambiguous() {
        let g = triangle();
        let est = energy_doa(&window(vec![2.0, 2.0, 2.0]), &g, &PolarGrid::default()).unwrap();
        assert!(est.ambiguous);
    }

    #[test]
    fn noise_profile_rules() {
        let mut p = NoiseProfile::default();
        let psd: Vec<f64> = (0..PSD_BINS).map(|k| 1.0 + k as f64).collect();
        p.update(&psd, false).unwrap();
        assert_eq!(p.p_nn(), &psd[..]);
        assert!(matches!(p.update(&psd, true), Err(Error::ContractViolation(_))));

        let mut q = NoiseProfile::default();
        q.update(&vec![0.0; PSD_BINS], false).unwrap();
        let target = vec![2.0; PSD_BINS];
        for _ in 0..90 {
            q.update(&target, false).unwrap();
        }
        // Geometric series: remaining gap is 0.95^90 of the initial one.
        let gap = 2.0 * 0.95f64.powi(90);
        assert!((q.p_nn()[0] - (2.0 - gap)).abs() < 1e-12);
        assert!((q.p_nn()[0] - 2.0).abs() / 2.0 < 0.01);

        let mut z = NoiseProfile::default();
        for _ in 0..10 {
            z.update(&vec![0.0; PSD_BINS], false).unwrap();
        }
        assert!(z.p_nn().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wiener_examples() {
        assert_eq!(wiener_weight(&[2.0], &[0.0]).unwrap(), vec![1.0]);
        assert_eq!(wiener_weight(&[1.5], &[1.5]).unwrap(), vec![0.5]);
        assert_eq!(wiener_weight(&[3.0], &[1.0]).unwrap(), vec![0.75]);
        assert_eq!(wiener_weight(&[0.0], &[0.0]).unwrap(), vec![0.0]);
        assert!(wiener_weight(&[-1.0], &[0.0]).is_err());
        assert_eq!(signal_psd(&[3.0, 1.0], &[1.0, 2.0]), vec![2.0, 0.0]);
    }

    fn frame_from(channels: Vec<Vec<f64>>) -> SpectrumFrame {
        let a = SpectrumAnalyzer::new();
        SpectrumFrame {
            frame_index: 0,
            channels: channels.iter().map(|c| a.compute(c).unwrap()).collect(),
        }
    }

    #[test]
    fn zero_aperture_gives_flat_response() {
        let g = ArrayGeometry::with_unit_gains(vec![[0.0; 3]; 3]).unwrap();
        let x: Vec<f64> = (0..2048).map(|n| (n as f64 * 0.3).sin()).collect();
        let frame = frame_from(vec![x.clone(), x.clone(), x]);
        let scan = das_beamform(&frame, &g, &[1.0; PSD_BINS], &ScanGrid::azimuth(5.0), SPEED_OF_SOUND).unwrap();
        assert!(scan.estimate.ambiguous);
    }

    #[test]
    fn beamformer_rejects_mismatched_geometry() {
        let frame = frame_from(vec![vec![0.0; 2048]; 2]);
        assert!(matches!(
            das_beamform(&frame, &triangle(), &[1.0; PSD_BINS], &ScanGrid::azimuth(1.0), SPEED_OF_SOUND),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn beamformer_matches_direct_steered_sum() {
        let g = triangle();
        let chans: Vec<Vec<f64>> = (0..3)
            .map(|c| (0..2048).map(|n| ((n * (c + 3)) as f64 * 0.01).sin() + 0.1 * c as f64).collect())
            .collect();
        let frame = frame_from(chans);
        let w: Vec<f64> = (0..PSD_BINS).map(|k| if k % 3 == 0 { 0.0 } else { 0.5 }).collect();
        let scan = das_beamform(&frame, &g, &w, &ScanGrid::azimuth(45.0), SPEED_OF_SOUND).unwrap();
        for &(az, _, p) in &scan.response {
            let y = steered_spectrum(&frame, &g, az, 0.0, SPEED_OF_SOUND).unwrap();
            let direct: f64 = y.iter().zip(&w).map(|(v, h)| h * (v * 3.0).norm_sqr()).sum();
            assert!((p - direct).abs() <= 1e-9 * direct, "az {az}");
        }
    }

    proptest! {
        #[test]
        fn wiener_bounds_and_monotonicity(
            s in 0.0f64..100.0, n in 0.0f64..100.0, ds in 0.0f64..10.0, dn in 0.0f64..10.0,
        ) {
            let h = wiener_weight(&[s], &[n]).unwrap()[0];
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert!(wiener_weight(&[s + ds], &[n]).unwrap()[0] >= h - 1e-15);
            prop_assert!(wiener_weight(&[s], &[n + dn]).unwrap()[0] <= h + 1e-15);
        }

        #[test]
        fn gate_is_monotone(
            e in proptest::collection::vec(0.0f64..10.0, 3), bump in 0.0f64..10.0, ch in 0usize..3, thr in 0.01f64..10.0,
        ) {
            let base = power_gate(&window(e.clone()), &[1.0; 3], thr);
            let mut more = e;
            more[ch] += bump;
            prop_assert!(!base || power_gate(&window(more), &[1.0; 3], thr));
        }

        #[test]
        fn energy_doa_ignores_common_scale(x in -30.0f64..30.0, y in -30.0f64..30.0, c in 1e-6f64..1e6) {
            prop_assume!(x.hypot(y) > 2.0);
            let g = triangle();
            let e = energies_for(&g, [x, y]);
            let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
            let grid = PolarGrid::default();
            let a = energy_doa(&window(e), &g, &grid).unwrap();
            let b = energy_doa(&window(scaled), &g, &grid).unwrap();
            prop_assert_eq!(a.azimuth_deg, b.azimuth_deg);
        }

        #[test]
        fn beam_response_phase_and_scale(phi in 0.0f64..std::f64::consts::TAU, c in 0.1f64..10.0) {
            let g = triangle();
            let chans: Vec<Vec<f64>> = (0..3)
                .map(|ch| (0..2048).map(|n| ((n + 7 * ch) as f64 * 0.05).sin()).collect())
                .collect();
            let frame = frame_from(chans);
            let rotate = |f: &SpectrumFrame, z: Complex64| SpectrumFrame {
                frame_index: 0,
                channels: f.channels.iter().map(|cs| ChannelSpectrum {
                    psd: cs.psd.iter().map(|p| p * z.norm_sqr()).collect(),
                    phase: cs.phase.clone(),
                    bins: cs.bins.iter().map(|b| b * z).collect(),
                }).collect(),
            };
            let grid = ScanGrid::azimuth(10.0);
            let base = das_beamform(&frame, &g, &[1.0; PSD_BINS], &grid, SPEED_OF_SOUND).unwrap();
            let rot = das_beamform(&rotate(&frame, Complex64::from_polar(1.0, phi)), &g, &[1.0; PSD_BINS], &grid, SPEED_OF_SOUND).unwrap();
            let scaled = das_beamform(&rotate(&frame, Complex64::new(c, 0.0)), &g, &[1.0; PSD_BINS], &grid, SPEED_OF_SOUND).unwrap();
            for i in 0..base.response.len() {
                let p = base.response[i].2;
                prop_assert!((rot.response[i].2 - p).abs() <= 1e-9 * p);
                prop_assert!((scaled.response[i].2 - c * c * p).abs() <= 1e-9 * c * c * p);
            }
            prop_assert_eq!(base.estimate.azimuth_deg, scaled.estimate.azimuth_deg);
        }
    }
}
