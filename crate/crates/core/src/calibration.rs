//! Array self-calibration from a handful of acoustic pulses.
//!
//! Each pulse is emitted from an unknown position near the array. Pairwise
//! arrival-time differences are measured by cross-correlation; over pulses
//! spanning many directions, `c * max |tau_ij|` approaches the distance
//! between microphones `i` and `j` (the end-fire bound). Classical MDS turns
//! that distance matrix into coordinates. With positions known, each pulse is
//! localized from its delays and the microphone gains follow from a
//! log-energy least-squares fit under inverse-square spreading.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::geometry::{distance, ArrayGeometry, Point3, SPEED_OF_SOUND};

/// Nominal number of calibration pulses.
pub const NOMINAL_PULSES: usize = 10;
pub const MIN_PULSES: usize = 4;
/// Minimum normalized cross-correlation for a usable delay estimate.
pub const MIN_CORRELATION: f64 = 0.3;
/// Peak-to-median ratio a segment must reach to count as containing a pulse.
pub const MIN_PEAK_TO_MEDIAN: f64 = 10.0;
/// Reference distance below which spreading loss is not applied, meters.
pub const REFERENCE_RANGE: f64 = 1.0;

/// Per-channel samples of one pulse.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseRecording {
    pub channels: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseRecordingSet {
    pub sample_rate: f64,
    pub pulses: Vec<PulseRecording>,
}

impl PulseRecordingSet {
    pub fn channel_count(&self) -> usize {
        self.pulses.first().map_or(0, |p| p.channels.len())
    }
}

/// Time of the first sample whose magnitude exceeds half the segment peak.
pub fn detect_onset(segment: &[f64], sample_rate: f64) -> Result<f64> {
    let mut mags: Vec<f64> = segment.iter().map(|x| x.abs()).collect();
    let peak = mags.iter().copied().fold(0.0, f64::max);
    let first = mags.iter().position(|&m| m > 0.5 * peak);
    let mid = mags.len() / 2;
    let median = if mags.is_empty() {
        0.0
    } else {
        *mags.select_nth_unstable_by(mid, f64::total_cmp).1
    };
    match first {
        Some(idx) if peak > 0.0 && peak >= MIN_PEAK_TO_MEDIAN * median => {
            Ok(idx as f64 / sample_rate)
        }
        _ => Err(Error::CalibrationSignal(format!(
            "no transient: peak {peak:.3e} vs median {median:.3e}"
        ))),
    }
}

/// Onset time (seconds from segment start) of every channel of every pulse.
pub fn detect_pulse_onsets(recordings: &PulseRecordingSet) -> Result<Vec<Vec<f64>>> {
    recordings
        .pulses
        .iter()
        .map(|p| {
            p.channels
                .iter()
                .map(|c| detect_onset(c, recordings.sample_rate))
                .collect()
        })
        .collect()
}

/// Antisymmetric matrix of pairwise delays for one pulse, seconds.
/// `get(i, j)` is arrival time at `i` minus arrival time at `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdoaMatrix {
    delays: DMatrix<f64>,
}

impl TdoaMatrix {
    pub fn from_matrix(delays: DMatrix<f64>) -> Result<Self> {
        if !delays.is_square() {
            return Err(Error::InputDomain("TDOA matrix must be square".into()));
        }
        let n = delays.nrows();
        for i in 0..n {
            for j in 0..n {
                if (delays[(i, j)] + delays[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InputDomain("TDOA matrix must be antisymmetric".into()));
                }
            }
        }
        Ok(TdoaMatrix { delays })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.delays[(i, j)]
    }

    pub fn len(&self) -> usize {
        self.delays.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.delays
    }
}

/// Delay of `a` relative to `b` by cross-correlation peak with parabolic
/// refinement. Returns `(delay_seconds, normalized_peak)`.
///
/// `max_lag` bounds the searched lag in samples; `None` searches every lag.
pub fn pair_delay(a: &[f64], b: &[f64], sample_rate: f64, max_lag: Option<usize>) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InputDomain("empty segment".into()));
    }
    let ea: f64 = a.iter().map(|x| x * x).sum();
    let eb: f64 = b.iter().map(|x| x * x).sum();
    if ea <= 0.0 || eb <= 0.0 {
        return Err(Error::UnreliablePulse {
            peak: 0.0,
            min: MIN_CORRELATION,
        });
    }
    let n = (a.len() + b.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |x: &[f64]| {
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (d, s) in buf.iter_mut().zip(x) {
            d.re = *s;
        }
        buf
    };
    let mut fa = load(a);
    let mut fb = load(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y.conj();
    }
    inv.process(&mut fa);
    let scale = 1.0 / n as f64;
    // r[l] = sum_n a[n] b[n - l]; negative lags wrap to the top of the buffer.
    let r = |lag: isize| fa[lag.rem_euclid(n as isize) as usize].re * scale;

    let hi = max_lag.map_or(a.len() as isize - 1, |m| m as isize).min(a.len() as isize - 1);
    let lo = -(max_lag.map_or(b.len() as isize - 1, |m| m as isize)).max(-(b.len() as isize - 1));
    let (best, peak) = (lo..=hi)
        .map(|l| (l, r(l)))
        .fold((0, f64::NEG_INFINITY), |acc, (l, v)| if v > acc.1 { (l, v) } else { acc });
    let norm_peak = peak / (ea * eb).sqrt();
    if norm_peak < MIN_CORRELATION {
        return Err(Error::UnreliablePulse {
            peak: norm_peak,
            min: MIN_CORRELATION,
        });
    }
    let (ym, y0, yp) = (r(best - 1), peak, r(best + 1));
    let denom = ym - 2.0 * y0 + yp;
    let frac = if best > lo && best < hi && denom < 0.0 {
        (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Ok(((best as f64 + frac) / sample_rate, norm_peak))
}

/// Pairwise delay matrix for one pulse. Pairs `i < j` are measured and the
/// lower triangle is their negation.
pub fn estimate_tdoa(channels: &[Vec<f64>], sample_rate: f64, max_lag: Option<usize>) -> Result<TdoaMatrix> {
    let m = channels.len();
    let mut delays = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let (tau, _) = pair_delay(&channels[i], &channels[j], sample_rate, max_lag)?;
            delays[(i, j)] = tau;
            delays[(j, i)] = -tau;
        }
    }
    Ok(TdoaMatrix { delays })
}

/// Pairwise microphone distances recovered from pulse delays.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceEstimate {
    pub distances: DMatrix<f64>,
    /// Largest angle between any two pulses' delay vectors, degrees.
    pub angular_spread_deg: f64,
    /// Set when the pulse directions look clustered within 90 degrees, in
    /// which case some distances are likely underestimated.
    pub narrow_spread: bool,
}

/// `d_ij = c * max_p |tau_ij|` over all pulses.
pub fn estimate_pairwise_distances(tdoas: &[TdoaMatrix], speed_of_sound: f64) -> Result<DistanceEstimate> {
    if tdoas.len() < MIN_PULSES {
        return Err(Error::InsufficientCalibrationData {
            usable: tdoas.len(),
            required: MIN_PULSES,
        });
    }
    let m = tdoas[0].len();
    if tdoas.iter().any(|t| t.len() != m) {
        return Err(Error::InputDomain("pulses disagree on channel count".into()));
    }
    let distances = DMatrix::from_fn(m, m, |i, j| {
        speed_of_sound * tdoas.iter().map(|t| t.get(i, j).abs()).fold(0.0, f64::max)
    });

    // Delays relative to microphone 0 act as a direction fingerprint.
    let fingerprints: Vec<DVector<f64>> = tdoas
        .iter()
        .map(|t| DVector::from_iterator(m.saturating_sub(1), (1..m).map(|i| t.get(i, 0))))
        .filter(|v| v.norm() > 0.0)
        .collect();
    let mut spread = 0.0f64;
    for (i, a) in fingerprints.iter().enumerate() {
        for b in &fingerprints[i + 1..] {
            let cos = (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
            spread = spread.max(cos.acos().to_degrees());
        }
    }
    let narrow_spread = spread < 90.0;
    if narrow_spread {
        warn!("calibration pulses span only {spread:.0} degrees; distances may be underestimated");
    }
    Ok(DistanceEstimate {
        distances,
        angular_spread_deg: spread,
        narrow_spread,
    })
}

/// Classical (Torgerson) MDS embedding in three dimensions.
///
/// Coordinates are returned in the principal-axis frame with the centroid at
/// the origin. Each axis is sign-fixed so its largest-magnitude coordinate is
/// positive.
pub fn mds_localize(distances: &DMatrix<f64>) -> Result<Vec<Point3>> {
    let m = distances.nrows();
    if m == 0 || !distances.is_square() {
        return Err(Error::InputDomain("distance matrix must be square and non-empty".into()));
    }
    let scale = distances.amax().max(f64::MIN_POSITIVE);
    for i in 0..m {
        if distances[(i, i)].abs() > 1e-12 * scale {
            return Err(Error::InputDomain("distance matrix diagonal must be zero".into()));
        }
        for j in 0..m {
            let (a, b) = (distances[(i, j)], distances[(j, i)]);
            if (a - b).abs() > 1e-9 * scale || a < 0.0 || !a.is_finite() {
                return Err(Error::InputDomain("distance matrix must be symmetric and non-negative".into()));
            }
        }
    }
    let sq = distances.map(|d| d * d);
    let centering = DMatrix::identity(m, m) - DMatrix::from_element(m, m, 1.0 / m as f64);
    let b = -0.5 * &centering * sq * &centering;
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let largest = eig.eigenvalues[order[0]].max(0.0);
    let negatives = eig
        .eigenvalues
        .iter()
        .filter(|&&l| l < -0.01 * largest)
        .count();
    if negatives > m.saturating_sub(4) {
        return Err(Error::InconsistentDistances(format!(
            "{negatives} significant negative eigenvalues"
        )));
    }
    let mut positions = vec![[0.0; 3]; m];
    for (axis, &k) in order.iter().take(3).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= 1e-12 * largest {
            continue;
        }
        let col = eig.eigenvectors.column(k);
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (i, p) in positions.iter_mut().enumerate() {
            p[axis] = sign * col[i] * lambda.sqrt();
        }
    }
    Ok(positions)
}

/// Localizes one pulse source from its delays by a coarse grid search
/// followed by Gauss-Newton refinement. Planar arrays are solved in their
/// own plane (z = 0).
pub fn localize_pulse(positions: &[Point3], tdoa: &TdoaMatrix, speed_of_sound: f64) -> Result<Point3> {
    let m = positions.len();
    if m < 3 || tdoa.len() != m {
        return Err(Error::InputDomain("pulse localization needs at least three microphones".into()));
    }
    let pairs: Vec<(usize, usize, f64)> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, speed_of_sound * tdoa.get(i, j)))
        .collect();
    let cost = |x: &Point3| -> f64 {
        pairs
            .iter()
            .map(|&(i, j, d)| {
                let r = distance(x, &positions[i]) - distance(x, &positions[j]) - d;
                r * r
            })
            .sum()
    };
    let geom = ArrayGeometry::with_unit_gains(positions.to_vec())?;
    let volumetric = geom.is_volumetric();
    let origin = crate::geometry::centroid(positions);

    let mut best = (f64::INFINITY, origin);
    let elevations: Vec<f64> = if volumetric {
        (-8..=8).map(|e| f64::from(e) * 10.0).collect()
    } else {
        vec![0.0]
    };
    for el in &elevations {
        for az in (0..180).map(|a| f64::from(a) * 2.0) {
            for k in 0..40 {
                let range = 0.2 * 100f64.powf(f64::from(k) / 39.0);
                let (ca, sa) = (az.to_radians().cos(), az.to_radians().sin());
                let ce = el.to_radians().cos();
                let x = [
                    origin[0] + range * ce * ca,
                    origin[1] + range * ce * sa,
                    origin[2] + range * el.to_radians().sin(),
                ];
                let c = cost(&x);
                if c < best.0 {
                    best = (c, x);
                }
            }
        }
    }

    let dims = if volumetric { 3 } else { 2 };
    let mut x = best.1;
    let mut lambda = 1e-3;
    let mut current = best.0;
    for _ in 0..100 {
        let mut jac = DMatrix::zeros(pairs.len(), dims);
        let mut res = DVector::zeros(pairs.len());
        for (row, &(i, j, d)) in pairs.iter().enumerate() {
            let (ri, rj) = (distance(&x, &positions[i]), distance(&x, &positions[j]));
            res[row] = ri - rj - d;
            for k in 0..dims {
                let gi = if ri > 0.0 { (x[k] - positions[i][k]) / ri } else { 0.0 };
                let gj = if rj > 0.0 { (x[k] - positions[j][k]) / rj } else { 0.0 };
                jac[(row, k)] = gi - gj;
            }
        }
        let jt = jac.transpose();
        let mut normal = &jt * &jac;
        for k in 0..dims {
            normal[(k, k)] *= 1.0 + lambda;
            normal[(k, k)] += 1e-12;
        }
        let Some(step) = normal.lu().solve(&(-(&jt * &res))) else {
            break;
        };
        let mut trial = x;
        for k in 0..dims {
            trial[k] += step[k];
        }
        let c = cost(&trial);
        if c < current {
            x = trial;
            current = c;
            lambda = (lambda * 0.3).max(1e-9);
            if step.norm() < 1e-9 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e9 {
                break;
            }
        }
    }
    Ok(x)
}

/// Per-microphone gains from pulse energies.
///
/// Fits `ln E_pi = s_p - 2 ln max(r_pi, 1 m) + 2 ln g_i` in least squares,
/// with the source levels `s_p` free and `sum_i ln g_i = 0`.
pub fn calibrate_gains(
    recordings: &PulseRecordingSet,
    positions: &[Point3],
    pulse_positions: &[Point3],
) -> Result<Vec<f64>> {
    let m = positions.len();
    if recordings.pulses.len() != pulse_positions.len() {
        return Err(Error::InputDomain("one source position per pulse required".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (pulse, src) in recordings.pulses.iter().zip(pulse_positions) {
        if pulse.channels.len() != m {
            return Err(Error::InputDomain("pulse channel count differs from geometry".into()));
        }
        let row: Option<Vec<f64>> = pulse
            .channels
            .iter()
            .zip(positions)
            .map(|(samples, mic)| {
                let energy: f64 = samples.iter().map(|x| x * x).sum();
                let r = distance(src, mic).max(REFERENCE_RANGE);
                (energy > 0.0 && energy.is_finite()).then(|| energy.ln() + 2.0 * r.ln())
            })
            .collect();
        if let Some(row) = row {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(Error::GainUnobservable("no pulse with measurable energy on every channel".into()));
    }
    // Complete balanced design: the least-squares solution separates into
    // per-pulse and per-microphone means.
    let p = rows.len() as f64;
    let grand = rows.iter().flatten().sum::<f64>() / (p * m as f64);
    let gains = (0..m)
        .map(|i| {
            let mic_mean = rows.iter().map(|r| r[i]).sum::<f64>() / p;
            (0.5 * (mic_mean - grand)).exp()
        })
        .collect();
    Ok(gains)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    pub speed_of_sound: f64,
    /// Largest delay searched, in samples; `None` searches the whole segment.
    pub max_lag: Option<usize>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            speed_of_sound: SPEED_OF_SOUND,
            max_lag: None,
        }
    }
}

/// Outcome of a full calibration run.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub geometry: ArrayGeometry,
    pub distances: DistanceEstimate,
    pub pulse_positions: Vec<Point3>,
    pub used_pulses: Vec<usize>,
    pub rejected_pulses: Vec<(usize, String)>,
}

/// Positions and gains from a pulse recording set.
pub fn calibrate(recordings: &PulseRecordingSet, config: &CalibrationConfig) -> Result<CalibrationReport> {
    let m = recordings.channel_count();
    if m < 2 {
        return Err(Error::InputDomain("calibration needs at least two channels".into()));
    }
    let mut tdoas = Vec::new();
    let mut used = Vec::new();
    let mut rejected = Vec::new();
    for (idx, pulse) in recordings.pulses.iter().enumerate() {
        let checked = pulse
            .channels
            .iter()
            .try_for_each(|c| detect_onset(c, recordings.sample_rate).map(drop))
            .and_then(|_| estimate_tdoa(&pulse.channels, recordings.sample_rate, config.max_lag));
        match checked {
            Ok(t) => {
                tdoas.push(t);
                used.push(idx);
            }
            Err(e) => {
                warn!("discarding pulse {idx}: {e}");
                rejected.push((idx, e.to_string()));
            }
        }
    }
    if tdoas.len() < NOMINAL_PULSES {
        warn!("calibrating from {} pulses (nominal {NOMINAL_PULSES})", tdoas.len());
    }
    let distances = estimate_pairwise_distances(&tdoas, config.speed_of_sound)?;
    let positions = mds_localize(&distances.distances)?;

    let (pulse_positions, gains) = if m >= 3 {
        let sources = tdoas
            .iter()
            .map(|t| localize_pulse(&positions, t, config.speed_of_sound))
            .collect::<Result<Vec<_>>>()?;
        let subset = PulseRecordingSet {
            sample_rate: recordings.sample_rate,
            pulses: used.iter().map(|&i| recordings.pulses[i].clone()).collect(),
        };
        let gains = calibrate_gains(&subset, &positions, &sources)?;
        (sources, gains)
    } else {
        warn!("two-microphone array: gains left at unity");
        (Vec::new(), vec![1.0; m])
    };
    Ok(CalibrationReport {
        geometry: ArrayGeometry::new(positions, gains)?,
        distances,
        pulse_positions,
        used_pulses: used,
        rejected_pulses: rejected,
    })
}
