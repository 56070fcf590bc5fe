//! Spectral-signature nearest-neighbour classification.
//!
//! A signature is the per-bin mean and standard deviation of a UAV's
//! normalized PSD. Frames are matched to the library by inverse-variance
//! weighted Euclidean distance; frame labels are pooled per second, and a
//! detection fires when two consecutive seconds agree on the same UAV with
//! distances below the library threshold.

use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::frontend::PSD_BINS;

pub const MAX_SLOTS: usize = 32;
pub const MIN_TRAINING_FRAMES: usize = 10;
pub const STD_FLOOR: f64 = 1e-6;
pub const LIBRARY_MAGIC: &[u8; 4] = b"DSIG";
pub const LIBRARY_VERSION: u16 = 1;
/// Percentile of training self-distances used as the detection threshold.
pub const THRESHOLD_PERCENTILE: f64 = 99.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Signature {
    pub id: u8,
    pub name: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub train_frames: usize,
}

/// Per-bin sample mean and (n - 1) standard deviation, without flooring.
pub fn bin_statistics(frames: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if frames.len() < 2 {
        return Err(Error::InsufficientTrainingData {
            frames: frames.len(),
            required: 2,
        });
    }
    let bins = frames[0].len();
    if frames.iter().any(|f| f.len() != bins) {
        return Err(Error::InputDomain("training frames differ in length".into()));
    }
    let n = frames.len() as f64;
    let mut mean = vec![0.0; bins];
    for f in frames {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; bins];
    for f in frames {
        for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / (n - 1.0)).sqrt()).collect();
    Ok((mean, std))
}

/// Builds a signature from normalized PSD frames.
pub fn train_signature(frames: &[Vec<f64>], name: &str) -> Result<Signature> {
    if frames.len() < MIN_TRAINING_FRAMES {
        return Err(Error::InsufficientTrainingData {
            frames: frames.len(),
            required: MIN_TRAINING_FRAMES,
        });
    }
    if frames[0].len() != PSD_BINS {
        return Err(Error::InputDomain(format!("training frames must have {PSD_BINS} bins")));
    }
    let (mut mean, std) = bin_statistics(frames)?;
    let total: f64 = mean.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateInput("training frames carry no power".into()));
    }
    mean.iter_mut().for_each(|m| *m /= total);
    Ok(Signature {
        id: 0,
        name: name.to_owned(),
        mean,
        std: std.into_iter().map(|s| s.max(STD_FLOOR)).collect(),
        train_frames: frames.len(),
    })
}

impl Signature {
    /// `sum_k ((psd[k] - mean[k]) / std[k])^2`.
    pub fn distance(&self, psd: &[f64]) -> f64 {
        psd.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((p, m), s)| {
                let z = (p - m) / s;
                z * z
            })
            .sum()
    }
}

/// Up to 32 signatures plus the detection threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureLibrary {
    pub version: u16,
    pub distance_threshold: f64,
    slots: Vec<Signature>,
}

impl Default for SignatureLibrary {
    fn default() -> Self {
        SignatureLibrary::new(f64::INFINITY)
    }
}

impl SignatureLibrary {
    pub fn new(distance_threshold: f64) -> Self {
        SignatureLibrary {
            version: LIBRARY_VERSION,
            distance_threshold,
            slots: Vec::new(),
        }
    }

    pub fn slots(&self) -> &[Signature] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: u8) -> Option<&Signature> {
        self.slots.iter().find(|s| s.id == id)
    }

    /// Stores `sig` in the lowest free slot and returns that slot id.
    pub fn add(&mut self, mut sig: Signature) -> Result<u8> {
        if self.slots.len() >= MAX_SLOTS {
            return Err(Error::Configuration(format!("library is full ({MAX_SLOTS} slots)")));
        }
        let id = (0..MAX_SLOTS as u8)
            .find(|id| self.get(*id).is_none())
            .expect("a free slot exists below the capacity");
        sig.id = id;
        self.slots.push(sig);
        self.slots.sort_by_key(|s| s.id);
        Ok(id)
    }

    pub fn remove(&mut self, id: u8) -> Result<Signature> {
        let pos = self
            .slots
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::Configuration(format!("no signature in slot {id}")))?;
        Ok(self.slots.remove(pos))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(LIBRARY_MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&[self.slots.len() as u8])?;
        w.write_all(&self.distance_threshold.to_le_bytes())?;
        for s in &self.slots {
            let name = s.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Configuration("signature name too long".into()))?;
            w.write_all(&[s.id])?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name)?;
            for v in s.mean.iter().chain(&s.std) {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        const KIND: &str = "signature library";
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != LIBRARY_MAGIC {
            return Err(Error::format(KIND, "bad magic"));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != LIBRARY_VERSION {
            return Err(Error::Version {
                kind: KIND,
                version: u32::from(version),
            });
        }
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let count = usize::from(b1[0]);
        if count > MAX_SLOTS {
            return Err(Error::format(KIND, format!("{count} slots exceeds {MAX_SLOTS}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut lib = SignatureLibrary::new(f64::from_le_bytes(b8));
        let mut floats = vec![0u8; 2 * PSD_BINS * 4];
        for _ in 0..count {
            r.read_exact(&mut b1)?;
            let id = b1[0];
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; usize::from(u16::from_le_bytes(b2))];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format(KIND, "name is not UTF-8"))?;
            r.read_exact(&mut floats)?;
            let vals: Vec<f64> = floats
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            if usize::from(id) >= MAX_SLOTS || lib.get(id).is_some() {
                return Err(Error::format(KIND, format!("invalid or duplicate slot id {id}")));
            }
            lib.slots.push(Signature {
                id,
                name,
                mean: vals[..PSD_BINS].to_vec(),
                std: vals[PSD_BINS..].to_vec(),
                train_frames: 0,
            });
        }
        lib.slots.sort_by_key(|s| s.id);
        Ok(lib)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Classification {
    pub id: u8,
    pub distance: f64,
}

/// Nearest signature by weighted Euclidean distance; ties go to the lowest id.
pub fn classify(psd: &[f64], library: &SignatureLibrary) -> Result<Classification> {
    if library.is_empty() {
        return Err(Error::Configuration("signature library is empty".into()));
    }
    if psd.len() != PSD_BINS {
        return Err(Error::InputDomain(format!("expected {PSD_BINS} bins")));
    }
    let mut best = Classification {
        id: 0,
        distance: f64::INFINITY,
    };
    for s in library.slots() {
        let d = s.distance(psd);
        if d < best.distance {
            best = Classification { id: s.id, distance: d };
        }
    }
    Ok(best)
}

/// Pooled decision for one second of frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SecondDecision {
    pub second: u64,
    pub id: u8,
    pub distance: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Majority label over the second (ties to the lowest id) with the median
/// distance of the winning label's frames. `None` for an empty second.
pub fn decide_second(second: u64, frames: &[Classification]) -> Option<SecondDecision> {
    let mut votes = [0usize; 256];
    for f in frames {
        votes[usize::from(f.id)] += 1;
    }
    let (id, &count) = votes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    if count == 0 {
        return None;
    }
    let mut distances: Vec<f64> = frames
        .iter()
        .filter(|f| usize::from(f.id) == id)
        .map(|f| f.distance)
        .collect();
    Some(SecondDecision {
        second,
        id: id as u8,
        distance: median(&mut distances),
    })
}

/// A UAV identity confirmed over two consecutive seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Confirmation {
    pub id: u8,
    pub second_pair: (u64, u64),
    pub distances: [f64; 2],
    /// End of the confirming second, seconds from stream start.
    pub t: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TemporalState {
    last: Option<SecondDecision>,
    pub confirmed: bool,
}

impl TemporalState {
    pub fn last_second(&self) -> Option<SecondDecision> {
        self.last
    }
}

/// Advances the two-second confirmation rule by one decision.
pub fn temporal_confirm(
    state: TemporalState,
    decision: SecondDecision,
    threshold: f64,
) -> Result<(TemporalState, Option<Confirmation>)> {
    if let Some(prev) = state.last {
        if decision.second <= prev.second {
            return Err(Error::Sequencing {
                previous: prev.second,
                got: decision.second,
            });
        }
    }
    let event = state.last.and_then(|prev| {
        (prev.second + 1 == decision.second
            && prev.id == decision.id
            && prev.distance < threshold
            && decision.distance < threshold)
            .then_some(Confirmation {
                id: decision.id,
                second_pair: (prev.second, decision.second),
                distances: [prev.distance, decision.distance],
                t: (decision.second + 1) as f64,
            })
    });
    Ok((
        TemporalState {
            last: Some(decision),
            confirmed: event.is_some(),
        },
        event,
    ))
}

/// Nearest-rank percentile of `values` (`pct` in 0..=100).
pub fn percentile(values: &[f64], pct: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}

/// Distances of training frames to their own signature.
pub fn self_distances(sig: &Signature, frames: &[Vec<f64>]) -> Vec<f64> {
    frames.iter().map(|f| sig.distance(f)).collect()
}
