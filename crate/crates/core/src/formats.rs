//! On-disk formats: raw converter captures, WAV recordings, array geometry
//! and signature libraries.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::classifier::SignatureLibrary;
use crate::error::{Error, Result};
use crate::frontend::{DecimatedStream, FrontEnd, LogAmpModel, RawAdcBlock, SAMPLE_RATE_HZ};
use crate::geometry::{ArrayGeometry, Point3};
use crate::interp::resample;

/// Raw capture header: `DEAR`, u8 channel count, u32 sample rate, then
/// interleaved u16 codes, all little-endian.
pub const RAW_MAGIC: &[u8; 4] = b"DEAR";
pub const GEOMETRY_VERSION: u32 = 1;

/// Incremental writer for raw converter captures.
pub struct RawAdcWriter<W: Write> {
    inner: W,
    buf: Vec<u8>,
}

impl<W: Write> RawAdcWriter<W> {
    pub fn new(mut inner: W, channel_count: usize, sample_rate: u32) -> Result<Self> {
        let channels = u8::try_from(channel_count)
            .ok()
            .filter(|c| *c > 0)
            .ok_or_else(|| Error::InputDomain(format!("cannot store {channel_count} channels")))?;
        inner.write_all(RAW_MAGIC)?;
        inner.write_all(&[channels])?;
        inner.write_all(&sample_rate.to_le_bytes())?;
        Ok(RawAdcWriter { inner, buf: Vec::new() })
    }

    pub fn write_codes(&mut self, codes: &[u16]) -> Result<()> {
        self.buf.clear();
        self.buf.extend(codes.iter().flat_map(|c| c.to_le_bytes()));
        self.inner.write_all(&self.buf)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn write_raw_adc<W: Write>(w: W, block: &RawAdcBlock) -> Result<()> {
    let mut writer = RawAdcWriter::new(w, block.channel_count(), block.sample_rate())?;
    writer.write_codes(block.codes())?;
    writer.finish()?;
    Ok(())
}

fn read_raw_header<R: Read>(r: &mut R) -> Result<(usize, u32)> {
    let mut head = [0u8; 9];
    r.read_exact(&mut head)
        .map_err(|_| Error::format("raw capture", "truncated header"))?;
    if &head[..4] != RAW_MAGIC {
        return Err(Error::format("raw capture", "bad magic"));
    }
    let channels = usize::from(head[4]);
    if channels == 0 {
        return Err(Error::format("raw capture", "zero channels"));
    }
    Ok((channels, u32::from_le_bytes([head[5], head[6], head[7], head[8]])))
}

pub fn read_raw_adc<R: Read>(mut r: R) -> Result<RawAdcBlock> {
    let (channels, rate) = read_raw_header(&mut r)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 2 != 0 {
        return Err(Error::format("raw capture", "odd payload length"));
    }
    let codes = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    RawAdcBlock::new(channels, rate, codes)
}

/// Streams a raw capture straight through the front end.
pub fn decode_raw_adc<R: Read>(mut r: R, model: LogAmpModel) -> Result<DecimatedStream> {
    let (channels, rate) = read_raw_header(&mut r)?;
    let mut fe = FrontEnd::new(model, rate, channels)?;
    let frame_bytes = 2 * channels * fe.factor();
    let mut out = vec![Vec::new(); channels];
    let mut bytes = vec![0u8; frame_bytes * 256];
    let mut codes = Vec::with_capacity(bytes.len() / 2);
    let mut pending = 0usize;
    loop {
        let n = r.read(&mut bytes[pending..])?;
        if n == 0 {
            break;
        }
        pending += n;
        let usable = pending - pending % frame_bytes;
        codes.clear();
        codes.extend(bytes[..usable].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])));
        fe.push_interleaved(&codes, &mut out)?;
        bytes.copy_within(usable..pending, 0);
        pending -= usable;
    }
    if !pending.is_multiple_of(2 * channels) {
        return Err(Error::format("raw capture", "payload is not whole sample frames"));
    }
    let mut stream = DecimatedStream::new(SAMPLE_RATE_HZ, out)?;
    stream.effective_bits = fe.effective_bits();
    Ok(stream)
}

pub fn read_raw_adc_file(path: &Path, model: LogAmpModel) -> Result<DecimatedStream> {
    decode_raw_adc(BufReader::new(File::open(path)?), model)
}

fn wav_error(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::format("WAV", other.to_string()),
    }
}

/// Multichannel WAV as per-channel samples scaled to [-1, 1], with its rate.
pub fn read_wav<R: Read>(r: R) -> Result<(Vec<Vec<f64>>, u32)> {
    let reader = hound::WavReader::new(r).map_err(wav_error)?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels);
    let mut out = vec![Vec::with_capacity(reader.duration() as usize); channels];
    match spec.sample_format {
        hound::SampleFormat::Float => {
            for (i, s) in reader.into_samples::<f32>().enumerate() {
                out[i % channels].push(f64::from(s.map_err(wav_error)?));
            }
        }
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(i32::from(spec.bits_per_sample) - 1);
            for (i, s) in reader.into_samples::<i32>().enumerate() {
                out[i % channels].push(f64::from(s.map_err(wav_error)?) / scale);
            }
        }
    }
    Ok((out, spec.sample_rate))
}

/// WAV recording as a stream at the processing rate; `full_scale` is the
/// acoustic amplitude represented by a full-scale sample.
pub fn wav_to_stream<R: Read>(r: R, full_scale: f64) -> Result<DecimatedStream> {
    let (channels, rate) = read_wav(r)?;
    let channels = channels
        .into_iter()
        .map(|c| {
            let c = if f64::from(rate) == SAMPLE_RATE_HZ {
                c
            } else {
                resample(&c, f64::from(rate), SAMPLE_RATE_HZ)
            };
            c.into_iter().map(|v| v * full_scale).collect()
        })
        .collect();
    DecimatedStream::new(SAMPLE_RATE_HZ, channels)
}

/// Writes integer PCM (16, 24 or 32 bit); samples are divided by `full_scale`
/// and clipped to [-1, 1].
pub fn write_wav<W: Write + std::io::Seek>(
    w: W,
    channels: &[Vec<f64>],
    sample_rate: u32,
    bits: u16,
    full_scale: f64,
) -> Result<()> {
    if !matches!(bits, 16 | 24 | 32) {
        return Err(Error::InputDomain(format!("{bits}-bit WAV is not supported")));
    }
    let spec = hound::WavSpec {
        channels: u16::try_from(channels.len()).map_err(|_| Error::InputDomain("too many channels".into()))?,
        sample_rate,
        bits_per_sample: bits,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::new(w, spec).map_err(wav_error)?;
    let peak = 2f64.powi(i32::from(bits) - 1) - 1.0;
    let len = channels.first().map_or(0, Vec::len);
    for n in 0..len {
        for c in channels {
            let v = (c[n] / full_scale).clamp(-1.0, 1.0);
            writer.write_sample((v * peak).round() as i32).map_err(wav_error)?;
        }
    }
    writer.finalize().map_err(wav_error)
}

/// Versioned JSON record of a calibrated array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryFile {
    pub version: u32,
    /// Seconds since the Unix epoch when the calibration was made.
    pub timestamp: u64,
    pub speed_of_sound: f64,
    pub positions: Vec<Point3>,
    pub gains: Vec<f64>,
}

impl GeometryFile {
    pub fn new(geometry: &ArrayGeometry, speed_of_sound: f64) -> Self {
        GeometryFile {
            version: GEOMETRY_VERSION,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            speed_of_sound,
            positions: geometry.positions().to_vec(),
            gains: geometry.gains().to_vec(),
        }
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(self.positions.clone(), self.gains.clone())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = serde_json::from_str(text).map_err(|e| Error::format("geometry", e.to_string()))?;
        if probe.version != GEOMETRY_VERSION {
            return Err(Error::Version {
                kind: "geometry",
                version: probe.version,
            });
        }
        let file: GeometryFile = serde_json::from_str(text).map_err(|e| Error::format("geometry", e.to_string()))?;
        file.geometry()?;
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        GeometryFile::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

pub fn load_library(path: &Path) -> Result<SignatureLibrary> {
    SignatureLibrary::read_from(BufReader::new(File::open(path)?))
}

pub fn save_library(library: &SignatureLibrary, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    library.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads a recording by extension: `.wav` or a raw capture otherwise.
pub fn load_stream(path: &Path, full_scale: f64) -> Result<DecimatedStream> {
    let is_wav = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        wav_to_stream(BufReader::new(File::open(path)?), full_scale)
    } else {
        let mut stream = read_raw_adc_file(path, LogAmpModel::default())?;
        for c in stream.channels.iter_mut() {
            c.iter_mut().for_each(|v| *v *= full_scale);
        }
        Ok(stream)
    }
}
