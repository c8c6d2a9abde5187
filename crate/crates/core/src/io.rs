//! Signal file I/O.
//!
//! The on-disk format is a single text header line followed by a binary
//! payload of channel-interleaved little-endian `f32` frames:
//!
//! ```text
//! corss-signal v1 n_ch=<int> rate=<float> samples=<int> enc=f32le\n
//! <frame 0: ch0 ch1 ... chN-1> <frame 1: ...> ...
//! ```
//!
//! Ground truth travels as a JSON sidecar; CSV import/export is provided as a
//! convenience converter.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::block::MultichannelBlock;
use crate::error::{CorssError, Result};
use crate::synth::GroundTruth;

pub const MAGIC: &str = "corss-signal";
pub const VERSION: &str = "v1";

/// Writes the header line for a stream of `n_samples` frames.
pub fn write_signal_header<W: Write>(
    out: &mut W,
    n_ch: usize,
    sample_rate: f64,
    n_samples: usize,
) -> Result<()> {
    writeln!(
        out,
        "{MAGIC} {VERSION} n_ch={n_ch} rate={sample_rate} samples={n_samples} enc=f32le"
    )?;
    Ok(())
}

/// Appends one block of frames (channel-interleaved f32le) to the payload.
pub fn write_signal_frames<W: Write>(out: &mut W, block: &MultichannelBlock) -> Result<()> {
    let mut buf = Vec::with_capacity(block.len() * block.n_ch() * 4);
    for c in 0..block.len() {
        for r in 0..block.n_ch() {
            buf.extend_from_slice(&(block.data[(r, c)] as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Writes a whole recording to `path`.
pub fn write_signal(path: &Path, block: &MultichannelBlock) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_signal_header(&mut out, block.n_ch(), block.sample_rate, block.len())?;
    write_signal_frames(&mut out, block)?;
    out.flush()?;
    Ok(())
}

struct Header {
    n_ch: usize,
    sample_rate: f64,
    n_samples: usize,
}

fn parse_header(line: &str) -> Result<Header> {
    let mut parts = line.split_whitespace();
    let magic = parts.next().unwrap_or("");
    if magic != MAGIC {
        return Err(CorssError::FormatError(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = parts.next().unwrap_or("");
    if version != VERSION {
        return Err(CorssError::FormatError(format!(
            "unsupported version {version:?}"
        )));
    }
    let mut n_ch = None;
    let mut rate = None;
    let mut samples = None;
    let mut enc = None;
    for field in parts {
        let (key, value) = field.split_once('=').ok_or_else(|| {
            CorssError::FormatError(format!("malformed header field {field:?}"))
        })?;
        match key {
            "n_ch" => n_ch = Some(value.parse::<usize>().map_err(bad_field(field))?),
            "rate" => rate = Some(value.parse::<f64>().map_err(|_| {
                CorssError::FormatError(format!("bad header field {field:?}"))
            })?),
            "samples" => samples = Some(value.parse::<usize>().map_err(bad_field(field))?),
            "enc" => enc = Some(value.to_string()),
            other => {
                return Err(CorssError::FormatError(format!(
                    "unknown header field {other:?}"
                )))
            }
        }
    }
    if enc.as_deref() != Some("f32le") {
        return Err(CorssError::FormatError(format!(
            "unsupported encoding {enc:?}"
        )));
    }
    match (n_ch, rate, samples) {
        (Some(n_ch), Some(sample_rate), Some(n_samples)) if n_ch > 0 && sample_rate > 0.0 => {
            Ok(Header {
                n_ch,
                sample_rate,
                n_samples,
            })
        }
        _ => Err(CorssError::FormatError(
            "header missing or invalid n_ch/rate/samples".into(),
        )),
    }
}

fn bad_field(field: &str) -> impl Fn(std::num::ParseIntError) -> CorssError + '_ {
    move |_| CorssError::FormatError(format!("unparseable header field {field:?}"))
}

// f64 parse errors share the message path
impl From<std::num::ParseFloatError> for CorssError {
    fn from(e: std::num::ParseFloatError) -> Self {
        CorssError::FormatError(format!("unparseable number: {e}"))
    }
}

fn read_signal_impl(path: &Path, allow_truncated: bool) -> Result<MultichannelBlock> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header = parse_header(line.trim_end())?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let frame_bytes = header.n_ch * 4;
    let expected = header.n_samples * frame_bytes;
    let n_samples = if payload.len() == expected {
        header.n_samples
    } else if allow_truncated && payload.len() < expected {
        payload.len() / frame_bytes
    } else {
        return Err(CorssError::StreamCorrupt(format!(
            "payload has {} bytes, header promises {} ({} frames of {} channels)",
            payload.len(),
            expected,
            header.n_samples,
            header.n_ch
        )));
    };
    let mut data = DMatrix::zeros(header.n_ch, n_samples);
    for c in 0..n_samples {
        for r in 0..header.n_ch {
            let off = c * frame_bytes + r * 4;
            let bytes: [u8; 4] = payload[off..off + 4].try_into().unwrap();
            data[(r, c)] = f32::from_le_bytes(bytes) as f64;
        }
    }
    MultichannelBlock::new(data, 0, header.sample_rate)
}

/// Reads a recording; the payload must match the header exactly.
pub fn read_signal(path: &Path) -> Result<MultichannelBlock> {
    read_signal_impl(path, false)
}

/// Reads a recording, tolerating a payload cut short at any point: all fully
/// written frames are returned (recovery path for interrupted writers).
pub fn read_signal_lenient(path: &Path) -> Result<MultichannelBlock> {
    read_signal_impl(path, true)
}

pub fn write_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, truth)?;
    out.flush()?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let reader = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(reader)?)
}

/// Exports a recording as CSV with a `ch0,ch1,...` header row, one frame per
/// line. Full `f64` precision via shortest round-trip formatting.
pub fn export_csv(path: &Path, block: &MultichannelBlock) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let cols: Vec<String> = (0..block.n_ch()).map(|r| format!("ch{r}")).collect();
    writeln!(out, "{}", cols.join(","))?;
    for c in 0..block.len() {
        let row: Vec<String> = (0..block.n_ch())
            .map(|r| format!("{}", block.data[(r, c)]))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Imports a CSV written by [`export_csv`] (or any numeric CSV with a header
/// row) at the given sample rate.
pub fn import_csv(path: &Path, sample_rate: f64) -> Result<MultichannelBlock> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| CorssError::FormatError("empty CSV".into()))??;
    let n_ch = header.split(',').count();
    if n_ch == 0 {
        return Err(CorssError::FormatError("CSV header has no columns".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CorssError::FormatError(format!("CSV line {}: {e}", i + 2)))?;
        if vals.len() != n_ch {
            return Err(CorssError::FormatError(format!(
                "CSV line {} has {} fields, expected {n_ch}",
                i + 2,
                vals.len()
            )));
        }
        rows.push(vals);
    }
    let data = DMatrix::from_fn(n_ch, rows.len(), |r, c| rows[c][r]);
    MultichannelBlock::new(data, 0, sample_rate)
}
