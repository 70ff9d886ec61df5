//! Flat binary dataset export.
//!
//! Layout: a 16-byte header of four little-endian `u32`s
//! (`magic`, `version`, `N`, `N_t·B`) followed by one record per sample of
//! little-endian `f64`s: `snr_db`, the interleaved received pilots
//! (`2 · pilot_length`), then the interleaved row-major truth
//! (`2 · N · N_t·B`). The user id, sample count and pilot length live in a
//! sidecar `key = value` manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{PilotDataset, PilotSample};
use crate::linalg::{ComplexMatrix, C64};
use crate::{Error, Result};

/// `"CFDS"` read as a little-endian u32.
pub const DATASET_MAGIC: u32 = u32::from_le_bytes(*b"CFDS");
pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset(ds: &PilotDataset, bin_path: &Path, manifest_path: &Path) -> Result<()> {
    let record = 1 + 2 * ds.pilot_length + 2 * ds.ris_elements * ds.stacked_antennas;
    let mut buf = Vec::with_capacity(16 + 8 * record * ds.len());
    for word in [
        DATASET_MAGIC,
        DATASET_VERSION,
        ds.ris_elements as u32,
        ds.stacked_antennas as u32,
    ] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    for s in &ds.samples {
        if s.received.len() != ds.pilot_length
            || s.truth.shape() != (ds.ris_elements, ds.stacked_antennas)
        {
            return Err(Error::shape(
                "write_dataset",
                format!(
                    "{} pilots, {}x{} truth",
                    ds.pilot_length, ds.ris_elements, ds.stacked_antennas
                ),
                format!("{} pilots, {:?} truth", s.received.len(), s.truth.shape()),
            ));
        }
        buf.extend_from_slice(&s.snr_db.to_le_bytes());
        for y in &s.received {
            buf.extend_from_slice(&y.re.to_le_bytes());
            buf.extend_from_slice(&y.im.to_le_bytes());
        }
        for v in s.truth.to_interleaved() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(bin_path, &buf)?;

    let mut m = fs::File::create(manifest_path)?;
    writeln!(m, "format = cffl-dataset")?;
    writeln!(m, "version = {DATASET_VERSION}")?;
    writeln!(m, "user = {}", ds.user)?;
    writeln!(m, "samples = {}", ds.len())?;
    writeln!(m, "pilot_length = {}", ds.pilot_length)?;
    writeln!(m, "ris_elements = {}", ds.ris_elements)?;
    writeln!(m, "stacked_antennas = {}", ds.stacked_antennas)?;
    writeln!(
        m,
        "record = snr_db, received[2*pilot_length], truth[2*ris_elements*stacked_antennas]"
    )?;
    Ok(())
}

fn manifest_value(text: &str, key: &str) -> Result<usize> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .ok_or_else(|| Error::Format(format!("manifest missing `{key}`")))?
        .1
        .trim()
        .parse()
        .map_err(|e| Error::Format(format!("manifest `{key}`: {e}")))
}

pub fn read_dataset(bin_path: &Path, manifest_path: &Path) -> Result<PilotDataset> {
    let manifest = fs::read_to_string(manifest_path)?;
    let user = manifest_value(&manifest, "user")?;
    let count = manifest_value(&manifest, "samples")?;
    let pilot_length = manifest_value(&manifest, "pilot_length")?;

    let bytes = fs::read(bin_path)?;
    if bytes.len() < 16 {
        return Err(Error::Format("dataset shorter than header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    if word(1) != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            word(1)
        )));
    }
    let n = word(2) as usize;
    let m = word(3) as usize;
    if manifest_value(&manifest, "ris_elements")? != n
        || manifest_value(&manifest, "stacked_antennas")? != m
    {
        return Err(Error::Format(
            "manifest and header disagree on dimensions".into(),
        ));
    }
    let record = 1 + 2 * pilot_length + 2 * n * m;
    if bytes.len() != 16 + 8 * record * count {
        return Err(Error::Format(format!(
            "expected {} bytes, found {}",
            16 + 8 * record * count,
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let samples = floats
        .chunks_exact(record)
        .map(|r| {
            let received = r[1..1 + 2 * pilot_length]
                .chunks_exact(2)
                .map(|p| C64::new(p[0], p[1]))
                .collect();
            Ok(PilotSample {
                snr_db: r[0],
                received,
                truth: ComplexMatrix::from_interleaved(n, m, &r[1 + 2 * pilot_length..])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PilotDataset {
        user,
        pilot_length,
        ris_elements: n,
        stacked_antennas: m,
        samples,
    })
}
