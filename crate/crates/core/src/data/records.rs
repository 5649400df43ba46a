//! Line-delimited corpus records.
//!
//! One JSON object per line:
//!
//! ```text
//! {"id":0,"height":64,"width":64,"channels":3,"image":"00ff..","report":"there is a .."}
//! ```
//!
//! `image` is the base-16 encoding of one byte per value in `(row, column,
//! channel)` order, each byte being `round(255 * pixel)`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::corpus::{Region, Sample};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Serialize, Deserialize)]
struct Record {
    id: usize,
    height: usize,
    width: usize,
    channels: usize,
    image: String,
    report: String,
}

/// A sample read back from a record file. Region descriptors are not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportedSample {
    pub id: usize,
    pub image: Tensor<f32>,
    pub report: String,
}

impl From<&Sample> for ImportedSample {
    fn from(s: &Sample) -> Self {
        Self {
            id: s.id,
            image: s.image.clone(),
            report: s.report.clone(),
        }
    }
}

impl ImportedSample {
    /// Wrap as a [`Sample`] with unknown regions (all reported as empty).
    pub fn into_sample(self) -> Sample {
        Sample {
            id: self.id,
            image: self.image,
            regions: [Region::Empty; 4],
            report: self.report,
        }
    }
}

pub fn write_records<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let shape = s.image.shape();
        let bytes: Vec<u8> = s
            .image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let rec = Record {
            id: s.id,
            height: shape[0],
            width: shape[1],
            channels: shape[2],
            image: hex::encode(bytes),
            report: s.report.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<ImportedSample>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let bytes = hex::decode(&rec.image)
            .map_err(|e| Error::Corpus(format!("line {}: bad image payload: {e}", lineno + 1)))?;
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        let image = Tensor::new(&[rec.height, rec.width, rec.channels], data)
            .map_err(|e| Error::Corpus(format!("line {}: {e}", lineno + 1)))?;
        out.push(ImportedSample {
            id: rec.id,
            image,
            report: rec.report,
        });
    }
    Ok(out)
}
