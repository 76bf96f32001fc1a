//! Per-example detector output and the shared verdict file format.
//!
//! Verdict files are tab-separated with a header row:
//!
//! ```text
//! id	method	score	flag
//! s000001	gmm	0.8312	1
//! ```

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseVerdict {
    pub id: String,
    pub method: String,
    /// Higher means more noise-like. Scale depends on the method.
    pub score: f64,
    #[serde(serialize_with = "ser_flag", deserialize_with = "de_flag")]
    pub flag: bool,
}

fn ser_flag<S: Serializer>(flag: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*flag))
}

fn de_flag<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    match u8::deserialize(d)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(serde::de::Error::custom(format!("flag must be 0 or 1, got {v}"))),
    }
}

/// Builds verdicts for a method from parallel id/score/flag sequences.
pub fn verdicts_from<'a>(
    method: &str,
    ids: impl Iterator<Item = &'a str>,
    scores: &[f64],
    flags: &[bool],
) -> Vec<NoiseVerdict> {
    ids.zip(scores.iter().zip(flags))
        .map(|(id, (&score, &flag))| NoiseVerdict {
            id: id.to_owned(),
            method: method.to_owned(),
            score,
            flag,
        })
        .collect()
}

pub fn flags_of(verdicts: &[NoiseVerdict]) -> Vec<bool> {
    verdicts.iter().map(|v| v.flag).collect()
}

pub fn write_verdicts(verdicts: &[NoiseVerdict], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    for v in verdicts {
        w.serialize(v).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_verdicts(path: &Path) -> Result<Vec<NoiseVerdict>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| Error::Parse {
                line: i + 2,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::invalid(format!("{}: {e}", path.display()))
    }
}
