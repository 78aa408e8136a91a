use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{EnvSample, Vocab, WorldConfig, VOCAB_VERSION};
use crate::error::{Error, Result};

/// First line of every dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub vocab_version: u32,
    pub vocab_size: usize,
    pub world: WorldConfig,
    pub world_seed: u64,
    pub count: usize,
}

impl DatasetHeader {
    pub fn new(world: WorldConfig, world_seed: u64, count: usize) -> Self {
        Self {
            vocab_version: VOCAB_VERSION,
            vocab_size: Vocab::new(world).size(),
            world,
            world_seed,
            count,
        }
    }
}

/// Writes a header line followed by one JSON record per sample.
pub fn write_samples<W: Write>(mut out: W, header: &DatasetHeader, samples: &[EnvSample]) -> Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples<R: BufRead>(input: R) -> Result<(DatasetHeader, Vec<EnvSample>)> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Structural("empty dataset file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    if header.vocab_version != VOCAB_VERSION {
        return Err(Error::Manifest(format!(
            "dataset vocabulary version {} differs from {VOCAB_VERSION}",
            header.vocab_version
        )));
    }
    let mut samples = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line)?);
    }
    if samples.len() != header.count {
        return Err(Error::Structural(format!(
            "header announces {} samples, file holds {}",
            header.count,
            samples.len()
        )));
    }
    Ok((header, samples))
}
