use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A (target image, receptacle image) pair with its reference instructions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePair {
    pub sample_id: String,
    pub target_image_id: String,
    pub receptacle_image_id: String,
    pub references: Vec<String>,
}

/// Parses JSON Lines. Blank lines are skipped; line numbers are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<SamplePair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: SamplePair = serde_json::from_str(line).map_err(|e| Error::ParseError {
            line: i + 1,
            message: e.to_string(),
        })?;
        if pair.references.is_empty() {
            return Err(Error::ParseError {
                line: i + 1,
                message: format!("sample {:?} has no references", pair.sample_id),
            });
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn load_dataset(path: &Path) -> Result<Vec<SamplePair>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_dataset(&text)
}

pub fn save_dataset(pairs: &[SamplePair], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    let file = fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let line = serde_json::to_string(p).map_err(Error::json(path))?;
        writeln!(w, "{line}").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Fails with `DanglingImageId` on the first image id `resolves` rejects.
pub fn check_image_ids(pairs: &[SamplePair], resolves: impl Fn(&str) -> bool) -> Result<()> {
    for p in pairs {
        for id in [&p.target_image_id, &p.receptacle_image_id] {
            if !resolves(id) {
                return Err(Error::DanglingImageId {
                    sample_id: p.sample_id.clone(),
                    image_id: id.clone(),
                });
            }
        }
    }
    Ok(())
}
