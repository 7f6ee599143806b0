//! Line-delimited JSON dataset files.
//!
//! ```text
//! {"format":"mpl-products","version":1}
//! {"id":"nov-000000","shape":[4,16],"image_features":[...],"attributes":["brand:x"],"title":"..."}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ProductRecord;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const DATASET_FORMAT: &str = "mpl-products";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    shape: [usize; 2],
    image_features: Vec<f32>,
    attributes: Vec<String>,
    title: String,
}

pub fn write_dataset(path: &Path, records: &[ProductRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
    };
    let mut emit = |s: String| writeln!(w, "{s}").map_err(|e| Error::io(path, e));
    emit(serde_json::to_string(&header)?)?;
    for r in records {
        let shape = r.image_features.shape();
        let line = Line {
            id: r.id.clone(),
            shape: [shape[0], shape[1]],
            image_features: r.image_features.data().to_vec(),
            attributes: r.attributes.clone(),
            title: r.title.clone(),
        };
        emit(serde_json::to_string(&line)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<ProductRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first)
        .map_err(|e| Error::Format(format!("bad dataset header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset {} v{}",
            header.format, header.version
        )));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 2)))?;
        let image_features = Tensor::new(&l.shape, l.image_features)
            .map_err(|_| Error::Format(format!("line {}: image shape mismatch", n + 2)))?;
        out.push(ProductRecord {
            id: l.id,
            image_features,
            attributes: l.attributes,
            title: l.title,
        });
    }
    Ok(out)
}
