//! `.tsr` tensor files: one JSON header line, then raw little-endian f32 data.
//!
//! Header: `{"shape":[...],"dtype":"f32"}` followed by `\n`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
}

pub fn save_tsr<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let header = Header { shape: t.shape().to_vec(), dtype: "f32".to_string() };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header).map_err(|e| Error::Decode(e.to_string()))?;
    f.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data().iter() {
        buf.extend_from_slice(&(v.to_f64c() as f32).to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_tsr<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    f.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Decode(format!("{}: bad .tsr header: {e}", path.display())))?;
    if header.dtype != "f32" {
        return Err(Error::Decode(format!(
            "{}: unsupported dtype {:?}",
            path.display(),
            header.dtype
        )));
    }
    let n: usize = header.shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    f.read_exact(&mut bytes).map_err(|e| {
        Error::Decode(format!("{}: truncated .tsr payload: {e}", path.display()))
    })?;
    let data: Vec<T> = bytes
        .chunks_exact(4)
        .map(|b| T::from_f64c(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Tensor::new(header.shape, data)
}
