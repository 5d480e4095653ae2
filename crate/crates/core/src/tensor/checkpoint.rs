//! Portable parameter checkpoint format.
//!
//! Layout, designed so other implementations can read it without this code:
//!
//! ```text
//! lip2us-checkpoint v1\n
//! tensor <name> <d0>x<d1>x...x<dk> <byte_offset>\n      (one line per tensor)
//! end\n
//! <raw little-endian f32 payload>
//! ```
//!
//! `byte_offset` is relative to the first byte after the `end\n` line; each
//! tensor occupies `numel * 4` bytes in row-major order. Names are
//! `[A-Za-z0-9_.]+` and unique. Tensors appear in the header in payload order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &str = "lip2us-checkpoint v1";

/// Writes named tensors; values are converted to f32 regardless of `T`.
pub fn save<T: Scalar>(path: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    let mut offset = 0usize;
    for (name, t) in tensors {
        if !name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        {
            return Err(Error::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {} {} {}\n", name, dims.join("x"), offset));
        offset += t.numel() * 4;
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads every tensor in the file, in header order.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

    // Header is ASCII up to and including the "end\n" line.
    let end_marker = b"\nend\n";
    let end_pos = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| Error::Checkpoint("missing end-of-header marker".into()))?;
    let header = std::str::from_utf8(&bytes[..end_pos])
        .map_err(|_| Error::Checkpoint("non-UTF8 header".into()))?;
    let payload = &bytes[end_pos + end_marker.len()..];

    let mut lines = header.lines();
    let magic = lines.next().unwrap_or("");
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic line {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "tensor" {
            return Err(Error::Checkpoint(format!("malformed header line {line:?}")));
        }
        let name = parts[1].to_string();
        let shape: Vec<usize> = parts[2]
            .split('x')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad dim {d:?} in {line:?}")))
            })
            .collect::<Result<_>>()?;
        let offset: usize = parts[3]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad offset in {line:?}")))?;
        let numel: usize = shape.iter().product();
        let nbytes = numel * 4;
        if offset + nbytes > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} spans past payload ({} bytes)",
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in payload[offset..offset + nbytes].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
