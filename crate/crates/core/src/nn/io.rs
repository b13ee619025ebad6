//! Named tensor sets on disk: a `tensors.tsv` manifest (name, shape, dtype,
//! file) next to one little-endian f64 array per tensor.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, IoContext, Result};

pub const TENSOR_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "tensors.tsv";

pub fn save_tensors<'a>(dir: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut manifest = format!("# mfclip-tensors\tversion={TENSOR_FORMAT_VERSION}\n");
    for (name, t) in tensors {
        if name.contains(['\t', '/', '\\']) || name.is_empty() {
            return Err(Error::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        let file = format!("{name}.bin");
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name}\t{}\tf64\t{file}\n", shape.join(",")));
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).at(&path)?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).at(&path)
}

pub fn load_tensors(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).at(&path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let expected = format!("# mfclip-tensors\tversion={TENSOR_FORMAT_VERSION}");
    if header != expected {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported header {header:?}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| Error::Checkpoint(format!("{}:{}: {msg}", path.display(), lineno + 2));
        if cols.len() != 4 {
            return Err(bad("expected name, shape, dtype, file"));
        }
        if cols[2] != "f64" {
            return Err(bad(&format!("unsupported dtype {}", cols[2])));
        }
        let shape = cols[1]
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("malformed shape"))?;
        let file = dir.join(cols[3]);
        let bytes = fs::read(&file).at(&file)?;
        if bytes.len() % 8 != 0 {
            return Err(bad("file length is not a multiple of 8"));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| bad(&e.to_string()))?;
        out.push((cols[0].to_string(), t));
    }
    Ok(out)
}
