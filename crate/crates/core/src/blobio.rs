//! Container format for checkpoints and packed data sets.
//!
//! Layout: the magic `ZBRA1`, a length-prefixed block of canonical
//! key-sorted `key=value` text, then named tensor blobs until end of file.
//! Each blob is `u32` name length, the name, `u32` rank, `u64` dims, and
//! the elements as little-endian 32-bit floats. Values quantized to f32
//! round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::Error;
use crate::tensor::{DType, Tensor};
use crate::Result;

pub const MAGIC: &[u8; 5] = b"ZBRA1";

/// Serialize a key/value map as canonical sorted `key=value` lines.
pub fn kv_to_text(kv: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in kv {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub fn kv_from_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "line {}: expected key=value, got {line:?}",
                lineno + 1
            ))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn write_blobs(path: &Path, config_text: &str, blobs: &[(String, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let cfg = config_text.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg)?;
    for (name, t) in blobs {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_blobs(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{path:?}: bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config_text = String::from_utf8(cfg)
        .map_err(|e| Error::data(format!("{path:?}: config text is not UTF-8: {e}")))?;

    let mut blobs = Vec::new();
    loop {
        let name_len = match read_u32(&mut r) {
            Ok(n) => n as usize,
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::data(format!("{path:?}: blob name is not UTF-8: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        blobs.push((name, Tensor::from_vec(shape, data, DType::F32)));
    }
    Ok((config_text, blobs))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn kv_text_roundtrip_sorted() {
        let mut kv = BTreeMap::new();
        kv.insert("window".to_string(), "512".to_string());
        kv.insert("attn".to_string(), "group".to_string());
        let text = kv_to_text(&kv);
        assert_eq!(text, "attn=group\nwindow=512\n");
        assert_eq!(kv_from_text(&text).unwrap(), kv);
        assert!(kv_from_text("nonsense").is_err());
    }

    #[test]
    fn blob_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("blobio-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.zbra");
        let mut r = rng::stream(1, "blobio");
        let a = Tensor::from_vec(vec![3, 4], rng::uniform_vec(&mut r, 12), DType::F32);
        let b = Tensor::from_vec(vec![2, 2, 2], rng::uniform_vec(&mut r, 8), DType::F32);
        write_blobs(
            &path,
            "k=v\n",
            &[("alpha".to_string(), &a), ("beta".to_string(), &b)],
        )
        .unwrap();
        let (cfg, blobs) = read_blobs(&path).unwrap();
        assert_eq!(cfg, "k=v\n");
        assert_eq!(blobs.len(), 2);
        assert_eq!(blobs[0].0, "alpha");
        assert_eq!(blobs[0].1.shape(), &[3, 4]);
        for (x, y) in blobs[0].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in blobs[1].1.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join(format!("blobio-magic-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.zbra");
        std::fs::write(&path, b"NOPE!rest").unwrap();
        assert!(matches!(read_blobs(&path), Err(Error::Data(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
