//! "NTC1" weight container: magic, 8-byte LE manifest length, JSON manifest, LE blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::GradientTape;
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

const MAGIC: &[u8; 4] = b"NTC1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dtype: u8,
    pub rank: usize,
    pub extents: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<Entry>,
    /// Free-form provenance (e.g. the config the weights were trained with).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

fn push_le<T: Real>(v: T, out: &mut Vec<u8>) {
    match T::DTYPE {
        DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
    }
}

pub fn to_bytes<T: Real>(tape: &GradientTape<T>, meta: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(tape.len());
    for (name, t) in tape.params() {
        tensors.push(Entry {
            name: name.to_string(),
            dtype: T::DTYPE.code(),
            rank: t.rank(),
            extents: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for &v in t.data() {
            push_le(v, &mut blob);
        }
    }
    let manifest = serde_json::to_vec(&Manifest { tensors, meta })?;
    let mut out = Vec::with_capacity(12 + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save<T: Real>(tape: &GradientTape<T>, meta: Option<serde_json::Value>, path: &Path) -> Result<()> {
    let bytes = to_bytes(tape, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a container, converting every tensor to `T`.
pub fn from_bytes<T: Real>(bytes: &[u8], path: &Path) -> Result<(GradientTape<T>, Manifest)> {
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing NTC1 magic"));
    }
    let mlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let mend = 12usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("manifest length exceeds file"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[12..mend]).map_err(|e| bad(&format!("manifest: {e}")))?;
    let blob = &bytes[mend..];
    let mut tape = GradientTape::new();
    for e in &manifest.tensors {
        let dt = DType::from_code(e.dtype).ok_or_else(|| bad(&format!("{}: unknown dtype code {}", e.name, e.dtype)))?;
        if e.rank != e.extents.len() {
            return Err(bad(&format!("{}: rank {} but {} extents", e.name, e.rank, e.extents.len())));
        }
        let n: usize = e.extents.iter().product();
        let start = e.offset as usize;
        let end = start + n * dt.size_of();
        let raw = blob.get(start..end).ok_or_else(|| bad(&format!("{}: data out of range", e.name)))?;
        let data: Vec<T> = match dt {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        let t = Tensor::new(e.extents.clone(), data).map_err(|err| bad(&format!("{}: {err}", e.name)))?;
        t.ensure_finite(&e.name)?;
        tape.register(e.name.clone(), t);
    }
    Ok((tape, manifest))
}

pub fn load<T: Real>(path: &Path) -> Result<(GradientTape<T>, Manifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GradientTape<f32> {
        let mut t = GradientTape::new();
        t.register("a.w", Tensor::from_rows(&[vec![1.0, -2.5], vec![3.25, 0.0]]).unwrap());
        t.register("a.b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        t
    }

    #[test]
    fn layout_and_round_trip() {
        let t = sample();
        let bytes = to_bytes(&t, Some(serde_json::json!({"preset": "toy"}))).unwrap();
        assert_eq!(&bytes[..4], b"NTC1");
        let mlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let m: Manifest = serde_json::from_slice(&bytes[12..12 + mlen]).unwrap();
        assert_eq!(m.tensors[1].offset, 16);
        assert_eq!(m.tensors[0].dtype, 0);
        assert_eq!(bytes.len(), 12 + mlen + 7 * 4);
        assert_eq!(&bytes[12 + mlen..12 + mlen + 4], &1.0f32.to_le_bytes());

        let (back, meta) = from_bytes::<f32>(&bytes, Path::new("x")).unwrap();
        assert_eq!(meta.meta.unwrap()["preset"], "toy");
        for (n, v) in t.params() {
            assert_eq!(back.get(n).unwrap(), v);
        }
        let wide: GradientTape<f64> = from_bytes(&bytes, Path::new("x")).unwrap().0;
        assert_eq!(wide.get("a.b").unwrap().data()[0], 0.1f32 as f64);
    }

    #[test]
    fn f64_payload() {
        let t: GradientTape<f64> = sample().cast();
        let bytes = to_bytes(&t, None).unwrap();
        let (back, _) = from_bytes::<f64>(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.get("a.w").unwrap(), t.get("a.w").unwrap());
    }

    #[test]
    fn corrupt_files() {
        let p = Path::new("w.ntc");
        assert!(matches!(from_bytes::<f32>(b"NOPE00000000", p), Err(Error::Format { .. })));
        let mut bytes = to_bytes(&sample(), None).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(from_bytes::<f32>(&bytes, p), Err(Error::Format { .. })));
        let mut bytes = to_bytes(&sample(), None).unwrap();
        bytes[4] = 0xff;
        assert!(from_bytes::<f32>(&bytes, p).is_err());
    }

    #[test]
    fn file_io() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ntc");
        save(&sample(), None, &p).unwrap();
        let (t, _) = load::<f32>(&p).unwrap();
        assert_eq!(t.len(), 2);
        assert!(matches!(load::<f32>(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
