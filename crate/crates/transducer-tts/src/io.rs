//! Binary file formats (`TTSC` codes, `TTSF` features) and the JSONL
//! manifest. All integers and floats are little-endian; features are stored
//! as f32 and widen exactly back to the f64 values kept in memory, which
//! stay on the f32 grid by construction.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{CodeGrid, FeatureSeq};
use crate::{Error, Result};

const CODES_MAGIC: &[u8; 4] = b"TTSC";
const FEATURES_MAGIC: &[u8; 4] = b"TTSF";
const CODES_VERSION: u32 = 1;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), detail: detail.into() }
}

/// Code file: magic `TTSC`, u32 version, u32 T, u32 K, then T·K u16 codes
/// frame-major.
pub fn write_codes(path: &Path, grid: &CodeGrid) -> Result<()> {
    let file = std::fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::Io { path: path.to_path_buf(), source: e };
    w.write_all(CODES_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(CODES_VERSION).map_err(io_err)?;
    w.write_u32::<LittleEndian>(grid.t() as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(grid.k() as u32).map_err(io_err)?;
    for frame in grid.codes.rows() {
        for &code in frame {
            w.write_u16::<LittleEndian>(code).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_codes(path: &Path) -> Result<CodeGrid> {
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::Io { path: path.to_path_buf(), source: e };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CODES_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}, expected TTSC")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != CODES_VERSION {
        return Err(format_err(path, format!("unsupported TTSC version {version}")));
    }
    let t = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let k = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    if t == 0 || k == 0 {
        return Err(format_err(path, format!("degenerate dimensions T={t}, K={k}")));
    }
    let mut codes = Array2::zeros((t, k));
    for j in 0..t {
        for col in 0..k {
            codes[[j, col]] = r.read_u16::<LittleEndian>().map_err(io_err)?;
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(format_err(path, "trailing bytes after code payload"));
    }
    CodeGrid::new(codes)
}

/// Feature file: magic `TTSF`, u32 T, u32 d_f, then T·d_f f32 row-major.
pub fn write_features(path: &Path, feats: &FeatureSeq) -> Result<()> {
    let file = std::fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::Io { path: path.to_path_buf(), source: e };
    w.write_all(FEATURES_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(feats.t() as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(feats.dim() as u32).map_err(io_err)?;
    for row in feats.data.rows() {
        for &v in row {
            w.write_f32::<LittleEndian>(v as f32).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_features(path: &Path) -> Result<FeatureSeq> {
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::Io { path: path.to_path_buf(), source: e };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != FEATURES_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}, expected TTSF")));
    }
    let t = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    if t == 0 || d == 0 {
        return Err(format_err(path, format!("degenerate dimensions T={t}, d_f={d}")));
    }
    let mut data = Array2::zeros((t, d));
    for j in 0..t {
        for c in 0..d {
            let v = r.read_f32::<LittleEndian>().map_err(io_err)?;
            if !v.is_finite() {
                return Err(format_err(path, format!("non-finite feature at ({j}, {c})")));
            }
            data[[j, c]] = f64::from(v);
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(format_err(path, "trailing bytes after feature payload"));
    }
    Ok(FeatureSeq { data })
}

/// One corpus utterance; `codes`/`ref` are paths relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub text: String,
    pub speaker: String,
    pub codes: String,
    #[serde(rename = "ref")]
    pub reference: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for entry in entries {
        let line = serde_json::to_string(entry)?;
        writeln!(w, "{line}").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            format_err(path, format!("manifest line {}: {e}", lineno + 1))
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn codes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ttsc");
        let grid = CodeGrid::new(arr2(&[[0u16, 5], [63, 1], [7, 7]])).unwrap();
        write_codes(&path, &grid).unwrap();
        let read = read_codes(&path).unwrap();
        assert_eq!(read, grid);
        // header layout: magic + 3 u32 + payload
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"TTSC");
        assert_eq!(bytes.len(), 4 + 12 + 3 * 2 * 2);
    }

    #[test]
    fn features_round_trip_exact_on_f32_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ttsf");
        let data = arr2(&[[0.25, -1.5], [quantize_f32(0.1), 3.0]]);
        let feats = FeatureSeq { data };
        write_features(&path, &feats).unwrap();
        let read = read_features(&path).unwrap();
        assert_eq!(read.data, feats.data);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"TTSF");
        assert_eq!(bytes.len(), 4 + 8 + 4 * 4);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ttsc");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_codes(&path), Err(Error::Format { .. })));
        assert!(matches!(read_features(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ttsc");
        std::fs::write(&path, b"TTSC\x01\x00\x00\x00\x02\x00\x00\x00").unwrap();
        assert!(read_codes(&path).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ttsc");
        let grid = CodeGrid::new(arr2(&[[1u16, 2]])).unwrap();
        write_codes(&path, &grid).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_codes(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_round_trip_and_ref_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let entries = vec![ManifestEntry {
            id: "utt0000".into(),
            text: "ab cd".into(),
            speaker: "spk0".into(),
            codes: "utt0000.ttsc".into(),
            reference: "ref_spk0.ttsf".into(),
        }];
        write_manifest(&path, &entries).unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(raw.contains("\"ref\":"), "serialized key must be \"ref\": {raw}");
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }

    #[test]
    fn missing_file_is_io_error_with_path() {
        let err = read_manifest(Path::new("/nonexistent/manifest.jsonl")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/manifest.jsonl"));
        assert_eq!(err.exit_code(), 3);
    }

    use crate::util::quantize_f32;
}
