//! On-disk formats shared across stages: binary feature files, plain-text
//! manifests and label files.
//!
//! Feature file (little-endian): `"MULF"`, version `u32 = 1`, `T u64`,
//! `D u32`, `frame_rate_hz u32`, `feature_kind u8`, then `T×D` `f32`
//! row-major.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence};

pub const FEATURE_MAGIC: &[u8; 4] = b"MULF";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_EXT: &str = "mulf";

pub(crate) struct Reader<R> {
    inner: R,
    path: PathBuf,
}

impl<R: Read> Reader<R> {
    pub(crate) fn new(inner: R, path: &Path) -> Self {
        Self {
            inner,
            path: path.to_path_buf(),
        }
    }

    pub(crate) fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::format(&self.path, format!("truncated: {e}")))?;
        Ok(b)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut raw = vec![0u8; n * 4];
        self.inner
            .read_exact(&mut raw)
            .map_err(|e| Error::format(&self.path, format!("truncated payload: {e}")))?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn byte_vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut raw = vec![0u8; n];
        self.inner
            .read_exact(&mut raw)
            .map_err(|e| Error::format(&self.path, format!("truncated: {e}")))?;
        Ok(raw)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.bytes::<4>()?;
        if &got != magic {
            return Err(Error::format(
                &self.path,
                format!("bad magic {:?}, expected {:?}", got, magic),
            ));
        }
        Ok(())
    }

    pub(crate) fn fail(&self, reason: impl Into<String>) -> Error {
        Error::format(&self.path, reason)
    }
}

pub(crate) fn put_f32s(buf: &mut Vec<u8>, xs: impl IntoIterator<Item = f32>) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

pub fn encode_features(f: &FeatureSequence) -> Vec<u8> {
    let (t, d) = f.data.dim();
    let mut buf = Vec::with_capacity(25 + t * d * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&f.frame_rate_hz.to_le_bytes());
    buf.push(f.kind.to_byte());
    put_f32s(&mut buf, f.data.iter().copied());
    buf
}

pub fn write_features(path: impl AsRef<Path>, f: &FeatureSequence) -> Result<()> {
    write_bytes(path.as_ref(), &encode_features(f))
}

/// Reads a feature file; the utterance id is the file stem.
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let mut r = Reader::new(open(path)?, path);
    r.expect_magic(FEATURE_MAGIC)?;
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let t = r.u64()? as usize;
    let d = r.u32()? as usize;
    let rate = r.u32()?;
    let kind = FeatureKind::from_byte(r.u8()?);
    let data = r.f32_vec(t * d)?;
    let data = Array2::from_shape_vec((t, d), data).map_err(|e| r.fail(e.to_string()))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSequence::new(data, rate, kind, id).map_err(|e| r.fail(e.to_string()))
}

/// Sorted list of feature files in a directory.
pub fn list_feature_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == FEATURE_EXT) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub relative_path: PathBuf,
    /// Samples for audio entries, frames for feature entries.
    pub num_samples: u64,
}

/// First line is the root directory, then `relative_path<TAB>num_samples`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn path_of(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].relative_path)
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        (0..self.entries.len()).map(|i| self.path_of(i)).collect()
    }

    pub fn utterance_id(&self, i: usize) -> String {
        self.entries[i]
            .relative_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut lines = open(path)?.lines();
        let root = match lines.next() {
            Some(l) => PathBuf::from(l.map_err(|e| Error::io(path, e))?.trim_end()),
            None => return Err(Error::format(path, "empty manifest")),
        };
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let (rel, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, format!("line {}: missing tab", n + 2)))?;
            let num_samples = count
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad count {count:?}", n + 2)))?;
            entries.push(ManifestEntry {
                relative_path: PathBuf::from(rel),
                num_samples,
            });
        }
        Ok(Self { root, entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.root.display());
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\n", e.relative_path.display(), e.num_samples));
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), self.to_text().as_bytes())
    }
}

/// One utterance of integer labels, as stored in label files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelLine {
    pub utterance_id: String,
    pub labels: Vec<u32>,
}

/// Label file: one `utterance_id z_1 z_2 ... z_T` line per utterance.
pub fn write_label_file<'a>(
    path: impl AsRef<Path>,
    lines: impl IntoIterator<Item = (&'a str, &'a [u32])>,
) -> Result<()> {
    let mut s = String::new();
    for (id, labels) in lines {
        s.push_str(id);
        for l in labels {
            s.push(' ');
            s.push_str(&l.to_string());
        }
        s.push('\n');
    }
    write_bytes(path.as_ref(), s.as_bytes())
}

pub fn read_label_file(path: impl AsRef<Path>) -> Result<Vec<LabelLine>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_ascii_whitespace();
        let Some(id) = parts.next() else { continue };
        let labels = parts
            .map(|p| p.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(LabelLine {
            utterance_id: id.to_string(),
            labels,
        });
    }
    Ok(out)
}

/// Reads a label file, or every `*.txt` label file of a directory in name order.
pub fn read_labels_path(path: impl AsRef<Path>) -> Result<Vec<LabelLine>> {
    let path = path.as_ref();
    if !path.is_dir() {
        return read_label_file(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_label_file(&f)?);
    }
    Ok(out)
}
