//! Phrase → unit vector table, loaded from a binary `CAPV` file or a
//! tab-separated text file.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "CAPV" | u32 version = 1 | u32 dim | u64 count
//! count × ( u32 byte_len | phrase bytes (UTF-8) | dim × f32 )
//! ```
//!
//! Text layout: one `phrase<TAB>f f f ...` entry per line.
//!
//! Phrases are normalized and vectors rescaled to unit norm on load.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scene_graph::normalize_phrase;

const MAGIC: &[u8; 4] = b"CAPV";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct VectorTable {
    dim: usize,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl VectorTable {
    /// Builds a table from raw entries; phrases are normalized and vectors
    /// rescaled to unit length.
    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: AsRef<str>,
    {
        Self::build(entries, Path::new("<memory>"))
    }

    fn build<I, S>(entries: I, path: &Path) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: AsRef<str>,
    {
        let fail = |reason: String| Error::VectorTable {
            path: path.to_path_buf(),
            reason,
        };
        let mut dim = None;
        let mut index = HashMap::new();
        let mut data = Vec::new();
        for (phrase, vector) in entries {
            let raw = phrase.as_ref();
            let key = normalize_phrase(raw);
            if key.is_empty() {
                return Err(fail(format!("phrase `{raw}` normalizes to empty")));
            }
            let d = *dim.get_or_insert(vector.len());
            if d == 0 {
                return Err(fail("dimension must be at least 1".into()));
            }
            if vector.len() != d {
                return Err(fail(format!("`{raw}` has dimension {}, expected {d}", vector.len())));
            }
            if vector.iter().any(|x| !x.is_finite()) {
                return Err(fail(format!("`{raw}` has a non-finite component")));
            }
            let norm = vector.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(fail(format!("`{raw}` is the zero vector")));
            }
            if index.insert(key.clone(), index.len()).is_some() {
                return Err(fail(format!("duplicate phrase `{key}`")));
            }
            data.extend(vector.iter().map(|x| (f64::from(*x) / norm) as f32));
        }
        Ok(VectorTable {
            dim: dim.unwrap_or(1),
            index,
            data,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        if bytes.starts_with(MAGIC) {
            Self::parse_binary(&bytes, path)
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::VectorTable {
                path: path.to_path_buf(),
                reason: "neither a CAPV file nor UTF-8 text".into(),
            })?;
            Self::parse_text(&text, path)
        }
    }

    fn parse_text(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (phrase, values) = line.split_once('\t').ok_or_else(|| Error::VectorTable {
                path: path.to_path_buf(),
                reason: format!("line {}: expected phrase<TAB>values", lineno + 1),
            })?;
            let vector = values
                .split_whitespace()
                .map(str::parse::<f32>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::VectorTable {
                    path: path.to_path_buf(),
                    reason: format!("line {}: {e}", lineno + 1),
                })?;
            entries.push((phrase.to_string(), vector));
        }
        Self::build(entries, path)
    }

    fn parse_binary(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut reader = Reader { bytes, pos: 4, path };
        let version = reader.u32()?;
        if version != VERSION {
            return Err(reader.fail(format!("unsupported version {version}")));
        }
        let dim = reader.u32()? as usize;
        let count = reader.u64()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = reader.u32()? as usize;
            let phrase = match std::str::from_utf8(reader.take(len)?) {
                Ok(p) => p.to_string(),
                Err(_) => return Err(reader.fail("phrase is not UTF-8".into())),
            };
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                vector.push(f32::from_le_bytes(reader.take(4)?.try_into().unwrap()));
            }
            entries.push((phrase, vector));
        }
        if reader.pos != bytes.len() {
            return Err(reader.fail(format!("{} trailing bytes", bytes.len() - reader.pos)));
        }
        let table = Self::build(entries, path)?;
        if count == 0 && dim == 0 {
            return Err(reader.fail("dimension must be at least 1".into()));
        }
        Ok(VectorTable { dim, ..table })
    }

    /// Writes the binary `CAPV` form. Phrases are written in sorted order.
    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.index.len() as u64).to_le_bytes());
        for phrase in self.phrases() {
            out.extend_from_slice(&(phrase.len() as u32).to_le_bytes());
            out.extend_from_slice(phrase.as_bytes());
            for x in self.get(phrase).unwrap() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, phrase: &str) -> Option<&[f32]> {
        self.index
            .get(phrase)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn phrases(&self) -> Vec<&str> {
        let mut keys: Vec<&str> = self.index.keys().map(String::as_str).collect();
        keys.sort_unstable();
        keys
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, reason: String) -> Error {
        Error::VectorTable {
            path: PathBuf::from(self.path),
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
