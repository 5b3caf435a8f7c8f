//! Dense vector tables keyed by string ids, with the binary and TSV file
//! formats shared by LLM embeddings, graph node embeddings, fused news
//! vectors, and model checkpoints.
//!
//! Binary layout: magic `LEC1`, u32 LE dimension, u32 LE record count, then
//! per record a u16 LE id length, the UTF-8 id bytes, and `dim` f32 LE values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LEC1";

/// Uniform-dimension map from ids to `f32` vectors.
///
/// Keys are kept in a `BTreeMap` so iteration and serialization order are
/// deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f32>>,
}

impl VectorTable {
    pub fn new(dim: usize) -> Self {
        VectorTable {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    /// Insert a vector, enforcing uniform dimension, finite components, and
    /// id uniqueness.
    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                id,
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { id });
        }
        if self.vectors.contains_key(&id) {
            return Err(Error::DuplicateId { id });
        }
        self.vectors.insert(id, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.vectors.get(id).map(|v| v.as_slice())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(|k| k.as_str())
    }

    /// Write in the binary layout. Records are emitted in key order, so the
    /// bytes are a pure function of the table contents.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_binary_to(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn write_binary_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.vectors.len() as u32).to_le_bytes())?;
        for (id, vec) in &self.vectors {
            let id_bytes = id.as_bytes();
            if id_bytes.len() > u16::MAX as usize {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidInput,
                    format!("id too long for binary layout: {} bytes", id_bytes.len()),
                ));
            }
            w.write_all(&(id_bytes.len() as u16).to_le_bytes())?;
            w.write_all(id_bytes)?;
            for v in vec {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        Self::read_binary_from(&mut r, path)
    }

    pub fn read_binary_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let bad = |message: String| Error::BadFormat {
            path: path.to_path_buf(),
            message,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        let count = u32::from_le_bytes(u32buf) as usize;

        let mut table = VectorTable::new(dim);
        let mut float_buf = vec![0u8; dim * 4];
        for _ in 0..count {
            let mut len_buf = [0u8; 2];
            r.read_exact(&mut len_buf).map_err(|e| Error::io(path, e))?;
            let id_len = u16::from_le_bytes(len_buf) as usize;
            let mut id_buf = vec![0u8; id_len];
            r.read_exact(&mut id_buf).map_err(|e| Error::io(path, e))?;
            let id = String::from_utf8(id_buf)
                .map_err(|_| bad("record id is not valid UTF-8".to_string()))?;
            r.read_exact(&mut float_buf).map_err(|e| Error::io(path, e))?;
            let vector: Vec<f32> = float_buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            table.insert(id, vector)?;
        }
        Ok(table)
    }

    /// Write as TSV: id, then `dim` float fields.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (id, vec) in &self.vectors {
            write!(w, "{id}").map_err(|e| Error::io(path, e))?;
            for v in vec {
                write!(w, "\t{v}").map_err(|e| Error::io(path, e))?;
            }
            writeln!(w).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut table: Option<VectorTable> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let id = fields
                .next()
                .ok_or_else(|| Error::malformed(path, idx + 1, "empty row"))?;
            let values: Vec<f32> = fields
                .map(|f| {
                    f.parse::<f32>()
                        .map_err(|_| Error::malformed(path, idx + 1, format!("bad float {f:?}")))
                })
                .collect::<Result<_>>()?;
            let table = table.get_or_insert_with(|| VectorTable::new(values.len()));
            table.insert(id, values)?;
        }
        Ok(table.unwrap_or_else(|| VectorTable::new(0)))
    }

    /// Load either format; the binary layout is recognized by its magic bytes.
    pub fn read_auto(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 4];
        let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
        drop(file);
        if n == 4 && &magic == MAGIC {
            Self::read_binary(path)
        } else {
            Self::read_tsv(path)
        }
    }
}
