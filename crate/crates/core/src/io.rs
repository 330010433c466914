//! Run-directory persistence: little-endian float64 arrays, density blocks
//! and a digest manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rotor::RotationalDensityMatrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn f64_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Validation {
            path: "array".into(),
            message: format!("{} bytes is not a whole number of float64 values", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One stored matrix inside a block file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockIndex {
    pub label: String,
    /// Offset in float64 values from the start of the file.
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Interleaved real/imag float64, row-major, one entry per matrix.
pub fn encode_blocks(blocks: &[(String, &DMatrix<Complex64>)]) -> (Vec<f64>, Vec<BlockIndex>) {
    let mut data = Vec::new();
    let mut index = Vec::new();
    for (label, m) in blocks {
        index.push(BlockIndex {
            label: label.clone(),
            offset: data.len(),
            rows: m.nrows(),
            cols: m.ncols(),
        });
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)].re);
                data.push(m[(r, c)].im);
            }
        }
    }
    (data, index)
}

pub fn decode_blocks(data: &[f64], index: &[BlockIndex]) -> Result<Vec<(String, DMatrix<Complex64>)>> {
    index
        .iter()
        .map(|b| {
            let end = b.offset + 2 * b.rows * b.cols;
            if end > data.len() {
                return Err(Error::Validation {
                    path: format!("blocks.{}", b.label),
                    message: format!("block ends at {end} past {} values", data.len()),
                });
            }
            let s = &data[b.offset..end];
            let m = DMatrix::from_fn(b.rows, b.cols, |r, c| {
                let i = 2 * (r * b.cols + c);
                Complex64::new(s[i], s[i + 1])
            });
            Ok((b.label.clone(), m))
        })
        .collect()
}

pub fn encode_rotational(rho: &RotationalDensityMatrix) -> (Vec<f64>, Vec<BlockIndex>) {
    let labelled: Vec<(String, &DMatrix<Complex64>)> =
        rho.m_values().map(|m| (format!("m={m}"), rho.block(m))).collect();
    encode_blocks(&labelled)
}

pub fn decode_rotational(data: &[f64], index: &[BlockIndex], reference_time: f64) -> Result<RotationalDensityMatrix> {
    let blocks = decode_blocks(data, index)?;
    let j_max = blocks.len().saturating_sub(1) / 2;
    let mut rho = RotationalDensityMatrix::zeros(j_max);
    rho.reference_time = reference_time;
    if blocks.len() != 2 * j_max + 1 {
        return Err(Error::Validation {
            path: "blocks".into(),
            message: format!("{} blocks do not form a rotational basis", blocks.len()),
        });
    }
    for (m, (label, b)) in rho.m_values().collect::<Vec<_>>().into_iter().zip(blocks) {
        if label != format!("m={m}") || b.shape() != rho.block(m).shape() {
            return Err(Error::Validation {
                path: format!("blocks.{label}"),
                message: format!("expected block m={m} of shape {:?}", rho.block(m).shape()),
            });
        }
        *rho.block_mut(m) = b;
    }
    Ok(rho)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub sha256: String,
    pub bytes: usize,
    /// Array shape for float64 files, empty for text.
    #[serde(default)]
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    /// Subcommand that produced the directory.
    pub command: String,
    pub config_sha256: String,
    pub created_unix_s: u64,
    pub files: BTreeMap<String, FileRecord>,
    /// Index tables of block files, keyed by file name.
    #[serde(default)]
    pub blocks: BTreeMap<String, Vec<BlockIndex>>,
    /// Free-form scalar metadata (grids, mode parameters, selected λ).
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Accumulates files written into a run directory.
pub struct RunWriter {
    pub dir: PathBuf,
    manifest: RunManifest,
}

impl RunWriter {
    pub fn new(dir: &Path, command: &str, config_text: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                format_version: FORMAT_VERSION,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                config_sha256: sha256_hex(config_text.as_bytes()),
                created_unix_s: created,
                files: BTreeMap::new(),
                blocks: BTreeMap::new(),
                metadata: BTreeMap::new(),
            },
        })
    }

    fn record(&mut self, name: &str, bytes: &[u8], shape: Vec<usize>) -> Result<()> {
        write_bytes(&self.dir.join(name), bytes)?;
        self.manifest.files.insert(
            name.to_string(),
            FileRecord {
                sha256: sha256_hex(bytes),
                bytes: bytes.len(),
                shape,
            },
        );
        Ok(())
    }

    pub fn array(&mut self, name: &str, values: &[f64], shape: Vec<usize>) -> Result<()> {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.record(name, &f64_to_bytes(values), shape)
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<()> {
        self.record(name, text.as_bytes(), Vec::new())
    }

    pub fn blocks(&mut self, name: &str, data: &[f64], index: Vec<BlockIndex>) -> Result<()> {
        self.record(name, &f64_to_bytes(data), vec![data.len()])?;
        self.manifest.blocks.insert(name.to_string(), index);
        Ok(())
    }

    pub fn meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.manifest
            .metadata
            .insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn finish(self) -> Result<RunManifest> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_bytes(&self.dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(self.manifest)
    }
}

/// A loaded run directory whose digests have been verified.
#[derive(Debug, Clone)]
pub struct RunDirectory {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl RunDirectory {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = read_bytes(&path)?;
        let manifest: RunManifest = serde_json::from_slice(&text).map_err(|e| Error::Validation {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Validation {
                path: "format_version".into(),
                message: format!("unsupported version {}", manifest.format_version),
            });
        }
        for (name, rec) in &manifest.files {
            let bytes = read_bytes(&dir.join(name))?;
            let found = sha256_hex(&bytes);
            if found != rec.sha256 {
                return Err(Error::DigestMismatch {
                    file: name.clone(),
                    expected: rec.sha256.clone(),
                    found,
                });
            }
        }
        Ok(RunDirectory {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.files.contains_key(name)
    }

    pub fn array(&self, name: &str) -> Result<(Vec<f64>, Vec<usize>)> {
        let rec = self.manifest.files.get(name).ok_or_else(|| Error::Validation {
            path: format!("files.{name}"),
            message: "missing from manifest".into(),
        })?;
        let values = bytes_to_f64(&read_bytes(&self.dir.join(name))?)?;
        if rec.shape.iter().product::<usize>() != values.len() {
            return Err(Error::Validation {
                path: format!("files.{name}.shape"),
                message: format!("shape {:?} does not hold {} values", rec.shape, values.len()),
            });
        }
        Ok((values, rec.shape.clone()))
    }

    pub fn blocks(&self, name: &str) -> Result<(Vec<f64>, Vec<BlockIndex>)> {
        let (data, _) = self.array(name)?;
        let index = self
            .manifest
            .blocks
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Validation {
                path: format!("blocks.{name}"),
                message: "missing index table".into(),
            })?;
        Ok((data, index))
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.manifest.metadata.get(key).ok_or_else(|| Error::Validation {
            path: format!("metadata.{key}"),
            message: "missing".into(),
        })?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Validation {
            path: format!("metadata.{key}"),
            message: e.to_string(),
        })
    }
}

/// CSV text from a header with units and numeric rows.
pub fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
