//! Model persistence: single self-describing binary file, little-endian,
//! magic "RAXM", 16-bit version, kind byte {0=forest, 1=boosted,
//! 2=linear}, schema hash, flat node tables, CRC-32 trailer.
//!
//! The boosted model's training-loss trace is a fit-time diagnostic and is
//! not persisted.

use super::{BoostedModel, ForestModel, LinearModel, Model};
use super::tree::{Tree, TreeNode};
use crate::schema::N_CLASSES;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MODEL_MAGIC: &[u8; 4] = b"RAXM";
pub const MODEL_VERSION: u16 = 1;

const KIND_FOREST: u8 = 0;
const KIND_BOOSTED: u8 = 1;
const KIND_LINEAR: u8 = 2;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt model file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

fn encode_tree(buf: &mut Vec<u8>, tree: &Tree, n_values: usize) {
    buf.extend_from_slice(&(tree.nodes.len() as u32).to_le_bytes());
    for node in &tree.nodes {
        buf.extend_from_slice(&node.feature_index.to_le_bytes());
        buf.extend_from_slice(&node.threshold.to_le_bytes());
        buf.extend_from_slice(&node.left.to_le_bytes());
        buf.extend_from_slice(&node.right.to_le_bytes());
        buf.extend_from_slice(&node.cover.to_le_bytes());
        for k in 0..n_values {
            let v = node.values.get(k).copied().unwrap_or(0.0);
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    match model {
        Model::Forest(m) => {
            buf.push(KIND_FOREST);
            buf.extend_from_slice(&m.schema_hash.to_le_bytes());
            buf.extend_from_slice(&(m.n_features as u32).to_le_bytes());
            for w in &m.class_weights {
                buf.extend_from_slice(&w.to_le_bytes());
            }
            buf.extend_from_slice(&(m.trees.len() as u32).to_le_bytes());
            for tree in &m.trees {
                encode_tree(&mut buf, tree, N_CLASSES);
            }
        }
        Model::Boosted(m) => {
            buf.push(KIND_BOOSTED);
            buf.extend_from_slice(&m.schema_hash.to_le_bytes());
            buf.extend_from_slice(&(m.n_features as u32).to_le_bytes());
            buf.extend_from_slice(&m.learning_rate.to_le_bytes());
            buf.extend_from_slice(&m.lambda.to_le_bytes());
            for b in &m.base_score {
                buf.extend_from_slice(&b.to_le_bytes());
            }
            buf.extend_from_slice(&(m.rounds.len() as u32).to_le_bytes());
            for round in &m.rounds {
                for tree in round {
                    encode_tree(&mut buf, tree, 1);
                }
            }
        }
        Model::Linear(m) => {
            buf.push(KIND_LINEAR);
            buf.extend_from_slice(&m.schema_hash.to_le_bytes());
            buf.extend_from_slice(&(m.n_features as u32).to_le_bytes());
            buf.push(m.converged as u8);
            buf.extend_from_slice(&m.grad_norm.to_le_bytes());
            buf.extend_from_slice(&m.l2.to_le_bytes());
            for b in &m.bias {
                buf.extend_from_slice(&b.to_le_bytes());
            }
            for w in &m.weights {
                buf.extend_from_slice(&w.to_le_bytes());
            }
            for v in &m.means {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in &m.scales {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&buf);
    buf.extend_from_slice(&hasher.finalize().to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelIoError::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ModelIoError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ModelIoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32, ModelIoError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ModelIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ModelIoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn corrupt(&self, reason: impl Into<String>) -> ModelIoError {
        ModelIoError::Corrupt {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

fn decode_tree(r: &mut Reader, n_values: usize) -> Result<Tree, ModelIoError> {
    let n_nodes = r.u32()? as usize;
    if n_nodes == 0 {
        return Err(r.corrupt("tree with zero nodes"));
    }
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let feature_index = r.i32()?;
        let threshold = r.f64()?;
        let left = r.u32()?;
        let right = r.u32()?;
        let cover = r.f64()?;
        let mut values = Vec::with_capacity(n_values);
        for _ in 0..n_values {
            values.push(r.f64()?);
        }
        if feature_index >= 0 {
            values.clear(); // internal nodes carry no leaf values
            if left as usize >= n_nodes || right as usize >= n_nodes {
                return Err(r.corrupt("child index out of range"));
            }
        }
        nodes.push(TreeNode { feature_index, threshold, left, right, cover, values });
    }
    Ok(Tree { nodes })
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<Model, ModelIoError> {
    let corrupt = |reason: &str| ModelIoError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < MODEL_MAGIC.len() + 2 + 1 + 8 + 4 {
        return Err(corrupt("file too short"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(trailer.try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    if hasher.finalize() != stored_crc {
        return Err(corrupt("CRC mismatch"));
    }

    let mut r = Reader { bytes: body, pos: 0, path };
    if r.take(4)? != MODEL_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    let schema_hash = r.u64()?;
    let model = match kind {
        KIND_FOREST => {
            let n_features = r.u32()? as usize;
            let mut class_weights = [0.0; N_CLASSES];
            for w in &mut class_weights {
                *w = r.f64()?;
            }
            let n_trees = r.u32()? as usize;
            let mut trees = Vec::with_capacity(n_trees);
            for _ in 0..n_trees {
                trees.push(decode_tree(&mut r, N_CLASSES)?);
            }
            Model::Forest(ForestModel { trees, class_weights, n_features, schema_hash })
        }
        KIND_BOOSTED => {
            let n_features = r.u32()? as usize;
            let learning_rate = r.f64()?;
            let lambda = r.f64()?;
            let mut base_score = [0.0; N_CLASSES];
            for b in &mut base_score {
                *b = r.f64()?;
            }
            let n_rounds = r.u32()? as usize;
            let mut rounds = Vec::with_capacity(n_rounds);
            for _ in 0..n_rounds {
                let a = decode_tree(&mut r, 1)?;
                let b = decode_tree(&mut r, 1)?;
                let c = decode_tree(&mut r, 1)?;
                rounds.push([a, b, c]);
            }
            Model::Boosted(BoostedModel {
                rounds,
                learning_rate,
                base_score,
                lambda,
                n_features,
                schema_hash,
                train_loss: Vec::new(),
            })
        }
        KIND_LINEAR => {
            let n_features = r.u32()? as usize;
            let converged = r.u8()? != 0;
            let grad_norm = r.f64()?;
            let l2 = r.f64()?;
            let mut bias = [0.0; N_CLASSES];
            for b in &mut bias {
                *b = r.f64()?;
            }
            let mut weights = vec![0.0; N_CLASSES * n_features];
            for w in &mut weights {
                *w = r.f64()?;
            }
            let mut means = vec![0.0; n_features];
            for v in &mut means {
                *v = r.f64()?;
            }
            let mut scales = vec![0.0; n_features];
            for v in &mut scales {
                *v = r.f64()?;
            }
            Model::Linear(LinearModel {
                weights,
                bias,
                means,
                scales,
                l2,
                n_features,
                schema_hash,
                converged,
                grad_norm,
            })
        }
        other => return Err(corrupt(&format!("unknown model kind {other}"))),
    };
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after model body"));
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &Model) -> Result<(), ModelIoError> {
    let bytes = encode_model(model);
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    let io_err = |source: std::io::Error| ModelIoError::Io { path: path.to_path_buf(), source };
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model, ModelIoError> {
    let bytes = fs::read(path).map_err(|source| ModelIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&bytes, path)
}
