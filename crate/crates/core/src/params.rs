//! JSON envelope for dense parameter blocks.
//!
//! ```text
//! {"format":"cistree-params","version":1,"kind":"flat","config_hash":"…",
//!  "blocks":{"users":{"rows":943,"cols":25,"data":"<base64>"}, …}}
//! ```
//!
//! Each block's `data` is base64 over `rows * cols` little-endian doubles in
//! row-major order. Blocks are keyed in sorted order so equal contents give
//! equal bytes.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::{Error, Result};

const FORMAT_TAG: &str = "cistree-params";

pub(crate) fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub(crate) fn decode_f64s(text: &str) -> Option<Vec<f64>> {
    let bytes = STANDARD.decode(text).ok()?;
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Block {
    rows: usize,
    cols: usize,
    data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    format: String,
    version: u32,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    blocks: BTreeMap<String, Block>,
}

impl ParamFile {
    pub fn new(kind: &str) -> Self {
        ParamFile {
            format: FORMAT_TAG.into(),
            version: 1,
            kind: kind.into(),
            config_hash: None,
            blocks: BTreeMap::new(),
        }
    }

    pub fn set_matrix(&mut self, name: &str, m: &Matrix) {
        self.blocks.insert(
            name.into(),
            Block { rows: m.rows(), cols: m.cols(), data: encode_f64s(m.as_slice()) },
        );
    }

    pub fn set_vector(&mut self, name: &str, v: &[f64]) {
        self.blocks
            .insert(name.into(), Block { rows: 1, cols: v.len(), data: encode_f64s(v) });
    }

    pub fn set_scalar(&mut self, name: &str, v: f64) {
        self.set_vector(name, &[v]);
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let block = self
            .blocks
            .get(name)
            .ok_or_else(|| Error::data(format!("parameter block `{name}` missing")))?;
        let data = decode_f64s(&block.data)
            .filter(|d| d.len() == block.rows * block.cols)
            .ok_or_else(|| Error::data(format!("parameter block `{name}` is malformed")))?;
        Ok(Matrix::from_vec(block.rows, block.cols, data))
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.matrix(name)?.as_slice().to_vec())
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        match self.vector(name)?.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::data(format!("parameter block `{name}` is not a scalar"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("param file serializes");
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file: ParamFile = serde_json::from_slice(bytes).map_err(|e| Error::Format {
            offset: 0,
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        })?;
        if file.format != FORMAT_TAG {
            return Err(Error::Format { offset: 0, message: format!("unexpected format `{}`", file.format) });
        }
        Ok(file)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::config(format!("expected a `{kind}` parameter file, found `{}`", self.kind)));
        }
        Ok(())
    }
}
