//! Checkpoint files: a text header followed by little-endian `f32` tensors.
//!
//! ```text
//! #checkpoint v1
//! step=1200
//! dev_loss=2.71828
//! model.embed_dim=64
//! ...
//! tensor=enc0.embed 300x64
//! ...
//! end
//! <raw tensor bytes in header order>
//! ```

use std::path::Path;

use super::graph::Mat;
use super::params::Parameters;
use super::ModelConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "#checkpoint v1";

/// Parameters with the step and dev loss at which they were recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub config: ModelConfig,
    pub step: usize,
    pub dev_loss: f64,
    /// Digest of the subword vocabulary the model was trained with.
    pub vocab_hash: String,
    pub params: Parameters,
}

impl CheckpointFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(CHECKPOINT_FORMAT);
        header.push('\n');
        header.push_str(&format!("step={}\n", self.step));
        header.push_str(&format!("dev_loss={:?}\n", self.dev_loss));
        header.push_str(&format!("vocab={}\n", self.vocab_hash));
        for line in self.config.to_kv().lines() {
            header.push_str("model.");
            header.push_str(line);
            header.push('\n');
        }
        for (name, t) in self.params.iter() {
            header.push_str(&format!("tensor={name} {}x{}\n", t.nrows(), t.ncols()));
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        for (_, t) in self.params.iter() {
            for &x in t.iter() {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut offset = 0;
        let mut lineno = 0;
        let mut next_line = |offset: &mut usize| -> Result<String> {
            lineno += 1;
            let rest = &bytes[*offset..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::parse(origin, lineno, "truncated header"))?;
            *offset += end + 1;
            String::from_utf8(rest[..end].to_vec())
                .map_err(|_| Error::parse(origin, lineno, "header is not UTF-8"))
        };
        if next_line(&mut offset)? != CHECKPOINT_FORMAT {
            return Err(Error::parse(
                origin,
                1,
                format!("expected `{CHECKPOINT_FORMAT}`"),
            ));
        }
        let mut step = None;
        let mut dev_loss = None;
        let mut vocab_hash = String::new();
        let mut model_kv = String::new();
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        loop {
            let line = next_line(&mut offset)?;
            if line == "end" {
                break;
            }
            let bad = |m: &str| Error::parse(origin, 0, format!("{m}: `{line}`"));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key=value"))?;
            match key {
                "step" => step = Some(value.parse().map_err(|_| bad("bad step"))?),
                "dev_loss" => {
                    dev_loss = Some(value.parse::<f64>().map_err(|_| bad("bad dev_loss"))?)
                }
                "vocab" => vocab_hash = value.to_string(),
                "tensor" => {
                    let (name, shape) = value
                        .rsplit_once(' ')
                        .ok_or_else(|| bad("bad tensor line"))?;
                    let (r, c) = shape.split_once('x').ok_or_else(|| bad("bad shape"))?;
                    shapes.push((
                        name.to_string(),
                        r.parse().map_err(|_| bad("bad rows"))?,
                        c.parse().map_err(|_| bad("bad cols"))?,
                    ));
                }
                k if k.starts_with("model.") => {
                    model_kv.push_str(&k["model.".len()..]);
                    model_kv.push('=');
                    model_kv.push_str(value);
                    model_kv.push('\n');
                }
                _ => return Err(bad("unknown header key")),
            }
        }
        let config = ModelConfig::from_kv(&model_kv)?;
        let mut params = Parameters::default();
        for (name, rows, cols) in shapes {
            let n = rows * cols;
            let end = offset + 4 * n;
            if end > bytes.len() {
                return Err(Error::Validation(format!(
                    "{origin}: tensor `{name}` truncated"
                )));
            }
            let data: Vec<f64> = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            offset = end;
            params.insert(
                name,
                Mat::from_shape_vec((rows, cols), data).expect("shape matches data"),
            );
        }
        if offset != bytes.len() {
            return Err(Error::Validation(format!(
                "{origin}: trailing bytes after tensors"
            )));
        }
        let expected: Vec<(String, (usize, usize))> = config.param_shapes();
        let actual: Vec<(String, (usize, usize))> = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.dim()))
            .collect();
        if expected != actual {
            return Err(Error::Validation(format!(
                "{origin}: tensors do not match the recorded model configuration"
            )));
        }
        Ok(CheckpointFile {
            config,
            step: step.ok_or_else(|| Error::parse(origin, 0, "missing step"))?,
            dev_loss: dev_loss.ok_or_else(|| Error::parse(origin, 0, "missing dev_loss"))?,
            vocab_hash,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &CheckpointFile) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    CheckpointFile::from_bytes(&bytes, &path.display().to_string())
}
