//! Encoder-decoder transformer with exact gradients.
//!
//! Supports one or more encoders; with several, decoder cross-attention
//! combines them serially, in parallel, flat (length-concatenated) or
//! hierarchically. Layers use the pre-norm residual arrangement and
//! sinusoidal positions.

mod checkpoint;
mod graph;
mod params;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointFile, CHECKPOINT_FORMAT};
pub use graph::{Graph, Mat, NodeId};
pub use params::Parameters;
pub use transformer::{
    backward, batch_loss, encode_sources, forward, forward_traced, label_smoothed_loss,
    next_token_logprobs, EncoderOutput, ForwardTrace,
};

use crate::error::{Error, Result};

/// How decoder layers combine the outputs of several encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CrossAttentionMode {
    Serial,
    Parallel,
    Flat,
    Hierarchical,
}

impl CrossAttentionMode {
    pub const ALL: [CrossAttentionMode; 4] = [
        CrossAttentionMode::Serial,
        CrossAttentionMode::Parallel,
        CrossAttentionMode::Flat,
        CrossAttentionMode::Hierarchical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CrossAttentionMode::Serial => "serial",
            CrossAttentionMode::Parallel => "parallel",
            CrossAttentionMode::Flat => "flat",
            CrossAttentionMode::Hierarchical => "hierarchical",
        }
    }
}

impl fmt::Display for CrossAttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CrossAttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CrossAttentionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Invalid(format!("unknown cross-attention mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub embed_dim: usize,
    /// Width of encoder layers; the encoder output is projected to
    /// `embed_dim` when the two differ.
    pub encoder_embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder_hidden_dim: usize,
    pub heads: usize,
    pub num_encoders: usize,
    pub cross_attention_mode: CrossAttentionMode,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Share the decoder input embedding with the output projection.
    pub tie_output: bool,
}

impl ModelConfig {
    /// 6+6 layers, 512/2048, 8 heads, 32K vocabulary.
    pub fn transformer_base() -> Self {
        ModelConfig {
            encoder_layers: 6,
            decoder_layers: 6,
            embed_dim: 512,
            encoder_embed_dim: 512,
            hidden_dim: 2048,
            encoder_hidden_dim: 2048,
            heads: 8,
            num_encoders: 1,
            cross_attention_mode: CrossAttentionMode::Parallel,
            dropout: 0.2,
            attention_dropout: 0.2,
            vocab_size: 32_000,
            max_positions: 1024,
            tie_output: false,
        }
    }

    /// A small configuration with matching encoder and decoder widths.
    pub fn tiny(vocab_size: usize, layers: usize, dim: usize, hidden: usize, heads: usize) -> Self {
        ModelConfig {
            encoder_layers: layers,
            decoder_layers: layers,
            embed_dim: dim,
            encoder_embed_dim: dim,
            hidden_dim: hidden,
            encoder_hidden_dim: hidden,
            heads,
            num_encoders: 1,
            cross_attention_mode: CrossAttentionMode::Parallel,
            dropout: 0.0,
            attention_dropout: 0.0,
            vocab_size,
            max_positions: 256,
            tie_output: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 {
            return fail("heads must be positive".into());
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.encoder_embed_dim == 0 || self.encoder_embed_dim % self.heads != 0 {
            return fail(format!(
                "encoder_embed_dim {} not divisible by heads {}",
                self.encoder_embed_dim, self.heads
            ));
        }
        if self.hidden_dim == 0 || self.encoder_hidden_dim == 0 {
            return fail("hidden dimensions must be positive".into());
        }
        if self.num_encoders == 0 {
            return fail("num_encoders must be at least 1".into());
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return fail("vocab_size and max_positions must be positive".into());
        }
        for (name, rate) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return fail(format!("{name} {rate} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// The effective cross-attention arrangement; a single encoder always
    /// uses plain cross-attention.
    pub(crate) fn effective_mode(&self) -> Option<CrossAttentionMode> {
        (self.num_encoders > 1).then_some(self.cross_attention_mode)
    }

    /// Every tensor the configuration declares, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        let de = self.encoder_embed_dim;
        let he = self.encoder_hidden_dim;
        let d = self.embed_dim;
        let v = self.vocab_size;

        fn ln(out: &mut Vec<(String, (usize, usize))>, prefix: &str, dim: usize) {
            out.push((format!("{prefix}.g"), (1, dim)));
            out.push((format!("{prefix}.b"), (1, dim)));
        }
        fn attn(out: &mut Vec<(String, (usize, usize))>, prefix: &str, dim: usize) {
            for w in ["q", "k", "v", "o"] {
                out.push((format!("{prefix}.w{w}"), (dim, dim)));
                out.push((format!("{prefix}.b{w}"), (1, dim)));
            }
        }
        fn ffn(out: &mut Vec<(String, (usize, usize))>, prefix: &str, dim: usize, hidden: usize) {
            out.push((format!("{prefix}.w1"), (dim, hidden)));
            out.push((format!("{prefix}.b1"), (1, hidden)));
            out.push((format!("{prefix}.w2"), (hidden, dim)));
            out.push((format!("{prefix}.b2"), (1, dim)));
        }

        for k in 0..self.num_encoders {
            let e = format!("enc{k}");
            out.push((format!("{e}.embed"), (v, de)));
            for l in 0..self.encoder_layers {
                ln(&mut out, &format!("{e}.l{l}.ln1"), de);
                attn(&mut out, &format!("{e}.l{l}.attn"), de);
                ln(&mut out, &format!("{e}.l{l}.ln2"), de);
                ffn(&mut out, &format!("{e}.l{l}.ffn"), de, he);
            }
            ln(&mut out, &format!("{e}.ln_f"), de);
            if de != d {
                out.push((format!("{e}.proj.w"), (de, d)));
                out.push((format!("{e}.proj.b"), (1, d)));
            }
        }

        out.push(("dec.embed".into(), (v, d)));
        for l in 0..self.decoder_layers {
            let p = format!("dec.l{l}");
            ln(&mut out, &format!("{p}.ln1"), d);
            attn(&mut out, &format!("{p}.self"), d);
            match self.effective_mode() {
                None | Some(CrossAttentionMode::Flat) => {
                    ln(&mut out, &format!("{p}.lnx"), d);
                    attn(&mut out, &format!("{p}.x0"), d);
                }
                Some(CrossAttentionMode::Serial) => {
                    for k in 0..self.num_encoders {
                        ln(&mut out, &format!("{p}.lnx{k}"), d);
                        attn(&mut out, &format!("{p}.x{k}"), d);
                    }
                }
                Some(CrossAttentionMode::Parallel) => {
                    ln(&mut out, &format!("{p}.lnx"), d);
                    for k in 0..self.num_encoders {
                        attn(&mut out, &format!("{p}.x{k}"), d);
                    }
                }
                Some(CrossAttentionMode::Hierarchical) => {
                    ln(&mut out, &format!("{p}.lnx"), d);
                    for k in 0..self.num_encoders {
                        attn(&mut out, &format!("{p}.x{k}"), d);
                    }
                    attn(&mut out, &format!("{p}.hier"), d);
                }
            }
            ln(&mut out, &format!("{p}.ln3"), d);
            ffn(&mut out, &format!("{p}.ffn"), d, self.hidden_dim);
        }
        ln(&mut out, "dec.ln_f", d);
        if !self.tie_output {
            out.push(("out.w".into(), (d, v)));
        }
        out.push(("out.b".into(), (1, v)));
        out
    }

    /// Stable digest of every field, used in manifests and checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_kv().as_bytes());
        hex::encode(&h.finalize()[..8])
    }

    pub fn to_kv(&self) -> String {
        format!(
            "encoder_layers={}\ndecoder_layers={}\nembed_dim={}\nencoder_embed_dim={}\nhidden_dim={}\n\
             encoder_hidden_dim={}\nheads={}\nnum_encoders={}\ncross_attention_mode={}\ndropout={:?}\n\
             attention_dropout={:?}\nvocab_size={}\nmax_positions={}\ntie_output={}\n",
            self.encoder_layers,
            self.decoder_layers,
            self.embed_dim,
            self.encoder_embed_dim,
            self.hidden_dim,
            self.encoder_hidden_dim,
            self.heads,
            self.num_encoders,
            self.cross_attention_mode,
            self.dropout,
            self.attention_dropout,
            self.vocab_size,
            self.max_positions,
            self.tie_output
        )
    }

    /// Applies one `key=value` setting; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "encoder_layers" => self.encoder_layers = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "layers" => {
                self.encoder_layers = num(key, value)?;
                self.decoder_layers = self.encoder_layers;
            }
            "embed_dim" => self.embed_dim = num(key, value)?,
            "encoder_embed_dim" => self.encoder_embed_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "encoder_hidden_dim" => self.encoder_hidden_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "num_encoders" => self.num_encoders = num(key, value)?,
            "cross_attention_mode" => self.cross_attention_mode = value.parse()?,
            "dropout" => self.dropout = num(key, value)?,
            "attention_dropout" => self.attention_dropout = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "max_positions" => self.max_positions = num(key, value)?,
            "tie_output" => self.tie_output = num(key, value)?,
            other => return Err(Error::Config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }

    /// Parses the output of [`ModelConfig::to_kv`].
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::transformer_base();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

/// A configuration with its parameters and the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
    pub vocab_hash: String,
}

impl From<CheckpointFile> for Model {
    fn from(c: CheckpointFile) -> Self {
        Model {
            config: c.config,
            params: c.params,
            vocab_hash: c.vocab_hash,
        }
    }
}

/// Exact parameter count from the declared tensor shapes.
pub fn count_params(config: &ModelConfig) -> usize {
    config.param_shapes().iter().map(|(_, (r, c))| r * c).sum()
}

fn tensor_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Seeded scaled-uniform initialization. Weight matrices draw from
/// `U(-a, a)` with `a = sqrt(3 / fan_in)`, embeddings use the embedding width
/// as fan-in, layer-norm gains start at one and biases at zero. Each tensor
/// has its own stream derived from `(seed, name)`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut params = Parameters::default();
    for (name, (rows, cols)) in config.param_shapes() {
        let tensor = if name.ends_with(".g") {
            Mat::from_elem((rows, cols), 1.0)
        } else if rows == 1 {
            Mat::zeros((rows, cols))
        } else {
            let fan_in = if name.ends_with("embed") { cols } else { rows };
            let a = (3.0 / fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, &name));
            Mat::from_shape_simple_fn((rows, cols), || rng.gen_range(-a..a))
        };
        params.insert(name, tensor);
    }
    Ok(params)
}

/// Widens the encoder so the parameter count lands as close as possible to
/// `n` times the original. Encoder width moves in steps of `heads` and the
/// encoder hidden width keeps its ratio to the encoder width; decoder tensors
/// are untouched.
pub fn scale_encoder_dim(config: &ModelConfig, n: usize) -> ModelConfig {
    if n <= 1 {
        return config.clone();
    }
    let goal = (n * count_params(config)) as f64;
    let widen = |dim: usize| {
        let mut out = config.clone();
        out.encoder_embed_dim = dim;
        out.encoder_hidden_dim = ((dim * config.encoder_hidden_dim) as f64
            / config.encoder_embed_dim as f64)
            .round() as usize;
        out
    };
    let mut dim = config.encoder_embed_dim;
    let mut best = config.clone();
    loop {
        dim += config.heads;
        let candidate = widen(dim);
        let count = count_params(&candidate) as f64;
        if (count - goal).abs() < (count_params(&best) as f64 - goal).abs() {
            best = candidate;
        }
        if count >= goal {
            return best;
        }
    }
}
