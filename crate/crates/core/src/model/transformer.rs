use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mat, NodeId};
use super::params::Parameters;
use super::{CrossAttentionMode, ModelConfig};
use crate::corpus::{Example, BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Final encoder layer output of one source sequence, `tokens x d`.
pub type EncoderOutput = Mat;

/// Shape facts recorded during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    /// Key length of each cross-attention block in the first decoder layer.
    pub cross_attention_lengths: Vec<usize>,
}

fn positions(len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

struct Net<'a, 'p> {
    g: &'a mut Graph<'p>,
    cfg: &'a ModelConfig,
    rng: Option<&'a mut ChaCha8Rng>,
    trace: ForwardTrace,
}

impl<'a, 'p> Net<'a, 'p> {
    fn drop(&mut self, x: NodeId, rate: f64) -> NodeId {
        self.g.dropout(x, rate, self.rng.as_deref_mut())
    }

    fn linear(&mut self, x: NodeId, w: &str, b: &str) -> NodeId {
        let w = self.g.param(w);
        let b = self.g.param(b);
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let gain = self.g.param(&format!("{prefix}.g"));
        let bias = self.g.param(&format!("{prefix}.b"));
        self.g.layer_norm(x, gain, bias)
    }

    fn attention(
        &mut self,
        prefix: &str,
        query: NodeId,
        memory: NodeId,
        dim: usize,
        causal: bool,
    ) -> NodeId {
        let heads = self.cfg.heads;
        let head_dim = dim / heads;
        let q = self.linear(query, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
        let k = self.linear(memory, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
        let v = self.linear(memory, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.g.slice_cols(q, h * head_dim, head_dim),
                    self.g.slice_cols(k, h * head_dim, head_dim),
                    self.g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = self.g.matmul_bt(qh, kh);
            let scores = self.g.scale(scores, scale);
            let probs = self.g.softmax(scores, causal);
            let probs = self.drop(probs, self.cfg.attention_dropout);
            outs.push(self.g.matmul(probs, vh));
        }
        let joined = self.g.concat_cols(&outs);
        self.linear(joined, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn ffn(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
        let h = self.g.relu(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn embed(&mut self, table: &str, ids: &[u32], dim: usize) -> NodeId {
        let t = self.g.param(table);
        let e = self.g.gather(t, ids);
        let e = self.g.scale(e, (dim as f64).sqrt());
        let pos = self.g.constant(positions(ids.len(), dim));
        let x = self.g.add(e, pos);
        self.drop(x, self.cfg.dropout)
    }

    fn residual(&mut self, x: NodeId, branch: NodeId) -> NodeId {
        let branch = self.drop(branch, self.cfg.dropout);
        self.g.add(x, branch)
    }

    /// Final-layer encoder states, `len x encoder_embed_dim`.
    fn encoder(&mut self, k: usize, ids: &[u32]) -> NodeId {
        let de = self.cfg.encoder_embed_dim;
        let e = format!("enc{k}");
        let mut x = self.embed(&format!("{e}.embed"), ids, de);
        for l in 0..self.cfg.encoder_layers {
            let p = format!("{e}.l{l}");
            let h = self.layer_norm(x, &format!("{p}.ln1"));
            let a = self.attention(&format!("{p}.attn"), h, h, de, false);
            x = self.residual(x, a);
            let h = self.layer_norm(x, &format!("{p}.ln2"));
            let f = self.ffn(h, &format!("{p}.ffn"));
            x = self.residual(x, f);
        }
        self.layer_norm(x, &format!("{e}.ln_f"))
    }

    /// Encoder states as decoder memory (projected to `embed_dim` if needed).
    fn memory(&mut self, k: usize, states: NodeId) -> NodeId {
        if self.cfg.encoder_embed_dim == self.cfg.embed_dim {
            states
        } else {
            self.linear(states, &format!("enc{k}.proj.w"), &format!("enc{k}.proj.b"))
        }
    }

    fn cross(&mut self, layer: usize, x: NodeId, memories: &[NodeId]) -> NodeId {
        let d = self.cfg.embed_dim;
        let p = format!("dec.l{layer}");
        let record = layer == 0;
        let lens: Vec<usize> = memories.iter().map(|&m| self.g.value(m).nrows()).collect();
        match self.cfg.effective_mode() {
            None => {
                if record {
                    self.trace.cross_attention_lengths = vec![lens[0]];
                }
                let h = self.layer_norm(x, &format!("{p}.lnx"));
                let a = self.attention(&format!("{p}.x0"), h, memories[0], d, false);
                self.residual(x, a)
            }
            Some(CrossAttentionMode::Flat) => {
                let flat = self.g.concat_rows(memories);
                if record {
                    self.trace.cross_attention_lengths = vec![self.g.value(flat).nrows()];
                }
                let h = self.layer_norm(x, &format!("{p}.lnx"));
                let a = self.attention(&format!("{p}.x0"), h, flat, d, false);
                self.residual(x, a)
            }
            Some(CrossAttentionMode::Serial) => {
                if record {
                    self.trace.cross_attention_lengths = lens;
                }
                let mut x = x;
                for (k, &m) in memories.iter().enumerate() {
                    let h = self.layer_norm(x, &format!("{p}.lnx{k}"));
                    let a = self.attention(&format!("{p}.x{k}"), h, m, d, false);
                    x = self.residual(x, a);
                }
                x
            }
            Some(CrossAttentionMode::Parallel) => {
                if record {
                    self.trace.cross_attention_lengths = lens;
                }
                let h = self.layer_norm(x, &format!("{p}.lnx"));
                let mut sum = None;
                for (k, &m) in memories.iter().enumerate() {
                    let a = self.attention(&format!("{p}.x{k}"), h, m, d, false);
                    sum = Some(match sum {
                        None => a,
                        Some(s) => self.g.add(s, a),
                    });
                }
                self.residual(x, sum.expect("at least one encoder"))
            }
            Some(CrossAttentionMode::Hierarchical) => {
                if record {
                    self.trace.cross_attention_lengths = lens;
                }
                let h = self.layer_norm(x, &format!("{p}.lnx"));
                let per_encoder: Vec<NodeId> = memories
                    .iter()
                    .enumerate()
                    .map(|(k, &m)| self.attention(&format!("{p}.x{k}"), h, m, d, false))
                    .collect();
                // second attention block: each position attends over the
                // per-encoder context vectors
                let hp = format!("{p}.hier");
                let q = self.linear(h, &format!("{hp}.wq"), &format!("{hp}.bq"));
                let scale = 1.0 / (d as f64).sqrt();
                let mut scores = Vec::new();
                let mut values = Vec::new();
                for &c in &per_encoder {
                    let key = self.linear(c, &format!("{hp}.wk"), &format!("{hp}.bk"));
                    let val = self.linear(c, &format!("{hp}.wv"), &format!("{hp}.bv"));
                    let s = self.g.row_dot(q, key);
                    scores.push(self.g.scale(s, scale));
                    values.push(val);
                }
                let scores = self.g.concat_cols(&scores);
                let weights = self.g.softmax(scores, false);
                let weights = self.drop(weights, self.cfg.attention_dropout);
                let mut mixed = None;
                for (k, &val) in values.iter().enumerate() {
                    let w = self.g.slice_cols(weights, k, 1);
                    let part = self.g.mul_col(val, w);
                    mixed = Some(match mixed {
                        None => part,
                        Some(m) => self.g.add(m, part),
                    });
                }
                let out = self.linear(
                    mixed.expect("at least one encoder"),
                    &format!("{hp}.wo"),
                    &format!("{hp}.bo"),
                );
                self.residual(x, out)
            }
        }
    }

    /// Decoder output logits, one row per input position.
    fn decoder(&mut self, memories: &[NodeId], ids: &[u32], last_only: bool) -> NodeId {
        let d = self.cfg.embed_dim;
        let mut x = self.embed("dec.embed", ids, d);
        for l in 0..self.cfg.decoder_layers {
            let p = format!("dec.l{l}");
            let h = self.layer_norm(x, &format!("{p}.ln1"));
            let a = self.attention(&format!("{p}.self"), h, h, d, true);
            x = self.residual(x, a);
            x = self.cross(l, x, memories);
            let h = self.layer_norm(x, &format!("{p}.ln3"));
            let f = self.ffn(h, &format!("{p}.ffn"));
            x = self.residual(x, f);
        }
        let mut h = self.layer_norm(x, "dec.ln_f");
        if last_only && ids.len() > 1 {
            h = self.g.slice_rows_last(h);
        }
        let logits = if self.cfg.tie_output {
            let e = self.g.param("dec.embed");
            self.g.matmul_bt(h, e)
        } else {
            let w = self.g.param("out.w");
            self.g.matmul(h, w)
        };
        let b = self.g.param("out.b");
        self.g.add_row(logits, b)
    }
}

fn check_ids(cfg: &ModelConfig, ids: &[u32], what: &str) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Invalid(format!("empty {what} sequence")));
    }
    if ids.len() > cfg.max_positions {
        return Err(Error::Invalid(format!(
            "{what} length {} exceeds max_positions {}",
            ids.len(),
            cfg.max_positions
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange(bad));
    }
    Ok(())
}

fn check_sources(cfg: &ModelConfig, sources: &[Vec<u32>]) -> Result<()> {
    if sources.len() != cfg.num_encoders {
        return Err(Error::Shape(format!(
            "model has {} encoder(s) but {} source sequence(s) were given",
            cfg.num_encoders,
            sources.len()
        )));
    }
    sources.iter().try_for_each(|s| check_ids(cfg, s, "source"))
}

fn decoder_input(prefix: &[u32]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(prefix.len() + 1);
    ids.push(BOS);
    ids.extend_from_slice(prefix);
    ids
}

fn log_softmax_rows(logits: ndarray::ArrayView2<f64>) -> Mat {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

/// Runs every encoder on its own source sequence.
pub fn encode_sources(
    params: &Parameters,
    cfg: &ModelConfig,
    sources: &[Vec<u32>],
) -> Result<Vec<EncoderOutput>> {
    check_sources(cfg, sources)?;
    let mut g = Graph::new(params);
    let mut net = Net {
        g: &mut g,
        cfg,
        rng: None,
        trace: ForwardTrace::default(),
    };
    let nodes: Vec<NodeId> = sources
        .iter()
        .enumerate()
        .map(|(k, s)| net.encoder(k, s))
        .collect();
    Ok(nodes.into_iter().map(|n| g.value(n).to_owned()).collect())
}

/// Next-token log-probabilities after `prefix`, reusing encoder outputs.
pub fn next_token_logprobs(
    params: &Parameters,
    cfg: &ModelConfig,
    encoded: &[EncoderOutput],
    prefix: &[u32],
) -> Result<Vec<f64>> {
    let ids = decoder_input(prefix);
    check_ids(cfg, &ids, "target")?;
    let mut g = Graph::new(params);
    let mut net = Net {
        g: &mut g,
        cfg,
        rng: None,
        trace: ForwardTrace::default(),
    };
    let memories: Vec<NodeId> = encoded
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let states = net.g.constant(e.clone());
            net.memory(k, states)
        })
        .collect();
    let logits = net.decoder(&memories, &ids, true);
    let v = g.value(logits);
    let last = v.slice(ndarray::s![v.nrows() - 1..v.nrows(), ..]);
    Ok(log_softmax_rows(last).into_raw_vec_and_offset().0)
}

/// Log-probability rows for `[BOS] + target_prefix`: row `t` is the
/// distribution of the token following the first `t` prefix tokens.
pub fn forward(
    params: &Parameters,
    cfg: &ModelConfig,
    sources: &[Vec<u32>],
    target_prefix: &[u32],
) -> Result<Mat> {
    forward_traced(params, cfg, sources, target_prefix).map(|(m, _)| m)
}

pub fn forward_traced(
    params: &Parameters,
    cfg: &ModelConfig,
    sources: &[Vec<u32>],
    target_prefix: &[u32],
) -> Result<(Mat, ForwardTrace)> {
    check_sources(cfg, sources)?;
    let ids = decoder_input(target_prefix);
    check_ids(cfg, &ids, "target")?;
    let mut g = Graph::new(params);
    let mut net = Net {
        g: &mut g,
        cfg,
        rng: None,
        trace: ForwardTrace::default(),
    };
    let memories: Vec<NodeId> = sources
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let states = net.encoder(k, s);
            net.memory(k, states)
        })
        .collect();
    let logits = net.decoder(&memories, &ids, false);
    let trace = std::mem::take(&mut net.trace);
    Ok((log_softmax_rows(g.value(logits)), trace))
}

/// Label-smoothed cross-entropy of one row of logits against `label`, and its
/// gradient with respect to the logits. Smoothing mass is spread uniformly
/// over every non-PAD token.
pub fn label_smoothed_loss(
    logits: ndarray::ArrayView1<f64>,
    label: u32,
    smoothing: f64,
) -> (f64, Vec<f64>) {
    let v = logits.len();
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let z: f64 = logits.iter().map(|x| (x - max).exp()).sum();
    let lse = max + z.ln();
    let uniform = smoothing / (v - 1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(v);
    for (i, &x) in logits.iter().enumerate() {
        let q = if i as u32 == PAD {
            0.0
        } else if i as u32 == label {
            1.0 - smoothing + uniform
        } else {
            uniform
        };
        let logp = x - lse;
        if q > 0.0 {
            loss -= q * logp;
        }
        grad.push(logp.exp() - q);
    }
    (loss, grad)
}

fn labels(target: &[u32]) -> Vec<u32> {
    let mut l = target.to_vec();
    l.push(EOS);
    l
}

/// One example's summed token loss, optionally back-propagating with the
/// given weight into `grads`.
fn example_loss(
    params: &Parameters,
    cfg: &ModelConfig,
    ex: &Example,
    smoothing: f64,
    rng: Option<&mut ChaCha8Rng>,
    grads: Option<(&mut Parameters, f64)>,
) -> Result<f64> {
    check_sources(cfg, &ex.sources)?;
    let ids = decoder_input(&ex.target);
    check_ids(cfg, &ids, "target")?;
    let labels = labels(&ex.target);
    let mut g = Graph::new(params);
    let mut net = Net {
        g: &mut g,
        cfg,
        rng,
        trace: ForwardTrace::default(),
    };
    let memories: Vec<NodeId> = ex
        .sources
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let states = net.encoder(k, s);
            net.memory(k, states)
        })
        .collect();
    let logits = net.decoder(&memories, &ids, false);
    let lv = g.value(logits);
    let mut total = 0.0;
    let mut seed = Mat::zeros(lv.dim());
    for (t, &label) in labels.iter().enumerate() {
        if label == PAD {
            continue;
        }
        let (loss, grad) = label_smoothed_loss(lv.row(t), label, smoothing);
        total += loss;
        if let Some((_, weight)) = &grads {
            seed.row_mut(t)
                .iter_mut()
                .zip(grad)
                .for_each(|(s, gr)| *s = gr * weight);
        }
    }
    if let Some((acc, _)) = grads {
        g.backward(logits, seed, acc);
    }
    Ok(total)
}

fn token_count(batch: &[Example]) -> usize {
    batch
        .iter()
        .map(|e| labels(&e.target).iter().filter(|&&l| l != PAD).count())
        .sum()
}

/// Mean label-smoothed loss per non-PAD target token, and its exact
/// gradient. Dropout is applied only when `rng` is given.
pub fn backward(
    params: &Parameters,
    cfg: &ModelConfig,
    batch: &[Example],
    smoothing: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Parameters)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let tokens = token_count(batch).max(1) as f64;
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for ex in batch {
        total += example_loss(
            params,
            cfg,
            ex,
            smoothing,
            rng.as_deref_mut(),
            Some((&mut grads, 1.0 / tokens)),
        )?;
    }
    let loss = total / tokens;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    grads.check_finite()?;
    Ok((loss, grads))
}

/// Mean label-smoothed loss per non-PAD target token, without dropout.
pub fn batch_loss(
    params: &Parameters,
    cfg: &ModelConfig,
    batch: &[Example],
    smoothing: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let tokens = token_count(batch).max(1) as f64;
    let mut total = 0.0;
    for ex in batch {
        total += example_loss(params, cfg, ex, smoothing, None, None)?;
    }
    Ok(total / tokens)
}
