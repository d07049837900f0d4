//! Transformer encoder–decoder.
//!
//! Encoder inputs are `project(concat(word, position, depth, subgraph))`;
//! the decoder input is `project(concat(word, position))` and its output
//! projection is tied to the decoder word table.  Both stacks are pre-LN.

mod checkpoint;
mod config;
mod embeddings;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{EncoderInput, PaddedBatch};
use crate::subword::{BOS, PAD};
use crate::tensor::{AttentionSpec, Graph, Scalar, Tensor, TensorError, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use config::{ModelConfig, Preset, DECODER_FIELDS, ENCODER_FIELDS};
pub use embeddings::{load_decoder_embeddings, parse_embedding_file, EmbeddingReport};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty encoder input")]
    EmptyInput,
    #[error("id {id} out of range for the {table} table ({size} rows)")]
    IdOutOfRange { table: &'static str, id: u32, size: usize },
    #[error("sequence of length {len} exceeds max_positions {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("encoder id rows differ in length: {0:?}")]
    RaggedInput([usize; 3]),
    #[error("embedding width {found} does not match d_word {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("malformed embedding file at line {line}: {reason}")]
    MalformedEmbeddingFile { line: usize, reason: String },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("checkpoint config differs in `{field}`")]
    ConfigMismatch { field: String },
    #[error("parameter `{0}` missing or misshapen")]
    BadParameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub tensors: IndexMap<String, Arc<Tensor<F>>>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn get(&self, name: &str) -> Option<&Arc<Tensor<F>>> {
        self.tensors.get(name)
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// Order-sensitive checksum of all values.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in &self.tensors {
            name.hash(&mut h);
            for x in t.data() {
                x.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a keeps per-tensor streams stable across builds and platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Per-layer keep decisions: each layer is skipped with probability `p`.
pub fn layerdrop_mask(p: f64, rng: &mut impl Rng, n_layers: usize) -> Vec<bool> {
    (0..n_layers).map(|_| p <= 0.0 || rng.random::<f64>() >= p).collect()
}

/// Padded encoder-side rows, `size × len`.
#[derive(Debug, Clone, Copy)]
pub struct SourceBatch<'a> {
    pub size: usize,
    pub len: usize,
    pub ids: &'a [u32],
    pub depth_ids: &'a [u32],
    pub subgraph_ids: &'a [u32],
    pub lens: &'a [usize],
}

impl<'a> SourceBatch<'a> {
    pub fn from_padded(b: &'a PaddedBatch) -> Self {
        SourceBatch {
            size: b.size,
            len: b.src_len,
            ids: &b.src_ids,
            depth_ids: &b.src_depth_ids,
            subgraph_ids: &b.src_subgraph_ids,
            lens: &b.src_lens,
        }
    }
}

/// Encoder output kept for cross-attention.
#[derive(Debug, Clone, Copy)]
pub struct Memory<'a> {
    pub states: Var,
    pub len: usize,
    pub lens: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Final-layer-normed states, `[size·len, d_model]`.
    pub hidden: Var,
    /// Cross-attention node of each decoder layer (`None` when the layer was
    /// dropped or the decoder ran without memory).
    pub cross_attention: Vec<Option<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ModelParams<F>,
}

impl<F: Scalar> Model<F> {
    /// Fresh parameters: Xavier-uniform matrices and embeddings, zero
    /// biases, unit layer-norm gains.  Each tensor draws from its own
    /// seeded stream, so the values of a tensor depend only on the seed, its
    /// name and its shape.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let tensors = config
            .schema()
            .into_iter()
            .map(|(name, shape)| {
                let init = if name.ends_with(".g") {
                    Init::Ones
                } else if shape.len() == 1 {
                    Init::Zeros
                } else {
                    Init::Xavier
                };
                let t = match init {
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::filled(shape, F::one()),
                    Init::Xavier => {
                        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        let mut rng = param_rng(seed, &name);
                        let n = shape[0] * shape[1];
                        let data = (0..n).map(|_| F::lit(rng.random_range(-bound..bound))).collect();
                        Tensor::new(shape, data).expect("schema shape")
                    }
                };
                (name, Arc::new(t))
            })
            .collect();
        Ok(Model {
            config,
            params: ModelParams { tensors },
        })
    }

    /// Wraps existing parameters after checking them against the schema.
    pub fn from_params(config: ModelConfig, params: ModelParams<F>) -> Result<Self, ModelError> {
        config.validate()?;
        for (name, shape) in config.schema() {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(ModelError::BadParameter(name)),
            }
        }
        Ok(Model { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn p(&self, g: &mut Graph<F>, name: &str) -> Var {
        g.param(name, &self.params.tensors[name])
    }

    fn linear(&self, g: &mut Graph<F>, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let w = self.p(g, &format!("{prefix}.w"));
        let b = self.p(g, &format!("{prefix}.b"));
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }

    fn norm(&self, g: &mut Graph<F>, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let gain = self.p(g, &format!("{prefix}.g"));
        let bias = self.p(g, &format!("{prefix}.b"));
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }

    fn attention(
        &self,
        g: &mut Graph<F>,
        x: Var,
        memory: Var,
        prefix: &str,
        spec: AttentionSpec,
    ) -> Result<(Var, Var), ModelError> {
        let q = self.linear(g, x, &format!("{prefix}.q"))?;
        let k = self.linear(g, memory, &format!("{prefix}.k"))?;
        let v = self.linear(g, memory, &format!("{prefix}.v"))?;
        let a = g.attention(q, k, v, spec)?;
        Ok((self.linear(g, a, &format!("{prefix}.o"))?, a))
    }

    fn feed_forward(&self, g: &mut Graph<F>, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let h = self.linear(g, x, &format!("{prefix}.ffn1"))?;
        let h = g.gelu(h);
        let h = g.dropout(h, self.config.dropout);
        self.linear(g, h, &format!("{prefix}.ffn2"))
    }

    /// `x + dropout(f(norm(x)))`.
    fn residual(&self, g: &mut Graph<F>, x: Var, branch: Var) -> Result<Var, ModelError> {
        let b = g.dropout(branch, self.config.dropout);
        Ok(g.add(x, b)?)
    }

    fn embed(&self, g: &mut Graph<F>, table: &'static str, ids: &[u32]) -> Result<Var, ModelError> {
        let t = &self.params.tensors[table];
        let size = t.shape()[0];
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= size) {
            let name = match table {
                "enc.word" => "encoder word",
                "enc.depth" => "depth",
                "enc.subgraph" => "subgraph",
                "dec.word" => "decoder word",
                _ => "position",
            };
            return Err(ModelError::IdOutOfRange { table: name, id, size });
        }
        let v = self.p(g, table);
        Ok(g.embed(v, ids)?)
    }

    fn positions(&self, size: usize, len: usize) -> Result<Vec<u32>, ModelError> {
        if len > self.config.max_positions {
            return Err(ModelError::PrefixTooLong {
                len,
                max: self.config.max_positions,
            });
        }
        Ok((0..size).flat_map(|_| 0..len as u32).collect())
    }

    /// Encoder states `[size·len, d_model]`.  `keep[l]` false skips layer `l`.
    pub fn encode_graph(&self, g: &mut Graph<F>, src: SourceBatch<'_>, keep: &[bool]) -> Result<Var, ModelError> {
        let c = &self.config;
        let n = src.size * src.len;
        if n == 0 || src.lens.iter().any(|&l| l == 0) {
            return Err(ModelError::EmptyInput);
        }
        if src.ids.len() != n || src.depth_ids.len() != n || src.subgraph_ids.len() != n {
            return Err(ModelError::RaggedInput([src.ids.len(), src.depth_ids.len(), src.subgraph_ids.len()]));
        }
        let pos = self.positions(src.size, src.len)?;
        let mut parts = vec![self.embed(g, "enc.word", src.ids)?, self.embed(g, "enc.pos", &pos)?];
        if c.d_depth > 0 {
            parts.push(self.embed(g, "enc.depth", src.depth_ids)?);
        }
        if c.d_subgraph > 0 {
            parts.push(self.embed(g, "enc.subgraph", src.subgraph_ids)?);
        }
        let x = g.concat(&parts)?;
        let x = self.linear(g, x, "enc.in")?;
        let mut x = g.dropout(x, c.dropout);
        let spec = AttentionSpec {
            batch: src.size,
            heads: c.n_heads,
            tq: src.len,
            tk: src.len,
            key_lens: src.lens.to_vec(),
            causal: false,
        };
        for l in 0..c.enc_layers {
            if !keep.get(l).copied().unwrap_or(true) {
                continue;
            }
            let p = format!("enc.{l}");
            let h = self.norm(g, x, &format!("{p}.attn_ln"))?;
            let (a, _) = self.attention(g, h, h, &format!("{p}.attn"), spec.clone())?;
            x = self.residual(g, x, a)?;
            let h = self.norm(g, x, &format!("{p}.ffn_ln"))?;
            let f = self.feed_forward(g, h, &p)?;
            x = self.residual(g, x, f)?;
        }
        self.norm(g, x, "enc.final_ln")
    }

    /// Decoder states for `size` right-padded prefixes of length `len`.
    /// Without memory the cross-attention sublayers are skipped, which is
    /// the language-model mode used for decoder pretraining.
    pub fn decode_graph(
        &self,
        g: &mut Graph<F>,
        memory: Option<Memory<'_>>,
        tgt_in: &[u32],
        size: usize,
        len: usize,
        keep: &[bool],
    ) -> Result<DecoderOutput, ModelError> {
        let c = &self.config;
        if size * len == 0 || tgt_in.len() != size * len {
            return Err(ModelError::EmptyInput);
        }
        let pos = self.positions(size, len)?;
        let w = self.embed(g, "dec.word", tgt_in)?;
        let p = self.embed(g, "dec.pos", &pos)?;
        let x = g.concat(&[w, p])?;
        let x = self.linear(g, x, "dec.in")?;
        let mut x = g.dropout(x, c.dropout);
        let self_spec = AttentionSpec {
            batch: size,
            heads: c.n_heads,
            tq: len,
            tk: len,
            key_lens: vec![len; size],
            causal: true,
        };
        let mut cross = Vec::with_capacity(c.dec_layers);
        for l in 0..c.dec_layers {
            if !keep.get(l).copied().unwrap_or(true) {
                cross.push(None);
                continue;
            }
            let pre = format!("dec.{l}");
            let h = self.norm(g, x, &format!("{pre}.self_ln"))?;
            let (a, _) = self.attention(g, h, h, &format!("{pre}.self"), self_spec.clone())?;
            x = self.residual(g, x, a)?;
            match memory {
                Some(m) => {
                    let h = self.norm(g, x, &format!("{pre}.cross_ln"))?;
                    let spec = AttentionSpec {
                        batch: size,
                        heads: c.n_heads,
                        tq: len,
                        tk: m.len,
                        key_lens: m.lens.to_vec(),
                        causal: false,
                    };
                    let (a, probs) = self.attention(g, h, m.states, &format!("{pre}.cross"), spec)?;
                    x = self.residual(g, x, a)?;
                    cross.push(Some(probs));
                }
                None => cross.push(None),
            }
            let h = self.norm(g, x, &format!("{pre}.ffn_ln"))?;
            let f = self.feed_forward(g, h, &pre)?;
            x = self.residual(g, x, f)?;
        }
        let hidden = self.norm(g, x, "dec.final_ln")?;
        Ok(DecoderOutput {
            hidden,
            cross_attention: cross,
        })
    }

    /// Vocabulary logits from decoder states, through the tied word table.
    pub fn logits(&self, g: &mut Graph<F>, hidden: Var) -> Result<Var, ModelError> {
        let h = self.linear(g, hidden, "dec.out")?;
        let table = self.p(g, "dec.word");
        let z = g.matmul_t(h, table)?;
        let bias = self.p(g, "dec.out_bias");
        Ok(g.add_bias(z, bias)?)
    }

    /// Draws layerdrop decisions for both stacks (all kept in eval mode).
    pub fn layer_masks(&self, g: &mut Graph<F>) -> (Vec<bool>, Vec<bool>) {
        let c = &self.config;
        if !g.is_training() || c.layerdrop <= 0.0 {
            return (vec![true; c.enc_layers], vec![true; c.dec_layers]);
        }
        let mut rng = g.next_rng();
        (
            layerdrop_mask(c.layerdrop, &mut rng, c.enc_layers),
            layerdrop_mask(c.layerdrop, &mut rng, c.dec_layers),
        )
    }

    /// Label-smoothed sequence-to-sequence loss of a padded batch.
    pub fn loss(&self, g: &mut Graph<F>, batch: &PaddedBatch, label_smoothing: f64) -> Result<Var, ModelError> {
        let (enc_keep, dec_keep) = self.layer_masks(g);
        let states = self.encode_graph(g, SourceBatch::from_padded(batch), &enc_keep)?;
        let memory = Memory {
            states,
            len: batch.src_len,
            lens: &batch.src_lens,
        };
        let out = self.decode_graph(g, Some(memory), &batch.tgt_in, batch.size, batch.tgt_len, &dec_keep)?;
        let z = self.logits(g, out.hidden)?;
        Ok(g.smoothed_nll(z, &batch.tgt_out, PAD, label_smoothing)?)
    }

    /// Causal language-model loss over `bos …` rows without encoder memory.
    pub fn lm_loss(&self, g: &mut Graph<F>, batch: &PaddedBatch, label_smoothing: f64) -> Result<Var, ModelError> {
        let (_, dec_keep) = self.layer_masks(g);
        let out = self.decode_graph(g, None, &batch.tgt_in, batch.size, batch.tgt_len, &dec_keep)?;
        let z = self.logits(g, out.hidden)?;
        Ok(g.smoothed_nll(z, &batch.tgt_out, PAD, label_smoothing)?)
    }

    /// Encoder states for one input, `[len, d_model]`.
    pub fn encode(&self, input: &EncoderInput) -> Result<Tensor<F>, ModelError> {
        let mut g = Graph::new();
        let lens = [input.len()];
        let v = self.encode_graph(&mut g, single_source(input, &lens), &[])?;
        Ok(g.value(v).clone())
    }

    /// Next-token logits for a batch of equal-length prefixes decoded
    /// against one encoder memory.  Returns `[prefixes, dec_vocab]` and, per
    /// prefix, the head-averaged cross-attention of `layer` at the last
    /// position.
    pub fn decode_step(
        &self,
        memory: &Tensor<F>,
        prefixes: &[Vec<u32>],
        layer: Option<usize>,
    ) -> Result<StepOutput<F>, ModelError> {
        let size = prefixes.len();
        let len = prefixes.first().map_or(0, Vec::len);
        if prefixes.iter().any(|p| p.len() != len || p.first() != Some(&BOS)) {
            return Err(ModelError::InvalidConfig("prefixes must start with bos and share a length".into()));
        }
        if len > self.config.max_positions {
            return Err(ModelError::PrefixTooLong {
                len,
                max: self.config.max_positions,
            });
        }
        let mut g = Graph::new();
        let src_len = memory.rows();
        let mut tiled = Vec::with_capacity(size * memory.len());
        for _ in 0..size {
            tiled.extend_from_slice(memory.data());
        }
        let states = g.constant(Tensor::new(vec![size * src_len, memory.cols()], tiled)?);
        let lens = vec![src_len; size];
        let mem = Memory {
            states,
            len: src_len,
            lens: &lens,
        };
        let ids: Vec<u32> = prefixes.concat();
        let out = self.decode_graph(&mut g, Some(mem), &ids, size, len, &[])?;
        let last: Vec<usize> = (0..size).map(|b| b * len + len - 1).collect();
        let h = g.select_rows(out.hidden, &last)?;
        let z = self.logits(&mut g, h)?;
        let layer = layer.unwrap_or(self.config.dec_layers - 1);
        let attn = out
            .cross_attention
            .get(layer)
            .copied()
            .flatten()
            .and_then(|v| g.attention_probs(v))
            .map(|(spec, probs)| {
                (0..size)
                    .map(|b| head_average(spec, probs, b, len - 1, None))
                    .collect()
            })
            .unwrap_or_default();
        Ok(StepOutput {
            logits: g.value(z).clone(),
            cross_attention: attn,
        })
    }

    /// Full cross-attention of a complete target sequence (teacher forced):
    /// one row per decoder input position, averaged over heads unless
    /// `head` is given.
    pub fn cross_attention(
        &self,
        input: &EncoderInput,
        tgt_in: &[u32],
        layer: usize,
        head: Option<usize>,
    ) -> Result<Vec<Vec<F>>, ModelError> {
        if layer >= self.config.dec_layers || head.is_some_and(|h| h >= self.config.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "no layer {layer} / head {head:?} in this model"
            )));
        }
        let mut g = Graph::new();
        let lens = [input.len()];
        let states = self.encode_graph(&mut g, single_source(input, &lens), &[])?;
        let mem = Memory {
            states,
            len: input.len(),
            lens: &lens,
        };
        let out = self.decode_graph(&mut g, Some(mem), tgt_in, 1, tgt_in.len(), &[])?;
        let v = out.cross_attention[layer].expect("all layers kept in eval mode");
        let (spec, probs) = g.attention_probs(v).expect("attention node");
        Ok((0..tgt_in.len()).map(|i| head_average(spec, probs, 0, i, head)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput<F> {
    pub logits: Tensor<F>,
    pub cross_attention: Vec<Vec<F>>,
}

fn single_source<'a>(input: &'a EncoderInput, lens: &'a [usize]) -> SourceBatch<'a> {
    SourceBatch {
        size: 1,
        len: input.len(),
        ids: &input.piece_ids,
        depth_ids: &input.depth_ids,
        subgraph_ids: &input.subgraph_ids,
        lens,
    }
}

/// Row `i` of batch element `b`, averaged over heads (or one head).
fn head_average<F: Scalar>(spec: &AttentionSpec, probs: &[F], b: usize, i: usize, head: Option<usize>) -> Vec<F> {
    let heads: Vec<usize> = match head {
        Some(h) => vec![h],
        None => (0..spec.heads).collect(),
    };
    let mut row = vec![F::zero(); spec.tk];
    for &h in &heads {
        let start = ((b * spec.heads + h) * spec.tq + i) * spec.tk;
        row.iter_mut().zip(&probs[start..start + spec.tk]).for_each(|(r, &p)| *r += p);
    }
    let n = F::lit(heads.len() as f64);
    row.iter_mut().for_each(|r| *r /= n);
    row
}
