//! Toy transformer used as compressor, query reasoner and generator.
//!
//! All three parameter groups share one skeleton: token, position and
//! memory-token embeddings, pre-norm single-head attention blocks with a
//! SiLU feed-forward, a final layer norm and an output head. The compressor
//! is non-causal, with memory slots reading the content but not each other;
//! the generator is causal and takes memory vectors directly as input rows.

mod optim;
mod params;
mod vocab;

pub use optim::{Adam, Optimizer, Sgd};
pub use params::{Bound, ModelConfig, ParamSet};
pub use vocab::{Vocabulary, MEM, PAD, PARAPHRASE, SEP};

use rand::Rng;

use crate::autodiff::{concat, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Longest document the compressor accepts.
pub const MAX_DOC_TOKENS: usize = 256;
/// Default weight of the alignment term in the pretraining loss.
pub const DEFAULT_LAMBDA: f64 = 0.1;

const MASKED: f64 = -1e9;

/// Compressed representation of one document (or query).
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEmbedding {
    pub doc_id: String,
    /// `l × h`.
    pub vectors: Tensor,
}

impl MemoryEmbedding {
    pub fn new(doc_id: impl Into<String>, vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::shape("memory embedding", vectors.shape(), &[0, 0]));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("memory embedding"));
        }
        Ok(Self {
            doc_id: doc_id.into(),
            vectors,
        })
    }

    pub fn tokens(&self) -> usize {
        self.vectors.rows()
    }

    pub fn hidden(&self) -> usize {
        self.vectors.cols()
    }

    /// The `d = l·h` vector view.
    pub fn flattened(&self) -> &[f64] {
        self.vectors.data()
    }
}

/// The three parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub compressor: ParamSet,
    pub generator: ParamSet,
    pub query_reasoner: ParamSet,
}

impl ModelParams {
    /// Fresh compressor and generator; the query reasoner starts as a copy
    /// of the compressor.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let compressor = ParamSet::init(&config, rng);
        let generator = ParamSet::init(&config, rng);
        Ok(Self {
            query_reasoner: compressor.clone(),
            config,
            compressor,
            generator,
        })
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        for set in [&self.compressor, &self.generator, &self.query_reasoner] {
            set.check_shapes(&self.config)?;
        }
        Ok(())
    }
}

fn causal_mask(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            t.data_mut()[i * n + j] = MASKED;
        }
    }
    t
}

/// Compressor mask over `[t₁…t_m, m₁…m_l]`: content attends to content,
/// each memory slot to the content and itself.
fn memory_mask(m: usize, l: usize) -> Tensor {
    let n = m + l;
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in m..n {
            if j != i {
                t.data_mut()[i * n + j] = MASKED;
            }
        }
    }
    t
}

fn attention<'t>(p: &Bound<'t, '_>, b: usize, x: Var<'t>, mask: Option<Var<'t>>) -> Result<Var<'t>> {
    let w = |n: &str| p.var(&format!("blk{b}.attn.{n}"));
    let h = x.shape()[1];
    let q = x.matmul(w("wq"))?;
    let k = x.matmul(w("wk"))?;
    let v = x.matmul(w("wv"))?;
    let mut scores = q.matmul(k.transpose()?)?.scale(1.0 / (h as f64).sqrt());
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    scores.softmax(1.0)?.matmul(v)?.matmul(w("wo"))
}

/// Runs the blocks and the final norm over input rows `x: [n × h]`, with an
/// optional additive attention mask.
pub fn transformer<'t>(p: &Bound<'t, '_>, layers: usize, x: Var<'t>, mask: Option<Tensor>) -> Result<Var<'t>> {
    let mask = mask.map(|m| x.tape().constant(m));
    let mut x = x;
    for b in 0..layers {
        let v = |n: &str| p.var(&format!("blk{b}.{n}"));
        let a = x.layer_norm(v("ln1.g"), v("ln1.b"))?;
        x = x.add(attention(p, b, a, mask)?)?;
        let f = x.layer_norm(v("ln2.g"), v("ln2.b"))?;
        let f = f.matmul(v("ff.w1"))?.add_row(v("ff.b1"))?.silu();
        x = x.add(f.matmul(v("ff.w2"))?.add_row(v("ff.b2"))?)?;
    }
    x.layer_norm(p.var("ln_f.g"), p.var("ln_f.b"))
}

fn with_positions<'t>(p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
    let n = x.shape()[0];
    let pos = p.var("pos_emb");
    let limit = pos.shape()[0];
    if n > limit {
        return Err(Error::Capacity { k: n, available: limit });
    }
    x.add(pos.slice_rows(0, n)?)
}

/// Hidden states of a compressor pass.
pub struct Compressed<'t> {
    /// `[m × h]` states at the content positions.
    pub doc_hidden: Var<'t>,
    /// `[l × h]` states at the memory positions.
    pub memory: Var<'t>,
}

/// Encodes `[t₁…t_m, m₁…m_l]` without causal masking on the tape.
pub fn compress_on_tape<'t>(
    p: &Bound<'t, '_>,
    config: &ModelConfig,
    tokens: &[usize],
    l: usize,
) -> Result<Compressed<'t>> {
    if tokens.is_empty() {
        return Err(Error::Empty("compress"));
    }
    if tokens.len() > MAX_DOC_TOKENS {
        return Err(Error::Capacity {
            k: tokens.len(),
            available: MAX_DOC_TOKENS,
        });
    }
    if l == 0 || l > config.memory_tokens {
        return Err(Error::Config(format!(
            "{l} memory tokens requested, model has {}",
            config.memory_tokens
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index {
            op: "compress",
            index: bad,
            bound: config.vocab_size,
        });
    }
    let emb = p.var("tok_emb").gather_rows(tokens)?;
    let mem = p.var("mem_emb").slice_rows(0, l)?;
    let x = with_positions(p, concat(&[emb, mem])?)?;
    let m = tokens.len();
    let out = transformer(p, config.layers, x, Some(memory_mask(m, l)))?;
    Ok(Compressed {
        doc_hidden: out.slice_rows(0, m)?,
        memory: out.slice_rows(m, l)?,
    })
}

/// Compresses a token sequence into `l` memory vectors.
pub fn compress(doc_id: &str, tokens: &[usize], params: &ParamSet, config: &ModelConfig, l: usize) -> Result<MemoryEmbedding> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let c = compress_on_tape(&p, config, tokens, l)?;
    MemoryEmbedding::new(doc_id, c.memory.value().as_ref().clone())
}

/// Generator logits for the target positions of
/// `[memory ; instruction ; <sep> ; target[..n-1]]`, one row per target token.
/// Only the length of `target` and its first `n-1` ids are read.
pub fn decoder_logits<'t>(
    g: &Bound<'t, '_>,
    config: &ModelConfig,
    memory: Option<Var<'t>>,
    instruction: &[usize],
    target: &[usize],
    sep: usize,
) -> Result<Var<'t>> {
    let target_len = target.len();
    if target_len == 0 {
        return Err(Error::Empty("decode target"));
    }
    let mut ids: Vec<usize> = instruction.to_vec();
    ids.push(sep);
    ids.extend_from_slice(&target[..target_len - 1]);
    if let Some(&bad) = ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index {
            op: "decode",
            index: bad,
            bound: config.vocab_size,
        });
    }
    let emb = g.var("tok_emb").gather_rows(&ids)?;
    let (x, offset) = match memory {
        Some(m) => (concat(&[m, emb])?, m.shape()[0]),
        None => (emb, 0),
    };
    let x = with_positions(g, x)?;
    let n = x.shape()[0];
    let out = transformer(g, config.layers, x, Some(causal_mask(n)))?;
    let start = offset + instruction.len();
    out.slice_rows(start, target_len)?.matmul(g.var("head"))
}

/// Teacher-forced cross-entropy of `target` given memory rows and an instruction.
pub fn decode_loss_on_tape<'t>(
    g: &Bound<'t, '_>,
    config: &ModelConfig,
    memory: Option<Var<'t>>,
    instruction: &[usize],
    target: &[usize],
    sep: usize,
) -> Result<Var<'t>> {
    if let Some(&bad) = target.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index {
            op: "decode target",
            index: bad,
            bound: config.vocab_size,
        });
    }
    decoder_logits(g, config, memory, instruction, target, sep)?.cross_entropy(target)
}

/// [`decode_loss_on_tape`] for stored memory embeddings, concatenated in order.
pub fn decode_loss<'t>(
    tape: &'t Tape,
    g: &Bound<'t, '_>,
    config: &ModelConfig,
    memories: &[MemoryEmbedding],
    instruction: &[usize],
    target: &[usize],
    sep: usize,
) -> Result<Var<'t>> {
    let rows: Vec<Var<'t>> = memories.iter().map(|m| tape.constant(m.vectors.clone())).collect();
    let memory = if rows.is_empty() { None } else { Some(concat(&rows)?) };
    decode_loss_on_tape(g, config, memory, instruction, target, sep)
}

/// `‖mean(doc_hidden) − mean(memory_hidden)‖²`.
pub fn alignment_loss<'t>(doc_hidden: Var<'t>, memory_hidden: Var<'t>) -> Result<Var<'t>> {
    doc_hidden.mean_rows()?.mse(memory_hidden.mean_rows()?)
}

/// `ce + λ·mse`.
pub fn total_pretrain_loss<'t>(ce: Var<'t>, mse: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("alignment weight {lambda} must be nonnegative")));
    }
    if lambda == 0.0 {
        return Ok(ce);
    }
    ce.add(mse.scale(lambda))
}

/// Top `top_n` token ids by logit for each memory vector, descending.
pub fn logit_lens(memory: &MemoryEmbedding, head: &Tensor, top_n: usize) -> Result<Vec<Vec<usize>>> {
    let (h, v) = (head.rows(), head.cols());
    if memory.hidden() != h {
        return Err(Error::shape("logit lens", memory.vectors.shape(), head.shape()));
    }
    if top_n > v {
        return Err(Error::Capacity { k: top_n, available: v });
    }
    Ok((0..memory.tokens())
        .map(|i| {
            let row = memory.vectors.row(i);
            let logits: Vec<f64> = (0..v)
                .map(|j| row.iter().enumerate().map(|(a, x)| x * head.get(a, j)).sum())
                .collect();
            let mut ids: Vec<usize> = (0..v).collect();
            ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            ids.truncate(top_n);
            ids
        })
        .collect())
}

/// Greedy decoding of `len` tokens after `[memory ; instruction ; <sep>]`.
pub fn generate(
    generator: &ParamSet,
    config: &ModelConfig,
    memory: Option<&Tensor>,
    instruction: &[usize],
    sep: usize,
    len: usize,
) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = Vec::with_capacity(len);
    for _ in 0..len {
        let tape = Tape::new();
        let g = generator.bind(&tape, false);
        let m = memory.map(|m| tape.constant(m.clone()));
        let mut target = out.clone();
        target.push(0);
        let logits = decoder_logits(&g, config, m, instruction, &target, sep)?;
        let logits = logits.value();
        let last = logits.row(logits.rows() - 1);
        let best = (0..last.len())
            .max_by(|&a, &b| last[a].total_cmp(&last[b]).then(b.cmp(&a)))
            .ok_or(Error::Empty("generate"))?;
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
