use std::collections::HashMap;

use crate::autodiff::{concat, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{compress, MemoryEmbedding, ModelConfig, ParamSet};
use crate::topk::ScoreMatrix;

/// Offline-compressed documents keyed by id. Read-only during joint training.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedIndex {
    l: usize,
    h: usize,
    entries: Vec<MemoryEmbedding>,
    by_id: HashMap<String, usize>,
}

impl CompressedIndex {
    pub fn new(l: usize, h: usize) -> Self {
        Self {
            l,
            h,
            entries: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn from_entries(l: usize, h: usize, entries: Vec<MemoryEmbedding>) -> Result<Self> {
        let mut index = Self::new(l, h);
        for e in entries {
            index.insert(e)?;
        }
        Ok(index)
    }

    /// Compresses every `(doc_id, tokens)` pair with the compressor.
    pub fn build<'a, I>(docs: I, compressor: &ParamSet, config: &ModelConfig, l: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [usize])>,
    {
        let mut index = Self::new(l, config.hidden);
        for (id, tokens) in docs {
            index.insert(compress(id, tokens, compressor, config, l)?)?;
        }
        Ok(index)
    }

    pub fn insert(&mut self, entry: MemoryEmbedding) -> Result<()> {
        if entry.vectors.shape() != [self.l, self.h] {
            return Err(Error::shape("index entry", entry.vectors.shape(), &[self.l, self.h]));
        }
        if self.by_id.contains_key(&entry.doc_id) {
            return Err(Error::Config(format!("duplicate document id `{}`", entry.doc_id)));
        }
        self.by_id.insert(entry.doc_id.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEmbedding] {
        &self.entries
    }

    pub fn get(&self, doc_id: &str) -> Result<&MemoryEmbedding> {
        self.by_id
            .get(doc_id)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::UnknownDoc(doc_id.to_string()))
    }
}

/// Compresses a query with the query reasoner.
pub fn encode_query(tokens: &[usize], query_reasoner: &ParamSet, config: &ModelConfig, l: usize) -> Result<MemoryEmbedding> {
    if tokens.is_empty() {
        return Err(Error::Empty("query"));
    }
    compress("query", tokens, query_reasoner, config, l)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(a.to_vec()));
    let y = tape.constant(Tensor::vector(b.to_vec()));
    Ok(x.cosine(y)?.value().item())
}

/// Cosine between the flattened query and each candidate, in candidate order.
pub fn score_candidates(q: &MemoryEmbedding, index: &CompressedIndex, candidates: &[String]) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|id| cosine(q.flattened(), index.get(id)?.flattened()))
        .collect()
}

/// Scores on the tape for a query embedding `q: [l × h]`, plus the
/// candidates' memories as a `[1, D, l·h]` constant for aggregation.
pub fn score_candidates_on_tape<'t>(
    tape: &'t Tape,
    q: Var<'t>,
    index: &CompressedIndex,
    candidates: &[String],
) -> Result<(ScoreMatrix<'t>, Var<'t>)> {
    let d = index.l() * index.h();
    if q.value().len() != d {
        return Err(Error::shape("score_candidates", &q.shape(), &[index.l(), index.h()]));
    }
    let mut flat = Vec::with_capacity(candidates.len() * d);
    let mut scores = Vec::with_capacity(candidates.len());
    for id in candidates {
        let m = index.get(id)?;
        flat.extend_from_slice(m.flattened());
        let mv = tape.constant(m.vectors.clone());
        scores.push(q.cosine(mv)?);
    }
    let row = concat(&scores)?.reshape(&[1, candidates.len()])?;
    let memories = tape.constant(Tensor::new(vec![1, candidates.len(), d], flat)?);
    Ok((ScoreMatrix::new(row)?, memories))
}

/// Candidate positions by descending score, ties by ascending doc id.
pub(crate) fn ranking(scores: &[f64], candidates: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| candidates[a].cmp(&candidates[b])));
    order
}

/// Candidates by descending cosine score, ties broken by ascending doc id.
pub fn rank_documents(q: &MemoryEmbedding, index: &CompressedIndex, candidates: &[String]) -> Result<Vec<String>> {
    let scores = score_candidates(q, index, candidates)?;
    Ok(ranking(&scores, candidates)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect())
}
