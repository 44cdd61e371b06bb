//! On-disk formats: compressed indexes, checkpoints and corpora.
//!
//! Index layout, little-endian throughout:
//!
//! ```text
//! "CLRX" | version u16 | doc_count u32 | l u16 | h u16
//! per doc: id_len u16 | id bytes (UTF-8) | l·h f32 values
//! ```
//!
//! Checkpoint layout:
//!
//! ```text
//! "CLRC" | version u16 | seed u64 | config_len u32 | config JSON
//! group_count u8, per group: name | tensor_count u32,
//!   per tensor: name | rank u8 | dims u32… | f64 values
//! ```
//!
//! Names are `len u16 | UTF-8`. Trailing bytes are rejected in both.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datagen::{Corpus, CorpusSpec, CorpusStats, SyntheticDocument};
use crate::error::{Error, Result};
use crate::model::{MemoryEmbedding, ModelConfig, ModelParams, ParamSet};
use crate::trainer::{CompressedIndex, RunConfig};

pub const INDEX_MAGIC: &[u8; 4] = b"CLRX";
pub const INDEX_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLRC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Bounds-checked little-endian reader that reports byte offsets.
struct Reader<'a> {
    what: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(what: &'static str, buf: &'a [u8]) -> Self {
        Self { what, buf, pos: 0 }
    }

    fn fail(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            offset,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            self.fail(
                self.pos,
                format!("truncated {field}: need {n} bytes, {} remain", self.buf.len() - self.pos),
            )
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.array::<1>(field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(field)?))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(field)?))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(field)?))
    }

    fn name(&mut self, field: &str) -> Result<String> {
        let len = self.u16(field)? as usize;
        let start = self.pos;
        let bytes = self.take(len, field)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail(start, format!("{field} is not valid UTF-8")))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(self.fail(0, format!("bad magic {got:?}, expected {:?}", String::from_utf8_lossy(expected))));
        }
        Ok(())
    }

    fn version(&mut self, supported: u16) -> Result<()> {
        let at = self.pos;
        let v = self.u16("version")?;
        if v != supported {
            return Err(self.fail(at, format!("unsupported version {v}, expected {supported}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("name `{name}` is too long")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn narrow<T: TryFrom<usize>>(value: usize, field: &str) -> Result<T> {
    T::try_from(value).map_err(|_| Error::Config(format!("{field} {value} does not fit the file format")))
}

pub fn encode_index(index: &CompressedIndex) -> Result<Vec<u8>> {
    let (l, h) = (index.l(), index.h());
    let mut out = Vec::with_capacity(16 + index.len() * (8 + 4 * l * h));
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.extend_from_slice(&narrow::<u32>(index.len(), "document count")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(l, "memory tokens")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(h, "hidden width")?.to_le_bytes());
    for e in index.entries() {
        put_name(&mut out, &e.doc_id)?;
        for v in e.flattened() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_index(bytes: &[u8]) -> Result<CompressedIndex> {
    let mut r = Reader::new("index file", bytes);
    r.magic(INDEX_MAGIC)?;
    r.version(INDEX_VERSION)?;
    let count = r.u32("document count")? as usize;
    let at = r.pos;
    let (l, h) = (r.u16("memory tokens")? as usize, r.u16("hidden width")? as usize);
    if l == 0 || h == 0 {
        return Err(r.fail(at, format!("degenerate shape {l}×{h}")));
    }
    let mut index = CompressedIndex::new(l, h);
    for _ in 0..count {
        let start = r.pos;
        let id = r.name("document id")?;
        let raw = r.take(4 * l * h, "embedding values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
            .collect();
        let entry = Tensor::matrix(l, h, values)
            .and_then(|t| MemoryEmbedding::new(id, t))
            .map_err(|e| r.fail(start, e.to_string()))?;
        index.insert(entry).map_err(|e| r.fail(start, e.to_string()))?;
    }
    r.finish()?;
    Ok(index)
}

pub fn save_index(index: &CompressedIndex, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_index(index)?)?)
}

pub fn load_index(path: &Path) -> Result<CompressedIndex> {
    decode_index(&fs::read(path)?)
}

/// Trained parameters with the run configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    run: RunConfig,
    model: ModelConfig,
}

const GROUPS: [&str; 3] = ["compressor", "generator", "query_reasoner"];

fn groups(p: &ModelParams) -> [&ParamSet; 3] {
    [&p.compressor, &p.generator, &p.query_reasoner]
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ck.seed.to_le_bytes());
    let json = serde_json::to_vec(&Snapshot {
        run: ck.config.clone(),
        model: ck.params.config.clone(),
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    out.extend_from_slice(&narrow::<u32>(json.len(), "config length")?.to_le_bytes());
    out.extend_from_slice(&json);
    out.push(GROUPS.len() as u8);
    for (name, set) in GROUPS.iter().zip(groups(&ck.params)) {
        put_name(&mut out, name)?;
        out.extend_from_slice(&narrow::<u32>(set.len(), "tensor count")?.to_le_bytes());
        for (n, t) in set.names().iter().zip(set.tensors()) {
            put_name(&mut out, n)?;
            out.push(narrow::<u8>(t.shape().len(), "tensor rank")?);
            for &d in t.shape() {
                out.extend_from_slice(&narrow::<u32>(d, "dimension")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new("checkpoint", bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let seed = r.u64("seed")?;
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let snap: Snapshot =
        serde_json::from_slice(r.take(len, "config")?).map_err(|e| r.fail(at, format!("config: {e}")))?;
    let at = r.pos;
    let n = r.u8("group count")? as usize;
    if n != GROUPS.len() {
        return Err(r.fail(at, format!("{n} parameter groups, expected {}", GROUPS.len())));
    }
    let mut sets = Vec::with_capacity(n);
    for expected in GROUPS {
        let at = r.pos;
        let name = r.name("group name")?;
        if name != expected {
            return Err(r.fail(at, format!("group `{name}`, expected `{expected}`")));
        }
        let count = r.u32("tensor count")? as usize;
        let (mut names, mut tensors) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let start = r.pos;
            names.push(r.name("tensor name")?);
            let rank = r.u8("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let size = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|s| s.checked_mul(8))
                .ok_or_else(|| r.fail(start, "tensor size overflows"))?;
            let data = r
                .take(size, "tensor values")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            tensors.push(Tensor::new(shape, data).map_err(|e| r.fail(start, e.to_string()))?);
        }
        sets.push(ParamSet::from_parts(names, tensors)?);
    }
    r.finish()?;
    let mut it = sets.into_iter();
    let params = ModelParams {
        config: snap.model,
        compressor: it.next().expect("three groups"),
        generator: it.next().expect("three groups"),
        query_reasoner: it.next().expect("three groups"),
    };
    params.check()?;
    Ok(Checkpoint {
        config: snap.run,
        seed,
        params,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(ck)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    spec: CorpusSpec,
    stats: CorpusStats,
}

/// Line-delimited JSON: a header with the spec and counts, then one
/// document per line.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    let json = |e: serde_json::Error| Error::Config(e.to_string());
    let header = CorpusHeader {
        spec: corpus.spec.clone(),
        stats: corpus.stats.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(json)?;
    writeln!(out)?;
    for d in &corpus.documents {
        serde_json::to_writer(&mut out, d).map_err(json)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<Corpus> {
    let mut offset = 0usize;
    let mut header: Option<CorpusHeader> = None;
    let mut documents = Vec::new();
    for line in input.split(b'\n') {
        let line = line?;
        let start = offset;
        offset += line.len() + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let fail = |e: serde_json::Error| Error::Format {
            what: "corpus",
            offset: start,
            detail: e.to_string(),
        };
        if header.is_none() {
            header = Some(serde_json::from_slice(&line).map_err(fail)?);
        } else {
            documents.push(serde_json::from_slice::<SyntheticDocument>(&line).map_err(fail)?);
        }
    }
    let header = header.ok_or(Error::Format {
        what: "corpus",
        offset: 0,
        detail: "missing header line".into(),
    })?;
    if header.stats.included != documents.len() {
        return Err(Error::Format {
            what: "corpus",
            offset,
            detail: format!("header lists {} documents, found {}", header.stats.included, documents.len()),
        });
    }
    Ok(Corpus {
        spec: header.spec,
        documents,
        stats: header.stats,
    })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    write_corpus(corpus, std::io::BufWriter::new(fs::File::create(path)?))
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(std::io::BufReader::new(fs::File::open(path)?))
}
