//! Template-driven synthetic corpus: documents built from atomic facts, with
//! single-fact and multi-hop QA pairs, a paraphrase, and a rule-based
//! coverage check that drives regeneration.
//!
//! Every document is about one subject entity. Queries used for retrieval
//! refer to that subject through a separate alias symbol that never occurs
//! in any document, so matching a query to its document has to be learned.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OF: &str = "of";
pub const QUESTION_MARK: &str = "?";
pub const PERIOD: &str = ".";

/// Longest multi-hop chain that gets a complex question.
pub const MAX_HOPS: usize = 3;

/// Relation surface forms. The synonym table is a bijection used for
/// paraphrasing. Relations marked unaskable have no question template.
#[derive(Clone, Copy, Debug)]
pub struct RelationTemplate {
    pub name: &'static str,
    pub synonym: &'static str,
    pub askable: bool,
}

pub const RELATIONS: &[RelationTemplate] = &[
    RelationTemplate { name: "born_in", synonym: "birthplace", askable: true },
    RelationTemplate { name: "works_for", synonym: "employer", askable: true },
    RelationTemplate { name: "married_to", synonym: "spouse", askable: true },
    RelationTemplate { name: "located_in", synonym: "situated_in", askable: true },
    RelationTemplate { name: "founded_by", synonym: "founder", askable: true },
    RelationTemplate { name: "member_of", synonym: "affiliated_with", askable: true },
    RelationTemplate { name: "plays", synonym: "performs", askable: true },
    RelationTemplate { name: "wrote", synonym: "authored", askable: true },
];

/// Relation whose facts can never be turned into a question.
pub const UNASKABLE: RelationTemplate = RelationTemplate {
    name: "resembles",
    synonym: "looks_like",
    askable: false,
};

pub fn relation(name: &str) -> Option<&'static RelationTemplate> {
    RELATIONS
        .iter()
        .chain(std::iter::once(&UNASKABLE))
        .find(|r| r.name == name || r.synonym == name)
}

pub fn subject_symbol(doc: usize) -> String {
    format!("ent{doc}")
}

pub fn alias_symbol(doc: usize) -> String {
    format!("alias{doc}")
}

pub fn object_symbol(doc: usize, slot: usize, facts_per_doc: usize) -> String {
    format!("val{}", doc * facts_per_doc + slot)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub hops: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDocument {
    pub doc_id: String,
    pub subject: String,
    /// Query-side name of `subject`.
    pub alias: String,
    pub facts: Vec<Fact>,
    pub surface: Vec<String>,
    pub simple_qas: Vec<QaPair>,
    pub complex_qas: Vec<QaPair>,
    pub paraphrase: Vec<String>,
    pub coverage_ok: bool,
    pub regen_rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_docs: usize,
    pub facts_per_doc: usize,
    /// Probability that a fact after the first extends the current chain
    /// instead of attaching to the subject.
    pub chain_prob: f64,
    /// Probability that elicitation misses a simple QA.
    pub miss_rate: f64,
    /// Probability that a fact uses the unaskable relation.
    pub unaskable_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_docs: 100,
            facts_per_doc: 2,
            chain_prob: 0.5,
            miss_rate: 0.0,
            unaskable_rate: 0.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_docs == 0 {
            return Err(Error::Config("corpus needs at least one document".into()));
        }
        if self.facts_per_doc == 0 {
            return Err(Error::Config("documents need at least one fact".into()));
        }
        if self.facts_per_doc > RELATIONS.len() {
            return Err(Error::Config(format!(
                "{} facts per document exhausts the {} relation templates",
                self.facts_per_doc,
                RELATIONS.len()
            )));
        }
        for (name, p) in [
            ("chain_prob", self.chain_prob),
            ("miss_rate", self.miss_rate),
            ("unaskable_rate", self.unaskable_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    /// Every symbol a corpus built from this spec can contain.
    pub fn symbols(&self) -> Vec<String> {
        let mut out: Vec<String> = [OF, QUESTION_MARK, PERIOD].iter().map(|s| s.to_string()).collect();
        for r in RELATIONS.iter().chain(std::iter::once(&UNASKABLE)) {
            out.push(r.name.to_string());
            out.push(r.synonym.to_string());
        }
        for d in 0..self.n_docs {
            out.push(subject_symbol(d));
            out.push(alias_symbol(d));
        }
        for d in 0..self.n_docs {
            for s in 0..self.facts_per_doc {
                out.push(object_symbol(d, s, self.facts_per_doc));
            }
        }
        out
    }
}

fn doc_rng(seed: u64, doc_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(doc_index as u64);
    rng
}

fn sentence(f: &Fact, rel: &str) -> [String; 4] {
    [f.subject.clone(), rel.to_string(), f.object.clone(), PERIOD.to_string()]
}

/// Question for a relation path applied to `subject`, innermost relation last:
/// `[r_n, of, …, r_1, of, subject, ?]`.
pub fn question(relations: &[&str], subject: &str) -> Vec<String> {
    let mut q = Vec::new();
    for r in relations.iter().rev() {
        q.push(r.to_string());
        q.push(OF.to_string());
    }
    q.push(subject.to_string());
    q.push(QUESTION_MARK.to_string());
    q
}

/// Parses a question back into `(relations innermost first, subject)`.
pub fn parse_question(q: &[String]) -> Option<(Vec<String>, String)> {
    if q.len() < 4 || q.len() % 2 != 0 || q.last()? != QUESTION_MARK {
        return None;
    }
    let subject = q[q.len() - 2].clone();
    let mut rels = Vec::new();
    for pair in q[..q.len() - 2].chunks(2) {
        if pair[1] != OF {
            return None;
        }
        rels.push(pair[0].clone());
    }
    rels.reverse();
    Some((rels, subject))
}

/// Answers a question by chaining lookups through `facts`.
pub fn answer_with_facts(q: &[String], facts: &[Fact]) -> Option<String> {
    let (rels, mut entity) = parse_question(q)?;
    for r in rels {
        entity = facts
            .iter()
            .find(|f| f.subject == entity && f.relation == r)?
            .object
            .clone();
    }
    Some(entity)
}

/// Extracts facts from a token sequence of `subject relation object .` sentences,
/// mapping relation synonyms back to canonical names.
pub fn extract_facts(tokens: &[String]) -> Option<BTreeSet<Fact>> {
    if tokens.len() % 4 != 0 {
        return None;
    }
    tokens
        .chunks(4)
        .map(|s| {
            if s[3] != PERIOD {
                return None;
            }
            let rel = relation(&s[1])?;
            Some(Fact {
                subject: s[0].clone(),
                relation: rel.name.to_string(),
                object: s[2].clone(),
            })
        })
        .collect()
}

fn simple_qa(f: &Fact) -> Option<QaPair> {
    relation(&f.relation).filter(|r| r.askable)?;
    Some(QaPair {
        question: question(&[&f.relation], &f.subject),
        answer: vec![f.object.clone()],
        hops: 1,
    })
}

/// Questions for every relation chain of 2..=MAX_HOPS facts starting at the subject.
fn complex_qas(subject: &str, facts: &[Fact]) -> Vec<QaPair> {
    let mut out = Vec::new();
    let mut stack: Vec<(String, Vec<&str>)> = vec![(subject.to_string(), Vec::new())];
    while let Some((entity, path)) = stack.pop() {
        for f in facts.iter().filter(|f| f.subject == entity) {
            if !relation(&f.relation).is_some_and(|r| r.askable) {
                continue;
            }
            let mut next = path.clone();
            next.push(&f.relation);
            if next.len() >= 2 {
                out.push(QaPair {
                    question: question(&next, subject),
                    answer: vec![f.object.clone()],
                    hops: next.len(),
                });
            }
            if next.len() < MAX_HOPS {
                stack.push((f.object.clone(), next));
            }
        }
    }
    out.sort_by(|a, b| a.hops.cmp(&b.hops).then(a.question.cmp(&b.question)));
    out
}

pub fn generate_document(spec: &CorpusSpec, doc_index: usize) -> Result<SyntheticDocument> {
    spec.validate()?;
    if doc_index >= spec.n_docs {
        return Err(Error::Config(format!(
            "document index {doc_index} outside corpus of {}",
            spec.n_docs
        )));
    }
    let mut rng = doc_rng(spec.seed, doc_index);
    let subject = subject_symbol(doc_index);

    let mut relations: Vec<&RelationTemplate> = RELATIONS.iter().collect();
    relations.shuffle(&mut rng);

    let mut facts = Vec::with_capacity(spec.facts_per_doc);
    let mut chain_head = subject.clone();
    for slot in 0..spec.facts_per_doc {
        let object = object_symbol(doc_index, slot, spec.facts_per_doc);
        let head = if slot > 0 && rng.random_bool(spec.chain_prob) {
            chain_head.clone()
        } else {
            subject.clone()
        };
        let rel = if rng.random_bool(spec.unaskable_rate) {
            UNASKABLE.name
        } else {
            relations[slot].name
        };
        facts.push(Fact {
            subject: head,
            relation: rel.to_string(),
            object: object.clone(),
        });
        chain_head = object;
    }

    let surface: Vec<String> = facts.iter().flat_map(|f| sentence(f, &f.relation)).collect();
    let paraphrase: Vec<String> = facts
        .iter()
        .rev()
        .flat_map(|f| sentence(f, relation(&f.relation).expect("known relation").synonym))
        .collect();

    let simple_qas = facts
        .iter()
        .filter_map(simple_qa)
        .filter(|_| !rng.random_bool(spec.miss_rate))
        .collect();
    let complex_qas = complex_qas(&subject, &facts);

    let mut doc = SyntheticDocument {
        doc_id: format!("doc{doc_index:05}"),
        subject,
        alias: alias_symbol(doc_index),
        facts,
        surface,
        simple_qas,
        complex_qas,
        paraphrase,
        coverage_ok: false,
        regen_rounds: 0,
    };
    doc.coverage_ok = verify_coverage(&doc).0;
    Ok(doc)
}

/// A document is covered when every fact's object is the answer of some QA.
pub fn verify_coverage(doc: &SyntheticDocument) -> (bool, Vec<Fact>) {
    let answers: BTreeSet<&String> = doc
        .simple_qas
        .iter()
        .chain(&doc.complex_qas)
        .flat_map(|qa| qa.answer.iter())
        .collect();
    let missing: Vec<Fact> = doc
        .facts
        .iter()
        .filter(|f| !answers.contains(&f.object))
        .cloned()
        .collect();
    (missing.is_empty(), missing)
}

/// Adds QAs for uncovered facts, one round at a time, until coverage holds
/// or `max_rounds` is spent. Documents still failing stay `coverage_ok = false`.
pub fn regenerate(mut doc: SyntheticDocument, max_rounds: usize) -> SyntheticDocument {
    let max_rounds = max_rounds.max(1);
    let (mut ok, mut missing) = verify_coverage(&doc);
    let mut rounds = 0;
    while !ok && rounds < max_rounds {
        rounds += 1;
        for f in &missing {
            if let Some(qa) = simple_qa(f) {
                doc.simple_qas.push(qa);
            }
        }
        (ok, missing) = verify_coverage(&doc);
    }
    doc.coverage_ok = ok;
    doc.regen_rounds = rounds;
    doc
}

/// Default cap on regeneration rounds.
pub const MAX_REGEN_ROUNDS: usize = 10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub generated: usize,
    pub included: usize,
    pub excluded: usize,
    pub simple_qas: usize,
    pub complex_qas: usize,
    pub paraphrases: usize,
    pub regenerated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    /// Included documents only.
    pub documents: Vec<SyntheticDocument>,
    pub stats: CorpusStats,
}

impl Corpus {
    pub fn get(&self, doc_id: &str) -> Option<&SyntheticDocument> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    pub fn recount(documents: &[SyntheticDocument], generated: usize) -> CorpusStats {
        CorpusStats {
            generated,
            included: documents.len(),
            excluded: generated - documents.len(),
            simple_qas: documents.iter().map(|d| d.simple_qas.len()).sum(),
            complex_qas: documents.iter().map(|d| d.complex_qas.len()).sum(),
            paraphrases: documents.len(),
            regenerated: documents.iter().filter(|d| d.regen_rounds > 0).count(),
        }
    }
}

/// Generate → verify → regenerate → exclude.
pub fn synthesize_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut documents = Vec::with_capacity(spec.n_docs);
    for i in 0..spec.n_docs {
        let doc = regenerate(generate_document(spec, i)?, MAX_REGEN_ROUNDS);
        if doc.coverage_ok {
            documents.push(doc);
        }
    }
    let stats = Corpus::recount(&documents, spec.n_docs);
    Ok(Corpus {
        spec: spec.clone(),
        documents,
        stats,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolMode {
    /// Gold document may be missing from the pool (see `gold_dropout`).
    Normal,
    /// Gold document always included.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    /// Question with the subject replaced by its alias.
    pub query: Vec<String>,
    pub answer: Vec<String>,
    pub gold: Vec<String>,
    pub candidates: Vec<String>,
    pub hops: usize,
}

impl TrainingExample {
    pub fn gold_in_pool(&self) -> bool {
        self.gold.iter().all(|g| self.candidates.contains(g))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub pool_size: usize,
    pub mode: PoolMode,
    /// In normal mode, probability that the gold document is left out.
    pub gold_dropout: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            pool_size: 20,
            mode: PoolMode::Oracle,
            gold_dropout: 0.0,
            seed: 0,
        }
    }
}

/// One retrieval example per QA that mentions the document's subject.
/// Distractors are drawn (seeded) from other documents.
pub fn build_tasks(corpus: &[SyntheticDocument], config: &TaskConfig) -> Result<Vec<TrainingExample>> {
    if corpus.is_empty() {
        return Err(Error::Empty("build_tasks"));
    }
    if config.pool_size == 0 || corpus.len() < config.pool_size {
        return Err(Error::Config(format!(
            "corpus of {} documents cannot fill pools of {}",
            corpus.len(),
            config.pool_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    for (i, doc) in corpus.iter().enumerate() {
        for qa in doc.simple_qas.iter().chain(&doc.complex_qas) {
            let Some((_, subject)) = parse_question(&qa.question) else {
                continue;
            };
            if subject != doc.subject {
                continue;
            }
            let query: Vec<String> = qa
                .question
                .iter()
                .map(|t| if *t == doc.subject { doc.alias.clone() } else { t.clone() })
                .collect();
            let drop_gold = config.mode == PoolMode::Normal && rng.random_bool(config.gold_dropout);
            let others: Vec<usize> = (0..corpus.len()).filter(|&j| j != i).collect();
            let n_distractors = if drop_gold { config.pool_size } else { config.pool_size - 1 };
            let mut pool: Vec<usize> = others
                .choose_multiple(&mut rng, n_distractors.min(others.len()))
                .copied()
                .collect();
            if !drop_gold {
                pool.push(i);
            }
            pool.shuffle(&mut rng);
            out.push(TrainingExample {
                query,
                answer: qa.answer.clone(),
                gold: vec![doc.doc_id.clone()],
                candidates: pool.iter().map(|&j| corpus[j].doc_id.clone()).collect(),
                hops: qa.hops,
            });
        }
    }
    Ok(out)
}
