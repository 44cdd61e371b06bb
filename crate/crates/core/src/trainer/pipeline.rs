use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datagen::{build_tasks, Corpus, TaskConfig};
use crate::metrics::{EvalReport, Scored};

/// A corpus resolved against its vocabulary, with the pretraining tasks and
/// retrieval examples derived from it.
pub struct Experiment {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub config: RunConfig,
    /// Token ids of each document's surface text, in corpus order.
    pub docs: Vec<Vec<usize>>,
    pub tasks: Vec<PretrainTask>,
    pub examples: Vec<EncodedExample>,
}

impl Experiment {
    pub fn new(corpus: Corpus, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::for_corpus(&corpus.spec)?;
        let docs = corpus
            .documents
            .iter()
            .map(|d| vocab.encode(&d.surface))
            .collect::<Result<Vec<_>>>()?;
        let tasks = pretrain_tasks(&corpus.documents, &vocab)?;
        let raw = build_tasks(
            &corpus.documents,
            &TaskConfig {
                pool_size: config.pool_size,
                mode: config.mode,
                gold_dropout: 0.0,
                seed: config.seed,
            },
        )?;
        let examples = encode_examples(&raw, &vocab)?;
        Ok(Self {
            corpus,
            vocab,
            config,
            docs,
            tasks,
            examples,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        self.config.model(self.vocab.len())
    }

    pub fn init_params(&self) -> Result<ModelParams> {
        ModelParams::init(self.model_config(), &mut ChaCha8Rng::seed_from_u64(self.config.seed))
    }

    /// Runs `pretrain_steps` of compressor pretraining, then resets the
    /// query reasoner to a copy of the trained compressor.
    pub fn pretrain(&self, params: &mut ModelParams, mut on_step: impl FnMut(&PretrainStep)) -> Result<()> {
        let mut trainer = Pretrainer::new(&self.config)?;
        for step in 0..self.config.pretrain_steps {
            let mut r = trainer.step(params, &self.docs, &self.tasks)?;
            r.step = step;
            on_step(&r);
        }
        params.query_reasoner = params.compressor.clone();
        Ok(())
    }

    pub fn build_index(&self, params: &ModelParams) -> Result<CompressedIndex> {
        CompressedIndex::build(
            self.corpus
                .documents
                .iter()
                .zip(&self.docs)
                .map(|(d, t)| (d.doc_id.as_str(), t.as_slice())),
            &params.compressor,
            &params.config,
            self.config.memory_tokens(),
        )
    }

    /// Runs `steps` joint updates. With `train_query_reasoner` false only
    /// the generator moves.
    pub fn train_joint(
        &self,
        params: &mut ModelParams,
        index: &CompressedIndex,
        train_query_reasoner: bool,
        mut on_step: impl FnMut(usize, &JointStep),
    ) -> Result<()> {
        let mut trainer = JointTrainer::new(&self.config)?;
        trainer.train_query_reasoner = train_query_reasoner;
        for step in 0..self.config.steps {
            let r = trainer.step(&self.examples, index, params)?;
            on_step(step, &r);
        }
        Ok(())
    }

    pub fn contrastive_pairs(&self) -> Result<Vec<ContrastivePair>> {
        self.examples.iter().map(ContrastivePair::from_example).collect()
    }

    /// Rankings and greedy answers from the top-k documents for every example.
    pub fn evaluate(&self, params: &ModelParams, index: &CompressedIndex) -> Result<EvalReport> {
        let answers = answer_examples(&self.examples, index, params, self.config.k)?;
        let mut rows = Vec::with_capacity(self.examples.len());
        for (ex, pred) in self.examples.iter().zip(&answers) {
            let q = encode_query(&ex.query, &params.query_reasoner, &params.config, index.l())?;
            rows.push((
                rank_documents(&q, index, &ex.candidates)?,
                self.vocab.decode(pred),
                self.vocab.decode(&ex.answer),
            ));
        }
        EvalReport::from_examples(self.examples.iter().zip(&rows).map(|(ex, (ranked, pred, answer))| Scored {
            ranked,
            gold: &ex.gold,
            prediction: pred,
            answer,
        }))
    }
}
