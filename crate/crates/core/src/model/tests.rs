use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::{central_difference, compare, FD_STEP};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        hidden: 4,
        layers: 1,
        memory_tokens: 2,
        max_positions: 16,
        ff_mult: 2,
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        hidden: 16,
        layers: 2,
        memory_tokens: 4,
        max_positions: 32,
        ff_mult: 2,
    }
}

fn params(config: ModelConfig, seed: u64) -> ModelParams {
    ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn query_reasoner_starts_as_compressor_copy() {
    let p = params(small_config(), 1);
    assert_eq!(p.query_reasoner, p.compressor);
    assert_ne!(p.generator, p.compressor);
    p.check().unwrap();
}

#[test]
fn compress_is_deterministic() {
    let p = params(small_config(), 2);
    let a = compress("d", &[4, 5, 6], &p.compressor, &p.config, 4).unwrap();
    let b = compress("d", &[4, 5, 6], &p.compressor, &p.config, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.vectors.shape(), &[4, 16]);
    assert_eq!(a.flattened().len(), 64);
}

#[test]
fn compress_single_memory_token() {
    let p = params(small_config(), 3);
    let m = compress("d", &[7, 8], &p.compressor, &p.config, 1).unwrap();
    assert_eq!(m.vectors.shape(), &[1, 16]);
}

#[test]
fn compress_is_order_sensitive() {
    let p = params(small_config(), 4);
    let a = compress("d", &[4, 5, 6], &p.compressor, &p.config, 2).unwrap();
    let b = compress("d", &[5, 4, 6], &p.compressor, &p.config, 2).unwrap();
    assert!(a.vectors.max_abs_diff(&b.vectors) > 1e-6);
}

#[test]
fn compress_rejects_bad_input() {
    let p = params(small_config(), 5);
    assert!(matches!(compress("d", &[], &p.compressor, &p.config, 2), Err(Error::Empty(_))));
    assert!(compress("d", &[1], &p.compressor, &p.config, 0).is_err());
    assert!(compress("d", &[1], &p.compressor, &p.config, 5).is_err());
    assert!(matches!(
        compress("d", &[99], &p.compressor, &p.config, 1),
        Err(Error::Index { .. })
    ));
    let long = vec![1; MAX_DOC_TOKENS + 1];
    assert!(compress("d", &long, &p.compressor, &p.config, 1).is_err());
}

#[test]
fn decode_loss_reduces_to_cross_entropy() {
    let p = params(small_config(), 6);
    let tape = Tape::new();
    let g = p.generator.bind(&tape, true);
    let logits = decoder_logits(&g, &p.config, None, &[3, 4], &[9], 2).unwrap();
    let direct = tape.constant(logits.value().as_ref().clone()).cross_entropy(&[9]).unwrap();
    let loss = decode_loss_on_tape(&g, &p.config, None, &[3, 4], &[9], 2).unwrap();
    assert_eq!(loss.value().item(), direct.value().item());
}

#[test]
fn decode_loss_errors() {
    let p = params(small_config(), 7);
    let tape = Tape::new();
    let g = p.generator.bind(&tape, true);
    assert!(matches!(
        decode_loss_on_tape(&g, &p.config, None, &[3], &[], 2),
        Err(Error::Empty(_))
    ));
    assert!(matches!(
        decode_loss_on_tape(&g, &p.config, None, &[3], &[50], 2),
        Err(Error::Index { .. })
    ));
}

fn pretrain_objective(p: &ModelParams, lambda: f64, tape: &Tape) -> (f64, Vec<Tensor>, Vec<Tensor>) {
    let c = p.compressor.bind(tape, true);
    let g = p.generator.bind(tape, true);
    let comp = compress_on_tape(&c, &p.config, &[5, 6, 7, 4], 2).unwrap();
    let ce = decode_loss_on_tape(&g, &p.config, Some(comp.memory), &[3], &[6, 7], 2).unwrap();
    let mse = alignment_loss(comp.doc_hidden, comp.memory).unwrap();
    let loss = total_pretrain_loss(ce, mse, lambda).unwrap();
    let grads = tape.backward(loss);
    (loss.value().item(), c.gradients(&grads), g.gradients(&grads))
}

#[test]
fn pretrain_gradients_match_finite_differences() {
    let p = params(tiny_config(), 8);
    let tape = Tape::new();
    let (_, gc, gg) = pretrain_objective(&p, 0.1, &tape);
    for (group, analytic) in [(0, gc), (1, gg)] {
        for (i, a) in analytic.iter().enumerate() {
            let base = if group == 0 { &p.compressor } else { &p.generator };
            let point = base.tensors()[i].data().to_vec();
            let fd = central_difference(
                |x| {
                    let mut q = p.clone();
                    let set = if group == 0 { &mut q.compressor } else { &mut q.generator };
                    set.tensors_mut()[i].data_mut().copy_from_slice(x);
                    pretrain_objective(&q, 0.1, &Tape::new()).0
                },
                &point,
                FD_STEP,
            );
            let cmp = compare(a.data(), &fd);
            assert!(cmp.passes(1e-5), "{} {:?}", base.names()[i], cmp);
        }
    }
}

#[test]
fn alignment_loss_cases() {
    let tape = Tape::new();
    let doc = tape.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 0.0]).unwrap());
    let mem = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    assert_eq!(alignment_loss(doc, mem).unwrap().value().item(), 1.0);
    assert_eq!(alignment_loss(mem, doc).unwrap().value().item(), 1.0);
    let same = tape.constant(Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 1.0]).unwrap());
    let mean = tape.constant(Tensor::matrix(1, 2, vec![2.0, 2.0]).unwrap());
    assert_eq!(alignment_loss(same, mean).unwrap().value().item(), 0.0);
}

#[test]
fn total_loss_arithmetic() {
    let tape = Tape::new();
    let ce = tape.leaf(Tensor::scalar(1.0));
    let mse = tape.leaf(Tensor::scalar(2.0));
    assert!((total_pretrain_loss(ce, mse, 0.1).unwrap().value().item() - 1.2).abs() < 1e-15);
    let zero = total_pretrain_loss(ce, mse, 0.0).unwrap();
    assert_eq!(zero.value().item(), 1.0);
    assert!(total_pretrain_loss(ce, mse, -1.0).is_err());
}

#[test]
fn total_loss_gradient_is_linear() {
    let p = params(tiny_config(), 9);
    let grad = |lambda: f64, part: u8| {
        let tape = Tape::new();
        let c = p.compressor.bind(&tape, true);
        let g = p.generator.bind(&tape, true);
        let comp = compress_on_tape(&c, &p.config, &[5, 6, 7], 2).unwrap();
        let ce = decode_loss_on_tape(&g, &p.config, Some(comp.memory), &[3], &[6], 2).unwrap();
        let mse = alignment_loss(comp.doc_hidden, comp.memory).unwrap();
        let out = match part {
            0 => ce,
            1 => mse,
            _ => total_pretrain_loss(ce, mse, lambda).unwrap(),
        };
        c.gradients(&tape.backward(out))
    };
    let (gce, gmse, gtot) = (grad(0.0, 0), grad(0.0, 1), grad(0.3, 2));
    for ((a, b), t) in gce.iter().zip(&gmse).zip(&gtot) {
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(t.data()) {
            assert!((x + 0.3 * y - z).abs() < 1e-12);
        }
    }
}

#[test]
fn logit_lens_identity_head() {
    let m = MemoryEmbedding::new("q", Tensor::matrix(2, 3, vec![0.1, 0.9, 0.3, 2.0, -1.0, 0.0]).unwrap()).unwrap();
    let lens = logit_lens(&m, &Tensor::identity(3), 1).unwrap();
    assert_eq!(lens, vec![vec![1], vec![0]]);
    let all = logit_lens(&m, &Tensor::identity(3), 3).unwrap();
    assert_eq!(all, vec![vec![1, 2, 0], vec![0, 2, 1]]);
    assert!(logit_lens(&m, &Tensor::identity(3), 4).is_err());
}

fn paraphrase_step(p: &mut ModelParams, docs: &[Vec<usize>], lambda: f64, opt: &mut [Adam; 2]) -> f64 {
    let tape = Tape::new();
    let c = p.compressor.bind(&tape, true);
    let g = p.generator.bind(&tape, true);
    let mut total = None;
    for d in docs {
        let comp = compress_on_tape(&c, &p.config, d, 2).unwrap();
        let ce = decode_loss_on_tape(&g, &p.config, Some(comp.memory), &[3], d, 2).unwrap();
        let mse = alignment_loss(comp.doc_hidden, comp.memory).unwrap();
        let l = total_pretrain_loss(ce, mse, lambda).unwrap();
        total = Some(match total {
            None => l,
            Some(t) => l.add(t).unwrap(),
        });
    }
    let loss = total.unwrap().scale(1.0 / docs.len() as f64);
    let grads = tape.backward(loss);
    let (gc, gg) = (c.gradients(&grads), g.gradients(&grads));
    let value = loss.value().item();
    drop(c);
    drop(g);
    opt[0].step(&mut p.compressor, &gc).unwrap();
    opt[1].step(&mut p.generator, &gg).unwrap();
    value
}

fn paraphrase_docs() -> Vec<Vec<usize>> {
    (0..10).map(|i| vec![4 + i % 6, 10 + i, 4 + (i * 3) % 7]).collect()
}

#[test]
fn paraphrase_loss_decreases() {
    let mut p = params(small_config(), 10);
    let docs = paraphrase_docs();
    let mut opt = [Adam::new(3e-3), Adam::new(3e-3)];
    let first = paraphrase_step(&mut p, &docs, DEFAULT_LAMBDA, &mut opt);
    let mut last = first;
    for _ in 0..199 {
        last = paraphrase_step(&mut p, &docs, DEFAULT_LAMBDA, &mut opt);
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn alignment_weight_changes_compressor_trajectory() {
    let docs = paraphrase_docs();
    let run = |lambda| {
        let mut p = params(small_config(), 11);
        let mut opt = [Adam::new(3e-3), Adam::new(3e-3)];
        for _ in 0..5 {
            paraphrase_step(&mut p, &docs, lambda, &mut opt);
        }
        p.compressor
    };
    assert_ne!(run(0.0), run(0.1));
}

#[test]
fn sgd_and_adam_descend() {
    let mut set = ParamSet::from_parts(vec!["w".into()], vec![Tensor::vector(vec![1.0, -2.0])]).unwrap();
    let grad = vec![Tensor::vector(vec![0.5, -0.5])];
    Sgd { lr: 0.1 }.step(&mut set, &grad).unwrap();
    assert_eq!(set.tensors()[0].data(), &[0.95, -1.95]);
    let mut adam = Adam::new(0.01);
    adam.step(&mut set, &grad).unwrap();
    assert!((set.tensors()[0].data()[0] - 0.94).abs() < 1e-6);
    assert!(Sgd { lr: 0.1 }.step(&mut set, &[]).is_err());
}

#[test]
fn greedy_generation_shape() {
    let p = params(small_config(), 12);
    let mem = compress("d", &[4, 5], &p.compressor, &p.config, 2).unwrap();
    let out = generate(&p.generator, &p.config, Some(&mem.vectors), &[3], 2, 3).unwrap();
    assert_eq!(out.len(), 3);
    assert!(out.iter().all(|&t| t < 20));
}
