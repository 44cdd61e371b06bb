//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero when any criterion fails.

use std::time::{Duration, Instant};

use clara_core::datagen::{extract_facts, synthesize_corpus, verify_coverage, CorpusSpec, MAX_REGEN_ROUNDS};
use clara_core::oracle::suite::{autodiff_checks, coupling_checks, topk_checks, CheckRow};
use clara_core::persist::{self, Checkpoint};
use clara_core::trainer::{
    alignment_distance, contrastive_pretrain, evaluate_retrieval, Experiment, RunConfig,
};
use clara_core::Error;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn rows_outcome(rows: &[CheckRow], budget: Option<(Duration, Duration)>) -> Outcome {
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} worst {:.2e} > {:.0e}", r.name, r.worst, r.tolerance))
        .collect();
    let cases = rows.iter().map(|r| r.cases).min().unwrap_or(0);
    let mut ok = failed.is_empty();
    let mut detail = format!("{} checks, ≥{cases} cases each", rows.len());
    if let Some((took, limit)) = budget {
        ok &= took < limit;
        detail += &format!(", {:.1}s (limit {}s)", took.as_secs_f64(), limit.as_secs());
    }
    if !failed.is_empty() {
        detail += &format!("; failing: {}", failed.join("; "));
    }
    outcome(ok, detail)
}

fn gradient_coupling() -> Outcome {
    let t = Instant::now();
    let rows = coupling_checks(1, 100);
    rows_outcome(&rows, Some((t.elapsed(), Duration::from_secs(10))))
}

fn straight_through_topk() -> Outcome {
    rows_outcome(&topk_checks(2, 1000), None)
}

fn autodiff() -> Outcome {
    rows_outcome(&autodiff_checks(3, 20), None)
}

fn separable_experiment() -> Experiment {
    let corpus = synthesize_corpus(&CorpusSpec {
        n_docs: 100,
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    let config = RunConfig {
        seed: 7,
        pool_size: 20,
        k: 5,
        rho: 64,
        hidden: 32,
        steps: 500,
        ..Default::default()
    };
    Experiment::new(corpus, config).unwrap()
}

/// Joint training, the frozen ablation, the contrastive baseline and the
/// alignment comparison share one pretrained model.
fn training_criteria() -> Vec<(&'static str, Outcome)> {
    let exp = separable_experiment();
    let start = Instant::now();
    let mut base = exp.init_params().unwrap();
    let l = exp.config.memory_tokens();
    let initial_distance = alignment_distance(&base, &exp.docs, l).unwrap();
    exp.pretrain(&mut base, |_| {}).unwrap();
    let pretrain_time = start.elapsed();
    let aligned_distance = alignment_distance(&base, &exp.docs, l).unwrap();
    let index = exp.build_index(&base).unwrap();
    let initial = evaluate_retrieval(&exp.examples, &index, &base).unwrap();

    let t = Instant::now();
    let mut joint = base.clone();
    exp.train_joint(&mut joint, &index, true, |_, _| {}).unwrap();
    let joint_time = pretrain_time + t.elapsed();
    let trained = evaluate_retrieval(&exp.examples, &index, &joint).unwrap();

    let mut frozen = base.clone();
    exp.train_joint(&mut frozen, &index, false, |_, _| {}).unwrap();
    let ablation = evaluate_retrieval(&exp.examples, &index, &frozen).unwrap();

    let c4 = outcome(
        initial[0] <= 0.1 && trained[0] >= 0.9 && ablation[0] <= 0.3 && joint_time < Duration::from_secs(300),
        format!(
            "recall@1 {:.3} -> {:.3} in {} steps, frozen ablation {:.3}, {:.0}s",
            initial[0],
            trained[0],
            exp.config.steps,
            ablation[0],
            joint_time.as_secs_f64()
        ),
    );

    let mut supervised = base.clone();
    let pairs = exp.contrastive_pairs().unwrap();
    contrastive_pretrain(&pairs, &index, &mut supervised.query_reasoner, &exp.model_config(), &exp.config).unwrap();
    let sup = evaluate_retrieval(&exp.examples, &index, &supervised).unwrap();
    let c5 = outcome(
        (sup[2] - trained[2]).abs() <= 0.1,
        format!("recall@5 contrastive {:.3} vs joint {:.3}", sup[2], trained[2]),
    );

    let unaligned = Experiment::new(exp.corpus.clone(), RunConfig { lambda: 0.0, ..exp.config.clone() }).unwrap();
    let mut plain = unaligned.init_params().unwrap();
    unaligned.pretrain(&mut plain, |_| {}).unwrap();
    let plain_distance = alignment_distance(&plain, &unaligned.docs, l).unwrap();
    let c6 = outcome(
        aligned_distance < initial_distance && aligned_distance < plain_distance,
        format!(
            "distance λ=0.1 {initial_distance:.4} -> {aligned_distance:.4}, λ=0 final {plain_distance:.4}"
        ),
    );
    vec![
        ("4 joint training raises recall without labels", c4),
        ("5 joint vs contrastive recall@5", c5),
        ("6 alignment term shrinks hidden-state distance", c6),
    ]
}

fn synthesis_pipeline() -> Outcome {
    let mut included = 0;
    let mut excluded = 0;
    let mut problems = Vec::new();
    for (seed, miss, unaskable) in [(0, 0.0, 0.0), (1, 0.3, 0.0), (2, 0.5, 0.2), (3, 0.2, 0.5)] {
        let spec = CorpusSpec {
            n_docs: 200,
            facts_per_doc: 4,
            miss_rate: miss,
            unaskable_rate: unaskable,
            seed,
            ..Default::default()
        };
        let corpus = synthesize_corpus(&spec).unwrap();
        included += corpus.documents.len();
        excluded += corpus.stats.excluded;
        for d in &corpus.documents {
            let (ok, missing) = verify_coverage(d);
            if !ok || !d.coverage_ok || d.regen_rounds > MAX_REGEN_ROUNDS {
                problems.push(format!("{} uncovered {missing:?}", d.doc_id));
            }
            let facts: std::collections::BTreeSet<_> = d.facts.iter().cloned().collect();
            if extract_facts(&d.paraphrase).as_ref() != Some(&facts) {
                problems.push(format!("{} paraphrase loses facts", d.doc_id));
            }
        }
    }
    outcome(
        problems.is_empty() && included > 0,
        format!(
            "{included} included docs covered and paraphrase-exact, {excluded} excluded{}",
            problems.first().map(|p| format!("; {p}")).unwrap_or_default()
        ),
    )
}

fn positioned<T>(r: Result<T, Error>, cut: usize) -> bool {
    matches!(r, Err(Error::Format { offset, .. }) if offset <= cut)
}

fn persistence() -> Outcome {
    let corpus = synthesize_corpus(&CorpusSpec {
        n_docs: 10,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let config = RunConfig {
        hidden: 8,
        pool_size: 5,
        seed: 5,
        ..Default::default()
    };
    let exp = Experiment::new(corpus, config).unwrap();
    let params = exp.init_params().unwrap();
    let index = exp.build_index(&params).unwrap();
    let bytes = persist::encode_index(&index).unwrap();
    let back = persist::decode_index(&bytes).unwrap();
    let index_ok = back.len() == index.len()
        && index.entries().iter().zip(back.entries()).all(|(a, b)| {
            a.doc_id == b.doc_id
                && a.flattened()
                    .iter()
                    .zip(b.flattened())
                    .all(|(x, y)| (x - y).abs() <= f64::from(f32::EPSILON) * x.abs())
        });
    let ck = Checkpoint {
        config: exp.config.clone(),
        seed: 5,
        params,
    };
    let ck_bytes = persist::encode_checkpoint(&ck).unwrap();
    let ck_ok = persist::decode_checkpoint(&ck_bytes).map(|c| c == ck).unwrap_or(false)
        && persist::encode_checkpoint(&persist::decode_checkpoint(&ck_bytes).unwrap()).unwrap() == ck_bytes;

    let truncation_ok = (0..bytes.len()).all(|c| positioned(persist::decode_index(&bytes[..c]), c))
        && (0..ck_bytes.len()).step_by(31).all(|c| positioned(persist::decode_checkpoint(&ck_bytes[..c]), c));
    let mut trailing = bytes.clone();
    trailing.push(0);
    let mut magic = bytes.clone();
    magic[1] = b'?';
    let diagnostics_ok = matches!(persist::decode_index(&trailing), Err(Error::Format { offset, .. }) if offset == bytes.len())
        && matches!(persist::decode_index(&magic), Err(Error::Format { offset: 0, ref detail, .. }) if detail.contains("magic"));
    outcome(
        index_ok && ck_ok && truncation_ok && diagnostics_ok,
        format!(
            "index roundtrip {index_ok}, checkpoint bit-exact {ck_ok}, truncation positions {truncation_ok}, diagnostics {diagnostics_ok}"
        ),
    )
}

fn compression_sweep() -> Outcome {
    let ratios = [4usize, 16, 32, 64];
    let seeds = 3u64;
    let mut acc = [0.0; 4];
    for seed in 0..seeds {
        let corpus = synthesize_corpus(&CorpusSpec {
            n_docs: 20,
            seed,
            ..Default::default()
        })
        .unwrap();
        for (slot, &rho) in ratios.iter().enumerate() {
            let config = RunConfig {
                seed,
                rho,
                hidden: 16,
                pool_size: 10,
                batch_size: 16,
                pretrain_steps: 800,
                pretrain_distractors: 1,
                steps: 150,
                ..Default::default()
            };
            let run = || -> clara_core::Result<f64> {
                let exp = Experiment::new(corpus.clone(), config)?;
                let mut p = exp.init_params()?;
                exp.pretrain(&mut p, |_| {})?;
                let index = exp.build_index(&p)?;
                exp.train_joint(&mut p, &index, true, |_, _| {})?;
                Ok(exp.evaluate(&p, &index)?.em)
            };
            match run() {
                Ok(em) => acc[slot] += em / seeds as f64,
                Err(e) => return outcome(false, format!("rho {rho} seed {seed}: {e}")),
            }
        }
    }
    let monotone = acc.windows(2).all(|w| w[1] <= w[0]);
    let cells: Vec<String> = ratios.iter().zip(&acc).map(|(r, a)| format!("ρ={r}: {a:.3}")).collect();
    outcome(monotone, format!("mean answer EM {}", cells.join(", ")))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} criterion {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("1 gradient coupling oracle", gradient_coupling());
    report("2 straight-through top-k", straight_through_topk());
    report("3 autodiff soundness", autodiff());
    for (name, o) in training_criteria() {
        report(name, o);
    }
    report("7 synthesis pipeline coverage", synthesis_pipeline());
    report("8 persistence", persistence());
    report("9 compression-ratio sweep", compression_sweep());
    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
