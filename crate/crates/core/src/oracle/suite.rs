//! Seeded comparison suite: closed-form gradients, tape gradients and
//! central finite differences, plus straight-through top-k checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::{central_difference, central_jacobian, compare, FD_STEP};
use crate::autodiff::{Tape, Var};
use crate::topk::{aggregate, exact_topk_oracle, st_topk, ScoreMatrix, DEFAULT_EPSILON};

/// Tolerance for closed-form gradients against finite differences.
pub const ORACLE_TOL: f64 = 1e-6;
/// Tolerance for tape gradients against finite differences.
pub const AUTODIFF_TOL: f64 = 1e-5;
/// Tolerance for identities that hold up to rounding.
pub const EXACT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub cases: usize,
    /// Worst error observed across cases.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    pub coupling_instances: usize,
    pub topk_cases: usize,
    pub op_cases: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            coupling_instances: 100,
            topk_cases: 1000,
            op_cases: 20,
        }
    }
}

pub fn run(config: &SuiteConfig) -> Vec<CheckRow> {
    let mut rows = coupling_checks(config.seed, config.coupling_instances);
    rows.extend(topk_checks(config.seed.wrapping_add(1), config.topk_cases));
    rows.extend(autodiff_checks(config.seed.wrapping_add(2), config.op_cases));
    rows
}

pub fn render_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>12}  {:>9}  result\n",
        "check", "cases", "worst", "tolerance"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>12.3e}  {:>9.0e}  {}\n",
            r.name,
            r.cases,
            r.worst,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}

struct Tracker {
    name: &'static str,
    cases: usize,
    worst: f64,
    tolerance: f64,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            cases: 0,
            worst: 0.0,
            tolerance,
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        // NaN must surface as a failure.
        self.worst = if err.is_nan() { f64::INFINITY } else { self.worst.max(err) };
    }

    fn row(self) -> CheckRow {
        CheckRow {
            name: self.name.to_string(),
            cases: self.cases,
            worst: self.worst,
            tolerance: self.tolerance,
        }
    }
}

/// Random coupling instance with `D ≤ 8`, `d ≤ 6`.
pub fn random_instance(rng: &mut impl Rng) -> (CouplingInputs, QuadraticGenerator) {
    let n = rng.random_range(2..=8);
    let width = rng.random_range(1..=6);
    let scores = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let conditionals = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let tau = rng.random_range(0.5..2.0);
    let emb = Tensor::randn(&[n, width], 1.0, rng);
    let target = Tensor::randn(&[width], 1.0, rng).into_data();
    (
        CouplingInputs::new(scores, conditionals, tau, emb).expect("valid by construction"),
        QuadraticGenerator { target },
    )
}

fn tape_nonshared<'t>(tape: &'t Tape, s: Var<'t>, inputs: &CouplingInputs) -> Var<'t> {
    let p = s.softmax(inputs.temperature).expect("finite");
    let c = tape.constant(Tensor::vector(inputs.conditionals.clone()));
    p.mul(c).expect("shape").sum().ln().expect("positive").scale(-1.0)
}

fn tape_mixture<'t>(tape: &'t Tape, s: Var<'t>, inputs: &CouplingInputs) -> Var<'t> {
    let n = inputs.candidates();
    let pi = s.reshape(&[1, n]).unwrap().softmax(inputs.temperature).unwrap();
    pi.matmul(tape.constant(inputs.embeddings.clone())).unwrap()
}

pub fn coupling_checks(seed: u64, instances: usize) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = [
        Tracker::new("nonshared_gradient vs finite differences", ORACLE_TOL),
        Tracker::new("nonshared_gradient vs autodiff", ORACLE_TOL),
        Tracker::new("probability path sums to zero", EXACT_TOL),
        Tracker::new("mixture_jacobian vs finite differences", ORACLE_TOL),
        Tracker::new("mixture_jacobian vs autodiff", ORACLE_TOL),
        Tracker::new("shared_gradient vs finite differences", ORACLE_TOL),
        Tracker::new("shared_gradient vs autodiff", ORACLE_TOL),
        Tracker::new("shared_gradient(g=0) vs nonshared_gradient", EXACT_TOL),
    ];
    for _ in 0..instances {
        let (inputs, gen) = random_instance(&mut rng);
        let n = inputs.candidates();

        let closed = nonshared_gradient(&inputs).expect("p(y|x) > 0");
        let fd = central_difference(|s| nonshared_loss(&inputs.with_scores(s)), &inputs.scores, FD_STEP);
        t[0].record(compare(&closed, &fd).max_scaled_err);
        let tape = Tape::new();
        let s = tape.leaf(Tensor::vector(inputs.scores.clone()));
        let ad = tape.backward(tape_nonshared(&tape, s, &inputs)).wrt(s);
        t[1].record(compare(&closed, ad.data()).max_scaled_err);
        t[2].record(probability_path_terms(&inputs).iter().sum::<f64>().abs());

        let jac = mixture_jacobian(&inputs);
        let fd = central_jacobian(|s| mixture(&inputs.with_scores(s)), &inputs.scores, FD_STEP);
        t[3].record(compare(jac.data(), &fd.concat()).max_scaled_err);
        let tape = Tape::new();
        let s = tape.leaf(Tensor::vector(inputs.scores.clone()));
        let r = tape_mixture(&tape, s, &inputs);
        let width = inputs.width();
        let mut ad_jac = vec![0.0; n * width];
        for c in 0..width {
            let mut e = vec![0.0; width];
            e[c] = 1.0;
            let pick = r.reshape(&[width]).unwrap().mul(tape.constant(Tensor::vector(e))).unwrap().sum();
            let g = tape.backward(pick).wrt(s);
            for d in 0..n {
                ad_jac[d * width + c] = g.data()[d];
            }
        }
        t[4].record(compare(jac.data(), &ad_jac).max_scaled_err);

        let closed = shared_gradient(&inputs, &gen).expect("p(y|x) > 0");
        let fd = central_difference(|s| shared_loss(&inputs.with_scores(s), &gen), &inputs.scores, FD_STEP);
        t[5].record(compare(&closed, &fd).max_scaled_err);
        let tape = Tape::new();
        let s = tape.leaf(Tensor::vector(inputs.scores.clone()));
        let r = tape_mixture(&tape, s, &inputs).reshape(&[width]).unwrap();
        let target = tape.constant(Tensor::vector(gen.target.clone()));
        let loss = tape_nonshared(&tape, s, &inputs).add(r.mse(target).unwrap()).unwrap();
        let ad = tape.backward(loss).wrt(s);
        t[6].record(compare(&closed, ad.data()).max_scaled_err);

        let decoupled = shared_gradient(&inputs, &ConstantGenerator).expect("p(y|x) > 0");
        t[7].record(compare(&decoupled, &nonshared_gradient(&inputs).unwrap()).max_abs_err);
    }
    t.into_iter().map(Tracker::row).collect()
}

pub fn topk_checks(seed: u64, cases: usize) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matches = Tracker::new("st_topk indices vs exact top-k", 0.0);
    let mut forward = Tracker::new("st_topk forward Z == Z_hard (bit-exact)", 0.0);
    let mut st_grad = Tracker::new("st_topk dZ/ds == dZ_soft/ds (entrywise)", EXACT_TOL);
    for _ in 0..cases {
        let d = rng.random_range(1..=32);
        let k = rng.random_range(1..=8usize.min(d));
        let scores: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tau = rng.random_range(0.1..2.0);

        let tape = Tape::new();
        let s = tape.leaf(Tensor::matrix(1, d, scores.clone()).unwrap());
        let sel = st_topk(&ScoreMatrix::new(s).unwrap(), k, tau, DEFAULT_EPSILON).unwrap();
        matches.record(if sel.indices[0] == exact_topk_oracle(&scores, k) { 0.0 } else { 1.0 });
        let same = sel
            .combined
            .value()
            .data()
            .iter()
            .zip(sel.hard.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        forward.record(if same { 0.0 } else { 1.0 });

        let flat_z = sel.combined.reshape(&[k * d]).unwrap();
        let flat_soft = sel.soft.reshape(&[k * d]).unwrap();
        let mut worst: f64 = 0.0;
        for e in 0..k * d {
            let gz = tape.backward(flat_z.slice_rows(e, 1).unwrap()).wrt(s);
            let gs = tape.backward(flat_soft.slice_rows(e, 1).unwrap()).wrt(s);
            worst = worst.max(gz.max_abs_diff(&gs));
        }
        st_grad.record(worst);
    }
    vec![matches.row(), forward.row(), st_grad.row()]
}

/// Reverse-mode gradient of `build` against finite differences for every input.
fn op_error<F>(inputs: &[Tensor], build: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |values: &[Tensor], grads: bool| -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&tape, &vars);
        let value = out.value().item();
        if !grads {
            return (value, Vec::new());
        }
        let g = tape.backward(out);
        (value, vars.iter().map(|v| g.wrt(*v)).collect())
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let numeric = central_difference(
            |x| {
                let mut p = inputs.to_vec();
                p[i] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
                eval(&p, false).0
            },
            input.data(),
            FD_STEP,
        );
        worst = worst.max(compare(analytic[i].data(), &numeric).max_scaled_err);
    }
    worst
}

pub fn autodiff_checks(seed: u64, cases: usize) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = [
        Tracker::new("autodiff matmul", AUTODIFF_TOL),
        Tracker::new("autodiff softmax", AUTODIFF_TOL),
        Tracker::new("autodiff cross_entropy", AUTODIFF_TOL),
        Tracker::new("autodiff mse", AUTODIFF_TOL),
        Tracker::new("autodiff cosine", AUTODIFF_TOL),
        Tracker::new("autodiff layer_norm", AUTODIFF_TOL),
        Tracker::new("autodiff silu/gather/concat", AUTODIFF_TOL),
        Tracker::new("autodiff st_topk aggregate (soft path)", AUTODIFF_TOL),
    ];
    for _ in 0..cases {
        let (m, n, p) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let a = Tensor::randn(&[m, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, p], 1.0, &mut rng);
        let w = Tensor::randn(&[m, p], 1.0, &mut rng);
        t[0].record(op_error(&[a, b], |tape, v| {
            v[0].matmul(v[1]).unwrap().mul(tape.constant(w.clone())).unwrap().sum()
        }));

        let x = Tensor::randn(&[m, n + 1], 1.0, &mut rng);
        let w = Tensor::randn(&[m, n + 1], 1.0, &mut rng);
        let tau = rng.random_range(0.3..2.0);
        t[1].record(op_error(&[x], |tape, v| {
            v[0].softmax(tau).unwrap().mul(tape.constant(w.clone())).unwrap().sum()
        }));

        let vocab = n + 2;
        let logits = Tensor::randn(&[m, vocab], 1.0, &mut rng);
        let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..vocab)).collect();
        t[2].record(op_error(&[logits], |_, v| v[0].cross_entropy(&targets).unwrap()));

        let len = rng.random_range(1..8);
        let a = Tensor::randn(&[len], 1.0, &mut rng);
        let b = Tensor::randn(&[len], 1.0, &mut rng);
        t[3].record(op_error(&[a.clone(), b.clone()], |_, v| v[0].mse(v[1]).unwrap()));
        t[4].record(op_error(&[a, b], |_, v| v[0].cosine(v[1]).unwrap()));

        let cols = rng.random_range(2..7);
        let x = Tensor::randn(&[m, cols], 1.0, &mut rng);
        let g = Tensor::randn(&[cols], 1.0, &mut rng);
        let bias = Tensor::randn(&[cols], 1.0, &mut rng);
        let w = Tensor::randn(&[m, cols], 1.0, &mut rng);
        t[5].record(op_error(&[x, g, bias], |tape, v| {
            v[0].layer_norm(v[1], v[2]).unwrap().mul(tape.constant(w.clone())).unwrap().sum()
        }));

        let table = Tensor::randn(&[4, cols], 1.0, &mut rng);
        let extra = Tensor::randn(&[2, cols], 1.0, &mut rng);
        let ids: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
        let w = Tensor::randn(&[5, cols], 1.0, &mut rng);
        t[6].record(op_error(&[table, extra], |tape, v| {
            let rows = v[0].gather_rows(&ids).unwrap();
            let all = crate::autodiff::concat(&[rows, v[1]]).unwrap().silu();
            all.mul(tape.constant(w.clone())).unwrap().sum()
        }));

        let d = rng.random_range(2..8);
        let k = rng.random_range(1..=d);
        let width = rng.random_range(1..4);
        let scores = Tensor::randn(&[1, d], 0.5, &mut rng);
        let emb = Tensor::randn(&[1, d, width], 1.0, &mut rng);
        let w = Tensor::randn(&[1, k, width], 1.0, &mut rng);
        t[7].record(aggregate_error(&scores, &emb, &w, k));
    }
    t.into_iter().map(Tracker::row).collect()
}

/// Tape gradient of `⟨W, Z·M⟩` w.r.t. scores against finite differences of the
/// same loss with `Z` replaced by the soft rows at the forward pass's picks.
fn aggregate_error(scores: &Tensor, emb: &Tensor, w: &Tensor, k: usize) -> f64 {
    let d = scores.len();
    let tape = Tape::new();
    let s = tape.leaf(scores.clone());
    let sel = st_topk(&ScoreMatrix::new(s).unwrap(), k, 1.0, DEFAULT_EPSILON).unwrap();
    let picks = sel.indices[0].clone();
    let out = aggregate(&sel, tape.constant(emb.clone())).unwrap();
    let loss = out.mul(tape.constant(w.clone())).unwrap().sum();
    let analytic = tape.backward(loss).wrt(s);

    let width = emb.cols() / d;
    let soft_loss = |sv: &[f64]| -> f64 {
        let mut taken = vec![false; d];
        let mut total = 0.0;
        for (j, &pick) in picks.iter().enumerate() {
            let logits: Vec<f64> = (0..d)
                .map(|i| sv[i] + ((if taken[i] { 0.0 } else { 1.0 }) + DEFAULT_EPSILON).ln())
                .collect();
            let mut p = vec![0.0; d];
            softmax_into(&logits, 1.0, &mut p);
            for i in 0..d {
                for c in 0..width {
                    total += p[i] * emb.data()[i * width + c] * w.data()[j * width + c];
                }
            }
            taken[pick] = true;
        }
        total
    };
    let numeric = central_difference(soft_loss, scores.data(), FD_STEP);
    compare(analytic.data(), &numeric).max_scaled_err
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let rows = run(&SuiteConfig {
            seed: 3,
            coupling_instances: 10,
            topk_cases: 20,
            op_cases: 5,
        });
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
        let table = render_table(&rows);
        assert!(table.contains("PASS") && !table.contains("FAIL"));
    }

    #[test]
    fn nan_counts_as_failure() {
        let mut t = Tracker::new("x", 1.0);
        t.record(f64::NAN);
        assert!(!t.row().passed());
    }
}
