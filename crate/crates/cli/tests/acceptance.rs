//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 and 10 are hard failures. The directional grid criteria
//! 6-9 are reported; set `LSSL_ACCEPTANCE_STRICT=1` to make them fail the
//! run too. `LSSL_ACCEPTANCE_SEEDS` overrides the number of grid seeds.

use std::path::Path;
use std::time::{Duration, Instant};

use lssl_cli::checks::{all_checks, Check};
use lssl_cli::commands::cmd_reproduce;
use lssl_cli::config::ExperimentConfig;
use lssl_cli::results::ResultRow;
use lssl_core::autodiff::gradcheck::{check_gradients, GradCheck};
use lssl_core::autodiff::{AutodiffError, Graph, Tensor, Var};
use lssl_core::models::{init_bundle, Mode, INPUT_DIM};
use lssl_core::objectives::{loss_and_grads, LossWeights, PairBatch};
use lssl_core::odesolve::{integrate, integrate_adjoint_backward, integrate_taped, Dynamics, GradientMode, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    hard: bool,
    detail: String,
}

fn report(id: usize, name: &'static str, hard: bool, pass: bool, detail: String) -> Outcome {
    println!("[{}] criterion {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, name, pass, hard, detail }
}

fn within(elapsed: Duration, budget_s: f64) -> bool {
    elapsed.as_secs_f64() < budget_s
}

// ---------------------------------------------------------------- solver

/// `u(t, z) = z·W`.
struct Linear {
    p: Vec<Tensor>,
}

impl Dynamics for Linear {
    fn state_dim(&self) -> usize {
        self.p[0].rows()
    }
    fn params(&self) -> &[Tensor] {
        &self.p
    }
    fn build(&self, g: &Graph, _t: Var, z: Var, p: &[Var]) -> Result<Var, AutodiffError> {
        g.matmul(z, p[0])
    }
}

fn scaled_identity(d: usize, lambda: f64) -> Linear {
    let mut w = vec![0.0; d * d];
    (0..d).for_each(|i| w[i * d + i] = lambda);
    Linear { p: vec![Tensor::matrix(d, d, w).unwrap()] }
}

fn solver() -> Outcome {
    let start = Instant::now();
    let cfg = SolverConfig::with_tolerances(1e-3, 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for lambda in [-1.0, 0.0, 1.0] {
        for d in [1usize, 64] {
            for t1 in [0.5, 1.0, 5.0] {
                let z0: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let sol = integrate(&scaled_identity(d, lambda), &Tensor::vector(z0.clone()).unwrap(), 0.0, t1, &cfg).unwrap();
                for (z, z0) in sol.final_state().data().iter().zip(&z0) {
                    let exact = z0 * (lambda * t1).exp();
                    worst = worst.max((z - exact).abs() / (1e-4 + 1e-3 * exact.abs()));
                }
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 10.0 && within(elapsed, 1.0);
    report(1, "solver accuracy", true, pass, format!("{cases} problems, worst error {worst:.3} x tolerance (limit 10), {elapsed:.2?}"))
}

// --------------------------------------------------------------- adjoint

/// `u(t, z) = tanh([t, z]·W1 + b1)·W2 + b2`.
struct TanhNet {
    p: Vec<Tensor>,
    d: usize,
}

impl TanhNet {
    fn random(d: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut m = |r: usize, c: usize| {
            let v = (0..r * c).map(|_| rng.gen_range(-0.8..0.8)).collect();
            Tensor::new(if r == 1 { vec![c] } else { vec![r, c] }, v).unwrap()
        };
        let p = vec![m(d + 1, h), m(1, h), m(h, d), m(1, d)];
        Self { p, d }
    }

    fn n_params(&self) -> usize {
        self.p.iter().map(Tensor::numel).sum()
    }
}

impl Dynamics for TanhNet {
    fn state_dim(&self) -> usize {
        self.d
    }
    fn params(&self) -> &[Tensor] {
        &self.p
    }
    fn build(&self, g: &Graph, t: Var, z: Var, p: &[Var]) -> Result<Var, AutodiffError> {
        let x = g.concat_cols(&[t, z])?;
        let h = g.tanh(g.add_bias(g.matmul(x, p[0])?, p[1])?)?;
        g.add_bias(g.matmul(h, p[2])?, p[3])
    }
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn weighted(z: &[f64], w: &[f64]) -> f64 {
    z.iter().zip(w).map(|(a, b)| a * b).sum()
}

fn adjoint() -> Outcome {
    let start = Instant::now();
    let cfg = SolverConfig::with_tolerances(1e-7, 1e-9);
    let (mut vs_direct, mut vs_fd, mut most_params) = (0.0f64, 0.0f64, 0);
    let seeds = 24;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let d = rng.gen_range(1..=4);
        let h = rng.gen_range(4..=16);
        let f = TanhNet::random(d, h, &mut rng);
        assert!(f.n_params() <= 200);
        most_params = most_params.max(f.n_params());
        let z0 = Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (t0, t1) = (rng.gen_range(0.0..0.5), rng.gen_range(1.0..2.0));
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let sol = integrate(&f, &z0, t0, t1, &cfg).unwrap();
        let adj = integrate_adjoint_backward(&f, &sol, &Tensor::vector(w.clone()).unwrap()).unwrap();
        let mut a: Vec<f64> = adj.grad_z0.data().to_vec();
        a.extend(adj.grad_params.iter().flat_map(|t| t.data().to_vec()));

        let g = Graph::new();
        let z = g.param(&z0).unwrap();
        let ps: Vec<Var> = f.p.iter().map(|p| g.param(p).unwrap()).collect();
        let out = integrate_taped(&g, &f, z, &ps, t0, t1, &cfg).unwrap();
        let wv = g.constant(Tensor::vector(w.clone()).unwrap()).unwrap();
        let loss = g.sum(g.mul(out, wv).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut direct: Vec<f64> = grads.get(z).unwrap().to_vec();
        direct.extend(ps.iter().flat_map(|p| grads.get(*p).unwrap().to_vec()));
        vs_direct = vs_direct.max(max_rel(&a, &direct));

        let loss = |z0: &Tensor, p: Vec<Tensor>| {
            let f = TanhNet { p, d };
            weighted(integrate(&f, z0, t0, t1, &cfg).unwrap().final_state().data(), &w)
        };
        let step = 1e-4;
        let mut fd = Vec::with_capacity(a.len());
        for i in 0..d {
            let (mut up, mut down) = (z0.clone(), z0.clone());
            up.data_mut()[i] += step;
            down.data_mut()[i] -= step;
            fd.push((loss(&up, f.p.clone()) - loss(&down, f.p.clone())) / (2.0 * step));
        }
        for k in 0..f.p.len() {
            for i in 0..f.p[k].numel() {
                let (mut up, mut down) = (f.p.clone(), f.p.clone());
                up[k].data_mut()[i] += step;
                down[k].data_mut()[i] -= step;
                fd.push((loss(&z0, up) - loss(&z0, down)) / (2.0 * step));
            }
        }
        vs_fd = vs_fd.max(max_rel(&a, &fd));
    }
    let elapsed = start.elapsed();
    let pass = vs_direct <= 1e-3 && vs_fd <= 1e-2 && within(elapsed, 30.0);
    report(
        2,
        "adjoint gradients",
        true,
        pass,
        format!(
            "{seeds} nets (<= {most_params} params): vs direct {vs_direct:.2e} (limit 1e-3), vs finite differences {vs_fd:.2e} (limit 1e-2), {elapsed:.2?}"
        ),
    )
}

// -------------------------------------------------------------- autodiff

type OpFn = Box<dyn Fn(&Graph, &[Var]) -> Result<Var, AutodiffError>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: OpFn,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Values kept clear of zero so the leaky ReLU kink is never straddled.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.05..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, uniform(rng, r * c)).unwrap()
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::vector(uniform(rng, n)).unwrap()
}

/// Reduces any output to a scalar with fixed random weights.
fn project(g: &Graph, out: Var, w: &Tensor) -> Result<Var, AutodiffError> {
    let w = g.constant(w.clone())?;
    g.sum(g.mul(out, g.reshape(w, &g.shape(out))?)?)
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let (r, c, k) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=4));
    let mut cases = Vec::new();
    let mut push = |name, inputs: Vec<Tensor>, out_len: usize, rng: &mut ChaCha8Rng, f: OpFn| {
        let w = vector(rng, out_len.max(1));
        let f: OpFn = Box::new(move |g, v| {
            let out = f(g, v)?;
            if g.shape(out).is_empty() {
                Ok(out)
            } else {
                project(g, out, &w)
            }
        });
        cases.push(OpCase { name, inputs, f });
    };
    let (a, b) = (mat(rng, r, c), mat(rng, r, c));
    push("matmul", vec![mat(rng, r, k), mat(rng, k, c)], r * c, rng, Box::new(|g, v| g.matmul(v[0], v[1])));
    push("add", vec![a.clone(), b.clone()], r * c, rng, Box::new(|g, v| g.add(v[0], v[1])));
    push("sub", vec![a.clone(), b.clone()], r * c, rng, Box::new(|g, v| g.sub(v[0], v[1])));
    push("mul", vec![a.clone(), b.clone()], r * c, rng, Box::new(|g, v| g.mul(v[0], v[1])));
    push("mul_scalar", vec![a.clone(), Tensor::scalar(rng.gen_range(-2.0..2.0))], r * c, rng, Box::new(|g, v| g.mul(v[0], v[1])));
    push("tanh", vec![a.clone()], r * c, rng, Box::new(|g, v| g.tanh(v[0])));
    let kinked = Tensor::matrix(r, c, off_zero(rng, r * c)).unwrap();
    push("leaky_relu", vec![kinked], r * c, rng, Box::new(|g, v| g.leaky_relu(v[0], 0.01)));
    push("square", vec![a.clone()], r * c, rng, Box::new(|g, v| g.square(v[0])));
    push("sigmoid", vec![a.clone()], r * c, rng, Box::new(|g, v| g.sigmoid(v[0])));
    let s = rng.gen_range(-3.0..3.0);
    push("scale", vec![a.clone()], r * c, rng, Box::new(move |g, v| g.scale(v[0], s)));
    let factors = uniform(rng, r);
    push("scale_rows", vec![a.clone()], r * c, rng, Box::new(move |g, v| g.scale_rows(v[0], &factors)));
    push("add_bias", vec![a.clone(), vector(rng, c)], r * c, rng, Box::new(|g, v| g.add_bias(v[0], v[1])));
    push("sum", vec![a.clone()], 0, rng, Box::new(|g, v| g.sum(g.square(v[0])?)));
    push("mean", vec![a.clone()], 0, rng, Box::new(|g, v| g.mean(g.tanh(v[0])?)));
    push("mse", vec![a.clone(), b.clone()], 0, rng, Box::new(|g, v| g.mse(v[0], v[1])));
    push("cosine_rows", vec![a.clone(), b.clone()], r, rng, Box::new(|g, v| g.cosine_similarity(v[0], v[1])));
    push("cosine_shared", vec![a.clone(), vector(rng, c)], r, rng, Box::new(|g, v| g.cosine_similarity(v[0], v[1])));
    push("cosine_vectors", vec![vector(rng, c), vector(rng, c)], 0, rng, Box::new(|g, v| g.cosine_similarity(v[0], v[1])));
    push("concat_cols", vec![a.clone(), mat(rng, r, k)], r * (c + k), rng, Box::new(|g, v| g.concat_cols(&[v[0], v[1]])));
    let start = rng.gen_range(0..c);
    let end = rng.gen_range(start + 1..=c);
    push("slice_cols", vec![a.clone()], r * (end - start), rng, Box::new(move |g, v| g.slice_cols(v[0], start, end)));
    let idx: Vec<usize> = (0..k + 1).map(|_| rng.gen_range(0..r)).collect();
    let n_sel = idx.len();
    push("select_rows", vec![a.clone()], n_sel * c, rng, Box::new(move |g, v| g.select_rows(v[0], &idx)));
    push("reshape", vec![a.clone()], r * c, rng, Box::new(move |g, v| g.tanh(g.reshape(v[0], &[r * c])?)));
    let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
    push("cross_entropy", vec![a], 0, rng, Box::new(move |g, v| g.cross_entropy(v[0], &labels)));
    cases
}

fn autodiff() -> Outcome {
    let start = Instant::now();
    let trials = 100;
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut failures = Vec::new();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + trial);
        for case in op_cases(&mut rng) {
            let rep = check_gradients(&case.inputs, &case.f, GradCheck::default()).unwrap();
            match worst.iter_mut().find(|(n, _)| *n == case.name) {
                Some(w) => w.1 = w.1.max(rep.max_rel_err),
                None => worst.push((case.name, rep.max_rel_err)),
            }
            if !rep.passed() {
                failures.push(format!("{} trial {trial}: {:.2e}", case.name, rep.max_rel_err));
            }
        }
    }
    let elapsed = start.elapsed();
    let overall = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let pass = failures.is_empty() && within(elapsed, 10.0);
    let mut detail = format!("{} ops x {trials} trials, worst relative error {overall:.2e} (limit 1e-4), {elapsed:.2?}", worst.len());
    if !failures.is_empty() {
        detail += &format!("; {} failed, first: {}", failures.len(), failures[0]);
    }
    report(3, "autodiff vs finite differences", true, pass, detail)
}

// ------------------------------------------------------------ mode algebra

fn mode_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows = 6;
    let mut m = || Tensor::matrix(rows, INPUT_DIM, uniform(&mut rng, rows * INPUT_DIM)).unwrap();
    let (xi, xj) = (m(), m());
    let batch = PairBatch::new(xi, xj, vec![0.8; rows]).unwrap();
    let cfg = SolverConfig::default();
    let mut problems = Vec::new();

    for mode in [Mode::Ae, Mode::AeNode] {
        // the AE weights applied to a bundle that carries a direction net
        let full = init_bundle(if mode.is_node() { Mode::LsslNode } else { Mode::Lssl }, 4);
        let (parts, grads, _) = loss_and_grads(&full, &batch, &LossWeights::for_mode(mode), &cfg, GradientMode::Adjoint).unwrap();
        let names = full.named_params();
        let dir: Vec<&Vec<f64>> = names.iter().zip(&grads).filter(|((n, _), _)| n.starts_with("direction")).map(|(_, g)| g).collect();
        if dir.is_empty() || dir.iter().any(|g| g.iter().any(|v| *v != 0.0)) {
            problems.push(format!("{mode}: non-zero direction gradient"));
        }
        let enc_moves = names.iter().zip(&grads).any(|((n, _), g)| n.starts_with("encoder") && g.iter().any(|v| *v != 0.0));
        if !enc_moves || parts.direction.is_some() {
            problems.push(format!("{mode}: unexpected loss terms"));
        }
        if init_bundle(mode, 4).direction.is_some() {
            problems.push(format!("{mode}: builds a direction net"));
        }
    }
    for mode in [Mode::SLssl, Mode::SLsslNode] {
        let b = init_bundle(mode, 4);
        if b.decoder.is_some() || b.named_params().iter().any(|(n, _)| n.starts_with("decoder")) {
            problems.push(format!("{mode}: has a decoder"));
        }
        let (parts, _, _) = loss_and_grads(&b, &batch, &LossWeights::for_mode(mode), &cfg, GradientMode::Adjoint).unwrap();
        if parts.recon.is_some() || parts.direction.is_none() {
            problems.push(format!("{mode}: unexpected loss terms"));
        }
    }
    let elapsed = start.elapsed();
    let pass = problems.is_empty() && within(elapsed, 1.0);
    let detail = if problems.is_empty() {
        format!("AE direction gradients exactly zero, S-LSSL bundles decoder-free, {elapsed:.2?}")
    } else {
        format!("{}, {elapsed:.2?}", problems.join("; "))
    };
    report(4, "mode algebra", true, pass, detail)
}

// ------------------------------------------------------------------- grid

fn grid_config(seed: u64, out: &Path) -> ExperimentConfig {
    ExperimentConfig { seed, out: out.to_path_buf(), ..ExperimentConfig::default() }
}

fn cell_seconds(out: &Path, cell: &str) -> f64 {
    let text = std::fs::read_to_string(out.join("timings.csv")).unwrap();
    text.lines().filter_map(|l| l.split_once(',')).find(|(k, _)| *k == cell).map_or(f64::NAN, |(_, v)| v.parse().unwrap())
}

fn grid_outcome(id: usize, name: &'static str, hard: bool, check: &Check, extra: String) -> Outcome {
    report(id, name, hard, check.pass, format!("{}{extra}", check.detail))
}

fn main() {
    let strict = std::env::var("LSSL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let n_seeds: u64 = std::env::var("LSSL_ACCEPTANCE_SEEDS").ok().and_then(|v| v.parse().ok()).unwrap_or(5).max(1);
    let mut outcomes = vec![solver(), adjoint(), autodiff(), mode_algebra()];

    let tmp = tempfile::tempdir().unwrap();
    let mut rows: Vec<ResultRow> = Vec::new();
    let mut slssl_pretrain = 0.0f64;
    let mut norms = 0.0f64;
    let grid_start = Instant::now();
    for seed in 0..n_seeds {
        let out = tmp.path().join(format!("seed{seed}"));
        let t = Instant::now();
        let o = cmd_reproduce(&grid_config(seed, &out), 1).unwrap();
        println!("       seed {seed} grid finished in {:.1?}", t.elapsed());
        slssl_pretrain = slssl_pretrain.max(cell_seconds(&out, "s-lssl/pretrain"));
        norms = norms.max(Mode::ALL.iter().map(|m| cell_seconds(&out, &format!("{m}/norms"))).sum());
        rows.extend(o.rows);
    }
    let grid = grid_start.elapsed();
    let checks = all_checks(&rows);
    let by_key = |k: &str| checks.iter().find(|c| c.key == k).expect("check exists");

    let c5 = by_key("alignment");
    outcomes.push(report(5, "S-LSSL alignment", true, c5.pass && slssl_pretrain < 600.0, format!("{}; pretraining {slssl_pretrain:.1}s", c5.detail)));
    let per_seed = grid.as_secs_f64() / n_seeds.max(1) as f64;
    let c6 = by_key("next_visit");
    outcomes.push(report(6, "next-visit ordering", strict, c6.pass && grid.as_secs_f64() < 2700.0, format!("{}; {n_seeds} seeds in {grid:.0?}", c6.detail)));
    outcomes.push(grid_outcome(7, "age ordering", strict, by_key("age"), String::new()));
    let c8 = by_key("norms");
    outcomes.push(report(8, "norm separation", strict, c8.pass && norms < 120.0, format!("{}; tests {norms:.2}s", c8.detail)));
    outcomes.push(grid_outcome(9, "NODE classifier", strict, by_key("node_cls"), String::new()));

    let first = std::fs::read(tmp.path().join("seed0/results.csv")).unwrap();
    let again = tmp.path().join("seed0-again");
    let t = Instant::now();
    cmd_reproduce(&grid_config(0, &again), 2).unwrap();
    let second = std::fs::read(again.join("results.csv")).unwrap();
    outcomes.push(report(
        10,
        "determinism",
        true,
        first == second,
        format!(
            "seed 0 rerun with 2 workers, results.csv {} ({} bytes, {:.1?})",
            if first == second { "byte-identical" } else { "differs" },
            first.len(),
            t.elapsed()
        ),
    ));

    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("\nacceptance: {passed}/{} criteria pass ({per_seed:.0}s per grid seed)", outcomes.len());
    let blocking: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass && o.hard).collect();
    for o in outcomes.iter().filter(|o| !o.pass && !o.hard) {
        println!("reported, not blocking: criterion {} {} ({})", o.id, o.name, o.detail);
    }
    if !blocking.is_empty() {
        for o in &blocking {
            eprintln!("criterion {} {} failed: {}", o.id, o.name, o.detail);
        }
        std::process::exit(1);
    }
}
