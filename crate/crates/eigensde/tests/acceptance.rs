//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Select criteria by number:
//! `cargo test --test acceptance -- 5 7`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use eigensde::config::RunConfig;
use eigensde::experiment::{fit, ground_truth_regime, split_indices, summarize_spectra, trajectory_spectrum, SpectrumSummary};
use eigensde_core::esde::{ControlSegment, GaussianBelief, Propagator};
use eigensde_core::filter::{condition, Observation};
use eigensde_core::linalg::Mat;
use eigensde_core::nets::{map_dynamics_raw, prior_heads, Activation, HeadConfig, HyperModel, MlpSpec};
use eigensde_core::oracle::{check_filtering, check_integrals, check_propagation};
use eigensde_core::real::Real;
use eigensde_core::seeds::stream;
use eigensde_core::spectral::{EigenBasis, Spectrum};
use eigensde_core::synth::{generate, Dataset, GeneratorConfig};
use eigensde_core::tape::Tape;
use eigensde_core::train::{evaluate, masked_nll, nll, sequence_gradient, unroll, unroll_source, BoundModel, EvalOptions, FrozenSummaries, Trajectory, UnrollOptions, Unrolled};
use rand::Rng;
use sha2::{Digest, Sha256};

type R<T> = Result<T, String>;

fn s<T, E: Display>(r: Result<T, E>) -> R<T> {
    r.map_err(|e| e.to_string())
}

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> R<Verdict> {
    Ok(Verdict { passed, detail })
}

fn dataset(preset: &str, n: usize, seed: u64) -> R<Dataset> {
    let mut g = s(GeneratorConfig::preset(preset))?;
    g.n_traj = n;
    g.seed = seed;
    s(generate(&g))
}

fn run_config(seed: u64, epochs: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.set_seed(Some(seed));
    c.train.epochs = epochs;
    c
}

fn fit_model(cfg: &RunConfig, train: &[Trajectory], val: &[Trajectory]) -> R<HyperModel> {
    s(fit(cfg, train, val, None, |_, _| {})).map(|f| f.model)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_err(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0);
    (var / xs.len() as f64).sqrt()
}

fn solver_vs_moment_odes() -> R<Verdict> {
    let start = Instant::now();
    let c = s(check_propagation(101, 100))?;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        c.cases == 100 && c.max_error <= 1e-6 && secs < 60.0,
        format!("max relative error {:.2e} over {} systems in {secs:.1}s (limit 1e-6, 60s)", c.max_error, c.cases),
    )
}

fn integrals_vs_riemann() -> R<Verdict> {
    let c = s(check_integrals(102, 100, 1e-5))?;
    verdict(
        c.cases == 100 && c.max_error <= 1e-4,
        format!("max absolute error {:.2e} over {} cases at step 1e-5 (limit 1e-4)", c.max_error, c.cases),
    )
}

fn filtering_vs_schur() -> R<Verdict> {
    let c = s(check_filtering(103, 100))?;
    let belief = GaussianBelief::new(vec![0.0, 0.0], Mat::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]), 0.0);
    let obs = Observation::full(0.0, vec![1.0]);
    let hard = s(condition(&belief, &obs, &Mat::zeros(1, 1), &[0.0, 0.0]))?;
    let soft = s(condition(&belief, &obs, &Mat::from_rows(&[vec![1.0]]), &[0.0, 0.0]))?;
    let hard_ok = hard.mu == vec![1.0, 0.5] && hard.sigma[(1, 1)] == 0.75 && hard.sigma[(0, 0)] == 0.0;
    let soft_ok = soft.mu == vec![0.5, 0.25] && soft.sigma[(0, 0)] == 0.5;
    verdict(
        c.cases == 100 && c.max_error <= 1e-10 && hard_ok && soft_ok,
        format!(
            "max error {:.2e} over {} instances (limit 1e-10); worked examples {}",
            c.max_error,
            c.cases,
            if hard_ok && soft_ok { "exact" } else { "differ" }
        ),
    )
}

/// Scalar function evaluated both in `f64` and on the tape.
trait Functional {
    fn eval<T: Real>(&self, x: &[T]) -> R<T>;
}

/// Relative error, with magnitudes below the resolution of the difference
/// quotient (`scale`) treated as that resolution.
fn rel_err(fd: f64, exact: f64, scale: f64) -> f64 {
    (fd - exact).abs() / fd.abs().max(exact.abs()).max(1e-9 * scale.max(1.0))
}

/// Five-point central difference, truncation error O(h⁴).
fn central_difference(f: impl Fn(&[f64]) -> R<f64>, x0: &[f64], i: usize) -> R<f64> {
    let h = 1e-3 * x0[i].abs().max(1.0);
    let at = |d: f64| {
        let mut x = x0.to_vec();
        x[i] += d;
        f(&x)
    };
    Ok((8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h))
}

fn tape_vs_differences<F: Functional>(f: &F, x0: &[f64]) -> R<f64> {
    let tape = Tape::new();
    let xs = tape.vars(x0);
    let y = f.eval(&xs)?;
    let g = tape.gradient(y).wrt_all(&xs);
    let mut worst = 0.0f64;
    for (i, gi) in g.iter().enumerate() {
        let fd = central_difference(|x| f.eval::<f64>(x), x0, i)?;
        worst = worst.max(rel_err(fd, *gi, y.value().abs()));
    }
    Ok(worst)
}

fn weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot<T: Real>(xs: impl IntoIterator<Item = T>, w: &[f64]) -> T {
    xs.into_iter().zip(w).fold(T::zero(), |acc, (x, &c)| acc + x * c)
}

fn lower_cholesky<T: Real>(x: &[T], n: usize) -> Mat<T> {
    let mut l = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = if i == j { x[k].softplus() } else { x[k] };
            k += 1;
        }
    }
    l.matmul(&l.transpose())
}

const HEAD: HeadConfig = HeadConfig {
    n: 4,
    m: 1,
    k: 1,
    context_dim: 2,
    n_complex_pairs: 1,
    stable: true,
    hypernet_disabled: false,
    interval_dt: 1.0,
};

struct DynamicsHeadCheck(Vec<f64>);

impl Functional for DynamicsHeadCheck {
    fn eval<T: Real>(&self, x: &[T]) -> R<T> {
        let h = s(map_dynamics_raw(&HEAD, x))?;
        let sp = &h.spectrum;
        let parts = sp.real.iter().copied().chain(sp.pairs.iter().flat_map(|p| [p.0, p.1])).chain(h.basis.v.as_slice().iter().copied()).chain(h.q.as_slice().iter().copied());
        Ok(dot(parts, &self.0) + h.penalty)
    }
}

struct PriorHeadCheck(Vec<f64>);

impl Functional for PriorHeadCheck {
    fn eval<T: Real>(&self, x: &[T]) -> R<T> {
        let (b, alpha, r) = s(prior_heads(&HEAD, x))?;
        let parts = b.mu.into_iter().chain(b.sigma.into_vec()).chain(alpha).chain(r.into_vec());
        Ok(dot(parts, &self.0))
    }
}

/// Spectrum, basis, noise, control map and initial belief of a 3-state
/// system with one real eigenvalue and one pair, propagated across a
/// piecewise-constant control schedule.
struct PropagationCheck(Vec<f64>);

impl Functional for PropagationCheck {
    fn eval<T: Real>(&self, x: &[T]) -> R<T> {
        let n = 3;
        let spectrum = Spectrum::new(vec![-x[0].softplus()], vec![(-x[1].softplus(), x[2].softplus())]);
        let v = Mat::from_fn(n, n, |i, j| x[3 + i * n + j]);
        let q = lower_cholesky(&x[12..18], n);
        let b = Mat::from_fn(n, 1, |i, _| x[18 + i]);
        let mu = x[21..24].to_vec();
        let sigma = lower_cholesky(&x[24..30], n);
        let schedule = [ControlSegment::new(0.0, 0.8, vec![0.7]), ControlSegment::new(0.8, 2.0, vec![-0.4])];
        let p = s(Propagator::new(&spectrum, &EigenBasis::new(v), &q, &b))?;
        let out = s(p.propagate(&GaussianBelief::new(mu, sigma, 0.0), &schedule, 2.3))?;
        Ok(dot(out.mu.into_iter().chain(out.sigma.into_vec()), &self.0))
    }
}

struct ConditionCheck(Vec<f64>);

impl Functional for ConditionCheck {
    fn eval<T: Real>(&self, x: &[T]) -> R<T> {
        let n = 3;
        let mu = x[..n].to_vec();
        let sigma = lower_cholesky(&x[n..n + 6], n);
        let r = Mat::diag(&[x[9].softplus(), x[10].softplus()]);
        let alpha = x[11..14].to_vec();
        let obs = Observation {
            t: 0.0,
            y: vec![0.4, -1.1],
            mask: vec![true, false],
        };
        let noisy = s(condition(&GaussianBelief::new(mu.clone(), sigma.clone(), 0.0), &obs, &r, &alpha))?;
        let exact = s(condition(&GaussianBelief::new(mu, sigma, 0.0), &Observation::full(0.0, vec![0.4, -1.1]), &Mat::zeros(2, 2), &alpha))?;
        let parts = noisy.mu.into_iter().chain(noisy.sigma.into_vec()).chain(exact.mu).chain(exact.sigma.into_vec());
        Ok(dot(parts, &self.0))
    }
}

struct NllCheck;

impl Functional for NllCheck {
    fn eval<T: Real>(&self, x: &[T]) -> R<T> {
        let cov = lower_cholesky(&x[2..5], 2);
        let joint = s(nll(&[0.3, -0.8], &x[..2], &cov))?;
        let partial = s(masked_nll(&[0.3, -0.8], &[false, true], &x[..2], &cov))?.ok_or("no observed coordinate")?;
        Ok(joint + partial)
    }
}

/// Manual MLP backward pass against differences of the forward pass.
fn hypernet_check(rng: &mut impl Rng) -> R<f64> {
    let spec = MlpSpec::new(3, &[8, 6], 11, Activation::Tanh);
    let params = spec.init_params(rng, 0.5);
    let input = weights(rng, 3);
    let w = weights(rng, spec.output_size());
    let f = |p: &[f64]| -> R<f64> { Ok(dot(s(spec.forward::<f64>(p, &input))?, &w)) };
    let trace = s(spec.forward_trace(&params, &input))?;
    let (g, _) = spec.backward(&params, &trace, &w);
    let mut worst = 0.0f64;
    for (i, gi) in g.iter().enumerate() {
        worst = worst.max(rel_err(central_difference(f, &params, i)?, *gi, f(&params)?.abs()));
    }
    Ok(worst)
}

/// Sequence loss against differences taken with the belief summaries held
/// at their recorded values (the hypernetwork input is detached).
fn end_to_end_check(model: &HyperModel, traj: &Trajectory, rng: &mut impl Rng, n_theta: usize) -> R<f64> {
    let mut grad = vec![0.0; model.n_params()];
    s(sequence_gradient(model, traj, 1.0, 1.0, 0, &mut grad))?;
    let base = s(unroll(model, traj, &UnrollOptions::default()))?;
    let p0 = model.params();
    let loss = |p: &[f64]| -> R<f64> {
        let mut m = model.clone();
        s(m.set_params(p))?;
        let bound = s(BoundModel::new(&m, &traj.context))?;
        let frozen = FrozenSummaries::new(&bound, &base.summaries);
        let out: Unrolled<f64> = s(unroll_source(&frozen, traj, &UnrollOptions::default()))?;
        Ok(out.nll_sum + out.penalty_sum)
    };
    let l0 = loss(&p0)?;
    let nt = model.theta.len();
    let mut idx: Vec<usize> = (0..n_theta).map(|_| rng.random_range(0..nt)).collect();
    idx.extend(nt..p0.len());
    let mut worst = 0.0f64;
    for i in idx {
        worst = worst.max(rel_err(central_difference(loss, &p0, i)?, grad[i], l0));
    }
    Ok(worst)
}

fn gradient_integrity() -> R<Verdict> {
    let mut rng = stream(104, &[]);
    let mut heads = BTreeMap::new();
    heads.insert("hypernetwork", hypernet_check(&mut rng)?);
    let raw = weights(&mut rng, HEAD.g2_output_size());
    heads.insert("dynamics heads", tape_vs_differences(&DynamicsHeadCheck(weights(&mut rng, 64)), &raw)?);
    let raw = weights(&mut rng, HEAD.prior_output_size());
    heads.insert("prior heads", tape_vs_differences(&PriorHeadCheck(weights(&mut rng, 64)), &raw)?);
    let x = weights(&mut rng, 30);
    let mut x = x.iter().map(|v| v * 0.5).collect::<Vec<_>>();
    for i in 0..3 {
        x[3 + i * 3 + i] += 1.5;
    }
    heads.insert("propagation", tape_vs_differences(&PropagationCheck(weights(&mut rng, 12)), &x)?);
    heads.insert("conditioning", tape_vs_differences(&ConditionCheck(weights(&mut rng, 24)), &weights(&mut rng, 14))?);
    heads.insert("likelihood", tape_vs_differences(&NllCheck, &weights(&mut rng, 5))?);

    let mut e2e = 0.0f64;
    let s5 = dataset("section5-complex", 3, 104)?;
    let dose = dataset("dosing", 3, 104)?;
    for (ds, n) in [(&s5, 2), (&dose, 4)] {
        let mut cfg = run_config(104, 1);
        cfg.train.n = n;
        cfg.train.n_complex_pairs = 1;
        let dims = s(eigensde::experiment::infer_dims(&ds.trajectories))?;
        let model = s(eigensde::experiment::build_model(&cfg, dims, 1))?;
        for t in &ds.trajectories {
            e2e = e2e.max(end_to_end_check(&model, t, &mut rng, 150)?);
        }
    }
    let head_worst = heads.values().fold(0.0f64, |a, &b| a.max(b));
    let per_head: Vec<String> = heads.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    verdict(
        e2e <= 1e-3 && head_worst <= 1e-4,
        format!("end-to-end max relative error {e2e:.2e} (limit 1e-3); per head {} (limit 1e-4)", per_head.join(", ")),
    )
}

struct Study {
    name: &'static str,
    summary: SpectrumSummary,
    secs: f64,
}

fn spectrum_study(preset: &'static str, seed: u64) -> R<Study> {
    let start = Instant::now();
    let ds = dataset(preset, 400, seed)?;
    let (train, val) = ds.trajectories.split_at(200);
    let mut cfg = run_config(seed, 300);
    cfg.select_spectrum = true;
    cfg.restarts = 3;
    let model = fit_model(&cfg, train, val)?;
    let items = train.iter().enumerate().map(|(i, t)| trajectory_spectrum(&model, t, i)).collect::<Result<Vec<_>, _>>();
    let summary = s(summarize_spectra(&s(items)?))?;
    Ok(Study {
        name: preset,
        summary,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn spectrum_recovery() -> R<Verdict> {
    let mut ok = true;
    let mut notes = Vec::new();
    for (preset, seed) in [("spectrum-a1", 105), ("spectrum-a2", 106), ("spectrum-a3", 107)] {
        let st = spectrum_study(preset, seed)?;
        let e = &st.summary.eigenvalues;
        let spread = e.iter().all(|x| x.std_re < 0.1 && x.std_im < 0.1);
        let pair = e.iter().find(|x| x.mean_im > 0.0);
        let class = match st.name {
            "spectrum-a1" => pair.is_some_and(|p| p.mean_re < 0.0 && (p.mean_im - 1.98).abs() <= 0.3),
            "spectrum-a2" => e.len() == 2 && e.iter().all(|x| x.mean_im == 0.0 && x.mean_re < 0.0),
            _ => pair.is_some_and(|p| p.mean_re.abs() < 0.15),
        };
        ok &= spread && class && st.secs <= 900.0;
        let eigs: Vec<String> = e.iter().map(|x| format!("{:.3}{:+.3}i (std {:.3}, {:.3})", x.mean_re, x.mean_im, x.std_re, x.std_im)).collect();
        notes.push(format!("{} [{}] {:.0}s", &st.name[9..], eigs.join("; "), st.secs));
    }
    verdict(ok, notes.join(" | "))
}

/// Perturbation scores `[base, mean x0.99, mean x1.01, cov x0.8, cov x1.25]`
/// as `(squared-error sum, count, NLL sum, count)`.
type Sums = [(f64, usize, f64, usize); 5];

const PERTURB: [(f64, f64); 5] = [(1.0, 1.0), (0.99, 1.0), (1.01, 1.0), (1.0, 0.8), (1.0, 1.25)];

fn perturbation_sums(seed: u64, n: usize) -> R<Sums> {
    // Open loop: with state feedback the recorded controls carry information
    // about the state that an exogenous-control predictor does not use.
    let mut g = s(GeneratorConfig::preset("section5-complex"))?;
    g.n_traj = n;
    g.seed = seed;
    g.coupling = 0.0;
    let ds = s(generate(&g))?;
    let regime = s(ground_truth_regime(&ds.header))?;
    let mut sums: Sums = [(0.0, 0, 0.0, 0); 5];
    for t in &ds.trajectories {
        let out = s(unroll_source(&regime, t, &UnrollOptions::default()))?;
        for p in &out.predictions {
            let Some(i) = p.observation else { continue };
            let o = &t.observations[i];
            for (acc, &(ms, cs)) in sums.iter_mut().zip(&PERTURB) {
                let mean: Vec<f64> = p.mean.iter().map(|m| m * ms).collect();
                for d in o.observed() {
                    acc.0 += (o.y[d] - mean[d]).powi(2);
                    acc.1 += 1;
                }
                if let Some(v) = s(masked_nll(&o.y, &o.mask, &mean, &p.cov.scale(cs)))? {
                    acc.2 += v;
                    acc.3 += 1;
                }
            }
        }
    }
    Ok(sums)
}

fn unimprovable(sums: &Sums) -> (bool, String) {
    let mse: Vec<f64> = sums.iter().map(|x| x.0 / x.1 as f64).collect();
    let nll: Vec<f64> = sums.iter().map(|x| x.2 / x.3 as f64).collect();
    let ok = mse[1] >= mse[0] && mse[2] >= mse[0] && nll[3] >= nll[0] && nll[4] >= nll[0];
    let text = format!(
        "MSE {:.6} (x0.99 {:+.1e}, x1.01 {:+.1e}), NLL {:.5} (cov x0.8 {:+.1e}, x1.25 {:+.1e})",
        mse[0],
        mse[1] - mse[0],
        mse[2] - mse[0],
        nll[0],
        nll[3] - nll[0],
        nll[4] - nll[0]
    );
    (ok, text)
}

/// The ±1% mean shift changes the expected MSE by about 1e-5, below the
/// sampling spread of 1000 trajectories, so the decision pools 20 batches.
fn solver_optimality() -> R<Verdict> {
    let mut total: Sums = [(0.0, 0, 0.0, 0); 5];
    let mut first = None;
    for batch in 0..20u64 {
        let sums = perturbation_sums(108 + 1000 * batch, 1000)?;
        first.get_or_insert(sums);
        for (a, b) in total.iter_mut().zip(&sums) {
            *a = (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3);
        }
    }
    let (ok, text) = unimprovable(&total);
    let (ok_one, text_one) = unimprovable(&first.ok_or("no batches")?);
    verdict(
        ok,
        format!(
            "20000 trajectories: {text}; first 1000: {text_one} ({})",
            if ok_one { "unimprovable" } else { "within sampling noise" }
        ),
    )
}

fn ood_robustness() -> R<Verdict> {
    let start = Instant::now();
    let train = dataset("section5-complex", 1100, 109)?.trajectories;
    let id = dataset("section5-complex", 500, 1109)?.trajectories;
    let ood = dataset("section5-ood-complex", 500, 2109)?.trajectories;
    let model = fit_model(&run_config(109, 60), &train[..1000], &train[1000..])?;
    let opts = EvalOptions::default();
    let (mi, _) = s(evaluate(&model, &id, &opts))?;
    let (mo, _) = s(evaluate(&model, &ood, &opts))?;
    let ratio = mo.mse / mi.mse;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        ratio <= 1.25 && secs <= 1800.0,
        format!("ID MSE {:.4}, OOD MSE {:.4}, ratio {ratio:.3} (limit 1.25) in {secs:.0}s", mi.mse, mo.mse),
    )
}

fn ou_benchmark() -> R<Verdict> {
    let data = dataset("ou", 450, 110)?.trajectories;
    let test = dataset("ou", 200, 1110)?.trajectories;
    let model = fit_model(&run_config(110, 60), &data[..400], &data[400..])?;
    let opts = EvalOptions {
        condition_until: Some(4.0),
        ..EvalOptions::default()
    };
    let (m, _) = s(evaluate(&model, &test, &opts))?;
    let gain = 1.0 - m.mse / m.naive_mse;
    verdict(
        gain >= 0.2,
        format!("after t = 4: model MSE {:.4}, naive MSE {:.4}, improvement {:.1}% (need 20%)", m.mse, m.naive_mse, 100.0 * gain),
    )
}

fn sample_efficiency() -> R<Verdict> {
    let sizes = [100usize, 400, 1000];
    let test = dataset("section5-complex", 500, 1111)?.trajectories;
    let mut mse = vec![Vec::new(); sizes.len()];
    for seed in [111u64, 112, 113] {
        let pool = dataset("section5-complex", 1100, seed)?.trajectories;
        for (j, &n) in sizes.iter().enumerate() {
            let model = fit_model(&run_config(seed, 60), &pool[..n], &pool[1000..])?;
            mse[j].push(s(evaluate(&model, &test, &EvalOptions::default()))?.0.mse);
        }
    }
    let mut ok = true;
    for j in 1..sizes.len() {
        let diff: Vec<f64> = mse[j].iter().zip(&mse[j - 1]).map(|(a, b)| a - b).collect();
        ok &= mean(&diff) <= std_err(&diff);
    }
    let cols: Vec<String> = sizes.iter().zip(&mse).map(|(n, v)| format!("{n}: {:.4} ± {:.4}", mean(v), std_err(v))).collect();
    verdict(ok, format!("test MSE by training size {}", cols.join(", ")))
}

fn ablation_direction() -> R<Verdict> {
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in [114u64, 115, 116] {
        let data = dataset("dosing", 600, seed)?.trajectories;
        let [tr, va, te] = split_indices(data.len(), [0.6, 0.1, 0.3], seed);
        let pick = |ix: &[usize]| ix.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
        let (train, val, test) = (pick(&tr), pick(&va), pick(&te));
        let mut scores = Vec::new();
        for ablate in [false, true] {
            let mut cfg = run_config(seed, 60);
            cfg.train.n = 4;
            cfg.ablate_hypernet = ablate;
            let model = fit_model(&cfg, &train, &val)?;
            scores.push(s(evaluate(&model, &test, &EvalOptions::default()))?.0.nll);
        }
        ok &= scores[0] < scores[1];
        notes.push(format!("seed {seed}: {:.4} vs {:.4}", scores[0], scores[1]));
    }
    verdict(ok, format!("test NLL with vs without hypernetwork: {}", notes.join(", ")))
}

fn digest_tree(dir: &Path) -> R<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in s(std::fs::read_dir(&d))? {
            let p = s(entry)?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).map_err(|e| e.to_string())?.to_string_lossy().into_owned();
            let mut bytes = s(std::fs::read(&p))?;
            if p.file_name().is_some_and(|n| n == "run.json") {
                let text = String::from_utf8_lossy(&bytes).replace(&*dir.to_string_lossy(), "<dir>");
                let mut v: serde_json::Value = s(serde_json::from_str(&text))?;
                v.as_object_mut().ok_or("run.json is not an object")?.remove("wall_time_secs");
                bytes = s(serde_json::to_vec(&v))?;
            }
            out.insert(rel, format!("{:x}", Sha256::digest(&bytes)));
        }
    }
    Ok(out)
}

fn run_all_commands(dir: &Path) -> R<()> {
    let bin = env!("CARGO_BIN_EXE_eigensde");
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let runs = |name: &str| dir.join("runs").join(name).to_string_lossy().into_owned();
    let commands: Vec<Vec<String>> = vec![
        vec!["generate", "--preset", "section5-complex", "--n-traj", "40", "--seed", "7", "--out", &p("ds.jsonl"), "--run-dir", &runs("generate")],
        vec!["train", "--dataset", &p("ds.jsonl"), "--seed", "7", "--epochs", "3", "--out", &p("model.json"), "--run-dir", &runs("train")],
        vec!["eval", "--checkpoint", &p("model.json"), "--dataset", &p("ds.jsonl"), "--subset", "test", "--seed", "7", "--out", &p("eval.json"), "--run-dir", &runs("eval")],
        vec!["eval", "--ground-truth", "--dataset", &p("ds.jsonl"), "--out", &p("truth.json"), "--run-dir", &runs("truth")],
        vec!["forecast", "--checkpoint", &p("model.json"), "--dataset", &p("ds.jsonl"), "--traj", "0,3", "--queries", "0:10:0.25", "--out", &p("forecast.csv"), "--run-dir", &runs("forecast")],
        vec!["spectrum", "--checkpoint", &p("model.json"), "--dataset", &p("ds.jsonl"), "--out", &p("spectrum.csv"), "--run-dir", &runs("spectrum")],
        vec!["oracle-check", "--seed", "7", "--n-cases", "6", "--riemann-step", "1e-3", "--out", &p("oracle.json"), "--run-dir", &runs("oracle")],
        vec!["env-rollout", "--seed", "7", "--episodes", "3", "--out", &p("env.csv"), "--run-dir", &runs("env")],
    ]
    .into_iter()
    .map(|c| c.into_iter().map(String::from).collect())
    .collect();
    for args in commands {
        let out = s(Command::new(bin).args(&args).output())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn determinism() -> R<Verdict> {
    let a = s(tempfile::tempdir())?;
    let b = s(tempfile::tempdir())?;
    run_all_commands(a.path())?;
    run_all_commands(b.path())?;
    let (ha, hb) = (digest_tree(a.path())?, digest_tree(b.path())?);
    let differing: Vec<&String> = ha.iter().filter(|(k, v)| hb.get(*k) != Some(v)).map(|(k, _)| k).collect();
    verdict(
        differing.is_empty() && ha.len() == hb.len() && ha.len() > 8,
        if differing.is_empty() {
            format!("{} output files from 8 commands hash identically across two runs", ha.len())
        } else {
            format!("differing outputs: {differing:?}")
        },
    )
}

type Criterion = (usize, &'static str, fn() -> R<Verdict>);

const CRITERIA: [Criterion; 11] = [
    (1, "closed-form propagation vs moment ODEs", solver_vs_moment_odes),
    (2, "analytic integrals vs Riemann sums", integrals_vs_riemann),
    (3, "conditioning vs joint-Gaussian Schur complement", filtering_vs_schur),
    (4, "gradients vs central differences", gradient_integrity),
    (5, "spectrum recovery", spectrum_recovery),
    (6, "ground-truth predictions are unimprovable", solver_optimality),
    (7, "robustness to a changed control policy", ood_robustness),
    (8, "OU forecasting beats last value", ou_benchmark),
    (9, "test error falls with training size", sample_efficiency),
    (10, "context hypernetwork beats ablation", ablation_direction),
    (11, "seeded commands are bit-reproducible", determinism),
];

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (passed, detail) = match check() {
            Ok(v) => (v.passed, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!passed);
        println!("{} [{id:>2}] {name}: {detail} ({:.1}s)", if passed { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
