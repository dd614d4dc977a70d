use eigensde_core::esde::{propagate, ControlSegment, GaussianBelief};
use eigensde_core::linalg::Mat;
use eigensde_core::seeds::stream;
use eigensde_core::spectral::SpectralDynamics;
use eigensde_core::synth::{gen_ou, gen_spectrum, matrix_a1, matrix_a2, matrix_a3, simulate_linear_sde, DosingEnv, DosingEnvConfig, GeneratorConfig};

fn benchmark(a: &Mat<f64>, q: f64) -> SpectralDynamics<f64> {
    SpectralDynamics::from_matrix(a, Mat::identity(2).scale(q), vec![0.4, -0.2], Mat::from_rows(&[vec![0.0], vec![1.0]]), vec![false, true], Mat::zeros(1, 1)).unwrap()
}

/// Lyapunov solution of `AΣ + ΣAᵀ + Q = 0` through the Kronecker system.
fn lyapunov(a: &Mat<f64>, q: &Mat<f64>) -> Mat<f64> {
    let n = a.rows();
    let mut k = nalgebra::DMatrix::<f64>::zeros(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                k[(i * n + j, l * n + j)] += a[(i, l)];
                k[(i * n + j, i * n + l)] += a[(j, l)];
            }
        }
    }
    let rhs = nalgebra::DVector::from_iterator(n * n, q.as_slice().iter().map(|x| -x));
    let s = k.lu().solve(&rhs).unwrap();
    Mat::from_fn(n, n, |i, j| s[i * n + j])
}

#[test]
fn endpoint_moments_match_propagation() {
    let d = benchmark(&matrix_a1(), 0.3);
    let sched = [ControlSegment::new(0.0, 0.7, vec![0.5]), ControlSegment::new(0.7, 2.0, vec![-0.2])];
    let x0 = [1.0, -0.5];
    let start = GaussianBelief::new(vec![x0[0] - 0.4, x0[1] + 0.2], Mat::zeros(2, 2), 0.0);
    let want = propagate(&start, &d, &sched, 1.5, false).unwrap();
    let mut rng = stream(11, &[]);
    let n = 100_000;
    let mut sum = [0.0; 2];
    let mut outer = [[0.0; 2]; 2];
    for _ in 0..n {
        let path = simulate_linear_sde(&d, &sched, &x0, &[0.0, 1.5], &mut rng).unwrap();
        let x = [path[1][0] - 0.4, path[1][1] + 0.2];
        for i in 0..2 {
            sum[i] += x[i];
            for j in 0..2 {
                outer[i][j] += x[i] * x[j];
            }
        }
    }
    let nf = n as f64;
    let mean = [sum[0] / nf, sum[1] / nf];
    for i in 0..2 {
        let se = (want.sigma[(i, i)] / nf).sqrt();
        assert!((mean[i] - want.mu[i]).abs() < 3.0 * se, "mean {i}: {} vs {}", mean[i], want.mu[i]);
        for j in 0..2 {
            let cov = outer[i][j] / nf - mean[i] * mean[j];
            let s = &want.sigma;
            let se = ((s[(i, i)] * s[(j, j)] + s[(i, j)] * s[(i, j)]) / nf).sqrt();
            assert!((cov - s[(i, j)]).abs() < 3.0 * se, "cov {i}{j}: {cov} vs {}", s[(i, j)]);
        }
    }
}

fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn increments_do_not_depend_on_grid_refinement() {
    let d = benchmark(&matrix_a2(), 0.5);
    let sched = [ControlSegment::new(0.0, 1.0, vec![0.3])];
    let fine: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
    let n = 10_000;
    let (mut coarse_x, mut fine_x) = (vec![Vec::new(); 2], vec![Vec::new(); 2]);
    let mut rng_a = stream(21, &[0]);
    let mut rng_b = stream(21, &[1]);
    for _ in 0..n {
        let a = simulate_linear_sde(&d, &sched, &[0.0, 0.0], &[0.0, 1.0], &mut rng_a).unwrap();
        let b = simulate_linear_sde(&d, &sched, &[0.0, 0.0], &fine, &mut rng_b).unwrap();
        for k in 0..2 {
            coarse_x[k].push(a[1][k]);
            fine_x[k].push(b[10][k]);
        }
    }
    // two-sample Kolmogorov-Smirnov at level 0.01
    let critical = 1.628 * (2.0 / n as f64).sqrt();
    for k in 0..2 {
        let stat = ks_statistic(coarse_x[k].clone(), fine_x[k].clone());
        assert!(stat < critical, "coordinate {k}: KS {stat} ≥ {critical}");
    }
}

#[test]
fn ou_stationary_variance_matches_lyapunov() {
    let cfg = GeneratorConfig::preset("ou").unwrap();
    let ds = gen_ou(&GeneratorConfig { n_traj: 1, ..cfg }).unwrap();
    let gt = &ds.header.ground_truth;
    let a = Mat::try_from_rows(&gt.a).unwrap();
    let w = Mat::try_from_rows(gt.wiener_cov.as_ref().unwrap()).unwrap();
    let want = lyapunov(&a, &w);
    let d = SpectralDynamics::from_matrix(&a, w, vec![0.0; 2], Mat::zeros(2, 0), vec![false; 2], Mat::zeros(2, 2)).unwrap();
    let grid: Vec<f64> = (0..=60_000).map(|i| i as f64).collect();
    let path = simulate_linear_sde(&d, &[], &[0.0, 0.0], &grid, &mut stream(5, &[])).unwrap();
    let tail = &path[100..];
    let nf = tail.len() as f64;
    for i in 0..2 {
        for j in 0..2 {
            let mi = tail.iter().map(|x| x[i]).sum::<f64>() / nf;
            let mj = tail.iter().map(|x| x[j]).sum::<f64>() / nf;
            let c = tail.iter().map(|x| (x[i] - mi) * (x[j] - mj)).sum::<f64>() / nf;
            assert!((c - want[(i, j)]).abs() <= 0.05 * want[(i, j)].abs(), "({i},{j}) {c} vs {}", want[(i, j)]);
        }
    }
    let x0 = Mat::try_from_rows(&gt.x0_cov).unwrap();
    assert!(x0.max_abs_diff(&want) < 1e-12);
}

#[test]
fn ou_sampling_averages_six_observations() {
    let cfg = GeneratorConfig::preset("ou").unwrap();
    let ds = gen_ou(&GeneratorConfig { seed: 3, ..cfg }).unwrap();
    assert_eq!(ds.trajectories.len(), 400);
    let mean = ds.mean_obs_count();
    assert!((5.5..=6.6).contains(&mean), "mean count {mean}");
}

#[test]
fn spectrum_counts_cover_the_range() {
    let ds = gen_spectrum(&GeneratorConfig { seed: 2, ..GeneratorConfig::preset("spectrum-a1").unwrap() }).unwrap();
    assert_eq!(ds.trajectories.len(), 200);
    let mut seen = [0usize; 21];
    for t in &ds.trajectories {
        seen[t.observations.len()] += 1;
    }
    assert!(seen[..5].iter().all(|&c| c == 0));
    assert!(seen[5..].iter().all(|&c| c > 0));
}

fn mean_path(a: &Mat<f64>, times: &[f64]) -> Vec<Vec<f64>> {
    let d = benchmark(a, 0.0);
    let mut b = GaussianBelief::new(vec![1.0, 0.0], Mat::zeros(2, 2), 0.0);
    times
        .iter()
        .map(|&t| {
            b = propagate(&b, &d, &[], t, false).unwrap();
            b.mu.clone()
        })
        .collect()
}

#[test]
fn imaginary_spectrum_keeps_oscillating() {
    let times: Vec<f64> = (0..=4000).map(|i| i as f64 * 0.01).collect();
    let path = mean_path(&matrix_a3(), &times);
    let early = path[..400].iter().map(|x| x[0].abs()).fold(0.0, f64::max);
    let late = path[3600..].iter().map(|x| x[0].abs()).fold(0.0, f64::max);
    assert!((late / early - 1.0).abs() < 1e-3, "envelope {early} → {late}");
    let crossings = path.windows(2).filter(|w| w[0][0].signum() != w[1][0].signum()).count();
    assert!(crossings > 20);
}

#[test]
fn real_spectrum_decays_monotonically() {
    let times: Vec<f64> = (0..=2000).map(|i| i as f64 * 0.01).collect();
    let path = mean_path(&matrix_a2(), &times);
    let norms: Vec<f64> = path.iter().map(|x| (x[0] * x[0] + x[1] * x[1]).sqrt()).collect();
    assert!(norms.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn rotation_spectrum_decays_with_oscillation() {
    let times: Vec<f64> = (0..=1000).map(|i| i as f64 * 0.01).collect();
    let path = mean_path(&matrix_a1(), &times);
    assert!(path.last().unwrap()[0].abs() < 1e-2);
    let crossings = path.windows(2).filter(|w| w[0][0].signum() != w[1][0].signum()).count();
    assert!(crossings >= 4);
}

#[test]
fn dosing_without_drug_relaxes_to_the_offset() {
    let cfg = DosingEnvConfig {
        process_noise: 0.0,
        observation_noise: 0.0,
        ..DosingEnvConfig::default()
    };
    for seed in 0..5u64 {
        let mut rng = stream(seed, &[]);
        let (mut env, _) = DosingEnv::reset(&cfg, &mut rng).unwrap();
        let target = env.dynamics().alpha[0];
        let mut last = None;
        for _ in 0..80 {
            if let Some(o) = env.step(0.0, 1.0).unwrap().observation {
                last = Some(o.y[0]);
            }
        }
        assert!((last.unwrap() - target).abs() < 1e-6);
    }
}

#[test]
fn dosing_episodes_are_reproducible() {
    let cfg = DosingEnvConfig::default();
    let run = || {
        let mut env = DosingEnv::reset_with_context(&cfg, &[0.2, -0.4, 0.9], 77).unwrap();
        (0..30).map(|i| env.step((i % 3) as f64 * 0.5, 0.7).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn drug_raises_the_observable() {
    let cfg = DosingEnvConfig {
        process_noise: 0.0,
        ..DosingEnvConfig::default()
    };
    let mut idle = DosingEnv::reset_with_context(&cfg, &[0.0; 3], 4).unwrap();
    let mut dosed = DosingEnv::reset_with_context(&cfg, &[0.0; 3], 4).unwrap();
    let (mut ri, mut rd) = (0.0, 0.0);
    for _ in 0..20 {
        ri += idle.step(0.0, 1.0).unwrap().reward;
        rd += dosed.step(1.0, 1.0).unwrap().reward;
    }
    assert!(rd > ri, "dosed reward {rd} vs idle {ri}");
}
