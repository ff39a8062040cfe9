use gflow::oracle::{oracle_velocity, sample_labelled, GmmSpec, OracleField, TemperedTarget};
use gflow::par::{stream_rng, Execution};
use gflow::sampler::{GuidanceConfig, Solver};
use gflow::stats::mean;
use gflow::Scheduler;

/// Posterior mean of the conditional velocity by self-normalized importance
/// sampling: draw `x1 ~ q`, weight by the path likelihood `N(x; alpha x1, sigma^2)`.
fn mc_velocity(spec: &GmmSpec, sched: Scheduler, t: f64, x: &[f64], n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let v = sched.eval(t).unwrap();
    let mut rng = stream_rng(seed, 0);
    let d = x.len();
    let mut draws = Vec::with_capacity(n);
    let mut logw = Vec::with_capacity(n);
    for _ in 0..n {
        let (x1, _) = spec.sample(&mut rng, None).unwrap();
        let sq: f64 = (0..d).map(|j| (x[j] - v.alpha * x1[j]).powi(2)).sum();
        logw.push(-sq / (2.0 * v.sigma * v.sigma));
        let u: Vec<f64> = (0..d).map(|j| v.alpha_dot * x1[j] + v.sigma_dot * (x[j] - v.alpha * x1[j]) / v.sigma).collect();
        draws.push(u);
    }
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    let ess = total * total / w.iter().map(|v| v * v).sum::<f64>();
    let mut est = vec![0.0; d];
    let mut var = vec![0.0; d];
    for j in 0..d {
        est[j] = draws.iter().zip(&w).map(|(u, wi)| wi * u[j]).sum::<f64>() / total;
        var[j] = draws.iter().zip(&w).map(|(u, wi)| wi * (u[j] - est[j]).powi(2)).sum::<f64>() / total;
    }
    let se = var.iter().map(|v| (v / ess).sqrt()).collect();
    (est, se)
}

#[test]
fn oracle_velocity_matches_monte_carlo_posterior_mean() {
    let spec = GmmSpec::ring(4, 2.0, 0.3).unwrap();
    for sched in Scheduler::ALL {
        for (t, x) in [(0.3, [0.5, -0.4]), (0.6, [1.2, 0.3]), (0.85, [-1.5, 0.2])] {
            let exact = oracle_velocity(&spec, sched, t, &x, None).unwrap();
            let (est, se) = mc_velocity(&spec, sched, t, &x, 400_000, 7);
            for j in 0..2 {
                let z = (exact[j] - est[j]) / se[j].max(1e-12);
                assert!(z.abs() < 5.0, "{sched} t={t} dim {j}: oracle {} vs mc {} +- {}", exact[j], est[j], se[j]);
            }
        }
    }
}

/// For mixtures the guided flow need not reproduce the tempered target; the
/// gap is measured and printed, not asserted.
#[test]
fn report_guided_mixture_gap_to_tempered_target() {
    let spec = GmmSpec::new(vec![
        gflow::oracle::GmmComponent { weight: 0.5, mean: vec![-1.0], variance: 0.25, label: 0 },
        gflow::oracle::GmmComponent { weight: 0.5, mean: vec![1.0], variance: 0.25, label: 1 },
    ])
    .unwrap();
    let field = OracleField::new(spec.clone(), Scheduler::Ot);
    for omega in [1.0, 2.0, 3.0] {
        let target = TemperedTarget::new(omega, &spec, 1).unwrap();
        // mean of the tempered density by quadrature
        let (mut z, mut m) = (0.0, 0.0);
        for i in 0..20_001 {
            let x = -6.0 + 12.0 * i as f64 / 20_000.0;
            let p = target.density(&[x]).unwrap();
            z += p;
            m += p * x;
        }
        let tempered_mean = m / z;
        let g = GuidanceConfig { omega, n_ode: 100, solver: Solver::Midpoint, init_scale: 1.0 };
        let out = sample_labelled(&field, &spec, &g, 20_000, 3, Execution::available_parallel()).unwrap();
        let xs: Vec<f64> = (0..out.labels.len()).filter(|&i| out.labels[i] == 1).map(|i| out.x[[i, 0]]).collect();
        let guided_mean = mean(&xs);
        assert!(guided_mean.is_finite());
        if omega == 1.0 {
            assert!((guided_mean - tempered_mean).abs() < 0.02, "{guided_mean} vs {tempered_mean}");
        }
        println!("omega {omega}: guided mean {guided_mean:.4}, tempered mean {tempered_mean:.4}");
    }
}
