//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the lines print in order and the exit status reflects them all.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use metricsel::criterion::{selection_criterion, selection_criterion_dense, TestCovariance};
use metricsel::diagnostics::{ess_bulk, split_rhat, summarize, MultiChainSummary};
use metricsel::linalg::{dense_sym_eig, lanczos_extreme_eigs, DenseOperator};
use metricsel::metrics::{wishart_blend, LowRankMetric};
use metricsel::sampler::{leapfrog_step, PhaseState, Point};
use metricsel::targets::{CountingTarget, Gaussian};
use metricsel::warmup::{
    run_chain, run_warmup, AdaptationConfig, AdaptationMode, ChainResult, WarmupSchedule,
};
use metricsel::{Candidate, Metric, TargetDensity};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn start_point(d: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0))
}

fn run_chains(target: &dyn TargetDensity, config: &AdaptationConfig, chains: u64, draws: usize, seed: u64) -> Vec<ChainResult> {
    (0..chains)
        .map(|k| run_chain(target, config, draws, &mut stream(seed, k)).expect("chain runs"))
        .collect()
}

fn summary_of(chains: &[ChainResult], target: &dyn TargetDensity) -> MultiChainSummary {
    let draws: Vec<&DMatrix<f64>> = chains.iter().map(|c| &c.draws).collect();
    let grads = chains.iter().map(|c| c.sampling_gradient_evaluations).sum();
    summarize(&draws, &target.parameter_names(), grads, 0.0).expect("summary")
}

fn op_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.amax()
}

fn stability_limit() -> Check {
    let target = Gaussian::standard(1);
    let metric = Metric::identity(1);
    let max_excursion = |eps: f64| {
        let start = Point::new(&target, DVector::from_element(1, 1.0));
        let mut state = PhaseState::new(start, DVector::zeros(1));
        let mut max_q: f64 = 1.0;
        for _ in 0..10_000 {
            state = leapfrog_step(&target, &metric, &state, eps);
            max_q = max_q.max(state.q[0].abs());
            if max_q > 1e6 {
                break;
            }
        }
        max_q
    };
    let (stable, unstable) = (max_excursion(1.9), max_excursion(2.05));
    ensure(stable < 10.0, format!("eps 1.9 reached |q| = {stable:.3e}"))?;
    ensure(unstable > 1e6, format!("eps 2.05 stayed below {unstable:.3e}"))?;
    Ok(format!("max |q| {stable:.3} at 1.9, {unstable:.2e} at 2.05"))
}

fn matched_metric() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for (d, seed) in [(2, 21), (10, 22), (50, 23)] {
        let target = Gaussian::spiked(d, &[40.0, 6.0], 0.5, false, seed).map_err(|e| e.to_string())?;
        let sigma = target.covariance().clone();
        let metric = Metric::dense_from_covariance(&sigma).map_err(|e| e.to_string())?;
        let q = start_point(d, &mut rng);
        let lanczos = selection_criterion(&metric, &target, &q, &TestCovariance::population(&sigma), &mut rng)
            .map_err(|e| e.to_string())?
            .value;
        let dense = selection_criterion_dense(&metric, target.hessian(), &sigma).map_err(|e| e.to_string())?;
        for v in [lanczos, dense] {
            ensure((v - 1.0).abs() <= 1e-4, format!("d = {d}: criterion {v}"))?;
            worst = worst.max((v - 1.0).abs());
        }
    }
    Ok(format!("max |criterion - 1| = {worst:.1e} over d = 2, 10, 50"))
}

fn closed_form() -> Check {
    let rho = 0.9;
    let target = Gaussian::correlated_2d(rho).map_err(|e| e.to_string())?;
    // Σ has eigenvalues 1 ± ρ and H their reciprocals.
    let expected = ((1.0 + rho) / (1.0 - rho)).sqrt();
    ensure((expected - 19f64.sqrt()).abs() < 1e-12, "oracle disagrees with sqrt(19)")?;
    let metric = Metric::identity(2);
    let dense = selection_criterion_dense(&metric, target.hessian(), target.covariance()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lanczos = selection_criterion(
        &metric,
        &target,
        &DVector::from_vec(vec![0.3, -0.7]),
        &TestCovariance::population(target.covariance()),
        &mut rng,
    )
    .map_err(|e| e.to_string())?
    .value;
    ensure((dense - expected).abs() <= 1e-6, format!("dense path {dense}"))?;
    ensure((lanczos - expected).abs() <= 1e-4, format!("Lanczos path {lanczos}"))?;
    Ok(format!("dense {dense:.10}, Lanczos {lanczos:.10}, expected {expected:.10}"))
}

fn selection_ordering() -> Check {
    let target = Gaussian::spiked(25, &[100.0, 50.0], 1.0, false, 4).map_err(|e| e.to_string())?;
    let config = AdaptationConfig {
        schedule: WarmupSchedule { init: 75, windows: vec![300, 300], final_draws: 50 },
        ..Default::default()
    };
    let mut ratios = Vec::new();
    for k in 0..8 {
        let mut rng = stream(40, k);
        let q = start_point(25, &mut rng);
        let warm = run_warmup(&target, &config, &q, &mut rng).map_err(|e| format!("chain {k}: {e}"))?;
        let last = warm.window_reports.last().ok_or("no window report")?;
        ensure(last.chosen != Candidate::Diagonal, format!("chain {k} chose diagonal"))?;
        let diagonal = last
            .scores
            .iter()
            .find(|s| s.candidate == Candidate::Diagonal)
            .ok_or("diagonal was not scored")?
            .criterion;
        ensure(
            3.0 * last.chosen_criterion <= diagonal,
            format!("chain {k}: {} scored {:.3} against diagonal {diagonal:.3}", last.chosen, last.chosen_criterion),
        )?;
        ratios.push(diagonal / last.chosen_criterion);
    }
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!("8/8 chains chose dense or low-rank; diagonal/chosen criterion >= {lo:.2}"))
}

fn short_warmup_advantage() -> Check {
    let target = Gaussian::spiked(50, &[100.0, 50.0], 1.0, true, 5).map_err(|e| e.to_string())?;
    let run = |candidate: Candidate| {
        let config = AdaptationConfig {
            schedule: WarmupSchedule::short(100),
            mode: AdaptationMode::Fixed(candidate),
            ..Default::default()
        };
        run_chains(&target, &config, 8, 1000, 50)
    };
    let lowrank = run(Candidate::LowRank { rank: 2, blend: false });
    let dense = run(Candidate::Dense);
    let diagonal = run(Candidate::Diagonal);

    let wins = lowrank
        .iter()
        .zip(&dense)
        .filter(|(l, d)| match (l.final_criterion, d.final_criterion) {
            (Some(l), Some(d)) => l <= d,
            _ => false,
        })
        .count();
    let per_grad_lowrank = summary_of(&lowrank, &target).ess_per_gradient;
    let per_grad_diagonal = summary_of(&diagonal, &target).ess_per_gradient;
    let detail = format!(
        "lowrank2 <= dense criterion in {wins}/8 chains; min ESS per gradient {per_grad_lowrank:.2e} vs diagonal {per_grad_diagonal:.2e}"
    );
    ensure(wins >= 7, detail.clone())?;
    ensure(per_grad_lowrank >= 3.0 * per_grad_diagonal, detail.clone())?;
    Ok(detail)
}

fn wishart_limits() -> Check {
    let d = 5;
    let nu0 = d as f64 + 5.0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = normal_matrix(d, d, &mut rng);
    let sigma0 = &a * a.transpose() + DMatrix::identity(d, d);
    let empty = DMatrix::zeros(0, d);
    let at_zero = wishart_blend(&sigma0, &empty, nu0).map_err(|e| e.to_string())?;
    ensure(at_zero == sigma0, "blend at n = 0 differs from the prior")?;

    let b = normal_matrix(d, d, &mut rng);
    let truth = &b * b.transpose() + DMatrix::identity(d, d) * 0.5;
    let chol = truth.clone().cholesky().ok_or("covariance is not SPD")?.l();
    let n = 100_000;
    let draws = (chol * normal_matrix(d, n, &mut rng)).transpose();
    let mean = draws.row_mean();
    let mut centered = draws.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let s = centered.transpose() * &centered / (n as f64 - 1.0);
    let blended = wishart_blend(&sigma0, &draws, nu0).map_err(|e| e.to_string())?;
    let rel = op_norm(&(&blended - &s)) / op_norm(&s);
    ensure(rel <= 0.02, format!("relative operator-norm gap {rel:.3e}"))?;
    Ok(format!("exact at n = 0; relative gap {rel:.2e} at n = 1e5"))
}

fn lowrank_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let d = rng.random_range(1..=20);
        let k = rng.random_range(0..=d.min(6));
        let basis = normal_matrix(d, k.max(1), &mut rng).qr().q().columns(0, k).into_owned();
        let tail = rng.random_range(0.05..3.0);
        let mut values: Vec<f64> = (0..k).map(|_| tail + rng.random_range(0.0..80.0)).collect();
        values.sort_by(|a, b| b.total_cmp(a));
        let scale = DVector::from_fn(d, |_, _| rng.random_range(0.1..10.0));
        let lr = LowRankMetric::new(basis.clone(), values.clone(), tail, scale.clone())
            .map_err(|e| format!("instance {i}: {e}"))?;
        let metric = Metric::LowRank(lr);

        let mut a = DMatrix::identity(d, d) * tail;
        for (j, &v) in values.iter().enumerate() {
            a += (v - tail) * basis.column(j) * basis.column(j).transpose();
        }
        let s = DMatrix::from_diagonal(&scale.map(|x| 1.0 / x.sqrt()));
        let m = &s * a * &s;
        let oracle = m.try_inverse().ok_or(format!("instance {i}: oracle inverse failed"))?;
        let mut structured = DMatrix::zeros(d, d);
        for j in 0..d {
            let e = DVector::from_fn(d, |r, _| if r == j { 1.0 } else { 0.0 });
            structured.set_column(j, &metric.inverse_multiply(&e));
        }
        let err = (&structured - &oracle).amax();
        ensure(err <= 1e-8, format!("instance {i} (d = {d}, k = {k}): max abs error {err:.3e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("200 instances, max abs error {worst:.1e}"))
}

fn lanczos_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let g = normal_matrix(100, 100, &mut rng);
        let a = (&g + g.transpose()) * 0.5;
        let pairs = lanczos_extreme_eigs(&DenseOperator(&a), 4, 1e-10, None, &mut rng).map_err(|e| e.to_string())?;
        let exact = dense_sym_eig(&a).map_err(|e| e.to_string())?;
        let mut got = pairs.values.clone();
        let mut want = exact.values[..4].to_vec();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            let rel = (g - w).abs() / w.abs();
            ensure(rel <= 1e-6, format!("matrix {i}: {g} against {w}"))?;
            worst = worst.max(rel);
        }
    }
    Ok(format!("100 matrices, max relative error {worst:.1e}"))
}

fn correlated_5d() -> Gaussian {
    let scales = [1.0, 2.0, 0.5, 3.0, 1.0];
    let cov = DMatrix::from_fn(5, 5, |i, j| scales[i] * scales[j] * 0.8f64.powi((i as i32 - j as i32).abs()));
    Gaussian::new("ar5", DVector::from_vec(vec![1.0, -1.0, 0.0, 2.0, 0.5]), cov).expect("valid covariance")
}

fn sampling_correctness() -> Check {
    let target = correlated_5d();
    let chains = run_chains(&target, &AdaptationConfig::default(), 4, 2000, 90);
    let summary = summary_of(&chains, &target);
    let divergences: usize = chains.iter().map(|c| c.divergences).sum();
    let mut worst_z: f64 = 0.0;
    for (p, mu) in summary.parameters.iter().zip(target.mean().iter()) {
        ensure(p.rhat < 1.01, format!("{}: R-hat {:.4}", p.name, p.rhat))?;
        let mcse = p.sd / p.ess_bulk.sqrt();
        let z = (p.mean - mu).abs() / mcse;
        ensure(z <= 4.0, format!("{}: mean {:.4} is {z:.2} MCSE from {mu}", p.name, p.mean))?;
        worst_z = worst_z.max(z);
    }
    ensure(divergences <= 2, format!("{divergences} divergences"))?;
    Ok(format!(
        "max R-hat {:.4}, max |mean error| {worst_z:.2} MCSE, {divergences} divergences",
        summary.max_rhat
    ))
}

fn diagnostics_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let phi: f64 = 0.5;
    let ar1: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let mut x: f64 = StandardNormal.sample(&mut rng);
            (0..25_000)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x = phi * x + (1.0 - phi * phi).sqrt() * e;
                    x
                })
                .collect()
        })
        .collect();
    // Integrated autocorrelation time of AR(1) is (1 + φ) / (1 - φ) = 3.
    let ess = ess_bulk(&ar1).map_err(|e| e.to_string())?;
    let expected = 100_000.0 / 3.0;
    ensure((ess / expected - 1.0).abs() <= 0.15, format!("AR(1) ESS {ess:.0}, expected {expected:.0}"))?;

    let offset: Vec<Vec<f64>> = (0..4)
        .map(|c| {
            let shift = if c < 2 { 0.0 } else { 3.0 };
            (0..1000).map(|_| shift + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect()
        })
        .collect();
    let rhat = split_rhat(&offset).map_err(|e| e.to_string())?;
    ensure(rhat > 1.5, format!("offset chains R-hat {rhat:.3}"))?;

    let warped: Vec<Vec<f64>> = ar1.iter().map(|c| c.iter().map(|x| x.exp() + x.powi(3)).collect()).collect();
    let ess_gap = (ess_bulk(&warped).map_err(|e| e.to_string())? - ess).abs();
    let rhat_gap = (split_rhat(&warped).map_err(|e| e.to_string())? - split_rhat(&ar1).map_err(|e| e.to_string())?).abs();
    ensure(ess_gap <= 1e-12 && rhat_gap <= 1e-12, format!("monotone transform moved ESS by {ess_gap:e}, R-hat by {rhat_gap:e}"))?;
    Ok(format!("AR(1) ESS {ess:.0} (expected {expected:.0}), offset R-hat {rhat:.2}, transform gap {:.0e}", ess_gap.max(rhat_gap)))
}

fn schedule_fidelity() -> Check {
    let target = correlated_5d();
    let counting = CountingTarget::new(&target);
    let config = AdaptationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = start_point(5, &mut rng);
    let warm = run_warmup(&counting, &config, &q, &mut rng).map_err(|e| e.to_string())?;
    let ledger = &warm.ledger;
    ensure(ledger.init_transitions == 75, format!("init ran {}", ledger.init_transitions))?;
    ensure(ledger.window_transitions == [25, 50, 100, 200, 500], format!("windows ran {:?}", ledger.window_transitions))?;
    ensure(ledger.final_transitions == 50, format!("final ran {}", ledger.final_transitions))?;
    ensure(ledger.warmup_transitions() == 1000, format!("{} warmup transitions", ledger.warmup_transitions()))?;
    ensure(warm.stats.len() == 1000 && warm.draws.nrows() == 1000, "transition records do not number 1000")?;
    let leapfrog: u64 = warm.stats.iter().map(|s| s.gradient_evaluations).sum();
    ensure(leapfrog == ledger.warmup_leapfrog_gradients, "leapfrog gradients disagree with the ledger")?;
    let counted = counting.gradient_evaluations();
    ensure(
        counted == ledger.warmup_gradients(),
        format!("target saw {counted} gradients, ledger recorded {}", ledger.warmup_gradients()),
    )?;
    Ok(format!("1000 transitions; {counted} gradients ({leapfrog} in leapfrog steps) match the ledger"))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |out: &str| {
        Command::new(env!("CARGO_BIN_EXE_metricsel"))
            .args([
                "sample",
                "--seed",
                "12",
                "--output",
                out,
                "target.kind=spiked",
                "target.dim=6",
                "target.leading=[20.0]",
                "warmup.init=75",
                "warmup.windows=[25, 50]",
                "warmup.final=50",
                "draws=200",
                "groups=2",
            ])
            .current_dir(dir.path())
            .output()
            .map_err(|e| e.to_string())
    };
    for out in ["first", "second"] {
        let result = run(out)?;
        ensure(result.status.success(), String::from_utf8_lossy(&result.stderr).into_owned())?;
    }
    let same = |name: &str| -> Result<(), String> {
        let read = |sub: &str| std::fs::read(dir.path().join(sub).join(name)).map_err(|e| e.to_string());
        ensure(read("first")? == read("second")?, format!("{name} differs"))
    };
    let mut files = vec!["report.json".to_string()];
    files.extend((0..8).map(|k| format!("chain_{k}.csv")));
    for name in &files {
        same(name)?;
    }
    ensure(Path::new(&dir.path().join("first/chain_7.csv")).exists(), "missing chain output")?;
    Ok(format!("{} files byte-identical across two runs", files.len()))
}

fn main() {
    let criteria: [(&str, Option<u64>, fn() -> Check); 12] = [
        ("leapfrog stability limit", Some(1), stability_limit),
        ("matched-metric criterion", Some(5), matched_metric),
        ("criterion closed form", None, closed_form),
        ("selection ordering", Some(120), selection_ordering),
        ("short-warmup advantage", Some(300), short_warmup_advantage),
        ("Wishart limits", Some(10), wishart_limits),
        ("low-rank algebra", Some(10), lowrank_algebra),
        ("Lanczos oracle equivalence", Some(30), lanczos_oracle),
        ("sampling correctness", Some(120), sampling_correctness),
        ("diagnostics oracles", Some(30), diagnostics_oracles),
        ("warmup schedule fidelity", None, schedule_fidelity),
        ("determinism", None, determinism),
    ];
    let mut failures = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let clock = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = clock.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(secs)) if elapsed > Duration::from_secs(secs) => {
                Err(format!("took {:.1}s, budget {secs}s", elapsed.as_secs_f64()))
            }
            (o, _) => o,
        };
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("acceptance {:>2} {status} {name}: {detail} [{:.2}s]", i + 1, elapsed.as_secs_f64());
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
