use metricsel::diagnostics::split_rhat;
use metricsel::metrics::Metric;
use metricsel::sampler::{hmc_transition, Point};
use metricsel::targets::{Gaussian, TargetDensity};
use metricsel::warmup::{run_chain, AdaptationConfig, AdaptationMode, WarmupSchedule};
use metricsel::{Candidate, CandidateSet};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn correlated_5d() -> Gaussian {
    let scales = [1.0, 2.0, 0.5, 3.0, 1.0];
    let cov = DMatrix::from_fn(5, 5, |i, j| scales[i] * scales[j] * 0.8f64.powi((i as i32 - j as i32).abs()));
    Gaussian::new("ar5", DVector::from_vec(vec![1.0, -1.0, 0.0, 2.0, 0.5]), cov).unwrap()
}

#[test]
fn matched_metric_passes_moment_z_tests() {
    let t = correlated_5d();
    let metric = Metric::dense_from_covariance(t.covariance()).unwrap();
    let (chains, n) = (4, 2000);
    let mut per_chain: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 5];
    for c in 0..chains {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        rng.set_stream(c as u64);
        let mut point = Point::new(&t, t.mean().clone());
        let mut cols = vec![Vec::with_capacity(n); 5];
        for _ in 0..n {
            let (next, _) = hmc_transition(&t, &metric, &point, 0.9, 10, &mut rng).unwrap();
            point = next;
            for j in 0..5 {
                cols[j].push(point.q[j]);
            }
        }
        for j in 0..5 {
            per_chain[j].push(std::mem::take(&mut cols[j]));
        }
    }
    // Matched-metric draws are close to independent, so plain z-tests apply.
    // |z| < 3.29 is the two-sided 0.001 level.
    let total = (chains * n) as f64;
    for j in 0..5 {
        let pooled: Vec<f64> = per_chain[j].concat();
        let mean = pooled.iter().sum::<f64>() / total;
        let var = pooled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (total - 1.0);
        let sigma2 = t.covariance()[(j, j)];
        let z_mean = (mean - t.mean()[j]) / (sigma2 / total).sqrt();
        let z_var = (var - sigma2) / (sigma2 * (2.0 / (total - 1.0)).sqrt());
        assert!(z_mean.abs() < 3.29, "coordinate {j}: mean z {z_mean}");
        assert!(z_var.abs() < 3.29, "coordinate {j}: variance z {z_var}");
        let rhat = split_rhat(&per_chain[j]).unwrap();
        assert!(rhat < 1.01, "coordinate {j}: rhat {rhat}");
    }
}

#[test]
fn short_schedule_runs_for_small_windows() {
    let t = Gaussian::spiked(8, &[30.0], 1.0, true, 4).unwrap();
    for window in [10, 25, 100] {
        for mode in [
            AdaptationMode::Switching(CandidateSet::switching_default()),
            AdaptationMode::Fixed(Candidate::LowRank { rank: 2, blend: true }),
        ] {
            let config = AdaptationConfig { schedule: WarmupSchedule::short(window), mode, ..Default::default() };
            let chain = run_chain(&t, &config, 100, &mut ChaCha8Rng::seed_from_u64(window as u64)).unwrap();
            assert_eq!(chain.draws.nrows(), 100);
            assert_eq!(chain.window_reports.len(), 1);
            assert_eq!(chain.window_reports[0].window_draws, window);
            assert!(chain.draws.iter().all(|x| x.is_finite()));
            assert_eq!(chain.metric.dim(), t.dim());
        }
    }
}

#[test]
fn diagonal_sparsity_forces_diagonal_metrics() {
    let t = Gaussian::equicorrelated(4, 0.9).unwrap();
    let mut config = AdaptationConfig { schedule: WarmupSchedule::short(60), ..Default::default() };
    config.selection.diagonal_sparsity = true;
    let chain = run_chain(&t, &config, 50, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert!(matches!(chain.metric, Metric::Diagonal(_)));
}
