use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use dtr_core::glm::{fit_logistic, FitOptions};
use dtr_core::logrank::{self, PairedSurvival};
use dtr_core::msm::{build_person_time, fit_msm};
use dtr_core::regimen::{clone_cohort, CloneOptions};
use dtr_core::simulator::{calibrate_rates, replication_rng, run_replication, simulate_cohort, BiasLevel, SelectionModel};
use dtr_core::weights::{compute_stabilized_weights, fit_adherence_models};
use dtr_core::{Cohort, EffectForm, MsmSpec, SimConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenario() -> (SimConfig, Vec<f64>, Cohort) {
    let cfg = SimConfig { n_per_regimen: 300, ..SimConfig::desk(BiasLevel::Severe) };
    let rates = calibrate_rates(&cfg).unwrap().rates;
    let selection = SelectionModel::new(&cfg, &rates, cfg.gamma());
    let cohort = simulate_cohort(&mut replication_rng(cfg.seed, 0), &cfg, &rates, &selection).unwrap().cohort;
    (cfg, rates, cohort)
}

fn glm(c: &mut Criterion) {
    let (n, p) = (20_000, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = DMatrix::<f64>::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
    let y: Vec<f64> = (0..n).map(|i| f64::from(rng.random_bool(1.0 / (1.0 + (0.5 - 0.3 * x[(i, 1)]).exp())))).collect();
    let w = vec![1.0; n];
    let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    c.bench_function("fit_logistic 20000x6", |b| b.iter(|| fit_logistic(&x, &names, &y, &w, &FitOptions::default()).unwrap()));
}

fn stages(c: &mut Criterion) {
    let (cfg, rates, cohort) = scenario();
    let grid = cfg.regimen_grid().unwrap();
    let opts = CloneOptions::default();
    c.bench_function("clone_cohort 1800 subjects x 6", |b| b.iter(|| clone_cohort(&cohort, &grid, 0, &opts)));

    let mut clones = clone_cohort(&cohort, &grid, 0, &opts);
    let spec = cfg.weight_spec();
    c.bench_function("adherence weights", |b| {
        b.iter(|| {
            let models = fit_adherence_models(&clones, &cohort, &spec).unwrap();
            compute_stabilized_weights(&clones, &cohort, &models).unwrap()
        })
    });

    let models = fit_adherence_models(&clones, &cohort, &spec).unwrap();
    let table = compute_stabilized_weights(&clones, &cohort, &models).unwrap();
    for (row, w) in clones.rows.iter_mut().zip(&table.sw) {
        row.w_total = Some(*w);
    }
    let data = PairedSurvival::from_clones(&clones, &cohort, 4, 3, true).unwrap();
    c.bench_function("weighted log-rank 4 vs 3", |b| b.iter(|| logrank::test(&data).unwrap()));

    let msm = MsmSpec::new(EffectForm::Factor, &grid, 0);
    c.bench_function("factor MSM fit", |b| {
        b.iter_batched(|| build_person_time(&clones, &cohort, true).unwrap(), |pt| fit_msm(&pt, &msm).unwrap(), BatchSize::LargeInput)
    });

    let mut group = c.benchmark_group("simulation");
    group.sample_size(10);
    group.bench_function("one replication, n_k = 300", |b| b.iter(|| run_replication(&cfg, &rates, 1).unwrap()));
    group.finish();
}

criterion_group!(benches, glm, stages);
criterion_main!(benches);
