use uhlm_core::backend::{BackendConfig, PlantedLinear, SyntheticPair, SyntheticPairConfig};
use uhlm_core::calibration::{CalibrationModel, UncertaintyHistogram};
use uhlm_core::engine::{run_generation, EngineConfig, Method};
use uhlm_core::math::total_variation;
use uhlm_core::uncertainty::PerturbationConfig;
use uhlm_core::{Error, RandomStream};

fn mean_beta(pair: &SyntheticPair, n: usize, label: &str) -> f64 {
    (0..n)
        .map(|i| {
            let (x, y) = pair.pair(&mut RandomStream::new(11, format!("{label}/{i}"))).unwrap();
            total_variation(x.as_slice(), y.as_slice())
        })
        .sum::<f64>()
        / n as f64
}

fn pair(cfg: SyntheticPairConfig) -> SyntheticPair {
    SyntheticPair::new(&cfg, 0, &PerturbationConfig::default()).unwrap()
}

#[test]
fn full_coupling_never_rejects() {
    let cfg = SyntheticPairConfig { vocab_size: 128, coupling: 1.0, ..Default::default() };
    let pair = pair(cfg).into_backends();
    let run = EngineConfig { method: Method::Hlm, seed: 4, rounds: Some(500), oracle_mode: true, ..Default::default() };
    let out = run_generation(&run, &pair).unwrap();
    assert!(out.records.iter().all(|r| r.beta() == Some(0.0)));
    assert_eq!(out.summary.mean_beta, Some(0.0));
}

#[test]
fn rejection_falls_with_coupling() {
    let mut last = f64::INFINITY;
    for c in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let m = mean_beta(&pair(SyntheticPairConfig { vocab_size: 128, coupling: c, ..Default::default() }), 300, "grid");
        assert!(m < last, "coupling {c}: {m} >= {last}");
        last = m;
    }
    assert_eq!(last, 0.0);
}

#[test]
fn planted_rejection_mean() {
    let cfg = SyntheticPairConfig { planted_rejection_mean: Some(0.301), ..Default::default() };
    let p = pair(cfg);
    let c = p.coupling().unwrap();
    assert!(c > 0.0 && c < 1.0);
    let m = mean_beta(&p, 10_000, "planted");
    assert!((0.286..=0.316).contains(&m), "mean beta {m}");
}

#[test]
fn uncoupled_sparse_pairs_nearly_always_reject() {
    // for independent Dir(α) draws over a large vocabulary the mean TV tends to
    // 1 - E[min(G, G')]/α with G, G' ~ Gamma(α); quadrature gives these limits
    for (alpha, limit) in [(0.1, 0.883151), (0.05, 0.936617)] {
        let cfg = SyntheticPairConfig { vocab_size: 32_000, dirichlet_alpha: alpha, coupling: 0.0, ..Default::default() };
        let m = mean_beta(&pair(cfg), 1000, "sparse");
        assert!((m - limit).abs() < 5e-3, "alpha {alpha}: mean beta {m}");
    }
}

#[test]
fn infeasible_plant_is_reported() {
    let cfg = SyntheticPairConfig {
        vocab_size: 64,
        dirichlet_alpha: 50.0,
        planted_rejection_mean: Some(0.99),
        ..Default::default()
    };
    let err = SyntheticPair::new(&cfg, 0, &PerturbationConfig::default()).unwrap_err();
    assert!(matches!(err, Error::CalibrationInfeasible { .. }), "{err}");
}

#[test]
fn pairs_depend_only_on_the_sequence() {
    let backends = pair(SyntheticPairConfig { vocab_size: 64, ..Default::default() }).into_backends();
    let seq = [uhlm_core::TokenId(3), uhlm_core::TokenId(9)];
    let a = backends.slm.next_logits(&seq).unwrap();
    let b = backends.slm.next_logits(&seq).unwrap();
    assert_eq!(a, b);
    let other = backends.slm.next_logits(&seq[..1]).unwrap();
    assert_ne!(a, other);
}

#[test]
fn planted_line_is_recovered_by_calibration() {
    let plant = PlantedLinear { a: 0.82, b: -0.06, delta: Some(0.301), margin_max: None };
    let backend = BackendConfig::Synthetic(SyntheticPairConfig { planted_linear: Some(plant), ..Default::default() });
    let cfg = EngineConfig {
        method: Method::Hlm,
        seed: 21,
        rounds: Some(10_000),
        oracle_mode: true,
        ..Default::default()
    };
    let pair = backend.build(cfg.seed, &cfg.perturbation).unwrap();
    let out = run_generation(&cfg, &pair).unwrap();
    let samples: Vec<_> = out.records.iter().filter_map(|r| r.calibration_sample()).collect();
    assert_eq!(samples.len(), 10_000);
    let model = CalibrationModel::fit(&samples, UncertaintyHistogram::lattice_edges(20)).unwrap();
    assert!((0.80..=0.84).contains(&model.a), "a {}", model.a);
    assert!((-0.08..=-0.04).contains(&model.b), "b {}", model.b);
    assert!((0.29..=0.312).contains(&model.delta), "delta {}", model.delta);
}
