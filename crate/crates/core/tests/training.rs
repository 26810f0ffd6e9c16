use grf::chem::{parse_smiles, Element};
use grf::flow::{GrfModel, ModelConfig};
use grf::graph::{dequantize_with, pad_graph, GraphSpec, MolGraph};
use grf::likelihood::{draw_probes, full_logp, LogDetConfig, ProbeKind};
use grf::linalg::{sigma_max, Matrix};
use grf::seed::{derive_seed, stream_rng};
use grf::train::{adam_step, grad_nll, AdamState, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn graph(smiles: &str, spec: &GraphSpec) -> MolGraph {
    pad_graph(&parse_smiles(smiles).unwrap(), spec).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        graph: GraphSpec::qm9(4),
        mlp_blocks: 2,
        mlp_layers: 2,
        gcn_blocks: 2,
        gcn_layers: 2,
        adjacency_rank: Some(3),
        feature_bias: true,
        ..ModelConfig::toy()
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        graph: GraphSpec::new(1, vec![Element::C], 2).unwrap(),
        mlp_blocks: 1,
        mlp_layers: 1,
        gcn_blocks: 1,
        gcn_layers: 1,
        feature_bias: true,
        ..ModelConfig::toy()
    }
}

/// Central differences of `−log p` with the dequantisation and probe seeds
/// that `grad_nll` uses for a one-sample batch.
fn fd_check(model: &GrfModel, g: &MolGraph, cfg: &LogDetConfig, step_seed: u64, rel: f64) -> usize {
    let seed = derive_seed(step_seed, 0);
    let analytic = grad_nll(model, std::slice::from_ref(g), cfg, step_seed).unwrap();
    let loss = |m: &GrfModel| -full_logp(m, g, cfg, seed).unwrap().total_logp;
    assert!((analytic.loss - loss(model)).abs() < 1e-10);
    let h = 1e-5;
    let mut checked = 0;
    for (k, p) in model.params().iter().enumerate() {
        for idx in 0..p.len() {
            let mut plus = model.clone();
            plus.params_mut()[k].as_mut_slice()[idx] += h;
            let mut minus = model.clone();
            minus.params_mut()[k].as_mut_slice()[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = analytic.grads[k].as_slice()[idx];
            let err = (fd - an).abs();
            assert!(
                err <= rel * fd.abs().max(an.abs()) + 1e-7,
                "param {k}[{idx}]: analytic {an} fd {fd}"
            );
            checked += 1;
        }
    }
    checked
}

#[test]
fn tiny_flow_gradient_matches_finite_differences() {
    let model = GrfModel::new(tiny_config(), 1).unwrap();
    let g = graph("C", model.spec());
    let cfg = LogDetConfig::training();
    for step in 0..3 {
        assert!(fd_check(&model, &g, &cfg, step, 1e-4) > 0);
    }
}

#[test]
fn every_parameter_matches_finite_differences() {
    let model = GrfModel::new(small_config(), 2).unwrap();
    let g = graph("CC=O", model.spec());
    let cfg = LogDetConfig {
        series_terms: 6,
        probes: 2,
        probe: ProbeKind::Gaussian,
        rng_seed: 5,
    };
    let n = fd_check(&model, &g, &cfg, 11, 1e-3);
    assert_eq!(n, model.count_parameters());
}

#[test]
fn zero_weight_gradient_is_the_gaussian_derivative() {
    let config = ModelConfig {
        graph: GraphSpec::qm9(2),
        mlp_blocks: 1,
        mlp_layers: 1,
        gcn_blocks: 0,
        ..ModelConfig::toy()
    };
    let mut model = GrfModel::new(config, 3).unwrap();
    for p in model.params_mut() {
        p.as_mut_slice().fill(0.0);
    }
    let g = graph("CO", model.spec());
    let cfg = LogDetConfig::training();
    let step_seed = 9;
    let bg = grad_nll(&model, std::slice::from_ref(&g), &cfg, step_seed).unwrap();

    let sample = derive_seed(step_seed, 0);
    let dq = dequantize_with(&g, 0.9, &mut stream_rng(sample, 0)).unwrap();
    let x = model.adjacency_to_rows(&dq.adjacency_c).unwrap();
    // the residual is zero, so z = x and only the first series term has a weight derivative
    let probe_seed = derive_seed(derive_seed(cfg.rng_seed, sample), 1);
    let v = &draw_probes(cfg.probe, x.shape(), 1, &mut stream_rng(probe_seed, 0))[0];
    let grad_w = x
        .transpose()
        .matmul(&x)
        .unwrap()
        .sub(&v.transpose().matmul(v).unwrap())
        .unwrap();
    assert!(bg.grads[0].max_abs_diff(&grad_w) < 1e-12);
    assert!(bg.grads[1].max_abs_diff(&x) < 1e-12);

    let d = (x.len() + dq.features_c.len()) as f64;
    let ss: f64 = x
        .as_slice()
        .iter()
        .chain(dq.features_c.as_slice())
        .map(|a| a * a)
        .sum();
    let expected = 0.5 * ss + 0.5 * d * (2.0 * std::f64::consts::PI).ln();
    assert!((bg.loss - expected).abs() < 1e-10);
    assert_eq!(bg.logdet_mean, 0.0);
}

#[test]
fn adam_step_keeps_every_weight_inside_its_budget() {
    let mut model = GrfModel::new(small_config(), 4).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.5,
        ..TrainConfig::toy()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut state = AdamState::new(&model.params());
    for _ in 0..3 {
        let grads: Vec<Matrix> = model
            .params()
            .iter()
            .map(|p| Matrix::random_normal(p.rows(), p.cols(), &mut rng).scale(10.0))
            .collect();
        adam_step(&mut model, &grads, &mut state, &cfg).unwrap();
        for b in model
            .adjacency_blocks
            .iter()
            .map(|b| &b.stack)
            .chain(model.feature_blocks.iter().map(|b| &b.stack))
        {
            let bound = b.per_weight_bound();
            for l in &b.layers {
                for w in &l.weights {
                    assert!(sigma_max(&w.effective()) <= bound * (1.0 + 1e-6));
                }
            }
            assert!(b.lipschitz_bound() < 0.9 + 1e-6);
        }
    }
    assert_eq!(state.t, 3);
}

#[test]
fn one_molecule_loss_goes_down() {
    let model = GrfModel::new(small_config(), 5).unwrap();
    let g = graph("CCO", model.spec());
    let eval = LogDetConfig::training();
    let nll = |m: &GrfModel| {
        -(0..8)
            .map(|s| full_logp(m, &g, &eval, 100 + s).unwrap().total_logp)
            .sum::<f64>()
            / 8.0
    };
    let before = nll(&model);
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 10,
        ..TrainConfig::toy()
    };
    let mut t = Trainer::new(model, cfg).unwrap();
    t.train(&[g.clone()], |_| Ok(())).unwrap();
    assert_eq!(t.history.len(), 10);
    assert!(nll(&t.model) < before);
    assert!(t.history[9].nll < t.history[0].nll);
}

#[test]
fn resume_continues_bit_identically() {
    let spec = small_config().graph;
    let data: Vec<MolGraph> = ["CCO", "C=O", "CN", "OCC", "CC#N", "NC=O"]
        .iter()
        .map(|s| graph(s, &spec))
        .collect();
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 4,
        rng_seed: 8,
        ..TrainConfig::toy()
    };
    let mut straight =
        Trainer::new(GrfModel::new(small_config(), 6).unwrap(), cfg.clone()).unwrap();
    straight.train(&data, |_| Ok(())).unwrap();

    let dir = std::env::temp_dir().join(format!("grf-train-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("trainer.json");
    let mut first = Trainer::new(GrfModel::new(small_config(), 6).unwrap(), cfg).unwrap();
    first
        .train(&data, |t| {
            if t.epochs_completed == 2 {
                t.save(&path)
            } else {
                Ok(())
            }
        })
        .unwrap();
    let mut resumed = Trainer::load(&path).unwrap();
    assert_eq!(resumed.epochs_completed, 2);
    resumed.train(&data, |_| Ok(())).unwrap();
    std::fs::remove_dir_all(&dir).ok();

    assert_eq!(resumed, straight);
    for (a, b) in resumed.history.iter().zip(&straight.history) {
        assert_eq!(a.nll.to_bits(), b.nll.to_bits());
    }
}

#[test]
fn same_seed_same_history() {
    let spec = small_config().graph;
    let data: Vec<MolGraph> = ["CCO", "C=O", "CN"]
        .iter()
        .map(|s| graph(s, &spec))
        .collect();
    let cfg = TrainConfig {
        batch_size: 2,
        epochs: 2,
        ..TrainConfig::toy()
    };
    let run = |seed| {
        let c = TrainConfig {
            rng_seed: seed,
            ..cfg.clone()
        };
        grf::train::train(GrfModel::new(small_config(), 7).unwrap(), &data, &c)
            .unwrap()
            .1
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn budget_override_and_bad_input() {
    let cfg = TrainConfig {
        lipschitz_budget: Some(0.5),
        ..TrainConfig::toy()
    };
    let t = Trainer::new(GrfModel::new(small_config(), 8).unwrap(), cfg).unwrap();
    for b in &t.model.feature_blocks {
        assert!(b.stack.lipschitz_bound() <= 0.5 * (1.0 + 1e-6));
    }
    assert!(grad_nll(&t.model, &[], &LogDetConfig::training(), 0).is_err());
    let bad = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::toy()
    };
    assert!(Trainer::new(GrfModel::new(small_config(), 8).unwrap(), bad).is_err());
}
