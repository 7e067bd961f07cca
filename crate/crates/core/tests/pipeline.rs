use netfx::evalkit::{evaluate_model, mae_ate, pearson, pehe, EvalConfig, TrainedModel, ZEval};
use netfx::synthgen::{generate_benchmark, load_bundle, write_bundle, GeneratorConfig, GraphSource};
use netfx::trainer::{fit, TrainConfig};
use proptest::prelude::*;

fn quick_train(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        outer_epochs: 40,
        pi_epochs_per_outer: 2,
        ..Default::default()
    }
}

#[test]
fn disk_round_trip_does_not_change_training() {
    let gen = GeneratorConfig {
        graph: GraphSource::BarabasiAlbert { n: 80, m: 2 },
        dim: 5,
        ..Default::default()
    };
    let bundle = generate_benchmark(&gen, 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), &bundle, None).unwrap();
    let reloaded = load_bundle(dir.path()).unwrap();

    let cfg = quick_train(3);
    let a = fit(&bundle.dataset, &cfg).unwrap();
    let b = fit(&reloaded.dataset, &cfg).unwrap();
    assert_eq!(a.model.params, b.model.params);
    let ma = evaluate_model(&TrainedModel::new(&a.model, &bundle).unwrap(), &bundle, &a.split, &ZEval::Realized, 0);
    let mb = evaluate_model(&TrainedModel::new(&b.model, &reloaded).unwrap(), &reloaded, &b.split, &ZEval::Realized, 0);
    assert_eq!(ma.unwrap(), mb.unwrap());
}

#[test]
fn training_improves_on_the_initial_model() {
    let gen = GeneratorConfig {
        graph: GraphSource::ErdosRenyi { n: 150, p: 0.05 },
        dim: 6,
        ..Default::default()
    };
    let bundle = generate_benchmark(&gen, 4).unwrap();
    let untrained = fit(&bundle.dataset, &TrainConfig { outer_epochs: 1, ..quick_train(1) }).unwrap();
    let trained = fit(&bundle.dataset, &TrainConfig { outer_epochs: 150, ..quick_train(1) }).unwrap();
    let score = |f: &netfx::trainer::FitResult| {
        let m = TrainedModel::new(&f.model, &bundle).unwrap();
        evaluate_model(&m, &bundle, &f.split, &EvalConfig::default().z_eval, 0).unwrap()
    };
    let (before, after) = (score(&untrained), score(&trained));
    assert!(after.out_of_sample.cf_rmse < 0.5 * before.out_of_sample.cf_rmse, "{before:?} {after:?}");
    let last = trained.history.last().unwrap();
    assert!(last.heldout_mse < trained.history[0].heldout_mse);
}

#[test]
fn fixed_exposure_evaluation_uses_the_same_value_everywhere() {
    let gen = GeneratorConfig {
        graph: GraphSource::Cycle { n: 12 },
        dim: 3,
        ..Default::default()
    };
    let bundle = generate_benchmark(&gen, 0).unwrap();
    let f = fit(&bundle.dataset, &TrainConfig { outer_epochs: 3, ..quick_train(0) }).unwrap();
    let m = TrainedModel::new(&f.model, &bundle).unwrap();
    assert!(evaluate_model(&m, &bundle, &f.split, &ZEval::Fixed { value: 0.5 }, 0).is_ok());
    assert!(evaluate_model(&m, &bundle, &f.split, &ZEval::Fixed { value: 1.5 }, 0).is_err());
}

proptest! {
    #[test]
    fn metrics_ignore_node_order(
        rows in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..30),
        shift in 0usize..30,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = rows.iter().copied().unzip();
        let k = shift % a.len();
        let mut pa = a.clone();
        let mut pb = b.clone();
        pa.rotate_left(k);
        pb.rotate_left(k);
        pa.reverse();
        pb.reverse();
        prop_assert!((pehe(&a, &b).unwrap() - pehe(&pa, &pb).unwrap()).abs() < 1e-12);
        prop_assert!((mae_ate(&a, &b).unwrap() - mae_ate(&pa, &pb).unwrap()).abs() < 1e-12);
        match (pearson(&a, &b), pearson(&pa, &pb)) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
            (x, y) => prop_assert_eq!(x.is_none(), y.is_none()),
        }
    }
}
