//! End-to-end behaviour of loading, training, checkpointing and simulation.

use std::io::Write;

use nestnet::data::Split;
use nestnet::runtime::{AnytimePredictions, Scheme, SweepInputs};
use nestnet::train::Metric;
use nestnet::{
    evaluate, gen_spiral, load_csv, load_idx, simulate_oracle_all, simulate_oracle_each, sweep, train,
    Checkpoint, CsvSchema, Dataset, DeadlineSweep, Error, Independent, NestedNetwork, NestingMode,
    OptimizerConfig, StagePlan, Strategy, Tensor, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(strategy: Strategy) -> TrainConfig {
    let mut config = TrainConfig::default();
    config.plan = StagePlan::new(NestingMode::Width, 2, 3, 1, 3, 2);
    config.optimizer = OptimizerConfig::with_strategy(strategy);
    config.epochs = 6;
    config.seeds = vec![3, 4];
    if let nestnet::DataConfig::Spiral { train, val, .. } = &mut config.data {
        *train = 240;
        *val = 120;
    }
    config
}

#[test]
fn identical_configs_give_identical_histories() {
    for strategy in Strategy::ALL {
        let config = small_config(strategy);
        let a = train(&config, false).unwrap();
        let b = train(&config, true).unwrap();
        for (x, y) in a.runs.iter().zip(&b.runs) {
            assert_eq!(x.history.to_csv().unwrap(), y.history.to_csv().unwrap(), "{strategy:?}");
            assert_eq!(x.net.params(), y.net.params());
        }
        assert_eq!(a.summary, b.summary);
    }
}

#[test]
fn single_stage_osgd_retraces_sgd() {
    let mut sgd = small_config(Strategy::Sgd);
    sgd.plan.num_stages = 1;
    let mut osgd = sgd.clone();
    osgd.optimizer = OptimizerConfig::with_strategy(Strategy::Osgd);
    let (a, b) = (train(&sgd, false).unwrap(), train(&osgd, false).unwrap());
    for (x, y) in a.runs.iter().zip(&b.runs) {
        let bits = |v: &[f64]| v.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x.net.params()), bits(y.net.params()));
        assert_eq!(x.history.to_csv().unwrap(), y.history.to_csv().unwrap());
    }
}

#[test]
fn greedy_freezes_finished_stages() {
    let mut config = small_config(Strategy::Greedy);
    config.plan.num_stages = 3;
    config.epochs = 9;
    let report = train(&config, false).unwrap();
    for run in &report.runs {
        for stage in 1..3 {
            // Stage `stage` trains during epochs ((stage−1)·3, stage·3]; afterwards
            // nothing it reads may move, so its validation error is fixed.
            let errors = run.history.series(stage, Split::Val, Metric::Error);
            let frozen = &errors[stage * 3 - 1..];
            assert!(frozen.iter().all(|e| e.to_bits() == frozen[0].to_bits()), "stage {stage}: {errors:?}");
        }
    }
}

#[test]
fn greedy_leaves_later_stages_at_init_until_their_turn() {
    let mut config = small_config(Strategy::Greedy);
    config.epochs = 2;
    config.seeds = vec![0];
    let report = train(&config, false).unwrap();
    let init = NestedNetwork::build(&config.plan, 0).unwrap();
    let trained = &report.runs[0].net;
    let moved = |stage: usize| {
        (0..init.num_params()).any(|j| trained.is_owned_by(stage, j) && trained.params()[j] != init.params()[j])
    };
    assert!(moved(1) && moved(2));
}

#[test]
fn evaluate_is_order_invariant() {
    let net = NestedNetwork::build(&StagePlan::new(NestingMode::Depth, 3, 2, 1, 3, 2), 9).unwrap();
    let data = gen_spiral(2, 90, 3, 0.2).unwrap();
    let reversed_idx: Vec<usize> = (0..data.len()).rev().collect();
    let (x, y) = data.batch(&reversed_idx);
    let reversed = Dataset::new(x, y, Split::Val, 3).unwrap();
    assert_eq!(evaluate(&net, &data).unwrap(), evaluate(&net, &reversed).unwrap());
    assert_eq!(evaluate(&net, &data).unwrap(), evaluate(&net, &data).unwrap());
}

#[test]
fn checkpoint_round_trip_restores_network() {
    let config = small_config(Strategy::OsgdNorm);
    let report = train(&config, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let ckpt = Checkpoint::from_run(&report.runs[0], &config);
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let net = back.network().unwrap();
    let (_, val) = config.data.load().unwrap();
    assert_eq!(evaluate(&net, &val).unwrap(), report.runs[0].history.final_val_error);
    assert_eq!(back.config.unwrap(), config);
}

#[test]
fn csv_loader_rejects_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    std::fs::File::create(&path).unwrap();
    let err = load_csv(&path, &CsvSchema::default()).unwrap_err();
    assert!(matches!(err, Error::EmptyDataset(_)), "{err}");
}

#[test]
fn idx_loader_checks_magic() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images.idx");
    let labels = dir.path().join("labels.idx");
    // 2 images of 1x2 bytes, then 2 labels.
    let mut f = std::fs::File::create(&images).unwrap();
    f.write_all(&[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2, 10, 20, 30, 40]).unwrap();
    let mut f = std::fs::File::create(&labels).unwrap();
    f.write_all(&[0, 0, 8, 1, 0, 0, 0, 2, 0, 1]).unwrap();
    let data = load_idx(&images, &labels).unwrap();
    assert_eq!((data.len(), data.input_dim()), (2, 2));
    assert_eq!(data.labels(), &[0, 1]);

    let mut f = std::fs::File::create(&labels).unwrap();
    f.write_all(&[0, 0, 9, 1, 0, 0, 0, 2, 0, 1]).unwrap();
    let err = load_idx(&images, &labels).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
}

#[test]
fn oracle_each_credits_any_correct_network() {
    let labels = vec![0, 1, 2, 0, 1, 2];
    // Two networks with disjoint mistakes: each wrong on half the inputs.
    let a = Independent { cost: 10, preds: vec![0, 1, 2, 1, 2, 0] };
    let b = Independent { cost: 20, preds: vec![1, 2, 0, 0, 1, 2] };
    let pool = [a, b];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(simulate_oracle_each(&pool, &labels, 3, Some(20.0), &mut rng).unwrap(), 0.0);
    assert_eq!(simulate_oracle_all(&pool, &labels, 3, Some(20.0), &mut rng).unwrap(), 0.5);
    assert_eq!(simulate_oracle_each(&pool, &labels, 3, Some(15.0), &mut rng).unwrap(), 0.5);
}

#[test]
fn unbounded_sweep_reports_final_stage_error() {
    let config = small_config(Strategy::Osgd);
    let report = train(&config, false).unwrap();
    let (_, val) = config.data.load().unwrap();
    let net = &report.runs[0].net;
    let preds = AnytimePredictions::from_net(net, &val).unwrap();
    let inputs = SweepInputs { nested: &preds, baseline: None, independents: None, labels: val.labels(), num_classes: 3 };
    let sim = sweep(inputs, &DeadlineSweep::default_for(preds.costs.total()), 1).unwrap();
    let rows = sim.errors(Scheme::Nested);
    assert_eq!(rows.len(), 8);
    assert_eq!(rows.last().unwrap(), &(None, evaluate(net, &val).unwrap()[1]));
}

#[test]
fn non_finite_inputs_abort_training_with_numeric_error() {
    let mut net = NestedNetwork::build(&StagePlan::new(NestingMode::Width, 2, 2, 1, 3, 2), 0).unwrap();
    let x = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
    let before = net.params().to_vec();
    let err = nestnet::train_step(
        &mut net,
        &x,
        &[0],
        &OptimizerConfig::with_strategy(Strategy::Sgd),
        0.1,
        &mut Default::default(),
    )
    .unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert_eq!(net.params(), before.as_slice());
}
