use eenet::data::SyntheticSpec;
use eenet::graph::{build_model, ExitKind, Model, ResNetTopology, UnitPlan};
use eenet::training::{train, LossKind, OptimizerConfig, TrainConfig};

fn setup(seed: u64) -> (Model<f32>, eenet::data::Dataset, eenet::data::Dataset) {
    let topology = ResNetTopology::custom_small(
        [1, 12, 12],
        UnitPlan {
            channels: 4,
            stride: 1,
        },
        vec![
            UnitPlan {
                channels: 4,
                stride: 2,
            },
            UnitPlan {
                channels: 8,
                stride: 1,
            },
            UnitPlan {
                channels: 8,
                stride: 1,
            },
        ],
    );
    let model = build_model(&topology, &[0, 1], ExitKind::Pool, 4, seed).unwrap();
    let spec = SyntheticSpec {
        train_examples: 256,
        test_examples: 128,
        num_classes: 4,
        image_shape: [1, 12, 12],
        noise: 0.2,
    };
    let (train_set, test_set) = spec.generate(seed).unwrap();
    (model, train_set, test_set)
}

fn config(loss: LossKind, epochs: usize) -> TrainConfig {
    TrainConfig {
        loss,
        epochs,
        optimizer: OptimizerConfig::adam(0.01),
        ..TrainConfig::mnist(3)
    }
}

#[test]
fn classification_loss_learns_and_keeps_the_last_exit() {
    let (mut m, tr, te) = setup(1);
    let history = train(
        &mut m,
        &tr,
        &te,
        &config(LossKind::McOnly, 10),
        |_, _, _| Ok(()),
    )
    .unwrap();
    assert!(history.last().unwrap().train_loss < history[0].train_loss);
    let last = history.last().unwrap();
    assert!(last.eval_accuracy > 0.9, "accuracy {}", last.eval_accuracy);
    assert_eq!(last.exit_counts[2], te.len());
}

#[test]
fn cost_loss_drives_everything_to_the_first_exit() {
    let (mut m, tr, te) = setup(2);
    let history = train(
        &mut m,
        &tr,
        &te,
        &config(LossKind::CostOnly, 4),
        |_, _, _| Ok(()),
    )
    .unwrap();
    let last = history.last().unwrap();
    assert_eq!(last.exit_counts[0], te.len());
}

#[test]
fn larger_lambda_spends_less() {
    let run = |lambda: f64| {
        let (mut m, tr, te) = setup(4);
        let cfg = TrainConfig {
            lambda,
            ..config(LossKind::V2, 4)
        };
        train(&mut m, &tr, &te, &cfg, |_, _, _| Ok(()))
            .unwrap()
            .last()
            .unwrap()
            .eval_relative_cost
    };
    let (cheap, dear) = (run(4.0), run(0.0));
    assert!(cheap <= dear, "lambda 4: {cheap}, lambda 0: {dear}");
}
