use eenet::cost::{count_model, Convention};
use eenet::data::{synthetic, Split};
use eenet::graph::{build_model, ExitKind, Model, ResNetTopology, UnitPlan};
use eenet::tensor::gradcheck::check_gradients;
use eenet::tensor::{BnMode, Tape, Tensor, Var};
use eenet::training::{parameter_gradient_errors, LossKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    // Keep clear of the ReLU kink so central differences stay on one side.
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces an arbitrary output to a scalar with fixed random weights so every
/// output element contributes a distinct amount.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let flat = tape.reshape(y, vec![1, n]).unwrap();
    let w = tape.constant(random(&[n, 1], seed));
    let s = tape.linear(flat, w, None).unwrap();
    tape.mean(s)
}

fn assert_below(errors: &[f64], tol: f64) {
    for (i, &e) in errors.iter().enumerate() {
        assert!(e < tol, "input {i}: relative error {e:e} >= {tol:e}");
    }
}

#[test]
fn conv2d_gradients() {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let inputs = [
            random(&[2, 3, 5, 5], 1),
            random(&[4, 3, 3, 3], 2),
            random(&[4], 3),
        ];
        let e = check_gradients(&inputs, STEP, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            Ok(weighted_sum(t, y, 4))
        })
        .unwrap();
        assert_below(&e, 1e-4);
    }
}

#[test]
fn linear_gradients() {
    let inputs = [random(&[3, 5], 1), random(&[5, 4], 2), random(&[4], 3)];
    let e = check_gradients(&inputs, STEP, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        Ok(weighted_sum(t, y, 4))
    })
    .unwrap();
    assert_below(&e, 1e-4);
}

#[test]
fn pooling_gradient_is_uniform() {
    let x = random(&[2, 3, 4, 4], 1);
    let e = check_gradients(std::slice::from_ref(&x), STEP, |t, v| {
        let y = t.global_avg_pool(v[0])?;
        Ok(weighted_sum(t, y, 2))
    })
    .unwrap();
    assert_below(&e, 1e-4);

    let mut tape = Tape::new();
    let v = tape.param(x);
    let y = tape.global_avg_pool(v).unwrap();
    let s = tape.mean(y);
    tape.backward(s).unwrap();
    let expected = 1.0 / 16.0 / 6.0;
    assert!(tape
        .grad(v)
        .unwrap()
        .data()
        .iter()
        .all(|&g| (g - expected).abs() < 1e-15));
}

#[test]
fn activation_gradients() {
    let x = random(&[4, 6], 1);
    for which in 0..3 {
        let e = check_gradients(std::slice::from_ref(&x), STEP, |t, v| {
            let y = match which {
                0 => t.relu(v[0]),
                1 => t.sigmoid(v[0]),
                _ => t.softmax(v[0]),
            };
            Ok(weighted_sum(t, y, 2))
        })
        .unwrap();
        assert_below(&e, 1e-4);
    }
}

#[test]
fn batchnorm_gradients() {
    let inputs = [random(&[2, 3, 4, 4], 1), random(&[3], 2), random(&[3], 3)];
    let e = check_gradients(&inputs, STEP, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], BnMode::Train)?;
        Ok(weighted_sum(t, y, 4))
    })
    .unwrap();
    assert_below(&e, 1e-3);

    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 2.0];
    let e = check_gradients(&inputs, STEP, |t, v| {
        let (y, _) = t.batch_norm(
            v[0],
            v[1],
            v[2],
            BnMode::Eval {
                mean: &mean,
                var: &var,
            },
        )?;
        Ok(weighted_sum(t, y, 4))
    })
    .unwrap();
    assert_below(&e, 1e-4);
}

#[test]
fn cross_entropy_gradient() {
    let logits = random(&[5, 4], 1);
    let labels = [0, 3, 1, 1, 2];
    let e = check_gradients(&[logits], STEP, |t, v| {
        let p = t.softmax(v[0]);
        t.cross_entropy(p, &labels)
    })
    .unwrap();
    assert_below(&e, 1e-4);
}

#[test]
fn blend_add_and_scale_gradients() {
    let inputs = [random(&[3], 1), random(&[3, 4], 2), random(&[3, 4], 3)];
    let e = check_gradients(&inputs, STEP, |t, v| {
        let h = t.sigmoid(v[0]);
        let y = t.blend(h, v[1], v[2])?;
        let z = t.add(y, v[1])?;
        let z = t.scale(z, 0.7);
        Ok(weighted_sum(t, z, 4))
    })
    .unwrap();
    assert_below(&e, 1e-4);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x = random(&[2, 5], 1);
    let w = random(&[5, 3], 2);
    let grad_of = |terms: &[bool]| {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let wv = tape.param(w.clone());
        let y = tape.linear(xv, wv, None).unwrap();
        let a = {
            let s = tape.sigmoid(y);
            tape.mean(s)
        };
        let b = {
            let p = tape.softmax(y);
            tape.cross_entropy(p, &[1, 2]).unwrap()
        };
        let loss = match terms {
            [true, true] => tape.add(a, b).unwrap(),
            [true, false] => a,
            _ => b,
        };
        tape.backward(loss).unwrap();
        tape.grad(wv).unwrap().data().to_vec()
    };
    let both = grad_of(&[true, true]);
    let first = grad_of(&[true, false]);
    let second = grad_of(&[false, true]);
    for i in 0..both.len() {
        assert!((both[i] - first[i] - second[i]).abs() < 1e-14);
    }
}

fn small_model(kind: ExitKind, seed: u64) -> Model<f64> {
    let t = ResNetTopology::custom_small(
        [1, 8, 8],
        UnitPlan {
            channels: 3,
            stride: 1,
        },
        vec![
            UnitPlan {
                channels: 3,
                stride: 1,
            },
            UnitPlan {
                channels: 4,
                stride: 2,
            },
            UnitPlan {
                channels: 4,
                stride: 1,
            },
        ],
    );
    build_model(&t, &[0, 1], kind, 3, seed).unwrap()
}

fn small_batch() -> (Tensor<f64>, Vec<usize>) {
    let data = synthetic(4, 3, [1, 8, 8], 0.3, 4, Split::Train).unwrap();
    data.batch::<f64>(&[0, 1, 2, 3])
}

// A central difference of width 2e-4 straddles a ReLU kink for roughly half
// of the random seeds on this net, which shows up as a spurious 1e-3..1e-1
// error. Seed 3 keeps every pre-activation clear of the kinks.
#[test]
fn every_parameter_of_each_exit_kind() {
    let (x, y) = small_batch();
    for kind in [ExitKind::Plain, ExitKind::Pool, ExitKind::Bnpool] {
        let mut m = small_model(kind, 3);
        let costs = count_model(&m, Convention::Mac).relative;
        for loss in [
            LossKind::V1,
            LossKind::V2,
            LossKind::McOnly,
            LossKind::CostOnly,
        ] {
            let errors =
                parameter_gradient_errors(&mut m, &x, &y, &costs, loss, 0.8, STEP).unwrap();
            for (name, e) in errors {
                assert!(e < 1e-3, "{kind:?} {loss:?} {name}: {e:e}");
            }
        }
    }
}

// A wrong gradient disagrees at every step; a kink crossing only at some.
#[test]
fn some_step_agrees_on_every_seed() {
    let (x, y) = small_batch();
    for seed in 0..8 {
        let mut m = small_model(ExitKind::Pool, seed);
        let costs = count_model(&m, Convention::Mac).relative;
        let mut best: Vec<(String, f64)> = Vec::new();
        for step in [1e-4, 1e-5, 1e-6] {
            let errors =
                parameter_gradient_errors(&mut m, &x, &y, &costs, LossKind::V2, 1.0, step).unwrap();
            if best.is_empty() {
                best = errors;
            } else {
                for (b, (_, e)) in best.iter_mut().zip(errors) {
                    b.1 = b.1.min(e);
                }
            }
        }
        for (name, e) in best {
            assert!(e < 1e-3, "seed {seed} {name}: {e:e}");
        }
    }
}
