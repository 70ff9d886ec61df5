//! Neural channel estimator trained from scratch: dense, 1-D convolution and
//! batch-norm layers with an explicit reverse pass, plain SGD and NMSE.

mod checkpoint;
mod engine;
mod model;
mod train;

pub use checkpoint::{
    decode_model, encode_model, load_model, save_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use engine::{backprop, forward, forward_trace, update_running_stats, NormMode, Trace};
pub use model::{
    Activation, Gradient, Layer, LayerDescriptor, LayerKind, LayerOp, LayeredModel, ModelSpec,
    NormStats, ParamGrad,
};
pub use train::{
    apply_gradient, backward, evaluate_nmse, linear_to_db, local_train, loss_and_gradient,
    mse_loss, mse_loss_with, nmse, nmse_linear, sgd_step, LocalTrainConfig, TrainBatch, TrainSet,
    NMSE_FLOOR_DB,
};

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::seed::{rng_for, Rng};
    use crate::Error;

    fn random_batch(rng: &mut Rng, batch: usize, input: usize, output: usize) -> TrainBatch {
        TrainBatch::new(
            (0..batch * input)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            (0..batch * output)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            batch,
        )
        .unwrap()
    }

    #[test]
    fn zero_model_gives_zero_output() {
        let mut rng = rng_for(0, 1, 0);
        let mut m = LayeredModel::mlp(&[4, 3, 2], Activation::Identity, &mut rng).unwrap();
        let zeros = vec![0.0; m.param_count()];
        m.set_params_flat(&zeros).unwrap();
        let out = forward(&m, &[0.3, -1.0, 2.0, 5.0], 1).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut rng = rng_for(0, 1, 1);
        let mut layer = Layer::dense(4, 4, Activation::Identity, &mut rng);
        layer.weights = (0..16)
            .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 })
            .collect();
        let m = LayeredModel::new(vec![layer], 0).unwrap();
        let x = vec![0.5, -2.0, 3.25, 7.0, 1.0, 0.0, -1.0, 2.0];
        assert_eq!(forward(&m, &x, 2).unwrap(), x);
    }

    /// Straight-line re-implementation of a dense-relu-dense network.
    fn oracle_two_layer(m: &LayeredModel, x: &[f64]) -> Vec<f64> {
        let l0 = &m.layers()[0];
        let l1 = &m.layers()[1];
        let (n_in, n_hid) = (l0.input_size(), l0.output_size());
        let mut hidden = vec![0.0; n_hid];
        for j in 0..n_hid {
            let mut acc = l0.biases[j];
            for i in 0..n_in {
                acc += l0.weights[j * n_in + i] * x[i];
            }
            hidden[j] = if acc > 0.0 { acc } else { 0.0 };
        }
        let n_out = l1.output_size();
        let mut out = vec![0.0; n_out];
        for o in 0..n_out {
            let mut acc = l1.biases[o];
            for j in 0..n_hid {
                acc += l1.weights[o * n_hid + j] * hidden[j];
            }
            out[o] = acc;
        }
        out
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = rng_for(0, 1, 2);
        for _ in 0..10 {
            let mut m = LayeredModel::mlp(&[5, 7, 3], Activation::Relu, &mut rng).unwrap();
            let p: Vec<f64> = (0..m.param_count())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            m.set_params_flat(&p).unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = forward(&m, &x, 1).unwrap();
            for (a, b) in got.iter().zip(oracle_two_layer(&m, &x)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_direct_sum_oracle() {
        let mut rng = rng_for(0, 1, 3);
        let layer = Layer::conv1d(2, 3, 3, 5, Activation::Identity, &mut rng).unwrap();
        let mut layer = layer;
        layer.biases = vec![0.1, -0.2, 0.3];
        let m = LayeredModel::new(vec![layer.clone()], 0).unwrap();
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = forward(&m, &x, 1).unwrap();
        for o in 0..3 {
            for t in 0..5i64 {
                let mut acc = layer.biases[o];
                for i in 0..2 {
                    for k in 0..3i64 {
                        let s = t + k - 1;
                        if (0..5).contains(&s) {
                            acc +=
                                layer.weights[(o * 2 + i) * 3 + k as usize] * x[i * 5 + s as usize];
                        }
                    }
                }
                assert!((out[o * 5 + t as usize] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = rng_for(0, 1, 4);
        let m = LayeredModel::mlp(&[3, 2], Activation::Relu, &mut rng).unwrap();
        assert!(matches!(
            forward(&m, &[1.0, 2.0], 1),
            Err(Error::ShapeMismatch { .. })
        ));
        let b = random_batch(&mut rng, 2, 3, 5);
        assert!(mse_loss(&m, &b).is_err());
    }

    #[test]
    fn mse_loss_cases() {
        let mut rng = rng_for(0, 1, 5);
        let m = LayeredModel::mlp(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = forward_trace(&m, &x, 2, NormMode::Training)
            .unwrap()
            .output()
            .to_vec();
        let exact = TrainBatch::new(x.clone(), out.clone(), 2).unwrap();
        assert_eq!(mse_loss(&m, &exact).unwrap(), 0.0);

        // scalar case: weight 0, bias 2, target 0
        let mut l = Layer::dense(1, 1, Activation::Identity, &mut rng);
        l.weights = vec![0.0];
        l.biases = vec![2.0];
        let scalar = LayeredModel::new(vec![l], 0).unwrap();
        let b = TrainBatch::new(vec![1.0], vec![0.0], 1).unwrap();
        assert_eq!(mse_loss(&scalar, &b).unwrap(), 4.0);

        let b = random_batch(&mut rng, 5, 3, 2);
        let out = forward(&m, &b.inputs, 5).unwrap();
        let mut oracle = 0.0;
        for s in 0..5 {
            for j in 0..2 {
                let d = out[s * 2 + j] - b.targets[s * 2 + j];
                oracle += d * d;
            }
        }
        assert!((mse_loss(&m, &b).unwrap() - oracle / 5.0).abs() < 1e-12);
        assert!(TrainBatch::new(vec![], vec![], 0).is_err());
    }

    /// Central finite differences over every parameter.
    fn finite_difference(model: &LayeredModel, batch: &TrainBatch, step: f64) -> Vec<f64> {
        let base = model.params_flat();
        let mut probe = model.clone();
        (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] = base[i] + step;
                probe.set_params_flat(&p).unwrap();
                let up = mse_loss(&probe, batch).unwrap();
                p[i] = base[i] - step;
                probe.set_params_flat(&p).unwrap();
                let down = mse_loss(&probe, batch).unwrap();
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    fn assert_gradient_matches(model: &LayeredModel, batch: &TrainBatch) {
        let analytic = backward(model, batch).unwrap().flat();
        let numeric = finite_difference(model, batch, 1e-5);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {a} numeric {n}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_for_every_layer_kind() {
        let mut rng = rng_for(0, 1, 6);
        let spec = ModelSpec {
            conv_layers: 2,
            channels: 3,
            kernel: 3,
            batch_norm: true,
            shared_blocks: 1,
        };
        let m = spec.build(4, 5, &mut rng).unwrap();
        let b = random_batch(&mut rng, 3, 8, 5);
        assert_gradient_matches(&m, &b);

        let plain = ModelSpec {
            batch_norm: false,
            ..spec
        };
        let m = plain.build(4, 5, &mut rng).unwrap();
        assert_gradient_matches(&m, &b);
    }

    #[test]
    fn perfect_linear_fit_has_zero_gradient() {
        let mut rng = rng_for(0, 1, 7);
        let m = LayeredModel::mlp(&[3, 2], Activation::Identity, &mut rng).unwrap();
        let x: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = forward(&m, &x, 3).unwrap();
        let g = backward(&m, &TrainBatch::new(x, y, 3).unwrap()).unwrap();
        assert!(g.values().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gradient_is_linear_in_loss_weight() {
        let mut rng = rng_for(0, 1, 8);
        let m = LayeredModel::mlp(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        let b = random_batch(&mut rng, 4, 3, 2);
        let g1 = backward(&m, &b).unwrap();
        // mean loss is unchanged by listing every sample twice
        let g2 = backward(&m, &b.duplicated()).unwrap();
        for (a, c) in g1.values().zip(g2.values()) {
            assert!((a - c).abs() < 1e-12);
        }
        // one SGD step on c·loss moves parameters c times as far
        let own = TrainSet::from_batch(&b);
        let base = LocalTrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.01,
            ..LocalTrainConfig::default()
        };
        let step1 = local_train(&m, &own, &[], &base).unwrap();
        let step3 = local_train(
            &m,
            &own,
            &[],
            &LocalTrainConfig {
                own_weight: 3.0,
                ..base
            },
        )
        .unwrap();
        let p0 = m.params_flat();
        for ((a, c), p) in step1.params_flat().iter().zip(step3.params_flat()).zip(p0) {
            assert!(((c - p) - 3.0 * (a - p)).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step_cases() {
        let mut rng = rng_for(0, 1, 9);
        let m = LayeredModel::mlp(&[3, 2], Activation::Identity, &mut rng).unwrap();
        let zero = Gradient::zeros_for(&m);
        assert_eq!(sgd_step(&m, &zero, 0.1).unwrap(), m);
        let mut g = Gradient::zeros_for(&m);
        for (v, p) in g.values_mut().zip(m.params_flat()) {
            *v = p;
        }
        let z = sgd_step(&m, &g, 1.0).unwrap();
        assert!(z.params_flat().iter().all(|v| *v == 0.0));
        assert!(sgd_step(&m, &zero, 0.0).is_err());
        let other = LayeredModel::mlp(&[3, 3], Activation::Identity, &mut rng).unwrap();
        assert!(sgd_step(&m, &Gradient::zeros_for(&other), 0.1).is_err());
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // Least squares with an identity-input design has the closed-form
        // optimum w = target, b = 0 when inputs are the unit vectors.
        let mut rng = rng_for(0, 1, 10);
        let m = LayeredModel::mlp(&[2, 1], Activation::Identity, &mut rng).unwrap();
        let inputs = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let targets = vec![3.0, -2.0, 0.0];
        let b = TrainBatch::new(inputs, targets, 3).unwrap();
        let mut cur = m;
        for _ in 0..1000 {
            let g = backward(&cur, &b).unwrap();
            cur = sgd_step(&cur, &g, 0.5).unwrap();
        }
        let p = cur.params_flat();
        assert!(
            (p[0] - 3.0).abs() < 1e-6 && (p[1] + 2.0).abs() < 1e-6 && p[2].abs() < 1e-6,
            "{p:?}"
        );
    }

    #[test]
    fn loss_monotone_under_small_steps() {
        let mut rng = rng_for(0, 1, 11);
        let mut m = LayeredModel::mlp(&[4, 6, 3], Activation::Relu, &mut rng).unwrap();
        let b = random_batch(&mut rng, 8, 4, 3);
        let mut last = mse_loss(&m, &b).unwrap();
        for _ in 0..100 {
            let g = backward(&m, &b).unwrap();
            m = sgd_step(&m, &g, 1e-4).unwrap();
            let l = mse_loss(&m, &b).unwrap();
            assert!(l <= last);
            last = l;
        }
    }

    #[test]
    fn inference_batch_norm_is_affine() {
        let mut rng = rng_for(0, 1, 12);
        let mut l = Layer::batch_norm(2, 3, Activation::Identity);
        l.weights = vec![1.5, -0.5];
        l.biases = vec![0.2, 0.7];
        {
            let s = l.norm_stats_mut().unwrap();
            s.running_mean = vec![0.3, -1.0];
            s.running_var = vec![2.0, 0.25];
        }
        let m = LayeredModel::new(vec![l.clone()], 0).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out = forward(&m, &x, 1).unwrap();
        let s = l.norm_stats().unwrap();
        for c in 0..2 {
            let scale = l.weights[c] / (s.running_var[c] + s.eps).sqrt();
            let shift = l.biases[c] - scale * s.running_mean[c];
            for t in 0..3 {
                assert!((out[c * 3 + t] - (scale * x[c * 3 + t] + shift)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let mut rng = rng_for(0, 1, 13);
        let m = ModelSpec::local().build(6, 4, &mut rng).unwrap();
        let b = random_batch(&mut rng, 5, 12, 4);
        assert_eq!(backward(&m, &b).unwrap(), backward(&m, &b).unwrap());
        assert_eq!(
            forward(&m, &b.inputs, 5).unwrap(),
            forward(&m, &b.inputs, 5).unwrap()
        );
    }

    fn toy_set(rng: &mut Rng, n: usize) -> TrainSet {
        TrainSet::from_batch(&random_batch(rng, n, 3, 2))
    }

    #[test]
    fn local_train_without_neighbors_is_plain_training() {
        let mut rng = rng_for(0, 1, 14);
        let m = LayeredModel::mlp(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        let own = toy_set(&mut rng, 10);
        let cfg = LocalTrainConfig {
            epochs: 3,
            batch_size: 10,
            learning_rate: 0.05,
            ..LocalTrainConfig::default()
        };
        let trained = local_train(&m, &own, &[], &cfg).unwrap();
        let mut manual = m.clone();
        let b = own.full().unwrap();
        for _ in 0..3 {
            let g = backward(&manual, &b).unwrap();
            manual = sgd_step(&manual, &g, 0.05).unwrap();
        }
        assert_eq!(trained, manual);
    }

    #[test]
    fn identical_neighbor_equals_doubled_own_weight() {
        let mut rng = rng_for(0, 1, 15);
        let m = LayeredModel::mlp(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        let own = toy_set(&mut rng, 12);
        let cfg = LocalTrainConfig {
            epochs: 5,
            batch_size: 64,
            learning_rate: 0.02,
            ..LocalTrainConfig::default()
        };
        let with_neighbor = local_train(&m, &own, &[&own], &cfg).unwrap();
        let doubled = local_train(
            &m,
            &own,
            &[],
            &LocalTrainConfig {
                own_weight: 2.0,
                ..cfg.clone()
            },
        )
        .unwrap();
        let b = own.full().unwrap();
        let l1 = mse_loss(&with_neighbor, &b).unwrap();
        let l2 = mse_loss(&doubled, &b).unwrap();
        assert!((l1 - l2).abs() < 1e-9);
    }

    #[test]
    fn neighbor_floor_enforced() {
        let cfg = LocalTrainConfig::default();
        assert_eq!(cfg.min_neighbor_samples(4000), 400);
        let mut rng = rng_for(0, 1, 16);
        let m = LayeredModel::mlp(&[3, 2], Activation::Identity, &mut rng).unwrap();
        let own = toy_set(&mut rng, 40);
        let small = toy_set(&mut rng, 3);
        let ok = toy_set(&mut rng, 4);
        assert!(matches!(
            local_train(&m, &own, &[&small], &cfg),
            Err(Error::NeighborBelowFloor {
                required: 4,
                samples: 3,
                ..
            })
        ));
        assert!(local_train(&m, &own, &[&ok], &cfg).is_ok());
    }

    #[test]
    fn nmse_cases() {
        let h = vec![1.0, -2.0, 0.5, 3.0];
        assert_eq!(nmse(&h, &h).unwrap(), NMSE_FLOOR_DB);
        assert!((nmse(&[0.0; 4], &h).unwrap()).abs() < 1e-12);
        let scaled: Vec<f64> = h.iter().map(|v| v * 1.1).collect();
        assert!((nmse(&scaled, &h).unwrap() + 20.0).abs() < 1e-9);
        assert!(matches!(nmse(&h, &[0.0; 4]), Err(Error::ZeroNorm)));
    }
}
