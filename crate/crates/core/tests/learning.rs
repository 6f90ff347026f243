use linkadapt_core::bandit::{GexpParams, GexpState};
use linkadapt_core::nn::{Activation, Adam, Dense, Gradients, Mlp};
use linkadapt_core::phy::Feedback;
use linkadapt_core::rng::{stream, Stream};
use linkadapt_core::td3::reward;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

#[test]
fn adam_finds_the_bottom_of_a_quadratic_bowl() {
    // single linear unit, loss = Σ (w_i − c_i)^2 + (b − c_b)^2
    let layer = Dense { weight: Array2::zeros((3, 1)), bias: Array1::zeros(1) };
    let mut net = Mlp::from_layers(vec![layer], Activation::Identity).unwrap();
    let target_w = array![1.5, -2.0, 0.25];
    let target_b = 0.7;
    let mut opt = Adam::new(&net, 0.05);
    for _ in 0..2000 {
        let l = &net.layers()[0];
        let g = Gradients {
            layers: vec![Dense {
                weight: (&l.weight.column(0) - &target_w).mapv(|d| 2.0 * d).insert_axis(ndarray::Axis(1)),
                bias: array![2.0 * (l.bias[0] - target_b)],
            }],
        };
        opt.step(&mut net, &g).unwrap();
    }
    let l = &net.layers()[0];
    for i in 0..3 {
        assert!((l.weight[[i, 0]] - target_w[i]).abs() < 1e-3, "{}", l.weight);
    }
    assert!((l.bias[0] - target_b).abs() < 1e-3);
}

#[test]
fn failure_outscored_by_success_when_beta_dominates() {
    let beta = 4.0;
    let r_max = 6.0;
    let grid: Vec<f64> = (0..=600).map(|i| r_max * i as f64 / 600.0).collect();
    for j in 0..=100 {
        let ack_fraction = j as f64 / 100.0;
        let best_fail = grid.iter().map(|&r| reward(r, Feedback::Nack, ack_fraction, beta)).fold(f64::MIN, f64::max);
        let worst_success = grid.iter().map(|&r| reward(r, Feedback::Ack, ack_fraction, beta)).fold(f64::MAX, f64::min);
        assert_eq!(beta > r_max * ack_fraction, best_fail < worst_success, "ack fraction {ack_fraction}");
    }
}

#[test]
fn mlp_output_shapes() {
    let mut rng = stream(3, Stream::Network);
    let net = Mlp::new(&[5, 7, 2], Activation::Tanh, &mut rng).unwrap();
    let out = net.forward_batch(Array2::ones((4, 5)).view()).unwrap();
    assert_eq!(out.dim(), (4, 2));
    assert!(out.iter().all(|v| v.abs() <= 1.0));
}

proptest! {
    #[test]
    fn gexp_probabilities_are_a_distribution(
        weights in proptest::collection::vec(-20.0f64..20.0, 5),
        prefs in proptest::collection::vec(-3.0f64..3.0, 5),
        scores in proptest::collection::vec(-5.0f64..5.0, 5),
        mask in proptest::collection::vec(any::<bool>(), 5),
        progress in 0.0f64..1.0,
    ) {
        prop_assume!(mask.iter().any(|m| !m));
        let mut g = GexpState::new(5, GexpParams::default()).unwrap();
        g.set_weights(&weights.iter().map(|w| w.exp()).collect::<Vec<_>>()).unwrap();
        g.set_preferences(&prefs).unwrap();
        g.set_progress(progress);
        let p = g.probabilities(&scores, &mask).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (pi, m) in p.iter().zip(&mask) {
            if *m { prop_assert_eq!(*pi, 0.0); } else { prop_assert!(*pi > 0.0); }
        }
    }

    #[test]
    fn gexp_update_raises_only_the_chosen_weight(q in 0.01f64..50.0, arm in 0usize..4) {
        let mut g = GexpState::new(4, GexpParams::default()).unwrap();
        let p = g.probabilities(&[0.0; 4], &[false; 4]).unwrap();
        let before = g.weights();
        g.update(arm, q, &p).unwrap();
        let after = g.weights();
        for i in 0..4 {
            if i == arm { prop_assert!(after[i] > before[i]); } else { prop_assert_eq!(after[i], before[i]); }
        }
    }
}
