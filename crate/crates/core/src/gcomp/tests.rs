use super::*;
use crate::dgp::{simulate_factual, DgpParams};
use crate::error::Error;

fn tiny_net() -> NetConfig {
    NetConfig {
        hidden_convlstm: 2,
        channel_ladder: vec![2, 4],
        d_h: 2,
        ghead_hidden: 2,
        context_len: 3,
        ..NetConfig::desk(2)
    }
}

fn traj(t_len: usize, grid: usize, beta1: f64, seed: u64) -> Trajectory {
    let p = DgpParams::default().with_grid(grid, grid).with_beta1(beta1);
    simulate_factual(&p, t_len, &mut RngStream::new(seed, 0)).unwrap()
}

fn plan(tau: usize, grid: usize, seed: u64) -> InterventionPlan {
    InterventionPlan::random(0, tau, (grid, grid), &mut RngStream::new(seed, 9)).unwrap()
}

fn model_for(data_tau: usize, seed: u64) -> FittedNet {
    let cfg = NetConfig { n_heads: data_tau, ..tiny_net() };
    FittedNet::new(&cfg, Normaliser::identity(), seed).unwrap()
}

fn zero_params(store: &mut ParamStore) {
    for id in store.ids().collect::<Vec<_>>() {
        store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn prefix_counts() {
    let n = Normaliser::identity();
    let long = traj(200, 4, 0.0, 1);
    assert_eq!(build_prefixes(&long, 10, None, 5, &n).unwrap().len(), 190);
    let short = long.window(0, 11);
    assert_eq!(build_prefixes(&short, 10, None, 5, &n).unwrap().len(), 1);
    let too_short = long.window(0, 10);
    assert!(matches!(build_prefixes(&too_short, 10, None, 5, &n), Err(Error::InvalidArgument(_))));
}

#[test]
fn intervened_window_only_changes_treatments_from_t() {
    let tr = traj(40, 4, 1.0, 2);
    let tau = 4;
    let data = build_prefixes(&tr, tau, Some(&plan(tau, 4, 3)), 6, &Normaliser::fit(&tr)).unwrap();
    for t in [0, 1, 7, data.len() - 1] {
        for k in 1..tau {
            let obs = data.window(t + k, None, None);
            let int = data.intervened_window(t, k).unwrap();
            assert_eq!(obs.steps.len(), int.steps.len());
            let first = (t + k + 1).saturating_sub(6);
            for (i, (o, n)) in obs.steps.iter().zip(&int.steps).enumerate() {
                let j = first + i;
                assert_eq!(o.channel(0), n.channel(0));
                assert_eq!(o.channel(1), n.channel(1));
                if j == 0 || j - 1 < t {
                    assert_eq!(o.channel(2), n.channel(2), "t={t} k={k} j={j}");
                } else {
                    assert_eq!(n.channel(2), data.plan[j - 1 - t].data.as_slice());
                }
            }
            assert_eq!(int.cond.as_ref().unwrap(), &data.plan[k]);
        }
        let w = data.observed_window(t, tau).unwrap();
        assert_eq!(w.cond.as_ref().unwrap(), data.treatment_at(t + tau - 1));
    }
    assert!(data.intervened_window(0, tau).is_err());
    assert!(data.observed_window(0, 0).is_err());
}

#[test]
fn curriculum_examples() {
    let s = CurriculumSchedule { e_c: 3, tau: 5, curriculum_lr: 5e-4 };
    assert_eq!(curriculum_weights(1, &s), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(curriculum_weights(4, &s), vec![0.0, 0.0, 0.0, 0.5, 0.5]);
    assert_eq!(curriculum_weights(100, &s), vec![0.2; 5]);
}

#[test]
fn curriculum_closed_form_grid() {
    for tau in 1..=20 {
        for e_c in 1..=20 {
            let s = CurriculumSchedule { e_c, tau, curriculum_lr: 1e-3 };
            let mut prev = 0;
            for e in 1..=20 {
                let w = curriculum_weights(e, &s);
                let p = tau.min(e.div_ceil(e_c));
                let active: Vec<_> = w.iter().filter(|&&v| v != 0.0).collect();
                assert_eq!(active.len(), p);
                assert!(active.iter().all(|&&v| v == 1.0 / p as f64));
                assert!(w[tau - p..].iter().all(|&v| v > 0.0));
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(p >= prev);
                prev = p;
            }
        }
    }
}

#[test]
fn masked_mse_examples() {
    let f = |v: &[f64]| Field::new(2, 1, v.to_vec()).unwrap();
    let (pred, target) = (f(&[1.0, 3.0]), f(&[0.0, 0.0]));
    let (mask, w) = (f(&[1.0, 0.0]), f(&[2.0, 9.0]));
    assert_eq!(masked_weighted_mse(&pred, &target, Some(&mask), Some(&w)).unwrap(), 1.0);
    assert_eq!(masked_weighted_mse(&pred, &pred, None, None).unwrap(), 0.0);
    let moved = f(&[0.0, -40.0]);
    assert_eq!(
        masked_weighted_mse(&pred, &target, Some(&mask), Some(&w)).unwrap().to_bits(),
        masked_weighted_mse(&pred, &moved, Some(&mask), Some(&w)).unwrap().to_bits()
    );
    assert!(masked_weighted_mse(&pred, &target, Some(&f(&[0.0, 0.0])), None).is_err());
    assert!(masked_weighted_mse(&pred, &Field::zeros(1, 1), None, None).is_err());
}

#[test]
fn joint_objective_formula() {
    assert_eq!(combine_head_losses(&[0.5, 0.5], &[3.0, 5.0]), 2.0);
}

#[test]
fn pseudo_outcomes_last_head_and_zero_network() {
    let tr = traj(20, 4, 1.0, 4);
    let tau = 3;
    let data = build_prefixes(&tr, tau, Some(&plan(tau, 4, 5)), 3, &Normaliser::identity()).unwrap();
    let mut m = model_for(tau, 1);
    let y = generate_pseudo_outcomes(&m, &data, 2, tau).unwrap();
    assert_eq!(y, tr.y[2 + tau]);

    zero_params(&mut m.store);
    for k in 2..=tau {
        let id = m.store.id(&format!("head{k}.out.b")).unwrap();
        m.store.value_mut(id).data[0] = 0.5 * k as f64;
    }
    for k in 1..tau {
        let p = generate_pseudo_outcomes(&m, &data, 4, k).unwrap();
        assert!(p.values().iter().all(|&v| v == 0.5 * (k + 1) as f64));
    }
}

#[test]
fn generation_pass_is_detached() {
    let tr = traj(20, 4, 1.0, 6);
    let tau = 2;
    let data = build_prefixes(&tr, tau, Some(&plan(tau, 4, 7)), 3, &Normaliser::fit(&tr)).unwrap();
    let mut m = model_for(tau, 2);
    m.store.zero_grads();
    joint_loss_backward(&mut m, &data, &[0, 3, 5, 9], &[1.0, 0.0]).unwrap();
    let mut head1_norm = 0.0;
    for id in m.store.ids() {
        let name = m.store.name(id).to_string();
        let g = m.store.grad(id);
        if name.starts_with("head2.") {
            assert!(g.data.iter().all(|&v| v == 0.0), "{name} received gradient");
        }
        if name.starts_with("head1.") {
            head1_norm += g.data.iter().map(|v| v * v).sum::<f64>();
        }
    }
    assert!(head1_norm > 0.0);
}

#[test]
fn inactive_head_parameters_do_not_move_the_loss() {
    let tr = traj(20, 4, 1.0, 8);
    let tau = 3;
    let data = build_prefixes(&tr, tau, Some(&plan(tau, 4, 9)), 3, &Normaliser::fit(&tr)).unwrap();
    let mut m = model_for(tau, 3);
    let alpha = [0.0, 0.5, 0.5];
    let base = joint_loss(&m, &data, &[1, 2, 8], &alpha).unwrap();
    for id in m.store.ids().collect::<Vec<_>>() {
        if m.store.name(id).starts_with("head1.") {
            m.store.value_mut(id).data.iter_mut().for_each(|v| *v += 0.37);
        }
    }
    let moved = joint_loss(&m, &data, &[1, 2, 8], &alpha).unwrap();
    assert_eq!(base.total.to_bits(), moved.total.to_bits());
    assert_eq!(base.per_head[0], None);
}

#[test]
fn perfect_predictions_give_zero_loss() {
    let mut tr = traj(12, 4, 1.0, 10);
    for y in tr.y.iter_mut() {
        *y = Field::filled(4, 4, 3.0);
    }
    let tau = 3;
    let norm = Normaliser::fit(&tr);
    let data = build_prefixes(&tr, tau, Some(&plan(tau, 4, 11)), 3, &norm).unwrap();
    let mut m = model_for(tau, 4);
    zero_params(&mut m.store);
    let jl = joint_loss(&m, &data, &[0, 1, 2, 3], &[1.0 / 3.0; 3]).unwrap();
    assert_eq!(jl.total, 0.0);
}

#[test]
fn joint_loss_gradient_matches_finite_differences() {
    // only the last head is active, so no parameter reaches the loss
    // through a detached generation pass
    let tr = traj(16, 4, 1.0, 12);
    let tau = 3;
    let data = build_prefixes(&tr, tau, Some(&plan(tau, 4, 13)), 3, &Normaliser::fit(&tr)).unwrap();
    let mut m = model_for(tau, 5);
    let alpha = [0.0, 0.0, 1.0];
    let batch = [0, 2, 3, 7];
    m.store.zero_grads();
    joint_loss_backward(&mut m, &data, &batch, &alpha).unwrap();
    let h = 1e-5;
    let (mut checked, mut passed) = (0, 0);
    for id in m.store.ids().collect::<Vec<_>>() {
        for j in (0..m.store.value(id).len()).step_by(3) {
            let analytic = m.store.grad(id).data[j];
            let orig = m.store.value(id).data[j];
            m.store.value_mut(id).data[j] = orig + h;
            let fp = joint_loss(&m, &data, &batch, &alpha).unwrap().total;
            m.store.value_mut(id).data[j] = orig - h;
            let fm = joint_loss(&m, &data, &batch, &alpha).unwrap().total;
            m.store.value_mut(id).data[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            checked += 1;
            if (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-7) {
                passed += 1;
            }
        }
    }
    assert!(passed as f64 >= 0.98 * checked as f64, "{passed}/{checked}");
}

fn quick_train(tau: usize, epochs: usize, e_c: usize, seed: u64) -> (GstUnet, TrainLog, Trajectory) {
    let tr = traj(30, 8, 1.0, 14);
    let p = plan(tau, 8, 15);
    let tc = TrainConfig { max_epochs: epochs, seed, batch_size: 4, ..TrainConfig::desk() };
    let sched = CurriculumSchedule { e_c, tau, curriculum_lr: 1e-3 };
    let (m, log) = train_gst_unet(&tr, &p, &tiny_net(), &tc, &sched).unwrap();
    (m, log, tr)
}

#[test]
fn early_heads_frozen_during_first_phase() {
    let tau = 3;
    let (m, log, tr) = quick_train(tau, 2, 2, 21);
    assert_eq!(log.epochs.len(), 2);
    assert!(log.epochs.iter().all(|r| r.phase == 1 && r.head_losses[0].is_none()));
    let cfg = gst_net_config(&tiny_net(), &tr, tau);
    let init = FittedNet::new(&cfg, Normaliser::identity(), 21).unwrap();
    for id in init.store.ids() {
        let name = init.store.name(id);
        let same = init.store.value(id) == m.model.store.value(id);
        if name.starts_with("head1.") || name.starts_with("head2.") {
            assert!(same, "{name} moved during phase 1");
        }
        if name == "head3.out.b" {
            assert!(!same, "last head did not train");
        }
    }
}

#[test]
fn training_is_deterministic_and_infers() {
    let tau = 2;
    let (m1, l1, tr) = quick_train(tau, 3, 1, 5);
    let (m2, l2, _) = quick_train(tau, 3, 1, 5);
    assert_eq!(l1.to_lines(), l2.to_lines());
    assert_eq!(l1.to_lines().lines().count(), 3);

    let hist = tr.window(0, 10);
    let p = plan(tau, 8, 15).at(9);
    let e1 = m1.infer_capo(&hist, &p).unwrap();
    assert_eq!(e1, m2.infer_capo(&hist, &p).unwrap());
    assert_eq!(e1.values.shape(), (8, 8));
    assert!(e1.values.is_finite());

    let mut later = p.clone();
    later.a_plan[1] = later.a_plan[1].map(|v| 1.0 - v);
    assert_eq!(m1.infer_capo(&hist, &later).unwrap().values, e1.values);
    let short = InterventionPlan::new(9, vec![p.a_plan[0].clone()]).unwrap();
    assert!(m1.infer_capo(&hist, &short).is_err());
}

#[test]
fn gst_keeps_final_weights_and_runs_every_epoch() {
    let tr = traj(30, 8, 1.0, 14);
    let p = plan(2, 8, 15);
    let sched = CurriculumSchedule { e_c: 1, tau: 2, curriculum_lr: 1e-3 };
    let fit = |epochs| {
        let tc = TrainConfig { max_epochs: epochs, early_stop_patience: 1, scheduler_patience: 1, seed: 8, ..TrainConfig::desk() };
        train_gst_unet(&tr, &p, &tiny_net(), &tc, &sched).unwrap()
    };
    let (m5, log) = fit(5);
    assert_eq!(log.epochs.len(), 5);
    let (m4, _) = fit(4);
    let differs = m4.model.store.ids().any(|id| m4.model.store.value(id) != m5.model.store.value(id));
    assert!(differs, "epoch 5 update was discarded");
}

proptest::proptest! {
    #[test]
    fn curriculum_weights_are_uniform_over_a_growing_suffix(e in 1usize..400, e_c in 1usize..40, tau in 1usize..30) {
        let s = CurriculumSchedule { e_c, tau, curriculum_lr: 1e-3 };
        let w = curriculum_weights(e, &s);
        let active: Vec<f64> = w.iter().copied().filter(|&v| v != 0.0).collect();
        proptest::prop_assert_eq!(active.len(), tau.min(e.div_ceil(e_c)));
        proptest::prop_assert!(active.iter().all(|&v| v == active[0] && v > 0.0));
        proptest::prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        proptest::prop_assert!(w[tau - active.len()..].iter().all(|&v| v != 0.0));
        let next = curriculum_weights(e + 1, &s);
        proptest::prop_assert!(next.iter().filter(|&&v| v != 0.0).count() >= active.len());
    }
}
