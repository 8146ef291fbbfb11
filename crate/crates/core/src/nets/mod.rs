//! Learnable spatiotemporal embedding, G-heads, gradient tape and Adam.

pub mod gradcheck;
mod model;
mod params;
mod tape;
mod tensor;

pub use model::{NetConfig, Network, Window};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, GradCheckConfig};
    use super::*;
    use crate::error::Error;
    use crate::lattice::RngStream;

    fn randn(c: usize, h: usize, w: usize, rng: &mut RngStream) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.normal()).collect())
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn assert_report(r: &gradcheck::GradCheckReport, what: &str) {
        assert!(r.checked > 0, "{what}: nothing checked");
        assert!(r.pass_fraction() >= 0.99, "{what}: {r:?}");
    }

    /// Leaves `a` (2,4,4), `b` (2,4,4), conv weight/bias for k=3 and k=1,
    /// and a 1-channel gate; used by the per-op checks.
    fn op_store(seed: u64) -> (ParamStore, Vec<ParamId>) {
        let mut rng = RngStream::new(seed, 0);
        let mut s = ParamStore::new();
        let ids = vec![
            s.add("a", randn(2, 4, 4, &mut rng)).unwrap(),
            s.add("b", randn(2, 4, 4, &mut rng)).unwrap(),
            s.add("w3", randn(3, 1, 18, &mut rng)).unwrap(),
            s.add("b3", randn(3, 1, 1, &mut rng)).unwrap(),
            s.add("w1", randn(3, 1, 2, &mut rng)).unwrap(),
            s.add("gate", randn(1, 4, 4, &mut rng)).unwrap(),
        ];
        (s, ids)
    }

    fn target_for(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let v = tape.value(x);
        let mut rng = RngStream::new(seed, 77);
        let t = randn(v.c, v.h, v.w, &mut rng);
        tape.constant(t)
    }

    /// Reduce any tensor to a scalar through a fixed random target.
    fn project(tape: &mut Tape, x: Var) -> Var {
        let t = target_for(tape, x, 3);
        tape.weighted_mse(x, t, None).unwrap()
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        type OpFn = fn(&mut Tape, &[Var]) -> Var;
        let cases: Vec<(&str, OpFn)> = vec![
            ("conv3", |t, v| t.conv(v[0], v[2], Some(v[3]), 3).unwrap()),
            ("conv1", |t, v| t.conv(v[0], v[4], None, 1).unwrap()),
            ("add", |t, v| t.add(v[0], v[1]).unwrap()),
            ("mul", |t, v| t.mul(v[0], v[1]).unwrap()),
            ("gate", |t, v| {
                let g = t.sigmoid(v[5]);
                t.channel_gate(v[0], g).unwrap()
            }),
            ("scale", |t, v| t.scale(v[0], -1.7)),
            ("sigmoid", |t, v| t.sigmoid(v[0])),
            ("tanh", |t, v| t.tanh(v[0])),
            ("relu", |t, v| t.relu(v[0])),
            ("concat", |t, v| t.concat(&[v[0], v[1], v[5]]).unwrap()),
            ("slice", |t, v| t.slice(v[0], 1, 1).unwrap()),
            ("maxpool", |t, v| t.maxpool2(v[0]).unwrap()),
            ("upsample", |t, v| t.upsample2(v[0])),
            ("sum_squares", |t, v| t.sum_squares(v[1])),
            ("bce", |t, v| {
                let p = t.sigmoid(v[5]);
                let y: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
                let w: Vec<f64> = (0..16).map(|i| 1.0 + (i % 4) as f64).collect();
                t.weighted_bce(p, &y, Some(&w)).unwrap()
            }),
            ("bce_logits", |t, v| {
                let y: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
                t.weighted_bce_logits(v[5], &y, None).unwrap()
            }),
            ("mse_both_sides", |t, v| {
                let a = t.slice(v[0], 0, 1).unwrap();
                let b = t.slice(v[1], 1, 1).unwrap();
                let w: Vec<f64> = (0..16).map(|i| (i % 5) as f64).collect();
                t.weighted_mse(a, b, Some(&w)).unwrap()
            }),
            ("linear_combination", |t, v| {
                let s1 = t.sum_squares(v[0]);
                let s2 = t.sum_squares(v[1]);
                t.linear_combination(&[(s1, 0.3), (s2, -1.2)]).unwrap()
            }),
        ];
        for (seed, (name, op)) in cases.into_iter().enumerate() {
            let (mut store, ids) = op_store(seed as u64 + 10);
            let report = check_gradients(&mut store, &[], GradCheckConfig::default(), |tape, s| {
                let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
                let out = op(tape, &vars);
                Ok(if tape.value(out).len() == 1 { out } else { project(tape, out) })
            })
            .unwrap();
            assert_report(&report, name);
        }
    }

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let (mut store, ids) = op_store(1);
        let mut tape = Tape::new();
        let terms: Vec<_> = ids
            .iter()
            .map(|&id| {
                let p = tape.param(&store, id);
                (tape.sum_squares(p), 1.0)
            })
            .collect();
        let loss = tape.linear_combination(&terms).unwrap();
        tape.backward(loss, &mut store).unwrap();
        for id in ids {
            for (g, p) in store.grad(id).data.iter().zip(&store.value(id).data) {
                assert_eq!(*g, 2.0 * p);
            }
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (mut store, ids) = op_store(2);
        let mut tape = Tape::new();
        let _ = tape.param(&store, ids[0]);
        let c = tape.constant(Tensor::scalar(4.0));
        tape.backward(c, &mut store).unwrap();
        assert!(store.ids().all(|id| store.grad(id).data.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn backward_without_forward_is_invalid_state() {
        let (mut store, _) = op_store(3);
        let mut other = Tape::new();
        let v = other.constant(Tensor::scalar(1.0));
        let empty = Tape::new();
        assert!(matches!(empty.backward(v, &mut store), Err(Error::InvalidState(_))));
    }

    fn tiny_config() -> NetConfig {
        NetConfig {
            input_channels: 3,
            static_channels: 1,
            cond_channels: 1,
            hidden_convlstm: 2,
            channel_ladder: vec![2, 3],
            d_h: 2,
            ghead_hidden: 3,
            ghead_layers: 1,
            n_heads: 2,
            context_len: 3,
            kernel_size: 3,
            use_attention: true,
        }
    }

    fn tiny_window(cfg: &NetConfig, grid: usize, steps: usize, rng: &mut RngStream) -> Window {
        Window {
            steps: (0..steps).map(|_| randn(cfg.input_channels, grid, grid, rng)).collect(),
            static_v: (cfg.static_channels > 0).then(|| randn(cfg.static_channels, grid, grid, rng)),
            cond: (cfg.cond_channels > 0).then(|| {
                Tensor::from_vec(
                    cfg.cond_channels,
                    grid,
                    grid,
                    (0..cfg.cond_channels * grid * grid).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect(),
                )
            }),
        }
    }

    fn build(cfg: &NetConfig, seed: u64) -> (Network, ParamStore) {
        let mut store = ParamStore::new();
        let net = Network::build(cfg, &mut store, &mut RngStream::new(seed, 0)).unwrap();
        (net, store)
    }

    #[test]
    fn convlstm_zero_params() {
        let cfg = tiny_config();
        let (net, mut store) = build(&cfg, 1);
        zero_all(&mut store);
        let mut rng = RngStream::new(4, 0);
        let mut tape = Tape::new();
        let x = tape.constant(randn(3, 4, 4, &mut rng));
        let h = tape.constant(randn(2, 4, 4, &mut rng));
        let c0 = randn(2, 4, 4, &mut rng);
        let c = tape.constant(c0.clone());
        let (h1, c1) = net.convlstm_step(&mut tape, &store, x, h, c).unwrap();
        assert_eq!(tape.value(h1).shape(), (2, 4, 4));
        for ((&cv, &c1v), &h1v) in c0.data.iter().zip(&tape.value(c1).data).zip(&tape.value(h1).data) {
            assert_eq!(c1v, 0.5 * cv);
            assert!((h1v - 0.5 * (0.5 * cv).tanh()).abs() < 1e-15);
        }
        let zc = tape.constant(Tensor::zeros(2, 4, 4));
        let (h2, c2) = net.convlstm_step(&mut tape, &store, x, h, zc).unwrap();
        assert!(tape.value(h2).data.iter().chain(&tape.value(c2).data).all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(5, 4, 4));
        assert!(net.convlstm_step(&mut tape, &store, bad, h, c).is_err());
    }

    #[test]
    fn attention_gate_cases() {
        let cfg = tiny_config();
        let (net, mut store) = build(&cfg, 2);
        let mut rng = RngStream::new(5, 0);
        let skip_t = randn(2, 4, 4, &mut rng);
        let mut tape = Tape::new();
        let gating = tape.constant(randn(2, 4, 4, &mut rng));
        let zero_skip = tape.constant(Tensor::zeros(2, 4, 4));
        let out = net.attention_gate(&mut tape, &store, 0, zero_skip, gating).unwrap();
        assert!(tape.value(out).data.iter().all(|&v| v == 0.0));

        zero_all(&mut store);
        let mut tape = Tape::new();
        let skip = tape.constant(skip_t.clone());
        let gating = tape.constant(randn(2, 4, 4, &mut rng));
        let out = net.attention_gate(&mut tape, &store, 0, skip, gating).unwrap();
        for (o, s) in tape.value(out).data.iter().zip(&skip_t.data) {
            assert_eq!(*o, 0.5 * s);
        }

        let no_attn = NetConfig { use_attention: false, ..cfg };
        let (net, store) = build(&no_attn, 2);
        let mut tape = Tape::new();
        let skip = tape.constant(skip_t.clone());
        let gating = tape.constant(randn(2, 4, 4, &mut rng));
        let out = net.attention_gate(&mut tape, &store, 0, skip, gating).unwrap();
        assert_eq!(tape.value(out), &skip_t);
    }

    #[test]
    fn embedding_shape_zero_net_and_determinism() {
        let cfg = tiny_config();
        let (net, mut store) = build(&cfg, 3);
        let mut rng = RngStream::new(6, 0);
        let w1 = tiny_window(&cfg, 4, 2, &mut rng);
        let run = |store: &ParamStore, w: &Window| {
            let mut tape = Tape::new();
            let e = net.embed_history(&mut tape, store, w).unwrap();
            tape.value(e).clone()
        };
        let e1 = run(&store, &w1);
        assert_eq!(e1.shape(), (cfg.d_h, 4, 4));
        assert!(e1.is_finite());
        assert_eq!(e1, run(&store, &w1.clone()));

        zero_all(&mut store);
        let out_b = store.id("out.b").unwrap();
        store.value_mut(out_b).data = vec![0.25, -1.5];
        let w2 = tiny_window(&cfg, 4, 3, &mut rng);
        for w in [&w1, &w2] {
            let e = run(&store, w);
            assert!(e.channel(0).iter().all(|&v| v == 0.25));
            assert!(e.channel(1).iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn embedding_rejects_indivisible_grid_and_long_window() {
        let cfg = tiny_config();
        let (net, store) = build(&cfg, 4);
        let mut rng = RngStream::new(7, 0);
        let odd = tiny_window(&cfg, 5, 2, &mut rng);
        let mut tape = Tape::new();
        assert!(matches!(net.embed_history(&mut tape, &store, &odd), Err(Error::InvalidConfiguration(_))));
        let long = tiny_window(&cfg, 4, 4, &mut rng);
        assert!(net.embed_history(&mut tape, &store, &long).is_err());
    }

    #[test]
    fn ghead_cases() {
        let cfg = tiny_config();
        let (net, mut store) = build(&cfg, 5);
        let mut rng = RngStream::new(8, 0);
        let mut tape = Tape::new();
        let emb_t = randn(2, 4, 4, &mut rng);
        let emb = tape.constant(emb_t.clone());
        let out = net.ghead_forward(&mut tape, &store, emb, 1).unwrap();
        assert_eq!(tape.value(out).shape(), (1, 4, 4));
        assert!(net.ghead_forward(&mut tape, &store, emb, 0).is_err());
        assert!(net.ghead_forward(&mut tape, &store, emb, 3).is_err());

        // identical embedding vectors at two cells give identical outputs
        let mut shared = emb_t.clone();
        for ch in 0..2 {
            let v = shared.channel(ch)[0];
            shared.channel_mut(ch)[9] = v;
        }
        let e2 = tape.constant(shared);
        let o2 = net.ghead_forward(&mut tape, &store, e2, 2).unwrap();
        assert_eq!(tape.value(o2).data[0], tape.value(o2).data[9]);

        // shifting the embedding shifts the output
        let mut shifted = Tensor::zeros(2, 4, 4);
        for ch in 0..2 {
            for r in 0..4 {
                for c in 1..4 {
                    shifted.channel_mut(ch)[r * 4 + c] = emb_t.channel(ch)[r * 4 + c - 1];
                }
            }
        }
        let zero_in = tape.constant(Tensor::zeros(2, 4, 4));
        let zero_out = net.ghead_forward(&mut tape, &store, zero_in, 1).unwrap();
        let es = tape.constant(shifted);
        let os = net.ghead_forward(&mut tape, &store, es, 1).unwrap();
        let (base, sh) = (tape.value(out).clone(), tape.value(os).clone());
        for r in 0..4 {
            assert_eq!(sh.data[r * 4], tape.value(zero_out).data[r * 4]);
            for c in 1..4 {
                assert_eq!(sh.data[r * 4 + c], base.data[r * 4 + c - 1]);
            }
        }

        zero_all(&mut store);
        let b = store.id("head2.out.b").unwrap();
        store.value_mut(b).data[0] = 3.5;
        let mut tape = Tape::new();
        let emb = tape.constant(emb_t);
        let out = net.ghead_forward(&mut tape, &store, emb, 2).unwrap();
        assert!(tape.value(out).data.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn pointwise_kernel_network_is_local() {
        let cfg = NetConfig { kernel_size: 1, ..tiny_config() };
        let (net, store) = build(&cfg, 6);
        let mut rng = RngStream::new(9, 0);
        let w = tiny_window(&cfg, 4, 3, &mut rng);
        let run = |w: &Window| {
            let mut tape = Tape::new();
            let e = net.embed_history(&mut tape, &store, w).unwrap();
            let o = net.ghead_forward(&mut tape, &store, e, 1).unwrap();
            tape.value(o).clone()
        };
        let base = run(&w);
        let mut perturbed = w.clone();
        let cell = 6;
        for s in perturbed.steps.iter_mut() {
            for ch in 0..3 {
                s.channel_mut(ch)[cell] += 1.7;
            }
        }
        perturbed.static_v.as_mut().unwrap().channel_mut(0)[cell] -= 0.9;
        let out = run(&perturbed);
        for i in 0..16 {
            if i == cell {
                assert_ne!(out.data[i], base.data[i]);
            } else {
                assert_eq!(out.data[i], base.data[i], "cell {i} changed");
            }
        }
    }

    #[test]
    fn full_model_gradient_check() {
        for (seed, kernel, attention) in [(11, 3, true), (12, 3, false), (13, 1, true)] {
            let cfg = NetConfig { kernel_size: kernel, use_attention: attention, ..tiny_config() };
            let (net, mut store) = build(&cfg, seed);
            let mut rng = RngStream::new(seed, 1);
            let w = tiny_window(&cfg, 4, 2, &mut rng);
            let target = randn(1, 4, 4, &mut rng);
            let mask: Vec<f64> = (0..16).map(|i| if i % 7 == 3 { 0.0 } else { 1.0 + (i % 3) as f64 }).collect();
            let report = check_gradients(&mut store, &[], GradCheckConfig::default(), |tape, s| {
                let e = net.embed_history(tape, s, &w)?;
                let o1 = net.ghead_forward(tape, s, e, 1)?;
                let o2 = net.ghead_forward(tape, s, e, 2)?;
                let t = tape.constant(target.clone());
                let l1 = tape.weighted_mse(o1, t, Some(&mask))?;
                let l2 = tape.weighted_mse(o2, t, None)?;
                tape.linear_combination(&[(l1, 0.5), (l2, 0.5)])
            })
            .unwrap();
            assert_report(&report, &format!("model k={kernel} attn={attention}"));
        }
    }

    #[test]
    fn bce_logits_matches_probability_form_and_saturates_cleanly() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_vec(1, 1, 3, vec![-2.0, 0.0, 3.0]));
        let p = tape.sigmoid(z);
        let y = [1.0, 0.0, 1.0];
        let a = tape.weighted_bce_logits(z, &y, None).unwrap();
        let b = tape.weighted_bce(p, &y, None).unwrap();
        assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-12);
        let big = tape.constant(Tensor::from_vec(1, 1, 2, vec![800.0, -800.0]));
        let l = tape.weighted_bce_logits(big, &[1.0, 0.0], None).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let half = tape.constant(Tensor::zeros(1, 2, 2));
        let l = tape.weighted_bce_logits(half, &[1.0, 0.0, 0.0, 1.0], None).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn backbone_excludes_heads_and_conditioning() {
        assert!(Network::is_backbone_param("convlstm.w"));
        assert!(Network::is_backbone_param("att0.psi_w"));
        assert!(!Network::is_backbone_param("enc0.cond_w"));
        assert!(!Network::is_backbone_param("head3.out.b"));
    }
}
