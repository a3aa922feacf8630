use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::network::BranchUsage;

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        frame_len: 16,
        hop: 8,
        channels: [2, 3, 3],
        n_dynamic_blocks: 2,
        mask_downsample: 2,
        filter_width: 3,
        ..NetworkConfig::default()
    }
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        network: tiny_net(),
        batch_size: 4,
        stage1_epochs: 3,
        stage2_epochs: 2,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn toy_set(n: usize, t: usize, seed: u64) -> TrainSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|_| {
            let clean: Vec<f64> = (0..2 * t * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let noisy = clean.iter().map(|c| c + rng.gen_range(-0.3..0.3)).collect();
            (
                Tensor::new([1, 2, t, 9], noisy).unwrap(),
                Tensor::new([1, 2, t, 9], clean).unwrap(),
            )
        })
        .collect();
    TrainSet { items }
}

#[test]
fn difficulty_examples() {
    assert_eq!(difficulty(0.0, 0.06).unwrap(), 0.0);
    assert_eq!(difficulty(0.03, 0.06).unwrap(), 0.5);
    assert_eq!(difficulty(0.1, 0.06).unwrap(), 1.0);
    assert_eq!(difficulty(0.06, 0.06).unwrap(), 1.0);
    assert!(difficulty(-1e-9, 0.06).is_err());
    assert!(difficulty(0.1, 0.0).is_err());
}

proptest! {
    #[test]
    fn difficulty_is_bounded_and_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, lt in 1e-3f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let dl = difficulty(lo, lt).unwrap();
        let dh = difficulty(hi, lt).unwrap();
        prop_assert!((0.0..=1.0).contains(&dl));
        prop_assert!(dl <= dh);
    }

    #[test]
    fn returns_match_double_loop(r in prop::collection::vec(-10.0f64..10.0, 0..12)) {
        let got = returns_to_go(&r);
        for i in 0..r.len() {
            let mut s = 0.0;
            for j in (i..r.len()).rev() {
                s += r[j];
            }
            prop_assert_eq!(got[i], s);
        }
    }
}

#[test]
fn reward_examples() {
    assert_eq!(step_reward(0.0, 1, 4, 1.0, 0.0, 0.08).unwrap(), 0.0);
    assert_eq!(step_reward(1.0, 2, 4, 1.0, 0.0, 0.08).unwrap(), -0.08);
    let r = step_reward(0.0, 4, 4, 1.0, -0.05, 0.08).unwrap();
    assert!((r - 0.05).abs() < 1e-17);
    assert!(step_reward(0.0, 0, 4, 1.0, 0.0, 0.08).is_err());
    assert!(step_reward(0.0, 5, 4, 1.0, 0.0, 0.08).is_err());
}

#[test]
fn return_examples() {
    assert_eq!(returns_to_go(&[1.0, 1.0, 1.0]), vec![3.0, 2.0, 1.0]);
    assert_eq!(returns_to_go(&[0.0, 0.0, 0.7]), vec![0.7, 0.7, 0.7]);
}

#[test]
fn total_return_decomposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.gen_range(1..6);
        let costs: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..=8u8)) / 8.0).collect();
        let d = f64::from(rng.gen_range(0..=4u8)) / 4.0;
        let delta = -f64::from(rng.gen_range(0..=16u8)) / 64.0;
        let gamma = 0.125;
        let r: Vec<f64> = (0..n)
            .map(|i| step_reward(costs[i], i + 1, n, d, delta, gamma).unwrap())
            .collect();
        let expect = -gamma * costs.iter().sum::<f64>() + d * -delta;
        // dyadic inputs keep every partial sum exact
        assert_eq!(returns_to_go(&r)[0], expect);
    }
}

fn surrogate_grad(lp_vals: &[Vec<f64>], returns: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let k = lp_vals[0].len();
    let lps: Vec<Var> = lp_vals
        .iter()
        .enumerate()
        .map(|(i, v)| g.param(&format!("lp{i}"), &Tensor::new([k, 1, 1, 1], v.clone()).unwrap()))
        .collect();
    let s = reinforce_surrogate(&mut g, &lps, returns).unwrap();
    let grads = g.backward(s).unwrap();
    lps.iter()
        .map(|v| grads.get(*v).unwrap().data().to_vec())
        .collect()
}

#[test]
fn surrogate_gradient_is_linear_in_returns() {
    let lp = vec![vec![-0.3, -1.2, -0.7], vec![-0.1, -0.9, -2.0]];
    let r = vec![vec![0.5, -0.25, 1.0], vec![0.125, 0.0, -0.5]];
    let g1 = surrogate_grad(&lp, &r);
    // d/d lp_{k,i} = -R_{k,i} / K
    for i in 0..2 {
        for k in 0..3 {
            assert_eq!(g1[i][k], -r[i][k] / 3.0);
        }
    }
    let r2: Vec<Vec<f64>> = r.iter().map(|v| v.iter().map(|x| 2.0 * x).collect()).collect();
    let g2 = surrogate_grad(&lp, &r2);
    for i in 0..2 {
        for k in 0..3 {
            assert_eq!(g2[i][k], 2.0 * g1[i][k]);
        }
    }
    let zero = vec![vec![0.0; 3]; 2];
    assert!(surrogate_grad(&lp, &zero).iter().flatten().all(|&v| v == 0.0));
    let mut g = Graph::new();
    assert!(reinforce_surrogate(&mut g, &[], &[]).is_err());
}

#[test]
fn stage1_loss_composes_by_hand() {
    let net = tiny_net();
    let ps = net.init_params(InitScheme::Standard, 3).unwrap();
    let mut ps = ps;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in ["dec.2.w", "head.w"] {
        ps.get_mut(k).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let set = toy_set(2, 8, 5);
    let (x, y) = &set.batches(2, 0).unwrap()[0];
    for beta in [0.0, 0.5, 2.0] {
        let mut ctx = Ctx::train(&ps);
        let xv = ctx.g.constant(x.clone());
        let yv = ctx.g.constant(y.clone());
        let tr = net.forward(&mut ctx, xv, &Routing::Random { seed: 1 }).unwrap();
        let (total, main, _) = stage1_loss(&mut ctx.g, &tr, yv, beta).unwrap();
        let mse = |a: &Tensor| {
            a.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
        };
        let m = mse(ctx.g.value(tr.s_pred));
        let inter: f64 =
            tr.intermediates.iter().map(|v| mse(ctx.g.value(*v))).sum::<f64>() / tr.intermediates.len() as f64;
        assert!((ctx.g.value(main).data()[0] - m).abs() < 1e-15);
        let expect = m + beta * inter;
        assert!((ctx.g.value(total).data()[0] - expect).abs() <= 1e-14 * expect.max(1.0));
        if beta == 0.0 {
            assert_eq!(ctx.g.value(total).data()[0], ctx.g.value(main).data()[0]);
        }
    }
}

#[test]
fn adam_first_step_matches_hand_computation() {
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::new([2], vec![0.5, -0.25]).unwrap()).unwrap();
    let mut opt = AdamState::default();
    let g = vec![("w".to_string(), Tensor::new([2], vec![0.2, -4.0]).unwrap())];
    opt.update(&mut ps, &g, |_| 0.01).unwrap();
    // the first bias-corrected step is lr * g / (|g| + eps) = lr * sign(g)
    let w = ps.get("w").unwrap().data();
    assert!((w[0] - (0.5 - 0.01)).abs() < 1e-7);
    assert!((w[1] - (-0.25 + 0.01)).abs() < 1e-7);
    assert_eq!(opt.steps["w"], 1);
    assert!(w.iter().all(|&v| v == round_f32(v)));
}

#[test]
fn filter_and_backbone_use_separate_rates() {
    let t = Trainer::new(tiny_cfg()).unwrap();
    let lr = t.learning_rate();
    assert_eq!(lr("ff.conv.0.w"), 1e-4);
    assert_eq!(lr("enc.0.w"), 1e-3);
    assert_eq!(lr("ffx.w"), 1e-3);
}

#[test]
fn training_is_deterministic() {
    let set = toy_set(6, 8, 9);
    let run = || {
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let mut losses = Vec::new();
        for (x, y) in set.batches(4, 0).unwrap().iter().cycle().take(5) {
            losses.push(t.stage1_step(x, y).unwrap().loss);
        }
        for (x, y) in set.batches(4, 1).unwrap().iter().take(2) {
            losses.push(t.stage2_step(x, y).unwrap().loss);
        }
        (losses, t.model.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn stage1_reduces_loss_on_toy_data() {
    let set = toy_set(4, 8, 10);
    let cfg = TrainConfig {
        batch_size: 4,
        lr_backbone: 3e-3,
        ..tiny_cfg()
    };
    let mut t = Trainer::new(cfg).unwrap();
    let first = t.run_epoch(1, &set).unwrap().mse;
    let stats = t.fit(1, &set, 60, |_| {}).unwrap();
    let last = stats.last().unwrap().mse;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn stage1_leaves_filter_untouched() {
    let set = toy_set(4, 8, 11);
    let mut t = Trainer::new(tiny_cfg()).unwrap();
    let before = t.model.params.clone();
    t.run_epoch(1, &set).unwrap();
    for (k, v) in before.iter().filter(|(k, _)| k.starts_with("ff.")) {
        assert_eq!(t.model.params.get(k).unwrap(), v);
    }
    assert!(t.optimizer.steps.keys().all(|k| !k.starts_with("ff.")));
}

#[test]
fn stage2_updates_filter_and_reports_routing() {
    let set = toy_set(4, 8, 12);
    let mut t = Trainer::new(tiny_cfg()).unwrap();
    t.run_epoch(1, &set).unwrap();
    let before = t.model.params.clone();
    let s = t.run_epoch(2, &set).unwrap();
    assert!(s.nonlocal_fraction > 0.0 && s.nonlocal_fraction < 1.0);
    let changed = before
        .iter()
        .filter(|(k, _)| k.starts_with("ff."))
        .any(|(k, v)| t.model.params.get(k).unwrap() != v);
    assert!(changed);
}

#[test]
fn unrouted_fusion_trains_in_stage2() {
    let set = toy_set(4, 8, 13);
    let cfg = TrainConfig {
        network: NetworkConfig {
            fusion: crate::network::Fusion::Concat,
            ..tiny_net()
        },
        ..tiny_cfg()
    };
    let mut t = Trainer::new(cfg).unwrap();
    t.run_epoch(1, &set).unwrap();
    let s = t.run_epoch(2, &set).unwrap();
    assert!(s.mse.is_finite());
    assert_eq!(s.reward, 0.0);
}

#[test]
fn moving_baseline_is_tracked() {
    let set = toy_set(4, 8, 14);
    let cfg = TrainConfig {
        reward_baseline: true,
        ..tiny_cfg()
    };
    let mut t = Trainer::new(cfg).unwrap();
    t.run_epoch(2, &set).unwrap();
    assert!(t.baseline.is_some_and(f64::is_finite));
}

#[test]
fn nan_input_is_reported_as_divergence() {
    let mut t = Trainer::new(tiny_cfg()).unwrap();
    let x = Tensor::full([1, 2, 8, 9], f64::NAN);
    let y = Tensor::zeros([1, 2, 8, 9]);
    assert!(matches!(t.stage1_step(&x, &y), Err(Error::Divergence { .. })));
}

fn forward_all(ckpt: &Checkpoint, inputs: &[Tensor]) -> Vec<Tensor> {
    let m = ckpt.model();
    inputs
        .iter()
        .map(|x| {
            let mut ctx = Ctx::no_grad(&m.params, false);
            let xv = ctx.g.constant(x.clone());
            let tr = m
                .config
                .forward(
                    &mut ctx,
                    xv,
                    &Routing::Policy {
                        mode: ActionMode::Argmax,
                        seed: 0,
                    },
                )
                .unwrap();
            ctx.g.value(tr.s_pred).clone()
        })
        .collect()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let set = toy_set(4, 8, 15);
    let mut t = Trainer::new(TrainConfig {
        reward_baseline: true,
        ..tiny_cfg()
    })
    .unwrap();
    t.run_epoch(1, &set).unwrap();
    t.run_epoch(2, &set).unwrap();
    let ck = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ck, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, ck);
    let inputs: Vec<Tensor> = set.items.iter().map(|(x, _)| x.clone()).collect();
    let a = forward_all(&ck, &inputs);
    let b = forward_all(&back, &inputs);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    // continuing from the loaded state matches continuing in memory
    let mut t2 = Trainer::from_checkpoint(back).unwrap();
    let s1 = t.run_epoch(2, &set).unwrap();
    let s2 = t2.run_epoch(2, &set).unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn stage1_checkpoint_feeds_stage2() {
    let set = toy_set(4, 8, 16);
    let ck1 = stage1_train(tiny_cfg(), &set, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ck1, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.stage, 1);
    let ck2 = stage2_train(loaded, &set, |_| {}).unwrap();
    assert_eq!(ck2.stage, 2);
    assert!(ck2.step > ck1.step);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let t = Trainer::new(tiny_cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&t.checkpoint(), dir.path()).unwrap();
    let bin = dir.path().join(PARAMS_FILE);
    let full = fs::read(&bin).unwrap();
    for cut in [0, 3, 11, full.len() / 2, full.len() - 1] {
        fs::write(&bin, &full[..cut]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::CorruptCheckpoint { .. })
        ));
    }
    let mut extra = full.clone();
    extra.push(0);
    fs::write(&bin, &extra).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::CorruptCheckpoint { .. })));
    let mut bad_version = full.clone();
    bad_version[4] = 9;
    fs::write(&bin, &bad_version).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(Error::VersionMismatch { found: 9, expected: 1 })
    ));
    fs::write(&bin, &full).unwrap();
    let meta = dir.path().join(META_FILE);
    let text = fs::read_to_string(&meta).unwrap();
    fs::write(&meta, text.replace("\"schema_version\": 1", "\"schema_version\": 2")).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(Error::VersionMismatch { found: 2, .. })
    ));
    fs::write(&meta, text).unwrap();
    assert!(load_checkpoint(dir.path()).is_ok());
}

#[test]
fn usage_is_recorded_per_block() {
    let set = toy_set(2, 8, 17);
    let m = Model::new(tiny_net(), InitScheme::Standard, 1).unwrap();
    let mut ctx = Ctx::no_grad(&m.params, false);
    let x = ctx.g.constant(set.items[0].0.clone());
    let tr = m.config.forward(&mut ctx, x, &Routing::AllNonLocal).unwrap();
    assert!(tr.blocks.iter().all(|b| b.usage == BranchUsage::NONLOCAL));
    assert_eq!(mean_nonlocal(&tr), 1.0);
}
