//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! `SEKIT_ACCEPTANCE_ONLY=1,5,13` restricts the run to the listed criteria.
//! `SEKIT_ACCEPTANCE_STRICT=1` makes any failure exit non-zero.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sekit_core::autograd::{Graph, TokenAxis, Var};
use sekit_core::config::Settings;
use sekit_core::dsp::{self, StftConfig, Waveform};
use sekit_core::eval::{self, argmax_routing, evaluate, run_ablation, AblationCase, EvalOptions};
use sekit_core::filter::{self, select_action, upsample_nearest, ActionMode, FeatureFilter, RoutingRule};
use sekit_core::gradcheck::{check_directional, probe};
use sekit_core::network::{count_flops, BranchUsage, InitScheme, Model, NetworkConfig, Routing};
use sekit_core::nn::{ConvBlock, Ctx, LocalAttention, LstmCell, NonLocalAttention, ParamSet, WeightInit};
use sekit_core::synth::{
    build_dataset, gen_noise, gen_pseudo_speech, Dataset, DatasetConfig, NoiseKind, PseudoSpeechParams,
    Split,
};
use sekit_core::train::{
    difficulty, load_checkpoint, per_sample_mse, reinforce_surrogate, returns_to_go, save_checkpoint, step_reward,
    Checkpoint, RewardConfig, TrainConfig, TrainSet, Trainer,
};
use sekit_core::Tensor;

type Outcome = anyhow::Result<(bool, String)>;

// Pinned tolerances and budgets.
const STFT_REL_TOL: f64 = 1e-6;
const STFT_TIME_S: f64 = 5.0;
const SNR_TOL_DB: f64 = 0.01;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-3;
const GRAD_DIRS: usize = 24;
const GRAD_TIME_S: f64 = 120.0;
const ROW_SUM_TOL: f64 = 1e-6;
const RANK1_TOL: f64 = 1e-8;
const REINFORCE_SAMPLES: usize = 10_000;
const REINFORCE_REL_TOL: f64 = 0.05;
const REINFORCE_TIME_S: f64 = 60.0;
const OVERFIT_PAIRS: usize = 10;
const OVERFIT_EPOCHS: usize = 500;
const OVERFIT_RATIO: f64 = 0.10;
const OVERFIT_TIME_S: f64 = 15.0 * 60.0;
const DESK_STAGE1_EPOCHS: usize = 40;
const DESK_STAGE2_EPOCHS: usize = 200;
const ABLATION_STAGE1_EPOCHS: usize = 20;
const ABLATION_STAGE2_EPOCHS: usize = 20;
const RTF_FRAMES: usize = 512;
const RTF_RUNS: usize = 5;
const ROUNDTRIP_INPUTS: usize = 5;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let d = (0..n).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect();
    Tensor::new(shape.to_vec(), d).unwrap()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = a.iter().map(|x| x * x).sum();
    (num / den).sqrt()
}

fn c1_stft_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = StftConfig::default();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x = Waveform::new((0..16000).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>())?;
        let y = dsp::istft(&dsp::stft(&x, cfg)?, cfg.hop, x.len())?;
        worst = worst.max(rel_l2(x.samples(), y.samples()));
    }
    let t = start.elapsed().as_secs_f64();
    Ok((
        worst <= STFT_REL_TOL && t < STFT_TIME_S,
        format!("max rel-L2 {worst:.2e} (<= {STFT_REL_TOL:e}), {t:.2} s (< {STFT_TIME_S} s)"),
    ))
}

fn c2_snr_mixing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kinds = [NoiseKind::White, NoiseKind::FilteredBurst, NoiseKind::babble()];
    let speech = PseudoSpeechParams {
        segment_s: 1.0,
        ..PseudoSpeechParams::default()
    };
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let target = [-5.0, 0.0, 5.0][rng.gen_range(0..3)];
        let clean = gen_pseudo_speech(&speech, rng.gen())?;
        let noise = gen_noise(kinds[i % kinds.len()], 1.0, rng.gen())?;
        let (mix, _) = dsp::mix_at_snr(&clean, &noise, target)?;
        let residual = Waveform::new(mix.samples().iter().zip(clean.samples()).map(|(m, c)| m - c).collect())?;
        let got = dsp::measure_snr(&clean, &residual)?.db;
        worst = worst.max((got - target).abs());
    }
    Ok((worst <= SNR_TOL_DB, format!("max |SNR error| {worst:.2e} dB (<= {SNR_TOL_DB})")))
}

fn c3_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut results: Vec<(&str, f64)> = Vec::new();

    let la = LocalAttention { channels: 2 };
    let mut ps = ParamSet::new();
    la.init("la", false, &mut ps, &mut rng)?;
    let x = randn(&[1, 2, 8, 8], &mut rng, 1.0);
    let r = check_directional(
        &[x],
        &ps,
        |ctx, v| {
            let y = la.forward(ctx, "la", v[0])?;
            probe(&mut ctx.g, y, 31)
        },
        GRAD_DIRS,
        GRAD_STEP,
        32,
    )?;
    results.push(("local attention", r.max_rel_err));

    let na = NonLocalAttention {
        channels: 2,
        axis: TokenAxis::Time,
    };
    let mut ps = ParamSet::new();
    na.init("na", false, &mut ps, &mut rng)?;
    let x = randn(&[1, 2, 8, 8], &mut rng, 0.3);
    let r = check_directional(
        &[x],
        &ps,
        |ctx, v| {
            let y = na.forward(ctx, "na", v[0])?;
            probe(&mut ctx.g, y, 33)
        },
        GRAD_DIRS,
        GRAD_STEP,
        34,
    )?;
    results.push(("non-local attention", r.max_rel_err));

    let blk = ConvBlock::same3(2, 3);
    let mut ps = ParamSet::new();
    blk.init("c", true, WeightInit::Random, &mut ps, &mut rng)?;
    let x = randn(&[1, 2, 8, 8], &mut rng, 1.0);
    let r = check_directional(
        &[x],
        &ps,
        |ctx, v| {
            let y = blk.forward(ctx, "c", v[0])?;
            probe(&mut ctx.g, y, 35)
        },
        GRAD_DIRS,
        GRAD_STEP,
        36,
    )?;
    results.push(("conv block", r.max_rel_err));

    let cell = LstmCell { input: 8, hidden: 8 };
    let mut ps = ParamSet::new();
    cell.init("l", &mut ps, &mut rng)?;
    let xs: Vec<Tensor> = (0..3).map(|_| randn(&[2, 8], &mut rng, 1.0)).collect();
    let r = check_directional(
        &xs,
        &ps,
        |ctx, v| {
            let mut st = cell.zero_state(&mut ctx.g, 2);
            for &x in v {
                st = cell.step(ctx, "l", x, st)?;
            }
            let s = ctx.g.add(st.h, st.c)?;
            probe(&mut ctx.g, s, 37)
        },
        GRAD_DIRS,
        GRAD_STEP,
        38,
    )?;
    results.push(("recurrent cell", r.max_rel_err));

    let cfg = NetworkConfig {
        frame_len: 16,
        hop: 8,
        channels: [2, 2, 2],
        n_dynamic_blocks: 1,
        mask_downsample: 2,
        filter_width: 3,
        ..NetworkConfig::default()
    };
    let ps = cfg.init_params(InitScheme::Standard, 39)?;
    let mut mask = vec![0.0; 2 * 64];
    for u in 0..64 {
        mask[usize::from(rng.gen::<bool>()) * 64 + u] = 1.0;
    }
    let mask = Tensor::new([1, 2, 8, 8], mask)?;
    let x = randn(&[1, 2, 8, 8], &mut rng, 1.0);
    let r = check_directional(
        &[x],
        &ps,
        |ctx, v| {
            let y = cfg.dynamic_block(ctx, 0, v[0], Some(&mask))?;
            probe(&mut ctx.g, y, 40)
        },
        GRAD_DIRS,
        GRAD_STEP,
        41,
    )?;
    results.push(("dynamic block", r.max_rel_err));

    let t = start.elapsed().as_secs_f64();
    let ok = results.iter().all(|(_, e)| *e <= GRAD_REL_TOL) && t < GRAD_TIME_S;
    let detail = results
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        ok,
        format!("{GRAD_DIRS} directions, step {GRAD_STEP:e}; {detail} (<= {GRAD_REL_TOL:e}); {t:.1} s"),
    ))
}

fn c4_row_stochastic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut in_range = true;
    for i in 0..100 {
        let c = rng.gen_range(1..5);
        let t = rng.gen_range(1..24);
        let f = rng.gen_range(1..10);
        let na = NonLocalAttention {
            channels: c,
            axis: TokenAxis::Time,
        };
        let mut ps = ParamSet::new();
        na.init("na", false, &mut ps, &mut rng)?;
        let mut ctx = Ctx::no_grad(&ps, false);
        let scale = [0.1, 1.0, 5.0][i % 3];
        let x = ctx.g.constant(randn(&[2, c, t, f], &mut rng, scale));
        let o = na.forward_full(&mut ctx, "na", x)?;
        for row in ctx.g.value(o.attention).data().chunks(t) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            in_range &= row.iter().all(|v| (0.0..=1.0).contains(v));
        }
    }
    Ok((
        worst <= ROW_SUM_TOL && in_range,
        format!("max |row sum - 1| {worst:.1e} (<= {ROW_SUM_TOL:e}); entries in [0,1]: {in_range}"),
    ))
}

fn c5_partition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0usize;
    let mut checked = 0usize;
    for i in 0..1000 {
        let (b, t, f) = (rng.gen_range(1..3), rng.gen_range(1..9), rng.gen_range(1..9));
        let n = b * 2 * t * f;
        let p = Tensor::new([b, 2, t, f], (0..n).map(|_| rng.gen::<f64>()).collect())?;
        for mode in [ActionMode::Sample, ActionMode::Argmax] {
            let a = select_action(&p, mode, RoutingRule::Categorical, i as u64)?;
            let full = upsample_nearest(&a.mask, 4, 4 * t - 1, 4 * f - 2)?;
            for m in [&a.mask, &full] {
                let [bb, _, tt, ff] = m.dims4()?;
                let plane = tt * ff;
                for bi in 0..bb {
                    let d = &m.data()[bi * 2 * plane..][..2 * plane];
                    for u in 0..plane {
                        checked += 1;
                        if d[u] + d[plane + u] != 1.0 {
                            violations += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((
        violations == 0,
        format!("{violations} violations over {checked} units (low-res and upsampled, sampled and argmax)"),
    ))
}

/// Singular values, largest first, by one-sided Jacobi rotations.
fn singular_values(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut u = a.to_vec();
    for _ in 0..100 {
        let mut off: f64 = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let (mut al, mut be, mut ga) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let (x, y) = (u[i * n + p], u[i * n + q]);
                    al += x * x;
                    be += y * y;
                    ga += x * y;
                }
                if ga == 0.0 || al == 0.0 || be == 0.0 {
                    continue;
                }
                off = off.max(ga.abs() / (al * be).sqrt());
                let zeta = (be - al) / (2.0 * ga);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (u[i * n + p], u[i * n + q]);
                    u[i * n + p] = c * x - s * y;
                    u[i * n + q] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| u[i * n + j].powi(2)).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn randomize(ps: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = ps
        .iter()
        .filter(|(k, _)| k.starts_with(prefix) && !ParamSet::is_buffer(k))
        .map(|(k, _)| k.clone())
        .collect();
    for k in names {
        let t = ps.get_mut(&k).unwrap();
        *t = randn(t.shape(), rng, scale);
    }
}

fn c6_rank_one() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut matrices = 0;
    for _ in 0..100 {
        let ff = FeatureFilter {
            cin: 4,
            width: 8,
            downsample: [1, 2, 4][rng.gen_range(0..3)],
        };
        let mut ps = ParamSet::new();
        ff.init(&mut ps, &mut rng)?;
        randomize(&mut ps, filter::PREFIX, &mut rng, 1.0);
        let t = rng.gen_range(8..40);
        let mut ctx = Ctx::no_grad(&ps, false);
        let mut state = ff.zero_state(&mut ctx.g, 2);
        for _ in 0..3 {
            let z = ctx.g.constant(randn(&[2, 4, t, 33], &mut rng, 1.0));
            let pm = ff.forward(&mut ctx, z, &mut state)?;
            let p = ctx.g.value(pm.p_low);
            let [b, c, tl, fl] = p.dims4()?;
            for plane in p.data().chunks(tl * fl).take(b * c) {
                let sv = singular_values(plane, tl, fl);
                worst = worst.max(sv.get(1).copied().unwrap_or(0.0));
                matrices += 1;
            }
        }
    }
    Ok((
        worst <= RANK1_TOL,
        format!("max second singular value {worst:.1e} over {matrices} policy channels (<= {RANK1_TOL:e})"),
    ))
}

fn c7_difficulty() -> Outcome {
    let s = Settings::parse("l_t = 0.06\ngamma = 0.08\n")?;
    let (l_t, gamma) = (s.train.reward.l_t, s.train.reward.gamma);
    let verbatim = l_t == 0.06 && gamma == 0.08;
    let defaults = RewardConfig::default().l_t == 0.06 && RewardConfig::default().gamma == 0.08;
    let mut grid: Vec<f64> = (0..996).map(|i| 3.0 * l_t * i as f64 / 995.0).collect();
    grid.extend([0.0, l_t - 1e-12, l_t - f64::EPSILON * l_t, l_t, 1e6]);
    let mut mismatches = 0;
    for &l in &grid {
        let expected = (l / l_t).clamp(0.0, 1.0);
        if difficulty(l, l_t)? != expected {
            mismatches += 1;
        }
    }
    Ok((
        mismatches == 0 && verbatim && defaults && grid.len() >= 1000,
        format!(
            "{mismatches} mismatches on {} points; config l_t={l_t}, gamma={gamma} (verbatim {verbatim}, defaults {defaults})",
            grid.len()
        ),
    ))
}

struct PolicyGrads {
    by_name: BTreeMap<String, Vec<f64>>,
}

impl PolicyGrads {
    fn flat(&self) -> Vec<f64> {
        self.by_name.values().flatten().copied().collect()
    }
}

fn filter_grads(g: &Graph, loss: Var, sign: f64) -> anyhow::Result<PolicyGrads> {
    let grads = g.backward(loss)?;
    let mut by_name = BTreeMap::new();
    for (name, v) in g.params() {
        if name.starts_with(filter::PREFIX) && name[filter::PREFIX.len()..].starts_with('.') {
            if let Some(t) = grads.get(*v) {
                by_name.insert(name.clone(), t.data().iter().map(|x| sign * x).collect());
            }
        }
    }
    Ok(PolicyGrads { by_name })
}

fn repeat_batch(x: &Tensor, b: usize) -> anyhow::Result<Tensor> {
    Ok(Tensor::stack_batch(&vec![x.clone(); b])?)
}

/// Per-sample returns `[block][sample]` for the realised losses and routing.
fn returns_for(
    l_d: &[f64],
    l_rand: f64,
    nonlocal: &[Vec<f64>],
    rw: RewardConfig,
) -> anyhow::Result<Vec<Vec<f64>>> {
    let n = nonlocal.len();
    let k = l_d.len();
    let mut out = vec![vec![0.0; k]; n];
    for s in 0..k {
        let d = difficulty(l_d[s], rw.l_t)?;
        let delta = l_d[s] - l_rand;
        let r = (0..n)
            .map(|i| step_reward(nonlocal[i][s], i + 1, n, d, delta, rw.gamma))
            .collect::<sekit_core::Result<Vec<_>>>()?;
        for (i, g) in returns_to_go(&r).into_iter().enumerate() {
            out[i][s] = g;
        }
    }
    Ok(out)
}

fn c8_reinforce() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = NetworkConfig {
        frame_len: 16,
        hop: 8,
        channels: [2, 3, 3],
        n_dynamic_blocks: 2,
        mask_downsample: 4,
        filter_width: 3,
        ..NetworkConfig::default()
    };
    let mut ps = cfg.init_params(InitScheme::Standard, 80)?;
    randomize(&mut ps, filter::PREFIX, &mut rng, 0.7);
    randomize(&mut ps, "dec.2", &mut rng, 0.5);
    let x = randn(&[1, 2, 4, 9], &mut rng, 0.5);
    let clean = randn(&[1, 2, 4, 9], &mut rng, 0.5);
    let rw = RewardConfig::default();
    let n = cfg.n_dynamic_blocks;
    let (tl, fl) = filter::low_res(4, cfg.feature_bins(), cfg.mask_downsample);
    anyhow::ensure!((tl, fl) == (1, 1), "expected a 1x1 decision grid, got {tl}x{fl}");

    let l_rand = {
        let mut ctx = Ctx::no_grad(&ps, false);
        let xv = ctx.g.constant(x.clone());
        let tr = cfg.forward(&mut ctx, xv, &Routing::Random { seed: 3 })?;
        per_sample_mse(ctx.g.value(tr.s_pred), &clean)?[0]
    };

    // Exact enumeration of the 2^n action sequences.
    let n_seq = 1usize << n;
    let actions: Vec<Tensor> = (0..n)
        .map(|i| {
            let mut d = vec![0.0; n_seq * 2];
            for s in 0..n_seq {
                let nl = (s >> (n - 1 - i)) & 1;
                d[s * 2 + nl] = 1.0;
            }
            Tensor::new([n_seq, 2, 1, 1], d).unwrap()
        })
        .collect();
    let run = |ps: &ParamSet, weights: &dyn Fn(&[f64], &[Vec<f64>], usize) -> f64| -> anyhow::Result<(PolicyGrads, Vec<f64>, Vec<Vec<f64>>)> {
        let mut ctx = Ctx {
            g: Graph::new(),
            params: ps,
            train: false,
        };
        let xv = ctx.g.constant(repeat_batch(&x, n_seq)?);
        let tr = cfg.forward(&mut ctx, xv, &Routing::Replay(actions.clone()))?;
        let l_d = per_sample_mse(ctx.g.value(tr.s_pred), &repeat_batch(&clean, n_seq)?)?;
        let nonlocal: Vec<Vec<f64>> = tr.blocks.iter().map(|b| b.nonlocal_fraction.clone()).collect();
        let ret = returns_for(&l_d, l_rand, &nonlocal, rw)?;
        let lps: Vec<Var> = tr.blocks.iter().map(|b| b.log_prob.unwrap()).collect();
        let prob: Vec<f64> = (0..n_seq)
            .map(|s| lps.iter().map(|&v| ctx.g.value(v).data()[s]).sum::<f64>().exp())
            .collect();
        let weighted: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n_seq).map(|s| n_seq as f64 * weights(&prob, &ret, s) * ret[i][s]).collect())
            .collect();
        let sur = reinforce_surrogate(&mut ctx.g, &lps, &weighted)?;
        Ok((filter_grads(&ctx.g, sur, -1.0)?, prob, ret))
    };
    let (exact, prob, _) = run(&ps, &|p, _, s| p[s])?;
    let exact = exact.flat();
    let per_seq: Vec<Vec<f64>> = (0..n_seq)
        .map(|k| run(&ps, &|_, _, s| if s == k { 1.0 } else { 0.0 }).map(|g| g.0.flat()))
        .collect::<anyhow::Result<_>>()?;
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let tr_cov: f64 = (0..n_seq)
        .map(|s| prob[s] * per_seq[s].iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    let predicted = (tr_cov / REINFORCE_SAMPLES as f64).sqrt() / norm(&exact);

    // The estimate is unbiased: compare with a central difference of the
    // enumerated expected return along a random direction.
    let names: Vec<String> = ps
        .iter()
        .filter(|(k, _)| k.starts_with("ff.") && !ParamSet::is_buffer(k))
        .map(|(k, _)| k.clone())
        .collect();
    let dirs: Vec<Tensor> = names.iter().map(|k| randn(ps.get(k).unwrap().shape(), &mut rng, 1.0)).collect();
    let expected_return = |h: f64| -> anyhow::Result<f64> {
        let mut q = ps.clone();
        for (k, d) in names.iter().zip(&dirs) {
            let t = q.get_mut(k)?;
            for (a, b) in t.data_mut().iter_mut().zip(d.data()) {
                *a += h * b;
            }
        }
        let (_, p, r) = run(&q, &|p, _, s| p[s])?;
        Ok((0..n_seq).map(|s| p[s] * r[0][s]).sum())
    };
    let h = 1e-5;
    let fd = (expected_return(h)? - expected_return(-h)?) / (2.0 * h);
    let exact_named = run(&ps, &|p, _, s| p[s])?.0;
    let analytic: f64 = names
        .iter()
        .zip(&dirs)
        .map(|(k, d)| {
            exact_named
                .by_name
                .get(k)
                .map_or(0.0, |g| g.iter().zip(d.data()).map(|(a, b)| a * b).sum())
        })
        .sum();
    let unbiased_err = (fd - analytic).abs() / fd.abs().max(analytic.abs());

    // Monte Carlo: one batch of independent sampled trajectories.
    let k = REINFORCE_SAMPLES;
    let mut ctx = Ctx {
        g: Graph::new(),
        params: &ps,
        train: false,
    };
    let xv = ctx.g.constant(repeat_batch(&x, k)?);
    let tr = cfg.forward(
        &mut ctx,
        xv,
        &Routing::Policy {
            mode: ActionMode::Sample,
            seed: 88,
        },
    )?;
    let l_d = per_sample_mse(ctx.g.value(tr.s_pred), &repeat_batch(&clean, k)?)?;
    let nonlocal: Vec<Vec<f64>> = tr.blocks.iter().map(|b| b.nonlocal_fraction.clone()).collect();
    let returns = returns_for(&l_d, l_rand, &nonlocal, rw)?;
    let lps: Vec<Var> = tr.blocks.iter().map(|b| b.log_prob.unwrap()).collect();
    let sur = reinforce_surrogate(&mut ctx.g, &lps, &returns)?;
    let sampled = filter_grads(&ctx.g, sur, -1.0)?.flat();
    let diff: Vec<f64> = sampled.iter().zip(&exact).map(|(a, b)| a - b).collect();
    let rel = norm(&diff) / norm(&exact);
    let t = start.elapsed().as_secs_f64();
    Ok((
        rel <= REINFORCE_REL_TOL && unbiased_err <= 1e-4 && t < REINFORCE_TIME_S,
        format!(
            "rel error {rel:.4} (<= {REINFORCE_REL_TOL}, predicted MC error {predicted:.4}); sequence probs {:?}; \
             estimator vs d/dθ E[R] {unbiased_err:.1e}; {t:.1} s",
            prob.iter().map(|p| (p * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    ))
}

fn c9_returns() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(0..20);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let got = returns_to_go(&r);
        let mut brute = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in (i..n).rev() {
                acc += r[j];
            }
            brute[i] = acc;
        }
        if got.iter().zip(&brute).any(|(a, b)| a.to_bits() != b.to_bits()) || got.len() != n {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatching vectors out of 1000")))
}

fn desk_network() -> NetworkConfig {
    NetworkConfig {
        channels: [8, 8, 4],
        ..NetworkConfig::default()
    }
}

fn desk_train_config() -> TrainConfig {
    TrainConfig {
        network: desk_network(),
        stage1_epochs: DESK_STAGE1_EPOCHS,
        stage2_epochs: DESK_STAGE2_EPOCHS,
        seed: 2024,
        ..TrainConfig::default()
    }
}

fn desk_corpus(dir: &Path) -> anyhow::Result<Dataset> {
    let cfg = DatasetConfig {
        n_train: 200,
        n_val: 20,
        n_test: 20,
        speech: PseudoSpeechParams {
            segment_s: 1.0,
            ..PseudoSpeechParams::default()
        },
        test_snr_levels: vec![0.0],
        seed: 11,
        ..DatasetConfig::default()
    };
    build_dataset(&cfg, dir)?;
    Ok(Dataset::open(dir)?)
}

fn progress(tag: &str) -> impl FnMut(&sekit_core::train::EpochStats) + '_ {
    let start = Instant::now();
    move |s| {
        if (s.epoch + 1) % 10 == 0 {
            eprintln!(
                "  [{tag}] stage {} epoch {} mse {:.5} nonlocal {:.3} reward {:.4} ({:.0} s)",
                s.stage,
                s.epoch + 1,
                s.mse,
                s.nonlocal_fraction,
                s.reward,
                start.elapsed().as_secs_f64()
            );
        }
    }
}

fn c10_overfit(ds: &Dataset) -> Outcome {
    let start = Instant::now();
    let full = TrainSet::from_dataset(ds, Split::Train, desk_network().stft())?;
    let set = TrainSet {
        items: full.items[..OVERFIT_PAIRS].to_vec(),
    };
    let mut t = Trainer::new(desk_train_config())?;
    let stats = t.fit(1, &set, OVERFIT_EPOCHS, progress("overfit"))?;
    let (first, last) = (stats[0].mse, stats[stats.len() - 1].mse);
    let ratio = last / first;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        ratio < OVERFIT_RATIO && secs < OVERFIT_TIME_S,
        format!(
            "train MSE {first:.5} -> {last:.5} (ratio {ratio:.3} < {OVERFIT_RATIO}) after {OVERFIT_EPOCHS} epochs on {OVERFIT_PAIRS} pairs; {:.1} min",
            secs / 60.0
        ),
    ))
}

struct DeskRun {
    ckpt: Checkpoint,
    learned: eval::MetricReport,
    random: eval::MetricReport,
    train_nonlocal: f64,
}

fn desk_training(ds: &Dataset) -> anyhow::Result<DeskRun> {
    let start = Instant::now();
    let set = TrainSet::from_dataset(ds, Split::Train, desk_network().stft())?;
    let mut t = Trainer::new(desk_train_config())?;
    t.fit(1, &set, DESK_STAGE1_EPOCHS, progress("desk"))?;
    let s2 = t.fit(2, &set, DESK_STAGE2_EPOCHS, progress("desk"))?;
    eprintln!("  [desk] trained in {:.1} min", start.elapsed().as_secs_f64() / 60.0);
    let learned = evaluate(&t.model, ds, Split::Test, &EvalOptions::default())?;
    let random = evaluate(
        &t.model,
        ds,
        Split::Test,
        &EvalOptions {
            routing: Routing::Random { seed: 7 },
            ..EvalOptions::default()
        },
    )?;
    Ok(DeskRun {
        ckpt: t.checkpoint(),
        learned,
        random,
        train_nonlocal: s2.last().map_or(f64::NAN, |s| s.nonlocal_fraction),
    })
}

fn c11_stage2(run: &DeskRun) -> Outcome {
    let l = run.learned.aggregate();
    let by_id: BTreeMap<&str, f64> = run.random.rows.iter().map(|r| (r.id.as_str(), r.stoi)).collect();
    let diffs: Vec<f64> = run
        .learned
        .rows
        .iter()
        .filter_map(|r| by_id.get(r.id.as_str()).map(|s| r.stoi - s))
        .collect();
    let mean_diff = diffs.iter().sum::<f64>() / diffs.len().max(1) as f64;
    let ok = l.nonlocal_fraction < 1.0 && diffs.len() == 20 && mean_diff >= 0.0;
    Ok((
        ok,
        format!(
            "held-out non-local fraction {:.3} (< 1; last training epoch {:.3}); paired STOI learned - random {mean_diff:+.5} over {} utterances (>= 0)",
            l.nonlocal_fraction,
            run.train_nonlocal,
            diffs.len()
        ),
    ))
}

fn c12_usefulness(run: &DeskRun) -> Outcome {
    let a = run.learned.aggregate();
    Ok((
        a.stoi > a.stoi_noisy && a.count == 20,
        format!(
            "mean STOI enhanced {:.4} vs noisy {:.4} over {} utterances at 0 dB (SI-SDR {:.2} vs {:.2} dB)",
            a.stoi, a.stoi_noisy, a.count, a.si_sdr, a.si_sdr_noisy
        ),
    ))
}

fn c13_cost_ordering() -> Outcome {
    let cfg = desk_network();
    let n = cfg.n_dynamic_blocks;
    let fl = count_flops(&cfg, RTF_FRAMES, &vec![BranchUsage::LOCAL; n], false)?;
    let fn_ = count_flops(&cfg, RTF_FRAMES, &vec![BranchUsage::NONLOCAL; n], false)?;
    let model = Model::new(cfg.clone(), InitScheme::Standard, 13)?;
    let stft = cfg.stft();
    let len = RTF_FRAMES * stft.hop - stft.pad_front();
    anyhow::ensure!(stft.n_frames(len) == RTF_FRAMES, "frame count mismatch");
    let speech = PseudoSpeechParams {
        segment_s: len as f64 / 16000.0,
        ..PseudoSpeechParams::default()
    };
    let wav = gen_pseudo_speech(&speech, 13)?;
    let rl = eval::measure_rtf(&model, &wav, &Routing::AllLocal, RTF_RUNS)?;
    let rn = eval::measure_rtf(&model, &wav, &Routing::AllNonLocal, RTF_RUNS)?;
    Ok((
        fn_ > fl && rn > rl,
        format!(
            "T={RTF_FRAMES}: MACs local {:.3}G < non-local {:.3}G: {}; RTF (median of {RTF_RUNS}) local {rl:.4} < non-local {rn:.4}: {}",
            fl as f64 / 1e9,
            fn_ as f64 / 1e9,
            fn_ > fl,
            rn > rl
        ),
    ))
}

fn c14_ablation(ds: &Dataset) -> Outcome {
    let base = TrainConfig {
        stage1_epochs: ABLATION_STAGE1_EPOCHS,
        stage2_epochs: ABLATION_STAGE2_EPOCHS,
        ..desk_train_config()
    };
    let cases: Vec<AblationCase> = [0, 3, 5].iter().map(|&i| AblationCase::get(i)).collect::<Result<_, _>>()?;
    let start = Instant::now();
    let table = run_ablation(&cases, &base, ds, |id, s| {
        if (s.epoch + 1) % 10 == 0 {
            eprintln!(
                "  [ablation case {id}] stage {} epoch {} mse {:.5} ({:.0} s)",
                s.stage,
                s.epoch + 1,
                s.mse,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let stoi = |id: u8| table.row(id).map_or(f64::NAN, |r| r.stoi);
    let errors: Vec<String> = table.rows.iter().filter_map(|r| r.error.clone()).collect();
    let (s0, s3, s5) = (stoi(0), stoi(3), stoi(5));
    let ordered = s0 >= s3 && s3 >= s5;
    let mut by_blocks: Vec<(usize, usize)> = [6u8, 7, 8, 9]
        .iter()
        .map(|&i| {
            let c = AblationCase::get(i).unwrap();
            let m = Model::new(c.network(&base.network), InitScheme::Standard, base.seed).unwrap();
            (c.n_blocks, m.n_params())
        })
        .collect();
    by_blocks.sort();
    let increasing = by_blocks.windows(2).all(|w| w[0].1 < w[1].1);
    Ok((
        ordered && increasing && errors.is_empty(),
        format!(
            "STOI case0 {s0:.4} >= case3 {s3:.4} >= case5 {s5:.4}: {ordered}; params by N {by_blocks:?} increasing: {increasing}; budget {ABLATION_STAGE1_EPOCHS}+{ABLATION_STAGE2_EPOCHS} epochs{}",
            if errors.is_empty() { String::new() } else { format!("; errors {errors:?}") }
        ),
    ))
}

fn c15_checkpoint(ds: &Dataset, trained: Option<&Checkpoint>) -> Outcome {
    let ckpt = match trained {
        Some(c) => c.clone(),
        None => {
            let full = TrainSet::from_dataset(ds, Split::Train, desk_network().stft())?;
            let set = TrainSet {
                items: full.items[..5].to_vec(),
            };
            let mut t = Trainer::new(desk_train_config())?;
            t.fit(1, &set, 1, |_| ())?;
            t.fit(2, &set, 1, |_| ())?;
            t.checkpoint()
        }
    };
    let dir = tempfile::tempdir()?;
    let before = ckpt.model();
    save_checkpoint(&ckpt, dir.path())?;
    let after = load_checkpoint(dir.path())?.model();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let bins = before.config.n_bins();
    let mut identical = 0;
    for i in 0..ROUNDTRIP_INPUTS {
        let t = 20 + 9 * i;
        let y = dsp::RealSpec::from_tensor(&randn(&[1, 2, t, bins], &mut rng, 0.1), 1.0)?;
        let (a, _) = before.infer(&y, &argmax_routing())?;
        let (b, _) = after.infer(&y, &argmax_routing())?;
        if a.data().len() == b.data().len() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()) {
            identical += 1;
        }
    }
    Ok((
        identical == ROUNDTRIP_INPUTS,
        format!(
            "{identical}/{ROUNDTRIP_INPUTS} forwards bitwise identical after save/load ({} checkpoint)",
            if trained.is_some() { "desk-trained" } else { "short-run" }
        ),
    ))
}

fn report(id: u8, outcome: Outcome, failures: &mut Vec<u8>) {
    match outcome {
        Ok((true, detail)) => println!("criterion {id:>2}: PASS  {detail}"),
        Ok((false, detail)) => {
            failures.push(id);
            println!("criterion {id:>2}: FAIL  {detail}");
        }
        Err(e) => {
            failures.push(id);
            println!("criterion {id:>2}: FAIL  error: {e:#}");
        }
    }
}

fn main() {
    let only: Option<Vec<u8>> = std::env::var("SEKIT_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let strict = std::env::var("SEKIT_ACCEPTANCE_STRICT").is_ok_and(|v| v != "0");
    let wanted = |id: u8| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut failures = Vec::new();
    let start = Instant::now();

    let cheap: [(u8, fn() -> Outcome); 9] = [
        (1, c1_stft_round_trip),
        (2, c2_snr_mixing),
        (3, c3_gradients),
        (4, c4_row_stochastic),
        (5, c5_partition),
        (6, c6_rank_one),
        (7, c7_difficulty),
        (8, c8_reinforce),
        (9, c9_returns),
    ];
    for (id, f) in cheap {
        if wanted(id) {
            report(id, f(), &mut failures);
        }
    }
    if wanted(13) {
        report(13, c13_cost_ordering(), &mut failures);
    }

    let needs_corpus = [10, 11, 12, 14, 15].iter().any(|&i| wanted(i));
    if needs_corpus {
        let dir = tempfile::tempdir().expect("temp dir");
        match desk_corpus(dir.path()) {
            Err(e) => {
                for id in [10, 11, 12, 14, 15] {
                    if wanted(id) {
                        report(id, Err(anyhow::anyhow!("desk corpus: {e:#}")), &mut failures);
                    }
                }
            }
            Ok(ds) => {
                if wanted(10) {
                    report(10, c10_overfit(&ds), &mut failures);
                }
                let mut desk = None;
                if wanted(11) || wanted(12) {
                    match desk_training(&ds) {
                        Ok(run) => {
                            if wanted(11) {
                                report(11, c11_stage2(&run), &mut failures);
                            }
                            if wanted(12) {
                                report(12, c12_usefulness(&run), &mut failures);
                            }
                            desk = Some(run);
                        }
                        Err(e) => {
                            for id in [11, 12] {
                                if wanted(id) {
                                    report(id, Err(anyhow::anyhow!("desk training: {e:#}")), &mut failures);
                                }
                            }
                        }
                    }
                }
                if wanted(15) {
                    report(15, c15_checkpoint(&ds, desk.as_ref().map(|d| &d.ckpt)), &mut failures);
                }
                if wanted(14) {
                    report(14, c14_ablation(&ds), &mut failures);
                }
            }
        }
    }

    println!(
        "acceptance: {} failing {:?}; {:.1} min",
        failures.len(),
        failures,
        start.elapsed().as_secs_f64() / 60.0
    );
    if strict && !failures.is_empty() {
        std::process::exit(1);
    }
}
