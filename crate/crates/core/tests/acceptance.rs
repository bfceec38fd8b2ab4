//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Oracles here are written independently of the library code.

use std::time::{Duration, Instant};

use mcoe::config::{ModelConfig, TrainConfig};
use mcoe::events::{
    chunk_sequence, voxelize, Event, SensorGeometry, DEFAULT_BINS, DEFAULT_WINDOWS,
};
use mcoe::gradcheck::{check_against, grad_check_inputs, Coords, DEFAULT_STEP};
use mcoe::io::{load_checkpoint, save_checkpoint};
use mcoe::mamba::{
    discretize, selective_scan, Direction, Discretization, MambaBranch, MambaConfig, McoMamba,
};
use mcoe::mcib::{GateReduction, Mcib};
use mcoe::metrics::{uar, war, Condition, EvalRecord};
use mcoe::model::{Model, PassOptions, Sample, Stream};
use mcoe::moe::{select_from_logits, ExpertLayout, Moe, MoeConfig, Routing};
use mcoe::params::{Binder, Linear, ParamBuilder, ParamStore};
use mcoe::synth::synth_task;
use mcoe::train::{TrainOutcome, Trainer};
use mcoe::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn rt(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn build<M>(
    seed: u64,
    f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> mcoe::Result<M>,
) -> (ParamStore<f64>, M) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
    (store, m)
}

// ---- 1. scan vs hand-unrolled recurrence

/// `h_t = exp(dt a) h_{t-1} + dt b_t x_t`, `y_t = <c_t, h_t> + skip x_t`,
/// visited in `order`.
fn unrolled(
    x: &[Vec<f64>],
    dt: &[Vec<f64>],
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    c: &[Vec<f64>],
    skip: &[f64],
    order: &[usize],
) -> Vec<Vec<f64>> {
    let (d, n) = (a.len(), a[0].len());
    let mut y = vec![vec![0.0; d]; x.len()];
    for ch in 0..d {
        let mut h = vec![0.0; n];
        for &t in order {
            let mut out = skip[ch] * x[t][ch];
            for s in 0..n {
                h[s] = (dt[t][ch] * a[ch][s]).exp() * h[s] + dt[t][ch] * b[t][s] * x[t][ch];
                out += c[t][s] * h[s];
            }
            y[t][ch] = out;
        }
    }
    y
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn criterion_scan() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m, d, n) = (
            rng.gen_range(1..=8),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let x = rt(&[m, d], &mut rng, -1.0, 1.0);
        let dt = rt(&[m, d], &mut rng, 0.001, 1.5);
        let a = rt(&[d, n], &mut rng, -3.0, -0.05);
        let b = rt(&[m, n], &mut rng, -1.0, 1.0);
        let c = rt(&[m, n], &mut rng, -1.0, 1.0);
        let skip = rt(&[d], &mut rng, -1.0, 1.0);
        let (ab, bb) = discretize(&dt, &a, &b, Discretization::Exponential).unwrap();
        for dir in Direction::BOTH {
            let y = selective_scan(&x, &ab, &bb, &c, &skip, dir).unwrap();
            let order: Vec<usize> = match dir {
                Direction::Forward => (0..m).collect(),
                Direction::Backward => (0..m).rev().collect(),
            };
            let want = unrolled(
                &rows(&x),
                &rows(&dt),
                &rows(&a),
                &rows(&b),
                &rows(&c),
                skip.data(),
                &order,
            );
            worst = worst.max(max_diff(&rows(&y), &want));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-10 && secs < 10.0,
        format!("max |diff| {worst:.2e} (tol 1e-10), {secs:.2}s (< 10s)"),
    )
}

// ---- 2. zeroed fusion vs single-modality bidirectional SSM

fn apply(store: &ParamStore<f64>, lin: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = store.get(lin.weight).data();
    let bias = lin.bias.map(|b| store.get(b).data().to_vec());
    x.iter()
        .map(|row| {
            (0..lin.fan_out)
                .map(|o| {
                    let dot: f64 = row
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * w[i * lin.fan_out + o])
                        .sum();
                    dot + bias.as_ref().map_or(0.0, |b| b[o])
                })
                .collect()
        })
        .collect()
}

fn silu(v: f64) -> f64 {
    v * (1.0 / (1.0 + (-v).exp()))
}

fn single_modality(
    store: &ParamStore<f64>,
    br: &MambaBranch,
    input: &Tensor<f64>,
) -> Vec<Vec<f64>> {
    let f = rows(input);
    let m = f.len();
    let xs = apply(store, &br.in_x, &f);
    let zs = apply(store, &br.in_z, &f);
    let d = br.in_x.fan_out;
    let kern = rows(store.get(br.conv_kernel));
    let k = kern.len();
    let cb = store.get(br.conv_bias).data();
    // causal depthwise convolution, zero history
    let xc: Vec<Vec<f64>> = (0..m)
        .map(|t| {
            (0..d)
                .map(|ch| {
                    let mut s = cb[ch];
                    for (j, tap) in kern.iter().enumerate() {
                        let back = k - 1 - j;
                        if t >= back {
                            s += tap[ch] * xs[t - back][ch];
                        }
                    }
                    silu(s)
                })
                .collect()
        })
        .collect();
    let mut acc = vec![vec![0.0; d]; m];
    for (dir, p) in br.directions.iter().enumerate() {
        let dt: Vec<Vec<f64>> = apply(store, &p.delta_proj, &xc)
            .into_iter()
            .map(|r| r.into_iter().map(|v: f64| (1.0 + v.exp()).ln()).collect())
            .collect();
        let a: Vec<Vec<f64>> = rows(store.get(p.a_log))
            .into_iter()
            .map(|r| r.into_iter().map(|v| -v.exp()).collect())
            .collect();
        let b = apply(store, &p.b_proj, &xc);
        let c = apply(store, &p.c_proj, &xc);
        let order: Vec<usize> = if dir == 0 {
            (0..m).collect()
        } else {
            (0..m).rev().collect()
        };
        let y = unrolled(&xc, &dt, &a, &b, &c, store.get(p.d_skip).data(), &order);
        for (ar, yr) in acc.iter_mut().zip(y) {
            for (av, yv) in ar.iter_mut().zip(yr) {
                *av += yv;
            }
        }
    }
    let gated: Vec<Vec<f64>> = acc
        .iter()
        .zip(&zs)
        .map(|(ar, zr)| ar.iter().zip(zr).map(|(a, z)| a * silu(*z)).collect())
        .collect();
    apply(store, &br.out, &gated)
}

fn criterion_fusion_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let cfg = MambaConfig::new(
            rng.gen_range(2..=6),
            rng.gen_range(1..=5),
            rng.gen_range(1..=4),
        );
        let e = cfg.embed_dim;
        let (mut store, block) = build(i, |b| McoMamba::new(b, cfg, false));
        block.zero_fusion(&mut store);
        let m = rng.gen_range(1..=7);
        let f = rt(&[m, e], &mut rng, -1.0, 1.0);
        let v = rt(&[m, e], &mut rng, -1.0, 1.0);
        let (yr, ye) = block.forward_values(&store, &f, &v).unwrap();
        worst = worst
            .max(max_diff(
                &rows(&yr),
                &single_modality(&store, &block.rgb, &f),
            ))
            .max(max_diff(
                &rows(&ye),
                &single_modality(&store, &block.event, &v),
            ));
    }
    verdict(
        worst <= 1e-10,
        format!("max |diff| {worst:.2e} over 20 instances (tol 1e-10)"),
    )
}

// ---- 3. gradient suite

fn params_plus(store: &ParamStore<f64>, extra: Vec<Tensor<f64>>) -> Vec<Tensor<f64>> {
    let mut v = store.values().to_vec();
    v.extend(extra);
    v
}

fn tiny_moe(seed: u64) -> (ParamStore<f64>, Moe) {
    let mut cfg = MoeConfig::new(4, 3);
    cfg.layout = "DAF".parse().unwrap();
    cfg.heads = 2;
    cfg.depth = 2;
    build(seed, |b| Moe::new(b, cfg))
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        inner_dim: 6,
        state_dim: 3,
        height: 8,
        width: 8,
        conv_channels: vec![4],
        heads: 2,
        layout: "DAF".parse().unwrap(),
        depth: 1,
        ..ModelConfig::desk()
    }
}

fn random_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Sample<f64> {
    let mut frame =
        |c: usize| Tensor::from_fn([cfg.height, cfg.width, c], |_| rng.gen_range(-1.0..1.0));
    Sample {
        rgb: Stream::Frames((0..cfg.frames).map(|_| frame(3)).collect()),
        events: Stream::Frames((0..cfg.frames).map(|_| frame(cfg.bins)).collect()),
        label: 4,
        condition: Condition::LowLight,
    }
}

fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut results: Vec<(&str, f64)> = Vec::new();
    let weights = |shape: &[usize], rng: &mut ChaCha8Rng| rt(shape, rng, -1.0, 1.0);

    let (store, block) = build(1, |b| McoMamba::new(b, MambaConfig::new(4, 3, 2), false));
    let np = store.len();
    let w = weights(&[3, 4], &mut rng);
    let inputs = params_plus(
        &store,
        vec![weights(&[3, 4], &mut rng), weights(&[3, 4], &mut rng)],
    );
    let r = grad_check_inputs(
        |tape: &Tape<f64>, v| {
            let b = Binder::with_vars(tape, &store, &v[..np])?;
            let (yr, ye) = block.forward(&b, v[np], v[np + 1])?;
            yr.add(ye)?.mul(tape.constant(w.clone())).map(|p| p.sum())
        },
        &inputs,
        Coords::All,
        DEFAULT_STEP,
    )
    .unwrap();
    results.push(("mco-mamba", r.max_rel_error));

    let (store, mcib) = build(2, |b| Mcib::new(b, 4, 2, GateReduction::Mean));
    let np = store.len();
    let inputs = params_plus(
        &store,
        vec![weights(&[3, 4], &mut rng), weights(&[3, 4], &mut rng)],
    );
    let r = grad_check_inputs(
        |tape: &Tape<f64>, v| {
            let b = Binder::with_vars(tape, &store, &v[..np])?;
            let f = mcib.forward(&b, v[np], v[np + 1])?;
            f.h.mul(tape.constant(w.clone())).map(|p| p.sum())
        },
        &inputs,
        Coords::All,
        DEFAULT_STEP,
    )
    .unwrap();
    results.push(("mcib", r.max_rel_error));

    let (store, moe) = tiny_moe(3);
    let np = store.len();
    let inputs = params_plus(&store, vec![weights(&[3, 4], &mut rng)]);
    let wj = weights(&[3], &mut rng);
    for (name, k) in [
        ("deep expert", 0),
        ("attention expert", 1),
        ("focal expert", 2),
    ] {
        let r = grad_check_inputs(
            |tape: &Tape<f64>, v| {
                let b = Binder::with_vars(tape, &store, &v[..np])?;
                moe.experts[k]
                    .forward(&b, v[np], &mut None)?
                    .mul(tape.constant(wj.clone()))
                    .map(|p| p.sum())
            },
            &inputs,
            Coords::All,
            DEFAULT_STEP,
        )
        .unwrap();
        results.push((name, r.max_rel_error));
    }
    let routing = Routing::Fixed(vec![2, 0]);
    let r = grad_check_inputs(
        |tape: &Tape<f64>, v| {
            let b = Binder::with_vars(tape, &store, &v[..np])?;
            let out = moe.forward(&b, v[np], &routing, None)?;
            out.logits.mul(tape.constant(wj.clone())).map(|p| p.sum())
        },
        &inputs,
        Coords::All,
        DEFAULT_STEP,
    )
    .unwrap();
    results.push(("router (frozen selection)", r.max_rel_error));

    let cfg = tiny_model();
    let (model, store) = Model::init::<f64>(cfg.clone(), 4).unwrap();
    let x = random_sample(&cfg, &mut rng);
    let chosen = model.evaluate(&store, &x).unwrap().1.unwrap().indices;
    let opts = || PassOptions {
        routing: Routing::Fixed(chosen.clone()),
        dropout_rng: None,
    };
    let tape = Tape::new();
    let b = Binder::trainable(&tape, &store);
    let loss = model.loss(&b, &x, opts()).unwrap();
    let grads = b.collect_grads(&tape.backward(loss).unwrap());
    let r = check_against(
        |p: &[Tensor<f64>]| {
            let mut s = store.clone();
            s.values_mut().clone_from_slice(p);
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &s);
            Ok(model.loss(&b, &x, opts())?.value().data()[0])
        },
        store.values(),
        &grads,
        Coords::Fraction {
            fraction: 0.05,
            seed: 5,
        },
        DEFAULT_STEP,
    )
    .unwrap();
    results.push(("forward_full 5% subsample", r.max_rel_error));

    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let listing: Vec<String> = results
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect();
    verdict(
        worst < 1e-4 && secs < 300.0,
        format!(
            "max rel err {worst:.2e} (tol 1e-4), {secs:.1}s (< 300s); {}",
            listing.join(", ")
        ),
    )
}

// ---- 4. router contract

fn criterion_router() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut sum_err, mut dup, mut shift_bad, mut tie_bad): (f64, usize, usize, usize) =
        (0.0, 0, 0, 0);
    for _ in 0..1000 {
        // quarter steps make exact ties common
        let logits: Vec<f64> = (0..8)
            .map(|_| f64::from(rng.gen_range(-6i32..6)) * 0.25)
            .collect();
        let t = Tensor::from_f64([8], &logits).unwrap();
        let sel = select_from_logits(&t, 2).unwrap();
        sum_err = sum_err.max((sel.weights.iter().sum::<f64>() - 1.0).abs());
        dup += usize::from(sel.indices.len() != 2 || sel.indices[0] == sel.indices[1]);
        let c = rng.gen_range(-100.0..100.0);
        let shifted = select_from_logits(&t.map(|v| v + c), 2).unwrap();
        shift_bad += usize::from(shifted.indices != sel.indices);
        // oracle: best value first, ties to the lower index
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&i, &j| logits[j].partial_cmp(&logits[i]).unwrap().then(i.cmp(&j)));
        tie_bad +=
            usize::from(sel.indices != order[..2] || select_from_logits(&t, 2).unwrap() != sel);
    }
    let mut cfg = ModelConfig::desk();
    cfg.height = 8;
    cfg.width = 8;
    assert_eq!(cfg.layout, ExpertLayout::heterogeneous(8).unwrap());
    let (model, store) = Model::init::<f64>(cfg.clone(), 9).unwrap();
    let mut wrong_count = 0;
    for _ in 0..10 {
        let x = random_sample(&cfg, &mut rng);
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &store);
        let out = model.forward(&b, &x, PassOptions::default()).unwrap();
        wrong_count += usize::from(out.experts_evaluated != 2);
    }
    let ok = sum_err <= 1e-12 && dup == 0 && shift_bad == 0 && tie_bad == 0 && wrong_count == 0;
    verdict(
        ok,
        format!(
            "max |sum-1| {sum_err:.1e}, duplicates {dup}, shift changes {shift_bad}, tie mismatches {tie_bad}, \
             passes evaluating != 2 experts {wrong_count}"
        ),
    )
}

// ---- 5. gate contract

fn criterion_gate() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut outside, mut hull): (usize, f64) = (0, 0.0);
    let mut half_err: f64 = 0.0;
    for i in 0..1000 {
        let (e, heads) = [(4, 2), (6, 3), (8, 4)][i % 3];
        let (store, mcib) = build(i as u64, |b| Mcib::new(b, e, heads, GateReduction::Mean));
        let m = rng.gen_range(1..=5);
        let scale = rng.gen_range(0.1..4.0);
        let yr = rt(&[m, e], &mut rng, -scale, scale);
        let ye = rt(&[m, e], &mut rng, -scale, scale);
        let (h, alpha, ar, ae) = mcib.forward_values(&store, &yr, &ye).unwrap();
        outside += usize::from(!(alpha > 0.0 && alpha < 1.0));
        for ((&v, &a), &b) in h.data().iter().zip(ar.data()).zip(ae.data()) {
            hull = hull.max((a.min(b) - v).max(v - a.max(b)).max(0.0));
        }
        // orthogonal by construction: disjoint column supports
        let zr = Tensor::from_fn([m, e], |k| if k % 2 == 0 { yr.data()[k] } else { 0.0 });
        let ze = Tensor::from_fn([m, e], |k| if k % 2 == 1 { ye.data()[k] } else { 0.0 });
        let (_, a0, _, _) = mcib.forward_values(&store, &zr, &ze).unwrap();
        half_err = half_err.max((a0 - 0.5).abs());
    }
    verdict(
        outside == 0 && half_err <= 1e-12 && hull <= 1e-12,
        format!("alpha outside (0,1): {outside}; |alpha-0.5| at zero product {half_err:.1e}; hull excess {hull:.1e}"),
    )
}

// ---- 6. voxelization

fn criterion_voxel() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut mismatches = 0;
    for _ in 0..100 {
        let g = SensorGeometry::new(
            rng.gen_range(1..12),
            rng.gen_range(1..12),
            rng.gen_range(1..6),
        );
        let (t0, t1) = (rng.gen_range(0..500u64), rng.gen_range(501..3000u64));
        let mut events: Vec<Event> = (0..rng.gen_range(0..300))
            .map(|_| {
                let p = if rng.gen_bool(0.6) { 1 } else { -1 };
                Event::new(
                    rng.gen_range(t0..=t1),
                    rng.gen_range(0..g.width as u32),
                    rng.gen_range(0..g.height as u32),
                    p,
                )
                .unwrap()
            })
            .collect();
        events.sort_by_key(|e| e.t);
        let signed: i64 = events.iter().map(|e| e.p.sign()).sum();
        let (grid, _) = voxelize::<f64>(&events, g, (t0, t1)).unwrap();
        mismatches += usize::from(grid.mass() != signed as f64);
        let (chunks, _) = chunk_sequence::<f64>(&events, DEFAULT_WINDOWS, (t0, t1), g).unwrap();
        mismatches += usize::from(chunks.iter().map(|c| c.mass()).sum::<f64>() != signed as f64);
    }
    let (empty, _) =
        voxelize::<f64>(&[], SensorGeometry::new(5, 5, DEFAULT_BINS), (0, 10)).unwrap();
    let empty_ok = empty.data.data().iter().all(|&v| v == 0.0);
    let desk = ModelConfig::desk();
    let defaults_ok =
        DEFAULT_BINS == 3 && DEFAULT_WINDOWS == 2 && desk.bins == 3 && desk.frames == 2;
    verdict(
        mismatches == 0 && empty_ok && defaults_ok,
        format!("mass mismatches {mismatches}/200, empty grid zero {empty_ok}, defaults B=3 m=2 {defaults_ok}"),
    )
}

// ---- 7. metric oracles

fn criterion_metrics() -> Verdict {
    let recs = |v: &[(usize, usize)]| -> Vec<EvalRecord> {
        v.iter()
            .map(|&(t, p)| EvalRecord::new(t, p, Condition::Normal))
            .collect()
    };
    // (records, hand UAR, hand WAR)
    let scenarios: Vec<(Vec<EvalRecord>, f64, f64)> = vec![
        (
            recs(&[(0, 0), (0, 0), (0, 1), (1, 1)]),
            5.0 / 6.0,
            3.0 / 4.0,
        ),
        (recs(&[(0, 0), (3, 3), (6, 6)]), 1.0, 1.0),
        (recs(&[(2, 0), (2, 5)]), 0.0, 0.0),
        (
            recs(&[(0, 0), (0, 1), (0, 2), (0, 1), (1, 1), (2, 0), (2, 1)]),
            5.0 / 12.0,
            2.0 / 7.0,
        ),
        (recs(&[(0, 1), (0, 0), (2, 2)]), 3.0 / 4.0, 2.0 / 3.0),
    ];
    let mut bad = 0;
    for (r, u, w) in &scenarios {
        bad += usize::from(uar(r).unwrap() != *u) + usize::from(war(r).unwrap() != *w);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut unbalanced_equal = 0;
    for _ in 0..200 {
        let r: Vec<EvalRecord> = (0..35)
            .map(|i| EvalRecord::new(i % 7, rng.gen_range(0..7), Condition::Hdr))
            .collect();
        unbalanced_equal += usize::from(uar(&r).unwrap() != war(&r).unwrap());
    }
    verdict(
        bad == 0 && unbalanced_equal == 0,
        format!("crafted mismatches {bad}/10, balanced UAR != WAR in {unbalanced_equal}/200"),
    )
}

// ---- 8 & 9. training on the synthetic task

fn train(cfg: TrainConfig) -> (TrainOutcome<f32>, Duration) {
    let start = Instant::now();
    let data = synth_task::<f32>(cfg.seed, cfg.synthetic_samples, &cfg.model).unwrap();
    let out = Trainer::<f32>::new(cfg)
        .unwrap()
        .fit(&data, |_| {})
        .unwrap();
    (out, start.elapsed())
}

fn desk(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::desk()
    }
}

fn criterion_overfit() -> (Verdict, f64) {
    let (out, took) = train(desk(0));
    let held = out.final_heldout_war().unwrap_or(0.0);
    let steps = out.first_perfect_step;
    let ok = steps.is_some_and(|s| s <= 300) && held >= 0.9 && took.as_secs_f64() < 600.0;
    let v = verdict(
        ok,
        format!(
            "train WAR 1.0 at step {steps:?} (<= 300), held-out WAR {held:.3} (>= 0.9), {:.1}s (< 600s)",
            took.as_secs_f64()
        ),
    );
    (v, held)
}

fn criterion_ablations(full_seed0: f64) -> Verdict {
    type Variant = (&'static str, fn(&mut ModelConfig));
    let variants: [Variant; 6] = [
        ("full", |_| {}),
        ("w/o mamba", |m| m.ablations.no_mamba = true),
        ("w/o joint", |m| m.ablations.no_joint = true),
        ("w/o interaction", |m| m.ablations.no_interaction = true),
        ("w/o moe", |m| m.ablations.no_moe = true),
        ("single-type experts", |m| {
            m.layout = ExpertLayout::single_type(m.layout.len()).unwrap()
        }),
    ];
    let mut means = Vec::new();
    for (name, tweak) in variants {
        let mut total = 0.0;
        for seed in 0..3u64 {
            if name == "full" && seed == 0 {
                total += full_seed0;
                continue;
            }
            let mut cfg = desk(seed);
            tweak(&mut cfg.model);
            total += train(cfg).0.final_heldout_war().unwrap_or(0.0);
        }
        means.push((name, total / 3.0));
    }
    let full = means[0].1;
    let ok = means[1..].iter().all(|&(_, w)| full >= w);
    let listing: Vec<String> = means.iter().map(|(n, w)| format!("{n} {w:.3}")).collect();
    verdict(
        ok,
        format!("mean held-out WAR over 3 seeds: {}", listing.join(", ")),
    )
}

// ---- 10. determinism and checkpoint round trip

fn criterion_determinism() -> Verdict {
    let mut cfg = desk(11);
    cfg.epochs = 4;
    let (a, _) = train(cfg.clone());
    let (b, _) = train(cfg.clone());
    let bits = |s: &ParamStore<f32>| {
        s.values()
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect::<Vec<_>>()
    };
    let same_run = bits(&a.store) == bits(&b.store) && a.log == b.log;
    let mut threaded = cfg.clone();
    threaded.threads = 3;
    let (c, _) = train(threaded);
    let same_threads = bits(&a.store) == bits(&c.store);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mcot");
    save_checkpoint(&path, a.model.config(), &a.store).unwrap();
    let (m2, s2) = load_checkpoint::<f32>(&path).unwrap();
    let data = synth_task::<f32>(99, 14, &cfg.model).unwrap();
    let mut round_trip = true;
    for x in &data {
        let (l1, l2) = (
            a.model.logits(&a.store, x).unwrap(),
            m2.logits(&s2, x).unwrap(),
        );
        round_trip &= l1
            .data()
            .iter()
            .zip(l2.data())
            .all(|(p, q)| p.to_bits() == q.to_bits());
    }
    let (m64, s64) = load_checkpoint::<f64>(&path).unwrap();
    let data64 = synth_task::<f64>(99, 7, &cfg.model).unwrap();
    let (orig64, orig_s64) = Model::init::<f64>(cfg.model.clone(), 5).unwrap();
    save_checkpoint(&path, orig64.config(), &orig_s64).unwrap();
    let (back64, back_s64) = load_checkpoint::<f64>(&path).unwrap();
    for x in &data64 {
        let (l1, l2) = (
            orig64.logits(&orig_s64, x).unwrap(),
            back64.logits(&back_s64, x).unwrap(),
        );
        round_trip &= l1
            .data()
            .iter()
            .zip(l2.data())
            .all(|(p, q)| p.to_bits() == q.to_bits());
    }
    drop((m64, s64));
    verdict(
        same_run && same_threads && round_trip,
        format!("repeat run bit-identical {same_run}, 3-thread run identical {same_threads}, checkpoint logits bit-exact {round_trip}"),
    )
}

fn main() {
    let mut outcomes: Vec<(u32, &str, Verdict)> = vec![
        (1, "scan oracle equivalence", criterion_scan()),
        (2, "residual-identity fusion", criterion_fusion_identity()),
        (3, "gradient suite", criterion_gradients()),
        (4, "router contract", criterion_router()),
        (5, "gate contract", criterion_gate()),
        (6, "voxelization conservation", criterion_voxel()),
        (7, "metric oracles", criterion_metrics()),
    ];
    for (n, name, v) in &outcomes {
        println!(
            "criterion {n:>2} {name}: {} | {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    let (overfit, held0) = criterion_overfit();
    let tail = vec![
        (8, "synthetic overfitting", overfit),
        (9, "ablation ordering", criterion_ablations(held0)),
        (10, "determinism and round trip", criterion_determinism()),
    ];
    for (n, name, v) in &tail {
        println!(
            "criterion {n:>2} {name}: {} | {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    outcomes.extend(tail);
    let failed = outcomes.iter().filter(|o| !o.2.passed).count();
    println!(
        "acceptance: {}/{} criteria passed",
        outcomes.len() - failed,
        outcomes.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
