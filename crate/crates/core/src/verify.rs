//! Self-verification suite: oracle comparisons, gradient checks and
//! contract checks across every block, reported as JSON.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::events::{
    chunk_sequence, voxelize, Event, SensorGeometry, DEFAULT_BINS, DEFAULT_WINDOWS,
};
use crate::gradcheck::{check_against, grad_check_inputs, Coords, DEFAULT_STEP};
use crate::io::{load_checkpoint, save_checkpoint};
use crate::mamba::{
    discretize, discretize_var, selective_scan, selective_scan_var, Direction, Discretization,
    MambaConfig, McoMamba,
};
use crate::mcib::{gate_fuse, GateReduction, Mcib, Mha};
use crate::metrics::{condition_accuracy, uar, war, Condition, EvalRecord};
use crate::model::{Model, PassOptions, Sample, Stream};
use crate::moe::{select_from_logits, Moe, MoeConfig, Routing};
use crate::params::{Binder, ParamBuilder, ParamStore};
use crate::reference;
use crate::tensor::Tensor;

const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Discretization used by the library side of the SSM checks. Anything
    /// other than the exponential rule should make those checks fail.
    pub discretization: Discretization,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            discretization: Discretization::Exponential,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst error or violation count observed; `null` if the check errored.
    pub measured: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

type Probe = fn(&VerifyOptions, &mut ChaCha8Rng) -> Result<f64>;

/// `(name, tolerance, probe)`; a check passes when `measured <= tolerance`.
const CHECKS: &[(&str, f64, Probe)] = &[
    (
        "scan_matches_recurrence",
        ORACLE_TOL,
        scan_matches_recurrence,
    ),
    ("scan_scalar_unrolled", 1e-12, scan_scalar_unrolled),
    (
        "fusion_zeroed_matches_single_modality",
        ORACLE_TOL,
        fusion_zeroed,
    ),
    (
        "attention_matches_naive",
        ORACLE_TOL,
        attention_matches_naive,
    ),
    ("grad_scan_discretize", GRAD_TOL, grad_scan),
    ("grad_mco_mamba", GRAD_TOL, grad_mamba),
    ("grad_mcib", GRAD_TOL, grad_mcib),
    ("grad_expert_deep", GRAD_TOL, |o, r| grad_expert(o, r, 0)),
    ("grad_expert_attention", GRAD_TOL, |o, r| {
        grad_expert(o, r, 1)
    }),
    ("grad_expert_focal", GRAD_TOL, |o, r| grad_expert(o, r, 2)),
    ("grad_router_frozen_selection", GRAD_TOL, grad_router),
    ("grad_forward_full_subsample", GRAD_TOL, grad_full),
    ("router_weights_sum_to_one", 1e-12, router_weights_sum),
    ("router_indices_distinct", 0.0, router_distinct),
    ("router_shift_invariant", 1e-12, router_shift),
    ("router_tie_break_lowest_index", 0.0, router_ties),
    ("router_evaluates_exactly_k", 0.0, router_evaluates_k),
    ("gate_alpha_in_open_interval", 0.0, gate_alpha_bounds),
    ("gate_zero_inner_product_is_half", 1e-12, gate_zero_product),
    ("gate_output_in_convex_hull", 1e-12, gate_hull),
    ("voxel_mass_conserved", 0.0, voxel_mass),
    ("voxel_chunks_conserve_mass", 0.0, voxel_chunks),
    ("voxel_empty_stream_is_zero", 0.0, voxel_empty),
    ("voxel_defaults_b3_m2", 0.0, voxel_defaults),
    ("metric_uar_hand_computed", 0.0, metric_uar),
    ("metric_war_hand_computed", 0.0, metric_war),
    ("metric_uar_equals_war_balanced", 0.0, metric_balanced),
    ("metric_condition_tally", 0.0, metric_conditions),
    ("param_count_closed_form", 0.0, param_counts),
    ("forward_deterministic", 0.0, forward_deterministic),
    (
        "checkpoint_round_trip_bit_exact",
        0.0,
        checkpoint_round_trip,
    ),
];

/// Runs every check with its own seeded stream.
pub fn run(opts: &VerifyOptions) -> VerifyReport {
    let checks: Vec<Check> = CHECKS
        .iter()
        .enumerate()
        .map(|(i, &(name, tolerance, probe))| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            let (measured, error) = match probe(opts, &mut rng) {
                Ok(v) => (v, None),
                Err(e) => (f64::NAN, Some(e.to_string())),
            };
            Check {
                name: name.to_string(),
                passed: measured <= tolerance,
                measured,
                tolerance,
                error,
            }
        })
        .collect();
    let passed = checks.iter().all(|c| c.passed);
    VerifyReport { checks, passed }
}

fn rt(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn build<M>(
    seed: u64,
    f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<M>,
) -> Result<(ParamStore<f64>, M)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamBuilder::new(&mut store, &mut rng))?;
    Ok((store, m))
}

fn count(violations: usize) -> f64 {
    violations as f64
}

fn scan_matches_recurrence(o: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m, d, n) = (
            rng.gen_range(1..=8),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let x = rt(&[m, d], rng, -1.0, 1.0);
        let delta = rt(&[m, d], rng, 0.01, 1.0);
        let a = rt(&[d, n], rng, -2.0, -0.1);
        let b = rt(&[m, n], rng, -1.0, 1.0);
        let c = rt(&[m, n], rng, -1.0, 1.0);
        let skip = rt(&[d], rng, -1.0, 1.0);
        let (ab, bb) = discretize(&delta, &a, &b, o.discretization)?;
        for dir in Direction::BOTH {
            let y = selective_scan(&x, &ab, &bb, &c, &skip, dir)?;
            let want =
                reference::selective_ssm(&x, &delta, &a, &b, &c, &skip, dir == Direction::Backward);
            worst = worst.max(y.max_abs_diff(&want));
        }
    }
    Ok(worst)
}

fn scan_scalar_unrolled(o: &VerifyOptions, _: &mut ChaCha8Rng) -> Result<f64> {
    let t = |s: &[usize], v: &[f64]| Tensor::from_f64(s.to_vec(), v);
    let (dt, a, b, c, x, skip): ([f64; 3], f64, _, _, _, f64) = (
        [0.5, 0.2, 1.0],
        -0.8,
        [1.0, -2.0, 0.5],
        [0.3, 1.2, -0.7],
        [1.0, 0.5, -1.5],
        0.1,
    );
    let mut h = 0.0;
    let mut want = Vec::new();
    for k in 0..3 {
        h = (dt[k] * a).exp() * h + dt[k] * b[k] * x[k];
        want.push(c[k] * h + skip * x[k]);
    }
    let (ab, bb) = discretize(
        &t(&[3, 1], &dt)?,
        &t(&[1, 1], &[a])?,
        &t(&[3, 1], &b)?,
        o.discretization,
    )?;
    let y = selective_scan(
        &t(&[3, 1], &x)?,
        &ab,
        &bb,
        &t(&[3, 1], &c)?,
        &t(&[1], &[skip])?,
        Direction::Forward,
    )?;
    Ok(y.max_abs_diff(&t(&[3, 1], &want)?))
}

fn mamba_config(o: &VerifyOptions, e: usize, d: usize, n: usize) -> MambaConfig {
    let mut cfg = MambaConfig::new(e, d, n);
    cfg.discretization = o.discretization;
    cfg
}

fn fusion_zeroed(o: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (e, d, n, m) = (
            rng.gen_range(2..=6),
            rng.gen_range(1..=5),
            rng.gen_range(1..=4),
            rng.gen_range(1..=6),
        );
        let (mut store, block) = build(rng.gen(), |b| {
            McoMamba::new(b, mamba_config(o, e, d, n), false)
        })?;
        block.zero_fusion(&mut store);
        let f = rt(&[m, e], rng, -1.0, 1.0);
        let v = rt(&[m, e], rng, -1.0, 1.0);
        let (yr, ye) = block.forward_values(&store, &f, &v)?;
        worst = worst
            .max(yr.max_abs_diff(&reference::bidirectional_ssm(&store, &block.rgb, &f)))
            .max(ye.max_abs_diff(&reference::bidirectional_ssm(&store, &block.event, &v)));
    }
    Ok(worst)
}

fn attention_matches_naive(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for heads in [1, 2, 4] {
        let (store, mcib) = build(rng.gen(), |b| Mcib::new(b, 8, heads, GateReduction::Mean))?;
        let m = rng.gen_range(1..=6);
        let yr = rt(&[m, 8], rng, -1.0, 1.0);
        let ye = rt(&[m, 8], rng, -1.0, 1.0);
        let (_, _, ar, ae) = mcib.forward_values(&store, &yr, &ye)?;
        let w =
            |mha: &Mha| [mha.query, mha.key, mha.value, mha.output].map(|id| store.get(id).clone());
        worst = worst
            .max(ar.max_abs_diff(&reference::attention(&ye, &yr, &w(&mcib.rgb), heads)))
            .max(ae.max_abs_diff(&reference::attention(&yr, &ye, &w(&mcib.event), heads)));
    }
    Ok(worst)
}

fn grad_scan(o: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, d, n) = (4, 3, 2);
    let inputs = vec![
        rt(&[m, d], rng, -1.0, 1.0),
        rt(&[m, d], rng, 0.1, 1.0),
        rt(&[d, n], rng, -2.0, -0.1),
        rt(&[m, n], rng, -1.0, 1.0),
        rt(&[m, n], rng, -1.0, 1.0),
        rt(&[d], rng, -1.0, 1.0),
    ];
    let mut worst: f64 = 0.0;
    for dir in Direction::BOTH {
        let r = grad_check_inputs(
            |_, v| {
                let (ab, bb) = discretize_var(v[1], v[2], v[3], o.discretization)?;
                let y = selective_scan_var(v[0], ab, bb, v[4], v[5], dir)?;
                let w = y
                    .tape()
                    .constant(Tensor::from_fn([m, d], |i| 0.3 + i as f64 * 0.1));
                Ok(y.mul(w)?.sum())
            },
            &inputs,
            Coords::All,
            DEFAULT_STEP,
        )?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

fn grad_mamba(o: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (store, block) = build(rng.gen(), |b| {
        McoMamba::new(b, mamba_config(o, 4, 3, 2), false)
    })?;
    let np = store.len();
    let mut inputs = store.values().to_vec();
    inputs.push(rt(&[3, 4], rng, -1.0, 1.0));
    inputs.push(rt(&[3, 4], rng, -1.0, 1.0));
    let w = rt(&[3, 4], rng, -1.0, 1.0);
    let r = grad_check_inputs(
        |tape: &Tape<f64>, v| {
            let b = Binder::with_vars(tape, &store, &v[..np])?;
            let (yr, ye) = block.forward(&b, v[np], v[np + 1])?;
            let w = tape.constant(w.clone());
            yr.mul(w)?.sum().add(ye.mean())
        },
        &inputs,
        Coords::All,
        DEFAULT_STEP,
    )?;
    Ok(r.max_rel_error)
}

fn grad_mcib(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (store, mcib) = build(rng.gen(), |b| Mcib::new(b, 4, 2, GateReduction::Mean))?;
    let np = store.len();
    let mut inputs = store.values().to_vec();
    inputs.push(rt(&[3, 4], rng, -1.0, 1.0));
    inputs.push(rt(&[3, 4], rng, -1.0, 1.0));
    let w = rt(&[3, 4], rng, -1.0, 1.0);
    let r = grad_check_inputs(
        |tape: &Tape<f64>, v| {
            let b = Binder::with_vars(tape, &store, &v[..np])?;
            let f = mcib.forward(&b, v[np], v[np + 1])?;
            Ok(f.h.mul(tape.constant(w.clone()))?.sum())
        },
        &inputs,
        Coords::All,
        DEFAULT_STEP,
    )?;
    Ok(r.max_rel_error)
}

fn small_moe(seed: u64) -> Result<(ParamStore<f64>, Moe)> {
    let mut cfg = MoeConfig::new(4, 3);
    cfg.layout = "DAF".parse()?;
    cfg.heads = 2;
    cfg.depth = 1;
    build(seed, |b| Moe::new(b, cfg))
}

fn grad_expert(_: &VerifyOptions, rng: &mut ChaCha8Rng, which: usize) -> Result<f64> {
    let (store, moe) = small_moe(rng.gen())?;
    let expert = &moe.experts[which];
    let np = store.len();
    let mut inputs = store.values().to_vec();
    inputs.push(rt(&[3, 4], rng, -1.0, 1.0));
    let w = rt(&[3], rng, -1.0, 1.0);
    let r = grad_check_inputs(
        |tape: &Tape<f64>, v| {
            let b = Binder::with_vars(tape, &store, &v[..np])?;
            let out = expert.forward(&b, v[np], &mut None)?;
            Ok(out.mul(tape.constant(w.clone()))?.sum())
        },
        &inputs,
        Coords::All,
        DEFAULT_STEP,
    )?;
    Ok(r.max_rel_error)
}

fn grad_router(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (store, moe) = small_moe(rng.gen())?;
    let np = store.len();
    let mut inputs = store.values().to_vec();
    inputs.push(rt(&[3, 4], rng, -1.0, 1.0));
    let w = rt(&[3], rng, -1.0, 1.0);
    let mut worst: f64 = 0.0;
    for pair in [vec![0, 1], vec![2, 1]] {
        let routing = Routing::Fixed(pair);
        let r = grad_check_inputs(
            |tape: &Tape<f64>, v| {
                let b = Binder::with_vars(tape, &store, &v[..np])?;
                let out = moe.forward(&b, v[np], &routing, None)?;
                Ok(out.logits.mul(tape.constant(w.clone()))?.sum())
            },
            &inputs,
            Coords::All,
            DEFAULT_STEP,
        )?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

fn tiny_model(o: &VerifyOptions) -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.embed_dim = 8;
    c.inner_dim = 6;
    c.state_dim = 3;
    c.height = 8;
    c.width = 8;
    c.conv_channels = vec![4];
    c.heads = 2;
    c.layout = "DAF".parse().expect("layout");
    c.depth = 1;
    c.discretization = o.discretization;
    c
}

fn random_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Sample<f64> {
    let mut frame =
        |c: usize| Tensor::from_fn([cfg.height, cfg.width, c], |_| rng.gen_range(-1.0..1.0));
    let rgb = (0..cfg.frames).map(|_| frame(3)).collect();
    let events = (0..cfg.frames).map(|_| frame(cfg.bins)).collect();
    Sample {
        rgb: Stream::Frames(rgb),
        events: Stream::Frames(events),
        label: rng.gen_range(0..cfg.classes),
        condition: Condition::Normal,
    }
}

fn grad_full(o: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = tiny_model(o);
    let (model, store) = Model::init::<f64>(cfg.clone(), rng.gen())?;
    let x = random_sample(&cfg, rng);
    let selected = model
        .evaluate(&store, &x)?
        .1
        .map(|s| s.indices)
        .unwrap_or_default();
    let opts = || PassOptions {
        routing: Routing::Fixed(selected.clone()),
        dropout_rng: None,
    };
    let tape = Tape::new();
    let b = Binder::trainable(&tape, &store);
    let loss = model.loss(&b, &x, opts())?;
    let grads = b.collect_grads(&tape.backward(loss)?);
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
            seed: rng.gen(),
        },
        DEFAULT_STEP,
    )?;
    Ok(r.max_rel_error)
}

fn random_logits(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    // coarse grid so that ties occur regularly
    Tensor::from_fn([8], |_| f64::from(rng.gen_range(-8i32..8)) * 0.25)
}

fn router_weights_sum(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let sel = select_from_logits(&random_logits(rng), 2)?;
        worst = worst.max((sel.weights.iter().sum::<f64>() - 1.0).abs());
    }
    Ok(worst)
}

fn router_distinct(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut bad = 0;
    for _ in 0..1000 {
        let sel = select_from_logits(&random_logits(rng), 2)?;
        bad += usize::from(sel.indices.len() != 2 || sel.indices[0] == sel.indices[1]);
    }
    Ok(count(bad))
}

fn router_shift(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let logits = random_logits(rng);
        let shift = rng.gen_range(-20.0..20.0);
        let moved = logits.map(|v| v + shift);
        let (a, b) = (
            select_from_logits(&logits, 2)?,
            select_from_logits(&moved, 2)?,
        );
        if a.indices != b.indices {
            return Ok(f64::INFINITY);
        }
        for (x, y) in a.weights.iter().zip(&b.weights) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

fn router_ties(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut bad = 0;
    for _ in 0..1000 {
        let logits = random_logits(rng);
        let sel = select_from_logits(&logits, 2)?;
        let mut order: Vec<usize> = (0..8).collect();
        // highest first, then lowest index
        order.sort_by(|&i, &j| {
            logits.data()[j]
                .total_cmp(&logits.data()[i])
                .then(i.cmp(&j))
        });
        bad += usize::from(sel.indices != order[..2]);
        let again = select_from_logits(&logits, 2)?;
        bad += usize::from(again != sel);
    }
    let flat = select_from_logits(&Tensor::<f64>::zeros([8]), 2)?;
    bad += usize::from(flat.indices != [0, 1]);
    Ok(count(bad))
}

fn router_evaluates_k(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut cfg = MoeConfig::new(8, 7);
    cfg.depth = 1;
    let (store, moe) = build(rng.gen(), |b| Moe::new(b, cfg))?;
    let mut bad = 0;
    for _ in 0..20 {
        let h = rt(&[3, 8], rng, -1.0, 1.0);
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &store);
        let out = moe.forward(&b, tape.constant(h), &Routing::Learned, None)?;
        bad += usize::from(out.evaluated != 2 || out.selection.indices.len() != 2);
    }
    Ok(count(bad))
}

fn gate(
    yr: &Tensor<f64>,
    ye: &Tensor<f64>,
    ar: &Tensor<f64>,
    ae: &Tensor<f64>,
) -> Result<(Tensor<f64>, f64)> {
    let tape = Tape::new();
    let c = |t: &Tensor<f64>| tape.constant(t.clone());
    let f = gate_fuse(c(yr), c(ye), c(ar), c(ae), GateReduction::Mean)?;
    let h = (*f.h.value()).clone();
    Ok((h, f.alpha_value()))
}

fn random_gate_inputs(rng: &mut ChaCha8Rng) -> [Tensor<f64>; 4] {
    let (m, e) = (rng.gen_range(1..=5), rng.gen_range(1..=8));
    let scale = rng.gen_range(0.1..5.0);
    [(); 4].map(|_| rt(&[m, e], rng, -scale, scale))
}

fn gate_alpha_bounds(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut bad = 0;
    for _ in 0..1000 {
        let [yr, ye, ar, ae] = random_gate_inputs(rng);
        let (_, alpha) = gate(&yr, &ye, &ar, &ae)?;
        bad += usize::from(!(alpha > 0.0 && alpha < 1.0));
    }
    Ok(count(bad))
}

fn gate_zero_product(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let [mut yr, mut ye, ar, ae] = random_gate_inputs(rng);
        // disjoint supports: RGB on even slots, events on odd ones
        for (i, v) in yr.data_mut().iter_mut().enumerate() {
            if i % 2 == 1 {
                *v = 0.0;
            }
        }
        for (i, v) in ye.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = 0.0;
            }
        }
        let (_, alpha) = gate(&yr, &ye, &ar, &ae)?;
        worst = worst.max((alpha - 0.5).abs());
    }
    Ok(worst)
}

fn gate_hull(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let [yr, ye, ar, ae] = random_gate_inputs(rng);
        let (h, _) = gate(&yr, &ye, &ar, &ae)?;
        for ((&v, &a), &b) in h.data().iter().zip(ar.data()).zip(ae.data()) {
            let excess = (a.min(b) - v).max(v - a.max(b)).max(0.0);
            worst = worst.max(excess);
        }
    }
    Ok(worst)
}

fn random_events(rng: &mut ChaCha8Rng, geometry: SensorGeometry, span: (u64, u64)) -> Vec<Event> {
    let n = rng.gen_range(0..200);
    let mut events: Vec<Event> = (0..n)
        .map(|_| {
            let t = rng.gen_range(span.0..=span.1);
            let x = rng.gen_range(0..geometry.width as u32);
            let y = rng.gen_range(0..geometry.height as u32);
            Event::new(t, x, y, if rng.gen() { 1 } else { -1 }).expect("valid")
        })
        .collect();
    events.sort_by_key(|e| e.t);
    events
}

fn signed_mass(events: &[Event]) -> f64 {
    events.iter().map(|e| e.p.sign() as f64).sum()
}

fn voxel_mass(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let geometry = SensorGeometry::new(
            rng.gen_range(1..10),
            rng.gen_range(1..10),
            rng.gen_range(1..5),
        );
        let span = (rng.gen_range(0..1000), rng.gen_range(1001..5000));
        let events = random_events(rng, geometry, span);
        let (grid, _) = voxelize::<f64>(&events, geometry, span)?;
        worst = worst.max((grid.mass() - signed_mass(&events)).abs());
    }
    Ok(worst)
}

fn voxel_chunks(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let geometry = SensorGeometry::new(
            rng.gen_range(1..10),
            rng.gen_range(1..10),
            rng.gen_range(1..5),
        );
        let span = (rng.gen_range(0..1000), rng.gen_range(1001..5000));
        let events = random_events(rng, geometry, span);
        let (grids, _) = chunk_sequence::<f64>(&events, rng.gen_range(1..5), span, geometry)?;
        let total: f64 = grids.iter().map(|g| g.mass()).sum();
        worst = worst.max((total - signed_mass(&events)).abs());
    }
    Ok(worst)
}

fn voxel_empty(_: &VerifyOptions, _: &mut ChaCha8Rng) -> Result<f64> {
    let (grid, _) = voxelize::<f64>(&[], SensorGeometry::new(4, 5, DEFAULT_BINS), (0, 100))?;
    let (grids, _) =
        chunk_sequence::<f64>(&[], DEFAULT_WINDOWS, (0, 100), SensorGeometry::new(4, 5, 3))?;
    Ok(grids
        .iter()
        .map(|g| g.data.max_abs())
        .fold(grid.data.max_abs(), f64::max))
}

fn voxel_defaults(_: &VerifyOptions, _: &mut ChaCha8Rng) -> Result<f64> {
    let desk = ModelConfig::desk();
    let ok = DEFAULT_BINS == 3 && DEFAULT_WINDOWS == 2 && desk.bins == 3 && desk.frames == 2;
    Ok(count(usize::from(!ok)))
}

fn records(pairs: &[(usize, usize)]) -> Vec<EvalRecord> {
    pairs
        .iter()
        .map(|&(t, p)| EvalRecord::new(t, p, Condition::Normal))
        .collect()
}

fn metric_uar(_: &VerifyOptions, _: &mut ChaCha8Rng) -> Result<f64> {
    let r = records(&[(0, 0), (0, 0), (0, 1), (1, 1)]);
    let all = records(&[(0, 0), (4, 4)]);
    let wrong = records(&[(2, 1), (2, 0)]);
    let err = (uar(&r)? - 5.0 / 6.0).abs() + (uar(&all)? - 1.0).abs() + uar(&wrong)?;
    Ok(err)
}

fn metric_war(_: &VerifyOptions, _: &mut ChaCha8Rng) -> Result<f64> {
    let r = records(&[(0, 0), (0, 0), (0, 1), (1, 1)]);
    let mut err = (war(&r)? - 0.75).abs();
    if uar(&[]).is_ok() || war(&[]).is_ok() {
        err += 1.0;
    }
    Ok(err)
}

fn metric_balanced(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let pairs: Vec<_> = (0..28).map(|i| (i % 7, rng.gen_range(0..7))).collect();
        let r = records(&pairs);
        worst = worst.max((uar(&r)? - war(&r)?).abs());
    }
    Ok(worst)
}

fn metric_conditions(_: &VerifyOptions, _: &mut ChaCha8Rng) -> Result<f64> {
    use Condition::*;
    let r = [
        EvalRecord::new(0, 0, Normal),
        EvalRecord::new(1, 0, Normal),
        EvalRecord::new(2, 2, Hdr),
        EvalRecord::new(3, 3, Hdr),
        EvalRecord::new(4, 1, Hdr),
    ];
    let c = condition_accuracy(&r);
    let mut err = (c[&Normal] - 0.5).abs() + (c[&Hdr] - 2.0 / 3.0).abs();
    err += count(usize::from(c.len() != 2));
    Ok(err)
}

fn param_counts(o: &VerifyOptions, _: &mut ChaCha8Rng) -> Result<f64> {
    let base = tiny_model(o);
    let mut mismatches = 0;
    let mut full = 0;
    for flag in 0..5 {
        let mut cfg = base.clone();
        match flag {
            1 => cfg.ablations.no_mamba = true,
            2 => cfg.ablations.no_joint = true,
            3 => cfg.ablations.no_interaction = true,
            4 => cfg.ablations.no_moe = true,
            _ => {}
        }
        let (_, store) = Model::init::<f64>(cfg.clone(), 1)?;
        mismatches += usize::from(store.scalar_count() != cfg.param_count());
        if flag == 0 {
            full = store.scalar_count();
        } else {
            mismatches += usize::from(store.scalar_count() >= full);
        }
    }
    Ok(count(mismatches))
}

fn forward_deterministic(o: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = tiny_model(o);
    let seed = rng.gen();
    let x = random_sample(&cfg, rng);
    let (m1, s1) = Model::init::<f64>(cfg.clone(), seed)?;
    let (m2, s2) = Model::init::<f64>(cfg, seed)?;
    let (a, b) = (m1.logits(&s1, &x)?, m2.logits(&s2, &x)?);
    let c = m1.logits(&s1, &x)?;
    Ok(count(usize::from(
        !bits_equal(&a, &b) || !bits_equal(&a, &c),
    )))
}

fn bits_equal(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn checkpoint_round_trip(o: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = tiny_model(o);
    let (model, store) = Model::init::<f64>(cfg.clone(), rng.gen())?;
    let x = random_sample(&cfg, rng);
    let path = std::env::temp_dir().join(format!(
        "mcoe-verify-{}-{}.mcot",
        std::process::id(),
        rng.gen::<u32>()
    ));
    save_checkpoint(&path, model.config(), &store)?;
    let loaded = load_checkpoint::<f64>(&path);
    std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
    let (m2, s2) = loaded?;
    let same = bits_equal(&model.logits(&store, &x)?, &m2.logits(&s2, &x)?);
    Ok(count(usize::from(!same)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let report = run(&VerifyOptions::default());
        let failed: Vec<_> = report.failed().collect();
        assert!(report.passed, "{failed:#?}");
        assert!(report.checks.len() >= 20);
        let mut names: Vec<_> = report.checks.iter().map(|c| &c.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), report.checks.len());
    }

    #[test]
    fn euler_discretization_breaks_scan_equivalence() {
        let report = run(&VerifyOptions {
            seed: 3,
            discretization: Discretization::ForwardEuler,
        });
        let scan = report
            .checks
            .iter()
            .find(|c| c.name == "scan_matches_recurrence")
            .unwrap();
        assert!(!scan.passed);
        assert!(!report.passed);
        let metric = report
            .checks
            .iter()
            .find(|c| c.name == "metric_war_hand_computed")
            .unwrap();
        assert!(metric.passed);
    }

    #[test]
    fn report_serializes_with_per_check_fields() {
        let report = run(&VerifyOptions::default());
        let v = serde_json::to_value(&report).unwrap();
        let first = &v["checks"][0];
        for key in ["name", "passed", "measured", "tolerance"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        assert_eq!(v["passed"], true);
    }
}
