//! AdamW training loop with held-out evaluation and checkpointing.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::io::save_checkpoint;
use crate::metrics::{uar, war, EvalRecord};
use crate::model::{argmax, round_to_storage, Model, PassOptions, Sample};
use crate::moe::RouteStats;
use crate::params::{Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<_> = store
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        let eps = T::lit(self.eps);
        let params = store.values_mut().iter_mut();
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let lanes = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((p, &g), m), v) in lanes {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = *p * decay - lr * update;
            }
        }
        Ok(())
    }
}

/// Seed-stable shuffle; the last `round(n * holdout)` indices are held out.
pub fn split_indices(n: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = (((n as f64) * holdout).round() as usize).min(n.saturating_sub(1));
    let rest = idx.split_off(n - held);
    (idx, rest)
}

/// Loss and per-parameter gradient of one sample.
pub fn sample_gradients<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    sample: &Sample<T>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(T, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let b = Binder::trainable(&tape, store);
    let opts = PassOptions {
        dropout_rng,
        ..Default::default()
    };
    let loss = model.loss(&b, sample, opts)?;
    let value = loss.value().data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, b.collect_grads(&grads)))
}

/// Dropout stream for one sample at one step.
fn dropout_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 32) | index as u64);
    rng
}

fn run<R: Send>(pool: Option<&rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

/// Mean loss and mean gradient over `batch`. Per-sample results are summed
/// in batch order whatever the thread count, so the result is identical
/// across pool sizes.
pub fn batch_gradients<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    data: &[Sample<T>],
    batch: &[usize],
    seed: u64,
    step: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(T, Vec<Tensor<T>>)> {
    let one = |&i: &usize| {
        let mut rng = dropout_rng(seed, step, i);
        sample_gradients(model, store, &data[i], Some(&mut rng))
    };
    let parts: Vec<_> = match pool {
        Some(p) => p.install(|| batch.par_iter().map(one).collect::<Result<_>>())?,
        None => batch.iter().map(one).collect::<Result<_>>()?,
    };
    let scale = T::lit(1.0 / batch.len() as f64);
    let mut loss = T::zero();
    let mut total: Vec<Tensor<T>> = store
        .values()
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect();
    for (l, grads) in parts {
        loss = loss + l;
        for (acc, g) in total.iter_mut().zip(&grads) {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + v;
            }
        }
    }
    for t in &mut total {
        t.data_mut().iter_mut().for_each(|v| *v = *v * scale);
    }
    Ok((loss * scale, total))
}

/// Evaluation-mode predictions and routing counts over `indices`.
pub fn evaluate_samples<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    data: &[Sample<T>],
    indices: &[usize],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(Vec<EvalRecord>, RouteStats)> {
    let one = |&i: &usize| -> Result<_> {
        let (logits, selection) = model.evaluate(store, &data[i])?;
        let s = &data[i];
        Ok((
            EvalRecord::new(s.label, argmax(&logits), s.condition),
            selection,
        ))
    };
    let parts: Vec<_> = run(pool, || {
        indices.par_iter().map(one).collect::<Result<Vec<_>>>()
    })?;
    let mut stats = RouteStats::new(model.config().layout.len());
    let mut records = Vec::with_capacity(parts.len());
    for (r, sel) in parts {
        if let Some(sel) = sel {
            stats.record(&sel);
        }
        records.push(r);
    }
    Ok((records, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub train_war: f64,
    pub heldout_war: Option<f64>,
    pub heldout_uar: Option<f64>,
}

pub struct TrainOutcome<T> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub log: Vec<EpochLog>,
    pub steps: usize,
    /// Step count at the end of the first epoch with training WAR 1.0.
    pub first_perfect_step: Option<usize>,
    pub train_indices: Vec<usize>,
    pub heldout_indices: Vec<usize>,
}

impl<T> TrainOutcome<T> {
    pub fn final_heldout_war(&self) -> Option<f64> {
        self.log.last().and_then(|e| e.heldout_war)
    }
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    pub optimizer: AdamW<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = Model::init::<T>(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(&store, config.lr, config.weight_decay);
        Ok(Self {
            config,
            model,
            store,
            optimizer,
        })
    }

    fn checkpoint(&self, store: &ParamStore<T>, name: &str) -> Result<()> {
        match &self.config.out_dir {
            Some(dir) => save_checkpoint(dir.join(name), &self.config.model, store),
            None => Ok(()),
        }
    }

    /// One optimizer step on `batch`; params are left untouched and a
    /// `last_good.mcot` is written if anything goes non-finite.
    pub fn step(
        &mut self,
        data: &[Sample<T>],
        batch: &[usize],
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<T> {
        let step = self.optimizer.steps() as usize;
        let (loss, grads) = match batch_gradients(
            &self.model,
            &self.store,
            data,
            batch,
            self.config.seed,
            step,
            pool,
        ) {
            Err(Error::NonFinite(what)) => {
                self.checkpoint(&self.store, "last_good.mcot")?;
                return Err(Error::NonFinite(format!("{what} (step {step})")));
            }
            other => other?,
        };
        let culprit = if !loss.is_finite() {
            Some(self.store.first_non_finite().unwrap_or("loss").to_string())
        } else {
            grads
                .iter()
                .zip(self.store.iter())
                .find(|(g, _)| g.data().iter().any(|v| !v.is_finite()))
                .map(|(_, (name, _))| format!("gradient of {name}"))
        };
        let mut next = self.store.clone();
        let culprit = match culprit {
            Some(c) => Some(c),
            None => {
                self.optimizer.step(&mut next, &grads)?;
                round_to_storage(&mut next);
                next.first_non_finite().map(str::to_string)
            }
        };
        if let Some(name) = culprit {
            self.checkpoint(&self.store, "last_good.mcot")?;
            return Err(Error::NonFinite(format!("{name} (step {step})")));
        }
        self.store = next;
        Ok(loss)
    }

    /// Runs the configured epochs over `data`, calling `on_epoch` after
    /// each one. Writes `train_log.jsonl`, `best.mcot` and `final.mcot`
    /// when an output directory is configured.
    pub fn fit(
        mut self,
        data: &[Sample<T>],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<TrainOutcome<T>> {
        let cfg = self.config.clone();
        let (train_idx, held_idx) = split_indices(data.len(), cfg.holdout, cfg.seed);
        if train_idx.is_empty() {
            return Err(Error::data("no training samples"));
        }
        let pool = if cfg.threads > 1 {
            let p = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?;
            Some(p)
        } else {
            None
        };
        let pool = pool.as_ref();
        let mut log_file = match &cfg.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.jsonl");
                Some((File::create(&path).map_err(|e| Error::io(&path, e))?, path))
            }
            None => None,
        };
        let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut log = Vec::new();
        let mut first_perfect = None;
        let mut best_uar = f64::NEG_INFINITY;
        let mut steps = 0;
        'epochs: for epoch in 1..=cfg.epochs {
            let mut order = train_idx.clone();
            order.shuffle(&mut order_rng);
            let mut loss_sum = 0.0;
            let mut batches = 0;
            for batch in order.chunks(cfg.batch_size) {
                let loss = self.step(data, batch, pool)?;
                loss_sum += loss.to_f64().unwrap_or(f64::NAN);
                batches += 1;
                steps += 1;
                if cfg.max_steps > 0 && steps >= cfg.max_steps {
                    break;
                }
            }
            let (train_records, _) =
                evaluate_samples(&self.model, &self.store, data, &train_idx, pool)?;
            let train_war = war(&train_records)?;
            let (heldout_war, heldout_uar) = if held_idx.is_empty() {
                (None, None)
            } else {
                let (r, _) = evaluate_samples(&self.model, &self.store, data, &held_idx, pool)?;
                (Some(war(&r)?), Some(uar(&r)?))
            };
            let entry = EpochLog {
                epoch,
                steps,
                loss: loss_sum / batches.max(1) as f64,
                train_war,
                heldout_war,
                heldout_uar,
            };
            if train_war == 1.0 && first_perfect.is_none() {
                first_perfect = Some(steps);
            }
            let score = heldout_uar.unwrap_or(train_war);
            if score > best_uar {
                best_uar = score;
                self.checkpoint(&self.store, "best.mcot")?;
            }
            if let Some((f, path)) = &mut log_file {
                let line = serde_json::to_string(&entry).expect("plain struct");
                writeln!(f, "{line}").map_err(|e| Error::io(&*path, e))?;
            }
            on_epoch(&entry);
            log.push(entry);
            if cfg.max_steps > 0 && steps >= cfg.max_steps {
                break 'epochs;
            }
        }
        self.checkpoint(&self.store, "final.mcot")?;
        Ok(TrainOutcome {
            model: self.model,
            store: self.store,
            log,
            steps,
            first_perfect_step: first_perfect,
            train_indices: train_idx,
            heldout_indices: held_idx,
        })
    }
}

/// Writes `stats` as the expert-utilization JSON object.
pub fn write_route_stats(path: impl AsRef<Path>, stats: &RouteStats) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&stats.to_json()).expect("json value");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
