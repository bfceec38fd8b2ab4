//! Synthetic seven-class bimodal task for desk-scale training runs.
//!
//! RGB frames carry a class-specific colour offset and sinusoidal grating;
//! event streams carry a class-specific rate, dominant polarity and blob
//! location and go through the regular voxelizer. Lighting conditions are
//! assigned round-robin and perturb only the RGB stream.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::events::{chunk_sequence, Event, SensorGeometry};
use crate::metrics::Condition;
use crate::model::{Sample, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Time units per frame window.
const WINDOW: u64 = 1000;
const NOISE: f64 = 0.1;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw is enough here
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn rgb_frame<T: Scalar>(
    cfg: &ModelConfig,
    class: usize,
    frame: usize,
    condition: Condition,
    phase: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let (h, w) = (cfg.height, cfg.width);
    let j = cfg.classes as f64;
    let c = class as f64;
    let fx = 1.0 + (class % 3) as f64;
    let fy = (class / 3) as f64;
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let arg = std::f64::consts::TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                + phase
                + 0.3 * frame as f64;
            let wave = 0.5 * arg.sin();
            for ch in 0..3 {
                let base = 0.6 * (std::f64::consts::TAU * (c / j + ch as f64 / 3.0)).cos();
                let clean = base + wave;
                let lit = match condition {
                    Condition::Normal => clean,
                    Condition::Overexposure => clean + 0.3,
                    Condition::LowLight => 0.5 * clean,
                    Condition::Hdr => 1.3 * clean,
                };
                data.push(T::lit(lit + NOISE * gaussian(rng)));
            }
        }
    }
    Tensor::new(vec![h, w, 3], data).expect("sized")
}

fn event_stream(cfg: &ModelConfig, class: usize, rng: &mut ChaCha8Rng) -> Vec<Event> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let angle = std::f64::consts::TAU * class as f64 / cfg.classes as f64;
    let (cx, cy) = (
        w / 2.0 + 0.3 * w * angle.cos(),
        h / 2.0 + 0.3 * h * angle.sin(),
    );
    let per_window = 24 + 24 * class;
    // alternating dominant polarity keeps the signed mass distinct per class
    let positive = if class.is_multiple_of(2) { 0.9 } else { 0.1 };
    let mut events = Vec::new();
    for f in 0..cfg.frames as u64 {
        let n = per_window + rng.gen_range(0..=per_window / 10);
        for _ in 0..n {
            let t = f * WINDOW + rng.gen_range(0..WINDOW);
            let x = (cx + 1.2 * gaussian(rng)).round().clamp(0.0, w - 1.0) as u32;
            let y = (cy + 1.2 * gaussian(rng)).round().clamp(0.0, h - 1.0) as u32;
            let p = if rng.gen::<f64>() < positive { 1 } else { -1 };
            events.push(Event::new(t, x, y, p).expect("in range"));
        }
    }
    events.sort_by_key(|e| e.t);
    events
}

/// `n` samples, classes cycling `0, 1, .., J-1`, conditions cycling over
/// the four lighting labels. Identical for identical seeds.
pub fn synth_task<T: Scalar>(seed: u64, n: usize, cfg: &ModelConfig) -> Result<Vec<Sample<T>>> {
    if n < cfg.classes {
        return Err(Error::config(format!(
            "need at least {} samples, got {n}",
            cfg.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = SensorGeometry::new(cfg.height, cfg.width, cfg.bins);
    let span = (0, WINDOW * cfg.frames as u64);
    (0..n)
        .map(|i| {
            let label = i % cfg.classes;
            let condition = Condition::ALL[i % Condition::ALL.len()];
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let frames = (0..cfg.frames)
                .map(|f| rgb_frame(cfg, label, f, condition, phase, &mut rng))
                .collect();
            let events = event_stream(cfg, label, &mut rng);
            let (grids, _) = chunk_sequence::<T>(&events, cfg.frames, span, geometry)?;
            Ok(Sample {
                rgb: Stream::Frames(frames),
                events: Stream::Frames(grids.into_iter().map(|g| g.data).collect()),
                label,
                condition,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.height = 12;
        c.width = 12;
        c
    }

    /// Per-channel means of every frame and grid, concatenated.
    fn summary(s: &Sample<f64>) -> Vec<f64> {
        let mut out = Vec::new();
        for stream in [&s.rgb, &s.events] {
            let Stream::Frames(frames) = stream else {
                unreachable!()
            };
            for f in frames {
                let c = f.shape()[2];
                let n = (f.len() / c) as f64;
                for ch in 0..c {
                    out.push(f.data().iter().skip(ch).step_by(c).sum::<f64>() / n);
                }
            }
        }
        out
    }

    #[test]
    fn seeded_and_balanced() {
        let cfg = small();
        let a = synth_task::<f64>(3, 30, &cfg).unwrap();
        let b = synth_task::<f64>(3, 30, &cfg).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 7];
        for s in &a {
            counts[s.label] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_eq!(a[5].condition, Condition::Overexposure);
        assert!(synth_task::<f64>(3, 6, &cfg).is_err());
        let Stream::Frames(g) = &a[0].events else {
            unreachable!()
        };
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].shape(), &[12, 12, 3]);
    }

    #[test]
    fn nearest_centroid_probe_beats_chance() {
        let cfg = small();
        let train = synth_task::<f64>(1, 140, &cfg).unwrap();
        let test = synth_task::<f64>(2, 70, &cfg).unwrap();
        let dim = summary(&train[0]).len();
        let mut centroids = vec![vec![0.0; dim]; 7];
        let mut counts = [0.0; 7];
        for s in &train {
            for (c, v) in centroids[s.label].iter_mut().zip(summary(s)) {
                *c += v;
            }
            counts[s.label] += 1.0;
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n);
        }
        let correct = test
            .iter()
            .filter(|s| {
                let x = summary(s);
                let dist =
                    |c: &Vec<f64>| c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..7)
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                best == s.label
            })
            .count();
        assert!(
            correct as f64 / test.len() as f64 > 0.5,
            "{correct}/{}",
            test.len()
        );
    }
}
