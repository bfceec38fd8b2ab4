//! Event-camera ingest: CSV parsing and temporal voxel grids.
//!
//! A voxel grid accumulates signed polarity into `[H, W, B]` cells, where
//! the `B` channels are equal-width temporal bins of the window. Counts
//! are accumulated as integers and converted once, so the grid's total
//! equals the signed event count exactly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default number of temporal bins per grid.
pub const DEFAULT_BINS: usize = 3;
/// Default number of grids per sample.
pub const DEFAULT_WINDOWS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i64 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_sign(p: i64) -> Result<Self> {
        match p {
            1 => Ok(Polarity::Positive),
            -1 => Ok(Polarity::Negative),
            other => Err(Error::data(format!(
                "polarity must be -1 or 1, got {other}"
            ))),
        }
    }
}

/// One brightness-change event: time in microseconds, column `x`, row `y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u32,
    pub y: u32,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u32, y: u32, p: i64) -> Result<Self> {
        Ok(Self {
            t,
            x,
            y,
            p: Polarity::from_sign(p)?,
        })
    }
}

/// Events in non-decreasing time order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
}

impl EventStream {
    /// Sorts (stably) by timestamp; out-of-order input is accepted.
    pub fn new(mut events: Vec<Event>) -> Self {
        events.sort_by_key(|e| e.t);
        Self { events }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// `[first t, last t]`, or `None` when empty.
    pub fn span(&self) -> Option<(u64, u64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }

    /// Parses `t,x,y,p` lines. A leading `t,x,y,p` header and blank lines
    /// are skipped.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut events = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (events.is_empty() && line.replace(' ', "") == "t,x,y,p") {
                continue;
            }
            let bad = |what: &str| Error::data(format!("line {}: {what}: `{line}`", lineno + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let t = fields[0].parse::<u64>().map_err(|_| bad("bad timestamp"))?;
            let x = fields[1].parse::<u32>().map_err(|_| bad("bad x"))?;
            let y = fields[2].parse::<u32>().map_err(|_| bad("bad y"))?;
            let p = fields[3].parse::<i64>().map_err(|_| bad("bad polarity"))?;
            events.push(Event::new(t, x, y, p).map_err(|_| bad("polarity must be -1 or 1"))?);
        }
        Ok(Self::new(events))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,x,y,p\n");
        for e in &self.events {
            s.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p.sign()));
        }
        s
    }
}

/// `[H, W, B]` signed polarity accumulation.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid<T> {
    pub data: Tensor<T>,
    /// Window start, microseconds.
    pub t0: u64,
    /// Bin width, microseconds.
    pub dt: f64,
}

impl<T: Scalar> VoxelGrid<T> {
    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn mass(&self) -> T {
        self.data.sum()
    }
}

/// What happened to the events offered to [`voxelize`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub accepted: usize,
    /// In the window but outside the sensor; never written to the grid.
    pub out_of_bounds: usize,
    pub outside_window: usize,
    /// Signed polarity sum of accepted events.
    pub signed_mass: i64,
}

impl IngestReport {
    fn merge(&mut self, other: IngestReport) {
        self.accepted += other.accepted;
        self.out_of_bounds += other.out_of_bounds;
        self.signed_mass += other.signed_mass;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SensorGeometry {
    pub height: usize,
    pub width: usize,
    pub bins: usize,
}

impl SensorGeometry {
    pub fn new(height: usize, width: usize, bins: usize) -> Self {
        Self {
            height,
            width,
            bins,
        }
    }
}

/// Accumulates events with `t` in `[t_start, t_end]` into a fresh grid.
///
/// The bin of an event is `floor((t - t_start) / dt)` with
/// `dt = (t_end - t_start) / bins`; `t = t_end` lands in the last bin.
pub fn voxelize<T: Scalar>(
    events: &[Event],
    geometry: SensorGeometry,
    window: (u64, u64),
) -> Result<(VoxelGrid<T>, IngestReport)> {
    voxelize_window(events, geometry, window, true)
}

fn voxelize_window<T: Scalar>(
    events: &[Event],
    geometry: SensorGeometry,
    (t_start, t_end): (u64, u64),
    include_end: bool,
) -> Result<(VoxelGrid<T>, IngestReport)> {
    let SensorGeometry {
        height,
        width,
        bins,
    } = geometry;
    if t_end <= t_start {
        return Err(Error::contract(format!(
            "voxel window must satisfy t_end > t_start, got [{t_start}, {t_end}]"
        )));
    }
    if bins == 0 || height == 0 || width == 0 {
        return Err(Error::contract("voxel grid dimensions must be at least 1"));
    }
    let span = (t_end - t_start) as u128;
    let mut counts = vec![0i64; height * width * bins];
    let mut report = IngestReport::default();
    for e in events {
        let inside = e.t >= t_start && (e.t < t_end || (include_end && e.t == t_end));
        if !inside {
            report.outside_window += 1;
            continue;
        }
        if e.x as usize >= width || e.y as usize >= height {
            report.out_of_bounds += 1;
            continue;
        }
        let bin = (((e.t - t_start) as u128 * bins as u128) / span).min(bins as u128 - 1) as usize;
        counts[(e.y as usize * width + e.x as usize) * bins + bin] += e.p.sign();
        report.accepted += 1;
        report.signed_mass += e.p.sign();
    }
    let data = Tensor::new(
        vec![height, width, bins],
        counts.into_iter().map(|c| T::lit(c as f64)).collect(),
    )?;
    Ok((
        VoxelGrid {
            data,
            t0: t_start,
            dt: span as f64 / bins as f64,
        },
        report,
    ))
}

/// Splits `span` into `m` equal sub-windows and voxelizes each.
///
/// Sub-windows are half-open except the last, so an event on a shared
/// boundary is counted once and the grids' total mass equals the span's.
pub fn chunk_sequence<T: Scalar>(
    events: &[Event],
    m: usize,
    span: (u64, u64),
    geometry: SensorGeometry,
) -> Result<(Vec<VoxelGrid<T>>, IngestReport)> {
    if m == 0 {
        return Err(Error::contract("chunk_sequence needs m >= 1"));
    }
    let (t_start, t_end) = span;
    if t_end <= t_start || ((t_end - t_start) as u128) < m as u128 {
        return Err(Error::contract(format!(
            "span [{t_start}, {t_end}] cannot be split into {m} windows"
        )));
    }
    let bound = |i: usize| t_start + ((t_end - t_start) as u128 * i as u128 / m as u128) as u64;
    let mut grids = Vec::with_capacity(m);
    let mut total = IngestReport::default();
    for i in 0..m {
        let (grid, rep) = voxelize_window(events, geometry, (bound(i), bound(i + 1)), i + 1 == m)?;
        total.merge(rep);
        grids.push(grid);
    }
    total.outside_window = events.len() - total.accepted - total.out_of_bounds;
    Ok((grids, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(t: u64, x: u32, y: u32, p: i64) -> Event {
        Event::new(t, x, y, p).unwrap()
    }

    #[test]
    fn empty_stream_gives_zero_grid() {
        let (g, r) =
            voxelize::<f64>(&[], SensorGeometry::new(2, 3, DEFAULT_BINS), (0, 10)).unwrap();
        assert_eq!(g.data.shape(), &[2, 3, 3]);
        assert!(g.data.data().iter().all(|&v| v == 0.0));
        assert_eq!(r, IngestReport::default());
    }

    #[test]
    fn hand_accumulation() {
        let events = [ev(10, 1, 1, 1), ev(99, 0, 0, -1)];
        let (g, _) = voxelize::<f64>(&events, SensorGeometry::new(2, 2, 2), (0, 100)).unwrap();
        let mut want = Tensor::<f64>::zeros([2, 2, 2]);
        want.set(&[1, 1, 0], 1.0);
        want.set(&[0, 0, 1], -1.0);
        assert_eq!(g.data, want);
        assert_eq!(g.dt, 50.0);
    }

    #[test]
    fn right_endpoint_goes_to_last_bin() {
        let (g, _) =
            voxelize::<f64>(&[ev(100, 0, 0, 1)], SensorGeometry::new(1, 1, 3), (0, 100)).unwrap();
        assert_eq!(g.data.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn out_of_bounds_and_outside_window_are_counted() {
        let events = [
            ev(5, 9, 0, 1),
            ev(5, 0, 9, 1),
            ev(500, 0, 0, 1),
            ev(5, 0, 0, -1),
        ];
        let (g, r) = voxelize::<f64>(&events, SensorGeometry::new(2, 2, 1), (0, 100)).unwrap();
        assert_eq!(r.out_of_bounds, 2);
        assert_eq!(r.outside_window, 1);
        assert_eq!(r.accepted, 1);
        assert_eq!(g.mass(), -1.0);
    }

    #[test]
    fn bad_window_is_rejected() {
        assert!(voxelize::<f64>(&[], SensorGeometry::new(1, 1, 1), (5, 5)).is_err());
        assert!(voxelize::<f64>(&[], SensorGeometry::new(1, 1, 0), (0, 5)).is_err());
    }

    #[test]
    fn single_chunk_matches_voxelize() {
        let events = [ev(0, 0, 0, 1), ev(33, 1, 0, -1), ev(100, 1, 1, 1)];
        let geo = SensorGeometry::new(2, 2, 3);
        let (full, _) = voxelize::<f64>(&events, geo, (0, 100)).unwrap();
        let (chunks, _) = chunk_sequence::<f64>(&events, 1, (0, 100), geo).unwrap();
        assert_eq!(chunks, vec![full]);
    }

    #[test]
    fn boundary_event_counted_once() {
        let events = [ev(50, 0, 0, 1)];
        let (chunks, r) = chunk_sequence::<f64>(
            &events,
            DEFAULT_WINDOWS,
            (0, 100),
            SensorGeometry::new(1, 1, 1),
        )
        .unwrap();
        assert_eq!(chunks[0].mass() + chunks[1].mass(), 1.0);
        assert_eq!(chunks[1].mass(), 1.0);
        assert_eq!(r.accepted, 1);
    }

    #[test]
    fn uniform_stream_splits_evenly() {
        let events: Vec<_> = (0..200).map(|i| ev(i, 0, 0, 1)).collect();
        let (chunks, _) =
            chunk_sequence::<f64>(&events, 2, (0, 199), SensorGeometry::new(1, 1, 3)).unwrap();
        // [0, 99) holds t = 0..=98, [99, 199] holds t = 99..=199
        assert_eq!(chunks[0].mass(), 99.0);
        assert_eq!(chunks[1].mass(), 101.0);
        let events: Vec<_> = (0..200).map(|i| ev(i, 0, 0, 1)).collect();
        let (chunks, _) =
            chunk_sequence::<f64>(&events, 2, (0, 200), SensorGeometry::new(1, 1, 3)).unwrap();
        assert_eq!(chunks[0].mass(), chunks[1].mass());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let text = "t,x,y,p\n30,1,0,-1\n10,0,1,1\n\n";
        let s = EventStream::parse_csv(text).unwrap();
        assert_eq!(s.events()[0], ev(10, 0, 1, 1));
        assert_eq!(EventStream::parse_csv(&s.to_csv()).unwrap(), s);
        assert!(EventStream::parse_csv("1,2,3,0").is_err());
        assert!(EventStream::parse_csv("1,2,3").is_err());
        assert!(EventStream::parse_csv("-1,2,3,1").is_err());
    }

    fn stream() -> impl Strategy<Value = Vec<Event>> {
        prop::collection::vec(
            (0u64..1000, 0u32..5, 0u32..4, prop::bool::ANY)
                .prop_map(|(t, x, y, p)| ev(t, x, y, if p { 1 } else { -1 })),
            0..200,
        )
    }

    proptest! {
        #[test]
        fn mass_is_conserved(events in stream(), bins in 1usize..6, m in 1usize..4) {
            let geo = SensorGeometry::new(4, 4, bins);
            let (g, r) = voxelize::<f64>(&events, geo, (100, 900)).unwrap();
            let want: i64 = events.iter()
                .filter(|e| (100..=900).contains(&e.t) && e.x < 4)
                .map(|e| e.p.sign()).sum();
            prop_assert_eq!(g.mass(), want as f64);
            prop_assert_eq!(r.signed_mass, want);
            let (chunks, _) = chunk_sequence::<f64>(&events, m, (100, 900), geo).unwrap();
            let total: f64 = chunks.iter().map(|c| c.mass()).sum();
            prop_assert_eq!(total, want as f64);
        }

        #[test]
        fn same_timestamp_shuffle_is_invisible(events in stream(), seed in 0u64..1000) {
            let sorted = EventStream::new(events.clone());
            let mut shuffled = sorted.events().to_vec();
            // reverse each run of equal timestamps, rotated by seed
            let mut i = 0;
            while i < shuffled.len() {
                let mut j = i;
                while j < shuffled.len() && shuffled[j].t == shuffled[i].t { j += 1; }
                let run = &mut shuffled[i..j];
                run.rotate_left((seed as usize) % run.len());
                run.reverse();
                i = j;
            }
            let geo = SensorGeometry::new(4, 5, 3);
            let (a, _) = voxelize::<f64>(sorted.events(), geo, (0, 999)).unwrap();
            let (b, _) = voxelize::<f64>(&shuffled, geo, (0, 999)).unwrap();
            prop_assert_eq!(a, b);
        }

        // With one bin and one polarity, cell values are event counts, so a
        // narrower window can only drop events.
        #[test]
        fn narrowing_never_grows_cells(ts in prop::collection::vec((0u64..1000, 0u32..3, 0u32..3), 0..100),
                                       lo in 0u64..400, hi in 600u64..1000, shrink in 0u64..100) {
            let events: Vec<_> = ts.into_iter().map(|(t, x, y)| ev(t, x, y, -1)).collect();
            let geo = SensorGeometry::new(3, 3, 1);
            let (wide, _) = voxelize::<f64>(&events, geo, (lo, hi)).unwrap();
            let (narrow, _) = voxelize::<f64>(&events, geo, (lo + shrink, hi - shrink)).unwrap();
            for (a, b) in narrow.data.data().iter().zip(wide.data.data()) {
                prop_assert!(a.abs() <= b.abs());
            }
        }
    }
}
