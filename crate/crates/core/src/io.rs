//! File formats: `MCOT` tensors, named-tensor checkpoints, and JSON-lines
//! dataset manifests.
//!
//! An `MCOT` tensor is the magic `MCOT`, a version byte (1), a rank byte,
//! `rank` little-endian `u32` dimensions, then row-major little-endian
//! `f32` values. A checkpoint is a sequence of entries, each a `u32`
//! name length, the UTF-8 name, and an `MCOT` tensor.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::events::{chunk_sequence, EventStream, SensorGeometry};
use crate::metrics::Condition;
use crate::model::{Model, Sample, Stream};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MCOT";
const VERSION: u8 = 1;
/// Checkpoint entry holding the model section of the config as UTF-8 bytes.
pub const CONFIG_ENTRY: &str = "meta.config";

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank above 255"))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension above u32")
        })?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_storage().to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::data(format!("truncated tensor ({what}): {e}")))?;
    Ok(b)
}

pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    if &read_exact::<4>(r, "magic")? != MAGIC {
        return Err(Error::data("not an MCOT tensor (bad magic)"));
    }
    let [version, rank] = read_exact::<2>(r, "header")?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported MCOT version {version}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(read_exact::<4>(r, "dims")?) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= (1 << 31))
        .ok_or_else(|| Error::data(format!("implausible tensor shape {shape:?}")))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::data(format!("truncated tensor data: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::from_storage(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let t = read_tensor(&mut r).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if !r.is_empty() {
        return Err(Error::data(format!(
            "{}: trailing bytes after tensor",
            path.display()
        )));
    }
    Ok(t)
}

pub fn write_archive<T: Scalar>(
    w: &mut impl Write,
    entries: &[(&str, &Tensor<T>)],
) -> std::io::Result<()> {
    for (name, t) in entries {
        let len = u32::try_from(name.len())
            .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_archive<T: Scalar>(mut r: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out = Vec::new();
    while !r.is_empty() {
        let len = u32::from_le_bytes(read_exact::<4>(&mut r, "name length")?) as usize;
        if len > r.len() {
            return Err(Error::data("truncated entry name"));
        }
        let (name, rest) = r.split_at(len);
        let name = std::str::from_utf8(name)
            .map_err(|_| Error::data("entry name is not UTF-8"))?
            .to_string();
        r = rest;
        out.push((name, read_tensor(&mut r)?));
    }
    Ok(out)
}

fn text_tensor<T: Scalar>(s: &str) -> Tensor<T> {
    Tensor::from_fn([s.len()], |i| T::lit(f64::from(s.as_bytes()[i])))
}

fn tensor_text<T: Scalar>(t: &Tensor<T>) -> Result<String> {
    let bytes = t
        .data()
        .iter()
        .map(|v| v.to_u8().ok_or_else(|| Error::data("corrupt config entry")))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| Error::data("config entry is not UTF-8"))
}

/// Model config plus every parameter.
pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    store: &ParamStore<T>,
) -> Result<()> {
    let path = path.as_ref();
    let text = TrainConfig {
        model: config.clone(),
        ..TrainConfig::desk()
    }
    .model_text();
    let meta = text_tensor::<T>(&text);
    let mut entries: Vec<(&str, &Tensor<T>)> = vec![(CONFIG_ENTRY, &meta)];
    entries.extend(store.iter());
    let mut buf = Vec::new();
    write_archive(&mut buf, &entries).map_err(|e| Error::io(path, e))?;
    // write then rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("partial");
    fs::write(&tmp, buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model, ParamStore<T>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries =
        read_archive::<T>(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut loaded = ParamStore::new();
    let mut config = None;
    for (name, t) in entries {
        if name == CONFIG_ENTRY {
            config = Some(TrainConfig::parse(&tensor_text(&t)?)?.model);
        } else {
            loaded.insert(name, t)?;
        }
    }
    let config = config
        .ok_or_else(|| Error::data(format!("{}: checkpoint has no config", path.display())))?;
    let (model, mut store) = Model::skeleton(config)?;
    if loaded.len() != store.len() {
        return Err(Error::data(format!(
            "{}: checkpoint holds {} parameters, model needs {}",
            path.display(),
            loaded.len(),
            store.len()
        )));
    }
    store.load_from(&loaded)?;
    Ok((model, store))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum EventsField {
    Csv(String),
    Voxels(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    rgb: Vec<String>,
    events: EventsField,
    label: usize,
    condition: String,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_stream<T: Scalar>(base: &Path, paths: &[String]) -> Result<Stream<T>> {
    let tensors = paths
        .iter()
        .map(|p| load_tensor::<T>(resolve(base, p)))
        .collect::<Result<Vec<_>>>()?;
    match tensors.as_slice() {
        [one] if one.rank() == 2 => Ok(Stream::Features(one.clone())),
        _ => Ok(Stream::Frames(tensors)),
    }
}

/// Parses a JSON-lines manifest; relative paths are taken from the
/// manifest's directory. Event CSVs are voxelized with the config's sensor
/// size, bin count and frame count over the stream's own time span.
pub fn load_manifest<T: Scalar>(
    path: impl AsRef<Path>,
    config: &ModelConfig,
) -> Result<Vec<Sample<T>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let geometry = SensorGeometry::new(config.height, config.width, config.bins);
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = |e: Error| Error::data(format!("{}:{}: {e}", path.display(), n + 1));
        let entry: ManifestLine =
            serde_json::from_str(line).map_err(|e| ctx(Error::data(e.to_string())))?;
        if entry.label >= config.classes {
            return Err(ctx(Error::data(format!(
                "label {} outside 0..{}",
                entry.label, config.classes
            ))));
        }
        let condition: Condition = entry.condition.parse().map_err(ctx)?;
        let rgb = load_stream(base, &entry.rgb).map_err(ctx)?;
        let events = match &entry.events {
            EventsField::Voxels(paths) => load_stream(base, paths).map_err(ctx)?,
            EventsField::Csv(p) => {
                let csv_path = resolve(base, p);
                let text =
                    fs::read_to_string(&csv_path).map_err(|e| ctx(Error::io(&csv_path, e)))?;
                let stream = EventStream::parse_csv(&text).map_err(ctx)?;
                let span = stream
                    .span()
                    .map(|(a, b)| (a, b.max(a + config.frames as u64)))
                    .ok_or_else(|| ctx(Error::data("event stream is empty")))?;
                let (grids, _) =
                    chunk_sequence::<T>(stream.events(), config.frames, span, geometry)
                        .map_err(ctx)?;
                Stream::Frames(grids.into_iter().map(|g| g.data).collect())
            }
        };
        samples.push(Sample {
            rgb,
            events,
            label: entry.label,
            condition,
        });
    }
    if samples.is_empty() {
        return Err(Error::data(format!(
            "{}: manifest lists no samples",
            path.display()
        )));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tensor_layout_is_byte_exact() {
        let t = Tensor::<f64>::from_f64([2, 1], &[1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut want = b"MCOT".to_vec();
        want.extend([1, 2]);
        want.extend(2u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1f32.to_le_bytes());
        want.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
        assert_eq!(read_tensor::<f64>(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn corrupt_inputs_are_data_errors() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::<f32>::zeros([3])).unwrap();
        for bad in [&b"XXXX"[..], &buf[..buf.len() - 1], &buf[..5]] {
            assert!(matches!(
                read_tensor::<f32>(&mut &bad[..]),
                Err(Error::Data(_))
            ));
        }
        let mut v2 = buf.clone();
        v2[4] = 2;
        assert!(read_tensor::<f32>(&mut v2.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let t = Tensor::<f32>::from_fn(shape.clone(), |i| (i as f32 + seed as f32).sin() * 1e3);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            prop_assert_eq!(buf.len(), 6 + 4 * shape.len() + 4 * n);
            prop_assert_eq!(read_tensor::<f32>(&mut buf.as_slice()).unwrap(), t);
        }
    }

    #[test]
    fn archive_round_trip() {
        let a = Tensor::<f64>::full([2], 0.5);
        let b = Tensor::<f64>::zeros([1, 3]);
        let mut buf = Vec::new();
        write_archive(&mut buf, &[("a", &a), ("layer.b", &b)]).unwrap();
        let back = read_archive::<f64>(&buf).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("layer.b".to_string(), b)]);
        assert!(read_archive::<f64>(&buf[..buf.len() - 2]).is_err());
    }
}
