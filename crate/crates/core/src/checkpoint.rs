//! Versioned binary checkpoint codec.
//!
//! Layout:
//!
//! ```text
//! magic     8 bytes   b"UCNCKPT\0"
//! version   u32 LE
//! manifest  u64 LE length, then UTF-8 text
//! payload   raw little-endian tensor data, tensors back to back
//! ```
//!
//! The manifest is line oriented: `dtype=`, `epoch=`, `iteration=`,
//! `adam.step=`, `adam.beta1=`, `adam.beta2=`, `adam.eps=`, the run
//! configuration as `config.<key>=<value>`, and then one
//! `tensor <name> <NxCxHxW> <count>` line per tensor in payload order:
//! parameters, batch-norm buffers (`<name>` with `1xCx1x1`), Adam first
//! moments (`adam.m.<name>`) and second moments (`adam.v.<name>`).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::element::{DType, Element};
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::tensor::Shape;
use crate::train::{RunConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"UCNCKPT\0";
pub const VERSION: u32 = 1;

struct Entry {
    name: String,
    shape: Shape,
    count: usize,
}

fn fail(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_shape(s: &str) -> Option<Shape> {
    let dims: Vec<usize> = s.split('x').map(|d| d.parse().ok()).collect::<Option<_>>()?;
    let dims: [usize; 4] = dims.try_into().ok()?;
    Some(Shape(dims))
}

/// Serializes the full training state together with its configuration.
pub fn encode<T: Element>(state: &TrainState<T>, cfg: &RunConfig) -> Vec<u8> {
    let mut manifest = String::new();
    let a = &state.adam;
    let _ = write!(
        manifest,
        "dtype={}\nepoch={}\niteration={}\nadam.step={}\nadam.beta1={}\nadam.beta2={}\nadam.eps={}\n",
        T::DTYPE.name(),
        state.epoch,
        state.iteration,
        a.step,
        a.beta1,
        a.beta2,
        a.eps
    );
    for line in cfg.to_kv().lines() {
        let _ = writeln!(manifest, "config.{line}");
    }
    let mut payload = Vec::new();
    let mut put = |manifest: &mut String, name: &str, shape: Shape, data: &[T]| {
        let _ = writeln!(manifest, "tensor {name} {shape} {}", data.len());
        for &v in data {
            v.write_le(&mut payload);
        }
    };
    let params = state.model.parameters();
    for p in &params {
        put(&mut manifest, p.name(), p.value().shape(), p.value().data());
    }
    for (name, buf) in state.model.buffers() {
        put(&mut manifest, &name, Shape::new(1, buf.len(), 1, 1), buf);
    }
    for (p, m) in params.iter().zip(&a.m) {
        put(&mut manifest, &format!("adam.m.{}", p.name()), m.shape(), m.data());
    }
    for (p, v) in params.iter().zip(&a.v) {
        put(&mut manifest, &format!("adam.v.{}", p.name()), v.shape(), v.data());
    }
    let mut out = Vec::with_capacity(8 + 4 + 8 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Parsed<'a> {
    dtype: DType,
    scalars: Vec<(String, String)>,
    config: RunConfig,
    entries: Vec<Entry>,
    payload: &'a [u8],
}

fn parse(bytes: &[u8]) -> Result<Parsed<'_>> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap_or_default());
    if version != VERSION {
        return Err(fail(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap_or_default()) as usize;
    let mend = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| fail("truncated manifest"))?;
    let manifest = core::str::from_utf8(&bytes[20..mend]).map_err(|_| fail("manifest is not UTF-8"))?;
    let mut dtype = None;
    let mut scalars = Vec::new();
    let mut config_text = String::new();
    let mut entries = Vec::new();
    for line in manifest.lines() {
        if let Some(rest) = line.strip_prefix("tensor ") {
            let mut it = rest.split(' ');
            let (Some(name), Some(shape), Some(count), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(fail(format!("malformed tensor line {line:?}")));
            };
            let shape = parse_shape(shape).ok_or_else(|| fail(format!("bad shape in {line:?}")))?;
            let count: usize = count.parse().map_err(|_| fail(format!("bad count in {line:?}")))?;
            if count != shape.numel() {
                return Err(fail(format!("{name}: count {count} disagrees with shape {shape}")));
            }
            entries.push(Entry { name: name.to_string(), shape, count });
        } else if let Some(kv) = line.strip_prefix("config.") {
            config_text.push_str(kv);
            config_text.push('\n');
        } else if let Some(v) = line.strip_prefix("dtype=") {
            dtype = Some(DType::parse(v).ok_or_else(|| fail(format!("unknown dtype {v:?}")))?);
        } else if let Some((k, v)) = line.split_once('=') {
            scalars.push((k.to_string(), v.to_string()));
        } else if !line.is_empty() {
            return Err(fail(format!("unrecognized manifest line {line:?}")));
        }
    }
    let dtype = dtype.ok_or_else(|| fail("manifest lacks dtype"))?;
    let config = RunConfig::from_kv(&config_text).map_err(|e| fail(format!("config: {e}")))?;
    let need: usize = entries.iter().map(|e| e.count * dtype.size_of()).sum();
    let payload = &bytes[mend..];
    if payload.len() != need {
        return Err(fail(format!(
            "payload holds {} bytes but the manifest describes {need} (truncated or corrupt)",
            payload.len()
        )));
    }
    Ok(Parsed { dtype, scalars, config, entries, payload })
}

/// Reads only the run configuration and element type.
pub fn peek(bytes: &[u8]) -> Result<(RunConfig, DType)> {
    let p = parse(bytes)?;
    Ok((p.config, p.dtype))
}

fn scalar<N: core::str::FromStr>(p: &Parsed<'_>, key: &str) -> Result<N> {
    let (_, v) = p.scalars.iter().find(|(k, _)| k == key).ok_or_else(|| fail(format!("manifest lacks {key}")))?;
    v.parse().map_err(|_| fail(format!("{key}: cannot parse {v:?}")))
}

/// Overwrites `state` with the checkpoint contents after checking that every
/// tensor name and shape matches, in order.
pub fn restore<T: Element>(bytes: &[u8], state: &mut TrainState<T>) -> Result<RunConfig> {
    let p = parse(bytes)?;
    if p.dtype != T::DTYPE {
        return Err(fail(format!("checkpoint holds {} tensors, expected {}", p.dtype.name(), T::DTYPE.name())));
    }
    let mut expected: Vec<(String, Shape)> = Vec::new();
    let params = state.model.parameters();
    expected.extend(params.iter().map(|q| (q.name().to_string(), q.value().shape())));
    expected.extend(state.model.buffers().into_iter().map(|(n, b)| (n, Shape::new(1, b.len(), 1, 1))));
    expected.extend(params.iter().map(|q| (format!("adam.m.{}", q.name()), q.value().shape())));
    expected.extend(params.iter().map(|q| (format!("adam.v.{}", q.name()), q.value().shape())));
    for (i, (name, shape)) in expected.iter().enumerate() {
        match p.entries.get(i) {
            None => return Err(fail(format!("checkpoint ends before tensor {name}"))),
            Some(e) if &e.name != name || e.shape != *shape => {
                return Err(fail(format!(
                    "tensor mismatch at position {i}: model expects {name} {shape}, checkpoint has {} {}",
                    e.name, e.shape
                )))
            }
            Some(_) => {}
        }
    }
    if p.entries.len() != expected.len() {
        return Err(fail(format!("checkpoint has extra tensor {}", p.entries[expected.len()].name)));
    }

    let size = T::DTYPE.size_of();
    let mut chunks = p.entries.iter().scan(0usize, |off, e| {
        let lo = *off;
        *off += e.count * size;
        Some(&p.payload[lo..*off])
    });
    let mut fill = |dst: &mut [T]| {
        let src = chunks.next().unwrap_or(&[]);
        for (d, b) in dst.iter_mut().zip(src.chunks_exact(size)) {
            *d = T::read_le(b);
        }
    };
    for q in state.model.parameters_mut() {
        fill(q.value_mut().data_mut());
    }
    for (_, b) in state.model.buffers_mut() {
        fill(b);
    }
    for m in state.adam.m.iter_mut() {
        fill(m.data_mut());
    }
    for v in state.adam.v.iter_mut() {
        fill(v.data_mut());
    }
    state.model.zero_grad();
    state.epoch = scalar(&p, "epoch")?;
    state.iteration = scalar(&p, "iteration")?;
    state.adam.step = scalar(&p, "adam.step")?;
    state.adam.beta1 = scalar(&p, "adam.beta1")?;
    state.adam.beta2 = scalar(&p, "adam.beta2")?;
    state.adam.eps = scalar(&p, "adam.eps")?;
    Ok(p.config)
}

/// Rebuilds the training state described by a checkpoint.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(TrainState<T>, RunConfig)> {
    let (cfg, _) = peek(bytes)?;
    let mut state = TrainState::new(&cfg)?;
    let cfg = restore(bytes, &mut state)?;
    Ok((state, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    fn cfg(k: usize) -> RunConfig {
        RunConfig { k, target_size: (16, 16), ..RunConfig::default() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut state = TrainState::<f32>::new(&cfg(1)).unwrap();
        state.epoch = 5;
        state.iteration = 17;
        state.adam.step = 17;
        state.model.downs[0].conv.bn.stats.mean[0] = 0.25;
        state.adam.m[3].data_mut()[0] = -1.5e-7;
        let bytes = encode(&state, &cfg(1));
        let (back, c) = decode::<f32>(&bytes).unwrap();
        assert_eq!(c, cfg(1));
        assert_eq!((back.epoch, back.iteration, back.adam.step), (5, 17, 17));
        assert_eq!(back.adam, state.adam);
        assert_eq!(encode(&back, &c), bytes);

        let x = Tensor::from_fn(crate::tensor::Shape::new(1, 3, 16, 16), |i| (i % 7) as f32 / 7.0);
        let run = |s: &mut TrainState<f32>| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let o = s.model.forward(&mut g, v, false, true).unwrap();
            g.value(o.main).clone()
        };
        assert!(run(&mut state).bit_eq(&run(&mut back.clone())));
    }

    #[test]
    fn rejects_mismatched_width() {
        let bytes = encode(&TrainState::<f32>::new(&cfg(2)).unwrap(), &cfg(2));
        let mut other = TrainState::<f32>::new(&cfg(1)).unwrap();
        let err = restore(&bytes, &mut other).unwrap_err().to_string();
        assert!(err.contains("encoder.0.conv1.conv.weight"), "{err}");
    }

    #[test]
    fn rejects_truncation_version_and_dtype() {
        let bytes = encode(&TrainState::<f32>::new(&cfg(1)).unwrap(), &cfg(1));
        assert!(decode::<f32>(&bytes[..bytes.len() - 3]).unwrap_err().to_string().contains("truncated"));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode::<f32>(&bad).unwrap_err().to_string().contains("version"));
        assert!(decode::<f64>(&bytes).unwrap_err().to_string().contains("f32"));
        assert!(decode::<f32>(b"garbage").is_err());
    }
}
