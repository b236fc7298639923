//! On-disk formats: raw tensor files and network checkpoints.
//!
//! A tensor file is a text header line `shape: d0 d1 ... dn` followed by
//! the values as little-endian `f64`, row-major.
//!
//! A checkpoint is a text manifest followed by the same kind of binary
//! payload:
//!
//! ```text
//! stfocal-checkpoint 1
//! config <bytes>
//! <model config as TOML, exactly <bytes> long>
//! params <count>
//! <name> <byte offset> <d0> <d1> ...
//! ...
//! data
//! <little-endian f64 values of every parameter, in manifest order>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::backbone::{ModelConfig, Network};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

const MAGIC: &str = "stfocal-checkpoint 1";

fn encode<F: Real>(values: &[F], out: &mut Vec<u8>) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.f64().to_le_bytes());
    }
}

fn decode<F: Real>(bytes: &[u8]) -> Vec<F> {
    bytes
        .chunks_exact(8)
        .map(|b| F::of(f64::from_le_bytes(b.try_into().unwrap())))
        .collect()
}

fn parse_dims(words: &[&str], path: &Path) -> Result<Vec<usize>> {
    let dims = words
        .iter()
        .map(|w| w.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, format!("bad dimension: {e}")))?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::format(path, format!("invalid shape {dims:?}")));
    }
    Ok(dims)
}

fn read_line<R: BufRead>(r: &mut R, path: &Path) -> Result<String> {
    let mut line = String::new();
    let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if n == 0 {
        return Err(Error::format(path, "unexpected end of file"));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

/// Serialises a tensor to bytes in the tensor-file format.
pub fn tensor_to_bytes<F: Real>(t: &Tensor<F>) -> Vec<u8> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let mut out = format!("shape: {}\n", dims.join(" ")).into_bytes();
    encode(t.data(), &mut out);
    out
}

pub fn write_tensor<F: Real>(path: &Path, t: &Tensor<F>) -> Result<()> {
    fs::write(path, tensor_to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<F: Real>(path: &Path) -> Result<Tensor<F>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_line(&mut r, path)?;
    let rest = header
        .strip_prefix("shape:")
        .ok_or_else(|| Error::format(path, "missing 'shape:' header"))?;
    let words: Vec<&str> = rest.split_whitespace().collect();
    let shape = parse_dims(&words, path)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != numel(&shape) * 8 {
        return Err(Error::format(
            path,
            format!(
                "shape {shape:?} needs {} bytes of data, found {}",
                numel(&shape) * 8,
                bytes.len()
            ),
        ));
    }
    Tensor::new(shape, decode(&bytes))
}

/// Writes the model config and every parameter of `net` to `path`.
pub fn save_checkpoint<F: Real>(path: &Path, net: &Network<F>) -> Result<()> {
    let config =
        toml::to_string(net.config()).map_err(|e| Error::Config(format!("cannot serialise model config: {e}")))?;
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "config {}", config.len()).unwrap();
    out.extend_from_slice(config.as_bytes());
    writeln!(out, "params {}", net.store.len()).unwrap();
    let mut offset = 0;
    for (_, name, value) in net.store.iter() {
        let dims: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(out, "{name} {offset} {}", dims.join(" ")).unwrap();
        offset += value.numel() * 8;
    }
    writeln!(out, "data").unwrap();
    for (_, _, value) in net.store.iter() {
        encode(value.data(), &mut out);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Rebuilds a network from a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Network<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = &bytes[..];
    if read_line(&mut r, path)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic line)"));
    }
    let config_len: usize = read_line(&mut r, path)?
        .strip_prefix("config ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::format(path, "missing config length"))?;
    if r.len() < config_len {
        return Err(Error::format(path, "truncated config"));
    }
    let text = std::str::from_utf8(&r[..config_len]).map_err(|_| Error::format(path, "config is not UTF-8"))?;
    let config: ModelConfig = toml::from_str(text).map_err(|e| Error::format(path, format!("bad config: {e}")))?;
    r = &r[config_len..];
    let count: usize = read_line(&mut r, path)?
        .strip_prefix("params ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::format(path, "missing parameter count"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = read_line(&mut r, path)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.len() < 3 {
            return Err(Error::format(path, format!("bad parameter line '{line}'")));
        }
        let offset: usize = words[1]
            .parse()
            .map_err(|_| Error::format(path, format!("bad offset in '{line}'")))?;
        entries.push((words[0].to_string(), offset, parse_dims(&words[2..], path)?));
    }
    if read_line(&mut r, path)? != "data" {
        return Err(Error::format(path, "missing data marker"));
    }
    let data = r;
    let mut net = Network::<F>::new(&config, 0)?;
    if entries.len() != net.store.len() {
        return Err(Error::format(
            path,
            format!(
                "checkpoint has {} parameters, config implies {}",
                entries.len(),
                net.store.len()
            ),
        ));
    }
    for (name, offset, dims) in entries {
        let id = net
            .store
            .id(&name)
            .ok_or_else(|| Error::format(path, format!("unknown parameter '{name}'")))?;
        let end = offset + numel(&dims) * 8;
        if end > data.len() {
            return Err(Error::format(path, format!("parameter '{name}' runs past end of data")));
        }
        let t = Tensor::new(dims, decode(&data[offset..end]))?;
        net.store.set(id, t).map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(net)
}
