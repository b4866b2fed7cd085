//! Binary checkpoints for models and Fisher payloads.
//!
//! Model file:
//!
//! ```text
//! u32 LE    descriptor length in bytes
//! utf-8     architecture descriptor, e.g. "mlp dims=784-64-10 acts=relu,identity head=softmax"
//! f64 LE    parameters in layer order
//! ```
//!
//! Fisher payload:
//!
//! ```text
//! u8        tag: 0 full, 1 diagonal, 2 K-FAC
//! full      u32 d, then d·d f64 (row-major)
//! diagonal  u32 d, then d f64
//! K-FAC     u32 L, then per layer u32 dim A, u32 dim B, A entries, B entries
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::fisher::{FisherApprox, KfacBlock};
use crate::models::{Activation, Head, LayerShape, Mlp, Model, Network, TwoLayerReLU};
use crate::numerics::DenseMatrix;
use crate::{Error, Result, Scalar};

fn parse_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Parse { field: field.into(), reason: reason.into() }
}

fn read_u32<R: Read>(r: &mut R, field: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| parse_err(field, "unexpected end of file"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<T: Scalar, R: Read>(r: &mut R, n: usize, field: &str) -> Result<Vec<T>> {
    let mut buf = vec![0u8; n.checked_mul(8).ok_or_else(|| parse_err(field, "length overflow"))?];
    r.read_exact(&mut buf).map_err(|_| parse_err(field, format!("expected {n} values")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect())
}

fn write_f64s<T: Scalar, W: Write>(w: &mut W, xs: &[T]) -> Result<()> {
    for &x in xs {
        w.write_all(&x.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

fn write_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::InvalidInput("length exceeds u32".into()))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn field<'a>(desc: &'a str, key: &str) -> Result<&'a str> {
    desc.split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|t| t.strip_prefix('=')))
        .ok_or_else(|| parse_err("descriptor", format!("missing `{key}`")))
}

fn parse_usize(s: &str, name: &str) -> Result<usize> {
    s.parse().map_err(|_| parse_err("descriptor", format!("bad {name} `{s}`")))
}

/// Builds a zero-parameter network from its descriptor.
pub fn network_from_descriptor<T: Scalar>(desc: &str) -> Result<Network<T>> {
    match desc.split_whitespace().next() {
        Some("two-layer-relu") => {
            let m = parse_usize(field(desc, "m")?, "width")?;
            let p = parse_usize(field(desc, "p")?, "input dimension")?;
            let signs = field(desc, "signs")?
                .chars()
                .map(|c| match c {
                    '+' => Ok(T::one()),
                    '-' => Ok(-T::one()),
                    _ => Err(parse_err("descriptor", format!("bad sign `{c}`"))),
                })
                .collect::<Result<Vec<T>>>()?;
            if signs.len() != m {
                return Err(parse_err("descriptor", "sign count differs from width"));
            }
            Ok(TwoLayerReLU::new(p, vec![T::zero(); m * p], signs)?.into())
        }
        Some("mlp") => {
            let dims = field(desc, "dims")?
                .split('-')
                .map(|d| parse_usize(d, "layer width"))
                .collect::<Result<Vec<_>>>()?;
            let acts = field(desc, "acts")?
                .split(',')
                .map(|a| match a {
                    "relu" => Ok(Activation::Relu),
                    "identity" => Ok(Activation::Identity),
                    _ => Err(parse_err("descriptor", format!("bad activation `{a}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let head = match field(desc, "head")? {
                "regression" => Head::Regression,
                "softmax" => Head::SoftmaxClassification,
                h => return Err(parse_err("descriptor", format!("bad head `{h}`"))),
            };
            if dims.len() < 2 || acts.len() != dims.len() - 1 {
                return Err(parse_err("descriptor", "dims and activations disagree"));
            }
            let layers = dims
                .windows(2)
                .zip(acts)
                .map(|(w, activation)| LayerShape { inputs: w[0], outputs: w[1], activation })
                .collect();
            Ok(Mlp::from_layers(layers, head)?.into())
        }
        _ => Err(parse_err("descriptor", format!("unknown architecture `{desc}`"))),
    }
}

pub fn write_model<T: Scalar, W: Write>(w: &mut W, model: &Network<T>) -> Result<()> {
    let desc = model.descriptor();
    write_len(w, desc.len())?;
    w.write_all(desc.as_bytes())?;
    write_f64s(w, model.params())
}

pub fn read_model<T: Scalar, R: Read>(r: &mut R) -> Result<Network<T>> {
    let n = read_u32(r, "descriptor.length")? as usize;
    let mut desc = vec![0u8; n];
    r.read_exact(&mut desc).map_err(|_| parse_err("descriptor", "truncated"))?;
    let desc = String::from_utf8(desc).map_err(|_| parse_err("descriptor", "not utf-8"))?;
    let mut net = network_from_descriptor::<T>(&desc)?;
    let params = read_f64s(r, net.num_params(), "parameters")?;
    net.set_params(&params)?;
    Ok(net)
}

pub fn write_fisher<T: Scalar, W: Write>(w: &mut W, f: &FisherApprox<T>) -> Result<()> {
    match f {
        FisherApprox::Full(m) => {
            w.write_all(&[0])?;
            write_len(w, m.rows())?;
            write_f64s(w, m.as_slice())
        }
        FisherApprox::Diag(v) => {
            w.write_all(&[1])?;
            write_len(w, v.len())?;
            write_f64s(w, v)
        }
        FisherApprox::Kfac(blocks) => {
            w.write_all(&[2])?;
            write_len(w, blocks.len())?;
            for b in blocks {
                write_len(w, b.a.rows())?;
                write_len(w, b.b.rows())?;
                write_f64s(w, b.a.as_slice())?;
                write_f64s(w, b.b.as_slice())?;
            }
            Ok(())
        }
    }
}

pub fn read_fisher<T: Scalar, R: Read>(r: &mut R) -> Result<FisherApprox<T>> {
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(|_| parse_err("fisher.tag", "unexpected end of file"))?;
    match tag[0] {
        0 => {
            let d = read_u32(r, "fisher.dim")? as usize;
            let data = read_f64s(r, d * d, "fisher.entries")?;
            Ok(FisherApprox::Full(DenseMatrix::new(d, d, data)?))
        }
        1 => {
            let d = read_u32(r, "fisher.dim")? as usize;
            Ok(FisherApprox::Diag(read_f64s(r, d, "fisher.entries")?))
        }
        2 => {
            let layers = read_u32(r, "fisher.layers")? as usize;
            let mut blocks = Vec::with_capacity(layers.min(1024));
            for _ in 0..layers {
                let p = read_u32(r, "fisher.a_dim")? as usize;
                let q = read_u32(r, "fisher.b_dim")? as usize;
                let a = DenseMatrix::new(p, p, read_f64s(r, p * p, "fisher.a")?)?;
                let b = DenseMatrix::new(q, q, read_f64s(r, q * q, "fisher.b")?)?;
                blocks.push(KfacBlock { a, b });
            }
            Ok(FisherApprox::Kfac(blocks))
        }
        t => Err(parse_err("fisher.tag", format!("unknown tag {t}"))),
    }
}

pub fn save_model<T: Scalar>(path: impl AsRef<Path>, model: &Network<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    read_model(&mut BufReader::new(File::open(path)?))
}

pub fn save_fisher<T: Scalar>(path: impl AsRef<Path>, f: &FisherApprox<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fisher(&mut w, f)?;
    w.flush()?;
    Ok(())
}

pub fn load_fisher<T: Scalar>(path: impl AsRef<Path>) -> Result<FisherApprox<T>> {
    read_fisher(&mut BufReader::new(File::open(path)?))
}
