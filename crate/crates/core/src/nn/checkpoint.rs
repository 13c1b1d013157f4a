//! Named-tensor checkpoint files.
//!
//! ```text
//! NSCKPT 1
//! <count>
//! <name> <d0> <d1> ...      (one line per tensor)
//! BINARY
//! <little-endian f32 payloads in header order>
//! ```

use std::fs;
use std::path::Path;

use super::graph::ParamSet;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "NSCKPT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Self {
        Self::new(name, shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut head = format!("{MAGIC}\n{}\n", tensors.len());
    for t in tensors {
        if t.name.is_empty() || t.name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid tensor name {:?}", t.name)));
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?} but {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        head.push_str(&t.name);
        for d in &t.shape {
            head.push_str(&format!(" {d}"));
        }
        head.push('\n');
    }
    head.push_str("BINARY\n");
    let mut out = head.into_bytes();
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut rest = bytes;
    let mut line = || -> Result<String> {
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let l = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?
            .to_string();
        rest = &rest[end + 1..];
        Ok(l)
    };
    if line()? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count: usize = line()?
        .trim()
        .parse()
        .map_err(|_| Error::Checkpoint("bad tensor count".into()))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let l = line()?;
        let mut parts = l.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::Checkpoint("empty tensor line".into()))?
            .to_string();
        let shape = parts
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad shape for {name}")))?;
        entries.push((name, shape));
    }
    if line()? != "BINARY" {
        return Err(Error::Checkpoint("missing BINARY marker".into()));
    }
    let total: usize = entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if rest.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, header describes {}",
            rest.len(),
            total * 4
        )));
    }
    let mut values = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    Ok(entries
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data = values.by_ref().take(n).collect();
            NamedTensor { name, shape, data }
        })
        .collect())
}

pub fn write_named(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn read_named(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn params_to_named<T: Real>(params: &ParamSet<T>) -> Vec<NamedTensor> {
    params
        .iter()
        .map(|(name, p)| {
            NamedTensor::new(
                name,
                p.value.shape().to_vec(),
                p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
            )
        })
        .collect()
}

/// Overwrites parameter values from tensors with matching names and shapes.
pub fn load_named_into<T: Real>(params: &mut ParamSet<T>, tensors: &[NamedTensor]) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            tensors.len(),
            params.len()
        )));
    }
    for t in tensors {
        let id = params
            .id(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", t.name)))?;
        let p = params.get_mut(id);
        if p.value.shape() != t.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, checkpoint {:?}",
                t.name,
                p.value.shape(),
                t.shape
            )));
        }
        p.value = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| T::lit(v as f64)).collect())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let ts = vec![
            NamedTensor::new("enc.w", vec![2, 3], (0..6).map(|v| v as f32 * 0.5).collect()),
            NamedTensor::new("enc.b", vec![2], vec![-1.0, f32::MIN_POSITIVE]),
        ];
        let bytes = encode(&ts).unwrap();
        assert!(bytes.starts_with(b"NSCKPT 1\n2\nenc.w 2 3\nenc.b 2\nBINARY\n"));
        assert_eq!(decode(&bytes).unwrap(), ts);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(encode(&[NamedTensor::new("a b", vec![1], vec![0.0])]).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("a", Tensor::from_vec(vec![1.5, 2.5]));
        ps.add("b", Tensor::new(vec![1, 2], vec![3.0, -4.0]).unwrap());
        let named = params_to_named(&ps);
        let mut other = ps.clone();
        other.iter_mut().for_each(|p| p.value.fill(0.0));
        load_named_into(&mut other, &named).unwrap();
        assert_eq!(other, ps);
        let mut wrong = ParamSet::<f32>::new();
        wrong.add("a", Tensor::from_vec(vec![0.0; 3]));
        wrong.add("b", Tensor::from_vec(vec![0.0; 2]));
        assert!(load_named_into(&mut wrong, &named).is_err());
    }
}
