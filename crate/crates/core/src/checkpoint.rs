//! Binary container for encoder, codebook and rehearsal-buffer state.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "CUCLCKPT"
//! version    u32      1
//! count      u32      number of tensors
//! count × {
//!   name_len u32, name (UTF-8)
//!   rank     u32, dims u64 × rank
//! }
//! payload    f64 × Σ product(dims), tensors in header order
//! ```
//!
//! A zero extent is allowed so an empty buffer can be stored.

use std::io::{Read, Write};
use std::path::Path;

use crate::diffmath::Array;
use crate::encoder::{Linear, Mlp};
use crate::error::{Error, Result};
use crate::quantizer::Codebook;
use crate::rehearsal::{BufferEntry, RehearsalBuffer};

pub const MAGIC: &[u8; 8] = b"CUCLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::LengthMismatch {
                left: n,
                right: data.len(),
            });
        }
        Ok(Tensor {
            name: name.into(),
            shape,
            data,
        })
    }

    fn from_array(name: impl Into<String>, a: &Array) -> Self {
        Tensor {
            name: name.into(),
            shape: a.shape().to_vec(),
            data: a.data().to_vec(),
        }
    }

    fn to_array(&self) -> Result<Array> {
        Array::new(self.shape.clone(), self.data.clone())
    }
}

pub fn write_tensors<W: Write>(mut out: W, tensors: &[Tensor]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.name.len() as u32).to_le_bytes())?;
        out.write_all(t.name.as_bytes())?;
        out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for t in tensors {
        for v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut input: R) -> Result<Vec<Tensor>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
        let rank = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        headers.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in headers {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.push(Tensor { name, shape, data });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(tensors)
}

pub fn save(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(file), tensors)
}

pub fn load(path: &Path) -> Result<Vec<Tensor>> {
    let file = std::fs::File::open(path)?;
    read_tensors(std::io::BufReader::new(file))
}

fn find<'a>(tensors: &'a [Tensor], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
}

/// `{prefix}.{i}.weight` / `{prefix}.{i}.bias` per layer.
pub fn mlp_tensors(prefix: &str, mlp: &Mlp) -> Vec<Tensor> {
    mlp.layers()
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                Tensor::from_array(format!("{prefix}.{i}.weight"), &l.weight),
                Tensor::from_array(format!("{prefix}.{i}.bias"), &l.bias),
            ]
        })
        .collect()
}

pub fn mlp_from_tensors(prefix: &str, tensors: &[Tensor]) -> Result<Mlp> {
    let mut layers = Vec::new();
    while let Ok(w) = find(tensors, &format!("{prefix}.{}.weight", layers.len())) {
        let b = find(tensors, &format!("{prefix}.{}.bias", layers.len()))?;
        layers.push(Linear {
            weight: w.to_array()?,
            bias: b.to_array()?,
        });
    }
    Mlp::from_layers(layers)
}

/// A single `codebook` tensor of shape `[M, K, sub_dim]`.
pub fn codebook_tensors(codebook: &Codebook) -> Vec<Tensor> {
    vec![Tensor {
        name: "codebook".into(),
        shape: vec![codebook.codebooks(), codebook.codewords(), codebook.sub_dim()],
        data: codebook.flat(),
    }]
}

pub fn codebook_from_tensors(tensors: &[Tensor]) -> Result<Codebook> {
    let t = find(tensors, "codebook")?;
    let [m, k, s] = t.shape[..] else {
        return Err(Error::Checkpoint(format!("codebook shape {:?}", t.shape)));
    };
    Codebook::from_flat(m, k, s, t.data.clone())
}

/// `buffer.capacity` `[1]`, `buffer.task_id` `[n]`, `buffer.distance` `[n]`,
/// `buffer.sample` `[n, input_dim]`.
pub fn buffer_tensors(buffer: &RehearsalBuffer, input_dim: usize) -> Vec<Tensor> {
    let entries: Vec<&BufferEntry> = buffer.entries().collect();
    let n = entries.len();
    vec![
        Tensor {
            name: "buffer.capacity".into(),
            shape: vec![1],
            data: vec![buffer.capacity() as f64],
        },
        Tensor {
            name: "buffer.task_id".into(),
            shape: vec![n],
            data: entries.iter().map(|e| e.task_id as f64).collect(),
        },
        Tensor {
            name: "buffer.distance".into(),
            shape: vec![n],
            data: entries.iter().map(|e| e.distance).collect(),
        },
        Tensor {
            name: "buffer.sample".into(),
            shape: vec![n, input_dim],
            data: entries.iter().flat_map(|e| e.sample.iter().copied()).collect(),
        },
    ]
}

pub fn buffer_from_tensors(tensors: &[Tensor]) -> Result<RehearsalBuffer> {
    let capacity = find(tensors, "buffer.capacity")?.data[0] as usize;
    let ids = &find(tensors, "buffer.task_id")?.data;
    let distances = &find(tensors, "buffer.distance")?.data;
    let samples = find(tensors, "buffer.sample")?;
    let dim = *samples.shape.get(1).unwrap_or(&0);
    if distances.len() != ids.len() || samples.shape[0] != ids.len() {
        return Err(Error::Checkpoint("buffer tensors disagree in length".into()));
    }
    let mut buffer = RehearsalBuffer::new(capacity);
    let mut pending: Vec<BufferEntry> = Vec::new();
    for (i, (&id, &distance)) in ids.iter().zip(distances).enumerate() {
        let entry = BufferEntry {
            task_id: id as usize,
            distance,
            sample: samples.data[i * dim..(i + 1) * dim].to_vec(),
        };
        if pending.first().is_some_and(|p| p.task_id != entry.task_id) {
            let task = pending[0].task_id;
            buffer.insert_task(task, std::mem::take(&mut pending))?;
        }
        pending.push(entry);
    }
    if let Some(first) = pending.first() {
        let task = first.task_id;
        buffer.insert_task(task, pending)?;
    }
    Ok(buffer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_and_codebook_round_trip() {
        let mlp = Mlp::new(&[3, 4, 2], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cb = Codebook::from_flat(2, 3, 1, vec![0.5, 1.0, -1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tensors = mlp_tensors("encoder", &mlp);
        tensors.extend(codebook_tensors(&cb));
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &tensors).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = read_tensors(&bytes[..]).unwrap();
        assert_eq!(back, tensors);
        assert_eq!(mlp_from_tensors("encoder", &back).unwrap(), mlp);
        assert_eq!(codebook_from_tensors(&back).unwrap(), cb);
    }

    #[test]
    fn buffer_round_trip_including_empty() {
        let mut buffer = RehearsalBuffer::new(2);
        for t in 0..2 {
            let entries = (0..2)
                .map(|i| BufferEntry {
                    task_id: t,
                    distance: 3.0 - i as f64,
                    sample: vec![t as f64, i as f64, 0.5],
                })
                .collect();
            buffer.insert_task(t, entries).unwrap();
        }
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &buffer_tensors(&buffer, 3)).unwrap();
        assert_eq!(buffer_from_tensors(&read_tensors(&bytes[..]).unwrap()).unwrap(), buffer);

        let empty = RehearsalBuffer::new(20);
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &buffer_tensors(&empty, 3)).unwrap();
        assert_eq!(buffer_from_tensors(&read_tensors(&bytes[..]).unwrap()).unwrap(), empty);
    }

    #[test]
    fn corrupt_input_rejected() {
        assert!(read_tensors(&b"NOTACKPT\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &[Tensor::new("x", vec![2], vec![1.0, 2.0]).unwrap()]).unwrap();
        assert!(read_tensors(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(read_tensors(&bytes[..]).is_err());
    }
}
