//! `BARC` container: magic, version byte, a length-prefixed block of UTF-8
//! `key=value` lines, then named tensors (name, rank, `u32` LE dims, `f32`
//! LE values). All lengths are `u32` LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{BarError, Result};
use crate::nn::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BARC";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32<W: Write>(out: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| BarError::Format(format!("{v} does not fit in 32 bits")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(input: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes<R: Read>(input: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    input.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(BarError::Format("checkpoint is truncated".into()));
    }
    Ok(buf)
}

fn get_string<R: Read>(input: &mut R, n: usize) -> Result<String> {
    String::from_utf8(get_bytes(input, n)?).map_err(|_| BarError::Format("checkpoint text is not UTF-8".into()))
}

fn truncated(e: std::io::Error) -> BarError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        BarError::Format("checkpoint is truncated".into())
    } else {
        BarError::Io(e)
    }
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&[CHECKPOINT_VERSION])?;
        let mut text = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(BarError::Format(format!("config entry `{k}` cannot be encoded")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        put_u32(&mut out, text.len())?;
        out.write_all(text.as_bytes())?;
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.write_all(name.as_bytes())?;
            put_u32(&mut out, 2)?;
            put_u32(&mut out, t.rows())?;
            put_u32(&mut out, t.cols())?;
            let mut buf = Vec::with_capacity(4 * t.len());
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut head = [0u8; 5];
        input.read_exact(&mut head).map_err(truncated)?;
        if &head[..4] != CHECKPOINT_MAGIC {
            return Err(BarError::Format("not a BARC checkpoint".into()));
        }
        if head[4] != CHECKPOINT_VERSION {
            return Err(BarError::Format(format!("unsupported checkpoint version {}", head[4])));
        }
        let n = get_u32(&mut input)?;
        let text = get_string(&mut input, n)?;
        let config = text
            .lines()
            .map(|line| {
                line.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| BarError::Format(format!("config line `{line}` has no `=`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let count = get_u32(&mut input)?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = get_u32(&mut input)?;
            let name = get_string(&mut input, n)?;
            let rank = get_u32(&mut input)?;
            let dims = (0..rank).map(|_| get_u32(&mut input)).collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims[..] {
                [c] => (1, c),
                [r, c] => (r, c),
                _ => return Err(BarError::Format(format!("tensor `{name}` has rank {rank}"))),
            };
            let bytes = get_bytes(&mut input, 4 * rows * cols)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
