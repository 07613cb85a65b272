//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian): magic `FFLOW1`, u32 version, u32
//! length + UTF-8 config echo, u64 epoch, u64 optimizer step, RNG state
//! (32-byte seed, u64 stream, u128 word position), u8 scalar width,
//! u32 count + metrics rows, u32 count + tensors. Each tensor is u32 length +
//! name, u32 rank, u64 per dimension, u64 payload length, payload.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;

use super::MetricsRecord;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"FFLOW1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub config_echo: String,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub history: Vec<MetricsRecord>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        // Writes into a Vec cannot fail.
        b.write_u32::<LE>(CHECKPOINT_VERSION).unwrap();
        b.write_u32::<LE>(self.config_echo.len() as u32).unwrap();
        b.extend_from_slice(self.config_echo.as_bytes());
        b.write_u64::<LE>(self.epoch).unwrap();
        b.write_u64::<LE>(self.step).unwrap();
        b.extend_from_slice(&self.rng.seed);
        b.write_u64::<LE>(self.rng.stream).unwrap();
        b.write_u128::<LE>(self.rng.word_pos).unwrap();
        b.write_u8(T::BYTES as u8).unwrap();
        b.write_u32::<LE>(self.history.len() as u32).unwrap();
        for r in &self.history {
            b.write_u64::<LE>(r.epoch as u64).unwrap();
            for v in [r.train_bpd, r.val_bpd.unwrap_or(f64::NAN), r.l2_loss, r.seconds] {
                b.write_f64::<LE>(v).unwrap();
            }
            b.write_u8(u8::from(r.val_bpd.is_some())).unwrap();
        }
        b.write_u32::<LE>(self.tensors.len() as u32).unwrap();
        for (name, t) in &self.tensors {
            b.write_u32::<LE>(name.len() as u32).unwrap();
            b.extend_from_slice(name.as_bytes());
            b.write_u32::<LE>(t.rank() as u32).unwrap();
            for &d in t.shape() {
                b.write_u64::<LE>(d as u64).unwrap();
            }
            b.write_u64::<LE>((t.numel() * T::BYTES) as u64).unwrap();
            for &v in t.data() {
                v.write_le(&mut b);
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let truncated = |_| fmt("truncated");
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = r.read_u32::<LE>().map_err(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let read_bytes = |r: &mut Cursor<&[u8]>, n: usize| -> Result<Vec<u8>> {
            let rest = bytes.len() - r.position() as usize;
            if n > rest {
                return Err(Error::Format("checkpoint: truncated".into()));
            }
            let mut v = vec![0u8; n];
            r.read_exact(&mut v)?;
            Ok(v)
        };
        let n = r.read_u32::<LE>().map_err(truncated)? as usize;
        let config_echo = String::from_utf8(read_bytes(&mut r, n)?).map_err(|_| fmt("config echo is not UTF-8"))?;
        let epoch = r.read_u64::<LE>().map_err(truncated)?;
        let step = r.read_u64::<LE>().map_err(truncated)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(truncated)?;
        let stream = r.read_u64::<LE>().map_err(truncated)?;
        let word_pos = r.read_u128::<LE>().map_err(truncated)?;
        let width = r.read_u8().map_err(truncated)? as usize;
        if width != T::BYTES {
            return Err(fmt(&format!("stored {}-byte scalars, loading as {}", width, T::NAME)));
        }
        let rows = r.read_u32::<LE>().map_err(truncated)? as usize;
        let mut history = Vec::with_capacity(rows.min(1 << 16));
        for _ in 0..rows {
            let e = r.read_u64::<LE>().map_err(truncated)? as usize;
            let mut v = [0f64; 4];
            for x in &mut v {
                *x = r.read_f64::<LE>().map_err(truncated)?;
            }
            let has_val = r.read_u8().map_err(truncated)? != 0;
            history.push(MetricsRecord {
                epoch: e,
                train_bpd: v[0],
                val_bpd: has_val.then_some(v[1]),
                l2_loss: v[2],
                seconds: v[3],
            });
        }
        let count = r.read_u32::<LE>().map_err(truncated)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.read_u32::<LE>().map_err(truncated)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, n)?).map_err(|_| fmt("tensor name is not UTF-8"))?;
            let rank = r.read_u32::<LE>().map_err(truncated)? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.read_u64::<LE>().map_err(truncated)? as usize);
            }
            let len = r.read_u64::<LE>().map_err(truncated)? as usize;
            let numel: usize = shape.iter().product();
            if len != numel * T::BYTES {
                return Err(fmt(&format!(
                    "tensor `{name}` payload length {len} does not match {shape:?}"
                )));
            }
            let payload = read_bytes(&mut r, len)?;
            let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(fmt("trailing bytes"));
        }
        Ok(Checkpoint {
            config_echo,
            epoch,
            step,
            rng: RngState { seed, stream, word_pos },
            history,
            tensors,
        })
    }
}

pub fn save_checkpoint<T: Real>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // Write-then-rename so an interrupted save never clobbers the last good file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.next_u64();
        Checkpoint {
            config_echo: "[model]\nvariant = \"realnvp\"\n".into(),
            epoch: 3,
            step: 120,
            rng: RngState::capture(&rng),
            history: vec![MetricsRecord {
                epoch: 1,
                train_bpd: 1.5,
                val_bpd: None,
                l2_loss: 0.25,
                seconds: 0.5,
            }],
            tensors: vec![
                (
                    "a".into(),
                    Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
                ),
                ("b.c".into(), Tensor::new(&[1], vec![7.0]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensors[0].1.data()[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.history, c.history);
        let mut a = ChaCha8Rng::seed_from_u64(42);
        a.next_u64();
        assert_eq!(back.rng.restore().next_u64(), a.next_u64());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra).is_err());
    }
}
