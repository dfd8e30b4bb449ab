//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "MLMKCKPT"
//! version   u32
//! config    u32 length + UTF-8 bytes (JSON)
//! count     u32
//! record*   u32 name length, name bytes, u32 rank, u64 per dimension,
//!           f32 per value
//! ```

use std::io::{Read, Write};

use super::{NeuralError, ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MLMKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn len_u32(n: usize, what: &str) -> Result<u32, NeuralError> {
    u32::try_from(n).map_err(|_| NeuralError::Format(format!("{what} too large")))
}

pub fn write_checkpoint<W: Write>(mut w: W, config_json: &str, params: &ParamSet) -> Result<(), NeuralError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(&mut w, CHECKPOINT_VERSION)?;
    put_u32(&mut w, len_u32(config_json.len(), "config")?)?;
    w.write_all(config_json.as_bytes())?;
    put_u32(&mut w, len_u32(params.len(), "parameter count")?)?;
    for (name, t) in params.iter() {
        put_u32(&mut w, len_u32(name.len(), "name")?)?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, len_u32(t.shape.len(), "rank")?)?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, NeuralError> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| NeuralError::Format(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, NeuralError> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, NeuralError> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.bytes(n, what)?).map_err(|_| NeuralError::Format(format!("{what} is not UTF-8")))
    }
}

/// Returns the stored configuration text and parameters.
pub fn read_checkpoint<R: Read>(r: R) -> Result<(String, ParamSet), NeuralError> {
    let mut r = Reader { inner: r };
    if r.bytes(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(NeuralError::Format("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NeuralError::Format(format!("unsupported version {version}")));
    }
    let config = r.string("config")?;
    let count = r.u32("parameter count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| NeuralError::Format(format!("shape of `{name}` overflows")))?;
        let raw = r.bytes(
            n.checked_mul(4)
                .ok_or_else(|| NeuralError::Format("size overflow".into()))?,
            "values",
        )?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.insert(name, Tensor::new(shape, values));
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(NeuralError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok((config, params))
}

/// Per-step training record, written as `step<TAB>lr<TAB>loss` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<(u64, f64, f64)>,
}

impl TrainingLog {
    pub fn push(&mut self, step: u64, lr: f64, loss: f64) {
        self.entries.push((step, lr, loss));
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|(s, lr, loss)| format!("{s}\t{lr:e}\t{loss:.6}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self, NeuralError> {
        let mut log = TrainingLog::default();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || NeuralError::Format(format!("training log line {}", i + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            log.push(
                fields[0].parse().map_err(|_| bad())?,
                fields[1].parse().map_err(|_| bad())?,
                fields[2].parse().map_err(|_| bad())?,
            );
        }
        Ok(log)
    }

    /// Trailing moving average of the losses with the given window.
    pub fn smoothed_losses(&self, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self.entries.iter().map(|e| e.2).collect();
        (0..losses.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window.max(1));
                let w = &losses[lo..=i];
                w.iter().sum::<f64>() / w.len() as f64
            })
            .collect()
    }
}
