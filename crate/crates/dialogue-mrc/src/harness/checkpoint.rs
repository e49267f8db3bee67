//! Checkpoint serialization.
//!
//! A checkpoint is a single binary file carrying everything needed to resume
//! training or run inference with bit-identical results: the training config
//! (as config text), the vocabulary and registries, every named parameter
//! tensor as little-endian f64, and the optimizer step count and moment
//! vectors.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;

const MAGIC: &[u8; 8] = b"DLGMRC01";

#[derive(Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub vocab: Vocabulary,
    /// (name, rows, cols, values) in model parameter order.
    pub tensors: Vec<(String, usize, usize, Vec<f64>)>,
    /// Adam (m, v) per parameter, same order as `tensors`; empty when the
    /// checkpoint was saved without optimizer state.
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer { buf: Vec::new() }
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn str_list(&mut self, ss: &[String]) {
        self.u64(ss.len() as u64);
        for s in ss {
            self.str(s);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} out of range")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn str(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 in string field".to_string()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn str_list(&mut self) -> Result<Vec<String>> {
        let n = self.len()?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.str()?);
        }
        Ok(out)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn save_checkpoint(
    path: &Path,
    config: &TrainConfig,
    step: u64,
    vocab: &Vocabulary,
    named_params: &[(String, Tensor)],
    moments: &[(Vec<f64>, Vec<f64>)],
) -> Result<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.str(&config.to_text());
    w.u64(step);
    w.str_list(vocab.tokens());
    w.str_list(vocab.speakers());
    w.str_list(vocab.relation_labels());
    w.u64(named_params.len() as u64);
    for (name, t) in named_params {
        w.str(name);
        w.u64(t.rows() as u64);
        w.u64(t.cols() as u64);
        w.f64s(&t.value());
    }
    w.u64(moments.len() as u64);
    for (m, v) in moments {
        w.f64s(m);
        w.f64s(v);
    }

    let mut f = fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(&w.buf).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader::new(&buf);
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let config_text = r.str()?;
    let mut config = TrainConfig::default();
    config
        .apply_text(&config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let step = r.u64()?;
    let tokens = r.str_list()?;
    let speakers = r.str_list()?;
    let relation_labels = r.str_list()?;
    let vocab = Vocabulary::from_registries(tokens, speakers, relation_labels)?;
    let n_tensors = r.len()?;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = r.str()?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let values = r.f64s()?;
        if values.len() != rows * cols {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: {rows}x{cols} header but {} values",
                values.len()
            )));
        }
        tensors.push((name, rows, cols, values));
    }
    let n_moments = r.len()?;
    let mut moments = Vec::with_capacity(n_moments);
    for _ in 0..n_moments {
        let m = r.f64s()?;
        let v = r.f64s()?;
        moments.push((m, v));
    }
    if !r.done() {
        return Err(Error::Checkpoint(format!(
            "{}: trailing bytes after checkpoint payload",
            path.display()
        )));
    }
    Ok(Checkpoint {
        config,
        step,
        vocab,
        tensors,
        moments,
    })
}

/// Copy checkpoint tensors into live parameters, by name. Every name must
/// match and shapes must agree.
pub fn restore_params(named_params: &[(String, Tensor)], ckpt: &Checkpoint) -> Result<()> {
    if named_params.len() != ckpt.tensors.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {} tensors, model has {} parameters",
            ckpt.tensors.len(),
            named_params.len()
        )));
    }
    for ((name, t), (ck_name, rows, cols, values)) in named_params.iter().zip(&ckpt.tensors) {
        if name != ck_name {
            return Err(Error::ConfigMismatch(format!(
                "parameter order mismatch: model {name}, checkpoint {ck_name}"
            )));
        }
        if t.rows() != *rows || t.cols() != *cols {
            return Err(Error::ConfigMismatch(format!(
                "parameter {name}: model {}x{}, checkpoint {rows}x{cols}",
                t.rows(),
                t.cols()
            )));
        }
        t.update_data(|data| data.copy_from_slice(values));
    }
    Ok(())
}
