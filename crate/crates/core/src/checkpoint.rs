//! Checkpoint container: `MTLG` magic, a u32 format version, then named
//! segments. Parameters live in the segment named by their first path
//! component (`embeddings`, `dfhc`, `wret`, `fusion`, `decoder`).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::Vocabulary;
use crate::model::{segment_of, Model};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{Adam, RunConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"MTLG";
pub const FORMAT_VERSION: u32 = 1;
pub const PARAM_SEGMENTS: [&str; 5] = ["embeddings", "dfhc", "wret", "fusion", "decoder"];

#[derive(Debug)]
pub struct Checkpoint<T: Scalar = f64> {
    pub config: RunConfig,
    pub vocab: Option<Vocabulary>,
    pub model: Model,
    pub store: ParamStore<T>,
    pub optimizer: Option<(Adam<T>, TrainState)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let t = Tensor::read_from(&mut self.0)?;
        Ok(t)
    }
}

fn optimizer_segment<T: Scalar>(store: &ParamStore<T>, adam: &Adam<T>, st: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, adam.t);
    put_u64(&mut out, st.step);
    put_u64(&mut out, st.epoch as u64);
    put_u64(&mut out, st.cursor as u64);
    put_u32(&mut out, st.order.len() as u32);
    for &i in &st.order {
        put_u64(&mut out, i as u64);
    }
    put_u64(&mut out, st.best_val.unwrap_or(f64::NAN).to_bits());
    put_u64(&mut out, st.bad_epochs as u64);
    out.push(u8::from(st.stopped));
    put_u32(&mut out, adam.m.len() as u32);
    for ((_, name, _), (m, v)) in store.iter().zip(adam.m.iter().zip(&adam.v)) {
        put_str(&mut out, name);
        m.write_to(&mut out).expect("write to vec");
        v.write_to(&mut out).expect("write to vec");
    }
    out
}

fn read_optimizer<T: Scalar>(bytes: &[u8], store: &ParamStore<T>) -> Result<(Adam<T>, TrainState)> {
    let mut r = Reader(bytes);
    let t = r.u64()?;
    let step = r.u64()?;
    let epoch = r.u64()? as usize;
    let cursor = r.u64()? as usize;
    let n = r.u32()? as usize;
    let order = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let best = f64::from_bits(r.u64()?);
    let bad_epochs = r.u64()? as usize;
    let stopped = r.take(1)?[0] != 0;
    let count = r.u32()? as usize;
    if count != store.len() {
        return Err(Error::Format(format!("optimizer holds {count} moments for {} parameters", store.len())));
    }
    let mut adam = Adam { t, m: Vec::with_capacity(count), v: Vec::with_capacity(count) };
    for (_, name, p) in store.iter() {
        let got = r.str()?;
        let (m, v) = (r.tensor::<T>()?, r.tensor::<T>()?);
        if got != name || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::Format(format!("optimizer moment {got} does not match parameter {name}")));
        }
        adam.m.push(m);
        adam.v.push(v);
    }
    let state = TrainState { step, epoch, cursor, order, best_val: (!best.is_nan()).then_some(best), bad_epochs, stopped };
    Ok((adam, state))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut segments: Vec<(String, Vec<u8>)> = vec![("config".into(), self.config.to_text().into_bytes())];
        if let Some(v) = &self.vocab {
            segments.push(("vocab".into(), v.to_text().into_bytes()));
        }
        for seg in PARAM_SEGMENTS {
            let params: Vec<_> = self.store.iter().filter(|(_, name, _)| segment_of(name) == seg).collect();
            let mut body = Vec::new();
            put_u32(&mut body, params.len() as u32);
            for (_, name, t) in params {
                put_str(&mut body, name);
                t.write_to(&mut body).expect("write to vec");
            }
            segments.push((seg.into(), body));
        }
        if let Some((adam, st)) = &self.optimizer {
            segments.push(("optimizer".into(), optimizer_segment(&self.store, adam, st)));
        }
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, segments.len() as u32);
        for (name, body) in segments {
            put_str(&mut out, &name);
            put_u64(&mut out, body.len() as u64);
            out.extend_from_slice(&body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let n = r.u32()? as usize;
        let mut segments = BTreeMap::new();
        for _ in 0..n {
            let name = r.str()?;
            let len = r.u64()? as usize;
            segments.insert(name, r.take(len)?);
        }
        if !r.0.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint segments".into()));
        }
        let seg = |name: &str| segments.get(name).copied().ok_or_else(|| Error::Format(format!("missing segment {name}")));
        let text = |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| Error::Format("invalid UTF-8 segment".into()));
        let config = RunConfig::parse(&text(seg("config")?)?)?;
        let vocab = segments.get("vocab").map(|b| text(b).and_then(|s| Vocabulary::from_text(&s))).transpose()?;

        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &mut SeededRng::new(0), config.model.clone())?;
        let mut seen = 0;
        for name in PARAM_SEGMENTS {
            let mut r = Reader(seg(name)?);
            for _ in 0..r.u32()? {
                let pname = r.str()?;
                let t = r.tensor::<T>()?;
                let id = store
                    .find(&pname)
                    .filter(|_| segment_of(&pname) == name)
                    .ok_or_else(|| Error::Format(format!("unexpected parameter {pname} in segment {name}")))?;
                store.set(id, t).map_err(|e| Error::Format(e.to_string()))?;
                seen += 1;
            }
        }
        if seen != store.len() {
            return Err(Error::Format(format!("checkpoint holds {seen} of {} parameters", store.len())));
        }
        let optimizer = segments.get("optimizer").map(|b| read_optimizer(b, &store)).transpose()?;
        Ok(Self { config, vocab, model, store, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
