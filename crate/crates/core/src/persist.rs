//! Versioned little-endian binary files for networks, priors, and harvested
//! weight samples. Floats are stored as raw IEEE-754 bits, so round trips are
//! exact. Layouts are documented in `docs/formats.md`.

use std::fs;
use std::path::Path;

use crate::adapt::{AdapterKind, AdapterPlacement};
use crate::error::{Error, Result};
use crate::net::{Activation, LayerParams, Network};
use crate::prior::{GaussianPrior, WeightVectorSample};

const MODEL_MAGIC: &[u8; 4] = b"BANN";
const PRIOR_MAGIC: &[u8; 4] = b"BAPR";
const SAMPLES_MAGIC: &[u8; 4] = b"BASM";
const VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn magic(&mut self, m: &[u8; 4]) {
        self.buf.extend_from_slice(m);
        self.u32(VERSION);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], origin: &'a str) -> Self {
        Self {
            buf,
            pos: 0,
            origin,
        }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::format(self.origin, reason)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        if self.take(4)? != m {
            return Err(self.err(format!(
                "bad magic, expected {:?}",
                String::from_utf8_lossy(m)
            )));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        let v = usize::try_from(v).map_err(|_| self.err("length overflows usize"))?;
        // every counted item is at least one byte
        if v > self.buf.len() {
            return Err(self.err(format!("implausible length {v}")));
        }
        Ok(v)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.checked_mul(8)
            .is_none_or(|b| b > self.buf.len() - self.pos)
        {
            return Err(self.err(format!("truncated array of {n} values")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn kind_from(r: &Reader<'_>, tag: u8) -> Result<AdapterKind> {
    AdapterKind::from_tag(tag).ok_or_else(|| r.err(format!("unknown adapter tag {tag}")))
}

pub fn encode_network(net: &Network) -> Vec<u8> {
    let mut w = Writer::default();
    w.magic(MODEL_MAGIC);
    w.len(net.input_dim());
    w.len(net.depth());
    match net.adapter() {
        None => {
            w.u8(0);
            w.u64(0);
        }
        Some(p) => {
            w.u8(p.kind.tag());
            w.len(p.layer);
        }
    }
    for layer in net.layers() {
        w.u8(layer.activation.tag());
        w.len(layer.in_dim());
        w.len(layer.out_dim());
        w.f64s(&layer.weights);
        w.f64s(&layer.bias);
    }
    w.buf
}

pub fn decode_network(bytes: &[u8], origin: &str) -> Result<Network> {
    let mut r = Reader::new(bytes, origin);
    r.magic(MODEL_MAGIC)?;
    let input_dim = r.len()?;
    let depth = r.len()?;
    let tag = r.u8()?;
    let anchor = r.len()?;
    let adapter = match tag {
        0 => None,
        t => Some(AdapterPlacement {
            kind: kind_from(&r, t)?,
            layer: anchor,
        }),
    };
    let mut layers = Vec::with_capacity(depth);
    for _ in 0..depth {
        let act = r.u8()?;
        let activation =
            Activation::from_tag(act).ok_or_else(|| r.err(format!("unknown activation {act}")))?;
        let n_in = r.len()?;
        let n_out = r.len()?;
        let count = n_in
            .checked_mul(n_out)
            .ok_or_else(|| r.err("layer size overflows"))?;
        let weights = r.f64s(count)?;
        let bias = r.f64s(n_out)?;
        layers.push(
            LayerParams::new(n_in, n_out, weights, bias, activation)
                .map_err(|e| r.err(e.to_string()))?,
        );
    }
    r.finish()?;
    Network::with_adapter(input_dim, layers, adapter)
        .map_err(|e| Error::format(origin, e.to_string()))
}

pub fn encode_prior(prior: &GaussianPrior) -> Vec<u8> {
    let mut w = Writer::default();
    w.magic(PRIOR_MAGIC);
    w.u8(prior.kind.tag());
    w.len(prior.len());
    w.f64(prior.floor);
    w.f64s(&prior.mean);
    w.f64s(&prior.var);
    w.buf
}

pub fn decode_prior(bytes: &[u8], origin: &str) -> Result<GaussianPrior> {
    let mut r = Reader::new(bytes, origin);
    r.magic(PRIOR_MAGIC)?;
    let tag = r.u8()?;
    let kind = kind_from(&r, tag)?;
    let m = r.len()?;
    let floor = r.f64()?;
    let mean = r.f64s(m)?;
    let var = r.f64s(m)?;
    r.finish()?;
    if var.iter().any(|&v| !(v >= floor)) {
        return Err(Error::format(origin, "variance below the stored floor"));
    }
    GaussianPrior::new(kind, mean, var, floor).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn encode_samples(samples: &[WeightVectorSample]) -> Result<Vec<u8>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("no samples to encode"))?;
    let m = first.w.len();
    if samples
        .iter()
        .any(|s| s.w.len() != m || s.kind != first.kind)
    {
        return Err(Error::invalid("samples differ in length or kind"));
    }
    let mut w = Writer::default();
    w.magic(SAMPLES_MAGIC);
    w.u8(first.kind.tag());
    w.len(samples.len());
    w.len(m);
    for s in samples {
        w.u32(s.condition_id);
        w.f64s(&s.w);
    }
    Ok(w.buf)
}

pub fn decode_samples(bytes: &[u8], origin: &str) -> Result<Vec<WeightVectorSample>> {
    let mut r = Reader::new(bytes, origin);
    r.magic(SAMPLES_MAGIC)?;
    let tag = r.u8()?;
    let kind = kind_from(&r, tag)?;
    let n = r.len()?;
    let m = r.len()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let condition_id = r.u32()?;
        let w = r.f64s(m)?;
        out.push(WeightVectorSample {
            condition_id,
            kind,
            w,
        });
    }
    r.finish()?;
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.display().to_string()),
        _ => Error::Io(e),
    })
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_network(net))?)
}

pub fn load_network(path: &Path) -> Result<Network> {
    decode_network(&read(path)?, &path.display().to_string())
}

pub fn save_prior(prior: &GaussianPrior, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_prior(prior))?)
}

pub fn load_prior(path: &Path) -> Result<GaussianPrior> {
    decode_prior(&read(path)?, &path.display().to_string())
}

pub fn save_samples(samples: &[WeightVectorSample], path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_samples(samples)?)?)
}

pub fn load_samples(path: &Path) -> Result<Vec<WeightVectorSample>> {
    decode_samples(&read(path)?, &path.display().to_string())
}
