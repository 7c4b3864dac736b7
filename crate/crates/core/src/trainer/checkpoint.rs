//! `UNCK` checkpoint files.
//!
//! Layout, little-endian throughout: magic `UNCK`, u32 version, u32 length
//! of the UTF-8 `key=value` config block, u32 tensor count, then per tensor
//! in name order: u16 name length, name, u8 rank, rank x u32 dims, f32
//! values.

use std::path::Path;

use super::{Result, TrainError};
use crate::dataio::{self, DataError};
use crate::samplekit::ReferenceDims;
use crate::tensornet::{ParamStore, Tensor, UNet, UNetConfig};

const MAGIC: &[u8; 4] = b"UNCK";
const VERSION: u32 = 1;

/// Network config, the frame size it was trained on, and its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub unet: UNetConfig,
    pub reference: ReferenceDims,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    /// Checks that `params` match the network `unet` describes.
    pub fn new(unet: UNetConfig, reference: ReferenceDims, params: ParamStore<f32>) -> Result<Self> {
        let net = UNet::new(&unet)?;
        net.check_params(&params)
            .map_err(|e| TrainError::ConfigMismatch(e.to_string()))?;
        Ok(Self { unet, reference, params })
    }

    pub fn network(&self) -> Result<UNet> {
        Ok(UNet::new(&self.unet)?)
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn config_text(cp: &Checkpoint) -> String {
    let c = &cp.unet;
    format!(
        "input_channels={}\nbase_channels={}\ndepth={}\nbottleneck_channels={}\naspp_rates={}\ndropout={}\nseed={}\nref_rows={}\nref_cols={}\n",
        c.input_channels,
        c.base_channels,
        c.depth,
        c.bottleneck_channels,
        join(&c.aspp_rates),
        join(&c.dropout),
        c.seed,
        cp.reference.rows,
        cp.reference.cols
    )
}

fn parse_config(text: &str) -> Result<(UNetConfig, ReferenceDims)> {
    let bad = |m: String| TrainError::ConfigMismatch(m);
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| TrainError::ConfigMismatch(format!("bad value for {key}: {v}")))
    }
    fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
        v.split(',').map(|x| num(key, x.trim())).collect()
    }
    let mut cfg = UNetConfig::default();
    let mut reference = ReferenceDims::default();
    let mut seen = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed config line {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "input_channels" => cfg.input_channels = num(k, v)?,
            "base_channels" => cfg.base_channels = num(k, v)?,
            "depth" => cfg.depth = num(k, v)?,
            "bottleneck_channels" => cfg.bottleneck_channels = num(k, v)?,
            "aspp_rates" => cfg.aspp_rates = list(k, v)?,
            "dropout" => cfg.dropout = list(k, v)?,
            "seed" => cfg.seed = num(k, v)?,
            "ref_rows" => reference.rows = num(k, v)?,
            "ref_cols" => reference.cols = num(k, v)?,
            _ => return Err(bad(format!("unknown config key {k}"))),
        }
        seen.push(k.to_string());
    }
    for key in [
        "input_channels",
        "base_channels",
        "depth",
        "bottleneck_channels",
        "aspp_rates",
        "dropout",
        "seed",
        "ref_rows",
        "ref_cols",
    ] {
        if !seen.iter().any(|s| s == key) {
            return Err(bad(format!("missing config key {key}")));
        }
    }
    Ok((cfg, reference))
}

pub fn encode_checkpoint(cp: &Checkpoint) -> Vec<u8> {
    let text = config_text(cp);
    let mut out = Vec::with_capacity(16 + text.len() + 4 * cp.params.num_scalars() + 64 * cp.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(cp.params.len() as u32).to_le_bytes());
    for (name, p) in cp.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(TrainError::TruncatedData { needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(TrainError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TrainError::UnsupportedVersion(version));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| TrainError::ConfigMismatch("config block is not UTF-8".into()))?;
    let (unet, reference) = parse_config(text)?;
    let net = UNet::new(&unet).map_err(|e| TrainError::ConfigMismatch(e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = {
        let mut v: Vec<_> = net.param_shapes().map(|(n, s)| (n.to_string(), s.to_vec())).collect();
        v.sort();
        v
    };

    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(TrainError::ConfigMismatch(format!(
            "{count} tensors, config implies {}",
            expected.len()
        )));
    }
    let mut params = ParamStore::new();
    for (want_name, want_shape) in &expected {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| TrainError::ConfigMismatch("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != want_name || &shape != want_shape {
            return Err(TrainError::ConfigMismatch(format!(
                "found {name} {shape:?}, expected {want_name} {want_shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::Data(DataError::NonFiniteValue(i)));
        }
        params.insert(name, Tensor::new(&shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(TrainError::ConfigMismatch(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Checkpoint::new(unet, reference, params)
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    Ok(dataio::write_atomic(path, &encode_checkpoint(cp))?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(dataio::io_err(path))?;
    decode_checkpoint(&bytes)
}
