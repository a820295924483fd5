//! 1-bit model files and float training checkpoints.
//!
//! Model file layout, all integers little-endian:
//!
//! ```text
//! "MOBI"  u16 version  u16 flags
//! u32 config_len  config_len bytes of `key = value` network config
//! u32 record_count
//! record_count × {
//!     u16 name_len  name (UTF-8)
//!     u8 kind (0 float, 1 binary weights, 2 buffer, 3 filter scales)
//!     u8 dtype (0 f32, 1 bit1)
//!     u8 ndim  ndim × u32 dims
//!     payload: f32 values, or rows × words_per_row u64 words for bit1
//! }
//! u32 CRC32 (IEEE) of every preceding byte
//! ```
//!
//! bit1 payloads use the [`crate::tensor::BitTensor`] layout: one row per
//! output filter, LSB-first, bit 1 = +1, padding bits zero.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::KeyValues;
use crate::conv::BinaryConvLayer;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::param::{ParamKind, Parameterized, SlotMut, SlotRef};
use crate::tensor::{words_for, BitTensor};
use crate::train::{Adam, AdamConfig, History};

pub const MODEL_MAGIC: [u8; 4] = *b"MOBI";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MOBC";
pub const FORMAT_VERSION: u16 = 1;
/// Binary convolutions pad their sign-binarized input with -1.
pub const FLAG_NEG_ONE_PADDING: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Float = 0,
    Binary = 1,
    Buffer = 2,
    Scale = 3,
}

impl RecordKind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Self::Float,
            1 => Self::Binary,
            2 => Self::Buffer,
            3 => Self::Scale,
            _ => return Err(Error::format(format!("unknown record kind {v}"))),
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Float => "float",
            Self::Binary => "binary",
            Self::Buffer => "buffer",
            Self::Scale => "scale",
        }
    }

    fn of(kind: ParamKind) -> Self {
        match kind {
            ParamKind::Float => Self::Float,
            ParamKind::Binary => Self::Binary,
            ParamKind::Buffer => Self::Buffer,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Bit1(Vec<u64>),
}

impl Payload {
    pub fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::Bit1(_) => "bit1",
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            Payload::F32(v) => 4 * v.len(),
            Payload::Bit1(w) => 8 * w.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub kind: RecordKind,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    fn encoded_len(&self) -> usize {
        2 + self.name.len() + 3 + 4 * self.shape.len() + self.payload.byte_len()
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn text(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn record(&mut self, r: &Record) {
        self.u16(r.name.len() as u16);
        self.0.extend_from_slice(r.name.as_bytes());
        self.u8(r.kind as u8);
        self.u8(match r.payload {
            Payload::F32(_) => 0,
            Payload::Bit1(_) => 1,
        });
        self.u8(r.shape.len() as u8);
        r.shape.iter().for_each(|&d| self.u32(d as u32));
        match &r.payload {
            Payload::F32(v) => self.f32s(v),
            Payload::Bit1(w) => w.iter().for_each(|&x| self.u64(x)),
        }
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.u32(crc);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("oversized payload"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("text is not UTF-8"))
    }
    fn record(&mut self) -> Result<Record> {
        let n = self.u16()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("record name is not UTF-8"))?;
        let kind = RecordKind::from_u8(self.u8()?)?;
        let dtype = self.u8()?;
        let ndim = self.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(format!("record `{name}` shape overflows")))?;
        let payload = match dtype {
            0 => Payload::F32(self.f32s(count)?),
            1 => {
                let (rows, row_len) = bit_rows(&shape);
                let words = rows * words_for(row_len);
                Payload::Bit1((0..words).map(|_| self.u64()).collect::<Result<_>>()?)
            }
            _ => return Err(Error::format(format!("unknown dtype {dtype} in `{name}`"))),
        };
        Ok(Record {
            name,
            kind,
            shape,
            payload,
        })
    }
}

/// Rows and bits per row of a packed `(out_c, ...)` weight tensor.
fn bit_rows(shape: &[usize]) -> (usize, usize) {
    match shape.split_first() {
        Some((&rows, rest)) => (rows, rest.iter().product()),
        None => (0, 0),
    }
}

/// Verifies the trailing CRC, then the magic, then the version. Returns
/// the bytes before the CRC.
fn open_container<'a>(bytes: &'a [u8], magic: [u8; 4]) -> Result<Reader<'a>> {
    if bytes.len() < 12 {
        return Err(Error::format("file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if body[..4] != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&body[..4]),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(r)
}

fn config_from_text(text: &str) -> Result<NetworkConfig> {
    NetworkConfig::from_kv(&KeyValues::parse(text)?).map_err(|e| Error::format(format!("embedded config: {e}")))
}

/// A parsed model file.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub version: u16,
    pub flags: u16,
    pub config: NetworkConfig,
    pub records: Vec<Record>,
}

impl ModelFile {
    /// Snapshot of `net` with binary weights packed to one bit.
    pub fn from_network(net: &Network) -> Result<Self> {
        let mut records = Vec::new();
        let mut err = None;
        net.visit("", &mut |name, slot| match slot {
            SlotRef::Float { value, kind, .. } => records.push(Record {
                name: name.to_string(),
                kind: RecordKind::of(kind),
                shape: value.shape().to_vec(),
                payload: Payload::F32(value.data().to_vec()),
            }),
            SlotRef::Binary(layer) => {
                if !layer.is_in_sync() {
                    err.get_or_insert(Error::StaleLayer);
                    return;
                }
                let bits = layer.binary_weights();
                records.push(Record {
                    name: name.to_string(),
                    kind: RecordKind::Binary,
                    shape: bits.logical_shape().to_vec(),
                    payload: Payload::Bit1(bits.words().to_vec()),
                });
                records.push(Record {
                    name: format!("{name}.scale"),
                    kind: RecordKind::Scale,
                    shape: vec![layer.scales().len()],
                    payload: Payload::F32(layer.scales().to_vec()),
                });
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        Ok(Self {
            version: FORMAT_VERSION,
            flags: FLAG_NEG_ONE_PADDING,
            config: net.config().clone(),
            records,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(&MODEL_MAGIC);
        w.u16(self.version);
        w.u16(self.flags);
        w.text(&self.config.to_text());
        w.u32(self.records.len() as u32);
        self.records.iter().for_each(|r| w.record(r));
        w.finish()
    }

    /// Exact length of [`ModelFile::to_bytes`].
    pub fn encoded_len(&self) -> usize {
        4 + 2
            + 2
            + 4
            + self.config.to_text().len()
            + 4
            + self.records.iter().map(Record::encoded_len).sum::<usize>()
            + 4
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = open_container(bytes, MODEL_MAGIC)?;
        let flags = r.u16()?;
        if flags & FLAG_NEG_ONE_PADDING == 0 {
            return Err(Error::format("only -1 padding of binary inputs is supported"));
        }
        let config = config_from_text(&r.text()?)?;
        let n = r.u32()? as usize;
        let records = (0..n).map(|_| r.record()).collect::<Result<Vec<_>>>()?;
        if r.pos != r.buf.len() {
            return Err(Error::format("trailing bytes after the last record"));
        }
        Ok(Self {
            version: FORMAT_VERSION,
            flags,
            config,
            records,
        })
    }

    /// Rebuilds an inference network. Binary layers come back frozen.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::new(&self.config, 0)?;
        let mut records = self.records.iter();
        let mut next = |want: &str, kind: RecordKind| -> Result<&Record> {
            let r = records
                .next()
                .ok_or_else(|| Error::format(format!("missing record `{want}`")))?;
            if r.name != want || r.kind != kind {
                return Err(Error::format(format!(
                    "expected {} record `{want}`, found {} `{}`",
                    kind.label(),
                    r.kind.label(),
                    r.name
                )));
            }
            Ok(r)
        };
        let mut err = None;
        net.visit_mut("", &mut |name, slot| {
            if err.is_some() {
                return;
            }
            let res = (|| -> Result<()> {
                match slot {
                    SlotMut::Float { value, kind, .. } => {
                        let r = next(name, RecordKind::of(kind))?;
                        match &r.payload {
                            Payload::F32(v) if r.shape == value.shape() => {
                                value.data_mut().copy_from_slice(v);
                                Ok(())
                            }
                            _ => Err(Error::format(format!("record `{name}` has the wrong shape or dtype"))),
                        }
                    }
                    SlotMut::Binary { layer, .. } => {
                        let r = next(name, RecordKind::Binary)?;
                        let words = match &r.payload {
                            Payload::Bit1(w) => w.clone(),
                            Payload::F32(_) => return Err(Error::format(format!("record `{name}` must be bit1"))),
                        };
                        let geom = *layer.geometry();
                        let bits = BitTensor::from_words(r.shape.clone(), words, geom.filter_len())?;
                        let s = next(&format!("{name}.scale"), RecordKind::Scale)?;
                        let scales = match &s.payload {
                            Payload::F32(v) => v.clone(),
                            Payload::Bit1(_) => return Err(Error::format(format!("scales of `{name}` must be f32"))),
                        };
                        *layer = BinaryConvLayer::from_binary(geom, bits, scales)?;
                        Ok(())
                    }
                }
            })();
            if let Err(e) = res {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = records.next() {
            return Err(Error::format(format!("unexpected record `{}`", extra.name)));
        }
        Ok(net)
    }

    /// Human-readable manifest.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format   MOBI v{}  flags {:#06x}", self.version, self.flags);
        let _ = writeln!(
            s,
            "network  {} K={} width={} classes={} resolution={}",
            self.config.variant, self.config.k, self.config.width_mult, self.config.num_classes, self.config.resolution
        );
        let _ = writeln!(
            s,
            "{:<28} {:<7} {:<5} {:>10} {:>10}  shape",
            "name", "kind", "dtype", "elements", "bytes"
        );
        let (mut float_bytes, mut bit_bytes) = (0usize, 0usize);
        for r in &self.records {
            let n: usize = r.shape.iter().product();
            let bytes = r.payload.byte_len();
            match r.payload {
                Payload::F32(_) => float_bytes += bytes,
                Payload::Bit1(_) => bit_bytes += bytes,
            }
            let _ = writeln!(
                s,
                "{:<28} {:<7} {:<5} {:>10} {:>10}  {:?}",
                r.name,
                r.kind.label(),
                r.payload.dtype(),
                n,
                bytes,
                r.shape
            );
        }
        let _ = writeln!(
            s,
            "records {}  f32 payload {} B  bit1 payload {} B  file {} B",
            self.records.len(),
            float_bytes,
            bit_bytes,
            self.encoded_len()
        );
        s
    }
}

pub fn export_binary(net: &Network) -> Result<Vec<u8>> {
    Ok(ModelFile::from_network(net)?.to_bytes())
}

pub fn load_binary(bytes: &[u8]) -> Result<Network> {
    ModelFile::from_bytes(bytes)?.to_network()
}

/// Size in bytes of the exported model of `net`.
pub fn export_len(net: &Network) -> Result<usize> {
    Ok(ModelFile::from_network(net)?.encoded_len())
}

pub fn inspect(bytes: &[u8]) -> Result<String> {
    Ok(ModelFile::from_bytes(bytes)?.describe())
}

/// Training state: float latent weights, optimizer moments and history.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Adam,
    pub history: History,
}

pub fn save_checkpoint(net: &Network, optimizer: &Adam, history: &History) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u16(0);
    w.text(&net.config().to_text());
    let mut records = Vec::new();
    net.visit("", &mut |name, slot| {
        records.push(Record {
            name: name.to_string(),
            kind: RecordKind::of(slot.kind()),
            shape: slot.shape().to_vec(),
            payload: Payload::F32(slot.values().to_vec()),
        })
    });
    w.u32(records.len() as u32);
    records.iter().for_each(|r| w.record(r));
    let c = optimizer.config();
    w.f32s(&[c.beta1, c.beta2, c.eps, c.weight_decay]);
    w.u64(optimizer.steps());
    w.u32(optimizer.first_moments().len() as u32);
    for (m, v) in optimizer.first_moments().iter().zip(optimizer.second_moments()) {
        w.u32(m.len() as u32);
        w.f32s(m);
        w.f32s(v);
    }
    w.text(&history.to_csv());
    w.finish()
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = open_container(bytes, CHECKPOINT_MAGIC)?;
    let _flags = r.u16()?;
    let config = config_from_text(&r.text()?)?;
    let n = r.u32()? as usize;
    let records = (0..n).map(|_| r.record()).collect::<Result<Vec<_>>>()?;
    let mut network = Network::new(&config, 0)?;
    let mut it = records.iter();
    let mut err = None;
    network.visit_mut("", &mut |name, slot| {
        if err.is_some() {
            return;
        }
        let Some(rec) = it.next() else {
            err = Some(Error::format(format!("missing record `{name}`")));
            return;
        };
        let values = match &rec.payload {
            Payload::F32(v) if rec.name == name => v,
            _ => {
                err = Some(Error::format(format!(
                    "expected f32 record `{name}`, found `{}`",
                    rec.name
                )));
                return;
            }
        };
        let target = match slot {
            SlotMut::Float { value, .. } => value,
            SlotMut::Binary { layer, .. } => layer.latent_mut(),
        };
        if target.shape() != rec.shape.as_slice() {
            err = Some(Error::format(format!("record `{name}` has shape {:?}", rec.shape)));
            return;
        }
        target.data_mut().copy_from_slice(values);
    });
    if let Some(e) = err {
        return Err(e);
    }
    if it.next().is_some() {
        return Err(Error::format("checkpoint has more records than the network"));
    }
    network.sync()?;
    let c = r.f32s(4)?;
    let cfg = AdamConfig {
        beta1: c[0],
        beta2: c[1],
        eps: c[2],
        weight_decay: c[3],
    };
    let t = r.u64()?;
    let count = r.u32()? as usize;
    let (mut ms, mut vs) = (Vec::with_capacity(count), Vec::with_capacity(count));
    for _ in 0..count {
        let len = r.u32()? as usize;
        ms.push(r.f32s(len)?);
        vs.push(r.f32s(len)?);
    }
    let optimizer = Adam::from_state(cfg, t, ms, vs)?;
    let history = History::from_csv(&r.text()?)?;
    if r.pos != r.buf.len() {
        return Err(Error::format("trailing bytes in checkpoint"));
    }
    Ok(Checkpoint {
        network,
        optimizer,
        history,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}
