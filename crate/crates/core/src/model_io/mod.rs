//! Binary model files and text experiment configs.
//!
//! # Model file layout
//!
//! All multi-byte values are little-endian.
//!
//! | field | bytes |
//! |---|---|
//! | magic `SLBF` | 4 |
//! | version (`1`) | 2 |
//! | layer count | 2 |
//! | input `c`, `h`, `w` | 2 each |
//! | records | per layer |
//! | CRC32 of everything before it | 4 |
//!
//! Each record starts with a one-byte kind tag followed by `u16` fields:
//!
//! - `1` SLBF conv: `c_in c_out d s m flags stride padding` (flags bit 0 =
//!   scaling), then the bank as `ceil(m d^2 s / 8)` bytes, bit order filter,
//!   channel, row, col, MSB first. Then per output filter either `k` pairs of
//!   `u16` row and `f32` value (scaling) or a `ceil(m k / 8)`-byte bitmap with
//!   bit `i m + j` set when column `i` selects row `j`.
//! - `2` full conv: `c_in c_out d stride padding flags` (bit 1 = bias), then
//!   weights `(c_out, c_in, d, d)` and the bias as `f32`.
//! - `3` batch norm: `channels flags` (bit 0 = affine), then running mean,
//!   running variance and, if affine, gamma and beta as `f32`.
//! - `4` ReLU, `6` flatten: no fields.
//! - `5` max pool: `kernel stride`.
//! - `7` fully connected: `inputs outputs flags` (bit 1 = bias), then
//!   weights `(outputs, inputs)` and the bias as `f32`.

mod config;

pub use config::{parse_config, ExperimentConfig};

use std::path::Path;

use crate::bits;
use crate::error::{Error, Result};
use crate::fraction::Fraction;
use crate::nn::{BatchNorm, Flatten, FullConv, Layer, Linear, MaxPool, Network, Relu};
use crate::slbf::{BinaryFilterBank, SelectorMatrix, SlbfConv, SlbfLayerConfig};
use crate::tensor::ConvGeometry;

/// Shipped experiment configs, by name.
pub const PRESETS: [(&str, &str); 5] = [
    ("lenet5_f1_1_f2_quarter", include_str!("../../configs/lenet5_f1_1_f2_quarter.cfg")),
    ("lenet5_f1_1_f2_quarter_noscale", include_str!("../../configs/lenet5_f1_1_f2_quarter_noscale.cfg")),
    ("lenet5_f1_1_f2_eighth", include_str!("../../configs/lenet5_f1_1_f2_eighth.cfg")),
    ("lenet5_f1_1_f2_sixteenth", include_str!("../../configs/lenet5_f1_1_f2_sixteenth.cfg")),
    ("lenet5_full", include_str!("../../configs/lenet5_full.cfg")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub const MAGIC: &[u8; 4] = b"SLBF";
pub const VERSION: u16 = 1;
/// Magic, version, layer count and input dims.
pub const HEADER_BYTES: usize = 14;
pub const CRC_BYTES: usize = 4;

const TAG_SLBF: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_BN: u8 = 3;
const TAG_RELU: u8 = 4;
const TAG_POOL: u8 = 5;
const TAG_FLATTEN: u8 = 6;
const TAG_LINEAR: u8 = 7;

const FLAG_SCALING: u16 = 1;
const FLAG_AFFINE: u16 = 1;
const FLAG_BIAS: u16 = 2;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: usize, what: &str) -> Result<()> {
        let v = u16::try_from(v).map_err(|_| Error::Malformed(format!("{what} = {v} does not fit in u16")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes a frozen network.
pub fn save(net: &Network) -> Result<Vec<u8>> {
    if !net.is_frozen() {
        return Err(Error::Usage("freeze the network before saving".into()));
    }
    let mut w = Writer(Vec::with_capacity(file_size(net)));
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.u16(net.layers().len(), "layer count")?;
    for (v, what) in net.input().iter().zip(["input c", "input h", "input w"]) {
        w.u16(*v, what)?;
    }
    for layer in net.layers() {
        write_layer(&mut w, layer)?;
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    Ok(w.0)
}

fn write_layer(w: &mut Writer, layer: &Layer) -> Result<()> {
    match layer {
        Layer::Slbf(l) => {
            let shape = l.shape();
            let g = &shape.geometry;
            w.u8(TAG_SLBF);
            for (v, what) in [
                (g.in_channels, "c_in"),
                (g.out_channels, "c_out"),
                (g.kernel, "d"),
                (shape.s, "s"),
                (shape.m, "m"),
                (if l.config().scaling { FLAG_SCALING as usize } else { 0 }, "flags"),
                (g.stride, "stride"),
                (g.padding, "padding"),
            ] {
                w.u16(v, what)?;
            }
            w.0.extend_from_slice(l.bank().packed());
            for sel in l.selectors() {
                if l.config().scaling {
                    for (&row, &val) in sel.rows().iter().zip(sel.values()) {
                        w.u16(row, "selector row")?;
                        w.f32s(&[val]);
                    }
                } else {
                    let m = sel.m();
                    let mut set = vec![false; m * sel.k()];
                    for (i, &row) in sel.rows().iter().enumerate() {
                        set[i * m + row] = true;
                    }
                    w.0.extend(bits::pack(set));
                }
            }
        }
        Layer::Conv(l) => {
            let g = &l.geometry;
            w.u8(TAG_CONV);
            let flags = if l.bias.is_some() { FLAG_BIAS } else { 0 } as usize;
            for (v, what) in [
                (g.in_channels, "c_in"),
                (g.out_channels, "c_out"),
                (g.kernel, "d"),
                (g.stride, "stride"),
                (g.padding, "padding"),
                (flags, "flags"),
            ] {
                w.u16(v, what)?;
            }
            w.f32s(&l.weight.value);
            if let Some(b) = &l.bias {
                w.f32s(&b.value);
            }
        }
        Layer::BatchNorm(l) => {
            w.u8(TAG_BN);
            w.u16(l.channels, "channels")?;
            w.u16(if l.affine() { FLAG_AFFINE as usize } else { 0 }, "flags")?;
            w.f32s(&l.running_mean);
            w.f32s(&l.running_var);
            if let (Some(g), Some(b)) = (&l.gamma, &l.beta) {
                w.f32s(&g.value);
                w.f32s(&b.value);
            }
        }
        Layer::Relu(_) => w.u8(TAG_RELU),
        Layer::MaxPool(l) => {
            w.u8(TAG_POOL);
            w.u16(l.kernel, "kernel")?;
            w.u16(l.stride, "stride")?;
        }
        Layer::Flatten(_) => w.u8(TAG_FLATTEN),
        Layer::Linear(l) => {
            w.u8(TAG_LINEAR);
            w.u16(l.inputs, "inputs")?;
            w.u16(l.outputs, "outputs")?;
            w.u16(FLAG_BIAS as usize, "flags")?;
            w.f32s(&l.weight.value);
            w.f32s(&l.bias.value);
        }
    }
    Ok(())
}

/// Bytes of one layer record, tag included.
pub fn record_size(layer: &Layer) -> usize {
    match layer {
        Layer::Slbf(l) => {
            let s = l.shape();
            let k = s.k();
            let per_filter = if l.config().scaling { k * 6 } else { bits::packed_len(s.m * k) };
            1 + 16 + bits::packed_len(s.m * s.filter_len()) + s.geometry.out_channels * per_filter
        }
        Layer::Conv(l) => {
            let bias = l.bias.as_ref().map_or(0, |b| b.value.len());
            1 + 12 + 4 * (l.weight.value.len() + bias)
        }
        Layer::BatchNorm(l) => 1 + 4 + 4 * l.channels * if l.affine() { 4 } else { 2 },
        Layer::Relu(_) | Layer::Flatten(_) => 1,
        Layer::MaxPool(_) => 5,
        Layer::Linear(l) => 1 + 6 + 4 * (l.inputs + 1) * l.outputs,
    }
}

/// Exact size of [`save`]'s output.
pub fn file_size(net: &Network) -> usize {
    HEADER_BYTES + net.layers().iter().map(record_size).sum::<usize>() + CRC_BYTES
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("{what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<usize> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Malformed(format!("{what} too large")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn fields<const N: usize>(&mut self, what: &str) -> Result<[usize; N]> {
        let mut out = [0; N];
        for v in &mut out {
            *v = self.u16(what)?;
        }
        Ok(out)
    }
}

/// Parses a model file. Checks, in order: length, magic, CRC, version.
pub fn load(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("file shorter than the magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC.to_vec(),
            found: bytes[..4].to_vec(),
        });
    }
    if bytes.len() < HEADER_BYTES + CRC_BYTES {
        return Err(Error::Truncated(format!("{} bytes cannot hold a header", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - CRC_BYTES);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u16("version")? as u16;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u16("layer count")?;
    let input = r.fields::<3>("input dims")?;
    let mut layers = Vec::with_capacity(count);
    for idx in 0..count {
        layers.push(read_layer(&mut r, idx)?);
    }
    if r.pos != body.len() {
        return Err(Error::Malformed(format!("{} unread bytes after the last record", body.len() - r.pos)));
    }
    let net = Network::new(input, layers)?;
    Ok(net)
}

fn malformed(idx: usize, e: Error) -> Error {
    match e {
        Error::Truncated(_) | Error::Malformed(_) => e,
        other => Error::Malformed(format!("layer {idx}: {other}")),
    }
}

fn read_layer(r: &mut Reader, idx: usize) -> Result<Layer> {
    let tag = r.u8("layer tag")?;
    let layer = match tag {
        TAG_SLBF => {
            let [c_in, c_out, d, s, m, flags, stride, padding] = r.fields::<8>("SLBF fields")?;
            if flags & !(FLAG_SCALING as usize) != 0 {
                return Err(Error::Malformed(format!("layer {idx}: unknown SLBF flags {flags:#x}")));
            }
            let scaling = flags & FLAG_SCALING as usize != 0;
            let geometry = ConvGeometry::new(c_in, c_out, d).with_stride(stride).with_padding(padding);
            let f1 = Fraction::new(s as u32, c_in as u32);
            let f2 = Fraction::new(m as u32, c_out as u32);
            let (f1, f2) = f1
                .zip(f2)
                .ok_or_else(|| Error::Malformed(format!("layer {idx}: zero-sized SLBF layer")))?;
            let config = SlbfLayerConfig::new(geometry, f1, f2, scaling);
            let shape = config.shape().map_err(|e| malformed(idx, e))?;
            if (shape.s, shape.m) != (s, m) {
                return Err(Error::Malformed(format!("layer {idx}: s = {s}, m = {m} do not fit c_in, c_out")));
            }
            let bank_bits = m * shape.filter_len();
            let bank = BinaryFilterBank::from_bits(m, s, d, r.take(bits::packed_len(bank_bits), "bank")?.to_vec())
                .map_err(|e| malformed(idx, e))?;
            let k = shape.k();
            let mut selectors = Vec::with_capacity(c_out);
            for t in 0..c_out {
                let (rows, values) = if scaling {
                    let mut rows = Vec::with_capacity(k);
                    let mut values = Vec::with_capacity(k);
                    for _ in 0..k {
                        rows.push(r.u16("selector row")?);
                        values.push(r.f32s(1, "selector value")?[0]);
                    }
                    (rows, values)
                } else {
                    let map = r.take(bits::packed_len(m * k), "selector bitmap")?;
                    let mut rows = Vec::with_capacity(k);
                    for i in 0..k {
                        let set: Vec<usize> = (0..m).filter(|&j| bits::get(map, i * m + j)).collect();
                        if set.len() != 1 {
                            return Err(Error::CorruptSelector(format!(
                                "filter {t} column {i} has {} nonzeros",
                                set.len()
                            )));
                        }
                        rows.push(set[0]);
                    }
                    (rows, vec![1.0; k])
                };
                selectors.push(SelectorMatrix::new(t, m, rows, values)?);
            }
            Layer::Slbf(SlbfConv::from_parts(config, bank, selectors)?)
        }
        TAG_CONV => {
            let [c_in, c_out, d, stride, padding, flags] = r.fields::<6>("conv fields")?;
            let geometry = ConvGeometry::new(c_in, c_out, d).with_stride(stride).with_padding(padding);
            let weights = r.f32s(c_in * c_out * d * d, "conv weights")?;
            let bias = if flags & FLAG_BIAS as usize != 0 {
                Some(r.f32s(c_out, "conv bias")?)
            } else {
                None
            };
            Layer::Conv(FullConv::from_parts(geometry, weights, bias).map_err(|e| malformed(idx, e))?)
        }
        TAG_BN => {
            let [channels, flags] = r.fields::<2>("batch norm fields")?;
            let affine = flags & FLAG_AFFINE as usize != 0;
            let mut bn = BatchNorm::new(channels, affine);
            bn.running_mean = r.f32s(channels, "running mean")?;
            bn.running_var = r.f32s(channels, "running variance")?;
            if let (Some(g), Some(b)) = (&mut bn.gamma, &mut bn.beta) {
                *g = crate::nn::Param::new(r.f32s(channels, "gamma")?);
                *b = crate::nn::Param::new(r.f32s(channels, "beta")?);
            }
            Layer::BatchNorm(bn)
        }
        TAG_RELU => Layer::Relu(Relu::default()),
        TAG_POOL => {
            let [kernel, stride] = r.fields::<2>("pool fields")?;
            Layer::MaxPool(MaxPool::new(kernel, stride).map_err(|e| malformed(idx, e))?)
        }
        TAG_FLATTEN => Layer::Flatten(Flatten::default()),
        TAG_LINEAR => {
            let [inputs, outputs, _flags] = r.fields::<3>("linear fields")?;
            let w = r.f32s(inputs * outputs, "linear weights")?;
            let b = r.f32s(outputs, "linear bias")?;
            Layer::Linear(Linear::from_parts(inputs, outputs, w, b).map_err(|e| malformed(idx, e))?)
        }
        other => return Err(Error::Malformed(format!("layer {idx}: unknown kind tag {other}"))),
    };
    Ok(layer)
}

/// Human-readable per-layer summary: realized `s`, `m`, `k`, payload sizes
/// and, per SLBF layer, how often each bank row is selected.
pub fn report(net: &Network) -> String {
    use std::fmt::Write as _;
    let [c, h, w] = net.input();
    let mut out = format!(
        "model: {} layers, input {c}x{h}x{w}, {} bytes\n",
        net.layers().len(),
        file_size(net)
    );
    for (i, layer) in net.layers().iter().enumerate() {
        let _ = write!(out, "layer {i} {} record_bytes={}", layer.kind(), record_size(layer));
        match layer {
            Layer::Slbf(l) => {
                let s = l.shape();
                let g = &s.geometry;
                let mut hist = vec![0usize; s.m];
                for sel in l.selectors() {
                    for &row in sel.rows() {
                        hist[row] += 1;
                    }
                }
                let _ = writeln!(
                    out,
                    " c_in={} c_out={} d={} s={} m={} k={} scaling={}",
                    g.in_channels,
                    g.out_channels,
                    g.kernel,
                    s.s,
                    s.m,
                    s.k(),
                    l.config().scaling
                );
                let counts: Vec<String> = hist.iter().enumerate().map(|(j, n)| format!("{j}:{n}")).collect();
                let _ = writeln!(out, "  selector rows {} total={}", counts.join(" "), hist.iter().sum::<usize>());
            }
            Layer::Conv(l) => {
                let g = &l.geometry;
                let _ = writeln!(out, " c_in={} c_out={} d={}", g.in_channels, g.out_channels, g.kernel);
            }
            Layer::Linear(l) => {
                let _ = writeln!(out, " inputs={} outputs={}", l.inputs, l.outputs);
            }
            Layer::BatchNorm(l) => {
                let _ = writeln!(out, " channels={} affine={}", l.channels, l.affine());
            }
            _ => out.push('\n'),
        }
    }
    out
}

pub fn save_file(net: &Network, path: &Path) -> Result<()> {
    let bytes = save(net)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_file(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_bit_model(scaling: bool) -> Network {
        let g = ConvGeometry::new(1, 1, 1);
        let cfg = SlbfLayerConfig::new(g, Fraction::ONE, Fraction::ONE, scaling);
        let bank = BinaryFilterBank::from_values(1, 1, 1, &[1.0]).unwrap();
        let sel = SelectorMatrix::new(0, 1, vec![0], vec![1.0]).unwrap();
        let layer = SlbfConv::from_parts(cfg, bank, vec![sel]).unwrap();
        Network::new([1, 1, 1], vec![Layer::Slbf(layer)]).unwrap()
    }

    #[test]
    fn presets_parse() {
        for (name, text) in PRESETS {
            let cfg = parse_config(text).unwrap();
            assert_eq!(cfg.name.as_deref(), Some(name));
        }
    }

    #[test]
    fn single_plus_one_filter_is_one_byte() {
        let bytes = save(&one_bit_model(false)).unwrap();
        // header, tag, 8 fields, bank byte, bitmap byte, crc
        assert_eq!(bytes.len(), HEADER_BYTES + 1 + 16 + 1 + 1 + CRC_BYTES);
        assert_eq!(bytes[HEADER_BYTES + 17], 0b1000_0000);
        assert_eq!(bytes.len(), file_size(&one_bit_model(false)));
    }

    #[test]
    fn round_trip_bytes() {
        for scaling in [false, true] {
            let bytes = save(&one_bit_model(scaling)).unwrap();
            assert_eq!(save(&load(&bytes).unwrap()).unwrap(), bytes);
        }
    }

    #[test]
    fn distinct_load_errors() {
        let bytes = save(&one_bit_model(true)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load(&bad), Err(Error::BadMagic { .. })));
        let mut flipped = bytes.clone();
        flipped[HEADER_BYTES + 17] ^= 1;
        assert!(matches!(load(&flipped), Err(Error::Crc { .. })));
        assert!(matches!(load(&bytes[..10]), Err(Error::Truncated(_))));
    }

    #[test]
    fn unsupported_version_after_valid_crc() {
        let mut bytes = save(&one_bit_model(true)).unwrap();
        bytes[4] = 9;
        let n = bytes.len() - CRC_BYTES;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(load(&bytes), Err(Error::UnsupportedVersion(9))));
    }
}
