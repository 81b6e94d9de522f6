//! Memory and FLOP accounting for standard and SLBF-compressed networks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fraction::Fraction;
use crate::ini;
use crate::nn::{LayerSpec, NetworkSpec};

/// Bits per full-precision value.
pub const FLOAT_BITS: u64 = 32;

/// How a conv layer is stored in the compressed network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Shared binary bank plus selectors.
    Slbf,
    /// Left at full precision.
    Full,
    /// One bit per weight plus one full-precision scale per filter.
    Binary,
}

impl std::str::FromStr for ConvMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "slbf" => Ok(ConvMode::Slbf),
            "full" => Ok(ConvMode::Full),
            "binary" => Ok(ConvMode::Binary),
            other => Err(format!("unknown mode {other:?} (expected slbf, full or binary)")),
        }
    }
}

impl std::fmt::Display for ConvMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConvMode::Slbf => "slbf",
            ConvMode::Full => "full",
            ConvMode::Binary => "binary",
        })
    }
}

/// Cost model for selector storage in scaling mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SelectorCost {
    /// Index, value and one more full-precision word per nonzero (96 bits).
    #[default]
    Triplet,
    /// `u16` row index plus `f32` value per nonzero (48 bits), as written by
    /// the model file.
    Packed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvDesc {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub d: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub mode: ConvMode,
    /// Per-layer `(f1, f2)`; falls back to the report default when absent.
    pub fractions: Option<(Fraction, Fraction)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FcDesc {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub convs: Vec<ConvDesc>,
    pub fcs: Vec<FcDesc>,
    /// Count affine batch-norm parameters (`2 c_out` floats per conv) on both
    /// sides of the ratio.
    pub count_batchnorm: bool,
}

const BUILTIN: [(&str, &str); 3] = [
    ("lenet5", include_str!("../archs/lenet5.arch")),
    ("vgg16", include_str!("../archs/vgg16.arch")),
    ("resnet18", include_str!("../archs/resnet18.arch")),
];

impl ArchSpec {
    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::parse(text).expect("built-in descriptor parses"))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses a descriptor: one `[arch]` section (`name`, optional
    /// `count_batchnorm`), then `[conv]` sections (`name`, `c_in`, `c_out`,
    /// `d`, `out_h`, `out_w`, optional `mode`, `f1`, `f2`) and `[fc]` sections
    /// (`name`, `inputs`, `outputs`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = None;
        let mut count_batchnorm = false;
        let mut convs = Vec::new();
        let mut fcs = Vec::new();
        for sec in ini::parse(text)? {
            match sec.name.as_str() {
                "arch" => {
                    sec.only(&["name", "count_batchnorm"])?;
                    name = Some(sec.require("name")?.value.clone());
                    count_batchnorm = sec.parsed_or("count_batchnorm", false)?;
                }
                "conv" => {
                    sec.only(&["name", "c_in", "c_out", "d", "out_h", "out_w", "mode", "f1", "f2"])?;
                    let fractions = match (sec.parsed::<Fraction>("f1")?, sec.parsed::<Fraction>("f2")?) {
                        (Some(a), Some(b)) => Some((a, b)),
                        (None, None) => None,
                        (Some(_), None) => return Err(Error::config("f2", "f1 given without f2")),
                        (None, Some(_)) => return Err(Error::config("f1", "f2 given without f1")),
                    };
                    let conv = ConvDesc {
                        name: sec.require("name")?.value.clone(),
                        c_in: sec.required("c_in")?,
                        c_out: sec.required("c_out")?,
                        d: sec.required("d")?,
                        out_h: sec.required("out_h")?,
                        out_w: sec.required("out_w")?,
                        mode: sec.parsed_or("mode", ConvMode::Slbf)?,
                        fractions,
                    };
                    for (key, v) in [("c_in", conv.c_in), ("c_out", conv.c_out), ("d", conv.d), ("out_h", conv.out_h), ("out_w", conv.out_w)] {
                        if v == 0 {
                            return Err(Error::config(key, format!("must be positive in layer {}", conv.name)));
                        }
                    }
                    convs.push(conv);
                }
                "fc" => {
                    sec.only(&["name", "inputs", "outputs"])?;
                    fcs.push(FcDesc {
                        name: sec.require("name")?.value.clone(),
                        inputs: sec.required("inputs")?,
                        outputs: sec.required("outputs")?,
                    });
                }
                other => return Err(Error::config(other, format!("unknown section at line {}", sec.line))),
            }
        }
        Ok(Self {
            name: name.ok_or_else(|| Error::config("name", "descriptor has no [arch] name"))?,
            convs,
            fcs,
            count_batchnorm,
        })
    }
}

/// Descriptor of the conv and fc layers of a network spec, with each SLBF
/// layer's own fractions. Batch norm is not counted.
pub fn arch_of(name: &str, spec: &NetworkSpec) -> Result<ArchSpec> {
    let shapes = spec.shapes()?;
    let mut convs = Vec::new();
    let mut fcs = Vec::new();
    for (i, (layer, out)) in spec.layers.iter().zip(&shapes).enumerate() {
        match layer {
            LayerSpec::SlbfConv(cfg) => convs.push(ConvDesc {
                name: format!("layer{i}"),
                c_in: cfg.geometry.in_channels,
                c_out: cfg.geometry.out_channels,
                d: cfg.geometry.kernel,
                out_h: out[1],
                out_w: out[2],
                mode: ConvMode::Slbf,
                fractions: Some((cfg.f1, cfg.f2)),
            }),
            LayerSpec::Conv { geometry, .. } => convs.push(ConvDesc {
                name: format!("layer{i}"),
                c_in: geometry.in_channels,
                c_out: geometry.out_channels,
                d: geometry.kernel,
                out_h: out[1],
                out_w: out[2],
                mode: ConvMode::Full,
                fractions: None,
            }),
            LayerSpec::Linear { inputs, outputs } => fcs.push(FcDesc {
                name: format!("layer{i}"),
                inputs: *inputs,
                outputs: *outputs,
            }),
            _ => {}
        }
    }
    Ok(ArchSpec {
        name: name.to_string(),
        convs,
        fcs,
        count_batchnorm: false,
    })
}

/// `(s, m, k)` for a layer, or a config error naming the fraction at fault.
pub fn slbf_sizes(c_in: usize, c_out: usize, f1: Fraction, f2: Fraction) -> Result<(usize, usize, usize)> {
    let s = f1
        .scale(c_in)
        .filter(|&s| s > 0)
        .ok_or_else(|| Error::config("f1", format!("c_in * f1 = {c_in} * {f1} is not a positive integer")))?;
    if c_in % s != 0 {
        return Err(Error::config("f1", format!("s = {s} does not divide c_in = {c_in}")));
    }
    let m = f2
        .scale(c_out)
        .filter(|&m| m > 0)
        .ok_or_else(|| Error::config("f2", format!("c_out * f2 = {c_out} * {f2} is not a positive integer")))?;
    Ok((s, m, c_in / s))
}

fn selector_bits(k: usize, m: usize, c_out: usize, scaling: bool, cost: SelectorCost) -> u64 {
    let (k, m, c_out) = (k as u64, m as u64, c_out as u64);
    match (scaling, cost) {
        (true, SelectorCost::Triplet) => k * c_out * 3 * FLOAT_BITS,
        (true, SelectorCost::Packed) => k * c_out * (16 + FLOAT_BITS),
        (false, SelectorCost::Triplet) => k * m * c_out,
        (false, SelectorCost::Packed) => (k * m).div_ceil(8) * 8 * c_out,
    }
}

/// `(original_bits, compressed_bits)` of one SLBF layer's weights.
///
/// Original is `d^2 c_in c_out` floats. Compressed is the bank,
/// `d^2 s m` bits, plus the selectors: `k c_out` triplets of floats with
/// scaling, or a `k m c_out`-bit map without.
pub fn layer_memory(layer: &ConvDesc, f1: Fraction, f2: Fraction, scaling: bool, cost: SelectorCost) -> Result<(u64, u64)> {
    let (s, m, k) = slbf_sizes(layer.c_in, layer.c_out, f1, f2)?;
    let d2 = (layer.d * layer.d) as u64;
    let original = d2 * (layer.c_in * layer.c_out) as u64 * FLOAT_BITS;
    let bank = d2 * (s * m) as u64;
    Ok((original, bank + selector_bits(k, m, layer.c_out, scaling, cost)))
}

/// `(flops_standard, flops_slbf)` of one layer.
///
/// Standard is `d^2 c_in h w c_out`. SLBF is `d^2 c_in h w m` for the shared
/// intermediate maps plus `h w k c_out` to combine them.
pub fn layer_flops(layer: &ConvDesc, f1: Fraction, f2: Fraction) -> Result<(u64, u64)> {
    let (_, m, k) = slbf_sizes(layer.c_in, layer.c_out, f1, f2)?;
    let hw = (layer.out_h * layer.out_w) as u64;
    let base = (layer.d * layer.d * layer.c_in) as u64 * hw;
    Ok((base * layer.c_out as u64, base * m as u64 + hw * (k * layer.c_out) as u64))
}

/// Report settings. Per-layer fractions resolve as override, then the
/// descriptor's own, then `default`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportOptions {
    pub default: Option<(Fraction, Fraction)>,
    pub overrides: BTreeMap<String, (Fraction, Fraction)>,
    pub scaling: bool,
    pub selector_cost: SelectorCost,
}

impl ReportOptions {
    pub fn uniform(f1: Fraction, f2: Fraction, scaling: bool) -> Self {
        Self {
            default: Some((f1, f2)),
            scaling,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub mode: ConvMode,
    /// `(s, m, k)` for SLBF layers.
    pub sizes: Option<(usize, usize, usize)>,
    /// Full-precision weight bits.
    pub weight_bits: u64,
    /// Stored weight bits: the bank for SLBF layers, else the layer's own
    /// weights (and binary scales).
    pub bank_bits: u64,
    pub selector_bits: u64,
    /// Batch-norm bits, counted on both sides when enabled.
    pub norm_bits: u64,
    pub flops_std: u64,
    pub flops_slbf: u64,
}

impl LayerReport {
    pub fn orig_bits(&self) -> u64 {
        self.weight_bits + self.norm_bits
    }
    pub fn comp_bits(&self) -> u64 {
        self.bank_bits + self.selector_bits + self.norm_bits
    }
    pub fn ratio(&self) -> f64 {
        self.orig_bits() as f64 / self.comp_bits() as f64
    }
    pub fn speedup(&self) -> f64 {
        self.flops_std as f64 / self.flops_slbf as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionReport {
    pub arch: String,
    pub layers: Vec<LayerReport>,
    pub orig_bits: u64,
    pub comp_bits: u64,
    pub flops_std: u64,
    pub flops_slbf: u64,
    /// Full-precision fc weight and bias bits, never compressed and not part
    /// of the ratio.
    pub fc_bits: u64,
}

impl CompressionReport {
    pub fn ratio(&self) -> f64 {
        self.orig_bits as f64 / self.comp_bits as f64
    }

    pub fn speedup(&self) -> f64 {
        self.flops_std as f64 / self.flops_slbf as f64
    }

    /// Stored weight bits (bank + selectors) of SLBF layers only.
    pub fn slbf_bits(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.mode == ConvMode::Slbf)
            .map(|l| l.bank_bits + l.selector_bits)
            .sum()
    }

    pub const RECORD_HEADER: &'static str = "layer,orig_bits,comp_bits,flops_std,flops_slbf,ratio,speedup";

    /// CSV with one row per layer and a final `total` row.
    pub fn records(&self) -> String {
        let mut out = format!("{}\n", Self::RECORD_HEADER);
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.4},{:.4}",
                l.name,
                l.orig_bits(),
                l.comp_bits(),
                l.flops_std,
                l.flops_slbf,
                l.ratio(),
                l.speedup()
            );
        }
        let _ = writeln!(
            out,
            "total,{},{},{},{},{:.4},{:.4}",
            self.orig_bits,
            self.comp_bits,
            self.flops_std,
            self.flops_slbf,
            self.ratio(),
            self.speedup()
        );
        out
    }

    /// Aligned text table.
    pub fn table(&self) -> String {
        let mut rows = vec![[
            "layer", "mode", "s", "m", "k", "orig_bits", "comp_bits", "flops_std", "flops_slbf", "ratio", "speedup",
        ]
        .map(String::from)];
        for l in &self.layers {
            let (s, m, k) = l
                .sizes
                .map(|(s, m, k)| (s.to_string(), m.to_string(), k.to_string()))
                .unwrap_or_else(|| ("-".into(), "-".into(), "-".into()));
            rows.push([
                l.name.clone(),
                l.mode.to_string(),
                s,
                m,
                k,
                l.orig_bits().to_string(),
                l.comp_bits().to_string(),
                l.flops_std.to_string(),
                l.flops_slbf.to_string(),
                format!("{:.2}", l.ratio()),
                format!("{:.2}", l.speedup()),
            ]);
        }
        rows.push([
            "total".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            self.orig_bits.to_string(),
            self.comp_bits.to_string(),
            self.flops_std.to_string(),
            self.flops_slbf.to_string(),
            format!("{:.2}", self.ratio()),
            format!("{:.2}", self.speedup()),
        ]);
        let widths: Vec<usize> = (0..11).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = format!("arch: {}\n", self.arch);
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| if c < 2 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        let _ = writeln!(out, "fc bits (uncompressed, excluded): {}", self.fc_bits);
        out
    }
}

pub fn network_report(arch: &ArchSpec, opts: &ReportOptions) -> Result<CompressionReport> {
    let mut layers = Vec::with_capacity(arch.convs.len());
    for conv in &arch.convs {
        let d2 = (conv.d * conv.d) as u64;
        let weights = d2 * (conv.c_in * conv.c_out) as u64;
        let norm_bits = if arch.count_batchnorm {
            2 * conv.c_out as u64 * FLOAT_BITS
        } else {
            0
        };
        let std_flops = weights * (conv.out_h * conv.out_w) as u64;
        let report = match conv.mode {
            ConvMode::Slbf => {
                let (f1, f2) = opts
                    .overrides
                    .get(&conv.name)
                    .copied()
                    .or(conv.fractions)
                    .or(opts.default)
                    .ok_or_else(|| Error::config("f1", format!("no (f1, f2) for layer {}", conv.name)))?;
                let sizes = slbf_sizes(conv.c_in, conv.c_out, f1, f2)?;
                let (orig, comp) = layer_memory(conv, f1, f2, opts.scaling, opts.selector_cost)?;
                let (fs, fl) = layer_flops(conv, f1, f2)?;
                let bank = d2 * (sizes.0 * sizes.1) as u64;
                LayerReport {
                    name: conv.name.clone(),
                    mode: conv.mode,
                    sizes: Some(sizes),
                    weight_bits: orig,
                    bank_bits: bank,
                    selector_bits: comp - bank,
                    norm_bits,
                    flops_std: fs,
                    flops_slbf: fl,
                }
            }
            ConvMode::Full | ConvMode::Binary => LayerReport {
                name: conv.name.clone(),
                mode: conv.mode,
                sizes: None,
                weight_bits: weights * FLOAT_BITS,
                bank_bits: if conv.mode == ConvMode::Full {
                    weights * FLOAT_BITS
                } else {
                    weights + conv.c_out as u64 * FLOAT_BITS
                },
                selector_bits: 0,
                norm_bits,
                flops_std: std_flops,
                flops_slbf: std_flops,
            },
        };
        layers.push(report);
    }
    if layers.is_empty() {
        return Err(Error::config("conv", format!("architecture {} has no conv layers", arch.name)));
    }
    let fc_bits = arch
        .fcs
        .iter()
        .map(|f| ((f.inputs + 1) * f.outputs) as u64 * FLOAT_BITS)
        .sum();
    Ok(CompressionReport {
        arch: arch.name.clone(),
        orig_bits: layers.iter().map(LayerReport::orig_bits).sum(),
        comp_bits: layers.iter().map(LayerReport::comp_bits).sum(),
        flops_std: layers.iter().map(|l| l.flops_std).sum(),
        flops_slbf: layers.iter().map(|l| l.flops_slbf).sum(),
        fc_bits,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frac(s: &str) -> Fraction {
        s.parse().unwrap()
    }

    fn conv(c_in: usize, c_out: usize, d: usize, hw: usize) -> ConvDesc {
        ConvDesc {
            name: "c".into(),
            c_in,
            c_out,
            d,
            out_h: hw,
            out_w: hw,
            mode: ConvMode::Slbf,
            fractions: None,
        }
    }

    #[test]
    fn memory_example() {
        let (o, c) = layer_memory(&conv(16, 16, 3, 8), Fraction::ONE, Fraction::ONE, true, SelectorCost::Triplet).unwrap();
        assert_eq!((o, c), (73728, 3840));
    }

    #[test]
    fn bitmap_binary_limit() {
        let l = conv(16, 16, 3, 8);
        let (o, c) = layer_memory(&l, Fraction::ONE, Fraction::ONE, false, SelectorCost::Triplet).unwrap();
        let bank = c - 16 * 16;
        assert_eq!(bank, o / 32);
    }

    #[test]
    fn flops_example() {
        let (s, f) = layer_flops(&conv(16, 32, 3, 8), Fraction::ONE, frac("1/4")).unwrap();
        assert_eq!((s, f), (294912, 73728 + 2048));
    }

    #[test]
    fn non_integral_sizes_name_the_fraction() {
        let err = layer_memory(&conv(6, 6, 3, 8), Fraction::ONE, frac("1/4"), true, SelectorCost::Triplet).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "f2"));
        let err = layer_flops(&conv(3, 8, 3, 8), frac("1/2"), Fraction::ONE).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "f1"));
    }

    #[test]
    fn builtins_parse() {
        for name in ArchSpec::builtin_names() {
            assert!(ArchSpec::builtin(name).is_some());
        }
        assert_eq!(ArchSpec::builtin("vgg16").unwrap().convs.len(), 13);
        assert!(ArchSpec::builtin("alexnet").is_none());
    }

    #[test]
    fn missing_fractions_is_config_error() {
        let arch = ArchSpec {
            name: "one".into(),
            convs: vec![conv(4, 4, 3, 4)],
            fcs: vec![],
            count_batchnorm: false,
        };
        assert!(matches!(
            network_report(&arch, &ReportOptions::default()),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn descriptor_rejects_unknown_keys() {
        let text = "[arch]\nname = x\n[conv]\nname = a\nc_in = 1\nc_out = 1\nd = 1\nout_h = 1\nout_w = 1\nstride = 2\n";
        let err = ArchSpec::parse(text).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "stride"));
    }
}
