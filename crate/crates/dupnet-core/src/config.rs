//! The architecture config language: INI-style sections describing the
//! input, the conv/maxpool stack, and the detection head, validated into a
//! [`NetworkSpec`] with the full shape chain resolved.

use crate::layers::Anchor;
use crate::quant::{QuantSpec, WeightScaleMode, DEFAULT_CLIP_ALPHA};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: syntax error: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("no [net] section")]
    NoNetSection,
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key '{key}' in [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: bad value '{value}' for key '{key}'")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("[{section}] is missing required key '{key}'")]
    MissingKey { section: String, key: String },
    #[error("{from} -> {to}: {detail}")]
    ChainMismatch {
        from: String,
        to: String,
        detail: String,
    },
    #[error("{layer}: dup_w={d_w} does not divide c_in={c_in}")]
    DupwIndivisible {
        layer: String,
        d_w: usize,
        c_in: usize,
    },
    #[error("{layer}: dup_w and dup_x cannot both exceed 1 on the same layer")]
    DupConflict { layer: String },
    #[error("{layer}: {detail}")]
    BadLayer { layer: String, detail: String },
    #[error("network must end with a single [detect] section")]
    DetectNotLast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Maxpool,
    Detect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Leaky,
    Linear,
    /// The downstream layer's half-wave quantizer acts as the nonlinearity.
    Quant,
}

impl Activation {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "leaky" => Some(Activation::Leaky),
            "linear" => Some(Activation::Linear),
            "quant" => Some(Activation::Quant),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Leaky => "leaky",
            Activation::Linear => "linear",
            Activation::Quant => "quant",
        }
    }
}

/// One layer of the stack with its resolved geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub quant: QuantSpec,
    pub d_w: usize,
    pub d_x: usize,
    pub has_bn: bool,
    pub activation: Activation,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl LayerSpec {
    #[inline]
    pub fn is_conv(&self) -> bool {
        self.kind == LayerKind::Conv
    }

    /// Input channels of the stored weight tensor: duplication widens by
    /// d_x, templates shrink by d_w.
    #[inline]
    pub fn weight_c_in(&self) -> usize {
        self.c_in * self.d_x / self.d_w
    }
}

/// A validated network description: input dims, ordered layers, anchors and
/// class count, with consecutive shapes checked at parse time.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub layers: Vec<LayerSpec>,
    pub anchors: Vec<Anchor>,
    pub classes: usize,
}

impl NetworkSpec {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        parse_netcfg(text)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_conv())
    }

    /// Grid size the detection head operates on.
    pub fn grid(&self) -> (usize, usize) {
        let detect = self.layers.last().expect("validated spec has layers");
        (detect.in_h, detect.in_w)
    }

    pub fn head_channels(&self) -> usize {
        self.anchors.len() * (5 + self.classes)
    }

    pub fn to_cfg(&self) -> String {
        serialize_netcfg(self)
    }
}

struct RawSection {
    name: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
}

fn split_sections(text: &str) -> Result<Vec<RawSection>, ConfigError> {
    let mut sections: Vec<RawSection> = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(stripped) = line.strip_prefix('[') {
            let name = stripped.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                detail: "unterminated section header".into(),
            })?;
            sections.push(RawSection {
                name: name.trim().to_string(),
                line: line_no,
                entries: Vec::new(),
            });
        } else {
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                detail: format!("expected key=value, got '{line}'"),
            })?;
            let section = sections.last_mut().ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                detail: "key=value before any section header".into(),
            })?;
            section
                .entries
                .push((key.trim().to_string(), value.trim().to_string(), line_no));
        }
    }
    Ok(sections)
}

struct SectionReader<'a> {
    section: &'a RawSection,
    allowed: &'a [&'a str],
}

impl<'a> SectionReader<'a> {
    fn new(section: &'a RawSection, allowed: &'a [&'a str]) -> Result<Self, ConfigError> {
        for (key, _, line) in &section.entries {
            if !allowed.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey {
                    line: *line,
                    section: section.name.clone(),
                    key: key.clone(),
                });
            }
        }
        Ok(SectionReader { section, allowed })
    }

    fn get(&self, key: &str) -> Option<(&str, usize)> {
        debug_assert!(self.allowed.contains(&key));
        self.section
            .entries
            .iter()
            .rev()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, line)| (v.as_str(), *line))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| ConfigError::BadValue {
                line,
                key: key.into(),
                value: v.into(),
            }),
        }
    }

    fn require_usize(&self, key: &str) -> Result<usize, ConfigError> {
        match self.get(key) {
            None => Err(ConfigError::MissingKey {
                section: self.section.name.clone(),
                key: key.into(),
            }),
            Some((v, line)) => v.parse().map_err(|_| ConfigError::BadValue {
                line,
                key: key.into(),
                value: v.into(),
            }),
        }
    }
}

fn parse_netcfg(text: &str) -> Result<NetworkSpec, ConfigError> {
    let sections = split_sections(text)?;
    let net = match sections.first() {
        Some(s) if s.name == "net" => s,
        _ => return Err(ConfigError::NoNetSection),
    };
    let net_reader = SectionReader::new(net, &["channels", "height", "width"])?;
    let in_c = net_reader.require_usize("channels")?;
    let in_h = net_reader.require_usize("height")?;
    let in_w = net_reader.require_usize("width")?;
    if in_c == 0 || in_h == 0 || in_w == 0 {
        return Err(ConfigError::BadLayer {
            layer: "net".into(),
            detail: "input dims must be positive".into(),
        });
    }

    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut anchors: Vec<Anchor> = Vec::new();
    let mut classes = 1usize;
    let mut chain_c = in_c;
    let mut chain_h = in_h;
    let mut chain_w = in_w;
    let mut conv_count = 0usize;
    let mut pool_count = 0usize;
    let mut saw_detect = false;

    for section in sections.iter().skip(1) {
        if saw_detect {
            return Err(ConfigError::DetectNotLast);
        }
        let prev_name = layers
            .last()
            .map(|l| l.name.clone())
            .unwrap_or_else(|| "net".to_string());
        match section.name.as_str() {
            "conv" => {
                conv_count += 1;
                let name = format!("Conv{conv_count}");
                let r = SectionReader::new(
                    section,
                    &[
                        "filters", "size", "stride", "pad", "a_bits", "w_bits", "dup_w", "dup_x",
                        "bn", "activation",
                    ],
                )?;
                let filters = r.require_usize("filters")?;
                let size = r.require_usize("size")?;
                let stride = r.usize_or("stride", 1)?;
                let pad = r.usize_or("pad", size / 2)?;
                let a_bits = r.usize_or("a_bits", 32)? as u8;
                let w_bits = r.usize_or("w_bits", 32)? as u8;
                let d_w = r.usize_or("dup_w", 1)?;
                let d_x = r.usize_or("dup_x", 1)?;
                let bn = r.usize_or("bn", 1)?;
                let activation = match r.get("activation") {
                    None => Activation::Leaky,
                    Some((v, line)) => Activation::parse(v).ok_or_else(|| ConfigError::BadValue {
                        line,
                        key: "activation".into(),
                        value: v.into(),
                    })?,
                };
                let mut quant =
                    QuantSpec::new(a_bits, w_bits, DEFAULT_CLIP_ALPHA).map_err(|e| {
                        ConfigError::BadLayer {
                            layer: name.clone(),
                            detail: e.to_string(),
                        }
                    })?;
                if !quant.weights_quantized() {
                    quant.weight_scale_mode = WeightScaleMode::None;
                }
                if filters == 0 || size == 0 || stride == 0 {
                    return Err(ConfigError::BadLayer {
                        layer: name,
                        detail: "filters, size and stride must be positive".into(),
                    });
                }
                if d_w < 1 || d_x < 1 {
                    return Err(ConfigError::BadLayer {
                        layer: name,
                        detail: "duplication factors must be >= 1".into(),
                    });
                }
                if d_w > 1 && d_x > 1 {
                    return Err(ConfigError::DupConflict { layer: name });
                }
                if chain_c % d_w != 0 {
                    return Err(ConfigError::DupwIndivisible {
                        layer: name,
                        d_w,
                        c_in: chain_c,
                    });
                }
                if chain_h + 2 * pad < size || chain_w + 2 * pad < size {
                    return Err(ConfigError::ChainMismatch {
                        from: prev_name,
                        to: name,
                        detail: format!(
                            "kernel {size} exceeds padded input {}x{}",
                            chain_h + 2 * pad,
                            chain_w + 2 * pad
                        ),
                    });
                }
                let out_h = crate::layers::conv_out_dim(chain_h, size, stride, pad);
                let out_w = crate::layers::conv_out_dim(chain_w, size, stride, pad);
                layers.push(LayerSpec {
                    kind: LayerKind::Conv,
                    name,
                    c_in: chain_c,
                    c_out: filters,
                    k: size,
                    stride,
                    pad,
                    quant,
                    d_w,
                    d_x,
                    has_bn: bn != 0,
                    activation,
                    in_h: chain_h,
                    in_w: chain_w,
                    out_h,
                    out_w,
                });
                chain_c = filters;
                chain_h = out_h;
                chain_w = out_w;
            }
            "maxpool" => {
                pool_count += 1;
                let name = format!("Maxpool{pool_count}");
                let r = SectionReader::new(section, &["size", "stride"])?;
                let size = r.usize_or("size", 2)?;
                let stride = r.usize_or("stride", 2)?;
                if size == 0 || stride == 0 {
                    return Err(ConfigError::BadLayer {
                        layer: name,
                        detail: "size and stride must be positive".into(),
                    });
                }
                if chain_h < size || chain_w < size {
                    return Err(ConfigError::ChainMismatch {
                        from: prev_name,
                        to: name,
                        detail: format!("pool window {size} exceeds input {chain_h}x{chain_w}"),
                    });
                }
                let (out_h, out_w) = if stride == 1 {
                    (chain_h, chain_w)
                } else {
                    (
                        (chain_h - size) / stride + 1,
                        (chain_w - size) / stride + 1,
                    )
                };
                layers.push(LayerSpec {
                    kind: LayerKind::Maxpool,
                    name,
                    c_in: chain_c,
                    c_out: chain_c,
                    k: size,
                    stride,
                    pad: 0,
                    quant: QuantSpec::full_precision(),
                    d_w: 1,
                    d_x: 1,
                    has_bn: false,
                    activation: Activation::Linear,
                    in_h: chain_h,
                    in_w: chain_w,
                    out_h,
                    out_w,
                });
                chain_h = out_h;
                chain_w = out_w;
            }
            "detect" => {
                saw_detect = true;
                let r = SectionReader::new(section, &["anchors", "classes"])?;
                classes = r.usize_or("classes", 1)?;
                let (anchor_text, line) = r.get("anchors").ok_or(ConfigError::MissingKey {
                    section: "detect".into(),
                    key: "anchors".into(),
                })?;
                let values: Result<Vec<f64>, _> = anchor_text
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect();
                let values = values.map_err(|_| ConfigError::BadValue {
                    line,
                    key: "anchors".into(),
                    value: anchor_text.into(),
                })?;
                if values.is_empty() || values.len() % 2 != 0 || values.iter().any(|&v| v <= 0.0) {
                    return Err(ConfigError::BadValue {
                        line,
                        key: "anchors".into(),
                        value: anchor_text.into(),
                    });
                }
                anchors = values
                    .chunks(2)
                    .map(|pair| Anchor {
                        pw: pair[0],
                        ph: pair[1],
                    })
                    .collect();
                if classes == 0 {
                    return Err(ConfigError::BadLayer {
                        layer: "Detect".into(),
                        detail: "classes must be >= 1".into(),
                    });
                }
                let expected = anchors.len() * (5 + classes);
                if chain_c != expected {
                    return Err(ConfigError::ChainMismatch {
                        from: prev_name,
                        to: "Detect".into(),
                        detail: format!(
                            "head needs {} channels for {} anchors and {} classes, got {}",
                            expected,
                            anchors.len(),
                            classes,
                            chain_c
                        ),
                    });
                }
                layers.push(LayerSpec {
                    kind: LayerKind::Detect,
                    name: "Detect".into(),
                    c_in: chain_c,
                    c_out: chain_c,
                    k: 1,
                    stride: 1,
                    pad: 0,
                    quant: QuantSpec::full_precision(),
                    d_w: 1,
                    d_x: 1,
                    has_bn: false,
                    activation: Activation::Linear,
                    in_h: chain_h,
                    in_w: chain_w,
                    out_h: chain_h,
                    out_w: chain_w,
                });
            }
            "net" => {
                return Err(ConfigError::UnknownSection {
                    line: section.line,
                    name: "net (duplicate)".into(),
                })
            }
            other => {
                return Err(ConfigError::UnknownSection {
                    line: section.line,
                    name: other.to_string(),
                })
            }
        }
    }

    if !saw_detect {
        return Err(ConfigError::DetectNotLast);
    }

    Ok(NetworkSpec {
        in_c,
        in_h,
        in_w,
        layers,
        anchors,
        classes,
    })
}

fn serialize_netcfg(spec: &NetworkSpec) -> String {
    let mut out = String::new();
    out.push_str("[net]\n");
    out.push_str(&format!("channels={}\n", spec.in_c));
    out.push_str(&format!("height={}\n", spec.in_h));
    out.push_str(&format!("width={}\n", spec.in_w));
    for layer in &spec.layers {
        match layer.kind {
            LayerKind::Conv => {
                out.push_str("\n[conv]\n");
                out.push_str(&format!("filters={}\n", layer.c_out));
                out.push_str(&format!("size={}\n", layer.k));
                out.push_str(&format!("stride={}\n", layer.stride));
                out.push_str(&format!("pad={}\n", layer.pad));
                out.push_str(&format!("a_bits={}\n", layer.quant.a_bits));
                out.push_str(&format!("w_bits={}\n", layer.quant.w_bits));
                out.push_str(&format!("dup_w={}\n", layer.d_w));
                out.push_str(&format!("dup_x={}\n", layer.d_x));
                out.push_str(&format!("bn={}\n", u8::from(layer.has_bn)));
                out.push_str(&format!("activation={}\n", layer.activation.as_str()));
            }
            LayerKind::Maxpool => {
                out.push_str("\n[maxpool]\n");
                out.push_str(&format!("size={}\n", layer.k));
                out.push_str(&format!("stride={}\n", layer.stride));
            }
            LayerKind::Detect => {
                out.push_str("\n[detect]\n");
                let anchors = spec
                    .anchors
                    .iter()
                    .map(|a| format!("{},{}", a.pw, a.ph))
                    .collect::<Vec<_>>()
                    .join(", ");
                out.push_str(&format!("anchors={anchors}\n"));
                out.push_str(&format!("classes={}\n", spec.classes));
            }
        }
    }
    out
}
