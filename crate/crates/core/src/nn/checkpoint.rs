//! Model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NPKT" | u32 format version | u32 header byte length | UTF-8 header | f32 blobs
//! ```
//!
//! The header is line-oriented text describing the input shape, class count,
//! every node (kind, operands, tensor shapes, hyperparameters, prunable flag)
//! and every site (node, channels, BatchNorm, kind, channel mask). The blobs
//! follow in node order; within a node, parameters come first, then BatchNorm
//! running statistics. A float32 model round-trips bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::layer::{Layer, LayerKind, LayerNode, Source};
use super::model::{Model, Site, SiteKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"NPKT";
pub const FORMAT_VERSION: u32 = 1;

fn src_text(s: &Source) -> String {
    match s {
        Source::Input => "input".into(),
        Source::Node(i) => i.to_string(),
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn header<T: Scalar>(model: &Model<T>) -> String {
    let mut h = String::new();
    h.push_str(&format!("input {}\n", shape_text(model.input_shape())));
    h.push_str(&format!("classes {}\n", model.num_classes()));
    for (i, node) in model.nodes().iter().enumerate() {
        let ins: Vec<String> = node.inputs.iter().map(src_text).collect();
        let mut line = format!(
            "node {i} {} in={} prunable={}",
            node.layer.kind().name(),
            ins.join(","),
            node.prunable
        );
        match &node.layer {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => line.push_str(&format!(
                " weight={} bias={} stride={stride} padding={padding}",
                shape_text(weight.shape()),
                bias.is_some()
            )),
            Layer::Linear { weight, bias } => line.push_str(&format!(
                " weight={} bias={}",
                shape_text(weight.shape()),
                bias.is_some()
            )),
            Layer::BatchNorm {
                gamma,
                eps,
                momentum,
                ..
            } => line.push_str(&format!(
                " channels={} eps={} momentum={}",
                gamma.len(),
                eps.as_f32(),
                momentum.as_f32()
            )),
            Layer::AvgPool { kernel } | Layer::MaxPool { kernel } => {
                line.push_str(&format!(" kernel={kernel}"))
            }
            Layer::ReLU | Layer::ResidualAdd | Layer::Flatten => {}
        }
        h.push_str(&line);
        h.push('\n');
    }
    for s in model.sites() {
        let keep: String = s.keep.iter().map(|&k| if k { '1' } else { '0' }).collect();
        let bn = s.bn.map_or("none".to_string(), |b| b.to_string());
        let kind = match s.kind {
            SiteKind::Prunable => "prunable",
            SiteKind::Probe => "probe",
        };
        h.push_str(&format!(
            "site {} node={} channels={} bn={bn} kind={kind} keep={keep}\n",
            s.id, s.node, s.channels
        ));
    }
    h
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let header = header(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for node in model.nodes() {
        for t in node.layer.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
    }
    out
}

pub fn save<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

struct Fields<'a> {
    line: &'a str,
    offset: usize,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn parse(line: &'a str, offset: usize, skip: usize) -> Fields<'a> {
        let pairs = line
            .split_whitespace()
            .skip(skip)
            .filter_map(|t| t.split_once('='))
            .collect();
        Fields {
            line,
            offset,
            pairs,
        }
    }

    fn get(&self, key: &str) -> Result<&'a str> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| fmt_err(self.offset, format!("missing `{key}` in `{}`", self.line)))
    }

    fn num<N: std::str::FromStr>(&self, key: &str) -> Result<N> {
        self.get(key)?
            .parse()
            .map_err(|_| fmt_err(self.offset, format!("bad `{key}` in `{}`", self.line)))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        self.num(key)
    }

    fn shape(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)?
            .split('x')
            .map(|d| d.parse().map_err(|_| fmt_err(self.offset, format!("bad shape `{key}`"))))
            .collect()
    }
}

fn parse_shape(text: &str, offset: usize) -> Result<Vec<usize>> {
    text.split('x')
        .map(|d| d.parse().map_err(|_| fmt_err(offset, format!("bad shape `{text}`"))))
        .collect()
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.len() < 12 {
        return Err(fmt_err(bytes.len(), "truncated checkpoint preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt_err(0, "bad magic, expected NPKT"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fmt_err(4, format!("unsupported format version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(fmt_err(bytes.len(), "truncated checkpoint header"));
    }
    let text = std::str::from_utf8(&bytes[12..body]).map_err(|e| fmt_err(12 + e.valid_up_to(), "header is not UTF-8"))?;

    let mut input_shape = None;
    let mut classes = None;
    let mut nodes = Vec::new();
    let mut sites = Vec::new();
    let mut offset = 12;
    for line in text.lines() {
        let mut words = line.split_whitespace();
        match words.next() {
            Some("input") => {
                input_shape = Some(parse_shape(words.next().unwrap_or(""), offset)?);
            }
            Some("classes") => {
                classes = Some(
                    words
                        .next()
                        .and_then(|w| w.parse::<usize>().ok())
                        .ok_or_else(|| fmt_err(offset, "bad class count"))?,
                );
            }
            Some("node") => nodes.push(parse_node::<T>(line, offset)?),
            Some("site") => {
                let f = Fields::parse(line, offset, 2);
                let id: usize = line
                    .split_whitespace()
                    .nth(1)
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| fmt_err(offset, "bad site id"))?;
                let bn = match f.get("bn")? {
                    "none" => None,
                    v => Some(v.parse().map_err(|_| fmt_err(offset, "bad site bn"))?),
                };
                let kind = match f.get("kind")? {
                    "prunable" => SiteKind::Prunable,
                    "probe" => SiteKind::Probe,
                    other => return Err(fmt_err(offset, format!("bad site kind `{other}`"))),
                };
                let keep: Vec<bool> = f.get("keep")?.chars().map(|c| c == '1').collect();
                sites.push(Site {
                    id,
                    node: f.num("node")?,
                    channels: f.num("channels")?,
                    bn,
                    kind,
                    keep,
                });
            }
            Some(other) => return Err(fmt_err(offset, format!("unknown header record `{other}`"))),
            None => {}
        }
        offset += line.len() + 1;
    }
    let input_shape = input_shape.ok_or_else(|| fmt_err(12, "header lacks `input`"))?;
    let classes = classes.ok_or_else(|| fmt_err(12, "header lacks `classes`"))?;

    let mut pos = body;
    for node in &mut nodes {
        for t in node.layer.tensors_mut() {
            for v in t.data_mut() {
                let chunk = bytes
                    .get(pos..pos + 4)
                    .ok_or_else(|| fmt_err(pos, "truncated parameter blob"))?;
                *v = T::from_f32(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
                pos += 4;
            }
        }
    }
    if pos != bytes.len() {
        return Err(fmt_err(pos, "trailing bytes after parameter blobs"));
    }
    for n in &mut nodes {
        n.zero_grads();
    }
    let mut model = Model::from_nodes(nodes, &input_shape, classes)?;
    for s in &sites {
        if s.node >= model.nodes().len() || s.keep.len() != s.channels {
            return Err(fmt_err(12, format!("inconsistent site {}", s.id)));
        }
    }
    model.set_sites(sites);
    Ok(model)
}

fn parse_node<T: Scalar>(line: &str, offset: usize) -> Result<LayerNode<T>> {
    let mut words = line.split_whitespace().skip(2);
    let kind_name = words.next().unwrap_or("");
    let kind = LayerKind::from_name(kind_name)
        .ok_or_else(|| fmt_err(offset, format!("unknown layer kind `{kind_name}`")))?;
    let f = Fields::parse(line, offset, 3);
    let inputs = f
        .get("in")?
        .split(',')
        .map(|s| match s {
            "input" => Ok(Source::Input),
            n => n
                .parse()
                .map(Source::Node)
                .map_err(|_| fmt_err(offset, format!("bad operand `{n}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let prunable = f.flag("prunable")?;
    let zeros = |s: &[usize]| -> Result<Tensor<T>> {
        if s.contains(&0) {
            return Err(fmt_err(offset, "zero extent in tensor shape"));
        }
        Ok(Tensor::zeros(s))
    };
    let layer = match kind {
        LayerKind::Conv2d | LayerKind::Linear => {
            let weight = zeros(&f.shape("weight")?)?;
            let bias = if f.flag("bias")? {
                Some(zeros(&[weight.shape()[0]])?)
            } else {
                None
            };
            if kind == LayerKind::Conv2d {
                if weight.rank() != 4 {
                    return Err(fmt_err(offset, "conv weight must be rank 4"));
                }
                Layer::Conv2d {
                    weight,
                    bias,
                    stride: f.num("stride")?,
                    padding: f.num("padding")?,
                }
            } else {
                if weight.rank() != 2 {
                    return Err(fmt_err(offset, "linear weight must be rank 2"));
                }
                Layer::Linear { weight, bias }
            }
        }
        LayerKind::BatchNorm => {
            let c: usize = f.num("channels")?;
            Layer::BatchNorm {
                gamma: zeros(&[c])?,
                beta: zeros(&[c])?,
                running_mean: zeros(&[c])?,
                running_var: zeros(&[c])?,
                eps: T::from_f32(f.num("eps")?),
                momentum: T::from_f32(f.num("momentum")?),
            }
        }
        LayerKind::ReLU => Layer::ReLU,
        LayerKind::AvgPool => Layer::AvgPool {
            kernel: f.num("kernel")?,
        },
        LayerKind::MaxPool => Layer::MaxPool {
            kernel: f.num("kernel")?,
        },
        LayerKind::ResidualAdd => Layer::ResidualAdd,
        LayerKind::Flatten => Layer::Flatten,
    };
    Ok(LayerNode::new(layer, inputs, prunable))
}
