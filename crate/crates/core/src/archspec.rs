//! Network architecture descriptions.
//!
//! An architecture is a sequential chain of layers plus optional residual
//! edges (`skip from=<id> to=<id>`, where the sink is a `residual-add`
//! layer). Layer ids are the 0-based positions of the layer lines.
//!
//! Text format, one statement per line, `#` starts a comment:
//!
//! ```text
//! input 3x32x32
//! conv in=3 out=16 k=3 stride=1 pad=1 prunable=true
//! relu
//! maxpool k=2 stride=2
//! flatten
//! linear in=4096 out=3
//! ```
//!
//! A JSON mirror of the same schema is accepted for `.json` files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Linear,
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool,
    #[serde(rename = "avgpool")]
    AvgPool,
    Flatten,
    ResidualAdd,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Linear => "linear",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::AvgPool => "avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::ResidualAdd => "residual-add",
        }
    }

    /// Layers carrying weights.
    pub fn is_parametric(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Linear)
    }

    /// Layers whose output has the same channel count as their input and
    /// which therefore forward a producer's filters unchanged.
    fn preserves_channels(self) -> bool {
        matches!(
            self,
            LayerKind::Relu | LayerKind::MaxPool | LayerKind::AvgPool
        )
    }

    fn is_pool(self) -> bool {
        matches!(self, LayerKind::MaxPool | LayerKind::AvgPool)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "conv" => LayerKind::Conv,
            "linear" => LayerKind::Linear,
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::MaxPool,
            "avgpool" => LayerKind::AvgPool,
            "flatten" => LayerKind::Flatten,
            "residual-add" | "add" => LayerKind::ResidualAdd,
            other => return Err(format!("unknown layer kind `{other}`")),
        })
    }
}

/// One layer of a network.
///
/// For conv/linear layers `c_in`/`c_out` are declared; for the other kinds
/// they are filled in by [`infer_shapes`]. `kernel_omega` is the spatial
/// kernel side for convolutions and the window side for pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: usize,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel_omega: usize,
    pub stride: usize,
    pub pad: usize,
    pub prunable: bool,
    /// Output spatial size, set by shape inference. Flat outputs are 1×1.
    pub out_hw: Option<(usize, usize)>,
}

impl LayerSpec {
    pub fn conv(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            c_in,
            c_out,
            kernel_omega: kernel,
            stride,
            pad,
            ..Self::bare(LayerKind::Conv)
        }
    }

    pub fn linear(c_in: usize, c_out: usize) -> Self {
        LayerSpec {
            c_in,
            c_out,
            ..Self::bare(LayerKind::Linear)
        }
    }

    pub fn pool(kind: LayerKind, kernel: usize, stride: usize) -> Self {
        debug_assert!(kind.is_pool());
        LayerSpec {
            kernel_omega: kernel,
            stride,
            ..Self::bare(kind)
        }
    }

    /// A layer of `kind` with every numeric field zeroed.
    pub fn bare(kind: LayerKind) -> Self {
        LayerSpec {
            id: 0,
            kind,
            c_in: 0,
            c_out: 0,
            kernel_omega: 0,
            stride: if kind == LayerKind::Conv { 1 } else { 0 },
            pad: 0,
            prunable: false,
            out_hw: None,
        }
    }

    pub fn with_prunable(mut self, prunable: bool) -> Self {
        self.prunable = prunable;
        self
    }

    /// Number of output spatial positions (H_out × W_out), once inferred.
    pub fn s_out(&self) -> Option<usize> {
        self.out_hw.map(|(h, w)| h * w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkArch {
    pub layers: Vec<LayerSpec>,
    /// (source layer id, residual-add layer id)
    pub skip_edges: Vec<(usize, usize)>,
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
}

impl NetworkArch {
    pub fn new(input_shape: (usize, usize, usize), layers: Vec<LayerSpec>) -> Self {
        let mut arch = NetworkArch {
            layers,
            skip_edges: Vec::new(),
            input_shape,
        };
        arch.renumber();
        arch
    }

    pub fn with_skip(mut self, from: usize, to: usize) -> Self {
        self.skip_edges.push((from, to));
        self
    }

    fn renumber(&mut self) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.id = i;
        }
    }

    pub fn layer(&self, id: usize) -> Option<&LayerSpec> {
        self.layers.get(id)
    }

    pub fn is_inferred(&self) -> bool {
        self.layers.iter().all(|l| l.out_hw.is_some())
    }

    /// Ids of the layers flagged prunable.
    pub fn prunable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.prunable)
            .map(|l| l.id)
            .collect()
    }

    pub fn prunable_filter_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.prunable)
            .map(|l| l.c_out)
            .sum()
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(param_count).sum()
    }

    /// Width of the flat feature vector produced by the last layer, if the
    /// network ends flat.
    pub fn feature_dim(&self) -> Option<usize> {
        let inferred = infer_shapes(self).ok()?;
        let mut flat = false;
        for layer in &inferred.layers {
            match layer.kind {
                LayerKind::Flatten | LayerKind::Linear => flat = true,
                LayerKind::Conv | LayerKind::MaxPool | LayerKind::AvgPool => flat = false,
                LayerKind::Relu | LayerKind::ResidualAdd => {}
            }
        }
        flat.then(|| inferred.layers.last().map(|l| l.c_out))
            .flatten()
    }

    /// Serialize to the line-oriented text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let (c, h, w) = self.input_shape;
        let _ = writeln!(out, "input {c}x{h}x{w}");
        for layer in &self.layers {
            let _ = writeln!(out, "{}", layer_line(layer));
        }
        for (from, to) in &self.skip_edges {
            let _ = writeln!(out, "skip from={from} to={to}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ArchDocument::from(self)).expect("architecture serializes")
    }
}

impl fmt::Display for NetworkArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn layer_line(layer: &LayerSpec) -> String {
    match layer.kind {
        LayerKind::Conv => format!(
            "conv in={} out={} k={} stride={} pad={} prunable={}",
            layer.c_in, layer.c_out, layer.kernel_omega, layer.stride, layer.pad, layer.prunable
        ),
        LayerKind::Linear => format!("linear in={} out={}", layer.c_in, layer.c_out),
        LayerKind::MaxPool | LayerKind::AvgPool => {
            let mut s = format!(
                "{} k={} stride={}",
                layer.kind, layer.kernel_omega, layer.stride
            );
            if layer.pad > 0 {
                let _ = write!(s, " pad={}", layer.pad);
            }
            s
        }
        kind => kind.as_str().to_string(),
    }
}

/// Parse the text format. Shapes are left uninferred.
pub fn parse_arch(text: &str) -> Result<NetworkArch> {
    let mut input_shape = None;
    let mut layers = Vec::new();
    let mut skip_edges = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |message: String| Error::Syntax {
            line: line_no,
            message,
        };
        let mut tokens = line.split_whitespace();
        let head = tokens.next().expect("non-empty line");
        match head {
            "input" => {
                let dims = tokens
                    .next()
                    .ok_or_else(|| syntax("`input` needs a CxHxW shape".into()))?;
                if tokens.next().is_some() {
                    return Err(syntax("trailing tokens after input shape".into()));
                }
                if input_shape.is_some() {
                    return Err(syntax("duplicate `input` line".into()));
                }
                input_shape = Some(parse_shape(dims).map_err(syntax)?);
            }
            "skip" => {
                let kv = parse_pairs(tokens).map_err(syntax)?;
                let mut fields = Fields::new(kv, line_no);
                let from = fields.required("from")?;
                let to = fields.required("to")?;
                fields.finish()?;
                skip_edges.push((from, to));
            }
            kind => {
                let kind: LayerKind = kind.parse().map_err(syntax)?;
                let kv = parse_pairs(tokens).map_err(syntax)?;
                let mut fields = Fields::new(kv, line_no);
                let mut layer = LayerSpec::bare(kind);
                match kind {
                    LayerKind::Conv => {
                        layer.c_in = fields.required("in")?;
                        layer.c_out = fields.required("out")?;
                        layer.kernel_omega = fields.required("k")?;
                        layer.stride = fields.optional("stride")?.unwrap_or(1);
                        layer.pad = fields.optional("pad")?.unwrap_or(0);
                        layer.prunable = fields.flag("prunable")?.unwrap_or(false);
                    }
                    LayerKind::Linear => {
                        layer.c_in = fields.required("in")?;
                        layer.c_out = fields.required("out")?;
                    }
                    LayerKind::MaxPool | LayerKind::AvgPool => {
                        layer.kernel_omega = fields.required("k")?;
                        layer.stride = fields.optional("stride")?.unwrap_or(layer.kernel_omega);
                        layer.pad = fields.optional("pad")?.unwrap_or(0);
                    }
                    LayerKind::Relu | LayerKind::Flatten | LayerKind::ResidualAdd => {}
                }
                fields.finish()?;
                layers.push(layer);
            }
        }
    }

    if layers.is_empty() {
        return Err(Error::NoLayers);
    }
    let input_shape = input_shape.ok_or(Error::Syntax {
        line: 0,
        message: "missing `input CxHxW` line".into(),
    })?;
    let mut arch = NetworkArch {
        layers,
        skip_edges,
        input_shape,
    };
    arch.renumber();
    check_structure(&arch)?;
    Ok(arch)
}

fn parse_shape(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("input shape `{s}` is not CxHxW"));
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p
            .parse()
            .map_err(|_| format!("input shape `{s}`: `{p}` is not a count"))?;
    }
    Ok((dims[0], dims[1], dims[2]))
}

fn parse_pairs<'a>(
    tokens: impl Iterator<Item = &'a str>,
) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut kv = BTreeMap::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, found `{tok}`"))?;
        if kv.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format!("duplicate key `{k}`"));
        }
    }
    Ok(kv)
}

struct Fields {
    kv: BTreeMap<String, String>,
    line: usize,
}

impl Fields {
    fn new(kv: BTreeMap<String, String>, line: usize) -> Self {
        Fields { kv, line }
    }

    fn err(&self, message: String) -> Error {
        Error::Syntax {
            line: self.line,
            message,
        }
    }

    fn optional(&mut self, key: &str) -> Result<Option<usize>> {
        match self.kv.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.err(format!("`{key}={v}` is not a count"))),
        }
    }

    fn required(&mut self, key: &str) -> Result<usize> {
        self.optional(key)?
            .ok_or_else(|| self.err(format!("missing required field `{key}`")))
    }

    fn flag(&mut self, key: &str) -> Result<Option<bool>> {
        match self.kv.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.err(format!("`{key}={v}` is not true/false"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.kv.keys().next() {
            None => Ok(()),
            Some(k) => Err(self.err(format!("unknown field `{k}`"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchDocument {
    input: [usize; 3],
    layers: Vec<LayerDocument>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    skips: Vec<SkipDocument>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDocument {
    kind: LayerKind,
    #[serde(default, rename = "in", skip_serializing_if = "Option::is_none")]
    c_in: Option<usize>,
    #[serde(default, rename = "out", skip_serializing_if = "Option::is_none")]
    c_out: Option<usize>,
    #[serde(default, rename = "k", skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prunable: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkipDocument {
    from: usize,
    to: usize,
}

impl From<&NetworkArch> for ArchDocument {
    fn from(arch: &NetworkArch) -> Self {
        let (c, h, w) = arch.input_shape;
        let layers = arch
            .layers
            .iter()
            .map(|l| {
                let mut doc = LayerDocument {
                    kind: l.kind,
                    c_in: None,
                    c_out: None,
                    kernel: None,
                    stride: None,
                    pad: None,
                    prunable: None,
                };
                match l.kind {
                    LayerKind::Conv => {
                        doc.c_in = Some(l.c_in);
                        doc.c_out = Some(l.c_out);
                        doc.kernel = Some(l.kernel_omega);
                        doc.stride = Some(l.stride);
                        doc.pad = Some(l.pad);
                        doc.prunable = Some(l.prunable);
                    }
                    LayerKind::Linear => {
                        doc.c_in = Some(l.c_in);
                        doc.c_out = Some(l.c_out);
                    }
                    LayerKind::MaxPool | LayerKind::AvgPool => {
                        doc.kernel = Some(l.kernel_omega);
                        doc.stride = Some(l.stride);
                        doc.pad = (l.pad > 0).then_some(l.pad);
                    }
                    _ => {}
                }
                doc
            })
            .collect();
        ArchDocument {
            input: [c, h, w],
            layers,
            skips: arch
                .skip_edges
                .iter()
                .map(|&(from, to)| SkipDocument { from, to })
                .collect(),
        }
    }
}

/// Parse the JSON mirror of the text format.
pub fn parse_arch_json(text: &str) -> Result<NetworkArch> {
    let doc: ArchDocument = serde_json::from_str(text).map_err(|e| Error::Syntax {
        line: e.line(),
        message: e.to_string(),
    })?;
    if doc.layers.is_empty() {
        return Err(Error::NoLayers);
    }
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (i, l) in doc.layers.into_iter().enumerate() {
        let missing = |field: &str| {
            Error::InvalidArch(format!(
                "layer {i} ({}): missing required field `{field}`",
                l.kind
            ))
        };
        let mut layer = LayerSpec::bare(l.kind);
        match l.kind {
            LayerKind::Conv => {
                layer.c_in = l.c_in.ok_or_else(|| missing("in"))?;
                layer.c_out = l.c_out.ok_or_else(|| missing("out"))?;
                layer.kernel_omega = l.kernel.ok_or_else(|| missing("k"))?;
                layer.stride = l.stride.unwrap_or(1);
                layer.pad = l.pad.unwrap_or(0);
                layer.prunable = l.prunable.unwrap_or(false);
            }
            LayerKind::Linear => {
                layer.c_in = l.c_in.ok_or_else(|| missing("in"))?;
                layer.c_out = l.c_out.ok_or_else(|| missing("out"))?;
            }
            LayerKind::MaxPool | LayerKind::AvgPool => {
                layer.kernel_omega = l.kernel.ok_or_else(|| missing("k"))?;
                layer.stride = l.stride.unwrap_or(layer.kernel_omega);
                layer.pad = l.pad.unwrap_or(0);
            }
            _ => {}
        }
        layers.push(layer);
    }
    let mut arch = NetworkArch {
        layers,
        skip_edges: doc.skips.iter().map(|s| (s.from, s.to)).collect(),
        input_shape: (doc.input[0], doc.input[1], doc.input[2]),
    };
    arch.renumber();
    check_structure(&arch)?;
    Ok(arch)
}

const VGG_TINY: &str = include_str!("../archs/vgg-tiny.arch");
const RES_TINY: &str = include_str!("../archs/res-tiny.arch");

/// The shipped reference architectures, by name.
pub fn builtin(name: &str) -> Option<NetworkArch> {
    let text = match name {
        "vgg-tiny" => VGG_TINY,
        "res-tiny" => RES_TINY,
        _ => return None,
    };
    Some(parse_arch(text).expect("builtin architecture parses"))
}

/// Load an architecture from a file, or a builtin by name
/// (`vgg-tiny`, `res-tiny`). `.json` files use the JSON mirror.
pub fn load_arch(path: &Path) -> Result<NetworkArch> {
    if !path.exists() {
        if let Some(arch) = path.to_str().and_then(builtin) {
            return Ok(arch);
        }
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let arch = if path.extension().is_some_and(|e| e == "json") {
        parse_arch_json(&text)?
    } else {
        parse_arch(&text)?
    };
    validate(&arch)?;
    Ok(arch)
}

pub fn save_arch(arch: &NetworkArch, path: &Path) -> Result<()> {
    let text = if path.extension().is_some_and(|e| e == "json") {
        arch.to_json()
    } else {
        arch.to_text()
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Checks that do not need shape propagation.
fn check_structure(arch: &NetworkArch) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidArch(msg));
    if arch.layers.is_empty() {
        return Err(Error::NoLayers);
    }
    let (c, h, w) = arch.input_shape;
    if c == 0 || h == 0 || w == 0 {
        return bad(format!("input shape {c}x{h}x{w} has a zero dimension"));
    }
    for (i, l) in arch.layers.iter().enumerate() {
        if l.id != i {
            return bad(format!("layer at position {i} has id {}", l.id));
        }
        match l.kind {
            LayerKind::Conv => {
                if l.c_in == 0 || l.c_out == 0 {
                    return bad(format!("layer {i}: conv channels must be >= 1"));
                }
                if l.kernel_omega == 0 {
                    return bad(format!("layer {i}: conv kernel_omega must be >= 1"));
                }
                if l.stride == 0 {
                    return bad(format!("layer {i}: stride must be >= 1"));
                }
            }
            LayerKind::Linear => {
                if l.c_in == 0 || l.c_out == 0 {
                    return bad(format!("layer {i}: linear channels must be >= 1"));
                }
            }
            LayerKind::MaxPool | LayerKind::AvgPool => {
                if l.kernel_omega == 0 || l.stride == 0 {
                    return bad(format!("layer {i}: pooling window and stride must be >= 1"));
                }
            }
            LayerKind::ResidualAdd => {
                let incoming = arch.skip_edges.iter().filter(|e| e.1 == i).count();
                if incoming != 1 {
                    return bad(format!(
                        "layer {i}: residual-add needs exactly one skip edge, found {incoming}"
                    ));
                }
                if i == 0 {
                    return bad("residual-add cannot be the first layer".into());
                }
            }
            LayerKind::Relu | LayerKind::Flatten => {}
        }
        if l.prunable && l.kind != LayerKind::Conv {
            return bad(format!("layer {i}: only conv layers may be prunable"));
        }
    }
    for &(from, to) in &arch.skip_edges {
        if to >= arch.layers.len() || arch.layers[to].kind != LayerKind::ResidualAdd {
            return bad(format!(
                "skip {from}->{to}: sink is not a residual-add layer"
            ));
        }
        if from + 1 >= to {
            return bad(format!(
                "skip {from}->{to}: source must precede the sink's predecessor"
            ));
        }
    }
    for l in arch.layers.iter().filter(|l| l.prunable) {
        if feeds_residual_junction(arch, l.id) {
            return bad(format!(
                "layer {}: conv feeding a residual-add junction cannot be prunable",
                l.id
            ));
        }
    }
    Ok(())
}

/// Whether the output channels of layer `id` reach a residual-add, either
/// along the main chain or through a skip edge, before another parametric
/// layer re-maps them.
pub fn feeds_residual_junction(arch: &NetworkArch, id: usize) -> bool {
    let mut reach = vec![id];
    for layer in &arch.layers[id + 1..] {
        if layer.kind == LayerKind::ResidualAdd {
            return true;
        }
        if !layer.kind.preserves_channels() {
            break;
        }
        reach.push(layer.id);
    }
    arch.skip_edges.iter().any(|(from, _)| reach.contains(from))
}

/// Full validation: structure, channel consistency and shape propagation.
pub fn validate(arch: &NetworkArch) -> Result<()> {
    infer_shapes(arch).map(|_| ())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FlowState {
    c: usize,
    h: usize,
    w: usize,
    flat: bool,
}

fn window_out(size: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Propagate shapes forward and fill in every layer's output size (and the
/// channel counts of non-parametric layers). Idempotent.
pub fn infer_shapes(arch: &NetworkArch) -> Result<NetworkArch> {
    check_structure(arch)?;
    let mut out = arch.clone();
    let (c, h, w) = arch.input_shape;
    let mut state = FlowState {
        c,
        h,
        w,
        flat: false,
    };
    let mut produced: Vec<FlowState> = Vec::with_capacity(arch.layers.len());

    for layer in out.layers.iter_mut() {
        let shape_err = |message: String| Error::Shape {
            layer: layer.id,
            message,
        };
        let next = match layer.kind {
            LayerKind::Conv | LayerKind::MaxPool | LayerKind::AvgPool => {
                if state.flat {
                    return Err(shape_err(format!("{} applied to a flat input", layer.kind)));
                }
                if layer.kind == LayerKind::Conv && layer.c_in != state.c {
                    return Err(shape_err(format!(
                        "c_in={} but the incoming tensor has {} channels",
                        layer.c_in, state.c
                    )));
                }
                let k = layer.kernel_omega;
                let (ho, wo) = match (
                    window_out(state.h, layer.pad, k, layer.stride),
                    window_out(state.w, layer.pad, k, layer.stride),
                ) {
                    (Some(ho), Some(wo)) => (ho, wo),
                    _ => {
                        return Err(shape_err(format!(
                            "window {k} (pad {}) does not fit a {}x{} input; output would be empty",
                            layer.pad, state.h, state.w
                        )))
                    }
                };
                let c_out = if layer.kind == LayerKind::Conv {
                    layer.c_out
                } else {
                    state.c
                };
                FlowState {
                    c: c_out,
                    h: ho,
                    w: wo,
                    flat: false,
                }
            }
            LayerKind::Linear => {
                if !state.flat {
                    return Err(shape_err(
                        "linear layer needs a flat input (insert `flatten`)".into(),
                    ));
                }
                if layer.c_in != state.c {
                    return Err(shape_err(format!(
                        "c_in={} but the incoming vector has {} features",
                        layer.c_in, state.c
                    )));
                }
                FlowState {
                    c: layer.c_out,
                    h: 1,
                    w: 1,
                    flat: true,
                }
            }
            LayerKind::Relu => state,
            LayerKind::Flatten => FlowState {
                c: state.c * state.h * state.w,
                h: 1,
                w: 1,
                flat: true,
            },
            LayerKind::ResidualAdd => {
                let (from, _) = *arch
                    .skip_edges
                    .iter()
                    .find(|e| e.1 == layer.id)
                    .expect("checked by check_structure");
                let skip = produced[from];
                if skip != state {
                    return Err(shape_err(format!(
                        "skip from layer {from} carries {}x{}x{} but the main path carries {}x{}x{}",
                        skip.c, skip.h, skip.w, state.c, state.h, state.w
                    )));
                }
                state
            }
        };
        if !layer.kind.is_parametric() {
            layer.c_in = state.c;
            layer.c_out = next.c;
        }
        layer.out_hw = Some((next.h, next.w));
        produced.push(next);
        state = next;
    }
    Ok(out)
}

/// Weights plus biases of a layer; zero for non-parametric kinds.
pub fn param_count(layer: &LayerSpec) -> u64 {
    let (c_in, c_out, k) = (
        layer.c_in as u64,
        layer.c_out as u64,
        layer.kernel_omega as u64,
    );
    match layer.kind {
        LayerKind::Conv => c_in * k * k * c_out + c_out,
        LayerKind::Linear => c_in * c_out + c_out,
        _ => 0,
    }
}

/// Filters removed from each layer. Indices refer to the filter positions of
/// the architecture the mask is applied to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub removed: BTreeMap<usize, BTreeSet<usize>>,
    pub min_filters: usize,
}

impl Default for PruneMask {
    fn default() -> Self {
        PruneMask {
            removed: BTreeMap::new(),
            min_filters: 1,
        }
    }
}

impl PruneMask {
    pub fn new(min_filters: usize) -> Self {
        PruneMask {
            removed: BTreeMap::new(),
            min_filters,
        }
    }

    pub fn remove(&mut self, layer: usize, filter: usize) -> bool {
        self.removed.entry(layer).or_default().insert(filter)
    }

    pub fn removed_in(&self, layer: usize) -> usize {
        self.removed.get(&layer).map_or(0, BTreeSet::len)
    }

    pub fn total_removed(&self) -> usize {
        self.removed.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_removed() == 0
    }
}

/// Remove filters from prunable conv layers, shrink the consuming layer's
/// input channels to match, and re-infer shapes.
pub fn apply_mask(arch: &NetworkArch, mask: &PruneMask) -> Result<NetworkArch> {
    let mut out = infer_shapes(arch)?;
    if mask.min_filters == 0 {
        return Err(Error::InvalidMask("min_filters must be >= 1".into()));
    }
    for (&id, filters) in &mask.removed {
        let layer = out
            .layers
            .get_mut(id)
            .ok_or_else(|| Error::InvalidMask(format!("layer {id} does not exist")))?;
        if filters.is_empty() {
            continue;
        }
        if !layer.prunable {
            return Err(Error::InvalidMask(format!(
                "layer {id} ({}) is not prunable",
                layer.kind
            )));
        }
        if let Some(&bad) = filters.iter().find(|&&f| f >= layer.c_out) {
            return Err(Error::InvalidMask(format!(
                "layer {id} has {} filters; index {bad} out of range",
                layer.c_out
            )));
        }
        if layer.c_out - filters.len() < mask.min_filters {
            return Err(Error::InvalidMask(format!(
                "removing {} of {} filters from layer {id} leaves fewer than {}",
                filters.len(),
                layer.c_out,
                mask.min_filters
            )));
        }
        layer.c_out -= filters.len();
    }
    propagate_channels(&mut out);
    infer_shapes(&out)
}

/// Rewrite every parametric layer's `c_in` to the width actually arriving
/// from upstream. Spatial sizes are taken from the (unchanged) inferred shapes.
fn propagate_channels(arch: &mut NetworkArch) {
    let mut c = arch.input_shape.0;
    let mut hw = (arch.input_shape.1, arch.input_shape.2);
    for layer in arch.layers.iter_mut() {
        match layer.kind {
            LayerKind::Conv | LayerKind::Linear => {
                layer.c_in = c;
                c = layer.c_out;
            }
            LayerKind::Flatten => c *= hw.0 * hw.1,
            LayerKind::Relu | LayerKind::MaxPool | LayerKind::AvgPool | LayerKind::ResidualAdd => {}
        }
        hw = layer.out_hw.unwrap_or((1, 1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "\
input 3x8x8
conv in=3 out=16 k=3 stride=1 pad=1 prunable=true
relu
flatten
linear in=1024 out=3
";

    fn two_conv() -> NetworkArch {
        parse_arch(
            "input 3x8x8\n\
             conv in=3 out=16 k=3 pad=1 prunable=true\n\
             relu\n\
             conv in=16 out=8 k=3 pad=1 prunable=true\n\
             relu\n\
             flatten\n\
             linear in=512 out=3\n",
        )
        .unwrap()
    }

    #[test]
    fn parses_layers_in_order() {
        let arch = parse_arch(TOY).unwrap();
        assert_eq!(arch.input_shape, (3, 8, 8));
        let kinds: Vec<_> = arch.layers.iter().map(|l| l.kind).collect();
        assert_eq!(
            kinds,
            [
                LayerKind::Conv,
                LayerKind::Relu,
                LayerKind::Flatten,
                LayerKind::Linear
            ]
        );
        let conv = &arch.layers[0];
        assert_eq!((conv.c_in, conv.c_out, conv.kernel_omega), (3, 16, 3));
        assert!(conv.prunable);
        assert!(conv.s_out().is_none());
    }

    #[test]
    fn three_layer_document() {
        let arch =
            parse_arch("input 3x4x4\nconv in=3 out=16 k=3 pad=1\nrelu\nlinear in=256 out=3\n")
                .unwrap();
        assert_eq!(arch.layers.len(), 3);
        assert_eq!(arch.layers[2].c_in, 256);
    }

    #[test]
    fn empty_document_has_no_layers() {
        assert!(matches!(parse_arch(""), Err(Error::NoLayers)));
        assert!(matches!(
            parse_arch("# just a comment\ninput 3x4x4\n"),
            Err(Error::NoLayers)
        ));
    }

    #[test]
    fn zero_kernel_rejected() {
        let err = parse_arch("input 3x8x8\nconv in=3 out=4 k=0\n").unwrap_err();
        assert!(matches!(err, Error::InvalidArch(_)), "{err}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        match parse_arch("input 3x8x8\n\nconv in=3 out=4\n") {
            Err(Error::Syntax { line: 3, message }) => assert!(message.contains("`k`")),
            other => panic!("unexpected {other:?}"),
        }
        match parse_arch("input 3x8x8\nsoftmax\n") {
            Err(Error::Syntax { line: 2, message }) => assert!(message.contains("unknown")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_arch("input 3x8x8\nrelu bogus=1\n"),
            Err(Error::Syntax { line: 2, .. })
        ));
    }

    #[test]
    fn same_padding_preserves_size() {
        let arch = parse_arch("input 3x32x32\nconv in=3 out=4 k=3 stride=1 pad=1\n").unwrap();
        let arch = infer_shapes(&arch).unwrap();
        assert_eq!(arch.layers[0].s_out(), Some(1024));
    }

    #[test]
    fn maxpool_halves_each_side() {
        let arch = parse_arch("input 3x32x32\nmaxpool k=2 stride=2\n").unwrap();
        let arch = infer_shapes(&arch).unwrap();
        assert_eq!(arch.layers[0].s_out(), Some(256));
        assert_eq!(arch.layers[0].c_out, 3);
    }

    #[test]
    fn oversized_kernel_is_a_shape_error() {
        let arch = parse_arch("input 3x4x4\nconv in=3 out=4 k=5 pad=0\n").unwrap();
        assert!(matches!(
            infer_shapes(&arch),
            Err(Error::Shape { layer: 0, .. })
        ));
    }

    #[test]
    fn channel_mismatch_detected() {
        let arch = parse_arch("input 3x8x8\nconv in=4 out=4 k=3\n").unwrap();
        assert!(matches!(infer_shapes(&arch), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_s_out_is_one() {
        let arch = infer_shapes(&parse_arch(TOY).unwrap()).unwrap();
        assert_eq!(arch.layers[3].s_out(), Some(1));
        assert_eq!(arch.layers[2].c_out, 1024);
    }

    #[test]
    fn param_counts() {
        assert_eq!(param_count(&LayerSpec::conv(3, 16, 3, 1, 1)), 448);
        assert_eq!(param_count(&LayerSpec::linear(10, 3)), 33);
        assert_eq!(param_count(&LayerSpec::bare(LayerKind::Relu)), 0);
    }

    #[test]
    fn mask_shrinks_producer_and_consumer() {
        let arch = two_conv();
        let mut mask = PruneMask::default();
        for f in [0, 5, 9, 15] {
            mask.remove(0, f);
        }
        let pruned = apply_mask(&arch, &mask).unwrap();
        assert_eq!(pruned.layers[0].c_out, 12);
        assert_eq!(pruned.layers[2].c_in, 12);
        assert_eq!(pruned.layers[1].c_out, 12);
        assert_eq!(pruned.layers.len(), arch.layers.len());
    }

    #[test]
    fn mask_through_flatten_shrinks_linear_by_spatial_extent() {
        let arch = two_conv();
        let mut mask = PruneMask::default();
        mask.remove(2, 0);
        mask.remove(2, 1);
        let pruned = apply_mask(&arch, &mask).unwrap();
        assert_eq!(pruned.layers[2].c_out, 6);
        assert_eq!(pruned.layers[5].c_in, 6 * 64);
    }

    #[test]
    fn empty_mask_is_identity() {
        let arch = infer_shapes(&two_conv()).unwrap();
        assert_eq!(apply_mask(&arch, &PruneMask::default()).unwrap(), arch);
    }

    #[test]
    fn mask_errors() {
        let arch = two_conv();
        let mut m = PruneMask::default();
        m.remove(9, 0);
        assert!(matches!(apply_mask(&arch, &m), Err(Error::InvalidMask(_))));

        let mut m = PruneMask::default();
        m.remove(0, 16);
        assert!(matches!(apply_mask(&arch, &m), Err(Error::InvalidMask(_))));

        let mut m = PruneMask::default();
        m.remove(5, 0);
        assert!(matches!(apply_mask(&arch, &m), Err(Error::InvalidMask(_))));

        let mut m = PruneMask::new(4);
        for f in 0..13 {
            m.remove(0, f);
        }
        assert!(matches!(apply_mask(&arch, &m), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn junction_feeding_conv_cannot_be_pruned() {
        let res = builtin("res-tiny").unwrap();
        let junction_conv = res
            .layers
            .iter()
            .find(|l| l.kind == LayerKind::Conv && feeds_residual_junction(&res, l.id))
            .unwrap()
            .id;
        let mut m = PruneMask::default();
        m.remove(junction_conv, 0);
        assert!(matches!(apply_mask(&res, &m), Err(Error::InvalidMask(_))));

        // Declaring it prunable is itself rejected.
        let text = res.to_text().replacen(
            &layer_line(&res.layers[junction_conv]),
            &layer_line(&res.layers[junction_conv].clone().with_prunable(true)),
            1,
        );
        assert!(matches!(parse_arch(&text), Err(Error::InvalidArch(_))));
    }

    #[test]
    fn skip_edges_must_match_channels() {
        let text = "input 3x8x8\n\
                    conv in=3 out=4 k=3 pad=1\n\
                    relu\n\
                    conv in=4 out=5 k=3 pad=1\n\
                    residual-add\n\
                    skip from=0 to=2\n";
        assert!(matches!(parse_arch(text), Err(Error::InvalidArch(_))));
        let text = text.replace("skip from=0 to=2", "skip from=1 to=3");
        let arch = parse_arch(&text).unwrap();
        assert!(matches!(
            infer_shapes(&arch),
            Err(Error::Shape { layer: 3, .. })
        ));
    }

    #[test]
    fn builtins_validate() {
        for name in ["vgg-tiny", "res-tiny"] {
            let arch = builtin(name).unwrap();
            validate(&arch).unwrap();
            assert_eq!(arch.input_shape, (3, 32, 32));
            let convs = arch
                .layers
                .iter()
                .filter(|l| l.kind == LayerKind::Conv)
                .count();
            assert_eq!(convs, 4, "{name}");
            assert!(arch.feature_dim().is_some());
        }
        let res = builtin("res-tiny").unwrap();
        assert_eq!(res.skip_edges.len(), 1);
    }

    #[test]
    fn json_mirror_matches_text() {
        for name in ["vgg-tiny", "res-tiny"] {
            let arch = builtin(name).unwrap();
            assert_eq!(parse_arch_json(&arch.to_json()).unwrap(), arch);
        }
        assert!(matches!(
            parse_arch_json(r#"{"input":[3,8,8],"layers":[]}"#),
            Err(Error::NoLayers)
        ));
        assert!(matches!(
            parse_arch_json(r#"{"input":[3,8,8],"layers":[{"kind":"conv","in":3,"out":2}]}"#),
            Err(Error::InvalidArch(_))
        ));
    }

    #[test]
    fn infer_is_idempotent_on_builtins() {
        for name in ["vgg-tiny", "res-tiny"] {
            let once = infer_shapes(&builtin(name).unwrap()).unwrap();
            assert_eq!(infer_shapes(&once).unwrap(), once);
        }
    }
}
