//! Network descriptions, the Front and Tinier module builders, shape inference
//! and parameter accounting.
//!
//! A network is first written as a [`NetDescription`]: a short list of
//! [`Stage`]s such as "Front module", "Tinier module named Tin.2" or
//! "detect here". [`NetDescription::build`] expands every stage into
//! primitive [`LayerNode`]s and checks the result end to end.

mod forward;
mod params;
mod variants;
mod weights;

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::detect::AnchorSet;
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{ConvGeometry, Padding, Shape};

pub use forward::{forward, forward_outputs, Activations};
pub use params::{count_all_trainables, count_params, count_stored_values, module_rows, ModuleRow, ParamReport};
pub use variants::{build_variant, variant_description, Variant, VariantOptions};
pub use weights::{LayerParams, WeightStore};

/// Id of the implicit input node every network starts from.
pub const INPUT: &str = "input";

/// Primitive layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    /// Square convolution with bias, same-padded.
    Conv { kernel: usize, filters: usize, stride: usize },
    BatchNorm,
    Relu,
    MaxPool2x2,
    Upsample2x,
    Concat,
    /// Linear 1×1 convolution with `boxes · (5 + classes)` filters.
    Detect { boxes: usize, classes: usize },
}

impl LayerKind {
    /// `(filters, kernel, stride)` for layers that own convolution weights.
    pub fn conv_params(&self) -> Option<(usize, usize, usize)> {
        match *self {
            LayerKind::Conv { kernel, filters, stride } => Some((filters, kernel, stride)),
            LayerKind::Detect { boxes, classes } => Some((boxes * (5 + classes), 1, 1)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNode {
    pub id: String,
    /// Module the node belongs to, used to group parameter counts.
    pub module: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

/// One statement of a network description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    /// Three 3×3 convolutions (first with stride 2), each with BN and ReLU, then a 2×2 max pool.
    Front { filters: [usize; 3] },
    /// `[1×1 (n1) → 3×3 (n3)] × 2`, each convolution followed by BN and ReLU.
    Tinier { name: String, n1: usize, n3: usize },
    MaxPool,
    /// Upsample a named earlier output; the result is addressable as `<from>.up`.
    Upsample { from: String },
    Concat { a: String, b: String },
    /// Detection tap on the current feature map. Does not change the current map.
    Detect { name: String, boxes: usize, classes: usize },
}

/// Declarative network: input shape, optional anchor priors and a stage list.
#[derive(Debug, Clone, PartialEq)]
pub struct NetDescription {
    pub input: Shape,
    pub anchors: Option<AnchorSet>,
    pub stages: Vec<Stage>,
}

/// A detection output of a built network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectTap {
    pub id: String,
    pub boxes: usize,
    pub classes: usize,
    pub grid_height: usize,
    pub grid_width: usize,
}

/// Validated layer graph with inferred shapes.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    input_shape: Shape,
    nodes: Vec<LayerNode>,
    shapes: Vec<Shape>,
    index: HashMap<String, usize>,
    anchors: AnchorSet,
    description: Option<NetDescription>,
}

struct Expander {
    nodes: Vec<LayerNode>,
    aliases: HashMap<String, String>,
    current: String,
    pools: usize,
    concats: usize,
    has_front: bool,
}

impl Expander {
    fn push(&mut self, id: String, module: &str, kind: LayerKind, inputs: Vec<String>) -> String {
        self.nodes.push(LayerNode { id: id.clone(), module: module.to_string(), kind, inputs });
        id
    }

    /// conv → bn → relu on the current map.
    fn conv_block(&mut self, module: &str, idx: usize, kernel: usize, filters: usize, stride: usize) {
        let input = self.current.clone();
        let conv = self.push(format!("{module}.conv{idx}"), module, LayerKind::Conv { kernel, filters, stride }, vec![input]);
        let bn = self.push(format!("{module}.bn{idx}"), module, LayerKind::BatchNorm, vec![conv]);
        self.current = self.push(format!("{module}.relu{idx}"), module, LayerKind::Relu, vec![bn]);
    }

    fn resolve(&self, name: &str) -> Result<String> {
        if let Some(id) = self.aliases.get(name) {
            return Ok(id.clone());
        }
        if name == INPUT || self.nodes.iter().any(|n| n.id == name) {
            return Ok(name.to_string());
        }
        Err(config_err!("unknown layer or module name `{name}`"))
    }

    fn name(&mut self, name: &str, id: String) -> Result<()> {
        if self.aliases.contains_key(name) || name == INPUT || self.nodes.iter().any(|n| n.id == name) {
            return Err(config_err!("name `{name}` is defined twice"));
        }
        self.aliases.insert(name.to_string(), id);
        Ok(())
    }

    fn stage(&mut self, stage: &Stage) -> Result<()> {
        match stage {
            Stage::Front { filters } => {
                if self.has_front {
                    return Err(config_err!("only one front module is allowed"));
                }
                self.has_front = true;
                self.conv_block("Front", 1, 3, filters[0], 2);
                self.conv_block("Front", 2, 3, filters[1], 1);
                self.conv_block("Front", 3, 3, filters[2], 1);
                let input = self.current.clone();
                self.current = self.push("Front.pool".into(), "Front", LayerKind::MaxPool2x2, vec![input]);
                self.name("Front", self.current.clone())?;
            }
            Stage::Tinier { name, n1, n3 } => {
                self.conv_block(name, 1, 1, *n1, 1);
                self.conv_block(name, 2, 3, *n3, 1);
                self.conv_block(name, 3, 1, *n1, 1);
                self.conv_block(name, 4, 3, *n3, 1);
                self.name(name, self.current.clone())?;
            }
            Stage::MaxPool => {
                self.pools += 1;
                let id = format!("pool{}", self.pools);
                let input = self.current.clone();
                self.current = self.push(id.clone(), &id, LayerKind::MaxPool2x2, vec![input]);
            }
            Stage::Upsample { from } => {
                let source = self.resolve(from)?;
                let id = format!("{from}.up");
                self.current = self.push(id.clone(), &id, LayerKind::Upsample2x, vec![source]);
            }
            Stage::Concat { a, b } => {
                self.concats += 1;
                let id = format!("concat{}", self.concats);
                let inputs = vec![self.resolve(a)?, self.resolve(b)?];
                self.current = self.push(id.clone(), &id, LayerKind::Concat, inputs);
            }
            Stage::Detect { name, boxes, classes } => {
                if self.aliases.contains_key(name) {
                    return Err(config_err!("name `{name}` is defined twice"));
                }
                let input = self.current.clone();
                self.push(name.clone(), name, LayerKind::Detect { boxes: *boxes, classes: *classes }, vec![input]);
            }
        }
        Ok(())
    }
}

impl NetDescription {
    /// Expand the stages into layers and validate the resulting graph.
    pub fn build(&self) -> Result<NetworkSpec> {
        let mut ex = Expander {
            nodes: Vec::new(),
            aliases: HashMap::new(),
            current: INPUT.to_string(),
            pools: 0,
            concats: 0,
            has_front: false,
        };
        for stage in &self.stages {
            ex.stage(stage)?;
        }
        let boxes: Vec<usize> = ex
            .nodes
            .iter()
            .filter_map(|n| match n.kind {
                LayerKind::Detect { boxes, .. } => Some(boxes),
                _ => None,
            })
            .collect();
        let anchors = match &self.anchors {
            Some(a) => a.clone(),
            None => AnchorSet::default_for(boxes.first().copied().unwrap_or(5))?,
        };
        if let Some(b) = boxes.iter().find(|&&b| b != anchors.len()) {
            return Err(config_err!("detect layer predicts {b} boxes but {} anchors are configured", anchors.len()));
        }
        let mut spec = NetworkSpec::from_nodes(self.input, ex.nodes, anchors)?;
        spec.description = Some(self.clone());
        Ok(spec)
    }
}

/// Shape of every node, in node order.
pub fn infer_shapes(input: Shape, nodes: &[LayerNode]) -> Result<IndexMap<String, Shape>> {
    let mut shapes: IndexMap<String, Shape> = IndexMap::new();
    shapes.insert(INPUT.to_string(), input);
    for node in nodes {
        if shapes.contains_key(&node.id) {
            return Err(config_err!("layer id `{}` is used twice", node.id));
        }
        let ins = node
            .inputs
            .iter()
            .map(|i| shapes.get(i).copied().ok_or_else(|| config_err!("layer `{}` reads unknown or later layer `{i}`", node.id)))
            .collect::<Result<Vec<Shape>>>()?;
        let arity_ok = match node.kind {
            LayerKind::Concat => ins.len() >= 2,
            _ => ins.len() == 1,
        };
        if !arity_ok {
            return Err(config_err!("layer `{}` has {} inputs", node.id, ins.len()));
        }
        let x = ins[0];
        let out = match node.kind {
            LayerKind::Conv { kernel, filters, stride } => {
                if filters == 0 || (kernel != 1 && kernel != 3) {
                    return Err(config_err!("layer `{}`: invalid convolution", node.id));
                }
                let g = ConvGeometry::new(x, kernel, stride, Padding::Same).map_err(|e| shape_err!("layer `{}`: {e}", node.id))?;
                Shape::new(filters, g.out_height, g.out_width)
            }
            LayerKind::Detect { boxes, classes } => {
                if boxes == 0 || classes == 0 {
                    return Err(config_err!("detect layer `{}` needs at least one box and one class", node.id));
                }
                if x.is_empty() {
                    return Err(shape_err!("layer `{}`: empty input {x}", node.id));
                }
                Shape::new(boxes * (5 + classes), x.height, x.width)
            }
            LayerKind::BatchNorm | LayerKind::Relu => x,
            LayerKind::MaxPool2x2 => {
                if x.height % 2 != 0 || x.width % 2 != 0 {
                    return Err(shape_err!("layer `{}`: cannot pool odd-sized map {x}", node.id));
                }
                Shape::new(x.channels, x.height / 2, x.width / 2)
            }
            LayerKind::Upsample2x => Shape::new(x.channels, x.height * 2, x.width * 2),
            LayerKind::Concat => {
                if let Some(bad) = ins.iter().find(|s| s.height != x.height || s.width != x.width) {
                    return Err(shape_err!("layer `{}`: cannot concatenate {x} with {bad}", node.id));
                }
                Shape::new(ins.iter().map(|s| s.channels).sum(), x.height, x.width)
            }
        };
        shapes.insert(node.id.clone(), out);
    }
    shapes.shift_remove(INPUT);
    Ok(shapes)
}

impl NetworkSpec {
    /// Validate a raw node list. Nodes must be in topological order.
    pub fn from_nodes(input_shape: Shape, nodes: Vec<LayerNode>, anchors: AnchorSet) -> Result<Self> {
        if input_shape.is_empty() {
            return Err(config_err!("input shape {input_shape} is empty"));
        }
        let shapes: Vec<Shape> = infer_shapes(input_shape, &nodes)?.into_values().collect();
        let index = nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        for n in &nodes {
            if let LayerKind::Detect { boxes, .. } = n.kind {
                if boxes != anchors.len() {
                    return Err(config_err!("detect layer `{}` predicts {boxes} boxes, {} anchors given", n.id, anchors.len()));
                }
            }
        }
        Ok(NetworkSpec { input_shape, nodes, shapes, index, anchors, description: None })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    /// The description this spec was built from, if any.
    pub fn description(&self) -> Option<&NetDescription> {
        self.description.as_ref()
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub(crate) fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Output shape of a node; `input` names the network input.
    pub fn shape_of(&self, id: &str) -> Option<Shape> {
        if id == INPUT {
            return Some(self.input_shape);
        }
        self.index.get(id).map(|&i| self.shapes[i])
    }

    /// Inferred output shape of every node, in node order.
    pub fn shapes(&self) -> IndexMap<String, Shape> {
        self.nodes.iter().zip(&self.shapes).map(|(n, s)| (n.id.clone(), *s)).collect()
    }

    pub(crate) fn node_shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Input channel count of a node's first input.
    pub(crate) fn in_channels(&self, node: &LayerNode) -> usize {
        self.shape_of(&node.inputs[0]).map(|s| s.channels).unwrap_or(0)
    }

    pub fn detect_taps(&self) -> Vec<DetectTap> {
        self.nodes
            .iter()
            .zip(&self.shapes)
            .filter_map(|(n, s)| match n.kind {
                LayerKind::Detect { boxes, classes } => Some(DetectTap {
                    id: n.id.clone(),
                    boxes,
                    classes,
                    grid_height: s.height,
                    grid_width: s.width,
                }),
                _ => None,
            })
            .collect()
    }

    /// Anchors expressed in cells of `tap`'s grid. Priors are stored relative to the coarsest grid.
    pub fn anchors_for(&self, tap: &DetectTap) -> AnchorSet {
        let coarsest = self.detect_taps().iter().map(|t| t.grid_width).min().unwrap_or(tap.grid_width);
        self.anchors.scaled(tap.grid_width as f64 / coarsest as f64)
    }
}
