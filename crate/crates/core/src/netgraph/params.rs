use crate::tensor::Shape;

use super::{LayerKind, NetworkSpec};

/// Convolution weight totals per module, counted as `M · N · k²` per layer.
///
/// Biases and batch-norm parameters are excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub per_module: Vec<(String, u64)>,
    pub total: u64,
}

impl ParamReport {
    pub fn module(&self, name: &str) -> Option<u64> {
        self.per_module.iter().find(|(m, _)| m == name).map(|&(_, t)| t)
    }
}

pub fn count_params(spec: &NetworkSpec) -> ParamReport {
    let mut per_module: Vec<(String, u64)> = Vec::new();
    for node in spec.nodes() {
        let Some((filters, kernel, _)) = node.kind.conv_params() else { continue };
        let t = (spec.in_channels(node) * filters * kernel * kernel) as u64;
        match per_module.iter_mut().find(|(m, _)| *m == node.module) {
            Some((_, sum)) => *sum += t,
            None => per_module.push((node.module.clone(), t)),
        }
    }
    let total = per_module.iter().map(|(_, t)| t).sum();
    ParamReport { per_module, total }
}

/// Everything an optimizer updates: conv weights and biases, batch-norm gamma and beta.
pub fn count_all_trainables(spec: &NetworkSpec) -> u64 {
    spec.nodes()
        .iter()
        .zip(spec.node_shapes())
        .map(|(node, shape)| match node.kind.conv_params() {
            Some((filters, kernel, _)) => (spec.in_channels(node) * filters * kernel * kernel + filters) as u64,
            None if node.kind == LayerKind::BatchNorm => 2 * shape.channels as u64,
            None => 0,
        })
        .sum()
}

/// Values in a weights file: the trainables plus batch-norm running mean and variance.
pub fn count_stored_values(spec: &NetworkSpec) -> u64 {
    let bn_channels: u64 = spec
        .nodes()
        .iter()
        .zip(spec.node_shapes())
        .filter(|(n, _)| n.kind == LayerKind::BatchNorm)
        .map(|(_, s)| s.channels as u64)
        .sum();
    count_all_trainables(spec) + 2 * bn_channels
}

/// One line of a module summary table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleRow {
    pub name: String,
    /// Output of the module's last layer.
    pub output: Shape,
    /// Output of a max pool applied directly to the module, when there is one.
    pub pooled: Option<Shape>,
    /// `(kernel, stride, filters)` of each convolution, in order.
    pub convs: Vec<(usize, usize, usize)>,
    pub params: u64,
}

/// Modules that own convolutions, in network order.
pub fn module_rows(spec: &NetworkSpec) -> Vec<ModuleRow> {
    let report = count_params(spec);
    report
        .per_module
        .iter()
        .map(|(name, params)| {
            let members: Vec<_> = spec.nodes().iter().filter(|n| &n.module == name).collect();
            let last = members.last().expect("module has nodes");
            let pooled = spec
                .nodes()
                .iter()
                .find(|n| n.kind == LayerKind::MaxPool2x2 && n.inputs[0] == last.id)
                .and_then(|n| spec.shape_of(&n.id));
            let convs = members
                .iter()
                .filter_map(|n| n.kind.conv_params().map(|(f, k, s)| (k, s, f)))
                .collect();
            ModuleRow { name: name.clone(), output: spec.shape_of(&last.id).unwrap(), pooled, convs, params: *params }
        })
        .collect()
}
