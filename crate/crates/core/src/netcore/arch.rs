use serde::{Deserialize, Serialize};

use super::NetError;

/// Hidden-layer nonlinearity. The output neuron is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
}

/// One sharing entry: matrix position `(row, col)` takes the value of free parameter `param`.
/// Indices are 0-based in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub param: usize,
}

impl Entry {
    pub fn new(row: usize, col: usize, param: usize) -> Self {
        Self { row, col, param }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMap {
    entries: Vec<Entry>,
    param_count: usize,
}

impl LayerMap {
    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// True when every parameter occupies exactly one matrix position.
    pub fn no_share(&self) -> bool {
        let mut seen = vec![0usize; self.param_count];
        for e in &self.entries {
            seen[e.param] += 1;
        }
        seen.iter().all(|&c| c == 1)
    }
}

/// Architecture of a homogeneous network: layer widths, per-layer sharing maps and activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArchDoc", into = "ArchDoc")]
pub struct ArchSpec {
    dims: Vec<usize>,
    layers: Vec<LayerMap>,
    activation: Activation,
    relu_zero_slope: f64,
}

impl ArchSpec {
    /// Validates and builds an architecture. `layers[l]` lists the entries of `W^(l+1)`.
    pub fn new(
        dims: Vec<usize>,
        layers: Vec<Vec<Entry>>,
        activation: Activation,
        relu_zero_slope: f64,
    ) -> Result<Self, NetError> {
        let invalid = |msg: String| Err(NetError::InvalidArch(msg));
        if dims.len() < 3 {
            return invalid(format!("dims: need at least 3 entries (depth >= 2), got {}", dims.len()));
        }
        if dims.len() != layers.len() + 1 {
            return invalid(format!(
                "layers: {} layers given for {} dims (expected {})",
                layers.len(),
                dims.len(),
                dims.len() - 1
            ));
        }
        if *dims.last().unwrap() != 1 {
            return invalid("dims: output width must be 1".into());
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return invalid(format!("dims[{pos}]: width must be positive"));
        }
        if !(0.0..=1.0).contains(&relu_zero_slope) || relu_zero_slope.is_nan() {
            return invalid(format!("relu_zero_slope: {relu_zero_slope} outside [0,1]"));
        }
        let mut maps = Vec::with_capacity(layers.len());
        for (l, entries) in layers.into_iter().enumerate() {
            let (rows, cols) = (dims[l + 1], dims[l]);
            if entries.is_empty() {
                return invalid(format!("layers[{l}]: no entries"));
            }
            let mut positions = std::collections::HashSet::new();
            let mut param_count = 0;
            for (t, e) in entries.iter().enumerate() {
                if e.row >= rows || e.col >= cols {
                    return invalid(format!(
                        "layers[{l}][{t}]: position ({}, {}) outside {rows}x{cols}",
                        e.row + 1,
                        e.col + 1
                    ));
                }
                if !positions.insert((e.row, e.col)) {
                    return invalid(format!(
                        "layers[{l}][{t}]: position ({}, {}) listed twice",
                        e.row + 1,
                        e.col + 1
                    ));
                }
                param_count = param_count.max(e.param + 1);
            }
            let mut used = vec![false; param_count];
            for e in &entries {
                used[e.param] = true;
            }
            if let Some(k) = used.iter().position(|u| !u) {
                return invalid(format!("layers[{l}]: parameter {} never used", k + 1));
            }
            maps.push(LayerMap { entries, param_count });
        }
        Ok(Self {
            dims,
            layers: maps,
            activation,
            relu_zero_slope,
        })
    }

    /// Dense layers with one free parameter per entry, numbered row-major.
    pub fn fully_connected(dims: &[usize], activation: Activation) -> Result<Self, NetError> {
        let layers = dims
            .windows(2)
            .map(|w| dense_entries(w[1], w[0]))
            .collect();
        Self::new(dims.to_vec(), layers, activation, 0.0)
    }

    /// Depth-`depth` diagonal network on `R^d`: diagonal hidden layers, dense last layer.
    pub fn diagonal(d: usize, depth: usize, activation: Activation) -> Result<Self, NetError> {
        if depth < 2 {
            return Err(NetError::InvalidArch("depth: must be at least 2".into()));
        }
        let mut dims = vec![d; depth];
        dims.push(1);
        let mut layers: Vec<Vec<Entry>> = (0..depth - 1).map(|_| diagonal_entries(d)).collect();
        layers.push(dense_entries(1, d));
        Self::new(dims, layers, activation, 0.0)
    }

    /// Depth-2 network with one filter of length `patch` applied to consecutive disjoint patches,
    /// followed by a dense output layer.
    pub fn patch_conv(input_dim: usize, patch: usize, activation: Activation) -> Result<Self, NetError> {
        if patch == 0 || input_dim % patch != 0 {
            return Err(NetError::InvalidArch(format!(
                "dims: input width {input_dim} is not a multiple of patch length {patch}"
            )));
        }
        let hidden = input_dim / patch;
        let layers = vec![patch_entries(hidden, patch), dense_entries(1, hidden)];
        Self::new(vec![input_dim, hidden, 1], layers, activation, 0.0)
    }

    pub fn with_relu_zero_slope(mut self, s0: f64) -> Result<Self, NetError> {
        if !(0.0..=1.0).contains(&s0) {
            return Err(NetError::InvalidArch(format!("relu_zero_slope: {s0} outside [0,1]")));
        }
        self.relu_zero_slope = s0;
        Ok(self)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn layer(&self, l: usize) -> &LayerMap {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[LayerMap] {
        &self.layers
    }

    pub fn param_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|m| m.param_count).collect()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|m| m.param_count).sum()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn relu_zero_slope(&self) -> f64 {
        self.relu_zero_slope
    }

    pub fn no_share(&self) -> bool {
        self.layers.iter().all(LayerMap::no_share)
    }

    /// Every layer is dense with distinct parameters.
    pub fn is_fully_connected(&self) -> bool {
        self.layers.iter().enumerate().all(|(l, m)| {
            m.no_share() && m.entries.len() == self.dims[l] * self.dims[l + 1]
        })
    }

    /// Number of hidden neurons in each hidden layer.
    pub fn hidden_widths(&self) -> &[usize] {
        &self.dims[1..self.dims.len() - 1]
    }

    /// Incoming and outgoing parameter indices of every hidden neuron.
    pub fn neuron_links(&self) -> Vec<NeuronLink> {
        let mut out = Vec::new();
        for (l, &width) in self.hidden_widths().iter().enumerate() {
            for neuron in 0..width {
                let mut incoming: Vec<usize> = self.layers[l]
                    .entries
                    .iter()
                    .filter(|e| e.row == neuron)
                    .map(|e| e.param)
                    .collect();
                let mut outgoing: Vec<usize> = self.layers[l + 1]
                    .entries
                    .iter()
                    .filter(|e| e.col == neuron)
                    .map(|e| e.param)
                    .collect();
                incoming.dedup();
                outgoing.dedup();
                out.push(NeuronLink {
                    layer: l,
                    neuron,
                    incoming,
                    outgoing,
                });
            }
        }
        out
    }
}

/// Parameters feeding into (layer `layer`) and out of (layer `layer + 1`) one hidden neuron.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeuronLink {
    pub layer: usize,
    pub neuron: usize,
    pub incoming: Vec<usize>,
    pub outgoing: Vec<usize>,
}

pub fn dense_entries(rows: usize, cols: usize) -> Vec<Entry> {
    (0..rows)
        .flat_map(|i| (0..cols).map(move |j| Entry::new(i, j, i * cols + j)))
        .collect()
}

pub fn diagonal_entries(d: usize) -> Vec<Entry> {
    (0..d).map(|i| Entry::new(i, i, i)).collect()
}

/// Row `i` applies the shared filter to input coordinates `i*patch .. (i+1)*patch`.
pub fn patch_entries(rows: usize, patch: usize) -> Vec<Entry> {
    (0..rows)
        .flat_map(|i| (0..patch).map(move |j| Entry::new(i, i * patch + j, j)))
        .collect()
}

/// JSON form with 1-based `[i, j, k]` triples.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDoc {
    pub depth: usize,
    pub dims: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub relu_zero_slope: f64,
    pub layers: Vec<Vec<[usize; 3]>>,
}

impl TryFrom<ArchDoc> for ArchSpec {
    type Error = NetError;

    fn try_from(doc: ArchDoc) -> Result<Self, NetError> {
        if doc.depth + 1 != doc.dims.len() {
            return Err(NetError::InvalidArch(format!(
                "depth: {} does not match {} dims",
                doc.depth,
                doc.dims.len()
            )));
        }
        let mut layers = Vec::with_capacity(doc.layers.len());
        for (l, triples) in doc.layers.iter().enumerate() {
            let mut entries = Vec::with_capacity(triples.len());
            for (t, &[i, j, k]) in triples.iter().enumerate() {
                if i == 0 || j == 0 || k == 0 {
                    return Err(NetError::InvalidArch(format!(
                        "layers[{l}][{t}]: indices are 1-based, got [{i}, {j}, {k}]"
                    )));
                }
                entries.push(Entry::new(i - 1, j - 1, k - 1));
            }
            layers.push(entries);
        }
        ArchSpec::new(doc.dims, layers, doc.activation, doc.relu_zero_slope)
    }
}

impl From<ArchSpec> for ArchDoc {
    fn from(arch: ArchSpec) -> Self {
        ArchDoc {
            depth: arch.depth(),
            dims: arch.dims.clone(),
            activation: arch.activation,
            relu_zero_slope: arch.relu_zero_slope,
            layers: arch
                .layers
                .iter()
                .map(|m| m.entries.iter().map(|e| [e.row + 1, e.col + 1, e.param + 1]).collect())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_connected_counts() {
        let arch = ArchSpec::fully_connected(&[3, 3, 2, 1], Activation::Linear).unwrap();
        assert_eq!(arch.depth(), 3);
        assert_eq!(arch.param_counts(), vec![9, 6, 2]);
        assert!(arch.is_fully_connected());
        assert!(arch.no_share());
    }

    #[test]
    fn conv_layer_shares() {
        let arch = ArchSpec::patch_conv(4, 2, Activation::Relu).unwrap();
        assert_eq!(arch.param_counts(), vec![2, 2]);
        assert!(!arch.layer(0).no_share());
        assert!(arch.layer(1).no_share());
        assert!(!arch.is_fully_connected());
    }

    #[test]
    fn rejects_bad_maps() {
        let dup = vec![vec![Entry::new(0, 0, 0), Entry::new(0, 0, 1)], dense_entries(1, 1)];
        assert!(ArchSpec::new(vec![1, 1, 1], dup, Activation::Linear, 0.0).is_err());
        let dead = vec![vec![Entry::new(0, 0, 1)], dense_entries(1, 1)];
        assert!(ArchSpec::new(vec![1, 1, 1], dead, Activation::Linear, 0.0).is_err());
        let out = vec![vec![Entry::new(2, 0, 0)], dense_entries(1, 1)];
        assert!(ArchSpec::new(vec![1, 1, 1], out, Activation::Linear, 0.0).is_err());
        assert!(ArchSpec::new(vec![1, 2], vec![dense_entries(2, 1)], Activation::Linear, 0.0).is_err());
    }

    #[test]
    fn json_roundtrip_is_one_based() {
        let arch = ArchSpec::diagonal(2, 2, Activation::Relu).unwrap();
        let text = serde_json::to_string(&arch).unwrap();
        assert!(text.contains("[[1,1,1],[2,2,2]]"), "{text}");
        let back: ArchSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, arch);
    }

    #[test]
    fn json_errors_name_the_field() {
        let text = r#"{"depth":2,"dims":[2,2,1],"activation":"relu","layers":[[[1,1,1],[3,1,2]],[[1,1,1],[1,2,2]]]}"#;
        let err = serde_json::from_str::<ArchSpec>(text).unwrap_err().to_string();
        assert!(err.contains("layers[0][1]"), "{err}");
    }
}
