//! Soft decision trees.
//!
//! A tree is stored as a flat preorder node list. Every internal node routes a
//! sample right with probability `logistic((x[var] - cut) / bandwidth)` and
//! left with the complement, so a sample reaches every leaf with some mass.
//! Leaves are indexed in depth-first left-to-right order, which is exactly the
//! order they appear in the preorder list; sufficient statistics and wire
//! messages rely on this ordering.
//!
//! ```text
//! preorder:  [Split(x0 < .5), Leaf(a), Split(x1 < .3), Leaf(b), Leaf(c)]
//! leaves:     a = 0, b = 1, c = 2
//! ```

use std::ops::Range;

use crate::error::{invalid, Result, SbartError};

/// Bytes per serialized node: flag, variable, cutpoint, leaf value.
pub const NODE_WIRE_BYTES: usize = 1 + 4 + 8 + 8;

/// A decision rule at an internal node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRule {
    pub var: usize,
    pub cut: f64,
}

impl SplitRule {
    pub fn new(var: usize, cut: f64) -> Self {
        Self { var, cut }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Node {
    Leaf { value: f64 },
    Split { rule: SplitRule },
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf { .. })
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Returns `(left, right)` routing probabilities with a single exponential.
#[inline]
pub(crate) fn route(x: f64, cut: f64, bandwidth: f64) -> (f64, f64) {
    let z = (x - cut) / bandwidth;
    let e = (-z.abs()).exp();
    let big = 1.0 / (1.0 + e);
    let small = e / (1.0 + e);
    if z >= 0.0 {
        (small, big)
    } else {
        (big, small)
    }
}

/// Probability that `x` is routed to the right child of a split at `cut`.
pub fn gate(x: f64, cut: f64, bandwidth: f64) -> Result<f64> {
    if !x.is_finite() || !cut.is_finite() {
        return invalid(format!("gate input must be finite (x = {x}, cut = {cut})"));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return invalid(format!("bandwidth must be positive, got {bandwidth}"));
    }
    Ok(route(x, cut, bandwidth).1)
}

/// Per-leaf routing probabilities of one sample; sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafProbVector {
    pub probs: Vec<f64>,
}

impl LeafProbVector {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftTree {
    nodes: Vec<Node>,
    bandwidth: f64,
}

impl SoftTree {
    /// A single-leaf tree.
    pub fn stump(value: f64, bandwidth: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value }],
            bandwidth,
        }
    }

    /// Builds a tree from a preorder node list, checking that it is a complete
    /// binary tree.
    pub fn from_preorder(nodes: Vec<Node>, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return invalid(format!("bandwidth must be positive, got {bandwidth}"));
        }
        if nodes.is_empty() || subtree_end(&nodes, 0) != Some(nodes.len()) {
            return invalid("node list is not a complete preorder binary tree");
        }
        Ok(Self { nodes, bandwidth })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn set_bandwidth(&mut self, bandwidth: f64) -> Result<()> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return invalid(format!("bandwidth must be positive, got {bandwidth}"));
        }
        self.bandwidth = bandwidth;
        Ok(())
    }

    pub fn with_bandwidth(&self, bandwidth: f64) -> Result<Self> {
        let mut t = self.clone();
        t.set_bandwidth(bandwidth)?;
        Ok(t)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn internal_count(&self) -> usize {
        self.nodes.len() - self.leaf_count()
    }

    pub fn is_stump(&self) -> bool {
        self.nodes.len() == 1
    }

    /// Depth of every node, root at 0.
    pub fn depths(&self) -> Vec<usize> {
        let mut depths = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0usize];
        for node in &self.nodes {
            let d = stack.pop().expect("well-formed tree");
            depths.push(d);
            if !node.is_leaf() {
                stack.push(d + 1);
                stack.push(d + 1);
            }
        }
        depths
    }

    pub fn leaf_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].is_leaf())
            .collect()
    }

    pub fn internal_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| !self.nodes[i].is_leaf())
            .collect()
    }

    /// Internal nodes whose two children are both leaves.
    pub fn prunable_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.is_prunable(i))
            .collect()
    }

    pub fn is_prunable(&self, node: usize) -> bool {
        node + 2 < self.nodes.len()
            && !self.nodes[node].is_leaf()
            && self.nodes[node + 1].is_leaf()
            && self.nodes[node + 2].is_leaf()
    }

    /// One past the last preorder index of the subtree rooted at `node`.
    pub fn subtree_end(&self, node: usize) -> usize {
        subtree_end(&self.nodes, node).expect("well-formed tree")
    }

    /// Leaf indices covered by the subtree rooted at `node`.
    pub fn leaf_range(&self, node: usize) -> Range<usize> {
        let first = self.nodes[..node].iter().filter(|n| n.is_leaf()).count();
        let end = self.subtree_end(node);
        let count = self.nodes[node..end].iter().filter(|n| n.is_leaf()).count();
        first..first + count
    }

    /// Preorder index of the leaf with the given leaf index.
    pub fn leaf_node_index(&self, leaf: usize) -> Option<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_leaf())
            .nth(leaf)
            .map(|(i, _)| i)
    }

    pub fn leaf_params(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { value } => Some(*value),
                Node::Split { .. } => None,
            })
            .collect()
    }

    pub fn set_leaf_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.leaf_count() {
            return invalid(format!(
                "expected {} leaf parameters, got {}",
                self.leaf_count(),
                params.len()
            ));
        }
        let mut it = params.iter();
        for node in &mut self.nodes {
            if let Node::Leaf { value } = node {
                *value = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Number of internal nodes splitting on each of `p` variables.
    pub fn add_split_counts(&self, counts: &mut [u64]) {
        for node in &self.nodes {
            if let Node::Split { rule } = node {
                counts[rule.var] += 1;
            }
        }
    }

    /// Splits the leaf at preorder index `node` with `rule`. Both children
    /// inherit the parent's value, so the tree's prediction is unchanged.
    pub fn grow(&self, node: usize, rule: SplitRule) -> Result<Self> {
        let value = match self.nodes.get(node) {
            Some(Node::Leaf { value }) => *value,
            _ => return invalid(format!("node {node} is not a leaf")),
        };
        let mut nodes = Vec::with_capacity(self.nodes.len() + 2);
        nodes.extend_from_slice(&self.nodes[..node]);
        nodes.push(Node::Split { rule });
        nodes.push(Node::Leaf { value });
        nodes.push(Node::Leaf { value });
        nodes.extend_from_slice(&self.nodes[node + 1..]);
        Ok(Self {
            nodes,
            bandwidth: self.bandwidth,
        })
    }

    /// Collapses the split at `node`, whose children must both be leaves.
    pub fn prune(&self, node: usize) -> Result<Self> {
        if !self.is_prunable(node) {
            return invalid(format!("node {node} does not have two leaf children"));
        }
        let value = match (&self.nodes[node + 1], &self.nodes[node + 2]) {
            (Node::Leaf { value: a }, Node::Leaf { value: b }) => 0.5 * (a + b),
            _ => unreachable!(),
        };
        let mut nodes = Vec::with_capacity(self.nodes.len() - 2);
        nodes.extend_from_slice(&self.nodes[..node]);
        nodes.push(Node::Leaf { value });
        nodes.extend_from_slice(&self.nodes[node + 3..]);
        Ok(Self {
            nodes,
            bandwidth: self.bandwidth,
        })
    }

    /// Replaces the rule at internal node `node`.
    pub fn change(&self, node: usize, rule: SplitRule) -> Result<Self> {
        match self.nodes.get(node) {
            Some(Node::Split { .. }) => {
                let mut t = self.clone();
                t.nodes[node] = Node::Split { rule };
                Ok(t)
            }
            _ => invalid(format!("node {node} is not an internal node")),
        }
    }

    /// Fills `out` with the leaf probabilities of `x`. `stack` is scratch space.
    #[inline]
    pub(crate) fn fill_leaf_probs(&self, x: &[f64], stack: &mut Vec<f64>, out: &mut Vec<f64>) {
        out.clear();
        stack.clear();
        stack.push(1.0);
        for node in &self.nodes {
            let mass = stack.pop().expect("well-formed tree");
            match node {
                Node::Leaf { .. } => out.push(mass),
                Node::Split { rule } => {
                    let (left, right) = route(x[rule.var], rule.cut, self.bandwidth);
                    // Right is visited after the whole left subtree.
                    stack.push(mass * right);
                    stack.push(mass * left);
                }
            }
        }
    }

    /// Probability of reaching each leaf, in leaf order.
    pub fn leaf_probabilities(&self, x: &[f64]) -> LeafProbVector {
        let mut out = Vec::with_capacity(self.leaf_count());
        let mut stack = Vec::with_capacity(8);
        self.fill_leaf_probs(x, &mut stack, &mut out);
        LeafProbVector { probs: out }
    }

    /// Soft prediction: leaf values weighted by routing probability.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut stack = Vec::with_capacity(8);
        self.predict_with(x, &mut stack)
    }

    #[inline]
    pub(crate) fn predict_with(&self, x: &[f64], stack: &mut Vec<f64>) -> f64 {
        stack.clear();
        stack.push(1.0);
        let mut acc = 0.0;
        for node in &self.nodes {
            let mass = stack.pop().expect("well-formed tree");
            match node {
                Node::Leaf { value } => acc += mass * value,
                Node::Split { rule } => {
                    let (left, right) = route(x[rule.var], rule.cut, self.bandwidth);
                    stack.push(mass * right);
                    stack.push(mass * left);
                }
            }
        }
        acc
    }

    /// Checks variable indices against the covariate count.
    pub fn validate(&self, p: usize) -> Result<()> {
        for node in &self.nodes {
            if let Node::Split { rule } = node {
                if rule.var >= p {
                    return invalid(format!("split variable {} out of range (p = {p})", rule.var));
                }
                if !rule.cut.is_finite() {
                    return invalid("non-finite cutpoint");
                }
            }
        }
        Ok(())
    }

    /// Appends the little-endian preorder encoding followed by the bandwidth.
    pub fn encode(&self, buf: &mut Vec<u8>) {
        for node in &self.nodes {
            match node {
                Node::Leaf { value } => {
                    buf.push(1);
                    buf.extend_from_slice(&0u32.to_le_bytes());
                    buf.extend_from_slice(&0f64.to_le_bytes());
                    buf.extend_from_slice(&value.to_le_bytes());
                }
                Node::Split { rule } => {
                    buf.push(0);
                    buf.extend_from_slice(&(rule.var as u32).to_le_bytes());
                    buf.extend_from_slice(&rule.cut.to_le_bytes());
                    buf.extend_from_slice(&0f64.to_le_bytes());
                }
            }
        }
        buf.extend_from_slice(&self.bandwidth.to_le_bytes());
    }

    pub fn encoded_len(&self) -> usize {
        self.nodes.len() * NODE_WIRE_BYTES + 8
    }

    /// Decodes one tree from the front of `bytes`, returning it with the
    /// number of bytes consumed. The preorder list is self-delimiting.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut nodes = Vec::new();
        let mut pos = 0;
        let mut open = 1usize;
        while open > 0 {
            let chunk = bytes
                .get(pos..pos + NODE_WIRE_BYTES)
                .ok_or_else(|| SbartError::InvalidArgument("truncated tree encoding".into()))?;
            let var = u32::from_le_bytes(chunk[1..5].try_into().unwrap()) as usize;
            let cut = f64::from_le_bytes(chunk[5..13].try_into().unwrap());
            let value = f64::from_le_bytes(chunk[13..21].try_into().unwrap());
            match chunk[0] {
                1 => {
                    nodes.push(Node::Leaf { value });
                    open -= 1;
                }
                0 => {
                    nodes.push(Node::Split {
                        rule: SplitRule { var, cut },
                    });
                    open += 1;
                }
                flag => return invalid(format!("bad node flag {flag}")),
            }
            pos += NODE_WIRE_BYTES;
        }
        let bw = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| SbartError::InvalidArgument("missing bandwidth".into()))?;
        let bandwidth = f64::from_le_bytes(bw.try_into().unwrap());
        Ok((Self::from_preorder(nodes, bandwidth)?, pos + 8))
    }
}

fn subtree_end(nodes: &[Node], start: usize) -> Option<usize> {
    let mut open = 1usize;
    let mut i = start;
    while open > 0 {
        match nodes.get(i)? {
            Node::Leaf { .. } => open -= 1,
            Node::Split { .. } => open += 1,
        }
        i += 1;
    }
    Some(i)
}

/// A sum-of-trees ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    pub trees: Vec<SoftTree>,
}

impl Forest {
    pub fn new(trees: Vec<SoftTree>) -> Result<Self> {
        if trees.is_empty() {
            return invalid("a forest needs at least one tree");
        }
        Ok(Self { trees })
    }

    /// `m` single-leaf trees with value zero.
    pub fn stumps(m: usize, bandwidth: f64) -> Result<Self> {
        Self::new(vec![SoftTree::stump(0.0, bandwidth); m])
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut stack = Vec::with_capacity(8);
        self.trees.iter().map(|t| t.predict_with(x, &mut stack)).sum()
    }

    pub fn split_counts(&self, p: usize) -> Vec<u64> {
        let mut counts = vec![0u64; p];
        for t in &self.trees {
            t.add_split_counts(&mut counts);
        }
        counts
    }

    pub fn encode(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&(self.trees.len() as u32).to_le_bytes());
        for t in &self.trees {
            t.encode(buf);
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let head = bytes
            .get(..4)
            .ok_or_else(|| SbartError::InvalidArgument("truncated forest encoding".into()))?;
        let m = u32::from_le_bytes(head.try_into().unwrap()) as usize;
        let mut pos = 4;
        let mut trees = Vec::with_capacity(m);
        for _ in 0..m {
            let (t, used) = SoftTree::decode(&bytes[pos..])?;
            trees.push(t);
            pos += used;
        }
        Ok((Self::new(trees)?, pos))
    }
}
