//! Taxonomic trees, clustering matrices and the augmented design `X(C, I)`.
//!
//! Every internal node of the taxonomy becomes an extra predictor equal to
//! the sum of the OTU columns below it. A coefficient vector over leaves can
//! then be re-expressed over all nodes (branch coefficients whose root-to-leaf
//! sums give the leaf coefficients); [`parsimonious_representation`] picks
//! the re-expression with the smallest L1 norm.

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurfError};

pub type NodeId = usize;

pub const DEFAULT_LEVELS: [&str; 7] = [
    "kingdom", "phylum", "class", "order", "family", "genus", "species",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    /// Rank name for internal nodes, OTU id for leaves.
    pub name: String,
    /// Semicolon-joined lineage prefix identifying the node.
    pub label: String,
    /// Index into `levels`; `None` for leaves.
    pub rank: Option<usize>,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// OTU column index for leaves.
    pub leaf: Option<usize>,
    /// Pass-through node created by an empty rank.
    pub unnamed: bool,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.leaf.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyTree {
    pub nodes: Vec<TreeNode>,
    pub levels: Vec<String>,
    /// Leaf node of each OTU column.
    pub leaves: Vec<NodeId>,
    /// Nodes without a parent.
    pub roots: Vec<NodeId>,
}

fn clean_segment(raw: &str) -> &str {
    let s = raw.trim();
    // strip rank prefixes such as "p__" or "D_1__"
    if let Some(pos) = s.find("__") {
        let head = &s[..pos];
        let is_prefix = (head.len() == 1 && head.chars().all(|c| c.is_ascii_alphabetic()))
            || (head.starts_with("D_") && head[2..].chars().all(|c| c.is_ascii_digit()));
        if is_prefix {
            return s[pos + 2..].trim();
        }
    }
    s
}

/// Builds a tree from one semicolon-delimited lineage per OTU.
///
/// Identical lineage prefixes share nodes. An empty rank followed by a named
/// rank creates an unnamed pass-through node; trailing empty ranks attach the
/// OTU directly to its deepest named ancestor. All lineages must have the
/// same number of segments.
pub fn parse_taxonomy(otu_ids: &[String], lineages: &[String]) -> Result<TaxonomyTree> {
    parse_taxonomy_with_levels(otu_ids, lineages, None)
}

pub fn parse_taxonomy_with_levels(
    otu_ids: &[String],
    lineages: &[String],
    levels: Option<Vec<String>>,
) -> Result<TaxonomyTree> {
    if otu_ids.len() != lineages.len() {
        return Err(SurfError::DimensionMismatch(format!(
            "{} OTU ids but {} lineages",
            otu_ids.len(),
            lineages.len()
        )));
    }
    if otu_ids.is_empty() {
        return Err(SurfError::Taxonomy("no OTUs supplied".into()));
    }
    let split: Vec<Vec<&str>> = lineages
        .iter()
        .map(|l| l.split(';').map(clean_segment).collect())
        .collect();

    let mut counts: HashMap<usize, usize> = HashMap::new();
    for s in &split {
        *counts.entry(s.len()).or_default() += 1;
    }
    if counts.len() > 1 {
        // most common count wins; ties go to the larger depth
        let modal = counts
            .iter()
            .max_by_key(|(len, c)| (**c, **len))
            .map(|(len, _)| *len)
            .unwrap();
        let offenders = otu_ids
            .iter()
            .zip(&split)
            .filter(|(_, s)| s.len() != modal)
            .map(|(id, s)| format!("{id} ({} ranks, expected {modal})", s.len()))
            .collect();
        return Err(SurfError::InconsistentRanks(offenders));
    }
    let depth = split[0].len();
    let levels = match levels {
        Some(l) => {
            if l.len() != depth {
                return Err(SurfError::Taxonomy(format!(
                    "{} level names for {depth} ranks",
                    l.len()
                )));
            }
            l
        }
        None => (0..depth)
            .map(|i| {
                DEFAULT_LEVELS
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("rank{}", i + 1))
            })
            .collect(),
    };

    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut by_label: HashMap<String, NodeId> = HashMap::new();
    let mut roots = Vec::new();
    let mut leaves = Vec::with_capacity(otu_ids.len());

    let mut seen_ids: HashMap<&str, usize> = HashMap::new();
    for (otu, (id, segs)) in otu_ids.iter().zip(&split).enumerate() {
        if let Some(prev) = seen_ids.insert(id.as_str(), otu) {
            return Err(SurfError::Taxonomy(format!(
                "duplicate OTU id {id} (rows {prev} and {otu})"
            )));
        }
        let last_named = segs.iter().rposition(|s| !s.is_empty());
        let mut parent: Option<NodeId> = None;
        let mut label = String::new();
        if let Some(last) = last_named {
            for (rank, seg) in segs.iter().enumerate().take(last + 1) {
                if rank > 0 {
                    label.push(';');
                }
                label.push_str(seg);
                let node = match by_label.get(&label) {
                    Some(&n) => n,
                    None => {
                        let nid = nodes.len();
                        nodes.push(TreeNode {
                            id: nid,
                            name: seg.to_string(),
                            label: label.clone(),
                            rank: Some(rank),
                            parent,
                            children: Vec::new(),
                            leaf: None,
                            unnamed: seg.is_empty(),
                        });
                        match parent {
                            Some(p) => nodes[p].children.push(nid),
                            None => roots.push(nid),
                        }
                        by_label.insert(label.clone(), nid);
                        nid
                    }
                };
                parent = Some(node);
            }
        }
        let nid = nodes.len();
        nodes.push(TreeNode {
            id: nid,
            name: id.clone(),
            label: id.clone(),
            rank: None,
            parent,
            children: Vec::new(),
            leaf: Some(otu),
            unnamed: false,
        });
        match parent {
            Some(p) => nodes[p].children.push(nid),
            None => roots.push(nid),
        }
        leaves.push(nid);
    }

    Ok(TaxonomyTree {
        nodes,
        levels,
        leaves,
        roots,
    })
}

/// Reads a taxonomy TSV with header columns `otu_id` and `lineage`.
pub fn read_taxonomy_tsv<R: Read>(reader: R) -> Result<(Vec<String>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| SurfError::Taxonomy(format!("taxonomy file lacks a `{name}` column")))
    };
    let id_col = find("otu_id")?;
    let lin_col = find("lineage")?;
    let mut ids = Vec::new();
    let mut lineages = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        ids.push(rec.get(id_col).unwrap_or("").trim().to_string());
        lineages.push(rec.get(lin_col).unwrap_or("").to_string());
    }
    Ok((ids, lineages))
}

impl TaxonomyTree {
    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn find(&self, label: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.label == label)
    }

    pub fn depth(&self, id: NodeId) -> usize {
        let mut d = 0;
        let mut cur = self.nodes[id].parent;
        while let Some(p) = cur {
            d += 1;
            cur = self.nodes[p].parent;
        }
        d
    }

    /// Nodes ordered so that every child precedes its parent.
    pub fn post_order(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack: Vec<(NodeId, bool)> = self.roots.iter().rev().map(|&r| (r, false)).collect();
        while let Some((id, expanded)) = stack.pop() {
            if expanded {
                out.push(id);
            } else {
                stack.push((id, true));
                for &c in self.nodes[id].children.iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        out
    }

    /// Internal nodes, deepest level first, then in order of creation.
    pub fn internal_bottom_up(&self) -> Vec<NodeId> {
        let mut ids: Vec<(usize, NodeId)> = self
            .nodes
            .iter()
            .filter(|n| !n.is_leaf())
            .map(|n| (self.depth(n.id), n.id))
            .collect();
        ids.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        ids.into_iter().map(|(_, id)| id).collect()
    }

    /// OTU column indices of the leaves below `id` (or `id` itself).
    pub fn leaves_under(&self, id: NodeId) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(v) = stack.pop() {
            let node = &self.nodes[v];
            if let Some(l) = node.leaf {
                out.push(l);
            }
            stack.extend(node.children.iter().copied());
        }
        out.sort_unstable();
        out
    }

    /// Root-to-node path, excluding the implicit super-root.
    pub fn ancestors_inclusive(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = self.nodes[id].parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.nodes[p].parent;
        }
        path.reverse();
        path
    }
}

/// Binary OTU-by-cluster membership at one taxonomic level.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringMatrix {
    pub level: String,
    /// Tree node of each cluster. Leaves with no ancestor at this level form
    /// singleton clusters represented by the leaf node itself.
    pub clusters: Vec<NodeId>,
    /// Cluster index of each OTU.
    pub membership: Vec<usize>,
}

impl ClusteringMatrix {
    pub fn to_dense(&self) -> Array2<f64> {
        let mut c = Array2::zeros((self.membership.len(), self.clusters.len()));
        for (i, &j) in self.membership.iter().enumerate() {
            c[[i, j]] = 1.0;
        }
        c
    }
}

pub fn clustering_matrix(tree: &TaxonomyTree, level: usize) -> Result<ClusteringMatrix> {
    if level >= tree.levels.len() {
        return Err(SurfError::Taxonomy(format!(
            "level {level} out of range (tree has {})",
            tree.levels.len()
        )));
    }
    let mut clusters = Vec::new();
    let mut index: HashMap<NodeId, usize> = HashMap::new();
    let mut membership = Vec::with_capacity(tree.leaf_count());
    for &leaf in &tree.leaves {
        let anc = tree
            .ancestors_inclusive(leaf)
            .into_iter()
            .find(|&a| tree.nodes[a].rank == Some(level))
            .unwrap_or(leaf);
        let j = *index.entry(anc).or_insert_with(|| {
            clusters.push(anc);
            clusters.len() - 1
        });
        membership.push(j);
    }
    Ok(ClusteringMatrix {
        level: tree.levels[level].clone(),
        clusters,
        membership,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnSource {
    Leaf { node: NodeId, otu: usize },
    Internal { node: NodeId },
    Passthrough { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDesign {
    pub matrix: Array2<f64>,
    pub column_map: Vec<ColumnSource>,
    pub labels: Vec<String>,
    /// Internal nodes removed as duplicates, with the retained column they equal.
    pub dropped: Vec<(NodeId, usize)>,
}

fn columns_equal(a: &[f64], b: &[f64]) -> bool {
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale;
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Builds `X(C, I)`: one column per OTU, then one per internal node
/// (deepest first) unless it equals a column already kept.
pub fn build_augmented_design(x: ArrayView2<f64>, tree: &TaxonomyTree) -> Result<AugmentedDesign> {
    let (n, p) = x.dim();
    if p != tree.leaf_count() {
        return Err(SurfError::DimensionMismatch(format!(
            "design has {p} columns but the taxonomy has {} leaves",
            tree.leaf_count()
        )));
    }
    let mut agg: Vec<Option<Vec<f64>>> = vec![None; tree.nodes.len()];
    for id in tree.post_order() {
        let node = &tree.nodes[id];
        let col = match node.leaf {
            Some(otu) => x.column(otu).to_vec(),
            None => {
                let mut s = vec![0.0; n];
                for &c in &node.children {
                    let cc = agg[c].as_ref().expect("children first");
                    s.iter_mut().zip(cc).for_each(|(a, b)| *a += b);
                }
                s
            }
        };
        agg[id] = Some(col);
    }

    let mut kept: Vec<Vec<f64>> = Vec::new();
    let mut column_map = Vec::new();
    let mut labels = Vec::new();
    for (otu, &leaf) in tree.leaves.iter().enumerate() {
        kept.push(agg[leaf].clone().unwrap());
        column_map.push(ColumnSource::Leaf { node: leaf, otu });
        labels.push(tree.nodes[leaf].label.clone());
    }
    let mut dropped = Vec::new();
    for id in tree.internal_bottom_up() {
        let col = agg[id].take().unwrap();
        if let Some(dup) = kept.iter().position(|k| columns_equal(k, &col)) {
            dropped.push((id, dup));
            continue;
        }
        kept.push(col);
        column_map.push(ColumnSource::Internal { node: id });
        labels.push(tree.nodes[id].label.clone());
    }
    let q = kept.len();
    let mut matrix = Array2::zeros((n, q));
    for (j, c) in kept.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            matrix[[i, j]] = *v;
        }
    }
    Ok(AugmentedDesign {
        matrix,
        column_map,
        labels,
        dropped,
    })
}

impl AugmentedDesign {
    pub fn ncols(&self) -> usize {
        self.column_map.len()
    }

    /// Appends covariates that take no part in the aggregation.
    pub fn with_passthrough(mut self, columns: ArrayView2<f64>, names: &[String]) -> Result<Self> {
        if columns.nrows() != self.matrix.nrows() || columns.ncols() != names.len() {
            return Err(SurfError::DimensionMismatch(
                "passthrough columns do not match the design".into(),
            ));
        }
        let old = self.matrix.ncols();
        let mut m = Array2::zeros((self.matrix.nrows(), old + columns.ncols()));
        m.slice_mut(ndarray::s![.., ..old]).assign(&self.matrix);
        m.slice_mut(ndarray::s![.., old..]).assign(&columns);
        self.matrix = m;
        for (i, name) in names.iter().enumerate() {
            self.column_map.push(ColumnSource::Passthrough { index: i });
            self.labels.push(name.clone());
        }
        Ok(self)
    }

    /// Tree node behind an augmented column, if any.
    pub fn node_of(&self, column: usize) -> Option<NodeId> {
        match self.column_map.get(column)? {
            ColumnSource::Leaf { node, .. } | ColumnSource::Internal { node } => Some(*node),
            ColumnSource::Passthrough { .. } => None,
        }
    }

    /// Writes the design as CSV with a header row of node labels.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.labels)?;
        for row in self.matrix.rows() {
            w.write_record(row.iter().map(|v| format!("{v}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedCoefficients {
    /// Branch coefficient of every tree node, indexed by `NodeId`.
    pub alpha: Vec<f64>,
    /// Root-to-leaf sums of `alpha`, one per OTU.
    pub implied_beta: Vec<f64>,
}

impl AugmentedCoefficients {
    /// Coefficients on the retained columns of `design`; a dropped node's
    /// coefficient moves onto the column it duplicates.
    pub fn on_design(&self, design: &AugmentedDesign) -> Vec<f64> {
        let mut out: Vec<f64> = (0..design.ncols())
            .map(|j| design.node_of(j).map_or(0.0, |n| self.alpha[n]))
            .collect();
        for &(node, col) in &design.dropped {
            out[col] += self.alpha[node];
        }
        out
    }
}

/// Median interval `[k-th, (k+1)-th]` of `2k` sorted endpoints.
fn median_interval(endpoints: &mut [f64]) -> (f64, f64) {
    endpoints.sort_by(f64::total_cmp);
    let k = endpoints.len() / 2;
    (endpoints[k - 1], endpoints[k])
}

/// Minimum-L1 branch coefficients reproducing leaf coefficients `beta`.
///
/// Node values are chosen by exact tree dynamic programming: bottom-up, each
/// internal node gets the interval of values minimising the cost of its
/// subtree; top-down, each node takes the point of that interval's
/// refinement (given its parent's value, the implicit root being 0) closest
/// to zero. At a single level this is the median of `{0}` and the child
/// values.
pub fn parsimonious_representation(beta: &[f64], tree: &TaxonomyTree) -> Result<AugmentedCoefficients> {
    if beta.len() != tree.leaf_count() {
        return Err(SurfError::DimensionMismatch(format!(
            "{} coefficients for {} leaves",
            beta.len(),
            tree.leaf_count()
        )));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(SurfError::NonFinite("leaf coefficients".into()));
    }
    let m = tree.nodes.len();
    let mut interval = vec![(0.0, 0.0); m];
    for id in tree.post_order() {
        let node = &tree.nodes[id];
        interval[id] = match node.leaf {
            Some(otu) => (beta[otu], beta[otu]),
            None => {
                let mut e: Vec<f64> = node
                    .children
                    .iter()
                    .flat_map(|&c| [interval[c].0, interval[c].1])
                    .collect();
                median_interval(&mut e)
            }
        };
    }

    let mut value = vec![0.0; m];
    let mut order: Vec<NodeId> = tree.post_order();
    order.reverse();
    for id in order {
        let node = &tree.nodes[id];
        value[id] = match node.leaf {
            Some(otu) => beta[otu],
            None => {
                let parent_value = node.parent.map_or(0.0, |p| value[p]);
                let mut e: Vec<f64> = node
                    .children
                    .iter()
                    .flat_map(|&c| [interval[c].0, interval[c].1])
                    .collect();
                e.push(parent_value);
                e.push(parent_value);
                let (lo, hi) = median_interval(&mut e);
                0.0f64.clamp(lo, hi)
            }
        };
    }

    let alpha: Vec<f64> = (0..m)
        .map(|id| value[id] - tree.nodes[id].parent.map_or(0.0, |p| value[p]))
        .collect();
    let implied_beta = implied_leaf_coefficients(&alpha, tree);
    Ok(AugmentedCoefficients {
        alpha,
        implied_beta,
    })
}

/// Root-to-leaf sums of node coefficients.
pub fn implied_leaf_coefficients(alpha: &[f64], tree: &TaxonomyTree) -> Vec<f64> {
    tree.leaves
        .iter()
        .map(|&leaf| {
            tree.ancestors_inclusive(leaf)
                .into_iter()
                .map(|a| alpha[a])
                .sum()
        })
        .collect()
}

/// L1 norm of the node coefficients (penalty per unit lambda).
pub fn penalty(alpha: &AugmentedCoefficients) -> f64 {
    alpha.alpha.iter().map(|a| a.abs()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafReport {
    /// Effective coefficient of each OTU.
    pub effective: Vec<f64>,
    /// One line per selected internal node describing the equality it imposes.
    pub constraints: Vec<String>,
    /// One line per affected OTU listing the contributing nodes.
    pub leaf_terms: Vec<String>,
}

/// Effective per-OTU coefficients of a model over tree nodes: each OTU
/// receives the sum of the coefficients of its selected ancestors and itself.
pub fn map_selection_to_leaves(selected: &[(NodeId, f64)], tree: &TaxonomyTree) -> LeafReport {
    let coef: HashMap<NodeId, f64> = {
        let mut m = HashMap::new();
        for &(id, c) in selected {
            *m.entry(id).or_insert(0.0) += c;
        }
        m
    };
    let mut effective = vec![0.0; tree.leaf_count()];
    let mut leaf_terms = Vec::new();
    for (otu, &leaf) in tree.leaves.iter().enumerate() {
        let mut terms = Vec::new();
        let mut total = 0.0;
        for a in tree.ancestors_inclusive(leaf) {
            if let Some(&c) = coef.get(&a) {
                total += c;
                terms.push(format!("{} ({c})", tree.nodes[a].label));
            }
        }
        effective[otu] = total;
        if !terms.is_empty() {
            leaf_terms.push(format!(
                "{}: {total} = {}",
                tree.nodes[leaf].label,
                terms.join(" + ")
            ));
        }
    }
    let mut constraints = Vec::new();
    let mut sel: Vec<&(NodeId, f64)> = selected.iter().collect();
    sel.sort_by_key(|(id, _)| *id);
    for &&(id, c) in &sel {
        let node = &tree.nodes[id];
        if node.is_leaf() {
            continue;
        }
        let names: Vec<String> = tree
            .leaves_under(id)
            .into_iter()
            .map(|otu| tree.nodes[tree.leaves[otu]].label.clone())
            .collect();
        constraints.push(format!(
            "{} [{}]: OTUs {} share a common coefficient component {c}",
            node.label,
            node.rank.map_or("?", |r| tree.levels[r].as_str()),
            names.join(", ")
        ));
    }
    LeafReport {
        effective,
        constraints,
        leaf_terms,
    }
}

/// [`map_selection_to_leaves`] for coefficients on augmented design columns.
/// Passthrough columns are ignored.
pub fn map_design_selection(
    design: &AugmentedDesign,
    selected: &[(usize, f64)],
    tree: &TaxonomyTree,
) -> LeafReport {
    let nodes: Vec<(NodeId, f64)> = selected
        .iter()
        .filter_map(|&(col, c)| design.node_of(col).map(|n| (n, c)))
        .collect();
    map_selection_to_leaves(&nodes, tree)
}
