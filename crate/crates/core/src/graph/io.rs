//! Line-oriented TSV storage.
//!
//! ```text
//! nodes.tsv           source_id  node_id  node_type  category  feat,feat,...
//! edges.tsv           source_id  node_id  node_id    [weight]
//! correspondence.tsv  category   source_a cluster_a  source_b  cluster_b
//! ```
//!
//! Ids are non-negative decimal integers. The feature column may be empty or
//! absent; the edge weight defaults to 1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Correspondence, Edge, MultiSourceGraph, Node, SourceGraph};
use crate::error::{IcpaError, Result};

struct RawNode {
    id: usize,
    node_type: String,
    category: usize,
    features: Vec<u64>,
    line: usize,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> IcpaError {
    IcpaError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid {name} {raw:?}")))
}

/// Reads a graph from the two TSV files and validates it.
pub fn load(nodes_path: impl AsRef<Path>, edges_path: impl AsRef<Path>) -> Result<MultiSourceGraph> {
    let nodes_path = nodes_path.as_ref();
    let edges_path = edges_path.as_ref();

    let text = fs::read_to_string(nodes_path)?;
    let mut raw: BTreeMap<usize, Vec<RawNode>> = BTreeMap::new();
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        if l.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = l.split('\t').collect();
        if cols.len() != 4 && cols.len() != 5 {
            return Err(parse_err(
                nodes_path,
                line,
                format!("expected 4 or 5 tab-separated columns, found {}", cols.len()),
            ));
        }
        let source: usize = field(nodes_path, line, "source_id", cols[0])?;
        let id: usize = field(nodes_path, line, "node_id", cols[1])?;
        let node_type = cols[2].trim().to_string();
        if node_type.is_empty() {
            return Err(parse_err(nodes_path, line, "empty node_type"));
        }
        let category: usize = field(nodes_path, line, "category", cols[3])?;
        let mut features = Vec::new();
        if let Some(f) = cols.get(4) {
            for tok in f.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                features.push(field(nodes_path, line, "feature id", tok)?);
            }
        }
        raw.entry(source).or_default().push(RawNode {
            id,
            node_type,
            category,
            features,
            line,
        });
    }
    if raw.is_empty() {
        return Err(IcpaError::Empty("nodes file has no rows"));
    }
    let m = raw.len();
    if raw.keys().copied().ne(0..m) {
        return Err(IcpaError::Invalid(format!(
            "source ids must be dense 0..{m}, found {:?}",
            raw.keys().collect::<Vec<_>>()
        )));
    }

    let type_names: Vec<String> = raw
        .values()
        .flatten()
        .map(|n| n.node_type.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let num_categories = raw.values().flatten().map(|n| n.category + 1).max().unwrap_or(0);

    let mut per_source_nodes = Vec::with_capacity(m);
    for (s, mut rows) in raw {
        rows.sort_by_key(|r| r.id);
        let mut nodes = Vec::with_capacity(rows.len());
        for (pos, r) in rows.into_iter().enumerate() {
            if r.id != pos {
                let msg = if r.id < pos {
                    format!("duplicate node id {} in source {s}", r.id)
                } else {
                    format!("node ids of source {s} must be dense; id {pos} is missing")
                };
                return Err(parse_err(nodes_path, r.line, msg));
            }
            let node_type = type_names.binary_search(&r.node_type).expect("collected above");
            nodes.push(Node {
                id: r.id,
                category: r.category,
                node_type,
                features: r.features,
                degree: 0.0,
            });
        }
        per_source_nodes.push(nodes);
    }

    let text = fs::read_to_string(edges_path)?;
    let mut per_source_edges: Vec<Vec<Edge>> = vec![Vec::new(); m];
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        if l.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = l.split('\t').collect();
        if cols.len() != 3 && cols.len() != 4 {
            return Err(parse_err(
                edges_path,
                line,
                format!("expected 3 or 4 tab-separated columns, found {}", cols.len()),
            ));
        }
        let source: usize = field(edges_path, line, "source_id", cols[0])?;
        let u: usize = field(edges_path, line, "node_id", cols[1])?;
        let v: usize = field(edges_path, line, "node_id", cols[2])?;
        let weight: f64 = match cols.get(3).map(|w| w.trim()).filter(|w| !w.is_empty()) {
            Some(w) => field(edges_path, line, "weight", w)?,
            None => 1.0,
        };
        if source >= m {
            return Err(parse_err(edges_path, line, format!("unknown source {source}")));
        }
        let n = per_source_nodes[source].len();
        for end in [u, v] {
            if end >= n {
                return Err(IcpaError::DanglingEndpoint {
                    source_id: source,
                    node: end,
                });
            }
        }
        if u == v {
            return Err(parse_err(edges_path, line, format!("self-loop on node {u}")));
        }
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(parse_err(edges_path, line, format!("invalid weight {weight}")));
        }
        per_source_edges[source].push(Edge { u, v, weight });
    }

    let sources = per_source_nodes
        .into_iter()
        .zip(per_source_edges)
        .enumerate()
        .map(|(j, (nodes, edges))| SourceGraph::new(j, nodes, edges))
        .collect::<Result<Vec<_>>>()?;
    MultiSourceGraph::new(sources, num_categories, type_names)
}

/// Writes the graph in the format read by [`load`]. Weights are always
/// written explicitly.
pub fn write(
    graph: &MultiSourceGraph,
    nodes_path: impl AsRef<Path>,
    edges_path: impl AsRef<Path>,
) -> Result<()> {
    let mut nodes = String::new();
    let mut edges = String::new();
    for (j, s) in graph.sources().iter().enumerate() {
        for n in s.nodes() {
            let feats = n
                .features
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(
                nodes,
                "{j}\t{}\t{}\t{}\t{feats}",
                n.id,
                graph.type_names()[n.node_type],
                n.category
            );
        }
        for e in s.edges() {
            let _ = writeln!(edges, "{j}\t{}\t{}\t{}", e.u, e.v, e.weight);
        }
    }
    fs::write(nodes_path, nodes)?;
    fs::write(edges_path, edges)?;
    Ok(())
}

pub fn write_correspondence(rows: &[Correspondence], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.category, r.source_a, r.cluster_a, r.source_b, r.cluster_b
        );
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_correspondence(path: impl AsRef<Path>) -> Result<Vec<Correspondence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        if l.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = l.split('\t').collect();
        if cols.len() != 5 {
            return Err(parse_err(path, line, "expected 5 tab-separated columns"));
        }
        rows.push(Correspondence {
            category: field(path, line, "category", cols[0])?,
            source_a: field(path, line, "source_a", cols[1])?,
            cluster_a: field(path, line, "cluster_a", cols[2])?,
            source_b: field(path, line, "source_b", cols[3])?,
            cluster_b: field(path, line, "cluster_b", cols[4])?,
        });
    }
    Ok(rows)
}
