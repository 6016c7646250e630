//! Line-delimited JSON graph files: one header line, then one line per node
//! in ascending user order.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::SimilarityGraph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphHeader {
    pub snapshot_version: u64,
    pub config_hash: String,
    pub n_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphLine {
    pub user: u64,
    pub neighbors: Vec<(u64, f64)>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn parse_graph_header(line: &str) -> Result<GraphHeader> {
    serde_json::from_str(line).map_err(|e| parse_err(1, e.to_string()))
}

fn check_line(g: &GraphLine, line_no: usize) -> Result<()> {
    let mut prev: Option<&(u64, f64)> = None;
    for n in &g.neighbors {
        if n.0 == g.user {
            return Err(parse_err(line_no, format!("self-edge on user {}", g.user)));
        }
        if !(-1.0..=1.0).contains(&n.1) {
            return Err(parse_err(line_no, format!("similarity {} outside [-1, 1]", n.1)));
        }
        if let Some(p) = prev {
            if n.1 > p.1 || (n.1 == p.1 && n.0 <= p.0) {
                return Err(parse_err(line_no, "neighbors not in descending similarity, ascending id order"));
            }
        }
        prev = Some(n);
    }
    Ok(())
}

pub fn write_graph<W: Write>(graph: &SimilarityGraph, mut w: W) -> Result<()> {
    let header = GraphHeader {
        snapshot_version: graph.snapshot_version,
        config_hash: graph.config_hash.clone(),
        n_nodes: graph.edges.len(),
    };
    let io = |e| Error::io("<graph output>", e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for (&user, neighbors) in &graph.edges {
        serde_json::to_writer(
            &mut w,
            &GraphLine {
                user,
                neighbors: neighbors.clone(),
            },
        )?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_graph<R: BufRead>(r: R) -> Result<SimilarityGraph> {
    let mut lines = r.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => parse_graph_header(&l.map_err(|e| Error::io("<graph input>", e))?)?,
        None => return Err(parse_err(1, "missing header line")),
    };
    let mut edges = BTreeMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<graph input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GraphLine = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        check_line(&g, line_no)?;
        if edges.keys().next_back().is_some_and(|&last| last >= g.user) {
            return Err(parse_err(line_no, "users not in ascending order"));
        }
        edges.insert(g.user, g.neighbors);
    }
    if edges.len() != header.n_nodes {
        return Err(parse_err(1, format!("header says {} nodes, found {}", header.n_nodes, edges.len())));
    }
    Ok(SimilarityGraph {
        snapshot_version: header.snapshot_version,
        config_hash: header.config_hash,
        edges,
    })
}

pub fn parse_graph(text: &str) -> Result<SimilarityGraph> {
    read_graph(text.as_bytes())
}
