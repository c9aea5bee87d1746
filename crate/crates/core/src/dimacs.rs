//! DIMACS ascii graph format (`p edge n m`, `e i j`, 1-based vertices).

use std::fmt::Write as _;

use crate::clique::CliqueGraph;
use crate::error::{Error, Result};

/// Parses a DIMACS graph. Comment lines (`c ...`) and blank lines are
/// skipped, `p col` is accepted as a synonym of `p edge`, and repeated edges
/// are merged.
pub fn read(text: &str) -> Result<CliqueGraph> {
    let mut graph: Option<CliqueGraph> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |msg: String| Error::Parse { line, msg };
        let mut tok = raw.split_whitespace();
        match tok.next() {
            None | Some("c") => continue,
            Some("p") => {
                if graph.is_some() {
                    return Err(err("duplicate problem line".into()));
                }
                match tok.next() {
                    Some("edge") | Some("col") => {}
                    other => return Err(err(format!("expected 'p edge', found format {other:?}"))),
                }
                let n = parse_count(tok.next(), "vertex count").map_err(err)?;
                parse_count(tok.next(), "edge count").map_err(err)?;
                if tok.next().is_some() {
                    return Err(err("trailing tokens on problem line".into()));
                }
                graph = Some(CliqueGraph::edgeless(n));
            }
            Some("e") => {
                let g = graph
                    .as_mut()
                    .ok_or_else(|| err("edge before problem line".into()))?;
                let n = g.n();
                let i = parse_vertex(tok.next(), n).map_err(err)?;
                let j = parse_vertex(tok.next(), n).map_err(err)?;
                if tok.next().is_some() {
                    return Err(err("trailing tokens on edge line".into()));
                }
                if i == j {
                    return Err(err(format!("self loop on vertex {}", i + 1)));
                }
                g.add_edge(i, j);
            }
            Some(other) => return Err(err(format!("unknown line type {other:?}"))),
        }
    }
    graph.ok_or(Error::Parse {
        line: text.lines().count().max(1),
        msg: "missing problem line".into(),
    })
}

fn parse_count(tok: Option<&str>, what: &str) -> std::result::Result<usize, String> {
    let t = tok.ok_or_else(|| format!("missing {what}"))?;
    t.parse().map_err(|_| format!("invalid {what} {t:?}"))
}

fn parse_vertex(tok: Option<&str>, n: usize) -> std::result::Result<usize, String> {
    let v = parse_count(tok, "vertex")?;
    if v == 0 || v > n {
        return Err(format!("vertex {v} outside 1..={n}"));
    }
    Ok(v - 1)
}

/// Writes the header followed by one `e i j` line per edge, `i < j`, in
/// lexicographic order.
pub fn write(g: &CliqueGraph) -> String {
    let edges = g.edges();
    let mut out = format!("p edge {} {}\n", g.n(), edges.len());
    for (i, j) in edges {
        writeln!(out, "e {} {}", i + 1, j + 1).unwrap();
    }
    out
}
