//! Graph drawing for the browser demo: node positions from the grid digit
//! vectors (or per-chain rows), edges with arrowheads, and reachability
//! highlighting from a selected node. Pure string rendering, no DOM.

use reachlab_core::graphs::{
    transitive_closure, DirectedGraph, GraphError, GraphSpec, GridEmbedding,
};

const CELL: f64 = 72.0;
const RADIUS: f64 = 15.0;
const PAD: f64 = 40.0;

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("the demo draws grids with k <= 3, got k = {0}")]
    TooManyDimensions(usize),
    #[error("highlight node {node} out of range for {num_nodes} nodes")]
    BadHighlight { node: u32, num_nodes: usize },
}

/// Screen position per node.
fn grid_positions(embedding: &GridEmbedding) -> Result<Vec<(f64, f64)>, LayoutError> {
    let k = embedding.dimensionality();
    if k > 3 {
        return Err(LayoutError::TooManyDimensions(k));
    }
    let mut positions = Vec::with_capacity(embedding.num_nodes());
    let mut max_y = 0.0f64;
    for node in 0..embedding.num_nodes() as u32 {
        let digits = embedding.vector(node)?;
        let x0 = *digits.first().unwrap_or(&0) as f64;
        let x1 = digits.get(1).copied().unwrap_or(0) as f64;
        let x2 = digits.get(2).copied().unwrap_or(0) as f64;
        // Oblique projection for the third axis.
        let x = x0 * CELL + x2 * CELL * 0.45;
        let y = x1 * CELL + x2 * CELL * 0.28;
        max_y = max_y.max(y);
        positions.push((x, y));
    }
    // Flip so the first axis grows rightward and the second upward.
    Ok(positions.into_iter().map(|(x, y)| (x + PAD, max_y - y + PAD)).collect())
}

fn chain_positions(graph: &DirectedGraph) -> Vec<(f64, f64)> {
    let closure = transitive_closure(graph);
    let mut positions = vec![(0.0, 0.0); graph.num_nodes()];
    for (row, component) in graph.weakly_connected_components().iter().enumerate() {
        // Order the component along its path: the head reaches everything.
        let mut ordered: Vec<u32> = component.clone();
        ordered.sort_by_key(|&node| {
            component
                .iter()
                .filter(|&&other| other != node && closure.is_reachable(node, other))
                .count()
        });
        ordered.reverse();
        for (column, &node) in ordered.iter().enumerate() {
            positions[node as usize] =
                (PAD + column as f64 * CELL, PAD + row as f64 * CELL * 0.9);
        }
    }
    positions
}

/// Renders a graph as a self-contained SVG. When `highlight` selects a node,
/// that node is accented and every node reachable from it is tinted.
pub fn graph_svg(spec: &GraphSpec, highlight: Option<u32>) -> Result<String, LayoutError> {
    let (graph, embedding) = spec.generate()?;
    let positions = match &embedding {
        Some(embedding) => grid_positions(embedding)?,
        None => chain_positions(&graph),
    };
    if let Some(node) = highlight {
        if node as usize >= graph.num_nodes() {
            return Err(LayoutError::BadHighlight { node, num_nodes: graph.num_nodes() });
        }
    }
    let reachable: Vec<bool> = match highlight {
        Some(start) => {
            let closure = transitive_closure(&graph);
            (0..graph.num_nodes() as u32)
                .map(|v| v != start && closure.is_reachable(start, v))
                .collect()
        }
        None => vec![false; graph.num_nodes()],
    };

    let width = positions.iter().map(|p| p.0).fold(0.0, f64::max) + PAD;
    let height = positions.iter().map(|p| p.1).fold(0.0, f64::max) + PAD;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width:.0} {height:.0}\" \
         width=\"{width:.0}\" height=\"{height:.0}\">\n"
    ));
    svg.push_str(
        "<defs><marker id=\"arrow\" viewBox=\"0 0 10 10\" refX=\"9\" refY=\"5\" \
         markerWidth=\"7\" markerHeight=\"7\" orient=\"auto-start-reverse\">\
         <path d=\"M 0 0 L 10 5 L 0 10 z\" fill=\"#888888\"/></marker></defs>\n",
    );
    for &(u, v) in graph.edges() {
        let (x1, y1) = positions[u as usize];
        let (x2, y2) = positions[v as usize];
        // Trim the segment so arrowheads touch the node circles.
        let dx = x2 - x1;
        let dy = y2 - y1;
        let len = (dx * dx + dy * dy).sqrt().max(1.0);
        let trim = RADIUS + 2.0;
        let (sx, sy) = (x1 + dx / len * trim, y1 + dy / len * trim);
        let (ex, ey) = (x2 - dx / len * trim, y2 - dy / len * trim);
        svg.push_str(&format!(
            "<line x1=\"{sx:.1}\" y1=\"{sy:.1}\" x2=\"{ex:.1}\" y2=\"{ey:.1}\" \
             stroke=\"#888888\" stroke-width=\"1.6\" marker-end=\"url(#arrow)\"/>\n"
        ));
    }
    for node in 0..graph.num_nodes() as u32 {
        let (x, y) = positions[node as usize];
        let fill = if highlight == Some(node) {
            "#d62728"
        } else if reachable[node as usize] {
            "#98df8a"
        } else {
            "#c6dbef"
        };
        svg.push_str(&format!(
            "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"{RADIUS}\" fill=\"{fill}\" \
             stroke=\"#333333\" stroke-width=\"1\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{node}</text>\n",
            y + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
