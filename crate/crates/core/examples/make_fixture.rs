//! Regenerate the shipped planted fixture under `fixtures/`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use linkrr::fixture::{planted_graph, PlantedConfig};
use linkrr::graph::save_graph;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let fx = planted_graph(&PlantedConfig::default())?;
    let g = &fx.graph;
    let mut nodes = BufWriter::new(File::create(dir.join("planted_nodes.jsonl"))?);
    for v in 0..g.node_count() {
        let row = serde_json::json!({"id": g.name(v), "text": g.text(v)});
        writeln!(nodes, "{row}")?;
    }
    nodes.flush()?;
    let mut edges = BufWriter::new(File::create(dir.join("planted_edges.jsonl"))?);
    for e in g.edges() {
        let row = serde_json::json!({"src": g.name(e.0), "dst": g.name(e.1)});
        writeln!(edges, "{row}")?;
    }
    edges.flush()?;
    save_graph(g, &dir.join("planted_graph.json"))?;
    fx.split.save(&dir.join("planted_split.json"))?;
    println!(
        "{} nodes, {} edges, {} test edges",
        g.node_count(),
        g.edge_count(),
        fx.split.test.len()
    );
    Ok(())
}
