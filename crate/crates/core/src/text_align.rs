//! Neighborhood text representations and the symmetric graph-text
//! contrastive loss, over caller-supplied embedding tables.

use std::fs::File;
use std::hash::Hasher;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use fnv::FnvHasher;
use thiserror::Error;

use crate::graph::{NodeId, TextAttributedGraph};
use crate::retrieval::tokenize;

const TABLE_MAGIC: &[u8; 8] = b"LKRREMB1";

#[derive(Debug, Error)]
pub enum TextAlignError {
    #[error("row {row} of {matrix} has zero norm and cannot be normalized")]
    ZeroNorm { matrix: &'static str, row: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("batch needs at least 2 rows, got {0}")]
    TooSmall(usize),
    #[error("embedding file {path}: {msg}")]
    File { path: String, msg: String },
}

/// Dense row-major `rows x dim` table.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self, TextAlignError> {
        if data.len() != rows * dim {
            return Err(TextAlignError::Shape(format!(
                "{rows}x{dim} table needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(TextAlignError::NonFinite {
                row: pos / dim.max(1),
                col: pos % dim.max(1),
            });
        }
        Ok(EmbeddingTable { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TextAlignError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(TextAlignError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Binary layout: 8-byte magic, `rows` and `dim` as little-endian u64,
    /// then `rows * dim` little-endian f64 values in row-major order.
    pub fn save(&self, path: &Path) -> Result<(), TextAlignError> {
        let err = |e: std::io::Error| TextAlignError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        };
        let mut out = BufWriter::new(File::create(path).map_err(err)?);
        out.write_all(TABLE_MAGIC).map_err(err)?;
        out.write_all(&(self.rows as u64).to_le_bytes()).map_err(err)?;
        out.write_all(&(self.dim as u64).to_le_bytes()).map_err(err)?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes()).map_err(err)?;
        }
        out.flush().map_err(err)
    }

    pub fn load(path: &Path) -> Result<Self, TextAlignError> {
        let file_err = |msg: String| TextAlignError::File {
            path: path.display().to_string(),
            msg,
        };
        let mut input = BufReader::new(File::open(path).map_err(|e| file_err(e.to_string()))?);
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|e| file_err(e.to_string()))?;
        if &magic != TABLE_MAGIC {
            return Err(file_err("bad magic".into()));
        }
        let mut word = [0u8; 8];
        input.read_exact(&mut word).map_err(|e| file_err(e.to_string()))?;
        let rows = u64::from_le_bytes(word) as usize;
        input.read_exact(&mut word).map_err(|e| file_err(e.to_string()))?;
        let dim = u64::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(rows * dim);
        for _ in 0..rows * dim {
            input
                .read_exact(&mut word)
                .map_err(|e| file_err(format!("truncated payload: {e}")))?;
            data.push(f64::from_le_bytes(word));
        }
        if input.read(&mut word).map_err(|e| file_err(e.to_string()))? != 0 {
            return Err(file_err("trailing bytes after payload".into()));
        }
        Self::new(rows, dim, data)
    }
}

/// `concat(T'_v, mean of T'_u over neighbors u)`; the second half is zero
/// for an isolated node.
pub fn neighborhood_text_representation(
    raw: &EmbeddingTable,
    graph: &TextAttributedGraph,
    v: NodeId,
) -> Vec<f64> {
    let d = raw.dim();
    let mut out = Vec::with_capacity(2 * d);
    out.extend_from_slice(raw.row(v));
    let mut mean = vec![0.0; d];
    let neighbors = graph.neighbors(v);
    for &u in neighbors {
        for (m, x) in mean.iter_mut().zip(raw.row(u)) {
            *m += x;
        }
    }
    if !neighbors.is_empty() {
        let k = neighbors.len() as f64;
        mean.iter_mut().for_each(|m| *m /= k);
    }
    out.extend(mean);
    out
}

/// Neighborhood text table for every node: `N x 2d`.
pub fn neighborhood_text_table(
    raw: &EmbeddingTable,
    graph: &TextAttributedGraph,
) -> Result<EmbeddingTable, TextAlignError> {
    if raw.rows() != graph.node_count() {
        return Err(TextAlignError::Shape(format!(
            "table has {} rows, graph has {} nodes",
            raw.rows(),
            graph.node_count()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..graph.node_count())
        .map(|v| neighborhood_text_representation(raw, graph, v))
        .collect();
    EmbeddingTable::from_rows(&rows)
}

/// Node embeddings `h` and neighborhood text embeddings `t` for the same
/// `N` nodes, row `i` of each describing node `i`.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub h: EmbeddingTable,
    pub t: EmbeddingTable,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_h: Vec<f64>,
    pub grad_t: Vec<f64>,
}

fn normalize_rows(m: &EmbeddingTable, name: &'static str) -> Result<(Vec<f64>, Vec<f64>), TextAlignError> {
    let mut normed = Vec::with_capacity(m.data.len());
    let mut norms = Vec::with_capacity(m.rows);
    for i in 0..m.rows {
        let row = m.row(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(TextAlignError::ZeroNorm { matrix: name, row: i });
        }
        normed.extend(row.iter().map(|x| x / norm));
        norms.push(norm);
    }
    Ok((normed, norms))
}

/// Backprop through `x_hat = x / |x|` row by row.
fn normalize_backward(normed: &[f64], norms: &[f64], grad_normed: &[f64], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(normed.len());
    for ((xh, g), &n) in normed
        .chunks_exact(dim)
        .zip(grad_normed.chunks_exact(dim))
        .zip(norms)
    {
        let proj: f64 = xh.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend(xh.iter().zip(g).map(|(a, b)| (b - a * proj) / n));
    }
    out
}

/// Symmetric cross-entropy over the cosine-similarity logits
/// `G = H_hat T_hat^T / tau` with labels `0..N`, averaged over both
/// directions. Gradients are with respect to the unnormalized inputs.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<ContrastiveOutput, TextAlignError> {
    let n = batch.h.rows();
    if batch.t.rows() != n {
        return Err(TextAlignError::Shape(format!(
            "H has {n} rows, T has {}",
            batch.t.rows()
        )));
    }
    if batch.h.dim() != batch.t.dim() {
        return Err(TextAlignError::Shape(format!(
            "H width {} differs from T width {}",
            batch.h.dim(),
            batch.t.dim()
        )));
    }
    if n < 2 {
        return Err(TextAlignError::TooSmall(n));
    }
    if !(batch.tau > 0.0 && batch.tau.is_finite()) {
        return Err(TextAlignError::Temperature(batch.tau));
    }
    let d = batch.h.dim();
    let tau = batch.tau;
    let (hn, h_norms) = normalize_rows(&batch.h, "H")?;
    let (tn, t_norms) = normalize_rows(&batch.t, "T")?;

    let mut logits = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dotp: f64 = hn[i * d..(i + 1) * d]
                .iter()
                .zip(&tn[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            logits[i * n + j] = dotp / tau;
        }
    }

    // row-wise and column-wise log-softmax
    let mut loss = 0.0;
    let mut grad_logits = vec![0.0; n * n];
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        let row = &logits[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[i];
        for j in 0..n {
            let p = (row[j] - lse).exp();
            grad_logits[i * n + j] += scale * (p - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..n {
        let max = (0..n).map(|i| logits[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..n).map(|i| (logits[i * n + j] - max).exp()).sum::<f64>().ln();
        loss += lse - logits[j * n + j];
        for i in 0..n {
            let p = (logits[i * n + j] - lse).exp();
            grad_logits[i * n + j] += scale * (p - if i == j { 1.0 } else { 0.0 });
        }
    }
    loss *= scale;

    let mut grad_hn = vec![0.0; n * d];
    let mut grad_tn = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..n {
            let g = grad_logits[i * n + j] / tau;
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                grad_hn[i * d + k] += g * tn[j * d + k];
                grad_tn[j * d + k] += g * hn[i * d + k];
            }
        }
    }
    Ok(ContrastiveOutput {
        loss,
        grad_h: normalize_backward(&hn, &h_norms, &grad_hn, d),
        grad_t: normalize_backward(&tn, &t_norms, &grad_tn, d),
    })
}

/// Signed feature hashing of lowercase alphanumeric tokens into `dim`
/// buckets (FNV-1a), L2-normalized. Text without tokens embeds to zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashedBowEmbedder {
    pub dim: usize,
}

impl HashedBowEmbedder {
    pub fn new(dim: usize) -> Result<Self, TextAlignError> {
        if dim == 0 {
            return Err(TextAlignError::Shape("embedding dim must be positive".into()));
        }
        Ok(HashedBowEmbedder { dim })
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in tokenize(text) {
            let mut hasher = FnvHasher::default();
            hasher.write(token.as_bytes());
            let h = hasher.finish();
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    pub fn embed_graph(&self, graph: &TextAttributedGraph) -> EmbeddingTable {
        let mut data = Vec::with_capacity(graph.node_count() * self.dim);
        for text in graph.texts() {
            data.extend(self.embed(text));
        }
        EmbeddingTable {
            rows: graph.node_count(),
            dim: self.dim,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> TextAttributedGraph {
        let nodes = (0..n).map(|i| (i.to_string(), String::new())).collect();
        TextAttributedGraph::from_parts(nodes, edges.iter().copied())
            .unwrap()
            .0
    }

    fn basis(n: usize, d: usize) -> EmbeddingTable {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|k| if k == i % d { 1.0 } else { 0.0 }).collect())
            .collect();
        EmbeddingTable::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_neighbor_mean_is_that_neighbor() {
        let g = graph(2, &[(0, 1)]);
        let t = EmbeddingTable::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(neighborhood_text_representation(&t, &g, 0), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn isolated_node_second_half_zero() {
        let g = graph(2, &[]);
        let t = EmbeddingTable::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(neighborhood_text_representation(&t, &g, 1), vec![3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn star_hub_mean_of_basis_leaves() {
        let g = graph(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        // leaves 1..4 are e_1..e_4 in a 5-dim space, hub is e_0
        let t = basis(5, 5);
        let rep = neighborhood_text_representation(&t, &g, 0);
        assert_eq!(&rep[5..], &[0.0, 0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn identity_pair_closed_form() {
        let batch = ContrastiveBatch {
            h: basis(2, 2),
            t: basis(2, 2),
            tau: 1.0,
        };
        let out = contrastive_loss(&batch).unwrap();
        let e = std::f64::consts::E;
        assert!((out.loss - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((out.loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn zero_row_is_named() {
        let h = EmbeddingTable::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let batch = ContrastiveBatch {
            h,
            t: basis(2, 2),
            tau: 0.07,
        };
        match contrastive_loss(&batch) {
            Err(TextAlignError::ZeroNorm { matrix, row }) => {
                assert_eq!((matrix, row), ("H", 1));
            }
            other => panic!("expected zero-norm error, got {other:?}"),
        }
    }

    #[test]
    fn loss_falls_as_temperature_drops_on_orthonormal_batch() {
        let mut last = f64::INFINITY;
        for tau in [1.0, 0.5, 0.1, 0.01] {
            let out = contrastive_loss(&ContrastiveBatch {
                h: basis(4, 4),
                t: basis(4, 4),
                tau,
            })
            .unwrap();
            assert!(out.loss < last);
            last = out.loss;
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn hashed_bow_is_deterministic_and_unit() {
        let emb = HashedBowEmbedder::new(32).unwrap();
        let a = emb.embed("Magma eruption, magma!");
        assert_eq!(a, emb.embed("magma ERUPTION magma"));
        let norm: f64 = a.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(emb.embed("  ... "), vec![0.0; 32]);
    }

    #[test]
    fn table_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let t = EmbeddingTable::from_rows(&[vec![1.5, -2.0, 0.25], vec![0.0, 3.0, 1e-3]]).unwrap();
        t.save(&path).unwrap();
        assert_eq!(EmbeddingTable::load(&path).unwrap(), t);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 8 + 16 + 6 * 8);
    }
}
