//! K-nearest-neighbour graphs over feature-map nodes and the max-relative
//! aggregation / multi-head update performed on them.
//!
//! Nodes are the spatial positions of a feature map in row-major order; node
//! `i`'s feature vector is row `i` of a [`NodeFeatures`] matrix.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// `[n, d]` node feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatures<F: Float = f32> {
    matrix: Tensor<F>,
}

impl<F: Float> NodeFeatures<F> {
    pub fn new(matrix: Tensor<F>) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::shape(format!(
                "node features must be [n, d], got {:?}",
                matrix.shape()
            )));
        }
        Ok(Self { matrix })
    }

    pub fn from_rows(n: usize, d: usize, data: Vec<F>) -> Result<Self> {
        Self::new(Tensor::new(vec![n, d], data)?)
    }

    /// Flattens one `[C, H, W]` feature map into `H*W` nodes of dimension `C`.
    pub fn from_feature_map(chw: &[F], c: usize, h: usize, w: usize) -> Result<Self> {
        if chw.len() != c * h * w {
            return Err(Error::shape(format!(
                "feature map buffer of {} values for {c}x{h}x{w}",
                chw.len()
            )));
        }
        let n = h * w;
        let mut rows = vec![F::ZERO; n * c];
        for ch in 0..c {
            for i in 0..n {
                rows[i * c + ch] = chw[ch * n + i];
            }
        }
        Self::from_rows(n, c, rows)
    }

    pub fn n(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[F] {
        let d = self.d();
        &self.matrix.data()[i * d..(i + 1) * d]
    }

    pub fn matrix(&self) -> &Tensor<F> {
        &self.matrix
    }
}

/// Neighbour table: row `i` lists the nodes whose edges point into node `i`.
///
/// Graphs built over a single node set put the node itself first. Graphs
/// built against a separate candidate set (the pooled grid used when the
/// candidate-reduction ratio is above 1) index into that set instead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    k_effective: usize,
    num_nodes: usize,
    num_candidates: usize,
    neighbors: Vec<u32>,
}

impl KnnGraph {
    pub fn k_effective(&self) -> usize {
        self.k_effective
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_candidates(&self) -> usize {
        self.num_candidates
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.neighbors[i * self.k_effective..(i + 1) * self.k_effective]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.neighbors.chunks(self.k_effective)
    }

    /// Builds a graph from an explicit table. Entries must index the
    /// candidate set and rows must not repeat a neighbour.
    pub fn from_table(num_candidates: usize, rows: &[Vec<u32>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(Error::arg("neighbour table needs at least one row and column"));
        }
        let mut neighbors = Vec::with_capacity(rows.len() * k);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::arg(format!("row {i} has {} neighbours, expected {k}", r.len())));
            }
            for (a, &j) in r.iter().enumerate() {
                if j as usize >= num_candidates {
                    return Err(Error::GraphMismatch(format!(
                        "row {i} references node {j} of {num_candidates}"
                    )));
                }
                if r[..a].contains(&j) {
                    return Err(Error::arg(format!("row {i} repeats neighbour {j}")));
                }
            }
            neighbors.extend_from_slice(r);
        }
        Ok(Self {
            k_effective: k,
            num_nodes: rows.len(),
            num_candidates,
            neighbors,
        })
    }

    /// Debug dump: one line per node, space-separated neighbour indices.
    pub fn write_text<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(u32::to_string).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        self.write_text(&mut out).expect("writing to a Vec cannot fail");
        String::from_utf8(out).expect("ascii")
    }
}

#[inline]
fn sq_dist<F: Float>(a: &[F], b: &[F]) -> F {
    let mut s = F::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        let t = x - y;
        s += t * t;
    }
    s
}

/// `[n, n]` matrix of squared Euclidean distances between node rows.
pub fn pairwise_sq_dist<F: Float>(f: &NodeFeatures<F>) -> Tensor<F> {
    let n = f.n();
    let mut out = vec![F::ZERO; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(f.row(i), f.row(j));
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    Tensor::new(vec![n, n], out).expect("n >= 1")
}

/// Bounded ascending list of `(distance, index)`; ties keep the earlier index.
struct TopK<F> {
    cap: usize,
    items: Vec<(F, u32)>,
}

impl<F: Float> TopK<F> {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            items: Vec::with_capacity(cap + 1),
        }
    }

    /// Candidates must be offered in increasing index order.
    #[inline]
    fn offer(&mut self, d: F, j: u32) {
        if self.cap == 0 {
            return;
        }
        if self.items.len() == self.cap {
            match self.items.last() {
                Some(&(worst, _)) if d < worst => {}
                _ => return,
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|&(e, _)| e <= d);
        self.items.insert(pos, (d, j));
    }
}

/// KNN graph over one node set. Each row holds the node itself followed by
/// its `min(k, n) - 1` nearest other nodes, ties broken by lower index.
pub fn knn_graph<F: Float>(f: &NodeFeatures<F>, k: usize) -> Result<KnnGraph> {
    let n = f.n();
    if n == 0 {
        return Err(Error::arg("knn graph over zero nodes"));
    }
    if k == 0 {
        return Err(Error::arg("knn graph needs k >= 1"));
    }
    let ke = k.min(n);
    let mut neighbors = Vec::with_capacity(n * ke);
    let mut top = TopK::new(ke - 1);
    for i in 0..n {
        top.items.clear();
        let xi = f.row(i);
        for j in (0..n).filter(|&j| j != i) {
            top.offer(sq_dist(xi, f.row(j)), j as u32);
        }
        neighbors.push(i as u32);
        neighbors.extend(top.items.iter().map(|&(_, j)| j));
    }
    Ok(KnnGraph {
        k_effective: ke,
        num_nodes: n,
        num_candidates: n,
        neighbors,
    })
}

/// KNN graph from every query node to its `min(k, m)` nearest candidates.
pub fn knn_graph_between<F: Float>(
    queries: &NodeFeatures<F>,
    candidates: &NodeFeatures<F>,
    k: usize,
) -> Result<KnnGraph> {
    let (n, m) = (queries.n(), candidates.n());
    if n == 0 || m == 0 {
        return Err(Error::arg("knn graph over zero nodes"));
    }
    if k == 0 {
        return Err(Error::arg("knn graph needs k >= 1"));
    }
    if queries.d() != candidates.d() {
        return Err(Error::shape(format!(
            "query dim {} vs candidate dim {}",
            queries.d(),
            candidates.d()
        )));
    }
    let ke = k.min(m);
    let mut neighbors = Vec::with_capacity(n * ke);
    let mut top = TopK::new(ke);
    for i in 0..n {
        top.items.clear();
        let xi = queries.row(i);
        for j in 0..m {
            top.offer(sq_dist(xi, candidates.row(j)), j as u32);
        }
        neighbors.extend(top.items.iter().map(|&(_, j)| j));
    }
    Ok(KnnGraph {
        k_effective: ke,
        num_nodes: n,
        num_candidates: m,
        neighbors,
    })
}

/// Max-relative aggregation: row `i` of the `[n, 2d]` result is `x_i`
/// followed by the elementwise max over neighbours `j` of `x_j - x_i`.
pub fn mr_aggregate<F: Float>(f: &NodeFeatures<F>, g: &KnnGraph) -> Result<Tensor<F>> {
    let (out, _) = mr_aggregate_between(f, f, g)?;
    Tensor::new(vec![f.n(), 2 * f.d()], out)
}

/// Max-relative aggregation with neighbours drawn from `candidates`.
///
/// Also returns, for every `(node, channel)`, the candidate index that won
/// the max; the backward pass routes gradients through it.
pub(crate) fn mr_aggregate_between<F: Float>(
    nodes: &NodeFeatures<F>,
    candidates: &NodeFeatures<F>,
    g: &KnnGraph,
) -> Result<(Vec<F>, Vec<u32>)> {
    let (n, d) = (nodes.n(), nodes.d());
    if g.num_nodes != n || g.num_candidates != candidates.n() {
        return Err(Error::GraphMismatch(format!(
            "graph over {} nodes / {} candidates applied to {n} nodes / {} candidates",
            g.num_nodes,
            g.num_candidates,
            candidates.n()
        )));
    }
    if candidates.d() != d {
        return Err(Error::shape(format!("node dim {d} vs candidate dim {}", candidates.d())));
    }
    let mut out = vec![F::ZERO; n * 2 * d];
    let mut arg = vec![0u32; n * d];
    for i in 0..n {
        let xi = nodes.row(i);
        let row = &mut out[i * 2 * d..(i + 1) * 2 * d];
        row[..d].copy_from_slice(xi);
        let nb = g.row(i);
        let best = &mut row[d..];
        let first = candidates.row(nb[0] as usize);
        for c in 0..d {
            best[c] = first[c] - xi[c];
            arg[i * d + c] = nb[0];
        }
        for &j in &nb[1..] {
            let xj = candidates.row(j as usize);
            for c in 0..d {
                let v = xj[c] - xi[c];
                if v > best[c] {
                    best[c] = v;
                    arg[i * d + c] = j;
                }
            }
        }
    }
    Ok((out, arg))
}

/// Per-head affine maps of the multi-head update.
///
/// Head `m` maps columns `[m*in/h, (m+1)*in/h)` of the aggregated features
/// through `weights[m]` (`[in/h, out/h]`) plus `biases[m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateHeads<F: Float = f32> {
    pub weights: Vec<Tensor<F>>,
    pub biases: Vec<Tensor<F>>,
}

impl<F: Float> UpdateHeads<F> {
    pub fn new(weights: Vec<Tensor<F>>, biases: Vec<Tensor<F>>) -> Result<Self> {
        let h = weights.len();
        if h == 0 || biases.len() != h {
            return Err(Error::arg(format!(
                "{h} head weights with {} head biases",
                biases.len()
            )));
        }
        let shape = weights[0].shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!("head weight must be rank 2, got {shape:?}")));
        }
        for (w, b) in weights.iter().zip(&biases) {
            if w.shape() != shape.as_slice() || b.shape() != [shape[1]] {
                return Err(Error::shape("heads must share one weight and bias shape"));
            }
        }
        Ok(Self { weights, biases })
    }

    /// Reads the heads out of a grouped `1x1` convolution with `groups == h`.
    pub fn from_grouped_conv(weight: &Tensor<F>, bias: &Tensor<F>, groups: usize) -> Result<Self> {
        let (oc, icg, kh, kw) = weight.dims4()?;
        if kh != 1 || kw != 1 || groups == 0 || oc % groups != 0 {
            return Err(Error::arg("grouped conv is not a 1x1 multi-head update"));
        }
        let ocg = oc / groups;
        let mut ws = Vec::with_capacity(groups);
        let mut bs = Vec::with_capacity(groups);
        for g in 0..groups {
            let w = Tensor::from_fn(vec![icg, ocg], |idx| {
                let (r, c) = (idx / ocg, idx % ocg);
                weight.data()[(g * ocg + c) * icg + r]
            });
            ws.push(w);
            bs.push(Tensor::new(vec![ocg], bias.data()[g * ocg..(g + 1) * ocg].to_vec())?);
        }
        Self::new(ws, bs)
    }

    pub fn heads(&self) -> usize {
        self.weights.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.len() * self.weights[0].shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.len() * self.weights[0].shape()[1]
    }
}

/// Splits the `[n, 2d]` aggregated features into contiguous column blocks,
/// applies each head's affine map and concatenates the results.
pub fn head_split_update<F: Float>(agg: &Tensor<F>, heads: &UpdateHeads<F>) -> Result<Tensor<F>> {
    let &[n, cols] = agg.shape() else {
        return Err(Error::shape(format!("aggregated features must be [n, 2d], got {:?}", agg.shape())));
    };
    let h = heads.heads();
    if cols % h != 0 || cols != heads.in_dim() {
        return Err(Error::arg(format!(
            "{cols} aggregated columns cannot be split into {h} heads of width {}",
            heads.in_dim() / h
        )));
    }
    let (ih, oh) = (cols / h, heads.out_dim() / h);
    let d_out = heads.out_dim();
    let mut out = vec![F::ZERO; n * d_out];
    for (m, (w, b)) in heads.weights.iter().zip(&heads.biases).enumerate() {
        for i in 0..n {
            let o = &mut out[i * d_out + m * oh..i * d_out + (m + 1) * oh];
            o.copy_from_slice(b.data());
        }
        F::gemm(
            n,
            ih,
            oh,
            F::ONE,
            &agg.data()[m * ih..],
            cols as isize,
            1,
            w.data(),
            oh as isize,
            1,
            F::ONE,
            &mut out[m * oh..],
            d_out as isize,
            1,
        );
    }
    Tensor::new(vec![n, d_out], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(n: usize, d: usize, data: &[f64]) -> NodeFeatures<f64> {
        NodeFeatures::from_rows(n, d, data.to_vec()).unwrap()
    }

    #[test]
    fn distance_basics() {
        let f = feats(2, 2, &[0.0, 0.0, 3.0, 4.0]);
        let d = pairwise_sq_dist(&f);
        assert_eq!(d.data(), &[0.0, 25.0, 25.0, 0.0]);
    }

    #[test]
    fn distance_matches_double_loop() {
        let data: Vec<f64> = (0..15).map(|i| ((i * 7919) % 101) as f64 / 13.0 - 3.0).collect();
        let f = feats(5, 3, &data);
        let got = pairwise_sq_dist(&f);
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for c in 0..3 {
                    s += (data[i * 3 + c] - data[j * 3 + c]).powi(2);
                }
                assert_eq!(got.data()[i * 5 + j], s);
            }
        }
    }

    #[test]
    fn k_one_is_self_only() {
        let f = feats(3, 1, &[0.0, 1.0, 2.0]);
        let g = knn_graph(&f, 1).unwrap();
        assert_eq!(g.k_effective(), 1);
        assert_eq!(g.rows().collect::<Vec<_>>(), vec![&[0][..], &[1], &[2]]);
    }

    #[test]
    fn k_clamps_to_node_count() {
        let f = feats(3, 1, &[5.0, -1.0, 2.0]);
        let g = knn_graph(&f, 9).unwrap();
        assert_eq!(g.k_effective(), 3);
        for (i, row) in g.rows().enumerate() {
            assert_eq!(row[0] as usize, i);
            let mut sorted = row.to_vec();
            sorted.sort();
            assert_eq!(sorted, vec![0, 1, 2]);
        }
    }

    #[test]
    fn line_clusters_pair_up() {
        let f = feats(4, 1, &[0.0, 1.0, 10.0, 11.0]);
        let g = knn_graph(&f, 2).unwrap();
        assert_eq!(g.rows().collect::<Vec<_>>(), vec![&[0, 1][..], &[1, 0], &[2, 3], &[3, 2]]);
    }

    #[test]
    fn identical_nodes_are_well_defined() {
        let f = feats(4, 2, &[1.0; 8]);
        let g = knn_graph(&f, 3).unwrap();
        assert_eq!(g.row(2), &[2, 0, 1]);
        let agg = mr_aggregate(&f, &g).unwrap();
        for i in 0..4 {
            assert_eq!(&agg.data()[i * 4..i * 4 + 4], &[1.0, 1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn zero_nodes_rejected() {
        let empty = NodeFeatures::<f64> {
            matrix: Tensor::zeros(vec![1, 1]),
        };
        assert!(knn_graph(&empty, 0).is_err());
        let t = Tensor::<f64>::zeros(vec![3]);
        assert!(NodeFeatures::new(t).is_err());
    }

    #[test]
    fn two_node_aggregate() {
        let f = feats(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let g = knn_graph(&f, 2).unwrap();
        let agg = mr_aggregate(&f, &g).unwrap();
        assert_eq!(agg.shape(), &[2, 4]);
        assert_eq!(agg.data(), &[1.0, 0.0, 0.0, 2.0, 0.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn aggregate_rejects_foreign_graph() {
        let f = feats(2, 1, &[0.0, 1.0]);
        let g = KnnGraph::from_table(3, &[vec![0, 2], vec![1, 0], vec![2, 1]]).unwrap();
        assert!(matches!(mr_aggregate(&f, &g), Err(Error::GraphMismatch(_))));
        assert!(KnnGraph::from_table(2, &[vec![0, 5]]).is_err());
    }

    #[test]
    fn between_graph_has_no_forced_self() {
        let q = feats(2, 1, &[0.0, 9.0]);
        let c = feats(3, 1, &[10.0, 1.0, 5.0]);
        let g = knn_graph_between(&q, &c, 2).unwrap();
        assert_eq!(g.row(0), &[1, 2]);
        assert_eq!(g.row(1), &[0, 2]);
    }

    #[test]
    fn text_dump_format() {
        let f = feats(3, 1, &[0.0, 1.0, 3.0]);
        let g = knn_graph(&f, 2).unwrap();
        assert_eq!(g.to_text(), "0 1\n1 0\n2 1\n");
    }

    fn identity(n: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    #[test]
    fn identity_heads_are_identity() {
        let agg = Tensor::from_fn(vec![3, 4], |i| i as f64 - 2.5);
        let one = UpdateHeads::new(vec![identity(4)], vec![Tensor::zeros(vec![4])]).unwrap();
        assert_eq!(head_split_update(&agg, &one).unwrap(), agg);
        let two = UpdateHeads::new(vec![identity(2), identity(2)], vec![Tensor::zeros(vec![2]); 2]).unwrap();
        assert_eq!(head_split_update(&agg, &two).unwrap(), agg);
    }

    #[test]
    fn two_heads_pick_blocks() {
        let agg = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w1 = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let w2 = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let heads = UpdateHeads::new(vec![w1, w2], vec![Tensor::zeros(vec![1]); 2]).unwrap();
        assert_eq!(head_split_update(&agg, &heads).unwrap().data(), &[1.0, 4.0]);
    }

    #[test]
    fn head_divisibility_enforced() {
        let agg = Tensor::<f64>::zeros(vec![2, 6]);
        let heads = UpdateHeads::new(vec![identity(4)], vec![Tensor::zeros(vec![4])]).unwrap();
        assert!(matches!(head_split_update(&agg, &heads), Err(Error::Argument(_))));
    }
}
