//! Fully connected segment graph with triplet-driven edge and node updates.
//!
//! Nodes are segments (mean-pooled context rows). Every ordered pair of
//! segments carries an edge built from relative geometry, optionally passed
//! through [`num2vec`]. Each layer forms `g_ij = W_g [v_i ‖ e_ij ‖ v_j]`,
//! replaces the edge with `ReLU(W_e g_ij)` and updates nodes by multi-head
//! attention over `g_ij` with a residual connection.
//!
//! Pair tensors `[N, N, k]` are stored as `[N*N, k]` with row `i*N + j`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FusedContext;
use crate::docmodel::{Document, TextSegment};
use crate::error::{Error, Result};
use crate::params::{glorot, Bound, ParamStore};
use crate::tape::{Tape, Var};

pub const NUM2VEC_SLOTS: usize = 8;
pub const EDGE_ITEMS: usize = 5;
const NUM2VEC_MAX: u64 = 99_999_999;
const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_node: usize,
    pub d_edge: usize,
    pub use_num2vec: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 8,
            d_node: 64,
            d_edge: 32,
            use_num2vec: true,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_node == 0 || self.d_edge == 0 {
            return Err(Error::config("graph.d_node", "node and edge dims must be positive"));
        }
        if self.num_heads == 0 || self.d_node % self.num_heads != 0 {
            return Err(Error::config(
                "graph.num_heads",
                format!("must divide d_node {}", self.d_node),
            ));
        }
        Ok(())
    }

    /// Width of the raw per-edge input vector.
    pub fn edge_input_dim(&self) -> usize {
        if self.use_num2vec {
            EDGE_ITEMS * NUM2VEC_SLOTS
        } else {
            EDGE_ITEMS
        }
    }

    /// Width of the triplet feature `g_ij`.
    pub fn d_triplet(&self) -> usize {
        self.d_node
    }
}

/// Eight-slot digit encoding of a number.
///
/// `|value|` is rounded to four decimals (saturating at `9999.9999`); slots
/// 0–3 hold the integer digits right-aligned, slots 4–7 the fractional
/// digits, each digit scaled by 0.1. Negative inputs negate the vector.
pub fn num2vec(value: f64) -> Result<[f64; NUM2VEC_SLOTS]> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("num2vec input {value}")));
    }
    let scaled = (value.abs() * 1e4).round();
    let mut n = if scaled >= NUM2VEC_MAX as f64 {
        NUM2VEC_MAX
    } else {
        scaled as u64
    };
    let sign = if value < 0.0 { -1.0 } else { 1.0 };
    let mut out = [0.0; NUM2VEC_SLOTS];
    for slot in out.iter_mut().rev() {
        *slot = sign * 0.1 * (n % 10) as f64;
        n /= 10;
    }
    Ok(out)
}

/// Relative geometry of segment `j` seen from segment `i`:
/// `[Δcx / h_i, Δcy / h_i, w_i / h_i, h_j / h_i, w_j / h_i]`.
pub fn edge_features(seg_i: &TextSegment, seg_j: &TextSegment) -> Result<[f64; EDGE_ITEMS]> {
    let (bi, bj) = (&seg_i.bbox, &seg_j.bbox);
    let hi = bi.height();
    if hi <= 0.0 || !hi.is_finite() {
        return Err(Error::InvalidSegment {
            segment_id: seg_i.id as i64,
            reason: format!("degenerate box height {hi}"),
        });
    }
    let (cxi, cyi) = bi.center();
    let (cxj, cyj) = bj.center();
    Ok([
        (cxj - cxi) / hi,
        (cyj - cyi) / hi,
        bi.width() / hi,
        bj.height() / hi,
        bj.width() / hi,
    ])
}

/// Raw edge inputs for every ordered segment pair, `[N*N, edge_input_dim]`.
pub fn edge_inputs(doc: &Document, use_num2vec: bool) -> Result<Array2<f64>> {
    let n = doc.segments.len();
    let width = if use_num2vec {
        EDGE_ITEMS * NUM2VEC_SLOTS
    } else {
        EDGE_ITEMS
    };
    let mut out = Array2::zeros((n * n, width));
    for (i, si) in doc.segments.iter().enumerate() {
        for (j, sj) in doc.segments.iter().enumerate() {
            let feats = edge_features(si, sj)?;
            let mut row = out.row_mut(i * n + j);
            if use_num2vec {
                for (k, &f) in feats.iter().enumerate() {
                    for (s, v) in num2vec(f)?.into_iter().enumerate() {
                        row[k * NUM2VEC_SLOTS + s] = v;
                    }
                }
            } else {
                for (k, &f) in feats.iter().enumerate() {
                    row[k] = f;
                }
            }
        }
    }
    Ok(out)
}

/// `true` off the diagonal.
pub fn off_diagonal_mask(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| i != j)
}

pub fn init_params<R: Rng>(cfg: &GraphConfig, d_ctx: usize, rng: &mut R, store: &mut ParamStore) {
    let (dn, de, dg) = (cfg.d_node, cfg.d_edge, cfg.d_triplet());
    store.insert("graph/node_w", glorot(rng, d_ctx, dn));
    store.insert("graph/node_b", Array2::zeros((1, dn)));
    store.insert("graph/edge_w", glorot(rng, cfg.edge_input_dim(), de));
    store.insert("graph/edge_b", Array2::zeros((1, de)));
    for k in 0..cfg.num_layers {
        store.insert(format!("graph/layer{k}/Wg"), glorot(rng, 2 * dn + de, dg));
        store.insert(format!("graph/layer{k}/We"), glorot(rng, dg, de));
        store.insert(format!("graph/layer{k}/att"), glorot(rng, dg, cfg.num_heads));
        store.insert(format!("graph/layer{k}/Wv"), glorot(rng, dg, dn));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DocumentGraph {
    /// `[N, d_node]`
    pub nodes: Var,
    /// `[N*N, d_edge]`
    pub edges: Var,
    pub n: usize,
}

pub fn init_graph(
    tape: &mut Tape,
    params: &Bound,
    ctx: &FusedContext,
    edge_inputs: &Array2<f64>,
) -> Result<DocumentGraph> {
    let n = ctx.segment_spans.len();
    if edge_inputs.nrows() != n * n {
        return Err(Error::shape(
            "init_graph",
            format!("{} edge rows", n * n),
            edge_inputs.nrows(),
        ));
    }
    let pooled = tape.segment_mean(ctx.features, ctx.segment_spans);
    let nodes = tape.matmul(pooled, params.var("graph/node_w"));
    let nodes = tape.add_row(nodes, params.var("graph/node_b"));
    let raw = tape.leaf(edge_inputs.clone());
    let edges = tape.matmul(raw, params.var("graph/edge_w"));
    let edges = tape.add_row(edges, params.var("graph/edge_b"));
    Ok(DocumentGraph { nodes, edges, n })
}

/// `g_ij = W_g [v_i ‖ e_ij ‖ v_j]` as `[N*N, d_g]`.
pub fn triplet_features(tape: &mut Tape, params: &Bound, layer: usize, graph: &DocumentGraph) -> Var {
    let dn = tape.shape(graph.nodes).1;
    let de = tape.shape(graph.edges).1;
    let wg = params.var(&format!("graph/layer{layer}/Wg"));
    let w_src = tape.slice_rows(wg, 0, dn);
    let w_edge = tape.slice_rows(wg, dn, dn + de);
    let w_dst = tape.slice_rows(wg, dn + de, 2 * dn + de);
    let src = tape.matmul(graph.nodes, w_src);
    let dst = tape.matmul(graph.nodes, w_dst);
    let pairs = tape.pair_sum(src, dst);
    let edge = tape.matmul(graph.edges, w_edge);
    tape.add(pairs, edge)
}

/// One layer, also returning each head's `[N, N]` attention matrix.
pub fn gnn_layer_with_attention(
    tape: &mut Tape,
    params: &Bound,
    cfg: &GraphConfig,
    layer: usize,
    graph: &DocumentGraph,
) -> (DocumentGraph, Vec<Var>) {
    let n = graph.n;
    let g = triplet_features(tape, params, layer, graph);
    let e = tape.matmul(g, params.var(&format!("graph/layer{layer}/We")));
    let edges = tape.relu(e);

    let scores = tape.matmul(g, params.var(&format!("graph/layer{layer}/att")));
    let scores = tape.leaky_relu(scores, ATTENTION_SLOPE);
    let msg = tape.matmul(g, params.var(&format!("graph/layer{layer}/Wv")));
    let mask = off_diagonal_mask(n);
    let dk = cfg.d_node / cfg.num_heads;
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let s = tape.slice_cols(scores, h, h + 1);
        let s = tape.reshape(s, n, n);
        let alpha = tape.softmax_rows(s, Some(&mask));
        let m = tape.slice_cols(msg, h * dk, (h + 1) * dk);
        heads.push(tape.pair_weighted_sum(alpha, m));
        weights.push(alpha);
    }
    let cat = tape.concat_cols(&heads);
    let update = tape.relu(cat);
    let nodes = tape.add(update, graph.nodes);
    (DocumentGraph { nodes, edges, n }, weights)
}

pub fn gnn_layer(tape: &mut Tape, params: &Bound, cfg: &GraphConfig, layer: usize, graph: &DocumentGraph) -> DocumentGraph {
    gnn_layer_with_attention(tape, params, cfg, layer, graph).0
}

pub fn run_gnn(tape: &mut Tape, params: &Bound, cfg: &GraphConfig, graph: DocumentGraph) -> DocumentGraph {
    (0..cfg.num_layers).fold(graph, |g, k| gnn_layer(tape, params, cfg, k, &g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::{BBox, Token};
    use crate::gradcheck::{check_params, worst};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg(id: usize, cx: f64, cy: f64, w: f64, h: f64) -> TextSegment {
        let tok = Token {
            text: "x".into(),
            bbox: BBox::from_center(cx, cy, w, h),
        };
        TextSegment::from_tokens(id, vec![tok], "other")
    }

    fn doc_of(segs: Vec<TextSegment>) -> Document {
        Document {
            id: "g".into(),
            segments: segs,
            page_size: (1000.0, 1000.0),
            image: None,
        }
    }

    fn small_cfg() -> GraphConfig {
        GraphConfig {
            num_layers: 2,
            num_heads: 2,
            d_node: 4,
            d_edge: 3,
            use_num2vec: true,
        }
    }

    fn store_for(cfg: &GraphConfig, d_ctx: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init_params(cfg, d_ctx, &mut rng, &mut s);
        s
    }

    #[test]
    fn num2vec_examples() {
        let close = |a: [f64; 8], b: [f64; 8]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(num2vec(12.34).unwrap(), [0., 0., 0.1, 0.2, 0.3, 0.4, 0., 0.]));
        assert_eq!(num2vec(0.0).unwrap(), [0.0; 8]);
        assert!(close(num2vec(-3.5).unwrap(), [0., 0., 0., -0.3, -0.5, 0., 0., 0.]));
        assert!(close(num2vec(1e9).unwrap(), [0.9; 8]));
        assert!(num2vec(f64::NAN).is_err());
        assert!(num2vec(f64::INFINITY).is_err());
    }

    #[test]
    fn edge_feature_examples() {
        let a = seg(0, 0.5, 0.5, 1.0, 1.0);
        assert_eq!(edge_features(&a, &a.clone()).unwrap(), [0.0, 0.0, 1.0, 1.0, 1.0]);
        let i = seg(0, 10.0, 10.0, 20.0, 10.0);
        let j = seg(1, 40.0, 10.0, 10.0, 5.0);
        assert_eq!(edge_features(&i, &j).unwrap(), [3.0, 0.0, 2.0, 0.5, 1.0]);
        assert_eq!(edge_features(&i, &i).unwrap(), [0.0, 0.0, 2.0, 1.0, 2.0]);
        let flat = seg(7, 10.0, 10.0, 20.0, 0.0);
        let err = edge_features(&flat, &j).unwrap_err().to_string();
        assert!(err.contains("segment 7"), "{err}");
    }

    #[test]
    fn edge_inputs_translation_invariant() {
        let base = [(100.0, 50.0, 80.0, 20.0), (300.0, 52.0, 60.0, 18.0), (120.0, 200.0, 90.0, 25.0)];
        let mk = |dx: f64, dy: f64| {
            doc_of(
                base.iter()
                    .enumerate()
                    .map(|(k, &(x, y, w, h))| seg(k, x + dx, y + dy, w, h))
                    .collect(),
            )
        };
        for flag in [true, false] {
            let a = edge_inputs(&mk(0.0, 0.0), flag).unwrap();
            let b = edge_inputs(&mk(37.0, -12.5), flag).unwrap();
            assert_eq!(a.dim(), (9, if flag { 40 } else { 5 }));
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn triplet_scalar_example_and_zero_weights() {
        let mut store = ParamStore::new();
        store.insert("graph/layer0/Wg", array![[1.0], [1.0], [1.0]]);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let nodes = t.leaf(array![[2.0], [3.0]]);
        let edges = t.leaf(array![[0.0], [5.0], [7.0], [0.0]]);
        let graph = DocumentGraph { nodes, edges, n: 2 };
        let g = triplet_features(&mut t, &b, 0, &graph);
        assert_eq!(t.value(g)[[1, 0]], 10.0);
        assert_eq!(t.value(g)[[2, 0]], 12.0);

        store.insert("graph/layer0/Wg", Array2::zeros((3, 1)));
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let nodes = t.leaf(array![[2.0], [3.0]]);
        let edges = t.leaf(array![[0.0], [5.0], [7.0], [0.0]]);
        let g = triplet_features(&mut t, &b, 0, &DocumentGraph { nodes, edges, n: 2 });
        assert!(t.value(g).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_segment_node_is_projected_row() {
        let cfg = small_cfg();
        let store = store_for(&cfg, 3, 2);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let feats = t.leaf(array![[1.0, 2.0, 3.0], [0.0, 1.0, 0.0], [4.0, 4.0, 4.0]]);
        let spans = [(0, 1), (1, 3)];
        let ctx = FusedContext {
            features: feats,
            segment_spans: &spans,
        };
        let edges = Array2::zeros((4, cfg.edge_input_dim()));
        let graph = init_graph(&mut t, &b, &ctx, &edges).unwrap();
        let expect = array![[1.0, 2.0, 3.0]].dot(store.expect("graph/node_w"));
        for (g, e) in t.value(graph.nodes).row(0).iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
        assert_eq!(t.shape(graph.edges), (4, cfg.d_edge));
        assert!(init_graph(&mut t, &b, &ctx, &Array2::zeros((3, 40))).is_err());
    }

    #[test]
    fn attention_rows_and_uniform_case() {
        let cfg = small_cfg();
        let store = store_for(&cfg, 3, 3);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let nodes = t.leaf(Array2::from_shape_fn((4, 4), |(i, j)| (i as f64 - j as f64) * 0.3));
        let edges = t.leaf(Array2::from_shape_fn((16, 3), |(r, c)| ((r * 5 + c) % 7) as f64 * 0.2));
        let graph = DocumentGraph { nodes, edges, n: 4 };
        let (_, weights) = gnn_layer_with_attention(&mut t, &b, &cfg, 0, &graph);
        for w in weights {
            let w = t.value(w);
            for i in 0..4 {
                assert_eq!(w[[i, i]], 0.0);
                assert!((w.row(i).sum() - 1.0).abs() < 1e-12);
            }
        }

        // identical nodes and edges make every g_ij equal
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let nodes = t.leaf(Array2::from_elem((4, 4), 0.7));
        let edges = t.leaf(Array2::from_elem((16, 3), -0.2));
        let (_, weights) = gnn_layer_with_attention(&mut t, &b, &cfg, 0, &DocumentGraph { nodes, edges, n: 4 });
        for w in weights {
            for i in 0..4 {
                for j in 0..4 {
                    if i != j {
                        assert!((t.value(w)[[i, j]] - 1.0 / 3.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn single_node_update_is_identity() {
        let cfg = small_cfg();
        let store = store_for(&cfg, 3, 4);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let nodes = t.leaf(array![[0.1, -0.4, 2.0, 0.3]]);
        let edges = t.leaf(array![[0.5, 0.5, 0.5]]);
        let out = gnn_layer(&mut t, &b, &cfg, 0, &DocumentGraph { nodes, edges, n: 1 });
        assert_eq!(t.value(out.nodes), t.value(nodes));
        assert_eq!(t.shape(out.edges), (1, 3));
    }

    #[test]
    fn zero_layers_is_identity_and_two_layers_compose() {
        let cfg = small_cfg();
        let store = store_for(&cfg, 3, 5);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let nodes = t.leaf(Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1));
        let edges = t.leaf(Array2::from_shape_fn((9, 3), |(i, j)| (i + j) as f64 * 0.05));
        let graph = DocumentGraph { nodes, edges, n: 3 };
        let none = GraphConfig {
            num_layers: 0,
            ..cfg.clone()
        };
        let same = run_gnn(&mut t, &b, &none, graph);
        assert_eq!(same.nodes, nodes);
        let full = run_gnn(&mut t, &b, &cfg, graph);
        let one = gnn_layer(&mut t, &b, &cfg, 0, &graph);
        let two = gnn_layer(&mut t, &b, &cfg, 1, &one);
        assert_eq!(t.value(full.nodes), t.value(two.nodes));
        assert_eq!(t.value(full.edges), t.value(two.edges));
    }

    #[test]
    fn gradients_through_two_layers() {
        let cfg = small_cfg();
        let mut store = store_for(&cfg, 3, 6);
        store.insert(
            "ctx",
            Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j * 7) % 5) as f64 * 0.3 - 0.5),
        );
        let doc = doc_of(vec![seg(0, 50.0, 40.0, 60.0, 20.0), seg(1, 150.0, 42.0, 40.0, 18.0), seg(2, 60.0, 90.0, 70.0, 22.0)]);
        let raw = edge_inputs(&doc, true).unwrap();
        let spans = [(0, 2), (2, 3), (3, 5)];
        let weights = Array2::from_shape_fn((9, 3), |(i, j)| ((i + 2 * j) % 4) as f64 - 1.5);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let report = check_params(&store, &names, 1e-5, 12, |t, b| {
            let ctx = FusedContext {
                features: b.var("ctx"),
                segment_spans: &spans,
            };
            let g = init_graph(t, b, &ctx, &raw).unwrap();
            let g = run_gnn(t, b, &cfg, g);
            let w = t.leaf(weights.clone());
            let e = t.mul(g.edges, w);
            let s1 = t.sum_all(e);
            let sq = t.mul(g.nodes, g.nodes);
            let s2 = t.sum_all(sq);
            t.add(s1, s2)
        });
        assert!(worst(&report) < 1e-4, "{report:?}");
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = small_cfg();
        let store = store_for(&cfg, 3, 7);
        let segs = vec![
            seg(0, 50.0, 40.0, 60.0, 20.0),
            seg(1, 150.0, 42.0, 40.0, 18.0),
            seg(2, 60.0, 90.0, 70.0, 22.0),
            seg(3, 200.0, 95.0, 30.0, 21.0),
        ];
        let ctx0 = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 5 + j * 3) % 7) as f64 * 0.25 - 0.7);
        let run = |segs: &[TextSegment], ctx: &Array2<f64>| {
            let doc = doc_of(segs.to_vec());
            let raw = edge_inputs(&doc, true).unwrap();
            let mut t = Tape::new();
            let b = store.bind(&mut t);
            let spans: Vec<(usize, usize)> = (0..4).map(|i| (i, i + 1)).collect();
            let f = t.leaf(ctx.clone());
            let c = FusedContext {
                features: f,
                segment_spans: &spans,
            };
            let g = init_graph(&mut t, &b, &c, &raw).unwrap();
            let g = run_gnn(&mut t, &b, &cfg, g);
            (t.value(g.nodes).clone(), t.value(g.edges).clone())
        };
        let (nodes, edges) = run(&segs, &ctx0);
        let perm = [2, 0, 3, 1];
        let psegs: Vec<_> = perm.iter().map(|&p| segs[p].clone()).collect();
        let pctx = Array2::from_shape_fn((4, 3), |(i, j)| ctx0[[perm[i], j]]);
        let (pn, pe) = run(&psegs, &pctx);
        for i in 0..4 {
            for c in 0..cfg.d_node {
                assert!((pn[[i, c]] - nodes[[perm[i], c]]).abs() < 1e-9);
            }
            for j in 0..4 {
                for c in 0..cfg.d_edge {
                    assert!((pe[[i * 4 + j, c]] - edges[[perm[i] * 4 + perm[j], c]]).abs() < 1e-9);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn num2vec_range_and_oddness(x in -20000.0f64..20000.0) {
            let v = num2vec(x).unwrap();
            let m = num2vec(-x).unwrap();
            for (a, b) in v.iter().zip(m.iter()) {
                prop_assert!((-0.9..=0.9).contains(a));
                prop_assert_eq!(*a, -*b);
            }
        }

        #[test]
        fn num2vec_injective_on_rounded(a in -9999.9999f64..9999.9999, b in -9999.9999f64..9999.9999) {
            let ra = (a * 1e4).round();
            let rb = (b * 1e4).round();
            // signed zero encodes as zero both ways
            if ra != rb && !(ra == 0.0 && rb == 0.0) {
                prop_assert_ne!(num2vec(a).unwrap(), num2vec(b).unwrap());
            }
        }

        #[test]
        fn edge_position_antisymmetric(
            x1 in 0.0f64..500.0, y1 in 0.0f64..500.0, x2 in 0.0f64..500.0, y2 in 0.0f64..500.0,
            w1 in 1.0f64..100.0, w2 in 1.0f64..100.0, h in 1.0f64..40.0,
        ) {
            let a = seg(0, x1, y1, w1, h);
            let b = seg(1, x2, y2, w2, h);
            let ab = edge_features(&a, &b).unwrap();
            let ba = edge_features(&b, &a).unwrap();
            prop_assert!((ab[0] + ba[0]).abs() < 1e-9);
            prop_assert!((ab[1] + ba[1]).abs() < 1e-9);
        }
    }
}
