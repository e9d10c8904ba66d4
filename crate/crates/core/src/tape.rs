//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every intermediate matrix together with the operation
//! that produced it. [`Tape::backward`] walks the record in reverse and
//! accumulates gradients for every node. All values are 2-D; higher-rank
//! tensors are flattened by convention (pair tensors `[N, N, k]` are stored
//! as `[N*N, k]` with row `i*N + j`, images `[C, H, W]` as `[C, H*W]`).

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over a `[C, H*W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// Sparse bilinear sampling plan for one region-pooling call: for every
/// output row and bin, the feature-map pixels and weights it averages.
#[derive(Debug, Clone)]
struct RoiPlan {
    channels: usize,
    bins: usize,
    /// `taps[r * bins + b]` lists `(pixel, weight)` pairs.
    taps: Vec<Vec<(usize, f64)>>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Reshape(Var),
    SegmentMean {
        x: Var,
        spans: Vec<(usize, usize)>,
    },
    PairSum(Var, Var),
    PairWeightedSum {
        alpha: Var,
        msg: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Array2<f64>,
    },
    RoiAlign {
        fmap: Var,
        plan: RoiPlan,
    },
    SumAll(Var),
    AddN(Vec<Var>),
    /// Scalar-valued fused function with precomputed input gradients.
    Fused {
        inputs: Vec<Var>,
        grads: Vec<Array2<f64>>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the seed with respect to `v`; `None` if `v` did not
    /// influence the seed.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) {
    assert_eq!(a.dim(), b.dim(), "{op}: shape mismatch");
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar(): node is not 1x1");
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Constant or parameter leaf.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dims");
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.ncols(), "matmul_nt: inner dims");
        let out = va.dot(&vb.t());
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        check_same("add", self.value(a), self.value(b));
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `[1, k]` row to every row of an `[n, k]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row: bias must be a single row");
        assert_eq!(vx.ncols(), vr.ncols(), "add_row: width");
        let out = vx + vr;
        self.push(out, Op::AddRow(x, row))
    }

    /// Adds a `[n, 1]` column to every column of an `[n, k]` matrix.
    pub fn add_col(&mut self, x: Var, col: Var) -> Var {
        let (vx, vc) = (self.value(x), self.value(col));
        assert_eq!(vc.ncols(), 1, "add_col: bias must be a single column");
        assert_eq!(vx.nrows(), vc.nrows(), "add_col: height");
        let out = vx + vc;
        self.push(out, Op::AddCol(x, col))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        check_same("mul", self.value(a), self.value(b));
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        self.push(out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope))
    }

    /// Row-wise layer normalization with `[1, k]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (n, k) = vx.dim();
        assert_eq!(self.value(gain).dim(), (1, k), "layer_norm: gain");
        assert_eq!(self.value(bias).dim(), (1, k), "layer_norm: bias");
        let mut xhat = Array2::zeros((n, k));
        let mut inv_std = Vec::with_capacity(n);
        for (r, row) in vx.outer_iter().enumerate() {
            let mean = row.sum() / k as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax. Entries where `mask` is `false` are excluded and
    /// produce probability 0; a fully masked row yields all zeros.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Array2<bool>>) -> Var {
        let vx = self.value(x);
        if let Some(m) = mask {
            assert_eq!(m.dim(), vx.dim(), "softmax_rows: mask shape");
        }
        let mut out = Array2::zeros(vx.dim());
        for (r, row) in vx.outer_iter().enumerate() {
            let keep = |c: usize| mask.map_or(true, |m| m[[r, c]]);
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if keep(c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (c, &v) in row.iter().enumerate() {
                if keep(c) {
                    let e = (v - max).exp();
                    out[[r, c]] = e;
                    total += e;
                }
            }
            out.row_mut(r).mapv_inplace(|e| e / total);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Row lookup: output row `m` is `table[ids[m]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let mut out = Array2::zeros((ids.len(), vt.ncols()));
        for (m, &id) in ids.iter().enumerate() {
            out.row_mut(m).assign(&vt.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(x, start, end))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows(x, start, end))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let data: Vec<f64> = self.value(x).iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), data).expect("reshape: element count");
        self.push(out, Op::Reshape(x))
    }

    /// Mean of the rows in each `[start, end)` span; empty spans give zeros.
    pub fn segment_mean(&mut self, x: Var, spans: &[(usize, usize)]) -> Var {
        let vx = self.value(x);
        let mut out = Array2::zeros((spans.len(), vx.ncols()));
        for (s_idx, &(a, b)) in spans.iter().enumerate() {
            if b > a {
                let mean = vx.slice(s![a..b, ..]).mean_axis(Axis(0)).expect("non-empty");
                out.row_mut(s_idx).assign(&mean);
            }
        }
        self.push(
            out,
            Op::SegmentMean {
                x,
                spans: spans.to_vec(),
            },
        )
    }

    /// `[N, k] × [N, k] → [N*N, k]` with row `i*N + j = left[i] + right[j]`.
    pub fn pair_sum(&mut self, left: Var, right: Var) -> Var {
        let (vl, vr) = (self.value(left), self.value(right));
        check_same("pair_sum", vl, vr);
        let (n, k) = vl.dim();
        let mut out = Array2::zeros((n * n, k));
        for i in 0..n {
            for j in 0..n {
                let mut row = out.row_mut(i * n + j);
                row.assign(&vl.row(i));
                row += &vr.row(j);
            }
        }
        self.push(out, Op::PairSum(left, right))
    }

    /// `out[i] = Σ_j alpha[i, j] · msg[i*N + j]`.
    pub fn pair_weighted_sum(&mut self, alpha: Var, msg: Var) -> Var {
        let (va, vm) = (self.value(alpha), self.value(msg));
        let n = va.nrows();
        assert_eq!(va.ncols(), n, "pair_weighted_sum: alpha must be square");
        assert_eq!(vm.nrows(), n * n, "pair_weighted_sum: msg rows");
        let k = vm.ncols();
        let mut out = Array2::zeros((n, k));
        for i in 0..n {
            let block = vm.slice(s![i * n..(i + 1) * n, ..]);
            let weights = va.row(i);
            out.row_mut(i).assign(&weights.dot(&block));
        }
        self.push(out, Op::PairWeightedSum { alpha, msg })
    }

    /// 2-D convolution via im2col. `x` is `[C_in, H*W]`, `w` is
    /// `[C_out, C_in*k*k]`, `b` is `[C_out, 1]`; output `[C_out, H'*W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let vx = self.value(x);
        assert_eq!(
            vx.dim(),
            (geom.in_channels, geom.height * geom.width),
            "conv2d: input"
        );
        let kk = geom.kernel * geom.kernel;
        assert_eq!(
            self.value(w).dim(),
            (geom.out_channels, geom.in_channels * kk),
            "conv2d: weight"
        );
        assert_eq!(self.value(b).dim(), (geom.out_channels, 1), "conv2d: bias");
        let cols = im2col(vx, &geom);
        let out = self.value(w).dot(&cols) + self.value(b);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        )
    }

    /// Region pooling with bilinear sampling over a `[C, H*W]` feature map.
    ///
    /// Each roi is `(x0, y0, x1, y1)` in feature-map pixel units (pixel `p`
    /// covers `[p, p+1)`). Each roi is split into `grid.0 × grid.1` bins,
    /// each averaged over `sampling × sampling` bilinear samples. Output is
    /// `[R, C * gh * gw]`, column `c * gh * gw + by * gw + bx`.
    pub fn roi_align(
        &mut self,
        fmap: Var,
        dims: (usize, usize, usize),
        rois: &[[f64; 4]],
        grid: (usize, usize),
        sampling: usize,
    ) -> Var {
        let (channels, height, width) = dims;
        let vf = self.value(fmap);
        assert_eq!(vf.dim(), (channels, height * width), "roi_align: fmap");
        let (gh, gw) = grid;
        let bins = gh * gw;
        let mut taps = Vec::with_capacity(rois.len() * bins);
        let norm = 1.0 / (sampling * sampling) as f64;
        for roi in rois {
            let bin_w = (roi[2] - roi[0]) / gw as f64;
            let bin_h = (roi[3] - roi[1]) / gh as f64;
            for by in 0..gh {
                for bx in 0..gw {
                    let mut bin_taps: Vec<(usize, f64)> = Vec::new();
                    for sy in 0..sampling {
                        let y = roi[1] + bin_h * (by as f64 + (sy as f64 + 0.5) / sampling as f64);
                        for sx in 0..sampling {
                            let x =
                                roi[0] + bin_w * (bx as f64 + (sx as f64 + 0.5) / sampling as f64);
                            for (pix, wgt) in bilinear_taps(y, x, height, width) {
                                bin_taps.push((pix, wgt * norm));
                            }
                        }
                    }
                    taps.push(bin_taps);
                }
            }
        }
        let mut out = Array2::zeros((rois.len(), channels * bins));
        for r in 0..rois.len() {
            for b in 0..bins {
                for c in 0..channels {
                    let fm = vf.row(c);
                    let v: f64 = taps[r * bins + b].iter().map(|&(p, w)| fm[p] * w).sum();
                    out[[r, c * bins + b]] = v;
                }
            }
        }
        let plan = RoiPlan {
            channels,
            bins,
            taps,
        };
        self.push(out, Op::RoiAlign { fmap, plan })
    }

    /// Sum of all entries, as a `[1, 1]` node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(x))
    }

    /// Element-wise sum of same-shaped nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_n: no inputs");
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            check_same("add_n", &out, self.value(p));
            out += self.value(p);
        }
        self.push(out, Op::AddN(parts.to_vec()))
    }

    /// Records a scalar-valued function whose gradient with respect to each
    /// input has already been computed by the caller.
    pub fn fused_scalar(&mut self, value: f64, inputs: &[Var], grads: Vec<Array2<f64>>) -> Var {
        assert_eq!(inputs.len(), grads.len(), "fused_scalar: one gradient per input");
        for (&v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(v).dim(), g.dim(), "fused_scalar: gradient shape");
        }
        self.push(
            Array2::from_elem((1, 1), value),
            Op::Fused {
                inputs: inputs.to_vec(),
                grads,
            },
        )
    }

    /// Back-propagates from a `[1, 1]` seed node.
    pub fn backward(&self, seed: Var) -> Gradients {
        assert_eq!(self.value(seed).dim(), (1, 1), "backward: seed must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=seed.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = gout.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gout);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = gout.dot(self.value(*b));
                    let gb = gout.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout);
                }
                Op::AddRow(x, row) => {
                    let gr = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, gout);
                }
                Op::AddCol(x, col) => {
                    let gc = gout.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *col, gc);
                    acc(&mut grads, *x, gout);
                }
                Op::Mul(a, b) => {
                    let ga = &gout * self.value(*b);
                    let gb = &gout * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(x, c) => acc(&mut grads, *x, gout * *c),
                Op::Relu(x) => {
                    let mut g = gout;
                    g.zip_mut_with(self.value(*x), |g, &v| {
                        if v <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *x, g);
                }
                Op::LeakyRelu(x, slope) => {
                    let mut g = gout;
                    g.zip_mut_with(self.value(*x), |g, &v| {
                        if v <= 0.0 {
                            *g *= slope
                        }
                    });
                    acc(&mut grads, *x, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gb = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gg = (&gout * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &gout * self.value(*gain);
                    let k = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let m1 = dr.sum() / k;
                        let m2 = dr.dot(&xr) / k;
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = inv_std[r] * (dr[c] - m1 - xr[c] * m2);
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *gain, gg);
                    acc(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = gout.row(r).dot(&y.row(r));
                        for c in 0..y.ncols() {
                            gx[[r, c]] = y[[r, c]] * (gout[[r, c]] - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gather { table, ids } => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (m, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &gout.row(m);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, gout.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(x, a, b) => {
                    let mut g = Array2::zeros(self.value(*x).dim());
                    g.slice_mut(s![.., *a..*b]).assign(&gout);
                    acc(&mut grads, *x, g);
                }
                Op::SliceRows(x, a, b) => {
                    let mut g = Array2::zeros(self.value(*x).dim());
                    g.slice_mut(s![*a..*b, ..]).assign(&gout);
                    acc(&mut grads, *x, g);
                }
                Op::Reshape(x) => {
                    let data: Vec<f64> = gout.iter().copied().collect();
                    let g = Array2::from_shape_vec(self.value(*x).dim(), data)
                        .expect("reshape grad");
                    acc(&mut grads, *x, g);
                }
                Op::SegmentMean { x, spans } => {
                    let mut g = Array2::zeros(self.value(*x).dim());
                    for (s_idx, &(a, b)) in spans.iter().enumerate() {
                        if b > a {
                            let share = gout.row(s_idx).to_owned() / (b - a) as f64;
                            for r in a..b {
                                let mut row = g.row_mut(r);
                                row += &share;
                            }
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::PairSum(left, right) => {
                    let (n, k) = self.value(*left).dim();
                    let mut gl = Array2::zeros((n, k));
                    let mut gr = Array2::zeros((n, k));
                    for i in 0..n {
                        for j in 0..n {
                            let row = gout.row(i * n + j);
                            let mut l = gl.row_mut(i);
                            l += &row;
                            let mut r = gr.row_mut(j);
                            r += &row;
                        }
                    }
                    acc(&mut grads, *left, gl);
                    acc(&mut grads, *right, gr);
                }
                Op::PairWeightedSum { alpha, msg } => {
                    let va = self.value(*alpha);
                    let vm = self.value(*msg);
                    let n = va.nrows();
                    let mut ga = Array2::zeros((n, n));
                    let mut gm = Array2::zeros(vm.dim());
                    for i in 0..n {
                        let block = vm.slice(s![i * n..(i + 1) * n, ..]);
                        let go = gout.row(i);
                        ga.row_mut(i).assign(&block.dot(&go));
                        for j in 0..n {
                            let a = va[[i, j]];
                            if a != 0.0 {
                                let mut row = gm.row_mut(i * n + j);
                                row.scaled_add(a, &go);
                            }
                        }
                    }
                    acc(&mut grads, *alpha, ga);
                    acc(&mut grads, *msg, gm);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let gw = gout.dot(&cols.t());
                    let gb = gout.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gcols = self.value(*w).t().dot(&gout);
                    let gx = col2im(&gcols, geom);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *x, gx);
                }
                Op::RoiAlign { fmap, plan } => {
                    let mut gf = Array2::zeros(self.value(*fmap).dim());
                    let rois = gout.nrows();
                    for r in 0..rois {
                        for bin in 0..plan.bins {
                            let taps = &plan.taps[r * plan.bins + bin];
                            for c in 0..plan.channels {
                                let go = gout[[r, c * plan.bins + bin]];
                                if go == 0.0 {
                                    continue;
                                }
                                for &(p, wgt) in taps {
                                    gf[[c, p]] += go * wgt;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *fmap, gf);
                }
                Op::SumAll(x) => {
                    let g = Array2::from_elem(self.value(*x).dim(), gout[[0, 0]]);
                    acc(&mut grads, *x, g);
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, gout.clone());
                    }
                }
                Op::Fused { inputs, grads: local } => {
                    let up = gout[[0, 0]];
                    for (&v, g) in inputs.iter().zip(local) {
                        acc(&mut grads, v, g * up);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Bilinear interpolation taps at continuous position `(y, x)` with pixel
/// centres at half-integers. Coordinates are clamped to the map.
fn bilinear_taps(y: f64, x: f64, height: usize, width: usize) -> Vec<(usize, f64)> {
    let u = (x - 0.5).clamp(0.0, (width - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let lx = u - x0 as f64;
    let ly = v - y0 as f64;
    let mut taps = Vec::with_capacity(4);
    for (py, wy) in [(y0, 1.0 - ly), (y1, ly)] {
        for (px, wx) in [(x0, 1.0 - lx), (x1, lx)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                taps.push((py * width + px, wgt));
            }
        }
    }
    taps
}

fn im2col(x: &Array2<f64>, g: &ConvGeom) -> Array2<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut cols = Array2::zeros((g.in_channels * k * k, oh * ow));
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[c, iy as usize * g.width + ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, g: &ConvGeom) -> Array2<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut x = Array2::zeros((g.in_channels, g.height * g.width));
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        x[[c, iy as usize * g.width + ix as usize]] += cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(sum(f(x) * w))/dx for a random weight w.
    fn check_unary(x0: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let weights = {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let y = build(&mut t, x);
            let (r, c) = t.shape(y);
            Array2::from_shape_fn((r, c), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6)
        };
        let objective = |xv: &Array2<f64>| {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let y = build(&mut t, x);
            let w = t.leaf(weights.clone());
            let p = t.mul(y, w);
            let s = t.sum_all(p);
            (t, x, s)
        };
        let (t, x, s) = objective(&x0);
        let grads = t.backward(s);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Array2::zeros(x0.dim()));
        let h = 1e-6;
        let mut num = Array2::zeros(x0.dim());
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let mut xp = x0.clone();
            xp[[r, c]] += h;
            let mut xm = x0.clone();
            xm[[r, c]] -= h;
            let (tp, _, sp) = objective(&xp);
            let (tm, _, sm) = objective(&xm);
            num[[r, c]] = (tp.scalar(sp) - tm.scalar(sm)) / (2.0 * h);
        }
        let diff = (&analytic - &num).mapv(|v| v * v).sum().sqrt();
        let norm = analytic.mapv(|v| v * v).sum().sqrt() + num.mapv(|v| v * v).sum().sqrt();
        assert!(
            diff <= 1e-6 * norm.max(1e-12) || diff < 1e-9,
            "gradient mismatch: analytic {analytic:?} numeric {num:?}"
        );
    }

    fn sample(r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |(i, j)| ((i * 13 + j * 7 + 3) % 11) as f64 / 5.0 - 1.03)
    }

    #[test]
    fn matmul_gradients() {
        let b = sample(4, 3);
        check_unary(sample(2, 4), |t, x| {
            let bv = t.leaf(b.clone());
            t.matmul(x, bv)
        });
        let a = sample(3, 4);
        check_unary(sample(2, 4), |t, x| {
            let av = t.leaf(a.clone());
            t.matmul_nt(x, av)
        });
        check_unary(sample(2, 4), |t, x| {
            let av = t.leaf(a.clone());
            t.matmul_nt(av, x)
        });
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(sample(3, 3), |t, x| t.relu(x));
        check_unary(sample(3, 3), |t, x| t.leaky_relu(x, 0.2));
        check_unary(sample(3, 3), |t, x| {
            let y = t.scale(x, 2.5);
            t.mul(y, x)
        });
        check_unary(sample(2, 3), |t, x| {
            let r = t.slice_rows(x, 0, 1);
            t.add_row(x, r)
        });
        check_unary(sample(2, 3), |t, x| {
            let c = t.slice_cols(x, 1, 2);
            t.add_col(x, c)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let gain = array![[1.5, -0.5, 0.7, 1.0]];
        let bias = array![[0.1, 0.2, -0.3, 0.0]];
        check_unary(sample(3, 4), |t, x| {
            let g = t.leaf(gain.clone());
            let b = t.leaf(bias.clone());
            t.layer_norm(x, g, b, 1e-5)
        });
        check_unary(gain.clone(), |t, g| {
            let x = t.leaf(sample(3, 4));
            let b = t.leaf(bias.clone());
            t.layer_norm(x, g, b, 1e-5)
        });
    }

    #[test]
    fn softmax_gradients_with_mask() {
        let mask = Array2::from_shape_fn((3, 3), |(i, j)| i != j);
        check_unary(sample(3, 3), |t, x| t.softmax_rows(x, Some(&mask)));
        check_unary(sample(2, 5), |t, x| t.softmax_rows(x, None));
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_zero_masked() {
        let mut t = Tape::new();
        let x = t.leaf(sample(4, 4));
        let mask = Array2::from_shape_fn((4, 4), |(i, j)| i != j);
        let y = t.softmax_rows(x, Some(&mask));
        for r in 0..4 {
            let row = t.value(y).row(r);
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert_eq!(row[r], 0.0);
        }
        // fully masked row
        let x1 = t.leaf(array![[3.0]]);
        let m1 = array![[false]];
        let y1 = t.softmax_rows(x1, Some(&m1));
        assert_eq!(t.value(y1)[[0, 0]], 0.0);
    }

    #[test]
    fn structural_gradients() {
        check_unary(sample(5, 3), |t, x| t.segment_mean(x, &[(0, 2), (2, 2), (2, 5)]));
        check_unary(sample(4, 3), |t, x| t.reshape(x, 2, 6));
        check_unary(sample(3, 2), |t, x| {
            let y = t.scale(x, -1.0);
            t.concat_cols(&[x, y])
        });
        check_unary(sample(3, 2), |t, x| {
            let y = t.scale(x, 0.5);
            t.pair_sum(x, y)
        });
        check_unary(sample(5, 2), |t, x| t.gather(x, &[0, 3, 3, 1]));
        let msg = sample(9, 2);
        check_unary(sample(3, 3), |t, a| {
            let m = t.leaf(msg.clone());
            t.pair_weighted_sum(a, m)
        });
        let alpha = sample(3, 3);
        check_unary(sample(9, 2), |t, m| {
            let a = t.leaf(alpha.clone());
            t.pair_weighted_sum(a, m)
        });
        check_unary(sample(3, 2), |t, x| {
            let y = t.scale(x, 3.0);
            t.add_n(&[x, y, x])
        });
    }

    #[test]
    fn pair_sum_layout() {
        let mut t = Tape::new();
        let l = t.leaf(array![[1.0], [2.0]]);
        let r = t.leaf(array![[10.0], [20.0]]);
        let p = t.pair_sum(l, r);
        assert_eq!(t.value(p), &array![[11.0], [21.0], [12.0], [22.0]]);
    }

    #[test]
    fn conv_gradients() {
        let geom = ConvGeom {
            in_channels: 2,
            height: 5,
            width: 4,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let w = sample(3, 18);
        let b = sample(3, 1);
        check_unary(sample(2, 20), |t, x| {
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            t.conv2d(x, wv, bv, geom)
        });
        check_unary(w.clone(), |t, wv| {
            let x = t.leaf(sample(2, 20));
            let bv = t.leaf(b.clone());
            t.conv2d(x, wv, bv, geom)
        });
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let geom = ConvGeom {
            in_channels: 1,
            height: 3,
            width: 3,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let mut t = Tape::new();
        let x = t.leaf(Array2::from_shape_fn((1, 9), |(_, p)| p as f64));
        let w = t.leaf(Array2::from_elem((1, 9), 1.0));
        let b = t.leaf(array![[0.5]]);
        let y = t.conv2d(x, w, b, geom);
        // centre output sums the full 3x3 neighbourhood, corner only 2x2
        assert_eq!(t.value(y)[[0, 4]], 36.5);
        assert_eq!(t.value(y)[[0, 0]], 0.0 + 1.0 + 3.0 + 4.0 + 0.5);
    }

    #[test]
    fn roi_align_gradients_and_uniform_patch() {
        let fmap = sample(2, 16);
        check_unary(fmap.clone(), |t, f| {
            t.roi_align(f, (2, 4, 4), &[[0.3, 0.7, 3.1, 2.9], [1.0, 1.0, 2.0, 3.5]], (2, 2), 2)
        });
        // a 2x2 block of 0.5 inside a zero 4x4 map, pooled over exactly that block
        let mut img = Array2::zeros((1, 16));
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            img[[0, y * 4 + x]] = 0.5;
        }
        let mut t = Tape::new();
        let f = t.leaf(img);
        let out = t.roi_align(f, (1, 4, 4), &[[1.0, 1.0, 3.0, 3.0]], (1, 1), 2);
        assert!((t.value(out)[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fused_scalar_scales_by_upstream() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        let f = t.fused_scalar(3.0, &[x], vec![array![[0.5, -1.0]]]);
        let y = t.scale(f, 4.0);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap(), &array![[2.0, -4.0]]);
    }
}
