//! Multimodal token features.
//!
//! Every token gets a textual embedding (table lookup), a spatial embedding
//! (linear map of its page-normalized box) and a visual embedding
//! (region-pooled features of a convolutional map over the page image).
//! The visual part is projected, the three are summed and layer-normalized,
//! and the result drives document-wide multi-head self-attention.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::docmodel::{Document, PageImage};
use crate::error::{Error, Result};
use crate::params::{glorot, uniform, Bound, ParamStore};
use crate::tape::{ConvGeom, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub attention_layers: usize,
    pub use_visual: bool,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub roi_output: [usize; 2],
    pub roi_sampling: usize,
    /// Page pixels → image pixels when rendering page images.
    pub image_scale: f64,
    pub min_freq: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_heads: 4,
            attention_layers: 1,
            use_visual: true,
            conv_channels: vec![8, 16, 16],
            conv_kernel: 3,
            conv_stride: 2,
            roi_output: [2, 2],
            roi_sampling: 2,
            image_scale: 0.0625,
            min_freq: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("backbone.embed_dim", "must be positive"));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(
                "backbone.num_heads",
                format!("must divide embed_dim {}", self.embed_dim),
            ));
        }
        if self.use_visual {
            if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
                return Err(Error::config("backbone.conv_channels", "need positive channel counts"));
            }
            if self.conv_kernel == 0 || self.conv_stride == 0 {
                return Err(Error::config("backbone.conv_kernel", "kernel and stride must be positive"));
            }
            if self.roi_output.contains(&0) || self.roi_sampling == 0 {
                return Err(Error::config("backbone.roi_output", "pooled grid must be non-empty"));
            }
            if !(self.image_scale > 0.0 && self.image_scale <= 1.0) {
                return Err(Error::config("backbone.image_scale", "must lie in (0, 1]"));
            }
        }
        if self.min_freq == 0 {
            return Err(Error::config("backbone.min_freq", "must be at least 1"));
        }
        Ok(())
    }

    fn roi_width(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(1) * self.roi_output[0] * self.roi_output[1]
    }
}

/// Adds every backbone parameter to `store`.
pub fn init_params<R: Rng>(cfg: &BackboneConfig, vocab_size: usize, rng: &mut R, store: &mut ParamStore) {
    let d = cfg.embed_dim;
    let mut table = uniform(rng, vocab_size, d, 0.5);
    table.row_mut(crate::docmodel::PAD_ID).fill(0.0);
    store.insert("backbone/token_table", table);
    store.insert("backbone/pos_w", glorot(rng, 4, d));
    store.insert("backbone/pos_b", Array2::zeros((1, d)));
    if cfg.use_visual {
        let mut c_in = 1;
        for (k, &c_out) in cfg.conv_channels.iter().enumerate() {
            let fan = c_in * cfg.conv_kernel * cfg.conv_kernel;
            store.insert(format!("backbone/conv{k}/w"), glorot(rng, c_out, fan));
            store.insert(format!("backbone/conv{k}/b"), Array2::zeros((c_out, 1)));
            c_in = c_out;
        }
        store.insert("backbone/vis_w", glorot(rng, cfg.roi_width(), d));
        store.insert("backbone/vis_b", Array2::zeros((1, d)));
    }
    store.insert("backbone/fuse_w", glorot(rng, d, d));
    store.insert("backbone/fuse_b", Array2::zeros((1, d)));
    store.insert("backbone/ln_gain", Array2::ones((1, d)));
    store.insert("backbone/ln_bias", Array2::zeros((1, d)));
    for layer in 0..cfg.attention_layers {
        for name in ["wq", "wk", "wv", "wd"] {
            store.insert(format!("backbone/attn{layer}/{name}"), glorot(rng, d, d));
        }
    }
}

/// Per-token context features and the token span of each segment.
#[derive(Debug, Clone, Copy)]
pub struct FusedContext<'a> {
    pub features: Var,
    pub segment_spans: &'a [(usize, usize)],
}

/// Token boxes divided by page width/height, one `[x0, y0, x1, y1]` row per
/// token in reading order.
pub fn normalized_boxes(doc: &Document) -> Array2<f64> {
    let (pw, ph) = doc.page_size;
    let n = doc.num_tokens();
    let mut out = Array2::zeros((n, 4));
    for (m, tok) in doc.tokens().enumerate() {
        let b = tok.bbox;
        out.row_mut(m)
            .assign(&ndarray::arr1(&[b.x0 / pw, b.y0 / ph, b.x1 / pw, b.y1 / ph]));
    }
    out
}

/// Row `m` is the embedding-table row of token id `ids[m]`.
pub fn embed_tokens(tape: &mut Tape, params: &Bound, ids: &[usize]) -> Var {
    tape.gather(params.var("backbone/token_table"), ids)
}

/// `p_m = box_m · W_p + b_p` over page-normalized boxes.
pub fn embed_positions(tape: &mut Tape, params: &Bound, boxes: &Array2<f64>) -> Var {
    let b = tape.leaf(boxes.clone());
    let lin = tape.matmul(b, params.var("backbone/pos_w"));
    tape.add_row(lin, params.var("backbone/pos_b"))
}

/// Region-pooled convolutional features per token, projected to `d`.
///
/// `token_boxes` are page-pixel boxes. With `use_visual` off the result is
/// all zeros and the image is ignored.
pub fn embed_visual(
    tape: &mut Tape,
    params: &Bound,
    cfg: &BackboneConfig,
    image: Option<&PageImage>,
    token_boxes: &[[f64; 4]],
) -> Result<Var> {
    let d = cfg.embed_dim;
    if !cfg.use_visual {
        return Ok(tape.leaf(Array2::zeros((token_boxes.len(), d))));
    }
    let image = image.ok_or_else(|| {
        Error::config(
            "backbone.use_visual",
            "visual features are enabled but the document has no page image",
        )
    })?;
    let data = Array2::from_shape_vec(
        (image.channels, image.height * image.width),
        image.data.clone(),
    )
    .map_err(|e| Error::InvalidInput(format!("page image: {e}")))?;
    let mut x = tape.leaf(data);
    let (mut c, mut h, mut w) = (image.channels, image.height, image.width);
    for (k, &c_out) in cfg.conv_channels.iter().enumerate() {
        let geom = ConvGeom {
            in_channels: c,
            height: h,
            width: w,
            out_channels: c_out,
            kernel: cfg.conv_kernel,
            stride: cfg.conv_stride,
            padding: cfg.conv_kernel / 2,
        };
        if geom.height + 2 * geom.padding < geom.kernel || geom.width + 2 * geom.padding < geom.kernel {
            return Err(Error::InvalidInput(format!(
                "page image {}x{} too small for conv layer {k}",
                image.height, image.width
            )));
        }
        let y = tape.conv2d(
            x,
            params.var(&format!("backbone/conv{k}/w")),
            params.var(&format!("backbone/conv{k}/b")),
            geom,
        );
        x = tape.relu(y);
        (c, h, w) = (c_out, geom.out_height(), geom.out_width());
    }
    let sx = image.scale * w as f64 / image.width as f64;
    let sy = image.scale * h as f64 / image.height as f64;
    let rois: Vec<[f64; 4]> = token_boxes
        .iter()
        .map(|b| [b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy])
        .collect();
    let pooled = tape.roi_align(
        x,
        (c, h, w),
        &rois,
        (cfg.roi_output[0], cfg.roi_output[1]),
        cfg.roi_sampling,
    );
    let lin = tape.matmul(pooled, params.var("backbone/vis_w"));
    Ok(tape.add_row(lin, params.var("backbone/vis_b")))
}

/// `LayerNorm(Linear(I) + P + T)`; the result is used as queries, keys and
/// values alike.
pub fn fuse_qkv(tape: &mut Tape, params: &Bound, text: Var, pos: Var, visual: Var) -> Result<Var> {
    let shape = tape.shape(text);
    for (name, v) in [("position", pos), ("visual", visual)] {
        if tape.shape(v) != shape {
            return Err(Error::shape(
                "fuse_qkv",
                format!("{shape:?}"),
                format!("{name} {:?}", tape.shape(v)),
            ));
        }
    }
    let lin = tape.matmul(visual, params.var("backbone/fuse_w"));
    let lin = tape.add_row(lin, params.var("backbone/fuse_b"));
    let sum = tape.add_n(&[lin, pos, text]);
    Ok(tape.layer_norm(
        sum,
        params.var("backbone/ln_gain"),
        params.var("backbone/ln_bias"),
        LAYER_NORM_EPS,
    ))
}

/// One multi-head scaled dot-product attention layer over all tokens.
/// Returns the output and, per head, the attention weight matrix.
pub fn attention_layer(
    tape: &mut Tape,
    params: &Bound,
    cfg: &BackboneConfig,
    layer: usize,
    x: Var,
) -> (Var, Vec<Var>) {
    let d = cfg.embed_dim;
    let dk = d / cfg.num_heads;
    let q = tape.matmul(x, params.var(&format!("backbone/attn{layer}/wq")));
    let k = tape.matmul(x, params.var(&format!("backbone/attn{layer}/wk")));
    let v = tape.matmul(x, params.var(&format!("backbone/attn{layer}/wv")));
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (a, b) = (h * dk, (h + 1) * dk);
        let qh = tape.slice_cols(q, a, b);
        let kh = tape.slice_cols(k, a, b);
        let vh = tape.slice_cols(v, a, b);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores, None);
        heads.push(tape.matmul(attn, vh));
        weights.push(attn);
    }
    let cat = tape.concat_cols(&heads);
    (
        tape.matmul(cat, params.var(&format!("backbone/attn{layer}/wd"))),
        weights,
    )
}

/// Stacks `cfg.attention_layers` attention layers over the fused features.
pub fn self_attention_context<'a>(
    tape: &mut Tape,
    params: &Bound,
    cfg: &BackboneConfig,
    fused: Var,
    spans: &'a [(usize, usize)],
) -> FusedContext<'a> {
    let mut x = fused;
    for layer in 0..cfg.attention_layers {
        x = attention_layer(tape, params, cfg, layer, x).0;
    }
    FusedContext {
        features: x,
        segment_spans: spans,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::{render_glyph_image, BBox, TextSegment, Token};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(d: usize) -> BackboneConfig {
        BackboneConfig {
            embed_dim: d,
            num_heads: 2,
            conv_channels: vec![2, 3],
            roi_output: [1, 2],
            image_scale: 0.1,
            ..BackboneConfig::default()
        }
    }

    fn params(cfg: &BackboneConfig, vocab: usize) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_params(cfg, vocab, &mut rng, &mut store);
        store
    }

    fn doc() -> Document {
        let tok = |t: &str, b: [f64; 4]| Token {
            text: t.into(),
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
        };
        let segments = vec![
            TextSegment::from_tokens(0, vec![tok("a", [10., 10., 40., 30.]), tok("b", [45., 10., 80., 30.])], "key"),
            TextSegment::from_tokens(1, vec![tok("a", [10., 10., 40., 30.])], "other"),
        ];
        Document {
            id: "t".into(),
            segments,
            page_size: (200.0, 100.0),
            image: None,
        }
    }

    #[test]
    fn zero_table_gives_zero_rows_and_repeats_match() {
        let cfg = tiny_cfg(4);
        let mut store = params(&cfg, 5);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let out = embed_tokens(&mut t, &b, &[2, 3, 2]);
        assert_eq!(t.value(out).row(0), t.value(out).row(2));
        store.insert("backbone/token_table", Array2::zeros((5, 4)));
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let out = embed_tokens(&mut t, &b, &[2, 3, 2]);
        assert!(t.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn position_embedding_is_a_matrix_product() {
        let cfg = tiny_cfg(2);
        let mut store = params(&cfg, 3);
        // W_p rows [1,0,0,0] and [0,1,0,0] as output dims, stored input-major
        store.insert("backbone/pos_w", array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]);
        store.insert("backbone/pos_b", Array2::zeros((1, 2)));
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let boxes = array![[0.5, 0.25, 0.75, 1.0], [0.5, 0.25, 0.75, 1.0]];
        let p = embed_positions(&mut t, &b, &boxes);
        assert_eq!(t.value(p), &array![[0.5, 0.25], [0.5, 0.25]]);

        store.insert("backbone/pos_w", Array2::zeros((4, 2)));
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let p = embed_positions(&mut t, &b, &boxes);
        assert!(t.value(p).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_boxes_divide_by_page() {
        let nb = normalized_boxes(&doc());
        assert_eq!(nb.row(0).to_vec(), vec![0.05, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn visual_requires_image_when_enabled() {
        let cfg = tiny_cfg(4);
        let store = params(&cfg, 3);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let err = embed_visual(&mut t, &b, &cfg, None, &[[0.0, 0.0, 1.0, 1.0]]).unwrap_err();
        assert!(err.to_string().contains("backbone.use_visual"));

        let off = BackboneConfig {
            use_visual: false,
            ..cfg
        };
        let v = embed_visual(&mut t, &b, &off, None, &[[0.0, 0.0, 1.0, 1.0]]).unwrap();
        assert_eq!(t.shape(v), (1, 4));
        assert!(t.value(v).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_image_bias_free_net_gives_zero_visual() {
        let cfg = tiny_cfg(4);
        let mut store = params(&cfg, 3);
        store.insert("backbone/vis_b", Array2::zeros((1, 4)));
        let image = PageImage {
            channels: 1,
            height: 10,
            width: 20,
            scale: 0.1,
            data: vec![0.0; 200],
        };
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let boxes = [[10.0, 10.0, 40.0, 30.0], [10.0, 10.0, 40.0, 30.0], [50.0, 5.0, 90.0, 60.0]];
        let v = embed_visual(&mut t, &b, &cfg, Some(&image), &boxes).unwrap();
        assert!(t.value(v).iter().all(|&x| x == 0.0));

        // identical boxes give identical rows on a real image
        let d = doc();
        let img = render_glyph_image(&d, 0.1);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let v = embed_visual(&mut t, &b, &cfg, Some(&img), &boxes).unwrap();
        assert_eq!(t.value(v).row(0), t.value(v).row(1));
    }

    #[test]
    fn identity_conv_pools_uniform_patch() {
        let cfg = BackboneConfig {
            embed_dim: 1,
            num_heads: 1,
            conv_channels: vec![1],
            conv_kernel: 1,
            conv_stride: 1,
            roi_output: [1, 1],
            image_scale: 1.0,
            ..BackboneConfig::default()
        };
        let mut store = params(&cfg, 3);
        store.insert("backbone/conv0/w", array![[1.0]]);
        store.insert("backbone/conv0/b", array![[0.0]]);
        store.insert("backbone/vis_w", array![[1.0]]);
        store.insert("backbone/vis_b", array![[0.0]]);
        let mut data = vec![0.0; 16];
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            data[y * 4 + x] = 0.5;
        }
        let image = PageImage {
            channels: 1,
            height: 4,
            width: 4,
            scale: 1.0,
            data,
        };
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let v = embed_visual(&mut t, &b, &cfg, Some(&image), &[[1.0, 1.0, 3.0, 3.0]]).unwrap();
        assert!((t.value(v)[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fused_rows_are_normalized() {
        let cfg = tiny_cfg(4);
        let mut store = params(&cfg, 3);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let tt = t.leaf(array![[1.0, 2.0, 3.0, 4.0], [0.0, -1.0, 5.0, 2.0]]);
        let p = t.leaf(array![[0.5, 0.0, 0.0, 1.0], [1.0, 1.0, 1.0, 1.0]]);
        let i = t.leaf(Array2::zeros((2, 4)));
        let f = fuse_qkv(&mut t, &b, tt, p, i).unwrap();
        for row in t.value(f).outer_iter() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            let var = row.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
        // hand-computed: row [1.5, 2, 3, 5] has mean 2.875, variance 1.796875
        let mean: f64 = 2.875;
        let sd = (1.796875f64 + LAYER_NORM_EPS).sqrt();
        let expect: Vec<f64> = [1.5, 2.0, 3.0, 5.0].iter().map(|v| (v - mean) / sd).collect();
        // visual path adds only the fuse bias, which is zero
        store.insert("backbone/fuse_b", Array2::zeros((1, 4)));
        let mut t2 = Tape::new();
        let b2 = store.bind(&mut t2);
        let tt = t2.leaf(array![[1.0, 2.0, 3.0, 4.0]]);
        let p = t2.leaf(array![[0.5, 0.0, 0.0, 1.0]]);
        let i = t2.leaf(Array2::zeros((1, 4)));
        let f = fuse_qkv(&mut t2, &b2, tt, p, i).unwrap();
        for (got, want) in t2.value(f).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }

        let bad = t2.leaf(Array2::zeros((2, 4)));
        assert!(fuse_qkv(&mut t2, &b2, tt, p, bad).is_err());
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let cfg = tiny_cfg(4);
        let store = params(&cfg, 3);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let x = t.leaf(array![[0.3, -1.0, 2.0, 0.5]]);
        let (out, weights) = attention_layer(&mut t, &b, &cfg, 0, x);
        for w in weights {
            assert_eq!(t.value(w)[[0, 0]], 1.0);
        }
        let expect = t
            .value(x)
            .dot(store.expect("backbone/attn0/wv"))
            .dot(store.expect("backbone/attn0/wd"));
        for (g, e) in t.value(out).iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_are_permutation_equivariant() {
        let cfg = tiny_cfg(4);
        let store = params(&cfg, 3);
        let x0 = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 3 + j * 5) % 7) as f64 * 0.4 - 1.0);
        let perm = [3, 0, 4, 1, 2];
        let xp = Array2::from_shape_fn((5, 4), |(i, j)| x0[[perm[i], j]]);

        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let x = t.leaf(x0);
        let (out, weights) = attention_layer(&mut t, &b, &cfg, 0, x);
        for w in &weights {
            for row in t.value(*w).outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        let xpv = t.leaf(xp);
        let (outp, _) = attention_layer(&mut t, &b, &cfg, 0, xpv);
        for i in 0..5 {
            for j in 0..4 {
                assert!((t.value(outp)[[i, j]] - t.value(out)[[perm[i], j]]).abs() < 1e-12);
            }
        }
    }
}
