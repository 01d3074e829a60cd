//! In-domain query interaction: content/depth transformer encoders, the
//! depth-aware decoder, prediction heads, Hungarian matching and the
//! per-pair detection loss. Both camera domains run this with one shared
//! parameter set.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{giou_2d, project_center, Box2D, Box3D, CameraModel, GeomError};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::{Binding, ParamStore, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("matching needs at least one ground-truth box")]
    EmptyGT,
    #[error("infeasible assignment: {n_queries} queries < {n_gt} ground truths")]
    Infeasible { n_queries: usize, n_gt: usize },
}

/// Ground-truth regression targets for one labeled object in one view.
#[derive(Debug, Clone)]
pub struct GtTarget {
    pub box3d: Box3D,
    pub box2d: Box2D,
    /// Normalized projected 3D center.
    pub center_proj: [f64; 2],
    /// Forward distance in the gravity-aligned camera frame (meters).
    pub depth: f64,
}

impl GtTarget {
    pub fn new(box3d: Box3D, box2d: Box2D, cam: &CameraModel) -> Result<Self, GeomError> {
        let center_proj = project_center(&box3d, cam)?;
        Ok(GtTarget {
            box3d,
            box2d,
            center_proj,
            depth: box3d.center[2],
        })
    }
}

/// Per-query prediction nodes (all rows aligned with query index).
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    /// [N,2]: car / no-object logits.
    pub class_logits: NodeId,
    /// [N,4]: (cx, cy, w, h) in [0,1] after sigmoid.
    pub box2d: NodeId,
    /// [N,2]: normalized projected 3D center.
    pub center3d: NodeId,
    /// [N,3]: (h, w, l) meters, exponential decode (always > 0).
    pub dims: NodeId,
    /// [N,2]: (sin yaw, cos yaw).
    pub orientation: NodeId,
    /// [N,1]: metric depth.
    pub depth: NodeId,
}

/// Plain-value snapshot of [`HeadOutputs`] for matching and inference.
#[derive(Debug, Clone)]
pub struct HeadValues {
    pub p_car: Vec<f64>,
    pub box2d: Vec<[f64; 4]>,
    pub center3d: Vec<[f64; 2]>,
    pub dims: Vec<[f64; 3]>,
    pub orientation: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
}

impl HeadValues {
    pub fn from_tape(tape: &Tape, heads: &HeadOutputs) -> Self {
        let logits = tape.value(heads.class_logits);
        let n = logits.shape[0];
        let p_car = (0..n)
            .map(|i| {
                let (a, b) = (logits.data[i * 2], logits.data[i * 2 + 1]);
                let m = a.max(b);
                let ea = (a - m).exp();
                ea / (ea + (b - m).exp())
            })
            .collect();
        let g2 = |id: NodeId| -> Vec<[f64; 2]> {
            let v = tape.value(id);
            (0..n).map(|i| [v.data[i * 2], v.data[i * 2 + 1]]).collect()
        };
        let v4 = tape.value(heads.box2d);
        let box2d = (0..n)
            .map(|i| [v4.data[i * 4], v4.data[i * 4 + 1], v4.data[i * 4 + 2], v4.data[i * 4 + 3]])
            .collect();
        let v3 = tape.value(heads.dims);
        let dims = (0..n)
            .map(|i| [v3.data[i * 3], v3.data[i * 3 + 1], v3.data[i * 3 + 2]])
            .collect();
        let vd = tape.value(heads.depth);
        HeadValues {
            p_car,
            box2d,
            center3d: g2(heads.center3d),
            dims,
            orientation: g2(heads.orientation),
            depth: vd.data.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.p_car.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_car.is_empty()
    }
}

/// Result of bipartite matching between queries and ground truths.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// assignment[gt] = matched query index (injective).
    pub assignment: Vec<usize>,
    /// [N,K] matching costs (queries × ground truths).
    pub cost_matrix: Tensor,
    /// [N,K], the negated cost matrix kept for the query sampler.
    pub score_matrix: Tensor,
    pub total_cost: f64,
}

/// Fixed 2D sine/cosine positional embedding for an h×w grid, shape [hw, c].
pub fn sincos_pos_2d(h: usize, w: usize, c: usize) -> Tensor {
    assert!(c % 4 == 0, "positional embedding needs channels divisible by 4");
    let half = c / 2;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for i in 0..half {
                let freq = 10000f64.powf(2.0 * (i / 2) as f64 / half as f64);
                let vy = y as f64 / freq;
                let vx = x as f64 / freq;
                out[row * c + i] = if i % 2 == 0 { vy.sin() } else { vy.cos() };
                out[row * c + half + i] = if i % 2 == 0 { vx.sin() } else { vx.cos() };
            }
        }
    }
    Tensor::from_vec(&[h * w, c], out)
}

pub struct Interaction {
    pub channels: usize,
    pub n_queries: usize,
    pub n_heads: usize,
    pub heads_use_full_query: bool,
    pub depth_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
}

const CONTENT_BLOCKS: usize = 3;
const DEPTH_BLOCKS: usize = 1;
const DECODER_BLOCKS: usize = 3;
/// Car-size anchors (h, w, l) scaling the exponential dim decode.
const DIM_ANCHORS: [f64; 3] = [1.5, 1.8, 4.2];

fn xavier(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    store.init_uniform(name, &[rows, cols], limit, rng);
}

fn attn_init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize) {
    for p in ["wq", "wk", "wv", "wo"] {
        xavier(store, rng, &format!("{prefix}.{p}"), c, c);
    }
    for p in ["bq", "bk", "bv", "bo"] {
        store.init_zeros(&format!("{prefix}.{p}"), &[c]);
    }
}

fn ln_init(store: &mut ParamStore, prefix: &str, c: usize) {
    store.init_ones(&format!("{prefix}.g"), &[c]);
    store.init_zeros(&format!("{prefix}.b"), &[c]);
}

fn ffn_init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize) {
    xavier(store, rng, &format!("{prefix}.w1"), c, 2 * c);
    store.init_zeros(&format!("{prefix}.b1"), &[2 * c]);
    xavier(store, rng, &format!("{prefix}.w2"), 2 * c, c);
    store.init_zeros(&format!("{prefix}.b2"), &[c]);
}

fn mlp_init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize) {
    xavier(store, rng, &format!("{prefix}.w1"), cin, cin);
    store.init_zeros(&format!("{prefix}.b1"), &[cin]);
    xavier(store, rng, &format!("{prefix}.w2"), cin, cout);
    store.init_zeros(&format!("{prefix}.b2"), &[cout]);
}

impl Interaction {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        channels: usize,
        n_queries: usize,
        n_heads: usize,
        heads_use_full_query: bool,
        depth_bins: usize,
        d_min: f64,
        d_max: f64,
    ) -> Self {
        let c = channels;
        assert!(c % 2 == 0, "query channels must be even");
        assert!(c % n_heads == 0, "heads must divide channels");
        store.init_uniform("int.queries", &[n_queries, c], 0.5, rng);
        store.init_uniform("int.depth_pos", &[depth_bins + 1, c], 0.1, rng);
        for i in 0..CONTENT_BLOCKS {
            let p = format!("int.cenc{i}");
            ln_init(store, &format!("{p}.ln1"), c);
            attn_init(store, rng, &format!("{p}.attn"), c);
            ln_init(store, &format!("{p}.ln2"), c);
            ffn_init(store, rng, &format!("{p}.ffn"), c);
        }
        for i in 0..DEPTH_BLOCKS {
            let p = format!("int.denc{i}");
            ln_init(store, &format!("{p}.ln1"), c);
            attn_init(store, rng, &format!("{p}.attn"), c);
            ln_init(store, &format!("{p}.ln2"), c);
            ffn_init(store, rng, &format!("{p}.ffn"), c);
        }
        for i in 0..DECODER_BLOCKS {
            let p = format!("int.dec{i}");
            ln_init(store, &format!("{p}.lnd"), c);
            attn_init(store, rng, &format!("{p}.xattn_d"), c);
            ln_init(store, &format!("{p}.lns"), c);
            attn_init(store, rng, &format!("{p}.sattn"), c);
            ln_init(store, &format!("{p}.lnc"), c);
            attn_init(store, rng, &format!("{p}.xattn_c"), c);
            ln_init(store, &format!("{p}.lnf"), c);
            ffn_init(store, rng, &format!("{p}.ffn"), c);
        }
        let head_in = if heads_use_full_query { c } else { c / 2 };
        mlp_init(store, rng, "int.head_cls", head_in, 2);
        mlp_init(store, rng, "int.head_box2d", head_in, 4);
        mlp_init(store, rng, "int.head_center", head_in, 2);
        mlp_init(store, rng, "int.head_dims", head_in, 3);
        mlp_init(store, rng, "int.head_ori", head_in, 2);
        mlp_init(store, rng, "int.head_depth", head_in, 1);
        Interaction {
            channels: c,
            n_queries,
            n_heads,
            heads_use_full_query,
            depth_bins,
            d_min,
            d_max,
        }
    }

    /// Multi-head attention; returns the output and the per-head attention
    /// probability nodes (each rows sum to 1).
    pub fn attention_with_probs(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        prefix: &str,
        q_in: NodeId,
        kv_in: NodeId,
    ) -> (NodeId, Vec<NodeId>) {
        let c = self.channels;
        let dh = c / self.n_heads;
        let lin = |tape: &mut Tape, bind: &mut Binding, x: NodeId, w: &str, b: &str| {
            let wn = bind.node(tape, &format!("{prefix}.{w}"));
            let bn = bind.node(tape, &format!("{prefix}.{b}"));
            let y = tape.matmul(x, wn);
            tape.add_bias(y, bn)
        };
        let q = lin(tape, bind, q_in, "wq", "bq");
        let k = lin(tape, bind, kv_in, "wk", "bk");
        let v = lin(tape, bind, kv_in, "wv", "bv");
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (from, to) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, from, to);
            let kh = tape.slice_cols(k, from, to);
            let vh = tape.slice_cols(v, from, to);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let p = tape.row_softmax(scaled);
            probs.push(p);
            heads.push(tape.matmul(p, vh));
        }
        let cat = tape.concat_cols(&heads);
        let out = lin(tape, bind, cat, "wo", "bo");
        (out, probs)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        prefix: &str,
        q_in: NodeId,
        kv_in: NodeId,
    ) -> NodeId {
        self.attention_with_probs(tape, bind, prefix, q_in, kv_in).0
    }

    fn layer_norm(&self, tape: &mut Tape, bind: &mut Binding, prefix: &str, x: NodeId) -> NodeId {
        let g = bind.node(tape, &format!("{prefix}.g"));
        let b = bind.node(tape, &format!("{prefix}.b"));
        tape.layer_norm(x, g, b, 1e-5)
    }

    fn ffn(&self, tape: &mut Tape, bind: &mut Binding, prefix: &str, x: NodeId) -> NodeId {
        let w1 = bind.node(tape, &format!("{prefix}.w1"));
        let b1 = bind.node(tape, &format!("{prefix}.b1"));
        let w2 = bind.node(tape, &format!("{prefix}.w2"));
        let b2 = bind.node(tape, &format!("{prefix}.b2"));
        let h = tape.matmul(x, w1);
        let h = tape.add_bias(h, b1);
        let h = tape.relu(h);
        let y = tape.matmul(h, w2);
        tape.add_bias(y, b2)
    }

    /// Pre-norm self-attention encoder over a token sequence node whose
    /// positional embedding has already been added.
    pub fn run_encoder(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        stack: &str,
        n_blocks: usize,
        mut x: NodeId,
    ) -> NodeId {
        for i in 0..n_blocks {
            let p = format!("int.{stack}{i}");
            let n1 = self.layer_norm(tape, bind, &format!("{p}.ln1"), x);
            let a = self.attention(tape, bind, &format!("{p}.attn"), n1, n1);
            x = tape.add(x, a);
            let n2 = self.layer_norm(tape, bind, &format!("{p}.ln2"), x);
            let f = self.ffn(tape, bind, &format!("{p}.ffn"), n2);
            x = tape.add(x, f);
        }
        x
    }

    /// Content feature [C,h,w] → content embedding sequence [hw,C]
    /// (3 blocks, sine/cosine positions added to the input sequence).
    pub fn encode_content(&self, tape: &mut Tape, bind: &mut Binding, feat: NodeId) -> NodeId {
        let (c, h, w) = {
            let s = tape.shape(feat);
            (s[0], s[1], s[2])
        };
        assert_eq!(c, self.channels);
        let seq = tape.chw_to_seq(feat);
        let pos = tape.constant(sincos_pos_2d(h, w, c));
        let seq = tape.add(seq, pos);
        self.run_encoder(tape, bind, "cenc", CONTENT_BLOCKS, seq)
    }

    /// Depth feature [C,h,w] → depth embedding sequence [hw,C] (1 block).
    pub fn encode_depth(&self, tape: &mut Tape, bind: &mut Binding, feat: NodeId) -> NodeId {
        let (c, h, w) = {
            let s = tape.shape(feat);
            (s[0], s[1], s[2])
        };
        assert_eq!(c, self.channels);
        let seq = tape.chw_to_seq(feat);
        let pos = tape.constant(sincos_pos_2d(h, w, c));
        let seq = tape.add(seq, pos);
        self.run_encoder(tape, bind, "denc", DEPTH_BLOCKS, seq)
    }

    /// Per-cell argmax depth bin of the foreground depth map logits
    /// ([D+1,h,w]), used to index the learnable depth positional encoding.
    pub fn depth_bin_indices(&self, tape: &Tape, depth_map_logits: NodeId) -> Vec<usize> {
        let s = tape.shape(depth_map_logits);
        let (ch, hw) = (s[0], s[1] * s[2]);
        let v = &tape.value(depth_map_logits).data;
        (0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..ch {
                    if v[c * hw + p] > v[best * hw + p] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// The learnable object queries, one leaf per tape.
    pub fn query_embeddings(&self, tape: &mut Tape, bind: &mut Binding) -> NodeId {
        bind.node(tape, "int.queries")
    }

    /// Depth-aware decoder: three blocks of depth cross-attention,
    /// self-attention, content cross-attention and an FFN. `bin_idx` selects
    /// rows of the learnable depth positional encoding per depth token.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        queries: NodeId,
        content_emb: NodeId,
        depth_emb: NodeId,
        bin_idx: &[usize],
        grid: (usize, usize),
    ) -> NodeId {
        let (h, w) = grid;
        assert_eq!(tape.shape(content_emb)[0], h * w);
        assert_eq!(tape.shape(depth_emb)[0], h * w);
        assert_eq!(bin_idx.len(), h * w);
        let table = bind.node(tape, "int.depth_pos");
        let dpos = tape.gather_rows(table, bin_idx);
        let depth_kv = tape.add(depth_emb, dpos);
        let cpos = tape.constant(sincos_pos_2d(h, w, self.channels));
        let content_kv = tape.add(content_emb, cpos);
        let mut q = queries;
        for i in 0..DECODER_BLOCKS {
            let p = format!("int.dec{i}");
            let n = self.layer_norm(tape, bind, &format!("{p}.lnd"), q);
            let a = self.attention(tape, bind, &format!("{p}.xattn_d"), n, depth_kv);
            q = tape.add(q, a);
            let n = self.layer_norm(tape, bind, &format!("{p}.lns"), q);
            let a = self.attention(tape, bind, &format!("{p}.sattn"), n, n);
            q = tape.add(q, a);
            let n = self.layer_norm(tape, bind, &format!("{p}.lnc"), q);
            let a = self.attention(tape, bind, &format!("{p}.xattn_c"), n, content_kv);
            q = tape.add(q, a);
            let n = self.layer_norm(tape, bind, &format!("{p}.lnf"), q);
            let f = self.ffn(tape, bind, &format!("{p}.ffn"), n);
            q = tape.add(q, f);
        }
        q
    }

    fn mlp(&self, tape: &mut Tape, bind: &mut Binding, prefix: &str, x: NodeId) -> NodeId {
        let w1 = bind.node(tape, &format!("{prefix}.w1"));
        let b1 = bind.node(tape, &format!("{prefix}.b1"));
        let w2 = bind.node(tape, &format!("{prefix}.w2"));
        let b2 = bind.node(tape, &format!("{prefix}.b2"));
        let h = tape.matmul(x, w1);
        let h = tape.add_bias(h, b1);
        let h = tape.relu(h);
        let y = tape.matmul(h, w2);
        tape.add_bias(y, b2)
    }

    /// Prediction heads. Classification reads the semantic half-channels,
    /// regression the geometry half (unless `heads_use_full_query`).
    pub fn heads(&self, tape: &mut Tape, bind: &mut Binding, qd: NodeId) -> HeadOutputs {
        let c = self.channels;
        let n = tape.shape(qd)[0];
        let (sem, geo) = if self.heads_use_full_query {
            (qd, qd)
        } else {
            (
                tape.slice_cols(qd, 0, c / 2),
                tape.slice_cols(qd, c / 2, c),
            )
        };
        let class_logits = self.mlp(tape, bind, "int.head_cls", sem);
        let b2 = self.mlp(tape, bind, "int.head_box2d", geo);
        let box2d = tape.sigmoid(b2);
        let ct = self.mlp(tape, bind, "int.head_center", geo);
        let center3d = tape.sigmoid(ct);
        let dm = self.mlp(tape, bind, "int.head_dims", geo);
        let dm = tape.exp(dm);
        let anchors = Tensor::from_vec(&[n, 3], DIM_ANCHORS.repeat(n));
        let dims = tape.mul_mask(dm, anchors);
        let orientation = self.mlp(tape, bind, "int.head_ori", geo);
        let dp = self.mlp(tape, bind, "int.head_depth", geo);
        let dp = tape.sigmoid(dp);
        let dp = tape.scale(dp, self.d_max - self.d_min);
        let depth = tape.add_scalar(dp, self.d_min);
        HeadOutputs {
            class_logits,
            box2d,
            center3d,
            dims,
            orientation,
            depth,
        }
    }
}

/// Focal-style positive classification cost: (1-p)^2 · (-ln p).
pub fn focal_class_cost(p_car: f64) -> f64 {
    let p = p_car.clamp(1e-12, 1.0);
    (1.0 - p) * (1.0 - p) * (-p.ln())
}

/// Weighted matching-cost combination (λ1..λ4 of the seven weights).
pub fn combine_match_cost(lambdas: &[f64; 7], l_cls: f64, l_3d: f64, l_edge: f64, l_giou: f64) -> f64 {
    lambdas[0] * l_cls + lambdas[1] * l_3d + lambdas[2] * l_edge + lambdas[3] * l_giou
}

/// [N,K] matching-cost matrix between query predictions and ground truths.
pub fn matching_cost(
    pred: &HeadValues,
    gts: &[GtTarget],
    lambdas: &[f64; 7],
) -> Result<Tensor, MatchError> {
    if gts.is_empty() {
        return Err(MatchError::EmptyGT);
    }
    let n = pred.len();
    let k = gts.len();
    let mut cost = vec![0.0; n * k];
    for (qi, row) in cost.chunks_mut(k).enumerate() {
        let l_cls = focal_class_cost(pred.p_car[qi]);
        let pb = Box2D::new(
            pred.box2d[qi][0],
            pred.box2d[qi][1],
            pred.box2d[qi][2],
            pred.box2d[qi][3],
        );
        for (gi, gt) in gts.iter().enumerate() {
            let l_3d = (pred.center3d[qi][0] - gt.center_proj[0]).abs()
                + (pred.center3d[qi][1] - gt.center_proj[1]).abs();
            let l_edge = (pb.cx - gt.box2d.cx).abs()
                + (pb.cy - gt.box2d.cy).abs()
                + (pb.w - gt.box2d.w).abs()
                + (pb.h - gt.box2d.h).abs();
            let l_giou = 1.0 - giou_2d(&pb, &gt.box2d);
            row[gi] = combine_match_cost(lambdas, l_cls, l_3d, l_edge, l_giou);
        }
    }
    Ok(Tensor::from_vec(&[n, k], cost))
}

/// Minimal-cost injective assignment of ground truths to queries
/// (shortest-augmenting-path Hungarian; deterministic, ties resolved toward
/// the lowest query index by scan order).
pub fn hungarian(cost_matrix: &Tensor) -> Result<MatchResult, MatchError> {
    let (n, k) = cost_matrix.dims2();
    if k == 0 {
        return Err(MatchError::EmptyGT);
    }
    if n < k {
        return Err(MatchError::Infeasible { n_queries: n, n_gt: k });
    }
    let cost = |g: usize, q: usize| cost_matrix.data[q * k + g];
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row (1-based) matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![usize::MAX; k];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total_cost = assignment
        .iter()
        .enumerate()
        .map(|(g, &q)| cost(g, q))
        .sum();
    let score = Tensor::from_vec(
        &[n, k],
        cost_matrix.data.iter().map(|c| -c).collect(),
    );
    Ok(MatchResult {
        assignment,
        cost_matrix: cost_matrix.clone(),
        score_matrix: score,
        total_cost,
    })
}

/// Differentiable loss components summed over all queries of one view.
#[derive(Debug, Clone, Copy)]
pub struct PairLossNodes {
    /// λ-weighted sum over matched pairs plus no-object class terms
    /// (divide by K for the overall loss).
    pub total: NodeId,
    pub cls: NodeId,
    pub center3d: NodeId,
    pub edge: NodeId,
    pub giou: NodeId,
    pub dims: NodeId,
    pub orientation: NodeId,
    pub depth: NodeId,
}

/// Builds the per-pair loss for matched queries (matching cost plus dim,
/// orientation and depth terms) and a no-object classification term for the
/// rest.
pub fn pair_loss(
    tape: &mut Tape,
    heads: &HeadOutputs,
    gts: &[GtTarget],
    m: &MatchResult,
    lambdas: &[f64; 7],
) -> PairLossNodes {
    let n = tape.shape(heads.class_logits)[0];
    // classification: matched queries → car (0), the rest → no-object (1)
    let mut targets = vec![Some(1usize); n];
    for &q in &m.assignment {
        targets[q] = Some(0);
    }
    let cls_mean = tape.focal_map(heads.class_logits, &targets, 2.0);
    let cls = tape.scale(cls_mean, n as f64);

    let mut l3d_terms = Vec::new();
    let mut edge_terms = Vec::new();
    let mut giou_terms = Vec::new();
    let mut dim_terms = Vec::new();
    let mut ori_terms = Vec::new();
    let mut depth_terms = Vec::new();
    for (g, &q) in m.assignment.iter().enumerate() {
        let gt = &gts[g];
        let idx_abs_diff = |tape: &mut Tape, node: NodeId, flat: usize, target: f64| {
            let x = tape.index(node, flat);
            let t = tape.scalar_const(target);
            let d = tape.sub(x, t);
            tape.abs(d)
        };
        for (j, t) in gt.center_proj.iter().enumerate() {
            l3d_terms.push(idx_abs_diff(tape, heads.center3d, q * 2 + j, *t));
        }
        let bt = [gt.box2d.cx, gt.box2d.cy, gt.box2d.w, gt.box2d.h];
        for (j, t) in bt.iter().enumerate() {
            edge_terms.push(idx_abs_diff(tape, heads.box2d, q * 4 + j, *t));
        }
        giou_terms.push(giou_loss_term(tape, heads.box2d, q, &gt.box2d));
        for (j, t) in gt.box3d.dims.iter().enumerate() {
            dim_terms.push(idx_abs_diff(tape, heads.dims, q * 3 + j, *t));
        }
        let (sy, cy) = gt.box3d.yaw.sin_cos();
        ori_terms.push(idx_abs_diff(tape, heads.orientation, q * 2, sy));
        ori_terms.push(idx_abs_diff(tape, heads.orientation, q * 2 + 1, cy));
        depth_terms.push(idx_abs_diff(tape, heads.depth, q, gt.depth));
    }
    let sum_terms = |tape: &mut Tape, terms: Vec<NodeId>| -> NodeId {
        match terms.len() {
            0 => tape.scalar_const(0.0),
            _ => {
                let mut acc = terms[0];
                for t in &terms[1..] {
                    acc = tape.add(acc, *t);
                }
                acc
            }
        }
    };
    let center3d = sum_terms(tape, l3d_terms);
    let edge = sum_terms(tape, edge_terms);
    let giou = sum_terms(tape, giou_terms);
    let dims = sum_terms(tape, dim_terms);
    let orientation = sum_terms(tape, ori_terms);
    let depth = sum_terms(tape, depth_terms);

    let mut total = tape.scale(cls, lambdas[0]);
    for (node, lam) in [
        (center3d, lambdas[1]),
        (edge, lambdas[2]),
        (giou, lambdas[3]),
        (dims, lambdas[4]),
        (orientation, lambdas[5]),
        (depth, lambdas[6]),
    ] {
        let w = tape.scale(node, lam);
        total = tape.add(total, w);
    }
    PairLossNodes {
        total,
        cls,
        center3d,
        edge,
        giou,
        dims,
        orientation,
        depth,
    }
}

/// 1 − GIoU between predicted box `q` of a [N,4] sigmoid box tensor and a
/// fixed ground-truth box, built from scalar tape ops.
fn giou_loss_term(tape: &mut Tape, box2d: NodeId, q: usize, gt: &Box2D) -> NodeId {
    let cx = tape.index(box2d, q * 4);
    let cy = tape.index(box2d, q * 4 + 1);
    let w = tape.index(box2d, q * 4 + 2);
    let h = tape.index(box2d, q * 4 + 3);
    let half = |tape: &mut Tape, s: NodeId| tape.scale(s, 0.5);
    let hw = half(tape, w);
    let hh = half(tape, h);
    let ax0 = tape.sub(cx, hw);
    let ax1 = tape.add(cx, hw);
    let ay0 = tape.sub(cy, hh);
    let ay1 = tape.add(cy, hh);
    let (bx0, by0, bx1, by1) = gt.bounds();
    let c = |tape: &mut Tape, v: f64| tape.scalar_const(v);
    let bx0 = c(tape, bx0);
    let by0 = c(tape, by0);
    let bx1 = c(tape, bx1);
    let by1 = c(tape, by1);
    let ix0 = tape.maximum(ax0, bx0);
    let iy0 = tape.maximum(ay0, by0);
    let ix1 = tape.minimum(ax1, bx1);
    let iy1 = tape.minimum(ay1, by1);
    let iwr = tape.sub(ix1, ix0);
    let iw = tape.clamp_min(iwr, 0.0);
    let ihr = tape.sub(iy1, iy0);
    let ih = tape.clamp_min(ihr, 0.0);
    let inter = tape.mul(iw, ih);
    let area_a = tape.mul(w, h);
    let area_b = c(tape, gt.area());
    let ab = tape.add(area_a, area_b);
    let union = tape.sub(ab, inter);
    let hx0 = tape.minimum(ax0, bx0);
    let hx1 = tape.maximum(ax1, bx1);
    let hy0 = tape.minimum(ay0, by0);
    let hy1 = tape.maximum(ay1, by1);
    let hwd = tape.sub(hx1, hx0);
    let hht = tape.sub(hy1, hy0);
    let hull = tape.mul(hwd, hht);
    let iou = tape.div(inter, union);
    let slack = tape.sub(hull, union);
    let pen = tape.div(slack, hull);
    let giou = tape.sub(iou, pen);
    let one = c(tape, 1.0);
    tape.sub(one, giou)
}
