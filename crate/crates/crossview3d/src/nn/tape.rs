//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] owns a flat arena of nodes; ops append nodes and return
//! [`NodeId`] handles. `backward` seeds a scalar output with gradient 1 and
//! walks the arena in reverse. Everything is f64 so analytic gradients can be
//! checked against central finite differences at tight tolerances.

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op {
    /// Input node; `grad_wanted` distinguishes parameters from constants.
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    // the scalar is baked into the forward value; backward only needs the id
    AddScalar(NodeId, #[allow(dead_code)] f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    SumAll(NodeId),
    /// Adds a bias row-vector to every row of a 2D tensor.
    AddBias(NodeId, NodeId),
    RowSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        /// im2col matrix cached from the forward pass, (Cin·kh·kw) × (Ho·Wo).
        cols: Tensor,
    },
    UpsampleNearest2(NodeId),
    /// [C,H,W] → [H·W, C].
    ChwToSeq(NodeId),
    GatherRows {
        table: NodeId,
        idx: Vec<usize>,
    },
    SelectRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        from: usize,
        to: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    RowL2Normalize(NodeId),
    /// Scalar selection from a flat tensor.
    Index(NodeId, usize),
    Maximum(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    ClampMin(NodeId, f64),
    /// Elementwise product with a constant mask (no gradient to the mask).
    MulMask(NodeId, Tensor),
    /// Mean multiclass focal loss over cells; `None` targets are masked out.
    FocalMap {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        gamma: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "div shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x / y).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::Div(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| x * k).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a);
        self.push(t, Op::Scale(a, k), g)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| x + k).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a);
        self.push(t, Op::AddScalar(a, k), g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.nodes[a.0].value.dims2();
        let (kb, n) = self.nodes[b.0].value.dims2();
        assert_eq!(ka, kb, "matmul inner dim mismatch");
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            ka,
            n,
            &self.nodes[a.0].value.data,
            &self.nodes[b.0].value.data,
            &mut out,
        );
        let g = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), g)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.nodes[a.0].value.dims2();
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let g = self.ng(a);
        self.push(Tensor::from_vec(&[c, r], out), Op::Transpose(a), g)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a);
        self.push(t, Op::Relu(a), g)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a);
        self.push(t, Op::Sigmoid(a), g)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| x.exp()).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a);
        self.push(t, Op::Exp(a), g)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| x.ln()).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a);
        self.push(t, Op::Ln(a), g)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| x.sqrt()).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a);
        self.push(t, Op::Sqrt(a), g)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| x.abs()).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a);
        self.push(t, Op::Abs(a), g)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let g = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.nodes[a.0].value.dims2();
        assert_eq!(self.nodes[bias.0].value.len(), c, "bias length mismatch");
        let mut data = self.nodes[a.0].value.data.clone();
        let bd = &self.nodes[bias.0].value.data;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bd[j];
            }
        }
        let g = self.ng(a) || self.ng(bias);
        self.push(Tensor::from_vec(&[r, c], data), Op::AddBias(a, bias), g)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.nodes[a.0].value.dims2();
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let g = self.ng(a);
        self.push(Tensor::from_vec(&[r, c], out), Op::RowSoftmax(a), g)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (r, c) = self.nodes[x.0].value.dims2();
        let src = &self.nodes[x.0].value.data;
        let gd = &self.nodes[gamma.0].value.data;
        let bd = &self.nodes[beta.0].value.data;
        assert_eq!(gd.len(), c);
        assert_eq!(bd.len(), c);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::from_vec(&[r, c], out),
            Op::LayerNorm { x, gamma, beta, eps },
            g,
        )
    }

    /// 2D convolution on a [Cin,H,W] input with [Cout,Cin,kh,kw] weights.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let (cin, h, win) = self.nodes[x.0].value.dims3();
        let ws = self.nodes[w.0].value.shape.clone();
        assert_eq!(ws.len(), 4, "conv weight must be 4D");
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cin, wcin, "conv channel mismatch");
        assert_eq!(self.nodes[b.0].value.len(), cout, "conv bias mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (win + 2 * pad - kw) / stride + 1;
        let cols = im2col(&self.nodes[x.0].value.data, cin, h, win, kh, kw, stride, pad, ho, wo);
        let mut out = vec![0.0; cout * ho * wo];
        gemm_acc(
            cout,
            cin * kh * kw,
            ho * wo,
            &self.nodes[w.0].value.data,
            &cols.data,
            &mut out,
        );
        let bd = self.nodes[b.0].value.data.clone();
        for c in 0..cout {
            for p in 0..ho * wo {
                out[c * ho * wo + p] += bd[c];
            }
        }
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Tensor::from_vec(&[cout, ho, wo], out),
            Op::Conv2d { x, w, b, stride, pad, cols },
            g,
        )
    }

    pub fn upsample_nearest2(&mut self, a: NodeId) -> NodeId {
        let (c, h, w) = self.nodes[a.0].value.dims3();
        let src = &self.nodes[a.0].value.data;
        let (ho, wo) = (h * 2, w * 2);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[ch * ho * wo + i * wo + j] = src[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let g = self.ng(a);
        self.push(Tensor::from_vec(&[c, ho, wo], out), Op::UpsampleNearest2(a), g)
    }

    /// [C,H,W] feature map to a (H·W)×C token sequence.
    pub fn chw_to_seq(&mut self, a: NodeId) -> NodeId {
        let (c, h, w) = self.nodes[a.0].value.dims3();
        let src = &self.nodes[a.0].value.data;
        let hw = h * w;
        let mut out = vec![0.0; hw * c];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = src[ch * hw + p];
            }
        }
        let g = self.ng(a);
        self.push(Tensor::from_vec(&[hw, c], out), Op::ChwToSeq(a), g)
    }

    /// Rows of an embedding table selected by index (scatter-add backward).
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let (_r, c) = self.nodes[table.0].value.dims2();
        let src = &self.nodes[table.0].value.data;
        let mut out = vec![0.0; idx.len() * c];
        for (i, &row) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&src[row * c..(row + 1) * c]);
        }
        let g = self.ng(table);
        self.push(
            Tensor::from_vec(&[idx.len(), c], out),
            Op::GatherRows { table, idx: idx.to_vec() },
            g,
        )
    }

    /// Row selection from an activation (same backward as gather).
    pub fn select_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let (_r, c) = self.nodes[x.0].value.dims2();
        let src = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; idx.len() * c];
        for (i, &row) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&src[row * c..(row + 1) * c]);
        }
        let g = self.ng(x);
        self.push(
            Tensor::from_vec(&[idx.len(), c], out),
            Op::SelectRows { x, idx: idx.to_vec() },
            g,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let (r, c) = self.nodes[x.0].value.dims2();
        assert!(from < to && to <= c, "bad column slice {from}..{to} of {c}");
        let src = &self.nodes[x.0].value.data;
        let w = to - from;
        let mut out = vec![0.0; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&src[i * c + from..i * c + to]);
        }
        let g = self.ng(x);
        self.push(Tensor::from_vec(&[r, w], out), Op::SliceCols { x, from, to }, g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.nodes[parts[0].0].value.dims2().0;
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.dims2().1).sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for p in parts {
            let (pr, pc) = self.nodes[p.0].value.dims2();
            assert_eq!(pr, r, "concat_cols row mismatch");
            let src = &self.nodes[p.0].value.data;
            for i in 0..r {
                out[i * total + off..i * total + off + pc].copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let g = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::from_vec(&[r, total], out), Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let c = self.nodes[parts[0].0].value.dims2().1;
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.dims2().0).sum();
        let mut out = Vec::with_capacity(total * c);
        for p in parts {
            let (_, pc) = self.nodes[p.0].value.dims2();
            assert_eq!(pc, c, "concat_rows col mismatch");
            out.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let g = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::from_vec(&[total, c], out), Op::ConcatRows(parts.to_vec()), g)
    }

    /// Rows scaled to unit L2 norm.
    pub fn row_l2_normalize(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.nodes[a.0].value.dims2();
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
            for j in 0..c {
                out[i * c + j] = row[j] * inv;
            }
        }
        let g = self.ng(a);
        self.push(Tensor::from_vec(&[r, c], out), Op::RowL2Normalize(a), g)
    }

    /// Scalar element extraction.
    pub fn index(&mut self, a: NodeId, i: usize) -> NodeId {
        let v = self.nodes[a.0].value.data[i];
        let g = self.ng(a);
        self.push(Tensor::scalar(v), Op::Index(a, i), g)
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape);
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x.max(*y)).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::Maximum(a, b), g)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape);
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x.min(*y)).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::Minimum(a, b), g)
    }

    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| x.max(lo)).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a);
        self.push(t, Op::ClampMin(a, lo), g)
    }

    pub fn mul_mask(&mut self, a: NodeId, mask: Tensor) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.shape, mask.shape, "mask shape mismatch");
        let data = va.data.iter().zip(&mask.data).map(|(x, m)| x * m).collect();
        let t = Tensor::from_vec(&va.shape.clone(), data);
        let g = self.ng(a);
        self.push(t, Op::MulMask(a, mask), g)
    }

    /// Mean multiclass focal loss `(1 - p_t)^γ · (-log p_t)` over supervised
    /// cells of a (cells × classes) logit map. `None` targets are excluded
    /// from both the loss and the normalizer.
    pub fn focal_map(&mut self, logits: NodeId, targets: &[Option<usize>], gamma: f64) -> NodeId {
        let (r, c) = self.nodes[logits.0].value.dims2();
        assert_eq!(targets.len(), r, "focal target count mismatch");
        let src = &self.nodes[logits.0].value.data;
        let m = targets.iter().filter(|t| t.is_some()).count();
        let mut total = 0.0;
        for i in 0..r {
            let Some(t) = targets[i] else { continue };
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let logp = row[t] - mx - z.ln();
            let p = logp.exp();
            total += (1.0 - p).powf(gamma) * (-logp);
        }
        let val = if m == 0 { 0.0 } else { total / m as f64 };
        let g = self.ng(logits);
        self.push(
            Tensor::scalar(val),
            Op::FocalMap {
                logits,
                targets: targets.to_vec(),
                gamma,
            },
            g,
        )
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Tensor {
        if self.nodes[id.0].grad.is_none() {
            let shape = self.nodes[id.0].value.shape.clone();
            self.nodes[id.0].grad = Some(Tensor::zeros(&shape));
        }
        self.nodes[id.0].grad.as_mut().unwrap()
    }

    fn acc_grad(&mut self, id: NodeId, add: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let g = self.grad_buf(id);
        for (d, s) in g.data.iter_mut().zip(add) {
            *d += s;
        }
    }

    /// Runs reverse-mode accumulation from a scalar output.
    pub fn backward(&mut self, out: NodeId) {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward needs a scalar");
        self.grad_buf(out).data[0] = 1.0;
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            self.step_backward(i, &g);
            self.nodes[i].grad = Some(g);
        }
    }

    fn step_backward(&mut self, i: usize, g: &Tensor) {
        // values are read before mutating grads; clone small slices as needed
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_grad(a, &g.data);
                self.acc_grad(b, &g.data);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_grad(a, &g.data);
                let neg: Vec<f64> = g.data.iter().map(|v| -v).collect();
                self.acc_grad(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].value.data)
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let db: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(gv, av)| gv * av)
                    .collect();
                self.acc_grad(a, &da);
                self.acc_grad(b, &db);
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let bd = self.nodes[b.0].value.data.clone();
                let ad = self.nodes[a.0].value.data.clone();
                let da: Vec<f64> = g.data.iter().zip(&bd).map(|(gv, bv)| gv / bv).collect();
                let db: Vec<f64> = g
                    .data
                    .iter()
                    .zip(ad.iter().zip(&bd))
                    .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                    .collect();
                self.acc_grad(a, &da);
                self.acc_grad(b, &db);
            }
            Op::Scale(a, k) => {
                let (a, k) = (*a, *k);
                let da: Vec<f64> = g.data.iter().map(|v| v * k).collect();
                self.acc_grad(a, &da);
            }
            Op::AddScalar(a, _) => {
                let a = *a;
                self.acc_grad(a, &g.data);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.nodes[a.0].value.dims2();
                let (_, n) = self.nodes[b.0].value.dims2();
                if self.ng(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt_acc(m, n, k, &g.data, &self.nodes[b.0].value.data, &mut da);
                    self.acc_grad(a, &da);
                }
                if self.ng(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(k, m, n, &self.nodes[a.0].value.data, &g.data, &mut db);
                    self.acc_grad(b, &db);
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                let (c, r) = {
                    let s = &self.nodes[i].value.shape;
                    (s[0], s[1])
                };
                let mut da = vec![0.0; r * c];
                for x in 0..c {
                    for y in 0..r {
                        da[y * c + x] = g.data[x * r + y];
                    }
                }
                self.acc_grad(a, &da);
            }
            Op::Relu(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc_grad(a, &da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[i].value.data)
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                self.acc_grad(a, &da);
            }
            Op::Exp(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[i].value.data)
                    .map(|(gv, yv)| gv * yv)
                    .collect();
                self.acc_grad(a, &da);
            }
            Op::Ln(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(gv, xv)| gv / xv)
                    .collect();
                self.acc_grad(a, &da);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[i].value.data)
                    .map(|(gv, yv)| gv / (2.0 * yv))
                    .collect();
                self.acc_grad(a, &da);
            }
            Op::Abs(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(gv, xv)| gv * xv.signum() * if *xv == 0.0 { 0.0 } else { 1.0 })
                    .collect();
                self.acc_grad(a, &da);
            }
            Op::SumAll(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.len();
                let da = vec![g.data[0]; n];
                self.acc_grad(a, &da);
            }
            Op::AddBias(a, b) => {
                let (a, b) = (*a, *b);
                let (r, c) = self.nodes[a.0].value.dims2();
                self.acc_grad(a, &g.data);
                let mut db = vec![0.0; c];
                for x in 0..r {
                    for y in 0..c {
                        db[y] += g.data[x * c + y];
                    }
                }
                self.acc_grad(b, &db);
            }
            Op::RowSoftmax(a) => {
                let a = *a;
                let (r, c) = self.nodes[i].value.dims2();
                let p = &self.nodes[i].value.data;
                let mut da = vec![0.0; r * c];
                for x in 0..r {
                    let dot: f64 = (0..c).map(|y| g.data[x * c + y] * p[x * c + y]).sum();
                    for y in 0..c {
                        da[x * c + y] = p[x * c + y] * (g.data[x * c + y] - dot);
                    }
                }
                self.acc_grad(a, &da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let (r, c) = self.nodes[x.0].value.dims2();
                let xd = self.nodes[x.0].value.data.clone();
                let gd = self.nodes[gamma.0].value.data.clone();
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for row in 0..r {
                    let xs = &xd[row * c..(row + 1) * c];
                    let gs = &g.data[row * c..(row + 1) * c];
                    let mean = xs.iter().sum::<f64>() / c as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                    let dy_g: Vec<f64> = gs.iter().zip(&gd).map(|(gy, gm)| gy * gm).collect();
                    let s1: f64 = dy_g.iter().sum();
                    let s2: f64 = dy_g.iter().zip(&xhat).map(|(d, h)| d * h).sum();
                    for j in 0..c {
                        dx[row * c + j] =
                            inv * (dy_g[j] - s1 / c as f64 - xhat[j] * s2 / c as f64);
                        dgamma[j] += gs[j] * xhat[j];
                        dbeta[j] += gs[j];
                    }
                }
                self.acc_grad(x, &dx);
                self.acc_grad(gamma, &dgamma);
                self.acc_grad(beta, &dbeta);
            }
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let cols = cols.clone();
                let (cin, h, win) = self.nodes[x.0].value.dims3();
                let ws = self.nodes[w.0].value.shape.clone();
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ho, wo) = {
                    let s = &self.nodes[i].value.shape;
                    (s[1], s[2])
                };
                let kk = cin * kh * kw;
                if self.ng(w) {
                    // dW = dY (cout × howo) · colsᵀ (howo × kk)
                    let mut dw = vec![0.0; cout * kk];
                    gemm_nt_acc(cout, ho * wo, kk, &g.data, &cols.data, &mut dw);
                    self.acc_grad(w, &dw);
                }
                if self.ng(b) {
                    let mut db = vec![0.0; cout];
                    for c in 0..cout {
                        db[c] = g.data[c * ho * wo..(c + 1) * ho * wo].iter().sum();
                    }
                    self.acc_grad(b, &db);
                }
                if self.ng(x) {
                    // dcols = Wᵀ (kk × cout) · dY (cout × howo)
                    let mut dcols = vec![0.0; kk * ho * wo];
                    gemm_tn_acc(
                        kk,
                        cout,
                        ho * wo,
                        &self.nodes[w.0].value.data,
                        &g.data,
                        &mut dcols,
                    );
                    let dx = col2im(&dcols, cin, h, win, kh, kw, stride, pad, ho, wo);
                    self.acc_grad(x, &dx);
                }
            }
            Op::UpsampleNearest2(a) => {
                let a = *a;
                let (c, h, w) = self.nodes[a.0].value.dims3();
                let (ho, wo) = (h * 2, w * 2);
                let mut da = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        for x in 0..wo {
                            da[ch * h * w + (y / 2) * w + x / 2] += g.data[ch * ho * wo + y * wo + x];
                        }
                    }
                }
                self.acc_grad(a, &da);
            }
            Op::ChwToSeq(a) => {
                let a = *a;
                let (c, h, w) = self.nodes[a.0].value.dims3();
                let hw = h * w;
                let mut da = vec![0.0; c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        da[ch * hw + p] = g.data[p * c + ch];
                    }
                }
                self.acc_grad(a, &da);
            }
            Op::GatherRows { table, idx } => {
                let table = *table;
                let idx = idx.clone();
                let (r, c) = self.nodes[table.0].value.dims2();
                let mut da = vec![0.0; r * c];
                for (i2, &row) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[row * c + j] += g.data[i2 * c + j];
                    }
                }
                self.acc_grad(table, &da);
            }
            Op::SelectRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let (r, c) = self.nodes[x.0].value.dims2();
                let mut da = vec![0.0; r * c];
                for (i2, &row) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[row * c + j] += g.data[i2 * c + j];
                    }
                }
                self.acc_grad(x, &da);
            }
            Op::SliceCols { x, from, to } => {
                let (x, from, to) = (*x, *from, *to);
                let (r, c) = self.nodes[x.0].value.dims2();
                let w = to - from;
                let mut da = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..w {
                        da[i2 * c + from + j] = g.data[i2 * w + j];
                    }
                }
                self.acc_grad(x, &da);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let total = self.nodes[i].value.dims2().1;
                let r = self.nodes[i].value.dims2().0;
                let mut off = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.dims2().1;
                    let mut dp = vec![0.0; r * pc];
                    for i2 in 0..r {
                        dp[i2 * pc..(i2 + 1) * pc]
                            .copy_from_slice(&g.data[i2 * total + off..i2 * total + off + pc]);
                    }
                    self.acc_grad(p, &dp);
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let c = self.nodes[i].value.dims2().1;
                let mut off = 0;
                for p in parts {
                    let pr = self.nodes[p.0].value.dims2().0;
                    let dp = g.data[off * c..(off + pr) * c].to_vec();
                    self.acc_grad(p, &dp);
                    off += pr;
                }
            }
            Op::RowL2Normalize(a) => {
                let a = *a;
                let (r, c) = self.nodes[a.0].value.dims2();
                let xd = self.nodes[a.0].value.data.clone();
                let yd = self.nodes[i].value.data.clone();
                let mut da = vec![0.0; r * c];
                for row in 0..r {
                    let xs = &xd[row * c..(row + 1) * c];
                    let ys = &yd[row * c..(row + 1) * c];
                    let gs = &g.data[row * c..(row + 1) * c];
                    let n = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n == 0.0 {
                        continue;
                    }
                    let dot: f64 = gs.iter().zip(ys).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..c {
                        da[row * c + j] = (gs[j] - ys[j] * dot) / n;
                    }
                }
                self.acc_grad(a, &da);
            }
            Op::Index(a, j) => {
                let (a, j) = (*a, *j);
                let n = self.nodes[a.0].value.len();
                let mut da = vec![0.0; n];
                da[j] = g.data[0];
                self.acc_grad(a, &da);
            }
            Op::Maximum(a, b) => {
                let (a, b) = (*a, *b);
                let ad = self.nodes[a.0].value.data.clone();
                let bd = self.nodes[b.0].value.data.clone();
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(ad.iter().zip(&bd))
                    .map(|(gv, (av, bv))| if av >= bv { *gv } else { 0.0 })
                    .collect();
                let db: Vec<f64> = g
                    .data
                    .iter()
                    .zip(ad.iter().zip(&bd))
                    .map(|(gv, (av, bv))| if av >= bv { 0.0 } else { *gv })
                    .collect();
                self.acc_grad(a, &da);
                self.acc_grad(b, &db);
            }
            Op::Minimum(a, b) => {
                let (a, b) = (*a, *b);
                let ad = self.nodes[a.0].value.data.clone();
                let bd = self.nodes[b.0].value.data.clone();
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(ad.iter().zip(&bd))
                    .map(|(gv, (av, bv))| if av <= bv { *gv } else { 0.0 })
                    .collect();
                let db: Vec<f64> = g
                    .data
                    .iter()
                    .zip(ad.iter().zip(&bd))
                    .map(|(gv, (av, bv))| if av <= bv { 0.0 } else { *gv })
                    .collect();
                self.acc_grad(a, &da);
                self.acc_grad(b, &db);
            }
            Op::ClampMin(a, lo) => {
                let (a, lo) = (*a, *lo);
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(gv, xv)| if *xv > lo { *gv } else { 0.0 })
                    .collect();
                self.acc_grad(a, &da);
            }
            Op::MulMask(a, mask) => {
                let a = *a;
                let mask = mask.clone();
                let da: Vec<f64> = g.data.iter().zip(&mask.data).map(|(gv, m)| gv * m).collect();
                self.acc_grad(a, &da);
            }
            Op::FocalMap { logits, targets, gamma } => {
                let logits = *logits;
                let targets = targets.clone();
                let gamma = *gamma;
                let (r, c) = self.nodes[logits.0].value.dims2();
                let src = self.nodes[logits.0].value.data.clone();
                let m = targets.iter().filter(|t| t.is_some()).count();
                if m == 0 {
                    return;
                }
                let gout = g.data[0] / m as f64;
                let mut da = vec![0.0; r * c];
                for cell in 0..r {
                    let Some(t) = targets[cell] else { continue };
                    let row = &src[cell * c..(cell + 1) * c];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    let probs: Vec<f64> = row.iter().map(|v| (v - mx).exp() / z).collect();
                    let pt = probs[t];
                    let logpt = pt.ln();
                    // d/dp_t [ (1-p)^γ (-ln p) ]
                    let dfdp = gamma * (1.0 - pt).powf(gamma - 1.0) * logpt
                        - (1.0 - pt).powf(gamma) / pt;
                    for k in 0..c {
                        let dp_dz = pt * ((k == t) as i64 as f64 - probs[k]);
                        da[cell * c + k] += gout * dfdp * dp_dz;
                    }
                }
                self.acc_grad(logits, &da);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor {
    let kk = cin * kh * kw;
    let mut out = vec![0.0; kk * ho * wo];
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[krow * ho * wo + oy * wo + ox] =
                            x[c * h * w + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[kk, ho * wo], out)
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; cin * h * w];
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[c * h * w + iy as usize * w + ix as usize] +=
                            dcols[krow * ho * wo + oy * wo + ox];
                    }
                }
            }
        }
    }
    dx
}
