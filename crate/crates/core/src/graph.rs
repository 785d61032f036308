//! Reverse-mode automatic differentiation over a flat tape of tensor ops.
//!
//! Values are computed eagerly as nodes are pushed; `backward` walks the tape
//! in reverse and accumulates gradients. Parameter nodes are registered with a
//! name so gradients can be collected per parameter after the pass.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MulConst(NodeId, Rc<Tensor>),
    Relu(NodeId),
    Sigmoid(NodeId),
    Matmul(NodeId, NodeId),
    /// a [m,k] · bᵀ with b [n,k] -> [m,n]
    MatmulNT(NodeId, NodeId),
    /// [m,n] + row vector [n]
    AddRow(NodeId, NodeId),
    /// [m,n] -> [m,1]
    RowSum(NodeId),
    /// [m,n] * column [m,1]
    MulCol(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        offset: NodeId,
    },
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    ChannelAffine {
        x: NodeId,
        gain: NodeId,
        offset: NodeId,
    },
    GatherRows {
        x: NodeId,
        idx: Rc<Vec<usize>>,
    },
    ScatterSumRows {
        x: NodeId,
        idx: Rc<Vec<usize>>,
    },
    /// Fixed sparse linear map: out[q] = Σ (w · x[src]).
    WeightedGatherRows {
        x: NodeId,
        combos: Rc<Vec<Vec<(usize, f64)>>>,
    },
    /// map [C,H,W] sampled at coords [q,2] (u,v), border clamp; grads flow to
    /// both the map and the coordinates.
    GridSample {
        map: NodeId,
        coords: NodeId,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    /// [C,H,W] -> [H·W, C]
    MapToRows(NodeId),
    /// [h·w, C] -> [C,h,w]
    RowsToMap {
        x: NodeId,
        h: usize,
        w: usize,
    },
    Reshape(NodeId),
    SumAll(NodeId),
    /// Mean over elements of BCE(sigmoid(x), targets).
    BceWithLogitsMean {
        x: NodeId,
        targets: Rc<Tensor>,
    },
    /// Weighted mean over rows of -log softmax(x)[target]; normalized by Σw.
    CrossEntropyRows {
        x: NodeId,
        targets: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Leaf that participates in gradient collection under `name`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        let id = self.push(Op::Leaf, t.clone(), true);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn param_nodes(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, g)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "div shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Div(a, b), v, g)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * c);
        let g = self.ng(a);
        self.push(Op::Scale(a, c), v, g)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x + c);
        let g = self.ng(a);
        self.push(Op::AddScalar(a), v, g)
    }

    pub fn mul_const(&mut self, a: NodeId, c: Tensor) -> NodeId {
        let ta = &self.nodes[a].value;
        assert_eq!(ta.shape(), c.shape(), "mul_const shape mismatch");
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data);
        let g = self.ng(a);
        self.push(Op::MulConst(a, Rc::new(c)), v, g)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| if x > 0.0 { x } else { 0.0 });
        let g = self.ng(a);
        self.push(Op::Relu(a), v, g)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(sigmoid);
        let g = self.ng(a);
        self.push(Op::Sigmoid(a), v, g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.nodes[a].value.dims2();
        let (k2, n) = self.nodes[b].value.dims2();
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut out = vec![0.0; m * n];
        let da = self.nodes[a].value.data();
        let db = self.nodes[b].value.data();
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let v = Tensor::new(vec![m, n], out);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Matmul(a, b), v, g)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.nodes[a].value.dims2();
        let (n, k2) = self.nodes[b].value.dims2();
        assert_eq!(k, k2, "matmul_nt inner dim mismatch");
        let mut out = vec![0.0; m * n];
        let da = self.nodes[a].value.data();
        let db = self.nodes[b].value.data();
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &db[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += arow[p] * brow[p];
                }
                out[i * n + j] = s;
            }
        }
        let v = Tensor::new(vec![m, n], out);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MatmulNT(a, b), v, g)
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.nodes[a].value.dims2();
        assert_eq!(self.nodes[b].value.shape(), &[n], "add_row shape mismatch");
        let da = self.nodes[a].value.data();
        let db = self.nodes[b].value.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(da[i * n + j] + db[j]);
            }
        }
        let v = Tensor::new(vec![m, n], out);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::AddRow(a, b), v, g)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.nodes[a].value.dims2();
        let da = self.nodes[a].value.data();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            out.push(da[i * n..(i + 1) * n].iter().sum());
        }
        let v = Tensor::new(vec![m, 1], out);
        let g = self.ng(a);
        self.push(Op::RowSum(a), v, g)
    }

    pub fn mul_col(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.nodes[a].value.dims2();
        assert_eq!(self.nodes[b].value.shape(), &[m, 1], "mul_col shape mismatch");
        let da = self.nodes[a].value.data();
        let db = self.nodes[b].value.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(da[i * n + j] * db[i]);
            }
        }
        let v = Tensor::new(vec![m, n], out);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MulCol(a, b), v, g)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.nodes[a].value.dims2();
        let da = self.nodes[a].value.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &da[i * n..(i + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let s: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / s));
        }
        let v = Tensor::new(vec![m, n], out);
        let g = self.ng(a);
        self.push(Op::SoftmaxRows(a), v, g)
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, offset: NodeId) -> NodeId {
        let (m, n) = self.nodes[x].value.dims2();
        assert_eq!(self.nodes[gain].value.shape(), &[n]);
        assert_eq!(self.nodes[offset].value.shape(), &[n]);
        let dx = self.nodes[x].value.data();
        let dg = self.nodes[gain].value.data();
        let doff = self.nodes[offset].value.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &dx[i * n..(i + 1) * n];
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                out.push((row[j] - mean) * inv * dg[j] + doff[j]);
            }
        }
        let v = Tensor::new(vec![m, n], out);
        let g = self.ng(x) || self.ng(gain) || self.ng(offset);
        self.push(Op::LayerNormRows { x, gain, offset }, v, g)
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = conv2d_forward(
            &self.nodes[x].value,
            &self.nodes[kernel].value,
            &self.nodes[bias].value,
            stride,
            pad,
        );
        let g = self.ng(x) || self.ng(kernel) || self.ng(bias);
        self.push(Op::Conv2d { x, kernel, bias, stride, pad }, v, g)
    }

    pub fn channel_affine(&mut self, x: NodeId, gain: NodeId, offset: NodeId) -> NodeId {
        let (c, h, w) = self.nodes[x].value.dims3();
        assert_eq!(self.nodes[gain].value.shape(), &[c]);
        assert_eq!(self.nodes[offset].value.shape(), &[c]);
        let dx = self.nodes[x].value.data();
        let dg = self.nodes[gain].value.data();
        let doff = self.nodes[offset].value.data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for p in 0..h * w {
                out.push(dx[ch * h * w + p] * dg[ch] + doff[ch]);
            }
        }
        let v = Tensor::new(vec![c, h, w], out);
        let g = self.ng(x) || self.ng(gain) || self.ng(offset);
        self.push(Op::ChannelAffine { x, gain, offset }, v, g)
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let (m, n) = self.nodes[x].value.dims2();
        let dx = self.nodes[x].value.data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            assert!(i < m, "gather index {} out of range {}", i, m);
            out.extend_from_slice(&dx[i * n..(i + 1) * n]);
        }
        let v = Tensor::new(vec![idx.len(), n], out);
        let g = self.ng(x);
        self.push(Op::GatherRows { x, idx }, v, g)
    }

    /// out[idx[i]] += x[i]; output has `rows` rows.
    pub fn scatter_sum_rows(&mut self, x: NodeId, idx: Rc<Vec<usize>>, rows: usize) -> NodeId {
        let (m, n) = self.nodes[x].value.dims2();
        assert_eq!(idx.len(), m, "scatter index length mismatch");
        let dx = self.nodes[x].value.data();
        let mut out = vec![0.0; rows * n];
        for (i, &t) in idx.iter().enumerate() {
            assert!(t < rows);
            for j in 0..n {
                out[t * n + j] += dx[i * n + j];
            }
        }
        let v = Tensor::new(vec![rows, n], out);
        let g = self.ng(x);
        self.push(Op::ScatterSumRows { x, idx }, v, g)
    }

    pub fn weighted_gather_rows(&mut self, x: NodeId, combos: Rc<Vec<Vec<(usize, f64)>>>) -> NodeId {
        let (m, n) = self.nodes[x].value.dims2();
        let dx = self.nodes[x].value.data();
        let mut out = vec![0.0; combos.len() * n];
        for (q, combo) in combos.iter().enumerate() {
            for &(src, w) in combo {
                assert!(src < m);
                for j in 0..n {
                    out[q * n + j] += w * dx[src * n + j];
                }
            }
        }
        let v = Tensor::new(vec![combos.len(), n], out);
        let g = self.ng(x);
        self.push(Op::WeightedGatherRows { x, combos }, v, g)
    }

    pub fn grid_sample(&mut self, map: NodeId, coords: NodeId) -> NodeId {
        let (c, h, w) = self.nodes[map].value.dims3();
        let (q, two) = self.nodes[coords].value.dims2();
        assert_eq!(two, 2, "coords must be [q,2]");
        let dm = self.nodes[map].value.data();
        let dc = self.nodes[coords].value.data();
        let mut out = vec![0.0; q * c];
        for i in 0..q {
            let (u, v) = (dc[i * 2], dc[i * 2 + 1]);
            let s = BilinearStencil::new(u, v, h, w);
            for ch in 0..c {
                let plane = &dm[ch * h * w..(ch + 1) * h * w];
                out[i * c + ch] = s.eval(plane, w);
            }
        }
        let v = Tensor::new(vec![q, c], out);
        let g = self.ng(map) || self.ng(coords);
        self.push(Op::GridSample { map, coords }, v, g)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0]].value.dims2().1;
        let mut data = Vec::new();
        let mut m = 0;
        let mut g = false;
        for &p in parts {
            let (pm, pn) = self.nodes[p].value.dims2();
            assert_eq!(pn, n, "concat_rows width mismatch");
            data.extend_from_slice(self.nodes[p].value.data());
            m += pm;
            g |= self.ng(p);
        }
        let v = Tensor::new(vec![m, n], data);
        self.push(Op::ConcatRows(parts.to_vec()), v, g)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.nodes[x].value.dims2();
        assert!(start + len <= m, "slice_rows out of range");
        let data = self.nodes[x].value.data()[start * n..(start + len) * n].to_vec();
        let v = Tensor::new(vec![len, n], data);
        let g = self.ng(x);
        self.push(Op::SliceRows { x, start }, v, g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0]].value.dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].value.dims2().1).collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut g = false;
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let (pm, pn) = self.nodes[p].value.dims2();
            assert_eq!(pm, m, "concat_cols height mismatch");
            let dp = self.nodes[p].value.data();
            for i in 0..m {
                data[i * n + off..i * n + off + pn].copy_from_slice(&dp[i * pn..(i + 1) * pn]);
            }
            off += widths[pi];
            g |= self.ng(p);
        }
        let v = Tensor::new(vec![m, n], data);
        self.push(Op::ConcatCols(parts.to_vec()), v, g)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.nodes[x].value.dims2();
        assert!(start + len <= n, "slice_cols out of range");
        let dx = self.nodes[x].value.data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&dx[i * n + start..i * n + start + len]);
        }
        let v = Tensor::new(vec![m, len], data);
        let g = self.ng(x);
        self.push(Op::SliceCols { x, start }, v, g)
    }

    pub fn map_to_rows(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.nodes[x].value.dims3();
        let dx = self.nodes[x].value.data();
        let mut data = Vec::with_capacity(c * h * w);
        for p in 0..h * w {
            for ch in 0..c {
                data.push(dx[ch * h * w + p]);
            }
        }
        let v = Tensor::new(vec![h * w, c], data);
        let g = self.ng(x);
        self.push(Op::MapToRows(x), v, g)
    }

    pub fn rows_to_map(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let (m, c) = self.nodes[x].value.dims2();
        assert_eq!(m, h * w, "rows_to_map size mismatch");
        let dx = self.nodes[x].value.data();
        let mut data = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                data[ch * h * w + p] = dx[p * c + ch];
            }
        }
        let v = Tensor::new(vec![c, h, w], data);
        let g = self.ng(x);
        self.push(Op::RowsToMap { x, h, w }, v, g)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.nodes[x].value.reshaped(shape);
        let g = self.ng(x);
        self.push(Op::Reshape(x), v, g)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        let g = self.ng(x);
        self.push(Op::SumAll(x), Tensor::scalar(s), g)
    }

    pub fn bce_with_logits_mean(&mut self, x: NodeId, targets: Tensor) -> NodeId {
        let tx = &self.nodes[x].value;
        assert_eq!(tx.shape(), targets.shape(), "bce target shape mismatch");
        let n = tx.len() as f64;
        let mut s = 0.0;
        for (&z, &t) in tx.data().iter().zip(targets.data()) {
            // stable: max(z,0) - z t + ln(1 + e^{-|z|})
            s += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let g = self.ng(x);
        self.push(
            Op::BceWithLogitsMean { x, targets: Rc::new(targets) },
            Tensor::scalar(s / n),
            g,
        )
    }

    pub fn cross_entropy_rows(&mut self, x: NodeId, targets: Rc<Vec<usize>>, weights: Rc<Vec<f64>>) -> NodeId {
        let (m, n) = self.nodes[x].value.dims2();
        assert_eq!(targets.len(), m);
        assert_eq!(weights.len(), m);
        let dx = self.nodes[x].value.data();
        let wsum: f64 = weights.iter().sum();
        assert!(wsum > 0.0, "cross entropy needs positive total weight");
        let mut s = 0.0;
        for i in 0..m {
            let row = &dx[i * n..(i + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            s += weights[i] * (lse - row[targets[i]]);
        }
        let g = self.ng(x);
        self.push(
            Op::CrossEntropyRows { x, targets, weights },
            Tensor::scalar(s / wsum),
            g,
        )
    }

    /// Gradients of `loss` (a one-element node) with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Tensor>> {
        assert_eq!(self.nodes[loss].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    /// Gradients for every registered parameter, keyed by name.
    pub fn param_grads(&self, grads: &[Option<Tensor>]) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let g = grads[*id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[*id].value.shape().to_vec()));
            out.insert(name.clone(), g);
        }
        out
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                );
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                );
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect(),
                );
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(x, (n, d))| -x * n / (d * d))
                        .collect(),
                );
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Scale(a, c) => self.accum(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::MulConst(a, c) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(c.data()).map(|(x, y)| x * y).collect(),
                );
                self.accum(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ta = &self.nodes[*a].value;
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                        .collect(),
                );
                self.accum(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let tv = &self.nodes[id].value;
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(tv.data())
                        .map(|(x, s)| x * s * (1.0 - s))
                        .collect(),
                );
                self.accum(grads, *a, ga);
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[*a].value.dims2();
                let (_, n) = self.nodes[*b].value.dims2();
                let da = self.nodes[*a].value.data();
                let db = self.nodes[*b].value.data();
                let dg = g.data();
                // ga = g · bᵀ
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let brow = &db[p * n..(p + 1) * n];
                        let grow = &dg[i * n..(i + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                // gb = aᵀ · g
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = da[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let grow = &dg[i * n..(i + 1) * n];
                        let brow = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            brow[j] += av * grow[j];
                        }
                    }
                }
                self.accum(grads, *a, Tensor::new(vec![m, k], ga));
                self.accum(grads, *b, Tensor::new(vec![k, n], gb));
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = self.nodes[*a].value.dims2();
                let (n, _) = self.nodes[*b].value.dims2();
                let da = self.nodes[*a].value.data();
                let db = self.nodes[*b].value.data();
                let dg = g.data();
                // out = a·bᵀ, ga = g·b, gb = gᵀ·a
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = dg[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let brow = &db[j * k..(j + 1) * k];
                        let arow = &mut ga[i * k..(i + 1) * k];
                        for p in 0..k {
                            arow[p] += gv * brow[p];
                        }
                    }
                }
                let mut gb = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = dg[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let arow = &da[i * k..(i + 1) * k];
                        let brow = &mut gb[j * k..(j + 1) * k];
                        for p in 0..k {
                            brow[p] += gv * arow[p];
                        }
                    }
                }
                self.accum(grads, *a, Tensor::new(vec![m, k], ga));
                self.accum(grads, *b, Tensor::new(vec![n, k], gb));
            }
            Op::AddRow(a, b) => {
                let (m, n) = self.nodes[*a].value.dims2();
                self.accum(grads, *a, g.clone());
                let dg = g.data();
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += dg[i * n + j];
                    }
                }
                self.accum(grads, *b, Tensor::new(vec![n], gb));
            }
            Op::RowSum(a) => {
                let (m, n) = self.nodes[*a].value.dims2();
                let dg = g.data();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = dg[i];
                    }
                }
                self.accum(grads, *a, Tensor::new(vec![m, n], ga));
            }
            Op::MulCol(a, b) => {
                let (m, n) = self.nodes[*a].value.dims2();
                let da = self.nodes[*a].value.data();
                let db = self.nodes[*b].value.data();
                let dg = g.data();
                let mut ga = vec![0.0; m * n];
                let mut gb = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = dg[i * n + j] * db[i];
                        gb[i] += dg[i * n + j] * da[i * n + j];
                    }
                }
                self.accum(grads, *a, Tensor::new(vec![m, n], ga));
                self.accum(grads, *b, Tensor::new(vec![m, 1], gb));
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = self.nodes[id].value.dims2();
                let dy = self.nodes[id].value.data();
                let dg = g.data();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let y = &dy[i * n..(i + 1) * n];
                    let gr = &dg[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[i * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *a, Tensor::new(vec![m, n], ga));
            }
            Op::LayerNormRows { x, gain, offset } => {
                let (m, n) = self.nodes[*x].value.dims2();
                let dx = self.nodes[*x].value.data();
                let dgain = self.nodes[*gain].value.data();
                let dg = g.data();
                let mut gx = vec![0.0; m * n];
                let mut ggain = vec![0.0; n];
                let mut goff = vec![0.0; n];
                for i in 0..m {
                    let row = &dx[i * n..(i + 1) * n];
                    let gr = &dg[i * n..(i + 1) * n];
                    let mean: f64 = row.iter().sum::<f64>() / n as f64;
                    let var: f64 =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    // xhat_j = (x_j - mean) * inv
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    // dL/dxhat_j = g_j * gain_j
                    let dxh: Vec<f64> = gr.iter().zip(dgain).map(|(a, b)| a * b).collect();
                    let s1: f64 = dxh.iter().sum();
                    let s2: f64 = dxh.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] =
                            inv * (dxh[j] - s1 / n as f64 - xhat[j] * s2 / n as f64);
                        ggain[j] += gr[j] * xhat[j];
                        goff[j] += gr[j];
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![m, n], gx));
                self.accum(grads, *gain, Tensor::new(vec![n], ggain));
                self.accum(grads, *offset, Tensor::new(vec![n], goff));
            }
            Op::Conv2d { x, kernel, bias, stride, pad } => {
                let (gx, gk, gb) = conv2d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*kernel].value,
                    g,
                    *stride,
                    *pad,
                );
                self.accum(grads, *x, gx);
                self.accum(grads, *kernel, gk);
                self.accum(grads, *bias, gb);
            }
            Op::ChannelAffine { x, gain, offset } => {
                let (c, h, w) = self.nodes[*x].value.dims3();
                let dx = self.nodes[*x].value.data();
                let dgain = self.nodes[*gain].value.data();
                let dg = g.data();
                let mut gx = vec![0.0; c * h * w];
                let mut ggain = vec![0.0; c];
                let mut goff = vec![0.0; c];
                for ch in 0..c {
                    for p in 0..h * w {
                        let gi = dg[ch * h * w + p];
                        gx[ch * h * w + p] = gi * dgain[ch];
                        ggain[ch] += gi * dx[ch * h * w + p];
                        goff[ch] += gi;
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![c, h, w], gx));
                self.accum(grads, *gain, Tensor::new(vec![c], ggain));
                self.accum(grads, *offset, Tensor::new(vec![c], goff));
            }
            Op::GatherRows { x, idx } => {
                let (m, n) = self.nodes[*x].value.dims2();
                let dg = g.data();
                let mut gx = vec![0.0; m * n];
                for (i, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        gx[src * n + j] += dg[i * n + j];
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![m, n], gx));
            }
            Op::ScatterSumRows { x, idx } => {
                let (m, n) = self.nodes[*x].value.dims2();
                let dg = g.data();
                let mut gx = vec![0.0; m * n];
                for (i, &t) in idx.iter().enumerate() {
                    for j in 0..n {
                        gx[i * n + j] = dg[t * n + j];
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![m, n], gx));
            }
            Op::WeightedGatherRows { x, combos } => {
                let (m, n) = self.nodes[*x].value.dims2();
                let dg = g.data();
                let mut gx = vec![0.0; m * n];
                for (q, combo) in combos.iter().enumerate() {
                    for &(src, w) in combo {
                        for j in 0..n {
                            gx[src * n + j] += w * dg[q * n + j];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![m, n], gx));
            }
            Op::GridSample { map, coords } => {
                let (c, h, w) = self.nodes[*map].value.dims3();
                let (q, _) = self.nodes[*coords].value.dims2();
                let dm = self.nodes[*map].value.data();
                let dc = self.nodes[*coords].value.data();
                let dg = g.data();
                let mut gmap = vec![0.0; c * h * w];
                let mut gcoords = vec![0.0; q * 2];
                for i in 0..q {
                    let (u, v) = (dc[i * 2], dc[i * 2 + 1]);
                    let s = BilinearStencil::new(u, v, h, w);
                    for ch in 0..c {
                        let go = dg[i * c + ch];
                        if go == 0.0 {
                            continue;
                        }
                        let base = ch * h * w;
                        s.backprop(go, &dm[base..base + h * w], w, &mut gmap[base..base + h * w]);
                        let (du, dv) = s.coord_grad(&dm[base..base + h * w], w);
                        gcoords[i * 2] += go * du;
                        gcoords[i * 2 + 1] += go * dv;
                    }
                }
                self.accum(grads, *map, Tensor::new(vec![c, h, w], gmap));
                self.accum(grads, *coords, Tensor::new(vec![q, 2], gcoords));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                let dg = g.data();
                let n = g.dims2().1;
                for &p in parts {
                    let (pm, _) = self.nodes[p].value.dims2();
                    let part = dg[start * n..(start + pm) * n].to_vec();
                    self.accum(grads, p, Tensor::new(vec![pm, n], part));
                    start += pm;
                }
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.nodes[*x].value.dims2();
                let (len, _) = g.dims2();
                let mut gx = vec![0.0; m * n];
                gx[start * n..(start + len) * n].copy_from_slice(g.data());
                self.accum(grads, *x, Tensor::new(vec![m, n], gx));
            }
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims2();
                let dg = g.data();
                let mut off = 0;
                for &p in parts {
                    let (_, pn) = self.nodes[p].value.dims2();
                    let mut part = vec![0.0; m * pn];
                    for i in 0..m {
                        part[i * pn..(i + 1) * pn]
                            .copy_from_slice(&dg[i * n + off..i * n + off + pn]);
                    }
                    self.accum(grads, p, Tensor::new(vec![m, pn], part));
                    off += pn;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.nodes[*x].value.dims2();
                let (_, len) = g.dims2();
                let dg = g.data();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len]
                        .copy_from_slice(&dg[i * len..(i + 1) * len]);
                }
                self.accum(grads, *x, Tensor::new(vec![m, n], gx));
            }
            Op::MapToRows(x) => {
                let (c, h, w) = self.nodes[*x].value.dims3();
                let dg = g.data();
                let mut gx = vec![0.0; c * h * w];
                for p in 0..h * w {
                    for ch in 0..c {
                        gx[ch * h * w + p] = dg[p * c + ch];
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![c, h, w], gx));
            }
            Op::RowsToMap { x, h, w } => {
                let (m, c) = self.nodes[*x].value.dims2();
                let dg = g.data();
                let mut gx = vec![0.0; m * c];
                for p in 0..h * w {
                    for ch in 0..c {
                        gx[p * c + ch] = dg[ch * h * w + p];
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![m, c], gx));
            }
            Op::Reshape(x) => {
                let shape = self.nodes[*x].value.shape().to_vec();
                self.accum(grads, *x, g.reshaped(shape));
            }
            Op::SumAll(x) => {
                let gv = g.item();
                let shape = self.nodes[*x].value.shape().to_vec();
                self.accum(grads, *x, Tensor::full(shape, gv));
            }
            Op::BceWithLogitsMean { x, targets } => {
                let tx = &self.nodes[*x].value;
                let n = tx.len() as f64;
                let gv = g.item();
                let gx = Tensor::new(
                    tx.shape().to_vec(),
                    tx.data()
                        .iter()
                        .zip(targets.data())
                        .map(|(&z, &t)| gv * (sigmoid(z) - t) / n)
                        .collect(),
                );
                self.accum(grads, *x, gx);
            }
            Op::CrossEntropyRows { x, targets, weights } => {
                let (m, n) = self.nodes[*x].value.dims2();
                let dx = self.nodes[*x].value.data();
                let wsum: f64 = weights.iter().sum();
                let gv = g.item();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let row = &dx[i * n..(i + 1) * n];
                    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
                    let s: f64 = exps.iter().sum();
                    for j in 0..n {
                        let p = exps[j] / s;
                        let ind = if j == targets[i] { 1.0 } else { 0.0 };
                        gx[i * n + j] = gv * weights[i] * (p - ind) / wsum;
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![m, n], gx));
            }
        }
    }
}

const LN_EPS: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear lookup with border clamp shared by forward, map-grad and
/// coordinate-grad paths. Coordinates outside the image clamp to the border
/// and get zero coordinate gradient there.
pub(crate) struct BilinearStencil {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    du_active: bool,
    dv_active: bool,
}

impl BilinearStencil {
    pub(crate) fn new(u: f64, v: f64, h: usize, w: usize) -> Self {
        let (uc, du_active) = clamp_coord(u, w);
        let (vc, dv_active) = clamp_coord(v, h);
        let x0 = uc.floor().min((w - 1) as f64).max(0.0) as usize;
        let y0 = vc.floor().min((h - 1) as f64).max(0.0) as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        BilinearStencil {
            x0,
            x1,
            y0,
            y1,
            fx: uc - x0 as f64,
            fy: vc - y0 as f64,
            du_active,
            dv_active,
        }
    }

    pub(crate) fn eval(&self, plane: &[f64], w: usize) -> f64 {
        let v00 = plane[self.y0 * w + self.x0];
        let v01 = plane[self.y0 * w + self.x1];
        let v10 = plane[self.y1 * w + self.x0];
        let v11 = plane[self.y1 * w + self.x1];
        let top = v00 * (1.0 - self.fx) + v01 * self.fx;
        let bot = v10 * (1.0 - self.fx) + v11 * self.fx;
        top * (1.0 - self.fy) + bot * self.fy
    }

    fn backprop(&self, go: f64, _plane: &[f64], w: usize, gplane: &mut [f64]) {
        gplane[self.y0 * w + self.x0] += go * (1.0 - self.fx) * (1.0 - self.fy);
        gplane[self.y0 * w + self.x1] += go * self.fx * (1.0 - self.fy);
        gplane[self.y1 * w + self.x0] += go * (1.0 - self.fx) * self.fy;
        gplane[self.y1 * w + self.x1] += go * self.fx * self.fy;
    }

    fn coord_grad(&self, plane: &[f64], w: usize) -> (f64, f64) {
        let v00 = plane[self.y0 * w + self.x0];
        let v01 = plane[self.y0 * w + self.x1];
        let v10 = plane[self.y1 * w + self.x0];
        let v11 = plane[self.y1 * w + self.x1];
        let du = if self.du_active {
            (v01 - v00) * (1.0 - self.fy) + (v11 - v10) * self.fy
        } else {
            0.0
        };
        let dv = if self.dv_active {
            (v10 - v00) * (1.0 - self.fx) + (v11 - v01) * self.fx
        } else {
            0.0
        };
        (du, dv)
    }
}

fn clamp_coord(c: f64, size: usize) -> (f64, bool) {
    let max = (size - 1) as f64;
    if c < 0.0 {
        (0.0, false)
    } else if c > max {
        (max, false)
    } else {
        (c, true)
    }
}

fn conv2d_forward(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, w) = x.dims3();
    let ks = kernel.shape();
    assert_eq!(ks.len(), 4, "kernel must be [cout,cin,kh,kw]");
    let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    assert_eq!(kcin, cin, "conv channel mismatch");
    assert_eq!(bias.shape(), &[cout]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let dx = x.data();
    let dk = kernel.data();
    let db = bias.data();
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = db[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            s += dx[ci * h * w + iy as usize * w + ix as usize]
                                * dk[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[co * oh * ow + oy * ow + ox] = s;
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, w) = x.dims3();
    let ks = kernel.shape();
    let (cout, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let (_, oh, ow) = g.dims3();
    let dx = x.data();
    let dk = kernel.data();
    let dg = g.data();
    let mut gx = vec![0.0; cin * h * w];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; cout];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = dg[co * oh * ow + oy * ow + ox];
                if go == 0.0 {
                    continue;
                }
                gb[co] += go;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = ci * h * w + iy as usize * w + ix as usize;
                            let kidx = ((co * cin + ci) * kh + ky) * kw + kx;
                            gx[xi] += go * dk[kidx];
                            gk[kidx] += go * dx[xi];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(vec![cin, h, w], gx),
        Tensor::new(kernel.shape().to_vec(), gk),
        Tensor::new(vec![cout], gb),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randt(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central finite differences of a scalar-valued builder against the
    /// analytic gradients of its parameter leaves.
    fn check_grads(build: impl Fn(&mut Graph, &[Tensor]) -> NodeId, inputs: &[Tensor], tol: f64) {
        let mut g = Graph::new();
        let loss = build(&mut g, inputs);
        let grads = g.backward(loss);
        let pgrads = g.param_grads(&grads);
        let eps = 1e-5;
        for (pi, t) in inputs.iter().enumerate() {
            let name = format!("p{}", pi);
            let analytic = &pgrads[&name];
            for e in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[pi].data_mut()[e] += eps;
                let mut minus = inputs.to_vec();
                minus[pi].data_mut()[e] -= eps;
                let mut gp = Graph::new();
                let lp = build(&mut gp, &plus);
                let mut gm = Graph::new();
                let lm = build(&mut gm, &minus);
                let fd = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps);
                let a = analytic.data()[e];
                let denom = fd.abs().max(a.abs()).max(1.0);
                assert!(
                    (fd - a).abs() / denom < tol,
                    "param {} entry {}: analytic {} vs fd {}",
                    pi,
                    e,
                    a,
                    fd
                );
            }
        }
    }

    fn bind(g: &mut Graph, inputs: &[Tensor]) -> Vec<NodeId> {
        inputs
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(&format!("p{}", i), t))
            .collect()
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randt(&mut rng, vec![3, 4]);
        let b = randt(&mut rng, vec![3, 4]);
        check_grads(
            |g, inp| {
                let ids = bind(g, inp);
                let m = g.mul(ids[0], ids[1]);
                let s = g.sigmoid(m);
                let r = g.relu(s);
                let d = g.div(r, ids[1]);
                g.sum_all(d)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_softmax_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randt(&mut rng, vec![3, 4]);
        let b = randt(&mut rng, vec![4, 5]);
        let bias = randt(&mut rng, vec![5]);
        check_grads(
            |g, inp| {
                let ids = bind(g, inp);
                let mm = g.matmul(ids[0], ids[1]);
                let wb = g.add_row(mm, ids[2]);
                g.cross_entropy_rows(
                    wb,
                    Rc::new(vec![0, 2, 4]),
                    Rc::new(vec![1.0, 0.5, 2.0]),
                )
            },
            &[a, b, bias],
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_nt_and_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randt(&mut rng, vec![2, 4]);
        let b = randt(&mut rng, vec![3, 4]);
        let targets = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        check_grads(
            move |g, inp| {
                let ids = bind(g, inp);
                let mm = g.matmul_nt(ids[0], ids[1]);
                g.bce_with_logits_mean(mm, targets.clone())
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn grad_layer_norm_and_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randt(&mut rng, vec![3, 6]);
        let gain = randt(&mut rng, vec![6]);
        let off = randt(&mut rng, vec![6]);
        let w = randt(&mut rng, vec![3, 6]);
        check_grads(
            |g, inp| {
                let ids = bind(g, inp);
                let ln = g.layer_norm_rows(ids[0], ids[1], ids[2]);
                let sm = g.softmax_rows(ln);
                let m = g.mul(sm, ids[3]);
                g.sum_all(m)
            },
            &[x, gain, off, w],
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randt(&mut rng, vec![2, 6, 6]);
        let k = randt(&mut rng, vec![3, 2, 3, 3]);
        let b = randt(&mut rng, vec![3]);
        let wts = randt(&mut rng, vec![3, 3, 3]);
        check_grads(
            |g, inp| {
                let ids = bind(g, inp);
                let c = g.conv2d(ids[0], ids[1], ids[2], 2, 1);
                let m = g.mul(c, ids[3]);
                g.sum_all(m)
            },
            &[x, k, b, wts],
            1e-6,
        );
    }

    #[test]
    fn grad_gather_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randt(&mut rng, vec![4, 3]);
        let idx = Rc::new(vec![0usize, 2, 2, 1, 3, 0]);
        let back = Rc::new(vec![0usize, 0, 1, 2, 2, 2]);
        check_grads(
            move |g, inp| {
                let ids = bind(g, inp);
                let gth = g.gather_rows(ids[0], idx.clone());
                let sct = g.scatter_sum_rows(gth, back.clone(), 3);
                let s = g.sigmoid(sct);
                g.sum_all(s)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn grad_grid_sample_map_and_coords() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = randt(&mut rng, vec![2, 5, 5]);
        let coords = Tensor::new(vec![3, 2], vec![1.3, 2.7, 0.2, 0.9, 3.5, 1.1]);
        check_grads(
            |g, inp| {
                let ids = bind(g, inp);
                let s = g.grid_sample(ids[0], ids[1]);
                let sq = g.mul(s, s);
                g.sum_all(sq)
            },
            &[map, coords],
            1e-5,
        );
    }

    #[test]
    fn grid_sample_clamps_at_border() {
        let mut g = Graph::new();
        let map = g.constant(Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let coords = g.constant(Tensor::new(vec![2, 2], vec![-5.0, 0.0, 0.0, 0.0]));
        let s = g.grid_sample(map, coords);
        assert_eq!(g.value(s).at2(0, 0), g.value(s).at2(1, 0));
    }

    #[test]
    fn grad_concat_slice_and_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = randt(&mut rng, vec![2, 3]);
        let b = randt(&mut rng, vec![2, 2]);
        let m = randt(&mut rng, vec![3, 2, 2]);
        check_grads(
            |g, inp| {
                let ids = bind(g, inp);
                let cc = g.concat_cols(&[ids[0], ids[1]]);
                let sc = g.slice_cols(cc, 1, 3);
                let rows = g.map_to_rows(ids[2]);
                let cr = g.concat_rows(&[sc, rows]);
                let sl = g.slice_rows(cr, 1, 4);
                let rs = g.row_sum(sl);
                let mc = g.mul_col(sl, rs);
                let back = g.rows_to_map(mc, 2, 2);
                g.sum_all(back)
            },
            &[a, b, m],
            1e-6,
        );
    }

    #[test]
    fn grad_weighted_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randt(&mut rng, vec![4, 3]);
        let combos = Rc::new(vec![
            vec![(0usize, 0.5), (1, 0.5)],
            vec![(2, 1.0)],
            vec![(3, 0.25), (0, 0.75)],
        ]);
        check_grads(
            move |g, inp| {
                let ids = bind(g, inp);
                let wg = g.weighted_gather_rows(ids[0], combos.clone());
                let s = g.sigmoid(wg);
                g.sum_all(s)
            },
            &[x],
            1e-6,
        );
    }
}
