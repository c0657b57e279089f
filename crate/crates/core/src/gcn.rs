//! Max-relative graph convolution, its dynamic-graph wrapper and the
//! residual graph convolution block (GCB), with hand-written backward
//! passes.
//!
//! Backward passes treat the KNN edge selection as constant: the edge set
//! chosen in the forward pass is replayed, and gradients flow only through
//! the feature arithmetic.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{dilated_knn, EdgeSet};
use crate::layers::{gelu, gelu_grad, prefixed, prefixed_mut, Linear, ParamTensors};
use crate::tensor::{Matrix, VertexFeatures};

/// Aggregation and update weights of one graph convolution.
///
/// `w_agg` (D_in × D_in) maps features before aggregation; `update` maps the
/// concatenation `[center ‖ aggregate]` (2·D_in) to D_out.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphConvParams {
    pub w_agg: Matrix,
    pub update: Linear,
}

impl GraphConvParams {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            w_agg: Matrix::zeros(d_in, d_in),
            update: Linear::zeros(2 * d_in, d_out),
        }
    }

    pub fn glorot<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w_agg: Linear::glorot(d_in, d_in, rng).weight,
            update: Linear::glorot(2 * d_in, d_out, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_agg.rows()
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        let d = self.d_in();
        if self.w_agg.cols() != d || self.update.inputs() != 2 * d {
            return Err(Error::shape(format!(
                "inconsistent graph conv weights: w_agg {:?}, update {:?}",
                self.w_agg.shape(),
                self.update.weight.shape()
            )));
        }
        if x.cols() != d {
            return Err(Error::shape(format!(
                "graph conv expects dimension {d}, got {}",
                x.cols()
            )));
        }
        Ok(())
    }
}

impl ParamTensors for GraphConvParams {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = vec![("w_agg".to_string(), &self.w_agg)];
        v.extend(prefixed("update", self.update.named_tensors()));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut v = vec![("w_agg".to_string(), &mut self.w_agg)];
        v.extend(prefixed_mut("update", self.update.named_tensors_mut()));
        v
    }
}

/// Weights of one graph convolution block: FC → DynGC → FC → GeLU with a
/// residual, followed by a two-layer GeLU feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct GcbParams {
    pub fc_in: Linear,
    pub gconv: GraphConvParams,
    pub fc_out: Linear,
    pub ffn_1: Linear,
    pub ffn_2: Linear,
}

impl GcbParams {
    pub fn zeros(dim: usize, ratio: usize) -> Self {
        Self {
            fc_in: Linear::zeros(dim, dim),
            gconv: GraphConvParams::zeros(dim, dim),
            fc_out: Linear::zeros(dim, dim),
            ffn_1: Linear::zeros(dim, ratio * dim),
            ffn_2: Linear::zeros(ratio * dim, dim),
        }
    }

    /// Glorot initialisation. With `zero_branches` the `fc_out` and `ffn_2`
    /// layers start at zero so the block is initially the identity.
    pub fn glorot<R: Rng + ?Sized>(dim: usize, ratio: usize, zero_branches: bool, rng: &mut R) -> Self {
        let fc_in = Linear::glorot(dim, dim, rng);
        let gconv = GraphConvParams::glorot(dim, dim, rng);
        let mut fc_out = Linear::glorot(dim, dim, rng);
        let ffn_1 = Linear::glorot(dim, ratio * dim, rng);
        let mut ffn_2 = Linear::glorot(ratio * dim, dim, rng);
        if zero_branches {
            fc_out = Linear::zeros(dim, dim);
            ffn_2 = Linear::zeros(ratio * dim, dim);
        }
        Self {
            fc_in,
            gconv,
            fc_out,
            ffn_1,
            ffn_2,
        }
    }

    pub fn dim(&self) -> usize {
        self.fc_in.inputs()
    }

    /// Zeroes the two residual branches (`fc_out` and `ffn_2`).
    pub fn zero_branches(&mut self) {
        for t in [
            &mut self.fc_out.weight,
            &mut self.fc_out.bias,
            &mut self.ffn_2.weight,
            &mut self.ffn_2.bias,
        ] {
            t.fill(0.0);
        }
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        let d = self.dim();
        let hidden = self.ffn_1.outputs();
        let ok = self.fc_in.outputs() == d
            && self.gconv.d_in() == d
            && self.gconv.update.outputs() == d
            && self.fc_out.inputs() == d
            && self.fc_out.outputs() == d
            && self.ffn_1.inputs() == d
            && self.ffn_2.inputs() == hidden
            && self.ffn_2.outputs() == d;
        if !ok {
            return Err(Error::shape("GCB weights do not preserve the vertex dimension"));
        }
        if x.cols() != d {
            return Err(Error::shape(format!("GCB expects dimension {d}, got {}", x.cols())));
        }
        Ok(())
    }
}

impl ParamTensors for GcbParams {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        prefixed("fc_in", self.fc_in.named_tensors())
            .chain(prefixed("gconv", self.gconv.named_tensors()))
            .chain(prefixed("fc_out", self.fc_out.named_tensors()))
            .chain(prefixed("ffn_1", self.ffn_1.named_tensors()))
            .chain(prefixed("ffn_2", self.ffn_2.named_tensors()))
            .collect()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        prefixed_mut("fc_in", self.fc_in.named_tensors_mut())
            .chain(prefixed_mut("gconv", self.gconv.named_tensors_mut()))
            .chain(prefixed_mut("fc_out", self.fc_out.named_tensors_mut()))
            .chain(prefixed_mut("ffn_1", self.ffn_1.named_tensors_mut()))
            .chain(prefixed_mut("ffn_2", self.ffn_2.named_tensors_mut()))
            .collect()
    }
}

fn check_edges(x: &Matrix, edges: &EdgeSet) -> Result<()> {
    if edges.n() != x.rows() {
        return Err(Error::Graph(format!(
            "edge set covers {} vertices but features have {}",
            edges.n(),
            x.rows()
        )));
    }
    if edges.k_effective() == 0 {
        return Err(Error::Graph("empty neighbor list".into()));
    }
    Ok(())
}

/// Elementwise max over neighbours of `x_j − x_i`, plus the winning source
/// vertex of every entry (first maximum in neighbour order).
fn aggregate_traced(x: &Matrix, edges: &EdgeSet) -> Result<(Matrix, Vec<usize>)> {
    check_edges(x, edges)?;
    let (n, d) = x.shape();
    let mut out = Matrix::zeros(n, d);
    let mut argmax = vec![0usize; n * d];
    for i in 0..n {
        let xi = x.row(i);
        let nb = edges.neighbors(i);
        let best = out.row_mut(i);
        let src = &mut argmax[i * d..(i + 1) * d];
        let first = nb[0];
        for c in 0..d {
            best[c] = x[(first, c)] - xi[c];
            src[c] = first;
        }
        for &j in &nb[1..] {
            let xj = x.row(j);
            for c in 0..d {
                let v = xj[c] - xi[c];
                if v > best[c] {
                    best[c] = v;
                    src[c] = j;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Max-relative aggregation: row `i` is `max_{j ∈ N(i)} (x_j − x_i)`.
pub fn max_relative_aggregate(x: &VertexFeatures, edges: &EdgeSet) -> Result<VertexFeatures> {
    aggregate_traced(x, edges).map(|(h, _)| h)
}

#[derive(Debug, Clone)]
pub(crate) struct GraphConvCache {
    input: Matrix,
    cat: Matrix,
    argmax: Vec<usize>,
}

fn graph_conv_traced(x: &Matrix, edges: &EdgeSet, p: &GraphConvParams) -> Result<(Matrix, GraphConvCache)> {
    p.check(x)?;
    let xa = x.matmul(&p.w_agg)?;
    let (h, argmax) = aggregate_traced(&xa, edges)?;
    let cat = xa.hcat(&h)?;
    let out = p.update.forward(&cat)?;
    Ok((
        out,
        GraphConvCache {
            input: x.clone(),
            cat,
            argmax,
        },
    ))
}

fn graph_conv_backward(
    p: &GraphConvParams,
    cache: &GraphConvCache,
    dout: &Matrix,
    grad: &mut GraphConvParams,
) -> Result<Matrix> {
    let d = p.d_in();
    let dcat = p.update.backward(&cache.cat, dout, &mut grad.update)?;
    let mut dxa = dcat.col_slice(0, d);
    let n = dxa.rows();
    for i in 0..n {
        for c in 0..d {
            let g = dcat[(i, d + c)];
            if g != 0.0 {
                dxa[(cache.argmax[i * d + c], c)] += g;
                dxa[(i, c)] -= g;
            }
        }
    }
    grad.w_agg.add_assign(&cache.input.t_matmul(&dxa)?);
    dxa.matmul_t(&p.w_agg)
}

/// `[x·W_agg ‖ h(x·W_agg)] · W_update + b`, with `h` the max-relative aggregate.
pub fn graph_conv(x: &VertexFeatures, edges: &EdgeSet, p: &GraphConvParams) -> Result<VertexFeatures> {
    graph_conv_traced(x, edges, p).map(|(y, _)| y)
}

/// Graph convolution over an edge set rebuilt from `x` itself.
pub fn dyn_gc(x: &VertexFeatures, k: usize, d: usize, p: &GraphConvParams) -> Result<VertexFeatures> {
    let edges = dilated_knn(x, k, d)?;
    graph_conv(x, &edges, p)
}

/// Where a block gets its edges from.
#[derive(Debug, Clone, Copy)]
pub enum EdgeSource<'a> {
    /// Rebuild a dilated KNN graph from the block's current features.
    Knn { k: usize, d: usize },
    /// Replay a previously recorded edge set.
    Fixed(&'a EdgeSet),
}

/// Intermediate values of one GCB forward pass.
#[derive(Debug, Clone)]
pub struct GcbTrace {
    x: Matrix,
    gc: GraphConvCache,
    g: Matrix,
    z: Matrix,
    xp: Matrix,
    f1: Matrix,
    h1: Matrix,
    edges: EdgeSet,
}

impl GcbTrace {
    /// Edge set used by the block's graph convolution.
    pub fn edges(&self) -> &EdgeSet {
        &self.edges
    }
}

pub fn gcb_forward_traced(
    x: &Matrix,
    p: &GcbParams,
    source: EdgeSource<'_>,
    ffn_residual: bool,
) -> Result<(Matrix, GcbTrace)> {
    p.check(x)?;
    let a1 = p.fc_in.forward(x)?;
    let edges = match source {
        EdgeSource::Knn { k, d } => dilated_knn(&a1, k, d)?,
        EdgeSource::Fixed(e) => e.clone(),
    };
    let (g, gc) = graph_conv_traced(&a1, &edges, &p.gconv)?;
    let z = p.fc_out.forward(&g)?;
    let mut xp = z.map(gelu);
    xp.add_assign(x);
    let f1 = p.ffn_1.forward(&xp)?;
    let h1 = f1.map(gelu);
    let mut out = p.ffn_2.forward(&h1)?;
    if ffn_residual {
        out.add_assign(&xp);
    }
    Ok((
        out,
        GcbTrace {
            x: x.clone(),
            gc,
            g,
            z,
            xp,
            f1,
            h1,
            edges,
        },
    ))
}

fn hadamard_gelu_grad(upstream: &Matrix, pre: &Matrix) -> Matrix {
    let mut out = upstream.clone();
    for (o, &t) in out.data_mut().iter_mut().zip(pre.data()) {
        *o *= gelu_grad(t);
    }
    out
}

/// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
pub fn gcb_backward_traced(
    p: &GcbParams,
    trace: &GcbTrace,
    dout: &Matrix,
    ffn_residual: bool,
    grad: &mut GcbParams,
) -> Result<Matrix> {
    if dout.shape() != trace.x.shape() {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match block output {:?}",
            dout.shape(),
            trace.x.shape()
        )));
    }
    let dh1 = p.ffn_2.backward(&trace.h1, dout, &mut grad.ffn_2)?;
    let df1 = hadamard_gelu_grad(&dh1, &trace.f1);
    let mut dxp = p.ffn_1.backward(&trace.xp, &df1, &mut grad.ffn_1)?;
    if ffn_residual {
        dxp.add_assign(dout);
    }
    let dz = hadamard_gelu_grad(&dxp, &trace.z);
    let dg = p.fc_out.backward(&trace.g, &dz, &mut grad.fc_out)?;
    let da1 = graph_conv_backward(&p.gconv, &trace.gc, &dg, &mut grad.gconv)?;
    let mut dx = p.fc_in.backward(&trace.x, &da1, &mut grad.fc_in)?;
    dx.add_assign(&dxp);
    Ok(dx)
}

/// One GCB with a dynamic `(k, d)` graph and residual feed-forward network.
pub fn gcb_forward(x: &VertexFeatures, p: &GcbParams, k: usize, d: usize) -> Result<VertexFeatures> {
    gcb_forward_traced(x, p, EdgeSource::Knn { k, d }, true).map(|(y, _)| y)
}

/// Gradients of `Σ upstream ⊙ gcb_forward(x)` w.r.t. `x` and every weight,
/// holding the forward-pass edge set fixed.
pub fn gcb_backward(
    x: &VertexFeatures,
    p: &GcbParams,
    k: usize,
    d: usize,
    upstream: &Matrix,
) -> Result<(Matrix, GcbParams)> {
    if !upstream.is_finite() {
        return Err(Error::numeric("upstream gradient contains NaN or infinity"));
    }
    let (_, trace) = gcb_forward_traced(x, p, EdgeSource::Knn { k, d }, true)?;
    let mut grad = GcbParams::zeros(p.dim(), p.ffn_1.outputs() / p.dim().max(1));
    let dx = gcb_backward_traced(p, &trace, upstream, true, &mut grad)?;
    Ok((dx, grad))
}
