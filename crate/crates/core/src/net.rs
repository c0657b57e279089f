//! The cascaded fusion network: patch embedding, two independent
//! intra-modal GCB branches, channel concatenation, the inter-modal branch
//! and the per-vertex reduction back to pixels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::{gcb_backward_traced, gcb_forward_traced, EdgeSource, GcbParams, GcbTrace};
use crate::graph::{BlockPlan, EdgeSet, KdSchedule};
use crate::image::{patchify, patchify_adjoint, rgb_to_ycbcr, unpatchify_raw, ycbcr_to_rgb, Image, PatchGrid, YcbcrImage};
use crate::layers::{prefixed, prefixed_mut, Linear, ParamTensors};
use crate::tensor::{Matrix, VertexFeatures};

/// Architecture hyper-parameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Side of the square patch that becomes one vertex.
    pub patch_size: usize,
    /// Vertex feature dimension inside the intra-modal branches; the
    /// inter-modal branch runs at twice this.
    pub feature_dim: usize,
    pub intra_blocks: usize,
    pub inter_blocks: usize,
    pub schedule: KdSchedule,
    pub ffn_ratio: usize,
    /// Residual connection around each block's feed-forward network.
    pub ffn_residual: bool,
    /// Start `fc_out` / `ffn_2` of every block at zero.
    pub zero_init_branches: bool,
    /// Ablation: the same `k` in every block.
    pub fixed_k: Option<usize>,
    /// Ablation: dilation 1 in every block.
    pub no_dilation: bool,
    /// Ablation: reduce the concatenated intra features directly.
    pub no_inter_modal: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            patch_size: 1,
            feature_dim: 8,
            intra_blocks: 6,
            inter_blocks: 6,
            schedule: KdSchedule::default(),
            ffn_ratio: 4,
            ffn_residual: true,
            zero_init_branches: false,
            fixed_k: None,
            no_dilation: false,
            no_inter_modal: false,
        }
    }
}

/// Default patch side for an image: one pixel per vertex up to 64×64, 4 beyond.
pub fn default_patch_size(height: usize, width: usize) -> usize {
    if height <= 64 && width <= 64 {
        1
    } else {
        4
    }
}

/// Blocks actually run by a configured network, after ablations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutedSchedule {
    pub intra: Vec<BlockPlan>,
    pub inter: Vec<BlockPlan>,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.patch_size == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config(
                "feature_dim, patch_size and ffn_ratio must be positive".into(),
            ));
        }
        if self.schedule.len() != self.intra_blocks || self.schedule.len() != self.inter_blocks {
            return Err(Error::Config(format!(
                "schedule has {} blocks but intra_blocks = {} and inter_blocks = {}",
                self.schedule.len(),
                self.intra_blocks,
                self.inter_blocks
            )));
        }
        if self.fixed_k == Some(0) {
            return Err(Error::Config("fixed_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn executed_schedule(&self) -> ExecutedSchedule {
        let intra: Vec<BlockPlan> = self
            .schedule
            .blocks()
            .iter()
            .map(|b| BlockPlan {
                k: self.fixed_k.unwrap_or(b.k),
                d: if self.no_dilation { 1 } else { b.d },
            })
            .collect();
        let inter = if self.no_inter_modal {
            Vec::new()
        } else {
            intra.clone()
        };
        ExecutedSchedule { intra, inter }
    }
}

/// All learnable weights of the fusion network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub embed_ir: Linear,
    pub embed_vis: Linear,
    pub intra_ir: Vec<GcbParams>,
    pub intra_vis: Vec<GcbParams>,
    pub inter: Vec<GcbParams>,
    /// Per-vertex map from the 2·D concatenated features to `patch²` pixels.
    pub rho: Linear,
}

impl NetworkParams {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        let (p2, d, r) = (cfg.patch_size * cfg.patch_size, cfg.feature_dim, cfg.ffn_ratio);
        let inter_len = if cfg.no_inter_modal { 0 } else { cfg.inter_blocks };
        Self {
            embed_ir: Linear::zeros(p2, d),
            embed_vis: Linear::zeros(p2, d),
            intra_ir: (0..cfg.intra_blocks).map(|_| GcbParams::zeros(d, r)).collect(),
            intra_vis: (0..cfg.intra_blocks).map(|_| GcbParams::zeros(d, r)).collect(),
            inter: (0..inter_len).map(|_| GcbParams::zeros(2 * d, r)).collect(),
            rho: Linear::zeros(2 * d, p2),
        }
    }

    /// Seeded Glorot initialisation with zero biases.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p2, d, r, z) = (
            cfg.patch_size * cfg.patch_size,
            cfg.feature_dim,
            cfg.ffn_ratio,
            cfg.zero_init_branches,
        );
        let inter_len = if cfg.no_inter_modal { 0 } else { cfg.inter_blocks };
        let embed_ir = Linear::glorot(p2, d, &mut rng);
        let embed_vis = Linear::glorot(p2, d, &mut rng);
        let intra_ir = (0..cfg.intra_blocks).map(|_| GcbParams::glorot(d, r, z, &mut rng)).collect();
        let intra_vis = (0..cfg.intra_blocks).map(|_| GcbParams::glorot(d, r, z, &mut rng)).collect();
        let inter = (0..inter_len).map(|_| GcbParams::glorot(2 * d, r, z, &mut rng)).collect();
        let rho = Linear::glorot(2 * d, p2, &mut rng);
        Ok(Self {
            embed_ir,
            embed_vis,
            intra_ir,
            intra_vis,
            inter,
            rho,
        })
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &NetworkConfig) -> Result<()> {
        let expected = Self::zeros(cfg);
        let mine = self.named_tensors();
        let theirs = expected.named_tensors();
        if mine.len() != theirs.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, found {}",
                theirs.len(),
                mine.len()
            )));
        }
        for ((name, a), (_, b)) in mine.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!(
                    "{name}: expected {:?}, found {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }
}

fn blocks<'a>(name: &str, list: &'a [GcbParams]) -> Vec<(String, &'a Matrix)> {
    list.iter()
        .enumerate()
        .flat_map(|(i, b)| prefixed(&format!("{name}.{i}"), b.named_tensors()))
        .collect()
}

fn blocks_mut<'a>(name: &str, list: &'a mut [GcbParams]) -> Vec<(String, &'a mut Matrix)> {
    list.iter_mut()
        .enumerate()
        .flat_map(|(i, b)| prefixed_mut(&format!("{name}.{i}"), b.named_tensors_mut()))
        .collect()
}

impl ParamTensors for NetworkParams {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v: Vec<_> = prefixed("embed_ir", self.embed_ir.named_tensors()).collect();
        v.extend(prefixed("embed_vis", self.embed_vis.named_tensors()));
        v.extend(blocks("intra_ir", &self.intra_ir));
        v.extend(blocks("intra_vis", &self.intra_vis));
        v.extend(blocks("inter", &self.inter));
        v.extend(prefixed("rho", self.rho.named_tensors()));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut v: Vec<_> = prefixed_mut("embed_ir", self.embed_ir.named_tensors_mut()).collect();
        v.extend(prefixed_mut("embed_vis", self.embed_vis.named_tensors_mut()));
        v.extend(blocks_mut("intra_ir", &mut self.intra_ir));
        v.extend(blocks_mut("intra_vis", &mut self.intra_vis));
        v.extend(blocks_mut("inter", &mut self.inter));
        v.extend(prefixed_mut("rho", self.rho.named_tensors_mut()));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Ir,
    Vis,
}

/// Edge sets chosen by every block of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionEdges {
    pub intra_ir: Vec<EdgeSet>,
    pub intra_vis: Vec<EdgeSet>,
    pub inter: Vec<EdgeSet>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    grid: PatchGrid,
    x_ir: Matrix,
    x_vis: Matrix,
    intra_ir: Vec<GcbTrace>,
    intra_vis: Vec<GcbTrace>,
    inter: Vec<GcbTrace>,
    rho_in: Matrix,
}

impl FusionTrace {
    pub fn edges(&self) -> FusionEdges {
        let collect = |t: &[GcbTrace]| t.iter().map(|b| b.edges().clone()).collect();
        FusionEdges {
            intra_ir: collect(&self.intra_ir),
            intra_vis: collect(&self.intra_vis),
            inter: collect(&self.inter),
        }
    }
}

fn run_blocks(
    mut x: Matrix,
    params: &[GcbParams],
    plans: &[BlockPlan],
    fixed: Option<&[EdgeSet]>,
    ffn_residual: bool,
) -> Result<(Matrix, Vec<GcbTrace>)> {
    if params.len() != plans.len() {
        return Err(Error::shape(format!(
            "{} blocks configured but {} parameter sets given",
            plans.len(),
            params.len()
        )));
    }
    let mut traces = Vec::with_capacity(params.len());
    for (i, (p, plan)) in params.iter().zip(plans).enumerate() {
        let source = match fixed {
            Some(edges) => EdgeSource::Fixed(&edges[i]),
            None => EdgeSource::Knn { k: plan.k, d: plan.d },
        };
        let (y, trace) = gcb_forward_traced(&x, p, source, ffn_residual)?;
        traces.push(trace);
        x = y;
    }
    Ok((x, traces))
}

fn backward_blocks(
    params: &[GcbParams],
    traces: &[GcbTrace],
    mut dout: Matrix,
    ffn_residual: bool,
    grads: &mut [GcbParams],
) -> Result<Matrix> {
    for ((p, trace), g) in params.iter().zip(traces).zip(grads.iter_mut()).rev() {
        dout = gcb_backward_traced(p, trace, &dout, ffn_residual, g)?;
    }
    Ok(dout)
}

/// Runs one intra-modal branch over embedded vertex features.
pub fn intra_forward(
    x: &VertexFeatures,
    branch: Branch,
    params: &NetworkParams,
    cfg: &NetworkConfig,
) -> Result<VertexFeatures> {
    let blocks = match branch {
        Branch::Ir => &params.intra_ir,
        Branch::Vis => &params.intra_vis,
    };
    let plans = cfg.executed_schedule().intra;
    run_blocks(x.clone(), blocks, &plans, None, cfg.ffn_residual).map(|(y, _)| y)
}

/// Channel-wise concatenation `[ir ‖ vis]`.
pub fn concat_intra(ir_feat: &VertexFeatures, vis_feat: &VertexFeatures) -> Result<VertexFeatures> {
    if ir_feat.shape() != vis_feat.shape() {
        return Err(Error::shape(format!(
            "intra features differ in shape: {:?} vs {:?}",
            ir_feat.shape(),
            vis_feat.shape()
        )));
    }
    ir_feat.hcat(vis_feat)
}

/// Inter-modal branch and reduction to an `height × width` image clamped to `[0, 1]`.
pub fn inter_forward(
    f: &VertexFeatures,
    params: &NetworkParams,
    cfg: &NetworkConfig,
    height: usize,
    width: usize,
) -> Result<Image> {
    let grid = PatchGrid::new(height, width, cfg.patch_size)?;
    let plans = cfg.executed_schedule().inter;
    let (y, _) = run_blocks(f.clone(), &params.inter, &plans, None, cfg.ffn_residual)?;
    let pixels = params.rho.forward(&y)?;
    Ok(Image::gray(height, width, unpatchify_raw(&pixels, &grid)?)?.clamped())
}

fn check_pair(ir: &Image, vis: &Image) -> Result<()> {
    if ir.channels() != 1 || vis.channels() != 1 {
        return Err(Error::shape("fusion expects single-channel inputs"));
    }
    if ir.dims() != vis.dims() {
        return Err(Error::shape(format!(
            "pair is not aligned: ir {:?} vs vis {:?}",
            ir.dims(),
            vis.dims()
        )));
    }
    Ok(())
}

/// Full forward pass returning the unclamped fused plane and its trace.
/// With `edges` given, every block replays the recorded graph instead of
/// rebuilding it.
pub fn fuse_traced(
    ir: &Image,
    vis: &Image,
    params: &NetworkParams,
    cfg: &NetworkConfig,
    edges: Option<&FusionEdges>,
) -> Result<(Image, FusionTrace)> {
    cfg.validate()?;
    check_pair(ir, vis)?;
    let (h, w) = ir.dims();
    let grid = PatchGrid::new(h, w, cfg.patch_size)?;
    let sched = cfg.executed_schedule();
    let x_ir = patchify(ir, cfg.patch_size)?;
    let x_vis = patchify(vis, cfg.patch_size)?;
    let e_ir = params.embed_ir.forward(&x_ir)?;
    let e_vis = params.embed_vis.forward(&x_vis)?;
    let (f_ir, intra_ir) = run_blocks(
        e_ir,
        &params.intra_ir,
        &sched.intra,
        edges.map(|e| e.intra_ir.as_slice()),
        cfg.ffn_residual,
    )?;
    let (f_vis, intra_vis) = run_blocks(
        e_vis,
        &params.intra_vis,
        &sched.intra,
        edges.map(|e| e.intra_vis.as_slice()),
        cfg.ffn_residual,
    )?;
    let cat = concat_intra(&f_ir, &f_vis)?;
    let (rho_in, inter) = run_blocks(
        cat,
        &params.inter,
        &sched.inter,
        edges.map(|e| e.inter.as_slice()),
        cfg.ffn_residual,
    )?;
    let pixels = params.rho.forward(&rho_in)?;
    let fused = Image::gray(h, w, unpatchify_raw(&pixels, &grid)?)?;
    Ok((
        fused,
        FusionTrace {
            grid,
            x_ir,
            x_vis,
            intra_ir,
            intra_vis,
            inter,
            rho_in,
        },
    ))
}

/// Gradient of a scalar loss w.r.t. every parameter, given `∂L/∂fused`
/// (row-major, one value per pixel of the unclamped output).
pub fn fuse_backward(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    trace: &FusionTrace,
    d_fused: &[f64],
) -> Result<NetworkParams> {
    let grid = trace.grid;
    if d_fused.len() != grid.height * grid.width {
        return Err(Error::shape(format!(
            "{} gradient values for a {}x{} output",
            d_fused.len(),
            grid.height,
            grid.width
        )));
    }
    if d_fused.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("loss gradient contains NaN or infinity"));
    }
    let mut grads = NetworkParams::zeros(cfg);
    let d_pixels = patchify_adjoint(d_fused, &grid);
    let d_rho_in = params.rho.backward(&trace.rho_in, &d_pixels, &mut grads.rho)?;
    let d_cat = backward_blocks(&params.inter, &trace.inter, d_rho_in, cfg.ffn_residual, &mut grads.inter)?;
    let d = cfg.feature_dim;
    let d_ir = backward_blocks(
        &params.intra_ir,
        &trace.intra_ir,
        d_cat.col_slice(0, d),
        cfg.ffn_residual,
        &mut grads.intra_ir,
    )?;
    let d_vis = backward_blocks(
        &params.intra_vis,
        &trace.intra_vis,
        d_cat.col_slice(d, 2 * d),
        cfg.ffn_residual,
        &mut grads.intra_vis,
    )?;
    params.embed_ir.backward(&trace.x_ir, &d_ir, &mut grads.embed_ir)?;
    params.embed_vis.backward(&trace.x_vis, &d_vis, &mut grads.embed_vis)?;
    Ok(grads)
}

/// Fuses an aligned single-channel pair into a `[0, 1]` plane.
pub fn fuse(ir: &Image, vis_y: &Image, params: &NetworkParams, cfg: &NetworkConfig) -> Result<Image> {
    fuse_traced(ir, vis_y, params, cfg, None).map(|(img, _)| img.clamped())
}

/// Fuses the infrared image with the visible luminance and recombines the
/// result with the visible chroma.
pub fn fuse_color(ir: &Image, vis_rgb: &Image, params: &NetworkParams, cfg: &NetworkConfig) -> Result<Image> {
    let ycc = rgb_to_ycbcr(vis_rgb)?;
    let fused_y = fuse(&ir.luma(), &ycc.y, params, cfg)?;
    ycbcr_to_rgb(&YcbcrImage {
        y: fused_y,
        cb: ycc.cb,
        cr: ycc.cr,
    })
}
