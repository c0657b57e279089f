//! Training objective: infrared intensity term plus weighted visible
//! intensity-and-gradient term, both normalized by pixel count.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{sobel_gradient, sobel_gradient_backward, Image};

/// Weight of the visible-detail term used throughout training.
pub const DEFAULT_LAMBDA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_ir: f64,
    pub l_vi: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_ir: f64, l_vi: f64, lambda: f64) -> Self {
        Self {
            l_ir,
            l_vi,
            lambda,
            total: l_ir + lambda * l_vi,
        }
    }
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.channels() != 1 || b.channels() != 1 {
        return Err(Error::shape("losses operate on single-channel images"));
    }
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "loss operands differ in size: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn sq_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `‖fused − ir‖²_F / (H·W)`
pub fn loss_ir(fused: &Image, ir: &Image) -> Result<f64> {
    check_pair(fused, ir)?;
    Ok(sq_norm_diff(fused.data(), ir.data()) / fused.data().len() as f64)
}

/// `(‖fused − vis‖²_F + ‖∇fused − ∇vis‖²_F) / (H·W)` with ∇ the Sobel magnitude.
pub fn loss_vi(fused: &Image, vis: &Image) -> Result<f64> {
    check_pair(fused, vis)?;
    let gf = sobel_gradient(fused)?;
    let gv = sobel_gradient(vis)?;
    let n = fused.data().len() as f64;
    Ok((sq_norm_diff(fused.data(), vis.data()) + sq_norm_diff(gf.data(), gv.data())) / n)
}

pub fn total_loss(fused: &Image, ir: &Image, vis: &Image, lambda: f64) -> Result<LossBreakdown> {
    Ok(LossBreakdown::new(loss_ir(fused, ir)?, loss_vi(fused, vis)?, lambda))
}

/// Loss value together with `∂total/∂fused` (one entry per pixel).
pub fn total_loss_with_grad(
    fused: &Image,
    ir: &Image,
    vis: &Image,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_pair(fused, ir)?;
    check_pair(fused, vis)?;
    let n = fused.data().len() as f64;
    let gf = sobel_gradient(fused)?;
    let gv = sobel_gradient(vis)?;
    let l_ir = sq_norm_diff(fused.data(), ir.data()) / n;
    let l_vi = (sq_norm_diff(fused.data(), vis.data()) + sq_norm_diff(gf.data(), gv.data())) / n;

    let edge_residual: Vec<f64> = gf
        .data()
        .iter()
        .zip(gv.data())
        .map(|(a, b)| lambda * 2.0 * (a - b) / n)
        .collect();
    let mut grad = sobel_gradient_backward(fused, &edge_residual)?;
    for (((g, &f), &i), &v) in grad.iter_mut().zip(fused.data()).zip(ir.data()).zip(vis.data()) {
        *g += 2.0 * (f - i) / n + lambda * 2.0 * (f - v) / n;
    }
    Ok((LossBreakdown::new(l_ir, l_vi, lambda), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::gray(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn infrared_term() {
        let x = random(4, 4, 1);
        assert_eq!(loss_ir(&x, &x).unwrap(), 0.0);
        let half = Image::filled(1, 1, 1, 0.5);
        let zero = Image::filled(1, 1, 1, 0.0);
        assert_eq!(loss_ir(&half, &zero).unwrap(), 0.25);
        let y = random(4, 4, 2);
        let oracle: f64 = (0..16).map(|i| (x.data()[i] - y.data()[i]).powi(2)).sum::<f64>() / 16.0;
        assert!((loss_ir(&x, &y).unwrap() - oracle).abs() < 1e-15);
        assert!(matches!(loss_ir(&x, &random(4, 3, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn visible_term() {
        let x = random(5, 5, 3);
        assert_eq!(loss_vi(&x, &x).unwrap(), 0.0);
        let a = Image::filled(3, 4, 1, 0.7);
        let b = Image::filled(3, 4, 1, 0.4);
        assert!((loss_vi(&a, &b).unwrap() - 0.09).abs() < 1e-15);
    }

    #[test]
    fn visible_term_on_step_edge() {
        // fused flat 0.5, vis a 0|1 step across 4 columns
        let fused = Image::filled(3, 4, 1, 0.5);
        let vis = Image::gray(3, 4, (0..12).map(|i| if i % 4 >= 2 { 1.0 } else { 0.0 }).collect()).unwrap();
        // intensity: every pixel off by 0.5; Sobel of vis is 4 on the two middle columns
        let intensity = 12.0 * 0.25;
        let edges = 6.0 * 16.0;
        assert!((loss_vi(&fused, &vis).unwrap() - (intensity + edges) / 12.0).abs() < 1e-12);
    }

    #[test]
    fn total_combines_terms() {
        let x = random(4, 4, 4);
        let b = total_loss(&x, &x, &x, 1.5).unwrap();
        assert_eq!(b.total, 0.0);
        let lb = LossBreakdown::new(0.2, 0.1, 1.5);
        assert!((lb.total - 0.35).abs() < 1e-15);

        let (ir, vis) = (random(4, 4, 5), random(4, 4, 6));
        let b = total_loss(&x, &ir, &vis, DEFAULT_LAMBDA).unwrap();
        assert_eq!(b.total, b.l_ir + b.lambda * b.l_vi);
        assert!(b.l_ir >= 0.0 && b.l_vi >= 0.0);
        let c = total_loss(&x, &ir, &vis, 0.4).unwrap();
        assert!(((c.total - b.total) - (0.4 - 1.5) * b.l_vi).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let fused = random(4, 4, 7);
        let ir = random(4, 4, 8);
        let vis = random(4, 4, 9);
        let (lb, grad) = total_loss_with_grad(&fused, &ir, &vis, 1.5).unwrap();
        assert_eq!(lb, total_loss(&fused, &ir, &vis, 1.5).unwrap());
        let h = 1e-6;
        for i in 0..16 {
            let mut p = fused.data().to_vec();
            p[i] += h;
            let mut m = fused.data().to_vec();
            m[i] -= h;
            let f = |d: Vec<f64>| total_loss(&Image::gray(4, 4, d).unwrap(), &ir, &vis, 1.5).unwrap().total;
            let fd = (f(p) - f(m)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs());
            assert!(rel < 1e-6, "pixel {i}: fd {fd} vs {}", grad[i]);
        }
    }

    proptest::proptest! {
        #[test]
        fn identical_inputs_cost_nothing(seed in 0u64..500, lambda in 0.0f64..10.0) {
            let x = random(6, 5, seed);
            proptest::prop_assert_eq!(total_loss(&x, &x, &x, lambda).unwrap().total, 0.0);
        }
    }
}
