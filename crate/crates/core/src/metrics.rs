//! Fusion quality metrics in the two-reference convention: SSIM is the sum
//! over both sources, PSNR and CC are means, Nabf measures artifacts that
//! are stronger than either source.
//!
//! Constants:
//! - SSIM: 11×11 Gaussian window with σ = 1.5 over the valid region,
//!   `C1 = (0.01·L)²`, `C2 = (0.03·L)²`, `L = 1`.
//! - PSNR: peak 1, capped at [`PSNR_CAP`] dB.
//! - Nabf: intensities rescaled to 0–255; Sobel edge strength
//!   `sqrt(gx² + gy²)` and orientation `atan(gy / gx)`; `Td = 2`,
//!   `wt_min = 0.001`, `L = 1.5`, `Γg = 0.9999`, `κg = 19`, `σg = 0.5`,
//!   `Γα = 0.9995`, `κα = 22`, `σα = 0.5`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{sobel_components, Image};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;

fn check_aligned(a: &Image, b: &Image) -> Result<()> {
    if a.channels() != 1 || b.channels() != 1 {
        return Err(Error::shape("metrics operate on single-channel images"));
    }
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("images differ in size: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|i| {
            let (dy, dx) = ((i / SSIM_WINDOW) as f64 - r, (i % SSIM_WINDOW) as f64 - r);
            (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean local SSIM between two single-channel images.
pub fn ssim_pair(a: &Image, b: &Image) -> Result<f64> {
    check_aligned(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window();
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..SSIM_WINDOW {
                let row = (y + ky) * w + x;
                for kx in 0..SSIM_WINDOW {
                    let g = win[ky * SSIM_WINDOW + kx];
                    let (pa, pb) = (da[row + kx], db[row + kx]);
                    ma += g * pa;
                    mb += g * pb;
                    saa += g * (pa * pa);
                    sbb += g * (pb * pb);
                    sab += g * (pa * pb);
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// `ssim(fused, ir) + ssim(fused, vis)`, in `[−2, 2]`.
pub fn ssim_fusion(fused: &Image, ir: &Image, vis: &Image) -> Result<f64> {
    Ok(ssim_pair(fused, ir)? + ssim_pair(fused, vis)?)
}

/// `10·log10(1 / MSE)`, capped.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_aligned(a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub fn psnr_fusion(fused: &Image, ir: &Image, vis: &Image) -> Result<f64> {
    Ok(0.5 * (psnr(fused, ir)? + psnr(fused, vis)?))
}

/// Pearson correlation over all pixels. A constant image has no defined
/// correlation and yields a numeric error.
pub fn pearson(a: &Image, b: &Image) -> Result<f64> {
    check_aligned(a, b)?;
    let n = a.data().len() as f64;
    let ma = a.data().iter().sum::<f64>() / n;
    let mb = b.data().iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::numeric("correlation is undefined for a constant image"));
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn cc_fusion(fused: &Image, ir: &Image, vis: &Image) -> Result<f64> {
    Ok(0.5 * (pearson(fused, ir)? + pearson(fused, vis)?))
}

const NABF_TD: f64 = 2.0;
const NABF_WT_MIN: f64 = 0.001;
const NABF_L: f64 = 1.5;
const NABF_GAMMA_G: f64 = 0.9999;
const NABF_KAPPA_G: f64 = 19.0;
const NABF_SIGMA_G: f64 = 0.5;
const NABF_GAMMA_A: f64 = 0.9995;
const NABF_KAPPA_A: f64 = 22.0;
const NABF_SIGMA_A: f64 = 0.5;

struct EdgeMap {
    strength: Vec<f64>,
    orientation: Vec<f64>,
}

fn edge_map(img: &Image) -> Result<EdgeMap> {
    let scaled = Image::gray(img.height(), img.width(), img.data().iter().map(|v| v * 255.0).collect())?;
    let (gx, gy) = sobel_components(&scaled)?;
    let strength = gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect();
    let orientation = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| {
            if x == 0.0 && y == 0.0 {
                0.0
            } else if x == 0.0 {
                std::f64::consts::FRAC_PI_2.copysign(y)
            } else {
                (y / x).atan()
            }
        })
        .collect();
    Ok(EdgeMap { strength, orientation })
}

/// Edge preservation of `src` in `fused` at one pixel.
fn preservation(g_src: f64, a_src: f64, g_f: f64, a_f: f64) -> f64 {
    let g_rel = if g_src == 0.0 || g_f == 0.0 {
        0.0
    } else if g_src > g_f {
        g_f / g_src
    } else {
        g_src / g_f
    };
    let a_rel = 1.0 - (a_src - a_f).abs() / std::f64::consts::FRAC_PI_2;
    let qg = NABF_GAMMA_G / (1.0 + (-NABF_KAPPA_G * (g_rel - NABF_SIGMA_G)).exp());
    let qa = NABF_GAMMA_A / (1.0 + (-NABF_KAPPA_A * (a_rel - NABF_SIGMA_A)).exp());
    qg * qa
}

fn edge_weight(g: f64) -> f64 {
    if g >= NABF_TD {
        g.powf(NABF_L)
    } else {
        NABF_WT_MIN
    }
}

/// Fusion artifacts: edge-preservation loss at pixels whose fused edge is
/// stronger than both source edges, normalised by the total source edge weight.
pub fn nabf(fused: &Image, ir: &Image, vis: &Image) -> Result<f64> {
    check_aligned(fused, ir)?;
    check_aligned(fused, vis)?;
    let (ea, eb, ef) = (edge_map(ir)?, edge_map(vis)?, edge_map(fused)?);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..fused.data().len() {
        let (ga, gb, gf) = (ea.strength[i], eb.strength[i], ef.strength[i]);
        let (wa, wb) = (edge_weight(ga), edge_weight(gb));
        den += wa + wb;
        if gf > ga && gf > gb {
            let qa = preservation(ga, ea.orientation[i], gf, ef.orientation[i]);
            let qb = preservation(gb, eb.orientation[i], gf, ef.orientation[i]);
            num += (1.0 - qa) * wa + (1.0 - qb) * wb;
        }
    }
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMetrics {
    pub name: String,
    pub ssim: f64,
    pub psnr: f64,
    /// NaN when a constant image makes the correlation undefined.
    pub cc: f64,
    pub nabf: f64,
}

/// Evaluates one triple. Color inputs are compared on their luma.
pub fn evaluate_pair(name: &str, fused: &Image, ir: &Image, vis: &Image) -> Result<PairMetrics> {
    let y = |img: &Image| if img.channels() == 3 { img.luma() } else { img.clone() };
    let (f, i, v) = (y(fused), y(ir), y(vis));
    let cc = match cc_fusion(&f, &i, &v) {
        Ok(c) => c,
        Err(Error::Numeric(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(PairMetrics {
        name: name.to_string(),
        ssim: ssim_fusion(&f, &i, &v)?,
        psnr: psnr_fusion(&f, &i, &v)?,
        cc,
        nabf: nabf(&f, &i, &v)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (divisor n − 1); 0 for a single value.
    pub std: f64,
}

impl Aggregate {
    /// Two-pass mean and deviation over the finite entries.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() < 2 {
            0.0
        } else {
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
    pub ssim: Aggregate,
    pub psnr: Aggregate,
    pub cc: Aggregate,
    pub nabf: Aggregate,
    /// Pairs whose correlation was undefined.
    pub flagged: Vec<String>,
}

impl MetricReport {
    pub fn new(mut pairs: Vec<PairMetrics>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("no image pairs to evaluate".into()));
        }
        pairs.sort_by(|a, b| a.name.cmp(&b.name));
        let col = |f: fn(&PairMetrics) -> f64| Aggregate::of(pairs.iter().map(f));
        Ok(Self {
            ssim: col(|p| p.ssim),
            psnr: col(|p| p.psnr),
            cc: col(|p| p.cc),
            nabf: col(|p| p.nabf),
            flagged: pairs.iter().filter(|p| p.cc.is_nan()).map(|p| p.name.clone()).collect(),
            pairs,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,ssim,psnr,cc,nabf\n");
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                p.name,
                format_sig(p.ssim),
                format_sig(p.psnr),
                format_sig(p.cc),
                format_sig(p.nabf)
            );
        }
        let agg = |a: &Aggregate| format!("{}±{}", format_sig(a.mean), format_sig(a.std));
        let _ = writeln!(
            s,
            "mean±std,{},{},{},{}",
            agg(&self.ssim),
            agg(&self.psnr),
            agg(&self.cc),
            agg(&self.nabf)
        );
        s
    }
}

/// Six significant digits in the style of C's `%.6g`.
pub fn format_sig(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
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

    fn map(img: &Image, mut f: impl FnMut(f64) -> f64) -> Image {
        Image::gray(img.height(), img.width(), img.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    #[test]
    fn ssim_identities() {
        let x = random(16, 16, 1);
        assert!((ssim_pair(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let c = Image::filled(12, 12, 1, 0.3);
        assert!((ssim_pair(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim_fusion(&x, &x, &x).unwrap() - 2.0).abs() < 1e-12);
        let y = random(16, 16, 2);
        assert_eq!(ssim_pair(&x, &y).unwrap(), ssim_pair(&y, &x).unwrap());
        let s = ssim_fusion(&x, &x, &y).unwrap();
        assert!((s - (1.0 + ssim_pair(&x, &y).unwrap())).abs() < 1e-15);
        assert!(matches!(ssim_pair(&random(10, 20, 0), &random(10, 20, 1)), Err(Error::Size(_))));
    }

    #[test]
    fn ssim_small_noise_stays_high() {
        let x = random(32, 32, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy = map(&x, |v| v + rng.random_range(-0.01..0.01));
        let s = ssim_pair(&noisy, &x).unwrap();
        assert!(s > 0.9 && s < 1.0, "{s}");
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[0], w[SSIM_WINDOW * SSIM_WINDOW - 1]);
        assert!(w[60] > w[59]);
    }

    #[test]
    fn psnr_values() {
        let x = random(8, 8, 5);
        assert_eq!(psnr_fusion(&x, &x, &x).unwrap(), 100.0);
        let a = Image::filled(4, 4, 1, 0.5);
        let b = Image::filled(4, 4, 1, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr_fusion(&a, &b, &Image::filled(4, 4, 1, 0.4)).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_drops_with_noise() {
        let x = random(16, 16, 6);
        let noise: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1, 0.2] {
            let f = Image::gray(16, 16, x.data().iter().zip(&noise).map(|(v, n)| v + amp * n).collect()).unwrap();
            let p = psnr(&f, &x).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn correlation_values() {
        let x = random(8, 8, 8);
        assert!((cc_fusion(&x, &x, &x).unwrap() - 1.0).abs() < 1e-12);
        let inv = map(&x, |v| 1.0 - v);
        assert!((cc_fusion(&inv, &x, &x).unwrap() + 1.0).abs() < 1e-12);
        let y = random(8, 8, 9);
        let affine = map(&y, |v| 3.0 * v + 0.2);
        assert!((cc_fusion(&y, &x, &inv).unwrap() - cc_fusion(&affine, &x, &inv).unwrap()).abs() < 1e-12);
        let flat = Image::filled(8, 8, 1, 0.5);
        assert!(matches!(pearson(&flat, &x), Err(Error::Numeric(_))));
    }

    #[test]
    fn nabf_zero_without_added_edges() {
        let x = random(12, 12, 10);
        assert!(nabf(&x, &x, &x).unwrap() <= 1e-12);
        let (ir, vis) = (random(12, 12, 11), random(12, 12, 12));
        for w in [0.0, 0.25, 0.5, 1.0] {
            let f = Image::gray(12, 12, ir.data().iter().zip(vis.data()).map(|(a, b)| w * a + (1.0 - w) * b).collect())
                .unwrap();
            assert_eq!(nabf(&f, &ir, &vis).unwrap(), 0.0, "weight {w}");
        }
    }

    #[test]
    fn nabf_grows_with_impulse_noise() {
        let vis = map(&random(24, 24, 13), |v| 0.4 + 0.2 * v);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let spots: Vec<(usize, f64)> = (0..40).map(|_| (rng.random_range(0..576), rng.random_range(-1.0..1.0))).collect();
        let noisy = |amp: f64| {
            let mut d = vis.data().to_vec();
            for &(i, s) in &spots {
                d[i] += amp * s;
            }
            Image::gray(24, 24, d).unwrap()
        };
        let low = nabf(&noisy(0.2), &vis, &vis).unwrap();
        let high = nabf(&noisy(0.6), &vis, &vis).unwrap();
        assert!(low > 0.0 && high > low, "{low} {high}");
    }

    #[test]
    fn aggregates_and_csv() {
        let a = Aggregate::of([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.mean, 2.5);
        assert!((a.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Aggregate::of([7.0]).std, 0.0);
        assert_eq!(Aggregate::of([1.0, f64::NAN, 3.0]).mean, 2.0);

        let x = random(12, 12, 15);
        let p = evaluate_pair("b", &x, &x, &x).unwrap();
        let q = evaluate_pair("a", &x, &x, &x).unwrap();
        let report = MetricReport::new(vec![p, q]).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "pair,ssim,psnr,cc,nabf");
        assert_eq!(lines[1], "a,2,100,1,0");
        assert_eq!(lines[3], "mean±std,2±0,100±0,1±0,0±0");
        assert!(matches!(MetricReport::new(vec![]), Err(Error::Data(_))));
    }

    #[test]
    fn flat_pair_is_flagged() {
        let flat = Image::filled(12, 12, 1, 0.5);
        let p = evaluate_pair("flat", &flat, &flat, &flat).unwrap();
        assert!(p.cc.is_nan());
        let r = MetricReport::new(vec![p]).unwrap();
        assert_eq!(r.flagged, vec!["flat".to_string()]);
        assert!(r.to_csv().contains("flat,2,100,nan,0"));
    }

    #[test]
    fn significant_digit_formatting() {
        let cases = [
            (1.344, "1.344"),
            (1.0 / 3.0, "0.333333"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (0.0001234567, "0.000123457"),
            (0.00001234567, "1.23457e-05"),
            (-2.5, "-2.5"),
            (100.0, "100"),
            (9.9999996, "10"),
        ];
        for (v, s) in cases {
            assert_eq!(format_sig(v), s, "{v}");
        }
    }
}
