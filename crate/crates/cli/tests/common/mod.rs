#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use graphfuse::image::{save_image, Image};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_graphfuse"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Warm blob on a cool background (infrared) and a textured ramp (visible).
pub fn scene(h: usize, w: usize, seed: usize) -> (Image, Image) {
    let mut ir = vec![0.0; h * w];
    let mut vis = vec![0.0; h * w];
    let cy = 0.3 + 0.1 * (seed % 5) as f64;
    let cx = 0.35 + 0.07 * (seed % 4) as f64;
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
            let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
            ir[y * w + x] = 0.15 + 0.8 * (-d2 / 0.02).exp();
            vis[y * w + x] = 0.2 + 0.5 * fx + 0.2 * ((x / 4 + y / 4 + seed) % 2) as f64;
        }
    }
    (Image::gray(h, w, ir).unwrap(), Image::gray(h, w, vis).unwrap())
}

/// Writes `n` scene pairs as `ir/<name>.png`, `vis/<name>.png` under `root`.
pub fn write_sources(root: &Path, n: usize, h: usize, w: usize) -> (PathBuf, PathBuf) {
    let (ir_dir, vis_dir) = (root.join("ir"), root.join("vis"));
    std::fs::create_dir_all(&ir_dir).unwrap();
    std::fs::create_dir_all(&vis_dir).unwrap();
    for i in 0..n {
        let (ir, vis) = scene(h, w, i);
        save_image(&ir, ir_dir.join(format!("scene{i}.png"))).unwrap();
        save_image(&vis, vis_dir.join(format!("scene{i}.png"))).unwrap();
    }
    (ir_dir, vis_dir)
}

/// A network small enough for command-level tests.
pub const TINY_CONFIG: &str = "feature_dim = 2\nffn_ratio = 1\nintra_blocks = 2\ninter_blocks = 2\nks = [3, 4]\nds = [1, 2]\nepochs = 2\n";
