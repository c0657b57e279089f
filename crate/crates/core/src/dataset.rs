//! Pairing of infrared/visible source files and the prepared crop layout.
//!
//! A prepared dataset is a directory with `ir/` and `vis/` subdirectories
//! holding same-named single-channel crops `pair_<i>_<y>_<x>.png`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{crop_pairs, load_image, save_image, Image};
use crate::train::TrainPair;

pub const IR_DIR: &str = "ir";
pub const VIS_DIR: &str = "vis";

const IMAGE_EXTENSIONS: &[&str] = &["png", "bmp"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourcePair {
    pub name: String,
    pub ir: PathBuf,
    pub vis: PathBuf,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !is_image(&path) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Data(format!(
                "{} and {} share the name {stem}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Matches files of the two directories by file stem, sorted by name.
/// Files without a partner are reported together.
pub fn pair_directories(ir_dir: &Path, vis_dir: &Path) -> Result<Vec<SourcePair>> {
    let ir = list_by_stem(ir_dir)?;
    let vis = list_by_stem(vis_dir)?;
    let mut orphans: Vec<String> = ir
        .iter()
        .filter(|(k, _)| !vis.contains_key(*k))
        .chain(vis.iter().filter(|(k, _)| !ir.contains_key(*k)))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !orphans.is_empty() {
        orphans.sort();
        return Err(Error::Data(format!("unpaired files: {}", orphans.join(", "))));
    }
    if ir.is_empty() {
        return Err(Error::Data(format!(
            "no images found in {} and {}",
            ir_dir.display(),
            vis_dir.display()
        )));
    }
    Ok(ir
        .into_iter()
        .map(|(name, ir)| {
            let vis = vis[&name].clone();
            SourcePair { name, ir, vis }
        })
        .collect())
}

/// Reads a pairs list: one `ir<TAB>vis` line per pair, `#` starts a comment,
/// relative paths resolve against the list's directory.
pub fn read_pair_list(path: &Path) -> Result<Vec<SourcePair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::Data(format!(
                "{}:{}: expected `ir<TAB>vis`",
                path.display(),
                lineno + 1
            )));
        }
        let resolve = |f: &str| {
            let p = Path::new(f.trim());
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let ir = resolve(fields[0]);
        let name = ir.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        pairs.push(SourcePair {
            name,
            ir,
            vis: resolve(fields[1]),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("{} lists no pairs", path.display())));
    }
    Ok(pairs)
}

/// Single-channel view of a loaded image; colour is reduced to its luma.
pub fn to_gray(img: Image) -> Image {
    if img.channels() == 3 {
        img.luma()
    } else {
        img
    }
}

pub fn crop_name(pair_index: usize, y: usize, x: usize) -> String {
    format!("pair_{pair_index}_{y}_{x}.png")
}

/// Cuts every pair into `size`×`size` windows at `stride` and writes them
/// under `out/ir` and `out/vis`. Returns the written file names in order.
pub fn prepare_crops(pairs: &[SourcePair], out: &Path, size: usize, stride: usize) -> Result<Vec<String>> {
    let (ir_out, vis_out) = (out.join(IR_DIR), out.join(VIS_DIR));
    for d in [&ir_out, &vis_out] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut names = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let ir = to_gray(load_image(&pair.ir)?);
        let vis = to_gray(load_image(&pair.vis)?);
        if ir.dims() != vis.dims() {
            return Err(Error::Data(format!(
                "{}: infrared {:?} and visible {:?} differ in size",
                pair.name,
                ir.dims(),
                vis.dims()
            )));
        }
        for c in crop_pairs(&ir, &vis, size, stride)? {
            let name = crop_name(i, c.y, c.x);
            save_image(&c.ir, ir_out.join(&name))?;
            save_image(&c.vis, vis_out.join(&name))?;
            names.push(name);
        }
    }
    Ok(names)
}

/// Loads a prepared crop directory as training pairs.
pub fn load_training_set(dir: &Path) -> Result<Vec<TrainPair>> {
    pair_directories(&dir.join(IR_DIR), &dir.join(VIS_DIR))?
        .into_iter()
        .map(|p| {
            Ok(TrainPair {
                ir: to_gray(load_image(&p.ir)?),
                vis: to_gray(load_image(&p.vis)?),
                name: p.name,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_gray(path: &Path, h: usize, w: usize) {
        let data = (0..h * w).map(|i| (i % 7) as f64 / 7.0).collect();
        save_image(&Image::gray(h, w, data).unwrap(), path).unwrap();
    }

    #[test]
    fn pairs_by_stem_and_reports_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        fs::create_dir_all(&a).unwrap();
        fs::create_dir_all(&b).unwrap();
        write_gray(&a.join("x.png"), 2, 2);
        write_gray(&b.join("x.bmp"), 2, 2);
        fs::write(a.join("notes.txt"), "ignored").unwrap();
        let pairs = pair_directories(&a, &b).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].name, "x");

        write_gray(&a.join("only_ir.png"), 2, 2);
        write_gray(&b.join("only_vis.png"), 2, 2);
        let err = pair_directories(&a, &b).unwrap_err().to_string();
        assert!(err.contains("only_ir.png") && err.contains("only_vis.png"), "{err}");
    }

    #[test]
    fn empty_directories_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(pair_directories(dir.path(), dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn pair_list_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let list = dir.path().join("pairs.tsv");
        fs::write(&list, "# ir\tvis\nir/1.png\tvis/1.png\n\n/abs/2.png\tvis/2.png\n").unwrap();
        let pairs = read_pair_list(&list).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].ir, dir.path().join("ir/1.png"));
        assert_eq!(pairs[1].ir, PathBuf::from("/abs/2.png"));
        assert_eq!(pairs[0].name, "1");

        fs::write(&list, "only-one-column\n").unwrap();
        assert!(matches!(read_pair_list(&list), Err(Error::Data(_))));
    }

    #[test]
    fn prepare_writes_named_crops() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b, out) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("out"));
        fs::create_dir_all(&a).unwrap();
        fs::create_dir_all(&b).unwrap();
        write_gray(&a.join("s.png"), 104, 64);
        write_gray(&b.join("s.png"), 104, 64);
        let pairs = pair_directories(&a, &b).unwrap();
        let names = prepare_crops(&pairs, &out, 64, 20).unwrap();
        assert_eq!(names, vec!["pair_0_0_0.png", "pair_0_20_0.png", "pair_0_40_0.png"]);
        let set = load_training_set(&out).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set[0].ir.dims(), (64, 64));
    }

    #[test]
    fn prepare_rejects_misaligned_sources() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        fs::create_dir_all(&a).unwrap();
        fs::create_dir_all(&b).unwrap();
        write_gray(&a.join("s.png"), 64, 64);
        write_gray(&b.join("s.png"), 64, 70);
        let pairs = pair_directories(&a, &b).unwrap();
        assert!(matches!(prepare_crops(&pairs, &dir.path().join("o"), 64, 20), Err(Error::Data(_))));
    }
}
