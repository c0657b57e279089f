//! Mini-batch training loop with per-epoch checkpoints and a loss history.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{save_image, Image};
use crate::layers::{zero_like, ParamTensors};
use crate::loss::{total_loss_with_grad, LossBreakdown, DEFAULT_LAMBDA};
use crate::net::{fuse_backward, fuse_traced, NetworkConfig, NetworkParams};
use crate::optim::{adam_step, clip_global_norm, lr_at, AdamConfig, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    pub crop_size: usize,
    pub crop_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            decay: 0.95,
            batch: 4,
            epochs: 5,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            adam: AdamConfig::default(),
            max_steps: None,
            clip_norm: None,
            crop_size: 64,
            crop_stride: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.crop_size == 0 || self.crop_stride == 0 {
            return Err(Error::Config("crop size and stride must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.lr0, self.decay)
    }
}

/// One aligned infrared/visible training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub name: String,
    pub ir: Image,
    pub vis: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const HISTORY_HEADER: &str = "step,epoch,lr,l_ir,l_vi,total";

pub fn history_csv(history: &[StepRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        // {:e} prints the shortest representation that round-trips
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{:e},{:e}",
            r.step, r.epoch, r.lr, r.loss.l_ir, r.loss.l_vi, r.loss.total
        );
    }
    s
}

/// Where training writes its artifacts and what it resumes from.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory receiving `checkpoint.bin` after every epoch and a dump on NaN.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub optimizer: OptimizerState,
    pub history: Vec<StepRecord>,
    pub steps: usize,
    pub epochs_completed: usize,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &NetworkConfig) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            epoch: self.epochs_completed as u64,
            step: self.steps as u64,
        }
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Visiting order of the dataset in `epoch`, a pure function of seed and epoch
/// so a resumed run sees the same batches as an unbroken one.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Mean loss and mean gradient over one batch.
pub fn batch_gradient(
    batch: &[&TrainPair],
    params: &NetworkParams,
    cfg: &NetworkConfig,
    lambda: f64,
) -> Result<(LossBreakdown, NetworkParams)> {
    let mut grads = zero_like(params);
    let (mut l_ir, mut l_vi) = (0.0, 0.0);
    let scale = 1.0 / batch.len() as f64;
    for pair in batch {
        let (fused, trace) = fuse_traced(&pair.ir, &pair.vis, params, cfg, None)?;
        let (lb, d_fused) = total_loss_with_grad(&fused, &pair.ir, &pair.vis, lambda)?;
        if !lb.total.is_finite() {
            return Err(Error::numeric(format!("loss is {} on {}", lb.total, pair.name)));
        }
        let g = fuse_backward(params, cfg, &trace, &d_fused)?;
        for ((_, acc), (_, gi)) in grads.named_tensors_mut().into_iter().zip(g.named_tensors()) {
            let mut gi = gi.clone();
            gi.scale(scale);
            acc.add_assign(&gi);
        }
        l_ir += lb.l_ir * scale;
        l_vi += lb.l_vi * scale;
    }
    Ok((LossBreakdown::new(l_ir, l_vi, lambda), grads))
}

fn dump_batch(dir: &Path, step: usize, batch: &[&TrainPair], err: &Error) -> PathBuf {
    let dump = dir.join(format!("nan_step_{step}"));
    let _ = fs::create_dir_all(&dump);
    let mut note = format!("step {step}: {err}\n");
    for (i, p) in batch.iter().enumerate() {
        let _ = writeln!(note, "{i}: {}", p.name);
        let _ = save_image(&p.ir, dump.join(format!("{i}_ir.png")));
        let _ = save_image(&p.vis, dump.join(format!("{i}_vis.png")));
    }
    let _ = fs::write(dump.join("batch.txt"), note);
    dump
}

/// Trains from a seeded initialisation, or continues `opts.resume`.
pub fn train(
    data: &[TrainPair],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for p in data {
        if p.ir.dims() != p.vis.dims() || p.ir.channels() != 1 || p.vis.channels() != 1 {
            return Err(Error::Data(format!("{}: pair is not an aligned single-channel crop", p.name)));
        }
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let (mut params, mut opt, mut step) = match &opts.resume {
        Some(ck) => {
            if &ck.config != net_cfg {
                return Err(Error::Checkpoint("resume checkpoint was trained with a different architecture".into()));
            }
            let opt = ck
                .optimizer
                .clone()
                .ok_or_else(|| Error::Checkpoint("resume checkpoint has no optimizer state".into()))?;
            (ck.params.clone(), opt, ck.step as usize)
        }
        None => {
            let p = NetworkParams::init(net_cfg, cfg.seed)?;
            let o = OptimizerState::new(&p);
            (p, o, 0)
        }
    };

    let spe = steps_per_epoch(data.len(), cfg.batch);
    let limit = cfg.max_steps.unwrap_or(usize::MAX).min(cfg.epochs.saturating_mul(spe));
    let mut history = Vec::new();
    let mut epochs_completed = step / spe;

    while step < limit {
        let epoch = step / spe;
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(data.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch).skip(step % spe) {
            if step >= limit {
                break;
            }
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &data[i]).collect();
            let result = batch_gradient(&batch, &params, net_cfg, cfg.lambda).and_then(|(lb, mut g)| {
                if let Some(c) = cfg.clip_norm {
                    clip_global_norm(&mut g, c);
                }
                adam_step(&mut params, &g, &mut opt, lr, &cfg.adam)?;
                Ok(lb)
            });
            let lb = match result {
                Ok(lb) => lb,
                Err(e @ Error::Numeric(_)) => {
                    let msg = match &opts.out_dir {
                        Some(dir) => {
                            let at = dump_batch(dir, step + 1, &batch, &e);
                            format!("{e}; batch dumped to {}", at.display())
                        }
                        None => e.to_string(),
                    };
                    return Err(Error::Numeric(msg));
                }
                Err(e) => return Err(e),
            };
            step += 1;
            history.push(StepRecord {
                step,
                epoch,
                lr,
                loss: lb,
            });
        }
        if step % spe == 0 {
            epochs_completed = step / spe;
        }
        if let Some(dir) = &opts.out_dir {
            let ck = Checkpoint {
                config: net_cfg.clone(),
                params: params.clone(),
                optimizer: Some(opt.clone()),
                epoch: epochs_completed as u64,
                step: step as u64,
            };
            ck.save(dir.join(CHECKPOINT_FILE))?;
        }
    }

    Ok(TrainOutcome {
        params,
        optimizer: opt,
        history,
        steps: step,
        epochs_completed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            feature_dim: 2,
            ffn_ratio: 1,
            intra_blocks: 1,
            inter_blocks: 1,
            schedule: crate::graph::KdSchedule::new(&[3], &[1]).unwrap(),
            ..NetworkConfig::default()
        }
    }

    fn pairs(n: usize, side: usize, seed: u64) -> Vec<TrainPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut img = || Image::gray(side, side, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap();
                TrainPair {
                    name: format!("p{i}"),
                    ir: img(),
                    vis: img(),
                }
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { decay: 0.0, ..Default::default() },
            TrainConfig { decay: 1.5, ..Default::default() },
            TrainConfig { batch: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 4, 2);
        assert_eq!(a, epoch_order(10, 4, 2));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_ne!(epoch_order(10, 4, 2), epoch_order(10, 4, 3));
    }

    #[test]
    fn history_counts_steps_and_follows_the_schedule() {
        let data = pairs(5, 4, 1);
        let cfg = TrainConfig {
            batch: 2,
            epochs: 2,
            lr0: 1e-3,
            decay: 0.5,
            ..Default::default()
        };
        let out = train(&data, &tiny_net(), &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(out.steps, 6);
        assert_eq!(out.epochs_completed, 2);
        assert_eq!(out.optimizer.t, 6);
        let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 5e-4]);
        let csv = history_csv(&out.history);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with(HISTORY_HEADER));
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let data = pairs(3, 4, 2);
        let cfg = TrainConfig {
            batch: 2,
            epochs: 2,
            seed: 11,
            ..Default::default()
        };
        let a = train(&data, &tiny_net(), &cfg, &TrainOptions::default()).unwrap();
        let b = train(&data, &tiny_net(), &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn resume_replays_an_unbroken_run() {
        let data = pairs(3, 4, 3);
        let net = tiny_net();
        let full_cfg = TrainConfig {
            batch: 2,
            epochs: 3,
            lr0: 1e-2,
            decay: 0.9,
            ..Default::default()
        };
        let full = train(&data, &net, &full_cfg, &TrainOptions::default()).unwrap();

        // stop mid-epoch, then continue from the saved state
        let first = train(
            &data,
            &net,
            &TrainConfig {
                max_steps: Some(3),
                ..full_cfg.clone()
            },
            &TrainOptions::default(),
        )
        .unwrap();
        let bytes = first.checkpoint(&net).to_bytes().unwrap();
        let resumed = train(
            &data,
            &net,
            &full_cfg,
            &TrainOptions {
                out_dir: None,
                resume: Some(Checkpoint::from_bytes(&bytes).unwrap()),
            },
        )
        .unwrap();
        let mut joined = first.history.clone();
        joined.extend(resumed.history);
        assert_eq!(history_csv(&joined), history_csv(&full.history));
        assert_eq!(resumed.params, full.params);
    }

    #[test]
    fn identical_modalities_are_fitted() {
        let mut data = pairs(1, 4, 4);
        data[0].vis = data[0].ir.clone();
        let cfg = TrainConfig {
            batch: 1,
            epochs: 150,
            lr0: 1e-2,
            decay: 1.0,
            ..Default::default()
        };
        let out = train(&data, &tiny_net(), &cfg, &TrainOptions::default()).unwrap();
        let first = out.history[0].loss.total;
        let last = out.history.last().unwrap().loss.total;
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn writes_checkpoint_each_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let data = pairs(2, 4, 5);
        let cfg = TrainConfig {
            batch: 2,
            epochs: 2,
            ..Default::default()
        };
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: None,
        };
        let out = train(&data, &tiny_net(), &cfg, &opts).unwrap();
        let ck = Checkpoint::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.params, out.params);
        assert_eq!(ck.step, 2);
        assert_eq!(ck.epoch, 2);
    }

    #[test]
    fn non_finite_loss_dumps_the_batch() {
        let dir = tempfile::tempdir().unwrap();
        let data = pairs(2, 4, 6);
        let net = tiny_net();
        let mut poisoned = NetworkParams::init(&net, 0).unwrap();
        poisoned.rho.bias.fill(f64::INFINITY);
        let resume = Checkpoint {
            config: net.clone(),
            optimizer: Some(OptimizerState::new(&poisoned)),
            params: poisoned,
            epoch: 0,
            step: 0,
        };
        let err = train(
            &data,
            &net,
            &TrainConfig { batch: 2, epochs: 1, ..Default::default() },
            &TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                resume: Some(resume),
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert!(dir.path().join("nan_step_1/batch.txt").exists());
        assert!(dir.path().join("nan_step_1/0_ir.png").exists());
    }

    #[test]
    fn rejects_empty_and_misaligned_data() {
        let cfg = TrainConfig::default();
        assert!(matches!(train(&[], &tiny_net(), &cfg, &TrainOptions::default()), Err(Error::Data(_))));
        let mut data = pairs(1, 4, 7);
        data[0].vis = Image::filled(4, 5, 1, 0.0);
        assert!(matches!(train(&data, &tiny_net(), &cfg, &TrainOptions::default()), Err(Error::Data(_))));
    }
}
