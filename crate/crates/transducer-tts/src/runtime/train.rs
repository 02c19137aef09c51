//! Joint training step: RNNT loss on the first codebook plus cross-entropy
//! on one sampled residual level, mixed as (1−α)·λ_RNNT + α·λ_CE, with the
//! alignment for the residual head extracted from the live RNNT lattice.
//!
//! Batch composition and residual-level choices are derived from
//! `(seed, step)` alone, so a resumed run replays the exact trajectory of an
//! uninterrupted one.

use std::path::Path;

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::codec::{CodeGrid, FeatureSeq};
use crate::error::{Error, Result};
use crate::io::{read_codes, read_features, read_manifest};
use crate::model::TtsModel;
use crate::numerics::optim::{adamw_step, lr_at, AdamWState, LrSchedule};
use crate::numerics::tape::Tape;
use crate::rnnt::{best_path, rnnt_grad, rnnt_loss, JointLogProbGrid};
use crate::text::{bpe_encode, BpeVocab};
use crate::util::{mix_seed, rng_for};
use rand::Rng;

const STREAM_BATCH: u64 = 0x7EA1_0001;
const STREAM_LEVELS: u64 = 0x7EA1_0002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Loss mixing weight: λ_total = (1−α)·λ_RNNT + α·λ_CE.
    pub alpha: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub schedule: LrSchedule,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Checkpoint every this many steps (and always at the final step).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.4,
            batch_size: 8,
            total_steps: 5000,
            schedule: LrSchedule {
                warmup_steps: 200,
                max_lr: 1e-3,
                total_steps: 5000,
                min_lr: 1e-4,
            },
            grad_clip: 1.0,
            weight_decay: 0.01,
            seed: 42,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip {} not positive", self.grad_clip)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight_decay {} negative", self.weight_decay)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.schedule.validate()
    }
}

/// One utterance ready for training.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub tokens: Vec<u32>,
    pub grid: CodeGrid,
    pub reference: FeatureSeq,
}

/// Load every manifest entry: tokenize its text, read its code grid and the
/// speaker's reference features. Paths resolve relative to the manifest.
pub fn load_training_items(manifest: &Path, vocab: &BpeVocab) -> Result<Vec<TrainItem>> {
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Input(format!("manifest {} has no entries", manifest.display())));
    }
    let mut items = Vec::with_capacity(entries.len());
    for e in entries {
        let tokens = bpe_encode(vocab, &e.text)?;
        let grid = read_codes(&dir.join(&e.codes))?;
        let reference = read_features(&dir.join(&e.reference))?;
        items.push(TrainItem { id: e.id, tokens: tokens.ids, grid, reference });
    }
    Ok(items)
}

/// Per-step loss report. `total` is reconstructed from the reported means
/// with the exact mixing formula, so the linearity invariant holds bitwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub rnnt: f64,
    pub ce: f64,
    pub total: f64,
    /// Residual level of the first batch item (each item samples its own).
    pub k: usize,
    pub lr: f64,
}

pub fn mix_losses(alpha: f64, rnnt: f64, ce: f64) -> f64 {
    (1.0 - alpha) * rnnt + alpha * ce
}

/// Batch membership for a step: uniform with replacement, a pure function of
/// `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, corpus_len: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = rng_for(mix_seed(seed, step), STREAM_BATCH);
    (0..batch_size).map(|_| rng.gen_range(0..corpus_len)).collect()
}

/// Residual level per batch item: uniform over 1..K−1, a pure function of
/// `(seed, step)`.
pub fn residual_levels(seed: u64, step: u64, batch_size: usize, num_codebooks: usize) -> Vec<usize> {
    let mut rng = rng_for(mix_seed(seed, step), STREAM_LEVELS);
    (0..batch_size).map(|_| rng.gen_range(1..num_codebooks)).collect()
}

/// One optimizer step over a batch. `step` is the 1-based index of this step;
/// it drives the learning rate and the per-item residual levels.
pub fn train_step(
    model: &mut TtsModel,
    opt: &mut AdamWState,
    batch: &[&TrainItem],
    cfg: &TrainConfig,
    step: u64,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Input("train_step needs a non-empty batch".into()));
    }
    let big_k = model.config.num_codebooks;
    let levels = residual_levels(cfg.seed, step, batch.len(), big_k);
    let alpha = cfg.alpha;

    model.params.zero_grads();
    let mut rnnt_sum = 0.0;
    let mut ce_sum = 0.0;
    for (item, &k) in batch.iter().zip(&levels) {
        if item.grid.k() != big_k {
            return Err(Error::Shape {
                op: "train_step",
                detail: format!(
                    "item {} has {} codebooks, model expects {big_k}",
                    item.id,
                    item.grid.k()
                ),
            });
        }
        let first: Vec<u16> = item.grid.codes.column(0).to_vec();
        let target: Vec<usize> = first.iter().map(|&c| c as usize).collect();

        let mut t = Tape::new(&model.params);
        let spk = model.gst_embed(&mut t, &item.reference)?;
        let enc = model.encode_text(&mut t, &item.tokens, spk)?;
        let pred = model.predict_codes(&mut t, &first)?;
        let grid_node = model.joint_grid(&mut t, enc.node, pred.node);
        let logits = t.value(grid_node).to_owned();
        // catch diverged parameters here: downstream the lattice would only
        // report a misleading "no path" validation error (exit 2, not 4)
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step, rnnt: f64::NAN, ce: f64::NAN });
        }
        let grid = JointLogProbGrid::from_logits(&logits, enc.n, item.grid.t())?;
        let (rnnt_v, lattice) = rnnt_loss(&grid, &target)?;
        if !rnnt_v.is_finite() {
            return Err(Error::NonFiniteLoss { step, rnnt: rnnt_v, ce: f64::NAN });
        }
        let dlogits = rnnt_grad(&grid, &target, &lattice)?;
        let rnnt_node = t.custom_scalar(grid_node, rnnt_v, dlogits);

        // alignment from the live lattice, then teacher-forced level k
        let path = best_path(&grid, &target)?;
        let aligned = t.gather(enc.node, &path.frame_to_pos);
        let below = item.grid.codes.slice(s![.., ..k]);
        let rch_logits = model.rch_forward(&mut t, &below, aligned, k, spk)?;
        let targets_k = item.grid.column(k);
        let ce_node = t.cross_entropy_mean(rch_logits, &targets_k);
        let ce_v = t.scalar(ce_node);
        if !ce_v.is_finite() {
            return Err(Error::NonFiniteLoss { step, rnnt: rnnt_v, ce: ce_v });
        }

        let weighted_rnnt = t.affine_const(rnnt_node, 1.0 - alpha, 0.0);
        let weighted_ce = t.affine_const(ce_node, alpha, 0.0);
        let total_node = t.add(weighted_rnnt, weighted_ce);
        let grads = t.backward(total_node);
        drop(t);
        model.params.accumulate(grads.by_param);
        rnnt_sum += rnnt_v;
        ce_sum += ce_v;
    }

    model.params.scale_grads(1.0 / batch.len() as f64);
    model.params.clip_grad_norm(cfg.grad_clip);
    let lr = lr_at(&cfg.schedule, step);
    adamw_step(&mut model.params, opt, lr)?;

    let rnnt = rnnt_sum / batch.len() as f64;
    let ce = ce_sum / batch.len() as f64;
    Ok(LossBreakdown { rnnt, ce, total: mix_losses(alpha, rnnt, ce), k: levels[0], lr })
}

/// Run steps `start_step+1 ..= cfg.total_steps`, invoking `on_step` after
/// each (for logging and checkpointing). `start_step` is 0 for a fresh run
/// or the restored step counter when resuming.
pub fn train_loop(
    model: &mut TtsModel,
    opt: &mut AdamWState,
    items: &[TrainItem],
    cfg: &TrainConfig,
    start_step: u64,
    mut on_step: impl FnMut(u64, &LossBreakdown) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    for step in start_step + 1..=cfg.total_steps {
        let idx = batch_indices(cfg.seed, step, items.len(), cfg.batch_size);
        let batch: Vec<&TrainItem> = idx.iter().map(|&i| &items[i]).collect();
        let breakdown = train_step(model, opt, &batch, cfg, step)?;
        on_step(step, &breakdown)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GstConfig, ModelConfig, StackConfig};
    use ndarray::Array2;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: StackConfig { layers: 1, dim: 8, heads: 2, ff_dim: 16 },
            predictor: StackConfig { layers: 1, dim: 6, heads: 2, ff_dim: 12 },
            joint_dim: 8,
            rch: StackConfig { layers: 1, dim: 8, heads: 2, ff_dim: 16 },
            gst: GstConfig { num_tokens: 3, token_dim: 8, conv_channels: vec![4], heads: 2 },
            text_vocab: 11,
            code_vocab: 5,
            num_codebooks: 3,
            feature_dim: 4,
            max_symbols_per_step: 8,
            seed: 17,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            total_steps: 20,
            schedule: LrSchedule { warmup_steps: 2, max_lr: 1e-3, total_steps: 20, min_lr: 0.0 },
            weight_decay: 0.0,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn tiny_items(n: usize) -> Vec<TrainItem> {
        let mut rng = rng_for(91, 0);
        (0..n)
            .map(|u| {
                let n_tok = rng.gen_range(2..5usize);
                let t = rng.gen_range(2..6usize);
                let tokens = (0..n_tok).map(|_| rng.gen_range(1..11u32)).collect();
                let codes = Array2::from_shape_fn((t, 3), |_| rng.gen_range(0..5u16));
                let reference = FeatureSeq {
                    data: Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0)),
                };
                TrainItem {
                    id: format!("it{u}"),
                    tokens,
                    grid: CodeGrid::new(codes).unwrap(),
                    reference,
                }
            })
            .collect()
    }

    #[test]
    fn mixing_formula_hand_case() {
        assert_eq!(mix_losses(0.4, 2.0, 1.0), 1.6);
        assert_eq!(mix_losses(0.0, 2.0, 1.0), 2.0);
        assert_eq!(mix_losses(1.0, 2.0, 1.0), 1.0);
    }

    #[test]
    fn batch_and_level_sampling_are_step_pure() {
        assert_eq!(batch_indices(5, 3, 10, 4), batch_indices(5, 3, 10, 4));
        assert_ne!(batch_indices(5, 3, 1000, 8), batch_indices(5, 4, 1000, 8));
        for step in 1..50 {
            for k in residual_levels(5, step, 16, 4) {
                assert!((1..4).contains(&k));
            }
        }
        // all residual levels get sampled eventually
        let mut seen = [false; 4];
        for step in 1..200 {
            for k in residual_levels(9, step, 4, 4) {
                seen[k] = true;
            }
        }
        assert!(seen[1] && seen[2] && seen[3]);
    }

    #[test]
    fn train_step_reports_exact_mixing_and_is_deterministic() {
        let items = tiny_items(4);
        let cfg = tiny_cfg();
        let run = || {
            let mut m = TtsModel::new(tiny_config()).unwrap();
            let mut opt = AdamWState::new(&m.params, cfg.weight_decay);
            let batch: Vec<&TrainItem> = items.iter().take(2).collect();
            let br = train_step(&mut m, &mut opt, &batch, &cfg, 1).unwrap();
            (br, m)
        };
        let (br1, m1) = run();
        let (br2, m2) = run();
        assert_eq!(br1, br2);
        assert_eq!(br1.total, mix_losses(cfg.alpha, br1.rnnt, br1.ce));
        assert!(br1.rnnt > 0.0 && br1.ce > 0.0);
        // V_c=5: untrained CE starts at ln 5 (zero-init head → uniform)
        assert!((br1.ce - 5.0f64.ln()).abs() < 1e-9, "ce {} vs ln5", br1.ce);
        for id in m1.params.ids() {
            assert_eq!(m1.params.value(id), m2.params.value(id), "{}", m1.params.name(id));
        }
    }

    #[test]
    fn alpha_partitions_gradient_flow() {
        let items = tiny_items(2);
        let batch: Vec<&TrainItem> = items.iter().collect();
        // α=0: residual head untouched (weight decay off). Randomized output
        // heads, because with the zero-init ones nothing reaches the encoder
        // on the very first step (dL/d_enc goes through joint.out.w == 0).
        let mut cfg = tiny_cfg();
        cfg.alpha = 0.0;
        let mut m = TtsModel::new_randomized_for_tests(tiny_config(), 3);
        let before: Vec<_> = m.params.ids().map(|id| m.params.value(id).clone()).collect();
        let mut opt = AdamWState::new(&m.params, 0.0);
        train_step(&mut m, &mut opt, &batch, &cfg, 1).unwrap();
        let mut enc_moved = false;
        for id in m.params.ids() {
            let name = m.params.name(id).to_string();
            let same = m.params.value(id) == &before[id.index()];
            if name.starts_with("rch.") {
                assert!(same, "α=0 must freeze {name}");
            }
            if name.starts_with("enc.") && !same {
                enc_moved = true;
            }
        }
        assert!(enc_moved, "encoder should still learn at α=0");

        // α=1: transducer-only parameters untouched
        let mut cfg = tiny_cfg();
        cfg.alpha = 1.0;
        let mut m = TtsModel::new_randomized_for_tests(tiny_config(), 3);
        let before: Vec<_> = m.params.ids().map(|id| m.params.value(id).clone()).collect();
        let mut opt = AdamWState::new(&m.params, 0.0);
        train_step(&mut m, &mut opt, &batch, &cfg, 1).unwrap();
        let mut rch_moved = false;
        for id in m.params.ids() {
            let name = m.params.name(id).to_string();
            let same = m.params.value(id) == &before[id.index()];
            if name.starts_with("joint.") || name.starts_with("pred.") {
                assert!(same, "α=1 must freeze {name}");
            }
            if name.starts_with("rch.") && !same {
                rch_moved = true;
            }
        }
        assert!(rch_moved, "residual head should learn at α=1");
    }

    #[test]
    fn twenty_straight_equals_ten_plus_ten() {
        let items = tiny_items(5);
        let cfg = tiny_cfg();
        let fresh = || {
            let m = TtsModel::new(tiny_config()).unwrap();
            let opt = AdamWState::new(&m.params, cfg.weight_decay);
            (m, opt)
        };
        let (mut m_a, mut o_a) = fresh();
        train_loop(&mut m_a, &mut o_a, &items, &cfg, 0, |_, _| Ok(())).unwrap();

        let (mut m_b, mut o_b) = fresh();
        let mut cfg10 = cfg.clone();
        cfg10.total_steps = 10;
        train_loop(&mut m_b, &mut o_b, &items, &cfg10, 0, |_, _| Ok(())).unwrap();
        assert_eq!(o_b.step, 10);
        train_loop(&mut m_b, &mut o_b, &items, &cfg, 10, |_, _| Ok(())).unwrap();
        assert_eq!(o_a.step, o_b.step);
        for id in m_a.params.ids() {
            assert_eq!(m_a.params.value(id), m_b.params.value(id), "{}", m_a.params.name(id));
        }
        for i in 0..o_a.m.len() {
            assert_eq!(o_a.m[i], o_b.m[i]);
            assert_eq!(o_a.v[i], o_b.v[i]);
        }
    }

    #[test]
    fn training_reduces_loss_on_fixed_batch() {
        let items = tiny_items(2);
        let batch: Vec<&TrainItem> = items.iter().collect();
        let mut cfg = tiny_cfg();
        cfg.total_steps = 60;
        cfg.schedule =
            LrSchedule { warmup_steps: 5, max_lr: 5e-3, total_steps: 60, min_lr: 5e-4 };
        let mut m = TtsModel::new(tiny_config()).unwrap();
        let mut opt = AdamWState::new(&m.params, cfg.weight_decay);
        let first = train_step(&mut m, &mut opt, &batch, &cfg, 1).unwrap();
        let mut last = first;
        for step in 2..=60 {
            last = train_step(&mut m, &mut opt, &batch, &cfg, step).unwrap();
        }
        assert!(
            last.total < 0.6 * first.total,
            "no progress: first {} last {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn nonfinite_parameters_surface_as_loss_error() {
        let items = tiny_items(1);
        let batch: Vec<&TrainItem> = items.iter().collect();
        let cfg = tiny_cfg();
        let mut m = TtsModel::new(tiny_config()).unwrap();
        let id = m.params.lookup("joint.out.b").unwrap();
        m.params.value_mut(id)[[0, 0]] = f64::NAN;
        let mut opt = AdamWState::new(&m.params, 0.0);
        let err = train_step(&mut m, &mut opt, &batch, &cfg, 7).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, .. } => assert_eq!(step, 7),
            other => panic!("expected NonFiniteLoss, got {other}"),
        }
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = TrainConfig::default();
        c.alpha = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.grad_clip = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.schedule.warmup_steps = c.schedule.total_steps + 1;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
