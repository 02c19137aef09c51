//! Label-looping transducer decoding with nucleus sampling, greedy residual
//! levels, and the full text→features synthesis pipeline.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{rvq_decode, CodeGrid, Codebooks, FeatureSeq};
use crate::error::{Error, Result};
use crate::model::TtsModel;
use crate::numerics::tape::Tape;
use crate::rnnt::AlignmentPath;
use crate::text::{bpe_encode, BpeVocab};
use crate::util::rng_for;

pub const DECODE_STREAM: u64 = 0xDEC0_DE01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Nucleus mass for first-codebook sampling.
    pub p: f64,
    /// Emission cap per text position; forces a blank when reached.
    pub max_symbols_per_step: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { p: 0.95, max_symbols_per_step: 32, temperature: 1.0, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("nucleus p {} outside (0, 1]", self.p)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} not positive", self.temperature)));
        }
        if self.max_symbols_per_step == 0 {
            return Err(Error::Config("max_symbols_per_step must be positive".into()));
        }
        Ok(())
    }
}

/// Top-p sample from a log-distribution: apply temperature, keep the smallest
/// descending-probability prefix with cumulative mass ≥ p, renormalize, draw.
/// Any p at or below the top probability reduces to argmax.
pub fn nucleus_sample<R: Rng>(
    log_probs: &ArrayView1<f64>,
    p: f64,
    temperature: f64,
    rng: &mut R,
) -> usize {
    let scaled: Array1<f64> = log_probs.mapv(|v| v / temperature);
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scaled.iter().map(|v| (v - max).exp()).sum();
    let probs: Vec<f64> = scaled.iter().map(|v| (v - max).exp() / z).collect();

    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut keep = order.len();
    let mut cum = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        cum += probs[idx];
        if cum >= p {
            keep = rank + 1;
            break;
        }
    }
    let nucleus = &order[..keep];
    let mass: f64 = nucleus.iter().map(|&i| probs[i]).sum();
    let draw: f64 = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    for &i in nucleus {
        acc += probs[i];
        if draw < acc {
            return i;
        }
    }
    nucleus[nucleus.len() - 1]
}

#[derive(Debug, Clone)]
pub struct FirstCodebookDecode {
    pub codes: Vec<u16>,
    pub path: AlignmentPath,
}

/// Label-looping decode over the encoder rows: for each text position, sample
/// symbols from the joint until ⟨blank⟩ (or the per-position cap forces one),
/// advancing the cached predictor on every emission.
pub fn decode_first_codebook<R: Rng>(
    model: &TtsModel,
    encoder: &Array2<f64>,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<FirstCodebookDecode> {
    cfg.validate()?;
    let n = encoder.nrows();
    if n == 0 {
        return Err(Error::Input("decode needs at least one encoder position".into()));
    }
    let blank = model.config.code_vocab;
    let mut state = model.predictor_state();
    let mut p_row = model.predict_step(&mut state, None)?;
    let mut codes: Vec<u16> = Vec::new();
    let mut path = String::new();
    for i in 0..n {
        let mut emitted = 0;
        loop {
            if emitted >= cfg.max_symbols_per_step {
                path.push('b');
                break;
            }
            let lp = model.joint_single(&encoder.row(i), &p_row.row(0));
            let choice = nucleus_sample(&lp.view(), cfg.p, cfg.temperature, rng);
            if choice == blank {
                path.push('b');
                break;
            }
            path.push('e');
            codes.push(choice as u16);
            emitted += 1;
            p_row = model.predict_step(&mut state, Some(choice as u16))?;
        }
    }
    Ok(FirstCodebookDecode { codes, path: AlignmentPath::from_path(path)? })
}

/// Fill codebooks 1..K−1 greedily, level by level, reusing the alignment's
/// frame→text map to pick encoder rows. T=0 yields an empty grid untouched.
pub fn decode_residual(
    model: &TtsModel,
    codes0: &[u16],
    path: &AlignmentPath,
    encoder: &Array2<f64>,
    speaker: &ArrayView1<f64>,
) -> Result<CodeGrid> {
    let big_k = model.config.num_codebooks;
    let t_frames = codes0.len();
    if path.frame_to_pos.len() != t_frames {
        return Err(Error::Shape {
            op: "decode_residual",
            detail: format!(
                "alignment covers {} frames, codes cover {t_frames}",
                path.frame_to_pos.len()
            ),
        });
    }
    if t_frames == 0 {
        return Ok(CodeGrid { codes: Array2::zeros((0, big_k)) });
    }
    let mut grid = Array2::<u16>::zeros((t_frames, big_k));
    for (j, &c) in codes0.iter().enumerate() {
        grid[[j, 0]] = c;
    }
    let aligned_rows = {
        let mut rows = Array2::zeros((t_frames, encoder.ncols()));
        for (j, &pos) in path.frame_to_pos.iter().enumerate() {
            if pos >= encoder.nrows() {
                return Err(Error::Index {
                    op: "decode_residual",
                    detail: format!("frame {j} maps to text position {pos} of {}", encoder.nrows()),
                });
            }
            rows.row_mut(j).assign(&encoder.row(pos));
        }
        rows
    };
    for k in 1..big_k {
        let mut t = Tape::new(&model.params);
        let aligned = t.input(aligned_rows.clone());
        let spk = t.input(speaker.to_owned().insert_axis(Axis(0)));
        let below = grid.slice(ndarray::s![.., ..k]);
        let logits = model.rch_forward(&mut t, &below, aligned, k, spk)?;
        let logits = t.value(logits);
        for j in 0..t_frames {
            let row = logits.row(j);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            grid[[j, k]] = best as u16;
        }
    }
    CodeGrid::new(grid)
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub features: FeatureSeq,
    pub grid: CodeGrid,
    pub path: AlignmentPath,
}

/// Full pipeline: tokenize → speaker embed → encode → transducer decode →
/// residual fill → codec decode. An empty first-codebook decode is an error
/// (`EmptyDecode`), never a silent zero-length output.
pub fn synthesize(
    model: &TtsModel,
    vocab: &BpeVocab,
    books: &Codebooks,
    text: &str,
    reference: &FeatureSeq,
    cfg: &DecodeConfig,
) -> Result<Synthesis> {
    cfg.validate()?;
    let tokens = bpe_encode(vocab, text)?;
    let mut tape = Tape::new(&model.params);
    let spk = model.gst_embed(&mut tape, reference)?;
    let enc = model.encode_text(&mut tape, &tokens.ids, spk)?;
    let encoder = tape.value(enc.node).to_owned();
    let speaker = tape.value(spk).row(0).to_owned();
    drop(tape);

    let mut rng = rng_for(cfg.seed, DECODE_STREAM);
    let first = decode_first_codebook(model, &encoder, cfg, &mut rng)?;
    if first.codes.is_empty() {
        return Err(Error::EmptyDecode);
    }
    let grid = decode_residual(model, &first.codes, &first.path, &encoder, &speaker.view())?;
    let features = rvq_decode(books, &grid, model.config.num_codebooks)?;
    Ok(Synthesis { features, grid, path: first.path })
}
