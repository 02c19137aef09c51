//! Synthetic residual vector quantizer and toy corpus.
//!
//! "Audio" is a T×d_f feature sequence derived deterministically from token
//! ids and a speaker profile; an RVQ stack with geometrically shrinking
//! codebooks turns it into T×K code grids with exact ground truth. All
//! numbers are kept on the f32 grid so files round-trip bit-exactly.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeSet;
use std::path::Path;

use crate::io::ManifestEntry;
use crate::text::{bpe_encode, BpeVocab, TokenSeq};
use crate::util::{fnv1a, mix_seed, quantize_f32, rng_for, splitmix64};
use crate::{Error, Result};

const STREAM_CODEBOOKS: u64 = 0xC0DE_B001;
const STREAM_SPEAKERS: u64 = 0xC0DE_B002;
const STREAM_SENTENCES: u64 = 0xC0DE_B003;
const STREAM_REF_TEXT: u64 = 0xC0DE_B004;
const STREAM_JITTER: u64 = 0xC0DE_B005;
const TOKEN_FEATURE_SALT: u64 = 0xFEA7_BA5E;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodecSpec {
    /// Number of codebooks K (first + K−1 residual levels).
    pub num_codebooks: usize,
    /// Entries per codebook V_c.
    pub codebook_size: usize,
    /// Feature dimension d_f.
    pub feature_dim: usize,
    /// Nominal frames per second; informational only.
    pub frame_rate: f64,
}

impl CodecSpec {
    pub fn desk_default() -> Self {
        CodecSpec { num_codebooks: 4, codebook_size: 64, feature_dim: 8, frame_rate: 75.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_codebooks < 2 {
            return Err(Error::Config(format!("num_codebooks {} < 2", self.num_codebooks)));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config(format!("codebook_size {} < 2", self.codebook_size)));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::Config(format!("frame_rate {} not positive", self.frame_rate)));
        }
        Ok(())
    }
}

/// K codebooks, each V_c×d_f.
#[derive(Debug, Clone)]
pub struct Codebooks {
    pub books: Vec<Array2<f64>>,
    pub spec: CodecSpec,
}

/// T×K code matrix; column 0 is the transducer target, the rest are
/// residual-head targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGrid {
    pub codes: Array2<u16>,
}

impl CodeGrid {
    pub fn new(codes: Array2<u16>) -> Result<Self> {
        if codes.nrows() == 0 {
            return Err(Error::Validation("code grid must have T ≥ 1 frames".into()));
        }
        Ok(CodeGrid { codes })
    }

    pub fn t(&self) -> usize {
        self.codes.nrows()
    }

    pub fn k(&self) -> usize {
        self.codes.ncols()
    }

    /// First-codebook target sequence as usize ids.
    pub fn first_codebook(&self) -> Vec<usize> {
        self.codes.column(0).iter().map(|&c| c as usize).collect()
    }

    pub fn column(&self, k: usize) -> Vec<usize> {
        self.codes.column(k).iter().map(|&c| c as usize).collect()
    }

    pub fn validate(&self, spec: &CodecSpec) -> Result<()> {
        if self.k() != spec.num_codebooks {
            return Err(Error::Validation(format!(
                "code grid has {} codebooks, spec says {}",
                self.k(),
                spec.num_codebooks
            )));
        }
        if let Some(&bad) = self.codes.iter().find(|&&c| c as usize >= spec.codebook_size) {
            return Err(Error::Validation(format!(
                "code {bad} outside codebook of {}",
                spec.codebook_size
            )));
        }
        Ok(())
    }
}

/// T×d_f synthetic acoustic features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    pub data: Array2<f64>,
}

impl FeatureSeq {
    pub fn t(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Toy speaker profile: pace (frames per token) and a constant timbre shift.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToySpeaker {
    pub id: String,
    pub duration_factor: f64,
    pub timbre_offset: Vec<f64>,
}

impl ToySpeaker {
    pub fn validate(&self) -> Result<()> {
        if !(1.0..=8.0).contains(&self.duration_factor) {
            return Err(Error::Config(format!(
                "speaker {}: duration_factor {} outside [1, 8]",
                self.id, self.duration_factor
            )));
        }
        Ok(())
    }
}

/// Deterministic codebooks: level k entries ~ Normal(0, 0.5^k), so each
/// residual level refines at roughly half the previous scale.
pub fn rvq_init(spec: &CodecSpec, seed: u64) -> Result<Codebooks> {
    spec.validate()?;
    let mut rng = rng_for(seed, STREAM_CODEBOOKS);
    let mut books = Vec::with_capacity(spec.num_codebooks);
    for k in 0..spec.num_codebooks {
        let scale = 0.5f64.powi(k as i32);
        let normal = Normal::new(0.0, scale).expect("valid stddev");
        let book = Array2::from_shape_fn((spec.codebook_size, spec.feature_dim), |_| {
            quantize_f32(normal.sample(&mut rng))
        });
        books.push(book);
    }
    Ok(Codebooks { books, spec: *spec })
}

fn nearest(book: &Array2<f64>, target: &ArrayView1<f64>) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, row) in book.rows().into_iter().enumerate() {
        let d: f64 = row.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Residual quantization: per frame, greedily pick the nearest entry of each
/// level and subtract it (ties toward the lowest index).
pub fn rvq_encode(books: &Codebooks, features: &FeatureSeq) -> Result<CodeGrid> {
    if features.dim() != books.spec.feature_dim {
        return Err(Error::Shape {
            op: "rvq_encode",
            detail: format!(
                "feature dim {} vs codec dim {}",
                features.dim(),
                books.spec.feature_dim
            ),
        });
    }
    let k = books.spec.num_codebooks;
    let mut codes = Array2::zeros((features.t(), k));
    for (j, frame) in features.data.rows().into_iter().enumerate() {
        let mut residual = frame.to_owned();
        for (level, book) in books.books.iter().enumerate() {
            let idx = nearest(book, &residual.view());
            codes[[j, level]] = idx as u16;
            residual -= &book.row(idx);
        }
    }
    CodeGrid::new(codes)
}

/// Greedy encode, then requantize the reconstruction until the grid is a
/// fixed point of `rvq_encode ∘ rvq_decode`.
///
/// Greedy RVQ is not idempotent on its own: a reconstruction can land on the
/// far side of a quantization boundary its source frame was near, so
/// re-encoding flips a few codes. Corpora store the stabilized grid so the
/// fixed-point invariant holds for every shipped file. Rare source frames
/// oscillate between two reconstructions and never stabilize; those abort
/// with a validation error rather than emit a grid that breaks the
/// invariant (a different generation seed sidesteps the bad geometry).
pub fn rvq_encode_stable(books: &Codebooks, features: &FeatureSeq) -> Result<CodeGrid> {
    let mut grid = rvq_encode(books, features)?;
    for _ in 0..32 {
        let rec = rvq_decode(books, &grid, books.spec.num_codebooks)?;
        let again = rvq_encode(books, &rec)?;
        if again == grid {
            return Ok(grid);
        }
        grid = again;
    }
    Err(Error::Validation(
        "requantization did not stabilize within 32 passes; regenerate with a different seed"
            .into(),
    ))
}

/// Sum of the selected entries over the first `levels` codebooks.
pub fn rvq_decode(books: &Codebooks, grid: &CodeGrid, levels: usize) -> Result<FeatureSeq> {
    if levels == 0 || levels > books.spec.num_codebooks || levels > grid.k() {
        return Err(Error::Validation(format!(
            "levels {levels} outside 1..={}",
            books.spec.num_codebooks.min(grid.k())
        )));
    }
    let mut data = Array2::zeros((grid.t(), books.spec.feature_dim));
    for j in 0..grid.t() {
        for level in 0..levels {
            let code = grid.codes[[j, level]] as usize;
            let book = &books.books[level];
            if code >= book.nrows() {
                return Err(Error::Index {
                    op: "rvq_decode",
                    detail: format!("code {code} outside codebook of {}", book.nrows()),
                });
            }
            let mut row = data.row_mut(j);
            row += &book.row(code);
        }
    }
    Ok(FeatureSeq { data })
}

fn unit_interval(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Fixed token→feature signature, independent of seed and speaker.
fn token_base_vector(token: u32, d_f: usize) -> Vec<f64> {
    let mut state = mix_seed(TOKEN_FEATURE_SALT, u64::from(token));
    (0..d_f)
        .map(|_| {
            state = splitmix64(state);
            quantize_f32(unit_interval(state))
        })
        .collect()
}

/// Expand tokens into frames: token j repeats round(duration·(1+jitter))
/// times (jitter ~ U(−0.25, 0.25) per token), shifted by the timbre offset.
pub fn synth_features(tokens: &TokenSeq, speaker: &ToySpeaker, seed: u64) -> Result<FeatureSeq> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot synthesize features for empty token sequence".into()));
    }
    speaker.validate()?;
    let d_f = speaker.timbre_offset.len();
    let mut rng = rng_for(seed, STREAM_JITTER);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for &token in &tokens.ids {
        let base = token_base_vector(token, d_f);
        let jitter: f64 = rng.gen_range(-0.25..0.25);
        let frames = (speaker.duration_factor * (1.0 + jitter)).round().max(1.0) as usize;
        for _ in 0..frames {
            rows.push(
                base.iter()
                    .zip(&speaker.timbre_offset)
                    .map(|(b, o)| quantize_f32(b + o))
                    .collect(),
            );
        }
    }
    let t = rows.len();
    let data = Array2::from_shape_fn((t, d_f), |(r, c)| rows[r][c]);
    Ok(FeatureSeq { data })
}

/// Deterministic speaker roster: pace 2, 4, 6… frames per token (capped at
/// 8) and a Normal(0, 0.75) timbre offset.
pub fn default_speakers(spec: &CodecSpec, count: usize, seed: u64) -> Vec<ToySpeaker> {
    let mut rng = rng_for(seed, STREAM_SPEAKERS);
    let normal = Normal::new(0.0, 0.75).expect("valid stddev");
    (0..count)
        .map(|i| {
            let timbre =
                (0..spec.feature_dim).map(|_| quantize_f32(normal.sample(&mut rng))).collect();
            ToySpeaker {
                id: format!("spk{i}"),
                duration_factor: (2.0 * (i + 1) as f64).min(8.0),
                timbre_offset: timbre,
            }
        })
        .collect()
}

fn random_sentence<R: Rng>(rng: &mut R) -> String {
    const ALPHABET: &[u8] = b"abcdefgh";
    let words = rng.gen_range(2..=4);
    let mut out = String::new();
    for w in 0..words {
        if w > 0 {
            out.push(' ');
        }
        let len = rng.gen_range(2..=5);
        for _ in 0..len {
            out.push(ALPHABET[rng.gen_range(0..ALPHABET.len())] as char);
        }
    }
    out
}

/// `count` distinct sentences over a small alphabet, deterministic in `seed`.
pub fn generate_sentences(count: usize, seed: u64) -> Vec<String> {
    let mut rng = rng_for(seed, STREAM_SENTENCES);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let s = random_sentence(&mut rng);
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

/// Fixed reference sentence used for every speaker's GST reference file.
pub fn reference_text(seed: u64) -> String {
    let mut rng = rng_for(seed, STREAM_REF_TEXT);
    random_sentence(&mut rng)
}

/// Jitter seed for one utterance, mixing the corpus seed with its id.
pub fn utterance_seed(seed: u64, utt_id: &str) -> u64 {
    mix_seed(seed, fnv1a(utt_id.as_bytes()))
}

/// On-disk codec bundle: everything inference and evaluation need to rebuild
/// quantizer state and the toy speakers without the generation code path.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecFile {
    pub spec: CodecSpec,
    pub seed: u64,
    pub speakers: Vec<ToySpeaker>,
    pub books: Vec<Vec<Vec<f64>>>,
}

pub fn write_codec_file(
    path: &Path,
    books: &Codebooks,
    seed: u64,
    speakers: &[ToySpeaker],
) -> Result<()> {
    let file = CodecFile {
        spec: books.spec.clone(),
        seed,
        speakers: speakers.to_vec(),
        books: books
            .books
            .iter()
            .map(|b| b.rows().into_iter().map(|r| r.to_vec()).collect())
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json).map_err(Error::io(path))
}

pub fn read_codec_file(path: &Path) -> Result<CodecFile> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let file: CodecFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: format!("bad codec JSON: {e}"),
    })?;
    file.spec.validate()?;
    if file.books.len() != file.spec.num_codebooks {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!(
                "{} codebooks in file, spec says {}",
                file.books.len(),
                file.spec.num_codebooks
            ),
        });
    }
    Ok(file)
}

impl CodecFile {
    pub fn codebooks(&self) -> Result<Codebooks> {
        let mut books = Vec::with_capacity(self.books.len());
        for (k, entries) in self.books.iter().enumerate() {
            if entries.len() != self.spec.codebook_size
                || entries.iter().any(|e| e.len() != self.spec.feature_dim)
            {
                return Err(Error::Validation(format!(
                    "codebook {k} shape does not match spec {}×{}",
                    self.spec.codebook_size, self.spec.feature_dim
                )));
            }
            let flat: Vec<f64> = entries.iter().flatten().copied().collect();
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("codebook {k} has non-finite entries")));
            }
            books.push(
                Array2::from_shape_vec((self.spec.codebook_size, self.spec.feature_dim), flat)
                    .expect("shape checked above"),
            );
        }
        Ok(Codebooks { books, spec: self.spec.clone() })
    }
}

/// Generate `sentences` utterances cycling through the speakers, so that
/// each text is voiced by every speaker and text identity carries no
/// duration information. Writes per-utterance TTSC code files, one TTSF
/// reference-feature file per speaker, and a JSONL manifest; returns the
/// manifest entries.
pub fn corpus_generate(
    vocab: &BpeVocab,
    sentences: usize,
    speakers: &[ToySpeaker],
    spec: &CodecSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    if speakers.is_empty() {
        return Err(Error::Input("corpus generation needs at least one speaker".into()));
    }
    if sentences == 0 {
        return Err(Error::Input("corpus generation needs at least one sentence".into()));
    }
    for sp in speakers {
        sp.validate()?;
        if sp.timbre_offset.len() != spec.feature_dim {
            return Err(Error::Config(format!(
                "speaker {}: timbre dim {} vs feature dim {}",
                sp.id,
                sp.timbre_offset.len(),
                spec.feature_dim
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let books = rvq_init(spec, seed)?;

    let ref_text = reference_text(seed);
    for sp in speakers {
        let tokens = bpe_encode(vocab, &ref_text)?;
        let ref_seed = utterance_seed(seed, &format!("ref:{}", sp.id));
        let feats = synth_features(&tokens, sp, ref_seed)?;
        crate::io::write_features(&out_dir.join(format!("ref_{}.ttsf", sp.id)), &feats)?;
    }

    let n_texts = sentences.div_ceil(speakers.len());
    let texts = generate_sentences(n_texts, seed);
    let mut entries = Vec::with_capacity(sentences);
    for u in 0..sentences {
        let text = &texts[u / speakers.len()];
        let speaker = &speakers[u % speakers.len()];
        let id = format!("utt{u:04}");
        let tokens = bpe_encode(vocab, text)?;
        let feats = synth_features(&tokens, speaker, utterance_seed(seed, &id))?;
        let grid = rvq_encode_stable(&books, &feats)?;
        let codes_name = format!("{id}.ttsc");
        crate::io::write_codes(&out_dir.join(&codes_name), &grid)?;
        entries.push(ManifestEntry {
            id,
            text: text.clone(),
            speaker: speaker.id.clone(),
            codes: codes_name,
            reference: format!("ref_{}.ttsf", speaker.id),
        });
    }
    crate::io::write_manifest(&out_dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}
