//! Desk-scale synthetic multimodal tasks with controllable cross-modal
//! structure.
//!
//! A sample pairs a "video" feature sequence with a masked stub question.
//! The video stream carries a class prototype (the verb ingredient v) at
//! k_v random positions among noise rows; the text stream carries the noun
//! word inside a stub question with any verb surface form masked out. In
//! FACTORED mode the labels are (v, n) directly; in COMPOSED mode the verb
//! label is (v + n) mod Vv, so neither modality alone determines it.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{fnv1a64, TaskMode, TrainConfig};
use crate::error::{CoreError, Result};
use crate::model::Batch;
use crate::qa::{mask_question, stub_generate, tokenize, Vocab};
use crate::tensor::Tensor;

pub const VERB_WORDS: [&str; 32] = [
    "wash", "cut", "pour", "open", "close", "stir", "peel", "slice", "grab", "shake", "wipe",
    "fill", "empty", "flip", "chop", "rinse", "dry", "mix", "fold", "squeeze", "scoop", "spread",
    "crack", "whisk", "drain", "season", "taste", "serve", "cool", "heat", "turn", "press",
];

pub const NOUN_WORDS: [&str; 32] = [
    "plate", "cup", "pan", "knife", "board", "bowl", "fridge", "kettle", "spoon", "fork", "jar",
    "lid", "towel", "sponge", "onion", "carrot", "tomato", "bottle", "glass", "pot", "tray",
    "egg", "bread", "cheese", "milk", "rice", "pasta", "salt", "pepper", "oil", "sink", "drawer",
];

const CODEBOOK_SEED: u64 = 0x5353_4D46_C0DE_B00C;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// Per-sample generation seed; doubles as the sample id.
    pub seed: u64,
    /// [F, Draw] video features.
    pub x_v: Tensor,
    /// Token ids, length exactly L.
    pub tokens_t: Vec<u32>,
    pub verb_label: usize,
    pub noun_label: usize,
    /// Codebook index placed in the video stream (the verb ingredient v).
    pub video_class: usize,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Vec<SynthSample>,
    pub val: Vec<SynthSample>,
    pub data_hash: u64,
}

fn check_vocab_sizes(cfg: &TrainConfig) -> Result<()> {
    if cfg.verb_vocab > VERB_WORDS.len() || cfg.noun_vocab > NOUN_WORDS.len() {
        return Err(CoreError::Configuration(format!(
            "verb_vocab/noun_vocab at most {} words, got {}/{}",
            VERB_WORDS.len(),
            cfg.verb_vocab,
            cfg.noun_vocab
        )));
    }
    Ok(())
}

/// Fixed random prototype codebook: one Draw-dimensional vector per verb
/// ingredient class, independent of the dataset seed.
pub fn codebook(cfg: &TrainConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(CODEBOOK_SEED);
    (0..cfg.verb_vocab)
        .map(|_| {
            (0..cfg.d_raw)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Deterministic task vocabulary: stub-question template words plus every
/// verb and noun word in list order.
pub fn task_vocab(cfg: &TrainConfig) -> Vocab {
    let mut texts: Vec<String> = Vec::new();
    let (qv, qn, desc) = stub_generate(VERB_WORDS[0], NOUN_WORDS[0]);
    texts.push(qv);
    texts.push(qn);
    texts.push(desc);
    texts.extend(VERB_WORDS.iter().map(|s| s.to_string()));
    texts.extend(NOUN_WORDS.iter().map(|s| s.to_string()));
    Vocab::from_texts(texts.iter().map(String::as_str))
}

/// Generate one sample, fully determined by (seed, config).
pub fn gen_sample(seed: u64, cfg: &TrainConfig, book: &[Vec<f64>], vocab: &Vocab) -> Result<SynthSample> {
    check_vocab_sizes(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = rng.gen_range(0..cfg.verb_vocab);
    let n = rng.gen_range(0..cfg.noun_vocab);
    let (verb_label, noun_label) = match cfg.mode {
        TaskMode::Factored => (v, n),
        TaskMode::Composed => ((v + n) % cfg.verb_vocab, n),
    };

    // k_v clean prototype copies at random positions among noise rows.
    let (f, draw) = (cfg.frames, cfg.d_raw);
    let mut x = vec![0.0; f * draw];
    for row in x.chunks_mut(draw) {
        for val in row.iter_mut() {
            *val = rng.sample::<f64, _>(StandardNormal) * cfg.noise;
        }
    }
    let positions = index_sample(&mut rng, f, cfg.k_v);
    for p in positions.iter() {
        x[p * draw..(p + 1) * draw].copy_from_slice(&book[v]);
    }

    // the text carries the noun word inside a stub question, with the verb
    // label's surface forms masked per the leak rule
    let noun_word = NOUN_WORDS[noun_label];
    let verb_word = VERB_WORDS[verb_label];
    let (question_with_noun, _, _) = stub_generate(verb_word, noun_word);
    let masked = mask_question(&question_with_noun, verb_word);
    let tokens_t = tokenize(&masked, vocab, cfg.text_len);

    Ok(SynthSample {
        seed,
        x_v: Tensor::new(vec![f, draw], x)?,
        tokens_t,
        verb_label,
        noun_label,
        video_class: v,
    })
}

fn sample_seed(dataset_seed: u64, index: u64) -> u64 {
    fnv1a64(&[dataset_seed.to_le_bytes(), index.to_le_bytes()].concat())
}

/// Hash of the dataset-relevant configuration subset.
pub fn data_hash(cfg: &TrainConfig, seed: u64) -> u64 {
    let key = format!(
        "f={};l={};draw={};vv={};vn={};kv={};noise={};mode={:?};n={};seed={}",
        cfg.frames,
        cfg.text_len,
        cfg.d_raw,
        cfg.verb_vocab,
        cfg.noun_vocab,
        cfg.k_v,
        cfg.noise,
        cfg.mode,
        cfg.train_samples,
        seed
    );
    fnv1a64(key.as_bytes())
}

/// Generate `n` samples under disjoint per-sample seeds and split 90/10.
pub fn gen_split(seed: u64, n: usize, cfg: &TrainConfig) -> Result<SynthDataset> {
    if n < 2 {
        return Err(CoreError::Configuration(
            "gen_split needs at least 2 samples".into(),
        ));
    }
    check_vocab_sizes(cfg)?;
    let book = codebook(cfg);
    let vocab = task_vocab(cfg);
    let n_val = (n / 10).max(1);
    let n_train = n - n_val;
    let mut all = Vec::with_capacity(n);
    for i in 0..n {
        all.push(gen_sample(sample_seed(seed, i as u64), cfg, &book, &vocab)?);
    }
    let val = all.split_off(n_train);
    Ok(SynthDataset {
        train: all,
        val,
        data_hash: data_hash(cfg, seed),
    })
}

/// Stack samples into a model batch.
pub fn make_batch(samples: &[&SynthSample]) -> Batch {
    let b = samples.len();
    let (f, draw) = (samples[0].x_v.shape()[0], samples[0].x_v.shape()[1]);
    let mut x = Vec::with_capacity(b * f * draw);
    let mut tokens = Vec::new();
    let mut verbs = Vec::with_capacity(b);
    let mut nouns = Vec::with_capacity(b);
    for s in samples {
        x.extend_from_slice(s.x_v.data());
        tokens.extend_from_slice(&s.tokens_t);
        verbs.push(s.verb_label);
        nouns.push(s.noun_label);
    }
    Batch {
        x_v: Tensor::new(vec![b, f, draw], x).unwrap(),
        tokens,
        verbs,
        nouns,
    }
}

// ── Binary cache ─────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"SSMF";
const FORMAT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_samples(buf: &mut Vec<u8>, samples: &[SynthSample]) {
    for s in samples {
        put_u64(buf, s.seed);
        put_u32(buf, s.verb_label as u32);
        put_u32(buf, s.noun_label as u32);
        put_u32(buf, s.video_class as u32);
        for &t in &s.tokens_t {
            put_u32(buf, t);
        }
        for &v in s.x_v.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize the dataset: magic "SSMF", version, config hash, dims, then
/// the raw samples, all little-endian.
pub fn save_dataset(path: &Path, ds: &SynthDataset, cfg: &TrainConfig) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u64(&mut buf, ds.data_hash);
    put_u32(&mut buf, cfg.frames as u32);
    put_u32(&mut buf, cfg.text_len as u32);
    put_u32(&mut buf, cfg.d_raw as u32);
    put_u32(&mut buf, ds.train.len() as u32);
    put_u32(&mut buf, ds.val.len() as u32);
    write_samples(&mut buf, &ds.train);
    write_samples(&mut buf, &ds.val);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_samples(
    r: &mut impl Read,
    count: usize,
    frames: usize,
    text_len: usize,
    draw: usize,
) -> Result<Vec<SynthSample>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let seed = get_u64(r)?;
        let verb_label = get_u32(r)? as usize;
        let noun_label = get_u32(r)? as usize;
        let video_class = get_u32(r)? as usize;
        let mut tokens_t = Vec::with_capacity(text_len);
        for _ in 0..text_len {
            tokens_t.push(get_u32(r)?);
        }
        let mut data = vec![0.0; frames * draw];
        let mut b = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        out.push(SynthSample {
            seed,
            x_v: Tensor::new(vec![frames, draw], data)?,
            tokens_t,
            verb_label,
            noun_label,
            video_class,
        });
    }
    Ok(out)
}

/// Load a dataset cache, validating the magic, the format version, and
/// (when `expect_hash` is given) the config hash.
pub fn load_dataset(path: &Path, expect_hash: Option<u64>) -> Result<SynthDataset> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Format(format!(
            "not a dataset cache (magic {:?})",
            magic
        )));
    }
    let version = get_u32(&mut f)?;
    if version != FORMAT_VERSION {
        return Err(CoreError::Format(format!(
            "unsupported dataset format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let data_hash = get_u64(&mut f)?;
    if let Some(expect) = expect_hash {
        if expect != data_hash {
            return Err(CoreError::Format(format!(
                "dataset config hash {data_hash:#018x} does not match expected {expect:#018x}"
            )));
        }
    }
    let frames = get_u32(&mut f)? as usize;
    let text_len = get_u32(&mut f)? as usize;
    let draw = get_u32(&mut f)? as usize;
    let n_train = get_u32(&mut f)? as usize;
    let n_val = get_u32(&mut f)? as usize;
    let train = read_samples(&mut f, n_train, frames, text_len, draw)?;
    let val = read_samples(&mut f, n_val, frames, text_len, draw)?;
    Ok(SynthDataset {
        train,
        val,
        data_hash,
    })
}
