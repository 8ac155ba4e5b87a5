//! Frozen deterministic decoder-only transformer.
//!
//! This is the reference backbone the cache machinery is tested against:
//! small enough that every oracle runs in milliseconds, but a faithful
//! pre-norm decoder (RMSNorm, rotary attention, GELU MLP) whose attention
//! state can be assembled from externally supplied per-layer key/value
//! blocks. Weights are derived from a seed and never change after
//! construction; correctness oracles test the cache mechanism, not learned
//! knowledge, so random weights suffice.

pub mod rope;
pub mod tokenizer;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub use tokenizer::{detokenize, tokenize, EOT_TOKEN, TOKENIZER_VOCAB};

/// Shape and seed of the frozen decoder. Hidden width is
/// `num_heads * head_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            num_heads: 4,
            head_dim: 16,
            vocab_size: 260,
            max_positions: 1024,
            seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "num_layers, num_heads, and head_dim must all be >= 1".into(),
            ));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config(
                "head_dim must be even (rotary pairs)".into(),
            ));
        }
        if self.vocab_size < TOKENIZER_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size must be >= {TOKENIZER_VOCAB} to cover bytes plus end-of-text"
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be >= 1".into()));
        }
        Ok(())
    }
}

/// One layer's cached attention memory: keys are rotary-encoded at their
/// absolute positions, values are raw. `base_position` records where the
/// first slot sits in the position stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKV {
    pub keys: Array3<f32>,   // [num_heads, seq_len, head_dim]
    pub values: Array3<f32>, // [num_heads, seq_len, head_dim]
    pub base_position: usize,
}

impl LayerKV {
    pub fn empty(num_heads: usize, head_dim: usize) -> Self {
        LayerKV {
            keys: Array3::zeros((num_heads, 0, head_dim)),
            values: Array3::zeros((num_heads, 0, head_dim)),
            base_position: 0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.keys.dim().1
    }

    /// Appends another block after this one. An empty receiver adopts the
    /// other block wholesale (including its base position).
    pub fn append(&mut self, other: &LayerKV) {
        if other.seq_len() == 0 {
            return;
        }
        if self.seq_len() == 0 {
            *self = other.clone();
            return;
        }
        self.keys = ndarray::concatenate(Axis(1), &[self.keys.view(), other.keys.view()])
            .expect("head/dim shapes match");
        self.values = ndarray::concatenate(Axis(1), &[self.values.view(), other.values.view()])
            .expect("head/dim shapes match");
    }
}

struct LayerWeights {
    attn_norm: Array1<f32>,
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
    mlp_norm: Array1<f32>,
    w1: Array2<f32>,
    w2: Array2<f32>,
}

/// The frozen decoder. No operation mutates weights after construction.
pub struct FrozenModel {
    config: ModelConfig,
    embed: Array2<f32>, // [vocab, hidden]
    layers: Vec<LayerWeights>,
    final_norm: Array1<f32>,
    w_out: Array2<f32>, // [hidden, vocab]
}

/// Logits for the tokens just processed, plus their key/value cache block.
pub struct ForwardOutput {
    pub logits: Array2<f32>, // [seq_len, vocab]
    pub cache: Vec<LayerKV>, // current tokens only, one entry per layer
}

/// Greedy decode result. `tokens` excludes the end-of-text id;
/// `step_logits` holds the logit vector behind each decode decision
/// (including the one that produced end-of-text, if any); `cache` is the
/// accumulated attention memory over past, prompt, and emitted tokens.
pub struct GenerateOutput {
    pub tokens: Vec<u32>,
    pub step_logits: Vec<Array1<f32>>,
    pub cache: Vec<LayerKV>,
}

const RMS_EPS: f32 = 1e-5;
const INIT_RANGE: f64 = 0.08;

fn draw_uniform(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len)
        .map(|_| {
            let u = rng.next_u32() as f64 / 4_294_967_296.0;
            ((u * 2.0 - 1.0) * INIT_RANGE) as f32
        })
        .collect()
}

fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn rms_norm(x: &Array2<f32>, gain: &Array1<f32>) -> Array2<f32> {
    let width = x.dim().1 as f32;
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let ms: f32 = row.iter().map(|v| v * v).sum::<f32>() / width;
        let scale = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain.iter()) {
            *v = *v * scale * g;
        }
    }
    out
}

pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Causal-within-block mask for a sequence made of independent segments:
/// slot i may attend to slot j iff both lie in the same segment and j <= i.
/// This is the attention pattern under which one forward pass over
/// concatenated texts reproduces independently compiled cache entries.
pub fn block_diagonal_mask(segment_lens: &[usize]) -> Array2<bool> {
    let total: usize = segment_lens.iter().sum();
    let mut mask = Array2::from_elem((total, total), false);
    let mut start = 0;
    for &len in segment_lens {
        for i in start..start + len {
            for j in start..=i {
                mask[[i, j]] = true;
            }
        }
        start += len;
    }
    mask
}

impl FrozenModel {
    /// Builds the model with weights derived from `config.seed`: embedding,
    /// projection, and output tensors are drawn in serialization order from
    /// ChaCha8 as uniform values in [-0.08, 0.08]; norm gains start at one
    /// and consume no randomness. Two builds from equal configs are
    /// bit-identical.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let hidden = config.hidden();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Array2::from_shape_vec((rows, cols), draw_uniform(rng, rows * cols))
                .expect("length matches shape")
        };

        let embed = mat(config.vocab_size, hidden, &mut rng);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerWeights {
                attn_norm: Array1::ones(hidden),
                wq: mat(hidden, hidden, &mut rng),
                wk: mat(hidden, hidden, &mut rng),
                wv: mat(hidden, hidden, &mut rng),
                wo: mat(hidden, hidden, &mut rng),
                mlp_norm: Array1::ones(hidden),
                w1: mat(hidden, 4 * hidden, &mut rng),
                w2: mat(4 * hidden, hidden, &mut rng),
            });
        }
        let final_norm = Array1::ones(hidden);
        let w_out = mat(hidden, config.vocab_size, &mut rng);

        Ok(FrozenModel {
            config,
            embed,
            layers,
            final_norm,
            w_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Named weight tensors in the canonical order used for serialization
    /// and fingerprinting.
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let flat2 = |a: &Array2<f32>| (vec![a.dim().0, a.dim().1], a.iter().cloned().collect());
        let flat1 = |a: &Array1<f32>| (vec![a.len()], a.to_vec());
        let mut out = Vec::new();
        let (shape, data) = flat2(&self.embed);
        out.push(("embed".to_string(), shape, data));
        for (i, layer) in self.layers.iter().enumerate() {
            for (suffix, shape, data) in [
                ("attn_norm", flat1(&layer.attn_norm).0, flat1(&layer.attn_norm).1),
                ("wq", flat2(&layer.wq).0, flat2(&layer.wq).1),
                ("wk", flat2(&layer.wk).0, flat2(&layer.wk).1),
                ("wv", flat2(&layer.wv).0, flat2(&layer.wv).1),
                ("wo", flat2(&layer.wo).0, flat2(&layer.wo).1),
                ("mlp_norm", flat1(&layer.mlp_norm).0, flat1(&layer.mlp_norm).1),
                ("w1", flat2(&layer.w1).0, flat2(&layer.w1).1),
                ("w2", flat2(&layer.w2).0, flat2(&layer.w2).1),
            ] {
                out.push((format!("layers.{i}.{suffix}"), shape, data));
            }
        }
        let (shape, data) = flat1(&self.final_norm);
        out.push(("final_norm".to_string(), shape, data));
        let (shape, data) = flat2(&self.w_out);
        out.push(("w_out".to_string(), shape, data));
        out
    }

    /// SHA-256 over all weight bytes in canonical tensor order. Binds bank
    /// files to the exact weights that compiled them.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (_, _, data) in self.named_tensors() {
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    pub fn fingerprint_hex(&self) -> String {
        hex(&self.fingerprint())
    }

    /// Runs the decoder over `tokens` with optional per-layer past memory.
    /// Current tokens occupy absolute positions `position_offset ..`; each
    /// attends to all past slots of its layer plus current slots up to
    /// itself. The returned cache covers the current tokens only.
    pub fn forward(
        &self,
        tokens: &[u32],
        past: Option<&[LayerKV]>,
        position_offset: usize,
    ) -> Result<ForwardOutput> {
        self.forward_inner(tokens, past, position_offset, None)
    }

    /// Forward pass with an explicit attention mask over the current block
    /// (`mask[i][j]` = slot i may attend to slot j) instead of implicit
    /// causal masking; no past memory. This is the oracle hook for
    /// verifying composed multi-segment caches.
    pub fn forward_masked(
        &self,
        tokens: &[u32],
        mask: &Array2<bool>,
        position_offset: usize,
    ) -> Result<ForwardOutput> {
        self.forward_inner(tokens, None, position_offset, Some(mask))
    }

    fn forward_inner(
        &self,
        tokens: &[u32],
        past: Option<&[LayerKV]>,
        position_offset: usize,
        mask: Option<&Array2<bool>>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (heads, dim, hidden) = (cfg.num_heads, cfg.head_dim, cfg.hidden());
        let seq = tokens.len();

        let needed = position_offset + seq;
        if needed > cfg.max_positions {
            return Err(Error::PositionOverflow {
                needed,
                max: cfg.max_positions,
            });
        }
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token id {t} out of range for vocab {}",
                    cfg.vocab_size
                )));
            }
        }
        if let Some(past) = past {
            if past.len() != cfg.num_layers {
                return Err(Error::ShapeMismatch(format!(
                    "past has {} layers, model has {}",
                    past.len(),
                    cfg.num_layers
                )));
            }
            for (l, kv) in past.iter().enumerate() {
                let kd = kv.keys.dim();
                if kd.0 != heads || kd.2 != dim || kv.values.dim() != kd {
                    return Err(Error::ShapeMismatch(format!(
                        "past layer {l}: keys {:?} values {:?}, want [{heads}, *, {dim}]",
                        kv.keys.dim(),
                        kv.values.dim()
                    )));
                }
            }
        }
        if let Some(mask) = mask {
            if mask.dim() != (seq, seq) {
                return Err(Error::ShapeMismatch(format!(
                    "mask {:?} does not match sequence length {seq}",
                    mask.dim()
                )));
            }
            for i in 0..seq {
                if !(0..=i).any(|j| mask[[i, j]]) {
                    return Err(Error::InvalidInput(format!(
                        "mask row {i} allows no causal slot"
                    )));
                }
                if (i + 1..seq).any(|j| mask[[i, j]]) {
                    return Err(Error::InvalidInput(format!(
                        "mask row {i} attends to a future slot"
                    )));
                }
            }
        }

        if seq == 0 {
            return Ok(ForwardOutput {
                logits: Array2::zeros((0, cfg.vocab_size)),
                cache: (0..cfg.num_layers)
                    .map(|_| {
                        let mut kv = LayerKV::empty(heads, dim);
                        kv.base_position = position_offset;
                        kv
                    })
                    .collect(),
            });
        }

        let mut x = Array2::zeros((seq, hidden));
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).assign(&self.embed.row(t as usize));
        }

        let scale = 1.0 / (dim as f32).sqrt();
        let mut cache = Vec::with_capacity(cfg.num_layers);

        for (l, layer) in self.layers.iter().enumerate() {
            let h = rms_norm(&x, &layer.attn_norm);
            let q = h.dot(&layer.wq);
            let k = h.dot(&layer.wk);
            let v = h.dot(&layer.wv);

            // split [seq, hidden] into per-head [heads, seq, dim]
            let mut q3 = Array3::zeros((heads, seq, dim));
            let mut k3 = Array3::zeros((heads, seq, dim));
            let mut v3 = Array3::zeros((heads, seq, dim));
            for head in 0..heads {
                let cols = s![.., head * dim..(head + 1) * dim];
                q3.slice_mut(s![head, .., ..]).assign(&q.slice(cols));
                k3.slice_mut(s![head, .., ..]).assign(&k.slice(cols));
                v3.slice_mut(s![head, .., ..]).assign(&v.slice(cols));
            }
            rope::rotate_tensor(&mut q3, position_offset);
            rope::rotate_tensor(&mut k3, position_offset);

            let past_kv = past.map(|p| &p[l]);
            let past_len = past_kv.map_or(0, |p| p.seq_len());

            let mut ctx = Array2::zeros((seq, hidden));
            for head in 0..heads {
                let qh = q3.slice(s![head, .., ..]);
                let kh = k3.slice(s![head, .., ..]);
                let vh = v3.slice(s![head, .., ..]);
                for i in 0..seq {
                    let qi = qh.row(i);
                    let mut scores = Vec::with_capacity(past_len + i + 1);
                    if let Some(p) = past_kv {
                        let pk = p.keys.slice(s![head, .., ..]);
                        for j in 0..past_len {
                            scores.push(qi.dot(&pk.row(j)) * scale);
                        }
                    }
                    let current: Vec<usize> = match mask {
                        Some(m) => (0..seq).filter(|&j| m[[i, j]]).collect(),
                        None => (0..=i).collect(),
                    };
                    for &j in &current {
                        scores.push(qi.dot(&kh.row(j)) * scale);
                    }
                    softmax_in_place(&mut scores);

                    let mut acc = Array1::zeros(dim);
                    let mut w = scores.iter();
                    if let Some(p) = past_kv {
                        let pv = p.values.slice(s![head, .., ..]);
                        for j in 0..past_len {
                            acc.scaled_add(*w.next().expect("score per slot"), &pv.row(j));
                        }
                    }
                    for &j in &current {
                        acc.scaled_add(*w.next().expect("score per slot"), &vh.row(j));
                    }
                    ctx.slice_mut(s![i, head * dim..(head + 1) * dim])
                        .assign(&acc);
                }
            }

            x = x + ctx.dot(&layer.wo);

            let h2 = rms_norm(&x, &layer.mlp_norm);
            let mlp = h2.dot(&layer.w1).mapv(gelu).dot(&layer.w2);
            x = x + mlp;

            cache.push(LayerKV {
                keys: k3,
                values: v3,
                base_position: position_offset,
            });
        }

        let h = rms_norm(&x, &self.final_norm);
        let logits = h.dot(&self.w_out);
        Ok(ForwardOutput { logits, cache })
    }

    /// Re-encodes cached keys as if their content had been processed at
    /// `new_base_position`, using the additive-rotation property. Values
    /// are position-free and pass through unchanged.
    pub fn rotate_keys(&self, kv: &LayerKV, new_base_position: usize) -> Result<LayerKV> {
        let needed = new_base_position + kv.seq_len();
        if needed > self.config.max_positions {
            return Err(Error::PositionOverflow {
                needed,
                max: self.config.max_positions,
            });
        }
        let delta = new_base_position as i64 - kv.base_position as i64;
        let mut keys = kv.keys.clone();
        rope::rotate_tensor_delta(&mut keys, delta);
        Ok(LayerKV {
            keys,
            values: kv.values.clone(),
            base_position: new_base_position,
        })
    }

    /// Greedy decoding. The prompt is processed at `position_offset` (past
    /// the supplied memory, if any), then tokens are emitted one at a time
    /// until `max_new` or end-of-text.
    pub fn generate(
        &self,
        prompt: &[u32],
        past: Option<Vec<LayerKV>>,
        position_offset: usize,
        max_new: usize,
    ) -> Result<GenerateOutput> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput(
                "generation requires a non-empty prompt".into(),
            ));
        }
        let mut cache = past.unwrap_or_else(|| {
            (0..self.config.num_layers)
                .map(|_| LayerKV::empty(self.config.num_heads, self.config.head_dim))
                .collect()
        });

        let out = self.forward(prompt, Some(&cache), position_offset)?;
        for (acc, block) in cache.iter_mut().zip(&out.cache) {
            acc.append(block);
        }
        let mut last = out.logits.row(out.logits.dim().0 - 1).to_owned();
        let mut position = position_offset + prompt.len();

        let mut tokens = Vec::new();
        let mut step_logits = Vec::new();
        while tokens.len() < max_new {
            let next = argmax(&last);
            step_logits.push(last.clone());
            if next == EOT_TOKEN {
                break;
            }
            tokens.push(next);
            let step = self.forward(&[next], Some(&cache), position)?;
            for (acc, block) in cache.iter_mut().zip(&step.cache) {
                acc.append(block);
            }
            last = step.logits.row(0).to_owned();
            position += 1;
        }

        Ok(GenerateOutput {
            tokens,
            step_logits,
            cache,
        })
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(b"KVIM")?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u32::<LittleEndian>(self.config.num_layers as u32)?;
        w.write_u32::<LittleEndian>(self.config.num_heads as u32)?;
        w.write_u32::<LittleEndian>(self.config.head_dim as u32)?;
        w.write_u32::<LittleEndian>(self.config.vocab_size as u32)?;
        w.write_u32::<LittleEndian>(self.config.max_positions as u32)?;
        w.write_u64::<LittleEndian>(self.config.seed)?;
        for (name, shape, data) in self.named_tensors() {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(shape.len() as u8)?;
            for d in &shape {
                w.write_u32::<LittleEndian>(*d as u32)?;
            }
            for v in &data {
                w.write_f32::<LittleEndian>(*v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_weights(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"KVIM" {
            return Err(Error::Format(format!(
                "bad weight-file magic {magic:?}, expected \"KVIM\""
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported weight version {version}")));
        }
        let config = ModelConfig {
            num_layers: r.read_u32::<LittleEndian>()? as usize,
            num_heads: r.read_u32::<LittleEndian>()? as usize,
            head_dim: r.read_u32::<LittleEndian>()? as usize,
            vocab_size: r.read_u32::<LittleEndian>()? as usize,
            max_positions: r.read_u32::<LittleEndian>()? as usize,
            seed: r.read_u64::<LittleEndian>()?,
        };
        config.validate()?;

        // read into a template model so the tensor walk defines order/shape
        let mut model = FrozenModel::init(config)?;
        let expected = model.named_tensors();
        for (name, shape, _) in &expected {
            let name_len = r.read_u16::<LittleEndian>()? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let got_name = String::from_utf8(name_buf)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if got_name != *name {
                return Err(Error::Format(format!(
                    "tensor order mismatch: got {got_name:?}, expected {name:?}"
                )));
            }
            let ndim = r.read_u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u32::<LittleEndian>()? as usize);
            }
            if dims != *shape {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {dims:?}, expected {shape:?}"
                )));
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.read_f32::<LittleEndian>()?);
            }
            model.set_tensor(name, &data);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after final tensor",
                rest.len()
            )));
        }
        Ok(model)
    }

    fn set_tensor(&mut self, name: &str, data: &[f32]) {
        let assign1 = |dst: &mut Array1<f32>, data: &[f32]| {
            dst.assign(&Array1::from_vec(data.to_vec()));
        };
        let assign2 = |dst: &mut Array2<f32>, data: &[f32]| {
            let dim = dst.dim();
            *dst = Array2::from_shape_vec(dim, data.to_vec()).expect("shape checked by caller");
        };
        if name == "embed" {
            assign2(&mut self.embed, data);
            return;
        }
        if name == "final_norm" {
            assign1(&mut self.final_norm, data);
            return;
        }
        if name == "w_out" {
            assign2(&mut self.w_out, data);
            return;
        }
        let rest = name.strip_prefix("layers.").expect("known tensor name");
        let (idx, field) = rest.split_once('.').expect("layer-qualified name");
        let layer = &mut self.layers[idx.parse::<usize>().expect("layer index")];
        match field {
            "attn_norm" => assign1(&mut layer.attn_norm, data),
            "wq" => assign2(&mut layer.wq, data),
            "wk" => assign2(&mut layer.wk, data),
            "wv" => assign2(&mut layer.wv, data),
            "wo" => assign2(&mut layer.wo, data),
            "mlp_norm" => assign1(&mut layer.mlp_norm, data),
            "w1" => assign2(&mut layer.w1, data),
            "w2" => assign2(&mut layer.w2, data),
            other => unreachable!("unknown tensor field {other}"),
        }
    }
}

fn argmax(logits: &Array1<f32>) -> u32 {
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as u32
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn fingerprint_to_hex(bytes: &[u8]) -> String {
    hex(bytes)
}
