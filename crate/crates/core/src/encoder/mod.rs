//! Hashing bag-of-embeddings encoder with a two-layer perceptron head.
//!
//! `Enc(x) = W2 · tanh(W1 · mean(E[x]) + b1) + b2`. Parameters are stored
//! as `f32` (the checkpoint format) and all arithmetic runs in `f64`.

mod checkpoint;
mod tokenizer;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub(crate) use checkpoint::{read_container, write_container, TensorSpec};
pub use tokenizer::{token_id, tokenize, TokenizerConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in parameter tensor {0}")]
    NonFinite(&'static str),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("gradient of length {found} for embeddings of dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    #[serde(flatten)]
    pub tokenizer: TokenizerConfig,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            embed_dim: 128,
            hidden_dim: 256,
            output_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tokenizer.is_valid() {
            return Err(EncoderError::InvalidConfig(format!(
                "hash_vocab_size must be >= 2 and max_length >= 1, got {:?}",
                self.tokenizer
            )));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(EncoderError::InvalidConfig(
                "layer widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(name, shape)` of every tensor, in storage order.
    pub fn shapes(&self) -> [(&'static str, Vec<usize>); 5] {
        [
            (
                "embedding",
                vec![self.tokenizer.hash_vocab_size, self.embed_dim],
            ),
            ("w1", vec![self.hidden_dim, self.embed_dim]),
            ("b1", vec![self.hidden_dim]),
            ("w2", vec![self.output_dim, self.hidden_dim]),
            ("b2", vec![self.output_dim]),
        ]
    }
}

pub const TENSOR_NAMES: [&str; 5] = ["embedding", "w1", "b1", "w2", "b2"];

/// A d-dimensional encoder output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: [Vec<f32>; 5],
    version: u64,
    seed: u64,
    finite: bool,
}

impl EncoderParams {
    /// Uniform in `±1/sqrt(fan_in)` with zero biases. Embedding rows are
    /// addressed by one-hot inputs, so their fan-in is 1.
    pub fn init(seed: u64, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |len: usize, fan_in: usize| -> Vec<f32> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..len)
                .map(|_| rng.gen_range(-bound..=bound) as f32)
                .collect()
        };
        let v = config.tokenizer.hash_vocab_size;
        let (de, dh, d) = (config.embed_dim, config.hidden_dim, config.output_dim);
        let embedding = uniform(v * de, 1);
        let w1 = uniform(dh * de, de);
        let w2 = uniform(d * dh, dh);
        Ok(Self {
            config,
            tensors: [embedding, w1, vec![0.0; dh], w2, vec![0.0; d]],
            version: 0,
            seed,
            finite: true,
        })
    }

    pub(crate) fn from_parts(
        config: EncoderConfig,
        tensors: [Vec<f32>; 5],
        version: u64,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        for ((name, shape), t) in config.shapes().iter().zip(&tensors) {
            let expected: usize = shape.iter().product();
            if t.len() != expected {
                return Err(EncoderError::ShapeMismatch(format!(
                    "{name}: expected {expected} values, found {}",
                    t.len()
                )));
            }
        }
        let p = Self {
            config,
            tensors,
            version,
            seed,
            finite: true,
        };
        if let Some(name) = p.first_non_finite() {
            return Err(EncoderError::NonFinite(name));
        }
        Ok(p)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.output_dim
    }

    /// Bumped on every optimizer update; entity indexes record it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[Vec<f32>; 5] {
        &self.tensors
    }

    /// Mutable access to all tensors. Finiteness is re-checked and the
    /// version bumped when the guard is dropped.
    pub fn tensors_mut(&mut self) -> TensorsMut<'_> {
        TensorsMut { params: self }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        TENSOR_NAMES
            .iter()
            .zip(&self.tensors)
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| *n)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        tokenize(text, &self.config.tokenizer)
    }

    pub fn encode(&self, ids: &[u32]) -> Result<Embedding> {
        Ok(self.forward(ids)?.output)
    }

    pub fn encode_text(&self, text: &str) -> Result<Embedding> {
        self.encode(&self.tokenize(text))
    }

    /// Forward pass keeping the activations needed by [`Self::accumulate`].
    pub fn forward(&self, ids: &[u32]) -> Result<ForwardCache> {
        if !self.finite {
            return Err(EncoderError::NonFinite(
                self.first_non_finite().unwrap_or("unknown"),
            ));
        }
        let EncoderConfig {
            embed_dim: de,
            hidden_dim: dh,
            output_dim: d,
            ..
        } = self.config;
        let vocab = self.config.tokenizer.hash_vocab_size;
        let [emb, w1, b1, w2, b2] = &self.tensors;

        let mut pooled = vec![0.0f64; de];
        for &id in ids {
            if id as usize >= vocab {
                return Err(EncoderError::TokenOutOfRange { id, vocab });
            }
            let row = &emb[id as usize * de..(id as usize + 1) * de];
            for (p, &x) in pooled.iter_mut().zip(row) {
                *p += f64::from(x);
            }
        }
        if !ids.is_empty() {
            let inv = 1.0 / ids.len() as f64;
            pooled.iter_mut().for_each(|p| *p *= inv);
        }

        let hidden: Vec<f64> = (0..dh)
            .map(|j| {
                let row = &w1[j * de..(j + 1) * de];
                let a = f64::from(b1[j]) + dot_mixed(row, &pooled);
                a.tanh()
            })
            .collect();
        let output: Vec<f64> = (0..d)
            .map(|k| f64::from(b2[k]) + dot_mixed(&w2[k * dh..(k + 1) * dh], &hidden))
            .collect();
        Ok(ForwardCache {
            ids: ids.to_vec(),
            pooled,
            hidden,
            output: Embedding(output),
        })
    }

    /// Adds the gradient of `upstream · Enc(ids)` to `grads`.
    pub fn accumulate(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut ParamGradients,
    ) -> Result<()> {
        let EncoderConfig {
            embed_dim: de,
            hidden_dim: dh,
            output_dim: d,
            ..
        } = self.config;
        if upstream.len() != d {
            return Err(EncoderError::DimensionMismatch {
                expected: d,
                found: upstream.len(),
            });
        }
        let [_, w1, _, w2, _] = &self.tensors;
        let [g_emb, g_w1, g_b1, g_w2, g_b2] = &mut grads.tensors;

        let mut d_hidden = vec![0.0f64; dh];
        for k in 0..d {
            let g = upstream[k];
            if g == 0.0 {
                continue;
            }
            g_b2[k] += g;
            let row_w = &w2[k * dh..(k + 1) * dh];
            let row_g = &mut g_w2[k * dh..(k + 1) * dh];
            for j in 0..dh {
                row_g[j] += g * cache.hidden[j];
                d_hidden[j] += g * f64::from(row_w[j]);
            }
        }
        let mut d_pooled = vec![0.0f64; de];
        for j in 0..dh {
            let h = cache.hidden[j];
            let da = d_hidden[j] * (1.0 - h * h);
            if da == 0.0 {
                continue;
            }
            g_b1[j] += da;
            let row_w = &w1[j * de..(j + 1) * de];
            let row_g = &mut g_w1[j * de..(j + 1) * de];
            for i in 0..de {
                row_g[i] += da * cache.pooled[i];
                d_pooled[i] += da * f64::from(row_w[i]);
            }
        }
        if !cache.ids.is_empty() {
            let inv = 1.0 / cache.ids.len() as f64;
            for &id in &cache.ids {
                let row = &mut g_emb[id as usize * de..(id as usize + 1) * de];
                for (g, &dp) in row.iter_mut().zip(&d_pooled) {
                    *g += dp * inv;
                }
            }
        }
        grads.count += 1;
        Ok(())
    }

    /// Summed parameter gradients of `Σ_b upstream_b · Enc(ids_b)`.
    pub fn backward(&self, batch: &[(Vec<u32>, Vec<f64>)]) -> Result<ParamGradients> {
        let mut grads = ParamGradients::zeros(&self.config);
        for (ids, upstream) in batch {
            if upstream.len() != self.dim() {
                return Err(EncoderError::DimensionMismatch {
                    expected: self.dim(),
                    found: upstream.len(),
                });
            }
            let cache = self.forward(ids)?;
            self.accumulate(&cache, upstream, &mut grads)?;
        }
        Ok(grads)
    }
}

/// Eight interleaved partial sums, combined in a fixed order.
fn dot_mixed(a: &[f32], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| f64::from(x) * y)
        .sum();
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += f64::from(xa[i]) * xb[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Write guard returned by [`EncoderParams::tensors_mut`].
pub struct TensorsMut<'a> {
    params: &'a mut EncoderParams,
}

impl std::ops::Deref for TensorsMut<'_> {
    type Target = [Vec<f32>; 5];
    fn deref(&self) -> &Self::Target {
        &self.params.tensors
    }
}

impl std::ops::DerefMut for TensorsMut<'_> {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.params.tensors
    }
}

impl Drop for TensorsMut<'_> {
    fn drop(&mut self) {
        self.params.finite = self.params.first_non_finite().is_none();
        self.params.version += 1;
    }
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ids: Vec<u32>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    pub output: Embedding,
}

/// Gradient buffers shaped like [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    tensors: [Vec<f64>; 5],
    count: usize,
}

impl ParamGradients {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let shapes = config.shapes();
        let make = |i: usize| vec![0.0; shapes[i].1.iter().product()];
        Self {
            tensors: [make(0), make(1), make(2), make(3), make(4)],
            count: 0,
        }
    }

    /// Number of backward contributions accumulated.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn tensors(&self) -> &[Vec<f64>; 5] {
        &self.tensors
    }

    pub fn is_compatible(&self, params: &EncoderParams) -> bool {
        self.tensors
            .iter()
            .zip(params.tensors())
            .all(|(g, p)| g.len() == p.len())
    }

    pub fn add_assign(&mut self, other: &ParamGradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.count += other.count;
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors
            .iter_mut()
            .for_each(|t| t.iter_mut().for_each(|x| *x *= factor));
    }

    pub fn clear(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(0.0));
        self.count = 0;
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[cfg(test)]
pub(crate) fn tiny_config(vocab: usize, de: usize, dh: usize, d: usize) -> EncoderConfig {
    EncoderConfig {
        tokenizer: TokenizerConfig {
            hash_vocab_size: vocab,
            max_length: 16,
        },
        embed_dim: de,
        hidden_dim: dh,
        output_dim: d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    #[test]
    fn zero_params_give_zero_output() {
        let cfg = tiny_config(8, 3, 4, 2);
        let mut p = EncoderParams::init(1, cfg).unwrap();
        p.tensors_mut().iter_mut().for_each(|t| t.fill(0.0));
        assert_eq!(p.encode(&[1, 2, 3]).unwrap(), Embedding::zeros(2));
        assert_eq!(p.encode(&[]).unwrap(), Embedding::zeros(2));
    }

    #[test]
    fn identical_ids_identical_embeddings() {
        let p = EncoderParams::init(3, tiny_config(50, 6, 7, 5)).unwrap();
        assert_eq!(p.encode(&[4, 9, 9]).unwrap(), p.encode(&[4, 9, 9]).unwrap());
    }

    #[test]
    fn hand_computed_two_by_two() {
        // vocab 2, all widths 2. Token 1 has embedding (0.5, -1).
        // a = W1 x + b1 = [[1, 2], [0, -1]] (0.5, -1) + (0.25, 0) = (-1.25, 1)
        // h = tanh(a); y = [[1, 0], [2, -1]] h + (0, 0.5)
        let cfg = tiny_config(2, 2, 2, 2);
        let mut p = EncoderParams::init(0, cfg).unwrap();
        {
            let mut t = p.tensors_mut();
            t[0] = vec![0.0, 0.0, 0.5, -1.0];
            t[1] = vec![1.0, 2.0, 0.0, -1.0];
            t[2] = vec![0.25, 0.0];
            t[3] = vec![1.0, 0.0, 2.0, -1.0];
            t[4] = vec![0.0, 0.5];
        }
        let y = p.encode(&[1]).unwrap();
        let h0 = (-1.25f64).tanh();
        let h1 = 1.0f64.tanh();
        assert!((y.0[0] - h0).abs() < 1e-15);
        assert!((y.0[1] - (2.0 * h0 - h1 + 0.5)).abs() < 1e-15);
        // -0.848283639957513 and -2.958148... from the closed forms above
        assert!((y.0[0] + 0.848_283_639_957_513).abs() < 1e-12);
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let mut p = EncoderParams::init(0, tiny_config(4, 2, 2, 2)).unwrap();
        p.tensors_mut()[1][0] = f32::INFINITY;
        assert!(matches!(p.encode(&[0]), Err(EncoderError::NonFinite("w1"))));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = tiny_config(64, 64, 32, 16);
        let a = EncoderParams::init(7, cfg).unwrap();
        let b = EncoderParams::init(7, cfg).unwrap();
        let c = EncoderParams::init(8, cfg).unwrap();
        assert_eq!(a.tensors(), b.tensors());
        assert_ne!(a.tensors(), c.tensors());
        // w1 has fan-in 64, so every entry lies within 1/8.
        assert!(a.tensors()[1].iter().all(|x| x.abs() <= 0.125));
        assert!(a.tensors()[2].iter().all(|&x| x == 0.0));
        assert!(a.tensors()[4].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let p = EncoderParams::init(2, tiny_config(10, 3, 4, 2)).unwrap();
        let g = p.backward(&[(vec![1, 5], vec![0.0, 0.0])]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(matches!(
            p.backward(&[(vec![1], vec![1.0])]),
            Err(EncoderError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn batch_gradient_is_sum_of_singletons() {
        let p = EncoderParams::init(5, tiny_config(10, 3, 4, 2)).unwrap();
        let a = (vec![1, 2, 2], vec![0.3, -1.0]);
        let b = (vec![7], vec![2.0, 0.5]);
        let both = p.backward(&[a.clone(), b.clone()]).unwrap();
        let mut sum = p.backward(&[a]).unwrap();
        sum.add_assign(&p.backward(&[b]).unwrap());
        for (x, y) in both.tensors().iter().flatten().zip(sum.tensors().iter().flatten()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(both.count(), 2);
    }

    /// Central differences over every parameter of `u · Enc(ids)`.
    fn finite_difference(p: &EncoderParams, ids: &[u32], u: &[f64], eps: f64) -> Vec<Vec<f64>> {
        let objective = |q: &EncoderParams| -> f64 {
            q.encode(ids).unwrap().0.iter().zip(u).map(|(a, b)| a * b).sum()
        };
        let mut out = Vec::new();
        for t in 0..5 {
            let mut grads = Vec::with_capacity(p.tensors()[t].len());
            for i in 0..p.tensors()[t].len() {
                let x = p.tensors()[t][i];
                let mut plus = p.clone();
                plus.tensors_mut()[t][i] = (f64::from(x) + eps) as f32;
                let mut minus = p.clone();
                minus.tensors_mut()[t][i] = (f64::from(x) - eps) as f32;
                let h = f64::from(plus.tensors()[t][i]) - f64::from(minus.tensors()[t][i]);
                grads.push((objective(&plus) - objective(&minus)) / h);
            }
            out.push(grads);
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for instance in 0..100u64 {
            let p = EncoderParams::init(instance, tiny_config(6, 3, 4, 2)).unwrap();
            let len = rng.gen_range(1..5);
            let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..6)).collect();
            let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let analytic = p.backward(&[(ids.clone(), u.clone())]).unwrap();
            let numeric = finite_difference(&p, &ids, &u, 1e-4);
            for (ta, tn) in analytic.tensors().iter().zip(&numeric) {
                for (a, n) in ta.iter().zip(tn) {
                    assert!(rel_err(*a, *n) < 1e-4, "instance {instance}: {a} vs {n}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn mean_pooling_is_order_invariant(ids in prop::collection::vec(0u32..20, 1..8), rot in 0usize..8) {
            let p = EncoderParams::init(11, tiny_config(20, 4, 5, 3)).unwrap();
            let mut shuffled = ids.clone();
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
            let a = p.encode(&ids).unwrap();
            let b = p.encode(&shuffled).unwrap();
            for (x, y) in a.0.iter().zip(&b.0) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn changing_the_multiset_changes_the_embedding(ids in prop::collection::vec(0u32..20, 1..8), extra in 0u32..20) {
            let p = EncoderParams::init(11, tiny_config(20, 4, 5, 3)).unwrap();
            let mut more = ids.clone();
            more.push(extra);
            // Adding a token changes the mean unless the new token's row equals the old mean.
            let a = p.encode(&ids).unwrap();
            let b = p.encode(&more).unwrap();
            let all_same = ids.iter().all(|&i| i == extra);
            prop_assert_eq!(a == b, all_same);
        }
    }
}
