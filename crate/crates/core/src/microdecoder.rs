//! A small seeded transformer decoder with a reusable key/value cache.
//!
//! Attention work is counted as attended `(query, key)` position pairs per
//! layer. A sequence of length `m` costs `m(m+1)/2` per layer without a
//! cache; extending a cached prefix of length `p` to length `m` costs
//! `sum_{i=p+1..m} i`. Positions are always computed one at a time through
//! the same code path, so cached and uncached runs produce bit-identical
//! logits.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("invalid decoder config: {0}")]
    Config(String),
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    Empty,
    #[error("cache belongs to decoder {cache} but was used with decoder {decoder}")]
    CacheMismatch { cache: u64, decoder: u64 },
    #[error("cached tokens are not a prefix of the input")]
    CachePrefixMismatch,
    #[error("no suffixes given")]
    NoSuffixes,
    #[error("cost inputs must be positive (m_s={m_s}, m_t={m_t}, n_c={n_c})")]
    NonPositive { m_s: usize, m_t: usize, n_c: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicroDecoderConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for MicroDecoderConfig {
    fn default() -> Self {
        MicroDecoderConfig {
            vocab: 256,
            dim: 32,
            layers: 2,
            heads: 4,
            max_seq: 1024,
            seed: 0,
        }
    }
}

impl MicroDecoderConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        let c = self;
        if c.vocab == 0 || c.dim == 0 || c.layers == 0 || c.heads == 0 || c.max_seq == 0 {
            return Err(DecoderError::Config("all sizes must be positive".into()));
        }
        if !c.dim.is_multiple_of(c.heads) {
            return Err(DecoderError::Config(format!(
                "dim {} not divisible by heads {}",
                c.dim, c.heads
            )));
        }
        Ok(())
    }
}

struct Layer {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    w_up: Vec<f64>,
    w_down: Vec<f64>,
}

pub struct MicroDecoder {
    id: u64,
    config: MicroDecoderConfig,
    embed: Vec<f64>,
    positions: Vec<f64>,
    layers: Vec<Layer>,
    unembed: Vec<f64>,
}

static NEXT_DECODER_ID: AtomicU64 = AtomicU64::new(1);

/// Per-layer cached keys and values, `len` positions each.
#[derive(Clone, Debug)]
pub struct KvCache {
    decoder_id: u64,
    tokens: Vec<usize>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    last_logits: Option<Vec<f64>>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Drop everything after the first `len` positions.
    pub fn truncate(&mut self, len: usize, dim: usize) {
        if len >= self.tokens.len() {
            return;
        }
        self.tokens.truncate(len);
        for k in &mut self.keys {
            k.truncate(len * dim);
        }
        for v in &mut self.values {
            v.truncate(len * dim);
        }
        self.last_logits = None;
    }
}

/// Attended `(query, key)` pairs, per layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub per_layer: Vec<u64>,
}

impl OpCount {
    fn new(layers: usize) -> Self {
        OpCount {
            per_layer: vec![0; layers],
        }
    }

    pub fn total(&self) -> u64 {
        self.per_layer.iter().sum()
    }

    /// The common per-layer count. Every layer attends over the same
    /// positions, so all entries agree.
    pub fn attended_per_layer(&self) -> u64 {
        let first = self.per_layer.first().copied().unwrap_or(0);
        debug_assert!(self.per_layer.iter().all(|&c| c == first));
        first
    }

    fn add(&mut self, other: &OpCount) {
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            *a += b;
        }
    }
}

fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let scale = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * scale).collect()
}

impl MicroDecoder {
    pub fn new(config: MicroDecoderConfig) -> Result<Self, DecoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let hidden = 2 * d;
        let mut init = |n: usize, fan_in: usize| -> Vec<f64> {
            let a = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..a)).collect()
        };
        let embed = init(config.vocab * d, 1);
        let positions = init(config.max_seq * d, 4);
        let layers = (0..config.layers)
            .map(|_| Layer {
                wq: init(d * d, d),
                wk: init(d * d, d),
                wv: init(d * d, d),
                wo: init(d * d, d),
                w_up: init(hidden * d, d),
                w_down: init(d * hidden, hidden),
            })
            .collect();
        let unembed = init(config.vocab * d, d);
        Ok(MicroDecoder {
            id: NEXT_DECODER_ID.fetch_add(1, Ordering::Relaxed),
            config,
            embed,
            positions,
            layers,
            unembed,
        })
    }

    pub fn config(&self) -> &MicroDecoderConfig {
        &self.config
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache {
            decoder_id: self.id,
            tokens: Vec::new(),
            keys: vec![Vec::new(); self.config.layers],
            values: vec![Vec::new(); self.config.layers],
            last_logits: None,
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), DecoderError> {
        if tokens.is_empty() {
            return Err(DecoderError::Empty);
        }
        if tokens.len() > self.config.max_seq {
            return Err(DecoderError::TooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(DecoderError::TokenOutOfRange {
                token,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Process the next position, appending its keys/values to `cache`.
    fn step(&self, token: usize, cache: &mut KvCache, ops: &mut OpCount) -> Vec<f64> {
        let d = self.config.dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let pos = cache.tokens.len();
        let mut x: Vec<f64> = self.embed[token * d..(token + 1) * d]
            .iter()
            .zip(&self.positions[pos * d..(pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let scale = 1.0 / (dh as f64).sqrt();
        for (l, layer) in self.layers.iter().enumerate() {
            let h = rms_norm(&x);
            let q = matvec(&layer.wq, &h, d);
            cache.keys[l].extend(matvec(&layer.wk, &h, d));
            cache.values[l].extend(matvec(&layer.wv, &h, d));
            let seen = pos + 1;
            ops.per_layer[l] += seen as u64;
            let keys = &cache.keys[l];
            let values = &cache.values[l];
            let mut attended = vec![0.0; d];
            for head in 0..heads {
                let span = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = (0..seen)
                    .map(|j| {
                        q[span.clone()]
                            .iter()
                            .zip(&keys[j * d + span.start..j * d + span.end])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    let p = e / total;
                    for (o, v) in attended[span.clone()]
                        .iter_mut()
                        .zip(&values[j * d + span.start..j * d + span.end])
                    {
                        *o += p * v;
                    }
                }
            }
            for (xi, oi) in x.iter_mut().zip(matvec(&layer.wo, &attended, d)) {
                *xi += oi;
            }
            let up: Vec<f64> = matvec(&layer.w_up, &rms_norm(&x), 2 * d)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            for (xi, di) in x.iter_mut().zip(matvec(&layer.w_down, &up, d)) {
                *xi += di;
            }
        }
        cache.tokens.push(token);
        matvec(&self.unembed, &rms_norm(&x), self.config.vocab)
    }

    /// Logits at the last position of `tokens`.
    ///
    /// With a cache, its tokens must be a prefix of `tokens`; only the
    /// positions after it are computed and the cache is extended to cover
    /// all of `tokens`.
    pub fn forward_logits(
        &self,
        tokens: &[usize],
        cache: Option<&mut KvCache>,
    ) -> Result<(Vec<f64>, OpCount), DecoderError> {
        self.check_tokens(tokens)?;
        let mut scratch;
        let cache = match cache {
            Some(c) => c,
            None => {
                scratch = self.new_cache();
                &mut scratch
            }
        };
        if cache.decoder_id != self.id {
            return Err(DecoderError::CacheMismatch {
                cache: cache.decoder_id,
                decoder: self.id,
            });
        }
        if cache.tokens.len() > tokens.len() || cache.tokens[..] != tokens[..cache.tokens.len()] {
            return Err(DecoderError::CachePrefixMismatch);
        }
        let mut ops = OpCount::new(self.config.layers);
        if cache.tokens.len() == tokens.len() {
            if let Some(logits) = &cache.last_logits {
                return Ok((logits.clone(), ops));
            }
            // nothing cached at the last position: recompute it
            let last = tokens.len() - 1;
            cache.truncate(last, self.config.dim);
        }
        let mut logits = Vec::new();
        for &t in &tokens[cache.tokens.len()..] {
            logits = self.step(t, cache, &mut ops);
        }
        cache.last_logits = Some(logits.clone());
        Ok((logits, ops))
    }

    /// Logits at every position, computed without a cache.
    pub fn forward_all_logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>, DecoderError> {
        self.check_tokens(tokens)?;
        let mut cache = self.new_cache();
        let mut ops = OpCount::new(self.config.layers);
        Ok(tokens.iter().map(|&t| self.step(t, &mut cache, &mut ops)).collect())
    }
}

/// Attention cost of scoring several suffixes after one prefix, per layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub m_s: usize,
    /// Length of each suffix.
    pub m_t: Vec<usize>,
    pub n_c: usize,
    /// Attended pairs when every full sequence runs from scratch.
    pub naive_ops: u64,
    /// Attended pairs when the prefix runs once and its cache is reused.
    pub cached_ops: u64,
}

fn triangle(n: u64) -> u64 {
    n * (n + 1) / 2
}

/// Closed-form per-layer costs for a prefix of `m_s` tokens and suffixes of
/// the given lengths: `(naive, cached)`.
pub fn predicted_cost_lengths(m_s: usize, m_t: &[usize]) -> (u64, u64) {
    let s = m_s as u64;
    let naive = m_t.iter().map(|&t| triangle(s + t as u64)).sum();
    let cached = triangle(s)
        + m_t
            .iter()
            .map(|&t| s * t as u64 + triangle(t as u64))
            .sum::<u64>();
    (naive, cached)
}

/// `naive = n_c (m_s+m_t)(m_s+m_t+1)/2` and
/// `cached = m_s(m_s+1)/2 + n_c sum_{i=1..m_t} (m_s+i)`.
pub fn predicted_cost(m_s: usize, m_t: usize, n_c: usize) -> Result<(u64, u64), DecoderError> {
    if m_s == 0 || m_t == 0 || n_c == 0 {
        return Err(DecoderError::NonPositive { m_s, m_t, n_c });
    }
    Ok(predicted_cost_lengths(m_s, &vec![m_t; n_c]))
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// Last-position logits for each suffix, in input order.
    pub logits: Vec<Vec<f64>>,
    /// Attended pairs actually executed.
    pub measured: OpCount,
}

fn check_suffixes(suffixes: &[Vec<usize>]) -> Result<(), DecoderError> {
    if suffixes.is_empty() {
        return Err(DecoderError::NoSuffixes);
    }
    if suffixes.iter().any(Vec::is_empty) {
        return Err(DecoderError::Empty);
    }
    Ok(())
}

/// Run the prefix once, then each suffix on top of its cache.
pub fn shared_prefix_batch(
    decoder: &MicroDecoder,
    prefix: &[usize],
    suffixes: &[Vec<usize>],
) -> Result<(BatchOutput, CostReport), DecoderError> {
    check_suffixes(suffixes)?;
    let mut cache = decoder.new_cache();
    let (_, mut measured) = decoder.forward_logits(prefix, Some(&mut cache))?;
    let mut logits = Vec::with_capacity(suffixes.len());
    let mut full = prefix.to_vec();
    for suffix in suffixes {
        full.truncate(prefix.len());
        full.extend(suffix);
        let (l, ops) = decoder.forward_logits(&full, Some(&mut cache))?;
        measured.add(&ops);
        logits.push(l);
        cache.truncate(prefix.len(), decoder.config.dim);
    }
    let lengths: Vec<usize> = suffixes.iter().map(Vec::len).collect();
    let (naive_ops, _) = predicted_cost_lengths(prefix.len(), &lengths);
    let report = CostReport {
        m_s: prefix.len(),
        m_t: lengths,
        n_c: suffixes.len(),
        naive_ops,
        cached_ops: measured.attended_per_layer(),
    };
    Ok((BatchOutput { logits, measured }, report))
}

/// Run every `prefix + suffix` from scratch.
pub fn uncached_batch(
    decoder: &MicroDecoder,
    prefix: &[usize],
    suffixes: &[Vec<usize>],
) -> Result<BatchOutput, DecoderError> {
    check_suffixes(suffixes)?;
    let mut measured = OpCount::new(decoder.config.layers);
    let mut logits = Vec::with_capacity(suffixes.len());
    for suffix in suffixes {
        let full: Vec<usize> = prefix.iter().chain(suffix).copied().collect();
        let (l, ops) = decoder.forward_logits(&full, None)?;
        measured.add(&ops);
        logits.push(l);
    }
    Ok(BatchOutput { logits, measured })
}

/// Measured-vs-predicted comparison for one random workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KvBenchReport {
    pub report: CostReport,
    pub predicted_naive_ops: u64,
    pub predicted_cached_ops: u64,
    pub measured_naive_ops: u64,
    pub measured_cached_ops: u64,
    pub layers: usize,
    pub ratio: f64,
    pub counts_agree: bool,
    pub logits_identical: bool,
}

/// Random prefix of `m_s` tokens and `n_c` random suffixes of `m_t`
/// tokens, run both ways.
pub fn kv_bench(
    decoder: &MicroDecoder,
    m_s: usize,
    m_t: usize,
    n_c: usize,
    seed: u64,
) -> Result<KvBenchReport, DecoderError> {
    let (pred_naive, pred_cached) = predicted_cost(m_s, m_t, n_c)?;
    let vocab = decoder.config.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prefix: Vec<usize> = (0..m_s).map(|_| rng.random_range(0..vocab)).collect();
    let suffixes: Vec<Vec<usize>> = (0..n_c)
        .map(|_| (0..m_t).map(|_| rng.random_range(0..vocab)).collect())
        .collect();
    let (cached, report) = shared_prefix_batch(decoder, &prefix, &suffixes)?;
    let naive = uncached_batch(decoder, &prefix, &suffixes)?;
    let measured_naive_ops = naive.measured.attended_per_layer();
    let measured_cached_ops = cached.measured.attended_per_layer();
    Ok(KvBenchReport {
        counts_agree: measured_naive_ops == pred_naive
            && measured_cached_ops == pred_cached
            && report.naive_ops == pred_naive,
        logits_identical: cached.logits == naive.logits,
        ratio: pred_naive as f64 / pred_cached as f64,
        report,
        predicted_naive_ops: pred_naive,
        predicted_cached_ops: pred_cached,
        measured_naive_ops,
        measured_cached_ops,
        layers: decoder.config.layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decoder() -> MicroDecoder {
        MicroDecoder::new(MicroDecoderConfig::default()).unwrap()
    }

    #[test]
    fn cached_and_uncached_logits_identical() {
        let dec = decoder();
        let tokens = [5, 9, 200, 3, 17, 42, 8, 1];
        let (plain, _) = dec.forward_logits(&tokens, None).unwrap();
        let mut cache = dec.new_cache();
        dec.forward_logits(&tokens[..5], Some(&mut cache)).unwrap();
        let (cached, ops) = dec.forward_logits(&tokens, Some(&mut cache)).unwrap();
        assert_eq!(plain, cached);
        // positions 6, 7, 8 attend to 6 + 7 + 8 = 21 keys in each layer
        assert_eq!(ops.per_layer, vec![21, 21]);
    }

    #[test]
    fn single_token_costs_one_per_layer() {
        let (_, ops) = decoder().forward_logits(&[7], None).unwrap();
        assert_eq!(ops.per_layer, vec![1, 1]);
        assert_eq!(ops.total(), 2);
    }

    #[test]
    fn foreign_cache_rejected() {
        let a = decoder();
        let b = decoder();
        let mut cache = a.new_cache();
        a.forward_logits(&[1, 2], Some(&mut cache)).unwrap();
        assert!(matches!(
            b.forward_logits(&[1, 2, 3], Some(&mut cache)),
            Err(DecoderError::CacheMismatch { .. })
        ));
        assert!(matches!(
            a.forward_logits(&[9, 2, 3], Some(&mut cache)),
            Err(DecoderError::CachePrefixMismatch)
        ));
    }

    #[test]
    fn input_validation() {
        let dec = decoder();
        assert!(matches!(dec.forward_logits(&[256], None), Err(DecoderError::TokenOutOfRange { .. })));
        assert!(matches!(dec.forward_logits(&[], None), Err(DecoderError::Empty)));
        let bad = MicroDecoderConfig {
            dim: 30,
            heads: 4,
            ..MicroDecoderConfig::default()
        };
        assert!(MicroDecoder::new(bad).is_err());
        assert!(matches!(
            shared_prefix_batch(&dec, &[1, 2], &[]),
            Err(DecoderError::NoSuffixes)
        ));
    }

    #[test]
    fn closed_forms() {
        assert_eq!(predicted_cost(10, 2, 4).unwrap(), (312, 147));
        let (naive, cached) = predicted_cost(7, 3, 1).unwrap();
        assert_eq!(naive, cached);
        assert_eq!(cached, triangle(10));
        let r = |(n, c): (u64, u64)| n as f64 / c as f64;
        assert!(r(predicted_cost(100, 5, 50).unwrap()) > r(predicted_cost(100, 5, 5).unwrap()));
        assert!(predicted_cost(0, 1, 1).is_err());
    }

    #[test]
    fn batch_matches_closed_form_and_uncached_runs() {
        let dec = decoder();
        let prefix: Vec<usize> = (0..10).collect();
        let suffixes = vec![vec![11, 12], vec![13, 14], vec![15, 16], vec![17, 18]];
        let (out, report) = shared_prefix_batch(&dec, &prefix, &suffixes).unwrap();
        assert_eq!((report.naive_ops, report.cached_ops), (312, 147));
        let naive = uncached_batch(&dec, &prefix, &suffixes).unwrap();
        assert_eq!(naive.measured.attended_per_layer(), 312);
        assert_eq!(out.logits, naive.logits);
    }

    #[test]
    fn causal_masking() {
        let dec = decoder();
        let a = dec.forward_all_logits(&[3, 1, 4, 1, 5]).unwrap();
        let b = dec.forward_all_logits(&[3, 1, 4, 9, 2]).unwrap();
        assert_eq!(a[..3], b[..3]);
        assert_ne!(a[3], b[3]);
    }
}
