//! Synthetic frames-to-tokens corpus.
//!
//! Every token owns a fixed prototype vector. A transcript is drawn from a seeded Markov
//! chain over tokens, and each token is rendered as a run of noisy copies of its prototype.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const STREAM_PROTOTYPES: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_DEV: u64 = 2;
const STREAM_TEST: u64 = 3;
const STREAM_LM: u64 = 4;
const STREAM_CHAIN: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub d_feat: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_lm: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Inclusive range of raw frames per token.
    pub frames_per_token: (usize, usize),
    /// Inclusive range of transcript lengths.
    pub token_len: (usize, usize),
    pub markov_order: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            d_feat: 8,
            n_train: 2000,
            n_dev: 200,
            n_test: 200,
            n_lm: 2000,
            seed: 1,
            noise_sigma: 0.3,
            frames_per_token: (8, 16),
            token_len: (3, 12),
            markov_order: 1,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        let (fmin, fmax) = self.frames_per_token;
        let (lmin, lmax) = self.token_len;
        if self.vocab_size < 4 {
            return Err(Error::invalid(format!("vocab_size {} < 4", self.vocab_size)));
        }
        if self.n_train + self.n_dev + self.n_test == 0 {
            return Err(Error::invalid("corpus needs at least one utterance"));
        }
        if fmin == 0 || fmin > fmax {
            return Err(Error::invalid(format!("degenerate frames_per_token range {fmin}..={fmax}")));
        }
        if lmin == 0 || lmin > lmax {
            return Err(Error::invalid(format!("degenerate token_len range {lmin}..={lmax}")));
        }
        if self.d_feat == 0 || self.markov_order == 0 || self.markov_order > 4 {
            return Err(Error::invalid("d_feat must be positive and markov_order in 1..=4"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    /// `[T × d_feat]`.
    pub feats: Tensor,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub utts: Vec<Utterance>,
    /// Frames emitted for each token, parallel to `utts[i].tokens`.
    pub durations: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub prototypes: Tensor,
    pub train: Split,
    pub dev: Split,
    pub test: Split,
    /// Token sequences for LM pretraining, disjoint samples from the same chain.
    pub lm: Vec<Vec<usize>>,
}

/// Order-k Markov chain whose transition rows are derived from the seed and context.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    vocab: usize,
    order: usize,
    rows: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn new(vocab: usize, order: usize, seed: u64) -> Self {
        let n_ctx = (vocab + 1).pow(order as u32);
        let rows = (0..n_ctx)
            .map(|ctx| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(STREAM_CHAIN + ctx as u64);
                let w: Vec<f64> = (0..vocab)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (2.0 * z).exp()
                    })
                    .collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
            .collect();
        Self { vocab, order, rows }
    }

    /// Index of the context formed by the last `order` tokens; missing history is a
    /// dedicated start symbol.
    fn context(&self, history: &[usize]) -> usize {
        let start = self.vocab;
        (0..self.order).fold(0, |acc, i| {
            let back = self.order - i;
            let tok = if history.len() >= back { history[history.len() - back] } else { start };
            acc * (self.vocab + 1) + tok
        })
    }

    pub fn next_probs(&self, history: &[usize]) -> &[f64] {
        &self.rows[self.context(history)]
    }

    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len {
            let p = self.next_probs(&seq);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = self.vocab - 1;
            for (k, &pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    tok = k;
                    break;
                }
            }
            seq.push(tok);
        }
        seq
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let prototypes = Tensor::randn(&[cfg.vocab_size, cfg.d_feat], 1.0, &mut stream(cfg.seed, STREAM_PROTOTYPES));
    let chain = MarkovChain::new(cfg.vocab_size, cfg.markov_order, cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;

    let split = |name: &str, n: usize, id: u64| {
        let mut rng = stream(cfg.seed, id);
        let mut out = Split::default();
        for i in 0..n {
            let len = rng.random_range(cfg.token_len.0..=cfg.token_len.1);
            let tokens = chain.sample(len, &mut rng);
            let durations: Vec<usize> = tokens
                .iter()
                .map(|_| rng.random_range(cfg.frames_per_token.0..=cfg.frames_per_token.1))
                .collect();
            let total: usize = durations.iter().sum();
            let mut data = Vec::with_capacity(total * cfg.d_feat);
            for (&tok, &r) in tokens.iter().zip(&durations) {
                for _ in 0..r {
                    data.extend(prototypes.row(tok).iter().map(|&p| p + noise.sample(&mut rng)));
                }
            }
            out.utts.push(Utterance {
                utt_id: format!("{name}{i:05}"),
                feats: Tensor::new(vec![total, cfg.d_feat], data).expect("consistent shape"),
                tokens,
            });
            out.durations.push(durations);
        }
        out
    };
    let train = split("train", cfg.n_train, STREAM_TRAIN);
    let dev = split("dev", cfg.n_dev, STREAM_DEV);
    let test = split("test", cfg.n_test, STREAM_TEST);

    let mut rng = stream(cfg.seed, STREAM_LM);
    let lm = (0..cfg.n_lm)
        .map(|_| {
            let len = rng.random_range(cfg.token_len.0..=cfg.token_len.1);
            chain.sample(len, &mut rng)
        })
        .collect();

    Ok(Corpus {
        config: cfg.clone(),
        prototypes,
        train,
        dev,
        test,
        lm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, sigma: f64) -> CorpusConfig {
        CorpusConfig {
            n_train: 30,
            n_dev: 5,
            n_test: 5,
            n_lm: 20,
            seed,
            noise_sigma: sigma,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = gen_corpus(&small(3, 0.3)).unwrap();
        let b = gen_corpus(&small(3, 0.3)).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.train.utts.iter().zip(&b.train.utts) {
            assert!(x.feats.bitwise_eq(&y.feats));
        }
        let c = gen_corpus(&small(4, 0.3)).unwrap();
        assert_ne!(a.train.utts[0].tokens, c.train.utts[0].tokens);
    }

    #[test]
    fn frame_counts_within_bounds() {
        let cfg = small(1, 0.3);
        let c = gen_corpus(&cfg).unwrap();
        for u in c.train.utts.iter().chain(&c.dev.utts).chain(&c.test.utts) {
            let l = u.tokens.len();
            let t = u.feats.shape()[0];
            assert!((3..=12).contains(&l));
            assert!(t >= l * cfg.frames_per_token.0 && t <= l * cfg.frames_per_token.1);
            assert!(u.tokens.iter().all(|&k| k < cfg.vocab_size));
        }
    }

    #[test]
    fn zero_noise_is_separable() {
        let c = gen_corpus(&small(2, 0.0)).unwrap();
        for (u, durs) in c.train.utts.iter().zip(&c.train.durations) {
            let nearest = |row: &[f64]| {
                (0..c.config.vocab_size)
                    .min_by(|&a, &b| {
                        let da: f64 = c.prototypes.row(a).iter().zip(row).map(|(p, x)| (p - x).powi(2)).sum();
                        let db: f64 = c.prototypes.row(b).iter().zip(row).map(|(p, x)| (p - x).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap()
            };
            let mut t = 0;
            let mut decoded = Vec::new();
            for &r in durs {
                let labels: Vec<usize> = (t..t + r).map(|i| nearest(u.feats.row(i))).collect();
                assert!(labels.iter().all(|&k| k == labels[0]));
                decoded.push(labels[0]);
                t += r;
            }
            assert_eq!(decoded, u.tokens);
        }
    }

    #[test]
    fn chain_rows_are_distributions() {
        let m = MarkovChain::new(5, 2, 9);
        for h in [vec![], vec![1], vec![3, 4], vec![0, 0, 2]] {
            let s: f64 = m.next_probs(&h).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_ne!(m.next_probs(&[1, 2]), m.next_probs(&[2, 1]));
    }

    #[test]
    fn degenerate_ranges_rejected() {
        let mut cfg = small(1, 0.3);
        cfg.frames_per_token = (5, 4);
        assert!(gen_corpus(&cfg).is_err());
        let mut cfg = small(1, 0.3);
        cfg.vocab_size = 3;
        assert!(gen_corpus(&cfg).is_err());
        let mut cfg = small(1, 0.3);
        cfg.token_len = (0, 4);
        assert!(gen_corpus(&cfg).is_err());
    }
}
