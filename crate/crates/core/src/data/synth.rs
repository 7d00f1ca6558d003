//! Desk-scale synthetic corpora with a planted moment per video and an
//! optional planted word co-occurrence bias.
//!
//! Every query names a noun, a verb and an object. The planted segment of its
//! video carries the sum of those three words' latent vectors; the frames on
//! either side carry a distractor triple. With probability `bias_strength` the
//! verb is the noun's fixed partner, which makes it predictable from the query
//! alone.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{CcrError, Result};
use crate::rng::rng_for;

use super::{tokenize, DatasetRecord, VideoFeatures, Vocab, DEFAULT_STOPWORDS};

const LATENT_STD: f64 = 0.577;
const NOISE_STD: f64 = 0.3;
const SEGMENT_FRAC: (f64, f64) = (0.25, 0.35);
const DURATION_S: (f64, f64) = (20.0, 40.0);
const STOPWORDS: [&str; 3] = ["the", "a", "in"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub query_len: usize,
    pub bias_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pairs: 50,
            frames: 32,
            feature_dim: 16,
            vocab_size: 40,
            query_len: 5,
            bias_strength: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(CcrError::Config(format!(
                "vocab_size {} < 8 leaves no room for reserved, stop and content words",
                self.vocab_size
            )));
        }
        if self.n_pairs == 0 || self.feature_dim == 0 {
            return Err(CcrError::Config("n_pairs and feature_dim must be positive".into()));
        }
        if self.frames < 4 {
            return Err(CcrError::Config(format!("frames {} < 4", self.frames)));
        }
        if self.query_len < 3 {
            return Err(CcrError::Config(format!(
                "query_len {} < 3 cannot hold noun, verb and object",
                self.query_len
            )));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(CcrError::Config(format!(
                "bias_strength {} outside [0, 1]",
                self.bias_strength
            )));
        }
        Ok(())
    }
}

/// Word inventory of a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub stopwords: Vec<String>,
    pub nouns: Vec<String>,
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
}

/// Observed frequency of the planted (noun, partner verb) pairing against the
/// frequency expected if verbs were independent of nouns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartnerStats {
    pub conditional: f64,
    pub marginal: f64,
    pub count: usize,
}

impl Lexicon {
    pub fn for_vocab_size(vocab_size: usize) -> Self {
        let words = vocab_size - 3;
        let n_stop = if words >= 12 { 3 } else { 1 };
        let content = words - n_stop;
        let nouns = content.div_ceil(3);
        let verbs = (content - nouns).div_ceil(2);
        let objects = content - nouns - verbs;
        Self {
            stopwords: STOPWORDS[..n_stop].iter().map(|s| s.to_string()).collect(),
            nouns: (0..nouns).map(|i| format!("noun{i}")).collect(),
            verbs: (0..verbs).map(|i| format!("verb{i}")).collect(),
            objects: (0..objects).map(|i| format!("object{i}")).collect(),
        }
    }

    pub fn partner(&self, noun: usize) -> usize {
        noun % self.verbs.len()
    }

    pub fn all_words(&self) -> impl Iterator<Item = &String> {
        self.stopwords
            .iter()
            .chain(&self.nouns)
            .chain(&self.verbs)
            .chain(&self.objects)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_words(self.all_words().cloned(), DEFAULT_STOPWORDS)
    }

    fn query_text(&self, noun: usize, verb: usize, object: usize, len: usize) -> String {
        let stop = |k: usize| self.stopwords[k % self.stopwords.len()].as_str();
        let mut words: Vec<&str> = Vec::with_capacity(len);
        let extra = len - 3;
        if extra >= 1 {
            words.push(stop(0));
        }
        words.push(&self.nouns[noun]);
        words.push(&self.verbs[verb]);
        if extra >= 2 {
            words.push(stop(0));
        }
        words.push(&self.objects[object]);
        for k in 0..extra.saturating_sub(2) {
            words.push(stop(k + 2));
        }
        words.join(" ")
    }

    /// Recounts the noun/partner-verb co-occurrence over query texts.
    pub fn partner_stats<'a>(&self, queries: impl IntoIterator<Item = &'a str>) -> PartnerStats {
        let noun_ix: HashMap<&str, usize> =
            self.nouns.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        let verb_ix: HashMap<&str, usize> =
            self.verbs.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        let mut noun_counts = vec![0usize; self.nouns.len()];
        let mut verb_counts = vec![0usize; self.verbs.len()];
        let mut hits = 0usize;
        let mut n = 0usize;
        for q in queries {
            let toks = tokenize(q);
            let noun = toks.iter().find_map(|t| noun_ix.get(t.as_str()).copied());
            let verb = toks.iter().find_map(|t| verb_ix.get(t.as_str()).copied());
            if let (Some(a), Some(b)) = (noun, verb) {
                n += 1;
                noun_counts[a] += 1;
                verb_counts[b] += 1;
                if b == self.partner(a) {
                    hits += 1;
                }
            }
        }
        if n == 0 {
            return PartnerStats {
                conditional: 0.0,
                marginal: 0.0,
                count: 0,
            };
        }
        let nf = n as f64;
        let marginal = noun_counts
            .iter()
            .enumerate()
            .map(|(a, &c)| (c as f64 / nf) * (verb_counts[self.partner(a)] as f64 / nf))
            .sum();
        PartnerStats {
            conditional: hits as f64 / nf,
            marginal,
            count: n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub pairs: Vec<(DatasetRecord, VideoFeatures)>,
    pub vocab: Vocab,
    pub lexicon: Lexicon,
}

fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

fn pick_other<R: Rng>(rng: &mut R, n: usize, avoid: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let k = rng.random_range(0..n - 1);
    if k >= avoid {
        k + 1
    } else {
        k
    }
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let lexicon = Lexicon::for_vocab_size(cfg.vocab_size);
    let vocab = lexicon.vocab();
    let dv = cfg.feature_dim;
    let t_len = cfg.frames;

    let mut latent_rng = rng_for(&[cfg.seed, 0]);
    let latent_dist = Normal::new(0.0, LATENT_STD).expect("valid std");
    let mut latent = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dv).map(|_| latent_dist.sample(&mut latent_rng)).collect())
            .collect()
    };
    let noun_lat = latent(lexicon.nouns.len());
    let verb_lat = latent(lexicon.verbs.len());
    let obj_lat = latent(lexicon.objects.len());
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");

    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        let mut rng = rng_for(&[cfg.seed, 1, i as u64]);
        let noun = rng.random_range(0..lexicon.nouns.len());
        let verb = if rng.random::<f64>() < cfg.bias_strength {
            lexicon.partner(noun)
        } else {
            rng.random_range(0..lexicon.verbs.len())
        };
        let object = rng.random_range(0..lexicon.objects.len());
        let text = lexicon.query_text(noun, verb, object, cfg.query_len);

        let duration_s = (rng.random_range(DURATION_S.0..DURATION_S.1) * 10.0).round() / 10.0;
        let frac = rng.random_range(SEGMENT_FRAC.0..SEGMENT_FRAC.1);
        let seg_len = ((frac * t_len as f64).round() as usize).clamp(2, t_len);
        let start = rng.random_range(0..=t_len - seg_len);
        let end = start + seg_len; // exclusive

        let mut frames = Mat::zeros(t_len, dv);
        for t in 0..t_len {
            for d in 0..dv {
                frames.set(t, d, noise.sample(&mut rng));
            }
        }
        let plant = |frames: &mut Mat, range: std::ops::Range<usize>, n: usize, v: usize, o: usize| {
            for t in range {
                for (d, x) in frames.row_mut(t).iter_mut().enumerate() {
                    *x += noun_lat[n][d] + verb_lat[v][d] + obj_lat[o][d];
                }
            }
        };
        plant(&mut frames, start..end, noun, verb, object);
        for range in [0..start, end..t_len] {
            if range.is_empty() {
                continue;
            }
            let dn = pick_other(&mut rng, lexicon.nouns.len(), noun);
            let dvb = pick_other(&mut rng, lexicon.verbs.len(), verb);
            let dob = pick_other(&mut rng, lexicon.objects.len(), object);
            plant(&mut frames, range, dn, dvb, dob);
        }
        let frames = frames.map(f32_exact);

        let at = |t: usize| t as f64 / (t_len - 1) as f64 * duration_s;
        let gt_span = [at(start), at(end - 1)];
        let video_id = format!("synth_{i:05}");
        let record = DatasetRecord {
            video_id: video_id.clone(),
            feature_path: format!("features/{video_id}.fmat").into(),
            query: vocab.encode(&text)?,
            gt_span: Some(gt_span),
            duration_s,
        };
        record.validate()?;
        pairs.push((record, VideoFeatures::new(video_id, frames, duration_s)?));
    }
    Ok(SynthDataset {
        pairs,
        vocab,
        lexicon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(cfg: &SynthConfig) -> PartnerStats {
        let ds = synth_dataset(cfg).unwrap();
        ds.lexicon
            .partner_stats(ds.pairs.iter().map(|(r, _)| r.query.text.as_str()))
    }

    #[test]
    fn unbiased_corpus_has_no_partner_excess() {
        for seed in 0..5 {
            let cfg = SynthConfig {
                n_pairs: 500,
                bias_strength: 0.0,
                seed,
                ..SynthConfig::default()
            };
            let s = stats(&cfg);
            assert_eq!(s.count, 500);
            assert!(
                (s.conditional - s.marginal).abs() < 0.05,
                "seed {seed}: {s:?}"
            );
        }
    }

    #[test]
    fn fully_biased_corpus() {
        let cfg = SynthConfig {
            n_pairs: 200,
            bias_strength: 1.0,
            ..SynthConfig::default()
        };
        assert_eq!(stats(&cfg).conditional, 1.0);
    }

    #[test]
    fn spans_valid_and_vocab_sized() {
        for (seed, t) in [(1, 8), (2, 32), (3, 5)] {
            let cfg = SynthConfig {
                n_pairs: 40,
                frames: t,
                seed,
                query_len: 3 + seed as usize,
                ..SynthConfig::default()
            };
            let ds = synth_dataset(&cfg).unwrap();
            assert_eq!(ds.vocab.len(), cfg.vocab_size);
            for (r, v) in &ds.pairs {
                let [s, e] = r.gt_span.unwrap();
                assert!(0.0 <= s && s < e && e <= r.duration_s);
                assert_eq!(v.frame_count(), t);
                assert_eq!(r.query.len(), cfg.query_len);
                assert!(r.query.tokens.iter().all(|&id| id >= 3 && id < cfg.vocab_size));
            }
        }
    }

    #[test]
    fn reproducible_and_seed_sensitive() {
        let cfg = SynthConfig::default();
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(a.pairs, b.pairs);
        let c = synth_dataset(&SynthConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.pairs[0].1, c.pairs[0].1);
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad = [
            SynthConfig { vocab_size: 7, ..SynthConfig::default() },
            SynthConfig { bias_strength: 1.2, ..SynthConfig::default() },
            SynthConfig { n_pairs: 0, ..SynthConfig::default() },
            SynthConfig { query_len: 2, ..SynthConfig::default() },
        ];
        for cfg in bad {
            assert!(synth_dataset(&cfg).is_err(), "{cfg:?}");
        }
        assert!(synth_dataset(&SynthConfig { vocab_size: 8, ..SynthConfig::default() }).is_ok());
    }
}
