//! Feature ingestion, vocabulary, query masking, and synthetic corpora.

mod fmat;
mod manifest;
mod mask;
mod synth;
mod vocab;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{CcrError, Result};

pub use fmat::{decode_fmat, encode_fmat, load_features, read_fmat, write_features, write_fmat};
pub use manifest::{load_dataset, read_manifest, write_manifest, ManifestEntry};
pub use mask::mask_query;
pub use synth::{synth_dataset, Lexicon, PartnerStats, SynthConfig, SynthDataset};
pub use vocab::{tokenize, Vocab, DEFAULT_STOPWORDS, MASK_ID, PAD_ID, UNK_ID};

/// Per-frame features of one untrimmed video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    /// `T x Dv`, one row per frame.
    pub frames: Mat,
    pub duration_s: f64,
}

impl VideoFeatures {
    pub fn new(video_id: impl Into<String>, frames: Mat, duration_s: f64) -> Result<Self> {
        let video_id = video_id.into();
        if frames.rows() < 2 {
            return Err(CcrError::Data(format!(
                "video {video_id} has {} frames, need at least 2",
                frames.rows()
            )));
        }
        if frames.cols() == 0 {
            return Err(CcrError::Data(format!("video {video_id} has zero-width features")));
        }
        if !frames.is_finite() {
            return Err(CcrError::Data(format!("video {video_id} has non-finite features")));
        }
        if !(duration_s.is_finite() && duration_s > 0.0) {
            return Err(CcrError::Data(format!(
                "video {video_id} has invalid duration {duration_s}"
            )));
        }
        Ok(Self {
            video_id,
            frames,
            duration_s,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn with_duration(mut self, duration_s: f64) -> Result<Self> {
        if !(duration_s.is_finite() && duration_s > 0.0) {
            return Err(CcrError::Data(format!("invalid duration {duration_s}")));
        }
        self.duration_s = duration_s;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedQuery {
    pub tokens: Vec<usize>,
    pub text: String,
}

impl TokenizedQuery {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A query with some positions replaced by [`MASK_ID`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedQuery {
    pub tokens: Vec<usize>,
    /// Strictly increasing, never empty.
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`, in the same order.
    pub targets: Vec<usize>,
}

impl MaskedQuery {
    /// Masks exactly the given positions; mainly for tests and fixed evaluation.
    pub fn from_positions(q: &TokenizedQuery, positions: &[usize]) -> Result<Self> {
        if positions.is_empty() {
            return Err(CcrError::Data("mask set must not be empty".into()));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CcrError::Data("mask positions must be strictly increasing".into()));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= q.tokens.len()) {
            return Err(CcrError::Data(format!(
                "mask position {p} out of range for a {}-token query",
                q.tokens.len()
            )));
        }
        let mut tokens = q.tokens.clone();
        let targets = positions.iter().map(|&p| q.tokens[p]).collect();
        for &p in positions {
            tokens[p] = MASK_ID;
        }
        Ok(Self {
            tokens,
            mask_positions: positions.to_vec(),
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One video-query pair. `gt_span` is only read by evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub video_id: String,
    pub feature_path: PathBuf,
    pub query: TokenizedQuery,
    pub gt_span: Option<[f64; 2]>,
    pub duration_s: f64,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some([s, e]) = self.gt_span {
            if !(0.0 <= s && s < e && e <= self.duration_s) {
                return Err(CcrError::Data(format!(
                    "record {} has gt_span [{s}, {e}] outside [0, {}]",
                    self.video_id, self.duration_s
                )));
            }
        }
        Ok(())
    }
}
