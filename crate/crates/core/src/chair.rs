//! CHAIR scores: share of captions with a hallucinated object, share of
//! mentioned objects that are hallucinated, object recall, and length.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {message}")]
pub struct SynonymError {
    pub line: usize,
    pub message: String,
}

/// Surface form (singular lemma) to category.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymMap {
    map: BTreeMap<String, String>,
}

pub const DEFAULT_SYNONYMS_TSV: &str = include_str!("../assets/synonyms.tsv");

impl SynonymMap {
    /// Parses `surface<TAB>category` rows; `#` starts a comment. Repeating
    /// a row is allowed, mapping one surface to two categories is not.
    pub fn from_tsv(text: &str) -> Result<Self, SynonymError> {
        let mut m = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split('\t').map(str::trim);
            let (Some(surface), Some(category), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(SynonymError {
                    line: i + 1,
                    message: "expected surface<TAB>category".into(),
                });
            };
            if surface.is_empty() || category.is_empty() {
                return Err(SynonymError {
                    line: i + 1,
                    message: "empty surface or category".into(),
                });
            }
            m.insert(surface, category).map_err(|message| SynonymError { line: i + 1, message })?;
        }
        Ok(m)
    }

    pub fn shipped() -> Self {
        Self::from_tsv(DEFAULT_SYNONYMS_TSV).expect("shipped synonym table is valid")
    }

    pub fn insert(&mut self, surface: &str, category: &str) -> Result<(), String> {
        let surface = surface.to_lowercase();
        match self.map.get(&surface) {
            Some(c) if c != category => Err(format!("{surface:?} maps to both {c:?} and {category:?}")),
            _ => {
                self.map.insert(surface, category.to_string());
                Ok(())
            }
        }
    }

    /// Maps every category to itself, replacing any earlier row for that
    /// surface: a name used as a category always means that category.
    pub fn with_identity<I, S>(mut self, categories: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for c in categories {
            let c = c.as_ref();
            self.map.insert(c.to_lowercase(), c.to_string());
        }
        self
    }

    pub fn category(&self, surface: &str) -> Option<&str> {
        self.map.get(&surface.to_lowercase()).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Image id to its annotated categories.
pub type GroundTruth = BTreeMap<String, BTreeSet<String>>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChairCaption {
    pub caption_id: String,
    pub image_id: String,
    pub text: String,
    /// Object mentions as lemmas.
    pub mentions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionDetail {
    pub caption_id: String,
    pub image_id: String,
    /// Distinct categories mentioned.
    pub categories: Vec<String>,
    pub hallucinated: Vec<String>,
    pub unmapped: Vec<String>,
    pub words: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionError {
    pub caption_id: String,
    pub image_id: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChairResult {
    pub chair_s: f64,
    pub chair_i: f64,
    /// Micro-averaged over images.
    pub recall: f64,
    pub length: f64,
    pub captions: usize,
    pub hallucinated_captions: usize,
    pub mentioned_objects: usize,
    pub hallucinated_objects: usize,
    pub unmapped_mentions: usize,
    pub details: Vec<CaptionDetail>,
    pub errors: Vec<CaptionError>,
}

impl ChairResult {
    /// `CHAIR_s CHAIR_i Recall Len` with rates as percentages, one decimal.
    pub fn table_row(&self) -> String {
        format!(
            "{:.1} {:.1} {:.1} {:.1}",
            self.chair_s * 100.0,
            self.chair_i * 100.0,
            self.recall * 100.0,
            self.length
        )
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Scores `captions` against `gt`. Mentions without a category are left
/// out of every rate; a caption whose image is missing from `gt` is
/// reported in `errors` and skipped. Each category counts once per caption.
pub fn evaluate_chair(captions: &[ChairCaption], gt: &GroundTruth, syn: &SynonymMap) -> ChairResult {
    let mut r = ChairResult {
        chair_s: 0.0,
        chair_i: 0.0,
        recall: 0.0,
        length: 0.0,
        captions: 0,
        hallucinated_captions: 0,
        mentioned_objects: 0,
        hallucinated_objects: 0,
        unmapped_mentions: 0,
        details: Vec::new(),
        errors: Vec::new(),
    };
    let (mut gt_total, mut gt_hit, mut words) = (0usize, 0usize, 0usize);
    let mut order: Vec<&ChairCaption> = captions.iter().collect();
    order.sort_by(|a, b| (&a.caption_id, &a.image_id).cmp(&(&b.caption_id, &b.image_id)));
    for c in order {
        let Some(truth) = gt.get(&c.image_id) else {
            r.errors.push(CaptionError {
                caption_id: c.caption_id.clone(),
                image_id: c.image_id.clone(),
                message: "image id missing from ground truth".into(),
            });
            continue;
        };
        let mut cats = BTreeSet::new();
        let mut unmapped = Vec::new();
        for m in &c.mentions {
            match syn.category(m) {
                Some(cat) => {
                    cats.insert(cat.to_string());
                }
                None => unmapped.push(m.clone()),
            }
        }
        let hallucinated: Vec<String> = cats.iter().filter(|c| !truth.contains(*c)).cloned().collect();
        let n_words = c.text.split_whitespace().count();
        r.captions += 1;
        r.hallucinated_captions += usize::from(!hallucinated.is_empty());
        r.mentioned_objects += cats.len();
        r.hallucinated_objects += hallucinated.len();
        r.unmapped_mentions += unmapped.len();
        gt_total += truth.len();
        gt_hit += truth.iter().filter(|t| cats.contains(*t)).count();
        words += n_words;
        r.details.push(CaptionDetail {
            caption_id: c.caption_id.clone(),
            image_id: c.image_id.clone(),
            categories: cats.into_iter().collect(),
            hallucinated,
            unmapped,
            words: n_words,
        });
    }
    r.chair_s = ratio(r.hallucinated_captions, r.captions);
    r.chair_i = ratio(r.hallucinated_objects, r.mentioned_objects);
    r.recall = ratio(gt_hit, gt_total);
    r.length = ratio(words, r.captions);
    r
}
