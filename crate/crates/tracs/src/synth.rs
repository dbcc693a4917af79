//! Synthetic keyword-correlated corpus generation.
//!
//! Stands in for the non-redistributable shared-task data: documents
//! carry class-indicative keywords and per-label marker words at a
//! configurable correlation strength, with controllable positive rates
//! for the skewed boolean labels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_ingest::{BooleanLabels, PaperRecord};
use crate::error::{Error, Result};

const FILLER: [&str; 24] = [
    "the", "of", "we", "observed", "data", "results", "study", "section", "figure", "table",
    "present", "spectral", "survey", "model", "region", "source", "sample", "galaxy", "stellar",
    "emission", "report", "during", "period", "field",
];

// Marker word stems per boolean label, in label order.
const MARKERS: [[&str; 3]; 4] = [
    ["measured", "analysis", "fluxfit"],
    ["detector", "calibration", "instrumentteam"],
    ["asmentioned", "catalogref", "citedwork"],
    ["personnamed", "surname", "biography"],
];

/// Generator parameters. Defaults mirror the real corpus shape: three
/// balanced telescope classes, evenly distributed science/mention flags,
/// skewed instrumentation/not_telescope flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: Vec<String>,
    pub docs_per_class: usize,
    /// Exact whitespace-token count of each document (across all five
    /// text fields).
    pub tokens_per_doc: usize,
    /// Probability that an indicative token slot carries the correct
    /// signal word rather than noise.
    pub keyword_strength: f64,
    /// Positive rate per boolean label (science, instrumentation,
    /// mention, not_telescope).
    pub positive_rates: [f64; 4],
    pub seed: u64,
    /// When false, telescope and boolean cells are left empty
    /// (unlabeled test shape).
    pub labeled: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: vec!["CHANDRA".into(), "HST".into(), "JWST".into()],
            docs_per_class: 100,
            tokens_per_doc: 120,
            keyword_strength: 0.95,
            positive_rates: [0.5, 0.1, 0.5, 0.05],
            seed: 42,
            labeled: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.docs_per_class == 0 {
            return Err(Error::Config("need at least one class and one document per class".into()));
        }
        let mut sorted = self.classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return Err(Error::Config("duplicate class names".into()));
        }
        if self.tokens_per_doc < 8 {
            return Err(Error::Config("tokens_per_doc must be >= 8".into()));
        }
        if !(0.0..=1.0).contains(&self.keyword_strength)
            || self.positive_rates.iter().any(|r| !(0.0..=1.0).contains(r))
        {
            return Err(Error::Config("probabilities must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let spec: SynthSpec =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        spec.validate()?;
        Ok(spec)
    }
}

fn class_keywords(class: &str) -> [String; 3] {
    let base = class.to_lowercase().replace(|c: char| !c.is_alphanumeric(), "");
    [base.clone(), format!("{base}obs"), format!("{base}field")]
}

/// Generate the synthetic corpus: class-major document order,
/// deterministic for a given spec.
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<Vec<PaperRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let strength = spec.keyword_strength;
    let mut records = Vec::with_capacity(spec.classes.len() * spec.docs_per_class);

    for (class_id, class) in spec.classes.iter().enumerate() {
        let keywords = class_keywords(class);
        for doc in 0..spec.docs_per_class {
            let labels: [bool; 4] = {
                let mut l = [false; 4];
                for (flag, rate) in l.iter_mut().zip(&spec.positive_rates) {
                    *flag = rng.gen::<f64>() < *rate;
                }
                l
            };

            let mut words: Vec<String> = Vec::with_capacity(spec.tokens_per_doc);
            // Guaranteed signal prefix so even very short documents stay
            // separable.
            words.push(keywords[0].clone());
            for (i, &flag) in labels.iter().enumerate() {
                if flag {
                    words.push(MARKERS[i][0].to_string());
                }
            }
            while words.len() < spec.tokens_per_doc {
                let band = rng.gen::<f64>();
                let word = if band < 0.15 {
                    // Class-indicative slot, with (1 - strength) noise
                    // from a random other class.
                    if rng.gen::<f64>() < strength || spec.classes.len() == 1 {
                        keywords[rng.gen_range(0..3)].clone()
                    } else {
                        let mut other = rng.gen_range(0..spec.classes.len());
                        if other == class_id {
                            other = (other + 1) % spec.classes.len();
                        }
                        class_keywords(&spec.classes[other])[rng.gen_range(0..3)].clone()
                    }
                } else if band < 0.35 {
                    // Boolean-marker slot for one label.
                    let label = rng.gen_range(0..4);
                    let hit = if labels[label] {
                        rng.gen::<f64>() < strength
                    } else {
                        rng.gen::<f64>() >= strength
                    };
                    if hit {
                        MARKERS[label][rng.gen_range(0..3)].to_string()
                    } else {
                        FILLER[rng.gen_range(0..FILLER.len())].to_string()
                    }
                } else {
                    FILLER[rng.gen_range(0..FILLER.len())].to_string()
                };
                words.push(word);
            }
            words.truncate(spec.tokens_per_doc);

            // Split the word stream over the five text fields.
            let title_len = words.len().min(8);
            let rest = words.len() - title_len;
            let abstract_len = rest / 4;
            let ack_len = rest / 8;
            let grants_len = rest / 16;
            let body_len = rest - abstract_len - ack_len - grants_len;
            let mut cursor = words.iter();
            let mut take = |n: usize| -> String {
                cursor.by_ref().take(n).cloned().collect::<Vec<_>>().join(" ")
            };
            let title = take(title_len);
            let abstract_text = take(abstract_len);
            let body = take(body_len);
            let acknowledgments = take(ack_len);
            let grants = take(grants_len);

            let year = 1995 + rng.gen_range(0..30);
            records.push(PaperRecord {
                bibcode: format!("{year}Syn..{class_id:02}{doc:06}"),
                telescope: spec.labeled.then(|| class.clone()),
                author: format!("Author{:03}", rng.gen_range(0..500)),
                year: Some(year),
                title,
                abstract_text,
                body,
                acknowledgments,
                grants,
                booleans: spec.labeled.then(|| BooleanLabels::from_array(labels)),
            });
        }
    }
    Ok(records)
}
