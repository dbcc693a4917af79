//! Chunk-level prediction over whole documents and majority-vote
//! aggregation to document-level labels.
//!
//! Inference always chunks the full document (no sampling). Telescope
//! votes are hard argmax votes with a mean-softmax tie-break; boolean
//! votes are thresholded per chunk with a mean-sigmoid tie-break.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunker::{chunk_document, ChunkMeta, Tokenizer};
use crate::corpus_ingest::{concatenate_fields, BooleanLabels, LabelVocabulary, PaperRecord};
use crate::error::{Error, Result};
use crate::model_core::{
    forward_chunk, sigmoid, softmax_probs, ChunkPrediction, Encoder, MultiTaskHead,
    NUM_BOOLEAN_LABELS,
};

/// Default sigmoid threshold for a per-chunk boolean yes vote.
pub const DEFAULT_BOOLEAN_THRESHOLD: f64 = 0.5;

/// Yes/no vote counts for one boolean label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub yes: u64,
    pub no: u64,
}

/// Which decisions needed the tie-break rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieBreaks {
    pub telescope: bool,
    pub booleans: [bool; NUM_BOOLEAN_LABELS],
}

/// Mean predicted probabilities, kept as tie-break evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanProbabilities {
    pub telescope: Vec<f64>,
    pub booleans: [f64; NUM_BOOLEAN_LABELS],
}

/// Aggregated document-level prediction with vote tallies and evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentPrediction {
    pub bibcode: String,
    pub telescope: String,
    pub booleans: BooleanLabels,
    pub telescope_votes: Vec<u64>,
    pub boolean_votes: [VoteTally; NUM_BOOLEAN_LABELS],
    pub tie_broken: TieBreaks,
    pub mean_probabilities: MeanProbabilities,
}

/// Chunk all segments of a document and predict each one, in
/// chunk_index order.
pub fn predict_document<E: Encoder>(
    encoder: &E,
    head: &MultiTaskHead,
    tokenizer: &dyn Tokenizer,
    record: &PaperRecord,
    window: usize,
) -> Result<Vec<ChunkPrediction>> {
    let meta = ChunkMeta {
        bibcode: record.bibcode.clone(),
        telescope: record.telescope.clone(),
        labels: record.booleans,
    };
    let text = concatenate_fields(record);
    let chunks = chunk_document(&text, tokenizer, window, &meta)?;
    chunks
        .iter()
        .map(|chunk| forward_chunk(encoder, head, chunk))
        .collect()
}

/// Majority-vote aggregation of one document's chunk predictions.
pub fn aggregate(
    predictions: &[ChunkPrediction],
    vocabulary: &LabelVocabulary,
    threshold: f64,
) -> Result<DocumentPrediction> {
    if predictions.is_empty() {
        return Err(Error::Validation("cannot aggregate zero chunk predictions".into()));
    }
    let bibcode = &predictions[0].bibcode;
    if predictions.iter().any(|p| &p.bibcode != bibcode) {
        return Err(Error::Validation("aggregate received mixed bibcodes".into()));
    }
    let k = vocabulary.len();
    if predictions.iter().any(|p| p.telescope_logits.len() != k) {
        return Err(Error::Shape(format!(
            "telescope logits do not match vocabulary size {k}"
        )));
    }

    let n_chunks = predictions.len() as u64;
    let mut telescope_votes = vec![0u64; k];
    let mut mean_telescope = vec![0.0; k];
    let mut boolean_votes = [VoteTally { yes: 0, no: 0 }; NUM_BOOLEAN_LABELS];
    let mut mean_boolean = [0.0; NUM_BOOLEAN_LABELS];

    for p in predictions {
        let probs = softmax_probs(&p.telescope_logits);
        // Hard vote: argmax, lowest id on exact logit ties.
        let argmax = probs
            .iter()
            .enumerate()
            .fold(0usize, |best, (i, &v)| if v > probs[best] { i } else { best });
        telescope_votes[argmax] += 1;
        for (m, v) in mean_telescope.iter_mut().zip(&probs) {
            *m += v / n_chunks as f64;
        }
        for (i, &logit) in p.boolean_logits.iter().enumerate() {
            let prob = sigmoid(logit);
            if prob >= threshold {
                boolean_votes[i].yes += 1;
            } else {
                boolean_votes[i].no += 1;
            }
            mean_boolean[i] += prob / n_chunks as f64;
        }
    }

    // Plurality with mean-probability tie-break, then lowest class id.
    let max_votes = *telescope_votes.iter().max().expect("k >= 1");
    let tied: Vec<usize> = (0..k).filter(|&c| telescope_votes[c] == max_votes).collect();
    let telescope_tie = tied.len() > 1;
    let winner = tied
        .iter()
        .copied()
        .fold(tied[0], |best, c| {
            if mean_telescope[c] > mean_telescope[best] {
                c
            } else {
                best
            }
        });

    let mut booleans = [false; NUM_BOOLEAN_LABELS];
    let mut boolean_ties = [false; NUM_BOOLEAN_LABELS];
    for i in 0..NUM_BOOLEAN_LABELS {
        let VoteTally { yes, no } = boolean_votes[i];
        booleans[i] = if yes > no {
            true
        } else if yes < no {
            false
        } else {
            boolean_ties[i] = true;
            mean_boolean[i] >= threshold
        };
    }

    Ok(DocumentPrediction {
        bibcode: bibcode.clone(),
        telescope: vocabulary
            .name_of(winner)
            .expect("winner id within vocabulary")
            .to_string(),
        booleans: BooleanLabels::from_array(booleans),
        telescope_votes,
        boolean_votes,
        tie_broken: TieBreaks {
            telescope: telescope_tie,
            booleans: boolean_ties,
        },
        mean_probabilities: MeanProbabilities {
            telescope: mean_telescope,
            booleans: mean_boolean,
        },
    })
}

/// Predictions CSV header (submission shape).
pub const PREDICTIONS_HEADER: [&str; 6] = [
    "bibcode",
    "telescope",
    "science",
    "instrumentation",
    "mention",
    "not_telescope",
];

/// Predict every record, aggregate, and write the submission-shape CSV
/// (plus an optional line-delimited JSON evidence sidecar).
pub fn predict_corpus<E: Encoder>(
    encoder: &E,
    head: &MultiTaskHead,
    tokenizer: &dyn Tokenizer,
    vocabulary: &LabelVocabulary,
    records: &[PaperRecord],
    out_path: &Path,
    evidence_path: Option<&Path>,
    window: usize,
    threshold: f64,
) -> Result<Vec<DocumentPrediction>> {
    if head.num_classes != vocabulary.len() {
        return Err(Error::Checkpoint(format!(
            "head has {} classes but vocabulary has {}",
            head.num_classes,
            vocabulary.len()
        )));
    }
    let mut documents = Vec::with_capacity(records.len());
    for record in records {
        let chunk_predictions = predict_document(encoder, head, tokenizer, record, window)?;
        documents.push(aggregate(&chunk_predictions, vocabulary, threshold)?);
    }
    write_predictions_csv(&documents, out_path)?;
    if let Some(path) = evidence_path {
        write_evidence_jsonl(&documents, path)?;
    }
    Ok(documents)
}

/// Write aggregated predictions in the submission CSV shape.
pub fn write_predictions_csv(documents: &[DocumentPrediction], path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: display.clone(),
        source: e,
    })?;
    writer
        .write_record(PREDICTIONS_HEADER)
        .map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?;
    for doc in documents {
        let flags = doc.booleans.as_array();
        let mut row = vec![doc.bibcode.clone(), doc.telescope.clone()];
        row.extend(flags.iter().map(|&b| u8::from(b).to_string()));
        writer.write_record(&row).map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?;
    }
    writer.flush().map_err(|e| Error::io(display, e))
}

/// Line-delimited JSON of full document predictions (vote tallies and
/// tie-break evidence included).
pub fn write_evidence_jsonl(documents: &[DocumentPrediction], path: &Path) -> Result<()> {
    let mut out = String::new();
    for doc in documents {
        out.push_str(
            &serde_json::to_string(doc).map_err(|e| Error::json(path.display().to_string(), e))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read an evidence sidecar back.
pub fn read_evidence_jsonl(path: &Path) -> Result<Vec<DocumentPrediction>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line).map_err(|e| Error::json(path.display().to_string(), e))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::{HashTokenizer, CLS_ID};
    use crate::model_core::TinyEncoder;

    fn vocab3() -> LabelVocabulary {
        LabelVocabulary {
            classes: vec!["CHANDRA".into(), "HST".into(), "JWST".into()],
        }
    }

    fn pred(bibcode: &str, idx: usize, tel: Vec<f64>, booleans: [f64; 4]) -> ChunkPrediction {
        ChunkPrediction::new(bibcode.into(), idx, tel, booleans).unwrap()
    }

    /// Logits whose softmax puts probability ~p on `class` (2 classes
    /// stay symmetric around the rest).
    fn peaked(k: usize, class: usize, strength: f64) -> Vec<f64> {
        (0..k).map(|c| if c == class { strength } else { 0.0 }).collect()
    }

    #[test]
    fn plurality_wins() {
        let v = vocab3();
        let chunks = vec![
            pred("b", 0, peaked(3, 1, 4.0), [0.0; 4]),
            pred("b", 1, peaked(3, 1, 4.0), [0.0; 4]),
            pred("b", 2, peaked(3, 2, 4.0), [0.0; 4]),
        ];
        let doc = aggregate(&chunks, &v, 0.5).unwrap();
        assert_eq!(doc.telescope, "HST");
        assert_eq!(doc.telescope_votes, vec![0, 2, 1]);
        assert!(!doc.tie_broken.telescope);
    }

    #[test]
    fn telescope_tie_breaks_on_mean_probability() {
        let v = vocab3();
        // Votes 1-1 between HST and JWST; HST has higher mean softmax.
        let chunks = vec![
            pred("b", 0, vec![0.0, 3.0, -3.0], [0.0; 4]),
            pred("b", 1, vec![0.0, 0.4, 0.6], [0.0; 4]),
        ];
        let doc = aggregate(&chunks, &v, 0.5).unwrap();
        assert_eq!(doc.telescope, "HST");
        assert!(doc.tie_broken.telescope);
    }

    #[test]
    fn boolean_majority_two_of_three() {
        let v = vocab3();
        // sigmoid probs ~ [0.9, 0.8, 0.2] for label 0.
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let chunks = vec![
            pred("b", 0, peaked(3, 0, 4.0), [logit(0.9), 0.0, 0.0, 0.0]),
            pred("b", 1, peaked(3, 0, 4.0), [logit(0.8), 0.0, 0.0, 0.0]),
            pred("b", 2, peaked(3, 0, 4.0), [logit(0.2), 0.0, 0.0, 0.0]),
        ];
        let doc = aggregate(&chunks, &v, 0.5).unwrap();
        assert!(doc.booleans.science);
        assert_eq!(doc.boolean_votes[0], VoteTally { yes: 2, no: 1 });
        assert!(!doc.tie_broken.booleans[0]);
    }

    #[test]
    fn boolean_tie_breaks_on_mean_probability() {
        let v = vocab3();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        // probs [0.9, 0.2]: votes 1-1, mean 0.55 -> yes.
        let chunks = vec![
            pred("b", 0, peaked(3, 0, 4.0), [logit(0.9), 0.0, 0.0, 0.0]),
            pred("b", 1, peaked(3, 0, 4.0), [logit(0.2), 0.0, 0.0, 0.0]),
        ];
        let doc = aggregate(&chunks, &v, 0.5).unwrap();
        assert!(doc.booleans.science);
        assert!(doc.tie_broken.booleans[0]);
        assert!((doc.mean_probabilities.booleans[0] - 0.55).abs() < 1e-9);
    }

    #[test]
    fn single_chunk_identity() {
        let v = vocab3();
        let chunks = vec![pred("b", 0, vec![0.1, 2.0, -1.0], [3.0, -3.0, 3.0, -3.0])];
        let doc = aggregate(&chunks, &v, 0.5).unwrap();
        assert_eq!(doc.telescope, "HST");
        assert_eq!(doc.booleans.as_array(), [true, false, true, false]);
    }

    #[test]
    fn permutation_invariance() {
        let v = vocab3();
        let mut chunks = vec![
            pred("b", 0, vec![0.2, 1.0, -0.5], [1.0, -1.0, 0.3, -0.2]),
            pred("b", 1, vec![1.5, 0.0, 0.0], [-1.0, 2.0, 0.1, 0.4]),
            pred("b", 2, vec![0.0, 0.0, 2.0], [0.5, 0.5, -0.6, -0.4]),
        ];
        let base = aggregate(&chunks, &v, 0.5).unwrap();
        chunks.rotate_left(1);
        let rotated = aggregate(&chunks, &v, 0.5).unwrap();
        chunks.swap(0, 2);
        let swapped = aggregate(&chunks, &v, 0.5).unwrap();
        // Decisions and tallies are order-free; mean probabilities are only
        // equal up to floating-point summation order.
        for other in [&rotated, &swapped] {
            assert_eq!(base.telescope, other.telescope);
            assert_eq!(base.booleans, other.booleans);
            assert_eq!(base.telescope_votes, other.telescope_votes);
            assert_eq!(base.boolean_votes, other.boolean_votes);
            assert_eq!(base.tie_broken, other.tie_broken);
            for (a, b) in base
                .mean_probabilities
                .telescope
                .iter()
                .chain(&base.mean_probabilities.booleans)
                .zip(
                    other
                        .mean_probabilities
                        .telescope
                        .iter()
                        .chain(&other.mean_probabilities.booleans),
                )
            {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixed_bibcodes_and_empty_input_rejected() {
        let v = vocab3();
        assert!(aggregate(&[], &v, 0.5).is_err());
        let chunks = vec![
            pred("a", 0, peaked(3, 0, 1.0), [0.0; 4]),
            pred("b", 1, peaked(3, 0, 1.0), [0.0; 4]),
        ];
        assert!(aggregate(&chunks, &v, 0.5).is_err());
    }

    #[test]
    fn exhaustive_voting_matches_brute_force_oracle() {
        // All vote configurations with <= 4 chunks over <= 3 classes.
        let threshold = 0.5;
        for k in 1..=3usize {
            let v = LabelVocabulary {
                classes: (0..k).map(|c| format!("C{c}")).collect(),
            };
            for n in 1..=4usize {
                let configs = k.pow(n as u32);
                for config in 0..configs {
                    let mut votes = Vec::with_capacity(n);
                    let mut x = config;
                    for _ in 0..n {
                        votes.push(x % k);
                        x /= k;
                    }
                    // Vary peak strength per chunk so mean probabilities
                    // are non-trivial and tie-breaks get exercised.
                    let chunks: Vec<ChunkPrediction> = votes
                        .iter()
                        .enumerate()
                        .map(|(i, &class)| {
                            pred("b", i, peaked(k, class, 1.0 + 0.7 * i as f64), [0.0; 4])
                        })
                        .collect();
                    let doc = aggregate(&chunks, &v, threshold).unwrap();

                    // Independent oracle: naive counting + naive softmax
                    // means + documented tie-break.
                    let mut counts = vec![0u64; k];
                    for &c in &votes {
                        counts[c] += 1;
                    }
                    let mut means = vec![0.0; k];
                    for chunk in &chunks {
                        let exps: Vec<f64> =
                            chunk.telescope_logits.iter().map(|&l| l.exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for (m, e) in means.iter_mut().zip(&exps) {
                            *m += e / sum / chunks.len() as f64;
                        }
                    }
                    let max = *counts.iter().max().unwrap();
                    let mut expected = usize::MAX;
                    let mut best_mean = f64::NEG_INFINITY;
                    for c in 0..k {
                        if counts[c] == max && means[c] > best_mean {
                            expected = c;
                            best_mean = means[c];
                        }
                    }
                    assert_eq!(
                        doc.telescope,
                        v.classes[expected],
                        "k={k} votes={votes:?}"
                    );
                    assert_eq!(doc.telescope_votes.iter().sum::<u64>(), n as u64);
                }
            }
        }
    }

    #[test]
    fn boolean_monotonicity_under_vote_flips() {
        // Flipping one chunk's no vote to yes never flips the label 1 -> 0.
        let v = LabelVocabulary {
            classes: vec!["C".into()],
        };
        for n in 1..=4usize {
            for config in 0..(1 << n) {
                let votes: Vec<bool> = (0..n).map(|i| (config >> i) & 1 == 1).collect();
                let make = |vs: &[bool]| -> Vec<ChunkPrediction> {
                    vs.iter()
                        .enumerate()
                        .map(|(i, &yes)| {
                            let logit = if yes { 2.0 } else { -2.0 };
                            pred("b", i, vec![0.0], [logit, 0.0, 0.0, 0.0])
                        })
                        .collect()
                };
                let base = aggregate(&make(&votes), &v, 0.5).unwrap();
                for flip in 0..n {
                    if votes[flip] {
                        continue;
                    }
                    let mut flipped = votes.clone();
                    flipped[flip] = true;
                    let after = aggregate(&make(&flipped), &v, 0.5).unwrap();
                    assert!(
                        after.booleans.science >= base.booleans.science,
                        "votes={votes:?} flip={flip}"
                    );
                }
            }
        }
    }

    #[test]
    fn predict_document_counts_and_determinism() {
        let tokenizer = HashTokenizer::new(64).unwrap();
        let encoder = TinyEncoder::new(64, 8, 3);
        let head = MultiTaskHead::new(8, 3, 4);
        let mut record = PaperRecord {
            bibcode: "doc1".into(),
            telescope: None,
            author: String::new(),
            year: None,
            title: "only a title".into(),
            abstract_text: String::new(),
            body: vec!["word"; 3 * 30 + 5].join(" "),
            acknowledgments: String::new(),
            grants: String::new(),
            booleans: None,
        };
        // window 32 -> 30 content tokens per chunk.
        let preds = predict_document(&encoder, &head, &tokenizer, &record, 32).unwrap();
        assert_eq!(preds.len(), 4);
        let again = predict_document(&encoder, &head, &tokenizer, &record, 32).unwrap();
        assert_eq!(preds, again);

        record.body = String::new();
        let preds = predict_document(&encoder, &head, &tokenizer, &record, 32).unwrap();
        assert!(!preds.is_empty());

        record.title = String::new();
        let preds = predict_document(&encoder, &head, &tokenizer, &record, 32).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].chunk_index, 0);
        let _ = CLS_ID;
    }

    #[test]
    fn predict_corpus_writes_submission_csv_and_evidence() {
        let tokenizer = HashTokenizer::new(64).unwrap();
        let encoder = TinyEncoder::new(64, 8, 3);
        let head = MultiTaskHead::new(8, 3, 4);
        let v = vocab3();
        let records: Vec<PaperRecord> = (0..5)
            .map(|i| PaperRecord {
                bibcode: format!("b{i}"),
                telescope: None,
                author: String::new(),
                year: None,
                title: format!("paper {i} about telescopes"),
                abstract_text: String::new(),
                body: String::new(),
                acknowledgments: String::new(),
                grants: String::new(),
                booleans: None,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("pred.csv");
        let evidence_path = dir.path().join("evidence.jsonl");
        let docs = predict_corpus(
            &encoder,
            &head,
            &tokenizer,
            &v,
            &records,
            &csv_path,
            Some(&evidence_path),
            32,
            0.5,
        )
        .unwrap();
        assert_eq!(docs.len(), 5);
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "bibcode,telescope,science,instrumentation,mention,not_telescope"
        );
        assert_eq!(lines.count(), 5);
        let evidence = read_evidence_jsonl(&evidence_path).unwrap();
        assert_eq!(evidence, docs);

        // Rerun produces identical bytes.
        let csv2 = dir.path().join("pred2.csv");
        predict_corpus(
            &encoder, &head, &tokenizer, &v, &records, &csv2, None, 32, 0.5,
        )
        .unwrap();
        assert_eq!(std::fs::read(&csv_path).unwrap(), std::fs::read(&csv2).unwrap());

        // Empty corpus -> header-only CSV.
        let csv3 = dir.path().join("pred3.csv");
        predict_corpus(&encoder, &head, &tokenizer, &v, &[], &csv3, None, 32, 0.5).unwrap();
        let text = std::fs::read_to_string(&csv3).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn vocabulary_mismatch_fails_before_prediction() {
        let tokenizer = HashTokenizer::new(64).unwrap();
        let encoder = TinyEncoder::new(64, 8, 3);
        let head = MultiTaskHead::new(8, 2, 4);
        let dir = tempfile::tempdir().unwrap();
        let err = predict_corpus(
            &encoder,
            &head,
            &tokenizer,
            &vocab3(),
            &[],
            &dir.path().join("p.csv"),
            None,
            32,
            0.5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
