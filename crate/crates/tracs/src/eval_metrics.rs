//! F1 metrics, the composite score, confusion matrices, baselines, and
//! error-analysis reports.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_ingest::{LabelVocabulary, PaperRecord, BOOLEAN_LABEL_NAMES};
use crate::error::{Error, Result};
use crate::model_core::NUM_BOOLEAN_LABELS;

/// Which binary F1 backs each boolean label in the composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoolF1Variant {
    /// F1 of the positive class only.
    #[default]
    Positive,
    /// Unweighted mean of the positive-class and negative-class F1.
    MacroBinary,
}

impl std::str::FromStr for BoolF1Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(BoolF1Variant::Positive),
            "macro-binary" => Ok(BoolF1Variant::MacroBinary),
            other => Err(Error::Config(format!("unknown bool-F1 variant {other:?}"))),
        }
    }
}

/// Per-boolean-label F1 values in the fixed label order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BooleanF1 {
    pub science: f64,
    pub instrumentation: f64,
    pub mention: f64,
    pub not_telescope: f64,
}

impl BooleanF1 {
    pub fn from_array(values: [f64; 4]) -> Self {
        BooleanF1 {
            science: values[0],
            instrumentation: values[1],
            mention: values[2],
            not_telescope: values[3],
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.science, self.instrumentation, self.mention, self.not_telescope]
    }

    pub fn mean(&self) -> f64 {
        self.as_array().iter().sum::<f64>() / 4.0
    }
}

/// Full evaluation output for one labeled corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub multiclass_f1: f64,
    pub boolean_f1: BooleanF1,
    pub composite: f64,
    /// Rows are ground truth, columns are predicted.
    pub confusion_matrix: Vec<Vec<u64>>,
    pub per_class_f1: BTreeMap<String, f64>,
    pub n_documents: usize,
}

impl EvalReport {
    /// The metrics JSON document (without the confusion matrix, which is
    /// emitted as CSV/PNG artifacts).
    pub fn metrics_json(&self) -> serde_json::Value {
        serde_json::json!({
            "multiclass_f1": self.multiclass_f1,
            "boolean_f1": {
                "science": self.boolean_f1.science,
                "instrumentation": self.boolean_f1.instrumentation,
                "mention": self.boolean_f1.mention,
                "not_telescope": self.boolean_f1.not_telescope,
            },
            "composite": self.composite,
            "n_documents": self.n_documents,
        })
    }
}

/// Positive-class F1: 2TP / (2TP + FP + FN), 0 on a zero denominator.
pub fn f1_binary(predictions: &[bool], gold: &[bool]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Validation(format!(
            "length mismatch: {} predictions vs {} gold",
            predictions.len(),
            gold.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Validation("empty evaluation set".into()));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&p, &g) in predictions.iter().zip(gold) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        Ok(0.0)
    } else {
        Ok(2.0 * tp as f64 / denom as f64)
    }
}

fn f1_for_label(predictions: &[bool], gold: &[bool], variant: BoolF1Variant) -> Result<f64> {
    match variant {
        BoolF1Variant::Positive => f1_binary(predictions, gold),
        BoolF1Variant::MacroBinary => {
            let pos = f1_binary(predictions, gold)?;
            let neg_pred: Vec<bool> = predictions.iter().map(|p| !p).collect();
            let neg_gold: Vec<bool> = gold.iter().map(|g| !g).collect();
            let neg = f1_binary(&neg_pred, &neg_gold)?;
            Ok((pos + neg) / 2.0)
        }
    }
}

/// Unweighted mean over all K classes of one-vs-rest F1.
pub fn macro_f1_multiclass(predictions: &[usize], gold: &[usize], k: usize) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Validation(format!(
            "length mismatch: {} predictions vs {} gold",
            predictions.len(),
            gold.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Validation("empty evaluation set".into()));
    }
    if k == 0 {
        return Err(Error::Validation("k must be positive".into()));
    }
    if let Some(&bad) = predictions.iter().chain(gold).find(|&&c| c >= k) {
        return Err(Error::Validation(format!("class id {bad} out of range 0..{k}")));
    }
    let mut total = 0.0;
    for class in 0..k {
        let p: Vec<bool> = predictions.iter().map(|&c| c == class).collect();
        let g: Vec<bool> = gold.iter().map(|&c| c == class).collect();
        total += f1_binary(&p, &g)?;
    }
    Ok(total / k as f64)
}

/// Eq-style composite: mean of the multiclass macro F1 and the average of
/// the four boolean F1s.
pub fn composite_metric(multiclass_f1: f64, boolean_f1s: &[f64; NUM_BOOLEAN_LABELS]) -> Result<f64> {
    for &v in std::iter::once(&multiclass_f1).chain(boolean_f1s) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation(format!("F1 value {v} outside [0, 1]")));
        }
    }
    let mean: f64 = boolean_f1s.iter().sum::<f64>() / NUM_BOOLEAN_LABELS as f64;
    Ok((multiclass_f1 + mean) / 2.0)
}

/// K x K count matrix; rows are ground truth, columns predicted.
pub fn confusion_matrix(predictions: &[usize], gold: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != gold.len() {
        return Err(Error::Validation("length mismatch in confusion matrix".into()));
    }
    if let Some(&bad) = predictions.iter().chain(gold).find(|&&c| c >= k) {
        return Err(Error::Validation(format!("class id {bad} out of range 0..{k}")));
    }
    let mut matrix = vec![vec![0u64; k]; k];
    for (&p, &g) in predictions.iter().zip(gold) {
        matrix[g][p] += 1;
    }
    Ok(matrix)
}

/// Confusion matrix CSV with class-name headers.
pub fn write_confusion_csv(
    matrix: &[Vec<u64>],
    vocabulary: &LabelVocabulary,
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    out.push_str("gold\\pred");
    for class in &vocabulary.classes {
        out.push(',');
        out.push_str(class);
    }
    out.push('\n');
    for (row, class) in matrix.iter().zip(&vocabulary.classes) {
        out.push_str(class);
        for count in row {
            out.push(',');
            out.push_str(&count.to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Confusion matrix heatmap PNG (cell intensity scaled by the max count).
pub fn write_confusion_heatmap(matrix: &[Vec<u64>], path: &Path) -> Result<()> {
    let k = matrix.len().max(1);
    let cell = 48u32;
    let size = cell * k as u32;
    let max = matrix
        .iter()
        .flat_map(|row| row.iter())
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let mut img = image::RgbImage::new(size, size);
    for (r, row) in matrix.iter().enumerate() {
        for (c, &count) in row.iter().enumerate() {
            let intensity = (count as f64 / max).sqrt();
            let shade = (255.0 * (1.0 - intensity)) as u8;
            let pixel = image::Rgb([shade, shade, 255u8.min(shade.saturating_add(64))]);
            for y in 0..cell {
                for x in 0..cell {
                    img.put_pixel(c as u32 * cell + x, r as u32 * cell + y, pixel);
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

/// Labeled document-level predictions paired with gold labels.
#[derive(Debug, Clone)]
pub struct ScoredCorpus {
    pub gold_telescope: Vec<usize>,
    pub pred_telescope: Vec<usize>,
    pub gold_booleans: Vec<[bool; NUM_BOOLEAN_LABELS]>,
    pub pred_booleans: Vec<[bool; NUM_BOOLEAN_LABELS]>,
}

/// Score a corpus of document-level predictions against gold labels.
pub fn evaluate(
    corpus: &ScoredCorpus,
    vocabulary: &LabelVocabulary,
    variant: BoolF1Variant,
) -> Result<EvalReport> {
    let k = vocabulary.len();
    let n = corpus.gold_telescope.len();
    if corpus.pred_telescope.len() != n
        || corpus.gold_booleans.len() != n
        || corpus.pred_booleans.len() != n
    {
        return Err(Error::Validation("mismatched corpus component lengths".into()));
    }
    let multiclass = macro_f1_multiclass(&corpus.pred_telescope, &corpus.gold_telescope, k)?;
    let mut bool_f1 = [0.0; NUM_BOOLEAN_LABELS];
    for (i, value) in bool_f1.iter_mut().enumerate() {
        let p: Vec<bool> = corpus.pred_booleans.iter().map(|b| b[i]).collect();
        let g: Vec<bool> = corpus.gold_booleans.iter().map(|b| b[i]).collect();
        *value = f1_for_label(&p, &g, variant)?;
    }
    let composite = composite_metric(multiclass, &bool_f1)?;
    let matrix = confusion_matrix(&corpus.pred_telescope, &corpus.gold_telescope, k)?;

    let mut per_class = BTreeMap::new();
    for (class_id, name) in vocabulary.classes.iter().enumerate() {
        let p: Vec<bool> = corpus.pred_telescope.iter().map(|&c| c == class_id).collect();
        let g: Vec<bool> = corpus.gold_telescope.iter().map(|&c| c == class_id).collect();
        per_class.insert(name.clone(), f1_binary(&p, &g)?);
    }

    Ok(EvalReport {
        multiclass_f1: multiclass,
        boolean_f1: BooleanF1::from_array(bool_f1),
        composite,
        confusion_matrix: matrix,
        per_class_f1: per_class,
        n_documents: n,
    })
}

/// Extract gold labels from labeled records (error when any is missing).
pub fn gold_labels(
    records: &[PaperRecord],
    vocabulary: &LabelVocabulary,
) -> Result<(Vec<usize>, Vec<[bool; NUM_BOOLEAN_LABELS]>)> {
    let mut telescopes = Vec::with_capacity(records.len());
    let mut booleans = Vec::with_capacity(records.len());
    for r in records {
        let name = r
            .telescope
            .as_deref()
            .ok_or_else(|| Error::Validation(format!("{}: missing telescope label", r.bibcode)))?;
        let id = vocabulary
            .index_of(name)
            .ok_or_else(|| Error::Validation(format!("{}: unknown class {name:?}", r.bibcode)))?;
        let b = r
            .booleans
            .ok_or_else(|| Error::Validation(format!("{}: missing boolean labels", r.bibcode)))?;
        telescopes.push(id);
        booleans.push(b.as_array());
    }
    Ok((telescopes, booleans))
}

/// Uniform random guessing over classes and boolean labels, scored
/// against the gold labels. Deterministic given the seed.
pub fn random_baseline(
    records: &[PaperRecord],
    vocabulary: &LabelVocabulary,
    seed: u64,
    variant: BoolF1Variant,
) -> Result<EvalReport> {
    let (gold_telescope, gold_booleans) = gold_labels(records, vocabulary)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = vocabulary.len();
    let pred_telescope: Vec<usize> = (0..records.len()).map(|_| rng.gen_range(0..k)).collect();
    let pred_booleans: Vec<[bool; NUM_BOOLEAN_LABELS]> = (0..records.len())
        .map(|_| [rng.gen(), rng.gen(), rng.gen(), rng.gen()])
        .collect();
    evaluate(
        &ScoredCorpus {
            gold_telescope,
            pred_telescope,
            gold_booleans,
            pred_booleans,
        },
        vocabulary,
        variant,
    )
}

/// Full predict + aggregate + score pipeline with zero training steps:
/// the encoder stays frozen and the heads keep their documented random
/// initialization. Deterministic given the model seeds.
#[allow(clippy::too_many_arguments)]
pub fn frozen_baseline<E: crate::model_core::Encoder>(
    encoder: &E,
    head: &crate::model_core::MultiTaskHead,
    tokenizer: &dyn crate::chunker::Tokenizer,
    records: &[PaperRecord],
    vocabulary: &LabelVocabulary,
    window: usize,
    threshold: f64,
    variant: BoolF1Variant,
) -> Result<EvalReport> {
    use crate::inference_aggregate::{aggregate, predict_document};
    let (gold_telescope, gold_booleans) = gold_labels(records, vocabulary)?;
    let mut pred_telescope = Vec::with_capacity(records.len());
    let mut pred_booleans = Vec::with_capacity(records.len());
    for record in records {
        let chunk_predictions = predict_document(encoder, head, tokenizer, record, window)?;
        let doc = aggregate(&chunk_predictions, vocabulary, threshold)?;
        pred_telescope.push(
            vocabulary
                .index_of(&doc.telescope)
                .expect("aggregate emits vocabulary names"),
        );
        pred_booleans.push(doc.booleans.as_array());
    }
    evaluate(
        &ScoredCorpus {
            gold_telescope,
            pred_telescope,
            gold_booleans,
            pred_booleans,
        },
        vocabulary,
        variant,
    )
}

/// One row of the error-analysis example table.
#[derive(Debug, Clone, Serialize)]
pub struct ExampleRow {
    pub bibcode: String,
    pub telescope_gold: String,
    pub telescope_pred: String,
    pub labels_gold: [u8; NUM_BOOLEAN_LABELS],
    pub labels_pred: [u8; NUM_BOOLEAN_LABELS],
    pub all_correct: bool,
}

/// Error-analysis output: per-label error rates plus sampled example rows.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorAnalysis {
    pub per_label_errors: BTreeMap<String, usize>,
    pub n_documents: usize,
    pub correct_examples: Vec<ExampleRow>,
    pub incorrect_examples: Vec<ExampleRow>,
}

/// Build the error analysis from aligned gold and predicted labels.
pub fn error_analysis(
    bibcodes: &[String],
    corpus: &ScoredCorpus,
    vocabulary: &LabelVocabulary,
    max_examples: usize,
) -> Result<ErrorAnalysis> {
    let n = bibcodes.len();
    if corpus.gold_telescope.len() != n {
        return Err(Error::Validation("bibcode/label length mismatch".into()));
    }
    let mut per_label_errors: BTreeMap<String, usize> = BTreeMap::new();
    per_label_errors.insert("telescope".into(), 0);
    for name in BOOLEAN_LABEL_NAMES {
        per_label_errors.insert(name.into(), 0);
    }
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for i in 0..n {
        let tel_ok = corpus.gold_telescope[i] == corpus.pred_telescope[i];
        if !tel_ok {
            *per_label_errors.get_mut("telescope").unwrap() += 1;
        }
        let mut row_ok = tel_ok;
        for (j, name) in BOOLEAN_LABEL_NAMES.iter().enumerate() {
            if corpus.gold_booleans[i][j] != corpus.pred_booleans[i][j] {
                *per_label_errors.get_mut(*name).unwrap() += 1;
                row_ok = false;
            }
        }
        let row = ExampleRow {
            bibcode: bibcodes[i].clone(),
            telescope_gold: vocabulary
                .name_of(corpus.gold_telescope[i])
                .unwrap_or("?")
                .to_string(),
            telescope_pred: vocabulary
                .name_of(corpus.pred_telescope[i])
                .unwrap_or("?")
                .to_string(),
            labels_gold: corpus.gold_booleans[i].map(u8::from),
            labels_pred: corpus.pred_booleans[i].map(u8::from),
            all_correct: row_ok,
        };
        let bucket = if row_ok { &mut correct } else { &mut incorrect };
        if bucket.len() < max_examples {
            bucket.push(row);
        }
    }
    Ok(ErrorAnalysis {
        per_label_errors,
        n_documents: n,
        correct_examples: correct,
        incorrect_examples: incorrect,
    })
}

fn example_table(rows: &[ExampleRow]) -> String {
    let mut out = String::new();
    for row in rows {
        let mark = |ok: bool| if ok { "ok" } else { "X" };
        out.push_str(&format!(
            "| {} | {} / {} {} |",
            row.bibcode,
            row.telescope_gold,
            row.telescope_pred,
            mark(row.telescope_gold == row.telescope_pred),
        ));
        for j in 0..NUM_BOOLEAN_LABELS {
            out.push_str(&format!(
                " {} / {} {} |",
                row.labels_gold[j],
                row.labels_pred[j],
                mark(row.labels_gold[j] == row.labels_pred[j]),
            ));
        }
        out.push('\n');
    }
    out
}

/// Render the error analysis as a markdown document.
pub fn render_error_report(analysis: &ErrorAnalysis, report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("# Error analysis\n\n");
    out.push_str(&format!("Documents evaluated: {}\n\n", analysis.n_documents));
    out.push_str(&format!(
        "Composite: {:.4}  Multiclass macro F1: {:.4}\n\n",
        report.composite, report.multiclass_f1
    ));
    out.push_str("## Per-label error rates\n\n");
    for (label, errors) in &analysis.per_label_errors {
        let correct = analysis.n_documents - errors;
        out.push_str(&format!(
            "- {label}: {errors} errors, {correct} correct of {}\n",
            analysis.n_documents
        ));
    }
    let header = "\n| Paper ID | Telescope GT/Pred | Science GT/Pred | Instrumentation GT/Pred | Mention GT/Pred | Not_telescope GT/Pred |\n|---|---|---|---|---|---|\n";
    out.push_str("\n## Correct examples\n");
    out.push_str(header);
    out.push_str(&example_table(&analysis.correct_examples));
    out.push_str("\n## Incorrect examples\n");
    out.push_str(header);
    out.push_str(&example_table(&analysis.incorrect_examples));
    out
}
