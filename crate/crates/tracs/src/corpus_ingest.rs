//! Bibliographic CSV ingestion.
//!
//! Parses the shared-task CSV shape into typed records, validates bibcode
//! uniqueness, normalizes missing text cells to the empty string, and
//! derives the telescope label vocabulary from the data.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed order of the four boolean attribute labels.
pub const BOOLEAN_LABEL_NAMES: [&str; 4] = ["science", "instrumentation", "mention", "not_telescope"];

/// The five text fields, in concatenation order.
pub const TEXT_FIELD_NAMES: [&str; 5] = ["title", "abstract", "body", "acknowledgments", "grants"];

/// All 13 expected CSV columns.
pub const CSV_COLUMNS: [&str; 13] = [
    "bibcode",
    "telescope",
    "author",
    "year",
    "title",
    "abstract",
    "body",
    "acknowledgments",
    "grants",
    "science",
    "instrumentation",
    "mention",
    "not_telescope",
];

/// The four boolean attribute labels of one record.
///
/// Serializes with each flag as a 0/1 integer (the shard and evidence
/// JSON convention).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BooleanLabels {
    #[serde(with = "bool_as_int")]
    pub science: bool,
    #[serde(with = "bool_as_int")]
    pub instrumentation: bool,
    #[serde(with = "bool_as_int")]
    pub mention: bool,
    #[serde(with = "bool_as_int")]
    pub not_telescope: bool,
}

mod bool_as_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &bool, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(u8::from(*value))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<bool, D::Error> {
        match u8::deserialize(deserializer)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!(
                "boolean label must be 0 or 1, got {other}"
            ))),
        }
    }
}

impl BooleanLabels {
    pub fn as_array(&self) -> [bool; 4] {
        [self.science, self.instrumentation, self.mention, self.not_telescope]
    }

    pub fn from_array(values: [bool; 4]) -> Self {
        BooleanLabels {
            science: values[0],
            instrumentation: values[1],
            mention: values[2],
            not_telescope: values[3],
        }
    }
}

/// One row of the bibliographic CSV.
///
/// `telescope` and `booleans` are absent on unlabeled test data. Text
/// fields are never null after ingestion; missing cells become "".
#[derive(Debug, Clone, PartialEq)]
pub struct PaperRecord {
    pub bibcode: String,
    pub telescope: Option<String>,
    pub author: String,
    pub year: Option<i64>,
    pub title: String,
    pub abstract_text: String,
    pub body: String,
    pub acknowledgments: String,
    pub grants: String,
    pub booleans: Option<BooleanLabels>,
}

impl PaperRecord {
    /// The five text fields in concatenation order.
    pub fn text_fields(&self) -> [&str; 5] {
        [
            &self.title,
            &self.abstract_text,
            &self.body,
            &self.acknowledgments,
            &self.grants,
        ]
    }
}

/// Counts of normalizations applied during ingestion.
#[derive(Debug, Default, Clone, Copy)]
pub struct IngestStats {
    pub rows: usize,
    pub empty_text_cells: usize,
    pub nan_literal_cells: usize,
    pub unlabeled_rows: usize,
}

/// Ordered telescope-class vocabulary with stable integer ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub classes: Vec<String>,
}

impl LabelVocabulary {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Class id for a telescope name; classes are kept sorted so this is
    /// a binary search.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(name)).ok()
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.classes.get(id).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let vocab: LabelVocabulary =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if vocab.classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "{}: vocabulary classes are not sorted and distinct",
                path.display()
            )));
        }
        Ok(vocab)
    }
}

fn is_missing_cell(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("nan")
}

fn parse_bool_cell(cell: &str, row: usize, column: &str) -> Result<bool> {
    let t = cell.trim();
    if t.eq_ignore_ascii_case("true") || t == "1" {
        Ok(true)
    } else if t.eq_ignore_ascii_case("false") || t == "0" {
        Ok(false)
    } else {
        Err(Error::Validation(format!(
            "row {row}: unparseable boolean cell {column:?} = {cell:?}"
        )))
    }
}

/// Load and validate a bibliographic CSV, reporting normalization counts.
pub fn load_csv_with_stats(path: &Path) -> Result<(Vec<PaperRecord>, IngestStats)> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?
        .clone();
    let mut column_index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, name) in headers.iter().enumerate() {
        column_index.entry(name.trim()).or_insert(i);
    }
    for expected in CSV_COLUMNS {
        if !column_index.contains_key(expected) {
            return Err(Error::Schema(format!(
                "{display}: missing mandatory column {expected:?}"
            )));
        }
    }

    let col = |name: &str| column_index[name];
    let mut records = Vec::new();
    let mut stats = IngestStats::default();
    let mut seen: HashSet<String> = HashSet::new();
    let mut duplicates: Vec<String> = Vec::new();

    for (row_number, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?;
        // 1-based data row for error messages (header is row 0).
        let rowno = row_number + 1;
        let cell = |name: &str| row.get(col(name)).unwrap_or("");

        let bibcode = cell("bibcode").trim().to_string();
        if bibcode.is_empty() {
            return Err(Error::Validation(format!("row {rowno}: empty bibcode")));
        }
        if !seen.insert(bibcode.clone()) {
            duplicates.push(bibcode.clone());
        }

        let mut text = |name: &str| -> String {
            let raw = cell(name);
            if is_missing_cell(raw) {
                if raw.trim().is_empty() {
                    stats.empty_text_cells += 1;
                } else {
                    stats.nan_literal_cells += 1;
                }
                String::new()
            } else {
                raw.to_string()
            }
        };
        let title = text("title");
        let abstract_text = text("abstract");
        let body = text("body");
        let acknowledgments = text("acknowledgments");
        let grants = text("grants");

        let telescope_cell = cell("telescope");
        let telescope = if is_missing_cell(telescope_cell) {
            None
        } else {
            Some(telescope_cell.trim().to_string())
        };

        let bool_cells: Vec<&str> = BOOLEAN_LABEL_NAMES.iter().map(|n| cell(n)).collect();
        let present = bool_cells.iter().filter(|c| !is_missing_cell(c)).count();
        let booleans = match present {
            0 => {
                stats.unlabeled_rows += 1;
                None
            }
            4 => {
                let mut values = [false; 4];
                for (i, name) in BOOLEAN_LABEL_NAMES.iter().enumerate() {
                    values[i] = parse_bool_cell(bool_cells[i], rowno, name)?;
                }
                Some(BooleanLabels::from_array(values))
            }
            _ => {
                return Err(Error::Validation(format!(
                    "row {rowno}: {present} of 4 boolean labels present; need all or none"
                )))
            }
        };

        // Year is metadata; parsed leniently.
        let year = cell("year").trim().parse::<i64>().ok();

        records.push(PaperRecord {
            bibcode,
            telescope,
            author: cell("author").trim().to_string(),
            year,
            title,
            abstract_text,
            body,
            acknowledgments,
            grants,
            booleans,
        });
        stats.rows += 1;
    }

    if !duplicates.is_empty() {
        duplicates.sort();
        duplicates.dedup();
        return Err(Error::Validation(format!(
            "duplicate bibcodes: {}",
            duplicates.join(", ")
        )));
    }

    Ok((records, stats))
}

/// Load and validate a bibliographic CSV.
pub fn load_csv(path: &Path) -> Result<Vec<PaperRecord>> {
    load_csv_with_stats(path).map(|(records, _)| records)
}

/// Write records back out in the 13-column CSV shape.
pub fn write_csv(records: &[PaperRecord], path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: display.clone(),
        source: e,
    })?;
    let emit = |w: &mut csv::Writer<std::fs::File>, fields: Vec<String>| {
        w.write_record(&fields).map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })
    };
    emit(&mut writer, CSV_COLUMNS.iter().map(|s| s.to_string()).collect())?;
    for r in records {
        let bools: Vec<String> = match r.booleans {
            Some(b) => b
                .as_array()
                .iter()
                .map(|v| if *v { "TRUE" } else { "FALSE" }.to_string())
                .collect(),
            None => vec![String::new(); 4],
        };
        let mut fields = vec![
            r.bibcode.clone(),
            r.telescope.clone().unwrap_or_default(),
            r.author.clone(),
            r.year.map(|y| y.to_string()).unwrap_or_default(),
            r.title.clone(),
            r.abstract_text.clone(),
            r.body.clone(),
            r.acknowledgments.clone(),
            r.grants.clone(),
        ];
        fields.extend(bools);
        emit(&mut writer, fields)?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Join the five text fields with a single newline between non-empty fields.
pub fn concatenate_fields(record: &PaperRecord) -> String {
    let mut out = String::new();
    for field in record.text_fields() {
        if field.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(field);
    }
    out
}

/// Derive the telescope vocabulary from labeled records, lexicographically
/// ordered so class ids are stable across runs.
pub fn build_vocabulary(records: &[PaperRecord]) -> Result<LabelVocabulary> {
    if records.is_empty() {
        return Err(Error::Validation("cannot build vocabulary from an empty corpus".into()));
    }
    let mut classes: Vec<String> = Vec::new();
    for r in records {
        match &r.telescope {
            Some(name) => classes.push(name.clone()),
            None => {
                return Err(Error::Validation(format!(
                    "record {} has no telescope label",
                    r.bibcode
                )))
            }
        }
    }
    classes.sort();
    classes.dedup();
    Ok(LabelVocabulary { classes })
}
