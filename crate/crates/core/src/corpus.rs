//! Labeled function datasets: JSONL ingestion, validation, deterministic
//! train/val/test splitting, and the static CWE catalog.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label used by corpora that mark a function vulnerable without naming a class.
pub const BINARY_VULN_LABEL: &str = "VULN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    C,
    Cpp,
}

impl Language {
    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext {
            "c" | "h" => Some(Language::C),
            "cc" | "cpp" | "hpp" | "cxx" | "hh" => Some(Language::Cpp),
            _ => None,
        }
    }
}

/// Where a function came from inside a source tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Origin {
    pub file: String,
    /// 1-based line in `file` holding the function's first line.
    pub start_line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionRecord {
    pub id: String,
    pub source: String,
    pub language: Language,
    pub cwe: Option<String>,
    pub vul_start: Option<usize>,
    pub vul_end: Option<usize>,
    pub origin: Option<Origin>,
}

impl FunctionRecord {
    pub fn benign(id: impl Into<String>, source: impl Into<String>, language: Language) -> Self {
        FunctionRecord {
            id: id.into(),
            source: source.into(),
            language,
            cwe: None,
            vul_start: None,
            vul_end: None,
            origin: None,
        }
    }

    pub fn vulnerable(
        id: impl Into<String>,
        source: impl Into<String>,
        language: Language,
        cwe: impl Into<String>,
        vul_lines: (usize, usize),
    ) -> Self {
        FunctionRecord {
            id: id.into(),
            source: source.into(),
            language,
            cwe: Some(cwe.into()),
            vul_start: Some(vul_lines.0),
            vul_end: Some(vul_lines.1),
            origin: None,
        }
    }

    pub fn is_vulnerable(&self) -> bool {
        self.cwe.is_some()
    }

    pub fn line_count(&self) -> usize {
        line_count(&self.source)
    }

    /// Labeled vulnerable range, if any.
    pub fn vul_lines(&self) -> Option<(usize, usize)> {
        match (self.vul_start, self.vul_end) {
            (Some(s), Some(e)) => Some((s, e)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |message: String| Error::InvalidRecord {
            id: self.id.clone(),
            message,
        };
        if self.id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        if self.source.trim().is_empty() {
            return Err(invalid("source has no non-whitespace characters".into()));
        }
        match &self.cwe {
            Some(cwe) => {
                if cwe != BINARY_VULN_LABEL && CweCatalog::standard().class_index(cwe).is_none() {
                    return Err(invalid(format!("label `{cwe}` is not in the CWE catalog")));
                }
                let (start, end) = match (self.vul_start, self.vul_end) {
                    (Some(s), Some(e)) => (s, e),
                    _ => return Err(invalid("labeled record needs vul_start and vul_end".into())),
                };
                let lines = self.line_count();
                if start < 1 || start > end || end > lines {
                    return Err(invalid(format!(
                        "vulnerable range {start}..={end} outside 1..={lines} or reversed"
                    )));
                }
            }
            None => {
                if self.vul_start.is_some() || self.vul_end.is_some() {
                    return Err(invalid("benign record carries a vulnerable range".into()));
                }
            }
        }
        if let Some(origin) = &self.origin {
            if origin.start_line == 0 {
                return Err(invalid("file_start_line must be 1-based".into()));
            }
        }
        Ok(())
    }
}

/// Number of `\n`-separated lines; a single trailing newline does not open a new line.
pub fn line_count(source: &str) -> usize {
    let trimmed = source.strip_suffix('\n').unwrap_or(source);
    trimmed.split('\n').count()
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordWire {
    id: String,
    source: String,
    language: Language,
    #[serde(default)]
    cwe: Option<String>,
    #[serde(default)]
    vul_start: Option<usize>,
    #[serde(default)]
    vul_end: Option<usize>,
    #[serde(default)]
    file: Option<String>,
    #[serde(default)]
    file_start_line: Option<usize>,
}

impl From<&FunctionRecord> for RecordWire {
    fn from(r: &FunctionRecord) -> Self {
        RecordWire {
            id: r.id.clone(),
            source: r.source.clone(),
            language: r.language,
            cwe: r.cwe.clone(),
            vul_start: r.vul_start,
            vul_end: r.vul_end,
            file: r.origin.as_ref().map(|o| o.file.clone()),
            file_start_line: r.origin.as_ref().map(|o| o.start_line),
        }
    }
}

impl RecordWire {
    fn into_record(self, line: usize) -> Result<FunctionRecord> {
        let origin = match (self.file, self.file_start_line) {
            (Some(file), Some(start_line)) => Some(Origin { file, start_line }),
            (None, None) => None,
            _ => {
                return Err(Error::MalformedRecord {
                    line,
                    message: "`file` and `file_start_line` must be given together".into(),
                })
            }
        };
        Ok(FunctionRecord {
            id: self.id,
            source: self.source.replace("\r\n", "\n"),
            language: self.language,
            cwe: self.cwe,
            vul_start: self.vul_start,
            vul_end: self.vul_end,
            origin,
        })
    }
}

pub fn parse_record(line: &str, line_no: usize) -> Result<FunctionRecord> {
    let wire: RecordWire = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
        line: line_no,
        message: e.to_string(),
    })?;
    let record = wire.into_record(line_no)?;
    record.validate()?;
    Ok(record)
}

pub fn record_to_json(record: &FunctionRecord) -> String {
    serde_json::to_string(&RecordWire::from(record)).expect("record serialization is infallible")
}

/// Loads a JSONL dataset. Blank lines are ignored; order is preserved.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<FunctionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Vec<FunctionRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(line, idx + 1)?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[FunctionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        writeln!(out, "{}", record_to_json(record)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    /// Builds a split from explicit id lists, checking that they are disjoint.
    pub fn new(train: Vec<String>, val: Vec<String>, test: Vec<String>, seed: u64) -> Result<Self> {
        let mut seen = HashSet::new();
        for id in train.iter().chain(&val).chain(&test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidSplit(format!("id `{id}` appears twice")));
            }
        }
        Ok(DatasetSplit { train, val, test, seed })
    }

    /// Puts every record in the training partition (used for overfit runs).
    pub fn all_train(records: &[FunctionRecord]) -> Self {
        DatasetSplit {
            train: records.iter().map(|r| r.id.clone()).collect(),
            val: Vec::new(),
            test: Vec::new(),
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Partition sizes for an 80:10:10 split by the largest-remainder method.
/// Ties in the fractional part go to train, then val, then test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let weights = [8usize, 1, 1];
    let mut sizes = weights.map(|w| n * w / 10);
    let rems = weights.map(|w| n * w % 10);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[k] += 1;
        left -= 1;
    }
    (sizes[0], sizes[1], sizes[2])
}

/// Seeded, class-agnostic 80:10:10 split.
pub fn split(records: &[FunctionRecord], seed: u64) -> Result<DatasetSplit> {
    if records.len() < 10 {
        return Err(Error::DatasetTooSmall(records.len()));
    }
    let mut ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(ids.len());
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    DatasetSplit::new(ids, val, test, seed)
}

/// Selects records by id, in the order the ids are listed.
pub fn select<'a>(records: &'a [FunctionRecord], ids: &[String]) -> Result<Vec<&'a FunctionRecord>> {
    let index: std::collections::HashMap<&str, &FunctionRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidSplit(format!("id `{id}` not in dataset")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct CweEntry {
    pub id: &'static str,
    pub class_index: usize,
    pub description: &'static str,
}

const CATALOG: [CweEntry; 10] = [
    CweEntry {
        id: "CWE-119",
        class_index: 1,
        description: "Improper Restriction of Operations within the Bounds of a Memory Buffer. \
                      The code reads or writes memory outside the intended buffer.",
    },
    CweEntry {
        id: "CWE-264",
        class_index: 2,
        description: "Permissions, Privileges, and Access Controls. \
                      The code mishandles permission, privilege, or access-control checks.",
    },
    CweEntry {
        id: "CWE-125",
        class_index: 3,
        description: "Out-of-bounds Read. \
                      The code reads data past the end, or before the beginning, of the intended buffer.",
    },
    CweEntry {
        id: "CWE-200",
        class_index: 4,
        description: "Exposure of Sensitive Information to an Unauthorized Actor. \
                      The code reveals sensitive data to an actor not allowed to see it.",
    },
    CweEntry {
        id: "CWE-416",
        class_index: 5,
        description: "Use After Free. \
                      The code references memory after it has been freed.",
    },
    CweEntry {
        id: "CWE-399",
        class_index: 6,
        description: "Resource Management Errors. \
                      The code mismanages resources such as memory, descriptors, or locks.",
    },
    CweEntry {
        id: "CWE-20",
        class_index: 7,
        description: "Improper Input Validation. \
                      The code does not validate, or wrongly validates, input before using it.",
    },
    CweEntry {
        id: "CWE-476",
        class_index: 8,
        description: "NULL Pointer Dereference. \
                      The code dereferences a pointer that can be NULL at that point.",
    },
    CweEntry {
        id: "CWE-189",
        class_index: 9,
        description: "Numeric Errors. \
                      The code computes values that can be wrong through sign, truncation, or range errors.",
    },
    CweEntry {
        id: "CWE-190",
        class_index: 10,
        description: "Integer Overflow or Wraparound. \
                      A calculation can overflow and the wrapped result is later trusted.",
    },
];

/// The ten vulnerability classes and their static descriptions. Class index 0
/// is reserved for benign functions.
#[derive(Debug, Clone, Copy)]
pub struct CweCatalog {
    entries: &'static [CweEntry],
}

impl CweCatalog {
    pub fn standard() -> Self {
        CweCatalog { entries: &CATALOG }
    }

    pub fn entries(&self) -> &'static [CweEntry] {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_index(&self, cwe: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.id == cwe).map(|e| e.class_index)
    }

    pub fn by_class(&self, class_index: usize) -> Option<&'static CweEntry> {
        self.entries.iter().find(|e| e.class_index == class_index)
    }

    pub fn describe(&self, cwe: &str) -> Result<&'static str> {
        self.entries
            .iter()
            .find(|e| e.id == cwe)
            .map(|e| e.description)
            .ok_or_else(|| Error::UnknownCwe {
                id: cwe.to_string(),
                valid: self.entries.iter().map(|e| e.id).collect::<Vec<_>>().join(", "),
            })
    }
}

pub fn describe_cwe(cwe: &str) -> Result<&'static str> {
    CweCatalog::standard().describe(cwe)
}
