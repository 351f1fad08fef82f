//! Source-tree scanning: lexical function extraction, per-function analysis,
//! and report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::attribution::{attribute_tokens, normalize_scores, select_root_cause};
use crate::corpus::{describe_cwe, FunctionRecord, Language, Origin};
use crate::error::{Error, Result};
use crate::lexer::{lex, Lexeme, TokenKind, Vocabulary, MAX_PAYLOAD};
use crate::model::{denormalize_lines, Baseline, FrozenModel, LabelMode, Sample};

pub const SOURCE_EXTENSIONS: [&str; 5] = ["c", "h", "cc", "cpp", "hpp"];

/// Functions found under a root plus per-file problems that were skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub records: Vec<FunctionRecord>,
    pub warnings: Vec<String>,
}

/// Trailing tokens allowed between `)` and the body's `{`.
const QUALIFIERS: &[&str] = &["const", "noexcept", "override", "final", "volatile", "throw", "&", "&&"];

fn directive_end_line(lines: &[&str], start: usize) -> usize {
    let mut l = start;
    while l <= lines.len() && lines[l - 1].trim_end().ends_with('\\') {
        l += 1;
    }
    l
}

/// Drops tokens on preprocessor lines (a `#` first on its line, through any
/// `\` continuations).
fn strip_directives(source: &str, lexemes: Vec<Lexeme>) -> Vec<Lexeme> {
    let lines: Vec<&str> = source.lines().collect();
    let mut out = Vec::with_capacity(lexemes.len());
    let mut skip_through = 0usize;
    let mut last_line = 0usize;
    for lx in lexemes {
        let line = lx.token.line;
        let first_on_line = line != last_line;
        last_line = line;
        if line <= skip_through {
            continue;
        }
        if first_on_line && lx.token.text == "#" {
            skip_through = directive_end_line(&lines, line);
            continue;
        }
        out.push(lx);
    }
    out
}

fn matching_open_paren(toks: &[Lexeme], close: usize) -> Option<usize> {
    let mut depth = 0usize;
    for i in (0..=close).rev() {
        match toks[i].token.text.as_str() {
            ")" => depth += 1,
            "(" => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// If the `{` at `open` starts a function body, returns the index of the
/// function-name token.
fn function_name_before(toks: &[Lexeme], open: usize) -> Option<usize> {
    let mut i = open.checked_sub(1)?;
    while QUALIFIERS.contains(&toks[i].token.text.as_str()) {
        i = i.checked_sub(1)?;
    }
    if toks[i].token.text != ")" {
        return None;
    }
    let lp = matching_open_paren(toks, i)?;
    let name = lp.checked_sub(1)?;
    (toks[name].token.kind == TokenKind::Identifier).then_some(name)
}

fn is_transparent_block(toks: &[Lexeme], open: usize) -> bool {
    let text = |k: usize| toks[k].token.text.as_str();
    match open {
        0 => false,
        1 => text(0) == "namespace",
        _ => {
            text(open - 1) == "namespace"
                || text(open - 2) == "namespace"
                || (text(open - 2) == "extern" && toks[open - 1].token.kind == TokenKind::StringLit)
        }
    }
}

/// Extracts top-level function definitions from one file's text.
pub fn extract_from_source(source: &str, rel_path: &str, language: Language) -> Result<Vec<FunctionRecord>> {
    let toks = strip_directives(source, lex(source)?);
    let unbalanced = |line: usize| Error::Lex {
        line,
        message: "unbalanced braces".into(),
    };
    let mut records = Vec::new();
    // Open braces at file scope that do not hide functions (namespaces, extern "C").
    let mut transparent = 0usize;
    // Index just past the last top-level boundary (`;`, `}`, or transparent `{`).
    let mut decl_start = 0usize;
    let mut i = 0usize;
    while i < toks.len() {
        match toks[i].token.text.as_str() {
            ";" => decl_start = i + 1,
            "}" => {
                if transparent == 0 {
                    return Err(unbalanced(toks[i].token.line));
                }
                transparent -= 1;
                decl_start = i + 1;
            }
            "{" if is_transparent_block(&toks, i) => {
                transparent += 1;
                decl_start = i + 1;
            }
            "{" => {
                let mut depth = 0usize;
                let mut close = None;
                for (j, t) in toks.iter().enumerate().skip(i) {
                    match t.token.text.as_str() {
                        "{" => depth += 1,
                        "}" => {
                            depth -= 1;
                            if depth == 0 {
                                close = Some(j);
                                break;
                            }
                        }
                        _ => {}
                    }
                }
                let close = close.ok_or_else(|| unbalanced(toks[i].token.line))?;
                if let Some(name) = function_name_before(&toks, i) {
                    let first = &toks[decl_start.min(name)];
                    let start_line = first.token.line;
                    let text = &source[first.start..toks[close].end];
                    let fname = &toks[name].token.text;
                    records.push(FunctionRecord {
                        id: format!("{rel_path}:{fname}:{start_line}"),
                        source: text.to_string(),
                        language,
                        cwe: None,
                        vul_start: None,
                        vul_end: None,
                        origin: Some(Origin {
                            file: rel_path.to_string(),
                            start_line,
                        }),
                    });
                }
                // Aggregate initializers and type bodies end with `;` later.
                i = close;
                decl_start = close + 1;
            }
            _ => {}
        }
        i += 1;
    }
    if transparent != 0 {
        return Err(unbalanced(toks.last().map_or(1, |t| t.token.line)));
    }
    Ok(records)
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Walks `root` in sorted order. Unreadable or unbalanced files are skipped
/// with a warning; only an unreadable root is an error.
pub fn extract_functions(root: impl AsRef<Path>) -> Result<Extraction> {
    let root = root.as_ref();
    let meta = fs::metadata(root).map_err(|e| Error::io(root, e))?;
    let mut out = Extraction::default();
    let files: Vec<PathBuf> = if meta.is_file() {
        vec![root.to_path_buf()]
    } else {
        let mut v = Vec::new();
        for entry in WalkDir::new(root).sort_by_file_name() {
            match entry {
                Ok(e) if e.file_type().is_file() => v.push(e.into_path()),
                Ok(_) => {}
                Err(e) => out.warnings.push(format!("skipped entry: {e}")),
            }
        }
        v
    };
    let base = if meta.is_file() {
        root.parent().unwrap_or(root)
    } else {
        root
    };
    for path in files {
        let Some(lang) = path.extension().and_then(|e| e.to_str()).and_then(|ext| {
            SOURCE_EXTENSIONS
                .contains(&ext)
                .then(|| Language::from_extension(ext))
                .flatten()
        }) else {
            continue;
        };
        let rel = relative(base, &path);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                out.warnings.push(format!("{rel}: skipped: {e}"));
                continue;
            }
        };
        let Ok(text) = String::from_utf8(bytes) else {
            out.warnings.push(format!("{rel}: skipped: not valid UTF-8"));
            continue;
        };
        match extract_from_source(&text, &rel, lang) {
            Ok(recs) => out.records.extend(recs),
            Err(e) => out.warnings.push(format!("{rel}: skipped: {e}")),
        }
    }
    out.records.sort_by(|a, b| {
        let key = |r: &FunctionRecord| r.origin.as_ref().map(|o| (o.file.clone(), o.start_line));
        key(a).cmp(&key(b))
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportStatus {
    Ok,
    Unanalyzable,
}

pub const NO_VULNERABILITY: &str = "none";

/// Developer-facing result for one function. Line numbers are file lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub id: String,
    pub file: String,
    pub span: (usize, usize),
    pub status: ReportStatus,
    pub error: Option<String>,
    pub predicted_cwe: String,
    pub confidence: f64,
    pub description: String,
    pub vul_lines: Option<(usize, usize)>,
    pub root_cause_line: Option<usize>,
    pub root_cause_fallback: Option<bool>,
    pub line_attributions: BTreeMap<usize, f64>,
    pub truncated: bool,
    pub warnings: Vec<String>,
}

impl AnalysisReport {
    pub fn is_vulnerable(&self) -> bool {
        self.predicted_cwe != NO_VULNERABILITY
    }

    /// Checks the report's own consistency rules.
    pub fn check(&self) -> std::result::Result<(), String> {
        let (s, e) = self.span;
        if s == 0 || s > e {
            return Err(format!("bad span {s}..={e}"));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        let located = self.vul_lines.is_some();
        if self.status == ReportStatus::Ok && self.is_vulnerable() != located {
            return Err("vul_lines must be present exactly when a vulnerability is predicted".into());
        }
        if let Some((a, b)) = self.vul_lines {
            if a > b || a < s || b > e {
                return Err(format!("vul_lines {a}..={b} outside span"));
            }
        }
        if let Some(r) = self.root_cause_line {
            if !self.is_vulnerable() || r <= s || r > e {
                return Err(format!("root cause line {r} not admissible in {s}..={e}"));
            }
        }
        if self.line_attributions.values().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("line attributions must be normalized".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Four labeled blocks followed by the source with the vulnerable lines
    /// (`>`) and root cause (`*`) marked.
    pub fn to_text(&self, source: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Function: {}", self.id);
        let _ = writeln!(out, "File: {} (lines {}-{})", self.file, self.span.0, self.span.1);
        if let Some(err) = &self.error {
            let _ = writeln!(out, "Status: unanalyzable ({err})");
        }
        for w in &self.warnings {
            let _ = writeln!(out, "Warning: {w}");
        }
        let _ = writeln!(out, "\n[1] Classification");
        if self.is_vulnerable() {
            let _ = writeln!(out, "    {} (confidence {:.4})", self.predicted_cwe, self.confidence);
        } else {
            let _ = writeln!(out, "    no vulnerability (confidence {:.4})", self.confidence);
        }
        let _ = writeln!(out, "\n[2] Vulnerable Line(s)");
        match self.vul_lines {
            Some((a, b)) if a == b => {
                let _ = writeln!(out, "    line {a}");
            }
            Some((a, b)) => {
                let _ = writeln!(out, "    lines {a}-{b}");
            }
            None => {
                let _ = writeln!(out, "    -");
            }
        }
        let _ = writeln!(out, "\n[3] Description\n    {}", self.description);
        let _ = writeln!(out, "\n[4] Root Cause");
        match self.root_cause_line {
            Some(l) => {
                let text = source.lines().nth(l - self.span.0).unwrap_or("").trim();
                let _ = writeln!(out, "    line {l}: {text}");
            }
            None => {
                let _ = writeln!(out, "    -");
            }
        }
        out.push('\n');
        for (k, text) in source.lines().enumerate() {
            let line = self.span.0 + k;
            let vul = self.vul_lines.is_some_and(|(a, b)| (a..=b).contains(&line));
            let mark = match (self.root_cause_line == Some(line), vul) {
                (true, _) => '*',
                (false, true) => '>',
                _ => ' ',
            };
            let _ = writeln!(out, "{mark} {line:>5} | {text}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AnalyzeOptions {
    pub baseline: Baseline,
}

fn binary_description() -> &'static str {
    "Vulnerable function (binary model; no CWE class is predicted)."
}

/// Runs the full pipeline on one function; never fails, problems are
/// recorded in the report.
pub fn analyze(
    record: &FunctionRecord,
    model: &FrozenModel,
    vocab: &Vocabulary,
    opts: AnalyzeOptions,
) -> AnalysisReport {
    let (file, offset) = match &record.origin {
        Some(o) => (o.file.clone(), o.start_line),
        None => (String::new(), 1),
    };
    let lc = record.line_count().max(1);
    let mut report = AnalysisReport {
        id: record.id.clone(),
        file,
        span: (offset, offset + lc - 1),
        status: ReportStatus::Ok,
        error: None,
        predicted_cwe: NO_VULNERABILITY.to_string(),
        confidence: 0.0,
        description: String::new(),
        vul_lines: None,
        root_cause_line: None,
        root_cause_fallback: None,
        line_attributions: BTreeMap::new(),
        truncated: false,
        warnings: Vec::new(),
    };
    if let Err(e) = fill(&mut report, record, model, vocab, opts, offset) {
        report.status = ReportStatus::Unanalyzable;
        report.error = Some(e.to_string());
        report.predicted_cwe = NO_VULNERABILITY.to_string();
        report.description = "Function could not be analyzed.".into();
        report.vul_lines = None;
        report.root_cause_line = None;
        report.root_cause_fallback = None;
        report.line_attributions.clear();
    }
    report
}

fn fill(
    report: &mut AnalysisReport,
    record: &FunctionRecord,
    model: &FrozenModel,
    vocab: &Vocabulary,
    opts: AnalyzeOptions,
    offset: usize,
) -> Result<()> {
    let sample = Sample::from_source(&record.id, &record.source, vocab, model.config().edges)?;
    if sample.stream.truncated() {
        report.truncated = true;
        report.warnings.push(format!(
            "function exceeds {MAX_PAYLOAD} tokens; only the first {MAX_PAYLOAD} were analyzed"
        ));
    }
    let out = model.forward(&sample)?;
    let class = out.predicted_class();
    report.confidence = out.probabilities()[class];
    let mode = model.config().label_mode();
    let Some(label) = mode.label(class) else {
        report.description = "No vulnerability detected.".into();
        return Ok(());
    };
    report.predicted_cwe = label.to_string();
    report.description = match mode {
        LabelMode::Multiclass => describe_cwe(label)?.to_string(),
        LabelMode::Binary => binary_description().to_string(),
    };
    let (start, end) = denormalize_lines(out.loc_pred, sample.line_count);
    let to_file = |l: usize| l + offset - 1;
    report.vul_lines = Some((to_file(start), to_file(end)));

    let attr = attribute_tokens(model, &sample, opts.baseline)?;
    report.line_attributions = normalize_scores(&attr.line_scores)
        .into_iter()
        .map(|(l, v)| (to_file(l), v))
        .collect();
    if sample.line_count >= 2 {
        let rc = select_root_cause(&attr.line_scores, start, sample.line_count)?;
        report.root_cause_line = Some(to_file(rc.line));
        report.root_cause_fallback = Some(rc.fallback_used);
    } else {
        report
            .warnings
            .push("single-line function: no line other than the declaration can be a root cause".into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanOptions {
    pub format: OutputFormat,
    pub threads: usize,
    pub analyze: AnalyzeOptions,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            format: OutputFormat::Json,
            threads: 1,
            analyze: AnalyzeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub functions: usize,
    pub unanalyzable: usize,
    /// Function count per predicted CWE (`none` for benign).
    pub counts: BTreeMap<String, usize>,
    pub skipped: Vec<String>,
}

impl ScanSummary {
    pub fn to_text(&self) -> String {
        let mut out = String::from("Predicted class       Count\n");
        for (k, v) in &self.counts {
            let _ = writeln!(out, "{k:<20} {v:>6}");
        }
        let _ = writeln!(out, "{:<20} {:>6}", "total", self.functions);
        if self.unanalyzable > 0 {
            let _ = writeln!(out, "{:<20} {:>6}", "unanalyzable", self.unanalyzable);
        }
        for s in &self.skipped {
            let _ = writeln!(out, "skipped: {s}");
        }
        out
    }
}

pub const REPORTS_DIR: &str = "reports";

fn report_file_name(index: usize, id: &str, format: OutputFormat) -> String {
    let clean: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect();
    let ext = match format {
        OutputFormat::Json => "json",
        OutputFormat::Text => "txt",
    };
    format!("{index:05}-{clean}.{ext}")
}

/// Analyzes the records in parallel on `threads` workers; output order is
/// the input order.
pub fn analyze_all(
    records: &[FunctionRecord],
    model: &FrozenModel,
    vocab: &Vocabulary,
    threads: usize,
    opts: AnalyzeOptions,
) -> Result<Vec<AnalysisReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| records.par_iter().map(|r| analyze(r, model, vocab, opts)).collect()))
}

/// Extracts, analyzes and writes one report per function under
/// `out/reports/`, plus `summary.json` and `summary.txt`.
pub fn scan(
    root: impl AsRef<Path>,
    model: &FrozenModel,
    vocab: &Vocabulary,
    out: impl AsRef<Path>,
    opts: ScanOptions,
) -> Result<ScanSummary> {
    let out = out.as_ref();
    let extraction = extract_functions(root)?;
    let reports = analyze_all(&extraction.records, model, vocab, opts.threads, opts.analyze)?;

    let reports_dir = out.join(REPORTS_DIR);
    if reports_dir.exists() {
        fs::remove_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    }
    fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;

    let mut counts = BTreeMap::new();
    let mut unanalyzable = 0;
    for (i, (report, record)) in reports.iter().zip(&extraction.records).enumerate() {
        *counts.entry(report.predicted_cwe.clone()).or_insert(0) += 1;
        if report.status == ReportStatus::Unanalyzable {
            unanalyzable += 1;
        }
        let body = match opts.format {
            OutputFormat::Json => report.to_json()?,
            OutputFormat::Text => report.to_text(&record.source),
        };
        let path = reports_dir.join(report_file_name(i, &report.id, opts.format));
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    let summary = ScanSummary {
        functions: reports.len(),
        unanalyzable,
        counts,
        skipped: extraction.warnings,
    };
    let p = out.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&p, e))?;
    let p = out.join("summary.txt");
    fs::write(&p, summary.to_text()).map_err(|e| Error::io(&p, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(src: &str) -> Vec<(String, usize)> {
        extract_from_source(src, "f.c", Language::C)
            .unwrap()
            .into_iter()
            .map(|r| {
                let parts: Vec<&str> = r.id.split(':').collect();
                (parts[1].to_string(), r.origin.unwrap().start_line)
            })
            .collect()
    }

    #[test]
    fn two_functions_with_lines() {
        let src = "#include <stdio.h>\n\nstatic int add(int a, int b)\n{\n  return a + b;\n}\n\nvoid hello(void) {\n  puts(\"hi\");\n}\n";
        assert_eq!(names(src), vec![("add".into(), 3), ("hello".into(), 8)]);
    }

    #[test]
    fn prototypes_and_types_are_not_functions() {
        let src = "int f(int);\nstruct s { int a; };\ntypedef struct { int b; } t;\nint arr[] = { 1, 2 };\n";
        assert!(names(src).is_empty());
    }

    #[test]
    fn braces_in_literals_are_ignored() {
        let src = "const char *g(void) {\n  return \"}}}\";\n}\nint h(void) { return '{'; }\n";
        assert_eq!(names(src), vec![("g".into(), 1), ("h".into(), 4)]);
    }

    #[test]
    fn namespaces_and_extern_c_are_transparent() {
        let src = "namespace a {\nint f() { return 1; }\n}\nextern \"C\" {\nvoid g(void) {}\n}\nnamespace {\nint k() const { return 0; }\n}\n";
        assert_eq!(names(src), vec![("f".into(), 2), ("g".into(), 5), ("k".into(), 8)]);
    }

    #[test]
    fn macros_with_braces_are_skipped() {
        let src = "#define BODY { \\\n  x; }\nint f(void) {\n  return 0;\n}\n";
        assert_eq!(names(src), vec![("f".into(), 3)]);
    }

    #[test]
    fn unbalanced_file_is_an_error() {
        assert!(extract_from_source("int f() {\n", "x.c", Language::C).is_err());
        assert!(extract_from_source("}\nint f() {}\n", "x.c", Language::C).is_err());
    }

    #[test]
    fn source_slice_matches_file() {
        let src = "int x;\n  int f(int a) {\n  return a;\n}\n";
        let recs = extract_from_source(src, "f.c", Language::C).unwrap();
        let r = &recs[0];
        assert_eq!(r.source, "int f(int a) {\n  return a;\n}");
        assert_eq!(r.origin.as_ref().unwrap().start_line, 2);
        let line = src.lines().nth(1).unwrap();
        assert!(line.ends_with(r.source.lines().next().unwrap()));
    }

    #[test]
    fn report_file_names_are_safe_and_ordered() {
        assert_eq!(
            report_file_name(3, "a/b.c:f:10", OutputFormat::Json),
            "00003-a_b.c_f_10.json"
        );
    }
}
