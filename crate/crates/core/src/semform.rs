//! Structured semantic forms (PropBank- or FrameNet-style frames) and the two
//! ingestion formats: canonical JSONL records and CoNLL-style BIO columns.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::linearize::word_tokens;

#[derive(Debug, Error, PartialEq)]
pub enum SemformError {
    #[error("malformed JSON at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid semantic form: {}", join_violations(.0))]
    Validation(Vec<Violation>),
    #[error("line {line}: {message}")]
    TagSequence { line: usize, message: String },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// One labeled argument slot. A `None` filler is a role whose text has been
/// removed (rendered as the empty-set marker when linearized).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RoleSlot {
    pub label: String,
    pub filler: Option<Vec<String>>,
}

impl RoleSlot {
    pub fn new(label: impl Into<String>, filler: &str) -> Self {
        RoleSlot {
            label: label.into(),
            filler: Some(word_tokens(filler)),
        }
    }

    pub fn empty(label: impl Into<String>) -> Self {
        RoleSlot {
            label: label.into(),
            filler: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SemanticForm {
    pub frame_name: String,
    pub predicate: String,
    pub roles: Vec<RoleSlot>,
    pub source_sentence_id: String,
}

impl SemanticForm {
    pub fn role(&self, label: &str) -> Option<&RoleSlot> {
        self.roles.iter().find(|r| r.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceRecord {
    pub sentence_id: String,
    pub text: String,
    pub forms: Vec<SemanticForm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    EmptyPredicate,
    DuplicateRoleLabel,
    EmptyRoleLabel,
    EmptyFiller,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Field path of the offending value, e.g. `roles[2].filler`.
    pub path: String,
}

impl Violation {
    pub fn message(&self) -> &'static str {
        match self.kind {
            ViolationKind::EmptyPredicate => "empty predicate",
            ViolationKind::DuplicateRoleLabel => "duplicate role label",
            ViolationKind::EmptyRoleLabel => "empty role label",
            ViolationKind::EmptyFiller => "empty filler",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.message(), self.path)
    }
}

pub fn validate_form(form: &SemanticForm) -> Vec<Violation> {
    let mut out = Vec::new();
    if form.predicate.trim().is_empty() {
        out.push(Violation {
            kind: ViolationKind::EmptyPredicate,
            path: "predicate".into(),
        });
    }
    let mut seen = HashSet::new();
    for (i, role) in form.roles.iter().enumerate() {
        if role.label.trim().is_empty() {
            out.push(Violation {
                kind: ViolationKind::EmptyRoleLabel,
                path: format!("roles[{i}].label"),
            });
        } else if !seen.insert(role.label.as_str()) {
            out.push(Violation {
                kind: ViolationKind::DuplicateRoleLabel,
                path: format!("roles[{i}].label"),
            });
        }
        if let Some(filler) = &role.filler {
            if filler.is_empty() || filler.iter().any(|t| t.is_empty()) {
                out.push(Violation {
                    kind: ViolationKind::EmptyFiller,
                    path: format!("roles[{i}].filler"),
                });
            }
        }
    }
    out
}

pub(crate) fn check_form(form: SemanticForm) -> Result<SemanticForm, SemformError> {
    let violations = validate_form(&form);
    if violations.is_empty() {
        Ok(form)
    } else {
        Err(SemformError::Validation(violations))
    }
}

// JSON ----------------------------------------------------------------------

/// Wire shape of a form. `source` is omitted inside corpus records, where the
/// enclosing record id is the source.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FormJson {
    pub frame: String,
    pub predicate: String,
    pub roles: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl FormJson {
    pub fn from_form(form: &SemanticForm, with_source: bool) -> Self {
        let roles = form
            .roles
            .iter()
            .map(|r| {
                let v = match &r.filler {
                    Some(tokens) => Value::String(tokens.join(" ")),
                    None => Value::Null,
                };
                (r.label.clone(), v)
            })
            .collect();
        FormJson {
            frame: form.frame_name.clone(),
            predicate: form.predicate.clone(),
            roles,
            source: with_source.then(|| form.source_sentence_id.clone()),
        }
    }

    pub fn into_form(self, default_source: &str) -> Result<SemanticForm, SemformError> {
        let mut roles = Vec::with_capacity(self.roles.len());
        for (label, value) in self.roles {
            let filler = match value {
                Value::Null => None,
                Value::String(s) => Some(word_tokens(&s)),
                other => {
                    return Err(SemformError::Schema(format!(
                        "role `{label}` filler must be a string or null, got {other}"
                    )))
                }
            };
            roles.push(RoleSlot { label, filler });
        }
        check_form(SemanticForm {
            frame_name: self.frame,
            predicate: self.predicate,
            roles,
            source_sentence_id: self.source.unwrap_or_else(|| default_source.to_string()),
        })
    }
}

fn json_error(line: &str, e: serde_json::Error) -> SemformError {
    // serde_json reports 1-based line/column; for a single line the column is
    // the byte position of the failure.
    let offset = if e.line() <= 1 {
        e.column().saturating_sub(1)
    } else {
        line.split('\n')
            .take(e.line() - 1)
            .map(|l| l.len() + 1)
            .sum::<usize>()
            + e.column().saturating_sub(1)
    };
    SemformError::Parse {
        offset,
        message: e.to_string(),
    }
}

fn take_str(obj: &mut Map<String, Value>, key: &str, ctx: &str) -> Result<String, SemformError> {
    match obj.remove(key) {
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(SemformError::Schema(format!(
            "{ctx}key `{key}` must be a string, got {other}"
        ))),
        None => Err(SemformError::Schema(format!("{ctx}missing key `{key}`"))),
    }
}

/// Parses a single-form JSON object (`frame`, `predicate`, `roles`, optional `source`).
pub fn parse_form_value(value: Value, default_source: &str) -> Result<SemanticForm, SemformError> {
    parse_form_obj(value, default_source, "")
}

fn parse_form_obj(value: Value, default_source: &str, ctx: &str) -> Result<SemanticForm, SemformError> {
    let Value::Object(mut obj) = value else {
        return Err(SemformError::Schema(format!("{ctx}form must be an object")));
    };
    let frame = take_str(&mut obj, "frame", ctx)?;
    let predicate = take_str(&mut obj, "predicate", ctx)?;
    let roles = match obj.remove("roles") {
        Some(Value::Object(m)) => m,
        Some(_) => return Err(SemformError::Schema(format!("{ctx}key `roles` must be an object"))),
        None => return Err(SemformError::Schema(format!("{ctx}missing key `roles`"))),
    };
    let source = match obj.remove("source") {
        Some(Value::String(s)) => Some(s),
        _ => None,
    };
    FormJson {
        frame,
        predicate,
        roles,
        source,
    }
    .into_form(default_source)
}

pub fn parse_jsonl_record(line: &str) -> Result<SentenceRecord, SemformError> {
    let value: Value = serde_json::from_str(line).map_err(|e| json_error(line, e))?;
    let Value::Object(mut obj) = value else {
        return Err(SemformError::Schema("record must be a JSON object".into()));
    };
    let sentence_id = match obj.remove("id") {
        Some(Value::String(s)) => s,
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(SemformError::Schema("key `id` must be a string".into())),
        None => return Err(SemformError::Schema("missing key `id`".into())),
    };
    let text = take_str(&mut obj, "text", "")?;
    if text.trim().is_empty() {
        return Err(SemformError::Schema("key `text` must be non-empty".into()));
    }
    let forms = match obj.remove("forms") {
        Some(Value::Array(items)) => items
            .into_iter()
            .enumerate()
            .map(|(i, v)| parse_form_obj(v, &sentence_id, &format!("forms[{i}]: ")))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(SemformError::Schema("key `forms` must be an array".into())),
        None => return Err(SemformError::Schema("missing key `forms`".into())),
    };
    Ok(SentenceRecord {
        sentence_id,
        text,
        forms,
    })
}

#[derive(Serialize)]
struct RecordJson<'a> {
    id: &'a str,
    text: &'a str,
    forms: Vec<FormJson>,
}

pub fn record_to_json(record: &SentenceRecord) -> String {
    let json = RecordJson {
        id: &record.sentence_id,
        text: &record.text,
        forms: record.forms.iter().map(|f| FormJson::from_form(f, false)).collect(),
    };
    serde_json::to_string(&json).expect("record serialization cannot fail")
}

pub fn form_to_value(form: &SemanticForm) -> Value {
    serde_json::to_value(FormJson::from_form(form, true)).expect("form serialization cannot fail")
}

/// Reads a JSONL corpus, rejecting duplicate sentence ids. Blank lines are skipped.
pub fn read_corpus(text: &str) -> Result<Vec<SentenceRecord>, (usize, SemformError)> {
    let mut ids = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_jsonl_record(line).map_err(|e| (i + 1, e))?;
        if !ids.insert(record.sentence_id.clone()) {
            return Err((
                i + 1,
                SemformError::Schema(format!("duplicate sentence id `{}`", record.sentence_id)),
            ));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_corpus(records: &[SentenceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&record_to_json(r));
        out.push('\n');
    }
    out
}

// CoNLL ---------------------------------------------------------------------

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Option<Tag<'_>> {
    if tag == "O" || tag == "_" || tag == "-" {
        Some(Tag::Outside)
    } else if let Some(l) = tag.strip_prefix("B-") {
        Some(Tag::Begin(l))
    } else {
        tag.strip_prefix("I-").map(Tag::Inside)
    }
}

/// Decodes one sentence of tab-separated columns: the token in column 0 and
/// one BIO tag column per predicate after it. `first_line` is the 1-based
/// line number of `lines[0]` in the enclosing file, used in error messages.
pub fn parse_conll_block(
    lines: &[&str],
    sentence_id: &str,
    first_line: usize,
) -> Result<Vec<SemanticForm>, SemformError> {
    let rows: Vec<Vec<&str>> = lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim_end_matches(['\r', '\n']).split('\t').collect())
        .collect();
    let Some(first) = rows.first() else {
        return Ok(Vec::new());
    };
    let width = first.len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(SemformError::Schema(format!(
                "line {}: expected {width} columns, found {}",
                first_line + i,
                row.len()
            )));
        }
    }
    let tokens: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    let mut forms = Vec::with_capacity(width.saturating_sub(1));
    for col in 1..width {
        // (label, tokens) spans in document order
        let mut spans: Vec<(String, Vec<String>)> = Vec::new();
        let mut open: Option<usize> = None;
        for (i, row) in rows.iter().enumerate() {
            let line = first_line + i;
            let tag = parse_tag(row[col]).ok_or_else(|| SemformError::TagSequence {
                line,
                message: format!("unrecognized tag `{}`", row[col]),
            })?;
            match tag {
                Tag::Outside => open = None,
                Tag::Begin(label) => {
                    spans.push((label.to_string(), vec![tokens[i].to_string()]));
                    open = Some(spans.len() - 1);
                }
                Tag::Inside(label) => match open {
                    Some(j) if spans[j].0 == label => spans[j].1.push(tokens[i].to_string()),
                    _ => {
                        return Err(SemformError::TagSequence {
                            line,
                            message: format!("I-{label} without preceding B-{label}"),
                        })
                    }
                },
            }
        }
        let mut predicate = None;
        let mut roles = Vec::new();
        for (label, toks) in spans {
            if label == "V" {
                if predicate.is_some() {
                    return Err(SemformError::TagSequence {
                        line: first_line,
                        message: format!("column {col} has more than one V span"),
                    });
                }
                predicate = Some(toks.join(" "));
            } else {
                roles.push(RoleSlot {
                    label,
                    filler: Some(toks),
                });
            }
        }
        let predicate = predicate.ok_or_else(|| SemformError::TagSequence {
            line: first_line,
            message: format!("column {col} has no B-V predicate"),
        })?;
        forms.push(check_form(SemanticForm {
            frame_name: predicate.to_lowercase(),
            predicate,
            roles,
            source_sentence_id: sentence_id.to_string(),
        })?);
    }
    Ok(forms)
}

/// Reads a whole CoNLL file: blank lines delimit sentences, ids are `{prefix}{n}`.
pub fn read_conll(text: &str, id_prefix: &str) -> Result<Vec<SentenceRecord>, SemformError> {
    let mut records = Vec::new();
    let mut block: Vec<&str> = Vec::new();
    let mut block_start = 1;
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            if !block.is_empty() {
                records.push(conll_record(&block, id_prefix, records.len(), block_start)?);
                block.clear();
            }
            block_start = i + 2;
        } else {
            block.push(line);
        }
    }
    if !block.is_empty() {
        records.push(conll_record(&block, id_prefix, records.len(), block_start)?);
    }
    Ok(records)
}

fn conll_record(
    block: &[&str],
    prefix: &str,
    n: usize,
    first_line: usize,
) -> Result<SentenceRecord, SemformError> {
    let id = format!("{prefix}{n}");
    let forms = parse_conll_block(block, &id, first_line)?;
    let text = block
        .iter()
        .map(|l| l.split('\t').next().unwrap_or(""))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(SentenceRecord {
        sentence_id: id,
        text,
        forms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const STATUE: &str = r#"{"id":"q1","text":"The Statue of Liberty was built in 1875.","forms":[{"frame":"build.01","predicate":"built","roles":{"ARG1":"The Statue of Liberty","ARGM-TMP":"in 1875"}}]}"#;

    #[test]
    fn parses_statue_record() {
        let r = parse_jsonl_record(STATUE).unwrap();
        assert_eq!(r.sentence_id, "q1");
        assert_eq!(r.forms.len(), 1);
        let f = &r.forms[0];
        assert_eq!(f.frame_name, "build.01");
        assert_eq!(f.roles.len(), 2);
        assert_eq!(f.roles[0].label, "ARG1");
        assert_eq!(
            f.roles[0].filler.as_deref().unwrap(),
            ["The", "Statue", "of", "Liberty"]
        );
        assert_eq!(f.roles[1].label, "ARGM-TMP");
        assert_eq!(f.source_sentence_id, "q1");
        assert!(validate_form(f).is_empty());
    }

    #[test]
    fn role_order_follows_document_order() {
        let line = r#"{"id":"a","text":"t","forms":[{"frame":"f","predicate":"p","roles":{"Z":"z","A":"a","M":"m"}}]}"#;
        let r = parse_jsonl_record(line).unwrap();
        let labels: Vec<_> = r.forms[0].roles.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["Z", "A", "M"]);
    }

    #[test]
    fn empty_forms_record() {
        let r = parse_jsonl_record(r#"{"id":"e0","text":"X.","forms":[]}"#).unwrap();
        assert!(r.forms.is_empty());
    }

    #[test]
    fn truncated_json_is_parse_error() {
        match parse_jsonl_record(r#"{"id":"b","text":"Y.""#) {
            Err(SemformError::Parse { offset, .. }) => assert!(offset <= 20),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_key_names_the_key() {
        let err = parse_jsonl_record(r#"{"id":"b","forms":[]}"#).unwrap_err();
        assert!(matches!(&err, SemformError::Schema(m) if m.contains("`text`")), "{err}");
        let err =
            parse_jsonl_record(r#"{"id":"b","text":"t","forms":[{"frame":"f","roles":{}}]}"#)
                .unwrap_err();
        assert!(matches!(&err, SemformError::Schema(m) if m.contains("`predicate`")), "{err}");
    }

    #[test]
    fn empty_predicate_is_validation_error() {
        let err = parse_jsonl_record(
            r#"{"id":"b","text":"t","forms":[{"frame":"f","predicate":"","roles":{}}]}"#,
        )
        .unwrap_err();
        match err {
            SemformError::Validation(v) => assert_eq!(v[0].kind, ViolationKind::EmptyPredicate),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn null_filler_is_absent() {
        let r = parse_jsonl_record(
            r#"{"id":"b","text":"t","forms":[{"frame":"f","predicate":"p","roles":{"ARG0":null}}]}"#,
        )
        .unwrap();
        assert_eq!(r.forms[0].roles[0].filler, None);
    }

    #[test]
    fn validate_reports_each_violation() {
        let mut f = parse_jsonl_record(STATUE).unwrap().forms.remove(0);
        f.roles.push(RoleSlot::new("ARG1", "again"));
        let v = validate_form(&f);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message(), "duplicate role label");
        assert_eq!(v[0].path, "roles[2].label");

        f.roles.pop();
        f.predicate.clear();
        let v = validate_form(&f);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message(), "empty predicate");

        f.predicate = "p".into();
        f.roles[0].filler = Some(vec![]);
        assert_eq!(validate_form(&f)[0].kind, ViolationKind::EmptyFiller);
    }

    #[test]
    fn conll_single_predicate() {
        let lines = ["The\tB-ARG0", "dog\tI-ARG0", "barked\tB-V"];
        let forms = parse_conll_block(&lines, "s", 1).unwrap();
        assert_eq!(forms.len(), 1);
        assert_eq!(forms[0].predicate, "barked");
        assert_eq!(forms[0].roles.len(), 1);
        assert_eq!(forms[0].roles[0].label, "ARG0");
        assert_eq!(forms[0].roles[0].filler.as_deref().unwrap(), ["The", "dog"]);
    }

    #[test]
    fn conll_two_predicates() {
        let lines = [
            "John\tB-ARG0\tB-ARG0",
            "tried\tB-V\tO",
            "to\tB-ARG1\tO",
            "sing\tI-ARG1\tB-V",
        ];
        let forms = parse_conll_block(&lines, "s", 1).unwrap();
        assert_eq!(forms.len(), 2);
        assert_eq!(forms[0].predicate, "tried");
        assert_eq!(forms[1].predicate, "sing");
        assert_eq!(forms[0].role("ARG1").unwrap().filler.as_deref().unwrap(), ["to", "sing"]);
    }

    #[test]
    fn conll_inside_without_begin() {
        let lines = ["The\tI-ARG0", "dog\tI-ARG0", "barked\tB-V"];
        assert_eq!(
            parse_conll_block(&lines, "s", 10).unwrap_err(),
            SemformError::TagSequence {
                line: 10,
                message: "I-ARG0 without preceding B-ARG0".into()
            }
        );
        let lines = ["The\tB-ARG1", "dog\tI-ARG0", "barked\tB-V"];
        assert!(matches!(
            parse_conll_block(&lines, "s", 1),
            Err(SemformError::TagSequence { line: 2, .. })
        ));
    }

    #[test]
    fn conll_ragged_columns() {
        let lines = ["The\tB-ARG0", "dog", "barked\tB-V"];
        assert!(matches!(
            parse_conll_block(&lines, "s", 1),
            Err(SemformError::Schema(_))
        ));
    }

    #[test]
    fn conll_file_splits_on_blank_lines() {
        let text = "The\tB-ARG0\ndog\tI-ARG0\nbarked\tB-V\n\nCats\tB-ARG0\nsleep\tB-V\n";
        let recs = read_conll(text, "c").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].sentence_id, "c1");
        assert_eq!(recs[1].text, "Cats sleep");
        assert_eq!(recs[1].forms[0].predicate, "sleep");
    }

    #[test]
    fn corpus_rejects_duplicate_ids() {
        let text = format!("{STATUE}\n{STATUE}\n");
        let (line, err) = read_corpus(&text).unwrap_err();
        assert_eq!(line, 2);
        assert!(matches!(err, SemformError::Schema(_)));
    }
}
