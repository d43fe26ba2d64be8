//! Marker-prefixed token sequences for sentences and semantic forms, the
//! vocabulary, and fixed-length integer encoding.

use std::collections::HashMap;

use thiserror::Error;

use crate::semform::{validate_form, SemanticForm, SemformError};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const SENTENCE_MARKER: &str = "_EN_";
pub const FORM_MARKER: &str = "_SRLMR_";
pub const FRAME_SEP: &str = ":";
pub const ROLE_EQ: &str = "=";
pub const ROLE_SEP: &str = "|";
pub const EMPTY_FILLER: &str = "∅";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SENTENCE_MARKER_ID: usize = 2;
pub const FORM_MARKER_ID: usize = 3;

pub const RESERVED: [&str; 8] = [
    PAD,
    UNK,
    SENTENCE_MARKER,
    FORM_MARKER,
    FRAME_SEP,
    ROLE_EQ,
    ROLE_SEP,
    EMPTY_FILLER,
];

pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Error, PartialEq)]
pub enum LinearizeError {
    #[error("empty input")]
    EmptyInput,
    #[error(transparent)]
    Validation(#[from] SemformError),
    #[error("sequence must start with a marker token, found `{0}`")]
    MissingMarker(String),
    #[error("max_len must be at least 2, got {0}")]
    MaxLen(usize),
    #[error("vocabulary file line {line}: {message}")]
    VocabFile { line: usize, message: String },
}

/// Splits on whitespace and separates every punctuation character into its
/// own token. Case is preserved.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn linearize_sentence(text: &str) -> Result<Vec<String>, LinearizeError> {
    let words = word_tokens(text);
    if words.is_empty() {
        return Err(LinearizeError::EmptyInput);
    }
    let mut out = Vec::with_capacity(words.len() + 1);
    out.push(SENTENCE_MARKER.to_string());
    out.extend(words.into_iter().map(|w| w.to_lowercase()));
    Ok(out)
}

/// `_SRLMR_ frame : label = filler... | label = filler...`, with `∅` standing
/// in for a removed filler.
pub fn linearize_form(form: &SemanticForm) -> Result<Vec<String>, LinearizeError> {
    let violations = validate_form(form);
    if !violations.is_empty() {
        return Err(SemformError::Validation(violations).into());
    }
    let mut out = vec![
        FORM_MARKER.to_string(),
        form.frame_name.to_lowercase(),
        FRAME_SEP.to_string(),
    ];
    for (i, role) in form.roles.iter().enumerate() {
        if i > 0 {
            out.push(ROLE_SEP.to_string());
        }
        out.push(role.label.to_lowercase());
        out.push(ROLE_EQ.to_string());
        match &role.filler {
            Some(tokens) => out.extend(tokens.iter().map(|t| t.to_lowercase())),
            None => out.push(EMPTY_FILLER.to_string()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect())
            .expect("reserved tokens are distinct")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self, LinearizeError> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if i < RESERVED.len() && t != RESERVED[i] {
                return Err(LinearizeError::VocabFile {
                    line: i + 1,
                    message: format!("expected reserved token `{}`, found `{t}`", RESERVED[i]),
                });
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(LinearizeError::VocabFile {
                    line: i + 1,
                    message: format!("duplicate token `{t}`"),
                });
            }
        }
        if tokens.len() < RESERVED.len() {
            return Err(LinearizeError::VocabFile {
                line: tokens.len() + 1,
                message: "missing reserved tokens".into(),
            });
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line index is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self, LinearizeError> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Reserved tokens first, then every token seen at least `min_count` times,
/// ordered by descending frequency and then lexicographically.
pub fn build_vocab<I, S>(corpora: I, min_count: usize) -> Vocabulary
where
    I: IntoIterator<Item = S>,
    S: AsRef<[String]>,
{
    let min_count = min_count.max(1);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for seq in corpora {
        for t in seq.as_ref() {
            if RESERVED.contains(&t.as_str()) {
                continue;
            }
            *counts.entry(t.clone()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> =
        counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Vocabulary::from_tokens(tokens).expect("counted tokens are distinct")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Sentence,
    Form,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub marker: Marker,
}

impl EncodedInput {
    /// Number of real (unpadded) positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m == 1).count()
    }

    /// Drops the padded suffix.
    pub fn trimmed(&self) -> EncodedInput {
        let n = self.real_len();
        EncodedInput {
            ids: self.ids[..n].to_vec(),
            mask: self.mask[..n].to_vec(),
            marker: self.marker,
        }
    }

    /// Right-pads with PAD up to `len` (no-op when already at least that long).
    pub fn padded_to(&self, len: usize) -> EncodedInput {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(PAD_ID);
            out.mask.push(0);
        }
        out
    }
}

pub fn encode(
    tokens: &[String],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedInput, LinearizeError> {
    if max_len < 2 {
        return Err(LinearizeError::MaxLen(max_len));
    }
    let Some(first) = tokens.first() else {
        return Err(LinearizeError::EmptyInput);
    };
    let marker = match first.as_str() {
        SENTENCE_MARKER => Marker::Sentence,
        FORM_MARKER => Marker::Form,
        other => return Err(LinearizeError::MissingMarker(other.to_string())),
    };
    let n = tokens.len().min(max_len);
    let mut ids = Vec::with_capacity(max_len);
    let mut mask = Vec::with_capacity(max_len);
    for t in &tokens[..n] {
        ids.push(vocab.lookup(t));
        mask.push(1);
    }
    ids.resize(max_len, PAD_ID);
    mask.resize(max_len, 0);
    Ok(EncodedInput { ids, mask, marker })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semform::{parse_jsonl_record, RoleSlot};

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    fn statue_form() -> SemanticForm {
        parse_jsonl_record(r#"{"id":"q1","text":"The Statue of Liberty was built in 1875.","forms":[{"frame":"build.01","predicate":"built","roles":{"ARG1":"The Statue of Liberty","ARGM-TMP":"in 1875"}}]}"#)
            .unwrap()
            .forms
            .remove(0)
    }

    #[test]
    fn sentence_linearization() {
        assert_eq!(
            linearize_sentence("The dog barked.").unwrap(),
            toks(&["_EN_", "the", "dog", "barked", "."])
        );
        assert_eq!(linearize_sentence("A B").unwrap(), toks(&["_EN_", "a", "b"]));
        assert_eq!(linearize_sentence(""), Err(LinearizeError::EmptyInput));
        assert_eq!(linearize_sentence("   "), Err(LinearizeError::EmptyInput));
    }

    #[test]
    fn form_linearization() {
        assert_eq!(
            linearize_form(&statue_form()).unwrap(),
            toks(&[
                "_SRLMR_", "build.01", ":", "arg1", "=", "the", "statue", "of", "liberty", "|",
                "argm-tmp", "=", "in", "1875"
            ])
        );
    }

    #[test]
    fn deleted_filler_and_empty_roles() {
        let mut f = statue_form();
        f.roles.insert(0, RoleSlot::empty("ARG0"));
        let lin = linearize_form(&f).unwrap();
        assert_eq!(&lin[3..6], &toks(&["arg0", "=", "∅"])[..]);

        f.roles.clear();
        assert_eq!(
            linearize_form(&f).unwrap(),
            toks(&["_SRLMR_", "build.01", ":"])
        );
    }

    #[test]
    fn invalid_form_rejected() {
        let mut f = statue_form();
        f.predicate.clear();
        assert!(matches!(
            linearize_form(&f),
            Err(LinearizeError::Validation(_))
        ));
    }

    #[test]
    fn vocab_ordering() {
        let v = build_vocab([toks(&["a", "a", "b"])], 1);
        assert_eq!(v.lookup("a"), 8);
        assert_eq!(v.lookup("b"), 9);
        assert_eq!(v.len(), 10);

        let v = build_vocab([toks(&["a", "a", "b"])], 2);
        assert_eq!(v.lookup("a"), 8);
        assert_eq!(v.lookup("b"), UNK_ID);
        assert!(!v.contains("b"));

        let v = build_vocab(Vec::<Vec<String>>::new(), 1);
        assert_eq!(v, Vocabulary::reserved_only());
        for (i, t) in RESERVED.iter().enumerate() {
            assert_eq!(v.lookup(t), i);
        }
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let v = build_vocab([toks(&["c", "b", "a", "c"])], 1);
        assert_eq!(&v.tokens()[8..], &toks(&["c", "a", "b"])[..]);
    }

    #[test]
    fn vocab_file_golden() {
        let v = build_vocab([toks(&["_EN_", "dog", "the", "the"])], 1);
        assert_eq!(
            v.to_file_string(),
            "<pad>\n<unk>\n_EN_\n_SRLMR_\n:\n=\n|\n∅\nthe\ndog\n"
        );
        assert_eq!(Vocabulary::from_file_string(&v.to_file_string()).unwrap(), v);
        assert!(Vocabulary::from_file_string("<pad>\n<unk>\n").is_err());
        assert!(Vocabulary::from_file_string("<unk>\n<pad>\n_EN_\n_SRLMR_\n:\n=\n|\n∅\n").is_err());
    }

    #[test]
    fn encode_pads_and_truncates() {
        let v = build_vocab([toks(&["the", "dog"])], 1);
        let e = encode(&toks(&["_EN_", "the", "dog"]), &v, 5).unwrap();
        assert_eq!(e.ids, vec![2, v.lookup("the"), v.lookup("dog"), 0, 0]);
        assert_eq!(e.mask, vec![1, 1, 1, 0, 0]);
        assert_eq!(e.marker, Marker::Sentence);

        let mut long = toks(&["_SRLMR_"]);
        long.extend((0..129).map(|i| format!("t{i}")));
        assert_eq!(long.len(), 130);
        let e = encode(&long, &v, 128).unwrap();
        assert_eq!(e.ids.len(), 128);
        assert!(e.mask.iter().all(|&m| m == 1));
        assert_eq!(e.ids[0], FORM_MARKER_ID);

        let e = encode(&toks(&["_EN_", "zebra"]), &v, 4).unwrap();
        assert_eq!(e.ids[1], UNK_ID);

        assert_eq!(encode(&[], &v, 4), Err(LinearizeError::EmptyInput));
        assert_eq!(encode(&toks(&["_EN_"]), &v, 1), Err(LinearizeError::MaxLen(1)));
    }

    #[test]
    fn trimmed_then_repadded_is_identity() {
        let v = build_vocab([toks(&["the", "dog"])], 1);
        let e = encode(&toks(&["_EN_", "the", "dog"]), &v, 7).unwrap();
        assert_eq!(e.trimmed().padded_to(7), e);
        assert_eq!(e.real_len(), 3);
    }
}
