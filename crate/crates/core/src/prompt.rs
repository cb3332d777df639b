//! Construction of the three purification prompts.
//!
//! The canonical prompt text lives in a versioned template file
//! (`templates/purification.tmpl`, embedded at compile time) rather than in
//! code: bit-exact output needs one frozen source of truth, and golden tests
//! pin every rendered byte. The full grading prompt (P0) carries the altered
//! sentence, its misclassified label, the correct label, and the category
//! list; the reduced variant (P1) is P0 with the label-instruction spans
//! deleted; P2 is a plain paraphrase request.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const BUILTIN_TEMPLATE: &str = include_str!("../templates/purification.tmpl");

pub const SLOT_CATEGORIES: &str = "[list of classification categories]";
pub const SLOT_ALTERED: &str = "[altered sentence]";
pub const SLOT_MISCLASSIFIED: &str = "[misclassified label]";
pub const SLOT_CORRECT: &str = "[correct label]";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("altered sentence is empty")]
    EmptyAlteredSentence,
    #[error("category list is empty")]
    EmptyCategories,
    #[error("label \"{0}\" is not in the category list")]
    LabelNotInCategories(String),
    #[error("template parse error at line {line}: {message}")]
    TemplateParse { line: usize, message: String },
    #[error("i/o error reading template {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The three prompt variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    /// Full grading prompt with both labels and the category list.
    P0,
    /// P0 with every label-instruction span removed; the altered sentence is
    /// supplied on a plain SENTENCE line instead.
    P1,
    /// Plain paraphrase request.
    P2,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 3] = [PromptVariant::P0, PromptVariant::P1, PromptVariant::P2];
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptVariant::P0 => write!(f, "P0"),
            PromptVariant::P1 => write!(f, "P1"),
            PromptVariant::P2 => write!(f, "P2"),
        }
    }
}

/// Values filled into the template slots.
///
/// `misclassified_label`, `correct_label`, and `categories` are only read by
/// the variants that use them (P2 needs nothing but the altered sentence).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptSlots {
    pub altered_sentence: String,
    pub misclassified_label: String,
    pub correct_label: String,
    pub categories: Vec<String>,
}

impl PromptSlots {
    pub fn paraphrase(altered_sentence: impl Into<String>) -> Self {
        Self {
            altered_sentence: altered_sentence.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
enum Piece {
    /// Literal text present in both P0 and P1.
    Shared(String),
    /// Text inside a removable span: present in P0, deleted in P1.
    Removable { name: String, text: String },
    /// Whole line present only in P1.
    P1Only(String),
    /// Line break shared by both variants (owned by the preceding line).
    Newline,
    /// Line break that disappears with its removable whole-line span.
    RemovableNewline,
    /// Line break belonging to a P1-only line.
    P1OnlyNewline,
}

/// Parsed template file: the P0/P1 master plus the P2 section.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub version: u32,
    purification: Vec<Piece>,
    paraphrase: String,
    removed_spans: Vec<(String, String)>,
}

static BUILTIN: OnceLock<PromptTemplates> = OnceLock::new();

impl PromptTemplates {
    /// The template compiled into the crate.
    pub fn builtin() -> &'static Self {
        BUILTIN.get_or_init(|| {
            Self::parse(BUILTIN_TEMPLATE).expect("builtin template must parse")
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let err = |line: usize, message: &str| PromptError::TemplateParse {
            line,
            message: message.to_string(),
        };
        let mut version: Option<u32> = None;
        let mut section: Option<String> = None;
        let mut purification: Vec<Piece> = Vec::new();
        let mut paraphrase_lines: Vec<String> = Vec::new();
        let mut removed_spans: Vec<(String, String)> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            if section.is_none() && raw.starts_with('#') {
                continue;
            }
            if let Some(rest) = raw.strip_prefix("%%VERSION ") {
                let v = rest
                    .strip_suffix("%%")
                    .ok_or_else(|| err(line_no, "unterminated %%VERSION marker"))?;
                version = Some(
                    v.trim()
                        .parse()
                        .map_err(|_| err(line_no, "version is not an integer"))?,
                );
                continue;
            }
            if let Some(rest) = raw.strip_prefix("%%SECTION ") {
                let name = rest
                    .strip_suffix("%%")
                    .ok_or_else(|| err(line_no, "unterminated %%SECTION marker"))?;
                section = Some(name.trim().to_string());
                continue;
            }
            match section.as_deref() {
                Some("purification") => {
                    parse_purification_line(raw, line_no, &mut purification, &mut removed_spans)?
                }
                Some("paraphrase") => paraphrase_lines.push(raw.to_string()),
                Some(other) => {
                    return Err(err(line_no, &format!("unknown section \"{other}\"")));
                }
                None => return Err(err(line_no, "content before any %%SECTION%% marker")),
            }
        }

        let version = version.ok_or_else(|| err(0, "missing %%VERSION%% marker"))?;
        if purification.is_empty() || paraphrase_lines.is_empty() {
            return Err(err(0, "both purification and paraphrase sections are required"));
        }
        // Drop the final shared newline so renders have no trailing newline.
        if matches!(purification.last(), Some(Piece::Newline)) {
            purification.pop();
        }
        Ok(Self {
            version,
            purification,
            paraphrase: paraphrase_lines.join("\n"),
            removed_spans,
        })
    }

    /// The named spans deleted when deriving P1, with slot placeholders intact.
    pub fn removed_spans(&self) -> &[(String, String)] {
        &self.removed_spans
    }

    fn template_for(&self, variant: PromptVariant) -> String {
        match variant {
            PromptVariant::P2 => self.paraphrase.clone(),
            PromptVariant::P0 => {
                let mut out = String::new();
                for piece in &self.purification {
                    match piece {
                        Piece::Shared(t) | Piece::Removable { text: t, .. } => out.push_str(t),
                        Piece::Newline | Piece::RemovableNewline => out.push('\n'),
                        Piece::P1Only(_) | Piece::P1OnlyNewline => {}
                    }
                }
                out
            }
            PromptVariant::P1 => {
                let mut out = String::new();
                for piece in &self.purification {
                    match piece {
                        Piece::Shared(t) | Piece::P1Only(t) => out.push_str(t),
                        Piece::Newline | Piece::P1OnlyNewline => out.push('\n'),
                        Piece::Removable { .. } | Piece::RemovableNewline => {}
                    }
                }
                out
            }
        }
    }

    /// Render a variant with the given slots. Slot values are inserted as-is
    /// (no escaping) and inserted text is never rescanned, so rendering is
    /// total for arbitrary slot strings.
    pub fn render(&self, variant: PromptVariant, slots: &PromptSlots) -> Result<String, PromptError> {
        if slots.altered_sentence.trim().is_empty() {
            return Err(PromptError::EmptyAlteredSentence);
        }
        match variant {
            PromptVariant::P0 => {
                if slots.categories.is_empty() {
                    return Err(PromptError::EmptyCategories);
                }
                for label in [&slots.misclassified_label, &slots.correct_label] {
                    if !slots.categories.iter().any(|c| c == label) {
                        return Err(PromptError::LabelNotInCategories(label.clone()));
                    }
                }
            }
            PromptVariant::P1 => {
                if slots.categories.is_empty() {
                    return Err(PromptError::EmptyCategories);
                }
            }
            PromptVariant::P2 => {}
        }
        let template = self.template_for(variant);
        Ok(fill_slots(&template, slots))
    }
}

fn parse_purification_line(
    raw: &str,
    line_no: usize,
    pieces: &mut Vec<Piece>,
    removed_spans: &mut Vec<(String, String)>,
) -> Result<(), PromptError> {
    let err = |message: String| PromptError::TemplateParse {
        line: line_no,
        message,
    };
    if let Some(rest) = raw.strip_prefix("%%P1ONLY%%") {
        pieces.push(Piece::P1Only(rest.to_string()));
        pieces.push(Piece::P1OnlyNewline);
        return Ok(());
    }
    if !raw.contains("%%SPAN ") {
        pieces.push(Piece::Shared(raw.to_string()));
        pieces.push(Piece::Newline);
        return Ok(());
    }

    // A line holding span markers: %%SPAN name%%...%%SPAN name%% pairs mixed
    // with shared text. Spans never cross lines.
    let mut line_pieces: Vec<Piece> = Vec::new();
    let mut cursor = raw;
    let mut whole_line_span = raw.starts_with("%%SPAN ");
    while let Some(start) = cursor.find("%%SPAN ") {
        let (before, rest) = cursor.split_at(start);
        if !before.is_empty() {
            line_pieces.push(Piece::Shared(before.to_string()));
        }
        let rest = &rest["%%SPAN ".len()..];
        let name_end = rest
            .find("%%")
            .ok_or_else(|| err("unterminated %%SPAN marker".into()))?;
        let name = rest[..name_end].trim().to_string();
        let body = &rest[name_end + 2..];
        let close = format!("%%SPAN {name}%%");
        let body_end = body
            .find(&close)
            .ok_or_else(|| err(format!("span \"{name}\" has no closing marker")))?;
        let text = body[..body_end].to_string();
        removed_spans.push((name.clone(), text.clone()));
        line_pieces.push(Piece::Removable { name, text });
        cursor = &body[body_end + close.len()..];
    }
    if !cursor.is_empty() {
        line_pieces.push(Piece::Shared(cursor.to_string()));
        whole_line_span = false;
    }
    let only_removable = line_pieces
        .iter()
        .all(|p| matches!(p, Piece::Removable { .. }));
    pieces.extend(line_pieces);
    if whole_line_span && only_removable {
        pieces.push(Piece::RemovableNewline);
    } else {
        pieces.push(Piece::Newline);
    }
    Ok(())
}

/// One pass over the template: each slot placeholder found in the template is
/// replaced, and the spliced value is skipped rather than rescanned.
fn fill_slots(template: &str, slots: &PromptSlots) -> String {
    let categories = slots.categories.join(", ");
    let replacements: [(&str, &str); 4] = [
        (SLOT_CATEGORIES, categories.as_str()),
        (SLOT_ALTERED, slots.altered_sentence.as_str()),
        (SLOT_MISCLASSIFIED, slots.misclassified_label.as_str()),
        (SLOT_CORRECT, slots.correct_label.as_str()),
    ];
    let mut out = String::with_capacity(template.len() + slots.altered_sentence.len());
    let mut rest = template;
    'outer: while !rest.is_empty() {
        let mut earliest: Option<(usize, &str, &str)> = None;
        for (needle, value) in &replacements {
            if let Some(pos) = rest.find(needle) {
                if earliest.map_or(true, |(p, _, _)| pos < p) {
                    earliest = Some((pos, needle, value));
                }
            }
        }
        match earliest {
            Some((pos, needle, value)) => {
                out.push_str(&rest[..pos]);
                out.push_str(value);
                rest = &rest[pos + needle.len()..];
            }
            None => {
                out.push_str(rest);
                break 'outer;
            }
        }
    }
    out
}

/// Render with the built-in template.
pub fn render(variant: PromptVariant, slots: &PromptSlots) -> Result<String, PromptError> {
    PromptTemplates::builtin().render(variant, slots)
}

/// SHA-256 hex digest of arbitrary prompt text; the replay transcript and the
/// golden tests key on this.
pub fn content_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Stable content hash of the rendered prompt.
pub fn golden_digest(variant: PromptVariant, slots: &PromptSlots) -> Result<String, PromptError> {
    Ok(content_digest(&render(variant, slots)?))
}

/// Recover the altered sentence from a rendered prompt by its anchor lines.
///
/// Offline test backends (identity, oracle, scripted) key on the altered
/// sentence; the canonical templates make the surrounding anchors fixed, so
/// this works for multi-line sentences too.
pub fn extract_altered_sentence(rendered: &str) -> Option<&str> {
    const P0_OPEN: &str = "ALTERED SENTENCE (QUESTION): ";
    const P0_CLOSE: &str = "\nMISCLASSIFIED LABEL (STUDENT ANSWER): ";
    const SENT_OPEN: &str = "SENTENCE: ";
    const SENT_CLOSE: &str = "\nThe output format must be json:";
    if let Some(start) = rendered.find(P0_OPEN) {
        let tail = &rendered[start + P0_OPEN.len()..];
        if let Some(end) = tail.find(P0_CLOSE) {
            return Some(&tail[..end]);
        }
    }
    if let Some(start) = rendered.find(SENT_OPEN) {
        let tail = &rendered[start + SENT_OPEN.len()..];
        if let Some(end) = tail.find(SENT_CLOSE) {
            return Some(&tail[..end]);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn agnews_slots() -> PromptSlots {
        PromptSlots {
            altered_sentence: "E-mail scam targets gendarmerie chief Wiltshire Police warns \
                               about \"phishing\" after its deception battalion massa was targeted."
                .into(),
            misclassified_label: "the world".into(),
            correct_label: "science".into(),
            categories: vec![
                "science".into(),
                "business".into(),
                "the world".into(),
                "sports".into(),
            ],
        }
    }

    #[test]
    fn p0_contains_the_fixed_sentences_in_order() {
        let out = render(PromptVariant::P0, &agnews_slots()).unwrap();
        let fixed = [
            "Human: You are a teacher tasked with grading a quiz.",
            "The quiz consists of a sentence (the question) and a classification label (the student's answer).",
            "Unfortunately, the sentence has been manipulated by an adversarial attack, leading to a misclassification.",
            "Given the altered sentence and its incorrect label, your job is to generate a new sentence that is semantically similar to the altered one but will be classified correctly according to the correct label.",
            "The categories for classification are: science, business, the world, sports",
            "ALTERED SENTENCE (QUESTION): ",
            "MISCLASSIFIED LABEL (STUDENT ANSWER): the world",
            "CORRECT LABEL (TRUE ANSWER): science",
            "Please create a new sentence that conveys the same meaning as the altered sentence but will be classified under the CORRECT LABEL when graded.",
            "Even if there is not a misclassification, provide/construct the sentence to the best of your capability.",
            "The output format must be json:",
            "{\"Original Sentence\": \"[New sentence here]\"}",
            "Begin!",
        ];
        let mut cursor = 0;
        for needle in fixed {
            let pos = out[cursor..]
                .find(needle)
                .unwrap_or_else(|| panic!("missing or out of order: {needle}"));
            cursor += pos + needle.len();
        }
        assert!(out.ends_with("Begin!"));
    }

    #[test]
    fn p1_removes_every_span_and_adds_the_sentence_line() {
        let slots = agnews_slots();
        let out = render(PromptVariant::P1, &slots).unwrap();
        for gone in [
            "Given the altered sentence and its incorrect label",
            "ALTERED SENTENCE (QUESTION):",
            "MISCLASSIFIED LABEL (STUDENT ANSWER):",
            "CORRECT LABEL (TRUE ANSWER):",
            "but will be classified under the CORRECT LABEL when graded",
            "Even if there is not a misclassification",
        ] {
            assert!(!out.contains(gone), "P1 must not contain: {gone}");
        }
        assert!(out.contains(
            "Please create a new sentence that conveys the same meaning as the altered sentence.\n"
        ));
        assert!(out.contains(&format!("SENTENCE: {}", slots.altered_sentence)));
        assert!(out.contains("The output format must be json:"));
        // Exactly six spans are enumerated in the template.
        assert_eq!(PromptTemplates::builtin().removed_spans().len(), 6);
    }

    #[test]
    fn p2_is_the_short_paraphrase_prompt() {
        let slots = PromptSlots::paraphrase("x");
        let out = render(PromptVariant::P2, &slots).unwrap();
        assert!(out.starts_with(
            "Human: Please generate a paraphrased sentence version of the following sentence."
        ));
        assert!(out.contains("SENTENCE: x"));
        assert!(out.contains("{\"Original Sentence\": \"[Paraphrased sentence here]\"}"));
        assert!(out.ends_with("Begin!"));
    }

    #[test]
    fn rendered_output_has_no_unfilled_slots() {
        for variant in PromptVariant::ALL {
            let out = render(variant, &agnews_slots()).unwrap();
            for slot in [SLOT_CATEGORIES, SLOT_ALTERED, SLOT_MISCLASSIFIED, SLOT_CORRECT] {
                assert!(!out.contains(slot), "{variant}: unfilled slot {slot}");
            }
        }
    }

    #[test]
    fn precondition_violations_are_rejected() {
        let mut slots = agnews_slots();
        slots.categories.clear();
        assert!(matches!(
            render(PromptVariant::P0, &slots),
            Err(PromptError::EmptyCategories)
        ));
        assert!(matches!(
            render(PromptVariant::P1, &slots),
            Err(PromptError::EmptyCategories)
        ));
        // P2 ignores categories entirely.
        assert!(render(PromptVariant::P2, &slots).is_ok());

        let mut slots = agnews_slots();
        slots.misclassified_label = "weather".into();
        assert!(matches!(
            render(PromptVariant::P0, &slots),
            Err(PromptError::LabelNotInCategories(l)) if l == "weather"
        ));

        let slots = PromptSlots::paraphrase("   ");
        assert!(matches!(
            render(PromptVariant::P2, &slots),
            Err(PromptError::EmptyAlteredSentence)
        ));
    }

    #[test]
    fn digest_is_stable_and_input_sensitive() {
        let slots = agnews_slots();
        let a = golden_digest(PromptVariant::P0, &slots).unwrap();
        let b = golden_digest(PromptVariant::P0, &slots).unwrap();
        assert_eq!(a, b);
        let mut other = agnews_slots();
        other.altered_sentence.push_str(" extra");
        let c = golden_digest(PromptVariant::P0, &other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn altered_sentence_round_trips_through_the_anchor_parser() {
        let mut slots = agnews_slots();
        slots.altered_sentence = "first line\nsecond line with SENTENCE: inside".into();
        for variant in PromptVariant::ALL {
            let out = render(variant, &slots).unwrap();
            assert_eq!(
                extract_altered_sentence(&out),
                Some(slots.altered_sentence.as_str()),
                "variant {variant}"
            );
        }
        assert_eq!(extract_altered_sentence("no anchors here"), None);
    }

    #[test]
    fn from_file_matches_builtin() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("templates/purification.tmpl");
        let parsed = PromptTemplates::from_file(&path).unwrap();
        let slots = agnews_slots();
        for variant in PromptVariant::ALL {
            assert_eq!(
                parsed.render(variant, &slots).unwrap(),
                render(variant, &slots).unwrap()
            );
        }
        assert_eq!(parsed.version, 1);
    }

    proptest! {
        // Injection surface: arbitrary printable slot values render without
        // error and are inserted verbatim, even when they contain slot
        // placeholders or span markers themselves.
        #[test]
        fn render_is_total_for_arbitrary_printable_slots(
            altered in "[ -~]{1,80}",
            label_a in "[a-z]{1,12}",
            label_b in "[a-z]{1,12}",
        ) {
            prop_assume!(!altered.trim().is_empty());
            let slots = PromptSlots {
                altered_sentence: altered.clone(),
                misclassified_label: label_a.clone(),
                correct_label: label_b.clone(),
                categories: vec![label_a, label_b, "[altered sentence]".into()],
            };
            for variant in PromptVariant::ALL {
                let out = render(variant, &slots).unwrap();
                prop_assert!(out.contains(&altered));
            }
        }
    }
}
