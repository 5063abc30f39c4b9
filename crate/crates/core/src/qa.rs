//! Question-generation data pipeline: record schema, two-stage prompt
//! construction, mask-based leak prevention, a pluggable generation client
//! with a deterministic stub, and the whitespace tokenizer feeding the text
//! branch.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

// ── Record schema ────────────────────────────────────────────────────

/// One dataset row. In training mode the questions are masked so that no
/// surface form of the verb appears in the noun question and vice versa.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub id: String,
    pub narration: String,
    pub verb: String,
    pub noun: String,
    pub description: String,
    pub question_verb: String,
    pub question_noun: String,
    pub answer_verb: String,
    pub answer_noun: String,
}

/// Input row of the narration table (CSV columns id, narration, verb, noun).
#[derive(Debug, Clone, Deserialize)]
pub struct NarrationRow {
    pub id: String,
    pub narration: String,
    pub verb: String,
    pub noun: String,
}

// ── Prompt templates ─────────────────────────────────────────────────

pub const ENRICH_TEMPLATE: &str = "The following is a short narration of a kitchen activity: \"{narration}\". \
The action's verb is \"{verb}\" and its object is \"{noun}\". \
Rewrite the narration as one richer sentence that describes how the action unfolds and what surrounds it.";

pub const QUESTION_TEMPLATE: &str = "An action is described as: \"{description}\". \
Its verb is \"{verb}\" and its noun is \"{noun}\". \
Write two distinct questions about this action: the first must have the verb as its answer, \
the second must have the noun as its answer. Return exactly two lines, one question per line.";

/// Fill `{name}` placeholders. Any placeholder left unfilled is a
/// validation error.
pub fn render_template(template: &str, bindings: &[(&str, &str)]) -> Result<String> {
    let mut out = template.to_string();
    for (name, value) in bindings {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    if let Some(start) = out.find('{') {
        let tail: String = out[start..].chars().take(24).collect();
        return Err(CoreError::Validation(format!(
            "template placeholder left unfilled near '{tail}'"
        )));
    }
    Ok(out)
}

fn check_field(name: &str, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        return Err(CoreError::Validation(format!("empty {name}")));
    }
    Ok(())
}

/// Render the stage-1 enrichment prompt and the stage-2 question prompt.
/// At build time no enriched description exists yet, so the question
/// prompt's description slot carries the narration; the pipeline re-renders
/// it with the stage-1 output via `build_question_prompt`.
pub fn build_prompts(narration: &str, verb: &str, noun: &str) -> Result<(String, String)> {
    check_field("narration", narration)?;
    check_field("verb", verb)?;
    check_field("noun", noun)?;
    let enrich = render_template(
        ENRICH_TEMPLATE,
        &[("narration", narration), ("verb", verb), ("noun", noun)],
    )?;
    let question = build_question_prompt(verb, noun, narration)?;
    Ok((enrich, question))
}

pub fn build_question_prompt(verb: &str, noun: &str, description: &str) -> Result<String> {
    check_field("verb", verb)?;
    check_field("noun", noun)?;
    check_field("description", description)?;
    render_template(
        QUESTION_TEMPLATE,
        &[("description", description), ("verb", verb), ("noun", noun)],
    )
}

// ── Deterministic stub generation ────────────────────────────────────

/// Deterministic stand-in for a remote model: fixed templates keyed only by
/// the verb and noun, so identical inputs always give identical outputs.
/// Each question deliberately contains the *other* label's word, which the
/// leak masking then replaces.
pub fn stub_generate(verb: &str, noun: &str) -> (String, String, String) {
    let question_verb = format!("What should you do to the {noun} here?");
    let question_noun = format!("What is being {verb}-ed in this scene?");
    let description = format!("Someone carefully {verb}s the {noun} on the counter in front of them.");
    (question_verb, question_noun, description)
}

/// Transport for the two-stage generation calls.
pub trait QuestionClient {
    fn complete(&self, prompt: &str) -> Result<String>;
    fn name(&self) -> &'static str;
}

/// Offline client: parses the verb/noun slots back out of the rendered
/// prompt and answers from the stub templates.
pub struct StubClient;

fn extract_slot(prompt: &str, lead: &str) -> Option<String> {
    let start = prompt.find(lead)? + lead.len();
    let rest = &prompt[start..];
    let end = rest.find('"')?;
    Some(rest[..end].to_string())
}

impl QuestionClient for StubClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let verb = extract_slot(prompt, "verb is \"").ok_or_else(|| {
            CoreError::Validation("stub client: prompt has no verb slot".into())
        })?;
        let noun = extract_slot(prompt, "noun is \"")
            .or_else(|| extract_slot(prompt, "object is \""))
            .ok_or_else(|| CoreError::Validation("stub client: prompt has no noun slot".into()))?;
        let (qv, qn, desc) = stub_generate(&verb, &noun);
        if prompt.contains("Rewrite the narration") {
            Ok(desc)
        } else {
            Ok(format!("{qv}\n{qn}"))
        }
    }

    fn name(&self) -> &'static str {
        "stub"
    }
}

/// Wiring point for a real generation service. Carries the retry/timeout
/// budget but no transport; using it without one is an explicit error so
/// tests can never silently depend on the network.
pub struct RemoteClient {
    pub api_key: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl QuestionClient for RemoteClient {
    fn complete(&self, _prompt: &str) -> Result<String> {
        Err(CoreError::Configuration(
            "remote generation client has no transport in this build; \
             unset SSMFUSE_API_KEY to use the deterministic stub"
                .into(),
        ))
    }

    fn name(&self) -> &'static str {
        "remote"
    }
}

pub const API_KEY_ENV: &str = "SSMFUSE_API_KEY";

/// Stub when the API key env var is absent, remote otherwise.
pub fn client_from_env() -> Box<dyn QuestionClient> {
    match std::env::var(API_KEY_ENV) {
        Ok(key) if !key.is_empty() => Box::new(RemoteClient {
            api_key: key,
            timeout_secs: 30,
            max_retries: 3,
        }),
        _ => Box::new(StubClient),
    }
}

/// Run the two-stage pipeline for one narration row. With `mask_for_training`
/// the emitted questions have the cross labels replaced by `<MASK>`.
pub fn generate_record(
    client: &dyn QuestionClient,
    row: &NarrationRow,
    mask_for_training: bool,
) -> Result<QaRecord> {
    let (enrich_prompt, _) = build_prompts(&row.narration, &row.verb, &row.noun)?;
    let description = client.complete(&enrich_prompt)?;
    let question_prompt = build_question_prompt(&row.verb, &row.noun, &description)?;
    let response = client.complete(&question_prompt)?;
    let mut lines = response.lines().filter(|l| !l.trim().is_empty());
    let question_verb = lines
        .next()
        .ok_or_else(|| CoreError::Validation("generation returned no questions".into()))?
        .trim()
        .to_string();
    let question_noun = lines
        .next()
        .ok_or_else(|| CoreError::Validation("generation returned only one question".into()))?
        .trim()
        .to_string();
    let (question_verb, question_noun) = if mask_for_training {
        (
            // the verb question may not reveal the noun, and vice versa
            mask_question(&question_verb, &row.noun),
            mask_question(&question_noun, &row.verb),
        )
    } else {
        (question_verb, question_noun)
    };
    Ok(QaRecord {
        id: row.id.clone(),
        narration: row.narration.clone(),
        verb: row.verb.clone(),
        noun: row.noun.clone(),
        description,
        question_verb,
        question_noun,
        answer_verb: row.verb.clone(),
        answer_noun: row.noun.clone(),
    })
}

// ── Leak masking ─────────────────────────────────────────────────────

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Byte spans of word runs in `text`.
fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            spans.push((s, i));
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Surface forms covered by the masking rule: the term itself, plural
/// "s"/"es", progressive "ing" (with e-drop), and past "ed" (with e-merge).
pub fn inflections(term: &str) -> Vec<String> {
    let t = term.to_lowercase();
    let mut forms = vec![
        t.clone(),
        format!("{t}s"),
        format!("{t}es"),
        format!("{t}ing"),
        format!("{t}ed"),
    ];
    if let Some(stem) = t.strip_suffix('e') {
        forms.push(format!("{stem}ing"));
        forms.push(format!("{t}d"));
    }
    forms
}

/// Replace every whole-word, case-insensitive occurrence of `term` (or an
/// inflected form; for multi-word terms the contiguous word sequence, with
/// inflections on the last word) by a single `<MASK>`. Existing `<MASK>`
/// tokens are never re-matched, so the operation is idempotent.
pub fn mask_question(question: &str, term: &str) -> String {
    let term_words: Vec<String> = term
        .to_lowercase()
        .split_whitespace()
        .map(|w| w.to_string())
        .collect();
    if term_words.is_empty() {
        return question.to_string();
    }
    let k = term_words.len();
    let last_forms = inflections(&term_words[k - 1]);
    let spans = word_spans(question);
    let bytes = question.as_bytes();

    let word_at = |i: usize| -> &str { &question[spans[i].0..spans[i].1] };
    let inside_mask_token = |i: usize| -> bool {
        let (s, e) = spans[i];
        word_at(i) == "MASK" && s > 0 && bytes[s - 1] == b'<' && e < bytes.len() && bytes[e] == b'>'
    };
    let whitespace_between = |a: usize, b: usize| -> bool {
        question[spans[a].1..spans[b].0].chars().all(char::is_whitespace)
    };

    let mut out = String::with_capacity(question.len());
    let mut cursor = 0;
    let mut i = 0;
    while i < spans.len() {
        let matched = i + k <= spans.len()
            && (0..k).all(|j| !inside_mask_token(i + j))
            && (0..k.saturating_sub(1)).all(|j| {
                word_at(i + j).to_lowercase() == term_words[j] && whitespace_between(i + j, i + j + 1)
            })
            && last_forms.contains(&word_at(i + k - 1).to_lowercase());
        if matched {
            out.push_str(&question[cursor..spans[i].0]);
            out.push_str("<MASK>");
            cursor = spans[i + k - 1].1;
            i += k;
        } else {
            i += 1;
        }
    }
    out.push_str(&question[cursor..]);
    out
}

/// True when a surface form of `term` still appears in `question`.
pub fn has_leak(question: &str, term: &str) -> bool {
    mask_question(question, term) != question
}

// ── Vocabulary and tokenizer ─────────────────────────────────────────

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;

/// Token table with ids 0/1/2 reserved for PAD/UNK/MASK.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Build from tokens in first-seen order (deterministic for a given
    /// iteration order).
    pub fn new<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut id_to_token = vec!["<PAD>".to_string(), "<UNK>".to_string(), "<MASK>".to_string()];
        let mut token_to_id = HashMap::new();
        token_to_id.insert("<MASK>".to_string(), MASK_ID);
        for tok in tokens {
            if tok == "<PAD>" || tok == "<UNK>" || tok == "<MASK>" {
                continue;
            }
            if !token_to_id.contains_key(&tok) {
                token_to_id.insert(tok.clone(), id_to_token.len() as u32);
                id_to_token.push(tok);
            }
        }
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    /// Build from raw texts, tokenizing each and collecting unique tokens.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut tokens = Vec::new();
        for t in texts {
            tokens.extend(split_tokens(t));
        }
        Vocab::new(tokens)
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or("<UNK>")
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids always present
    }
}

/// Lowercase and split on whitespace and punctuation; `<MASK>` survives as
/// one token.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find("<MASK>") {
        tokens.extend(
            word_spans(&rest[..pos])
                .into_iter()
                .map(|(s, e)| rest[s..e].to_lowercase()),
        );
        tokens.push("<MASK>".to_string());
        rest = &rest[pos + "<MASK>".len()..];
    }
    tokens.extend(
        word_spans(rest)
            .into_iter()
            .map(|(s, e)| rest[s..e].to_lowercase()),
    );
    tokens
}

/// Token ids padded or truncated to exactly `len`.
pub fn tokenize(text: &str, vocab: &Vocab, len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = split_tokens(text)
        .into_iter()
        .map(|t| vocab.id(&t))
        .collect();
    ids.truncate(len);
    while ids.len() < len {
        ids.push(PAD_ID);
    }
    ids
}

/// Inverse of `tokenize` up to normalization: tokens joined by single
/// spaces, padding dropped.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&id| id != PAD_ID)
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

// ── Line-delimited JSON IO ───────────────────────────────────────────

fn validate_record(rec: &QaRecord, line: usize, strict: bool) -> Result<()> {
    if rec.answer_verb != rec.verb || rec.answer_noun != rec.noun {
        return Err(CoreError::Schema {
            line,
            message: format!(
                "answers must equal labels (verb '{}' vs '{}', noun '{}' vs '{}')",
                rec.answer_verb, rec.verb, rec.answer_noun, rec.noun
            ),
        });
    }
    if strict {
        if has_leak(&rec.question_noun, &rec.verb) {
            return Err(CoreError::Schema {
                line,
                message: format!(
                    "verb '{}' appears unmasked in question_noun '{}'",
                    rec.verb, rec.question_noun
                ),
            });
        }
        if has_leak(&rec.question_verb, &rec.noun) {
            return Err(CoreError::Schema {
                line,
                message: format!(
                    "noun '{}' appears unmasked in question_verb '{}'",
                    rec.noun, rec.question_verb
                ),
            });
        }
    }
    Ok(())
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[QaRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Read records one per line. `strict` additionally enforces leak-freedom.
/// Errors carry the 1-based line number.
pub fn read_jsonl<R: BufRead>(r: R, strict: bool) -> Result<Vec<QaRecord>> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: QaRecord = serde_json::from_str(&text).map_err(|e| CoreError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_record(&rec, line_no, strict)?;
        out.push(rec);
    }
    Ok(out)
}

/// Parse the narration table (CSV with header id,narration,verb,noun).
pub fn read_narrations_csv<R: std::io::Read>(r: R) -> Result<Vec<NarrationRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        let row: NarrationRow = rec?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts_substitute_each_slot_exactly_once() {
        let (enrich, question) = build_prompts("someone sips", "XVERBX", "XNOUNX").unwrap();
        for p in [&enrich, &question] {
            assert_eq!(p.matches("XVERBX").count(), 1, "{p}");
            assert_eq!(p.matches("XNOUNX").count(), 1, "{p}");
            assert!(!p.contains('{'), "unfilled placeholder in {p}");
        }
        assert!(enrich.contains("someone sips"));
    }

    #[test]
    fn empty_narration_is_rejected() {
        assert!(matches!(
            build_prompts("  ", "drink", "water"),
            Err(CoreError::Validation(_))
        ));
    }

    #[test]
    fn unfilled_placeholder_is_rejected() {
        let err = render_template("hello {name} and {missing}", &[("name", "x")]).unwrap_err();
        assert!(matches!(err, CoreError::Validation(_)));
    }

    #[test]
    fn prompt_goldens() {
        let fixtures = [
            ("p01_1", "drink water", "drink", "water"),
            ("p02_7", "cut the onion on the board", "cut", "onion"),
            ("p03_2", "open fridge", "open", "fridge"),
        ];
        let golden_enrich = [
            "The following is a short narration of a kitchen activity: \"drink water\". The action's verb is \"drink\" and its object is \"water\". Rewrite the narration as one richer sentence that describes how the action unfolds and what surrounds it.",
            "The following is a short narration of a kitchen activity: \"cut the onion on the board\". The action's verb is \"cut\" and its object is \"onion\". Rewrite the narration as one richer sentence that describes how the action unfolds and what surrounds it.",
            "The following is a short narration of a kitchen activity: \"open fridge\". The action's verb is \"open\" and its object is \"fridge\". Rewrite the narration as one richer sentence that describes how the action unfolds and what surrounds it.",
        ];
        let golden_question = [
            "An action is described as: \"drink water\". Its verb is \"drink\" and its noun is \"water\". Write two distinct questions about this action: the first must have the verb as its answer, the second must have the noun as its answer. Return exactly two lines, one question per line.",
            "An action is described as: \"cut the onion on the board\". Its verb is \"cut\" and its noun is \"onion\". Write two distinct questions about this action: the first must have the verb as its answer, the second must have the noun as its answer. Return exactly two lines, one question per line.",
            "An action is described as: \"open fridge\". Its verb is \"open\" and its noun is \"fridge\". Write two distinct questions about this action: the first must have the verb as its answer, the second must have the noun as its answer. Return exactly two lines, one question per line.",
        ];
        for (i, (_, narration, verb, noun)) in fixtures.iter().enumerate() {
            let (enrich, question) = build_prompts(narration, verb, noun).unwrap();
            assert_eq!(enrich, golden_enrich[i]);
            assert_eq!(question, golden_question[i]);
        }
    }

    #[test]
    fn stub_contains_cross_terms_and_is_deterministic() {
        let (qv, qn, desc) = stub_generate("drink", "water");
        assert!(qv.contains("water"));
        assert!(qn.contains("drink"));
        assert!(desc.contains("drink") && desc.contains("water"));
        assert_eq!(stub_generate("drink", "water"), stub_generate("drink", "water"));
    }

    #[test]
    fn stub_outputs_always_need_masking() {
        let verbs = ["cut", "pour", "wash", "open", "slice", "grab", "stir", "peel", "shake", "wipe"];
        let nouns = ["pan", "cup", "knife", "board", "plate"];
        for v in verbs {
            for n in nouns {
                let (qv, qn, _) = stub_generate(v, n);
                assert!(has_leak(&qv, n), "noun {n} should appear in {qv}");
                assert!(has_leak(&qn, v), "verb {v} should appear in {qn}");
                assert!(!has_leak(&mask_question(&qv, n), n));
                assert!(!has_leak(&mask_question(&qn, v), v));
            }
        }
    }

    #[test]
    fn mask_replaces_the_term() {
        let q = "What should you do to the water to enjoy its refreshing taste?";
        assert_eq!(
            mask_question(q, "water"),
            "What should you do to the <MASK> to enjoy its refreshing taste?"
        );
    }

    #[test]
    fn mask_leaves_absent_terms_alone() {
        let q = "Stir the pot gently.";
        assert_eq!(mask_question(q, "water"), q);
    }

    #[test]
    fn mask_handles_multiword_terms() {
        assert_eq!(
            mask_question("Pick up the frying pan", "frying pan"),
            "Pick up the <MASK>"
        );
        assert_eq!(
            mask_question("Pick up the Frying Pans now", "frying pan"),
            "Pick up the <MASK> now"
        );
    }

    #[test]
    fn mask_covers_inflections() {
        assert_eq!(mask_question("He drinks often", "drink"), "He <MASK> often");
        assert_eq!(mask_question("He is drinking", "drink"), "He is <MASK>");
        assert_eq!(mask_question("She sliced it", "slice"), "She <MASK> it");
        assert_eq!(mask_question("making dough", "make"), "<MASK> dough");
        // partial-word hits must not match
        assert_eq!(mask_question("watershed moment", "water"), "watershed moment");
    }

    #[test]
    fn mask_is_idempotent_even_for_term_mask() {
        let q = "mask the masked mask";
        let once = mask_question(q, "mask");
        let twice = mask_question(&once, "mask");
        assert_eq!(once, twice);
        assert_eq!(once, "<MASK> the <MASK> <MASK>");
    }

    #[test]
    fn tokenize_pads_and_maps() {
        let vocab = Vocab::from_texts(["drink water now"]);
        let ids = tokenize("Drink water.", &vocab, 5);
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], vocab.id("drink"));
        assert_eq!(ids[1], vocab.id("water"));
        assert_eq!(&ids[2..], &[PAD_ID, PAD_ID, PAD_ID]);
    }

    #[test]
    fn tokenize_round_trips_in_vocab_text() {
        let vocab = Vocab::from_texts(["what should you do to the water here"]);
        let text = "What should you do to the water here?";
        let ids = tokenize(text, &vocab, 12);
        assert_eq!(detokenize(&ids, &vocab), "what should you do to the water here");
    }

    #[test]
    fn mask_token_gets_reserved_id() {
        let vocab = Vocab::from_texts(["anything"]);
        assert_eq!(tokenize("<MASK>", &vocab, 1), vec![MASK_ID]);
        let mixed = tokenize("pour the <MASK> now", &vocab, 4);
        assert_eq!(mixed[2], MASK_ID);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let vocab = Vocab::from_texts(["known words only"]);
        let ids = tokenize("unseen stuff", &vocab, 2);
        assert_eq!(ids, vec![UNK_ID, UNK_ID]);
    }

    fn sample_record(i: usize, masked: bool) -> QaRecord {
        let row = NarrationRow {
            id: format!("r{i}"),
            narration: format!("wash plate {i}"),
            verb: "wash".into(),
            noun: "plate".into(),
        };
        generate_record(&StubClient, &row, masked).unwrap()
    }

    #[test]
    fn jsonl_round_trips_100_records() {
        let records: Vec<QaRecord> = (0..100).map(|i| sample_record(i, true)).collect();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &records).unwrap();
        let back = read_jsonl(std::io::Cursor::new(&buf), true).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn strict_read_rejects_leaky_records_with_line_number() {
        let mut leaky = sample_record(0, true);
        leaky.question_noun = "Why wash it?".into();
        let good = sample_record(1, true);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[good, leaky]).unwrap();
        let err = read_jsonl(std::io::Cursor::new(&buf), true).unwrap_err();
        match err {
            CoreError::Schema { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("wash"), "{message}");
            }
            other => panic!("wrong error: {other}"),
        }
        // non-strict read accepts the same corpus
        let mut buf2 = Vec::new();
        write_jsonl(&mut buf2, &[sample_record(2, false)]).unwrap();
        assert!(read_jsonl(std::io::Cursor::new(&buf2), false).is_ok());
    }

    #[test]
    fn missing_field_is_a_schema_error() {
        let line = r#"{"id":"x","narration":"n","verb":"v","noun":"o"}"#;
        let err = read_jsonl(std::io::Cursor::new(line.as_bytes()), false).unwrap_err();
        match err {
            CoreError::Schema { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("missing field"), "{message}");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn generated_records_satisfy_training_invariants() {
        let rec = sample_record(7, true);
        assert_eq!(rec.answer_verb, rec.verb);
        assert_eq!(rec.answer_noun, rec.noun);
        assert!(!has_leak(&rec.question_noun, &rec.verb));
        assert!(!has_leak(&rec.question_verb, &rec.noun));
        assert!(rec.question_verb.contains("<MASK>"));
    }

    #[test]
    fn narration_csv_parses() {
        let csv = "id,narration,verb,noun\n1,\"pour, slowly, water\",pour,water\n2,cut onion,cut,onion\n";
        let rows = read_narrations_csv(csv.as_bytes()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].narration, "pour, slowly, water");
    }

    #[test]
    fn remote_client_refuses_without_transport() {
        let c = RemoteClient {
            api_key: "k".into(),
            timeout_secs: 1,
            max_retries: 0,
        };
        assert!(c.complete("x").is_err());
    }
}
