//! Narrative layer: prompt serialization, risk gating, pluggable text
//! backends, label parsing, and attribution↔narrative alignment.
//!
//! The tabular models carry the predictive load; this module turns a scored
//! event into a textual prompt, optionally hands it to a narrative backend
//! (a deterministic template, or an OpenAI-compatible chat endpoint), and
//! measures how well the returned prose agrees with the Shapley top
//! features for the same event.

mod backend;
mod lexicon;

pub use backend::{
    generate, generate_batch, Backend, GenerationLimits, HttpBackend, NarrativeRequest,
    TemplateBackend,
};
pub use lexicon::Lexicon;

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{feat, EventFeatureRow, SeverityLabel, N_CLASSES};

#[derive(Debug, Error)]
pub enum NarrativeError {
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
    #[error("prompt already carries a probability augmentation")]
    AlreadyAugmented,
    #[error("narrative backend failed after {attempts} attempt(s): {last}")]
    Transport { attempts: u32, last: String },
    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),
    #[error("invalid gating config: {0}")]
    InvalidGating(String),
}

/// Instruction appended to every prompt. Fixed wording; the narrative
/// backends are judged against it, so it is not caller-configurable.
pub const TASK_TEXT: &str = "Predict the severity class of this crash as one of: No Injury, \
     Injury, Fatal. Briefly explain your reasoning and suggest one policy intervention that \
     could reduce this risk.";

/// A textual prompt for one event: a natural-language summary of the
/// feature row, the fixed task instruction, and optionally a sentence
/// carrying the tabular model's class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPrompt {
    pub event_text: String,
    pub task_text: String,
    pub augmentation: Option<String>,
}

impl EventPrompt {
    pub fn full_text(&self) -> String {
        match &self.augmentation {
            Some(aug) => format!("{}\n{}\n{}", self.event_text, aug, self.task_text),
            None => format!("{}\n{}", self.event_text, self.task_text),
        }
    }
}

/// One narrative generation outcome. `predicted_class` is present exactly
/// when a severity keyword could be parsed out of the backend's text;
/// parse failures are recorded in `error`, not surfaced as `Err`.
#[derive(Debug, Clone, Serialize)]
pub struct NarrativeResult {
    pub collision_id: i64,
    pub predicted_class: Option<SeverityLabel>,
    pub explanation: String,
    pub policy_suggestion: String,
    pub latency: Duration,
    pub backend_id: String,
    pub error: Option<String>,
}

/// Which probability mass the gate compares against the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatedMass {
    FatalOnly,
    InjuryPlusFatal,
}

/// Risk gate deciding whether an event is worth a narrative call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatingConfig {
    pub threshold: f64,
    pub gated_mass: GatedMass,
}

impl Default for GatingConfig {
    fn default() -> Self {
        GatingConfig { threshold: 0.05, gated_mass: GatedMass::FatalOnly }
    }
}

impl GatingConfig {
    pub fn validate(&self) -> Result<(), NarrativeError> {
        if !(self.threshold >= 0.0 && self.threshold <= 1.0) {
            return Err(NarrativeError::InvalidGating(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// True when the gated probability mass strictly exceeds the threshold.
/// Strict comparison makes τ = 1.0 reject everything.
pub fn gate(proba: &[f64; N_CLASSES], config: &GatingConfig) -> bool {
    let mass = match config.gated_mass {
        GatedMass::FatalOnly => proba[SeverityLabel::Fatal.as_index()],
        GatedMass::InjuryPlusFatal => {
            proba[SeverityLabel::Injury.as_index()] + proba[SeverityLabel::Fatal.as_index()]
        }
    };
    mass > config.threshold
}

fn check_proba(proba: &[f64; N_CLASSES]) -> Result<(), NarrativeError> {
    let mut sum = 0.0;
    for (c, &p) in proba.iter().enumerate() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(NarrativeError::InvalidProbabilities(format!(
                "class {c} probability {p} outside [0, 1]"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(NarrativeError::InvalidProbabilities(format!("sum {sum} != 1")));
    }
    Ok(())
}

fn pct(share: f64) -> String {
    format!("{:.1}%", share * 100.0)
}

/// Renders a feature row as a short natural-language summary. Deterministic;
/// clauses for missing fields are omitted entirely rather than filled with
/// placeholders. Shares are rendered as percentages with one decimal.
pub fn serialize_event(row: &EventFeatureRow) -> String {
    let mut text = String::from("A crash");

    let boroughs = [
        (feat::BORO_BRONX, "the Bronx"),
        (feat::BORO_BROOKLYN, "Brooklyn"),
        (feat::BORO_MANHATTAN, "Manhattan"),
        (feat::BORO_QUEENS, "Queens"),
        (feat::BORO_STATEN, "Staten Island"),
    ];
    for (idx, name) in boroughs {
        if row.value(idx) == Some(1.0) {
            text.push_str(&format!(" in {name}"));
            break;
        }
    }

    if let Some(h) = row.value(feat::CRASH_HOUR) {
        text.push_str(&format!(" at {:02}:00", h as u32));
    }
    match row.value(feat::IS_WEEKEND) {
        Some(v) if v == 1.0 => text.push_str(" on a weekend"),
        Some(_) => text.push_str(" on a weekday"),
        None => {}
    }
    text.push('.');

    if let (Some(p), Some(v)) =
        (row.value(feat::NUM_PERSON_RECORDS), row.value(feat::NUM_VEHICLE_RECORDS))
    {
        text.push_str(&format!(
            " {} {} and {} {} were involved.",
            p as u32,
            if p as u32 == 1 { "person" } else { "people" },
            v as u32,
            if v as u32 == 1 { "vehicle" } else { "vehicles" },
        ));
    }

    if let (Some(ped), Some(cyc)) =
        (row.value(feat::ROLE_PEDESTRIAN), row.value(feat::ROLE_CYCLIST))
    {
        if ped > 0.0 || cyc > 0.0 {
            text.push_str(&format!(
                " Pedestrians made up {} and cyclists {} of those involved.",
                pct(ped),
                pct(cyc)
            ));
        }
    }

    if let Some(age) = row.value(feat::AVG_AGE) {
        text.push_str(&format!(" The average age was {age:.0}."));
    }

    if let Some(s) = row.value(feat::PCT_WITH_SAFETY_EQUIPMENT) {
        text.push_str(&format!(" Safety equipment was in use for {} of those involved.", pct(s)));
    }
    if let Some(e) = row.value(feat::PCT_EJECTED) {
        if e > 0.0 {
            text.push_str(&format!(" {} were ejected from their vehicle.", pct(e)));
        }
    }

    if !row.factors.is_empty() {
        text.push_str(&format!(" Reported contributing factors: {}.", row.factors.join(", ")));
    }

    text
}

/// Builds the un-augmented prompt for a row.
pub fn build_prompt(row: &EventFeatureRow) -> EventPrompt {
    EventPrompt {
        event_text: serialize_event(row),
        task_text: TASK_TEXT.to_string(),
        augmentation: None,
    }
}

/// Appends the tabular model's fatal and injury probabilities to the
/// prompt. Augmenting an already-augmented prompt is an error so the
/// sentence can never be stacked twice.
pub fn augment_with_probs(
    mut prompt: EventPrompt,
    proba: &[f64; N_CLASSES],
) -> Result<EventPrompt, NarrativeError> {
    check_proba(proba)?;
    if prompt.augmentation.is_some() {
        return Err(NarrativeError::AlreadyAugmented);
    }
    prompt.augmentation = Some(probability_sentence(proba));
    Ok(prompt)
}

pub(crate) fn probability_sentence(proba: &[f64; N_CLASSES]) -> String {
    format!(
        "The tabular model assigns {:.2} probability to a fatal outcome and {:.2} probability \
         to an injury.",
        proba[SeverityLabel::Fatal.as_index()],
        proba[SeverityLabel::Injury.as_index()],
    )
}

/// Extracts a severity label from free text: case-insensitive scan for the
/// earliest severity keyword, with the longer negated forms ("no injury",
/// "property damage") taking precedence over the bare "injury" they
/// contain. Total and deterministic; unrecognizable text maps to `None`.
pub fn parse_prediction(text: &str) -> Option<SeverityLabel> {
    const CANDIDATES: [(&str, SeverityLabel); 5] = [
        ("no injury", SeverityLabel::NoInjury),
        ("property damage", SeverityLabel::NoInjury),
        ("fatal", SeverityLabel::Fatal),
        ("injured", SeverityLabel::Injury),
        ("injury", SeverityLabel::Injury),
    ];
    let lower = text.to_lowercase();
    let mut best: Option<(usize, SeverityLabel)> = None;
    for (needle, label) in CANDIDATES {
        if let Some(pos) = lower.find(needle) {
            // Strictly-earlier occurrences win; on a position tie the
            // earlier candidate does, which is what puts "no injury"
            // ahead of its own "injury" substring.
            if best.map_or(true, |(bp, _)| pos < bp) {
                best = Some((pos, label));
            }
        }
    }
    best.map(|(_, label)| label)
}

/// Alignment of one narrative against one attribution top-k set.
#[derive(Debug, Clone, Serialize)]
pub struct EventAlignment {
    pub collision_id: i64,
    pub shap_top: Vec<String>,
    pub mentions: Vec<String>,
    pub recall_at_k: f64,
    pub precision: f64,
    pub aligned: bool,
}

/// Per-event alignment records plus corpus aggregates.
#[derive(Debug, Clone, Serialize)]
pub struct AlignmentReport {
    pub events: Vec<EventAlignment>,
    pub mean_recall: f64,
    pub mean_precision: f64,
    pub alignment_score: f64,
    pub aligned_fraction: f64,
}

impl AlignmentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Compares the lexicon mentions in `narrative` against the top-k
/// attributed features. Returns `(recall_at_k, precision, aligned)`:
/// recall is the mentioned share of the top-k (denominator k), precision
/// is the share of mentioned features that are in the top-k (0 when the
/// narrative mentions nothing), and `aligned` flags at least two top-k
/// features mentioned — the working definition for k = 3. Only the first
/// k entries of `shap_top` are considered.
pub fn align(
    shap_top: &[String],
    narrative: &str,
    lexicon: &Lexicon,
    k: usize,
) -> (f64, f64, bool) {
    assert!(k >= 1, "alignment needs k >= 1");
    let top: BTreeSet<&str> = shap_top.iter().take(k).map(|s| s.as_str()).collect();
    let mentions = lexicon.mentions(narrative);
    let hits = mentions.iter().filter(|m| top.contains(m.as_str())).count();
    let recall = hits as f64 / k as f64;
    let precision = if mentions.is_empty() { 0.0 } else { hits as f64 / mentions.len() as f64 };
    (recall, precision, hits >= 2)
}

/// Harmonic mean of mean recall and mean precision; 0 when both are 0.
pub fn alignment_score(mean_recall: f64, mean_precision: f64) -> f64 {
    let s = mean_recall + mean_precision;
    if s == 0.0 {
        0.0
    } else {
        2.0 * mean_recall * mean_precision / s
    }
}

/// One narrative to be checked against its attribution top-k.
#[derive(Debug, Clone)]
pub struct AlignmentCase {
    pub collision_id: i64,
    pub shap_top: Vec<String>,
    pub narrative: String,
}

/// Scores a corpus of narratives against their attribution top-k sets.
pub fn alignment_report(cases: &[AlignmentCase], lexicon: &Lexicon, k: usize) -> AlignmentReport {
    let mut events = Vec::with_capacity(cases.len());
    for case in cases {
        let (recall_at_k, precision, aligned) = align(&case.shap_top, &case.narrative, lexicon, k);
        let mentions: Vec<String> = lexicon.mentions(&case.narrative).into_iter().collect();
        events.push(EventAlignment {
            collision_id: case.collision_id,
            shap_top: case.shap_top.iter().take(k).cloned().collect(),
            mentions,
            recall_at_k,
            precision,
            aligned,
        });
    }
    let n = events.len() as f64;
    let (mut mean_recall, mut mean_precision, mut aligned_fraction) = (0.0, 0.0, 0.0);
    if !events.is_empty() {
        mean_recall = events.iter().map(|e| e.recall_at_k).sum::<f64>() / n;
        mean_precision = events.iter().map(|e| e.precision).sum::<f64>() / n;
        aligned_fraction = events.iter().filter(|e| e.aligned).count() as f64 / n;
    }
    AlignmentReport {
        events,
        mean_recall,
        mean_precision,
        alignment_score: alignment_score(mean_recall, mean_precision),
        aligned_fraction,
    }
}
