//! Feature-mention lexicon.
//!
//! Alignment between Shapley attributions and narrative text needs a rule
//! for "the narrative mentions feature X". The shipped table maps every
//! canonical feature to a handful of lowercase surface phrases; a feature
//! counts as mentioned when any of its phrases occurs case-insensitively
//! in the text. The table is overridable via JSON for callers with their
//! own vocabulary.

use std::collections::{BTreeMap, BTreeSet};

use crate::narrative::NarrativeError;
use crate::schema::FeatureSchema;

/// Built-in phrase table. Phrases are lowercase; the first phrase of each
/// entry is the one the template backend writes into its narratives, so it
/// should read naturally inside a sentence.
///
/// Phrases of *different* features must not be substrings of one another,
/// otherwise a single surface string would count as mentioning both.
/// `Lexicon::validate` enforces this.
const DEFAULT_TABLE: &[(&str, &[&str])] = &[
    ("NUM_PERSON_RECORDS", &["people involved", "number of people", "crowd size", "persons on scene"]),
    ("ROLE_DRIVER", &["driver share", "share of drivers", "proportion of drivers"]),
    ("ROLE_PASSENGER", &["passenger share", "share of passengers", "proportion of passengers"]),
    ("ROLE_PEDESTRIAN", &["pedestrian", "on foot", "foot traffic"]),
    ("ROLE_CYCLIST", &["cyclist", "bicyclist"]),
    ("AVG_AGE", &["average age", "mean age", "typical age"]),
    ("PCT_YOUTH", &["young people", "youth share", "under 25"]),
    ("PCT_SENIOR", &["older adults", "senior share", "over 65", "elderly"]),
    ("PCT_WITH_SAFETY_EQUIPMENT", &["seat belt", "helmet", "safety equipment"]),
    ("PCT_NO_SAFETY_EQUIPMENT", &["unbelted", "unrestrained", "unprotected occupants"]),
    ("PCT_EJECTED", &["ejected", "ejection"]),
    ("PCT_AIRBAG_DEPLOYED", &["airbag", "air bag"]),
    ("NUM_VEHICLE_RECORDS", &["number of vehicles", "vehicles involved", "vehicle count"]),
    ("PASSENGER_VEHICLE", &["passenger car", "sedan", "private car"]),
    ("SUV", &["suv", "sport utility", "station wagon"]),
    ("TAXI", &["taxi", "cab"]),
    ("BUS", &["bus", "transit coach"]),
    ("TRUCK", &["truck", "van"]),
    ("MOTORCYCLE", &["motorcycle", "moped", "motorbike", "scooter"]),
    ("BICYCLE", &["pedal cycle", "bike involvement"]),
    ("OTHER_VEHICLE", &["other vehicle type", "unusual vehicle"]),
    ("PCT_OUT_OF_STATE", &["out-of-state", "out of state", "non-local plates"]),
    ("VEH_AGE_NEW", &["new vehicles", "recent model year"]),
    ("VEH_AGE_MID", &["mid-age vehicles", "middle-aged fleet"]),
    ("VEH_AGE_OLD", &["older vehicles", "aging fleet", "old cars"]),
    ("CRASH_HOUR", &["night", "nighttime", "late night", "early morning", "hour of"]),
    ("DAY_OF_WEEK", &["day of week", "weekday pattern"]),
    ("IS_WEEKEND", &["weekend", "saturday", "sunday"]),
    ("LATITUDE", &["latitude", "north-south position"]),
    ("LONGITUDE", &["longitude", "east-west position"]),
    ("ZIP_CODE", &["zip code", "postal area"]),
    ("BORO_BRONX", &["bronx", "the bronx"]),
    ("BORO_BROOKLYN", &["brooklyn", "kings county"]),
    ("BORO_MANHATTAN", &["manhattan", "new york county"]),
    ("BORO_QUEENS", &["queens", "queens county"]),
    ("BORO_STATEN", &["staten island", "richmond county"]),
];

/// Maps feature names to the lowercase phrases that count as mentions.
#[derive(Debug, Clone)]
pub struct Lexicon {
    table: BTreeMap<String, Vec<String>>,
}

impl Default for Lexicon {
    fn default() -> Self {
        let table = DEFAULT_TABLE
            .iter()
            .map(|(f, ps)| (f.to_string(), ps.iter().map(|p| p.to_string()).collect()))
            .collect();
        Lexicon { table }
    }
}

impl Lexicon {
    /// Builds a lexicon from an explicit table and checks it against the
    /// schema. Feature names not in the schema are rejected; so are empty
    /// phrase lists, non-lowercase phrases, and cross-feature substring
    /// collisions.
    pub fn new(
        table: BTreeMap<String, Vec<String>>,
        schema: &FeatureSchema,
    ) -> Result<Self, NarrativeError> {
        let lex = Lexicon { table };
        lex.validate(schema)?;
        Ok(lex)
    }

    pub fn from_json(json: &str, schema: &FeatureSchema) -> Result<Self, NarrativeError> {
        let table: BTreeMap<String, Vec<String>> = serde_json::from_str(json)
            .map_err(|e| NarrativeError::InvalidLexicon(format!("bad JSON: {e}")))?;
        Lexicon::new(table, schema)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.table).expect("lexicon serializes")
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<(), NarrativeError> {
        for idx in 0..schema.len() {
            let name = schema.name(idx);
            let phrases = self.table.get(name).ok_or_else(|| {
                NarrativeError::InvalidLexicon(format!("feature {name} has no phrases"))
            })?;
            if phrases.is_empty() {
                return Err(NarrativeError::InvalidLexicon(format!(
                    "feature {name} has an empty phrase list"
                )));
            }
            for p in phrases {
                if p.is_empty() {
                    return Err(NarrativeError::InvalidLexicon(format!(
                        "feature {name} has an empty phrase"
                    )));
                }
                if *p != p.to_lowercase() {
                    return Err(NarrativeError::InvalidLexicon(format!(
                        "phrase {p:?} for {name} is not lowercase"
                    )));
                }
            }
        }
        for name in self.table.keys() {
            if schema.index_of(name).is_none() {
                return Err(NarrativeError::InvalidLexicon(format!(
                    "lexicon entry {name} is not a schema feature"
                )));
            }
        }
        // A phrase of one feature occurring inside a phrase of another
        // would make every mention of the longer phrase ambiguous.
        let entries: Vec<(&String, &Vec<String>)> = self.table.iter().collect();
        for (i, (fa, pa)) in entries.iter().enumerate() {
            for (fb, pb) in entries.iter().skip(i + 1) {
                for a in pa.iter() {
                    for b in pb.iter() {
                        if a.contains(b.as_str()) || b.contains(a.as_str()) {
                            return Err(NarrativeError::InvalidLexicon(format!(
                                "phrase collision between {fa} ({a:?}) and {fb} ({b:?})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// First phrase for a feature: the canonical surface form used when
    /// generating text. Falls back to the lowercased feature name for
    /// features absent from the table.
    pub fn surface(&self, feature: &str) -> String {
        self.table
            .get(feature)
            .and_then(|ps| ps.first())
            .cloned()
            .unwrap_or_else(|| feature.to_lowercase())
    }

    pub fn phrases(&self, feature: &str) -> &[String] {
        self.table.get(feature).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// All features with at least one phrase occurring case-insensitively
    /// in `text`.
    pub fn mentions(&self, text: &str) -> BTreeSet<String> {
        let lower = text.to_lowercase();
        self.table
            .iter()
            .filter(|(_, phrases)| phrases.iter().any(|p| lower.contains(p.as_str())))
            .map(|(f, _)| f.clone())
            .collect()
    }
}
