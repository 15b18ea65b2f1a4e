//! Raw record types, the severity label, and the unified feature schema.
//!
//! Every downstream module (store, models, explainers, narrative) consumes
//! feature vectors laid out in the canonical order defined here. The order
//! is part of the on-disk contract and is covered by `schema_hash`.

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("negative casualty count: injured={injured}, killed={killed}")]
    NegativeCount { injured: i64, killed: i64 },
    #[error("feature vector has {got} values, schema has {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("feature {name} = {value} violates {rule}")]
    ValueOutOfDomain {
        name: &'static str,
        value: f64,
        rule: &'static str,
    },
    #[error("schema JSON is invalid: {0}")]
    InvalidJson(String),
}

/// Three-class injury severity. The numeric order encodes increasing
/// severity and matches the class index used by all models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SeverityLabel {
    NoInjury = 0,
    Injury = 1,
    Fatal = 2,
}

pub const N_CLASSES: usize = 3;

impl SeverityLabel {
    pub fn as_index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<SeverityLabel> {
        match idx {
            0 => Some(SeverityLabel::NoInjury),
            1 => Some(SeverityLabel::Injury),
            2 => Some(SeverityLabel::Fatal),
            _ => None,
        }
    }

    pub const ALL: [SeverityLabel; 3] = [
        SeverityLabel::NoInjury,
        SeverityLabel::Injury,
        SeverityLabel::Fatal,
    ];

    /// Lower-case wording used in generated text.
    pub fn phrase(self) -> &'static str {
        match self {
            SeverityLabel::NoInjury => "no injury",
            SeverityLabel::Injury => "injury",
            SeverityLabel::Fatal => "fatal",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SeverityLabel::NoInjury => "NoInjury",
            SeverityLabel::Injury => "Injury",
            SeverityLabel::Fatal => "Fatal",
        }
    }
}

/// Maps casualty counts to the event-level severity label: any death is
/// Fatal, otherwise any injury is Injury, otherwise NoInjury.
pub fn derive_label(injured_count: u32, killed_count: u32) -> SeverityLabel {
    if killed_count >= 1 {
        SeverityLabel::Fatal
    } else if injured_count >= 1 {
        SeverityLabel::Injury
    } else {
        SeverityLabel::NoInjury
    }
}

/// `derive_label` over raw parsed integers; negative counts are rejected.
pub fn try_derive_label(injured: i64, killed: i64) -> Result<SeverityLabel, SchemaError> {
    if injured < 0 || killed < 0 {
        return Err(SchemaError::NegativeCount { injured, killed });
    }
    Ok(derive_label(injured as u32, killed as u32))
}

/// Event time as UTC epoch seconds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn from_ymd_hms(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32) -> Option<Timestamp> {
        let dt = chrono::NaiveDate::from_ymd_opt(y, mo, d)?.and_hms_opt(h, mi, s)?;
        Some(Timestamp(dt.and_utc().timestamp()))
    }

    fn utc(self) -> DateTime<Utc> {
        DateTime::<Utc>::from_timestamp(self.0, 0).expect("epoch seconds in chrono range")
    }

    pub fn year(self) -> i32 {
        self.utc().year()
    }

    pub fn month(self) -> u32 {
        self.utc().month()
    }

    pub fn hour(self) -> u32 {
        self.utc().hour()
    }

    /// Day of week with Monday = 0 … Sunday = 6.
    pub fn weekday_index(self) -> u32 {
        self.utc().weekday().num_days_from_monday()
    }

    pub fn is_weekend(self) -> bool {
        self.weekday_index() >= 5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Borough {
    Bronx,
    Brooklyn,
    Manhattan,
    Queens,
    StatenIsland,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PersonRole {
    Driver,
    Passenger,
    Pedestrian,
    Cyclist,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InjuryStatus {
    Uninjured,
    Injured,
    Killed,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleCategory {
    PassengerVehicle,
    Suv,
    Taxi,
    Bus,
    Truck,
    Motorcycle,
    Bicycle,
    Other,
}

/// One row of the collision table after normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCrashRecord {
    pub collision_id: i64,
    pub timestamp: Timestamp,
    pub borough: Borough,
    pub zip_code: Option<i32>,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    pub injured_count: u32,
    pub killed_count: u32,
    /// Free-text contributing factors, carried through for narrative
    /// context only; never a model feature.
    pub contributing_factors: Vec<String>,
}

/// One row of the person table after normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPersonRecord {
    pub collision_id: i64,
    pub role: PersonRole,
    pub age: Option<u8>,
    pub sex: Option<Sex>,
    pub injury_status: InjuryStatus,
    /// `Some(true)` = equipment in use, `Some(false)` = none, `None` = unrecorded.
    pub safety_equipment: Option<bool>,
    pub ejected: Option<bool>,
    pub airbag_deployed: Option<bool>,
}

/// One row of the vehicle table after normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawVehicleRecord {
    pub collision_id: i64,
    pub category: VehicleCategory,
    pub registration_state: Option<String>,
    pub model_year: Option<i32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureGroup {
    HumanComposition,
    SafetyBehavior,
    VehicleComposition,
    SpatioTemporal,
}

impl FeatureGroup {
    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::HumanComposition => "HumanComposition",
            FeatureGroup::SafetyBehavior => "SafetyBehavior",
            FeatureGroup::VehicleComposition => "VehicleComposition",
            FeatureGroup::SpatioTemporal => "SpatioTemporal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Numeric,
    Binary,
    CategoricalCode,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Numeric => "Numeric",
            FeatureKind::Binary => "Binary",
            FeatureKind::CategoricalCode => "CategoricalCode",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    pub group: FeatureGroup,
    pub kind: FeatureKind,
}

/// Stable indices into the canonical feature vector.
pub mod feat {
    pub const NUM_PERSON_RECORDS: usize = 0;
    pub const ROLE_DRIVER: usize = 1;
    pub const ROLE_PASSENGER: usize = 2;
    pub const ROLE_PEDESTRIAN: usize = 3;
    pub const ROLE_CYCLIST: usize = 4;
    pub const AVG_AGE: usize = 5;
    pub const PCT_YOUTH: usize = 6;
    pub const PCT_SENIOR: usize = 7;
    pub const PCT_WITH_SAFETY_EQUIPMENT: usize = 8;
    pub const PCT_NO_SAFETY_EQUIPMENT: usize = 9;
    pub const PCT_EJECTED: usize = 10;
    pub const PCT_AIRBAG_DEPLOYED: usize = 11;
    pub const NUM_VEHICLE_RECORDS: usize = 12;
    pub const PASSENGER_VEHICLE: usize = 13;
    pub const SUV: usize = 14;
    pub const TAXI: usize = 15;
    pub const BUS: usize = 16;
    pub const TRUCK: usize = 17;
    pub const MOTORCYCLE: usize = 18;
    pub const BICYCLE: usize = 19;
    pub const OTHER_VEHICLE: usize = 20;
    pub const PCT_OUT_OF_STATE: usize = 21;
    pub const VEH_AGE_NEW: usize = 22;
    pub const VEH_AGE_MID: usize = 23;
    pub const VEH_AGE_OLD: usize = 24;
    pub const CRASH_HOUR: usize = 25;
    pub const DAY_OF_WEEK: usize = 26;
    pub const IS_WEEKEND: usize = 27;
    pub const LATITUDE: usize = 28;
    pub const LONGITUDE: usize = 29;
    pub const ZIP_CODE: usize = 30;
    pub const BORO_BRONX: usize = 31;
    pub const BORO_BROOKLYN: usize = 32;
    pub const BORO_MANHATTAN: usize = 33;
    pub const BORO_QUEENS: usize = 34;
    pub const BORO_STATEN: usize = 35;
}

pub const N_FEATURES: usize = 36;

/// Age below/above which a person counts toward PCT_YOUTH / PCT_SENIOR.
pub const YOUTH_MAX_AGE: u8 = 25;
pub const SENIOR_MIN_AGE: u8 = 65;

/// Vehicle-age bucket boundaries in years relative to the crash year:
/// NEW < 5, 5 <= MID <= 15, OLD > 15.
pub const VEH_AGE_NEW_MAX: i32 = 4;
pub const VEH_AGE_MID_MAX: i32 = 15;

use FeatureGroup::*;
use FeatureKind::*;

static CANONICAL: [(&str, FeatureGroup, FeatureKind); N_FEATURES] = [
    ("NUM_PERSON_RECORDS", HumanComposition, Numeric),
    ("ROLE_DRIVER", HumanComposition, Numeric),
    ("ROLE_PASSENGER", HumanComposition, Numeric),
    ("ROLE_PEDESTRIAN", HumanComposition, Numeric),
    ("ROLE_CYCLIST", HumanComposition, Numeric),
    ("AVG_AGE", HumanComposition, Numeric),
    ("PCT_YOUTH", HumanComposition, Numeric),
    ("PCT_SENIOR", HumanComposition, Numeric),
    ("PCT_WITH_SAFETY_EQUIPMENT", SafetyBehavior, Numeric),
    ("PCT_NO_SAFETY_EQUIPMENT", SafetyBehavior, Numeric),
    ("PCT_EJECTED", SafetyBehavior, Numeric),
    ("PCT_AIRBAG_DEPLOYED", SafetyBehavior, Numeric),
    ("NUM_VEHICLE_RECORDS", VehicleComposition, Numeric),
    ("PASSENGER_VEHICLE", VehicleComposition, Numeric),
    ("SUV", VehicleComposition, Numeric),
    ("TAXI", VehicleComposition, Numeric),
    ("BUS", VehicleComposition, Numeric),
    ("TRUCK", VehicleComposition, Numeric),
    ("MOTORCYCLE", VehicleComposition, Numeric),
    ("BICYCLE", VehicleComposition, Numeric),
    ("OTHER_VEHICLE", VehicleComposition, Numeric),
    ("PCT_OUT_OF_STATE", VehicleComposition, Numeric),
    ("VEH_AGE_NEW", VehicleComposition, Numeric),
    ("VEH_AGE_MID", VehicleComposition, Numeric),
    ("VEH_AGE_OLD", VehicleComposition, Numeric),
    ("CRASH_HOUR", SpatioTemporal, Numeric),
    ("DAY_OF_WEEK", SpatioTemporal, CategoricalCode),
    ("IS_WEEKEND", SpatioTemporal, Binary),
    ("LATITUDE", SpatioTemporal, Numeric),
    ("LONGITUDE", SpatioTemporal, Numeric),
    ("ZIP_CODE", SpatioTemporal, CategoricalCode),
    ("BORO_BRONX", SpatioTemporal, Binary),
    ("BORO_BROOKLYN", SpatioTemporal, Binary),
    ("BORO_MANHATTAN", SpatioTemporal, Binary),
    ("BORO_QUEENS", SpatioTemporal, Binary),
    ("BORO_STATEN", SpatioTemporal, Binary),
];

/// Ordered feature descriptors plus the hash that seals them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    descriptors: Vec<FeatureDescriptor>,
    hash: u64,
}

/// Indices of the share-valued features (must lie in [0, 1]).
static SHARE_FEATURES: [usize; 20] = [
    feat::ROLE_DRIVER,
    feat::ROLE_PASSENGER,
    feat::ROLE_PEDESTRIAN,
    feat::ROLE_CYCLIST,
    feat::PCT_YOUTH,
    feat::PCT_SENIOR,
    feat::PCT_WITH_SAFETY_EQUIPMENT,
    feat::PCT_NO_SAFETY_EQUIPMENT,
    feat::PCT_EJECTED,
    feat::PCT_AIRBAG_DEPLOYED,
    feat::PASSENGER_VEHICLE,
    feat::SUV,
    feat::TAXI,
    feat::BUS,
    feat::TRUCK,
    feat::MOTORCYCLE,
    feat::BICYCLE,
    feat::OTHER_VEHICLE,
    feat::PCT_OUT_OF_STATE,
    feat::VEH_AGE_NEW,
];

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hash_descriptors(descriptors: &[FeatureDescriptor]) -> u64 {
    let mut buf = Vec::with_capacity(descriptors.len() * 32);
    buf.extend_from_slice(b"rax-schema-v1\n");
    for d in descriptors {
        buf.extend_from_slice(d.name.as_bytes());
        buf.push(b'|');
        buf.extend_from_slice(d.group.name().as_bytes());
        buf.push(b'|');
        buf.extend_from_slice(d.kind.name().as_bytes());
        buf.push(b'\n');
    }
    fnv1a64(&buf)
}

impl FeatureSchema {
    pub fn new(descriptors: Vec<FeatureDescriptor>) -> FeatureSchema {
        let hash = hash_descriptors(&descriptors);
        FeatureSchema { descriptors, hash }
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptors(&self) -> &[FeatureDescriptor] {
        &self.descriptors
    }

    pub fn descriptor(&self, idx: usize) -> &FeatureDescriptor {
        &self.descriptors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.descriptors[idx].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.descriptors.iter().position(|d| d.name == name)
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    /// The hash as 16 lower-case hex characters, the form used in files.
    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash)
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Export<'a> {
            schema_hash: String,
            features: &'a [FeatureDescriptor],
        }
        serde_json::to_string_pretty(&Export {
            schema_hash: self.hash_hex(),
            features: &self.descriptors,
        })
        .expect("schema serializes")
    }

    pub fn from_json(json: &str) -> Result<FeatureSchema, SchemaError> {
        #[derive(Deserialize)]
        struct Import {
            schema_hash: String,
            features: Vec<FeatureDescriptor>,
        }
        let imp: Import =
            serde_json::from_str(json).map_err(|e| SchemaError::InvalidJson(e.to_string()))?;
        let schema = FeatureSchema::new(imp.features);
        if schema.hash_hex() != imp.schema_hash {
            return Err(SchemaError::InvalidJson(format!(
                "schema_hash {} does not match feature list (computed {})",
                imp.schema_hash,
                schema.hash_hex()
            )));
        }
        Ok(schema)
    }
}

/// The fixed schema shared by the whole pipeline.
pub fn canonical_schema() -> FeatureSchema {
    FeatureSchema::new(
        CANONICAL
            .iter()
            .map(|&(name, group, kind)| FeatureDescriptor {
                name: name.to_string(),
                group,
                kind,
            })
            .collect(),
    )
}

/// One joined, labeled event in the unified feature schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFeatureRow {
    pub collision_id: i64,
    pub timestamp: Timestamp,
    pub label: SeverityLabel,
    /// Dense values aligned with the canonical schema. Entries whose
    /// `missing` flag is set hold a sentinel and must not be interpreted.
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
    /// Auxiliary contributing-factor strings for narrative context.
    pub factors: Vec<String>,
}

impl EventFeatureRow {
    /// The value at `idx`, or `None` when masked missing.
    pub fn value(&self, idx: usize) -> Option<f64> {
        if self.missing[idx] {
            None
        } else {
            Some(self.values[idx])
        }
    }

    /// Checks the row against the schema's structural and domain
    /// invariants. Used before rows enter the feature store.
    pub fn validate(&self, schema: &FeatureSchema) -> Result<(), SchemaError> {
        if self.values.len() != schema.len() || self.missing.len() != schema.len() {
            return Err(SchemaError::LengthMismatch {
                got: self.values.len(),
                want: schema.len(),
            });
        }
        let fail = |idx: usize, rule: &'static str| SchemaError::ValueOutOfDomain {
            name: CANONICAL[idx].0,
            value: self.values[idx],
            rule,
        };
        for (idx, d) in schema.descriptors().iter().enumerate() {
            if self.missing[idx] {
                continue;
            }
            let v = self.values[idx];
            if !v.is_finite() {
                return Err(fail(idx, "finite"));
            }
            match d.kind {
                FeatureKind::Binary => {
                    if v != 0.0 && v != 1.0 {
                        return Err(fail(idx, "in {0, 1}"));
                    }
                }
                FeatureKind::CategoricalCode => {
                    if v.fract() != 0.0 || v < i32::MIN as f64 || v > i32::MAX as f64 {
                        return Err(fail(idx, "an integer code in i32 range"));
                    }
                }
                FeatureKind::Numeric => {}
            }
        }
        for &idx in &SHARE_FEATURES {
            if let Some(v) = self.value(idx) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(fail(idx, "in [0, 1]"));
                }
            }
        }
        for &idx in &[feat::VEH_AGE_MID, feat::VEH_AGE_OLD] {
            if let Some(v) = self.value(idx) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(fail(idx, "in [0, 1]"));
                }
            }
        }
        let role_sum: f64 = [
            feat::ROLE_DRIVER,
            feat::ROLE_PASSENGER,
            feat::ROLE_PEDESTRIAN,
            feat::ROLE_CYCLIST,
        ]
        .iter()
        .filter_map(|&i| self.value(i))
        .sum();
        if role_sum > 1.0 + 1e-9 {
            return Err(fail(feat::ROLE_DRIVER, "role shares summing to <= 1"));
        }
        let veh_sum: f64 = (feat::PASSENGER_VEHICLE..=feat::OTHER_VEHICLE)
            .filter_map(|i| self.value(i))
            .sum();
        if veh_sum > 1.0 + 1e-9 {
            return Err(fail(
                feat::PASSENGER_VEHICLE,
                "vehicle-category shares summing to <= 1",
            ));
        }
        if let Some(h) = self.value(feat::CRASH_HOUR) {
            if !(0.0..=23.0).contains(&h) {
                return Err(fail(feat::CRASH_HOUR, "in [0, 23]"));
            }
        }
        if let Some(d) = self.value(feat::DAY_OF_WEEK) {
            if !(0.0..=6.0).contains(&d) {
                return Err(fail(feat::DAY_OF_WEEK, "in [0, 6]"));
            }
            if let Some(w) = self.value(feat::IS_WEEKEND) {
                let expect = if d >= 5.0 { 1.0 } else { 0.0 };
                if w != expect {
                    return Err(fail(feat::IS_WEEKEND, "1 iff DAY_OF_WEEK in {5, 6}"));
                }
            }
        }
        Ok(())
    }
}
