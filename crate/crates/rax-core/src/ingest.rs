//! CSV ingestion: parse the crash/person/vehicle tables, normalize types,
//! aggregate person and vehicle records per collision, and emit unified
//! feature rows.
//!
//! Drop policy: a row is dropped only when a mandatory field is unusable
//! (missing collision_id, unparseable timestamp, malformed casualty
//! count). Optional fields that fail to parse are kept as missing; a
//! parseable coordinate outside the NYC bounding box is likewise masked,
//! not dropped.

use crate::schema::{
    derive_label, feat, Borough, EventFeatureRow, PersonRole, RawCrashRecord, RawPersonRecord,
    RawVehicleRecord, Sex, Timestamp, VehicleCategory, N_FEATURES,
};
use crate::schema::InjuryStatus;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use thiserror::Error;

pub const LAT_RANGE: (f64, f64) = (40.4, 41.0);
pub const LON_RANGE: (f64, f64) = (-74.3, -73.6);

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{table:?} table is missing mandatory column \"{header}\" (semantic field {semantic})")]
    MissingHeader {
        table: TableKind,
        semantic: String,
        header: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableKind {
    Crash,
    Person,
    Vehicle,
}

/// Maps semantic field names to source CSV headers for one table.
///
/// Crash semantics: `collision_id`, `timestamp` (or `date` + `time`),
/// `injured_count`, `killed_count` (all mandatory), plus optional
/// `borough`, `zip_code`, `latitude`, `longitude`, and any number of keys
/// starting with `contributing_factor`.
/// Person semantics: `collision_id` plus optional `role`, `age`, `sex`,
/// `injury_status`, `safety_equipment`, `ejected`, `airbag_deployed`.
/// Vehicle semantics: `collision_id` plus optional `category`,
/// `registration_state`, `model_year`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub table: TableKind,
    pub columns: BTreeMap<String, String>,
}

impl ColumnMapping {
    fn identity(table: TableKind, fields: &[&str]) -> ColumnMapping {
        ColumnMapping {
            table,
            columns: fields.iter().map(|f| (f.to_string(), f.to_string())).collect(),
        }
    }

    /// Mapping that expects semantic names as literal headers.
    pub fn crash_default() -> ColumnMapping {
        Self::identity(
            TableKind::Crash,
            &[
                "collision_id",
                "timestamp",
                "borough",
                "zip_code",
                "latitude",
                "longitude",
                "injured_count",
                "killed_count",
                "contributing_factor_1",
                "contributing_factor_2",
            ],
        )
    }

    pub fn person_default() -> ColumnMapping {
        Self::identity(
            TableKind::Person,
            &[
                "collision_id",
                "role",
                "age",
                "sex",
                "injury_status",
                "safety_equipment",
                "ejected",
                "airbag_deployed",
            ],
        )
    }

    pub fn vehicle_default() -> ColumnMapping {
        Self::identity(
            TableKind::Vehicle,
            &["collision_id", "category", "registration_state", "model_year"],
        )
    }
}

/// Per-table parse accounting; `rows_read == rows_accepted + rows_dropped`.
#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub rows_read: u64,
    pub rows_accepted: u64,
    pub rows_dropped: u64,
    pub drop_reasons: BTreeMap<String, u64>,
    /// Coordinates parseable but outside the bounding box (rows kept).
    pub coordinates_masked: u64,
}

impl IngestReport {
    fn drop(&mut self, reason: &str) {
        self.rows_dropped += 1;
        *self.drop_reasons.entry(reason.to_string()).or_insert(0) += 1;
    }
}

#[derive(Debug)]
pub enum ParsedTable {
    Crashes(Vec<RawCrashRecord>),
    Persons(Vec<RawPersonRecord>),
    Vehicles(Vec<RawVehicleRecord>),
}

/// Reads and normalizes one CSV table according to its column mapping.
pub fn parse_table(
    path: &Path,
    mapping: &ColumnMapping,
) -> Result<(ParsedTable, IngestReport), IngestError> {
    let text = std::fs::read_to_string(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_table_str(&text, mapping, &path.display().to_string())
}

/// `parse_table` over in-memory CSV text.
pub fn parse_table_str(
    text: &str,
    mapping: &ColumnMapping,
    path_label: &str,
) -> Result<(ParsedTable, IngestReport), IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| IngestError::Csv { path: path_label.to_string(), source: e })?
        .clone();
    let header_index: HashMap<&str, usize> =
        headers.iter().enumerate().map(|(i, h)| (h, i)).collect();

    // Resolve semantic -> column index; None when the mapping names a
    // header the file lacks (optional fields tolerate that).
    let col = |semantic: &str| -> Option<usize> {
        mapping
            .columns
            .get(semantic)
            .and_then(|h| header_index.get(h.as_str()).copied())
    };
    let mandatory = |semantic: &str| -> Result<usize, IngestError> {
        let header = mapping
            .columns
            .get(semantic)
            .cloned()
            .unwrap_or_else(|| semantic.to_string());
        col(semantic).ok_or(IngestError::MissingHeader {
            table: mapping.table,
            semantic: semantic.to_string(),
            header,
        })
    };

    let id_col = mandatory("collision_id")?;
    let mut report = IngestReport::default();

    match mapping.table {
        TableKind::Crash => {
            let ts_col = col("timestamp");
            let date_col = col("date");
            let time_col = col("time");
            if ts_col.is_none() && date_col.is_none() {
                mandatory("timestamp")?;
            }
            let injured_col = mandatory("injured_count")?;
            let killed_col = mandatory("killed_count")?;
            let factor_cols: Vec<usize> = mapping
                .columns
                .iter()
                .filter(|(sem, _)| sem.starts_with("contributing_factor"))
                .filter_map(|(_, h)| header_index.get(h.as_str()).copied())
                .collect();
            let borough_col = col("borough");
            let zip_col = col("zip_code");
            let lat_col = col("latitude");
            let lon_col = col("longitude");

            let mut out = Vec::new();
            for result in reader.records() {
                let rec = result.map_err(|e| IngestError::Csv {
                    path: path_label.to_string(),
                    source: e,
                })?;
                report.rows_read += 1;
                let field = |c: usize| rec.get(c).unwrap_or("").trim();

                let Some(collision_id) = parse_i64(field(id_col)) else {
                    report.drop("missing_collision_id");
                    continue;
                };
                let ts_text = match ts_col {
                    Some(c) => field(c).to_string(),
                    None => format!(
                        "{} {}",
                        field(date_col.unwrap()),
                        time_col.map(&field).unwrap_or("00:00")
                    ),
                };
                let Some(timestamp) = parse_timestamp(&ts_text) else {
                    report.drop("unparseable_timestamp");
                    continue;
                };
                let (Some(injured), Some(killed)) = (
                    parse_count(field(injured_col)),
                    parse_count(field(killed_col)),
                ) else {
                    report.drop("malformed_numeric");
                    continue;
                };

                let latitude = lat_col.and_then(|c| parse_coord(field(c), LAT_RANGE, &mut report));
                let longitude = lon_col.and_then(|c| parse_coord(field(c), LON_RANGE, &mut report));
                let mut factors: Vec<String> = Vec::new();
                for &c in &factor_cols {
                    let v = field(c);
                    if !v.is_empty() && !factors.iter().any(|f| f == v) {
                        factors.push(v.to_string());
                    }
                }
                out.push(RawCrashRecord {
                    collision_id,
                    timestamp,
                    borough: borough_col.map(|c| parse_borough(field(c))).unwrap_or(Borough::Unknown),
                    zip_code: zip_col.and_then(|c| parse_zip(field(c))),
                    latitude,
                    longitude,
                    injured_count: injured,
                    killed_count: killed,
                    contributing_factors: factors,
                });
                report.rows_accepted += 1;
            }
            Ok((ParsedTable::Crashes(out), report))
        }
        TableKind::Person => {
            let role_col = col("role");
            let age_col = col("age");
            let sex_col = col("sex");
            let injury_col = col("injury_status");
            let safety_col = col("safety_equipment");
            let ejected_col = col("ejected");
            let airbag_col = col("airbag_deployed");

            let mut out = Vec::new();
            for result in reader.records() {
                let rec = result.map_err(|e| IngestError::Csv {
                    path: path_label.to_string(),
                    source: e,
                })?;
                report.rows_read += 1;
                let field = |c: usize| rec.get(c).unwrap_or("").trim();
                let Some(collision_id) = parse_i64(field(id_col)) else {
                    report.drop("missing_collision_id");
                    continue;
                };
                out.push(RawPersonRecord {
                    collision_id,
                    role: role_col.map(|c| parse_role(field(c))).unwrap_or(PersonRole::Other),
                    age: age_col.and_then(|c| parse_age(field(c))),
                    sex: sex_col.and_then(|c| parse_sex(field(c))),
                    injury_status: injury_col
                        .map(|c| parse_injury_status(field(c)))
                        .unwrap_or(InjuryStatus::Unknown),
                    safety_equipment: safety_col.and_then(|c| parse_safety(field(c))),
                    ejected: ejected_col.and_then(|c| parse_flag(field(c), "EJECT")),
                    airbag_deployed: airbag_col.and_then(|c| parse_flag(field(c), "DEPLOY")),
                });
                report.rows_accepted += 1;
            }
            Ok((ParsedTable::Persons(out), report))
        }
        TableKind::Vehicle => {
            let cat_col = col("category");
            let state_col = col("registration_state");
            let year_col = col("model_year");

            let mut out = Vec::new();
            for result in reader.records() {
                let rec = result.map_err(|e| IngestError::Csv {
                    path: path_label.to_string(),
                    source: e,
                })?;
                report.rows_read += 1;
                let field = |c: usize| rec.get(c).unwrap_or("").trim();
                let Some(collision_id) = parse_i64(field(id_col)) else {
                    report.drop("missing_collision_id");
                    continue;
                };
                out.push(RawVehicleRecord {
                    collision_id,
                    category: cat_col
                        .map(|c| parse_vehicle_category(field(c)))
                        .unwrap_or(VehicleCategory::Other),
                    registration_state: state_col.and_then(|c| parse_state(field(c))),
                    model_year: year_col.and_then(|c| parse_model_year(field(c))),
                });
                report.rows_accepted += 1;
            }
            Ok((ParsedTable::Vehicles(out), report))
        }
    }
}

fn parse_i64(s: &str) -> Option<i64> {
    if s.is_empty() {
        return None;
    }
    s.parse().ok()
}

fn parse_count(s: &str) -> Option<u32> {
    let v: i64 = s.parse().ok()?;
    u32::try_from(v).ok()
}

const TS_FORMATS: [&str; 6] = [
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
    "%m/%d/%Y %-H:%M",
];

/// Naive local timestamps are interpreted as UTC.
fn parse_timestamp(s: &str) -> Option<Timestamp> {
    for fmt in TS_FORMATS {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Timestamp(dt.and_utc().timestamp()));
        }
    }
    None
}

fn parse_coord(s: &str, range: (f64, f64), report: &mut IngestReport) -> Option<f64> {
    let v: f64 = s.parse().ok()?;
    if v >= range.0 && v <= range.1 {
        Some(v)
    } else {
        report.coordinates_masked += 1;
        None
    }
}

fn parse_borough(s: &str) -> Borough {
    match s.to_uppercase().as_str() {
        "BRONX" => Borough::Bronx,
        "BROOKLYN" => Borough::Brooklyn,
        "MANHATTAN" => Borough::Manhattan,
        "QUEENS" => Borough::Queens,
        "STATEN ISLAND" | "STATEN_ISLAND" | "STATEN" => Borough::StatenIsland,
        _ => Borough::Unknown,
    }
}

fn parse_zip(s: &str) -> Option<i32> {
    let digits: String = s.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.len() == 5 {
        digits.parse().ok()
    } else {
        None
    }
}

fn parse_role(s: &str) -> PersonRole {
    let u = s.to_uppercase();
    if u.contains("DRIVER") {
        PersonRole::Driver
    } else if u.contains("PASSENGER") || u.contains("OCCUPANT") {
        PersonRole::Passenger
    } else if u.contains("PEDESTRIAN") {
        PersonRole::Pedestrian
    } else if u.contains("CYCLIST") || u.contains("BICYCL") {
        PersonRole::Cyclist
    } else {
        PersonRole::Other
    }
}

fn parse_age(s: &str) -> Option<u8> {
    let v: i64 = s.parse().ok()?;
    if (0..=120).contains(&v) {
        Some(v as u8)
    } else {
        None
    }
}

fn parse_sex(s: &str) -> Option<Sex> {
    match s.to_uppercase().as_str() {
        "M" | "MALE" => Some(Sex::Male),
        "F" | "FEMALE" => Some(Sex::Female),
        "U" | "X" | "OTHER" => Some(Sex::Other),
        _ => None,
    }
}

fn parse_injury_status(s: &str) -> InjuryStatus {
    let u = s.to_uppercase();
    if u.contains("KILL") || u.contains("FATAL") {
        InjuryStatus::Killed
    } else if u.contains("UNINJUR") || u.contains("NOT INJURED") {
        InjuryStatus::Uninjured
    } else if u.contains("INJUR") {
        InjuryStatus::Injured
    } else {
        InjuryStatus::Unknown
    }
}

fn parse_safety(s: &str) -> Option<bool> {
    let u = s.to_uppercase();
    if u.is_empty() || u.contains("UNKNOWN") {
        None
    } else if u.contains("NONE") {
        Some(false)
    } else {
        Some(true)
    }
}

/// Generic yes/no flag, with a domain keyword for phrasings like
/// "Ejected" / "Not Ejected" or "Deployed" / "Not Deployed".
fn parse_flag(s: &str, keyword: &str) -> Option<bool> {
    let u = s.to_uppercase();
    if u.is_empty() || u.contains("UNKNOWN") {
        return None;
    }
    match u.as_str() {
        "TRUE" | "YES" | "1" => return Some(true),
        "FALSE" | "NO" | "0" => return Some(false),
        _ => {}
    }
    if u.contains(keyword) {
        Some(!u.contains("NOT"))
    } else {
        None
    }
}

fn parse_vehicle_category(s: &str) -> VehicleCategory {
    let u = s.to_uppercase();
    if u.contains("SPORT UTILITY") || u.contains("STATION WAGON") || u.contains("SUV") {
        VehicleCategory::Suv
    } else if u.contains("TAXI") {
        VehicleCategory::Taxi
    } else if u.contains("BUS") {
        VehicleCategory::Bus
    } else if u.contains("TRUCK") || u.contains("VAN") {
        VehicleCategory::Truck
    } else if u.contains("MOTORCYCLE") || u.contains("MOPED") || u.contains("MOTORBIKE") || u.contains("SCOOTER") {
        VehicleCategory::Motorcycle
    } else if u.contains("BICYCLE") || u.contains("BIKE") {
        VehicleCategory::Bicycle
    } else if u.contains("SEDAN") || u.contains("PASSENGER") || u.contains("CONVERTIBLE") || u.contains("COUPE") {
        VehicleCategory::PassengerVehicle
    } else {
        VehicleCategory::Other
    }
}

fn parse_state(s: &str) -> Option<String> {
    let u = s.trim().to_uppercase();
    if u.len() == 2 && u.chars().all(|c| c.is_ascii_alphabetic()) {
        Some(u)
    } else {
        None
    }
}

fn parse_model_year(s: &str) -> Option<i32> {
    let v: i32 = s.parse().ok()?;
    if (1900..=2100).contains(&v) {
        Some(v)
    } else {
        None
    }
}

/// Aggregated human-composition and safety-behavior features for one
/// collision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersonAggregate {
    pub count: u32,
    pub role_driver: f64,
    pub role_passenger: f64,
    pub role_pedestrian: f64,
    pub role_cyclist: f64,
    /// None when no record carries an age.
    pub avg_age: Option<f64>,
    pub pct_youth: f64,
    pub pct_senior: f64,
    pub pct_with_safety: f64,
    pub pct_no_safety: f64,
    pub pct_ejected: f64,
    pub pct_airbag: f64,
}

/// Share of `num` over `den`, 0 when the denominator is 0.
fn share(num: u32, den: u32) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn aggregate_persons(persons: &[RawPersonRecord]) -> PersonAggregate {
    let count = persons.len() as u32;
    let role = |r: PersonRole| persons.iter().filter(|p| p.role == r).count() as u32;

    let ages: Vec<u8> = persons.iter().filter_map(|p| p.age).collect();
    let avg_age = if ages.is_empty() {
        None
    } else {
        Some(ages.iter().map(|&a| a as f64).sum::<f64>() / ages.len() as f64)
    };
    let youth = ages.iter().filter(|&&a| a <= crate::schema::YOUTH_MAX_AGE).count() as u32;
    let senior = ages.iter().filter(|&&a| a >= crate::schema::SENIOR_MIN_AGE).count() as u32;

    let flag_share = |get: fn(&RawPersonRecord) -> Option<bool>| {
        let observed = persons.iter().filter(|p| get(p).is_some()).count() as u32;
        let yes = persons.iter().filter(|p| get(p) == Some(true)).count() as u32;
        share(yes, observed)
    };
    let no_safety = {
        let observed = persons.iter().filter(|p| p.safety_equipment.is_some()).count() as u32;
        let no = persons.iter().filter(|p| p.safety_equipment == Some(false)).count() as u32;
        share(no, observed)
    };

    PersonAggregate {
        count,
        role_driver: share(role(PersonRole::Driver), count),
        role_passenger: share(role(PersonRole::Passenger), count),
        role_pedestrian: share(role(PersonRole::Pedestrian), count),
        role_cyclist: share(role(PersonRole::Cyclist), count),
        avg_age,
        pct_youth: share(youth, ages.len() as u32),
        pct_senior: share(senior, ages.len() as u32),
        pct_with_safety: flag_share(|p| p.safety_equipment),
        pct_no_safety: no_safety,
        pct_ejected: flag_share(|p| p.ejected),
        pct_airbag: flag_share(|p| p.airbag_deployed),
    }
}

/// Aggregated vehicle-composition features for one collision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleAggregate {
    pub count: u32,
    /// Shares indexed like the VehicleCategory enum.
    pub category_shares: [f64; 8],
    pub pct_out_of_state: f64,
    pub age_new: f64,
    pub age_mid: f64,
    pub age_old: f64,
}

pub fn aggregate_vehicles(vehicles: &[RawVehicleRecord], crash_year: i32) -> VehicleAggregate {
    let count = vehicles.len() as u32;
    let mut category_shares = [0.0; 8];
    for (i, cat) in [
        VehicleCategory::PassengerVehicle,
        VehicleCategory::Suv,
        VehicleCategory::Taxi,
        VehicleCategory::Bus,
        VehicleCategory::Truck,
        VehicleCategory::Motorcycle,
        VehicleCategory::Bicycle,
        VehicleCategory::Other,
    ]
    .iter()
    .enumerate()
    {
        category_shares[i] = share(vehicles.iter().filter(|v| v.category == *cat).count() as u32, count);
    }

    let state_observed = vehicles.iter().filter(|v| v.registration_state.is_some()).count() as u32;
    let out_of_state = vehicles
        .iter()
        .filter(|v| v.registration_state.as_deref().is_some_and(|s| s != "NY"))
        .count() as u32;

    // A model year beyond crash_year + 1 is implausible and treated as
    // unrecorded.
    let ages: Vec<i32> = vehicles
        .iter()
        .filter_map(|v| v.model_year)
        .filter(|&y| y <= crash_year + 1)
        .map(|y| crash_year - y)
        .collect();
    let observed_age = ages.len() as u32;
    let new = ages.iter().filter(|&&a| a <= crate::schema::VEH_AGE_NEW_MAX).count() as u32;
    let old = ages.iter().filter(|&&a| a > crate::schema::VEH_AGE_MID_MAX).count() as u32;
    let mid = observed_age - new - old;

    VehicleAggregate {
        count,
        category_shares,
        pct_out_of_state: share(out_of_state, state_observed),
        age_new: share(new, observed_age),
        age_mid: share(mid, observed_age),
        age_old: share(old, observed_age),
    }
}

/// Assembles one event row in the canonical schema from a crash record and
/// its joined person/vehicle records.
pub fn build_event_row(
    crash: &RawCrashRecord,
    persons: &[RawPersonRecord],
    vehicles: &[RawVehicleRecord],
) -> EventFeatureRow {
    let p = aggregate_persons(persons);
    let v = aggregate_vehicles(vehicles, crash.timestamp.year());

    let mut values = vec![0.0; N_FEATURES];
    let mut missing = vec![false; N_FEATURES];

    values[feat::NUM_PERSON_RECORDS] = p.count as f64;
    values[feat::ROLE_DRIVER] = p.role_driver;
    values[feat::ROLE_PASSENGER] = p.role_passenger;
    values[feat::ROLE_PEDESTRIAN] = p.role_pedestrian;
    values[feat::ROLE_CYCLIST] = p.role_cyclist;
    match p.avg_age {
        Some(a) => values[feat::AVG_AGE] = a,
        None => {
            values[feat::AVG_AGE] = -1.0;
            missing[feat::AVG_AGE] = true;
        }
    }
    values[feat::PCT_YOUTH] = p.pct_youth;
    values[feat::PCT_SENIOR] = p.pct_senior;
    values[feat::PCT_WITH_SAFETY_EQUIPMENT] = p.pct_with_safety;
    values[feat::PCT_NO_SAFETY_EQUIPMENT] = p.pct_no_safety;
    values[feat::PCT_EJECTED] = p.pct_ejected;
    values[feat::PCT_AIRBAG_DEPLOYED] = p.pct_airbag;

    values[feat::NUM_VEHICLE_RECORDS] = v.count as f64;
    for (i, idx) in (feat::PASSENGER_VEHICLE..=feat::OTHER_VEHICLE).enumerate() {
        values[idx] = v.category_shares[i];
    }
    values[feat::PCT_OUT_OF_STATE] = v.pct_out_of_state;
    values[feat::VEH_AGE_NEW] = v.age_new;
    values[feat::VEH_AGE_MID] = v.age_mid;
    values[feat::VEH_AGE_OLD] = v.age_old;

    values[feat::CRASH_HOUR] = crash.timestamp.hour() as f64;
    values[feat::DAY_OF_WEEK] = crash.timestamp.weekday_index() as f64;
    values[feat::IS_WEEKEND] = if crash.timestamp.is_weekend() { 1.0 } else { 0.0 };
    match crash.latitude {
        Some(lat) => values[feat::LATITUDE] = lat,
        None => missing[feat::LATITUDE] = true,
    }
    match crash.longitude {
        Some(lon) => values[feat::LONGITUDE] = lon,
        None => missing[feat::LONGITUDE] = true,
    }
    match crash.zip_code {
        Some(zip) => values[feat::ZIP_CODE] = zip as f64,
        None => {
            values[feat::ZIP_CODE] = -1.0;
            missing[feat::ZIP_CODE] = true;
        }
    }
    let boro_idx = match crash.borough {
        Borough::Bronx => Some(feat::BORO_BRONX),
        Borough::Brooklyn => Some(feat::BORO_BROOKLYN),
        Borough::Manhattan => Some(feat::BORO_MANHATTAN),
        Borough::Queens => Some(feat::BORO_QUEENS),
        Borough::StatenIsland => Some(feat::BORO_STATEN),
        Borough::Unknown => None,
    };
    if let Some(idx) = boro_idx {
        values[idx] = 1.0;
    }

    EventFeatureRow {
        collision_id: crash.collision_id,
        timestamp: crash.timestamp,
        label: derive_label(crash.injured_count, crash.killed_count),
        values,
        missing,
        factors: crash.contributing_factors.clone(),
    }
}

/// Join accounting; orphan counts preserve records that matched no crash.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct JoinReport {
    pub crashes_in: u64,
    pub events_out: u64,
    pub duplicate_crash_records: u64,
    pub orphan_person_records: u64,
    pub orphan_vehicle_records: u64,
}

/// Joins the three tables on collision_id and emits one feature row per
/// unique crash record, in crash-table order.
pub fn join_events(
    crashes: &[RawCrashRecord],
    persons: &[RawPersonRecord],
    vehicles: &[RawVehicleRecord],
) -> (Vec<EventFeatureRow>, JoinReport) {
    let mut persons_by_id: HashMap<i64, Vec<&RawPersonRecord>> = HashMap::new();
    for p in persons {
        persons_by_id.entry(p.collision_id).or_default().push(p);
    }
    let mut vehicles_by_id: HashMap<i64, Vec<&RawVehicleRecord>> = HashMap::new();
    for v in vehicles {
        vehicles_by_id.entry(v.collision_id).or_default().push(v);
    }

    let mut report = JoinReport {
        crashes_in: crashes.len() as u64,
        ..JoinReport::default()
    };
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(crashes.len());
    for crash in crashes {
        if !seen.insert(crash.collision_id) {
            report.duplicate_crash_records += 1;
            continue;
        }
        let ps: Vec<RawPersonRecord> = persons_by_id
            .remove(&crash.collision_id)
            .map(|v| v.into_iter().cloned().collect())
            .unwrap_or_default();
        let vs: Vec<RawVehicleRecord> = vehicles_by_id
            .remove(&crash.collision_id)
            .map(|v| v.into_iter().cloned().collect())
            .unwrap_or_default();
        out.push(build_event_row(crash, &ps, &vs));
    }
    report.orphan_person_records = persons_by_id.values().map(|v| v.len() as u64).sum();
    report.orphan_vehicle_records = vehicles_by_id.values().map(|v| v.len() as u64).sum();
    report.events_out = out.len() as u64;
    (out, report)
}
