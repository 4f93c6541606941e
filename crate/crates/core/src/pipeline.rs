//! Panel CSV to estimation sample.
//!
//! Stages run in a fixed order: [`ingest_panel_csv`], [`build_lags`],
//! [`intensive_margin`], [`join_premiums`], [`stable_subsample`] and
//! [`stratify`]. Each stage is a pure function returning the surviving rows
//! and one [`DroppedRow`] per rejected row, so that every stage satisfies
//! `input = output + dropped`. [`prepare_sample`] chains them and keeps the
//! [`StageCount`] ledger.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::econometrics::{EstimationData, EstimationError};
use crate::market::{AgeGroup, Canton, Deductible, MarketError, PlanType, PremiumCell, PremiumTable};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("malformed panel csv (line {line}): {message}")]
    Malformed { line: usize, message: String },
    #[error("csv output: {0}")]
    Output(String),
    #[error("health shock needs the lagged illness flag")]
    MissingLag,
    #[error("unknown stratum {0:?}; expected household_size=1|2|3+, gender=<code>, subsidy=0|1 or education=low|high")]
    UnknownStratum(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("column {column} missing for person {person_id} in {year}")]
    MissingValue { column: String, person_id: u64, year: i32 },
    #[error("empty estimation sample")]
    EmptySample,
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub const PANEL_COLUMNS: [&str; 20] = [
    "person_id",
    "year",
    "canton",
    "age",
    "gender",
    "educ_years",
    "hh_size",
    "income_pm",
    "employment",
    "subsidy",
    "suppl_ins",
    "deductible",
    "plan_type",
    "visits",
    "self_health",
    "illness",
    "chronic",
    "smoke",
    "phys_act",
    "med_need",
];

/// Columns appended by [`write_estimation_csv`] after the panel columns.
pub const DERIVED_COLUMNS: [&str; 13] = [
    "lag_visits",
    "lag_self_health",
    "lag_chronic",
    "lag_smoke",
    "lag_phys_act",
    "lag_med_need",
    "health_shock",
    "log_visits",
    "d_lowest",
    "d_highest",
    "avg_premium",
    "switching_group",
    "stable",
];

pub const MIN_AGE: u32 = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Employment {
    Active,
    Unemployed,
    NotInLabourForce,
}

impl Employment {
    pub fn code(self) -> &'static str {
        match self {
            Employment::Active => "active",
            Employment::Unemployed => "unemployed",
            Employment::NotInLabourForce => "nilf",
        }
    }
}

impl FromStr for Employment {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "active" => Ok(Employment::Active),
            "unemployed" => Ok(Employment::Unemployed),
            "nilf" => Ok(Employment::NotInLabourForce),
            _ => Err(()),
        }
    }
}

/// One person-year of the raw panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRecord {
    pub person_id: u64,
    pub year: i32,
    pub canton: Canton,
    pub age: u32,
    pub gender: u8,
    pub educ_years: f64,
    pub hh_size: u32,
    /// CHF per household member.
    pub income_pm: f64,
    pub employment: Employment,
    pub subsidy: bool,
    pub suppl_ins: bool,
    pub deductible: Deductible,
    pub plan_type: PlanType,
    pub visits: u32,
    /// 1 (very good) to 5 (very bad).
    pub self_health: u8,
    pub illness: bool,
    pub chronic: bool,
    pub smoke: bool,
    pub phys_act: bool,
    /// 0 to 10.
    pub med_need: u8,
    /// Values of the extra numeric columns, aligned with [`Panel::extra_columns`].
    pub extra: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Panel {
    pub extra_columns: Vec<String>,
    pub records: Vec<PanelRecord>,
}

/// A rejected row with the stage and reason that removed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedRow {
    pub stage: &'static str,
    /// CSV line, for rows rejected at ingest.
    pub line: Option<usize>,
    pub person_id: Option<u64>,
    pub year: Option<i32>,
    pub reason: String,
}

impl DroppedRow {
    fn of(stage: &'static str, record: &PanelRecord, reason: impl Into<String>) -> Self {
        DroppedRow { stage, line: None, person_id: Some(record.person_id), year: Some(record.year), reason: reason.into() }
    }
}

/// Row counts of one stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageCount {
    pub stage: &'static str,
    pub input: usize,
    pub output: usize,
    pub dropped: BTreeMap<String, usize>,
}

impl StageCount {
    pub fn new(stage: &'static str, input: usize, output: usize, dropped: &[DroppedRow]) -> Self {
        let mut counts = BTreeMap::new();
        for d in dropped {
            *counts.entry(d.reason.clone()).or_insert(0) += 1;
        }
        StageCount { stage, input, output, dropped: counts }
    }

    pub fn balanced(&self) -> bool {
        self.input == self.output + self.dropped.values().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub panel: Panel,
    pub dropped: Vec<DroppedRow>,
    pub count: StageCount,
}

fn is_missing(raw: &str) -> bool {
    matches!(raw, "" | "NA" | "." | "na")
}

/// Reads the panel CSV. The header must start with [`PANEL_COLUMNS`];
/// further columns are kept as extra numeric columns. Rows with missing or
/// invalid values, age below 26 or a repeated `(person_id, year)` are
/// dropped with a reason of the form `missing:<col>`, `invalid:<col>`,
/// `age<26` or `duplicate`.
pub fn ingest_panel_csv<R: Read>(source: R) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(source);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| PipelineError::Malformed { line: 1, message: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.len() < PANEL_COLUMNS.len() || header[..PANEL_COLUMNS.len()] != PANEL_COLUMNS {
        return Err(PipelineError::Malformed {
            line: 1,
            message: format!("header must start with {}", PANEL_COLUMNS.join(",")),
        });
    }
    let extra_columns = header[PANEL_COLUMNS.len()..].to_vec();
    let mut seen_names: HashSet<&str> = PANEL_COLUMNS.iter().copied().collect();
    for name in &extra_columns {
        if name.is_empty() || !seen_names.insert(name) {
            return Err(PipelineError::Malformed { line: 1, message: format!("bad or repeated column name {name:?}") });
        }
    }

    let mut records = Vec::new();
    let mut dropped = Vec::new();
    let mut keys = HashSet::new();
    let mut input = 0;
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| PipelineError::Malformed { line, message: e.to_string() })?;
        if row.len() != header.len() {
            return Err(PipelineError::Malformed {
                line,
                message: format!("expected {} fields, found {}", header.len(), row.len()),
            });
        }
        input += 1;
        let fields: Vec<&str> = row.iter().map(str::trim).collect();
        match parse_record(&fields, &extra_columns) {
            Ok(record) if record.age < MIN_AGE => dropped.push(DroppedRow { line: Some(line), ..DroppedRow::of("ingest", &record, "age<26") }),
            Ok(record) => {
                if keys.insert((record.person_id, record.year)) {
                    records.push(record);
                } else {
                    dropped.push(DroppedRow { line: Some(line), ..DroppedRow::of("ingest", &record, "duplicate") });
                }
            }
            Err(reason) => dropped.push(DroppedRow {
                stage: "ingest",
                line: Some(line),
                person_id: fields[0].parse().ok(),
                year: fields[1].parse().ok(),
                reason,
            }),
        }
    }
    let count = StageCount::new("ingest", input, records.len(), &dropped);
    Ok(Ingested { panel: Panel { extra_columns, records }, dropped, count })
}

fn parse_record(fields: &[&str], extra_columns: &[String]) -> std::result::Result<PanelRecord, String> {
    if let Some(j) = fields.iter().position(|f| is_missing(f)) {
        let name = PANEL_COLUMNS.get(j).copied().unwrap_or_else(|| extra_columns[j - PANEL_COLUMNS.len()].as_str());
        return Err(format!("missing:{name}"));
    }
    fn get<T: FromStr>(fields: &[&str], j: usize) -> std::result::Result<T, String> {
        fields[j].parse().map_err(|_| format!("invalid:{}", PANEL_COLUMNS[j]))
    }
    fn flag(fields: &[&str], j: usize) -> std::result::Result<bool, String> {
        match fields[j] {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(format!("invalid:{}", PANEL_COLUMNS[j])),
        }
    }
    let invalid = |j: usize| format!("invalid:{}", PANEL_COLUMNS[j]);
    let finite = |j: usize| -> std::result::Result<f64, String> {
        get::<f64>(fields, j).and_then(|v| if v.is_finite() && v >= 0.0 { Ok(v) } else { Err(invalid(j)) })
    };
    let deductible: i64 = get(fields, 11)?;
    let self_health: u8 = get(fields, 14)?;
    let med_need: u8 = get(fields, 19)?;
    let hh_size: u32 = get(fields, 6)?;
    if !(1..=5).contains(&self_health) {
        return Err(invalid(14));
    }
    if med_need > 10 {
        return Err(invalid(19));
    }
    if hh_size == 0 {
        return Err(invalid(6));
    }
    let extra = fields[PANEL_COLUMNS.len()..]
        .iter()
        .zip(extra_columns)
        .map(|(f, name)| f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| format!("invalid:{name}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(PanelRecord {
        person_id: get(fields, 0)?,
        year: get(fields, 1)?,
        canton: fields[2].parse().map_err(|_| invalid(2))?,
        age: get(fields, 3)?,
        gender: get(fields, 4)?,
        educ_years: finite(5)?,
        hh_size,
        income_pm: finite(7)?,
        employment: fields[8].parse().map_err(|_| invalid(8))?,
        subsidy: flag(fields, 9)?,
        suppl_ins: flag(fields, 10)?,
        deductible: Deductible::new(deductible).map_err(|_| invalid(11))?,
        plan_type: fields[12].parse().map_err(|_| invalid(12))?,
        visits: get(fields, 13)?,
        self_health,
        illness: flag(fields, 15)?,
        chronic: flag(fields, 16)?,
        smoke: flag(fields, 17)?,
        phys_act: flag(fields, 18)?,
        med_need,
        extra,
    })
}

fn record_fields(r: &PanelRecord) -> [String; 20] {
    let b = |v: bool| if v { "1".to_string() } else { "0".to_string() };
    [
        r.person_id.to_string(),
        r.year.to_string(),
        r.canton.code().to_string(),
        r.age.to_string(),
        r.gender.to_string(),
        r.educ_years.to_string(),
        r.hh_size.to_string(),
        r.income_pm.to_string(),
        r.employment.code().to_string(),
        b(r.subsidy),
        b(r.suppl_ins),
        r.deductible.francs().to_string(),
        r.plan_type.code().to_string(),
        r.visits.to_string(),
        r.self_health.to_string(),
        b(r.illness),
        b(r.chronic),
        b(r.smoke),
        b(r.phys_act),
        r.med_need.to_string(),
    ]
}

fn out_err(e: impl fmt::Display) -> PipelineError {
    PipelineError::Output(e.to_string())
}

/// Writes a panel in the input schema; [`ingest_panel_csv`] reads it back
/// unchanged.
pub fn write_panel_csv<W: Write>(panel: &Panel, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let header: Vec<&str> = PANEL_COLUMNS.iter().copied().chain(panel.extra_columns.iter().map(String::as_str)).collect();
    w.write_record(&header).map_err(out_err)?;
    for r in &panel.records {
        let mut row: Vec<String> = record_fields(r).into();
        row.extend(r.extra.iter().map(f64::to_string));
        w.write_record(&row).map_err(out_err)?;
    }
    w.flush().map_err(out_err)
}

pub fn write_dropped_csv<W: Write>(dropped: &[DroppedRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["stage", "line", "person_id", "year", "reason"]).map_err(out_err)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for d in dropped {
        w.write_record([
            d.stage.to_string(),
            opt(d.line.map(|v| v.to_string())),
            opt(d.person_id.map(|v| v.to_string())),
            opt(d.year.map(|v| v.to_string())),
            d.reason.clone(),
        ])
        .map_err(out_err)?;
    }
    w.flush().map_err(out_err)
}

/// Deductible change between consecutive years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SwitchingGroup {
    NoSwitch,
    /// Drop of 1000 CHF or more.
    StrongDrop,
    /// Drop of 200 to 700 CHF.
    MildDrop,
    MildIncrease,
    StrongIncrease,
}

impl SwitchingGroup {
    pub fn code(self) -> &'static str {
        match self {
            SwitchingGroup::NoSwitch => "no_switch",
            SwitchingGroup::StrongDrop => "strong_drop",
            SwitchingGroup::MildDrop => "mild_drop",
            SwitchingGroup::MildIncrease => "mild_increase",
            SwitchingGroup::StrongIncrease => "strong_increase",
        }
    }
}

pub fn switching_group(ded_t: i64, ded_prev: i64) -> Result<SwitchingGroup> {
    let diff = Deductible::new(ded_t)?.francs() - Deductible::new(ded_prev)?.francs();
    Ok(match diff {
        0 => SwitchingGroup::NoSwitch,
        d if d <= -1000 => SwitchingGroup::StrongDrop,
        -700..=-200 => SwitchingGroup::MildDrop,
        200..=700 => SwitchingGroup::MildIncrease,
        d if d >= 1000 => SwitchingGroup::StrongIncrease,
        // menu steps are multiples of 200 or 500 and never land in the gaps
        d => unreachable!("menu difference {d} outside every band"),
    })
}

/// New illness: reported this year and not the year before.
pub fn health_shock(current: bool, lagged: Option<bool>) -> Result<bool> {
    let lagged = lagged.ok_or(PipelineError::MissingLag)?;
    Ok(current && !lagged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TreatmentSide {
    Lowest,
    Highest,
}

impl TreatmentSide {
    pub fn code(self) -> &'static str {
        match self {
            TreatmentSide::Lowest => "lowest",
            TreatmentSide::Highest => "highest",
        }
    }

    pub fn deductible(self) -> Deductible {
        match self {
            TreatmentSide::Lowest => Deductible::LOWEST,
            TreatmentSide::Highest => Deductible::HIGHEST,
        }
    }
}

impl FromStr for TreatmentSide {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lowest" => Ok(TreatmentSide::Lowest),
            "highest" => Ok(TreatmentSide::Highest),
            other => Err(format!("treatment side must be lowest or highest, got {other:?}")),
        }
    }
}

/// `D = 1{deductible = 300}` on the lowest side, `1{deductible = 2500}` on
/// the highest.
pub fn treatment_indicator(deductible: i64, side: TreatmentSide) -> Result<bool> {
    Ok(Deductible::new(deductible)? == side.deductible())
}

/// Year `t` record paired with its `t − 1` record, plus derived variables.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationRow {
    pub current: PanelRecord,
    pub previous: PanelRecord,
    pub health_shock: bool,
    /// `ln(visits)`, present iff `visits ≥ 1`.
    pub log_visits: Option<f64>,
    pub switching: SwitchingGroup,
    /// Set by [`join_premiums`].
    pub avg_premium: Option<f64>,
    /// All [`STABLE_FIELDS`] agree between the two years.
    pub stable: bool,
}

/// Fields that must agree across years for [`stable_subsample`].
pub const STABLE_FIELDS: [&str; 10] =
    ["canton", "subsidy", "self_health", "illness", "smoke", "chronic", "phys_act", "med_need", "employment", "hh_size"];

fn first_unstable_field(a: &PanelRecord, b: &PanelRecord) -> Option<&'static str> {
    let same = [
        a.canton == b.canton,
        a.subsidy == b.subsidy,
        a.self_health == b.self_health,
        a.illness == b.illness,
        a.smoke == b.smoke,
        a.chronic == b.chronic,
        a.phys_act == b.phys_act,
        a.med_need == b.med_need,
        a.employment == b.employment,
        a.hh_size == b.hh_size,
    ];
    same.iter().position(|s| !s).map(|j| STABLE_FIELDS[j])
}

impl EstimationRow {
    pub fn treatment(&self, side: TreatmentSide) -> bool {
        self.current.deductible == side.deductible()
    }
}

/// Pairs each record with the same person's record from the previous year.
/// Records without one (first waves, gap years) are dropped as `no_lag`
/// and serve only as lag sources. Output is ordered by `(person, year)`.
pub fn build_lags(records: &[PanelRecord]) -> (Vec<EstimationRow>, Vec<DroppedRow>) {
    let mut sorted: Vec<&PanelRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.person_id, r.year));
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for (i, r) in sorted.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| sorted[j]).filter(|p| p.person_id == r.person_id && p.year + 1 == r.year);
        let Some(prev) = prev else {
            dropped.push(DroppedRow::of("lags", r, "no_lag"));
            continue;
        };
        let shock = health_shock(r.illness, Some(prev.illness)).expect("lag present");
        let switching = switching_group(r.deductible.francs(), prev.deductible.francs()).expect("menu deductibles");
        rows.push(EstimationRow {
            current: (*r).clone(),
            previous: prev.clone(),
            health_shock: shock,
            log_visits: (r.visits >= 1).then(|| f64::from(r.visits).ln()),
            switching,
            avg_premium: None,
            stable: first_unstable_field(r, prev).is_none(),
        });
    }
    (rows, dropped)
}

/// Keeps rows with at least one doctor visit; zero-visit rows are dropped
/// as `zero_visits`.
pub fn intensive_margin(rows: Vec<EstimationRow>) -> (Vec<EstimationRow>, Vec<DroppedRow>) {
    let (kept, zero): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| r.current.visits >= 1);
    let dropped = zero.iter().map(|r| DroppedRow::of("intensive_margin", &r.current, "zero_visits")).collect();
    (kept, dropped)
}

/// Premium cell of a row: its canton, deductible and plan type in the adult
/// age group.
pub fn premium_cell(record: &PanelRecord) -> PremiumCell {
    PremiumCell {
        canton: record.canton,
        age_group: AgeGroup::Adult,
        deductible: record.deductible,
        plan_type: record.plan_type,
    }
}

/// Attaches the cell-average premium; rows whose cell is absent are dropped
/// as `missing_premium_cell`.
pub fn join_premiums(rows: Vec<EstimationRow>, table: &PremiumTable) -> (Vec<EstimationRow>, Vec<DroppedRow>) {
    let mut kept = Vec::with_capacity(rows.len());
    let mut dropped = Vec::new();
    for mut row in rows {
        match table.average_market_premium(premium_cell(&row.current)) {
            Ok(p) => {
                row.avg_premium = Some(p);
                kept.push(row);
            }
            Err(_) => dropped.push(DroppedRow::of("join_premiums", &row.current, "missing_premium_cell")),
        }
    }
    (kept, dropped)
}

/// Keeps every row of persons whose `year` row is stable against the year
/// before. Other persons are dropped as `unstable:<first differing field>`
/// or, without a `year` row, `unstable:no_<year>`.
pub fn stable_subsample(rows: Vec<EstimationRow>, year: i32) -> (Vec<EstimationRow>, Vec<DroppedRow>) {
    let mut verdict: BTreeMap<u64, std::result::Result<(), String>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.current.year == year) {
        let v = match first_unstable_field(&r.current, &r.previous) {
            None => Ok(()),
            Some(f) => Err(format!("unstable:{f}")),
        };
        verdict.insert(r.current.person_id, v);
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for r in rows {
        match verdict.get(&r.current.person_id) {
            Some(Ok(())) => kept.push(r),
            Some(Err(reason)) => dropped.push(DroppedRow::of("stable_subsample", &r.current, reason.clone())),
            None => dropped.push(DroppedRow::of("stable_subsample", &r.current, format!("unstable:no_{year}"))),
        }
    }
    (kept, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrataDimension {
    HouseholdSize,
    Gender,
    Subsidy,
    Education,
}

impl FromStr for StrataDimension {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "household_size" => Ok(StrataDimension::HouseholdSize),
            "gender" => Ok(StrataDimension::Gender),
            "subsidy" => Ok(StrataDimension::Subsidy),
            "education" => Ok(StrataDimension::Education),
            other => Err(PipelineError::UnknownStratum(other.to_string())),
        }
    }
}

impl StrataDimension {
    pub fn code(self) -> &'static str {
        match self {
            StrataDimension::HouseholdSize => "household_size",
            StrataDimension::Gender => "gender",
            StrataDimension::Subsidy => "subsidy",
            StrataDimension::Education => "education",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    /// `dimension=band`, e.g. `household_size=3+`.
    pub name: String,
    pub rows: Vec<EstimationRow>,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Partitions rows into named strata. Household size uses bands `1`, `2`
/// and `3+`; education splits at the sample median of years into `low`
/// (at or below) and `high`. Fixed bands are always listed, even when
/// empty.
pub fn stratify(rows: &[EstimationRow], dimension: StrataDimension) -> Vec<Stratum> {
    let bands: Vec<String> = match dimension {
        StrataDimension::HouseholdSize => vec!["1".into(), "2".into(), "3+".into()],
        StrataDimension::Subsidy => vec!["0".into(), "1".into()],
        StrataDimension::Education => vec!["low".into(), "high".into()],
        StrataDimension::Gender => {
            rows.iter().map(|r| r.current.gender).collect::<BTreeSet<_>>().into_iter().map(|g| g.to_string()).collect()
        }
    };
    let cut = median(&mut rows.iter().map(|r| r.current.educ_years).collect::<Vec<_>>()).unwrap_or(0.0);
    let band_of = |r: &EstimationRow| -> String {
        match dimension {
            StrataDimension::HouseholdSize => match r.current.hh_size {
                1 => "1".into(),
                2 => "2".into(),
                _ => "3+".into(),
            },
            StrataDimension::Gender => r.current.gender.to_string(),
            StrataDimension::Subsidy => if r.current.subsidy { "1" } else { "0" }.into(),
            StrataDimension::Education => if r.current.educ_years <= cut { "low" } else { "high" }.into(),
        }
    };
    let mut groups: BTreeMap<String, Vec<EstimationRow>> = bands.iter().map(|b| (b.clone(), Vec::new())).collect();
    for r in rows {
        groups.get_mut(&band_of(r)).expect("band listed").push(r.clone());
    }
    bands
        .into_iter()
        .map(|b| Stratum { name: format!("{}={}", dimension.code(), b), rows: groups.remove(&b).unwrap_or_default() })
        .collect()
}

/// Rows of the stratum named `dimension=band`; other rows are dropped as
/// `outside_stratum`.
pub fn select_stratum(rows: Vec<EstimationRow>, name: &str) -> Result<(Vec<EstimationRow>, Vec<DroppedRow>)> {
    let (dim, _) = name.split_once('=').ok_or_else(|| PipelineError::UnknownStratum(name.to_string()))?;
    let dimension: StrataDimension = dim.parse().map_err(|_| PipelineError::UnknownStratum(name.to_string()))?;
    let strata = stratify(&rows, dimension);
    let keep = strata.into_iter().find(|s| s.name == name).ok_or_else(|| PipelineError::UnknownStratum(name.to_string()))?;
    let kept_keys: HashSet<(u64, i32)> = keep.rows.iter().map(|r| (r.current.person_id, r.current.year)).collect();
    let dropped = rows
        .iter()
        .filter(|r| !kept_keys.contains(&(r.current.person_id, r.current.year)))
        .map(|r| DroppedRow::of("stratum", &r.current, "outside_stratum"))
        .collect();
    Ok((keep.rows, dropped))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleOptions {
    /// Restrict to positive visit counts and use them on the log scale.
    pub intensive_margin: bool,
    /// Restrict to persons stable between `year − 1` and `year`.
    pub stable_year: Option<i32>,
    pub stratum: Option<String>,
    /// Keep only rows of these years.
    pub years: Option<Vec<i32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub extra_columns: Vec<String>,
    pub rows: Vec<EstimationRow>,
    pub dropped: Vec<DroppedRow>,
    pub ledger: Vec<StageCount>,
}

/// Runs the stages after ingest. The ingest drops and ledger entry are
/// carried over.
pub fn prepare_sample(ingested: Ingested, premiums: Option<&PremiumTable>, options: &SampleOptions) -> Result<PreparedSample> {
    let Ingested { panel, mut dropped, count } = ingested;
    let mut ledger = vec![count];
    let mut stage = |name: &'static str, input: usize, rows: Vec<EstimationRow>, d: Vec<DroppedRow>, dropped: &mut Vec<DroppedRow>| {
        ledger.push(StageCount::new(name, input, rows.len(), &d));
        dropped.extend(d);
        rows
    };
    let n = panel.records.len();
    let (rows, d) = build_lags(&panel.records);
    let mut rows = stage("lags", n, rows, d, &mut dropped);
    if let Some(years) = &options.years {
        let n = rows.len();
        let (kept, out): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| years.contains(&r.current.year));
        let d = out.iter().map(|r| DroppedRow::of("years", &r.current, "outside_years")).collect();
        rows = stage("years", n, kept, d, &mut dropped);
    }
    if options.intensive_margin {
        let n = rows.len();
        let (kept, d) = intensive_margin(rows);
        rows = stage("intensive_margin", n, kept, d, &mut dropped);
    }
    if let Some(table) = premiums {
        let n = rows.len();
        let (kept, d) = join_premiums(rows, table);
        rows = stage("join_premiums", n, kept, d, &mut dropped);
    }
    if let Some(year) = options.stable_year {
        let n = rows.len();
        let (kept, d) = stable_subsample(rows, year);
        rows = stage("stable_subsample", n, kept, d, &mut dropped);
    }
    if let Some(name) = &options.stratum {
        let n = rows.len();
        let (kept, d) = select_stratum(rows, name)?;
        rows = stage("stratum", n, kept, d, &mut dropped);
    }
    Ok(PreparedSample { extra_columns: panel.extra_columns, rows, dropped, ledger })
}

fn flag(v: bool) -> f64 {
    if v {
        1.0
    } else {
        0.0
    }
}

/// Numeric value of a named column for one row: panel columns, derived
/// columns (`lag_*`, `health_shock`, `log_visits`, `avg_premium`) or an
/// extra column. `Ok(None)` means the value is absent for this row.
pub fn column_value(row: &EstimationRow, extra_columns: &[String], name: &str) -> Result<Option<f64>> {
    let c = &row.current;
    let p = &row.previous;
    let v = match name {
        "year" => f64::from(c.year),
        "age" => f64::from(c.age),
        "gender" => f64::from(c.gender),
        "educ_years" => c.educ_years,
        "hh_size" => f64::from(c.hh_size),
        "income_pm" => c.income_pm,
        "unemployed" => flag(c.employment == Employment::Unemployed),
        "nilf" => flag(c.employment == Employment::NotInLabourForce),
        "subsidy" => flag(c.subsidy),
        "suppl_ins" => flag(c.suppl_ins),
        "managed_care" => flag(c.plan_type == PlanType::Managed),
        "visits" => f64::from(c.visits),
        "self_health" => f64::from(c.self_health),
        "illness" => flag(c.illness),
        "chronic" => flag(c.chronic),
        "smoke" => flag(c.smoke),
        "phys_act" => flag(c.phys_act),
        "med_need" => f64::from(c.med_need),
        "lag_visits" => f64::from(p.visits),
        "lag_self_health" => f64::from(p.self_health),
        "lag_chronic" => flag(p.chronic),
        "lag_smoke" => flag(p.smoke),
        "lag_phys_act" => flag(p.phys_act),
        "lag_med_need" => f64::from(p.med_need),
        "health_shock" => flag(row.health_shock),
        "log_visits" => return Ok(row.log_visits),
        "avg_premium" => return Ok(row.avg_premium),
        other => {
            let j = extra_columns.iter().position(|e| e == other).ok_or_else(|| PipelineError::UnknownColumn(other.into()))?;
            c.extra[j]
        }
    };
    Ok(Some(v))
}

/// Columns feeding the estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub outcome: String,
    pub instruments: Vec<String>,
    pub covariates: Vec<String>,
    /// Adds canton indicators; the alphabetically first canton present in
    /// the sample is the reference.
    pub canton_effects: bool,
    /// `canton` or the name of an integer-valued extra column.
    pub cluster: String,
    pub side: TreatmentSide,
}

/// Builds the estimation matrices. A missing value in any requested column
/// is an error naming the column and row.
pub fn design_matrix(rows: &[EstimationRow], extra_columns: &[String], spec: &DesignSpec) -> Result<EstimationData> {
    if rows.is_empty() {
        return Err(PipelineError::EmptySample);
    }
    let n = rows.len();
    let fetch = |r: &EstimationRow, name: &str| -> Result<f64> {
        column_value(r, extra_columns, name)?.ok_or_else(|| PipelineError::MissingValue {
            column: name.to_string(),
            person_id: r.current.person_id,
            year: r.current.year,
        })
    };
    let outcome = rows.iter().map(|r| fetch(r, &spec.outcome)).collect::<Result<Vec<_>>>()?;

    let mut covariate_names = spec.covariates.clone();
    let mut cov_cols: Vec<Vec<f64>> =
        spec.covariates.iter().map(|c| rows.iter().map(|r| fetch(r, c)).collect()).collect::<Result<_>>()?;
    if spec.canton_effects {
        let present: BTreeSet<Canton> = rows.iter().map(|r| r.current.canton).collect();
        for &canton in present.iter().skip(1) {
            covariate_names.push(format!("canton_{}", canton.code()));
            cov_cols.push(rows.iter().map(|r| flag(r.current.canton == canton)).collect());
        }
    }
    let inst_cols: Vec<Vec<f64>> =
        spec.instruments.iter().map(|c| rows.iter().map(|r| fetch(r, c)).collect()).collect::<Result<_>>()?;

    let clusters = rows
        .iter()
        .map(|r| {
            if spec.cluster == "canton" {
                Ok(r.current.canton.index())
            } else {
                let v = fetch(r, &spec.cluster)?;
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(PipelineError::UnknownColumn(format!("{} (cluster ids must be non-negative integers)", spec.cluster)));
                }
                Ok(v as usize)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimationData::new(
        DVector::from_vec(outcome),
        rows.iter().map(|r| r.treatment(spec.side)).collect(),
        DMatrix::from_fn(n, cov_cols.len(), |i, j| cov_cols[j][i]),
        covariate_names,
        DMatrix::from_fn(n, inst_cols.len(), |i, j| inst_cols[j][i]),
        spec.instruments.clone(),
        clusters,
    )?)
}

/// Writes estimation rows: panel columns, extra columns, then
/// [`DERIVED_COLUMNS`]. Absent values are empty fields.
pub fn write_estimation_csv<W: Write>(rows: &[EstimationRow], extra_columns: &[String], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let header: Vec<&str> = PANEL_COLUMNS
        .iter()
        .copied()
        .chain(extra_columns.iter().map(String::as_str))
        .chain(DERIVED_COLUMNS.iter().copied())
        .collect();
    w.write_record(&header).map_err(out_err)?;
    let b = |v: bool| if v { "1".to_string() } else { "0".to_string() };
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut out: Vec<String> = record_fields(&r.current).into();
        out.extend(r.current.extra.iter().map(f64::to_string));
        let p = &r.previous;
        out.extend([
            p.visits.to_string(),
            p.self_health.to_string(),
            b(p.chronic),
            b(p.smoke),
            b(p.phys_act),
            p.med_need.to_string(),
            b(r.health_shock),
            opt(r.log_visits),
            b(r.treatment(TreatmentSide::Lowest)),
            b(r.treatment(TreatmentSide::Highest)),
            opt(r.avg_premium),
            r.switching.code().to_string(),
            b(r.stable),
        ]);
        w.write_record(&out).map_err(out_err)?;
    }
    w.flush().map_err(out_err)
}
