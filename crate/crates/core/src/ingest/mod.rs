//! Input domain types and the recoding rules applied to raw survey answers.

mod csvio;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cell::{CellKey, NUM_CELLS};
use crate::error::{Error, Result};

pub use csvio::{
    load_benchmarks, load_movers, load_poststrat, load_replicates, read_benchmarks, read_movers,
    read_poststrat, read_replicates,
    write_benchmarks, write_movers, write_poststrat, MoverLoad,
};

/// Census area label (a PUMA code).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AreaId(pub String);

impl AreaId {
    pub fn new(s: impl Into<String>) -> Self {
        AreaId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AreaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AreaId {
    fn from(s: &str) -> Self {
        AreaId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GeographyVersion {
    #[serde(rename = "v2010")]
    V2010,
    #[serde(rename = "v2020")]
    V2020,
}

impl GeographyVersion {
    pub fn token(self) -> &'static str {
        match self {
            GeographyVersion::V2010 => "v2010",
            GeographyVersion::V2020 => "v2020",
        }
    }
}

impl fmt::Display for GeographyVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for GeographyVersion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v2010" => Ok(GeographyVersion::V2010),
            "v2020" => Ok(GeographyVersion::V2020),
            _ => Err(Error::InvalidInput(format!(
                "unknown geography_version '{s}' (expected v2010 or v2020)"
            ))),
        }
    }
}

/// Two-year move cohort, stored as an ordinal: 0 is 2016-2017, 1 is
/// 2018-2019, and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cohort(pub u8);

impl Cohort {
    const FIRST_END_YEAR: u16 = 2017;

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn end_year(self) -> u16 {
        Self::FIRST_END_YEAR + 2 * self.0 as u16
    }

    pub fn label(self) -> String {
        format!("{}-{}", self.end_year() - 1, self.end_year())
    }

    /// Area labels follow the decennial census in force for the ACS year
    /// closing the cohort: cohorts ending before 2022 use 2010 areas.
    pub fn geography(self) -> GeographyVersion {
        if self.end_year() < 2022 {
            GeographyVersion::V2010
        } else {
            GeographyVersion::V2020
        }
    }

    fn ending_in(year: u16) -> Option<Cohort> {
        if year < Self::FIRST_END_YEAR || (year - Self::FIRST_END_YEAR) % 2 != 0 {
            return None;
        }
        u8::try_from((year - Self::FIRST_END_YEAR) / 2).ok().map(Cohort)
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Survey wave, identified by its (odd) collection year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SurveyWave(pub u16);

impl SurveyWave {
    pub fn new(year: u16) -> Result<Self> {
        if Cohort::ending_in(year).is_none() {
            return Err(Error::InvalidInput(format!(
                "survey wave {year} is not a biennial wave year (2017, 2019, 2021, ...)"
            )));
        }
        Ok(SurveyWave(year))
    }

    pub fn year(self) -> u16 {
        self.0
    }

    /// Cohorts a mover interviewed in this wave can belong to: the cohort
    /// ending in the wave year and the one before it.
    pub fn cohorts(self) -> Vec<Cohort> {
        let current = Cohort::ending_in(self.0).expect("validated wave");
        let mut out = Vec::with_capacity(2);
        if current.0 > 0 {
            out.push(Cohort(current.0 - 1));
        }
        out.push(current);
        out
    }
}

impl fmt::Display for SurveyWave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Answer to "how long have you lived at this address".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DurationCategory {
    LessThanOneYear,
    OneToTwoYears,
    TwoToThreeYears,
    ThreeToFiveYears,
    MoreThanFiveYears,
}

impl DurationCategory {
    pub const ALL: [DurationCategory; 5] = [
        DurationCategory::LessThanOneYear,
        DurationCategory::OneToTwoYears,
        DurationCategory::TwoToThreeYears,
        DurationCategory::ThreeToFiveYears,
        DurationCategory::MoreThanFiveYears,
    ];

    pub fn token(self) -> &'static str {
        match self {
            DurationCategory::LessThanOneYear => "lt1y",
            DurationCategory::OneToTwoYears => "1to2y",
            DurationCategory::TwoToThreeYears => "2to3y",
            DurationCategory::ThreeToFiveYears => "3to5y",
            DurationCategory::MoreThanFiveYears => "gt5y",
        }
    }
}

impl FromStr for DurationCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DurationCategory::ALL
            .into_iter()
            .find(|d| d.token() == s)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown duration_category '{s}' (expected lt1y, 1to2y, 2to3y, 3to5y or gt5y)"
                ))
            })
    }
}

/// Maps a wave and residence duration to a move cohort; `None` means the
/// household is excluded (lived at the address more than five years, or the
/// implied cohort precedes the first modeled cohort).
///
/// Under two years maps to the cohort ending in the wave year; two to three
/// and three to five years are merged into the cohort before it.
pub fn assign_cohort(wave: SurveyWave, duration: DurationCategory) -> Option<Cohort> {
    let current = Cohort::ending_in(wave.year())?;
    match duration {
        DurationCategory::LessThanOneYear | DurationCategory::OneToTwoYears => Some(current),
        DurationCategory::TwoToThreeYears | DurationCategory::ThreeToFiveYears => {
            current.0.checked_sub(1).map(Cohort)
        }
        DurationCategory::MoreThanFiveYears => None,
    }
}

/// The closed list of reasons-for-moving answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ReasonCode {
    RentIncrease,
    IncomeChange,
    CommunityLeft,
    HouseholdChange,
    NeededMoreSpace,
    NeededLessSpace,
    BetterCommute,
    Amenities,
    Telework,
    School,
    Safety,
    UpgradeHome,
    ForcedToMove,
    Other,
    PreferNotToAnswer,
}

impl ReasonCode {
    pub const ALL: [ReasonCode; 15] = [
        ReasonCode::RentIncrease,
        ReasonCode::IncomeChange,
        ReasonCode::CommunityLeft,
        ReasonCode::HouseholdChange,
        ReasonCode::NeededMoreSpace,
        ReasonCode::NeededLessSpace,
        ReasonCode::BetterCommute,
        ReasonCode::Amenities,
        ReasonCode::Telework,
        ReasonCode::School,
        ReasonCode::Safety,
        ReasonCode::UpgradeHome,
        ReasonCode::ForcedToMove,
        ReasonCode::Other,
        ReasonCode::PreferNotToAnswer,
    ];

    pub fn token(self) -> &'static str {
        match self {
            ReasonCode::RentIncrease => "rent_increase",
            ReasonCode::IncomeChange => "income_change",
            ReasonCode::CommunityLeft => "community_left",
            ReasonCode::HouseholdChange => "household_change",
            ReasonCode::NeededMoreSpace => "needed_more_space",
            ReasonCode::NeededLessSpace => "needed_less_space",
            ReasonCode::BetterCommute => "better_commute",
            ReasonCode::Amenities => "amenities",
            ReasonCode::Telework => "telework",
            ReasonCode::School => "school",
            ReasonCode::Safety => "safety",
            ReasonCode::UpgradeHome => "upgrade_home",
            ReasonCode::ForcedToMove => "forced_to_move",
            ReasonCode::Other => "other",
            ReasonCode::PreferNotToAnswer => "prefer_not_to_answer",
        }
    }

    /// Cost increases, income loss and forced moves count as displacement.
    pub fn is_displacing(self) -> bool {
        matches!(
            self,
            ReasonCode::RentIncrease | ReasonCode::IncomeChange | ReasonCode::ForcedToMove
        )
    }
}

impl FromStr for ReasonCode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ReasonCode::ALL
            .into_iter()
            .find(|r| r.token() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown reason code '{s}'")))
    }
}

/// `Some(true)` if any displacing reason was selected. A lone
/// "prefer not to answer" is nonresponse and yields `None`.
pub fn recode_displacement(reasons: &BTreeSet<ReasonCode>) -> Option<bool> {
    if reasons.len() == 1 && reasons.contains(&ReasonCode::PreferNotToAnswer) {
        return None;
    }
    Some(reasons.iter().any(|r| r.is_displacing()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoverRecord {
    pub household_id: String,
    pub survey_wave: SurveyWave,
    pub area: AreaId,
    pub geography: GeographyVersion,
    pub cohort: Cohort,
    pub displaced: bool,
    pub cell: CellKey,
}

impl MoverRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.survey_wave.cohorts().contains(&self.cohort) {
            return Err(Error::InvalidInput(format!(
                "household {}: cohort {} cannot be observed in wave {}",
                self.household_id,
                self.cohort.label(),
                self.survey_wave
            )));
        }
        if self.geography != self.cohort.geography() {
            return Err(Error::InvalidInput(format!(
                "household {}: cohort {} uses {} areas, record says {}",
                self.household_id,
                self.cohort.label(),
                self.cohort.geography(),
                self.geography
            )));
        }
        Ok(())
    }
}

/// Population counts per (area, cohort), dense over the 900 cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PostStratTable {
    entries: BTreeMap<(AreaId, Cohort), Vec<f64>>,
}

impl PostStratTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a count; fails on a duplicate (area, cohort, cell) or an invalid count.
    pub fn insert(&mut self, area: AreaId, cohort: Cohort, cell: CellKey, count: f64) -> Result<()> {
        if !count.is_finite() || count < 0.0 {
            return Err(Error::InvalidInput(format!(
                "count {count} for area {area}, cohort {cohort} must be finite and nonnegative"
            )));
        }
        let row = self
            .entries
            .entry((area.clone(), cohort))
            .or_insert_with(|| vec![f64::NAN; NUM_CELLS]);
        let slot = &mut row[cell.index()];
        if !slot.is_nan() {
            return Err(Error::InvalidInput(format!(
                "duplicate entry for area {area}, cohort {cohort}, cell {cell}"
            )));
        }
        *slot = count;
        Ok(())
    }

    /// Replaces unset cells with zero and checks every (area, cohort) has a
    /// positive total.
    pub fn finish(mut self) -> Result<Self> {
        for ((area, cohort), row) in self.entries.iter_mut() {
            for v in row.iter_mut() {
                if v.is_nan() {
                    *v = 0.0;
                }
            }
            if row.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "area {area}, cohort {cohort} has zero total population"
                )));
            }
        }
        Ok(self)
    }

    /// Builds a table from dense rows.
    pub fn from_rows(rows: impl IntoIterator<Item = ((AreaId, Cohort), Vec<f64>)>) -> Result<Self> {
        let mut t = PostStratTable::new();
        for ((area, cohort), row) in rows {
            if row.len() != NUM_CELLS {
                return Err(Error::InvalidInput(format!(
                    "area {area}, cohort {cohort}: expected {NUM_CELLS} counts, got {}",
                    row.len()
                )));
            }
            for (j, &c) in row.iter().enumerate() {
                if c != 0.0 {
                    t.insert(area.clone(), cohort, CellKey::from_index(j).unwrap(), c)?;
                }
            }
            t.entries
                .entry((area, cohort))
                .or_insert_with(|| vec![f64::NAN; NUM_CELLS]);
        }
        t.finish()
    }

    pub fn counts(&self, area: &AreaId, cohort: Cohort) -> Option<&[f64]> {
        self.entries.get(&(area.clone(), cohort)).map(|v| v.as_slice())
    }

    pub fn keys(&self) -> impl Iterator<Item = &(AreaId, Cohort)> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(AreaId, Cohort), &[f64])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total population N_{s,t}.
    pub fn total(&self, area: &AreaId, cohort: Cohort) -> Option<f64> {
        self.counts(area, cohort).map(|c| c.iter().sum())
    }

    pub fn areas(&self, cohort: Cohort) -> Vec<AreaId> {
        self.entries
            .keys()
            .filter(|(_, c)| *c == cohort)
            .map(|(a, _)| a.clone())
            .collect()
    }

    pub fn cohorts(&self) -> BTreeSet<Cohort> {
        self.entries.keys().map(|(_, c)| *c).collect()
    }
}

/// An aggregate survey estimate of the displacement rate for one cohort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTarget {
    pub cohort: Cohort,
    pub estimate: f64,
    pub std_error: f64,
}

impl BenchmarkTarget {
    pub fn new(cohort: Cohort, estimate: f64, std_error: f64) -> Result<Self> {
        if !(estimate > 0.0 && estimate < 1.0) {
            return Err(Error::InvalidInput(format!(
                "benchmark estimate {estimate} for cohort {cohort} must lie in (0, 1)"
            )));
        }
        if !(std_error > 0.0 && std_error.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "benchmark std_error {std_error} for cohort {cohort} must be positive"
            )));
        }
        Ok(BenchmarkTarget {
            cohort,
            estimate,
            std_error,
        })
    }
}
