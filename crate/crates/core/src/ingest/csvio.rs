//! CSV readers and writers for movers, poststratification counts and
//! benchmark targets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use log::{info, warn};

use super::{
    assign_cohort, recode_displacement, AreaId, BenchmarkTarget, Cohort, DurationCategory,
    GeographyVersion, MoverRecord, PostStratTable, ReasonCode, SurveyWave,
};
use crate::benchmark::{ReplicateRow, ReplicateSurvey};
use crate::cell::{CellKey, Covariate, Level, NUM_CELLS};
use crate::error::{Error, Result};

const REASON_PREFIX: &str = "reason_";

/// Result of reading a movers file, with counts of rows set aside.
#[derive(Debug, Clone, Default)]
pub struct MoverLoad {
    pub records: Vec<MoverRecord>,
    pub rows_read: usize,
    pub dropped_missing_outcome: usize,
    pub dropped_missing_covariates: usize,
    pub excluded_by_duration: usize,
}

struct Columns {
    file: String,
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(file: &str, headers: &csv::StringRecord) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, h) in headers.iter().enumerate() {
            if index.insert(h.to_string(), i).is_some() {
                return Err(Error::Schema {
                    file: file.to_string(),
                    message: format!("duplicate column '{h}'"),
                });
            }
        }
        Ok(Columns {
            file: file.to_string(),
            index,
        })
    }

    fn require(&self, names: &[&str]) -> Result<()> {
        let missing: Vec<&str> = names
            .iter()
            .copied()
            .filter(|n| !self.index.contains_key(*n))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema {
                file: self.file.clone(),
                message: format!("missing column(s): {}", missing.join(", ")),
            })
        }
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, name: &str) -> Option<&'r str> {
        self.index
            .get(name)
            .and_then(|&i| rec.get(i))
            .filter(|s| !s.is_empty())
    }
}

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "1" | "true" | "TRUE" | "True" => Some(true),
        "0" | "false" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

fn parse_level<L: Level>(file: &str, row: usize, value: &str) -> Result<L> {
    L::parse(value).ok_or_else(|| {
        let expected: Vec<&str> = L::LEVELS.iter().map(|l| l.token()).collect();
        Error::row(
            file,
            row,
            format!(
                "bad {} level '{value}' (expected one of: {})",
                L::COVARIATE.column(),
                expected.join(", ")
            ),
        )
    })
}

/// Parses the six covariate columns; `Ok(None)` if any is blank.
fn parse_cell(cols: &Columns, rec: &csv::StringRecord, row: usize) -> Result<Option<CellKey>> {
    let f = cols.file.as_str();
    let mut vals = [""; 6];
    for (slot, cov) in vals.iter_mut().zip(Covariate::ALL) {
        match cols.get(rec, cov.column()) {
            Some(v) => *slot = v,
            None => return Ok(None),
        }
    }
    Ok(Some(CellKey {
        household_size: parse_level(f, row, vals[0])?,
        income: parse_level(f, row, vals[1])?,
        vehicles: parse_level(f, row, vals[2])?,
        children: parse_level(f, row, vals[3])?,
        tenure: parse_level(f, row, vals[4])?,
        race: parse_level(f, row, vals[5])?,
    }))
}

fn parse_cohort(file: &str, row: usize, s: &str) -> Result<Cohort> {
    s.parse::<u8>()
        .map(Cohort)
        .map_err(|_| Error::row(file, row, format!("bad cohort '{s}' (expected an ordinal 0, 1, ...)")))
}

fn parse_wave(file: &str, row: usize, s: &str) -> Result<SurveyWave> {
    let year: u16 = s
        .parse()
        .map_err(|_| Error::row(file, row, format!("bad survey_wave '{s}'")))?;
    SurveyWave::new(year).map_err(|e| Error::row(file, row, e.to_string()))
}

fn parse_geo(file: &str, row: usize, s: &str) -> Result<GeographyVersion> {
    s.parse().map_err(|e: Error| Error::row(file, row, e.to_string()))
}

fn parse_real(file: &str, row: usize, column: &str, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::row(file, row, format!("bad {column} value '{s}'")))
}

/// Reads movers in either the pre-recoded form (`cohort`, `displaced`) or the
/// raw form (`duration_category`, `reason_*` flags). Each row must use one
/// form only.
pub fn read_movers<R: Read>(r: R, file: &str) -> Result<MoverLoad> {
    let mut rdr = reader(r);
    let cols = Columns::new(file, rdr.headers()?)?;
    cols.require(&["household_id", "survey_wave", "puma", "geography_version"])?;
    cols.require(&Covariate::ALL.map(|c| c.column()))?;

    let mut reasons: Vec<(ReasonCode, String)> = Vec::new();
    for name in cols.index.keys() {
        if let Some(code) = name.strip_prefix(REASON_PREFIX) {
            let code = code
                .parse::<ReasonCode>()
                .map_err(|_| Error::row(file, 1, format!("unknown reason code '{code}' in column '{name}'")))?;
            reasons.push((code, name.clone()));
        }
    }
    reasons.sort();
    let has_pre = cols.index.contains_key("cohort");
    let has_raw = cols.index.contains_key("duration_category");
    if !has_pre && !has_raw {
        return Err(Error::Schema {
            file: file.to_string(),
            message: "need a 'cohort' or a 'duration_category' column".into(),
        });
    }
    if !cols.index.contains_key("displaced") && reasons.is_empty() {
        return Err(Error::Schema {
            file: file.to_string(),
            message: "need a 'displaced' column or reason_* flag columns".into(),
        });
    }

    let mut out = MoverLoad::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        out.rows_read += 1;

        let cohort_s = cols.get(&rec, "cohort");
        let displaced_s = cols.get(&rec, "displaced");
        let duration_s = cols.get(&rec, "duration_category");
        let mut flags = BTreeSet::new();
        let mut any_flag_value = false;
        for (code, col) in &reasons {
            if let Some(v) = cols.get(&rec, col) {
                any_flag_value = true;
                match parse_bool(v) {
                    Some(true) => {
                        flags.insert(*code);
                    }
                    Some(false) => {}
                    None => return Err(Error::row(file, row, format!("bad flag '{v}' in column '{col}'"))),
                }
            }
        }

        let pre = cohort_s.is_some() || displaced_s.is_some();
        let raw = duration_s.is_some() || any_flag_value;
        if pre && raw {
            return Err(Error::row(
                file,
                row,
                "mixes pre-recoded (cohort/displaced) and raw (duration_category/reason_*) fields",
            ));
        }

        let wave = parse_wave(file, row, cols.get(&rec, "survey_wave").unwrap_or(""))?;
        let geography = parse_geo(file, row, cols.get(&rec, "geography_version").unwrap_or(""))?;
        let household_id = cols
            .get(&rec, "household_id")
            .ok_or_else(|| Error::row(file, row, "missing household_id"))?
            .to_string();
        let area = AreaId::new(
            cols.get(&rec, "puma")
                .ok_or_else(|| Error::row(file, row, "missing puma"))?,
        );

        let (cohort, displaced) = if raw {
            let duration: DurationCategory = duration_s
                .ok_or_else(|| Error::row(file, row, "raw form requires duration_category"))?
                .parse()
                .map_err(|e: Error| Error::row(file, row, e.to_string()))?;
            match assign_cohort(wave, duration) {
                Some(c) => (c, recode_displacement(&flags)),
                None => {
                    out.excluded_by_duration += 1;
                    continue;
                }
            }
        } else {
            let c = parse_cohort(
                file,
                row,
                cohort_s.ok_or_else(|| Error::row(file, row, "pre-recoded form requires cohort"))?,
            )?;
            let d = match displaced_s {
                Some(s) => Some(
                    parse_bool(s)
                        .ok_or_else(|| Error::row(file, row, format!("bad displaced value '{s}'")))?,
                ),
                None => None,
            };
            (c, d)
        };

        let cell = parse_cell(&cols, &rec, row)?;
        let Some(displaced) = displaced else {
            out.dropped_missing_outcome += 1;
            continue;
        };
        let Some(cell) = cell else {
            out.dropped_missing_covariates += 1;
            continue;
        };
        let record = MoverRecord {
            household_id,
            survey_wave: wave,
            area,
            geography,
            cohort,
            displaced,
            cell,
        };
        record
            .validate()
            .map_err(|e| Error::row(file, row, e.to_string()))?;
        out.records.push(record);
    }

    if out.dropped_missing_outcome > 0 {
        warn!("{file}: dropped {} rows with missing displacement", out.dropped_missing_outcome);
    }
    if out.dropped_missing_covariates > 0 {
        warn!("{file}: dropped {} rows with missing covariates", out.dropped_missing_covariates);
    }
    info!(
        "{file}: {} rows read, {} movers kept, {} excluded by residence duration",
        out.rows_read,
        out.records.len(),
        out.excluded_by_duration
    );
    Ok(out)
}

pub fn load_movers(path: impl AsRef<Path>) -> Result<MoverLoad> {
    let path = path.as_ref();
    read_movers(open(path)?, &file_label(path))
}

/// Writes movers in the pre-recoded form.
pub fn write_movers<W: Write>(w: W, records: &[MoverRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec![
        "household_id",
        "survey_wave",
        "puma",
        "geography_version",
        "cohort",
        "displaced",
    ];
    header.extend(Covariate::ALL.map(|c| c.column()));
    wtr.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.household_id.clone(),
            r.survey_wave.to_string(),
            r.area.to_string(),
            r.geography.to_string(),
            r.cohort.to_string(),
            if r.displaced { "1".into() } else { "0".into() },
        ];
        row.extend(Covariate::ALL.map(|c| r.cell.token(c).to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<movers output>", e))?;
    Ok(())
}

pub fn read_poststrat<R: Read>(r: R, file: &str) -> Result<PostStratTable> {
    let mut rdr = reader(r);
    let cols = Columns::new(file, rdr.headers()?)?;
    cols.require(&["puma", "geography_version", "cohort", "count"])?;
    cols.require(&Covariate::ALL.map(|c| c.column()))?;

    let mut table = PostStratTable::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let area = AreaId::new(
            cols.get(&rec, "puma")
                .ok_or_else(|| Error::row(file, row, "missing puma"))?,
        );
        let geo = parse_geo(file, row, cols.get(&rec, "geography_version").unwrap_or(""))?;
        let cohort = parse_cohort(file, row, cols.get(&rec, "cohort").unwrap_or(""))?;
        if cohort.geography() != geo {
            return Err(Error::row(
                file,
                row,
                format!("cohort {} uses {} areas, row says {geo}", cohort.label(), cohort.geography()),
            ));
        }
        let cell = parse_cell(&cols, &rec, row)?
            .ok_or_else(|| Error::row(file, row, "missing covariate level"))?;
        let count = parse_real(file, row, "count", cols.get(&rec, "count").unwrap_or(""))?;
        if count < 0.0 {
            return Err(Error::row(file, row, format!("negative count {count}")));
        }
        table
            .insert(area, cohort, cell, count)
            .map_err(|e| Error::row(file, row, e.to_string()))?;
    }
    table.finish().map_err(|e| Error::Schema {
        file: file.to_string(),
        message: e.to_string(),
    })
}

pub fn load_poststrat(path: impl AsRef<Path>) -> Result<PostStratTable> {
    let path = path.as_ref();
    read_poststrat(open(path)?, &file_label(path))
}

/// Writes nonzero counts, ordered by (area, cohort, cell index).
pub fn write_poststrat<W: Write>(w: W, table: &PostStratTable) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["puma", "geography_version", "cohort"];
    header.extend(Covariate::ALL.map(|c| c.column()));
    header.push("count");
    wtr.write_record(&header)?;
    for ((area, cohort), counts) in table.iter() {
        debug_assert_eq!(counts.len(), NUM_CELLS);
        for (j, &n) in counts.iter().enumerate() {
            if n == 0.0 {
                continue;
            }
            let cell = CellKey::from_index(j).unwrap();
            let mut row = vec![
                area.to_string(),
                cohort.geography().to_string(),
                cohort.to_string(),
            ];
            row.extend(Covariate::ALL.map(|c| cell.token(c).to_string()));
            row.push(n.to_string());
            wtr.write_record(&row)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<poststrat output>", e))?;
    Ok(())
}

pub fn read_benchmarks<R: Read>(r: R, file: &str) -> Result<Vec<BenchmarkTarget>> {
    let mut rdr = reader(r);
    let cols = Columns::new(file, rdr.headers()?)?;
    cols.require(&["cohort", "estimate", "std_error"])?;
    let mut out: Vec<BenchmarkTarget> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let cohort = parse_cohort(file, row, cols.get(&rec, "cohort").unwrap_or(""))?;
        if out.iter().any(|t| t.cohort == cohort) {
            return Err(Error::row(file, row, format!("duplicate cohort {cohort}")));
        }
        let est = parse_real(file, row, "estimate", cols.get(&rec, "estimate").unwrap_or(""))?;
        let se = parse_real(file, row, "std_error", cols.get(&rec, "std_error").unwrap_or(""))?;
        out.push(BenchmarkTarget::new(cohort, est, se).map_err(|e| Error::row(file, row, e.to_string()))?);
    }
    out.sort_by_key(|t| t.cohort);
    Ok(out)
}

pub fn load_benchmarks(path: impl AsRef<Path>) -> Result<Vec<BenchmarkTarget>> {
    let path = path.as_ref();
    read_benchmarks(open(path)?, &file_label(path))
}

pub fn write_benchmarks<W: Write>(w: W, targets: &[BenchmarkTarget]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["cohort", "estimate", "std_error"])?;
    for t in targets {
        wtr.write_record([t.cohort.to_string(), t.estimate.to_string(), t.std_error.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("<benchmark output>", e))?;
    Ok(())
}

const REP_PREFIX: &str = "rep_weight_";

/// Reads household rows with `displaced`, `weight` and replicate weight
/// columns `rep_weight_1` .. `rep_weight_K`, grouped by the `cohort` column
/// (or all under `default_cohort` when that column is absent).
pub fn read_replicates<R: Read>(
    r: R,
    file: &str,
    fay: f64,
    default_cohort: Option<Cohort>,
) -> Result<Vec<(Cohort, ReplicateSurvey)>> {
    let mut rdr = reader(r);
    let headers = rdr.headers()?.clone();
    let cols = Columns::new(file, &headers)?;
    cols.require(&["displaced", "weight"])?;
    let mut reps: Vec<(usize, &str)> = Vec::new();
    for h in headers.iter() {
        if let Some(k) = h.strip_prefix(REP_PREFIX) {
            let k: usize = k.parse().map_err(|_| Error::Schema {
                file: file.to_string(),
                message: format!("bad replicate weight column '{h}'"),
            })?;
            reps.push((k, h));
        }
    }
    reps.sort_unstable();
    if reps.iter().enumerate().any(|(i, (k, _))| *k != i + 1) {
        return Err(Error::Schema {
            file: file.to_string(),
            message: format!("replicate weight columns must be {REP_PREFIX}1 .. {REP_PREFIX}K without gaps"),
        });
    }
    let has_cohort = cols.index.contains_key("cohort");
    if !has_cohort && default_cohort.is_none() {
        return Err(Error::Schema {
            file: file.to_string(),
            message: "missing column(s): cohort".into(),
        });
    }
    let mut groups: BTreeMap<Cohort, Vec<ReplicateRow>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let cohort = match (has_cohort, default_cohort) {
            (true, _) => parse_cohort(file, row, cols.get(&rec, "cohort").unwrap_or(""))?,
            (false, Some(c)) => c,
            (false, None) => unreachable!(),
        };
        let displaced = cols
            .get(&rec, "displaced")
            .and_then(parse_bool)
            .ok_or_else(|| Error::row(file, row, "displaced must be 0 or 1"))?;
        let weight = parse_real(file, row, "weight", cols.get(&rec, "weight").unwrap_or(""))?;
        if weight <= 0.0 {
            return Err(Error::row(file, row, "weight must be positive"));
        }
        let mut rep_weights = Vec::with_capacity(reps.len());
        for (_, name) in &reps {
            let w = parse_real(file, row, name, cols.get(&rec, name).unwrap_or(""))?;
            if w < 0.0 {
                return Err(Error::row(file, row, format!("{name} must be nonnegative")));
            }
            rep_weights.push(w);
        }
        groups.entry(cohort).or_default().push(ReplicateRow { displaced, weight, rep_weights });
    }
    groups
        .into_iter()
        .map(|(c, rows)| Ok((c, ReplicateSurvey::new(rows, fay)?)))
        .collect()
}

pub fn load_replicates(
    path: impl AsRef<Path>,
    fay: f64,
    default_cohort: Option<Cohort>,
) -> Result<Vec<(Cohort, ReplicateSurvey)>> {
    let path = path.as_ref();
    read_replicates(open(path)?, &file_label(path), fay, default_cohort)
}
