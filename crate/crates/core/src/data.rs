//! Loading and aligning the three input feeds: region features, cumulative
//! fatality series and policy indicator timelines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    /// Outbreak day 1 is the first day with at least this many cumulative deaths.
    pub outbreak_threshold: f64,
    /// Regions with fewer observed days are dropped.
    pub min_days: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            outbreak_threshold: 1.0,
            min_days: 5,
        }
    }
}

/// Per-day policy vectors anchored at a calendar date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTimeline {
    pub start_date: NaiveDate,
    /// One K-vector per day, entries in [0, 1].
    pub values: Vec<Vec<f64>>,
    /// Published stringency per day, when the feed carries it.
    pub stringency: Option<Vec<f64>>,
}

impl PolicyTimeline {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn stringency_at(&self, day: usize) -> f64 {
        let published = self.stringency.as_ref().map(|s| s[day]);
        stringency_index(&self.values[day], published)
    }

    pub fn stringency_series(&self) -> Vec<f64> {
        (0..self.len()).map(|d| self.stringency_at(d)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub region_id: String,
    pub parent_country: Option<String>,
    pub population: f64,
    /// Standardized features after imputation.
    pub features: Vec<f64>,
    /// Which features were imputed.
    pub imputed: Vec<bool>,
    /// Calendar date of outbreak day 1.
    pub start_date: NaiveDate,
    /// Cumulative deaths, index 0 = outbreak day 1.
    pub fatalities: Vec<f64>,
    /// Policy for every observed day.
    pub policy: PolicyTimeline,
    /// Announced policy after the last observed day, possibly empty.
    pub scheduled_policy: PolicyTimeline,
    /// Number of days changed by the running-maximum repair.
    pub repairs: usize,
}

impl RegionRecord {
    pub fn num_days(&self) -> usize {
        self.fatalities.len()
    }

    pub fn date_of(&self, index: usize) -> NaiveDate {
        self.start_date + Duration::days(index as i64)
    }

    pub fn last_date(&self) -> NaiveDate {
        self.date_of(self.fatalities.len().saturating_sub(1))
    }

    /// The record as it looked after `days` observed days; later policy
    /// becomes the announced schedule.
    pub fn truncated(&self, days: usize) -> Result<RegionRecord> {
        if days == 0 || days > self.num_days() {
            return Err(Error::Shape(format!(
                "cannot truncate `{}` with {} days to {days}",
                self.region_id,
                self.num_days()
            )));
        }
        let split = |t: &PolicyTimeline, from: usize, to: usize| PolicyTimeline {
            start_date: t.start_date + Duration::days(from as i64),
            values: t.values[from..to].to_vec(),
            stringency: t.stringency.as_ref().map(|s| s[from..to].to_vec()),
        };
        let n = self.num_days();
        let mut scheduled = split(&self.policy, days, n);
        scheduled
            .values
            .extend(self.scheduled_policy.values.iter().cloned());
        if let (Some(s), Some(extra)) =
            (&mut scheduled.stringency, &self.scheduled_policy.stringency)
        {
            s.extend(extra.iter().copied());
        }
        Ok(RegionRecord {
            fatalities: self.fatalities[..days].to_vec(),
            policy: split(&self.policy, 0, days),
            scheduled_policy: scheduled,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRegion {
    pub region_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub indicator_names: Vec<String>,
    pub regions: Vec<RegionRecord>,
    pub dropped: Vec<DroppedRegion>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn region(&self, id: &str) -> Result<&RegionRecord> {
        self.regions
            .iter()
            .find(|r| r.region_id == id)
            .ok_or_else(|| Error::UnknownRegion(id.to_string()))
    }

    /// Line-oriented dump with fixed six-decimal numbers, used for golden comparisons.
    pub fn to_canonical_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "features {}", self.feature_names.join(","));
        let _ = writeln!(out, "indicators {}", self.indicator_names.join(","));
        for r in &self.regions {
            let _ = writeln!(out, "region {}", r.region_id);
            let _ = writeln!(out, "parent {}", r.parent_country.as_deref().unwrap_or("-"));
            let _ = writeln!(out, "population {:.6}", r.population);
            let _ = writeln!(out, "start {}", r.start_date.format(DATE_FORMAT));
            let _ = writeln!(out, "features {}", join_fixed(&r.features));
            let mask: Vec<&str> = r
                .imputed
                .iter()
                .map(|m| if *m { "1" } else { "0" })
                .collect();
            let _ = writeln!(out, "imputed {}", mask.join(","));
            let _ = writeln!(out, "repairs {}", r.repairs);
            let _ = writeln!(out, "deaths {}", join_fixed(&r.fatalities));
            for (d, p) in r.policy.values.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "policy {} {} {:.6}",
                    d + 1,
                    join_fixed(p),
                    r.policy.stringency_at(d)
                );
            }
            for (d, p) in r.scheduled_policy.values.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "scheduled {} {} {:.6}",
                    r.num_days() + d + 1,
                    join_fixed(p),
                    r.scheduled_policy.stringency_at(d)
                );
            }
        }
        for d in &self.dropped {
            let _ = writeln!(out, "dropped {} {}", d.region_id, d.reason);
        }
        out
    }
}

fn join_fixed(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.6}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// 100 times the mean indicator level, or the published value when present.
pub fn stringency_index(p: &[f64], published: Option<f64>) -> f64 {
    if let Some(s) = published {
        return s;
    }
    if p.is_empty() {
        return 0.0;
    }
    100.0 * p.iter().sum::<f64>() / p.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedFeatures {
    /// Standardized values, one row per region, over the kept columns.
    pub values: Vec<Vec<f64>>,
    /// True where the raw value was missing.
    pub mask: Vec<Vec<bool>>,
    /// Indices of the raw columns that survived.
    pub kept_columns: Vec<usize>,
    pub warnings: Vec<String>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Column-median imputation followed by per-column standardization.
/// Columns with fewer than two observed values are dropped with a warning.
pub fn impute_features(raw: &[Vec<Option<f64>>], names: &[String]) -> ImputedFeatures {
    let cols = names.len();
    let n = raw.len();
    let mut kept = Vec::new();
    let mut warnings = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut col_masks: Vec<Vec<bool>> = Vec::new();
    for c in 0..cols {
        let mut present: Vec<f64> = raw.iter().filter_map(|row| row[c]).collect();
        if present.len() < 2 {
            warnings.push(format!(
                "feature `{}` has {} observed values and was dropped",
                names[c],
                present.len()
            ));
            continue;
        }
        let fill = median(&mut present);
        let mask: Vec<bool> = raw.iter().map(|row| row[c].is_none()).collect();
        let filled: Vec<f64> = raw.iter().map(|row| row[c].unwrap_or(fill)).collect();
        let mean = filled.iter().sum::<f64>() / n as f64;
        let var = filled.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        columns.push(filled.iter().map(|x| (x - mean) / sd).collect());
        col_masks.push(mask);
        kept.push(c);
    }
    let values = (0..n)
        .map(|i| columns.iter().map(|col| col[i]).collect())
        .collect();
    let mask = (0..n)
        .map(|i| col_masks.iter().map(|m| m[i]).collect())
        .collect();
    ImputedFeatures {
        values,
        mask,
        kept_columns: kept,
        warnings,
    }
}

struct Table {
    file: String,
    header: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(&file, e))?;
    let header = reader
        .headers()
        .map_err(|e| csv_error(&file, e))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(&file, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push((line, rec));
    }
    Ok(Table { file, header, rows })
}

fn csv_error(file: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(format!("{file}: {e}"))),
        _ => Error::Parse {
            file: file.to_string(),
            line,
            column: "-".into(),
            message: e.to_string(),
        },
    }
}

impl Table {
    fn err(&self, line: u64, column: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.clone(),
            line,
            column: column.to_string(),
            message: message.into(),
        }
    }

    fn require(&self, names: &[&str]) -> Result<()> {
        for (i, name) in names.iter().enumerate() {
            if self.header.get(i).map(String::as_str) != Some(*name) {
                return Err(self.err(
                    1,
                    name,
                    format!(
                        "expected column {} to be `{name}`, header is {:?}",
                        i + 1,
                        self.header
                    ),
                ));
            }
        }
        Ok(())
    }

    fn number(&self, line: u64, rec: &csv::StringRecord, col: usize) -> Result<f64> {
        let raw = rec.get(col).unwrap_or("");
        let v: f64 = raw
            .parse()
            .map_err(|_| self.err(line, &self.header[col], format!("`{raw}` is not a number")))?;
        if !v.is_finite() {
            return Err(self.err(line, &self.header[col], format!("`{raw}` is not finite")));
        }
        Ok(v)
    }

    fn date(&self, line: u64, rec: &csv::StringRecord, col: usize) -> Result<NaiveDate> {
        let raw = rec.get(col).unwrap_or("");
        NaiveDate::parse_from_str(raw, DATE_FORMAT).map_err(|_| {
            self.err(
                line,
                &self.header[col],
                format!("`{raw}` is not a YYYY-MM-DD date"),
            )
        })
    }
}

struct FeatureRow {
    id: String,
    parent: Option<String>,
    population: f64,
}

struct RawFeatures {
    names: Vec<String>,
    rows: Vec<FeatureRow>,
    values: Vec<Vec<Option<f64>>>,
}

fn read_features(path: &Path) -> Result<RawFeatures> {
    let table = read_table(path)?;
    table.require(&["region_id"])?;
    let pop_col = table
        .header
        .iter()
        .position(|h| h == "population")
        .ok_or_else(|| table.err(1, "population", "features file needs a `population` column"))?;
    let parent_col = table.header.iter().position(|h| h == "parent_country");
    let feature_cols: Vec<usize> = (1..table.header.len())
        .filter(|c| *c != pop_col && Some(*c) != parent_col)
        .collect();
    let names = feature_cols
        .iter()
        .map(|c| table.header[*c].clone())
        .collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, rec) in &table.rows {
        if rec.len() != table.header.len() {
            return Err(table.err(
                *line,
                "-",
                format!(
                    "expected {} fields, found {}",
                    table.header.len(),
                    rec.len()
                ),
            ));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(table.err(*line, "region_id", "empty region id"));
        }
        if !seen.insert(id.clone()) {
            return Err(table.err(*line, "region_id", format!("duplicate region `{id}`")));
        }
        let population = table.number(*line, rec, pop_col)?;
        if population <= 0.0 {
            return Err(table.err(*line, "population", "population must be positive"));
        }
        let parent = parent_col
            .map(|c| rec[c].to_string())
            .filter(|s| !s.is_empty());
        let mut row = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            if rec[c].is_empty() || rec[c].eq_ignore_ascii_case("na") {
                row.push(None);
            } else {
                row.push(Some(table.number(*line, rec, c)?));
            }
        }
        rows.push(FeatureRow {
            id,
            parent,
            population,
        });
        values.push(row);
    }
    Ok(RawFeatures {
        names,
        rows,
        values,
    })
}

type Series = BTreeMap<String, BTreeMap<NaiveDate, f64>>;

fn read_fatalities(path: &Path) -> Result<Series> {
    let table = read_table(path)?;
    table.require(&["region_id", "date", "cumulative_deaths"])?;
    let mut out: Series = BTreeMap::new();
    for (line, rec) in &table.rows {
        if rec.len() != 3 {
            return Err(table.err(
                *line,
                "-",
                format!("expected 3 fields, found {}", rec.len()),
            ));
        }
        let date = table.date(*line, rec, 1)?;
        let deaths = table.number(*line, rec, 2)?;
        if deaths < 0.0 {
            return Err(table.err(*line, "cumulative_deaths", "deaths must be non-negative"));
        }
        let series = out.entry(rec[0].to_string()).or_default();
        if series.insert(date, deaths).is_some() {
            return Err(table.err(
                *line,
                "date",
                format!("duplicate date {date} for `{}`", &rec[0]),
            ));
        }
    }
    Ok(out)
}

struct RawPolicies {
    names: Vec<String>,
    has_stringency: bool,
    rows: BTreeMap<String, BTreeMap<NaiveDate, (Vec<f64>, Option<f64>)>>,
}

fn read_policies(path: &Path) -> Result<RawPolicies> {
    let table = read_table(path)?;
    table.require(&["region_id", "date"])?;
    let has_stringency = table.header.last().map(String::as_str) == Some("stringency");
    let end = table.header.len() - usize::from(has_stringency);
    let names: Vec<String> = table.header[2..end].to_vec();
    let mut rows: BTreeMap<String, BTreeMap<NaiveDate, (Vec<f64>, Option<f64>)>> = BTreeMap::new();
    for (line, rec) in &table.rows {
        if rec.len() != table.header.len() {
            return Err(table.err(
                *line,
                "-",
                format!(
                    "expected {} fields, found {}",
                    table.header.len(),
                    rec.len()
                ),
            ));
        }
        let date = table.date(*line, rec, 1)?;
        let mut p = Vec::with_capacity(names.len());
        for c in 2..end {
            let v = table.number(*line, rec, c)?;
            if v < 0.0 {
                return Err(table.err(
                    *line,
                    &table.header[c],
                    "indicator levels must be non-negative",
                ));
            }
            p.push(v);
        }
        let s = if has_stringency {
            let v = table.number(*line, rec, end)?;
            if !(0.0..=100.0).contains(&v) {
                return Err(table.err(*line, "stringency", "stringency must lie in [0, 100]"));
            }
            Some(v)
        } else {
            None
        };
        let entry = rows.entry(rec[0].to_string()).or_default();
        if entry.insert(date, (p, s)).is_some() {
            return Err(table.err(
                *line,
                "date",
                format!("duplicate date {date} for `{}`", &rec[0]),
            ));
        }
    }
    // ordinal levels are scaled by the column maximum
    for c in 0..names.len() {
        let max = rows
            .values()
            .flat_map(|r| r.values())
            .map(|(p, _)| p[c])
            .fold(0.0, f64::max);
        if max > 1.0 {
            for (p, _) in rows.values_mut().flat_map(|r| r.values_mut()) {
                p[c] /= max;
            }
        }
    }
    Ok(RawPolicies {
        names,
        has_stringency,
        rows,
    })
}

/// Daily cumulative series with gaps carried forward and decreases repaired.
fn daily_series(points: &BTreeMap<NaiveDate, f64>) -> (NaiveDate, Vec<f64>, usize) {
    let first = *points.keys().next().expect("non-empty series");
    let last = *points.keys().next_back().expect("non-empty series");
    let days = (last - first).num_days() as usize + 1;
    let mut out = Vec::with_capacity(days);
    let mut current = 0.0;
    let mut repairs = 0;
    for d in 0..days {
        let date = first + Duration::days(d as i64);
        if let Some(v) = points.get(&date) {
            if *v < current {
                repairs += 1;
            } else {
                current = *v;
            }
        }
        out.push(current);
    }
    (first, out, repairs)
}

fn forward_fill(
    rows: &BTreeMap<NaiveDate, (Vec<f64>, Option<f64>)>,
    from: NaiveDate,
    days: usize,
    has_stringency: bool,
) -> Option<PolicyTimeline> {
    let mut values = Vec::with_capacity(days);
    let mut stringency = Vec::with_capacity(days);
    for d in 0..days {
        let date = from + Duration::days(d as i64);
        let (_, (p, s)) = rows.range(..=date).next_back()?;
        values.push(p.clone());
        stringency.push(s.unwrap_or(0.0));
    }
    Some(PolicyTimeline {
        start_date: from,
        values,
        stringency: has_stringency.then_some(stringency),
    })
}

/// Loads, joins and aligns the three feeds.
pub fn load_dataset(
    features_path: &Path,
    fatalities_path: &Path,
    policies_path: &Path,
    config: &IngestConfig,
) -> Result<Dataset> {
    let features = read_features(features_path)?;
    let fatalities = read_fatalities(fatalities_path)?;
    let policies = read_policies(policies_path)?;

    let known: BTreeSet<&str> = features.rows.iter().map(|r| r.id.as_str()).collect();
    let mut orphans: BTreeSet<String> = BTreeSet::new();
    for id in fatalities.keys().chain(policies.rows.keys()) {
        if !known.contains(id.as_str()) {
            orphans.insert(id.clone());
        }
    }
    if !orphans.is_empty() {
        return Err(Error::Join {
            missing_in: "features".into(),
            orphans: orphans.into_iter().collect(),
        });
    }
    let no_policy: Vec<String> = fatalities
        .keys()
        .filter(|id| !policies.rows.contains_key(*id))
        .cloned()
        .collect();
    if !no_policy.is_empty() {
        return Err(Error::Join {
            missing_in: "policies".into(),
            orphans: no_policy,
        });
    }

    let imputed = impute_features(&features.values, &features.names);
    let feature_names: Vec<String> = imputed
        .kept_columns
        .iter()
        .map(|c| features.names[*c].clone())
        .collect();
    let mut warnings = imputed.warnings.clone();
    if fatalities.is_empty() {
        warnings.push("fatality file has no rows; dataset is empty".into());
    }

    let mut regions = Vec::new();
    let mut dropped = Vec::new();
    for (i, row) in features.rows.iter().enumerate() {
        let Some(points) = fatalities.get(&row.id) else {
            if !fatalities.is_empty() {
                dropped.push(DroppedRegion {
                    region_id: row.id.clone(),
                    reason: "no fatality records".into(),
                });
            }
            continue;
        };
        let (first, series, repairs) = daily_series(points);
        if repairs > 0 {
            warnings.push(format!("{}: repaired {repairs} decreasing values", row.id));
        }
        let Some(onset) = series.iter().position(|v| *v >= config.outbreak_threshold) else {
            dropped.push(DroppedRegion {
                region_id: row.id.clone(),
                reason: format!("deaths never reach {}", config.outbreak_threshold),
            });
            continue;
        };
        let observed = series[onset..].to_vec();
        if observed.len() < config.min_days {
            dropped.push(DroppedRegion {
                region_id: row.id.clone(),
                reason: format!("only {} days after outbreak onset", observed.len()),
            });
            continue;
        }
        let start = first + Duration::days(onset as i64);
        let rows = &policies.rows[&row.id];
        let policy = forward_fill(rows, start, observed.len(), policies.has_stringency)
            .ok_or_else(|| {
                Error::Alignment(format!(
                    "policy for `{}` starts after outbreak day 1 ({start})",
                    row.id
                ))
            })?;
        let last = start + Duration::days(observed.len() as i64 - 1);
        let next = last + Duration::days(1);
        let scheduled_days = rows
            .keys()
            .next_back()
            .map_or(0, |d| (*d - last).num_days().max(0) as usize);
        let scheduled = forward_fill(rows, next, scheduled_days, policies.has_stringency)
            .expect("policy covers the observed range");
        regions.push(RegionRecord {
            region_id: row.id.clone(),
            parent_country: row.parent.clone(),
            population: row.population,
            features: imputed.values[i].clone(),
            imputed: imputed.mask[i].clone(),
            start_date: start,
            fatalities: observed,
            policy,
            scheduled_policy: scheduled,
            repairs,
        });
    }
    for d in &dropped {
        log::warn!("dropped region {}: {}", d.region_id, d.reason);
    }
    Ok(Dataset {
        feature_names,
        indicator_names: policies.names,
        regions,
        dropped,
        warnings,
    })
}

/// Calendar-aligned national series built from sub-national records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSeries {
    pub region_id: String,
    pub start_date: NaiveDate,
    pub fatalities: Vec<f64>,
}

/// Sums children day by day on the calendar. Children contribute zero before
/// their own outbreak day 1; all children must end on the same date.
pub fn aggregate_regions(children: &[RegionRecord], national_id: &str) -> Result<AggregateSeries> {
    let first = children
        .first()
        .ok_or_else(|| Error::Alignment("no regions to aggregate".into()))?;
    if let Some(other) = children
        .iter()
        .find(|c| c.parent_country != first.parent_country)
    {
        return Err(Error::Alignment(format!(
            "`{}` and `{}` have different parent countries",
            first.region_id, other.region_id
        )));
    }
    let end = first.last_date();
    if let Some(other) = children.iter().find(|c| c.last_date() != end) {
        return Err(Error::Alignment(format!(
            "`{}` ends on {end} but `{}` ends on {}",
            first.region_id,
            other.region_id,
            other.last_date()
        )));
    }
    let start = children
        .iter()
        .map(|c| c.start_date)
        .min()
        .expect("non-empty");
    let days = (end - start).num_days() as usize + 1;
    let mut total = vec![0.0; days];
    for c in children {
        let offset = (c.start_date - start).num_days() as usize;
        for (k, v) in c.fatalities.iter().enumerate() {
            total[offset + k] += v;
        }
    }
    Ok(AggregateSeries {
        region_id: national_id.to_string(),
        start_date: start,
        fatalities: total,
    })
}
