//! Signed cumulative error `sum_{k=1..T} (Y(t+k) - Yhat(t+k))` of the CGP, the
//! baselines and optionally a stored forecast, per region, forecast date and
//! horizon.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDate};

use cgp_core::baseline::{baseline_forecast, BaselineMethod};
use cgp_core::data::{RegionRecord, DATE_FORMAT};
use cgp_core::forecast::{forecast, horizon_error, ForecastResult, ScenarioSpec};
use cgp_core::model::ModelConfig;
use cgp_core::posterior::PosteriorModel;
use cgp_core::{Error, Result};

use crate::commands::{load_data, load_model, selected, write};
use crate::config::RunConfig;

const MODELS: [&str; 4] = ["cgp", "gompertz", "vanilla_seir", "stored"];

type Series = BTreeMap<String, BTreeMap<NaiveDate, f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub region: String,
    pub forecast_date: NaiveDate,
    pub model: String,
    pub horizon: usize,
    pub error: Option<f64>,
}

/// `region_id,date,cumulative_deaths` rows keyed by region and date.
fn read_series(path: &Path) -> Result<Series> {
    let file = path.display().to_string();
    let parse_err = |line: u64, message: String| Error::Parse {
        file: file.clone(),
        line,
        column: String::new(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(0, e.to_string()))?;
    let mut out = Series::new();
    for (n, rec) in reader.records().enumerate() {
        let line = n as u64 + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() < 3 {
            return Err(parse_err(
                line,
                "expected region_id,date,cumulative_deaths".into(),
            ));
        }
        let date = NaiveDate::parse_from_str(rec[1].trim(), DATE_FORMAT)
            .map_err(|e| parse_err(line, format!("bad date `{}`: {e}", &rec[1])))?;
        let value: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad value `{}`", &rec[2])))?;
        out.entry(rec[0].trim().to_string())
            .or_default()
            .insert(date, value);
    }
    Ok(out)
}

fn by_date(f: &ForecastResult) -> BTreeMap<NaiveDate, f64> {
    f.dates
        .iter()
        .copied()
        .zip(f.mean.iter().copied())
        .collect()
}

struct Models {
    cgp: Option<PosteriorModel>,
    config: ModelConfig,
    stored: Option<Series>,
    samples: usize,
    seed: u64,
}

impl Models {
    /// Predicted cumulative deaths by date; `None` when the model cannot be fitted.
    fn predict(
        &self,
        model: &str,
        rec: &RegionRecord,
        horizon: usize,
    ) -> Result<Option<BTreeMap<NaiveDate, f64>>> {
        let baseline = |m: BaselineMethod| match baseline_forecast(m, rec, &self.config, horizon) {
            Ok(f) => Ok(Some(by_date(&f))),
            Err(Error::Fit(msg)) => {
                log::warn!("{} {}: {msg}", rec.region_id, m.as_str());
                Ok(None)
            }
            Err(e) => Err(e),
        };
        match model {
            "cgp" => {
                let m = self.cgp.as_ref().expect("checkpoint loaded for cgp");
                let spec = ScenarioSpec::hold_last(rec, horizon);
                Ok(Some(by_date(&forecast(
                    m,
                    rec,
                    &spec,
                    self.samples,
                    self.seed,
                )?)))
            }
            "gompertz" => baseline(BaselineMethod::Gompertz),
            "vanilla_seir" => baseline(BaselineMethod::VanillaSeir),
            "stored" => Ok(self
                .stored
                .as_ref()
                .and_then(|s| s.get(&rec.region_id))
                .cloned()),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

fn cell(
    truth: Option<&BTreeMap<NaiveDate, f64>>,
    pred: Option<&BTreeMap<NaiveDate, f64>>,
    origin: NaiveDate,
    horizon: usize,
) -> Result<Option<f64>> {
    let (Some(truth), Some(pred)) = (truth, pred) else {
        return Ok(None);
    };
    let mut y = Vec::with_capacity(horizon);
    let mut p = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let date = origin + Duration::days(k as i64);
        match (truth.get(&date), pred.get(&date)) {
            (Some(a), Some(b)) => {
                y.push(*a);
                p.push(*b);
            }
            _ => return Ok(None),
        }
    }
    horizon_error(&y, &p, horizon).map(Some)
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let horizons: Vec<usize> = cfg.list("horizons")?;
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Error::Config("`horizons` needs positive entries".into()));
    }
    let max_h = *horizons.iter().max().expect("non-empty");
    let mut models: Vec<String> = cfg.list("models")?;
    let stored = match cfg.get("stored_forecasts") {
        "" => None,
        p => {
            if !models.iter().any(|m| m == "stored") {
                models.push("stored".into());
            }
            Some(read_series(Path::new(p))?)
        }
    };
    if let Some(bad) = models.iter().find(|m| !MODELS.contains(&m.as_str())) {
        return Err(Error::Config(format!(
            "unknown model `{bad}`, expected one of {}",
            MODELS.join(", ")
        )));
    }
    if models.iter().any(|m| m == "stored") && stored.is_none() {
        return Err(Error::Config(
            "model `stored` needs `stored_forecasts`".into(),
        ));
    }
    let truth = read_series(&match cfg.get("truth") {
        "" => cfg.path("fatalities"),
        _ => cfg.path("truth"),
    })?;
    let dates: Vec<NaiveDate> = cfg
        .get("forecast_date")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            NaiveDate::parse_from_str(s, DATE_FORMAT)
                .map_err(|e| Error::Config(format!("`forecast_date` entry `{s}`: {e}")))
        })
        .collect::<Result<_>>()?;

    let engine = Models {
        cgp: if models.iter().any(|m| m == "cgp") {
            Some(load_model(cfg, &data)?)
        } else {
            None
        },
        config: cfg.model_config()?,
        stored,
        samples: cfg.parse("forecast_samples")?,
        seed: cfg.parse("seed")?,
    };

    let mut rows = Vec::new();
    for r in selected(cfg, &data)? {
        let origins: Vec<RegionRecord> = if dates.is_empty() {
            vec![r.clone()]
        } else {
            let mut out = Vec::new();
            for d in &dates {
                let days = (*d - r.start_date).num_days() + 1;
                if days < 1 || days as usize > r.num_days() {
                    log::warn!("{}: no observations up to {d}, skipped", r.region_id);
                    continue;
                }
                out.push(r.truncated(days as usize)?);
            }
            out
        };
        for rec in &origins {
            let origin = rec.last_date();
            for m in &models {
                let pred = engine.predict(m, rec, max_h)?;
                for h in &horizons {
                    let error = cell(truth.get(&rec.region_id), pred.as_ref(), origin, *h)?;
                    rows.push(Row {
                        region: rec.region_id.clone(),
                        forecast_date: origin,
                        model: m.clone(),
                        horizon: *h,
                        error,
                    });
                }
            }
        }
    }

    let out = cfg.out_dir();
    write(&out.join("error_table.csv"), &to_csv(&rows))?;
    let table = to_table(&rows);
    write(&out.join("error_table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut out = String::from("region,forecast_date,model,horizon,cumulative_error\n");
    for r in rows {
        let v = r.error.map_or("NA".to_string(), |e| e.to_string());
        out.push_str(&format!(
            "{},{},{},{},{v}\n",
            r.region,
            r.forecast_date.format(DATE_FORMAT),
            r.model,
            r.horizon
        ));
    }
    out
}

/// One block per region: a row per model, a column per (forecast date, horizon).
pub fn to_table(rows: &[Row]) -> String {
    let mut regions: Vec<&str> = Vec::new();
    for r in rows {
        if !regions.contains(&r.region.as_str()) {
            regions.push(&r.region);
        }
    }
    let mut out = String::new();
    for region in regions {
        let mine: Vec<&Row> = rows.iter().filter(|r| r.region == region).collect();
        let mut columns: Vec<(NaiveDate, usize)> = Vec::new();
        let mut models: Vec<&str> = Vec::new();
        for r in &mine {
            if !columns.contains(&(r.forecast_date, r.horizon)) {
                columns.push((r.forecast_date, r.horizon));
            }
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
        }
        out.push_str(&format!("{region}\n{:<14}", "model"));
        for (d, h) in &columns {
            out.push_str(&format!(" | {} {:>2}d", d.format(DATE_FORMAT), h));
        }
        out.push('\n');
        for m in models {
            out.push_str(&format!("{m:<14}"));
            for (d, h) in &columns {
                let v = mine
                    .iter()
                    .find(|r| r.model == m && r.forecast_date == *d && r.horizon == *h)
                    .and_then(|r| r.error);
                let text = v.map_or("---".to_string(), |e| format!("{e:.1}"));
                out.push_str(&format!(" | {text:>14}"));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 4, d).unwrap()
    }

    #[test]
    fn cells_sum_signed_differences() {
        let truth: BTreeMap<NaiveDate, f64> = (1..=5).map(|d| (date(d), 10.0 * d as f64)).collect();
        let pred: BTreeMap<NaiveDate, f64> =
            (1..=5).map(|d| (date(d), 10.0 * d as f64 + 1.0)).collect();
        assert_eq!(
            cell(Some(&truth), Some(&pred), date(1), 3).unwrap(),
            Some(-3.0)
        );
        assert_eq!(
            cell(Some(&truth), Some(&truth), date(1), 4).unwrap(),
            Some(0.0)
        );
        assert_eq!(cell(Some(&truth), Some(&pred), date(1), 5).unwrap(), None);
        assert_eq!(cell(None, Some(&pred), date(1), 1).unwrap(), None);
    }

    #[test]
    fn table_layout() {
        let rows = vec![
            Row {
                region: "A".into(),
                forecast_date: date(1),
                model: "cgp".into(),
                horizon: 7,
                error: Some(-1.25),
            },
            Row {
                region: "A".into(),
                forecast_date: date(1),
                model: "cgp".into(),
                horizon: 14,
                error: None,
            },
        ];
        assert_eq!(
            to_csv(&rows),
            "region,forecast_date,model,horizon,cumulative_error\nA,2020-04-01,cgp,7,-1.25\nA,2020-04-01,cgp,14,NA\n"
        );
        let t = to_table(&rows);
        assert!(t.contains("2020-04-01  7d"));
        assert!(t.contains("-1.2") && t.contains("---"));
    }
}
