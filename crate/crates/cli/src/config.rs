//! Flat `key=value` run configuration: every model key plus data paths,
//! training, forecasting, evaluation and service settings.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use cgp_core::data::IngestConfig;
use cgp_core::forecast::MIN_FORECAST_SAMPLES;
use cgp_core::model::ModelConfig;
use cgp_core::svi::TrainOptions;
use cgp_core::{Error, Result};

/// Non-model keys and their defaults, in file order.
const RUN_KEYS: &[(&str, &str)] = &[
    ("features", "features.csv"),
    ("fatalities", "fatalities.csv"),
    ("policies", "policies.csv"),
    // full cumulative series used as ground truth by `evaluate`; empty = `fatalities`
    ("truth", ""),
    // CSV `region_id,date,cumulative_deaths` evaluated as model `stored`
    ("stored_forecasts", ""),
    // empty = `<out>/checkpoint.json`
    ("checkpoint", ""),
    ("out", "out"),
    ("outbreak_threshold", "1"),
    ("min_days", "5"),
    ("iterations", "1000"),
    ("learning_rate", "0.01"),
    ("num_samples", "8"),
    ("seed", "42"),
    // empty = every region
    ("region", ""),
    ("horizon", "14"),
    ("shift_days", "0"),
    ("forecast_samples", "1000"),
    ("include_history", "false"),
    // CSV with one row of indicator levels per day t..=t+horizon; empty = hold last
    ("future_policy", ""),
    ("plot", "true"),
    ("horizons", "7,14"),
    ("models", "cgp,gompertz,vanilla_seir"),
    // empty = each region's last observed date
    ("forecast_date", ""),
    ("bind", "127.0.0.1:8080"),
    ("synth_regions", "12"),
    ("synth_train_days", "60"),
    ("synth_holdout_days", "14"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    run: Vec<(String, String)>,
    /// Model keys given explicitly, in the order they were set.
    model: Vec<(String, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RUN_KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            model: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        if let Some(slot) = self.run.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value.to_string();
            return Ok(());
        }
        if ModelConfig::is_key(key) {
            ModelConfig::default().set(key, value)?;
            self.model.retain(|(k, _)| k != key);
            self.model.push((key.to_string(), value.to_string()));
            return Ok(());
        }
        Err(Error::Config(format!("unknown config key `{key}`")))
    }

    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Reads `key=value` lines; blank lines and `#` comments are ignored.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), n + 1)))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.run
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("`{key}` is not a run key"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("`{key}` has invalid entry `{s}`")))
            })
            .collect()
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path("out")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        match self.get("checkpoint") {
            "" => self.out_dir().join("checkpoint.json"),
            p => PathBuf::from(p),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_pairs(self.model.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn ingest_config(&self) -> Result<IngestConfig> {
        Ok(IngestConfig {
            outbreak_threshold: self.parse("outbreak_threshold")?,
            min_days: self.parse("min_days")?,
        })
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        Ok(TrainOptions {
            iterations: self.parse("iterations")?,
            learning_rate: self.parse("learning_rate")?,
            num_samples: self.parse("num_samples")?,
            seed: self.parse("seed")?,
        })
    }

    /// Parses every typed key so bad values fail before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.ingest_config()?;
        self.train_options()?;
        for key in [
            "horizon",
            "synth_regions",
            "synth_train_days",
            "synth_holdout_days",
        ] {
            self.parse::<usize>(key)?;
        }
        let samples: usize = self.parse("forecast_samples")?;
        if samples < MIN_FORECAST_SAMPLES {
            return Err(Error::Config(format!(
                "`forecast_samples` must be at least {MIN_FORECAST_SAMPLES}, got {samples}"
            )));
        }
        self.parse::<i64>("shift_days")?;
        self.parse::<bool>("include_history")?;
        self.parse::<bool>("plot")?;
        self.parse::<std::net::SocketAddr>("bind")?;
        self.list::<usize>("horizons")?;
        Ok(())
    }

    /// Every key with its effective value, one `key=value` per line.
    pub fn effective_text(&self) -> Result<String> {
        let model = self.model_config()?;
        let mut out = String::new();
        for (k, v) in &self.run {
            out.push_str(&format!("{k}={v}\n"));
        }
        for k in ModelConfig::keys() {
            let v = model.get(&k).expect("listed key has a value");
            out.push_str(&format!("{k}={v}\n"));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.effective_text().unwrap();
        let mut again = RunConfig::default();
        for line in text.lines() {
            again.set_pair(line).unwrap();
        }
        assert_eq!(again.effective_text().unwrap(), text);
        assert_eq!(again.model_config().unwrap(), ModelConfig::default());
        assert_eq!(cfg.train_options().unwrap().iterations, 1000);
        assert_eq!(cfg.train_options().unwrap().learning_rate, 0.01);
    }

    #[test]
    fn unknown_and_bad_values() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("nope", "1"), Err(Error::Config(_))));
        assert!(cfg.set("beta_reference", "abc").is_err());
        assert!(cfg.set_pair("seed").is_err());
        cfg.set("horizon", "x").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn later_values_win() {
        let mut cfg = RunConfig::default();
        cfg.set("seed", "1").unwrap();
        cfg.set_pair("seed=7").unwrap();
        cfg.set("init_r0", "3").unwrap();
        cfg.set("init_r0", "2").unwrap();
        assert_eq!(cfg.get("seed"), "7");
        assert_eq!(cfg.model_config().unwrap().init.r0, 2.0);
    }
}
