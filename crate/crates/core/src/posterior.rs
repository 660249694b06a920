//! Trained model: learned upper/lower layers plus per-region variational factors.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::RegionRecord;
use crate::error::{Error, Result};
use crate::gp::{constant_mean, gp_posterior, GpPosterior};
use crate::model::{
    latent_reproduction_number, level_inputs, lower_layer_prior, ModelConfig, PolicyLevels,
    RegionLatents,
};
use crate::svi::{CgpObjective, Objective, VariationalParams, MAX_LOG_STD, MIN_LOG_STD};

pub const SCHEMA_VERSION: u32 = 1;

/// Independent normal factor of the variational posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalFactor {
    pub mean: f64,
    pub std: f64,
}

impl NormalFactor {
    fn from_params(params: &VariationalParams, k: usize) -> Self {
        Self {
            mean: params.mean[k],
            std: params.log_std[k].clamp(MIN_LOG_STD, MAX_LOG_STD).exp(),
        }
    }

    pub fn sample(&self, z: f64) -> f64 {
        self.mean + self.std * z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPosterior {
    pub region_id: String,
    pub population: f64,
    pub features: Vec<f64>,
    /// Distinct policy vectors seen in training, one contact latent each.
    pub levels: Vec<Vec<f64>>,
    pub beta: Vec<NormalFactor>,
    pub lengthscale: NormalFactor,
    pub recovery: NormalFactor,
    pub mortality: NormalFactor,
}

impl RegionPosterior {
    pub fn level_of(&self, p: &[f64]) -> Option<usize> {
        self.levels.iter().position(|l| l == p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorModel {
    pub schema_version: u32,
    /// Config with the learned upper- and lower-layer hyperparameters.
    pub config: ModelConfig,
    pub feature_names: Vec<String>,
    pub indicator_names: Vec<String>,
    /// Shared incubation-rate latent.
    pub incubation: NormalFactor,
    pub regions: Vec<RegionPosterior>,
}

impl PosteriorModel {
    pub fn from_objective(
        obj: &CgpObjective,
        regions: &[RegionRecord],
        params: &VariationalParams,
    ) -> Result<Self> {
        if params.mean.len() != obj.num_latents() {
            return Err(Error::Shape("parameters do not match the objective".into()));
        }
        let mut out = Vec::with_capacity(regions.len());
        for (r, rec) in regions.iter().enumerate() {
            let o = obj.region_offset(r);
            let levels = PolicyLevels::from_timeline(&rec.policy.values);
            out.push(RegionPosterior {
                region_id: rec.region_id.clone(),
                population: rec.population,
                features: rec.features.clone(),
                beta: (0..levels.len())
                    .map(|l| NormalFactor::from_params(params, o + 3 + l))
                    .collect(),
                levels: levels.levels,
                lengthscale: NormalFactor::from_params(params, o),
                recovery: NormalFactor::from_params(params, o + 1),
                mortality: NormalFactor::from_params(params, o + 2),
            });
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            config: obj.learned_config(&params.hyper),
            feature_names: Vec::new(),
            indicator_names: Vec::new(),
            incubation: NormalFactor::from_params(params, 0),
            regions: out,
        })
    }

    pub fn region(&self, id: &str) -> Result<&RegionPosterior> {
        self.regions
            .iter()
            .find(|r| r.region_id == id)
            .ok_or_else(|| Error::UnknownRegion(id.to_string()))
    }

    /// Latents at the variational means for the given day-to-level map.
    pub fn mean_latents(&self, id: &str, day_level: Vec<usize>) -> Result<RegionLatents> {
        let r = self.region(id)?;
        Ok(RegionLatents {
            lengthscale: r.lengthscale.mean,
            beta: r.beta.iter().map(|b| b.mean).collect(),
            incubation: self.incubation.mean,
            recovery: r.recovery.mean,
            mortality: r.mortality.mean,
            day_level,
        })
    }

    /// Reproduction number at the variational means for each policy level.
    pub fn level_reproduction_numbers(&self, id: &str) -> Result<Vec<f64>> {
        let r = self.region(id)?;
        Ok(r.beta
            .iter()
            .map(|b| {
                latent_reproduction_number(
                    self.config.beta_reference,
                    b.mean,
                    self.incubation.mean,
                    r.recovery.mean,
                    r.mortality.mean,
                )
            })
            .collect())
    }

    /// Upper-layer contact-latent GP conditioned on every region's level means.
    pub fn beta_gp(&self) -> Result<GpPosterior> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut targets = Vec::new();
        for r in &self.regions {
            let z = level_inputs(&r.features, &r.levels);
            for (i, b) in r.beta.iter().enumerate() {
                rows.push(z.row(i).iter().copied().collect());
                targets.push(b.mean);
            }
        }
        let dim = rows.first().map_or(0, Vec::len);
        let inputs = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        let kernel = self
            .config
            .upper
            .beta
            .kernel(self.config.kernel_family, dim)?;
        gp_posterior(
            constant_mean(self.config.upper.beta.mean),
            kernel,
            inputs,
            DVector::from_vec(targets),
        )
    }

    /// Euler clamp events when integrating every region at the variational means.
    pub fn clamp_events(&self, regions: &[RegionRecord]) -> Result<usize> {
        let mut total = 0;
        for rec in regions {
            let levels = PolicyLevels::from_timeline(&rec.policy.values);
            let lat = self.mean_latents(&rec.region_id, levels.day_level)?;
            total += lower_layer_prior(rec, &lat, &self.config)?
                .trajectory
                .clamp_events;
        }
        Ok(total)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "unsupported schema version {version:?}, expected {SCHEMA_VERSION}"
            )));
        }
        let model: Self = serde_json::from_value(value)?;
        model.config.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// First 16 hex digits of the SHA-256 of the serialized checkpoint.
    pub fn checkpoint_id(&self) -> String {
        let json = self.to_json().expect("model serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Checks that a dataset matches the trained model.
    pub fn check_dataset(&self, regions: &[RegionRecord]) -> Result<()> {
        for p in &self.regions {
            let Some(rec) = regions.iter().find(|r| r.region_id == p.region_id) else {
                continue;
            };
            if rec.features.len() != p.features.len() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has {} features, the checkpoint expects {}",
                    p.region_id,
                    rec.features.len(),
                    p.features.len()
                )));
            }
            let k = p.levels.first().map_or(0, Vec::len);
            if rec.policy.values.iter().any(|v| v.len() != k) {
                return Err(Error::Checkpoint(format!(
                    "`{}` policy vectors do not have {k} indicators",
                    p.region_id
                )));
            }
        }
        Ok(())
    }
}
