//! Synthetic benchmark: regions whose contact rate is a known function of their
//! features and of a staged lockdown, simulated with the SEIR model and
//! Poisson-noised daily deaths.

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::DATE_FORMAT;
use crate::error::{Error, Result};
use crate::seir::{integrate_euler, SeedingRule, SeirParams};

pub const INCUBATION_RATE: f64 = 0.2;
pub const RECOVERY_RATE: f64 = 0.1;
pub const MORTALITY_RATE: f64 = 0.01;
const SIM_STEP: f64 = 0.1;
/// Raw ordinal levels (out of 2) of the partial and full lockdown stages.
const PARTIAL: [f64; 4] = [1.0, 1.0, 0.0, 1.0];
const FULL: [f64; 4] = [2.0, 2.0, 2.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub regions: usize,
    pub train_days: usize,
    pub holdout_days: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            regions: 12,
            train_days: 60,
            holdout_days: 14,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTruth {
    pub region_id: String,
    pub r0_pre: f64,
    pub effect: f64,
    /// Outbreak day on which the partial stage starts.
    pub partial_day: usize,
    /// Outbreak day on which the full lockdown starts.
    pub lockdown_day: usize,
    /// Mean reproduction number over the training days.
    pub r0_train_mean: f64,
    pub population: f64,
    pub initial_deaths: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    /// (file name, contents) pairs.
    pub files: Vec<(String, String)>,
    pub truth: Vec<RegionTruth>,
}

fn normalized_stringency(raw: &[f64; 4]) -> f64 {
    raw.iter().map(|v| v / 2.0).sum::<f64>() / raw.len() as f64
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    if config.regions == 0 || config.train_days < 5 {
        return Err(Error::Domain(
            "need at least one region and five training days".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total_days = config.train_days + config.holdout_days;
    let calendar = NaiveDate::from_ymd_opt(2020, 3, 1).expect("valid date");
    let seeding = SeedingRule::default();
    let date = |d: i64| {
        (calendar + Duration::days(d))
            .format(DATE_FORMAT)
            .to_string()
    };

    let mut features =
        String::from("region_id,feature_1,feature_2,feature_3,feature_4,population\n");
    let mut train = String::from("region_id,date,cumulative_deaths\n");
    let mut full = String::from("region_id,date,cumulative_deaths\n");
    let mut policies =
        String::from("region_id,date,indicator_1,indicator_2,indicator_3,indicator_4\n");
    let mut truth_csv = String::from(
        "region_id,r0_pre,effect,partial_day,lockdown_day,r0_train_mean,population,initial_deaths\n",
    );
    let mut truth = Vec::with_capacity(config.regions);

    for i in 0..config.regions {
        let id = format!("R{:02}", i + 1);
        let x: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let population = 10f64.powf(rng.random_range(6.3..7.5)).round();
        let r0_pre = (2.6 + 0.6 * x[0] - 0.3 * x[1]).clamp(1.8, 4.0);
        let effect = (0.65 + 0.1 * x[2]).clamp(0.4, 0.85);
        let lockdown_day = rng.random_range(18..=30usize);
        let partial_day = lockdown_day - 5;
        let initial_deaths = rng.random_range(1..=3u32) as f64;
        let lead = rng.random_range(0..=5i64);

        // outbreak day d (1-based) uses the policy in force on that day
        let stage = |day: usize| -> Option<&[f64; 4]> {
            if day >= lockdown_day {
                Some(&FULL)
            } else if day >= partial_day {
                Some(&PARTIAL)
            } else {
                None
            }
        };
        let r0_at = |day: usize| {
            let s = stage(day).map_or(0.0, normalized_stringency);
            r0_pre * (1.0 - effect * s)
        };
        let to_beta = |r0: f64| {
            r0 * (RECOVERY_RATE + MORTALITY_RATE) * (INCUBATION_RATE + MORTALITY_RATE)
                / INCUBATION_RATE
        };
        let contact: Vec<f64> = (1..total_days).map(|d| to_beta(r0_at(d))).collect();
        let params = SeirParams::new(
            contact,
            INCUBATION_RATE,
            RECOVERY_RATE,
            MORTALITY_RATE,
            population,
        )?;
        let initial = seeding.initial_state(population, initial_deaths);
        let traj = integrate_euler(&initial, &params, total_days - 1, SIM_STEP)?;
        let expected = traj.deceased();

        let mut cumulative = vec![initial_deaths];
        for d in 1..total_days {
            let lambda = (expected[d] - expected[d - 1]).max(0.0);
            let k = if lambda > 0.0 {
                Poisson::new(lambda)
                    .map_err(|e| Error::Numerical(format!("poisson rate {lambda}: {e}")))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            cumulative.push(cumulative[d - 1] + k);
        }

        features.push_str(&format!(
            "{id},{:.6},{:.6},{:.6},{:.6},{population}\n",
            x[0], x[1], x[2], x[3]
        ));
        for d in 0..lead {
            let row = format!("{id},{},0\n", date(d));
            train.push_str(&row);
            full.push_str(&row);
        }
        for (d, v) in cumulative.iter().enumerate() {
            let row = format!("{id},{},{v}\n", date(lead + d as i64));
            if d < config.train_days {
                train.push_str(&row);
            }
            full.push_str(&row);
        }
        let level_row = |p: &[f64; 4]| p.map(|v| format!("{v}")).join(",");
        policies.push_str(&format!("{id},{},0,0,0,0\n", date(0)));
        policies.push_str(&format!(
            "{id},{},{}\n",
            date(lead + partial_day as i64 - 1),
            level_row(&PARTIAL)
        ));
        policies.push_str(&format!(
            "{id},{},{}\n",
            date(lead + lockdown_day as i64 - 1),
            level_row(&FULL)
        ));
        policies.push_str(&format!(
            "{id},{},{}\n",
            date(lead + total_days as i64 - 1),
            level_row(&FULL)
        ));

        let r0_train_mean =
            (1..=config.train_days).map(r0_at).sum::<f64>() / config.train_days as f64;
        truth_csv.push_str(&format!(
            "{id},{r0_pre:.6},{effect:.6},{partial_day},{lockdown_day},{r0_train_mean:.6},{population},{initial_deaths}\n"
        ));
        truth.push(RegionTruth {
            region_id: id,
            r0_pre,
            effect,
            partial_day,
            lockdown_day,
            r0_train_mean,
            population,
            initial_deaths,
        });
    }

    Ok(SynthOutput {
        files: vec![
            ("features.csv".into(), features),
            ("fatalities.csv".into(), train),
            ("fatalities_full.csv".into(), full),
            ("policies.csv".into(), policies),
            ("truth.csv".into(), truth_csv),
        ],
        truth,
    })
}
