use std::fs;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use cgp_core::data::{load_dataset, Dataset, RegionRecord};
use cgp_core::forecast::{
    forecast as run_forecast, mean_reproduction_number, ForecastResult, ScenarioSpec,
};
use cgp_core::posterior::PosteriorModel;
use cgp_core::svi::train as fit;
use cgp_core::synth::{generate, SynthConfig};
use cgp_core::{Error, Result};
use cgp_server::{AppState, ServiceOptions};

use crate::config::RunConfig;
use crate::plot;

pub fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, body)?;
    Ok(())
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let data = load_dataset(
        &cfg.path("features"),
        &cfg.path("fatalities"),
        &cfg.path("policies"),
        &cfg.ingest_config()?,
    )?;
    for w in &data.warnings {
        log::warn!("{w}");
    }
    Ok(data)
}

pub fn load_model(cfg: &RunConfig, data: &Dataset) -> Result<PosteriorModel> {
    let model = PosteriorModel::load(&cfg.checkpoint_path())?;
    model.check_dataset(&data.regions)?;
    Ok(model)
}

pub fn selected<'a>(cfg: &RunConfig, data: &'a Dataset) -> Result<Vec<&'a RegionRecord>> {
    match cfg.get("region") {
        "" => Ok(data.regions.iter().collect()),
        id => Ok(vec![data.region(id)?]),
    }
}

pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let out = cfg.out_dir();
    let mut report = String::from("region_id,reason\n");
    for d in &data.dropped {
        report.push_str(&format!("{},{}\n", d.region_id, d.reason.replace(',', ";")));
    }
    write(&out.join("drop_report.csv"), &report)?;
    write(&out.join("dataset.txt"), &data.to_canonical_text())?;
    println!(
        "kept {} regions, dropped {}, {} warnings",
        data.regions.len(),
        data.dropped.len(),
        data.warnings.len()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    if data.regions.is_empty() {
        return Err(Error::Shape("no regions left after ingestion".into()));
    }
    let options = cfg.train_options()?;
    let (mut model, report) = fit(&data.regions, &cfg.model_config()?, &options)?;
    model.feature_names = data.feature_names.clone();
    model.indicator_names = data.indicator_names.clone();
    let path = cfg.checkpoint_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    model.save(&path)?;

    let out = cfg.out_dir();
    write(&out.join("elbo.csv"), &report.elbo_csv())?;
    let mut r0 = String::from("region_id,r0_mean\n");
    for r in &data.regions {
        r0.push_str(&format!(
            "{},{}\n",
            r.region_id,
            mean_reproduction_number(&model, r)?
        ));
    }
    write(&out.join("r0.csv"), &r0)?;
    let last = report.elbo.iter().rev().find(|v| v.is_finite()).copied();
    let summary = format!(
        "checkpoint={}\niterations={}\nfinal_elbo={}\nskipped_iterations={}\nclamp_events={}\nseed={}\n",
        model.checkpoint_id(),
        options.iterations,
        last.map_or("NA".to_string(), |v| v.to_string()),
        report.skipped_iterations,
        report.clamp_events,
        report.seed
    );
    write(&out.join("train_summary.txt"), &summary)?;
    log::info!("training took {:.1} s", report.wall_clock_seconds);
    println!(
        "trained {} regions, checkpoint {} written to {}",
        data.regions.len(),
        model.checkpoint_id(),
        path.display()
    );
    Ok(())
}

fn report_warnings(f: &ForecastResult) {
    for w in &f.warnings {
        log::warn!("{}: {w}", f.region_id);
    }
}

fn final_mean(f: &ForecastResult) -> f64 {
    f.mean.last().copied().unwrap_or(0.0)
}

pub fn forecast(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let horizon: usize = cfg.parse("horizon")?;
    let samples: usize = cfg.parse("forecast_samples")?;
    let seed: u64 = cfg.parse("seed")?;
    let out = cfg.out_dir();
    for r in selected(cfg, &data)? {
        let mut spec = ScenarioSpec::hold_last(r, horizon);
        spec.include_history = cfg.parse("include_history")?;
        let f = run_forecast(&model, r, &spec, samples, seed)?;
        report_warnings(&f);
        write(
            &out.join(format!("forecast_{}.csv", r.region_id)),
            &f.to_csv(),
        )?;
        if cfg.parse("plot")? {
            let svg =
                plot::forecast_svg(&format!("{} forecast", r.region_id), r, &[("forecast", &f)])?;
            write(&out.join(format!("forecast_{}.svg", r.region_id)), &svg)?;
        }
        let i = f.len() - 1;
        println!(
            "{} day {}: mean {:.1}, 90% interval [{:.1}, {:.1}]",
            r.region_id, f.days[i], f.mean[i], f.q5[i], f.q95[i]
        );
    }
    Ok(())
}

/// Rows of indicator levels, one per day `t..=t + horizon`, with a header.
fn read_policy_file(path: &Path, indicators: usize) -> Result<Vec<Vec<f64>>> {
    let file = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        file: file.clone(),
        line: 0,
        column: String::new(),
        message: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let line = n as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse {
            file: file.clone(),
            line,
            column: String::new(),
            message: e.to_string(),
        })?;
        if rec.len() != indicators {
            return Err(Error::Shape(format!(
                "{file} line {line} has {} columns, expected {indicators}",
                rec.len()
            )));
        }
        let mut row = Vec::with_capacity(indicators);
        for (k, v) in rec.iter().enumerate() {
            row.push(v.trim().parse().map_err(|_| Error::Parse {
                file: file.clone(),
                line,
                column: format!("{}", k + 1),
                message: format!("`{v}` is not a number"),
            })?);
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn scenario(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let horizon: usize = cfg.parse("horizon")?;
    let samples: usize = cfg.parse("forecast_samples")?;
    let seed: u64 = cfg.parse("seed")?;
    let shift: i64 = cfg.parse("shift_days")?;
    let regions = selected(cfg, &data)?;
    let policy = match cfg.get("future_policy") {
        "" => None,
        p => {
            if regions.len() != 1 {
                return Err(Error::Config(
                    "`future_policy` needs a single `region`".into(),
                ));
            }
            Some(read_policy_file(Path::new(p), data.indicator_names.len())?)
        }
    };
    let out = cfg.out_dir();
    let mut summary = String::from(
        "region_id,shift_days,baseline_final_mean,scenario_final_mean,cumulative_difference\n",
    );
    for r in regions {
        let mut base_spec = ScenarioSpec::hold_last(r, horizon);
        base_spec.include_history = cfg.parse("include_history")?;
        let mut spec = base_spec.clone();
        if let Some(p) = &policy {
            spec.future_policy = p.clone();
        }
        if shift != 0 {
            spec.shift_days = Some(shift);
        }
        spec.validate(data.indicator_names.len())?;
        let baseline = run_forecast(&model, r, &base_spec, samples, seed)?;
        let edited = run_forecast(&model, r, &spec, samples, seed)?;
        report_warnings(&edited);
        let diff = final_mean(&edited) - final_mean(&baseline);
        let id = &r.region_id;
        write(&out.join(format!("scenario_{id}.csv")), &edited.to_csv())?;
        write(
            &out.join(format!("scenario_{id}_baseline.csv")),
            &baseline.to_csv(),
        )?;
        if cfg.parse("plot")? {
            let svg = plot::forecast_svg(
                &format!("{id} scenario (shift {shift} days)"),
                r,
                &[("baseline", &baseline), ("scenario", &edited)],
            )?;
            write(&out.join(format!("scenario_{id}.svg")), &svg)?;
        }
        summary.push_str(&format!(
            "{id},{shift},{},{},{diff}\n",
            final_mean(&baseline),
            final_mean(&edited)
        ));
        println!("{id}: cumulative difference {diff:+.1} deaths");
    }
    write(&out.join("scenario_summary.csv"), &summary)?;
    Ok(())
}

pub fn serve(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let model = PosteriorModel::load(&cfg.checkpoint_path())?;
    let state = Arc::new(AppState::new(model, data, ServiceOptions::default())?);
    let addr: SocketAddr = cfg.parse("bind")?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    println!(
        "serving checkpoint {} on http://{addr}",
        state.checkpoint_id()
    );
    runtime.block_on(cgp_server::serve(state, addr))?;
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let config = SynthConfig {
        regions: cfg.parse("synth_regions")?,
        train_days: cfg.parse("synth_train_days")?,
        holdout_days: cfg.parse("synth_holdout_days")?,
        seed: cfg.parse("seed")?,
    };
    let output = generate(&config)?;
    let out = cfg.out_dir();
    for (name, body) in &output.files {
        write(&out.join(name), body)?;
    }
    println!("wrote {} regions to {}", output.truth.len(), out.display());
    Ok(())
}
