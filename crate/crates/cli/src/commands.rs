use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use u5mr_core::aggregate::{
    aggregate_region, density_weights, mdg_drop, pixel_ratio_summary, write_region_csv, CountySeries, RegionSet,
};
use u5mr_core::evaluate::{
    holdout_mse, information_criteria, period_estimates, InformationCriteria, ModelEstimate, ReportMeta, TestValue,
    MIN_SAMPLES,
};
use u5mr_core::gmrf::{AsciiGrid, StudyDomain};
use u5mr_core::io::{read_array, read_csv, write_array, write_atomic_str, write_csv, ArrayHeader};
use u5mr_core::model::{
    field_odds_surface, fit, predict_u5mr_surface, prediction_years, BiasOffsetTable, CovariateLayer, ModelData,
    ModelSpec, SpecInputs, StratumPolicy, SurfaceSamples,
};
use u5mr_core::survey::{
    direct_u5mr, holdout_split, load_surveys, write_birth_csv, write_cluster_csv, AreaSelection, DirectEstimate,
    DirectOptions, EstimateFlag, ExposureTable, SurveyDataset, YearRange,
};
use u5mr_core::{Error, Result};

use crate::manifest::RunManifest;
use crate::settings::{Settings, Stratum};

/// Tracks the files a subcommand reads and writes for its manifest.
struct Run<'a> {
    name: &'static str,
    settings: &'a Settings,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    fn new(name: &'static str, settings: &'a Settings) -> Self {
        log::info!("{name}: start");
        Self {
            name,
            settings,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn out(&self, file: &str) -> PathBuf {
        self.settings.out_dir.join(file)
    }

    fn read(&mut self, path: &Path) {
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
    }

    fn wrote(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn wrote_array(&mut self, path: PathBuf) {
        self.outputs.push(u5mr_core::io::sidecar_path(&path));
        self.outputs.push(path);
    }

    fn finish(self) -> Result<()> {
        let s = self.settings;
        let manifest = RunManifest::new(self.name, s.config_path.as_deref(), s.digest(), s.seed);
        let path = manifest.write(&s.out_dir, &self.inputs, &self.outputs)?;
        log::info!("{}: wrote {} files and {}", self.name, self.outputs.len(), path.display());
        Ok(())
    }
}

/// All missing files at once, so the user sees the full list.
fn require(paths: &[&Path]) -> Result<()> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).map(|p| p.to_path_buf()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingInputs(missing))
    }
}

pub fn simulate(s: &Settings) -> Result<()> {
    let mut run = Run::new("simulate", s);
    std::fs::create_dir_all(&s.out_dir).map_err(|e| Error::io(&s.out_dir, e))?;
    let sim = s.sim.run(s.seed)?;
    let truth = &sim.truth;

    let clusters = run.out("clusters.csv");
    write_cluster_csv(&clusters, &sim.observed)?;
    run.wrote(clusters);
    let births = run.out("births.csv");
    write_birth_csv(&births, &sim.observed)?;
    run.wrote(births);

    let density = run.out("density.asc");
    truth.density.write(&density)?;
    run.wrote(density);
    let urban = run.out("urban.asc");
    let flags = truth.urban.iter().map(|&u| if u { 1.0 } else { 0.0 }).collect();
    AsciiGrid::new(truth.grid().clone(), flags)?.write(&urban)?;
    run.wrote(urban);
    for (j, cov) in truth.covariates.iter().enumerate() {
        let path = run.out(&format!("cov_{}.asc", j + 1));
        cov.write(&path)?;
        run.wrote(path);
    }

    let regions = run.out("regions.geojson");
    write_atomic_str(&regions, &truth.county_regions()?.to_geojson(truth.grid()))?;
    run.wrote(regions);
    let bias = run.out("bias.csv");
    sim.offsets.write(&bias)?;
    run.wrote(bias);

    #[derive(Serialize)]
    struct TruthRow {
        region: String,
        year: i32,
        u5mr: f64,
    }
    let mut rows = Vec::new();
    for &year in &truth.years {
        for (region, u5mr) in truth.county_u5mr(year, &sim.epidemic)? {
            rows.push(TruthRow { region, year, u5mr });
        }
    }
    let path = run.out("truth_county.csv");
    write_csv(&path, rows)?;
    run.wrote(path);
    log::info!(
        "simulate: {} surveys, {} clusters",
        sim.observed.len(),
        sim.observed.iter().map(|d| d.clusters.len()).sum::<usize>()
    );
    run.finish()
}

/// Training and test data: the selected survey is split by cluster, every
/// other survey is training data.
struct Split {
    all: Vec<SurveyDataset>,
    train: Vec<SurveyDataset>,
    test: SurveyDataset,
}

fn load_split(run: &mut Run<'_>) -> Result<Split> {
    let s = run.settings;
    let d = &s.data;
    require(&[&d.clusters, &d.births])?;
    run.read(&d.clusters);
    run.read(&d.births);
    let all = load_surveys(&d.clusters, &d.births)?;
    let target = match s.holdout.survey {
        Some(id) => id,
        None => all
            .iter()
            .map(|x| x.survey_id)
            .max()
            .ok_or_else(|| Error::Survey("no surveys in the input".into()))?,
    };
    let Some(held) = all.iter().find(|x| x.survey_id == target) else {
        return Err(s.config.invalid("holdout.survey", format!("survey {target} is not in the data")));
    };
    let (train_part, test) = holdout_split(held, s.holdout.train_fraction, s.holdout.seed)?;
    let train = all
        .iter()
        .map(|x| if x.survey_id == target { train_part.clone() } else { x.clone() })
        .collect();
    Ok(Split { all, train, test })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DirectRow {
    set: String,
    area: String,
    period: String,
    u5mr: f64,
    logit_u5mr: Option<f64>,
    logit_variance: Option<f64>,
    flag: EstimateFlag,
}

fn direct_rows(set: &str, data: &[SurveyDataset], s: &Settings, skipped: &mut usize) -> Result<Vec<DirectRow>> {
    let areas: BTreeSet<u32> = data.iter().flat_map(|d| d.clusters.iter().map(|c| c.area)).collect();
    let selections = std::iter::once(AreaSelection::National).chain(areas.into_iter().map(AreaSelection::Area));
    let options = DirectOptions { pooling: s.pooling };
    let mut rows = Vec::new();
    for area in selections {
        for &period in &s.direct_periods {
            let est: DirectEstimate = match direct_u5mr(data, area, period, options) {
                Ok(e) => e,
                Err(Error::Survey(msg)) => {
                    log::debug!("direct: {set} {area} {period} skipped: {msg}");
                    *skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let area = match est.area {
                AreaSelection::National => s.national_id.clone(),
                a => a.to_string(),
            };
            rows.push(DirectRow {
                set: set.into(),
                area,
                period: period.to_string(),
                u5mr: est.u5mr,
                logit_u5mr: est.logit_u5mr,
                logit_variance: est.logit_variance,
                flag: est.flag,
            });
        }
    }
    Ok(rows)
}

pub fn direct(s: &Settings) -> Result<()> {
    let mut run = Run::new("direct", s);
    let split = load_split(&mut run)?;
    let mut skipped = 0;
    let mut rows = direct_rows("all", &split.all, s, &mut skipped)?;
    rows.extend(direct_rows("train", &split.train, s, &mut skipped)?);
    rows.extend(direct_rows("test", std::slice::from_ref(&split.test), s, &mut skipped)?);
    if skipped > 0 {
        log::warn!("direct: {skipped} area-periods without person-months were skipped");
    }
    let path = run.out("direct.csv");
    write_csv(&path, &rows)?;
    run.wrote(path);

    #[derive(Serialize)]
    struct SplitRow {
        cluster_id: u64,
        survey_id: u32,
        set: &'static str,
    }
    let mut split_rows = Vec::new();
    let train_ids: BTreeSet<_> = split.train.iter().flat_map(|d| d.clusters.iter().map(|c| c.cluster_id)).collect();
    for d in &split.all {
        for c in &d.clusters {
            let set = if train_ids.contains(&c.cluster_id) { "train" } else { "test" };
            split_rows.push(SplitRow {
                cluster_id: c.cluster_id.into(),
                survey_id: c.survey_id,
                set,
            });
        }
    }
    let path = run.out("split.csv");
    write_csv(&path, split_rows)?;
    run.wrote(path);
    run.finish()
}

/// Rasters and tables shared by fit, predict and aggregate.
struct Inputs {
    density: AsciiGrid,
    offsets: BiasOffsetTable,
    covariates: Vec<CovariateLayer>,
}

fn load_inputs(run: &mut Run<'_>) -> Result<Inputs> {
    let d = &run.settings.data;
    let mut needed: Vec<&Path> = vec![&d.density];
    if let Some(b) = &d.bias {
        needed.push(b);
    }
    needed.extend(d.covariates.iter().map(PathBuf::as_path));
    require(&needed)?;
    let density = AsciiGrid::read(&d.density)?;
    let offsets = match &d.bias {
        Some(b) => BiasOffsetTable::read(b)?,
        None => BiasOffsetTable::new(),
    };
    let mut covariates = Vec::new();
    for p in &d.covariates {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        covariates.push(CovariateLayer::new(name, vec![AsciiGrid::read(p)?])?);
    }
    let paths: Vec<PathBuf> = needed.iter().map(|p| p.to_path_buf()).collect();
    for p in &paths {
        run.read(p);
    }
    Ok(Inputs {
        density,
        offsets,
        covariates,
    })
}

fn build_model(s: &Settings, inputs: &Inputs, table: &ExposureTable) -> Result<(ModelSpec, ModelData)> {
    ModelSpec::build(
        &s.spec,
        SpecInputs {
            domain: StudyDomain::new(inputs.density.geometry.clone(), s.pad)?,
            density: &inputs.density,
            table,
            offsets: inputs.offsets.clone(),
            covariates: &inputs.covariates,
        },
    )
}

/// Data, rasters and model for the training set; fit and predict rebuild
/// the same model from the same inputs.
fn training_model(run: &mut Run<'_>) -> Result<(ModelSpec, ModelData)> {
    let d = &run.settings.data;
    // Report every missing input of this stage in one message.
    let mut all: Vec<&Path> = vec![&d.clusters, &d.births, &d.density];
    if let Some(b) = &d.bias {
        all.push(b);
    }
    all.extend(d.covariates.iter().map(PathBuf::as_path));
    require(&all)?;
    let split = load_split(run)?;
    let inputs = load_inputs(run)?;
    let table = ExposureTable::from_surveys(&split.train)?;
    build_model(run.settings, &inputs, &table)
}

fn spec_json(s: &Settings, spec: &ModelSpec) -> serde_json::Value {
    let c = &s.spec;
    json!({
        "variant": c.variant.to_string(),
        "year_first": c.year_first,
        "year_last": c.year_last,
        "forecast_to": c.forecast_to,
        "knot_step": c.knot_step,
        "periods": c.periods.iter().map(|p| p.to_string()).collect::<Vec<_>>(),
        "pad": s.pad,
        "fixed_effect_precision": c.fixed_effect_precision,
        "coefficient_precision": c.coefficient_precision,
        "n_latent": spec.n_latent(),
        "n_nodes": spec.n_nodes(),
        "n_clusters": spec.clusters.len(),
        "years": prediction_years(spec),
        "hyperparameters": spec.hyper.iter().map(|h| h.name()).collect::<Vec<_>>(),
    })
}

pub fn fit_cmd(s: &Settings) -> Result<()> {
    let mut run = Run::new("fit", s);
    let (spec, data) = training_model(&mut run)?;
    log::info!(
        "fit: {} latent variables, {} binomial rows, {} hyperparameters",
        spec.n_latent(),
        data.n_rows(),
        spec.hyper.len()
    );
    let result = fit(&spec, &data, &s.fit)?;

    let path = run.out("spec.json");
    write_atomic_str(&path, &(serde_json::to_string_pretty(&spec_json(s, &spec))? + "\n"))?;
    run.wrote(path);
    let path = run.out("fit_summary.json");
    write_atomic_str(&path, &(serde_json::to_string_pretty(&result.summary)? + "\n"))?;
    run.wrote(path);

    let n = spec.n_latent();
    let flat: Vec<f64> = result.samples.iter().flatten().copied().collect();
    let header = ArrayHeader::new(
        &[("sample", result.samples.len()), ("latent", n)],
        json!({ "sample_point": result.sample_point }),
    );
    let path = run.out("samples.bin");
    write_array(&path, &header, &flat)?;
    run.wrote_array(path);

    if result.samples.len() >= MIN_SAMPLES {
        let ic = information_criteria(&result, &data)?;
        let path = run.out("criteria.json");
        write_atomic_str(&path, &(serde_json::to_string_pretty(&ic)? + "\n"))?;
        run.wrote(path);
    } else {
        log::warn!("fit: fewer than {MIN_SAMPLES} samples, information criteria skipped");
    }
    run.finish()
}

fn read_samples(run: &mut Run<'_>, n_latent: usize) -> Result<Vec<Vec<f64>>> {
    let path = run.out("samples.bin");
    let (header, flat) = read_array(&path)?;
    run.read(&path);
    if header.dim("latent") != Some(n_latent) {
        return Err(Error::Model(format!(
            "{} holds {:?} latent values per sample but the model has {n_latent}; refit after changing inputs",
            path.display(),
            header.dim("latent")
        )));
    }
    Ok(flat.chunks(n_latent).map(<[f64]>::to_vec).collect())
}

fn read_mask(path: &Path) -> Result<Vec<bool>> {
    Ok(AsciiGrid::read(path)?.values.iter().map(|v| *v > 0.5).collect())
}

pub fn predict(s: &Settings) -> Result<()> {
    let mut run = Run::new("predict", s);
    let samples_path = run.out("samples.bin");
    let mut needed = vec![samples_path.as_path()];
    if s.stratum == Stratum::Mask {
        needed.push(&s.data.urban);
    }
    require(&needed)?;
    let (spec, _) = training_model(&mut run)?;
    let samples = read_samples(&mut run, spec.n_latent())?;
    let policy = match s.stratum {
        Stratum::Urban => StratumPolicy::Urban,
        Stratum::Rural => StratumPolicy::Rural,
        Stratum::Mask => {
            run.read(&s.data.urban);
            StratumPolicy::Mask(read_mask(&s.data.urban)?)
        }
    };
    let years = s.predict_years.clone().unwrap_or_else(|| prediction_years(&spec));
    let n_cells = spec.domain.grid.n_cells();
    let mut u5mr = Vec::with_capacity(years.len() * samples.len() * n_cells);
    let mut odds = Vec::with_capacity(u5mr.capacity());
    for &year in &years {
        log::info!("predict: year {year}");
        u5mr.extend(predict_u5mr_surface(&spec, &samples, year, &policy)?.values);
        odds.extend(field_odds_surface(&spec, &samples, year)?.values);
    }
    let header = ArrayHeader::new(
        &[("year", years.len()), ("sample", samples.len()), ("cell", n_cells)],
        json!({ "years": years }),
    );
    for (file, values) in [("u5mr.bin", &u5mr), ("odds.bin", &odds)] {
        let path = run.out(file);
        write_array(&path, &header, values)?;
        run.wrote_array(path);
    }
    run.finish()
}

fn years_attr(header: &ArrayHeader) -> Result<Vec<i32>> {
    serde_json::from_value(header.attrs["years"].clone())
        .map_err(|e| Error::Validation(format!("array sidecar lacks a valid `years` attribute: {e}")))
}

fn read_surfaces(run: &mut Run<'_>) -> Result<Vec<SurfaceSamples>> {
    let path = run.out("u5mr.bin");
    let (header, values) = read_array(&path)?;
    run.read(&path);
    let years = years_attr(&header)?;
    let (Some(n_samples), Some(n_cells)) = (header.dim("sample"), header.dim("cell")) else {
        return Err(Error::Validation(format!("{}: expected sample and cell dimensions", path.display())));
    };
    let block = n_samples * n_cells;
    Ok(years
        .iter()
        .zip(values.chunks(block))
        .map(|(&year, v)| SurfaceSamples {
            year,
            n_samples,
            n_cells,
            values: v.to_vec(),
        })
        .collect())
}

#[derive(Serialize)]
struct DropRow {
    level: &'static str,
    region: String,
    start: i32,
    end: i32,
    median_drop: f64,
    q025: f64,
    q975: f64,
    prob_target: f64,
}

pub fn aggregate(s: &Settings) -> Result<()> {
    let mut run = Run::new("aggregate", s);
    require(&[&run.out("u5mr.bin"), &s.data.density, &s.data.regions])?;
    let surfaces = read_surfaces(&mut run)?;
    let density = AsciiGrid::read(&s.data.density)?;
    run.read(&s.data.density);
    let regions = RegionSet::read_geojson(&s.data.regions, &density.geometry)?;
    run.read(&s.data.regions);
    let national = regions.national(&s.national_id);
    let weights = density_weights(&density);

    let mut county = Vec::new();
    let mut nation = Vec::new();
    for surface in &surfaces {
        county.push(aggregate_region(surface, &weights, &regions)?);
        nation.push(aggregate_region(surface, &weights, &national)?);
    }
    let path = run.out("county.csv");
    write_region_csv(&path, &county)?;
    run.wrote(path);
    let path = run.out("national.csv");
    write_region_csv(&path, &nation)?;
    run.wrote(path);

    let n_samples = surfaces.first().map_or(0, |x| x.n_samples);
    let flat: Vec<f64> = county.iter().flat_map(|c| c.samples.iter().flatten().copied()).collect();
    let header = ArrayHeader::new(
        &[("year", county.len()), ("region", regions.len()), ("sample", n_samples)],
        json!({
            "years": county.iter().map(|c| c.year).collect::<Vec<_>>(),
            "ids": regions.ids,
        }),
    );
    let path = run.out("region_samples.bin");
    write_array(&path, &header, &flat)?;
    run.wrote_array(path);

    let (start, end, target) = s.mdg;
    let find = |v: &[CountySeries], y: i32| v.iter().position(|c| c.year == y);
    let mut drops = Vec::new();
    match (find(&county, start), find(&county, end)) {
        (Some(a), Some(b)) => {
            for (level, series) in [("county", &county), ("national", &nation)] {
                for d in mdg_drop(&series[a], &series[b], target)? {
                    drops.push(DropRow {
                        level,
                        region: d.region,
                        start,
                        end,
                        median_drop: d.median_drop,
                        q025: d.q025,
                        q975: d.q975,
                        prob_target: d.prob_target,
                    });
                }
            }
        }
        _ => log::warn!("aggregate: years {start} and {end} are not both predicted, drop summary is empty"),
    }
    let path = run.out("mdg.csv");
    write_csv(&path, drops)?;
    run.wrote(path);

    #[derive(Serialize)]
    struct RatioRow {
        year: i32,
        q95: f64,
        q05: f64,
        ratio: f64,
    }
    let populated: Vec<bool> = weights.iter().map(|w| *w > 0.0).collect();
    let mut ratios = Vec::new();
    for surface in &surfaces {
        let r = pixel_ratio_summary(surface, Some(&populated))?;
        ratios.push(RatioRow {
            year: surface.year,
            q95: r.q95,
            q05: r.q05,
            ratio: r.ratio,
        });
    }
    let path = run.out("pixel_ratio.csv");
    write_csv(&path, ratios)?;
    run.wrote(path);
    run.finish()
}

fn read_county_series(run: &mut Run<'_>) -> Result<Vec<CountySeries>> {
    let path = run.out("region_samples.bin");
    let (header, values) = read_array(&path)?;
    run.read(&path);
    let years = years_attr(&header)?;
    let ids: Vec<String> = serde_json::from_value(header.attrs["ids"].clone())
        .map_err(|e| Error::Validation(format!("{}: sidecar lacks region ids: {e}", path.display())))?;
    let n_samples = header.dim("sample").unwrap_or(0);
    let per_year = ids.len() * n_samples;
    Ok(years
        .iter()
        .zip(values.chunks(per_year.max(1)))
        .map(|(&year, v)| CountySeries {
            year,
            ids: ids.clone(),
            samples: v.chunks(n_samples.max(1)).map(<[f64]>::to_vec).collect(),
        })
        .collect())
}

#[derive(Debug, Serialize)]
struct TruthCheck {
    county_years: usize,
    coverage90: f64,
    correlation: f64,
}

fn truth_check(series: &[CountySeries], truth: &[(String, i32, f64)]) -> Option<TruthCheck> {
    let lookup: BTreeMap<(&str, i32), f64> = truth.iter().map(|(r, y, v)| ((r.as_str(), *y), *v)).collect();
    let mut pairs = Vec::new();
    let mut covered = 0;
    for c in series {
        for sum in c.summaries() {
            if let Some(&t) = lookup.get(&(sum.region.as_str(), c.year)) {
                covered += usize::from(sum.q05 <= t && t <= sum.q95);
                pairs.push((sum.median, t));
            }
        }
    }
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let (mx, my) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxy: f64 = pairs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pairs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let syy: f64 = pairs.iter().map(|(_, y)| (y - my).powi(2)).sum();
    Some(TruthCheck {
        county_years: pairs.len(),
        coverage90: covered as f64 / n,
        correlation: sxy / (sxx * syy).sqrt(),
    })
}

pub fn evaluate(s: &Settings) -> Result<()> {
    let mut run = Run::new("evaluate", s);
    let direct_path = run.out("direct.csv");
    require(&[&direct_path, &run.out("region_samples.bin")])?;
    let rows: Vec<DirectRow> = read_csv(&direct_path)?;
    run.read(&direct_path);
    let series = read_county_series(&mut run)?;

    let mut estimates = period_estimates("smoothed", &series, &s.evaluate_periods)?;
    let mut truth = Vec::new();
    for r in rows.iter().filter(|r| r.area != s.national_id) {
        let period: YearRange = r.period.parse()?;
        if !s.evaluate_periods.contains(&period) {
            continue;
        }
        match r.set.as_str() {
            "train" => {
                let est = DirectEstimate {
                    area: AreaSelection::National,
                    period,
                    u5mr: r.u5mr,
                    logit_u5mr: r.logit_u5mr,
                    logit_variance: r.logit_variance,
                    flag: r.flag,
                };
                estimates.extend(ModelEstimate::from_direct("weighted", &r.area, &est));
            }
            "test" => truth.push(TestValue {
                area: r.area.clone(),
                period,
                logit: r.logit_u5mr,
            }),
            _ => {}
        }
    }
    let meta = ReportMeta {
        split_seed: s.holdout.seed,
        config_digest: s.digest(),
    };
    let mut report = holdout_mse(&estimates, &truth, &s.evaluate_periods, meta)?;
    let criteria_path = run.out("criteria.json");
    if criteria_path.exists() {
        let text = u5mr_core::io::read_to_string(&criteria_path)?;
        let ic: InformationCriteria = serde_json::from_str(&text)?;
        report.criteria.insert(s.spec.variant.to_string(), ic);
        run.read(&criteria_path);
    }

    for (file, f) in [
        ("report.csv", u5mr_core::evaluate::ComparisonReport::write_csv as fn(&_, &Path) -> Result<()>),
        ("report_cells.csv", u5mr_core::evaluate::ComparisonReport::write_cells_csv),
        ("report_long.csv", u5mr_core::evaluate::ComparisonReport::write_long_csv),
        ("report.txt", u5mr_core::evaluate::ComparisonReport::write_summary),
    ] {
        let path = run.out(file);
        f(&report, &path)?;
        run.wrote(path);
    }
    let path = run.out("report.json");
    write_atomic_str(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    run.wrote(path);

    let truth_path = run.out("truth_county.csv");
    if truth_path.exists() {
        #[derive(Deserialize)]
        struct TruthRow {
            region: String,
            year: i32,
            u5mr: f64,
        }
        let t: Vec<TruthRow> = read_csv(&truth_path)?;
        run.read(&truth_path);
        let t: Vec<(String, i32, f64)> = t.into_iter().map(|r| (r.region, r.year, r.u5mr)).collect();
        if let Some(check) = truth_check(&series, &t) {
            log::info!(
                "evaluate: truth coverage {:.3} over {} county-years, correlation {:.3}",
                check.coverage90,
                check.county_years,
                check.correlation
            );
            let path = run.out("truth_check.json");
            write_atomic_str(&path, &(serde_json::to_string_pretty(&check)? + "\n"))?;
            run.wrote(path);
        }
    }
    eprint!("{}", report.summary_text());
    run.finish()
}

pub fn pipeline(s: &Settings) -> Result<()> {
    simulate(s)?;
    direct(s)?;
    fit_cmd(s)?;
    predict(s)?;
    aggregate(s)?;
    evaluate(s)
}
