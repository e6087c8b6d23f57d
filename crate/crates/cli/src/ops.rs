//! Subcommand implementations. Every stage is deterministic given the config
//! and seeds; completed artifacts are detected and skipped so interrupted
//! runs resume where they stopped.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use fdp_core::data::env_config_hash;
use fdp_core::nets::ComposeMode;
use fdp_core::toyenv::{ControlConfig, EnvConfig, Perturbation};
use fdp_core::training::LossReport;
use fdp_core::{
    evaluate, generate_demos, load_dataset, save_dataset, score_check, score_check_defaults,
    train_method, DemoDataset, Error, Method, PriorityOrder, Result, ResultRow, ResultTable,
    TrainedModel,
};

use crate::artifacts::{load_model, model_exists, save_model, write_text, EvalRecord, ModelKey, Paths};
use crate::config::{demo_seed, eval_seed, ExperimentConfig, VERSION};
use crate::svg::grouped_bar_svg;

/// Config plus the hash of the file it came from (computed before CLI
/// overrides so resumed and direct runs tag cells identically).
pub struct Loaded {
    pub cfg: ExperimentConfig,
    pub hash: u32,
}

pub fn load_config(path: &Path) -> Result<Loaded> {
    let cfg = ExperimentConfig::load(path)?;
    let hash = cfg.hash();
    Ok(Loaded { cfg, hash })
}

pub fn apply_overrides(
    cfg: &mut ExperimentConfig,
    method: Option<&str>,
    seed: Option<u64>,
    priority: Option<&str>,
) -> Result<()> {
    if let Some(m) = method {
        Method::parse(m)?;
        cfg.methods = vec![m.to_string()];
    }
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(p) = priority {
        PriorityOrder::parse(p)?;
        cfg.priorities = vec![p.to_string()];
    }
    Ok(())
}

fn clean_env(cfg: &ExperimentConfig) -> Result<EnvConfig> {
    Ok(EnvConfig::new(cfg.scale()?, Perturbation::none()))
}

// ---- gen-data -------------------------------------------------------------

pub fn gen_data(cfg: &ExperimentConfig, paths: &Paths) -> Result<()> {
    let env = clean_env(cfg)?;
    let scale = cfg.env.scale.clone();
    for &demos in &cfg.demos {
        for &seed in &cfg.seeds {
            let path = paths.dataset(&scale, demos, seed);
            if path.is_file() {
                let ds = load_dataset(&path)?;
                println!("dataset {} exists (hash {:08x})", path.display(), ds.provenance.content_hash);
                continue;
            }
            let ds = generate_demos(&env, &ControlConfig::default(), demos, demo_seed(seed))?;
            save_dataset(&path, &ds)?;
            println!("dataset {} written (hash {:08x})", path.display(), ds.provenance.content_hash);
        }
    }
    Ok(())
}

fn open_dataset(paths: &Paths, scale: &str, demos: usize, seed: u64) -> Result<DemoDataset> {
    let path = paths.dataset(scale, demos, seed);
    if !path.is_file() {
        return Err(Error::MissingDependency(format!(
            "missing dataset {}; run gen-data first",
            path.display()
        )));
    }
    load_dataset(&path)
}

// ---- train ----------------------------------------------------------------

#[derive(Serialize)]
struct LogHeader<'a> {
    version: &'a str,
    config_hash: u32,
}

#[derive(Serialize)]
struct LogLine<'a> {
    stage: &'a str,
    #[serde(flatten)]
    report: &'a LossReport,
}

fn write_train_log(path: &Path, config_hash: u32, model: &TrainedModel) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&LogHeader { version: VERSION, config_hash }).unwrap());
    out.push('\n');
    for (stage, reports) in &model.stages {
        for report in reports {
            out.push_str(&serde_json::to_string(&LogLine { stage, report }).unwrap());
            out.push('\n');
        }
    }
    write_text(path, &out)
}

fn train_one(loaded: &Loaded, paths: &Paths, key: &ModelKey) -> Result<()> {
    if model_exists(paths, key) {
        println!("model {} exists", paths.model(key).display());
        return Ok(());
    }
    let cfg = &loaded.cfg;
    let ds = open_dataset(paths, key.scale, key.demos, key.seed)?;
    let order = PriorityOrder::parse(key.priority)?;
    let items = ds.train_items(order);
    let cond_dims = ds.cond_dims(order);
    let mut tc = cfg.training.clone();
    tc.seed = key.seed;
    let schedule = cfg.schedule()?;
    let model = train_method(
        key.method,
        &items,
        ds.action_chunk_dim(),
        &cond_dims,
        cfg.net,
        &tc,
        &schedule,
    )?;
    save_model(paths, key, &model)?;
    write_train_log(&paths.train_log(key), loaded.hash, &model)?;
    println!("model {} written", paths.model(key).display());
    Ok(())
}

fn model_keys<'a>(cfg: &'a ExperimentConfig) -> Result<Vec<ModelKey<'a>>> {
    let mut keys = Vec::new();
    for m in &cfg.methods {
        let method = Method::parse(m)?;
        for priority in &cfg.priorities {
            for &demos in &cfg.demos {
                for &seed in &cfg.seeds {
                    keys.push(ModelKey {
                        method,
                        priority,
                        scale: &cfg.env.scale,
                        demos,
                        seed,
                    });
                }
            }
        }
    }
    Ok(keys)
}

pub fn train(loaded: &Loaded, paths: &Paths) -> Result<()> {
    for key in model_keys(&loaded.cfg)? {
        train_one(loaded, paths, &key)?;
    }
    Ok(())
}

// ---- eval -----------------------------------------------------------------

fn eval_one(loaded: &Loaded, paths: &Paths, key: &ModelKey, perturbation: &str) -> Result<ResultRow> {
    let cfg = &loaded.cfg;
    let out_path = paths.eval(key, perturbation);
    if let Ok(text) = std::fs::read_to_string(&out_path) {
        // a corrupt or stale cell is re-run, never reused
        if let Ok(rec) = serde_json::from_str::<EvalRecord>(&text) {
            if rec.config_hash == loaded.hash {
                return Ok(rec.row);
            }
        }
    }
    let ds = open_dataset(paths, key.scale, key.demos, key.seed)?;
    let model = load_model(paths, key)?;
    let order = PriorityOrder::parse(key.priority)?;
    let schedule = cfg.schedule()?;
    let sampler = cfg.sampler.build(key.method.composition(), key.seed)?;
    let eval_env = EnvConfig::new(cfg.scale()?, Perturbation::parse(perturbation)?);
    let rate = evaluate(
        &model,
        &ds,
        order,
        &eval_env,
        &sampler,
        &schedule,
        cfg.episodes,
        eval_seed(key.seed),
    )?;
    let row = ResultRow {
        method: key.method.name().into(),
        priority: key.priority.into(),
        scale: key.scale.into(),
        perturbation: perturbation.into(),
        demos: key.demos,
        seed: key.seed,
        success_rate: rate,
        episodes: cfg.episodes,
    };
    let rec = EvalRecord {
        version: VERSION.into(),
        config_hash: loaded.hash,
        env_hash: env_config_hash(&clean_env(cfg)?),
        row: row.clone(),
    };
    write_text(&out_path, &serde_json::to_string_pretty(&rec).unwrap())?;
    println!("eval {} written ({:.3})", out_path.display(), rate);
    Ok(row)
}

pub fn eval(loaded: &Loaded, paths: &Paths) -> Result<()> {
    for key in model_keys(&loaded.cfg)? {
        for perturbation in &loaded.cfg.env.perturbations {
            eval_one(loaded, paths, &key, perturbation)?;
        }
    }
    Ok(())
}

// ---- score-check ----------------------------------------------------------

#[derive(Serialize)]
struct ScoreCheckOut {
    version: String,
    mode: String,
    elapsed_s: f64,
    report: fdp_core::ScoreCheckReport,
}

pub fn score_check_cmd(paths: &Paths, mode_str: &str) -> Result<()> {
    let mode = match mode_str {
        "output" => ComposeMode::OutputCompose,
        "blockwise" => ComposeMode::BlockwiseCompose,
        other => return Err(Error::invalid(format!("unknown compose mode {other:?}"))),
    };
    let schedule = fdp_core::build_schedule(fdp_core::ScheduleKind::SquaredCosine, 100)?;
    let (items, size, config) = score_check_defaults();
    let start = std::time::Instant::now();
    let report = score_check(mode, items, size, &config, &schedule)?;
    let out = ScoreCheckOut {
        version: VERSION.into(),
        mode: mode_str.into(),
        elapsed_s: start.elapsed().as_secs_f64(),
        report,
    };
    let path = paths.score_check(mode_str);
    write_text(&path, &serde_json::to_string_pretty(&out).unwrap())?;
    let r = serde_json::to_value(&out).unwrap();
    println!(
        "score-check {}: composed rms {} vs joint rms {} (report {})",
        mode_str,
        r["report"]["composed"]["overall_rms"],
        r["report"]["joint"]["overall_rms"],
        path.display()
    );
    Ok(())
}

// ---- report ---------------------------------------------------------------

fn collect_records(paths: &Paths) -> Result<Vec<EvalRecord>> {
    let mut recs = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(paths.root())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("eval_") && n.ends_with(".json"))
        .collect();
    names.sort();
    for name in names {
        let text = std::fs::read_to_string(paths.root().join(&name))?;
        let rec: EvalRecord = serde_json::from_str(&text)
            .map_err(|e| Error::Corrupt(format!("bad eval record {name}: {e}")))?;
        recs.push(rec);
    }
    if recs.is_empty() {
        return Err(Error::MissingDependency(
            "no eval_*.json records found; run eval or sweep first".into(),
        ));
    }
    Ok(recs)
}

pub fn report(paths: &Paths, force: bool) -> Result<()> {
    let recs = collect_records(paths)?;
    let first_env = recs[0].env_hash;
    if !force {
        if let Some(r) = recs.iter().find(|r| r.env_hash != first_env) {
            return Err(Error::invalid(format!(
                "mixed env-config hashes {:08x} and {:08x}; pass --force to combine",
                first_env, r.env_hash
            )));
        }
    }
    let table = ResultTable {
        rows: recs.iter().map(|r| r.row.clone()).collect(),
    };
    write_results(paths, &table, recs[0].config_hash, first_env)?;

    let agg = table.aggregate();
    let mut md = String::new();
    md.push_str(&format!(
        "# Results\n\nversion {VERSION}, config hash {:08x}, env hash {:08x}\n",
        recs[0].config_hash, first_env
    ));
    // one table and one plot per evaluation setting
    let mut settings: Vec<(String, String, usize)> = Vec::new();
    for a in &agg {
        let key = (a.scale.clone(), a.perturbation.clone(), a.demos);
        if !settings.contains(&key) {
            settings.push(key);
        }
    }
    for (scale, perturbation, demos) in settings {
        md.push_str(&format!(
            "\n## scale {scale}, perturbation {perturbation}, {demos} demos\n\n\
             | method | priority | success mean | std | seeds |\n|---|---|---|---|---|\n"
        ));
        let mut labels = Vec::new();
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for a in agg
            .iter()
            .filter(|a| a.scale == scale && a.perturbation == perturbation && a.demos == demos)
        {
            md.push_str(&format!(
                "| {} | {} | {:.3} | {:.3} | {} |\n",
                a.method, a.priority, a.mean, a.std, a.seeds
            ));
            labels.push(format!("{}_{}", a.method, a.priority));
            means.push(a.mean);
            stds.push(a.std);
        }
        let svg_name = format!("plot_{scale}_{perturbation}_{demos}.svg");
        let title = format!("{scale}/{perturbation}/{demos} demos");
        write_text(
            &paths.root().join(&svg_name),
            &grouped_bar_svg(&title, &labels, &means, &stds),
        )?;
        md.push_str(&format!("\n![{title}]({svg_name})\n"));
    }
    write_text(&paths.root().join("report.md"), &md)?;
    println!("report.md and plots written to {}", paths.root().display());
    Ok(())
}

#[derive(Serialize)]
struct ResultsOut<'a> {
    version: &'a str,
    config_hash: u32,
    env_hash: u32,
    table: &'a ResultTable,
}

fn write_results(paths: &Paths, table: &ResultTable, config_hash: u32, env_hash: u32) -> Result<()> {
    write_text(&paths.root().join("results.csv"), &table.to_csv())?;
    let out = ResultsOut {
        version: VERSION,
        config_hash,
        env_hash,
        table,
    };
    write_text(
        &paths.root().join("results.json"),
        &serde_json::to_string_pretty(&out).unwrap(),
    )
}

// ---- sweep ----------------------------------------------------------------

fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("FDP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    cap.min(jobs).max(1)
}

/// Run independent jobs on a small worker pool, preserving job order in the
/// output. The first error wins; remaining jobs still complete.
fn run_pool<T: Send, F: Fn(usize) -> Result<T> + Sync>(jobs: usize, f: F) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..worker_count(jobs) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs {
                    break;
                }
                let r = f(i);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("job ran"))
        .collect()
}

pub fn sweep(loaded: &Loaded, paths: &Paths) -> Result<()> {
    let cfg = &loaded.cfg;
    gen_data(cfg, paths)?;

    let keys = model_keys(cfg)?;
    run_pool(keys.len(), |i| train_one(loaded, paths, &keys[i]))?;

    let cells: Vec<(&ModelKey, &String)> = keys
        .iter()
        .flat_map(|k| cfg.env.perturbations.iter().map(move |p| (k, p)))
        .collect();
    let rows = run_pool(cells.len(), |i| eval_one(loaded, paths, cells[i].0, cells[i].1))?;

    let table = ResultTable { rows };
    write_results(paths, &table, loaded.hash, env_config_hash(&clean_env(cfg)?))?;
    for a in table.aggregate() {
        println!(
            "{} {} {} {} {}d: {:.3} +/- {:.3} ({} seeds)",
            a.method, a.priority, a.scale, a.perturbation, a.demos, a.mean, a.std, a.seeds
        );
    }
    Ok(())
}
