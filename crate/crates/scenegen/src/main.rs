//! Command-line entry point: dataset synthesis and ingestion, graph
//! building, training, evaluation, on-demand generation, OpenSCENARIO
//! emission, and kinematic playback.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use scenegen::config::RunConfig;
use scenegen::eval::{
    answer_correctness, graph_to_statements, render_metric_table, render_scr_table, TokenJaccard,
};
use scenegen::graph::{
    load_graphs, prune_to_seed, save_graphs, Flavor, SampleMatch, SeedDatabase, TemporalGraph,
};
use scenegen::ingest::{
    label_windows, parse_annotations, split_dataset, window_scenarios, window_to_graph,
    ScenarioWindow, DOWNSAMPLE, WINDOW,
};
use scenegen::model::{
    evaluate_classification, kfold, load_checkpoint, prepare_graphs, save_checkpoint, train,
    TripletEncoder,
};
use scenegen::ontology::Ontology;
use scenegen::playback::{batch_consistency, run, write_trajectories_csv, EgoPolicy};
use scenegen::scenario::{graph_to_script, handle_request, mirror, ScenarioRequest, ScenarioScript};
use scenegen::synth::{generate_synthetic, synth_windows};
use scenegen::xosc::{emit_openscenario, validate_xosc, write_schema};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "scenegen", version, about = "On-demand traffic scenario generation")]
struct Cli {
    /// TOML configuration file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for parallel sections (0 = automatic).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Ontology override file (JSON).
    #[arg(long, global = true)]
    ontology: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scenario corpus: annotations, graphs, splits,
    /// and the seed database.
    Synth {
        /// Number of scenarios.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Parse annotation files into windowed, split scenario sets.
    Ingest {
        /// Annotation JSON files.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// Build temporal graphs and the seed database from windowed scenarios.
    BuildGraphs {
        /// Dataset directory (defaults to the output directory).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the link-prediction model.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Triplet encoder: mlp-gcn, gru-gcn, gru, gat, mlp.
        #[arg(long)]
        variant: Option<String>,
        /// Run k-fold cross-validation over train+val before the final fit.
        #[arg(long)]
        kfold: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Serve scenario requests: predicted graph, script, and .xosc each.
    Generate {
        /// Request JSON: one object or an array of objects.
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed database directory (defaults to <out-dir>/db).
        #[arg(long)]
        db: Option<PathBuf>,
        /// Mirror the topological information (left/right handedness).
        #[arg(long)]
        mirror: bool,
    },
    /// Emit OpenSCENARIO XML from a script JSON file.
    Emit {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run scripts in the kinematic playback and report SCR.
    Play {
        /// Script JSON files.
        #[arg(long, required = true, num_args = 1..)]
        script: Vec<PathBuf>,
        /// Ego policy: normal, cautious, aggressive.
        #[arg(long)]
        policy: Option<String>,
    },
    /// Statement-level factual correctness between two graph files.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(ontology) = &cli.ontology {
        cfg.ontology = Some(ontology.clone());
    }
    cfg.resolve();

    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .context("failed to size the thread pool")?;
    }

    let ontology_owned = match &cfg.ontology {
        Some(path) => Some(Ontology::from_json_file(path)?),
        None => None,
    };
    let ont: &Ontology = ontology_owned.as_ref().unwrap_or_else(|| Ontology::builtin());

    match cli.cmd {
        Cmd::Synth { n } => cmd_synth(&cfg, n, ont),
        Cmd::Ingest { input } => cmd_ingest(&cfg, &input, ont),
        Cmd::BuildGraphs { data } => {
            cmd_build_graphs(&data.unwrap_or_else(|| cfg.out_dir.clone()), ont)
        }
        Cmd::Train {
            data,
            epochs,
            variant,
            kfold,
        } => cmd_train(&cfg, data, epochs, variant, kfold, ont),
        Cmd::Eval { checkpoint, data } => cmd_eval(&cfg, &checkpoint, data, ont),
        Cmd::Generate {
            request,
            checkpoint,
            db,
            mirror,
        } => cmd_generate(&cfg, &request, &checkpoint, db, mirror, ont),
        Cmd::Emit { script, out } => cmd_emit(&script, out),
        Cmd::Play { script, policy } => cmd_play(&cfg, &script, policy),
        Cmd::Metrics { pred, gold } => cmd_metrics(&cfg, &pred, &gold),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct SplitManifest {
    seed: u64,
    train: usize,
    val: usize,
    test: usize,
}

fn write_dataset(
    out_dir: &Path,
    windows: &[ScenarioWindow],
    seed: u64,
    ont: &Ontology,
) -> Result<()> {
    let split = split_dataset(windows, seed);
    std::fs::create_dir_all(out_dir.join("windows"))?;
    std::fs::create_dir_all(out_dir.join("graphs"))?;
    let manifest = SplitManifest {
        seed,
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
    };
    for (name, part) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        write_json(&out_dir.join("windows").join(format!("{name}.json")), part)?;
        let graphs: Vec<TemporalGraph> = part
            .iter()
            .map(|w| window_to_graph(w, ont))
            .collect::<Result<_, _>>()?;
        save_graphs(&out_dir.join("graphs").join(format!("{name}.jsonl")), &graphs)?;
        if name == "train" {
            let mut db = SeedDatabase::new();
            for g in &graphs {
                db.insert(prune_to_seed(g, false), ont)?;
            }
            db.save(&out_dir.join("db"))?;
        }
    }
    write_json(&out_dir.join("split.json"), &manifest)?;
    eprintln!(
        "dataset: {} train / {} val / {} test under {}",
        manifest.train,
        manifest.val,
        manifest.test,
        out_dir.display()
    );
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, n: Option<usize>, ont: &Ontology) -> Result<()> {
    let mut synth_cfg = cfg.synth.clone();
    if let Some(n) = n {
        synth_cfg.n_scenarios = n;
    }
    let files = generate_synthetic(&synth_cfg, ont)?;
    let ann_dir = cfg.out_dir.join("annotations");
    std::fs::create_dir_all(&ann_dir)?;
    for (i, file) in files.iter().enumerate() {
        write_json(&ann_dir.join(format!("scenario_{i:05}.json")), file)?;
    }
    let windows = synth_windows(&files)?;
    write_dataset(&cfg.out_dir, &windows, cfg.seed, ont)?;
    eprintln!("synth: {} scenarios", files.len());
    Ok(())
}

fn cmd_ingest(cfg: &RunConfig, inputs: &[PathBuf], ont: &Ontology) -> Result<()> {
    let mut windows = Vec::new();
    let mut skipped = 0usize;
    for path in inputs {
        let file = std::fs::File::open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        let frames = parse_annotations(std::io::BufReader::new(file))
            .with_context(|| format!("parsing {}", path.display()))?;
        for window in window_scenarios(&frames, DOWNSAMPLE, WINDOW) {
            match label_windows(vec![window]) {
                Ok(mut labeled) => windows.append(&mut labeled),
                Err(_) => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} windows without any AV action");
    }
    write_dataset(&cfg.out_dir, &windows, cfg.seed, ont)?;
    Ok(())
}

fn load_windows(dir: &Path, name: &str) -> Result<Vec<ScenarioWindow>> {
    let path = dir.join("windows").join(format!("{name}.json"));
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_build_graphs(data_dir: &Path, ont: &Ontology) -> Result<()> {
    std::fs::create_dir_all(data_dir.join("graphs"))?;
    for name in ["train", "val", "test"] {
        let windows = load_windows(data_dir, name)?;
        let graphs: Vec<TemporalGraph> = windows
            .iter()
            .map(|w| window_to_graph(w, ont))
            .collect::<Result<_, _>>()?;
        save_graphs(&data_dir.join("graphs").join(format!("{name}.jsonl")), &graphs)?;
        if name == "train" {
            let mut db = SeedDatabase::new();
            for g in &graphs {
                db.insert(prune_to_seed(g, false), ont)?;
            }
            db.save(&data_dir.join("db"))?;
        }
        eprintln!("build-graphs: {name}: {} graphs", graphs.len());
    }
    Ok(())
}

fn load_split_graphs(dir: &Path, name: &str) -> Result<Vec<TemporalGraph>> {
    let path = dir.join("graphs").join(format!("{name}.jsonl"));
    Ok(load_graphs(&path, Flavor::Scenario)
        .with_context(|| format!("loading {}", path.display()))?)
}

fn cmd_train(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    epochs: Option<usize>,
    variant: Option<String>,
    kfold_k: Option<usize>,
    ont: &Ontology,
) -> Result<()> {
    let data_dir = data.unwrap_or_else(|| cfg.out_dir.clone());
    let train_graphs = load_split_graphs(&data_dir, "train")?;
    let val_graphs = load_split_graphs(&data_dir, "val")?;
    if train_graphs.is_empty() {
        bail!("training set is empty; run synth or ingest first");
    }

    let mut model_cfg = cfg.model.clone();
    if let Some(epochs) = epochs {
        model_cfg.epochs = epochs;
    }
    if let Some(variant) = &variant {
        model_cfg.encoder = TripletEncoder::from_name(variant)
            .with_context(|| format!("unknown encoder variant {variant}"))?;
    }

    if let Some(k) = kfold_k {
        let mut pooled = train_graphs.clone();
        pooled.extend(val_graphs.iter().cloned());
        let scores = kfold(&model_cfg, &pooled, ont, k)?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        write_json(
            &cfg.out_dir.join("kfold.json"),
            &serde_json::json!({ "k": k, "val_f1": scores, "mean": mean }),
        )?;
        eprintln!("kfold: per-fold F1 {scores:?}, mean {mean:.3}");
    }

    let (model, report) = train(model_cfg, &train_graphs, &val_graphs, ont)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ckpt_path = cfg.out_dir.join("checkpoint.json");
    save_checkpoint(&model, None, &ckpt_path)?;
    report.write_csv(&cfg.out_dir.join("history.csv"))?;
    let last = report.history.last();
    eprintln!(
        "train: {} epochs, final loss {:.4}, best epoch {:?}, checkpoint {}",
        report.history.len(),
        last.map_or(f64::NAN, |e| e.train_loss),
        report.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<PathBuf>,
    ont: &Ontology,
) -> Result<()> {
    let data_dir = data.unwrap_or_else(|| cfg.out_dir.clone());
    let (model, _) = load_checkpoint(checkpoint, ont)?;
    let test_graphs = load_split_graphs(&data_dir, "test")?;
    if test_graphs.is_empty() {
        bail!("test set is empty");
    }
    let items = prepare_graphs(&test_graphs, ont, &model.cfg)?;
    let bundle = evaluate_classification(&model, &items)?;

    // Contextual evaluation: statements of predicted vs ground-truth graphs.
    let scorer = TokenJaccard;
    let mut factual = 0.0;
    let mut semantic = 0.0;
    for g in &test_graphs {
        let seed = prune_to_seed(g, true);
        let predicted = model.predict(&seed, ont)?;
        let report = answer_correctness(
            &graph_to_statements(&predicted),
            &graph_to_statements(g),
            &scorer,
        );
        factual += report.factual;
        semantic += report.semantic;
    }
    let n = test_graphs.len() as f64;

    write_json(
        &cfg.out_dir.join("metrics.json"),
        &serde_json::json!({
            "classification": bundle,
            "answer_correctness": {
                "factual": factual / n,
                "semantic_token_jaccard": semantic / n,
            },
        }),
    )?;
    let table = render_metric_table(&[("test", &bundle)]);
    std::fs::write(cfg.out_dir.join("metrics.txt"), &table)?;
    print!("{table}");
    println!(
        "answer correctness: factual {:.3}, semantic (token jaccard) {:.3}",
        factual / n,
        semantic / n
    );
    Ok(())
}

fn load_requests(path: &Path) -> Result<Vec<ScenarioRequest>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(batch) = serde_json::from_str::<Vec<ScenarioRequest>>(&text) {
        return Ok(batch);
    }
    Ok(vec![serde_json::from_str::<ScenarioRequest>(&text)?])
}

fn cmd_generate(
    cfg: &RunConfig,
    request: &Path,
    checkpoint: &Path,
    db: Option<PathBuf>,
    mirror_flag: bool,
    ont: &Ontology,
) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint, ont)?;
    let db_dir = db.unwrap_or_else(|| cfg.out_dir.join("db"));
    let database = SeedDatabase::load(&db_dir, ont)
        .with_context(|| format!("loading seed database from {}", db_dir.display()))?;
    let requests = load_requests(request)?;
    let gen_dir = cfg.out_dir.join("generated");
    std::fs::create_dir_all(&gen_dir)?;
    write_schema(&gen_dir.join("openscenario_subset.schema.json"))?;

    for (i, req) in requests.iter().enumerate() {
        req.validate()?;
        let (_, matched) = database.sample_with_info(&req.agents, req.seed)?;
        if matched != SampleMatch::Exact {
            eprintln!(
                "warning: request {i}: no exact seed for agents {:?}, used {:?} fallback",
                req.agents, matched
            );
        }
        let predicted = handle_request(req, &database, &model, ont)?;
        let mut script = graph_to_script(&predicted, &cfg.bands, cfg.handedness, ont)?;
        if mirror_flag {
            script = mirror(&script);
        }
        let xml = emit_openscenario(&script);
        validate_xosc(&xml)?;
        save_graphs(&gen_dir.join(format!("{i:03}.graph.jsonl")), &[predicted])?;
        write_json(&gen_dir.join(format!("{i:03}.script.json")), &script)?;
        std::fs::write(gen_dir.join(format!("{i:03}.xosc")), xml)?;
    }
    eprintln!(
        "generate: {} request(s) -> {}",
        requests.len(),
        gen_dir.display()
    );
    Ok(())
}

fn read_script(path: &Path) -> Result<ScenarioScript> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_emit(script: &Path, out: Option<PathBuf>) -> Result<()> {
    let script = read_script(script)?;
    let xml = emit_openscenario(&script);
    validate_xosc(&xml)?;
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, xml)?;
            eprintln!("emit: wrote {}", path.display());
        }
        None => print!("{xml}"),
    }
    Ok(())
}

fn cmd_play(cfg: &RunConfig, scripts: &[PathBuf], policy: Option<String>) -> Result<()> {
    let policy = match policy {
        Some(name) => {
            EgoPolicy::from_name(&name).with_context(|| format!("unknown policy {name}"))?
        }
        None => cfg.policy.clone(),
    };
    let play_dir = cfg.out_dir.join("play");
    std::fs::create_dir_all(&play_dir)?;

    let mut batch = Vec::new();
    for path in scripts {
        let script = read_script(path)?;
        let requested = script.criticality;
        let result = run(&script, &policy, &cfg.playback, cfg.seed)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "script".into());
        write_trajectories_csv(&result, &play_dir.join(format!("{stem}.trajectories.csv")))?;
        eprintln!(
            "play: {stem}: min distance {:.2} m, realized {}, requested {}",
            result.min_ego_actor_distance, result.realized, requested
        );
        batch.push((script, requested));
    }
    let report = batch_consistency(&batch, &policy, &cfg.playback)?;
    write_json(&play_dir.join("scr_report.json"), &report)?;
    print!("{}", render_scr_table(&[(policy.name.as_str(), &report)]));
    println!(
        "overall SCR: {:.1}% ({}/{})",
        report.overall_pct, report.matched, report.total
    );
    Ok(())
}

fn cmd_metrics(cfg: &RunConfig, pred: &Path, gold: &Path) -> Result<()> {
    let pred_graphs = load_graphs(pred, Flavor::Scenario)?;
    let gold_graphs = load_graphs(gold, Flavor::Scenario)?;
    if pred_graphs.len() != gold_graphs.len() {
        bail!(
            "graph count mismatch: {} predicted vs {} gold",
            pred_graphs.len(),
            gold_graphs.len()
        );
    }
    let scorer = TokenJaccard;
    let mut reports = Vec::new();
    for (p, g) in pred_graphs.iter().zip(&gold_graphs) {
        reports.push(answer_correctness(
            &graph_to_statements(p),
            &graph_to_statements(g),
            &scorer,
        ));
    }
    let n = reports.len() as f64;
    let factual: f64 = reports.iter().map(|r| r.factual).sum::<f64>() / n;
    let semantic: f64 = reports.iter().map(|r| r.semantic).sum::<f64>() / n;
    write_json(
        &cfg.out_dir.join("statement_metrics.json"),
        &serde_json::json!({
            "pairs": reports,
            "mean_factual": factual,
            "mean_semantic_token_jaccard": semantic,
        }),
    )?;
    println!("factual correctness (mean): {factual:.4}");
    println!("semantic token-jaccard (mean): {semantic:.4}");
    Ok(())
}
