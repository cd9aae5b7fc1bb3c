//! End-to-end runs: data generation, embedder and manipulator training,
//! evaluation and the ablation sweep, either in memory or as stages that
//! persist artifacts under a run directory and log them in `manifest.json`.

mod config;
mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::embedder::{load_embedder, save_embedder, train_embedder, EmbedderSet, TrainedEmbedder};
use crate::error::{Error, Result};
use crate::manipulator::{
    load_manipulator, save_manipulator, train_manipulator, FeatureGenerator, Generator,
    TrainedManipulator,
};
use crate::retrieval::{build_index, evaluate, manipulate_query, train_probe, EvalReport, Hit, KValue, ALL};
use crate::synthdata::{generate, load_features, save_features, split, Dataset, Split};

pub use config::RunConfig;
pub use manifest::{Artifact, Manifest, StageRecord, TOOL_VERSION};

pub const TRAIN_FILE: &str = "data/train.flamfeat";
pub const QUERY_FILE: &str = "data/query.flamfeat";
pub const GALLERY_FILE: &str = "data/gallery.flamfeat";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_TXT: &str = "sweep.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn embedder_file(attr: &str) -> String {
    format!("embedders/{attr}.flamemb")
}

pub fn manipulator_file(attr: &str) -> String {
    format!("manipulators/{attr}.flamgan")
}

/// Generates, splits and sparsifies the train labels. Query and gallery
/// keep every label.
pub fn make_split(cfg: &RunConfig) -> Result<Split> {
    let full = crate::synthdata::GenConfig {
        label_density: 1.0,
        ..cfg.gen.clone()
    };
    let data = generate(&full, &cfg.schema, cfg.seed)?;
    let mut sp = split(&data, cfg.split, cfg.seed)?;
    sp.train = sp.train.with_label_density(cfg.gen.label_density, cfg.seed)?;
    for d in [&mut sp.train, &mut sp.query, &mut sp.gallery] {
        d.config = cfg.gen.clone();
    }
    Ok(sp)
}

/// One embedder per schema attribute type, in schema order.
pub fn train_embedders(train: &Dataset, cfg: &RunConfig) -> Result<Vec<TrainedEmbedder>> {
    cfg.schema
        .types
        .iter()
        .map(|a| train_embedder(train, a, &cfg.embedder_config(a)))
        .collect()
}

pub fn embedder_set(trained: &[TrainedEmbedder]) -> EmbedderSet {
    let mut set = EmbedderSet::default();
    for t in trained {
        set.insert(t.embedder.clone(), t.dictionary.clone());
    }
    set
}

/// Trains a manipulator for every attribute in `cfg.manipulated_attrs()`,
/// with `variant` overriding the template's ablation flags when given.
pub fn train_manipulators(
    train: &Dataset,
    embedders: &EmbedderSet,
    cfg: &RunConfig,
    variant: Option<&str>,
) -> Result<Vec<TrainedManipulator>> {
    cfg.manipulated_attrs()
        .iter()
        .map(|a| {
            let mut mc = cfg.manipulator_config(a)?;
            if let Some(v) = variant {
                mc.apply_variant(v)?;
            }
            train_manipulator(train, embedders, &mc)
        })
        .collect()
}

/// Probe fit on `train`, index built over `gallery`, then the full report.
pub fn evaluate_generators(
    train: &Dataset,
    query: &Dataset,
    gallery: &Dataset,
    embedders: &EmbedderSet,
    generators: &[(String, Generator)],
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let index = build_index(gallery)?;
    let probe = train_probe(train, &cfg.probe_config())?;
    let m: Vec<(&str, &dyn FeatureGenerator)> = generators
        .iter()
        .map(|(a, g)| (a.as_str(), g as &dyn FeatureGenerator))
        .collect();
    evaluate(&index, query, embedders, &m, &probe, &cfg.ks, cfg.seed)
}

fn generators_of(trained: &[TrainedManipulator]) -> Vec<(String, Generator)> {
    trained
        .iter()
        .map(|t| (t.manipulator.target_attr.clone(), t.manipulator.generator.clone()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    /// Final convergence proxy averaged over the manipulated attributes.
    pub final_proxy: f64,
    /// Combined T@k.
    pub t_at_k: Vec<KValue>,
    pub report: EvalReport,
}

impl SweepRow {
    pub fn t_at(&self, k: usize) -> Option<f64> {
        self.t_at_k.iter().find(|v| v.k == k).map(|v| v.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl Sweep {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ks: Vec<usize> = self.rows.first().map(|r| r.t_at_k.iter().map(|v| v.k).collect()).unwrap_or_default();
        let head: String = ks.iter().map(|k| format!("{:>8}", format!("T@{k}"))).collect();
        let _ = writeln!(s, "{:<12}{head}{:>8}", "variant", "proxy");
        for r in &self.rows {
            let cells: String = r.t_at_k.iter().map(|v| format!("{:>8.3}", v.value)).collect();
            let _ = writeln!(s, "{:<12}{cells}{:>8.3}", r.variant, r.final_proxy);
        }
        s
    }
}

/// Trains and evaluates every variant in `cfg.sweep_variants` on the same
/// data and embedders.
pub fn ablation_sweep(sp: &Split, embedders: &EmbedderSet, cfg: &RunConfig) -> Result<Sweep> {
    let mut rows = Vec::new();
    for v in &cfg.sweep_variants {
        let trained = train_manipulators(&sp.train, embedders, cfg, Some(v))?;
        let report = evaluate_generators(&sp.train, &sp.query, &sp.gallery, embedders, &generators_of(&trained), cfg)?;
        let final_proxy = trained.iter().map(|t| t.log.final_proxy()).sum::<f64>() / trained.len().max(1) as f64;
        let t_at_k = report
            .t_at_k
            .iter()
            .find(|e| e.attr_type == ALL)
            .map(|e| e.values.clone())
            .unwrap_or_default();
        rows.push(SweepRow {
            variant: v.clone(),
            final_proxy,
            t_at_k,
            report,
        });
    }
    Ok(Sweep { seed: cfg.seed, rows })
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_data(root: &Path, rel: &str) -> Result<Dataset> {
    let p = root.join(rel);
    if !p.exists() {
        return Err(Error::io(
            &p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing; run gen-data first"),
        ));
    }
    load_features(p)
}

fn load_embedders(root: &Path, cfg: &RunConfig) -> Result<EmbedderSet> {
    let mut set = EmbedderSet::default();
    for a in &cfg.schema.types {
        let (e, d) = load_embedder(root.join(embedder_file(a)))?;
        set.insert(e, d);
    }
    Ok(set)
}

/// Hashes `artifacts`, stores the stage record and config snapshot in the
/// manifest and returns the record.
fn finish(
    cfg: &RunConfig,
    stage: &str,
    start: Instant,
    artifacts: &[String],
    details: serde_json::Value,
) -> Result<StageRecord> {
    let root = &cfg.out;
    let record = StageRecord {
        wall_clock_secs: start.elapsed().as_secs_f64(),
        artifacts: artifacts
            .iter()
            .map(|rel| Artifact::hash_file(root, rel))
            .collect::<Result<_>>()?,
        details,
    };
    let path = root.join(MANIFEST_FILE);
    let mut m = Manifest::load_or_new(&path)?;
    m.tool_version = TOOL_VERSION.into();
    m.config = serde_json::to_value(cfg)?;
    m.stages.insert(stage.to_owned(), record.clone());
    m.save(&path)?;
    Ok(record)
}

/// Writes the train, query and gallery feature files.
pub fn stage_gen_data(cfg: &RunConfig) -> Result<StageRecord> {
    let start = Instant::now();
    cfg.validate()?;
    ensure_dir(&cfg.out.join("data"))?;
    let sp = make_split(cfg)?;
    for (rel, d) in [(TRAIN_FILE, &sp.train), (QUERY_FILE, &sp.query), (GALLERY_FILE, &sp.gallery)] {
        save_features(d, cfg.out.join(rel))?;
    }
    let details = json!({
        "train": sp.train.len(),
        "query": sp.query.len(),
        "gallery": sp.gallery.len(),
    });
    finish(cfg, "gen-data", start, &[TRAIN_FILE.into(), QUERY_FILE.into(), GALLERY_FILE.into()], details)
}

/// One FLAMEMB checkpoint plus loss sidecar per attribute type.
pub fn stage_train_embedders(cfg: &RunConfig) -> Result<StageRecord> {
    let start = Instant::now();
    cfg.validate()?;
    let train = load_data(&cfg.out, TRAIN_FILE)?;
    ensure_dir(&cfg.out.join("embedders"))?;
    let mut rels = Vec::new();
    for t in train_embedders(&train, cfg)? {
        let rel = embedder_file(&t.embedder.attr_type);
        let path = cfg.out.join(&rel);
        save_embedder(&t.embedder, &t.dictionary, Some(&t.log), &path)?;
        rels.push(rel.clone());
        rels.push(format!("{rel}.log.json"));
    }
    finish(cfg, "train-embedders", start, &rels, json!({}))
}

/// One FLAMGAN checkpoint plus per-epoch log per manipulated attribute.
pub fn stage_train_manipulator(cfg: &RunConfig) -> Result<StageRecord> {
    let start = Instant::now();
    cfg.validate()?;
    let train = load_data(&cfg.out, TRAIN_FILE)?;
    let set = load_embedders(&cfg.out, cfg)?;
    ensure_dir(&cfg.out.join("manipulators"))?;
    let mut rels = Vec::new();
    let mut proxies = serde_json::Map::new();
    for t in train_manipulators(&train, &set, cfg, None)? {
        let rel = manipulator_file(&t.manipulator.target_attr);
        save_manipulator(&t.manipulator, Some(&t.log), cfg.out.join(&rel))?;
        rels.push(rel.clone());
        rels.push(format!("{rel}.log.json"));
        proxies.insert(t.manipulator.target_attr.clone(), json!(t.log.final_proxy()));
    }
    let m = &cfg.manipulator;
    let details = json!({
        "variant": m.variant_name(),
        "matching": m.matching,
        "sampling": m.sampling,
        "adversarial": m.adversarial,
        "label_mode": m.label_mode,
        "final_proxy": proxies,
    });
    finish(cfg, "train-manipulator", start, &rels, details)
}

/// Loads every artifact, evaluates and writes `report.json` and
/// `report.txt`.
pub fn stage_evaluate(cfg: &RunConfig) -> Result<(StageRecord, EvalReport)> {
    let start = Instant::now();
    cfg.validate()?;
    let train = load_data(&cfg.out, TRAIN_FILE)?;
    let query = load_data(&cfg.out, QUERY_FILE)?;
    let gallery = load_data(&cfg.out, GALLERY_FILE)?;
    let set = load_embedders(&cfg.out, cfg)?;
    let gens = cfg
        .manipulated_attrs()
        .into_iter()
        .map(|a| {
            let m = load_manipulator(cfg.out.join(manipulator_file(&a)))?;
            Ok((a, m.generator))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_generators(&train, &query, &gallery, &set, &gens, cfg)?;
    write_file(&cfg.out.join(REPORT_JSON), &serde_json::to_vec_pretty(&report)?)?;
    write_file(&cfg.out.join(REPORT_TXT), report.to_text().as_bytes())?;
    let rec = finish(cfg, "evaluate", start, &[REPORT_JSON.into(), REPORT_TXT.into()], json!({}))?;
    Ok((rec, report))
}

/// Runs the ablation sweep on the stored data and embedders and writes one
/// comparative table.
pub fn stage_sweep(cfg: &RunConfig) -> Result<(StageRecord, Sweep)> {
    let start = Instant::now();
    cfg.validate()?;
    let sp = Split {
        train: load_data(&cfg.out, TRAIN_FILE)?,
        query: load_data(&cfg.out, QUERY_FILE)?,
        gallery: load_data(&cfg.out, GALLERY_FILE)?,
    };
    let set = load_embedders(&cfg.out, cfg)?;
    let sweep = ablation_sweep(&sp, &set, cfg)?;
    write_file(&cfg.out.join(SWEEP_JSON), &serde_json::to_vec_pretty(&sweep)?)?;
    write_file(&cfg.out.join(SWEEP_TXT), sweep.to_text().as_bytes())?;
    let rec = finish(
        cfg,
        "sweep",
        start,
        &[SWEEP_JSON.into(), SWEEP_TXT.into()],
        json!({ "variants": cfg.sweep_variants }),
    )?;
    Ok((rec, sweep))
}

/// Text tables from the stored `report.json` and, if present, `sweep.json`.
pub fn render_report(out: &Path) -> Result<String> {
    let read = |rel: &str| -> Result<Vec<u8>> {
        let p = out.join(rel);
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let report: EvalReport = serde_json::from_slice(&read(REPORT_JSON)?)
        .map_err(|e| Error::Data(format!("{REPORT_JSON}: {e}")))?;
    let mut s = report.to_text();
    if out.join(SWEEP_JSON).exists() {
        let sweep: Sweep = serde_json::from_slice(&read(SWEEP_JSON)?)
            .map_err(|e| Error::Data(format!("{SWEEP_JSON}: {e}")))?;
        s.push('\n');
        s.push_str(&sweep.to_text());
    }
    Ok(s)
}

/// Where `manipulate` finds its inputs.
#[derive(Clone, Debug)]
pub struct ManipulateRequest {
    pub input: PathBuf,
    pub query: usize,
    pub attr_type: String,
    pub class: usize,
    pub k: usize,
    pub embedder: PathBuf,
    pub manipulator: PathBuf,
    pub gallery: PathBuf,
}

impl ManipulateRequest {
    /// Checkpoints and gallery taken from the run directory `out`.
    pub fn in_run(out: &Path, input: PathBuf, attr_type: &str, class: usize, k: usize) -> Self {
        Self {
            input,
            query: 0,
            attr_type: attr_type.to_owned(),
            class,
            k,
            embedder: out.join(embedder_file(attr_type)),
            manipulator: out.join(manipulator_file(attr_type)),
            gallery: out.join(GALLERY_FILE),
        }
    }
}

/// Manipulates one query record toward `class` and ranks the gallery.
pub fn manipulate_and_search(req: &ManipulateRequest) -> Result<Vec<Hit>> {
    let input = load_features(&req.input)?;
    input.schema.index_of(&req.attr_type)?;
    let record = input.records.get(req.query).ok_or_else(|| {
        Error::Contract(format!("query {} out of range for {} records", req.query, input.len()))
    })?;
    let (_, dictionary) = load_embedder(&req.embedder)?;
    let m = load_manipulator(&req.manipulator)?;
    if m.target_attr != req.attr_type || dictionary.attr_type != req.attr_type {
        return Err(Error::Config(format!(
            "checkpoints are for {:?}/{:?}, not {:?}",
            m.target_attr, dictionary.attr_type, req.attr_type
        )));
    }
    let index = build_index(&load_features(&req.gallery)?)?;
    let x: Vec<f64> = record.feature.iter().map(|&v| f64::from(v)).collect();
    let q = manipulate_query(&m.generator, &dictionary, &x, req.class)?;
    Ok(index.search(&q, req.k)?.hits)
}

/// `rank,id,similarity` lines, ranks from 1.
pub fn format_hits(hits: &[Hit]) -> String {
    hits.iter()
        .enumerate()
        .map(|(i, h)| format!("{},{},{:.6}\n", i + 1, h.instance_id, h.similarity))
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
