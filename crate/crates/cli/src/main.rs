mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gridread::decoder::{decode, rescore_with_lm, write_results, NGramLm, PageRecord, PageResult};
use gridread::matching::{read_annotations, write_annotations, ClassId, PageAnnotation};
use gridread::metrics::{ar_star, det_prf, Detection, Prf};
use gridread::predictions::{load_maps, oracle_predict, save_maps};
use gridread::pseudolabels::PseudoLabelStore;
use gridread::simloop::{export_labels, run_stage, Dataset};
use gridread::synth::{gen_dataset, read_pages, write_pages, Layout, SynthConfig, SyntheticPage};
use gridread::viz::render_svg;
use gridread::Error;
use serde::Serialize;
use serde_json::json;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Invariant(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Invariant(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            Error::Invariant(_) => CliError::Invariant(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "gridread",
    version,
    about = "Decode, evaluate and simulate grid-based page text recognition"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Master seed; overrides every seed of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory; JSON goes to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run configuration (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Process pages sequentially. `false` lets `decode` spread pages over threads.
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set)]
    deterministic: bool,
    #[arg(long, global = true)]
    nms_iou: Option<f64>,
    #[arg(long, global = true)]
    dis_threshold: Option<f64>,
    #[arg(long, global = true)]
    sol_eol_threshold: Option<f64>,
    #[arg(long, global = true)]
    max_steps: Option<usize>,
    #[arg(long, global = true)]
    th_ar: Option<f64>,
    #[arg(long, global = true)]
    th_iou: Option<f64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic pages, their annotations and oracle prediction maps.
    Synth {
        #[arg(long, default_value_t = 10)]
        pages: usize,
        /// horizontal, rot90, rot180, rot270 or sine.
        #[arg(long)]
        layout: Option<String>,
    },
    /// Decode prediction map files (or directories of them) into line results.
    Decode {
        #[arg(required = true)]
        maps: Vec<PathBuf>,
        /// Annotation file whose transcripts train an n-gram LM for rescoring.
        #[arg(long)]
        lm_corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        lm_order: usize,
    },
    /// Score results against annotations.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// IoU threshold of the detection metrics.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Run the simulated weak-supervision loop.
    TrainSim,
    /// Export the pseudo-labels of a store for the given pages.
    ExportLabels {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        pages: PathBuf,
    },
    /// Render results as SVG.
    Viz {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Page to render; all pages go to the `--out` directory when absent.
        #[arg(long)]
        page: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gridread: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let config = load_config(&cli.common)?;
    let c = &cli.common;
    match cli.command {
        Command::Synth { pages, layout } => cmd_synth(c, config, pages, layout.as_deref()),
        Command::Decode {
            maps,
            lm_corpus,
            lm_order,
        } => cmd_decode(c, &config, &maps, lm_corpus.as_deref(), lm_order),
        Command::Eval {
            results,
            annotations,
            iou,
        } => cmd_eval(c, &results, &annotations, iou),
        Command::TrainSim => cmd_train_sim(c, &config),
        Command::ExportLabels { store, pages } => cmd_export_labels(c, &store, &pages),
        Command::Viz {
            results,
            annotations,
            page,
        } => cmd_viz(c, &results, annotations.as_deref(), page.as_deref()),
    }
}

fn load_config(c: &Common) -> CliResult<RunConfig> {
    let mut config = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed.or(config.seed) {
        config.apply_seed(seed);
    }
    let d = &mut config.decode;
    if let Some(v) = c.nms_iou {
        d.nms_iou = v;
    }
    if let Some(v) = c.dis_threshold {
        d.dis_threshold = v;
    }
    if let Some(v) = c.sol_eol_threshold {
        d.sol_eol_threshold = v;
    }
    if c.max_steps.is_some() {
        d.max_steps = c.max_steps;
    }
    let decode = config.decode;
    for stage in &mut config.train.stages {
        stage.decode = decode;
        if let Some(v) = c.th_ar {
            stage.th_ar = v;
        }
        if let Some(v) = c.th_iou {
            stage.th_iou = v;
        }
        if let Some(v) = c.epsilon {
            stage.epsilon = v;
        }
    }
    for (name, v) in [
        ("nms-iou", decode.nms_iou),
        ("dis-threshold", decode.dis_threshold),
        ("sol-eol-threshold", decode.sol_eol_threshold),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CliError::Usage(format!("--{name} {v} outside [0, 1]")));
        }
    }
    Ok(config)
}

/// Writes `text` to `--out` when given, stdout otherwise.
fn emit(c: &Common, text: &str) -> CliResult<()> {
    match &c.out {
        Some(path) => fs::write(path, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn to_json_line<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn gen_pages(config: &SynthConfig, n: usize) -> CliResult<Vec<SyntheticPage>> {
    Ok(gen_dataset(config, n).collect::<gridread::Result<Vec<_>>>()?)
}

fn cmd_synth(c: &Common, mut config: RunConfig, n_pages: usize, layout: Option<&str>) -> CliResult<()> {
    if let Some(name) = layout {
        config.synth.layout = name.parse::<Layout>()?;
    }
    config.synth.validate()?;
    config.noise.validate()?;
    let pages = gen_pages(&config.synth, n_pages)?;
    let Some(dir) = &c.out else {
        let mut out = String::new();
        for p in &pages {
            out.push_str(&serde_json::to_string(p)?);
            out.push('\n');
        }
        return emit(c, &out);
    };
    fs::create_dir_all(dir.join("maps"))?;
    write_pages(dir.join("pages.jsonl"), &pages)?;
    let annotations: Vec<PageAnnotation> = pages.iter().map(SyntheticPage::annotation).collect();
    write_annotations(dir.join("annotations.jsonl"), &annotations)?;
    let transcripts: Vec<PageAnnotation> = pages.iter().map(SyntheticPage::transcripts).collect();
    write_annotations(dir.join("transcripts.jsonl"), &transcripts)?;
    for (k, page) in pages.iter().enumerate() {
        let noise = config.noise.with_seed(gridread::synth::page_seed(config.noise.seed, k));
        let maps = oracle_predict::<f32>(page, &noise)?;
        save_maps(&maps, dir.join("maps").join(format!("{}.pgnm", page.page_id)))?;
    }
    let summary = json!({
        "pages": pages.len(),
        "chars": pages.iter().map(|p| p.chars.len()).sum::<usize>(),
        "out": dir,
        "files": ["pages.jsonl", "annotations.jsonl", "transcripts.jsonl", "maps/"],
        "config": config,
    });
    print!("{}", to_json_line(&summary)?);
    Ok(())
}

/// Map files named on the command line; directories contribute their
/// `.pgnm` and `.json` files in name order.
fn collect_map_files(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e == "pgnm" || e == "json")
                })
                .collect();
            found.sort();
            files.extend(found);
        } else if input.exists() {
            files.push(input.clone());
        } else {
            return Err(CliError::Data(format!("no such file: {}", input.display())));
        }
    }
    Ok(files)
}

fn page_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn decode_file(path: &Path, config: &RunConfig, lm: Option<&NGramLm>) -> CliResult<PageRecord> {
    let maps = load_maps::<f64>(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut result = decode(&maps, &config.decode)?;
    if let Some(lm) = lm {
        result = rescore_with_lm(&maps, &result, lm, &config.beam);
    }
    Ok(PageRecord::from_result(page_id_of(path), &result))
}

fn cmd_decode(
    c: &Common,
    config: &RunConfig,
    inputs: &[PathBuf],
    lm_corpus: Option<&Path>,
    lm_order: usize,
) -> CliResult<()> {
    let files = collect_map_files(inputs)?;
    let lm = match lm_corpus {
        Some(path) => {
            if lm_order == 0 {
                return Err(CliError::Usage("--lm-order must be at least 1".into()));
            }
            let annots = read_annotations(path)?;
            let corpus: Vec<Vec<ClassId>> = annots.iter().flat_map(|a| a.lines.iter().cloned()).collect();
            let n_cls = corpus.iter().flatten().copied().max().unwrap_or(1);
            Some(NGramLm::from_corpus(lm_order, n_cls as usize, &corpus, 0.1))
        }
        None => None,
    };
    let records: Vec<PageRecord> = if c.deterministic {
        files
            .iter()
            .map(|f| decode_file(f, config, lm.as_ref()))
            .collect::<CliResult<_>>()?
    } else {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        let chunk = files.len().div_ceil(workers).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = files
                .chunks(chunk)
                .map(|part| {
                    let lm = lm.as_ref();
                    s.spawn(move || {
                        part.iter()
                            .map(|f| decode_file(f, config, lm))
                            .collect::<CliResult<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(files.len());
            for h in handles {
                all.extend(
                    h.join()
                        .map_err(|_| CliError::Invariant("decode worker panicked".into()))??,
                );
            }
            Ok::<_, CliError>(all)
        })?
    };
    log::info!("decoded {} pages", records.len());
    match &c.out {
        Some(path) => write_results(path, &records)?,
        None => {
            let mut out = String::new();
            for r in &records {
                out.push_str(&serde_json::to_string(r)?);
                out.push('\n');
            }
            emit(c, &out)?;
        }
    }
    Ok(())
}

fn read_result_records(path: &Path) -> CliResult<Vec<PageRecord>> {
    Ok(gridread::decoder::read_results(path)?)
}

#[derive(Serialize)]
struct PrfReport {
    p: f64,
    r: f64,
    f: f64,
}

impl From<Prf> for PrfReport {
    fn from(v: Prf) -> Self {
        Self {
            p: v.precision,
            r: v.recall,
            f: v.f,
        }
    }
}

#[derive(Serialize)]
struct PageReport {
    page_id: String,
    ar_star: f64,
    cr_star: f64,
    n_ie: usize,
    n_de: usize,
    n_se: usize,
    n_total: usize,
}

#[derive(Serialize)]
struct EvalReport {
    ar_star: f64,
    cr_star: f64,
    /// Absent unless every page has ground-truth boxes and a stored shape.
    det_only: Option<PrfReport>,
    det_cls: Option<PrfReport>,
    per_page: Vec<PageReport>,
}

fn cmd_eval(c: &Common, results_path: &Path, annots_path: &Path, iou_th: f64) -> CliResult<()> {
    let records = read_result_records(results_path)?;
    let annots = read_annotations(annots_path)?;
    let mut by_id: BTreeMap<&str, &PageRecord> = BTreeMap::new();
    for r in &records {
        if by_id.insert(r.page_id.as_str(), r).is_some() {
            return Err(CliError::Data(format!("duplicate result page `{}`", r.page_id)));
        }
    }
    for id in by_id.keys() {
        if !annots.iter().any(|a| a.page_id == *id) {
            return Err(CliError::Data(format!("result page `{id}` has no annotation")));
        }
    }
    let hyps: Vec<Vec<Vec<ClassId>>> = annots
        .iter()
        .map(|a| {
            by_id
                .get(a.page_id.as_str())
                .map(|r| r.transcripts())
                .unwrap_or_default()
        })
        .collect();
    let refs: Vec<Vec<Vec<ClassId>>> = annots.iter().map(|a| a.lines.clone()).collect();
    let scores = ar_star(&hyps, &refs)?;

    let mut det = Some([(0, 0, 0); 2]);
    for a in &annots {
        let record = by_id.get(a.page_id.as_str());
        let Some(boxes) = a.boxes.as_ref() else {
            det = None;
            break;
        };
        // a page without results has no detections, so its shape is irrelevant
        let shape = match record {
            Some(r) => match r.shape {
                Some(s) => s,
                None => {
                    det = None;
                    break;
                }
            },
            None => gridread::geometry::GridShape::with_stride(1, 1)?,
        };
        let gts: Vec<Detection> = boxes
            .iter()
            .zip(&a.lines)
            .flat_map(|(bs, ls)| bs.iter().zip(ls))
            .map(|(b, &cls)| Detection {
                bbox: gridread::geometry::BBox::from_array(*b),
                cls,
                score: 1.0,
            })
            .collect();
        let dets: Vec<Detection> = record
            .map(|r| {
                r.lines
                    .iter()
                    .flat_map(|l| &l.chars)
                    .map(|ch| Detection {
                        bbox: gridread::geometry::BBox::new(ch.x, ch.y, ch.w, ch.h),
                        cls: ch.cls,
                        score: ch.score,
                    })
                    .collect()
            })
            .unwrap_or_default();
        if let Some(acc) = det.as_mut() {
            for (k, require_class) in [false, true].into_iter().enumerate() {
                let prf = det_prf(&dets, &gts, &shape, iou_th, require_class);
                acc[k].0 += prf.tp;
                acc[k].1 += prf.fp;
                acc[k].2 += prf.fn_;
            }
        }
    }
    let prf = |k: usize| det.map(|d| PrfReport::from(Prf::from_counts(d[k].0, d[k].1, d[k].2)));
    let report = EvalReport {
        ar_star: scores.ar_star,
        cr_star: scores.cr_star,
        det_only: prf(0),
        det_cls: prf(1),
        per_page: annots
            .iter()
            .zip(&scores.per_page)
            .map(|(a, e)| PageReport {
                page_id: a.page_id.clone(),
                ar_star: if e.n_total == 0 { 1.0 } else { e.ar() },
                cr_star: if e.n_total == 0 { 1.0 } else { e.cr() },
                n_ie: e.n_ie,
                n_de: e.n_de,
                n_se: e.n_se,
                n_total: e.n_total,
            })
            .collect(),
    };
    emit(c, &to_json_line(&report)?)
}

fn cmd_train_sim(c: &Common, config: &RunConfig) -> CliResult<()> {
    let Some(dir) = &c.out else {
        return Err(CliError::Usage("train-sim needs --out <dir>".into()));
    };
    if c.config.is_none() {
        log::warn!("no --config given; running the default single Train stage");
    }
    if config.train.stages.is_empty() {
        return Err(CliError::Usage("config lists no training stages".into()));
    }
    let real = gen_pages(&config.synth, config.train.real_pages)?;
    let synth_cfg = SynthConfig {
        seed: config.synth.seed.wrapping_add(0x5EED),
        ..config.synth.clone()
    };
    let mut synthetic = gen_pages(&synth_cfg, config.train.synthetic_pages)?;
    for p in &mut synthetic {
        p.page_id = format!("synthetic-{}", p.page_id);
    }
    let dataset = Dataset { real, synthetic };

    fs::create_dir_all(dir)?;
    let mut store = PseudoLabelStore::<f64>::new();
    let mut passes = String::new();
    let mut last = None;
    for stage in &config.train.stages {
        for report in run_stage(&dataset, &mut store, stage)? {
            passes.push_str(&serde_json::to_string(&report)?);
            passes.push('\n');
            last = Some(report);
        }
    }
    fs::write(dir.join("passes.jsonl"), passes)?;
    store.save(dir.join("store.jsonl"))?;
    let export = export_labels(&store, &dataset);
    fs::write(dir.join("labels.json"), to_json_line(&export)?)?;
    let real_annots: Vec<PageAnnotation> = dataset.real.iter().map(SyntheticPage::annotation).collect();
    write_annotations(dir.join("annotations.jsonl"), &real_annots)?;
    write_pages(dir.join("pages.jsonl"), &dataset.real)?;
    let summary = json!({
        "real_pages": dataset.real.len(),
        "synthetic_pages": dataset.synthetic.len(),
        "labels": export.records.len(),
        "quality": export.quality,
        "last_pass": last,
    });
    print!("{}", to_json_line(&summary)?);
    Ok(())
}

fn cmd_export_labels(c: &Common, store_path: &Path, pages_path: &Path) -> CliResult<()> {
    let store = PseudoLabelStore::<f64>::load(store_path)?;
    let dataset = Dataset {
        real: read_pages(pages_path)?,
        synthetic: Vec::new(),
    };
    emit(c, &to_json_line(&export_labels(&store, &dataset))?)
}

fn cmd_viz(c: &Common, results_path: &Path, annots_path: Option<&Path>, page: Option<&str>) -> CliResult<()> {
    let records = read_result_records(results_path)?;
    let annots = match annots_path {
        Some(p) => read_annotations(p)?,
        None => Vec::new(),
    };
    let render = |r: &PageRecord| -> CliResult<String> {
        let result: PageResult<f64> = r.to_result()?;
        let annot = annots.iter().find(|a| a.page_id == r.page_id);
        Ok(render_svg(&result, annot))
    };
    match page {
        Some(id) => {
            let record = records
                .iter()
                .find(|r| r.page_id == id)
                .ok_or_else(|| CliError::Data(format!("page `{id}` not in {}", results_path.display())))?;
            emit(c, &render(record)?)
        }
        None if records.len() == 1 => emit(c, &render(&records[0])?),
        None => {
            let Some(dir) = &c.out else {
                return Err(CliError::Usage(
                    "several pages: pass --page or an --out directory".into(),
                ));
            };
            fs::create_dir_all(dir)?;
            for r in &records {
                fs::write(dir.join(format!("{}.svg", r.page_id)), render(r)?)?;
            }
            Ok(())
        }
    }
}
