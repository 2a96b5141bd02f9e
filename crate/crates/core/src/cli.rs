//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{analysis_tables, write_tables};
use crate::config::{parse_override, RunConfig};
use crate::datagen::{gen_dataset, read_dataset, write_dataset, Dataset, Split};
use crate::error::{PilotError, Result};
use crate::metrics::{auroc, aupro, average_precision, fid, ks_two_sample, mmd2_rbf, pixel_auroc};
use crate::model::{init_model, ModelState};
use crate::numerics::RngStream;
use crate::objective::ScoringConfig;
use crate::trainer::{load_checkpoint, save_checkpoint, train};
use crate::tta::{score_all, select_pseudo, selection_stats, tta_adapt};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// FPR limit for AUPRO in reports.
pub const AUPRO_FPR_LIMIT: f64 = 0.3;

#[derive(Debug, Parser)]
#[command(name = "pilot", version, about = "Prompt-pool anomaly detection on toy encoders")]
pub struct Cli {
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Global seed; overrides the config file and PILOT_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (both splits unless --split is given).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// aux or target; without it, writes OUT/aux and OUT/target.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train on an auxiliary dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a checkpoint to an unlabeled target set.
    Tta {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a labelled dataset and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write analysis tables, selection statistics and (with --against)
    /// feature-distribution gap statistics.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Second dataset whose features are compared with --data.
        #[arg(long)]
        against: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first), runs, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &PilotError) -> i32 {
    if e.is_config_like() {
        EXIT_CONFIG
    } else {
        EXIT_NUMERIC
    }
}

fn execute(cli: &Cli) -> Result<()> {
    match cli.threads {
        Some(0) => Err(PilotError::config("--threads must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| PilotError::config(format!("thread pool: {e}")))?;
            pool.install(|| dispatch(cli))
        }
        None => dispatch(cli),
    }
}

fn resolve_config(cli: &Cli, file: &Option<PathBuf>, extra: &[(String, String)]) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        overrides.push(("seed".to_string(), s.to_string()));
    }
    for s in &cli.set {
        overrides.push(parse_override(s)?);
    }
    overrides.extend_from_slice(extra);
    RunConfig::resolve(file.as_deref(), &overrides)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { config, out, split } => {
            let cfg = resolve_config(cli, config, &[])?;
            let splits = match split {
                Some(s) => vec![(s.parse::<Split>()?, out.clone())],
                None => vec![(Split::Aux, out.join("aux")), (Split::Target, out.join("target"))],
            };
            for (s, dir) in splits {
                let ds = gen_dataset(&cfg.data, s)?;
                write_dataset(&ds, &dir)?;
                info!("wrote {} images to {}", ds.len(), dir.display());
            }
            Ok(())
        }
        Command::Train { data, config, out } => {
            let cfg = resolve_config(cli, config, &[])?;
            let aux = read_dataset(data)?;
            let model = train(init_model(&cfg.model)?, &aux, &cfg.train)?;
            save_checkpoint(&model, out)
        }
        Command::Tta {
            ckpt,
            target,
            rho,
            config,
            out,
        } => {
            let extra: Vec<(String, String)> = rho.iter().map(|r| ("tta.rho".to_string(), r.to_string())).collect();
            let cfg = resolve_config(cli, config, &extra)?;
            if same_file(ckpt, out) {
                return Err(PilotError::config(format!(
                    "refusing to overwrite input checkpoint {}",
                    ckpt.display()
                )));
            }
            let model = load_checkpoint(ckpt)?;
            let ds = read_dataset(target)?;
            let adapted = tta_adapt(model, &ds, &cfg.tta)?;
            save_checkpoint(&adapted, out)
        }
        Command::Eval { ckpt, data, config, out } => {
            let cfg = resolve_config(cli, config, &[])?;
            let model = load_checkpoint(ckpt)?;
            let ds = read_dataset(data)?;
            let report = evaluate(&model, &ds, &cfg.scoring, cfg.seed)?;
            write_json(out, &report)
        }
        Command::Analyze {
            ckpt,
            data,
            config,
            out,
            against,
        } => {
            let cfg = resolve_config(cli, config, &[])?;
            let model = load_checkpoint(ckpt)?;
            let ds = read_dataset(data)?;
            let feats = model.frozen_features(&ds)?;
            let tables = analysis_tables(&model, &feats, &cfg.scoring)?;
            write_tables(&tables, out)?;

            let scores = score_all(&model, &ds, &cfg.scoring)?;
            let sel = select_pseudo(&scores, cfg.tta.rho)?;
            let st = selection_stats(&sel, &ds.labels(), &ds.categories())?;
            write_json(
                &out.join("selection_stats.json"),
                &json!({
                    "rho": cfg.tta.rho,
                    "selected": sel.anomalous.len() + sel.normal.len(),
                    "evenness": st.evenness,
                    "cv": st.cv,
                    "noisy_rate": st.noisy_rate,
                }),
            )?;

            if let Some(other) = against {
                let ds2 = read_dataset(other)?;
                let gap = domain_gap(&model, &ds, &ds2, cfg.mmd_permutations, cfg.seed)?;
                write_json(&out.join("domain_gap.json"), &gap)?;
            }
            Ok(())
        }
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| PilotError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PilotError::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| PilotError::io(path, e))
}

/// `None` where the metric is undefined for this data (e.g. one class only).
fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(PilotError::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryReport {
    pub category: usize,
    pub n: usize,
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub aupro: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub aupro: Option<f64>,
    pub per_category: Vec<CategoryReport>,
    pub config_echo: Value,
    pub seed: u64,
}

fn metric_block(scores: &[f64], labels: &[bool], maps: &[Vec<f64>], masks: &[Vec<bool>], h: usize, w: usize) -> Result<[Option<f64>; 4]> {
    Ok([
        defined(auroc(scores, labels))?,
        defined(average_precision(scores, labels))?,
        defined(pixel_auroc(maps, masks))?,
        defined(aupro(maps, masks, h, w, AUPRO_FPR_LIMIT))?,
    ])
}

/// Image and pixel metrics overall and per category.
pub fn evaluate(model: &ModelState, ds: &Dataset, scoring: &ScoringConfig, seed: u64) -> Result<Report> {
    if ds.is_empty() {
        return Err(PilotError::config("evaluation set is empty"));
    }
    let feats = model.frozen_features(ds)?;
    let preds = model.predict_all(&feats, scoring)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(PilotError::NonFinite("image scores".into()));
    }
    let maps: Vec<Vec<f64>> = preds.into_iter().map(|p| p.map.fused).collect();
    let labels = ds.labels();
    let masks: Vec<Vec<bool>> = ds.records.iter().map(|r| r.mask.clone()).collect();
    let (h, w) = (ds.height, ds.width);
    let [ia, iap, pa, pro] = metric_block(&scores, &labels, &maps, &masks, h, w)?;

    let mut cats = ds.categories();
    cats.sort_unstable();
    cats.dedup();
    let mut per_category = Vec::with_capacity(cats.len());
    for c in cats {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.records[i].category == c).collect();
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let s = pick(&scores);
        let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        let m: Vec<Vec<f64>> = idx.iter().map(|&i| maps[i].clone()).collect();
        let g: Vec<Vec<bool>> = idx.iter().map(|&i| masks[i].clone()).collect();
        let [a, ap, p, r] = metric_block(&s, &l, &m, &g, h, w)?;
        per_category.push(CategoryReport {
            category: c,
            n: idx.len(),
            image_auroc: a,
            image_ap: ap,
            pixel_auroc: p,
            aupro: r,
        });
    }
    Ok(Report {
        image_auroc: ia,
        image_ap: iap,
        pixel_auroc: pa,
        aupro: pro,
        per_category,
        config_echo: json!({ "model": model.config, "scoring": scoring }),
        seed,
    })
}

/// MMD, FID and per-dimension KS between the projected global features of
/// two datasets.
pub fn domain_gap(model: &ModelState, a: &Dataset, b: &Dataset, permutations: usize, seed: u64) -> Result<Value> {
    let cls = |ds: &Dataset| -> Result<Vec<Vec<f64>>> {
        Ok(model
            .frozen_features(ds)?
            .iter()
            .map(|f| model.vision.project_features(f).x_cls)
            .collect())
    };
    let (x, y) = (cls(a)?, cls(b)?);
    let (mmd2, p) = mmd2_rbf(&x, &y, permutations, &mut RngStream::named(seed, "mmd"))?;
    let dims = x[0].len();
    let mut ks = Vec::with_capacity(dims);
    for d in 0..dims {
        let xa: Vec<f64> = x.iter().map(|r| r[d]).collect();
        let ya: Vec<f64> = y.iter().map(|r| r[d]).collect();
        let (stat, pv) = ks_two_sample(&xa, &ya)?;
        ks.push(json!({ "dim": d, "d": stat, "p": pv }));
    }
    Ok(json!({
        "mmd2": mmd2,
        "mmd_p": p,
        "permutations": permutations,
        "fid": fid(&x, &y)?,
        "ks": ks,
    }))
}
