//! End-to-end experiment orchestration: codebooks, datasets, training,
//! evaluation sweeps, plot emission. Stage outputs are keyed by the hash of
//! the configuration that affects them; completed stages are skipped on
//! rerun, so a run is idempotent.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::draw_channel;
use crate::codebook::{build_codebook, SpreadingMatrix};
use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::detect::{detect_camp, detect_dnn, detect_ls_bomp, detect_oracle, DetectMode};
use crate::error::{Error, Result};
use crate::metrics::{finalize, rank_auc, CellKey, CellResult, ConfusionCounts};
use crate::nn::{train, MlpModel};
use crate::plots;
use crate::scalar::Scalar;
use crate::sim::{build_dataset, snapshot_rng, synthesize_snapshot, ActivityPolicy, DatasetSpec, SnrSpec};

pub const STAGES: [&str; 5] = ["codebook", "dataset", "train", "evaluate", "plots"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub skipped: bool,
    pub wall_clock_s: f64,
    pub outputs: Vec<String>,
    pub completed_at_unix: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
}

/// File layout of one run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn codebook(&self, n: usize) -> PathBuf {
        self.root.join(format!("codebook_n{n}.txt"))
    }

    pub fn dataset(&self, n: usize) -> PathBuf {
        self.root.join(format!("dataset_n{n}.mds"))
    }

    pub fn model(&self, n: usize) -> PathBuf {
        self.root.join(format!("model_n{n}.ckpt"))
    }

    pub fn history(&self, n: usize) -> PathBuf {
        self.root.join(format!("history_n{n}.csv"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn stage_keys(&self) -> PathBuf {
        self.root.join("stage_keys.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
}

fn sha_of(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn load_keys(path: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default()
}

fn save_keys(path: &Path, keys: &BTreeMap<String, String>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(keys).expect("keys serialize"))?;
    Ok(())
}

fn stage_err(stage: &str, e: Error) -> Error {
    Error::Stage { stage: stage.to_string(), source: Box::new(e) }
}

/// Per-stage dependency keys derived from the config sections that feed it.
struct StageKeys {
    codebook: String,
    dataset: String,
    train: String,
    evaluate: String,
    plots: String,
}

impl StageKeys {
    fn derive(cfg: &ExperimentConfig) -> Result<Self> {
        let cb = toml::to_string(&cfg.codebook).map_err(|e| Error::Config(e.to_string()))?;
        let ch = toml::to_string(&cfg.channel).map_err(|e| Error::Config(e.to_string()))?;
        let ds = toml::to_string(&cfg.dataset).map_err(|e| Error::Config(e.to_string()))?;
        let tr = toml::to_string(&cfg.train).map_err(|e| Error::Config(e.to_string()))?;
        let ev = toml::to_string(&cfg.eval).map_err(|e| Error::Config(e.to_string()))?;
        let codebook = sha_of(&["codebook", &cb]);
        let dataset = sha_of(&["dataset", &codebook, &ch, &ds]);
        let train = sha_of(&["train", &dataset, &tr]);
        let evaluate = sha_of(&["evaluate", &train, &ch, &ev]);
        let plots = sha_of(&["plots", &evaluate]);
        Ok(Self { codebook, dataset, train, evaluate, plots })
    }

    fn get(&self, stage: &str) -> &str {
        match stage {
            "codebook" => &self.codebook,
            "dataset" => &self.dataset,
            "train" => &self.train,
            "evaluate" => &self.evaluate,
            "plots" => &self.plots,
            _ => unreachable!("unknown stage"),
        }
    }
}

fn stage_outputs(cfg: &ExperimentConfig, paths: &RunPaths, stage: &str) -> Vec<PathBuf> {
    let ns = &cfg.codebook.n_devices;
    match stage {
        "codebook" => ns.iter().map(|&n| paths.codebook(n)).collect(),
        "dataset" => ns.iter().map(|&n| paths.dataset(n)).collect(),
        "train" => ns
            .iter()
            .flat_map(|&n| [paths.model(n), paths.history(n)])
            .collect(),
        "evaluate" => vec![paths.metrics()],
        "plots" => plots::FIGURE_FAMILIES
            .iter()
            .map(|f| paths.plots_dir().join(format!("{f}.py")))
            .collect(),
        _ => unreachable!("unknown stage"),
    }
}

fn needs_run(
    keys_on_disk: &BTreeMap<String, String>,
    stage: &str,
    key: &str,
    outputs: &[PathBuf],
) -> bool {
    if keys_on_disk.get(stage).map(String::as_str) != Some(key) {
        return true;
    }
    outputs.iter().any(|p| !p.exists())
}

fn run_codebook_stage(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    for &n in &cfg.codebook.n_devices {
        let cb = build_codebook::<f64>(
            cfg.codebook.m_ary,
            cfg.codebook.code_length,
            n,
            cfg.codebook.rho,
            // one seed per device count keeps the codebooks independent
            cfg.codebook.seed.wrapping_add(n as u64),
        )?;
        cb.save(&paths.codebook(n))?;
    }
    Ok(())
}

fn dataset_spec(cfg: &ExperimentConfig, n: usize) -> DatasetSpec<f64> {
    DatasetSpec {
        size: cfg.dataset.size,
        fractions: cfg.dataset.fractions,
        snr_policy: crate::sim::SnrPolicy::UniformDb {
            lo: cfg.dataset.snr_lo_db,
            hi: cfg.dataset.snr_hi_db,
        },
        activity: ActivityPolicy::UniformN { choices: (1..=n.div_ceil(2)).collect() },
        seed: cfg.dataset.seed.wrapping_add(n as u64),
    }
}

fn run_dataset_stage(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    for &n in &cfg.codebook.n_devices {
        let cb = SpreadingMatrix::<f64>::load(&paths.codebook(n))?;
        let spec = dataset_spec(cfg, n);
        let blob = format!(
            "codebook_hash = \"{}\"\n{}",
            cb.hash(),
            toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?
        );
        let ds = build_dataset(&cb, &cfg.channel, &spec, blob)?;
        ds.save(&paths.dataset(n))?;
    }
    Ok(())
}

fn write_history_csv(path: &Path, report: &crate::nn::TrainReport) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,train_loss,val_loss,val_precision,val_recall,val_auc")?;
    for e in &report.history {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            e.val_loss,
            opt(e.val_precision),
            opt(e.val_recall),
            opt(e.val_auc)
        )?;
    }
    Ok(())
}

fn run_train_stage(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    for &n in &cfg.codebook.n_devices {
        let cb = SpreadingMatrix::<f64>::load(&paths.codebook(n))?;
        let ds = Dataset::load(&paths.dataset(n))?;
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = cfg.train.seed.wrapping_add(n as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        let mut model = MlpModel::<f64>::new(
            2 * cfg.codebook.code_length,
            n,
            &train_cfg,
            cb.hash(),
            &mut rng,
        );
        let report = train(&mut model, &ds, &train_cfg)?;
        model.save(&paths.model(n))?;
        write_history_csv(&paths.history(n), &report)?;
    }
    Ok(())
}

/// Per-detector accumulation for one evaluation cell.
struct CellAccum<T: Scalar> {
    counts: ConfusionCounts,
    scores: Vec<T>,
    labels: Vec<u8>,
    fallbacks: u64,
}

impl<T: Scalar> CellAccum<T> {
    fn new() -> Self {
        Self {
            counts: ConfusionCounts::default(),
            scores: Vec::new(),
            labels: Vec::new(),
            fallbacks: 0,
        }
    }

    fn absorb(&mut self, truth: &[usize], result: &crate::detect::DetectionResult<T>, n: usize) {
        self.counts.accumulate(truth, &result.support, n);
        self.scores.extend_from_slice(&result.scores);
        let mut lab = vec![0u8; n];
        for &i in truth {
            lab[i] = 1;
        }
        self.labels.extend_from_slice(&lab);
        if result.fallback {
            self.fallbacks += 1;
        }
    }

    fn merge(&mut self, other: CellAccum<T>) {
        self.counts.merge(&other.counts);
        self.scores.extend(other.scores);
        self.labels.extend(other.labels);
        self.fallbacks += other.fallbacks;
    }
}

/// Evaluation grid over one codebook/model pair. Every detector sees the
/// same snapshots; snapshot RNG streams depend only on the seed and cell
/// coordinates, so worker count never changes results.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_grid(
    cfg: &ExperimentConfig,
    codebook: &SpreadingMatrix<f64>,
    model: Option<&MlpModel<f64>>,
    or_percent: f64,
) -> Result<Vec<CellResult>> {
    let n_dev = codebook.n_devices();
    let hash = codebook.hash();
    let mut cells = Vec::new();
    for &n_active in &cfg.eval.n_active {
        if n_active > n_dev {
            continue;
        }
        for (snr_idx, &snr) in cfg.eval.snr_db.iter().enumerate() {
            let cell_seed = cfg
                .eval
                .seed
                .wrapping_mul(0x9e37_79b9)
                .wrapping_add((n_dev as u64) << 40)
                .wrapping_add((n_active as u64) << 24)
                .wrapping_add(snr_idx as u64);
            // fold per worker instead of collecting per-snapshot results:
            // tiny long-lived allocations interleaved with the matmul packing
            // buffers would otherwise fragment the heap badly
            let merged: BTreeMap<String, CellAccum<f64>> = (0..cfg.eval.snapshots_per_cell
                as u64)
                .into_par_iter()
                .try_fold(BTreeMap::new, |mut out, idx| -> Result<BTreeMap<String, CellAccum<f64>>> {
                    let mut rng = snapshot_rng(cell_seed, idx);
                    let psi = crate::sim::draw_activity::<f64, _>(
                        n_dev,
                        &ActivityPolicy::FixedN { n: n_active },
                        &mut rng,
                    )?;
                    let h = draw_channel(&cfg.channel, n_dev, &mut rng);
                    let snap =
                        synthesize_snapshot(codebook, &psi, &h, SnrSpec::Db(snr), &mut rng)?;
                    for det in &cfg.eval.detectors {
                        match det.as_str() {
                            "dnn" => {
                                let model = model.ok_or_else(|| {
                                    Error::Config("dnn detector requires a trained model".into())
                                })?;
                                let r = detect_dnn(
                                    model,
                                    &hash,
                                    &snap.y_p,
                                    DetectMode::KnownN(n_active),
                                )?;
                                out.entry("dnn:known_n".into())
                                    .or_insert_with(CellAccum::new)
                                    .absorb(&snap.support, &r, n_dev);
                                if cfg.eval.dnn_blind {
                                    let r = detect_dnn(
                                        model,
                                        &hash,
                                        &snap.y_p,
                                        DetectMode::Blind(cfg.eval.blind_threshold),
                                    )?;
                                    out.entry("dnn:blind".into())
                                        .or_insert_with(CellAccum::new)
                                        .absorb(&snap.support, &r, n_dev);
                                }
                            }
                            "ls_bomp" => {
                                let r = detect_ls_bomp(codebook, &snap.y_p, n_active)?;
                                out.entry("ls_bomp:known_n".into())
                                    .or_insert_with(CellAccum::new)
                                    .absorb(&snap.support, &r, n_dev);
                            }
                            "camp" => {
                                let r = detect_camp(
                                    codebook,
                                    &snap.y_p,
                                    n_active,
                                    cfg.eval.camp_iters,
                                    cfg.eval.camp_alpha,
                                )?;
                                out.entry("camp:known_n".into())
                                    .or_insert_with(CellAccum::new)
                                    .absorb(&snap.support, &r, n_dev);
                            }
                            "oracle" => {
                                let r = detect_oracle(
                                    codebook,
                                    &snap.y_p,
                                    n_active,
                                    cfg.eval.oracle_subset_cap as u128,
                                )?;
                                out.entry("oracle:known_n".into())
                                    .or_insert_with(CellAccum::new)
                                    .absorb(&snap.support, &r, n_dev);
                            }
                            other => {
                                return Err(Error::Config(format!("unknown detector '{other}'")))
                            }
                        }
                    }
                    Ok(out)
                })
                .try_reduce(BTreeMap::new, |mut a, b| {
                    for (k, v) in b {
                        a.entry(k).or_insert_with(CellAccum::new).merge(v);
                    }
                    Ok(a)
                })?;

            for (tag, acc) in merged {
                let (detector, mode) = tag.split_once(':').expect("tag format");
                let auc = rank_auc(&acc.scores, &acc.labels);
                cells.push(CellResult {
                    key: CellKey {
                        detector: detector.to_string(),
                        or_percent,
                        n_active,
                        snr_db: snr,
                        mode: mode.to_string(),
                    },
                    report: finalize(acc.counts, auc),
                    snapshots: cfg.eval.snapshots_per_cell as u64,
                });
            }
        }
    }
    Ok(cells)
}

fn run_evaluate_stage(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    let mut all = Vec::new();
    let l = cfg.codebook.code_length;
    for &n in &cfg.codebook.n_devices {
        let cb = SpreadingMatrix::<f64>::load(&paths.codebook(n))?;
        let or_percent = 100.0 * n as f64 / l as f64;
        let model = if cfg.eval.detectors.iter().any(|d| d == "dnn") {
            Some(MlpModel::<f64>::load(&paths.model(n))?)
        } else {
            None
        };
        all.extend(evaluate_grid(cfg, &cb, model.as_ref(), or_percent)?);
    }
    crate::metrics::write_results_csv(&paths.metrics(), &all)?;
    Ok(())
}

fn run_plots_stage(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    let _ = cfg;
    plots::emit_plots(&paths.metrics(), &paths.plots_dir())
}

/// Runs the requested stages in order, skipping stages whose keyed outputs
/// already exist. Returns the manifest.
pub fn run_pipeline(cfg: &ExperimentConfig, stages: &[&str]) -> Result<Manifest> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.output_dir);
    std::fs::create_dir_all(&paths.root)?;
    std::fs::create_dir_all(paths.plots_dir())?;
    let keys = StageKeys::derive(cfg)?;
    let mut keys_on_disk = load_keys(&paths.stage_keys());

    let mut manifest = load_manifest(&paths.manifest()).unwrap_or(Manifest {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash()?,
        seeds: BTreeMap::new(),
        stages: Vec::new(),
    });
    manifest.config_hash = cfg.hash()?;
    manifest.seeds = BTreeMap::from([
        ("codebook".to_string(), cfg.codebook.seed),
        ("dataset".to_string(), cfg.dataset.seed),
        ("train".to_string(), cfg.train.seed),
        ("evaluate".to_string(), cfg.eval.seed),
    ]);

    for &stage in stages {
        if !STAGES.contains(&stage) {
            return Err(Error::Config(format!("unknown stage '{stage}'")));
        }
        let key = keys.get(stage).to_string();
        let outputs = stage_outputs(cfg, &paths, stage);
        let skipped = !needs_run(&keys_on_disk, stage, &key, &outputs);
        let started = Instant::now();
        if !skipped {
            let result = match stage {
                "codebook" => run_codebook_stage(cfg, &paths),
                "dataset" => run_dataset_stage(cfg, &paths),
                "train" => run_train_stage(cfg, &paths),
                "evaluate" => run_evaluate_stage(cfg, &paths),
                "plots" => run_plots_stage(cfg, &paths),
                _ => unreachable!(),
            };
            if let Err(e) = result {
                // persist what we know before aborting
                save_manifest(&paths.manifest(), &manifest)?;
                save_keys(&paths.stage_keys(), &keys_on_disk)?;
                return Err(stage_err(stage, e));
            }
            keys_on_disk.insert(stage.to_string(), key.clone());
        }
        manifest.stages.retain(|s| s.name != stage);
        manifest.stages.push(StageRecord {
            name: stage.to_string(),
            key,
            skipped,
            wall_clock_s: started.elapsed().as_secs_f64(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            completed_at_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        });
        save_keys(&paths.stage_keys(), &keys_on_disk)?;
        save_manifest(&paths.manifest(), &manifest)?;
    }
    Ok(manifest)
}

fn load_manifest(path: &Path) -> Option<Manifest> {
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(manifest).expect("manifest serialize"))?;
    Ok(())
}
