//! Per-seed stages: data, sft, distill, sdft_only, soft (one run per alpha,
//! best on validation kept) and eval. Each stage is skipped when the manifest
//! shows it complete under the same chained hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use softrec::data::{filter_min_interactions, load_interactions, split_chronological, synthesize_dataset};
use softrec::distill::{build_sd_dataset, mean_real_loss, mean_sd_loss, read_jsonl, write_jsonl, SdPair};
use softrec::grounding::ItemEmbeddingIndex;
use softrec::metrics::{evaluate, write_predictions};
use softrec::scheduler::SchedulerState;
use softrec::trainer::{train, EpochReport, HitRatioValidator, InitFrom, TauSource, TrainError};
use softrec::{MetricsReport, ModelState, SplitDataset, TrainConfig};

use crate::config::{digest, RunConfig};
use crate::manifest::{RunManifest, StageRecord};
use crate::CliError;

pub const SEED_DIR_PREFIX: &str = "seed_";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const TEST_METRICS_FILE: &str = "test_metrics.csv";
pub const ALPHA_SWEEP_FILE: &str = "alpha_sweep.csv";
pub const EPOCH_COLUMNS: &str = "regime,alpha,epoch,loss,loss_real,loss_sd,tau,d_t,d0,m,valid_score";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Sft,
    Distill,
    SdftOnly,
    /// SOFT from `train.soft.init_from`.
    Soft,
    /// SOFT from the other starting point.
    SoftOther,
    Eval,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("{SEED_DIR_PREFIX}{seed}"))
}

fn alpha_tag(alpha: f64) -> String {
    format!("alpha_{alpha}")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Best epoch of one training run, kept next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub regime: String,
    pub alpha: Option<f64>,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillStats {
    pub n_pairs: usize,
    pub n_empty: usize,
    /// Mean loss of the SFT checkpoint on its own generations.
    pub mean_sd_loss: f64,
    /// Mean loss of the SFT checkpoint on the real targets.
    pub mean_real_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryBaseline {
    pub category: String,
    /// Share of test targets in the most common training-target category.
    pub hc1: f64,
}

/// One seed's run directory and manifest.
pub struct SeedRun<'a> {
    cfg: &'a RunConfig,
    pub seed: u64,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    data: Option<SplitDataset>,
}

impl<'a> SeedRun<'a> {
    pub fn open(cfg: &'a RunConfig, out: &Path, seed: u64) -> Result<Self, CliError> {
        let dir = seed_dir(out, seed);
        let mut manifest = RunManifest::load_or_new(&dir, seed)?;
        manifest.config_hash = cfg.hash();
        Ok(Self {
            cfg,
            seed,
            dir,
            manifest,
            executed: Vec::new(),
            skipped: Vec::new(),
            data: None,
        })
    }

    /// Regime label of a training stage.
    pub fn label(&self, stage: Stage) -> &'static str {
        let primary = self.cfg.train.soft.init_from;
        match (stage, primary) {
            (Stage::Data, _) => "data",
            (Stage::Sft, _) => "sft",
            (Stage::Distill, _) => "distill",
            (Stage::SdftOnly, _) => "sdft_only",
            (Stage::Soft, _) => "soft",
            (Stage::SoftOther, InitFrom::Base) => "soft_from_sft",
            (Stage::SoftOther, InitFrom::SftCheckpoint) => "soft_from_base",
            (Stage::Eval, _) => "eval",
        }
    }

    /// Stages this configuration runs, in order.
    pub fn plan(&self) -> Vec<Stage> {
        let mut v = vec![Stage::Data, Stage::Sft, Stage::Distill];
        if self.cfg.pipeline.sdft_only {
            v.push(Stage::SdftOnly);
        }
        v.push(Stage::Soft);
        if self.cfg.pipeline.report_other_init {
            v.push(Stage::SoftOther);
        }
        v.push(Stage::Eval);
        v
    }

    /// Training stages that produce a `best.ckpt` to evaluate.
    pub fn regimes(&self) -> Vec<Stage> {
        self.plan().into_iter().filter(|s| !matches!(s, Stage::Data | Stage::Distill | Stage::Eval)).collect()
    }

    fn upstream(&self, stage: Stage) -> Vec<Stage> {
        match stage {
            Stage::Data => vec![],
            Stage::Sft => vec![Stage::Data],
            Stage::Distill => vec![Stage::Sft],
            Stage::SdftOnly | Stage::Soft | Stage::SoftOther => vec![Stage::Distill],
            Stage::Eval => self.regimes(),
        }
    }

    fn soft_config(&self, stage: Stage, alpha: f64) -> TrainConfig {
        let mut c = self.cfg.train.soft.clone();
        c.alpha = alpha;
        if stage == Stage::SoftOther {
            c.init_from = match c.init_from {
                InitFrom::Base => InitFrom::SftCheckpoint,
                InitFrom::SftCheckpoint => InitFrom::Base,
            };
        }
        c
    }

    /// Hash of a stage's settings chained with its upstream hashes.
    pub fn hash(&self, stage: Stage) -> String {
        let cfg = self.cfg;
        let up: Vec<String> = self.upstream(stage).into_iter().map(|s| self.hash(s)).collect();
        match stage {
            Stage::Data => digest(&(
                "data",
                &cfg.dataset,
                &cfg.split,
                &cfg.template,
                cfg.model.l_max,
                cfg.corpus_seed(self.seed),
                self.seed,
            )),
            Stage::Sft => digest(&("sft", &up, &cfg.model, &cfg.train.sft, self.seed)),
            Stage::Distill => digest(&("distill", &up)),
            Stage::SdftOnly => digest(&("sdft_only", &up, &cfg.model, &cfg.train.sdft_only, self.seed)),
            Stage::Soft | Stage::SoftOther => {
                let runs: Vec<String> = cfg.pipeline.alpha_grid.iter().map(|&a| self.alpha_hash(stage, a)).collect();
                digest(&(self.label(stage), &runs))
            }
            Stage::Eval => digest(&("eval", &up, &cfg.cutoffs)),
        }
    }

    fn alpha_hash(&self, stage: Stage, alpha: f64) -> String {
        digest(&(
            self.label(stage),
            self.hash(Stage::Distill),
            &self.cfg.model,
            self.soft_config(stage, alpha),
            self.seed,
        ))
    }

    fn alpha_stage(&self, stage: Stage, alpha: f64) -> String {
        format!("{}/{}", self.label(stage), alpha_tag(alpha))
    }

    pub fn is_current(&self, stage: Stage) -> bool {
        self.manifest.is_current(self.label(stage), &self.hash(stage), &self.dir)
    }

    /// Run `stage` unless it is already current. Upstream stages must be current.
    pub fn run_stage(&mut self, stage: Stage) -> Result<(), CliError> {
        let name = self.label(stage);
        if self.is_current(stage) {
            log::info!("seed {}: {name} is up to date", self.seed);
            self.skipped.push(name.to_string());
            return Ok(());
        }
        for u in self.upstream(stage) {
            if !self.is_current(u) {
                return Err(CliError::stage(
                    name,
                    format!("upstream stage {} is not complete for this configuration", self.label(u)),
                ));
            }
        }
        log::info!("seed {}: running {name}", self.seed);
        let result = match stage {
            Stage::Data => self.stage_data(),
            Stage::Sft => self.stage_train_single(Stage::Sft),
            Stage::Distill => self.stage_distill(),
            Stage::SdftOnly => self.stage_train_single(Stage::SdftOnly),
            Stage::Soft | Stage::SoftOther => self.stage_soft(stage),
            Stage::Eval => self.stage_eval(),
        };
        match result {
            Ok(record) => {
                self.manifest.record(name, record);
                self.manifest.save(&self.dir)?;
                self.executed.push(name.to_string());
                self.write_metrics_csv()
            }
            Err(e) => {
                let msg = e.to_string();
                self.manifest.mark_failed(name, &msg);
                self.manifest.save(&self.dir)?;
                Err(e)
            }
        }
    }

    fn record(&self, stage: Stage, artifacts: BTreeMap<String, PathBuf>, fingerprint: Option<String>) -> StageRecord {
        StageRecord {
            hash: self.hash(stage),
            complete: true,
            upstream: self.upstream(stage).into_iter().map(|s| self.label(s).to_string()).collect(),
            artifacts,
            dataset_fingerprint: fingerprint,
        }
    }

    fn io<T, E: ToString>(&self, stage: Stage, r: Result<T, E>) -> Result<T, CliError> {
        r.map_err(|e| CliError::stage(self.label(stage), e))
    }

    pub fn dataset(&mut self) -> Result<&SplitDataset, CliError> {
        if self.data.is_none() {
            let path = self.dir.join("data/dataset.json");
            let ds = SplitDataset::load(&path).map_err(|e| CliError::stage("data", format!("{}: {e}", path.display())))?;
            self.data = Some(ds);
        }
        Ok(self.data.as_ref().expect("loaded"))
    }

    fn stage_data(&mut self) -> Result<StageRecord, CliError> {
        let cfg = self.cfg;
        let raw = match (&cfg.dataset.synthetic, &cfg.dataset.file) {
            (Some(spec), _) => self.io(Stage::Data, synthesize_dataset(spec, cfg.corpus_seed(self.seed)))?,
            (None, Some(f)) => {
                let format = f.format.or_else(|| softrec::data::InputFormat::from_path(&f.path)).expect("validated");
                let data = self.io(Stage::Data, load_interactions(&f.path, format))?;
                let (kept, stats) = self.io(Stage::Data, filter_min_interactions(&data, f.min_interactions))?;
                log::info!("filtering removed {} events in {} passes", stats.removed_events, stats.passes);
                kept
            }
            (None, None) => unreachable!("validated"),
        };
        let ds = self.io(
            Stage::Data,
            split_chronological(&raw, cfg.split.ratios(), &cfg.template, cfg.model.l_max, cfg.split.caps(), self.seed),
        )?;
        let rel = PathBuf::from("data/dataset.json");
        let path = self.dir.join(&rel);
        self.io(Stage::Data, std::fs::create_dir_all(path.parent().unwrap()))?;
        self.io(Stage::Data, ds.save(&path))?;
        log::info!(
            "seed {}: {} train, {} valid, {} test pairs, {} items, vocab {}",
            self.seed,
            ds.train.len(),
            ds.valid.len(),
            ds.test.len(),
            ds.catalog.len(),
            ds.vocab.len()
        );
        let fp = ds.fingerprint();
        self.data = Some(ds);
        Ok(self.record(Stage::Data, [("dataset".to_string(), rel)].into(), Some(fp)))
    }

    fn load_model(&mut self, rel: &Path, stage: Stage) -> Result<ModelState, CliError> {
        let vocab = self.dataset()?.vocab.len();
        ModelState::load(&self.dir.join(rel), vocab).map_err(|e| CliError::stage(self.label(stage), e))
    }

    fn init_model(&mut self, from: InitFrom, stage: Stage) -> Result<ModelState, CliError> {
        match from {
            InitFrom::Base => {
                let vocab = self.dataset()?.vocab.len();
                Ok(ModelState::init(self.cfg.model.with_vocab(vocab), self.seed))
            }
            InitFrom::SftCheckpoint => self.load_model(Path::new("sft/best.ckpt"), stage),
        }
    }

    fn sd_pairs(&self, stage: Stage) -> Result<Vec<SdPair>, CliError> {
        self.io(stage, read_jsonl(&self.dir.join("distill/sd.jsonl")))
    }

    fn stage_train_single(&mut self, stage: Stage) -> Result<StageRecord, CliError> {
        let (tc, sd, tau) = match stage {
            Stage::Sft => (self.cfg.train.sft.clone(), None, 0.0),
            _ => (self.cfg.train.sdft_only.clone(), Some(self.sd_pairs(stage)?), 1.0),
        };
        let init = self.init_model(tc.init_from, stage)?;
        let rel = PathBuf::from(self.label(stage));
        let artifacts = self.train_run(stage, &rel, None, &tc, init, sd.as_deref(), TauSource::Fixed(tau))?;
        Ok(self.record(stage, artifacts, None))
    }

    fn stage_soft(&mut self, stage: Stage) -> Result<StageRecord, CliError> {
        let label = self.label(stage);
        let grid = self.cfg.pipeline.alpha_grid.clone();
        let sd = self.sd_pairs(stage)?;
        let mut best: Option<(f64, RunSummary)> = None;
        let mut artifacts = BTreeMap::new();
        for alpha in grid {
            let sub = self.alpha_stage(stage, alpha);
            let hash = self.alpha_hash(stage, alpha);
            let rel = PathBuf::from(label).join(alpha_tag(alpha));
            if self.manifest.is_current(&sub, &hash, &self.dir) {
                self.skipped.push(sub.clone());
            } else {
                let tc = self.soft_config(stage, alpha);
                let init = self.init_model(tc.init_from, stage)?;
                let seed = self.seed;
                let sched = {
                    let ds = self.dataset()?;
                    SchedulerState::init(&init, &ds.train, alpha, tc.m.min(ds.train.len()), seed, ds.max_gen_len)
                };
                let sched = sched.map_err(|e| CliError::stage(label, e))?;
                let run_artifacts =
                    self.train_run(stage, &rel, Some(alpha), &tc, init, Some(&sd), TauSource::Adaptive(sched))?;
                self.manifest.record(
                    &sub,
                    StageRecord {
                        hash,
                        complete: true,
                        upstream: vec!["distill".into()],
                        artifacts: run_artifacts,
                        dataset_fingerprint: None,
                    },
                );
                self.manifest.save(&self.dir)?;
                self.executed.push(sub.clone());
            }
            let summary: RunSummary = read_json(&self.dir.join(&rel).join("summary.json"), label)?;
            // Strictly better only, so ties keep the earlier grid value.
            if best.as_ref().map_or(true, |(_, b)| summary.best_valid > b.best_valid) {
                best = Some((alpha, summary));
            }
            artifacts.insert(alpha_tag(alpha), rel.join("best.ckpt"));
        }
        let (alpha, summary) = best.expect("grid is non-empty");
        log::info!("seed {}: {label} keeps alpha {alpha} (valid {:.4})", self.seed, summary.best_valid);
        let src = self.dir.join(label).join(alpha_tag(alpha)).join("best.ckpt");
        self.io(stage, std::fs::copy(&src, self.dir.join(label).join("best.ckpt")))?;
        write_json(&self.dir.join(label).join("selected.json"), &summary, label)?;
        artifacts.insert("best".into(), PathBuf::from(label).join("best.ckpt"));
        artifacts.insert("selected".into(), PathBuf::from(label).join("selected.json"));
        Ok(self.record(stage, artifacts, None))
    }

    /// Train once, writing epoch rows, timings and checkpoints under `rel`.
    #[allow(clippy::too_many_arguments)]
    fn train_run(
        &mut self,
        stage: Stage,
        rel: &Path,
        alpha: Option<f64>,
        tc: &TrainConfig,
        init: ModelState,
        sd: Option<&[SdPair]>,
        tau: TauSource,
    ) -> Result<BTreeMap<String, PathBuf>, CliError> {
        let label = self.label(stage);
        let dir = self.dir.join(rel);
        self.io(stage, std::fs::create_dir_all(&dir))?;
        let keep_epochs = self.cfg.pipeline.keep_epoch_checkpoints;
        let m = match &tau {
            TauSource::Adaptive(s) => Some(s.m),
            TauSource::Fixed(_) => None,
        };
        let seed = self.seed;
        self.dataset()?;
        let ds = self.data.as_ref().expect("loaded");
        let mut rows = String::from(EPOCH_COLUMNS);
        rows.push('\n');
        let mut timings = String::from("regime,alpha,epoch,wall_clock_secs\n");
        let a = alpha.map(|a| format!("{a:?}")).unwrap_or_default();
        let mut hook = |r: &EpochReport, model: &ModelState| -> Result<(), String> {
            let _ = writeln!(
                rows,
                "{label},{a},{},{:?},{},{},{:?},{},{},{},{:?}",
                r.epoch,
                r.loss,
                opt(r.loss_real),
                opt(r.loss_sd),
                r.tau,
                opt(r.d_t),
                opt(r.d0),
                m.map(|m| m.to_string()).unwrap_or_default(),
                r.valid_score
            );
            let _ = writeln!(timings, "{label},{a},{},{:.3}", r.epoch, r.wall_clock_secs);
            std::fs::write(dir.join("epochs.csv"), &rows).map_err(|e| e.to_string())?;
            std::fs::write(dir.join(TIMINGS_FILE), &timings).map_err(|e| e.to_string())?;
            if keep_epochs {
                model.save(&dir.join(format!("epoch_{}.ckpt", r.epoch))).map_err(|e| e.to_string())?;
            }
            log::info!(
                "seed {seed}: {label}{} epoch {} loss {:.4} tau {:.4} valid {:.4}",
                alpha.map(|a| format!(" alpha {a}")).unwrap_or_default(),
                r.epoch,
                r.loss,
                r.tau,
                r.valid_score
            );
            Ok(())
        };
        let mut validator = HitRatioValidator { data: ds, k: tc.valid_k };
        let outcome = train(tc, init, &ds.train, sd, tau, ds.max_gen_len, seed, &mut validator, &mut hook);
        let outcome = match outcome {
            Ok(o) => o,
            Err(TrainError::Diverged { epoch, reason, last_good }) => {
                let _ = last_good.save(&dir.join("last_good.ckpt"));
                return Err(CliError::stage(label, format!("diverged in epoch {epoch}: {reason}")));
            }
            Err(e) => return Err(CliError::stage(label, e)),
        };
        self.io(stage, outcome.best.save(&dir.join("best.ckpt")))?;
        let summary = RunSummary {
            regime: label.to_string(),
            alpha,
            best_epoch: outcome.best_epoch,
            best_valid: outcome.reports[outcome.best_epoch - 1].valid_score,
            epochs_run: outcome.reports.len(),
        };
        write_json(&dir.join("summary.json"), &summary, label)?;
        if let Some(s) = &outcome.scheduler {
            write_json(&dir.join("scheduler.json"), s, label)?;
        }
        Ok([
            ("best".to_string(), rel.join("best.ckpt")),
            ("epochs".to_string(), rel.join("epochs.csv")),
            ("summary".to_string(), rel.join("summary.json")),
        ]
        .into())
    }

    fn stage_distill(&mut self) -> Result<StageRecord, CliError> {
        let model = self.load_model(Path::new("sft/best.ckpt"), Stage::Distill)?;
        let ds = self.dataset()?;
        let sd = build_sd_dataset(&model, &ds.train, ds.max_gen_len).map_err(|e| CliError::stage("distill", e))?;
        let (sd_loss, n_empty) = mean_sd_loss(&model, &sd).map_err(|e| CliError::stage("distill", e))?;
        let real = mean_real_loss(&model, &ds.train).map_err(|e| CliError::stage("distill", e))?;
        let stats = DistillStats {
            n_pairs: sd.len(),
            n_empty,
            mean_sd_loss: sd_loss,
            mean_real_loss: real,
        };
        log::info!(
            "seed {}: distilled {} pairs ({} empty), loss on own labels {sd_loss:.4} vs real {real:.4}",
            self.seed,
            sd.len(),
            n_empty
        );
        let dir = self.dir.join("distill");
        self.io(Stage::Distill, std::fs::create_dir_all(&dir))?;
        self.io(Stage::Distill, write_jsonl(&dir.join("sd.jsonl"), &sd))?;
        write_json(&dir.join("stats.json"), &stats, "distill")?;
        Ok(self.record(
            Stage::Distill,
            [
                ("sd".to_string(), PathBuf::from("distill/sd.jsonl")),
                ("stats".to_string(), PathBuf::from("distill/stats.json")),
            ]
            .into(),
            None,
        ))
    }

    fn evaluate_checkpoint(&mut self, rel: &Path) -> Result<(Vec<softrec::RankedPrediction>, MetricsReport), CliError> {
        let model = self.load_model(rel, Stage::Eval)?;
        let cutoffs = self.cfg.cutoffs.clone();
        let ds = self.dataset()?;
        let index = ItemEmbeddingIndex::build(&model, &ds.catalog, &ds.vocab);
        let (preds, report) = evaluate(&model, &ds.test, &ds.catalog, &index, ds.max_gen_len, &cutoffs)
            .map_err(|e| CliError::stage("eval", e))?;
        report.check_invariants().map_err(|e| CliError::stage("eval", e))?;
        Ok((preds, report))
    }

    fn stage_eval(&mut self) -> Result<StageRecord, CliError> {
        let fp = self.manifest.fingerprint().unwrap_or_default().to_string();
        let eval_dir = self.dir.join("eval");
        self.io(Stage::Eval, std::fs::create_dir_all(&eval_dir))?;
        let mut table = String::new();
        for stage in self.regimes() {
            let label = self.label(stage);
            let (preds, report) = self.evaluate_checkpoint(&PathBuf::from(label).join("best.ckpt"))?;
            self.io(Stage::Eval, write_predictions(&eval_dir.join(format!("{label}.jsonl")), &preds))?;
            let alpha = if matches!(stage, Stage::Soft | Stage::SoftOther) {
                let s: RunSummary = read_json(&self.dir.join(label).join("selected.json"), "eval")?;
                s.alpha.map(|a| format!("{a:?}")).unwrap_or_default()
            } else {
                String::new()
            };
            if table.is_empty() {
                let _ = writeln!(table, "regime,alpha,dataset_fingerprint,{}", report.csv_header());
            }
            let _ = writeln!(table, "{label},{alpha},{fp},{}", report.csv_row());
            log::info!("seed {}: {label} test H@5 {:.4} HC@1 {:.4}", self.seed, report.hr(5), report.hc1);
        }
        let baseline = category_baseline(self.dataset()?);
        write_json(&eval_dir.join("category_baseline.json"), &baseline, "eval")?;
        self.io(Stage::Eval, std::fs::write(self.dir.join(TEST_METRICS_FILE), table))?;
        self.write_alpha_sweep()?;
        Ok(self.record(
            Stage::Eval,
            [
                ("test_metrics".to_string(), PathBuf::from(TEST_METRICS_FILE)),
                ("alpha_sweep".to_string(), PathBuf::from(ALPHA_SWEEP_FILE)),
                ("category_baseline".to_string(), PathBuf::from("eval/category_baseline.json")),
            ]
            .into(),
            Some(fp),
        ))
    }

    /// Test metrics of every alpha run next to its validation score.
    pub fn write_alpha_sweep(&mut self) -> Result<(), CliError> {
        let mut sweep = String::new();
        for stage in self.regimes().into_iter().filter(|s| matches!(s, Stage::Soft | Stage::SoftOther)) {
            let label = self.label(stage);
            for a in self.cfg.pipeline.alpha_grid.clone() {
                let rel = PathBuf::from(label).join(alpha_tag(a));
                let (_, r) = self.evaluate_checkpoint(&rel.join("best.ckpt"))?;
                let s: RunSummary = read_json(&self.dir.join(&rel).join("summary.json"), "eval")?;
                if sweep.is_empty() {
                    let _ = writeln!(sweep, "regime,alpha,valid_score,{}", r.csv_header());
                }
                let _ = writeln!(sweep, "{label},{a:?},{:?},{}", s.best_valid, r.csv_row());
            }
        }
        self.io(Stage::Eval, std::fs::write(self.dir.join(ALPHA_SWEEP_FILE), sweep))
    }

    /// Concatenate the epoch rows of every current training run in plan order.
    fn write_metrics_csv(&self) -> Result<(), CliError> {
        let mut out = String::from(EPOCH_COLUMNS);
        out.push('\n');
        let mut timings = String::from("regime,alpha,epoch,wall_clock_secs\n");
        for stage in self.regimes() {
            let dirs: Vec<(String, String, PathBuf)> = match stage {
                Stage::Soft | Stage::SoftOther => self
                    .cfg
                    .pipeline
                    .alpha_grid
                    .iter()
                    .map(|&a| {
                        (
                            self.alpha_stage(stage, a),
                            self.alpha_hash(stage, a),
                            PathBuf::from(self.label(stage)).join(alpha_tag(a)),
                        )
                    })
                    .collect(),
                _ => vec![(self.label(stage).to_string(), self.hash(stage), PathBuf::from(self.label(stage)))],
            };
            for (name, hash, rel) in dirs {
                if !self.manifest.is_current(&name, &hash, &self.dir) {
                    continue;
                }
                for (file, acc) in [("epochs.csv", &mut out), (TIMINGS_FILE, &mut timings)] {
                    let text = std::fs::read_to_string(self.dir.join(&rel).join(file))
                        .map_err(|e| CliError::stage(name.clone(), e))?;
                    text.lines().skip(1).for_each(|l| {
                        acc.push_str(l);
                        acc.push('\n');
                    });
                }
            }
        }
        std::fs::write(self.dir.join(METRICS_FILE), out).map_err(|e| CliError::stage("metrics", e))?;
        std::fs::write(self.dir.join(TIMINGS_FILE), timings).map_err(|e| CliError::stage("metrics", e))
    }
}

/// Always predict the most common category among training targets; ties go
/// to the alphabetically first category.
pub fn category_baseline(ds: &SplitDataset) -> CategoryBaseline {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &ds.train {
        *counts.entry(p.target_category.as_str()).or_default() += 1;
    }
    let mut category = "";
    let mut best = 0;
    for (c, n) in counts {
        if n > best {
            (category, best) = (c, n);
        }
    }
    let hits = ds.test.iter().filter(|p| p.target_category == category).count();
    CategoryBaseline {
        category: category.to_string(),
        hc1: hits as f64 / ds.test.len().max(1) as f64,
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::stage(stage, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::stage(stage, format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: &str) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text).map_err(|e| CliError::stage(stage, format!("{}: {e}", path.display())))
}

/// What one seed did during a pipeline call.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

/// Store the configuration in the output directory.
pub fn write_config_copy(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::stage("setup", e))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| CliError::stage("setup", e))
}

/// Run the given stages (filtered to the plan) for each seed in turn.
pub fn run_stages(cfg: &RunConfig, out: &Path, seeds: &[u64], stages: &[Stage]) -> Result<Vec<SeedOutcome>, CliError> {
    cfg.validate()?;
    write_config_copy(cfg, out)?;
    let mut outcomes = Vec::new();
    for &seed in seeds {
        let mut run = SeedRun::open(cfg, out, seed)?;
        let plan = run.plan();
        for &s in stages.iter().filter(|s| plan.contains(s)) {
            run.run_stage(s)?;
        }
        outcomes.push(SeedOutcome {
            seed,
            dir: run.dir.clone(),
            executed: run.executed,
            skipped: run.skipped,
        });
    }
    Ok(outcomes)
}

/// Every stage for every seed, then the seed summary.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, seeds: &[u64]) -> Result<Vec<SeedOutcome>, CliError> {
    let all = [
        Stage::Data,
        Stage::Sft,
        Stage::Distill,
        Stage::SdftOnly,
        Stage::Soft,
        Stage::SoftOther,
        Stage::Eval,
    ];
    let outcomes = run_stages(cfg, out, seeds, &all)?;
    let dirs: Vec<PathBuf> = outcomes.iter().map(|o| o.dir.clone()).collect();
    let summary = crate::summary::summarize(&dirs, None)?;
    summary.write(out)?;
    Ok(outcomes)
}
