//! End-to-end training runs, the component ablation grid and run output.
//!
//! Per mini-batch of the current task the trainer samples a replay batch of
//! the same size, optionally appends a CutMix copy of the joined batch,
//! evaluates the objective (with distillation against the previous task's
//! snapshot from the second task on), runs `k` SGD steps and, when the meta
//! update is on, interpolates back toward the starting weights. The current
//! batch is then written to memory. A full accuracy row is evaluated after
//! each task.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::batch::{Batch, BatchRole};
use crate::checkpoint::{Checkpoint, MEMORY_TAG};
use crate::cutmix::cutmix;
use crate::distill::{check_scales, KdConfig, TeacherTargets};
use crate::error::{Error, Result};
use crate::loss::{teacher_targets, total_loss_with_targets, LossReport, MASKED_LOGIT};
use crate::memory::EpisodicMemory;
use crate::meta::{inner_loop, outer_update, MetaConfig};
use crate::metrics::{compute_metrics, evaluate_row, AccuracyMatrix, MetricsReport};
use crate::network::{init_model, ArchSpec, ModelState};
use crate::rng_stream;
use crate::stream::{split_tasks, synth_dataset_with_noise, LabeledDataset, SplitSpec, TaskStream, DEFAULT_NOISE};
use crate::tensor::Tensor;

pub const MEMORY_STREAM: u64 = 3;
pub const CUTMIX_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image: [usize; 3],
    pub noise: f64,
    /// MMDS file to use instead of the synthetic generator.
    pub data: Option<PathBuf>,
    pub mem_per_task: usize,
    pub batch: usize,
    pub lr: f64,
    pub inner_steps: usize,
    /// Step size of the `k` SGD steps; `lr` when unset.
    pub inner_lr: Option<f64>,
    pub rho: f64,
    pub kd_weight: f64,
    pub scales: Vec<usize>,
    pub kd_normalize: bool,
    pub multi_head: bool,
    pub mkd: bool,
    pub da: bool,
    pub ml: bool,
    /// Output directory; not part of the replayable snapshot.
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: 5,
            classes_per_task: 2,
            train_per_class: 200,
            test_per_class: 50,
            image: [1, 8, 8],
            noise: DEFAULT_NOISE,
            data: None,
            mem_per_task: 65,
            batch: 10,
            lr: 0.1,
            inner_steps: 2,
            inner_lr: None,
            rho: 2.0,
            kd_weight: 0.1,
            scales: vec![1, 2],
            kd_normalize: false,
            multi_head: false,
            mkd: true,
            da: true,
            ml: true,
            out: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}"))),
    }
}

impl ExperimentConfig {
    /// Sets one option by its flag name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "tasks" => self.tasks = parse(key, value)?,
            "classes-per-task" => self.classes_per_task = parse(key, value)?,
            "train-per-class" => self.train_per_class = parse(key, value)?,
            "test-per-class" => self.test_per_class = parse(key, value)?,
            "image" => {
                let dims = value
                    .split('x')
                    .map(|d| parse::<usize>(key, d))
                    .collect::<Result<Vec<_>>>()?;
                self.image = dims
                    .try_into()
                    .map_err(|_| Error::Config(format!("image must be CxHxW, got {value:?}")))?;
            }
            "noise" => self.noise = parse(key, value)?,
            "data" => self.data = Some(PathBuf::from(value.trim())),
            "mem-per-task" => self.mem_per_task = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "inner-steps" => self.inner_steps = parse(key, value)?,
            "inner-lr" => self.inner_lr = Some(parse(key, value)?),
            "rho" => self.rho = parse(key, value)?,
            "kd-weight" => self.kd_weight = parse(key, value)?,
            "scales" => {
                self.scales = value
                    .split(',')
                    .map(|s| parse::<usize>(key, s))
                    .collect::<Result<Vec<_>>>()?
            }
            "kd-normalize" => self.kd_normalize = parse_bool(key, value)?,
            "multi-head" => self.multi_head = parse_bool(key, value)?,
            "mkd" => self.mkd = parse_bool(key, value)?,
            "da" => self.da = parse_bool(key, value)?,
            "ml" => self.ml = parse_bool(key, value)?,
            "out" => self.out = Some(PathBuf::from(value.trim())),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Replayable snapshot of every option except `out`.
    pub fn to_text(&self) -> String {
        let [c, h, w] = self.image;
        let scales: Vec<String> = self.scales.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "tasks={}", self.tasks);
        let _ = writeln!(s, "classes-per-task={}", self.classes_per_task);
        let _ = writeln!(s, "train-per-class={}", self.train_per_class);
        let _ = writeln!(s, "test-per-class={}", self.test_per_class);
        let _ = writeln!(s, "image={c}x{h}x{w}");
        let _ = writeln!(s, "noise={}", self.noise);
        if let Some(d) = &self.data {
            let _ = writeln!(s, "data={}", d.display());
        }
        let _ = writeln!(s, "mem-per-task={}", self.mem_per_task);
        let _ = writeln!(s, "batch={}", self.batch);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "inner-steps={}", self.inner_steps);
        if let Some(b) = self.inner_lr {
            let _ = writeln!(s, "inner-lr={b}");
        }
        let _ = writeln!(s, "rho={}", self.rho);
        let _ = writeln!(s, "kd-weight={}", self.kd_weight);
        let _ = writeln!(s, "scales={}", scales.join(","));
        let _ = writeln!(s, "kd-normalize={}", self.kd_normalize);
        let _ = writeln!(s, "multi-head={}", self.multi_head);
        let _ = writeln!(s, "mkd={}", self.mkd);
        let _ = writeln!(s, "da={}", self.da);
        let _ = writeln!(s, "ml={}", self.ml);
        s
    }

    pub fn effective_inner_lr(&self) -> f64 {
        self.inner_lr.unwrap_or(self.lr)
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            inner_steps: self.inner_steps,
            inner_lr: self.effective_inner_lr(),
            decay: self.rho,
            total_tasks: self.tasks,
        }
    }

    pub fn kd_config(&self) -> KdConfig {
        KdConfig {
            scales: self.scales.clone(),
            normalize: self.kd_normalize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.test_per_class == 0 {
            return Err(Error::Config("test-per-class must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.kd_weight >= 0.0) || !self.kd_weight.is_finite() {
            return Err(Error::Config(format!("kd-weight must be non-negative, got {}", self.kd_weight)));
        }
        self.meta_config().validate()?;
        self.arch()?.validate()?;
        check_scales(&self.arch()?.tap_shapes(), &self.scales)
    }

    pub fn num_classes(&self) -> usize {
        self.tasks * self.classes_per_task
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        let mut arch = ArchSpec::desk_default(self.image, self.num_classes());
        arch.multi_head = self.multi_head;
        Ok(arch)
    }

    pub fn build_stream(&self) -> Result<TaskStream> {
        let dataset = match &self.data {
            Some(path) => LabeledDataset::load(path)?,
            None => synth_dataset_with_noise(
                self.num_classes(),
                self.train_per_class + self.test_per_class,
                self.image,
                self.seed,
                self.noise,
            )?,
        };
        if dataset.image_shape != self.image || dataset.num_classes < self.num_classes() {
            return Err(Error::Config(format!(
                "dataset has {:?} images and {} classes, config needs {:?} and {}",
                dataset.image_shape,
                dataset.num_classes,
                self.image,
                self.num_classes()
            )));
        }
        let spec = SplitSpec {
            tasks: self.tasks,
            classes_per_task: self.classes_per_task,
            test_per_class: self.test_per_class,
        };
        split_tasks(dataset, spec, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub task: usize,
    pub report: LossReport,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Objective at the start of each mini-batch update.
    pub losses: Vec<StepLoss>,
    pub matrix: AccuracyMatrix,
    pub metrics: MetricsReport,
    pub model: ModelState,
    pub memory: EpisodicMemory,
    pub wall_clock: Duration,
}

/// Per-example additive mask keeping only the classes of the tasks present
/// in the example's label.
fn head_mask(batch: &Batch, classes_per_task: usize) -> Result<Tensor> {
    let k = batch.num_classes();
    let mut mask = vec![MASKED_LOGIT; batch.len() * k];
    for (i, ex) in batch.examples().enumerate() {
        for (c, &y) in ex.label.iter().enumerate() {
            if y > 0.0 {
                let t = c / classes_per_task;
                let end = ((t + 1) * classes_per_task).min(k);
                mask[i * k + t * classes_per_task..i * k + end].fill(0.0);
            }
        }
    }
    Tensor::new(vec![batch.len(), k], mask)
}

pub fn run_mmkdda(cfg: &ExperimentConfig) -> Result<RunRecord> {
    run_observed(cfg, &mut |_, _, _| {})
}

/// Like [`run_mmkdda`], calling `observe(step, task, model)` after every
/// mini-batch update.
pub fn run_observed(
    cfg: &ExperimentConfig,
    observe: &mut dyn FnMut(usize, usize, &ModelState),
) -> Result<RunRecord> {
    let started = Instant::now();
    cfg.validate()?;
    let stream = cfg.build_stream().map_err(|e| e.at("building task stream"))?;
    let arch = cfg.arch()?;
    let meta = cfg.meta_config();
    let kd = cfg.kd_config();
    let mut model = init_model(&arch, cfg.seed)?;
    let mut memory = EpisodicMemory::new(cfg.mem_per_task, stream.image_shape(), stream.num_classes());
    let mut memory_rng = rng_stream(cfg.seed, MEMORY_STREAM);
    let mut cutmix_rng = rng_stream(cfg.seed, CUTMIX_STREAM);
    let eval_sets = stream.eval_sets()?;

    let mut matrix = AccuracyMatrix::new(cfg.tasks)?;
    let initial = evaluate_row(&model, &eval_sets).map_err(|e| e.at("initial evaluation"))?;
    matrix.set_b_bar(initial.clone())?;
    matrix.set_row(0, initial)?;

    let mut teacher: Option<ModelState> = None;
    let mut losses = Vec::new();
    let mut step = 0;
    for t in 0..cfg.tasks {
        for (b, current) in stream.batches(t, cfg.batch).enumerate() {
            let at = || format!("task {t} batch {b} (step {step})");
            let current = current.map_err(|e| e.at(at()))?;
            let replay = memory.sample(cfg.batch, &mut memory_rng);
            let joined = Batch::join(&[&current, &replay], BatchRole::Joined).map_err(|e| e.at(at()))?;
            let input = if cfg.da {
                let mixed = cutmix(&joined, &mut cutmix_rng).map_err(|e| e.at(at()))?;
                Batch::join(&[&joined, &mixed.batch], BatchRole::Joined).map_err(|e| e.at(at()))?
            } else {
                joined
            };
            let targets: Option<TeacherTargets> = match (&teacher, cfg.mkd) {
                (Some(teacher), true) => Some(teacher_targets(teacher, &input, &kd).map_err(|e| e.at(at()))?),
                _ => None,
            };
            let mask = if cfg.multi_head {
                Some(head_mask(&input, cfg.classes_per_task)?)
            } else {
                None
            };
            let mut first: Option<LossReport> = None;
            let inner = inner_loop(&model, &meta, |state| {
                let eval = total_loss_with_targets(state, &input, targets.as_ref(), cfg.kd_weight, mask.as_ref())?;
                first.get_or_insert(eval.report);
                Ok(eval.grads)
            })
            .map_err(|e| e.at(at()))?;
            model = if cfg.ml {
                outer_update(&model, &inner, t, &meta).map_err(|e| e.at(at()))?
            } else {
                inner
            };
            memory.write(t, &current).map_err(|e| e.at(at()))?;
            losses.push(StepLoss {
                step,
                task: t,
                report: first.expect("at least one inner step"),
            });
            observe(step, t, &model);
            step += 1;
        }
        let row = evaluate_row(&model, &eval_sets).map_err(|e| e.at(format!("evaluation after task {t}")))?;
        matrix.set_row(t + 1, row)?;
        teacher = Some(model.clone());
    }
    let metrics = compute_metrics(&matrix)?;
    Ok(RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        losses,
        matrix,
        metrics,
        model,
        memory,
        wall_clock: started.elapsed(),
    })
}

impl RunRecord {
    pub fn losses_csv(&self) -> String {
        let mut s = String::from("step,task,ce,kd,total\n");
        for l in &self.losses {
            let _ = writeln!(s, "{},{},{},{},{}", l.step, l.task, l.report.ce, l.report.kd, l.report.total);
        }
        s
    }

    /// Mean accuracy over the tasks seen so far, after each task.
    pub fn running_acc_csv(&self) -> String {
        let mut s = String::from("after_task,running_acc\n");
        for i in 1..=self.matrix.tasks() {
            let row = self.matrix.row(i).expect("complete matrix");
            let _ = writeln!(s, "{i},{}", row[..i].iter().sum::<f64>() / i as f64);
        }
        s
    }

    pub fn final_acc_csv(&self) -> String {
        let mut s = String::from("task,accuracy\n");
        let last = self.matrix.row(self.matrix.tasks()).expect("complete matrix");
        for (j, a) in last.iter().enumerate() {
            let _ = writeln!(s, "{j},{a}");
        }
        s
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.model.clone()).with_section(MEMORY_TAG, self.memory.to_bytes())
    }

    /// Writes every run artefact into `dir`, creating it if needed.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), self.config.to_text())?;
        fs::write(dir.join("losses.csv"), self.losses_csv())?;
        fs::write(dir.join("accuracy.csv"), self.matrix.to_csv())?;
        fs::write(dir.join("metrics.txt"), self.metrics.to_text())?;
        fs::write(dir.join("running_acc.csv"), self.running_acc_csv())?;
        fs::write(dir.join("final_acc.csv"), self.final_acc_csv())?;
        self.checkpoint().save(&dir.join("model.ckpt"))
    }
}

/// Names of the files written by [`RunRecord::write_outputs`].
pub const OUTPUT_FILES: [&str; 7] = [
    "config.txt",
    "losses.csv",
    "accuracy.csv",
    "metrics.txt",
    "running_acc.csv",
    "final_acc.csv",
    "model.ckpt",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub mkd: bool,
    pub da: bool,
    pub ml: bool,
}

/// The five ablation rows, from replay alone to the full method.
pub const ABLATION_ROWS: [(&str, Toggles); 5] = [
    ("Base", Toggles { mkd: false, da: false, ml: false }),
    ("+MKD", Toggles { mkd: true, da: false, ml: false }),
    ("+DA", Toggles { mkd: false, da: true, ml: false }),
    ("MKD+DA", Toggles { mkd: true, da: true, ml: false }),
    ("MKD+DA+ML", Toggles { mkd: true, da: true, ml: true }),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and standard deviation; `std` is 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug)]
pub struct AblationRow {
    pub name: &'static str,
    pub toggles: Toggles,
    pub seeds: Vec<u64>,
    pub runs: Vec<Result<RunRecord>>,
    pub acc: MeanStd,
    pub la: MeanStd,
    pub fm: MeanStd,
}

impl AblationRow {
    /// Some repeats failed; the statistics cover the successful ones only.
    pub fn partial(&self) -> bool {
        self.runs.iter().any(Result::is_err)
    }

    pub fn metrics(&self) -> Vec<MetricsReport> {
        self.runs.iter().filter_map(|r| r.as_ref().ok()).map(|r| r.metrics).collect()
    }
}

#[derive(Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn partial(&self) -> bool {
        self.rows.iter().any(AblationRow::partial)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,mkd,da,ml,runs,acc_mean,acc_std,la_mean,la_std,fm_mean,fm_std,partial\n");
        for r in &self.rows {
            let ok = r.runs.iter().filter(|x| x.is_ok()).count();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.name,
                r.toggles.mkd,
                r.toggles.da,
                r.toggles.ml,
                ok,
                r.acc.mean,
                r.acc.std,
                r.la.mean,
                r.la.std,
                r.fm.mean,
                r.fm.std,
                r.partial()
            );
        }
        s
    }
}

/// Seeds used for `repeats` runs starting at the base seed.
pub fn repeat_seeds(base: u64, repeats: usize) -> Vec<u64> {
    (0..repeats as u64).map(|r| base.wrapping_add(r)).collect()
}

/// Runs every ablation row for `repeats` seeds. Each run with an output
/// directory writes into `<out>/<row>/seed_<n>` and the table goes to
/// `<out>/ablation.csv`.
pub fn run_ablation_grid(base: &ExperimentConfig, repeats: usize) -> Result<AblationTable> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    base.validate()?;
    let seeds = repeat_seeds(base.seed, repeats);
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (name, toggles) in ABLATION_ROWS {
        let mut runs = Vec::with_capacity(repeats);
        for &seed in &seeds {
            let cfg = ExperimentConfig {
                seed,
                mkd: toggles.mkd,
                da: toggles.da,
                ml: toggles.ml,
                out: None,
                ..base.clone()
            };
            let run = run_mmkdda(&cfg).map_err(|e| e.at(format!("ablation row {name}, seed {seed}")));
            if let (Ok(record), Some(out)) = (&run, &base.out) {
                record.write_outputs(&out.join(name).join(format!("seed_{seed}")))?;
            }
            runs.push(run);
        }
        let ms: Vec<MetricsReport> = runs.iter().filter_map(|r| r.as_ref().ok()).map(|r| r.metrics).collect();
        let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&ms.iter().map(f).collect::<Vec<_>>());
        rows.push(AblationRow {
            name,
            toggles,
            seeds: seeds.clone(),
            acc: col(|m| m.acc),
            la: col(|m| m.la),
            fm: col(|m| m.fm),
            runs,
        });
    }
    let table = AblationTable { rows };
    if let Some(out) = &base.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("ablation.csv"), table.to_csv())?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            tasks: 2,
            train_per_class: 20,
            test_per_class: 5,
            mem_per_task: 8,
            batch: 5,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = tiny();
        cfg.inner_lr = Some(0.05);
        cfg.scales = vec![1];
        cfg.out = Some("somewhere".into());
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, ExperimentConfig { out: None, ..cfg });
    }

    #[test]
    fn config_errors() {
        assert!(ExperimentConfig::from_text("nonsense=1").is_err());
        assert!(ExperimentConfig::from_text("lr").is_err());
        assert!(ExperimentConfig::from_text("lr=fast").is_err());
        assert!(ExperimentConfig::from_text("mkd=maybe").is_err());
        assert!(ExperimentConfig::from_text("image=1x8").is_err());
        let cfg = ExperimentConfig::from_text("# comment\n\nrho=3\nmkd=off\n").unwrap();
        assert_eq!((cfg.rho, cfg.mkd), (3.0, false));
        for bad in ["batch=0", "inner-steps=0", "rho=-1", "lr=0", "scales=3", "tasks=0"] {
            let cfg = ExperimentConfig::from_text(bad).unwrap();
            let err = cfg.validate().unwrap_err();
            assert!(err.is_config(), "{bad}: {err}");
        }
    }

    #[test]
    fn accepts_published_decay_values() {
        for rho in ["2", "3", "2", "1"] {
            let cfg = ExperimentConfig::from_text(&format!("rho={rho}")).unwrap();
            assert!(cfg.validate().is_ok());
        }
    }

    #[test]
    fn tiny_run_shapes_and_memory_bound() {
        let rec = run_mmkdda(&tiny()).unwrap();
        assert!(rec.matrix.is_complete());
        assert_eq!(rec.losses.len(), 2 * (2 * 20usize).div_ceil(5));
        assert!(rec.losses[..8].iter().all(|l| l.report.kd == 0.0));
        assert!(rec.losses[8..].iter().any(|l| l.report.kd > 0.0));
        for t in rec.memory.tasks() {
            assert!(rec.memory.slots(t).len() <= 8);
        }
        assert_eq!(rec.memory.len(), 16);
        assert!(rec.losses_csv().starts_with("step,task,ce,kd,total\n0,0,"));
    }

    #[test]
    fn head_mask_follows_label_support() {
        let batch = Batch::new(
            Tensor::zeros(&[2, 1, 1, 1]),
            Tensor::new(vec![2, 4], vec![0.0, 1.0, 0.0, 0.0, 0.25, 0.0, 0.0, 0.75]).unwrap(),
            vec![0, 1],
            BatchRole::Joined,
        )
        .unwrap();
        let m = head_mask(&batch, 2).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0, MASKED_LOGIT, MASKED_LOGIT, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }
}
