//! Commands behind the `maskris` binary.
//!
//! A [`Command`] holds fully resolved options: config files are already
//! parsed and defaults filled in. [`execute`] writes the command's
//! [`RunManifest`] before doing any work, and [`Command::from_manifest`]
//! rebuilds the same command from that file alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::masking::{apply_image_mask, pgm_bytes, sample_image_mask, MaskStrategy};
use crate::metrics::{
    corruption_csv, eval_csv, evaluate, long_csv, robustness_report_with, text_table, EvalResult, TagRow,
};
use crate::model::{read_checkpoint, write_checkpoint};
use crate::parallel::par_map;
use crate::rng::RngStream;
use crate::synthdata::{
    corrupt, generate_dataset, read_dataset, write_atomic, write_dataset, CorruptionKind, Dataset, SampleRecord,
    SceneConfig, Split, Tag,
};
use crate::trainer::{train, TrainConfig, TrainMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;

pub const MANIFEST_FILE: &str = "run.txt";
pub const DEFAULT_SWEEP_SEEDS: [u64; 3] = [0, 1, 2];

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::TrainingDiverged { .. } => EXIT_DIVERGED,
        Error::Corrupt { .. } => EXIT_CORRUPT,
        _ => EXIT_FAILURE,
    }
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(Error::invalid(format!("unknown split {s:?} (train|val)"))),
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Ratio,
    Patch,
    Lambda,
    Strategy,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Ratio => "ratio",
            SweepParam::Patch => "patch",
            SweepParam::Lambda => "lambda",
            SweepParam::Strategy => "strategy",
        }
    }

    /// Sets the swept field of `cfg` to `value`.
    pub fn apply(self, cfg: &mut TrainConfig, value: &str) -> Result<()> {
        let bad = || Error::invalid(format!("bad {} value {value:?}", self.name()));
        match self {
            SweepParam::Ratio => cfg.image_mask.ratio = value.parse().map_err(|_| bad())?,
            SweepParam::Patch => cfg.image_mask.patch = value.parse().map_err(|_| bad())?,
            SweepParam::Lambda => cfg.loss.lambda = value.parse().map_err(|_| bad())?,
            SweepParam::Strategy => cfg.image_mask.strategy = value.parse()?,
        }
        cfg.validate()
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepParam::Ratio, SweepParam::Patch, SweepParam::Lambda, SweepParam::Strategy]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown sweep parameter {s:?} (ratio|patch|lambda|strategy)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenArgs {
    pub seed: u64,
    pub count: usize,
    pub scene: SceneConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainArgs {
    pub config: TrainConfig,
    pub data: PathBuf,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub split: Split,
    pub robustness: bool,
    pub seed: u64,
    pub occlusion_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepArgs {
    pub param: SweepParam,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub base: TrainConfig,
    pub data: PathBuf,
    pub out: PathBuf,
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreviewArgs {
    pub data: PathBuf,
    pub index: usize,
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub patch: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Gen(GenArgs),
    Train(TrainArgs),
    Eval(EvalArgs),
    Sweep(SweepArgs),
    MaskPreview(PreviewArgs),
}

/// What a finished command reports: one stdout line plus written files.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

/// Human-readable record of one invocation. `params` and `config` are
/// authoritative for replay; the rest is informational.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub argv: String,
    pub code_version: String,
    pub started_unix: u64,
    pub elapsed_secs: Option<f64>,
    pub seeds: Vec<u64>,
    pub params: Vec<(String, String)>,
    pub config: Vec<(String, String)>,
    pub artifacts: Vec<(String, String)>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("version = 1\n");
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "argv = {}", self.argv);
        let _ = writeln!(s, "code_version = {}", self.code_version);
        let _ = writeln!(s, "started_unix = {}", self.started_unix);
        if let Some(e) = self.elapsed_secs {
            let _ = writeln!(s, "elapsed_secs = {e:.3}");
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds = {}", seeds.join(","));
        for (prefix, pairs) in [("param", &self.params), ("config", &self.config), ("artifact", &self.artifacts)] {
            for (k, v) in pairs {
                let _ = writeln!(s, "{prefix}.{k} = {v}");
            }
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut f = KvFile::parse(text, origin)?;
        let command = f
            .take_str("command")
            .ok_or_else(|| Error::corrupt(origin, "manifest has no command"))?;
        let argv = f.take_str("argv").unwrap_or_default();
        let code_version = f.take_str("code_version").unwrap_or_default();
        let mut started_unix = 0u64;
        f.take("started_unix", &mut started_unix)?;
        let elapsed_secs = match f.take_str("elapsed_secs") {
            Some(v) => Some(v.parse().map_err(|_| Error::corrupt(origin, "bad elapsed_secs"))?),
            None => None,
        };
        let seeds = match f.take_str("seeds") {
            Some(v) => parse_list(&v)?,
            None => Vec::new(),
        };
        let params = f.take_prefixed("param");
        let config = f.take_prefixed("config");
        let artifacts = f.take_prefixed("artifact");
        f.finish()?;
        Ok(Self {
            command,
            argv,
            code_version,
            started_unix,
            elapsed_secs,
            seeds,
            params,
            config,
            artifacts,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    fn param(&self, key: &str) -> Result<&str> {
        self.params
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::invalid(format!("manifest lacks param.{key}")))
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.param(key)?;
        v.parse()
            .map_err(|_| Error::invalid(format!("manifest param.{key} has bad value {v:?}")))
    }

    /// Rebuilds a versioned kv text from the `config.*` entries.
    fn config_text(&self) -> String {
        let mut s = String::from("version = 1\n");
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Parses a comma-separated list.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad list item {p:?}")))
        })
        .collect()
}

fn kv_pairs(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| k != "version")
        .collect()
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn join_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::MaskPreview(_) => "mask-preview",
        }
    }

    fn out(&self) -> &Path {
        match self {
            Command::Gen(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::Sweep(a) => &a.out,
            Command::MaskPreview(a) => &a.out,
        }
    }

    /// Where the run manifest goes: beside the dataset for `gen`, inside
    /// the output directory otherwise.
    pub fn manifest_path(&self) -> PathBuf {
        match self {
            Command::Gen(a) => {
                let mut s = a.out.as_os_str().to_owned();
                s.push(".run.txt");
                PathBuf::from(s)
            }
            _ => self.out().join(MANIFEST_FILE),
        }
    }

    /// Files the command writes, besides the manifest.
    pub fn artifacts(&self) -> Vec<(&'static str, PathBuf)> {
        let d = self.out();
        match self {
            Command::Gen(a) => vec![
                ("dataset", a.out.clone()),
                ("dataset_manifest", crate::synthdata::manifest_path(&a.out)),
            ],
            Command::Train(_) => vec![
                ("checkpoint", d.join("model.ckpt")),
                ("stats", d.join("stats.csv")),
                ("config", d.join("config.txt")),
            ],
            Command::Eval(a) => {
                let mut v = vec![("eval", d.join("eval.csv"))];
                if a.robustness {
                    v.push(("robustness", d.join("robustness.csv")));
                    v.push(("robustness_long", d.join("robustness_long.csv")));
                    v.push(("robustness_table", d.join("robustness.txt")));
                }
                v
            }
            Command::Sweep(_) => vec![("sweep", d.join("sweep.csv")), ("sweep_runs", d.join("sweep_runs.csv"))],
            Command::MaskPreview(_) => vec![
                ("original", d.join("original.pgm")),
                ("mask", d.join("mask.pgm")),
                ("masked", d.join("masked.pgm")),
            ],
        }
    }

    /// Points every output into `dir`, leaving inputs alone.
    pub fn redirect(&mut self, dir: &Path) {
        match self {
            Command::Gen(a) => {
                let name = a.out.file_name().map(PathBuf::from).unwrap_or_else(|| "data.bin".into());
                a.out = dir.join(name);
            }
            Command::Train(a) => a.out = dir.to_path_buf(),
            Command::Eval(a) => a.out = dir.to_path_buf(),
            Command::Sweep(a) => a.out = dir.to_path_buf(),
            Command::MaskPreview(a) => a.out = dir.to_path_buf(),
        }
    }

    fn seeds(&self) -> Vec<u64> {
        match self {
            Command::Gen(a) => vec![a.seed],
            Command::Train(a) => vec![a.config.seed],
            Command::Eval(a) => vec![a.seed],
            Command::Sweep(a) => a.seeds.clone(),
            Command::MaskPreview(a) => vec![a.seed],
        }
    }

    fn params(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: String| (k.to_string(), v);
        match self {
            Command::Gen(a) => vec![
                p("seed", a.seed.to_string()),
                p("count", a.count.to_string()),
                p("out", path_str(&a.out)),
            ],
            Command::Train(a) => vec![p("data", path_str(&a.data)), p("out", path_str(&a.out))],
            Command::Eval(a) => vec![
                p("ckpt", path_str(&a.ckpt)),
                p("data", path_str(&a.data)),
                p("out", path_str(&a.out)),
                p("split", split_name(a.split).to_string()),
                p("robustness", a.robustness.to_string()),
                p("seed", a.seed.to_string()),
                p("occlusion_fraction", a.occlusion_fraction.to_string()),
            ],
            Command::Sweep(a) => vec![
                p("param", a.param.name().to_string()),
                p("values", a.values.join(",")),
                p("seeds", join_list(&a.seeds)),
                p("data", path_str(&a.data)),
                p("out", path_str(&a.out)),
                p("parallel", a.parallel.to_string()),
            ],
            Command::MaskPreview(a) => vec![
                p("data", path_str(&a.data)),
                p("index", a.index.to_string()),
                p("strategy", a.strategy.name().to_string()),
                p("ratio", a.ratio.to_string()),
                p("patch", a.patch.to_string()),
                p("seed", a.seed.to_string()),
                p("out", path_str(&a.out)),
            ],
        }
    }

    fn config_snapshot(&self) -> Vec<(String, String)> {
        match self {
            Command::Gen(a) => kv_pairs(&a.scene.kv_lines()),
            Command::Train(TrainArgs { config, .. }) | Command::Sweep(SweepArgs { base: config, .. }) => {
                kv_pairs(&config.to_kv())
            }
            _ => Vec::new(),
        }
    }

    /// Manifest for this command; keyed sections are sorted by key.
    pub fn manifest(&self, argv: &[String]) -> RunManifest {
        let sorted = |mut v: Vec<(String, String)>| {
            v.sort();
            v
        };
        RunManifest {
            command: self.name().to_string(),
            argv: argv.join(" "),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            elapsed_secs: None,
            seeds: self.seeds(),
            params: sorted(self.params()),
            config: sorted(self.config_snapshot()),
            artifacts: sorted(
                self.artifacts()
                    .into_iter()
                    .map(|(k, p)| (k.to_string(), path_str(&p)))
                    .collect(),
            ),
        }
    }

    pub fn from_manifest(m: &RunManifest) -> Result<Self> {
        let origin = "manifest config";
        let path = |k: &str| m.param(k).map(PathBuf::from);
        Ok(match m.command.as_str() {
            "gen" => Command::Gen(GenArgs {
                seed: m.parsed("seed")?,
                count: m.parsed("count")?,
                scene: SceneConfig::from_kv(&m.config_text(), origin)?,
                out: path("out")?,
            }),
            "train" => Command::Train(TrainArgs {
                config: TrainConfig::from_kv(&m.config_text(), origin)?,
                data: path("data")?,
                out: path("out")?,
            }),
            "eval" => Command::Eval(EvalArgs {
                ckpt: path("ckpt")?,
                data: path("data")?,
                out: path("out")?,
                split: parse_split(m.param("split")?)?,
                robustness: m.parsed("robustness")?,
                seed: m.parsed("seed")?,
                occlusion_fraction: m.parsed("occlusion_fraction")?,
            }),
            "sweep" => Command::Sweep(SweepArgs {
                param: m.parsed("param")?,
                values: parse_list(m.param("values")?)?,
                seeds: parse_list(m.param("seeds")?)?,
                base: TrainConfig::from_kv(&m.config_text(), origin)?,
                data: path("data")?,
                out: path("out")?,
                parallel: m.parsed("parallel")?,
            }),
            "mask-preview" => Command::MaskPreview(PreviewArgs {
                data: path("data")?,
                index: m.parsed("index")?,
                strategy: m.parsed("strategy")?,
                ratio: m.parsed("ratio")?,
                patch: m.parsed("patch")?,
                seed: m.parsed("seed")?,
                out: path("out")?,
            }),
            other => return Err(Error::invalid(format!("unknown command {other:?} in manifest"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Command::Gen(a) => {
                if a.count == 0 {
                    return Err(Error::invalid("count must be at least 1"));
                }
                a.scene.validate()
            }
            Command::Train(a) => a.config.validate(),
            Command::Eval(a) => {
                if !(0.0..=1.0).contains(&a.occlusion_fraction) {
                    return Err(Error::invalid("occlusion fraction must lie in [0, 1]"));
                }
                Ok(())
            }
            Command::Sweep(a) => {
                if a.values.is_empty() || a.seeds.is_empty() {
                    return Err(Error::invalid("sweep needs at least one value and one seed"));
                }
                for v in &a.values {
                    a.param.apply(&mut a.base.clone(), v)?;
                }
                a.base.validate()
            }
            Command::MaskPreview(a) => {
                if !(0.0..=1.0).contains(&a.ratio) || a.patch == 0 {
                    return Err(Error::invalid("ratio must lie in [0, 1] and patch be at least 1"));
                }
                Ok(())
            }
        }
    }
}

/// Validates, writes the manifest, runs, then rewrites the manifest with
/// the elapsed time.
pub fn execute(cmd: &Command, argv: &[String]) -> Result<Outcome> {
    cmd.validate()?;
    match cmd {
        Command::Gen(a) => {
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
        }
        _ => fs::create_dir_all(cmd.out())?,
    }
    let mut manifest = cmd.manifest(argv);
    let mpath = cmd.manifest_path();
    write_atomic(&mpath, manifest.to_text().as_bytes())?;
    let t = Instant::now();
    let summary = match cmd {
        Command::Gen(a) => run_gen(a)?,
        Command::Train(a) => run_train(a)?,
        Command::Eval(a) => run_eval(a)?,
        Command::Sweep(a) => run_sweep(a)?,
        Command::MaskPreview(a) => run_preview(a)?,
    };
    manifest.elapsed_secs = Some(t.elapsed().as_secs_f64());
    write_atomic(&mpath, manifest.to_text().as_bytes())?;
    let mut artifacts: Vec<PathBuf> = cmd.artifacts().into_iter().map(|(_, p)| p).collect();
    artifacts.push(mpath);
    Ok(Outcome { summary, artifacts })
}

/// Reruns the command recorded in a manifest, optionally writing its
/// outputs into `out_dir` instead of the recorded locations.
pub fn replay(manifest: &Path, out_dir: Option<&Path>, argv: &[String]) -> Result<Outcome> {
    let m = RunManifest::read(manifest)?;
    let mut cmd = Command::from_manifest(&m)?;
    if let Some(dir) = out_dir {
        cmd.redirect(dir);
    }
    execute(&cmd, argv)
}

fn run_gen(a: &GenArgs) -> Result<String> {
    let d = generate_dataset(a.seed, a.count, &a.scene)?;
    write_dataset(&a.out, &d, &a.scene)?;
    let mut s = format!(
        "count={} train={} val={}",
        d.len(),
        d.count(Split::Train),
        d.count(Split::Val)
    );
    for t in Tag::ALL {
        let n = d.records.iter().filter(|r| r.tags.contains(t)).count();
        let _ = write!(s, " {}={n}", t.name());
    }
    Ok(s)
}

fn run_train(a: &TrainArgs) -> Result<String> {
    let data = read_dataset(&a.data)?;
    let mode = a.config.mode()?;
    let (state, stats) = train(&a.config, &data)?;
    let arts = Command::Train(a.clone()).artifacts();
    write_atomic(&arts[2].1, a.config.to_kv().as_bytes())?;
    write_atomic(&arts[1].1, stats.to_csv().as_bytes())?;
    write_checkpoint(&arts[0].1, &state)?;
    let last = stats
        .last_val()
        .ok_or_else(|| Error::InvalidState("training produced no validation row".into()))?;
    Ok(format!(
        "mode={mode} epochs={} steps={} miou={:.6} oiou={:.6}",
        a.config.epochs,
        state.step,
        last.val_miou.unwrap_or(f64::NAN),
        last.val_oiou.unwrap_or(f64::NAN)
    ))
}

fn check_compatible(state: &crate::model::ModelState, data: &Dataset) -> Result<()> {
    let c = &state.config;
    if c.image_height != data.height || c.image_width != data.width || c.vocab_size != data.vocab.len() {
        return Err(Error::invalid(format!(
            "checkpoint expects {}x{} images and {} words, dataset has {}x{} and {}",
            c.image_height,
            c.image_width,
            c.vocab_size,
            data.height,
            data.width,
            data.vocab.len()
        )));
    }
    Ok(())
}

/// Rows for the dataset's own tags; the occlusion row uses occluders
/// present at generation time.
fn tag_rows(state: &crate::model::ModelState, samples: &[&SampleRecord]) -> Result<Vec<TagRow>> {
    Tag::ALL
        .into_iter()
        .map(|tag| {
            let subset: Vec<&SampleRecord> = samples.iter().copied().filter(|s| s.tags.contains(tag)).collect();
            let result: Option<EvalResult> = (!subset.is_empty()).then(|| evaluate(state, &subset)).transpose()?;
            Ok(TagRow { tag, result })
        })
        .collect()
}

fn run_eval(a: &EvalArgs) -> Result<String> {
    let state = read_checkpoint(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    check_compatible(&state, &data)?;
    let samples = data.split(a.split);
    if samples.is_empty() {
        return Err(Error::invalid(format!("dataset has no {} samples", split_name(a.split))));
    }
    let arts = Command::Eval(a.clone()).artifacts();
    let clean = evaluate(&state, &samples)?;
    let tags = tag_rows(&state, &samples)?;
    write_atomic(&arts[0].1, eval_csv(&clean, &tags).as_bytes())?;
    let mut s = format!(
        "split={} n={} miou={:.6} oiou={:.6}",
        split_name(a.split),
        clean.len(),
        clean.miou,
        clean.oiou
    );
    if a.robustness {
        let report = robustness_report_with(
            &state,
            &samples,
            &CorruptionKind::ALL,
            a.seed,
            a.occlusion_fraction,
            corrupt,
        )?;
        write_atomic(&arts[1].1, corruption_csv(&report).as_bytes())?;
        write_atomic(&arts[2].1, long_csv(&report).as_bytes())?;
        write_atomic(&arts[3].1, text_table(&report).as_bytes())?;
        let _ = write!(s, " corrupted_oiou={:.6}", report.mean_corrupted_oiou());
    }
    Ok(s)
}

/// Per-value aggregate over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub miou: Vec<f64>,
    pub oiou: Vec<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const SWEEP_CSV_HEADER: &str = "param,value,seeds,miou_mean,miou_sd,oiou_mean,oiou_sd";
pub const SWEEP_RUNS_HEADER: &str = "param,value,seed,miou,oiou";

/// Numeric parameters are ordered by value; strategies keep their order.
fn sweep_values(a: &SweepArgs) -> Result<Vec<String>> {
    let mut values = a.values.clone();
    if a.param != SweepParam::Strategy {
        let mut keyed = values
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map(|x| (x, v.clone()))
                    .map_err(|_| Error::invalid(format!("bad {} value {v:?}", a.param.name())))
            })
            .collect::<Result<Vec<_>>>()?;
        keyed.sort_by(|x, y| x.0.total_cmp(&y.0));
        values = keyed.into_iter().map(|(_, v)| v).collect();
    }
    let mut seen = values.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != values.len() {
        return Err(Error::invalid("sweep values must be distinct"));
    }
    Ok(values)
}

/// Trains once per (value, seed) and aggregates final validation metrics.
pub fn sweep(a: &SweepArgs, data: &Dataset) -> Result<Vec<SweepRow>> {
    let values = sweep_values(a)?;
    let jobs: Vec<(usize, u64)> = (0..values.len())
        .flat_map(|v| a.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run = |&(v, seed): &(usize, u64)| -> Result<(f64, f64)> {
        let mut cfg = a.base.clone();
        a.param.apply(&mut cfg, &values[v])?;
        cfg.seed = seed;
        let (_, stats) = train(&cfg, data)?;
        let last = stats
            .last_val()
            .ok_or_else(|| Error::InvalidState("training produced no validation row".into()))?;
        Ok((last.val_miou.unwrap_or(f64::NAN), last.val_oiou.unwrap_or(f64::NAN)))
    };
    let results: Vec<Result<(f64, f64)>> = if a.parallel {
        par_map(&jobs, run)
    } else {
        jobs.iter().map(run).collect()
    };
    let mut rows: Vec<SweepRow> = values
        .iter()
        .map(|v| SweepRow {
            value: v.clone(),
            miou: Vec::new(),
            oiou: Vec::new(),
        })
        .collect();
    for (&(v, _), r) in jobs.iter().zip(results) {
        let (m, o) = r?;
        rows[v].miou.push(m);
        rows[v].oiou.push(o);
    }
    Ok(rows)
}

fn run_sweep(a: &SweepArgs) -> Result<String> {
    let data = read_dataset(&a.data)?;
    let rows = sweep(a, &data)?;
    let name = a.param.name();
    let mut csv = format!("version,1\n{SWEEP_CSV_HEADER}\n");
    let mut runs = format!("version,1\n{SWEEP_RUNS_HEADER}\n");
    let mut table = String::new();
    for r in &rows {
        let (mm, ms) = mean_sd(&r.miou);
        let (om, os) = mean_sd(&r.oiou);
        let _ = writeln!(csv, "{name},{},{},{mm},{ms},{om},{os}", r.value, r.miou.len());
        for (i, seed) in a.seeds.iter().enumerate() {
            let _ = writeln!(runs, "{name},{},{seed},{},{}", r.value, r.miou[i], r.oiou[i]);
        }
        let _ = write!(
            table,
            "{name}={} miou={:.4}±{:.4} oiou={:.4}±{:.4}; ",
            r.value, mm, ms, om, os
        );
    }
    let arts = Command::Sweep(a.clone()).artifacts();
    write_atomic(&arts[0].1, csv.as_bytes())?;
    write_atomic(&arts[1].1, runs.as_bytes())?;
    Ok(table.trim_end_matches("; ").to_string())
}

fn run_preview(a: &PreviewArgs) -> Result<String> {
    let data = read_dataset(&a.data)?;
    let rec = data.records.get(a.index).ok_or_else(|| {
        Error::invalid(format!("index {} out of range (dataset has {} samples)", a.index, data.len()))
    })?;
    let (h, w) = (rec.image.height(), rec.image.width());
    let mut rng = RngStream::new(a.seed, "preview");
    let mask = sample_image_mask(a.strategy, h, w, a.patch, a.ratio, &mut rng)?;
    let masked = apply_image_mask(&rec.image, &mask)?;
    let arts = Command::MaskPreview(a.clone()).artifacts();
    write_atomic(&arts[0].1, &pgm_bytes(w, h, &rec.image.to_gray_u8()))?;
    write_atomic(&arts[1].1, &mask.to_pgm())?;
    write_atomic(&arts[2].1, &pgm_bytes(w, h, &masked.to_gray_u8()))?;
    Ok(format!(
        "strategy={} masked_fraction={:.6}",
        a.strategy.name(),
        mask.count() as f64 / (h * w) as f64
    ))
}

/// Train config from an optional file, with the mode applied.
pub fn load_train_config(path: Option<&Path>, mode: TrainMode) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_kv(&fs::read_to_string(p)?, &path_str(p))?,
        None => TrainConfig::default(),
    };
    cfg.set_mode(mode);
    Ok(cfg)
}

pub fn load_scene_config(path: Option<&Path>) -> Result<SceneConfig> {
    match path {
        Some(p) => SceneConfig::from_kv(&fs::read_to_string(p)?, &path_str(p)),
        None => Ok(SceneConfig::default()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_commands() -> Vec<Command> {
        let mut cfg = TrainConfig::for_mode(TrainMode::MaskRis);
        cfg.epochs = 3;
        cfg.loss.lambda = 0.25;
        vec![
            Command::Gen(GenArgs {
                seed: 4,
                count: 30,
                scene: SceneConfig::default(),
                out: "d/data.bin".into(),
            }),
            Command::Train(TrainArgs {
                config: cfg.clone(),
                data: "d/data.bin".into(),
                out: "runs/a".into(),
            }),
            Command::Eval(EvalArgs {
                ckpt: "runs/a/model.ckpt".into(),
                data: "d/data.bin".into(),
                out: "runs/e".into(),
                split: Split::Train,
                robustness: true,
                seed: 9,
                occlusion_fraction: 0.5,
            }),
            Command::Sweep(SweepArgs {
                param: SweepParam::Lambda,
                values: vec!["0.1".into(), "1".into()],
                seeds: vec![0, 1, 2],
                base: cfg,
                data: "d/data.bin".into(),
                out: "runs/s".into(),
                parallel: false,
            }),
            Command::MaskPreview(PreviewArgs {
                data: "d/data.bin".into(),
                index: 3,
                strategy: MaskStrategy::BlockWise,
                ratio: 0.5,
                patch: 8,
                seed: 1,
                out: "p".into(),
            }),
        ]
    }

    #[test]
    fn manifest_round_trip() {
        for cmd in sample_commands() {
            let m = cmd.manifest(&["maskris".into(), cmd.name().into()]);
            let back = RunManifest::parse(&m.to_text(), "t").unwrap();
            assert_eq!(back, m);
            assert_eq!(Command::from_manifest(&back).unwrap(), cmd);
        }
    }

    #[test]
    fn redirect_moves_outputs_only() {
        let mut cmds = sample_commands();
        for c in &mut cmds {
            c.redirect(Path::new("elsewhere"));
        }
        let Command::Gen(g) = &cmds[0] else { panic!() };
        assert_eq!(g.out, Path::new("elsewhere/data.bin"));
        let Command::Eval(e) = &cmds[2] else { panic!() };
        assert_eq!(e.ckpt, Path::new("runs/a/model.ckpt"));
        assert_eq!(e.out, Path::new("elsewhere"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::invalid("x")), EXIT_USAGE);
        assert_eq!(exit_code(&Error::corrupt("p", "r")), EXIT_CORRUPT);
        let d = Error::TrainingDiverged { step: 1, what: "nan".into() };
        assert_eq!(exit_code(&d), EXIT_DIVERGED);
    }

    #[test]
    fn sweep_values_sorted_and_distinct() {
        let Command::Sweep(mut s) = sample_commands().remove(3) else { panic!() };
        s.param = SweepParam::Ratio;
        s.values = vec!["0.75".into(), "0.25".into(), "0.5".into()];
        assert_eq!(sweep_values(&s).unwrap(), ["0.25", "0.5", "0.75"]);
        s.values.push("0.5".into());
        assert!(sweep_values(&s).is_err());
        assert!("depth".parse::<SweepParam>().is_err());
    }

    #[test]
    fn mean_sd_matches_hand_values() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_sd(&[4.0]), (4.0, 0.0));
    }
}
