//! Experiment configuration and the command implementations behind the
//! `discseg` binary. Every command returns its metrics as ordered
//! `key=value` pairs so callers (the binary, tests) can print or inspect them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    generate_samples, load_dataset, localization_data, segmentation_data, split_train_val_test,
    Dataset, SyntheticSpec,
};
use crate::error::{param_err, Error, Result};
use crate::eval::{
    efficiency_sweep, localization_report, mean_std, run_fold, sweep_plan, RunSpec, Scheme,
    SweepConfig,
};
use crate::model::{ModelConfig, ModelKind, UNetModel};
use crate::preprocess::{PreprocessConfig, StageOrder};
use crate::train::{
    dice_scores, init_seed, train_localizer, LocalizationData, OptimizerKind, SegmentationData,
    TrainConfig,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DISCSEG_OUT";

/// Every configuration key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("out_dir", "output root (default $DISCSEG_OUT, else ./runs)"),
    (
        "data_dir",
        "dataset root holding localization/ and segmentation/ (default <out_dir>/data)",
    ),
    ("jobs", "worker threads for the sweep"),
    ("gen.loc_count", "centroid-labelled images to generate"),
    ("gen.seg_count", "mask-labelled images to generate"),
    ("synth.size", "generated image side in pixels"),
    (
        "synth.radius_min",
        "smallest disc semi-axis, fraction of the side, in (0, 0.5)",
    ),
    (
        "synth.radius_max",
        "largest disc semi-axis, fraction of the side, in (0, 0.5)",
    ),
    ("synth.disc_min", "darkest disc intensity in [0, 1]"),
    ("synth.disc_max", "brightest disc intensity in [0, 1]"),
    ("synth.background_min", "darkest background level in [0, 1]"),
    (
        "synth.background_max",
        "brightest background level in [0, 1]",
    ),
    ("synth.texture", "background texture amplitude in [0, 1]"),
    ("synth.vessels", "dark vessels per image"),
    ("synth.vessel_width", "vessel half-width in pixels"),
    ("synth.distractors", "bright disc-like blobs per image"),
    ("synth.noise_sigma", "Gaussian noise standard deviation"),
    ("synth.seed", "generator seed"),
    ("pre.tiles", "CLAHE tiles per side"),
    (
        "pre.clip_limit",
        "CLAHE clip limit (multiple of the mean bin count)",
    ),
    ("pre.gamma", "gamma exponent"),
    ("pre.order", "clahe_first or normalize_first"),
    (
        "model.input_size",
        "network input side; images are resized to it",
    ),
    ("model.levels", "encoder depth (number of poolings)"),
    ("model.base_filters", "channels at the first level"),
    ("model.dropout_rate", "encoder dropout rate"),
    ("loc.optimizer", "rmsprop or adam"),
    ("loc.learning_rate", "localizer learning rate"),
    ("loc.batch_size", "localizer batch size"),
    ("loc.epochs", "localizer epoch limit"),
    (
        "loc.patience",
        "early-stopping patience in epochs (0 disables)",
    ),
    ("loc.seed", "localizer initialization and shuffling seed"),
    ("loc.split_seed", "seed of the 80/10/10 localization split"),
    ("seg.optimizer", "rmsprop or adam"),
    ("seg.learning_rate", "segmenter learning rate"),
    ("seg.batch_size", "segmenter batch size"),
    ("seg.epochs", "segmenter epochs when seg.steps is 0"),
    (
        "seg.steps",
        "optimizer steps per segmentation run (0 uses seg.epochs)",
    ),
    ("sweep.fractions", "comma-separated training percentages"),
    ("sweep.k", "cross-validation folds"),
    (
        "sweep.base_seed",
        "seed for folds, subsampling and per-run seeds",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub loc_count: usize,
    pub seg_count: usize,
    pub synth: SyntheticSpec,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub loc: TrainConfig,
    pub split_seed: u64,
    /// Segmentation training lives in `sweep.train`.
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let out_dir = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        ExperimentConfig {
            out_dir,
            data_dir: None,
            loc_count: 1024,
            seg_count: 92,
            synth: SyntheticSpec::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            loc: TrainConfig::localize(),
            split_seed: 0,
            sweep: SweepConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| param_err!("{key}: cannot parse {value:?}"))
}

fn parse_optimizer(key: &str, value: &str) -> Result<OptimizerKind> {
    match value {
        "rmsprop" => Ok(OptimizerKind::RmsProp),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(param_err!("{key}: expected rmsprop or adam, got {value:?}")),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "jobs" => self.sweep.jobs = parse(key, v)?,
            "gen.loc_count" => self.loc_count = parse(key, v)?,
            "gen.seg_count" => self.seg_count = parse(key, v)?,
            "synth.size" => self.synth.size = parse(key, v)?,
            "synth.radius_min" => self.synth.radius_min = parse(key, v)?,
            "synth.radius_max" => self.synth.radius_max = parse(key, v)?,
            "synth.disc_min" => self.synth.disc_min = parse(key, v)?,
            "synth.disc_max" => self.synth.disc_max = parse(key, v)?,
            "synth.background_min" => self.synth.background_min = parse(key, v)?,
            "synth.background_max" => self.synth.background_max = parse(key, v)?,
            "synth.texture" => self.synth.texture = parse(key, v)?,
            "synth.vessels" => self.synth.vessels = parse(key, v)?,
            "synth.vessel_width" => self.synth.vessel_width = parse(key, v)?,
            "synth.distractors" => self.synth.distractors = parse(key, v)?,
            "synth.noise_sigma" => self.synth.noise_sigma = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "pre.tiles" => self.preprocess.tiles = parse(key, v)?,
            "pre.clip_limit" => self.preprocess.clip_limit = parse(key, v)?,
            "pre.gamma" => self.preprocess.gamma = parse(key, v)?,
            "pre.order" => {
                self.preprocess.order = match v {
                    "clahe_first" => StageOrder::ClaheFirst,
                    "normalize_first" => StageOrder::NormalizeFirst,
                    _ => {
                        return Err(param_err!(
                            "{key}: expected clahe_first or normalize_first, got {v:?}"
                        ))
                    }
                }
            }
            "model.input_size" => self.model.input_size = parse(key, v)?,
            "model.levels" => self.model.levels = parse(key, v)?,
            "model.base_filters" => self.model.base_filters = parse(key, v)?,
            "model.dropout_rate" => self.model.dropout_rate = parse(key, v)?,
            "loc.optimizer" => self.loc.optimizer = parse_optimizer(key, v)?,
            "loc.learning_rate" => self.loc.learning_rate = parse(key, v)?,
            "loc.batch_size" => self.loc.batch_size = parse(key, v)?,
            "loc.epochs" => self.loc.epochs = parse(key, v)?,
            "loc.patience" => self.loc.patience = parse(key, v)?,
            "loc.seed" => self.loc.seed = parse(key, v)?,
            "loc.split_seed" => self.split_seed = parse(key, v)?,
            "seg.optimizer" => self.sweep.train.optimizer = parse_optimizer(key, v)?,
            "seg.learning_rate" => self.sweep.train.learning_rate = parse(key, v)?,
            "seg.batch_size" => self.sweep.train.batch_size = parse(key, v)?,
            "seg.epochs" => self.sweep.train.epochs = parse(key, v)?,
            "seg.steps" => self.sweep.steps = parse(key, v)?,
            "sweep.fractions" => {
                self.sweep.fractions = v
                    .split(',')
                    .map(|f| parse(key, f.trim()))
                    .collect::<Result<_>>()?
            }
            "sweep.k" => self.sweep.k = parse(key, v)?,
            "sweep.base_seed" => self.sweep.base_seed = parse(key, v)?,
            _ => return Err(param_err!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Applies a config file body: `key = value` lines, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| param_err!("config line {}: expected `key = value`", n + 1))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        self.apply_text(&text)
    }

    /// `key=value` override as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| param_err!("override {kv:?} is not key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate().map_err(|e| prefix_key(e, "synth."))?;
        self.model.validate().map_err(|e| prefix_key(e, "model."))?;
        self.loc.validate().map_err(|e| prefix_key(e, "loc."))?;
        self.sweep
            .train
            .validate()
            .map_err(|e| prefix_key(e, "seg."))?;
        if self.sweep.jobs == 0 {
            return Err(param_err!("jobs must be at least 1"));
        }
        for &f in &self.sweep.fractions {
            if !(10..=100).contains(&f) || !f.is_multiple_of(10) {
                return Err(param_err!(
                    "sweep.fractions: {f} is not one of 10, 20, …, 100"
                ));
            }
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn localization_dir(&self) -> PathBuf {
        self.data_dir().join("localization")
    }

    pub fn segmentation_dir(&self) -> PathBuf {
        self.data_dir().join("segmentation")
    }

    pub fn localizer_path(&self) -> PathBuf {
        self.out_dir.join("localizer").join("localizer.ckpt")
    }

    fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            size: self.model.input_size,
            ..self.preprocess.clone()
        }
    }

    pub fn load_localization(&self) -> Result<LocalizationData> {
        localization_data(
            &load_dataset(&self.localization_dir())?,
            &self.preprocess_config(),
        )
    }

    pub fn load_segmentation(&self) -> Result<SegmentationData> {
        segmentation_data(
            &load_dataset(&self.segmentation_dir())?,
            &self.preprocess_config(),
        )
    }
}

/// Parameter messages from the typed configs start with the field name;
/// prefixing the section turns that into the config key.
fn prefix_key(e: Error, section: &str) -> Error {
    match e {
        Error::Param(msg) => Error::Param(format!("{section}{msg}")),
        other => other,
    }
}

pub type Metrics = Vec<(String, String)>;

fn metric(out: &mut Metrics, key: impl Into<String>, value: impl ToString) {
    out.push((key.into(), value.to_string()));
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::file(p, e))
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).is_ok_and(|mut d| d.next().is_some())
}

/// Generates the localization and segmentation datasets.
pub fn cmd_gen(cfg: &ExperimentConfig, force: bool) -> Result<Metrics> {
    cfg.validate()?;
    let root = cfg.data_dir();
    if is_nonempty_dir(&root) && !force {
        return Err(Error::State(format!(
            "{} is not empty; pass --force to overwrite",
            root.display()
        )));
    }
    let mut out = Metrics::new();
    for (dir, stream, count, masks) in [
        (cfg.localization_dir(), 1, cfg.loc_count, false),
        (cfg.segmentation_dir(), 2, cfg.seg_count, true),
    ] {
        if count == 0 {
            return Err(param_err!(
                "gen.loc_count and gen.seg_count must be positive"
            ));
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        }
        let data = Dataset::from_samples(generate_samples(&cfg.synth, stream, count)?, masks);
        let manifest = format!(
            "kind = {}\ncount = {count}\nstream = {stream}\n{}",
            if masks {
                "segmentation"
            } else {
                "localization"
            },
            cfg.synth.manifest()
        );
        crate::data::write_dataset(&data, &dir, &manifest)?;
        metric(
            &mut out,
            if masks { "seg_samples" } else { "loc_samples" },
            count,
        );
    }
    metric(&mut out, "data_dir", root.display());
    Ok(out)
}

/// Trains the localizer on the 80 % split with early stopping on the 10 %
/// validation split and reports both held-out splits.
pub fn cmd_train_localizer(cfg: &ExperimentConfig) -> Result<Metrics> {
    cfg.validate()?;
    let data = cfg.load_localization()?;
    let (tr, va, te) = split_train_val_test(data.len(), cfg.split_seed)?;
    let (train, val, test) = (data.subset(&tr), data.subset(&va), data.subset(&te));
    let mut init = ChaCha8Rng::seed_from_u64(init_seed(cfg.loc.seed));
    let mut model = UNetModel::build_localizer(&cfg.model, &mut init)?;
    let curve = train_localizer(&mut model, &train, Some(&val), &cfg.loc)?;
    let dir = cfg.out_dir.join("localizer");
    mkdir(&dir)?;
    model.save(&cfg.localizer_path())?;
    curve.write_csv(&dir.join("loss.csv"))?;
    let v = localization_report(&mut model, &val)?;
    let t = localization_report(&mut model, &test)?;
    let mut out = Metrics::new();
    metric(&mut out, "epochs", curve.epochs.len());
    metric(&mut out, "best_epoch", curve.best_epoch.unwrap_or(0));
    metric(&mut out, "val_mse", v.mse);
    metric(&mut out, "val_euclidean", v.mean_euclidean);
    metric(&mut out, "test_mse", t.mse);
    metric(&mut out, "test_euclidean", t.mean_euclidean);
    metric(&mut out, "checkpoint", cfg.localizer_path().display());
    Ok(out)
}

/// Segmentation scheme selected on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum SegmenterInit {
    Pretrained(PathBuf),
    Baseline,
}

fn load_localizer(path: &Path) -> Result<UNetModel> {
    let m = UNetModel::load(path)?;
    if m.kind() != ModelKind::Localizer {
        return Err(Error::Format(format!(
            "{} holds a {} model, expected a localizer",
            path.display(),
            m.kind().name()
        )));
    }
    Ok(m)
}

/// k-fold cross-validation of one scheme on all segmentation training ids.
/// Fold `f` trains exactly like the 100 % cell of the sweep and saves its
/// model as `fold<f>.ckpt` and its loss curve as `fold<f>_loss.csv`.
pub fn cmd_train_segmenter(cfg: &ExperimentConfig, init: &SegmenterInit) -> Result<Metrics> {
    cfg.validate()?;
    let (scheme, localizer) = match init {
        SegmenterInit::Pretrained(p) => (Scheme::Pretrained, load_localizer(p)?),
        SegmenterInit::Baseline => {
            // Only the architecture of the skeleton is used.
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            (
                Scheme::Baseline,
                UNetModel::build_localizer(&cfg.model, &mut rng)?,
            )
        }
    };
    if localizer.config() != &cfg.model {
        return Err(param_err!(
            "checkpoint architecture {:?} differs from the configured model {:?}",
            localizer.config(),
            cfg.model
        ));
    }
    let data = cfg.load_segmentation()?;
    let plan = sweep_plan(data.len(), &cfg.sweep)?;
    let name = match scheme {
        Scheme::Pretrained => "pretrained",
        Scheme::Baseline => "baseline",
    };
    let dir = cfg.out_dir.join(format!("segmenter-{name}"));
    mkdir(&dir)?;
    let mut all = Vec::new();
    let mut out = Metrics::new();
    let mut csv = String::from("fold,sample,dice\n");
    for fold in 0..cfg.sweep.k {
        let run = RunSpec {
            fold,
            fraction: 100,
            scheme,
        };
        let r = run_fold(&data, &localizer, &cfg.sweep, &plan, run)?;
        r.model.save(&dir.join(format!("fold{fold}.ckpt")))?;
        r.curve
            .write_csv(&dir.join(format!("fold{fold}_loss.csv")))?;
        let scores = r.scores;
        for (s, d) in plan.fold(fold).iter().zip(&scores) {
            csv.push_str(&format!("{fold},{s:04},{d}\n"));
        }
        let (m, _) = mean_std(&scores);
        metric(&mut out, format!("fold{fold}_dice"), m);
        all.extend(scores);
    }
    let p = dir.join("scores.csv");
    fs::write(&p, csv).map_err(|e| Error::file(&p, e))?;
    let (mean, std) = mean_std(&all);
    metric(&mut out, "scheme", name);
    metric(&mut out, "dice_mean", mean);
    metric(&mut out, "dice_std", std);
    Ok(out)
}

/// Runs the full sample-efficiency sweep and writes report.csv, scores.csv
/// and report.svg under `<out_dir>/sweep`.
pub fn cmd_sweep(cfg: &ExperimentConfig, localizer: Option<&Path>) -> Result<Metrics> {
    cfg.validate()?;
    let path = localizer
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.localizer_path());
    if !path.exists() {
        return Err(Error::State(format!(
            "no localizer checkpoint at {}; run train-localizer first",
            path.display()
        )));
    }
    let loc = load_localizer(&path)?;
    let data = cfg.load_segmentation()?;
    let report = efficiency_sweep(&data, Some(&loc), &cfg.sweep)?;
    let dir = cfg.out_dir.join("sweep");
    report.write(&dir)?;
    let mut out = Metrics::new();
    for r in &report.rows {
        let f = r.fraction;
        metric(&mut out, format!("f{f}_mean_pre"), r.mean_pre);
        metric(&mut out, format!("f{f}_mean_base"), r.mean_base);
        metric(&mut out, format!("f{f}_p"), r.test.p);
    }
    metric(&mut out, "report", dir.join("report.csv").display());
    Ok(out)
}

/// Named evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    LocTrain,
    LocVal,
    LocTest,
    SegAll,
    SegFold(usize),
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "loc-train" => Split::LocTrain,
            "loc-val" => Split::LocVal,
            "loc-test" => Split::LocTest,
            "seg-all" => Split::SegAll,
            _ => match s.strip_prefix("seg-fold").and_then(|k| k.parse().ok()) {
                Some(k) => Split::SegFold(k),
                None => {
                    return Err(param_err!(
                        "unknown split {s:?}; expected loc-train, loc-val, loc-test, seg-all or seg-fold<K>"
                    ))
                }
            },
        })
    }
}

/// Reports MSE / Euclidean error (localizer) or Dice (segmenter) of a
/// checkpoint on a split.
pub fn cmd_eval(cfg: &ExperimentConfig, ckpt: &Path, split: Split) -> Result<Metrics> {
    cfg.validate()?;
    let mut model = UNetModel::load(ckpt)?;
    let wants_localizer = matches!(split, Split::LocTrain | Split::LocVal | Split::LocTest);
    if wants_localizer != (model.kind() == ModelKind::Localizer) {
        return Err(Error::Format(format!(
            "{} holds a {} model, which cannot be evaluated on a {} split",
            ckpt.display(),
            model.kind().name(),
            if wants_localizer {
                "localization"
            } else {
                "segmentation"
            }
        )));
    }
    if model.config().input_size != cfg.model.input_size {
        return Err(param_err!(
            "checkpoint expects {0}×{0} input but model.input_size is {1}",
            model.config().input_size,
            cfg.model.input_size
        ));
    }
    let mut out = Metrics::new();
    if wants_localizer {
        let data = cfg.load_localization()?;
        let (tr, va, te) = split_train_val_test(data.len(), cfg.split_seed)?;
        let ids = match split {
            Split::LocTrain => tr,
            Split::LocVal => va,
            _ => te,
        };
        let r = localization_report(&mut model, &data.subset(&ids))?;
        metric(&mut out, "samples", ids.len());
        metric(&mut out, "mse", r.mse);
        metric(&mut out, "euclidean", r.mean_euclidean);
    } else {
        let data = cfg.load_segmentation()?;
        let ids: Vec<usize> = match split {
            Split::SegFold(k) => {
                if k >= cfg.sweep.k {
                    return Err(param_err!(
                        "fold {k} does not exist with sweep.k = {}",
                        cfg.sweep.k
                    ));
                }
                sweep_plan(data.len(), &cfg.sweep)?.fold(k)
            }
            _ => (0..data.len()).collect(),
        };
        let scores = dice_scores(&mut model, &data.subset(&ids))?;
        let (m, s) = mean_std(&scores);
        metric(&mut out, "samples", ids.len());
        metric(&mut out, "dice_mean", m);
        metric(&mut out, "dice_std", s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_with_comments_and_overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("# header\n\nmodel.levels = 3  # inline\nsweep.fractions = 10, 50,100\nseg.optimizer=rmsprop\n")
            .unwrap();
        assert_eq!(cfg.model.levels, 3);
        assert_eq!(cfg.sweep.fractions, [10, 50, 100]);
        assert_eq!(cfg.sweep.train.optimizer, OptimizerKind::RmsProp);
        cfg.apply_override("model.levels=2").unwrap();
        assert_eq!(cfg.model.levels, 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_config_lines() {
        let mut cfg = ExperimentConfig::default();
        for text in [
            "nonsense",
            "foo = 1",
            "model.levels = three",
            "pre.order = sideways",
        ] {
            assert!(
                matches!(cfg.apply_text(text), Err(Error::Param(_))),
                "{text}"
            );
        }
        cfg.set("sweep.fractions", "10,15").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("sweep.fractions"), "{msg}");
        let mut cfg = ExperimentConfig::default();
        cfg.set("model.dropout_rate", "1.5").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("model.dropout_rate"), "{msg}");
    }

    #[test]
    fn every_key_is_settable() {
        let sample = |k: &str| match k {
            "pre.order" => "normalize_first",
            "loc.optimizer" | "seg.optimizer" => "adam",
            "sweep.fractions" => "10,20",
            "out_dir" | "data_dir" => "/tmp/x",
            _ => "1",
        };
        let mut cfg = ExperimentConfig::default();
        for (k, _) in KEYS {
            cfg.set(k, sample(k)).unwrap();
        }
    }

    #[test]
    fn split_names() {
        assert_eq!("loc-val".parse::<Split>().unwrap(), Split::LocVal);
        assert_eq!("seg-fold3".parse::<Split>().unwrap(), Split::SegFold(3));
        assert!("seg-foldx".parse::<Split>().is_err());
    }
}
