//! Metrics, the paired t-test and the sample-efficiency sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{kfold_split, mix_seed, subsample_fraction, FoldPlan};
use crate::error::{param_err, shape_err, Error, Result};
use crate::model::{ModelKind, UNetModel};
use crate::train::{
    dice_scores, init_seed, localization_mse, predict_centroids, train_baseline, train_segmenter,
    LocalizationData, LossCurve, Phase, SegmentationData, TrainConfig,
};

pub fn euclidean_error(pred: [f64; 2], truth: [f64; 2]) -> f64 {
    (pred[0] - truth[0]).hypot(pred[1] - truth[1])
}

/// 1 where `prob > t`, else 0.
pub fn threshold_mask(prob: &[f64], t: f64) -> Vec<u8> {
    prob.iter().map(|&p| (p > t) as u8).collect()
}

/// `2|a∩b| / (|a|+|b|)`, and 1 when both masks are empty.
pub fn dice_coefficient(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!("masks of {} and {} pixels", a.len(), b.len()));
    }
    let (mut both, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        both += (x != 0 && y != 0) as usize;
        total += (x != 0) as usize + (y != 0) as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    })
}

/// Dice of a probability map thresholded at 0.5 against a 0/1 mask.
pub fn dice_of_probs(prob: &[f64], mask: &[f64]) -> f64 {
    let m: Vec<u8> = mask.iter().map(|&v| (v > 0.5) as u8).collect();
    dice_coefficient(&threshold_mask(prob, 0.5), &m).expect("same pixel count")
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let s = C[1..]
        .iter()
        .enumerate()
        .fold(C[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        for num in [
            m * (b - m) * x / ((a + m2 - 1.0) * (a + m2)),
            -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0)),
        ] {
            d = 1.0 + num * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + num / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail probability P(|T| ≥ |t|) of Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

/// Two-sided paired t-test on `a[i] − b[i]`. Zero variance gives t = ±∞,
/// p = 0 for a nonzero mean difference and t = 0, p = 1 otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(shape_err!(
            "paired samples of lengths {} and {}",
            a.len(),
            b.len()
        ));
    }
    if a.len() < 2 {
        return Err(param_err!(
            "a paired t-test needs at least 2 pairs, got {}",
            a.len()
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let (mean, sd) = mean_std(&d);
    let df = d.len() - 1;
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        });
    }
    let t = mean / (sd / n.sqrt());
    Ok(TTest {
        t,
        df,
        p: student_t_two_sided(t, df as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationReport {
    /// Per-coordinate mean squared error, px².
    pub mse: f64,
    pub mean_euclidean: f64,
}

pub fn localization_report(
    model: &mut UNetModel,
    data: &LocalizationData,
) -> Result<LocalizationReport> {
    let mse = localization_mse(model, data)?;
    let pred = predict_centroids(model, data)?;
    let total: f64 = pred
        .iter()
        .zip(&data.centroids)
        .map(|(p, t)| euclidean_error(*p, *t))
        .sum();
    Ok(LocalizationReport {
        mse,
        mean_euclidean: total / data.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Pretrained,
    Baseline,
}

impl Scheme {
    fn tag(self) -> u64 {
        match self {
            Scheme::Pretrained => 0,
            Scheme::Baseline => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Percentages of each fold's training ids, from {10, 20, …, 100}.
    pub fractions: Vec<u32>,
    pub k: usize,
    /// Shared by both schemes; `phase` is set per scheme and `seed` per run.
    pub train: TrainConfig,
    /// Optimizer steps per run. Epochs are derived from the subset size so
    /// every fraction gets the same budget; 0 keeps `train.epochs`.
    pub steps: usize,
    pub base_seed: u64,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            fractions: (1..=10).map(|f| f * 10).collect(),
            k: 5,
            train: TrainConfig::segment(),
            steps: 300,
            base_seed: 0,
            jobs: 1,
        }
    }
}

/// Seed of one training run.
pub fn run_seed(base: u64, fold: usize, fraction: u32, scheme: Scheme) -> u64 {
    mix_seed(base, &[fold as u64, fraction as u64, scheme.tag()])
}

fn plan_seed(base: u64) -> u64 {
    mix_seed(base, &[u64::MAX])
}

fn subsample_seed(base: u64, fold: usize) -> u64 {
    mix_seed(base, &[u64::MAX - 1, fold as u64])
}

/// Scores of one validation image under both schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageScore {
    pub fraction: u32,
    pub fold: usize,
    /// Index into the segmentation dataset.
    pub sample: usize,
    pub pretrained: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FractionRow {
    pub fraction: u32,
    pub mean_pre: f64,
    pub std_pre: f64,
    pub mean_base: f64,
    pub std_base: f64,
    pub test: TTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<FractionRow>,
    /// Ordered by fraction, fold, then sample.
    pub scores: Vec<ImageScore>,
}

impl RunReport {
    pub fn row(&self, fraction: u32) -> Option<&FractionRow> {
        self.rows.iter().find(|r| r.fraction == fraction)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,mean_pre,std_pre,mean_base,std_base,t,df,p\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.fraction,
                r.mean_pre,
                r.std_pre,
                r.mean_base,
                r.std_base,
                r.test.t,
                r.test.df,
                r.test.p
            );
        }
        s
    }

    pub fn scores_csv(&self) -> String {
        let mut s = String::from("fraction,fold,sample,dice_pre,dice_base\n");
        for r in &self.scores {
            let _ = writeln!(
                s,
                "{},{},{:04},{},{}",
                r.fraction, r.fold, r.sample, r.pretrained, r.baseline
            );
        }
        s
    }

    /// Line chart of mean Dice against fraction with ±1 std whiskers.
    pub fn to_svg(&self) -> String {
        const W: f64 = 480.0;
        const H: f64 = 320.0;
        const L: f64 = 56.0;
        const R: f64 = 16.0;
        const T: f64 = 24.0;
        const B: f64 = 44.0;
        let fmin = self.rows.iter().map(|r| r.fraction).min().unwrap_or(10) as f64;
        let fmax = self.rows.iter().map(|r| r.fraction).max().unwrap_or(100) as f64;
        let span = (fmax - fmin).max(1.0);
        let px = |f: f64| L + (f - fmin) / span * (W - L - R);
        let py = |d: f64| T + (1.0 - d.clamp(0.0, 1.0)) * (H - T - B);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{L},{T} V{:.1} H{:.1}" stroke="black" fill="none"/>"#,
            H - B,
            W - R
        );
        for tick in 0..=5 {
            let d = tick as f64 / 5.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{d:.1}</text>"#,
                L - 6.0,
                py(d) + 4.0
            );
        }
        for r in &self.rows {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                px(r.fraction as f64),
                H - B + 16.0,
                r.fraction
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">% training examples</text>"#,
            (L + W - R) / 2.0,
            H - 8.0
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">Dice</text>"#,
            (T + H - B) / 2.0,
            (T + H - B) / 2.0
        );
        for (name, colour, pick) in [
            ("pretrained", "#1f77b4", 0usize),
            ("baseline", "#d62728", 1usize),
        ] {
            let pts: Vec<(f64, f64, f64)> = self
                .rows
                .iter()
                .map(|r| {
                    let (m, sd) = if pick == 0 {
                        (r.mean_pre, r.std_pre)
                    } else {
                        (r.mean_base, r.std_base)
                    };
                    (r.fraction as f64, m, sd)
                })
                .collect();
            let _ = write!(s, r#"<g class="{name}" stroke="{colour}" fill="{colour}">"#);
            s.push('\n');
            for &(f, m, sd) in &pts {
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}"/>"#,
                    py(m - sd),
                    py(m + sd),
                    x = px(f)
                );
            }
            let path: Vec<String> = pts
                .iter()
                .map(|&(f, m, _)| format!("{:.1},{:.1}", px(f), py(m)))
                .collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none"/>"#, path.join(" "));
            for &(f, m, _) in &pts {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="2.5"/>"#,
                    px(f),
                    py(m)
                );
            }
            s.push_str("</g>\n");
        }
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" fill="#1f77b4">pretrained</text>"##,
            W - R - 130.0,
            H - B - 24.0
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" fill="#d62728">baseline</text>"##,
            W - R - 60.0,
            H - B - 24.0
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        for (name, body) in [
            ("report.csv", self.to_csv()),
            ("scores.csv", self.scores_csv()),
            ("report.svg", self.to_svg()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::file(&p, e))?;
        }
        Ok(())
    }
}

/// One cell of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSpec {
    pub fold: usize,
    pub fraction: u32,
    pub scheme: Scheme,
}

/// Epochs that cover `steps` optimizer steps on `n` samples.
pub fn epochs_for_steps(n: usize, batch_size: usize, steps: usize) -> usize {
    steps.div_ceil(n.div_ceil(batch_size).max(1)).max(1)
}

/// Outcome of one sweep cell.
#[derive(Debug, Clone)]
pub struct FoldRun {
    /// Dice of every validation image, in fold order.
    pub scores: Vec<f64>,
    pub model: UNetModel,
    pub curve: LossCurve,
}

/// Trains one scheme on the nested `run.fraction` subsample of the fold's
/// training ids and scores every validation image of `run.fold`.
pub fn run_fold(
    data: &SegmentationData,
    localizer: &UNetModel,
    cfg: &SweepConfig,
    plan: &FoldPlan,
    run: RunSpec,
) -> Result<FoldRun> {
    let seed = subsample_seed(cfg.base_seed, run.fold);
    let ids = subsample_fraction(&plan.train(run.fold), run.fraction, seed)?;
    let train = data.subset(&ids);
    let val = data.subset(&plan.fold(run.fold));
    let mut tc = cfg.train.clone();
    tc.seed = run_seed(cfg.base_seed, run.fold, run.fraction, run.scheme);
    if cfg.steps > 0 {
        tc.epochs = epochs_for_steps(train.len(), tc.batch_size, cfg.steps);
    }
    let (mut model, curve) = match run.scheme {
        Scheme::Pretrained => {
            tc.phase = Phase::Segment;
            let mut init = ChaCha8Rng::seed_from_u64(init_seed(tc.seed));
            let mut m = localizer.clone().extend_to_unet(&mut init)?;
            let curve = train_segmenter(&mut m, &train, None, &tc)?;
            (m, curve)
        }
        Scheme::Baseline => {
            tc.phase = Phase::Baseline;
            train_baseline(localizer.config(), &train, None, &tc)?
        }
    };
    let scores = dice_scores(&mut model, &val)?;
    Ok(FoldRun {
        scores,
        model,
        curve,
    })
}

/// The fold plan a sweep with this base seed uses.
pub fn sweep_plan(n: usize, cfg: &SweepConfig) -> Result<FoldPlan> {
    kfold_split(n, cfg.k, plan_seed(cfg.base_seed))
}

/// For every fraction and fold, trains both schemes on the same nested
/// subsample of the fold's training ids (fixed step budget, no model
/// selection) and scores every held-out image. Runs fan out over
/// `cfg.jobs` threads and are reduced in (fraction, fold) order.
pub fn efficiency_sweep(
    data: &SegmentationData,
    localizer: Option<&UNetModel>,
    cfg: &SweepConfig,
) -> Result<RunReport> {
    let localizer = localizer
        .ok_or_else(|| Error::State("the sweep needs a pretrained localizer checkpoint".into()))?;
    if localizer.kind() != ModelKind::Localizer {
        return Err(Error::State(format!(
            "the sweep needs a localizer, got a {} model",
            localizer.kind().name()
        )));
    }
    if cfg.fractions.is_empty() {
        return Err(param_err!("no fractions to sweep"));
    }
    if cfg.jobs == 0 {
        return Err(param_err!("jobs must be at least 1"));
    }
    let plan = sweep_plan(data.len(), cfg)?;
    let folds: Vec<Vec<usize>> = (0..cfg.k).map(|f| plan.fold(f)).collect();

    let mut runs = Vec::new();
    for &fraction in &cfg.fractions {
        for fold in 0..cfg.k {
            for scheme in [Scheme::Pretrained, Scheme::Baseline] {
                runs.push(RunSpec {
                    fold,
                    fraction,
                    scheme,
                });
            }
        }
    }
    let exec = |run: &RunSpec| run_fold(data, localizer, cfg, &plan, *run).map(|r| r.scores);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::State(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<Vec<f64>>> = pool.install(|| runs.par_iter().map(exec).collect());
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut report = RunReport {
        rows: Vec::new(),
        scores: Vec::new(),
    };
    let mut it = results.chunks(2);
    for &fraction in &cfg.fractions {
        let (mut pre, mut base) = (Vec::new(), Vec::new());
        for (fold, va) in folds.iter().enumerate() {
            let pair = it.next().expect("two runs per fold");
            for ((&sample, &p), &b) in va.iter().zip(&pair[0]).zip(&pair[1]) {
                report.scores.push(ImageScore {
                    fraction,
                    fold,
                    sample,
                    pretrained: p,
                    baseline: b,
                });
            }
            pre.extend_from_slice(&pair[0]);
            base.extend_from_slice(&pair[1]);
        }
        let (mean_pre, std_pre) = mean_std(&pre);
        let (mean_base, std_base) = mean_std(&base);
        report.rows.push(FractionRow {
            fraction,
            mean_pre,
            std_pre,
            mean_base,
            std_base,
            test: paired_t_test(&pre, &base)?,
        });
    }
    Ok(report)
}
