//! Training loop, artifacts and multi-seed suites.

mod config;

pub use config::{RunConfig, OUT_ENV};

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{select_action, Agent, EpsilonSchedule};
use crate::analysis::{self, LatentMatrix};
use crate::envs::{ObsNormalizer, RewardScaler, Transition};
use crate::error::{Error, Result};
use crate::rngs::{stream, Stream};
use crate::spr::{Spr, StepReport};
use crate::tensor::Array;

/// Episodes averaged into the final return.
pub const FINAL_WINDOW: usize = 100;

/// One metrics line: interval means, `None` where nothing was observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub episode_return: Option<f64>,
    pub epsilon: f64,
    pub td_error: Option<f64>,
    pub spr_loss: Option<f64>,
    pub grad_cos: Option<f64>,
    pub lr_effective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub run: String,
    pub steps: u64,
    pub episodes: u64,
    /// Mean return of the last 100 completed episodes.
    pub final_return: Option<f64>,
    pub mean_grad_cos: Option<f64>,
    pub latent_rows: usize,
    pub effective_rank: Option<f64>,
    pub latents_centered: bool,
}

/// Everything a finished run leaves behind in memory.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: Summary,
    pub agent: Agent,
    pub spr: Option<Spr>,
    pub normalizer: Option<ObsNormalizer>,
    pub episode_returns: Vec<f64>,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: u64,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Mean::default();
        out
    }
}

#[derive(Default)]
struct Interval {
    ret: Mean,
    td: Mean,
    spr: Mean,
    cos: Mean,
    lr: Mean,
}

impl Interval {
    fn record(&mut self, r: &StepReport) {
        self.td.add(r.td_error.abs());
        self.lr.add(r.lr);
        if let Some(l) = r.spr_loss {
            self.spr.add(l);
        }
        if let Some(c) = r.grad_cos {
            self.cos.add(c);
        }
    }

    fn flush(&mut self, step: u64, epsilon: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            episode_return: self.ret.take(),
            epsilon,
            td_error: self.td.take(),
            spr_loss: self.spr.take(),
            grad_cos: self.cos.take(),
            lr_effective: self.lr.take(),
        }
    }
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| analysis::mean(&v))
}

/// Runs one configuration to completion and writes its artifacts:
/// `config.txt`, `metrics.jsonl`, `checkpoint/*.ptree`, `summary.json` and,
/// if requested, `latents.csv`. A numerical failure leaves
/// `diagnostic.json` and returns the error.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir();
    fs::create_dir_all(dir.join("checkpoint"))?;
    fs::write(dir.join("config.txt"), cfg.echo())?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);

    let seed = cfg.seed;
    let mut agent = Agent::new(&cfg.agent, cfg.env, seed)?;
    let mut spr = if cfg.spr_enabled {
        Some(Spr::new(cfg.spr.clone(), cfg.env, agent.net(), seed)?)
    } else {
        None
    };
    let mut env_rng = stream(seed, Stream::Env);
    let mut explore_rng = stream(seed, Stream::Explore);
    let mut env = cfg.env.make();
    let mut normalizer = cfg.obs_norm.then(|| ObsNormalizer::new(cfg.env.arch_dims().obs_shape.iter().product()));
    let mut scaler = cfg.reward_norm.then(|| RewardScaler::new(cfg.agent.gamma));
    let schedule = EpsilonSchedule {
        start: cfg.eps_start,
        end: cfg.eps_end,
        explore_fraction: cfg.explore_fraction,
        total_steps: cfg.total_frames,
    };
    let norm = |n: &mut Option<ObsNormalizer>, o: Array| match n {
        Some(n) => n.normalize(&o),
        None => o,
    };

    let mut obs = norm(&mut normalizer, env.reset(&mut env_rng));
    let mut interval = Interval::default();
    let mut returns = Vec::new();
    let mut recent: VecDeque<String> = VecDeque::new();
    let mut ep_return = 0.0;
    let mut cos_all = Mean::default();

    for t in 0..cfg.total_frames {
        let eps = schedule.value(t);
        let step = (|| -> Result<StepReport> {
            let q = agent.net().q_values(&obs)?;
            let (a, greedy) = select_action(&q, eps, &mut explore_rng);
            let st = env.step(a)?;
            ep_return += st.reward;
            let reward = match &mut scaler {
                Some(s) => s.scale(st.reward, st.episode_over()),
                None => st.reward,
            };
            let next = norm(&mut normalizer, st.obs.clone());
            let tr = Transition {
                obs: obs.clone(),
                action: a,
                reward,
                next_obs: next.clone(),
                done: st.done,
                truncated: st.truncated,
                greedy,
            };
            let report = match &mut spr {
                Some(s) => s.observe(&mut agent, &tr)?,
                None => StepReport::plain(&agent.update(&tr)?),
            };
            if !report.td_error.is_finite() {
                return Err(Error::non_finite(format!("td error {} at step {t}", report.td_error)));
            }
            if st.episode_over() {
                returns.push(ep_return);
                interval.ret.add(ep_return);
                ep_return = 0.0;
                obs = norm(&mut normalizer, env.reset(&mut env_rng));
            } else {
                obs = next;
            }
            Ok(report)
        })();
        let report = match step {
            Ok(r) => r,
            Err(e) => {
                metrics.flush()?;
                write_diagnostic(&dir, t, &e, &recent, &agent, spr.as_ref())?;
                return Err(e);
            }
        };
        interval.record(&report);
        if let Some(c) = report.grad_cos {
            cos_all.add(c);
        }
        let done_steps = t + 1;
        if done_steps % cfg.log_every == 0 || done_steps == cfg.total_frames {
            let rec = interval.flush(done_steps, eps);
            let line = serde_json::to_string(&rec)?;
            writeln!(metrics, "{line}")?;
            recent.push_back(line);
            if recent.len() > 10 {
                recent.pop_front();
            }
        }
    }
    metrics.flush()?;

    write_checkpoint(&dir.join("checkpoint"), &agent, spr.as_ref())?;
    if let Some(n) = &normalizer {
        fs::write(dir.join("checkpoint").join("obs_normalizer.json"), serde_json::to_string(n)?)?;
    }

    let mut latent_rows = 0;
    let mut erank = None;
    if cfg.export_latents > 0 {
        let mut rng = stream(seed, Stream::Rollout);
        let eps = schedule.value(cfg.total_frames);
        let lat =
            analysis::latent_rollout(agent.net(), cfg.env, normalizer.as_ref(), eps, cfg.export_latents, &mut rng)?;
        lat.write_csv(&dir.join("latents.csv"))?;
        latent_rows = lat.rows();
        erank = analysis::effective_rank(&lat).ok();
    }

    let tail = returns.len().saturating_sub(FINAL_WINDOW);
    let summary = Summary {
        run: cfg.run_name(),
        steps: cfg.total_frames,
        episodes: returns.len() as u64,
        final_return: mean_of(returns[tail..].iter().copied()),
        mean_grad_cos: cos_all.take(),
        latent_rows,
        effective_rank: erank,
        latents_centered: true,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(RunOutcome {
        dir,
        summary,
        agent,
        spr,
        normalizer,
        episode_returns: returns,
    })
}

fn write_checkpoint(dir: &Path, agent: &Agent, spr: Option<&Spr>) -> Result<()> {
    let mut trees = agent.checkpoint_trees();
    if let Some(s) = spr {
        trees.extend(s.checkpoint_trees());
    }
    for (name, tree) in trees {
        tree.write_to(BufWriter::new(File::create(dir.join(format!("{name}.ptree")))?))?;
    }
    Ok(())
}

fn write_diagnostic(
    dir: &Path,
    step: u64,
    err: &Error,
    recent: &VecDeque<String>,
    agent: &Agent,
    spr: Option<&Spr>,
) -> Result<()> {
    let mut trees = agent.checkpoint_trees();
    if let Some(s) = spr {
        trees.extend(s.checkpoint_trees());
    }
    let params: Vec<serde_json::Value> = trees
        .iter()
        .map(|(name, t)| {
            let flat = t.flatten();
            let bad = flat.iter().filter(|v| !v.is_finite()).count();
            let max_abs = flat.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
            serde_json::json!({"name": name, "numel": flat.len(), "non_finite": bad, "max_abs": max_abs})
        })
        .collect();
    let recent: Vec<serde_json::Value> =
        recent.iter().filter_map(|l| serde_json::from_str(l).ok()).collect();
    let doc = serde_json::json!({
        "step": step,
        "error": err.to_string(),
        "recent_metrics": recent,
        "parameters": params,
    });
    fs::write(dir.join("diagnostic.json"), serde_json::to_string_pretty(&doc)?)?;
    let _ = write_checkpoint(&dir.join("checkpoint"), agent, spr);
    Ok(())
}

/// Reads a metrics stream back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Aggregate of one configuration across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub config: String,
    pub runs: usize,
    pub absent: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation across seeds.
    pub std: Option<f64>,
    pub median: Option<f64>,
    pub iqm: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl SuiteRow {
    /// Statistics over final returns; `None` entries are absent runs.
    pub fn from_scores(config: &str, scores: &[Option<f64>]) -> Self {
        let ok: Vec<f64> = scores.iter().flatten().copied().collect();
        let absent = scores.len() - ok.len();
        if ok.is_empty() {
            return Self {
                config: config.to_string(),
                runs: 0,
                absent,
                mean: None,
                std: None,
                median: None,
                iqm: None,
                ci_low: None,
                ci_high: None,
            };
        }
        let mut rng = stream(0, Stream::Rollout);
        let (lo, hi) = analysis::bootstrap_ci(&ok, analysis::iqm, 2000, 0.95, &mut rng);
        Self {
            config: config.to_string(),
            runs: ok.len(),
            absent,
            mean: Some(analysis::mean(&ok)),
            std: Some(analysis::sample_std(&ok)),
            median: Some(analysis::median(&ok)),
            iqm: Some(analysis::iqm(&ok)),
            ci_low: Some(lo),
            ci_high: Some(hi),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub path: PathBuf,
}

impl SuiteReport {
    pub fn complete(&self) -> bool {
        self.rows.iter().all(|r| r.absent == 0)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "absent".into())
}

/// Runs every `(config, seed)` pair, in parallel across runs, and writes
/// `suite.csv` under `root`. Runs that fail or finish without a completed
/// episode are reported as absent.
pub fn run_suite(configs: &[(String, RunConfig)], seeds: &[u64], root: &Path) -> Result<SuiteReport> {
    if configs.is_empty() {
        return Err(Error::config("configs", "no configuration files"));
    }
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let jobs: Vec<(usize, RunConfig)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, (name, c))| {
            seeds.iter().map(move |&s| {
                let mut c = c.clone();
                c.seed = s;
                c.out_dir = root.join(name).join(format!("seed{s}")).to_string_lossy().into_owned();
                (i, c)
            })
        })
        .collect();
    let results: Vec<(usize, Option<f64>)> = jobs
        .par_iter()
        .map(|(i, c)| (*i, run_training(c).ok().and_then(|o| o.summary.final_return)))
        .collect();
    let rows: Vec<SuiteRow> = configs
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            let scores: Vec<Option<f64>> = results.iter().filter(|(j, _)| *j == i).map(|(_, s)| *s).collect();
            SuiteRow::from_scores(name, &scores)
        })
        .collect();
    fs::create_dir_all(root)?;
    let path = root.join("suite.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["config", "runs", "absent", "mean", "std", "median", "iqm", "ci95_low", "ci95_high"])?;
    for r in &rows {
        w.write_record([
            r.config.clone(),
            r.runs.to_string(),
            r.absent.to_string(),
            opt(r.mean),
            opt(r.std),
            opt(r.median),
            opt(r.iqm),
            opt(r.ci_low),
            opt(r.ci_high),
        ])?;
    }
    w.flush()?;
    Ok(SuiteReport { rows, path })
}

/// Loads a latent CSV and returns its row count and effective rank.
pub fn analyze_latents(path: &Path) -> Result<(LatentMatrix, f64)> {
    let m = LatentMatrix::read_csv(path)?;
    let e = analysis::effective_rank(&m)?;
    Ok((m, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(text: &str, dir: &Path) -> RunConfig {
        let mut c = RunConfig::parse(text, &[]).unwrap();
        c.out_dir = dir.to_string_lossy().into_owned();
        c
    }

    #[test]
    fn zero_frames_gives_empty_metrics_and_init_checkpoint() {
        let d = tempfile::tempdir().unwrap();
        let c = quick("env = chain10\ntotal_frames = 0", d.path());
        let out = run_training(&c).unwrap();
        assert_eq!(fs::read_to_string(d.path().join("metrics.jsonl")).unwrap(), "");
        let f = File::open(d.path().join("checkpoint/q_head.ptree")).unwrap();
        let back = crate::tensor::ParamTree::read_from(std::io::BufReader::new(f)).unwrap();
        let fresh = Agent::new(&c.agent, c.env, c.seed).unwrap();
        let want: Vec<f32> = fresh.net().head.flatten().iter().map(|&v| v as f32).collect();
        let got: Vec<f32> = back.flatten().iter().map(|&v| v as f32).collect();
        assert_eq!(want, got);
        assert_eq!(out.summary.final_return, None);
        let echoed = fs::read_to_string(d.path().join("config.txt")).unwrap();
        assert_eq!(RunConfig::parse(&echoed, &[]).unwrap(), c);
    }

    #[test]
    fn metrics_lines_and_determinism() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let text = "env = breakout_mini\nagent = streamq\ntotal_frames = 600\nlog_every = 200\nspr.enabled = true\nspr.orth = true\nspr.orth2 = true";
        run_training(&quick(text, d1.path())).unwrap();
        run_training(&quick(text, d2.path())).unwrap();
        let a = fs::read(d1.path().join("metrics.jsonl")).unwrap();
        assert_eq!(a, fs::read(d2.path().join("metrics.jsonl")).unwrap());
        let recs = read_metrics(&d1.path().join("metrics.jsonl")).unwrap();
        assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![200, 400, 600]);
        assert!(recs.iter().all(|r| r.spr_loss.is_some() && r.grad_cos.is_some()));
        assert!(d1.path().join("checkpoint/spr_dynamics.ptree").exists());
    }

    #[test]
    fn latents_are_exported() {
        let d = tempfile::tempdir().unwrap();
        let c = quick("env = breakout_mini\ntotal_frames = 100\nexport_latents = 50", d.path());
        let out = run_training(&c).unwrap();
        let (m, e) = analyze_latents(&d.path().join("latents.csv")).unwrap();
        assert_eq!(m.rows(), 50);
        assert_eq!(out.summary.latent_rows, 50);
        assert!((out.summary.effective_rank.unwrap() - e).abs() < 1e-9);
    }

    #[test]
    fn non_finite_leaves_a_diagnostic() {
        let d = tempfile::tempdir().unwrap();
        let c = quick("env = chain10\nagent = qrc\nlr = 1e300\nreward_norm = false\ntotal_frames = 5000", d.path());
        let err = run_training(&c).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
        assert!(d.path().join("diagnostic.json").exists());
    }

    #[test]
    fn suite_rows() {
        let r = SuiteRow::from_scores("x", &[Some(3.5)]);
        assert_eq!((r.mean, r.median, r.iqm), (Some(3.5), Some(3.5), Some(3.5)));
        assert_eq!((r.ci_low, r.ci_high), (Some(3.5), Some(3.5)));
        let r = SuiteRow::from_scores("x", &[Some(1.0), Some(2.0), None, Some(3.0), Some(4.0)]);
        assert_eq!(r.iqm, Some(2.5));
        assert_eq!(r.absent, 1);
        assert!((r.std.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
