//! Implementation of the `iet` command line tool.

pub mod bench;
pub mod config;
pub mod verify;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use iet_core::candidates::dlsg_init;
use iet_core::model::checkpoint;
use iet_core::model::{forward, ForwardOptions, TrainState};
use iet_core::numerics::par;
use iet_core::pipeline::train::{overfit_run, OverfitOptions};
use iet_core::pipeline::{load_image, save_image, synthetic_texture, Image};
use iet_core::viz::{render, QueryView};
use iet_core::{CandidateSet, Error, GridGeom, Result};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "iet", version, about = "Super-resolution with individualized sparse attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// key=value configuration file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub dilation: Option<usize>,
    #[arg(long, global = true)]
    pub window: Option<usize>,
    #[arg(long, global = true)]
    pub scale: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub steps: Option<u64>,
    /// Suite to run (repeatable); all suites when omitted.
    #[arg(long, global = true)]
    pub suite: Vec<String>,
    /// Query token as `row,col`.
    #[arg(long, global = true, value_parser = parse_token)]
    pub token: Option<(usize, usize)>,
    /// Where to write the JSON report (default: `<out>.report.json`, or
    /// `iet-report.json` without `--out`).
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the initial local/global candidates of a grid and dump them.
    InitCandidates {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
    },
    /// Render one query token's candidates, from a dump or from every layer
    /// of a model run.
    Visualize {
        /// Candidate dump written by `init-candidates`.
        #[arg(long, conflicts_with = "checkpoint")]
        candidates: Option<PathBuf>,
        /// Grid height of the dump (width is inferred).
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// LR image for the model run; a synthetic texture when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Pixels per token.
        #[arg(long, default_value_t = 6)]
        cell: usize,
    },
    /// Run property suites against brute-force oracles.
    Verify,
    /// Time dense and candidate-restricted attention.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "128")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        head_dim: usize,
        #[arg(long)]
        no_dense: bool,
    },
    /// Overfit the toy model to one image and save a checkpoint.
    TrainToy {
        /// HR image; a 64×64 synthetic texture when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Super-resolve an image with a checkpoint.
    Sr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_token(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or_else(|| format!("expected row,col, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad coordinate {v:?}"));
    Ok((num(r)?, num(c)?))
}

/// Result of one invocation; always serialized to the report file.
#[derive(Debug, Serialize)]
pub struct Outcome {
    pub command: String,
    pub ok: bool,
    pub error: Option<String>,
    pub result: Value,
    #[serde(skip)]
    pub summary: String,
}

impl Cli {
    fn command_name(&self) -> &'static str {
        match self.command {
            Command::InitCandidates { .. } => "init-candidates",
            Command::Visualize { .. } => "visualize",
            Command::Verify => "verify",
            Command::Bench { .. } => "bench",
            Command::TrainToy { .. } => "train-toy",
            Command::Sr { .. } => "sr",
        }
    }

    pub fn report_path(&self) -> PathBuf {
        if let Some(p) = &self.report {
            return p.clone();
        }
        match &self.out {
            Some(out) => {
                let mut s = out.as_os_str().to_owned();
                s.push(".report.json");
                PathBuf::from(s)
            }
            None => PathBuf::from("iet-report.json"),
        }
    }

    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => config::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(w) = self.window {
            cfg.model.window = w;
        }
        if let Some(s) = self.scale {
            cfg.model.scale = s;
        }
        if let Some(d) = self.dilation {
            cfg.dilation = Some(d);
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Usage("--out is required".into()))
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{} does not exist", p.display())))
    }
}

fn require_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            Err(Error::Usage(format!("directory {} does not exist", dir.display())))
        }
        _ => Ok(()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Applies `IEA_THREADS` (unset keeps the default; 0 or 1 is sequential).
pub fn apply_thread_env() -> Result<()> {
    if let Ok(v) = std::env::var("IEA_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Error::Usage(format!("IEA_THREADS={v:?} is not a number")))?;
        par::set_threads(n);
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Outcome {
    let command = cli.command_name().to_string();
    match dispatch(cli) {
        Ok((ok, result, summary)) => {
            let error = (!ok).then(|| summary.lines().next().unwrap_or("failed").to_string());
            Outcome { command, ok, error, result, summary }
        }
        Err(e) => Outcome { command, ok: false, error: Some(e.to_string()), result: Value::Null, summary: format!("error: {e}") },
    }
}

type Dispatched = (bool, Value, String);

fn dispatch(cli: &Cli) -> Result<Dispatched> {
    apply_thread_env()?;
    match &cli.command {
        Command::InitCandidates { height, width } => cmd_init_candidates(cli, *height, *width),
        Command::Visualize { candidates, height, checkpoint, input, cell } => {
            cmd_visualize(cli, candidates.as_deref(), *height, checkpoint.as_deref(), input.as_deref(), *cell)
        }
        Command::Verify => cmd_verify(cli),
        Command::Bench { sizes, k, reps, heads, head_dim, no_dense } => {
            let spec = bench::BenchSpec { heads: *heads, head_dim: *head_dim, reps: *reps, seed: cli.seed.unwrap_or(0), dense: !no_dense };
            let rows = bench::run(sizes, k, spec)?;
            let text = bench::table(&rows);
            if let Some(out) = &cli.out {
                require_parent(out)?;
                write(out, &text)?;
            }
            Ok((true, serde_json::to_value(&rows)?, text))
        }
        Command::TrainToy { input, learning_rate } => cmd_train_toy(cli, input.as_deref(), *learning_rate),
        Command::Sr { checkpoint, input } => cmd_sr(cli, checkpoint, input),
    }
}

/// Summary of a candidate set for reports.
pub fn candidate_stats(set: &CandidateSet) -> Value {
    json!({
        "tokens": set.tokens(),
        "width": set.width(),
        "total": set.total(),
        "mean_len": set.mean_len(),
        "digest": set.digest(),
        "length_histogram": set.length_histogram(),
    })
}

pub fn cmd_init_candidates(cli: &Cli, height: usize, width: usize) -> Result<Dispatched> {
    let out = cli.out()?;
    require_parent(out)?;
    let cfg = cli.run_config()?;
    let geom = GridGeom::new(height, width)?;
    let d = cfg.dilation.unwrap_or(cfg.model.dilation_train);
    let set = dlsg_init(geom, cfg.model.window, d)?;
    write(out, set.to_text())?;
    let stats = candidate_stats(&set);
    let mut summary = format!(
        "{height}x{width} window {} dilation {d}: mean {:.2} candidates/row, digest {}\n",
        cfg.model.window,
        set.mean_len(),
        set.digest()
    );
    for (len, count) in set.length_histogram() {
        summary += &format!("  len {len:>5}: {count} rows\n");
    }
    Ok((true, stats, summary))
}

fn check_token(geom: GridGeom, token: (usize, usize)) -> Result<()> {
    if token.0 >= geom.height || token.1 >= geom.width {
        return Err(Error::Usage(format!("token {:?} outside {}x{} grid", token, geom.height, geom.width)));
    }
    Ok(())
}

fn cmd_visualize(
    cli: &Cli,
    dump: Option<&Path>,
    height: Option<usize>,
    ckpt: Option<&Path>,
    input: Option<&Path>,
    cell: usize,
) -> Result<Dispatched> {
    let out = cli.out()?;
    let token = cli.token.ok_or_else(|| Error::Usage("--token row,col is required".into()))?;
    if let Some(dump) = dump {
        require_file(dump)?;
        require_parent(out)?;
        let text = fs::read_to_string(dump).map_err(|e| Error::io(dump, e))?;
        let set = CandidateSet::from_text(&text)?;
        let n = set.tokens();
        let h = match height {
            Some(h) => h,
            None => (1..=n).rev().find(|h| h * h == n).ok_or_else(|| Error::Usage("non-square dump needs --height".into()))?,
        };
        if h == 0 || n % h != 0 {
            return Err(Error::Usage(format!("{n} tokens do not form {h} rows")));
        }
        let geom = GridGeom::new(h, n / h)?;
        check_token(geom, token)?;
        let row = set.row(geom.token(token.0, token.1));
        let img = render(geom, &QueryView { query: token, candidates: row, added: &[], cell })?;
        save_image(&img, out)?;
        let summary = format!("{} candidates of token {token:?} -> {}\n", row.len(), out.display());
        return Ok((true, json!({ "images": [out], "candidates": row.len() }), summary));
    }

    let ckpt = ckpt.ok_or_else(|| Error::Usage("need --candidates or --checkpoint".into()))?;
    require_file(ckpt)?;
    if let Some(p) = input {
        require_file(p)?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (model_cfg, params) = checkpoint::load(ckpt)?;
    let run = cli.run_config()?;
    let lr = match input {
        Some(p) => load_image(p)?,
        None => synthetic_texture(32, 32, run.seed)?,
    };
    let geom = GridGeom::new(lr.height(), lr.width())?;
    check_token(geom, token)?;
    let d = run.dilation.unwrap_or(model_cfg.dilation_infer);
    let fwd = forward(&model_cfg, &params, lr.pixels(), d, ForwardOptions { trace: true, ..Default::default() })?;
    let q = geom.token(token.0, token.1);
    let ext = "ppm";
    let mut images = Vec::new();
    let mut layers = Vec::new();
    if let Some(first) = fwd.trace.first() {
        let path = out.join(format!("initial.{ext}"));
        save_image(&render(geom, &QueryView { query: token, candidates: first.input.row(q), added: &[], cell })?, &path)?;
        images.push(path);
    }
    for t in &fwd.trace {
        let kept = t.kept.row(q);
        let added: Vec<u32> = t.next.row(q).iter().copied().filter(|x| !kept.contains(x)).collect();
        let path = out.join(format!("block{}_layer{}.{ext}", t.block, t.layer));
        save_image(&render(geom, &QueryView { query: token, candidates: kept, added: &added, cell })?, &path)?;
        layers.push(json!({
            "block": t.block, "layer": t.layer, "input": t.input.len_of(q),
            "kept": kept.len(), "added": added.len(), "expanded": t.expanded,
        }));
        images.push(path);
    }
    let summary = format!("wrote {} images to {}\n", images.len(), out.display());
    Ok((true, json!({ "images": images, "layers": layers, "dilation": d }), summary))
}

fn cmd_verify(cli: &Cli) -> Result<Dispatched> {
    let seed = cli.seed.unwrap_or(0);
    let names: Vec<String> = if cli.suite.is_empty() {
        verify::SUITES.iter().map(|s| s.to_string()).collect()
    } else {
        cli.suite.clone()
    };
    let mut reports = Vec::new();
    let mut summary = String::new();
    let mut first_failure = None;
    for name in &names {
        let r = verify::run_suite(name, seed, verify::Tolerances::default())?;
        for c in &r.checks {
            summary += &format!("{} {}: {} {}\n", if c.passed { "PASS" } else { "FAIL" }, r.suite, c.name, c.detail);
        }
        if first_failure.is_none() {
            first_failure = r.first_failure().map(|c| format!("{}: {}", r.suite, c.name));
        }
        reports.push(r);
    }
    let ok = first_failure.is_none();
    if let Some(f) = &first_failure {
        summary = format!("first failing property: {f}\n{summary}");
    }
    Ok((ok, serde_json::to_value(&reports)?, summary))
}

fn cmd_train_toy(cli: &Cli, input: Option<&Path>, learning_rate: Option<f64>) -> Result<Dispatched> {
    let out = cli.out()?;
    require_parent(out)?;
    if let Some(p) = input {
        require_file(p)?;
    }
    let run = cli.run_config()?;
    let hr = match input {
        Some(p) => load_image(p)?,
        None => synthetic_texture(64, 64, run.seed)?,
    };
    let mut opts = OverfitOptions { steps: run.steps, seed: run.seed, ..OverfitOptions::default() };
    opts.optimizer.lr = learning_rate.unwrap_or(run.learning_rate);
    if let Some(p) = input {
        opts.name = p.display().to_string();
    }
    let (state, report) = overfit_run(&run.model, &hr, &opts)?;
    checkpoint::save(out, &state.config, &state.params)?;
    let mut summary = report.to_text();
    summary += &format!("checkpoint {}\n", out.display());
    Ok((true, serde_json::to_value(&report)?, summary))
}

/// Runs a saved model on `input` at dilation `d` (default: the model's
/// inference dilation) and returns the clamped SR image.
pub fn super_resolve_file(ckpt: &Path, input: &Path, d: Option<usize>) -> Result<(Image, usize)> {
    let (cfg, params) = checkpoint::load(ckpt)?;
    let lr = load_image(input)?;
    let d = d.unwrap_or(cfg.dilation_infer);
    let state = TrainState { m: params.clone(), v: params.clone(), params, config: cfg, step: 0, seed: 0, optimizer: Default::default() };
    let img = iet_core::pipeline::train::super_resolve(&state, &lr, d)?;
    Ok((img, d))
}

fn cmd_sr(cli: &Cli, ckpt: &Path, input: &Path) -> Result<Dispatched> {
    require_file(ckpt)?;
    require_file(input)?;
    let out = cli.out()?;
    require_parent(out)?;
    let dilation = match &cli.config {
        Some(_) => cli.run_config()?.dilation.or(cli.dilation),
        None => cli.dilation,
    };
    let (img, d) = super_resolve_file(ckpt, input, dilation)?;
    save_image(&img, out)?;
    let summary = format!("{}x{} -> {}x{} at dilation {d}: {}\n", img.height() / 2, img.width() / 2, img.height(), img.width(), out.display());
    Ok((true, json!({ "output": out, "height": img.height(), "width": img.width(), "dilation": d }), summary))
}

/// Writes the report, prints the summary and returns the exit code.
pub fn finish(cli: &Cli, outcome: &Outcome) -> i32 {
    let path = cli.report_path();
    let body = serde_json::to_string_pretty(outcome).unwrap_or_else(|e| format!("{{\"ok\":false,\"error\":\"{e}\"}}"));
    if let Err(e) = fs::write(&path, body) {
        eprintln!("cannot write report {}: {e}", path.display());
        return 2;
    }
    if outcome.ok {
        print!("{}", outcome.summary);
        0
    } else {
        eprint!("{}", outcome.summary);
        if !outcome.summary.ends_with('\n') {
            eprintln!();
        }
        1
    }
}
