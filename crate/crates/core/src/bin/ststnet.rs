use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ststnet::apex::{spot_apex, RoiSet};
use ststnet::config::RunConfig;
use ststnet::dataio::{
    generate_synthetic, load_dataset, save_dataset, CompositeDataset, DatasetId, EmotionClass,
};
use ststnet::eval::{run_loso, FoldTiming, LosoOptions, MetricReport, SampleRecord};
use ststnet::flow::{build_flow_cube, read_cube_cache, write_cube_cache, SampleKey};
use ststnet::ststnet::Optimizer;

#[derive(Parser, Debug)]
#[command(
    name = "ststnet",
    version,
    about = "Micro-expression recognition from onset/apex optical flow"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// INI run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides [out] dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for generation, training and folds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset under <out>/data.
    Synth {
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Spot apex frames for clips without an annotated apex.
    Spot,
    /// Build flow cubes for every clip.
    Flow,
    /// Leave-one-subject-out training and evaluation.
    Eval {
        /// Only run the first N folds.
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        optimizer: Option<Optimizer>,
    },
    /// Print the report stored in <out>/results.json.
    Report,
}

/// Failures before any compute (exit 1) versus during it (exit 2).
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn invalid(self) -> std::result::Result<T, Failure>;
    fn runtime(self) -> std::result::Result<T, Failure>;
}

impl<T> Classify<T> for Result<T> {
    fn invalid(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Validation)
    }
    fn runtime(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Runtime)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = load_config(&cli.global, &cli.command).invalid()?;
    if let Some(s) = cli.global.seed {
        cfg.set_seed(s);
    }
    cfg.validate().map_err(anyhow::Error::from).invalid()?;
    let ctx = Ctx {
        pool: rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.eval.workers)
            .build()
            .map_err(anyhow::Error::from)
            .runtime()?,
        force: cli.global.force,
        cfg,
    };
    match cli.command {
        Command::Synth { .. } => cmd_synth(&ctx),
        Command::Spot => cmd_spot(&ctx),
        Command::Flow => cmd_flow(&ctx),
        Command::Eval { folds, .. } => cmd_eval(&ctx, folds),
        Command::Report => cmd_report(&ctx),
    }
}

fn load_config(global: &Global, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let base = path.parent().unwrap_or(Path::new("."));
            RunConfig::parse(&text, base).with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(out) = &global.out {
        cfg.out = out.clone();
    }
    if let Some(w) = global.workers {
        cfg.eval.workers = w;
    }
    match command {
        Command::Synth { subjects, clips } => {
            if let Some(s) = subjects {
                cfg.synth.subjects = *s;
            }
            if let Some(c) = clips {
                cfg.synth.clips_per_subject = *c;
            }
        }
        Command::Eval {
            epochs,
            lr,
            batch,
            optimizer,
            folds,
        } => {
            if *folds == Some(0) {
                bail!("--folds must be at least 1");
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = *e;
            }
            if let Some(l) = lr {
                cfg.train.learning_rate = *l;
            }
            if let Some(b) = batch {
                cfg.train.batch_size = *b;
            }
            if let Some(o) = optimizer {
                cfg.train.optimizer = *o;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

struct Ctx {
    cfg: RunConfig,
    pool: rayon::ThreadPool,
    force: bool,
}

impl Ctx {
    fn data_dir(&self) -> PathBuf {
        self.cfg.out.join("data")
    }
    fn spotted_path(&self) -> PathBuf {
        self.cfg.out.join("spotted.csv")
    }
    fn cubes_path(&self) -> PathBuf {
        self.cfg.out.join("cubes.stst")
    }
    fn results_path(&self) -> PathBuf {
        self.cfg.out.join("results.json")
    }

    fn dataset_paths(&self) -> (PathBuf, PathBuf) {
        match (&self.cfg.data.annotations, &self.cfg.data.frames) {
            (Some(a), Some(f)) => (a.clone(), f.clone()),
            _ => (
                self.data_dir().join("annotations.csv"),
                self.data_dir().join("frames"),
            ),
        }
    }

    fn load_dataset(&self) -> std::result::Result<CompositeDataset, Failure> {
        let (ann, frames) = self.dataset_paths();
        if !ann.is_file() {
            return Err(Failure::Validation(anyhow!(
                "annotation file {} not found; run `synth` or set [data] in the config",
                ann.display()
            )));
        }
        if !frames.is_dir() {
            return Err(Failure::Validation(anyhow!(
                "frames directory {} not found",
                frames.display()
            )));
        }
        let ds = load_dataset(&ann, &frames)
            .map_err(anyhow::Error::from)
            .runtime()?;
        if ds.is_empty() {
            return Err(Failure::Validation(anyhow!(
                "{} lists no clips",
                ann.display()
            )));
        }
        Ok(ds)
    }

    /// Refuses to replace an existing output unless `--force` was given.
    fn claim(&self, path: &Path) -> Outcome {
        if path.exists() && !self.force {
            return Err(Failure::Validation(anyhow!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))
                .runtime()?;
        }
        Ok(())
    }
}

fn cmd_synth(ctx: &Ctx) -> Outcome {
    let dir = ctx.data_dir();
    ctx.claim(&dir)?;
    let out = generate_synthetic(&ctx.cfg.synth)
        .map_err(anyhow::Error::from)
        .runtime()?;
    if dir.exists() {
        fs::remove_dir_all(&dir)
            .with_context(|| format!("clearing {}", dir.display()))
            .runtime()?;
    }
    let ann = dir.join("annotations.csv");
    save_dataset(&out.dataset, &ann, &dir.join("frames"))
        .map_err(anyhow::Error::from)
        .runtime()?;

    let write_truth = || -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("ground_truth.csv"))?;
        w.write_record(["dataset", "subject", "video", "apex", "label", "amplitude"])?;
        for t in &out.truth {
            w.write_record([
                DatasetId::Synth.as_str(),
                &t.subject,
                &t.video,
                &(t.apex + 1).to_string(),
                t.label.as_str(),
                &format!("{:.4}", t.amplitude),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write_truth().context("writing ground truth").runtime()?;
    let counts = out.dataset.class_counts();
    println!(
        "wrote {} clips from {} subjects to {} (negative {}, positive {}, surprise {})",
        out.dataset.len(),
        ctx.cfg.synth.subjects,
        dir.display(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SpottedRow {
    dataset: DatasetId,
    subject: String,
    video: String,
    /// 1-based, like the annotation file.
    spotted_apex: usize,
    roi: String,
}

fn cmd_spot(ctx: &Ctx) -> Outcome {
    let path = ctx.spotted_path();
    ctx.claim(&path)?;
    let ds = ctx.load_dataset()?;
    let pending: Vec<_> = ds.sequences.iter().filter(|s| s.apex.is_none()).collect();
    let results: Vec<_> = ctx.pool.install(|| {
        pending
            .par_iter()
            .map(|seq| {
                let (h, w) = seq.frames[0].extent();
                spot_apex(seq, &RoiSet::for_face(h, w))
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (seq, r) in pending.iter().zip(results) {
        let key = SampleKey::of(seq).encode();
        match r {
            Ok(spot) => {
                if spot.no_motion {
                    eprintln!("warning: {key}: no texture change detected, apex defaults to onset");
                }
                rows.push(SpottedRow {
                    dataset: seq.dataset,
                    subject: seq.subject.clone(),
                    video: seq.video.clone(),
                    spotted_apex: spot.apex + 1,
                    roi: spot.roi.to_string(),
                })
            }
            Err(e) => failures.push(format!("{key}: {e}")),
        }
    }
    let write = || -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)?;
        w.write_record(["dataset", "subject", "video", "spotted_apex", "roi"])?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    };
    write()
        .with_context(|| format!("writing {}", path.display()))
        .runtime()?;
    println!(
        "spotted {} of {} clips -> {}",
        rows.len(),
        ds.len(),
        path.display()
    );
    if !failures.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "{} clip(s) could not be spotted:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )));
    }
    Ok(())
}

fn read_spotted(path: &Path) -> Result<BTreeMap<SampleKey, usize>> {
    let mut map = BTreeMap::new();
    if !path.exists() {
        return Ok(map);
    }
    let mut r = csv::Reader::from_path(path)?;
    for (i, row) in r.deserialize::<SpottedRow>().enumerate() {
        let row = row.with_context(|| format!("{} row {}", path.display(), i + 2))?;
        if row.spotted_apex == 0 {
            bail!("{} row {}: spotted_apex is 1-based", path.display(), i + 2);
        }
        map.insert(
            SampleKey {
                dataset: row.dataset,
                subject: row.subject,
                video: row.video,
            },
            row.spotted_apex - 1,
        );
    }
    Ok(map)
}

fn cmd_flow(ctx: &Ctx) -> Outcome {
    let path = ctx.cubes_path();
    ctx.claim(&path)?;
    let ds = ctx.load_dataset()?;
    let spotted = read_spotted(&ctx.spotted_path()).invalid()?;
    let params = &ctx.cfg.flow;
    let results: Vec<_> = ctx.pool.install(|| {
        ds.sequences
            .par_iter()
            .map(|seq| {
                let key = SampleKey::of(seq);
                let apex = match seq.apex.or_else(|| spotted.get(&key).copied()) {
                    Some(a) => a,
                    None => {
                        let (h, w) = seq.frames[0].extent();
                        spot_apex(seq, &RoiSet::for_face(h, w))
                            .map_err(|e| format!("{}: {e}", key.encode()))?
                            .apex
                    }
                };
                build_flow_cube(seq, apex, params).map_err(|e| e.to_string())
            })
            .collect()
    });
    let mut cubes = Vec::new();
    let mut skipped = Vec::new();
    let (mut unconverged, mut constant) = (0, 0);
    for r in results {
        match r {
            Ok((cube, warn)) => {
                unconverged += usize::from(warn.flow_not_converged);
                constant += usize::from(!warn.constant_channels.is_empty());
                cubes.push(cube);
            }
            Err(e) => skipped.push(e),
        }
    }
    let write = || -> Result<()> {
        let f = fs::File::create(&path)?;
        let mut w = std::io::BufWriter::new(f);
        write_cube_cache(&mut w, &cubes)?;
        w.flush()?;
        Ok(())
    };
    write()
        .with_context(|| format!("writing {}", path.display()))
        .runtime()?;
    let mut counts = [0usize; EmotionClass::COUNT];
    for c in &cubes {
        counts[c.label.index()] += 1;
    }
    println!(
        "wrote {} cubes -> {} (negative {}, positive {}, surprise {})",
        cubes.len(),
        path.display(),
        counts[0],
        counts[1],
        counts[2]
    );
    if unconverged > 0 {
        eprintln!("warning: flow did not reach the stopping tolerance for {unconverged} clip(s)");
    }
    if constant > 0 {
        eprintln!("warning: {constant} cube(s) have a constant channel");
    }
    if !skipped.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "{} clip(s) skipped:\n  {}",
            skipped.len(),
            skipped.join("\n  ")
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixEntry {
    scope: String,
    counts: Vec<Vec<u64>>,
    percentages: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMeta {
    seed: u64,
    config_hash: String,
    folds: usize,
    samples: usize,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    optimizer: Optimizer,
}

#[derive(Debug, Serialize, Deserialize)]
struct Timing {
    total_seconds: f64,
    folds: Vec<FoldTiming>,
}

/// `results.json`. Everything except `timing` is reproducible from the config.
#[derive(Debug, Serialize, Deserialize)]
struct ResultsFile {
    meta: RunMeta,
    reports: Vec<MetricReport>,
    matrices: Vec<MatrixEntry>,
    records: Vec<SampleRecord>,
    timing: Timing,
}

fn cmd_eval(ctx: &Ctx, folds: Option<usize>) -> Outcome {
    let path = ctx.results_path();
    ctx.claim(&path)?;
    let cubes_path = ctx.cubes_path();
    if !cubes_path.is_file() {
        return Err(Failure::Validation(anyhow!(
            "{} not found; run `flow` first",
            cubes_path.display()
        )));
    }
    let cubes = fs::File::open(&cubes_path)
        .map_err(anyhow::Error::from)
        .and_then(|f| Ok(read_cube_cache(std::io::BufReader::new(f))?))
        .with_context(|| format!("reading {}", cubes_path.display()))
        .runtime()?;
    let cfg = &ctx.cfg;
    let start = Instant::now();
    let outcome = run_loso(
        &cubes,
        &cfg.train,
        &LosoOptions {
            base_seed: cfg.base_seed(),
            workers: cfg.eval.workers,
            fold_limit: folds,
        },
    )
    .map_err(anyhow::Error::from)
    .runtime()?;
    let results = ResultsFile {
        meta: RunMeta {
            seed: cfg.base_seed(),
            config_hash: cfg.hash(),
            folds: outcome.folds,
            samples: outcome.records.len(),
            epochs: cfg.train.max_epochs,
            learning_rate: cfg.train.learning_rate,
            batch_size: cfg.train.batch_size,
            optimizer: cfg.train.optimizer,
        },
        reports: outcome.reports,
        matrices: outcome
            .matrices
            .iter()
            .map(|m| MatrixEntry {
                scope: m.scope.clone(),
                counts: m.counts.counts().to_vec(),
                percentages: m.counts.row_percentages(),
            })
            .collect(),
        records: outcome.records,
        timing: Timing {
            total_seconds: start.elapsed().as_secs_f64(),
            folds: outcome.timings,
        },
    };
    let json = serde_json::to_string_pretty(&results)
        .map_err(anyhow::Error::from)
        .runtime()?;
    fs::write(&path, json + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .runtime()?;
    print_report(&results);
    println!("results -> {}", path.display());
    Ok(())
}

fn cmd_report(ctx: &Ctx) -> Outcome {
    let path = ctx.results_path();
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {}; run `eval` first", path.display()))
        .invalid()?;
    let results: ResultsFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .runtime()?;
    print_report(&results);
    Ok(())
}

fn render_report(r: &ResultsFile) -> String {
    use std::fmt::Write as _;
    let mut o = String::new();
    writeln!(
        o,
        "LOSO over {} fold(s), {} samples, seed {}, config {}",
        r.meta.folds,
        r.meta.samples,
        r.meta.seed,
        &r.meta.config_hash[..12]
    )
    .unwrap();
    write!(o, "{:<6}", "").unwrap();
    for rep in &r.reports {
        write!(o, "{:>10}", rep.scope).unwrap();
    }
    o.push('\n');
    let rows: [(&str, fn(&MetricReport) -> f64); 4] = [
        ("Acc", |m| m.accuracy),
        ("F1", |m| m.f1),
        ("UF1", |m| m.uf1),
        ("UAR", |m| m.uar),
    ];
    for (name, get) in rows {
        write!(o, "{name:<6}").unwrap();
        for rep in &r.reports {
            write!(o, "{:>10.4}", get(rep)).unwrap();
        }
        o.push('\n');
    }
    for rep in &r.reports {
        for f in &rep.flags {
            writeln!(o, "note [{}]: {f}", rep.scope).unwrap();
        }
    }
    for m in &r.matrices {
        writeln!(
            o,
            "\nconfusion matrix [{}] (rows: truth, columns: prediction)",
            m.scope
        )
        .unwrap();
        write!(o, "{:<10}", "").unwrap();
        for c in EmotionClass::ALL {
            write!(o, "{:>18}", c.as_str()).unwrap();
        }
        o.push('\n');
        for (i, (counts, pct)) in m.counts.iter().zip(&m.percentages).enumerate() {
            let name = EmotionClass::from_index(i).map_or("?", |c| c.as_str());
            write!(o, "{name:<10}").unwrap();
            for (c, p) in counts.iter().zip(pct) {
                write!(o, "{:>18}", format!("{c} ({p:.2}%)")).unwrap();
            }
            o.push('\n');
        }
    }
    o
}

fn print_report(r: &ResultsFile) {
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = std::io::stdout().write_all(render_report(r).as_bytes());
}
