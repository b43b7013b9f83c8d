use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use spinectx_core::network::{load_checkpoint, save_checkpoint, summarize, Checkpoint, ModelConfig, Network};
use spinectx_core::pipeline::{
    binarize, infer_volume, plan_windows, preprocess, read_volume, write_volume, GradCamModel, NetworkModel, Volume,
};
use spinectx_core::train::{evaluate, evaluate_case, log_csv, CaseSource, DeskRecipe, PhantomSpec, Predictor};
use spinectx_core::train::generate_phantom;
use spinectx_core::{metrics::metrics_csv, par};

use crate::memory;
use crate::{BenchArgs, Cli, Command, EvalArgs, GradcamArgs, InferArgs, SummaryArgs, TrainArgs};

pub enum Outcome {
    Done,
    /// Finished, but this many inputs were skipped.
    Partial(usize),
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let command = cli.command;
    if cli.deterministic {
        return par::sequential(|| dispatch(command));
    }
    match cli.threads {
        Some(0) => bail!("--threads must be at least 1"),
        Some(n) => par::with_threads(n, || dispatch(command)),
        None => dispatch(command),
    }
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Gradcam(a) => gradcam(a),
        Command::Summary(a) => summary(a),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn json_or_default<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| read_json(p))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// File name without the volume extension (`.nii.gz`, `.nii`, `.json`).
fn stem(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    for ext in [".nii.gz", ".nii", ".json", ".f32"] {
        if let Some(s) = name.strip_suffix(ext) {
            return s.to_string();
        }
    }
    name.to_string()
}

fn load(path: &Path) -> Result<(Checkpoint, Network)> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let net = ckpt.network()?;
    Ok((ckpt, net))
}

fn train(a: TrainArgs) -> Result<Outcome> {
    let mut recipe: DeskRecipe = json_or_default(a.config.as_ref())?;
    if let Some(p) = a.preset {
        recipe = recipe.with_preset(p);
    }
    if let Some(s) = a.seed {
        recipe.train.seed = s;
    }
    recipe.train.model.validate()?;
    create_dir(&a.out)?;
    let best = a.out.join("best.scru");
    let mut log = Vec::new();
    let run = recipe.run(|rec, ckpt, improved| {
        println!(
            "epoch {} train {:.5} val {:.5} lr {:e} {:.1}s{}",
            rec.epoch,
            rec.train_loss,
            rec.val_loss,
            rec.lr,
            rec.seconds,
            if improved { " *" } else { "" }
        );
        log.push(*rec);
        if improved {
            save_checkpoint(&best, ckpt)?;
        }
        Ok(())
    })?;
    save_checkpoint(a.out.join("last.scru"), &run.outcome.last)?;
    fs::write(a.out.join("train_log.csv"), log_csv(&run.outcome.log))?;
    fs::write(a.out.join("recipe.json"), serde_json::to_string_pretty(&recipe)?)?;
    println!(
        "trained in {:.1}s; held-out mean dice {:.4} over {} phantoms",
        run.train_seconds,
        run.mean_dice(),
        run.test_dice.len()
    );
    Ok(Outcome::Done)
}

fn infer(a: InferArgs) -> Result<Outcome> {
    let started = Instant::now();
    let (ckpt, net) = load(&a.checkpoint)?;
    if let Some(path) = &a.config {
        let cfg: ModelConfig = read_json(path)?;
        if cfg.patch_shape != ckpt.config.patch_shape {
            bail!(
                "config patch {:?} does not match checkpoint patch {:?}",
                cfg.patch_shape,
                ckpt.config.patch_shape
            );
        }
        if cfg != ckpt.config {
            bail!("config {} does not match the checkpoint's model config", path.display());
        }
    }
    if !(0.0..=1.0).contains(&a.threshold) {
        bail!("--threshold {} outside [0, 1]", a.threshold);
    }
    let image = read_volume(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let model = NetworkModel {
        net: &net,
        params: &ckpt.params,
    };
    let prob = infer_volume(&image, &model)?;
    let mask = binarize(&prob, a.threshold)?;
    create_dir(&a.out)?;
    let s = stem(&a.input);
    let (pp, mp) = (a.out.join(format!("{s}_prob.nii.gz")), a.out.join(format!("{s}_mask.nii.gz")));
    write_volume(&pp, &prob)?;
    write_volume(&mp, &mask)?;
    println!("wrote {} and {}", pp.display(), mp.display());
    println!("seconds {:.3}", started.elapsed().as_secs_f64());
    match memory::peak_bytes() {
        Some(b) => println!("peak_bytes {b} ({})", memory::SOURCE),
        None => println!("peak_bytes unavailable"),
    }
    Ok(Outcome::Done)
}

/// `<id>.<ext>` images paired with `<id>_mask.<ext>`, sorted by id.
fn discover_cases(dir: &Path) -> Result<Vec<CaseSource>> {
    let mut cases = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let Some(ext) = [".nii.gz", ".nii", ".json"].into_iter().find(|e| name.ends_with(e)) else {
            continue;
        };
        let id = &name[..name.len() - ext.len()];
        if id.ends_with("_mask") {
            continue;
        }
        cases.push(CaseSource {
            id: id.to_string(),
            image: path.clone(),
            mask: dir.join(format!("{id}_mask{ext}")),
        });
    }
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    if cases.is_empty() {
        bail!("no cases found in {}", dir.display());
    }
    Ok(cases)
}

fn eval(a: EvalArgs) -> Result<Outcome> {
    let (ckpt, net) = load(&a.checkpoint)?;
    let model = NetworkModel {
        net: &net,
        params: &ckpt.params,
    };
    let pred = Predictor::Model(&model);
    create_dir(&a.out)?;
    let (csv, failures) = match &a.input {
        Some(dir) => {
            let report = evaluate(&pred, &discover_cases(dir)?, a.threshold);
            for (id, why) in &report.failures {
                eprintln!("skipped {id}: {why}");
            }
            (report.csv(), report.failures.len())
        }
        None => {
            let recipe: DeskRecipe = json_or_default(a.config.as_ref())?;
            let mut rows = Vec::new();
            for (i, p) in recipe.phantoms(recipe.test_set)?.iter().enumerate() {
                let id = format!("phantom_{}", recipe.test_set.first + i as u64);
                rows.push((id, evaluate_case(&pred, &p.volume, &p.mask, a.threshold)?));
            }
            (metrics_csv(&rows), 0)
        }
    };
    let path = a.out.join("metrics.csv");
    fs::write(&path, &csv)?;
    print!("{csv}");
    Ok(if failures > 0 { Outcome::Partial(failures) } else { Outcome::Done })
}

pub const BENCH_HEADER: &str = "run,seconds,peak_bytes,threads,volume_dims,patch,params";

fn dims_field(d: [usize; 3]) -> String {
    format!("{}x{}x{}", d[0], d[1], d[2])
}

fn bench(a: BenchArgs) -> Result<Outcome> {
    if a.repeat == 0 {
        bail!("--repeat must be at least 1");
    }
    let (ckpt, net) = load(&a.checkpoint)?;
    let image = match &a.input {
        Some(p) => read_volume(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let spec: PhantomSpec = json_or_default(a.config.as_ref())?;
            generate_phantom(&spec.with_seed(a.seed))?.volume
        }
    };
    let patch = ckpt.config.patch_shape;
    let grid = preprocess(&image)?.dims();
    let windows = plan_windows(grid, patch)?.len();
    let model = NetworkModel {
        net: &net,
        params: &ckpt.params,
    };
    let threads = par::current_threads();
    let mut csv = String::new();
    writeln!(csv, "# peak_bytes: {}", memory::SOURCE)?;
    writeln!(csv, "{BENCH_HEADER}")?;
    let peak_field = |b: Option<u64>| b.map_or("NA".to_string(), |b| b.to_string());
    let mut times = Vec::with_capacity(a.repeat);
    for run in 1..=a.repeat {
        let t = Instant::now();
        infer_volume(&image, &model)?;
        let secs = t.elapsed().as_secs_f64();
        times.push(secs);
        writeln!(
            csv,
            "{run},{secs:.6},{},{threads},{},{},{}",
            peak_field(memory::peak_bytes()),
            dims_field(grid),
            dims_field(patch),
            net.param_count()
        )?;
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    writeln!(
        csv,
        "mean,{mean:.6},{},{threads},{},{},{}",
        peak_field(memory::peak_bytes()),
        dims_field(grid),
        dims_field(patch),
        net.param_count()
    )?;
    create_dir(&a.out)?;
    fs::write(a.out.join("bench.csv"), &csv)?;
    print!("{csv}");
    let (lo, hi) = times.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    println!("windows {windows}");
    println!("max/min run ratio {:.3}", hi / lo);
    Ok(Outcome::Done)
}

fn gradcam(a: GradcamArgs) -> Result<Outcome> {
    let (ckpt, net) = load(&a.checkpoint)?;
    if !ckpt.config.capture_bottleneck {
        bail!("checkpoint config has bottleneck capture disabled");
    }
    let image = read_volume(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let model = GradCamModel {
        net: &net,
        params: &ckpt.params,
    };
    let cam: Volume = infer_volume(&image, &model)?;
    create_dir(&a.out)?;
    let path = a.out.join(format!("{}_cam.nii.gz", stem(&a.input)));
    write_volume(&path, &cam)?;
    println!("wrote {}", path.display());
    Ok(Outcome::Done)
}

fn summary(a: SummaryArgs) -> Result<Outcome> {
    let mut cfg: ModelConfig = json_or_default(a.config.as_ref())?;
    if let Some(p) = a.preset {
        cfg = cfg.with_preset(p);
    }
    let s = summarize(&cfg)?;
    println!("{s}");
    Ok(Outcome::Done)
}
