//! Subcommand bodies, kept apart from argument parsing so tests can drive them.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use genhead::checkpoint::Checkpoint;
use genhead::datasets::{generate, Split};
use genhead::gradcheck::{standard_suite, SUITE_TOLERANCE};
use genhead::moments::{
    class_size, global_loss_value, monte_carlo_bound, standard_normal_sample, target_moment,
    MAX_ORDER,
};
use genhead::outlier::OutlierGate;
use genhead::pipeline::{self, evaluate, evaluate_gate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, KEYS};

/// Environment variable naming the directory that receives run folders.
pub const OUT_ENV: &str = "GENHEAD_OUT";

pub const MANIFEST: &str = "manifest.txt";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";

pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub accuracy: f64,
    pub compactness: f64,
    pub wall_secs: f64,
}

/// Trains one configuration and writes manifest, metrics and checkpoint.
pub fn train(cfg: &Config, root: &Path) -> Result<TrainSummary> {
    let dir = root.join(cfg.run_name());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = format!("# config {}\n", cfg.hash());
    manifest.push_str(&cfg.echo());
    fs::write(dir.join(MANIFEST), manifest)?;

    let data = generate(&cfg.data)?;
    let out = pipeline::run(&cfg.run, &data)?;

    let f = File::create(dir.join(METRICS))?;
    out.report.write_csv(BufWriter::new(f))?;

    let mut ck = Checkpoint::new(out.state.eval_model());
    for k in KEYS {
        ck.meta
            .insert(format!("cfg.{k}"), cfg.get(k).expect("listed key"));
    }
    let mut w = BufWriter::new(File::create(dir.join(CHECKPOINT))?);
    ck.write(&mut w)?;
    w.flush()?;

    Ok(TrainSummary {
        dir,
        accuracy: out.final_eval.accuracy,
        compactness: out.final_eval.compactness,
        wall_secs: out.wall_secs,
    })
}

/// Loads a checkpoint together with the configuration it was trained under.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Config)> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let ck = Checkpoint::read(BufReader::new(f))?;
    let mut cfg = Config::default();
    for (k, v) in &ck.meta {
        if let Some(key) = k.strip_prefix("cfg.") {
            cfg.set(key, v)
                .map_err(|m| anyhow::anyhow!("checkpoint metadata: {m}"))?;
        }
    }
    Ok((ck, cfg))
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub compactness: f64,
    pub per_class: Vec<f64>,
    /// Labeled flag rate, precision and recall of the configured gate, if any.
    pub gate: Option<(f64, f64, f64)>,
}

pub fn eval(path: &Path) -> Result<EvalSummary> {
    let (ck, cfg) = load_checkpoint(path)?;
    let data = generate(&cfg.data)?;
    let (x, y) = data.subset(Split::Test);
    let rep = evaluate(&ck.model, &x, &y)?;
    let gate = if cfg.run.gate.enabled {
        let g = &cfg.run.gate;
        let mut gate = OutlierGate::new(g.percentile, g.aggregation, g.refresh)?;
        let (lx, _) = data.subset(Split::Labeled);
        let (ux, _) = data.subset(Split::Unlabeled);
        let r = evaluate_gate(
            &ck.model,
            &mut gate,
            &lx,
            &ux,
            &data.outlier_flags(Split::Unlabeled),
        )?;
        Some((r.labeled_flag_rate, r.precision, r.recall))
    } else {
        None
    };
    Ok(EvalSummary {
        accuracy: rep.accuracy,
        compactness: rep.compactness,
        per_class: rep.per_class,
        gate,
    })
}

/// Writes latent coordinates of one split as CSV: z0.., label, prediction.
pub fn export_embeddings(path: &Path, split: Split, out: &Path) -> Result<usize> {
    let (ck, cfg) = load_checkpoint(path)?;
    let data = generate(&cfg.data)?;
    let (x, y) = data.subset(split);
    let z = ck.model.embed(&x)?;
    let pred = evaluate(&ck.model, &x, &y)?.predictions;
    let mut w = BufWriter::new(File::create(out)?);
    let d = z.shape()[1];
    let header: Vec<String> = (0..d)
        .map(|j| format!("z{j}"))
        .chain(["label".into(), "prediction".into()])
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for i in 0..y.len() {
        let coords: Vec<String> = z.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{}", coords.join(","), y[i], pred[i])?;
    }
    w.flush()?;
    Ok(y.len())
}

/// Prints the finite-difference table; returns whether every row passed.
pub fn gradcheck(seed: u64, out: &mut impl Write) -> Result<bool> {
    let rows = standard_suite(seed)?;
    let mut ok = true;
    writeln!(out, "{:<44} {:>12}  result", "check", "max_rel_err")?;
    for r in &rows {
        ok &= r.passed();
        writeln!(
            out,
            "{:<44} {:>12.3e}  {}",
            r.name,
            r.max_rel_err,
            verdict(r.passed())
        )?;
    }
    writeln!(out, "{} checks, tolerance {SUITE_TOLERANCE:e}", rows.len())?;
    Ok(ok)
}

/// Prints class sizes, targets and a Monte-Carlo bound; returns whether the
/// sample checks hold.
pub fn moments_selftest(
    dim: usize,
    n: usize,
    repeats: usize,
    seed: u64,
    out: &mut impl Write,
) -> Result<bool> {
    writeln!(
        out,
        "class sizes at D={dim} (order p, hyper-diagonal count h)"
    )?;
    for p in 1..=MAX_ORDER {
        let sizes: Vec<String> = (0..p)
            .map(|h| format!("h{h}={}", class_size(p, dim, h)))
            .collect();
        let total: u64 = (0..p).map(|h| class_size(p, dim, h)).sum();
        writeln!(
            out,
            "  p={p} {} total={total} D^p={}",
            sizes.join(" "),
            dim.pow(p as u32)
        )?;
    }
    let targets: Vec<String> = (1..=MAX_ORDER)
        .map(|p| format!("p={p} -> {}", target_moment(&vec![0; p])))
        .collect();
    writeln!(out, "full-diagonal targets: {}", targets.join(", "))?;

    let order = 2;
    let mc = monte_carlo_bound(dim, order, n, repeats, seed)?;
    writeln!(
        out,
        "monte carlo (n={n}, repeats={repeats}, P={order}): mean={:.4e} sd={:.4e} bound={:.4e} median={:.4e}",
        mc.mean,
        mc.sd,
        mc.bound,
        mc.median()
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let fresh = global_loss_value(&standard_normal_sample(n, dim, &mut rng), order)?;
    let mut shifted = standard_normal_sample(n, dim, &mut rng);
    for row in shifted.data_mut().chunks_mut(dim) {
        row[0] += 1.0;
    }
    let shifted = global_loss_value(&shifted, order)?;
    let fresh_ok = fresh < mc.bound;
    let shift_ok = shifted >= 10.0 * mc.median();
    writeln!(
        out,
        "fresh sample loss {fresh:.4e} < bound: {}",
        verdict(fresh_ok)
    )?;
    writeln!(
        out,
        "shifted sample loss {shifted:.4e} >= 10x median: {}",
        verdict(shift_ok)
    )?;
    Ok(fresh_ok && shift_ok)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Expands `key=v1,v2,...` axes into the cartesian product of configurations.
/// List-valued keys (`head.hidden`, `mom.weights`) take `;` between grid values.
pub fn expand_grid(base: &Config, axes: &[String]) -> Result<Vec<Config>> {
    let mut out = vec![base.clone()];
    for axis in axes {
        let (key, values) = axis
            .split_once('=')
            .with_context(|| format!("grid axis `{axis}` is not key=values"))?;
        let sep = if matches!(key, "head.hidden" | "mom.weights") {
            ';'
        } else {
            ','
        };
        let mut next = Vec::new();
        for cfg in &out {
            for v in values.split(sep) {
                let mut c = cfg.clone();
                c.set(key.trim(), v.trim())
                    .map_err(|m| anyhow::anyhow!("grid `{key}`: {m}"))?;
                c.validate()
                    .map_err(|m| anyhow::anyhow!("grid `{key}={v}`: {m}"))?;
                next.push(c);
            }
        }
        out = next;
    }
    Ok(out)
}

/// Runs every configuration on `jobs` worker threads. Results keep grid order.
pub fn sweep(configs: &[Config], root: &Path, jobs: usize) -> Vec<Result<TrainSummary>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TrainSummary>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(configs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cfg) = configs.get(i) else { break };
                let r = train(cfg, root);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.unwrap_or_else(bail_missing))
        .collect()
}

fn bail_missing() -> Result<TrainSummary> {
    bail!("run did not complete")
}
