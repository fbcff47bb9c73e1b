use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use ulike_core::cost::{compare_csv, compare_markdown};
use ulike_core::network::{compare_table, Network};
use ulike_core::params::ParamStore;
use ulike_core::ssm::{selective_scan, Phase, ScanMode, ScanOptions, SsmParams};
use ulike_core::tensor::{Scalar, Tensor};
use ulike_core::train::{
    self, checks, dice_score, evaluate, log_csv, timing_csv, train_val_split, DiceReport, NUM_CLASSES,
};
use ulike_core::{counters, Error};

use crate::config::{variant_entry, RunConfig};
use crate::exit::{CheckFailed, ConfigError};
use crate::{BenchArgs, Cli, Command, DescribeFormat, Emit, ScanModeArg, TrainArgs};

/// Magnitude below which scan output differences are measured absolutely
/// rather than relatively; outputs are of order one.
pub const SCAN_DIFF_FLOOR: f64 = 1e-2;

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = &cli.variant {
        cfg.network = variant_entry(&cfg.network, v)?;
    }
    match &cli.command {
        Command::Describe { input_shape, .. } | Command::Count { input_shape, .. } => {
            if let Some(s) = input_shape {
                cfg.cost.input_shape = [s[0], s[1], s[2]];
            }
        }
        Command::Train(a) => apply_train_args(&mut cfg, a),
        _ => {}
    }
    if let Command::Count { variants: Some(v), .. } = &cli.command {
        cfg.cost.variants = v.clone();
    }
    let cfg = cfg.resolve()?;
    print!("# resolved config\n{}# end config\n", cfg.to_toml());

    match cli.command {
        Command::Describe { emit, .. } => describe(&cfg, emit),
        Command::Count { emit, .. } => {
            let dir = out_dir(&cli.out_root, "count", &cfg.hash(), cli.force)?;
            count(&cfg, emit, &dir)
        }
        Command::Gradcheck { component, inject_bug } => gradcheck(&component, inject_bug),
        Command::BenchScan(args) => bench_scan(&args, cfg.seed),
        Command::Train(_) => {
            let dir = out_dir(&cli.out_root, "train", &cfg.hash(), cli.force)?;
            train_cmd(&cfg, &dir)
        }
        Command::Eval { checkpoint, oracle } => {
            let key = match &checkpoint {
                Some(p) if !oracle => {
                    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                    format!("{}-{}", cfg.hash(), &sha256_hex(&bytes)[..12])
                }
                _ => format!("{}-oracle", cfg.hash()),
            };
            let dir = out_dir(&cli.out_root, "eval", &key, cli.force)?;
            eval_cmd(&cfg, checkpoint.as_deref().filter(|_| !oracle), &dir)
        }
    }
}

fn apply_train_args(cfg: &mut RunConfig, a: &TrainArgs) {
    let t = &mut cfg.train;
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut t.epochs, a.epochs);
    set(&mut t.iterations, a.iterations);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.train_samples, a.train_samples);
    set(&mut t.val_samples, a.val_samples);
    if let Some(lr) = a.lr {
        t.lr = lr;
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `<root>/<command>-<key>`, created empty. An existing nonempty directory
/// is an error unless `force`.
pub fn out_dir(root: &Path, command: &str, key: &str, force: bool) -> Result<PathBuf> {
    let dir = root.join(format!("{command}-{key}"));
    if dir.exists() {
        let nonempty = fs::read_dir(&dir)?.next().is_some();
        if nonempty && !force {
            bail!("{} already exists; pass --force to overwrite", dir.display());
        }
        if nonempty {
            fs::remove_dir_all(&dir)?;
        }
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn describe(cfg: &RunConfig, emit: DescribeFormat) -> Result<()> {
    let (net, _) = Network::build(&cfg.network, cfg.seed)?;
    let text = match emit {
        DescribeFormat::Text => net.describe(cfg.cost.input_shape)?,
        DescribeFormat::Csv => net.describe_csv(cfg.cost.input_shape)?,
    };
    print!("{text}");
    Ok(())
}

fn count(cfg: &RunConfig, emit: Emit, dir: &Path) -> Result<()> {
    let entries = cfg
        .cost
        .variants
        .iter()
        .map(|v| Ok((v.clone(), variant_entry(&cfg.network, v)?)))
        .collect::<Result<Vec<_>>>()?;
    let reports = compare_table(&entries, cfg.cost.input_shape)?;
    let (csv, md) = (compare_csv(&reports), compare_markdown(&reports));
    write(dir, "compare.csv", &csv)?;
    write(dir, "compare.md", &md)?;
    for r in &reports {
        write(dir, &format!("layers_{}.csv", r.label), r.rows_csv())?;
    }
    print!("{}", if emit == Emit::Csv { csv } else { md });
    println!("# reports in {}", dir.display());
    Ok(())
}

fn gradcheck(list: &str, inject_bug: bool) -> Result<()> {
    let names: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(ConfigError("no components given".into()).into());
    }
    let names: Vec<&str> = if names == ["all"] { checks::COMPONENTS.iter().map(|c| c.0).collect() } else { names };
    // Reject unknown names before spending time on the known ones.
    for n in &names {
        if checks::tolerance(n).is_none() {
            return Err(ConfigError(format!(
                "unknown component {n:?}; known: {}",
                checks::COMPONENTS.iter().map(|c| c.0).collect::<Vec<_>>().join(", ")
            ))
            .into());
        }
    }
    let mut failed = Vec::new();
    for n in names {
        let r = checks::run_component(n, inject_bug)?;
        print!("{r}");
        if !r.passed() {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        return Err(CheckFailed(format!("gradient mismatch in {}", failed.join(", "))).into());
    }
    Ok(())
}

/// Input `[L, C]` and parameters of a randomized scan; step sizes are
/// drawn larger than at initialization so the state mixes over the run.
pub fn scan_case(l: usize, c: usize, n: usize, seed: u64) -> (Tensor<f64>, SsmParams<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = SsmParams::init(c, n, &mut rng);
    p.b_delta = Tensor::from_fn(&[c], |_| rng.gen_range(-1.0..0.5));
    p.d = Tensor::from_fn(&[c], |_| rng.gen_range(-1.0..1.0));
    let u = Tensor::from_fn(&[l, c], |_| rng.gen_range(-1.0..1.0));
    (u, p)
}

pub fn run_scan<T: Scalar>(u: &Tensor<f64>, p: &SsmParams<f64>, mode: ScanMode) -> Result<Tensor<T>> {
    let opts = ScanOptions { mode, ..Default::default() };
    Ok(selective_scan(&u.cast::<T>(), p.cast::<T>().view(), opts, Phase::Infer)?.0)
}

/// Largest relative difference, with differences near zero measured
/// against [`SCAN_DIFF_FLOOR`].
pub fn scan_rel_diff<A: Scalar, B: Scalar>(a: &Tensor<A>, b: &Tensor<B>) -> f64 {
    a.cast::<f64>().max_rel_diff(&b.cast::<f64>(), SCAN_DIFF_FLOOR)
}

fn bench_scan(a: &BenchArgs, seed: u64) -> Result<()> {
    if a.l == 0 || a.n == 0 || a.c == 0 {
        return Err(ConfigError("L, N and C must be positive".into()).into());
    }
    let (mode, other, label, other_label) = match a.mode {
        ScanModeArg::Seq => (ScanMode::Sequential, ScanMode::Parallel, "seq", "par"),
        ScanModeArg::Par => (ScanMode::Parallel, ScanMode::Sequential, "par", "seq"),
    };
    println!("bench-scan L={} N={} C={} mode={label}", a.l, a.n, a.c);
    let (u, p) = scan_case(a.l, a.c, a.n, seed);
    let start = Instant::now();
    let y32 = run_scan::<f32>(&u, &p, mode)?;
    let secs = start.elapsed().as_secs_f64();
    let o32 = run_scan::<f32>(&u, &p, other)?;
    let d32 = scan_rel_diff(&y32, &o32);
    let d64 = scan_rel_diff(&run_scan::<f64>(&u, &p, mode)?, &run_scan::<f64>(&u, &p, other)?);
    println!("time_seconds {secs:.6}");
    println!("rel_diff_vs_{other_label}_f32 {d32:.3e}");
    println!("rel_diff_vs_{other_label}_f64 {d64:.3e}");
    println!("bit_identical_f32 {}", y32 == o32);

    let work = |l: usize| -> Result<u64> {
        let (u, p) = scan_case(l, a.c, a.n, seed);
        counters::reset();
        run_scan::<f32>(&u, &p, mode)?;
        Ok(match mode {
            ScanMode::Sequential => counters::macs(),
            ScanMode::Parallel => counters::scan_combines(),
        })
    };
    let (w1, w2) = (work(a.l)?, work(2 * a.l)?);
    let counter = if mode == ScanMode::Sequential { "macs" } else { "scan_combines" };
    println!("{counter} L={} {w1}", a.l);
    println!("{counter} L={} {w2}", 2 * a.l);
    println!("work_ratio {:.4}", w2 as f64 / w1 as f64);
    Ok(())
}

fn train_cmd(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write(dir, "config.toml", cfg.to_toml())?;
    let (net, ps) = Network::build(&cfg.network, cfg.seed)?;
    let t = &cfg.train;
    let extent = cfg.data.extent;
    net.preflight([extent; 3])?;
    let (train_set, val_set) = train_val_split(&cfg.data, t.train_samples, t.val_samples)?;
    println!("training {} ({} parameters) on {} volumes of {extent}³", cfg.network.variant.display_name(), net.param_count(), train_set.len());
    let (ps, records) = train::train(&net, ps.cast::<f32>(), &train_set, &val_set, t, cfg.seed, |r| {
        println!(
            "epoch {:>3} loss {:.6} val_dice {:.4} ({:.1}s)",
            r.epoch, r.loss, r.val.macro_fg, r.wall_seconds
        );
    })?;
    write(dir, "train_log.csv", log_csv(&records))?;
    write(dir, "timing.csv", timing_csv(&records))?;
    let mut bytes = Vec::new();
    ps.cast::<f64>().write_to(&mut bytes)?;
    let hash = sha256_hex(&bytes);
    write(dir, "checkpoint.bin", &bytes)?;
    write(dir, "checkpoint.sha256", format!("{hash}  checkpoint.bin\n"))?;
    let last = records.last().expect("at least one epoch");
    println!("final val_dice {:.4}", last.val.macro_fg);
    println!("checkpoint sha256 {hash}");
    println!("# outputs in {}", dir.display());
    Ok(())
}

/// Parameters of `net` with values read from a checkpoint file.
pub fn load_checkpoint(net_cfg: &RunConfig, path: &Path) -> Result<(Network, ParamStore<f64>)> {
    let (net, mut ps) = Network::build(&net_cfg.network, net_cfg.seed)?;
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let loaded = ParamStore::<f64>::read_from(&mut f)?;
    ps.load_values(&loaded).context("checkpoint does not match the configured network")?;
    Ok((net, ps))
}

fn eval_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, dir: &Path) -> Result<()> {
    let (_, val) = train_val_split(&cfg.data, cfg.train.train_samples, cfg.train.val_samples)?;
    let report = match checkpoint {
        Some(path) => {
            let (net, ps) = load_checkpoint(cfg, path)?;
            net.preflight([cfg.data.extent; 3])?;
            evaluate(&net, &ps.cast::<f32>(), &val)?
        }
        None => {
            let reports = val
                .iter()
                .map(|s| dice_score(&s.labels, &s.labels, NUM_CLASSES))
                .collect::<Result<Vec<_>, Error>>()?;
            DiceReport::mean(&reports)?
        }
    };
    let mut csv = String::from("class,dice\n");
    for (c, d) in report.per_class.iter().enumerate() {
        csv.push_str(&format!("{c},{d:.8}\n"));
    }
    csv.push_str(&format!("macro_fg,{:.8}\n", report.macro_fg));
    write(dir, "dice.csv", &csv)?;
    print!("{csv}");
    Ok(())
}
