use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mimalloc::MiMalloc;
use rrl_core::attention::{self, AuRegionSpec, GRID};
use rrl_core::checkpoint::Checkpoint;
use rrl_core::pipeline::{self, TrainConfig};
use rrl_core::probe::{self, ProbeConfig, ProbeHead};
use rrl_core::relation::{self, RelationMatrix};
use rrl_core::synth::{self, SynthSpec};
use rrl_core::{diagnostics, io, Error, Result};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

/// Region and relation self-supervised learning for facial action units,
/// at desk scale on synthetic data.
///
/// Settings resolve as built-in defaults, then `--config` file entries, then
/// command-line flags. Every command writes the resolved settings to
/// `<command>.cfg` in its output directory.
#[derive(Parser, Debug)]
#[command(name = "rrl", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic-AU dataset with subject-disjoint train/test shards.
    GenData(GenData),
    /// Self-supervised pre-training; writes a checkpoint and the loss log.
    Pretrain(Pretrain),
    /// Fit per-AU linear probes on frozen features of a checkpoint.
    Probe(ProbeCmd),
    /// Score a fitted probe; writes a per-AU F1 report.
    Eval(Eval),
    /// AU relationship matrix (Dice) from a label CSV.
    Relmat(Relmat),
    /// Dump attention maps as PGM images.
    Attmap(Attmap),
    /// Compare Sinkhorn against the exact transport optimum.
    SinkhornCheck(SinkhornCheck),
    /// Finite-difference check of every loss term and of the full network.
    Gradcheck(Gradcheck),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of AUs (8 or 12).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Pretrain {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Dataset directory (its `train` shard is used when present).
    #[arg(long)]
    data: PathBuf,
    /// Relationship matrix CSV; computed from the training labels if absent.
    #[arg(long)]
    relation: Option<PathBuf>,
    /// AU region table; the built-in table for K if absent.
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeCmd {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (its `train` shard is used when present).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Concatenate the K local features to the global feature.
    #[arg(long)]
    with_local: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probe head written by `probe`.
    #[arg(long)]
    probe: PathBuf,
    /// Dataset directory (its `test` shard is used when present).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Relmat {
    #[arg(long)]
    labels: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Attmap {
    /// Dataset directory with `landmarks.csv`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Number of samples to dump.
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SinkhornCheck {
    /// Largest problem size; each trial draws K from 1..=k.
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// First seed; seeds `seed .. seed + seeds` are checked.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `RRL_THREADS` workers for feature extraction; 1 when unset.
fn threads() -> Result<usize> {
    match std::env::var("RRL_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::contract(format!("RRL_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn echo(dir: &Path, command: &str, kv: &BTreeMap<String, String>) -> Result<()> {
    io::create_dir(dir)?;
    let mut text = String::new();
    for (k, v) in kv {
        let _ = writeln!(text, "{k} = {v}");
    }
    io::write_atomic(&dir.join(format!("{command}.cfg")), text.as_bytes())
}

fn read_kv(path: &Option<PathBuf>) -> Result<Vec<(String, String)>> {
    match path {
        None => Ok(Vec::new()),
        Some(p) => Ok(pipeline::parse_kv(&io::read_to_string(p)?, &p.display().to_string())?
            .into_iter()
            .collect()),
    }
}

/// `dir/<shard>` when it holds a dataset, else `dir`.
fn shard(dir: &Path, name: &str) -> PathBuf {
    let sub = dir.join(name);
    if sub.join("labels.csv").exists() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn regions_for(path: &Option<PathBuf>, k: usize) -> Result<Vec<AuRegionSpec>> {
    let specs = match path {
        Some(p) => attention::read_region_specs(p)?,
        None => attention::default_region_specs(k)?,
    };
    if specs.len() != k {
        return Err(Error::contract(format!("{} region specs for K={k}", specs.len())));
    }
    Ok(specs)
}

fn synth_kv(s: &SynthSpec) -> BTreeMap<String, String> {
    let f = io::fmt_f64;
    let couplings: Vec<String> = s
        .pair_coupling
        .iter()
        .map(|(i, j, v)| format!("{i}:{j}:{}", f(*v)))
        .collect();
    [
        ("seed", s.seed.to_string()),
        ("k", s.k.to_string()),
        ("image_size", s.image_size.to_string()),
        ("n_subjects", s.n_subjects.to_string()),
        ("per_subject", s.per_subject.to_string()),
        ("test_fraction", f(s.test_fraction)),
        ("au_prior", s.au_prior.iter().map(|&v| f(v)).collect::<Vec<_>>().join(",")),
        ("pair_coupling", couplings.join(";")),
        ("au_amplitude", f(s.au_amplitude)),
        ("au_width_px", f(s.au_width_px)),
        ("au_wavelength_px", f(s.au_wavelength_px)),
        ("au_random_phase", s.au_random_phase.to_string()),
        ("pixel_noise", f(s.pixel_noise)),
        ("texture_amplitude", f(s.texture_amplitude)),
        ("trace_ratio", f(s.trace_ratio)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn base_synth(k: usize, seed: u64) -> Result<SynthSpec> {
    let mut s = SynthSpec::default_k8(seed);
    if k != 8 {
        s.k = k;
        s.au_prior = vec![0.3; k];
        s.regions = attention::default_region_specs(k)?;
    }
    Ok(s)
}

fn apply_synth(s: &mut SynthSpec, kv: &[(String, String)], origin: &str) -> Result<()> {
    for (key, v) in kv {
        let num = || io::parse_f64(v, origin);
        let int = || io::parse_usize(v, origin);
        match key.as_str() {
            "seed" | "k" => {}
            "image_size" => s.image_size = int()?,
            "n_subjects" => s.n_subjects = int()?,
            "per_subject" => s.per_subject = int()?,
            "test_fraction" => s.test_fraction = num()?,
            "au_prior" => {
                s.au_prior = v
                    .split(',')
                    .map(|x| io::parse_f64(x.trim(), origin))
                    .collect::<Result<_>>()?
            }
            "pair_coupling" => {
                s.pair_coupling = v
                    .split(';')
                    .filter(|t| !t.trim().is_empty())
                    .map(|t| {
                        let p: Vec<&str> = t.split(':').map(str::trim).collect();
                        if p.len() != 3 {
                            return Err(Error::parse(origin, format!("coupling {t:?} is not i:j:strength")));
                        }
                        Ok((io::parse_usize(p[0], origin)?, io::parse_usize(p[1], origin)?, io::parse_f64(p[2], origin)?))
                    })
                    .collect::<Result<_>>()?
            }
            "au_amplitude" => s.au_amplitude = num()?,
            "au_width_px" => s.au_width_px = num()?,
            "au_wavelength_px" => s.au_wavelength_px = num()?,
            "au_random_phase" => {
                s.au_random_phase = v
                    .parse()
                    .map_err(|_| Error::parse(origin, format!("au_random_phase {v:?} is not true/false")))?
            }
            "pixel_noise" => s.pixel_noise = num()?,
            "texture_amplitude" => s.texture_amplitude = num()?,
            "trace_ratio" => s.trace_ratio = num()?,
            _ => return Err(Error::parse(origin, format!("unknown key {key:?}"))),
        }
    }
    Ok(())
}

fn lookup<'a>(kv: &'a [(String, String)], key: &str) -> Option<&'a str> {
    kv.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn gen_data(a: GenData) -> Result<()> {
    let kv = read_kv(&a.config)?;
    let origin = a.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let seed = match (a.seed, lookup(&kv, "seed")) {
        (Some(s), _) => s,
        (None, Some(v)) => io::parse_usize(v, &origin)? as u64,
        (None, None) => 0,
    };
    let k = match (a.k, lookup(&kv, "k")) {
        (Some(k), _) => k,
        (None, Some(v)) => io::parse_usize(v, &origin)?,
        (None, None) => 8,
    };
    let mut spec = base_synth(k, seed)?;
    apply_synth(&mut spec, &kv, &origin)?;
    let split = synth::generate(&spec)?;
    synth::write_dataset(&a.out.join("train"), &split.train)?;
    synth::write_dataset(&a.out.join("test"), &split.test)?;
    io::write_atomic(&a.out.join("regions.csv"), attention::format_region_specs(&spec.regions).as_bytes())?;
    let m: RelationMatrix<f64> = relation::relation_from_labels(&split.train.label_matrix())?;
    relation::write_relation(&a.out.join("relation.csv"), &m)?;
    echo(&a.out, "gen-data", &synth_kv(&spec))?;
    println!(
        "wrote {} train / {} test samples (K={}) to {}",
        split.train.len(),
        split.test.len(),
        spec.k,
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: Pretrain) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        cfg = TrainConfig::read(p)?;
    }
    let mut flags = Vec::new();
    if let Some(s) = a.seed {
        flags.push(("seed", s.to_string()));
    }
    if let Some(s) = a.steps {
        flags.push(("steps", s.to_string()));
    }
    cfg.apply(flags.iter().map(|(k, v)| (*k, v.as_str())), "command line")?;
    cfg.validate()?;
    let data = synth::read_dataset(&shard(&a.data, "train"))?;
    let k = cfg.model.k;
    let regions = regions_for(&a.regions, k)?;
    let rel = match &a.relation {
        Some(p) => relation::read_relation(p)?,
        None => relation::relation_from_labels(&data.label_matrix())?,
    };
    echo(&a.out, "pretrain", &cfg.to_kv())?;
    let every = (cfg.steps / 20).max(1);
    let out = pipeline::pretrain(&cfg, &data, &rel, &regions, |r| {
        if r.step % every == 0 || r.step + 1 == cfg.steps {
            eprintln!(
                "step {:>5}  l_all {:.4}  l_glo {:.4}  l_loc {:.4}  l_corr {:.4}",
                r.step, r.l_all, r.l_glo, r.l_loc, r.l_corr
            );
        }
    })?;
    out.checkpoint.save(&a.out.join("checkpoint"))?;
    io::write_atomic(&a.out.join("loss.csv"), pipeline::format_loss_log(&out.log).as_bytes())?;
    if out.plan_stats.unconverged > 0 || out.plan_stats.uniform_fallbacks > 0 {
        eprintln!(
            "transport: {} unconverged solves, {} uniform fallbacks",
            out.plan_stats.unconverged, out.plan_stats.uniform_fallbacks
        );
    }
    println!("checkpoint written to {}", a.out.join("checkpoint").display());
    Ok(())
}

fn probe_kv(c: &ProbeConfig) -> BTreeMap<String, String> {
    [
        ("epochs", c.epochs.to_string()),
        ("lr", io::fmt_f64(c.lr)),
        ("weight_decay", io::fmt_f64(c.weight_decay)),
        ("with_local", c.with_local.to_string()),
        ("seed", c.seed.to_string()),
        ("threads", c.threads.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn probe_cmd(a: ProbeCmd) -> Result<()> {
    let mut cfg = ProbeConfig {
        threads: threads()?,
        ..ProbeConfig::default()
    };
    let origin = a.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    for (key, v) in read_kv(&a.config)? {
        match key.as_str() {
            "epochs" => cfg.epochs = io::parse_usize(&v, &origin)?,
            "lr" => cfg.lr = io::parse_f64(&v, &origin)?,
            "weight_decay" => cfg.weight_decay = io::parse_f64(&v, &origin)?,
            "with_local" => {
                cfg.with_local = v.parse().map_err(|_| Error::parse(&origin, format!("with_local = {v:?}")))?
            }
            "seed" => cfg.seed = io::parse_usize(&v, &origin)? as u64,
            _ => return Err(Error::parse(&origin, format!("unknown key {key:?}"))),
        }
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.with_local |= a.with_local;
    cfg.validate()?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = synth::read_dataset(&shard(&a.data, "train"))?;
    let regions = regions_for(&a.regions, data.k)?;
    echo(&a.out, "probe", &probe_kv(&cfg))?;
    let head = probe::train_probe(&ckpt, &data, &regions, &cfg)?;
    head.save(&a.out.join("probe.json"))?;
    println!("probe head written to {}", a.out.join("probe.json").display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let head = ProbeHead::load(&a.probe)?;
    let dir = shard(&a.data, "test");
    let data = synth::read_dataset(&dir)?;
    let regions = regions_for(&a.regions, data.k)?;
    let kv: BTreeMap<String, String> = [
        ("checkpoint", a.checkpoint.display().to_string()),
        ("probe", a.probe.display().to_string()),
        ("data", dir.display().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    echo(&a.out, "eval", &kv)?;
    let report = probe::evaluate(&head, &ckpt, &data, &regions, threads()?)?;
    let csv = report.to_csv();
    io::write_atomic(&a.out.join("report.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn relmat(a: Relmat) -> Result<()> {
    let (_, labels) = synth::read_label_csv(&a.labels)?;
    let m: RelationMatrix<f64> = relation::relation_from_labels(&labels)?;
    relation::write_relation(&a.out, &m)?;
    let dir = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let kv = [
        ("labels".to_string(), a.labels.display().to_string()),
        ("out".to_string(), a.out.display().to_string()),
    ]
    .into_iter()
    .collect();
    echo(&dir, "relmat", &kv)?;
    print!("{}", relation::format_relation(&m));
    Ok(())
}

/// Nearest-neighbour upscaling of a `GRID × GRID` map to 8-bit PGM.
fn map_pgm(map: &[f64], scale: usize) -> Vec<u8> {
    let side = GRID * scale;
    let mut img = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            img[r * side + c] = map[(r / scale) * GRID + c / scale];
        }
    }
    synth::encode_pgm(&img, side)
}

fn attmap(a: Attmap) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        cfg = TrainConfig::read(p)?;
    }
    let lms = attention::read_landmarks(&a.data.join("landmarks.csv"))?;
    let (ids, _) = synth::read_label_csv(&a.data.join("labels.csv"))?;
    let k = a.k.unwrap_or(cfg.model.k);
    let regions = regions_for(&a.regions, k)?;
    let mut kv = cfg.to_kv();
    kv.insert("k".into(), k.to_string());
    kv.insert("count".into(), a.count.to_string());
    echo(&a.out, "attmap", &kv)?;
    let mut written = 0;
    for (id, lm) in ids.iter().zip(&lms).take(a.count) {
        let maps = pipeline::attention_for(lm, &regions, &cfg.attention)?;
        for (au, m) in maps.chunks(GRID * GRID).enumerate() {
            io::write_atomic(&a.out.join(format!("{id}_au{au}.pgm")), &map_pgm(m, 4))?;
            written += 1;
        }
    }
    println!("wrote {written} maps to {}", a.out.display());
    Ok(())
}

/// Prints `text`; with `--out`, also echoes the settings and writes `text`
/// to `file` there.
fn report(out: &Option<PathBuf>, command: &str, kv: BTreeMap<String, String>, file: &str, text: &str) -> Result<()> {
    if let Some(dir) = out {
        echo(dir, command, &kv)?;
        io::write_atomic(&dir.join(file), text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

const SINKHORN_REL_TOL: f64 = 0.01;
const SINKHORN_VIOLATION_TOL: f64 = 1e-6;

fn sinkhorn_check(a: SinkhornCheck) -> Result<bool> {
    let trials = diagnostics::sinkhorn_check(a.k, a.epsilon, a.trials, a.seed)?;
    let text = diagnostics::format_sinkhorn_report(&trials, SINKHORN_REL_TOL, SINKHORN_VIOLATION_TOL);
    let kv = [
        ("k", a.k.to_string()),
        ("epsilon", io::fmt_f64(a.epsilon)),
        ("trials", a.trials.to_string()),
        ("seed", a.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    report(&a.out, "sinkhorn-check", kv, "sinkhorn.csv", &text)?;
    Ok(trials
        .iter()
        .all(|t| t.rel_gap() <= SINKHORN_REL_TOL && t.violation < SINKHORN_VIOLATION_TOL))
}

fn gradcheck(a: Gradcheck) -> Result<bool> {
    let mut rows = Vec::new();
    for seed in a.seed..a.seed + a.seeds {
        rows.extend(diagnostics::gradient_suite(seed)?);
    }
    let text = diagnostics::format_grad_report(&rows);
    let kv = [("seed", a.seed.to_string()), ("seeds", a.seeds.to_string())]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    report(&a.out, "gradcheck", kv, "gradcheck.csv", &text)?;
    Ok(rows.iter().all(|r| r.pass()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Pretrain(a) => pretrain(a).map(|_| true),
        Command::Probe(a) => probe_cmd(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Relmat(a) => relmat(a).map(|_| true),
        Command::Attmap(a) => attmap(a).map(|_| true),
        Command::SinkhornCheck(a) => sinkhorn_check(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

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
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
