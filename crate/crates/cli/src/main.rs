use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fusionmil::data::{
    ingest, loso_folds, synth_generate, write_sessions, written_config, BagDataset, IngestConfig, Mode, Placement,
    PlacementPolicy, Session, SplitConfig, SynthConfig,
};
use fusionmil::harness::{
    evaluate_bags, gradcheck_suite, metrics_over, metrics_text, pretrain_protocol, run_experiment, smooth_predictions,
    table_text, train, write_report, ExperimentConfig, Manifest, Pretrain, TrainConfig,
};
use fusionmil::hmm::{estimate_transitions, viterbi, TransitionMatrix, N_STATES};
use fusionmil::model::{argmax, Model, ModelConfig};
use fusionmil::numerics::{load_checkpoint, save_checkpoint, write_container, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(
    name = "fusionmil",
    version,
    about = "Transportation-mode recognition from motion and location sensors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset root with `<user>/<day>/` session directories.
    #[arg(long, env = "FUSIONMIL_DATA")]
    root: PathBuf,
    /// Ingest settings (TOML). Defaults to `<root>/ingest.toml` when present.
    #[arg(long)]
    ingest_config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Read a dataset and summarise what was found.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset in the on-disk session layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Generator settings (TOML); flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        minutes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cache spectrograms and location windows of every bag.
    Preprocess {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on a LOSO fold and save its checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Training settings (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Held-out user (the first user when omitted).
        #[arg(long)]
        test_user: Option<String>,
        /// Train on one placement only.
        #[arg(long)]
        placement: Option<String>,
        /// Longest single-label stretch assigned to one side of the split.
        #[arg(long, default_value_t = 30)]
        stream_minutes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model on its held-out user.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Only the HMM-smoothed block.
        #[arg(long, conflicts_with = "no_hmm")]
        hmm: bool,
        /// Only the raw block.
        #[arg(long)]
        no_hmm: bool,
        /// Output directory (defaults to `<model>/eval`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Viterbi-smooth per-minute probabilities.
    Smooth {
        /// Rows of `session target p_1 .. p_8`.
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        transitions: PathBuf,
        /// Rows of `session target label`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment and write tables, confusion matrices and ROC points.
    Report {
        #[command(flatten)]
        data: DataArgs,
        /// Experiment settings (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every layer and the full model.
    Gradcheck {
        /// Probed entries per parameter tensor in the model checks.
        #[arg(long, default_value_t = 6)]
        coords: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn load_data(d: &DataArgs) -> Result<(Vec<Session>, IngestConfig)> {
    let implicit = d.root.join("ingest.toml");
    let cfg = match &d.ingest_config {
        Some(p) => read_toml(p)?,
        None if implicit.exists() => read_toml(&implicit)?,
        None => IngestConfig::default(),
    };
    let (sessions, report) = ingest(&d.root, &cfg)?;
    if sessions.is_empty() {
        bail!("no sessions under {}", d.root.display());
    }
    eprint!("{}", report.summary());
    Ok((sessions, cfg))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn classes_of(sessions: &[Session]) -> Vec<usize> {
    let mut seen = [false; N_STATES];
    for s in sessions {
        for l in s.labels.iter().flatten() {
            seen[l.index()] = true;
        }
    }
    (0..N_STATES).filter(|&k| seen[k]).collect()
}

fn transitions_without(sessions: &[Session], user: &str) -> Result<TransitionMatrix> {
    let labels: Vec<Vec<Option<Mode>>> = sessions
        .iter()
        .filter(|s| s.user != user)
        .map(|s| s.labels.clone())
        .collect();
    Ok(estimate_transitions(&labels, 1.0)?)
}

fn policy(placement: Option<&str>) -> Result<PlacementPolicy> {
    Ok(match placement {
        Some(p) => PlacementPolicy::One(Placement::parse(p)?),
        None => PlacementPolicy::Each,
    })
}

fn bag_config(cfg: &TrainConfig) -> fusionmil::data::BagConfig {
    ExperimentConfig {
        train: cfg.clone(),
        ..ExperimentConfig::default()
    }
    .bag_config()
}

fn cmd_ingest(data: &DataArgs, out: &Path) -> Result<()> {
    let (sessions, cfg) = load_data(data)?;
    let mut s = String::from("session minutes labelled placements\n");
    for x in &sessions {
        let pl: Vec<&str> = x.placements().iter().map(|p| p.name()).collect();
        let _ = writeln!(
            s,
            "{} {} {} {}",
            x.id(),
            x.minutes(),
            x.labelled_minutes(),
            pl.join(",")
        );
    }
    print!("{s}");
    write_text(&out.join("sessions.txt"), &s)?;
    Manifest::new("ingest", 0, &cfg)?.write(out)?;
    Ok(())
}

fn cmd_synth(
    out: &Path,
    config: Option<&Path>,
    users: Option<usize>,
    sessions: Option<usize>,
    minutes: Option<usize>,
    seed: u64,
) -> Result<()> {
    let mut cfg: SynthConfig = match config {
        Some(p) => read_toml(p)?,
        None => SynthConfig::default(),
    };
    cfg.users = users.unwrap_or(cfg.users);
    cfg.sessions_per_user = sessions.unwrap_or(cfg.sessions_per_user);
    cfg.minutes_per_session = minutes.unwrap_or(cfg.minutes_per_session);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let synth = synth_generate(&cfg, &mut rng)?;
    write_sessions(out, &synth.sessions)?;
    write_text(&out.join("ingest.toml"), &toml::to_string(&written_config())?)?;
    Manifest::new("synth", seed, &cfg)?.write(out)?;
    println!("{} sessions written to {}", synth.sessions.len(), out.display());
    Ok(())
}

fn cmd_preprocess(data: &DataArgs, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = train_config(config)?;
    let (sessions, _) = load_data(data)?;
    let ds = BagDataset::build(&sessions, &PlacementPolicy::Each, &bag_config(&cfg))?;
    let spec: Vec<(String, Tensor)> = ds
        .frames
        .iter()
        .zip(&ds.spectrograms)
        .map(|(k, t)| {
            let name = format!(
                "{}/{}/{}+{}",
                ds.sessions[k.session].id,
                k.placement.name(),
                k.minute,
                k.minutes
            );
            (name, t.clone())
        })
        .collect();
    let mut loc = Vec::new();
    for (&(s, m), w) in ds.loc_keys.iter().zip(&ds.loc_windows) {
        let name = format!("{}/{m}", ds.sessions[s].id);
        let seq: Vec<f64> = w.seq.iter().flatten().copied().collect();
        loc.push((format!("{name}/seq"), Tensor::new(vec![w.seq.len(), 2], seq)?));
        loc.push((
            format!("{name}/scalars"),
            Tensor::new(vec![w.scalars.len()], w.scalars.to_vec())?,
        ));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_container(&out.join("spectrograms.ckpt"), &spec)?;
    write_container(&out.join("loc_windows.ckpt"), &loc)?;
    let mut index = String::from("session user target label placements\n");
    for b in &ds.bags {
        let pl: Vec<&str> = b.placements.iter().map(|p| p.name()).collect();
        let _ = writeln!(
            index,
            "{} {} {} {} {}",
            ds.sessions[b.session].id,
            b.user,
            b.target,
            b.label.name(),
            pl.join(",")
        );
    }
    write_text(&out.join("bags.txt"), &index)?;
    Manifest::new("preprocess", cfg.seed, &cfg)?.write(out)?;
    println!(
        "{} bags, {} spectrograms, {} location windows",
        ds.len(),
        spec.len(),
        ds.loc_windows.len()
    );
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct FoldInfo {
    test_user: String,
    placement: Option<String>,
}

fn cmd_train(
    data: &DataArgs,
    config: Option<&Path>,
    test_user: Option<&str>,
    placement: Option<&str>,
    stream_minutes: usize,
    out: &Path,
) -> Result<()> {
    let cfg = train_config(config)?;
    let (sessions, _) = load_data(data)?;
    let ds = BagDataset::build(&sessions, &policy(placement)?, &bag_config(&cfg))?;
    let split = SplitConfig {
        max_stream_minutes: stream_minutes,
        ..SplitConfig::default()
    };
    let specs = loso_folds(&sessions, &split, cfg.seed)?;
    let spec = match test_user {
        Some(u) => specs
            .iter()
            .find(|s| s.test_user == u)
            .with_context(|| format!("unknown user {u}"))?,
        None => &specs[0],
    };
    let fold = spec.assign(&ds);
    eprintln!(
        "test user {}: {} train, {} validation, {} test bags",
        spec.test_user,
        fold.train.len(),
        fold.validation.len(),
        fold.test.len()
    );
    let outcome = if cfg.pretrain == Pretrain::None {
        train(&cfg, &ds, &fold.train, &fold.validation)?
    } else {
        pretrain_protocol(&cfg, &ds, &fold.train, &fold.validation, &out.join("stage1"))?
    };
    for r in &outcome.history {
        println!(
            "epoch {} train_loss {:.5} val_loss {:.5} val_accuracy {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy
        );
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_checkpoint(&outcome.model.store, &out.join("model.ckpt"))?;
    write_text(
        &out.join("model.json"),
        &serde_json::to_string_pretty(&outcome.model.config)?,
    )?;
    write_text(&out.join("train.toml"), &cfg.to_toml())?;
    write_text(
        &out.join("history.json"),
        &serde_json::to_string_pretty(&outcome.history)?,
    )?;
    let info = FoldInfo {
        test_user: spec.test_user.clone(),
        placement: placement.map(str::to_string),
    };
    write_text(&out.join("fold.json"), &serde_json::to_string_pretty(&info)?)?;
    transitions_without(&sessions, &spec.test_user)?.save(&out.join("transitions.txt"))?;
    Manifest::new("train", cfg.seed, &cfg)?.write(out)?;
    println!(
        "best epoch {} val_loss {:.5}",
        outcome.best_epoch, outcome.best_val_loss
    );
    Ok(())
}

fn cmd_evaluate(data: &DataArgs, model_dir: &Path, hmm: bool, no_hmm: bool, out: Option<&Path>) -> Result<()> {
    let out = out.map_or_else(|| model_dir.join("eval"), Path::to_path_buf);
    let cfg = TrainConfig::load(&model_dir.join("train.toml"))?;
    let info: FoldInfo =
        serde_json::from_str(&std::fs::read_to_string(model_dir.join("fold.json")).context("reading fold.json")?)?;
    let mcfg: ModelConfig =
        serde_json::from_str(&std::fs::read_to_string(model_dir.join("model.json")).context("reading model.json")?)?;
    let mut model = Model::new(mcfg, 0)?;
    load_checkpoint(&mut model.store, &model_dir.join("model.ckpt"))?;
    let t = TransitionMatrix::load(&model_dir.join("transitions.txt"))?;

    let (sessions, _) = load_data(data)?;
    let classes = classes_of(&sessions);
    let test: Vec<Session> = sessions.iter().filter(|s| s.user == info.test_user).cloned().collect();
    if test.is_empty() {
        bail!("no sessions of test user {}", info.test_user);
    }
    let ds = BagDataset::build(&test, &policy(info.placement.as_deref())?, &bag_config(&cfg))?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (_, _, preds) = evaluate_bags(&model, &ds, &idx, cfg.loss, cfg.batch)?;
    let labels = ds.labels(&idx);
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    let raw: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let smoothed = smooth_predictions(&ds, &idx, &probs, &t, info.placement.is_none());

    let mut rows = String::new();
    for (&i, p) in idx.iter().zip(&probs) {
        let b = &ds.bags[i];
        let session = match b.placements.first() {
            Some(pl) if info.placement.is_none() => format!("{}@{}", ds.sessions[b.session].id, pl.name()),
            _ => ds.sessions[b.session].id.clone(),
        };
        let cols: Vec<String> = p.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(rows, "{session} {} {}", b.target, cols.join(" "));
    }
    write_text(&out.join("probs.txt"), &rows)?;

    let mut blocks = BTreeMap::new();
    if !hmm {
        let m = metrics_over(&raw, &labels, N_STATES, &classes)?;
        print!("{}", metrics_text("without hmm", &m));
        blocks.insert("pre_hmm", m);
    }
    if !no_hmm {
        if !hmm {
            println!();
        }
        let m = metrics_over(&smoothed, &labels, N_STATES, &classes)?;
        print!("{}", metrics_text("with hmm", &m));
        blocks.insert("post_hmm", m);
    }
    write_text(&out.join("metrics.json"), &serde_json::to_string_pretty(&blocks)?)?;
    Manifest::new("evaluate", cfg.seed, &cfg)?.write(&out)?;
    Ok(())
}

fn cmd_smooth(probs: &Path, transitions: &Path, out: &Path) -> Result<()> {
    let t = TransitionMatrix::load(transitions)?;
    let text = std::fs::read_to_string(probs).with_context(|| format!("reading {}", probs.display()))?;
    let mut groups: BTreeMap<String, Vec<(usize, [f64; N_STATES])>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 2 + N_STATES {
            bail!(
                "{}:{}: expected {} columns, found {}",
                probs.display(),
                n + 1,
                2 + N_STATES,
                f.len()
            );
        }
        let target: usize = f[1]
            .parse()
            .with_context(|| format!("{}:{}: bad target", probs.display(), n + 1))?;
        let mut row = [0.0; N_STATES];
        for (k, v) in f[2..].iter().enumerate() {
            row[k] = v
                .parse()
                .with_context(|| format!("{}:{}: bad probability", probs.display(), n + 1))?;
        }
        groups.entry(f[0].to_string()).or_default().push((target, row));
    }
    let mut s = String::new();
    for (session, mut rows) in groups {
        rows.sort_by_key(|r| r.0);
        let em: Vec<[f64; N_STATES]> = rows.iter().map(|r| r.1).collect();
        for ((target, _), k) in rows.iter().zip(viterbi(&em, &t)) {
            let _ = writeln!(s, "{session} {target} {}", Mode::from_index(k)?.name());
        }
    }
    write_text(out, &s)?;
    let dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let inputs = serde_json::json!({ "probs": probs, "transitions": transitions });
    Manifest::new("smooth", 0, &inputs)?.write(dir)?;
    Ok(())
}

fn cmd_report(data: &DataArgs, config: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg: ExperimentConfig = match config {
        Some(p) => read_toml(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    if cfg.work_dir.is_none() {
        cfg.work_dir = Some(out.join("work"));
    }
    let (sessions, _) = load_data(data)?;
    let report = run_experiment(&cfg, &sessions)?;
    for path in write_report(out, &report)? {
        eprintln!("wrote {}", path.display());
    }
    print!("{}", table_text(&report));
    Ok(())
}

fn cmd_gradcheck(coords: usize, out: Option<&Path>) -> Result<bool> {
    let (checks, elapsed) = gradcheck_suite(coords)?;
    let mut ok = true;
    for c in &checks {
        let pass = c.passed();
        ok &= pass;
        println!(
            "{} {} max_rel_error {:.3e} tolerance {:.0e} entries {}",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            c.report.max_rel_error,
            c.tolerance,
            c.report.checked
        );
    }
    println!("{:.1}s", elapsed.as_secs_f64());
    if let Some(dir) = out {
        Manifest::new("gradcheck", 0, &serde_json::json!({ "coords": coords, "passed": ok }))?.write(dir)?;
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Ingest { data, out } => cmd_ingest(&data, &out)?,
        Command::Synth {
            out,
            config,
            users,
            sessions,
            minutes,
            seed,
        } => cmd_synth(&out, config.as_deref(), users, sessions, minutes, seed)?,
        Command::Preprocess { data, config, out } => cmd_preprocess(&data, config.as_deref(), &out)?,
        Command::Train {
            data,
            config,
            test_user,
            placement,
            stream_minutes,
            out,
        } => cmd_train(
            &data,
            config.as_deref(),
            test_user.as_deref(),
            placement.as_deref(),
            stream_minutes,
            &out,
        )?,
        Command::Evaluate {
            data,
            model,
            hmm,
            no_hmm,
            out,
        } => cmd_evaluate(&data, &model, hmm, no_hmm, out.as_deref())?,
        Command::Smooth {
            probs,
            transitions,
            out,
        } => cmd_smooth(&probs, &transitions, &out)?,
        Command::Report { data, config, out } => cmd_report(&data, config.as_deref(), &out)?,
        Command::Gradcheck { coords, out } => return cmd_gradcheck(coords, out.as_deref()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
