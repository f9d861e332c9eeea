use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nes2net_core::config::RunConfig;
use nes2net_core::gradcheck::{model_grad_check, GradCheckOptions};
use nes2net_core::metrics::{
    compute_cllr, compute_min_dcf, per_attack_eer, read_scores, write_scores, DcfParams, Key, ScoreSet,
};
use nes2net_core::models::Model;
use nes2net_core::profile::{profile, verify_counts};
use nes2net_core::rng::{derive_seed, uniform_tensor};
use nes2net_core::train::{
    average_checkpoints, evaluate, synth_generate, train, Checkpoint, EpochLog, Split, TrainConfig,
};
use nes2net_core::{GradFault, OpKind};

use crate::{Command, Failure, Format};

type Result<T = ()> = std::result::Result<T, Failure>;

/// Largest relative gradient error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub fn run(cmd: Command) -> Result {
    match cmd {
        Command::Profile { config, frames, format, verify } => cmd_profile(&config, frames, format, verify),
        Command::Gradcheck { config, seed, eps, frames, max_params, fault } => {
            cmd_gradcheck(&config, seed, eps, frames, max_params, fault.as_deref())
        }
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Score { checkpoint, config, split, seed, out } => cmd_score(&checkpoint, &config, &split, seed, &out),
        Command::Eval { scores, p_target, c_miss, c_fa } => cmd_eval(&scores, DcfParams { p_target, c_miss, c_fa }),
        Command::Avg { checkpoints, out } => cmd_avg(&checkpoints, &out),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::compute(format!("{}: {e}", path.display()))
}

/// Seeds for each consumer of a run seed.
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub train: u64,
}

impl Seeds {
    pub fn new(run: u64) -> Self {
        Self {
            model: derive_seed(run, "model"),
            data: derive_seed(run, "data"),
            train: derive_seed(run, "train"),
        }
    }
}

fn cmd_profile(path: &Path, frames: Option<usize>, format: Format, verify: bool) -> Result {
    let cfg = RunConfig::load(path)?;
    let frames = frames.unwrap_or(cfg.eval.frames);
    if frames == 0 {
        return Err(Failure::usage("--frames must be >= 1"));
    }
    let model = Model::<f32>::build(&cfg.model, 0)?;
    let report = profile(&model, frames)?;
    match format {
        Format::Table => print!("{}", report.to_table()),
        Format::Tsv => print!("{}", report.to_tsv()),
    }
    if verify {
        let check = verify_counts(&model, frames)?;
        let bad: Vec<String> = check
            .offending()
            .map(|l| format!("{} (analytic {}, instrumented {})", l.layer, l.analytic, l.instrumented))
            .collect();
        if check.max_discrepancy() > 0 {
            return Err(Failure::compute(format!(
                "count mismatch: total analytic {} vs instrumented {}, params {} vs {}; {}",
                check.analytic_total,
                check.instrumented_total,
                check.analytic_params,
                check.store_params,
                bad.join(", ")
            )));
        }
        eprintln!("verified: analytic and instrumented counts agree ({} MACs)", check.instrumented_total);
    }
    Ok(())
}

fn parse_fault(spec: &str) -> Result<GradFault> {
    let (name, factor) = match spec.split_once(':') {
        Some((n, f)) => (n, f.parse().map_err(|_| Failure::usage(format!("bad fault factor {f:?}")))?),
        None => (spec, 1.5),
    };
    let op = OpKind::from_name(name).ok_or_else(|| Failure::usage(format!("unknown op {name:?}")))?;
    Ok(GradFault { op, factor })
}

fn cmd_gradcheck(path: &Path, seed: u64, eps: f64, frames: usize, max_params: usize, fault: Option<&str>) -> Result {
    let cfg = RunConfig::load(path)?;
    if frames == 0 {
        return Err(Failure::usage("--frames must be >= 1"));
    }
    let fault = fault.map(parse_fault).transpose()?;
    let seeds = Seeds::new(seed);
    let model = Model::<f64>::build(&cfg.model, seeds.model)?;
    let n = model.params().num_trainable();
    if n > max_params {
        return Err(Failure::usage(format!(
            "{n} trainable parameters exceed --max-params {max_params}; use a reduced config"
        )));
    }
    let x = uniform_tensor::<f64>(&[cfg.model.input_dim, frames], seed, "gradcheck.input")?;
    let loss = cfg.train.map(|t| t.loss).unwrap_or_default();
    let check = model_grad_check(&model, &x, Key::Spoof, &loss, &GradCheckOptions { eps, fault })?;
    let layers = check.per_layer();
    let width = layers.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    for (layer, err) in &layers {
        let flag = if *err < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("{layer:<width$}  {err:.3e}  {flag}");
    }
    let r = &check.report;
    println!(
        "max relative error {:.3e} over {} coordinates ({} skipped at ReLU kinks)",
        r.max_rel_error, r.checked, r.kink_skips
    );
    let failing: Vec<&str> = layers
        .iter()
        .filter(|(_, e)| *e >= GRADCHECK_TOLERANCE)
        .map(|(l, _)| l.as_str())
        .collect();
    if !failing.is_empty() {
        return Err(Failure::compute(format!(
            "gradient check failed (tolerance {GRADCHECK_TOLERANCE:e}) in: {}",
            failing.join(", ")
        )));
    }
    Ok(())
}

fn training_parts(cfg: &RunConfig) -> Result<(TrainConfig, nes2net_core::train::SyntheticDataConfig)> {
    let train = cfg.train.clone().ok_or_else(|| Failure::usage("config has no [train] section"))?;
    let data = cfg.data.clone().ok_or_else(|| Failure::usage("config has no [data] section"))?;
    Ok((train, data))
}

fn cmd_train(path: &Path, out: &Path, seed: u64) -> Result {
    let cfg = RunConfig::load(path)?;
    let (mut tc, mut dc) = training_parts(&cfg)?;
    let seeds = Seeds::new(seed);
    tc.seed = seeds.train;
    dc.seed = seeds.data;
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;

    let train_set = synth_generate::<f32>(&dc, Split::Train)?;
    let dev_set = synth_generate::<f32>(&dc, Split::Dev)?;
    let model = Model::<f32>::build(&cfg.model, seeds.model)?;

    let log_path = out.join("train.log");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_failure(&log_path, e))?);
    let write_err = |e: std::io::Error| nes2net_core::Error::Io(e);
    writeln!(log, "# seed={seed} config={}", cfg.model.canonical_string()).map_err(|e| io_failure(&log_path, e))?;
    writeln!(log, "{}", EpochLog::HEADER).map_err(|e| io_failure(&log_path, e))?;
    log.flush().map_err(|e| io_failure(&log_path, e))?;
    let outcome = train(model, &train_set, &dev_set, &tc, |entry| {
        println!("{}", entry.to_line());
        writeln!(log, "{}", entry.to_line()).map_err(write_err)?;
        log.flush().map_err(write_err)
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            let _ = writeln!(log, "# aborted: {e}");
            let _ = log.flush();
            return Err(e.into());
        }
    };
    for r in &outcome.top {
        let p = out.join(format!("epoch_{:03}.ckpt", r.log.epoch));
        r.checkpoint.save(&p)?;
    }
    let mut best = Checkpoint::from_model(&outcome.model);
    if let Some(e) = outcome.selected_epoch {
        best.metadata.insert("epoch".into(), e.to_string());
    }
    best.metadata.insert("seed".into(), seed.to_string());
    best.save(&out.join("best.ckpt"))?;
    let summary = match outcome.selected_epoch {
        Some(e) => format!("# selected epoch {e} ({})", tc.selection),
        None => "# no epochs run; best.ckpt holds the initial model".into(),
    };
    let stop = if outcome.stopped_early { "# stopped early\n" } else { "" };
    writeln!(log, "{stop}{summary}").map_err(|e| io_failure(&log_path, e))?;
    log.flush().map_err(|e| io_failure(&log_path, e))?;
    println!("{summary}");
    Ok(())
}

fn cmd_score(ckpt: &Path, path: &Path, split: &str, seed: u64, out: &Path) -> Result {
    let cfg = RunConfig::load(path)?;
    let split: Split = split.parse()?;
    let mut dc = cfg.data.clone().ok_or_else(|| Failure::usage("config has no [data] section"))?;
    dc.seed = Seeds::new(seed).data;
    let checkpoint = Checkpoint::load(ckpt)?;
    let mut model = Model::<f32>::build(&cfg.model, 0)?;
    checkpoint.load_into(&mut model)?;
    let data = synth_generate::<f32>(&dc, split)?;
    let loss = cfg.train.map(|t| t.loss).unwrap_or_default();
    let (scores, _) = evaluate(&model, &data, &loss)?;
    write_scores(&scores, out)?;
    eprintln!("wrote {} scores to {}", scores.len(), out.display());
    Ok(())
}

/// The lines printed by `eval`.
pub fn eval_report(scores: &ScoreSet, dcf: DcfParams) -> nes2net_core::Result<String> {
    let eers = per_attack_eer(scores)?;
    let mut out = format!(
        "trials\t{}\tbonafide\t{}\tspoof\t{}\n",
        scores.len(),
        scores.count(Key::Bonafide),
        scores.count(Key::Spoof)
    );
    out += &format!("eer\t{}\tthreshold\t{}\n", eers.pooled.eer, eers.pooled.threshold);
    for (attack, e) in &eers.per_attack {
        out += &format!("eer[{attack}]\t{}\tthreshold\t{}\n", e.eer, e.threshold);
    }
    out += &format!(
        "min_dcf\t{}\tp_target\t{}\tc_miss\t{}\tc_fa\t{}\n",
        compute_min_dcf(scores, dcf)?,
        dcf.p_target,
        dcf.c_miss,
        dcf.c_fa
    );
    out += &format!("cllr\t{}\n", compute_cllr(scores)?);
    Ok(out)
}

fn cmd_eval(path: &Path, dcf: DcfParams) -> Result {
    dcf.validate()?;
    let scores = read_scores(path)?;
    print!("{}", eval_report(&scores, dcf)?);
    Ok(())
}

fn cmd_avg(paths: &[PathBuf], out: &Path) -> Result {
    let ckpts = paths.iter().map(|p| Checkpoint::load(p)).collect::<nes2net_core::Result<Vec<_>>>()?;
    for (p, c) in paths.iter().zip(&ckpts) {
        let meta: Vec<String> = c
            .metadata
            .iter()
            .filter(|(k, _)| k.as_str() != "config")
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        println!("{}\t{}", p.display(), meta.join(" "));
    }
    let mut avg = average_checkpoints(&ckpts)?;
    let sources: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    avg.metadata.insert("sources".into(), sources.join(","));
    avg.save(out)?;
    println!("averaged {} checkpoints into {}", ckpts.len(), out.display());
    Ok(())
}
