use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use clipure_core::attack::Pipeline;
use clipure_core::checkpoint::Checkpoint;
use clipure_core::harness::{self, check_thresholds, ExperimentConfig, RunReport, Session};
use clipure_core::purifier::Purifier;
use clipure_core::riskbench::write_reports_csv;
use clipure_core::zeroshot::{evaluate, Preprocess};
use clipure_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_THRESHOLD: u8 = 4;

/// Zero-shot robustness experiments on procedurally generated glyphs.
///
/// Any config key can be overridden with `--section.key value`, e.g.
/// `--attack.eps 4/255`.
#[derive(Parser, Debug)]
#[command(name = "clipure", version)]
struct Cli {
    /// key = value config file with [section] headers
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train/val/eval splits and write them as checkpoints
    GenData,
    /// Train the dual encoder
    TrainEncoder,
    /// Train the latent diffusion prior (and the encoder if needed)
    TrainPrior {
        /// also train the pixel-space twin
        #[arg(long)]
        pixel: bool,
    },
    /// Zero-shot accuracy on the eval split, optionally purified
    Eval {
        /// purify with this step size before classifying
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Attack the eval split and report robust accuracy
    Attack {
        /// attack through the cosine purifier with this step size
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Purify one eval sample and print its trajectory
    Purify {
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Likelihood-separation and risk-bound terms for all estimators
    Risk,
    /// Step-size sweep on the validation split
    Sweep,
    /// Full pipeline: train, attack, purify, evaluate, risk, timing
    Run,
    /// Print a stored report and check its thresholds
    Report {
        /// report.json, or a run directory containing one
        path: Option<PathBuf>,
    },
}

/// Splits `--section.key value` and `--section.key=value` overrides from
/// the rest of the arguments.
fn split_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Vec<(String, String)>)> {
    let keys = ExperimentConfig::keys();
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(a);
            continue;
        }
        if !keys.contains(&name) {
            return Err(Error::Config(format!("unknown key `{name}`")).into());
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("missing value for --{name}")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn print_report(r: &RunReport) -> bool {
    println!("config_hash        {}", r.config_hash);
    println!("clean accuracy     {:.4}", r.clean_accuracy);
    println!("undefended robust  {:.4}", r.undefended_robust_accuracy);
    println!("selected eta       {}", r.eta_selected);
    for d in &r.defenses {
        println!(
            "{:<18} clean {:.4}  robust {:.4} ({})  direct {:.4}",
            d.name, d.clean_accuracy, d.robust_accuracy, d.attack_mode, d.direct_robust_accuracy
        );
    }
    for k in &r.risk {
        println!("{:<18} kl {:.6}  grad {:.3e}", k.estimator.tag(), k.kl_term, k.grad_norm_term);
    }
    if r.timings.samples > 0 {
        println!("time ratio cos     {:.3}", r.timings.cos_ratio);
        if let Some(d) = r.timings.diff_ratio {
            println!("time ratio diff    {d:.3}");
        }
    }
    let mut ok = true;
    for c in check_thresholds(r) {
        let bound = if c.bound != 0.0 && c.bound.abs() < 1e-4 { format!("{:e}", c.bound) } else { c.bound.to_string() };
        println!("{} {} = {:.4} (bound {bound})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value);
        ok &= c.pass;
    }
    ok
}

fn execute(cli: Cli, overrides: &[(String, String)]) -> anyhow::Result<bool> {
    let cfg = load_config(cli.config.as_deref(), overrides)?;
    if let Command::Report { path } = &cli.command {
        let path = match path {
            Some(p) if p.is_dir() => p.join("report.json"),
            Some(p) => p.clone(),
            None => cfg.run_dir().join("report.json"),
        };
        let report = RunReport::load(&path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(print_report(&report));
    }
    if matches!(cli.command, Command::Run) {
        let report = harness::run(&cfg)?;
        println!("wrote {}", cfg.run_dir().display());
        return Ok(print_report(&report));
    }

    let mut s = Session::new(cfg.clone())?;
    let data = s.datasets()?;
    if matches!(cli.command, Command::GenData) {
        std::fs::create_dir_all(s.dir.join("data"))?;
        for (name, ds) in [("train", &data.train), ("val", &data.val), ("eval", &data.eval)] {
            let mut c = Checkpoint::new(*b"GLYD", ds.image_shape().iter().product());
            c.meta.insert("config_hash".into(), cfg.hash());
            c.meta.insert("classes".into(), ds.class_names.join(","));
            c.layers.push(("images".into(), ds.flat_images()));
            let labels: Vec<f32> = ds.labels.iter().map(|&l| l as f32).collect();
            c.layers.push(("labels".into(), clipure_core::Tensor::row(&labels)?));
            let path = s.dir.join("data").join(format!("{name}.ckpt"));
            c.save(&path)?;
            println!("{name}: {} samples, class counts {:?} -> {}", ds.len(), ds.class_histogram(), path.display());
        }
        return Ok(true);
    }

    let (enc, curve) = s.encoder(&data)?;
    let bank = s.bank(&enc, &data)?;
    let eval_x = data.eval.flat_images();
    let labels = &data.eval.labels;
    match cli.command {
        Command::TrainEncoder => {
            if let Some(last) = curve.last() {
                println!("final contrastive loss {last:.4} after {} epochs", curve.len());
            }
        }
        Command::TrainPrior { pixel } => {
            let (_, loss) = s.prior(&enc, &bank, &data)?;
            println!(
                "prior loss initial {:.4} first epoch {:.4} final {:.4}",
                loss.initial, loss.first_epoch, loss.final_epoch
            );
            if pixel {
                s.pixel_prior(&data)?;
            }
        }
        Command::Eval { eta } => {
            let pc = cfg.purify_config(eta.unwrap_or(cfg.purify.eta), 0.0);
            let p = Purifier::new(&pc, &bank, None)?;
            let pre = eta.map(|_| &p as &dyn Preprocess<f32>);
            let ev = evaluate(&enc, &bank, &eval_x, labels, pre)?;
            println!("accuracy {:.4} on {} samples", ev.accuracy, labels.len());
        }
        Command::Attack { eta } => {
            let pc = cfg.purify_config(eta.unwrap_or(cfg.purify.eta), 0.0);
            let p = Purifier::new(&pc, &bank, None)?;
            let plain = Pipeline::new(&enc, &bank);
            let (pipe, pre) = match eta {
                Some(_) => (plain.with_purifier(p, cfg.attack.mode), Some(&p as &dyn Preprocess<f32>)),
                None => (plain, None),
            };
            let adv = s.attack(&pipe, &data.eval, cfg.attack.eps, cfg.attack.eot_samples)?;
            let ev = evaluate(&enc, &bank, &adv.x_adv, labels, pre)?;
            println!(
                "robust accuracy {:.4} at eps {:.6} ({} norm, max distance {:.6})",
                ev.accuracy,
                cfg.attack.eps,
                cfg.attack.norm,
                clipure_core::attack::max_distance(&eval_x, &adv.x_adv, cfg.attack.norm)
            );
        }
        Command::Purify { sample, eta } => {
            if sample >= data.eval.len() {
                bail!(Error::Config(format!("sample {sample} outside the eval split")));
            }
            let pc = cfg.purify_config(eta.unwrap_or(cfg.purify.eta), 0.0);
            let p = Purifier::new(&pc, &bank, None)?;
            let z = enc.encode_images(&eval_x.select_rows(&[sample]))?;
            let (_, trace) = p.purify_traced(z.row_slice(0), sample)?;
            println!("sample {sample} true {}", labels[sample]);
            println!("step,cos_to_blank,pred");
            for t in trace {
                println!("{},{:.6},{}", t.step, t.cos_to_blank, t.pred);
            }
        }
        Command::Risk => {
            let (prior, _) = s.prior(&enc, &bank, &data)?;
            let pixel = s.pixel_prior(&data)?;
            let plain = Pipeline::new(&enc, &bank);
            let adv = s.attack(&plain, &data.eval, cfg.attack.eps, 1)?;
            let (reports, _, ordering) = harness::risk_stage(&cfg, &enc, &bank, &prior, &pixel, &eval_x, &adv.x_adv)?;
            write_reports_csv(std::io::stdout().lock(), &reports)?;
            if let Some(o) = ordering {
                println!(
                    "kl(latent-cos) - kl(pixel-elbo): 5% bootstrap quantile {:.6} ({})",
                    o.lower_quantile,
                    if o.confident { "confident" } else { "not confident" }
                );
            }
        }
        Command::Sweep => {
            let rows = s.eta_sweep(&enc, &bank, &data.val)?;
            println!("eta,val_clean_accuracy,val_robust_accuracy");
            for r in rows {
                println!("{},{:.4},{:.4}", r.eta, r.val_clean_accuracy, r.val_robust_accuracy);
            }
        }
        Command::GenData | Command::Run | Command::Report { .. } => unreachable!("handled above"),
    }
    for path in s.save_checkpoints()? {
        println!("wrote {}", path.display());
    }
    Ok(true)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.is_config() => EXIT_CONFIG,
        Some(err) if err.is_numerical() => EXIT_NUMERICAL,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let cli = Cli::parse_from(args);
    match execute(cli, &overrides) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_THRESHOLD),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
