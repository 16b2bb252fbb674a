//! detlab command-line front end: world generation, full runs, ablations,
//! split audits, IoU-curve emission and standalone evaluation.
//!
//! All randomness is derived from the resolved configuration, which is
//! echoed to `config.resolved.txt` in the output directory; re-running any
//! command from that echo reproduces every output byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use detlab::adapt::{curves_csv, la_train, LaConfig};
use detlab::config::{self, RunConfig};
use detlab::dataset;
use detlab::detector::{detect, DetectorParams};
use detlab::metrics::{corloc, toy_map};
use detlab::pipeline::{self, report_csv, run, Arm};
use detlab::rng::stream;
use detlab::split::{accumulate_losses, audit_csv, ideal_split, split, SplitMode};

#[derive(Parser)]
#[command(name = "detlab", about = "Noisy-supervision detection laboratory", version)]
struct Cli {
    /// Worker threads for the parallel stages (0 = rayon default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Config file path, or the literal word `defaults`.
    #[arg(long, default_value = "defaults")]
    config: String,
    /// Overrides applied on top of the config, as `section.key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; created if missing.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and persist it.
    GenWorld(CommonArgs),
    /// Run the full iterative pipeline.
    Run(CommonArgs),
    /// Sweep one key over several values and report the final mAP of each run.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Sweep specification: `split_mode=image,instance`, `p=0.2,0.4`,
        /// `modules=baseline,la,ssl,la_ssl,full`, or `t=0,1,2`.
        #[arg(long)]
        sweep: String,
    },
    /// Train the adaptation stage, split the dataset and emit the audit table.
    SplitAudit(CommonArgs),
    /// Emit paired IoU curves with and without the regularization loss.
    IouCurves(CommonArgs),
    /// Evaluate stored detector parameters on the configured worlds.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Parameter file written by `run`.
        #[arg(long)]
        params: PathBuf,
    },
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = if common.config == "defaults" {
        RunConfig::default()
    } else {
        let text = fs::read_to_string(&common.config)
            .with_context(|| format!("reading config {}", common.config))?;
        config::parse(&text)?
    };
    for pair in &common.overrides {
        let (key, value) = pair
            .split_once('=')
            .with_context(|| format!("override `{pair}` is not key=value"))?;
        config::apply(&mut cfg, key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn prepare_out_dir(common: &CommonArgs, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&common.out_dir)
        .with_context(|| format!("creating {}", common.out_dir.display()))?;
    fs::write(common.out_dir.join("config.resolved.txt"), config::resolved(cfg))?;
    Ok(())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen_world(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    prepare_out_dir(common, &cfg)?;
    let world = detlab::generate_world(&cfg.world)?;
    dataset::save_world(&world, &common.out_dir.join("world.txt"))?;
    println!("wrote {} images to {}", world.images.len(), common.out_dir.display());
    Ok(())
}

fn cmd_run(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    prepare_out_dir(common, &cfg)?;
    let outcome = run(&cfg)?;
    write(&common.out_dir.join("reports.csv"), &report_csv(&outcome.reports))?;
    write(&common.out_dir.join("params.txt"), &outcome.params.to_text())?;
    dataset::save_pseudo(&outcome.pseudo, &common.out_dir.join("pseudo.txt"))?;
    if !outcome.ssod_log.is_empty() {
        write(
            &common.out_dir.join("ssod_log.csv"),
            &detlab::ssod::training_log_csv(&outcome.ssod_log),
        )?;
    }
    for r in &outcome.reports {
        println!(
            "t={} mean_iou={:.4} map={:.4} corloc={:.4} labeled_fraction={:.4}",
            r.t, r.mean_iou, r.map, r.corloc, r.labeled_fraction
        );
    }
    Ok(())
}

fn cmd_ablate(common: &CommonArgs, sweep: &str) -> Result<()> {
    let base = load_config(common)?;
    prepare_out_dir(common, &base)?;
    let (key, values) = sweep
        .split_once('=')
        .context("sweep must look like key=v1,v2,...")?;
    let mut out = String::from("key,value,map\n");
    for value in values.split(',') {
        let value = value.trim();
        let map = match key {
            "modules" => {
                let arm = Arm::parse(value)
                    .with_context(|| format!("unknown module arm `{value}`"))?;
                pipeline::run_arm(&base, arm)?
            }
            "t" => {
                let mut cfg = base.clone();
                cfg.iterations = value.parse().context("t values must be integers")?;
                run(&cfg)?.reports.last().expect("reports").map
            }
            "split_mode" => {
                let mut cfg = base.clone();
                config::apply(&mut cfg, "split.mode", value)?;
                run(&cfg)?.reports.last().expect("reports").map
            }
            "p" => {
                let mut cfg = base.clone();
                config::apply(&mut cfg, "split.p", value)?;
                run(&cfg)?.reports.last().expect("reports").map
            }
            other => bail!("unsupported sweep key `{other}`"),
        };
        println!("{key}={value}: map {map:.4}");
        out.push_str(&format!("{key},{value},{map:?}\n"));
    }
    write(&common.out_dir.join("ablation.csv"), &out)?;
    Ok(())
}

fn cmd_split_audit(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    prepare_out_dir(common, &cfg)?;
    let worlds = pipeline::build_worlds(&cfg)?;
    let pseudo = pipeline::initial_pseudo(&worlds, &cfg);
    let mut rng = stream(cfg.seed, "la", 0);
    let la = la_train(
        DetectorParams::zeros(cfg.world.feature_dim, cfg.world.classes),
        &worlds.train,
        &pseudo,
        &cfg.la,
        &mut rng,
    )?;
    let pseudo = detlab::adapt::refine_labels(&la.params, &worlds.train, &cfg.pge)?;
    let records = accumulate_losses(&la.params, &worlds.train, &pseudo, cfg.la.tau_assign)?;
    let result = if cfg.split_mode == SplitMode::Ideal {
        ideal_split(&worlds.train, &pseudo)?
    } else {
        split(&records, cfg.split_mode, cfg.p)
    };
    let audit = audit_csv(&records, &result);
    write(&common.out_dir.join("split_audit.csv"), &audit)?;
    println!(
        "{} instances, {} labeled, audit written to {}",
        records.instances.len(),
        result.labeled.len(),
        common.out_dir.display()
    );
    Ok(())
}

fn cmd_iou_curves(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    prepare_out_dir(common, &cfg)?;
    let worlds = pipeline::build_worlds(&cfg)?;
    let pseudo = pipeline::initial_pseudo(&worlds, &cfg);
    let mut curves = Vec::new();
    for lambda_re in [0.0, cfg.la.lambda_re] {
        let la_cfg = LaConfig { lambda_re, ..cfg.la.clone() };
        let mut rng = stream(cfg.seed, "la", 0);
        let la = la_train(
            DetectorParams::zeros(cfg.world.feature_dim, cfg.world.classes),
            &worlds.train,
            &pseudo,
            &la_cfg,
            &mut rng,
        )?;
        curves.push(la.curve);
    }
    let csv = curves_csv(&curves[0], &curves[1]);
    write(&common.out_dir.join("iou_curves.csv"), &csv)?;
    println!("curves written to {}", common.out_dir.display());
    Ok(())
}

fn cmd_eval(common: &CommonArgs, params_path: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    prepare_out_dir(common, &cfg)?;
    let params = DetectorParams::from_text(
        &fs::read_to_string(params_path)
            .with_context(|| format!("reading {}", params_path.display()))?,
    )?;
    let worlds = pipeline::build_worlds(&cfg)?;
    let eval_dets = worlds
        .eval
        .images
        .iter()
        .map(|img| detect(&params, img, cfg.pge.t_nms))
        .collect::<detlab::Result<Vec<_>>>()?;
    let eval_gt: Vec<_> = worlds.eval.images.iter().map(|i| i.scene.objects.clone()).collect();
    let map = toy_map(&eval_dets, &eval_gt)?;
    let train_dets = worlds
        .train
        .images
        .iter()
        .map(|img| detect(&params, img, cfg.pge.t_nms))
        .collect::<detlab::Result<Vec<_>>>()?;
    let train_gt: Vec<_> = worlds.train.images.iter().map(|i| i.scene.objects.clone()).collect();
    let labels: Vec<_> = worlds.train.images.iter().map(|i| i.scene.image_label.clone()).collect();
    let cl = corloc(&train_dets, &train_gt, &labels);
    let out = format!("map,corloc\n{map:?},{cl:?}\n");
    write(&common.out_dir.join("eval.csv"), &out)?;
    println!("map {map:.4} corloc {cl:.4}");
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .context("building thread pool")?;
    pool.install(|| match &cli.command {
        Command::GenWorld(common) => cmd_gen_world(common),
        Command::Run(common) => cmd_run(common),
        Command::Ablate { common, sweep } => cmd_ablate(common, sweep),
        Command::SplitAudit(common) => cmd_split_audit(common),
        Command::IouCurves(common) => cmd_iou_curves(common),
        Command::Eval { common, params } => cmd_eval(common, params),
    })
}
