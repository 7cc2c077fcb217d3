use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use panosfuda::ablation::{self, Preset, FOV_LIST, GAMMA_LIST};
use panosfuda::adapt::{attention_snapshot, evaluate, objective_grad_check, run, AdaptConfig, BankSchedule};
use panosfuda::checks::{check_op, FD_STEP, OPS, REL_TOL};
use panosfuda::config::load_config;
use panosfuda::dataset::{load_benchmark, save_benchmark};
use panosfuda::imageio::{write_confidence, write_labels, write_ppm};
use panosfuda::metrics::miou;
use panosfuda::model::{load_checkpoint, pixel_accuracy, pretrain_source, save_checkpoint, SegNet};
use panosfuda::prototypes::GlobalPrototypeBank;
use panosfuda::pseudo::argmax_onehot;
use panosfuda::sphere::{erp_to_ffp, ffp_rebuild, ErpKind, ErpTensor, TangentProjector};
use panosfuda::synth::{gen_benchmark, gen_panorama, SceneSpec};
use panosfuda::tensor::{ptns, Tensor};

#[derive(Parser)]
#[command(name = "panosfuda", version, about = "Source-free pinhole-to-panorama segmentation adaptation")]
struct Cli {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` file overriding adaptation settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PresetName {
    /// Seconds per run on one core.
    Desk,
    /// Full-size benchmark defaults.
    Full,
}

fn preset(name: PresetName) -> Preset {
    match name {
        PresetName::Desk => Preset::desk(),
        PresetName::Full => Preset {
            bench: Default::default(),
            pretrain: Default::default(),
            adapt: Default::default(),
        },
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetName,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    source_scenes: Option<usize>,
    #[arg(long)]
    views_per_scene: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    target_train: Option<usize>,
    #[arg(long)]
    target_test: Option<usize>,
    #[arg(long)]
    target_h: Option<usize>,
    /// Number of preview images written per split.
    #[arg(long, default_value_t = 4)]
    previews: usize,
}

/// Flags for every adaptation setting; unset flags keep the config value.
#[derive(Args, Default)]
struct AdaptArgs {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    poly_power: Option<f64>,
    #[arg(long)]
    ffp_fov_deg: Option<f64>,
    #[arg(long)]
    tp_rings: Option<usize>,
    #[arg(long)]
    tp_lons: Option<usize>,
    #[arg(long)]
    tp_fov_deg: Option<f64>,
    #[arg(long)]
    tp_patch: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    init_from_source: Option<bool>,
    /// Fold prototypes into the bank once per epoch instead of every step.
    #[arg(long)]
    bank_per_epoch: bool,
    #[arg(long)]
    l_sup: Option<bool>,
    #[arg(long)]
    l_un: Option<bool>,
    #[arg(long)]
    l_ppa: Option<bool>,
    #[arg(long)]
    l_sft: Option<bool>,
    #[arg(long)]
    l_cda: Option<bool>,
    #[arg(long)]
    l_bns: Option<bool>,
}

impl AdaptArgs {
    fn apply(&self, cfg: &mut AdaptConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(gamma, epochs, batch_size, lr, weight_decay, poly_power, ffp_fov_deg, tp_rings, tp_lons, tp_fov_deg, tp_patch, n_max, init_from_source);
        let t = &mut cfg.toggles;
        for (flag, slot) in [
            (self.l_sup, &mut t.sup),
            (self.l_un, &mut t.un),
            (self.l_ppa, &mut t.ppa),
            (self.l_sft, &mut t.sft),
            (self.l_cda, &mut t.cda),
            (self.l_bns, &mut t.bns),
        ] {
            if let Some(v) = flag {
                *slot = v;
            }
        }
        if self.bank_per_epoch {
            cfg.bank_schedule = BankSchedule::PerEpoch;
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetName,
    /// Override of the swept values, comma separated.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Panorama height; must make the width a multiple of 4 * 360 / FoV for
    /// every swept FoV.
    #[arg(long)]
    target_h: Option<usize>,
    #[command(flatten)]
    adapt: AdaptArgs,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic source crops and target panoramas.
    GenData(DataArgs),
    /// Train the source model on the labeled pinhole crops.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
    },
    /// Adapt a target model to the unlabeled panoramas.
    Adapt {
        #[arg(long)]
        data: PathBuf,
        /// Source checkpoint directory.
        #[arg(long)]
        source: PathBuf,
        #[command(flatten)]
        args: AdaptArgs,
        /// Write the confident-pixel map of every epoch.
        #[arg(long)]
        dump_confidence: bool,
        /// Write the final attention maps of the first test panorama.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Per-class IoU and mIoU of a checkpoint on a split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "target_test")]
        split: String,
        /// Evaluate the unshifted renderings of the target panoramas.
        #[arg(long)]
        clean: bool,
    },
    /// Round-trip a panorama through tangent patches and fixed-FoV strips.
    Project {
        /// A `(3, H, 2H)` PTNS image; a generated scene is used when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        tp_patch: usize,
        #[arg(long, default_value_t = 90.0)]
        ffp_fov_deg: f64,
    },
    /// Finite-difference checks of every tape operation and of the full
    /// objective.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 4)]
        objective_seeds: u64,
    },
    /// Sweep the strip FoV.
    AblateFov(SweepArgs),
    /// Sweep the attention-loss weight.
    AblateGamma(SweepArgs),
    /// Sweep the loss combinations.
    AblateLoss(SweepArgs),
}

fn adapt_config(cli: &Cli, base: AdaptConfig, args: &AdaptArgs) -> Result<AdaptConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p, base).with_context(|| format!("reading config {}", p.display()))?,
        None => base,
    };
    args.apply(&mut cfg);
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json_lines<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

fn gen_data(cli: &Cli, a: &DataArgs) -> Result<()> {
    let mut cfg = preset(a.preset).bench;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(classes, source_scenes, views_per_scene, crop, target_train, target_test, target_h);
    cfg.seed = cli.seed.unwrap_or(0);
    let bench = gen_benchmark(&cfg)?;
    save_benchmark(&bench, cfg.classes, &cli.out)?;
    let prev = cli.out.join("previews");
    fs::create_dir_all(&prev)?;
    for (i, (x, l)) in bench.source.iter().take(a.previews).enumerate() {
        write_ppm(prev.join(format!("source_{i:03}.ppm")), x)?;
        write_labels(prev.join(format!("source_{i:03}_label.ppm")), l)?;
    }
    for (i, s) in bench.target_train.iter().take(a.previews).enumerate() {
        write_ppm(prev.join(format!("target_{i:03}.ppm")), &s.image)?;
        write_ppm(prev.join(format!("target_{i:03}_clean.ppm")), &s.clean)?;
        write_labels(prev.join(format!("target_{i:03}_label.ppm")), &s.labels)?;
    }
    println!(
        "{} source crops, {} hold-out, {} target train, {} target test -> {}",
        bench.source.len(),
        bench.source_holdout.len(),
        bench.target_train.len(),
        bench.target_test.len(),
        cli.out.display()
    );
    Ok(())
}

fn pretrain(
    cli: &Cli,
    data: &Path,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    wd: Option<f64>,
) -> Result<()> {
    let (bench, k) = load_benchmark(data)?;
    let mut cfg = Preset::desk().pretrain;
    cfg.classes = k;
    cfg.seed = cli.seed.unwrap_or(0);
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = batch.unwrap_or(cfg.batch_size);
    cfg.lr = lr.unwrap_or(cfg.lr);
    cfg.weight_decay = wd.unwrap_or(cfg.weight_decay);
    let (net, report) = pretrain_source(&bench.source, &cfg)?;
    save_checkpoint(&net, cli.out.join("checkpoint"))?;
    let acc = if bench.source_holdout.is_empty() {
        f64::NAN
    } else {
        pixel_accuracy(&net, &bench.source_holdout)?
    };
    let rows: Vec<_> = report
        .epoch_loss
        .iter()
        .enumerate()
        .map(|(e, l)| json!({"seed": cfg.seed, "epoch": e, "loss": l}))
        .collect();
    write_json_lines(&cli.out.join("pretrain.jsonl"), &rows)?;
    println!("hold-out pixel accuracy {acc:.4}");
    Ok(())
}

fn write_bank(dir: &Path, bank: &GlobalPrototypeBank) -> Result<()> {
    ptns::write_tensor(dir.join("bank.ptns"), &bank.vectors())?;
    let counts: Vec<String> = bank.counts().iter().map(|c| c.to_string()).collect();
    fs::write(dir.join("bank_counts.txt"), counts.join("\n") + "\n")?;
    Ok(())
}

fn adapt(cli: &Cli, data: &Path, source: &Path, args: &AdaptArgs, dump_conf: bool, dump_attn: bool) -> Result<()> {
    let cfg = adapt_config(cli, AdaptConfig::default(), args)?;
    let (bench, k) = load_benchmark(data)?;
    let src = load_checkpoint(source)?;
    if src.classes() != k {
        bail!("source model has {} classes, data has {k}", src.classes());
    }
    fs::create_dir_all(&cli.out)?;
    let conf_dir = cli.out.join("confidence");
    if dump_conf {
        fs::create_dir_all(&conf_dir)?;
    }
    let mut log = fs::File::create(cli.out.join("metrics.jsonl"))?;
    let result = run(&cfg, &src, &bench.target_train, &bench.target_test, &mut |s| {
        writeln!(log, "{}", serde_json::to_string(s.metrics).expect("metrics serialize"))?;
        if dump_conf {
            if let Some(m) = s.last_masks.first() {
                write_confidence(conf_dir.join(format!("epoch_{:03}.pgm", s.metrics.epoch)), m)?;
            }
        }
        Ok(())
    })?;
    save_checkpoint(&result.target, cli.out.join("target"))?;
    save_checkpoint(&result.source, cli.out.join("source_finetuned"))?;
    write_bank(&cli.out, &result.bank)?;
    if dump_attn {
        if let Some(s) = bench.target_test.first() {
            let maps = attention_snapshot(&result.source, &result.target, &s.image, &cfg)?;
            for (name, m) in ["m_sp", "m_sp_prime", "m_ch", "m_ch_prime"].iter().zip(&maps) {
                ptns::write_tensor(cli.out.join(format!("{name}.ptns")), m)?;
            }
        }
    }
    if let Some(m) = result.metrics.last() {
        println!("final mIoU {:.4} (confident fraction {:.3})", m.miou, m.confident_fraction);
    }
    Ok(())
}

fn eval(cli: &Cli, data: &Path, model: &Path, split: &str, clean: bool) -> Result<()> {
    let (bench, _) = load_benchmark(data)?;
    let net = load_checkpoint(model)?;
    let mut samples = match split {
        "target_test" => bench.target_test,
        "target_train" => bench.target_train,
        other => bail!("unknown split '{other}'"),
    };
    if clean {
        for s in &mut samples {
            s.image = s.clean.clone();
        }
    }
    let (cm, m) = evaluate(&net, &samples)?;
    let (ious, _) = miou(&cm)?;
    fs::create_dir_all(&cli.out)?;
    let record = json!({"seed": cli.seed.unwrap_or(0), "split": split, "clean": clean, "miou": m, "iou": ious, "confusion": cm});
    fs::write(cli.out.join("eval.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    if let Some(s) = samples.first() {
        let (logits, _) = net.predict(&Tensor::stack(&[&s.image])?, 1)?;
        let logits = logits.reshape(&logits.shape()[1..])?;
        write_labels(cli.out.join("prediction_000.ppm"), &argmax_onehot(&logits)?)?;
    }
    for (c, iou) in ious.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c}: IoU {v:.4}"),
            None => println!("class {c}: absent"),
        }
    }
    println!("mIoU {m:.4}");
    Ok(())
}

fn project(cli: &Cli, input: Option<&Path>, height: usize, tp_patch: usize, fov: f64) -> Result<bool> {
    let image = match input {
        Some(p) => ptns::read_tensor(p)?,
        None => {
            let spec = SceneSpec::random(cli.seed.unwrap_or(0), 8)?;
            gen_panorama(&spec, height, 2 * height)?.0.into_tensor()
        }
    };
    let erp = ErpTensor::new(image.clone(), ErpKind::Image)?;
    let (h, w) = (erp.height(), erp.width());
    let cfg = AdaptConfig {
        tp_patch,
        ffp_fov_deg: fov,
        ..Default::default()
    };
    let grid = cfg.tangent_grid()?;
    let coverage = grid.check_coverage();
    let proj = TangentProjector::new(&grid, h, w)?;
    let patches = proj.erp_to_tangent(&image)?;
    let (back, _) = proj.tangent_to_erp(&patches)?;
    let tp_err = back.max_abs_diff(&image)?;
    let mean_err = back
        .data()
        .iter()
        .zip(image.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / image.numel() as f64;
    let strips = erp_to_ffp(&erp, fov)?;
    let rebuilt = ffp_rebuild(&strips)?;
    let ffp_exact = rebuilt.tensor() == &image;

    fs::create_dir_all(cli.out.join("patches"))?;
    write_ppm(cli.out.join("erp.ppm"), &image)?;
    write_ppm(cli.out.join("erp_from_tangent.ppm"), &back)?;
    for (i, p) in patches.iter().enumerate() {
        write_ppm(cli.out.join("patches").join(format!("tp_{i:02}.ppm")), p)?;
    }
    for (i, p) in strips.patches.iter().enumerate() {
        write_ppm(cli.out.join("patches").join(format!("ffp_{i:02}.ppm")), p)?;
    }
    println!("tangent grid coverage: {}", if coverage.is_ok() { "ok" } else { "FAILED" });
    println!("ERP -> TP -> ERP: mean abs error {mean_err:.5}, max {tp_err:.5}");
    println!("FFP slice/rebuild bit-exact: {ffp_exact}");
    if let Err(e) = &coverage {
        println!("{e}");
    }
    Ok(coverage.is_ok() && ffp_exact)
}

fn gradcheck(seeds: u64, objective_seeds: u64) -> Result<bool> {
    let mut ok = true;
    for op in OPS {
        let mut worst = 0.0f64;
        let mut fails = 0;
        for s in 0..seeds {
            let r = check_op(op, s)?;
            worst = worst.max(r.max_rel_error);
            fails += usize::from(!r.passed);
        }
        ok &= fails == 0;
        println!("{op:<18} worst rel err {worst:.2e}  {}", if fails == 0 { "ok" } else { "FAILED" });
    }
    let k = 6;
    for s in 0..objective_seeds {
        let src = SegNet::new(k, s)?;
        let tgt = SegNet::new(k, s + 1000)?;
        let spec = SceneSpec::random(s, k)?;
        let (img, _) = gen_panorama(&spec, 16, 32)?;
        let images = Tensor::stack(&[img.tensor()])?;
        let cfg = AdaptConfig {
            tp_patch: 8,
            ..Default::default()
        };
        let probes = [
            (tgt.param_index("stem.conv.weight").unwrap_or(0), 7),
            (tgt.param_index("down2.conv.weight").unwrap_or(0), 11),
            (tgt.param_index("head.weight").unwrap_or(0), 3),
        ];
        let bank = GlobalPrototypeBank::new(k, 32);
        let r = objective_grad_check(&src, &tgt, &images, &bank, &cfg, &probes, FD_STEP, REL_TOL)?;
        ok &= r.passed;
        println!(
            "objective seed {s}: rel err {:.2e}  {}",
            r.max_rel_error,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    Ok(ok)
}

fn sweep(cli: &Cli, a: &SweepArgs, kind: ablation::SweepKind) -> Result<()> {
    let mut p = preset(a.preset);
    if let Some(h) = a.target_h {
        p.bench.target_h = h;
    } else if matches!(kind, ablation::SweepKind::Fov) {
        // the width must split evenly for every FoV in the list
        p.bench.target_h = p.bench.target_h.div_ceil(120) * 120;
    }
    let base = adapt_config(cli, p.adapt.clone(), &a.adapt)?;
    let first = cli.seed.unwrap_or(0);
    let prepared: Vec<_> = (first..first + a.seeds)
        .map(|s| ablation::prepare(&p, s))
        .collect::<panosfuda::Result<_>>()?;
    let (table, name) = match kind {
        ablation::SweepKind::Fov => {
            let v = a.values.clone().unwrap_or(FOV_LIST.to_vec());
            (ablation::ablation_fov(&prepared, &base, &v)?, "fov")
        }
        ablation::SweepKind::Gamma => {
            let v = a.values.clone().unwrap_or(GAMMA_LIST.to_vec());
            (ablation::ablation_gamma(&prepared, &base, &v)?, "gamma")
        }
        ablation::SweepKind::Loss => (ablation::ablation_loss(&prepared, &base, &ablation::loss_grid())?, "loss"),
    };
    fs::create_dir_all(&cli.out)?;
    let text = table.render();
    fs::write(cli.out.join(format!("ablate_{name}.txt")), &text)?;
    fs::write(cli.out.join(format!("ablate_{name}.json")), serde_json::to_string_pretty(&table)? + "\n")?;
    info!("seeds {:?}", table.seeds);
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::GenData(a) => gen_data(&cli, a).map(|_| true),
        Cmd::Pretrain {
            data,
            epochs,
            batch_size,
            lr,
            weight_decay,
        } => pretrain(&cli, data, *epochs, *batch_size, *lr, *weight_decay).map(|_| true),
        Cmd::Adapt {
            data,
            source,
            args,
            dump_confidence,
            dump_attention,
        } => adapt(&cli, data, source, args, *dump_confidence, *dump_attention).map(|_| true),
        Cmd::Eval {
            data,
            model,
            split,
            clean,
        } => eval(&cli, data, model, split, *clean).map(|_| true),
        Cmd::Project {
            input,
            height,
            tp_patch,
            ffp_fov_deg,
        } => project(&cli, input.as_deref(), *height, *tp_patch, *ffp_fov_deg),
        Cmd::Gradcheck { seeds, objective_seeds } => gradcheck(*seeds, *objective_seeds),
        Cmd::AblateFov(a) => sweep(&cli, a, ablation::SweepKind::Fov).map(|_| true),
        Cmd::AblateGamma(a) => sweep(&cli, a, ablation::SweepKind::Gamma).map(|_| true),
        Cmd::AblateLoss(a) => sweep(&cli, a, ablation::SweepKind::Loss).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("invariant checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
