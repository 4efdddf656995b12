use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use milsample::data::{
    generate_synthetic, read_bag, split_kfold, write_dataset, DatasetManifest, FoldPlan, InstanceBag, Regime,
    SyntheticSpec, DEFAULT_DIFFUSE_SHIFT,
};
use milsample::eval::{auc, bootstrap_ci, format_auc_ci, parse_predictions_csv, predictions_csv, roc_csv, roc_points};
use milsample::interpret::{attention_map, write_heatmap};
use milsample::model::{gradient_check, read_checkpoint, write_checkpoint, ModelConfig};
use milsample::sampling::SamplingPolicy;
use milsample::training::{
    curve_csv, fresh_model, misaligned_model, sweep, train_kfold, two_stage_e2e, E2EConfig, KFoldReport, StageReport,
    TrainConfig, UnfreezeSpec,
};

use crate::settings::{parse_grid, write_meta, Settings};
use crate::{Command, Common, Failure, TrainArgs};

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen {
            common,
            regime,
            witness,
            sep,
            shift,
            bags,
            test_bags,
            size,
            dim,
        } => {
            let regime = match regime.as_str() {
                "focal" => Regime::Focal {
                    witness_rate: witness,
                    separation: sep,
                },
                "diffuse" => Regime::Diffuse {
                    shift: shift.unwrap_or(DEFAULT_DIFFUSE_SHIFT),
                },
                other => {
                    return Err(Failure::Usage(format!(
                        "unknown regime {other:?}; expected focal or diffuse"
                    )))
                }
            };
            let settings = common_settings(&common, TrainConfig::default())?;
            let spec = SyntheticSpec {
                regime,
                bags_per_class: bags,
                bag_size: size,
                feature_dim: dim,
                seed: settings.train.seed,
            };
            gen(&common, &settings, spec, test_bags)
        }
        Command::Train(args) => {
            let settings = train_settings(&args, TrainConfig::default())?;
            train(&args, &settings)
        }
        Command::Sweep { train, grid } => {
            let mut settings = train_settings(&train, TrainConfig::default())?;
            if let Some(grid) = grid {
                settings.grid = parse_grid(&grid)?;
            }
            run_sweep(&train, &settings)
        }
        Command::E2e {
            train,
            resamples,
            jitter,
            unfreeze,
            misalign,
        } => {
            let mut settings = train_settings(&train, E2EConfig::default().stage1)?;
            if let Some(r) = resamples {
                settings.resamples = r;
            }
            if let Some(j) = jitter {
                settings.jitter = j;
            }
            if let Some(u) = unfreeze {
                settings.set("unfreeze", &u)?;
            }
            if misalign.is_some() {
                settings.misalign = misalign;
            }
            settings.k = 1;
            e2e(&train, &settings)
        }
        Command::Eval {
            common,
            predictions,
            resamples,
            level,
        } => {
            let mut settings = common_settings(&common, TrainConfig::default())?;
            if let Some(r) = resamples {
                settings.resamples = r;
            }
            if let Some(l) = level {
                settings.level = l;
            }
            evaluate(&common, &settings, &predictions)
        }
        Command::Heatmap { checkpoint, bag, out } => {
            let ckpt = read_checkpoint(&checkpoint)?;
            let bag = read_bag(&bag)?;
            let map = attention_map(&bag, &ckpt.model)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let (pgm, csv) = write_heatmap(&map, &out)?;
            println!(
                "bag {} predicted class {}: wrote {} and {}",
                map.bag_id,
                map.predicted_class,
                pgm.display(),
                csv.display()
            );
            Ok(())
        }
        Command::Gradcheck {
            seed,
            eps,
            dim,
            bag_size,
            tolerance,
        } => {
            let err = gradient_check(ModelConfig::new(dim), seed, seed.wrapping_add(1), bag_size, eps)?;
            println!("max relative error {err:.3e} (eps {eps:e}, tolerance {tolerance:e})");
            if err < tolerance {
                Ok(())
            } else {
                Err(Failure::Runtime(format!(
                    "gradient check failed: {err:.3e} >= {tolerance:e}"
                )))
            }
        }
    }
}

fn common_settings(common: &Common, base: TrainConfig) -> Result<Settings, Failure> {
    let mut settings = Settings::load(base, common.config.as_deref())?;
    if let Some(seed) = common.seed {
        settings.train.seed = seed;
    }
    Ok(settings)
}

fn train_settings(args: &TrainArgs, base: TrainConfig) -> Result<Settings, Failure> {
    let mut s = common_settings(&args.common, base)?;
    if let Some(k) = args.k {
        s.k = k;
    }
    if let Some(sample) = &args.sample {
        s.train.sampling = sample.parse::<SamplingPolicy>()?;
    }
    if let Some(lr) = args.lr {
        s.train.lr = lr;
    }
    if let Some(n) = args.max_epochs {
        s.train.max_epochs = n;
    }
    if let Some(p) = args.patience {
        s.train.patience = p;
    }
    if let Some(j) = args.jobs {
        s.jobs = j;
    }
    s.train.validate()?;
    if s.jobs == 0 {
        return Err(Failure::Usage("jobs must be at least 1".into()));
    }
    Ok(s)
}

fn log(common: &Common, msg: impl AsRef<str>) {
    if common.verbose {
        eprintln!("{}", msg.as_ref());
    }
}

fn gen(common: &Common, settings: &Settings, spec: SyntheticSpec, test_bags: usize) -> Result<(), Failure> {
    let out = &common.out;
    let dev = generate_synthetic(&spec, "dev")?;
    let test = generate_synthetic(
        &SyntheticSpec {
            bags_per_class: test_bags,
            ..spec.clone()
        },
        "test",
    )?;
    write_dataset(&dev.bags, out, "dev.tsv")?;
    write_dataset(&test.bags, out, "test.tsv")?;
    let mut witness = String::from("bag_id,witness_instances\n");
    for ds in [&dev, &test] {
        for (bag, mask) in ds.bags.iter().zip(&ds.witness) {
            let idx: Vec<String> = mask
                .iter()
                .enumerate()
                .filter(|(_, w)| **w)
                .map(|(i, _)| i.to_string())
                .collect();
            let _ = writeln!(witness, "{},{}", bag.bag_id, idx.join(";"));
        }
    }
    fs::write(out.join("witness.csv"), witness)?;
    let regime = match spec.regime {
        Regime::Focal {
            witness_rate,
            separation,
        } => format!("focal witness={witness_rate} sep={separation}"),
        Regime::Diffuse { shift } => format!("diffuse shift={shift}"),
    };
    write_meta(
        out,
        "gen",
        settings,
        &[
            ("regime", regime),
            ("bags_per_class", spec.bags_per_class.to_string()),
            ("test_bags_per_class", test_bags.to_string()),
            ("bag_size", spec.bag_size.to_string()),
            ("feature_dim", spec.feature_dim.to_string()),
        ],
    )?;
    log(
        common,
        format!(
            "wrote {} dev and {} test bags to {}",
            dev.bags.len(),
            test.bags.len(),
            out.display()
        ),
    );
    Ok(())
}

fn load(path: &Path) -> Result<Vec<InstanceBag>, Failure> {
    DatasetManifest::read(path)
        .and_then(|m| m.load_bags())
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn datasets(args: &TrainArgs) -> Result<(Vec<InstanceBag>, Vec<InstanceBag>), Failure> {
    let dev = load(&args.manifest)?;
    let test = load(&args.test)?;
    log(
        &args.common,
        format!("loaded {} dev and {} test bags", dev.len(), test.len()),
    );
    Ok((dev, test))
}

fn plan(dev: &[InstanceBag], k: usize, seed: u64) -> Result<FoldPlan, Failure> {
    let items: Vec<(String, usize)> = dev.iter().map(|b| (b.bag_id.clone(), b.label)).collect();
    Ok(split_kfold(&items, k, seed)?)
}

fn inputs(args: &TrainArgs) -> Vec<(&'static str, String)> {
    vec![
        ("manifest", args.manifest.display().to_string()),
        ("test", args.test.display().to_string()),
    ]
}

fn write_kfold(dir: &Path, report: &KFoldReport, label: &str) -> Result<(), Failure> {
    for sub in ["curves", "checkpoints", "predictions"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    fs::write(dir.join("summary.csv"), report.summary_csv(label))?;
    fs::write(dir.join("folds.csv"), report.folds_csv())?;
    for f in &report.folds {
        fs::write(
            dir.join("curves").join(format!("fold_{}.csv", f.fold)),
            curve_csv(&f.curve),
        )?;
        write_checkpoint(
            &f.checkpoint,
            &dir.join("checkpoints").join(format!("fold_{}.milc", f.fold)),
        )?;
        fs::write(
            dir.join("predictions").join(format!("fold_{}.csv", f.fold)),
            predictions_csv(&f.test_scores),
        )?;
    }
    Ok(())
}

fn train(args: &TrainArgs, settings: &Settings) -> Result<(), Failure> {
    let (dev, test) = datasets(args)?;
    let plan = plan(&dev, settings.k, settings.train.seed)?;
    let out = &args.common.out;
    write_meta(out, "train", settings, &inputs(args))?;
    let report = train_kfold(&dev, &test, &plan, &settings.train, settings.jobs)?;
    let label = settings.train.sampling.label();
    write_kfold(out, &report, &label)?;
    println!("{}", report.result_row(&label).formatted());
    Ok(())
}

fn dir_name(policy: SamplingPolicy) -> String {
    policy.to_string().replace(':', "_")
}

fn run_sweep(args: &TrainArgs, settings: &Settings) -> Result<(), Failure> {
    let (dev, test) = datasets(args)?;
    let plan = plan(&dev, settings.k, settings.train.seed)?;
    let out = &args.common.out;
    write_meta(out, "sweep", settings, &inputs(args))?;
    let table = sweep(&dev, &test, &plan, &settings.train, &settings.grid, settings.jobs)?;
    for row in &table.rows {
        match &row.outcome {
            Ok(report) => write_kfold(
                &out.join("cells").join(dir_name(row.policy)),
                report,
                &row.policy.label(),
            )?,
            Err(e) => log(&args.common, format!("{} failed: {e}", row.policy.label())),
        }
    }
    fs::write(out.join("summary.csv"), table.csv())?;
    let mut text = table.text();
    if let Some(best) = table.argmax() {
        let _ = writeln!(text, "best: {}", table.rows[best].policy.label());
    }
    fs::write(out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn write_stage(dir: &Path, stage: &StageReport) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("curve.csv"), curve_csv(&stage.curve))?;
    write_checkpoint(&stage.checkpoint, &dir.join("checkpoint.milc"))?;
    fs::write(dir.join("predictions.csv"), predictions_csv(&stage.test_scores))?;
    Ok(())
}

fn e2e(args: &TrainArgs, settings: &Settings) -> Result<(), Failure> {
    if !settings.train.freeze_encoder {
        return Err(Failure::Usage("e2e needs freeze_encoder=true for stage 1".into()));
    }
    let (dev, test) = datasets(args)?;
    let plan = plan(&dev, 1, settings.train.seed)?;
    let split = &plan.folds[0];
    let train: Vec<&InstanceBag> = dev.iter().filter(|b| split.train.contains(&b.bag_id)).collect();
    let dim = dev.first().map(InstanceBag::dim).unwrap_or(0);
    let model = match settings.misalign {
        Some(factor) => misaligned_model(&settings.train, dim, &train, 0, factor)?,
        None => fresh_model(&settings.train, dim, &train)?,
    };
    let cfg = E2EConfig {
        stage1: settings.train.clone(),
        unfreeze: settings.unfreeze.clone().map(|groups| UnfreezeSpec { groups }),
        stage2_jitter: settings.jitter,
        bootstrap: settings.bootstrap(),
    };
    let out = &args.common.out;
    write_meta(out, "e2e", settings, &inputs(args))?;
    let report = two_stage_e2e(model, &dev, &test, split, &cfg)?;
    write_stage(&out.join("stage1"), &report.stage1)?;
    write_stage(&out.join("stage2"), &report.stage2)?;
    fs::write(out.join("summary.csv"), report.summary_csv())?;
    let mut checks = String::new();
    let _ = writeln!(checks, "stage2_lr={}", report.stage2_lr);
    let _ = writeln!(checks, "stage2_init_matches={}", report.stage2_init_matches);
    let _ = writeln!(checks, "stage1_encoder_unchanged={}", report.stage1_encoder_unchanged);
    let _ = writeln!(checks, "stage2_frozen_unchanged={}", report.stage2_frozen_unchanged);
    let _ = writeln!(checks, "stage2_unfrozen_changed={}", report.stage2_unfrozen_changed);
    fs::write(out.join("checks.txt"), checks)?;
    for row in report.rows() {
        println!("{}", row.formatted());
    }
    Ok(())
}

fn evaluate(common: &Common, settings: &Settings, predictions: &Path) -> Result<(), Failure> {
    let set = parse_predictions_csv(&fs::read_to_string(predictions)?)?;
    let value = auc(&set)?;
    let points = roc_points(&set)?;
    let ci = bootstrap_ci(&set, &settings.bootstrap())?;
    let out = &common.out;
    write_meta(
        out,
        "eval",
        settings,
        &[("predictions", predictions.display().to_string())],
    )?;
    fs::write(out.join("roc.csv"), roc_csv(&points))?;
    let positives = set.labels.iter().filter(|&&l| l == 1).count();
    let metrics = format!(
        "auc,ci_lo,ci_hi,level,resamples,redraws,bags,positives\n{value},{},{},{},{},{},{},{positives}\n",
        ci.lo,
        ci.hi,
        settings.level,
        settings.resamples,
        ci.redraws,
        set.len()
    );
    fs::write(out.join("metrics.csv"), metrics)?;
    println!("{}", format_auc_ci(value, ci.lo, ci.hi));
    Ok(())
}
