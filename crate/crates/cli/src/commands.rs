use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use candle_core::{DType, Device};
use vuga::backbone::{load_backbone, write_seeded_weights, BackboneSpec, SwinV2};
use vuga::config::{runs_root, RunConfig};
use vuga::data::synth::{blur_levels, write_blur_dataset};
use vuga::data::{load_manifest, write_manifest, DatasetManifest, ErpImage, PreprocessConfig, QualityRecord, Split};
use vuga::eval::{cross_database, ensure_split, evaluate, evaluate_bank, median_over_repeats, train_on_manifest, EvalResult};
use vuga::gmad::{default_tolerance, montage, select_pairs, GmadQuery};
use vuga::model::{ModelConfig, Mode};
use vuga::train::{image_pyramid, Checkpoint, RunDir};

use crate::{ConfigArgs, SplitArg, SweepKind};

/// Misuse of the command line or configuration; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() || matches!(e.downcast_ref::<vuga::Error>(), Some(vuga::Error::Config { .. })) {
        2
    } else {
        1
    }
}

fn overrides(args: &ConfigArgs) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    push("resolution", args.resolution.map(|v| v.to_string()));
    push("seed", args.seed.map(|v| v.to_string()));
    push("epochs", args.epochs.map(|v| v.to_string()));
    push("batch_size", args.batch_size.map(|v| v.to_string()));
    push("lr", args.lr.map(|v| v.to_string()));
    push("backbone", args.backbone.clone());
    push("backbone_weights", args.backbone_weights.as_ref().map(|p| p.display().to_string()));
    Ok(out)
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let ov = overrides(args)?;
    RunConfig::layered(args.config.as_deref(), &ov).map_err(|e| match e {
        vuga::Error::Parse { .. } | vuga::Error::Io { .. } => anyhow::Error::new(Usage(e.to_string())),
        other => other.into(),
    })
}

fn backbone(cfg: &ModelConfig, weights: Option<&Path>) -> Result<SwinV2> {
    let path = weights.unwrap_or(&cfg.backbone_weights);
    if !path.exists() {
        bail!(
            "backbone weights {} not found; convert a pretrained checkpoint or run `vuga init-backbone --arch {} --out {}`",
            path.display(),
            cfg.backbone,
            path.display()
        );
    }
    let spec = BackboneSpec::new(&cfg.backbone, path)?;
    Ok(load_backbone(&spec, DType::F32, &Device::Cpu)?)
}

fn prepare_run_dir(dir: &Path, force: bool) -> Result<RunDir> {
    let run = RunDir(dir.to_path_buf());
    if run.last().exists() && !force {
        bail!("run directory {} already holds a finished run; pass --force to replace it", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(run)
}

fn manifest_tag(m: &DatasetManifest) -> String {
    m.name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect()
}

/// Trains one configuration into its run directory and scores the test split.
fn train_run(manifest: &DatasetManifest, cfg: &RunConfig, dir: &Path, force: bool) -> Result<(RunDir, Option<EvalResult>, usize)> {
    let run = prepare_run_dir(dir, force)?;
    fs::write(run.config_snapshot(), cfg.snapshot())?;
    let split = ensure_split(manifest, cfg.train_fraction, cfg.train.seed)?;
    write_manifest(&split, &run.0.join("split.csv"))?;
    let bb = backbone(&cfg.model, None)?;
    let trained = train_on_manifest(&split, &cfg.model, &cfg.train, &bb, Some(&run))?;
    let params = trained.model.params().numel();
    let result = if trained.test_bank.len() >= 5 {
        let r = evaluate_bank(&trained.model, &trained.test_bank, &trained.test_skipped)?;
        r.save(&run.0.join("eval_result.json"))?;
        Some(r)
    } else {
        log::warn!("test split has {} images; skipping held-out evaluation", trained.test_bank.len());
        None
    };
    Ok((run, result, params))
}

pub fn train(manifest: &Path, args: &ConfigArgs, repeats: usize, force: bool) -> Result<()> {
    let cfg = run_config(args)?;
    let m = load_manifest(manifest)?;
    let tag = manifest_tag(&m);
    if repeats == 0 {
        return Err(Usage("--repeats must be at least 1".into()).into());
    }
    if repeats == 1 {
        let (run, result, _) = train_run(&m, &cfg, &cfg.run_dir(&runs_root(), &tag), force)?;
        if let Some(r) = result {
            println!("srcc\t{:.6}\nplcc\t{:.6}", r.srcc, r.plcc);
        }
        println!("run_dir\t{}", run.0.display());
        return Ok(());
    }
    // each repeat draws its own split and initialization from seed + index
    let mut rows = vec!["repeat\tseed\tsrcc\tplcc\trun_dir".to_string()];
    let mut results = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut c = cfg.clone();
        c.train.seed = cfg.train.seed.wrapping_add(r as u64);
        let (run, result, _) = train_run(&m, &c, &c.run_dir(&runs_root(), &tag), force)?;
        let result = result.ok_or_else(|| anyhow!("repeat {r}: test split too small to evaluate"))?;
        rows.push(format!("{r}\t{}\t{:.6}\t{:.6}\t{}", c.train.seed, result.srcc, result.plcc, run.0.display()));
        results.push(result);
    }
    let (s, p) = median_over_repeats(&results)?;
    rows.push(format!("median\t-\t{s:.6}\t{p:.6}\t-"));
    let table = rows.join("\n") + "\n";
    let path = runs_root().join(format!("repeats-{tag}-{}-s{}x{repeats}.tsv", cfg.hash(), cfg.train.seed));
    fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    print!("{table}");
    Ok(())
}

fn newest_run(root: &Path) -> Result<PathBuf> {
    let mut best: Option<(std::time::SystemTime, PathBuf)> = None;
    for entry in fs::read_dir(root).with_context(|| format!("reading {}", root.display()))? {
        let path = entry?.path();
        let last = path.join("ckpt_last");
        if let Ok(meta) = fs::metadata(&last) {
            let t = meta.modified()?;
            if best.as_ref().is_none_or(|(b, _)| t > *b) {
                best = Some((t, path));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| anyhow!(Usage(format!("no finished run under {}", root.display()))))
}

fn resolve_ckpt(ckpt: &str, run_dir: Option<&Path>) -> Result<PathBuf> {
    let direct = PathBuf::from(ckpt);
    if direct.is_file() {
        return Ok(direct);
    }
    let name = match ckpt {
        "best" => "ckpt_best",
        "last" => "ckpt_last",
        _ => return Err(Usage(format!("checkpoint `{ckpt}` is neither a file nor `best`/`last`")).into()),
    };
    let dir = match run_dir {
        Some(d) => d.to_path_buf(),
        None => newest_run(&runs_root())?,
    };
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Usage(format!("{} does not exist", path.display())).into());
    }
    Ok(path)
}

/// Applies the split recorded next to a checkpoint when the manifest has none.
fn with_recorded_split(m: DatasetManifest, ckpt: &Path) -> Result<DatasetManifest> {
    if m.records.iter().all(|r| r.split.is_some()) {
        return Ok(m);
    }
    let recorded = ckpt.parent().map(|d| d.join("split.csv")).filter(|p| p.is_file());
    let Some(path) = recorded else { return Ok(m) };
    let splits: BTreeMap<String, Option<Split>> = load_manifest(&path)?
        .records
        .into_iter()
        .map(|r| (r.image_id, r.split))
        .collect();
    let mut out = m;
    for r in &mut out.records {
        if r.split.is_none() {
            r.split = splits.get(&r.image_id).copied().flatten();
        }
    }
    Ok(out)
}

pub fn eval(
    ckpt: &str,
    manifest: &Path,
    split: SplitArg,
    run_dir: Option<&Path>,
    weights: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let path = resolve_ckpt(ckpt, run_dir)?;
    let checkpoint = Checkpoint::load(&path, &Device::Cpu)?;
    let model = checkpoint.restore(&Device::Cpu)?;
    let bb = backbone(&checkpoint.model_config, weights)?;
    let m = with_recorded_split(load_manifest(manifest)?, &path)?;
    let records: Vec<&QualityRecord> = match split {
        SplitArg::All => m.records.iter().collect(),
        SplitArg::Train => m.subset(Split::Train),
        SplitArg::Test => m.subset(Split::Test),
    };
    if records.is_empty() {
        bail!("manifest {} has no records in the requested split", manifest.display());
    }
    let result = evaluate(&model, &bb, &records, &PreprocessConfig::new(checkpoint.train_config.resolution))?;
    let target = match out {
        Some(p) => p.to_path_buf(),
        None => path.parent().unwrap_or(Path::new(".")).join("eval_result.json"),
    };
    result.save(&target)?;
    for w in &result.warnings {
        log::warn!("{w}");
    }
    println!("srcc\t{:.6}\nplcc\t{:.6}\nresult\t{}", result.srcc, result.plcc, target.display());
    Ok(())
}

pub fn predict(ckpt: &str, run_dir: Option<&Path>, weights: Option<&Path>, images: &[PathBuf]) -> Result<()> {
    let path = resolve_ckpt(ckpt, run_dir)?;
    let checkpoint = Checkpoint::load(&path, &Device::Cpu)?;
    let model = checkpoint.restore(&Device::Cpu)?;
    let bb = backbone(&checkpoint.model_config, weights)?;
    let pre = PreprocessConfig::new(checkpoint.train_config.resolution);
    for image in images {
        let img = ErpImage::open(image)?;
        let score = model
            .forward(&image_pyramid(&img, &bb, &pre)?, Mode::Eval)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?[0];
        let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        println!("{id}\t{score}");
    }
    Ok(())
}

pub fn crossdb(train: &Path, test: &Path, args: &ConfigArgs, force: bool) -> Result<()> {
    let cfg = run_config(args)?;
    let a = load_manifest(train)?;
    let b = load_manifest(test)?;
    let tag = format!("crossdb-{}-{}", manifest_tag(&a), manifest_tag(&b));
    let run = prepare_run_dir(&cfg.run_dir(&runs_root(), &tag), force)?;
    fs::write(run.config_snapshot(), cfg.snapshot())?;
    let bb = backbone(&cfg.model, None)?;
    let result = cross_database(&a, &b, &cfg.model, &cfg.train, &bb, Some(&run))?;
    result.save(&run.0.join("eval_result.json"))?;
    println!("srcc\t{:.6}\nplcc\t{:.6}\nrun_dir\t{}", result.srcc, result.plcc, run.0.display());
    Ok(())
}

/// Reads an eval_result.json or `image_id<TAB>score` lines.
fn read_scores(path: &Path) -> Result<BTreeMap<String, f64>> {
    if path.extension().is_some_and(|e| e == "json") {
        let r = EvalResult::load(path)?;
        return Ok(r.predictions.into_iter().map(|p| (p.image_id, p.pred)).collect());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, score) = line
            .split_once('\t')
            .ok_or_else(|| anyhow!("{}:{}: expected `image_id<TAB>score`", path.display(), i + 1))?;
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| anyhow!("{}:{}: `{score}` is not a number", path.display(), i + 1))?;
        out.insert(id.trim().to_string(), score);
    }
    Ok(out)
}

pub fn gmad(
    defender: &Path,
    attacker: &Path,
    levels: usize,
    tolerance: Option<f64>,
    pairs_per_level: usize,
    images: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let d = read_scores(defender)?;
    let a = read_scores(attacker)?;
    let query = GmadQuery {
        tolerance: tolerance.unwrap_or_else(|| default_tolerance(&d)),
        defender_scores: d,
        attacker_scores: a,
        num_levels: levels,
        pairs_per_level,
    };
    let report = select_pairs(&query)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("gmad_report.json"), serde_json::to_string_pretty(&report)?)?;
    let paths: BTreeMap<String, PathBuf> = match images {
        Some(m) => load_manifest(m)?.records.into_iter().map(|r| (r.image_id, r.path)).collect(),
        None => BTreeMap::new(),
    };
    println!("level\timage_a\timage_b\tdefender_gap\tattacker_gap");
    for (k, p) in report.pairs.iter().enumerate() {
        println!("{}\t{}\t{}\t{:.6}\t{:.6}", p.level, p.image_a, p.image_b, p.defender_gap, p.attacker_gap);
        if let (Some(pa), Some(pb)) = (paths.get(&p.image_a), paths.get(&p.image_b)) {
            let m = montage(&ErpImage::open(pa)?, &ErpImage::open(pb)?, 256)?;
            m.save_png(&out.join(format!("pair_L{}_{k:02}.png", p.level)))?;
        }
    }
    Ok(())
}

pub fn sweep(kind: SweepKind, manifest: &Path, args: &ConfigArgs, resolutions: &[usize], force: bool) -> Result<()> {
    let base = run_config(args)?;
    let m = load_manifest(manifest)?;
    let variants: Vec<(String, RunConfig)> = match kind {
        SweepKind::Resolution => resolutions
            .iter()
            .map(|&r| {
                let mut c = base.clone();
                c.set("resolution", &r.to_string()).map_err(|e| Usage(format!("resolution {r}: {e}")))?;
                c.validate()?;
                Ok((r.to_string(), c))
            })
            .collect::<Result<_>>()?,
        SweepKind::Ablation => {
            let mut out = vec![("full".to_string(), base.clone())];
            for (name, key) in [("w/o CMP", "ablate_cmp"), ("w/o SDA", "ablate_sda"), ("w/o CAE", "ablate_cae")] {
                let mut c = base.clone();
                c.set(key, "true").expect("known key");
                out.push((name.to_string(), c));
            }
            out
        }
    };
    let tag = manifest_tag(&m);
    let mut rows = vec!["variant\tsrcc\tplcc\tparams\trun_dir".to_string()];
    for (name, cfg) in &variants {
        log::info!("sweep variant {name}");
        let (run, result, params) = train_run(&m, cfg, &cfg.run_dir(&runs_root(), &tag), force)?;
        let (s, p) = result.map_or((f64::NAN, f64::NAN), |r| (r.srcc, r.plcc));
        rows.push(format!("{name}\t{s:.6}\t{p:.6}\t{params}\t{}", run.0.display()));
    }
    let kind_name = match kind {
        SweepKind::Resolution => "resolution",
        SweepKind::Ablation => "ablation",
    };
    let table = rows.join("\n") + "\n";
    let path = runs_root().join(format!("sweep-{kind_name}-{tag}-{}-s{}.tsv", base.hash(), base.train.seed));
    fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    print!("{table}");
    Ok(())
}

pub fn init_backbone(arch: &str, seed: u64, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_seeded_weights(arch, seed, out).map_err(|e| match e {
        vuga::Error::Validation(msg) => anyhow::Error::new(Usage(msg)),
        other => other.into(),
    })?;
    println!("{}", out.display());
    Ok(())
}

pub fn synth_blur(out: &Path, name: &str, levels: usize, step: f64, seed: u64, height: usize, width: usize) -> Result<()> {
    if levels < 2 || !(step > 0.0) || height == 0 || width == 0 {
        return Err(Usage("need at least 2 levels, a positive step and a non-empty size".into()).into());
    }
    let (_, csv) = write_blur_dataset(out, name, seed, &blur_levels(levels, step), height, width)?;
    println!("{}", csv.display());
    Ok(())
}
