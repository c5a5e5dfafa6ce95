//! One function per subcommand.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use xfr_core::autodiff::Tape;
use xfr_core::checkpoint;
use xfr_core::data::{generate_pairs, load_image, read_pairs_csv, write_pairs_csv, FaceDataset, PairRecord};
use xfr_core::explain::{generate_saliency, MaskingMode, Threshold};
use xfr_core::gradcheck;
use xfr_core::hiding::{self, calibrate_threshold, encode_all, pair_scores, roc_auc, CurveResult, IndexedPair, Method};
use xfr_core::loss::mse_loss;
use xfr_core::model::FaceModel;
use xfr_core::output;
use xfr_core::synth::{self, SynthConfig};
use xfr_core::train::{train_to_dir, TrainSet};
use xfr_core::Tensor32;

use crate::config::RunConfig;
use crate::{CheckFailed, ExplainArgs, GradcheckArgs, HidingArgs, PairsArgs, ReconstructArgs, SynthArgs, TrainArgs, UsageError, VerifyArgs};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<FaceModel<f32>> {
    Ok(checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?.model)
}

fn load_for(model: &FaceModel<f32>, path: &Path) -> Result<Tensor32> {
    Ok(load_image(path, model.arch.img_ch, model.arch.resolution)?)
}

/// Distinct images of a pair list, in order of first appearance, and pairs indexing them.
pub struct PairImages {
    pub paths: Vec<PathBuf>,
    pub images: Vec<Tensor32>,
    pub pairs: Vec<IndexedPair>,
}

impl PairImages {
    pub fn load(model: &FaceModel<f32>, records: &[PairRecord]) -> Result<Self> {
        let mut index: HashMap<PathBuf, usize> = HashMap::new();
        let mut paths = Vec::new();
        let mut slot = |p: &PathBuf| {
            *index.entry(p.clone()).or_insert_with(|| {
                paths.push(p.clone());
                paths.len() - 1
            })
        };
        let pairs: Vec<IndexedPair> = records
            .iter()
            .map(|r| IndexedPair {
                a: slot(&r.path_a),
                b: slot(&r.path_b),
                matching: r.matching,
            })
            .collect();
        let images = paths.iter().map(|p| load_for(model, p)).collect::<Result<_>>()?;
        Ok(PairImages { paths, images, pairs })
    }
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        identities: args.identities,
        images_per_identity: args.images_per_identity,
        resolution: args.resolution,
        seed: args.seed,
    };
    let usage = |e: xfr_core::Error| UsageError(e.to_string());
    if args.held_out == 0 {
        synth::generate(&args.out, &cfg).map_err(usage)?;
    } else {
        synth::generate_split(&args.out, &cfg, args.held_out).map_err(usage)?;
    }
    println!("wrote {} identities x {} images to {}", cfg.identities, cfg.images_per_identity, args.out.display());
    Ok(())
}

pub fn pairs(args: &PairsArgs) -> Result<()> {
    let ds = FaceDataset::scan(&args.data)?;
    let pairs = generate_pairs(&ds, args.count, args.seed)?;
    write_pairs_csv(&args.out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), args.out.display());
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let ds = FaceDataset::scan(&args.data)?;
    let arch = cfg.model.architecture(ds.identities.len());
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for (path, label) in ds.labelled_images() {
        images.push(load_image(&path, arch.img_ch, arch.resolution)?);
        labels.push(label);
    }
    info!("{} images of {} identities", images.len(), ds.identities.len());
    create_dir(&args.out)?;
    write(&args.out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    ds.write_manifest(args.out.join("dataset.json"))?;
    let mut model = FaceModel::new(arch, cfg.train.seed)?;
    let history = train_to_dir(&mut model, &TrainSet { images, labels }, &cfg.train.to_train_config(), &args.out)?;
    if let Some(last) = history.last() {
        println!(
            "epoch {}: L_id {:.5} L_rec {:.5} total {:.5}",
            last.epoch, last.identity, last.reconstruction, last.total
        );
    }
    Ok(())
}

pub fn verify(args: &VerifyArgs) -> Result<()> {
    let model = load_model(&args.ckpt)?;
    let records = read_pairs_csv(&args.pairs)?;
    let set = PairImages::load(&model, &records)?;
    let refs: Vec<&Tensor32> = set.images.iter().collect();
    let scores = pair_scores(&encode_all(&model, &refs)?, &set.pairs)?;
    let labels: Vec<bool> = records.iter().map(|r| r.matching).collect();
    let (threshold, accuracy) = calibrate_threshold(&scores, &labels);

    create_dir(&args.out)?;
    let mut csv = String::from("path_a,path_b,label,score\n");
    for (r, s) in records.iter().zip(&scores) {
        let _ = writeln!(csv, "{},{},{},{s}", r.path_a.display(), r.path_b.display(), u8::from(r.matching));
    }
    write(&args.out.join("scores.csv"), csv)?;
    let summary = format!("pairs {}\nthreshold {threshold}\naccuracy {accuracy}\nroc_auc {}\n", records.len(), roc_auc(&scores, &labels));
    write(&args.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn explain(args: &ExplainArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let threshold = args.threshold.unwrap_or(cfg.explain.threshold.0);
    let mode = args.mode.unwrap_or(cfg.explain.mode);
    let model = load_model(&args.ckpt)?;
    let a = load_for(&model, &args.img_a)?;
    let b = load_for(&model, &args.img_b)?;
    let e = generate_saliency(&model, &a, &b, threshold, mode)?;

    let dir = &args.out_dir;
    create_dir(dir)?;
    output::save_sidecar(dir.join("h.f32"), &e.saliency.h)?;
    for (name, map) in [("s", &e.saliency.s), ("s_pos", &e.saliency.pos), ("s_neg", &e.saliency.neg)] {
        output::save_map_png(dir.join(format!("{name}.png")), map)?;
        output::save_sidecar(dir.join(format!("{name}.f32")), map)?;
        output::save_overlay(dir.join(format!("overlay_{name}.png")), &a, map)?;
    }
    write(&dir.join("score.txt"), format!("{}\n", e.score))?;
    println!("cosine {}", e.score);
    Ok(())
}

fn write_curve(dir: &Path, r: &CurveResult) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join("curve.csv"), r.curve_csv())?;
    write(&dir.join("auc.txt"), r.auc_text())
}

pub fn hiding_game(args: &HidingArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.hiding.seed = s;
    }
    let game = cfg.hiding.to_game_config();
    game.validate().map_err(|e| UsageError(e.to_string()))?;
    let threshold: Threshold = args.threshold.unwrap_or(cfg.explain.threshold.0);
    let mode: MaskingMode = args.mode.unwrap_or(cfg.explain.mode);

    let mut methods: Vec<Method> = Vec::new();
    for &m in &args.method {
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    if args.check {
        if methods.iter().all(|&m| m == Method::Random) {
            return Err(UsageError("--check compares against the random baseline; pass ours or gradient".into()).into());
        }
        if !methods.contains(&Method::Random) {
            methods.push(Method::Random);
        }
    }

    let model = load_model(&args.ckpt)?;
    let records = read_pairs_csv(&args.pairs)?;
    let set = PairImages::load(&model, &records)?;
    let dataset = args.pairs.file_stem().map_or_else(|| "pairs".to_string(), |s| s.to_string_lossy().into_owned());
    let mut results = Vec::new();
    for &m in &methods {
        info!("{m}: computing {} saliency maps", set.pairs.len());
        let maps = hiding::saliency_maps(&model, &set.images, &set.pairs, m, game.seed, threshold, mode)?;
        let r = hiding::run_hiding_game(&model, &set.images, &set.pairs, &maps, m, &dataset, &game)?;
        write_curve(&args.out.join(m.to_string()), &r)?;
        println!("{m}: AUC {:.2} (unblurred accuracy {:.4})", r.auc, r.unblurred_accuracy);
        results.push(r);
    }

    if args.check {
        let random = results.iter().find(|r| r.method == Method::Random).expect("random baseline evaluated").auc;
        let losers: Vec<String> = results
            .iter()
            .filter(|r| r.method != Method::Random && r.auc <= random)
            .map(|r| format!("{} AUC {:.2} <= random {random:.2}", r.method, r.auc))
            .collect();
        if !losers.is_empty() {
            return Err(CheckFailed(losers.join("; ")).into());
        }
        println!("check passed");
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.instances == 0 {
        bail!(UsageError("--instances must be at least 1".into()));
    }
    let report = gradcheck::run_suite(args.instances, args.seed, args.inject_fault);
    for c in &report.cases {
        let status = if c.passed() { "ok" } else { "FAIL" };
        match &c.error {
            Some(e) => println!("{status:4} {:<20} error: {e}", c.name),
            None => println!("{status:4} {:<20} {:>3} instances  worst rel err {:.2e}", c.name, c.instances, c.worst_rel_err),
        }
    }
    println!("{} cases in {:.2?}", report.cases.len(), report.elapsed);
    if !report.passed() {
        let failed = report.cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect::<Vec<_>>();
        return Err(CheckFailed(format!("gradient mismatch in {}", failed.join(", "))).into());
    }
    Ok(())
}

pub fn reconstruct(args: &ReconstructArgs) -> Result<()> {
    let model = load_model(&args.ckpt)?;
    let image = load_for(&model, &args.img)?;
    let shape = image.shape().to_vec();
    let batch = image.reshape(&[1, shape[0], shape[1], shape[2]])?;
    let recon = model.reconstruct(&model.encode(&batch)?.map)?;
    let tape = Tape::new();
    let mse = mse_loss(tape.constant(recon.clone()), tape.constant(batch))?.value().item();
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    output::save_image(&args.out, &recon.reshape(&shape)?)?;
    println!("mse {mse}");
    Ok(())
}
