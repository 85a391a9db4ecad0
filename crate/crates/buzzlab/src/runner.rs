//! Experiment harness behind the CLI subcommands: train targets and
//! defenses into bundle directories, run attack campaigns into per-cell
//! CSVs, aggregate the defense-comparison report, render decision-region
//! maps, and run the quick self-check suite.

use crate::attacks::{AttackConfig, Family};
use crate::blackbox::{self, SyntheticSpec};
use crate::bufferviz::{self, GridConfig, OrthMode};
use crate::config::{DataSource, ExperimentConfig, Mode, Pipeline};
use crate::dataio::{self, LabeledDataset};
use crate::defense::{self, BuzzDefense, Variant};
use crate::error::{Error, Result};
use crate::metrics::{self, EvaluationReport};
use crate::models::{self, Classifier, LabelModel, NetworkSpec, TrainConfig};
use crate::seeding;
use crate::tensor::{read_tensors, write_tensors, OptimizerKind};
use std::fs;
use std::path::{Path, PathBuf};

pub fn load_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match &cfg.source {
        DataSource::Synthetic { classes, per_class, side } => {
            let all = dataio::synth_blobs(*classes, *per_class, *side, seeding::derive(cfg.seed, 0xda7a))?;
            if all.len() < cfg.train_count + cfg.test_count {
                return Err(Error::config(format!(
                    "synthetic source yields {} samples, need {}",
                    all.len(),
                    cfg.train_count + cfg.test_count
                )));
            }
            Ok((all.take(cfg.train_count), all.skip(cfg.train_count).take(cfg.test_count)))
        }
        DataSource::Idx { images, labels, test_images, test_labels } => {
            let train = dataio::load_idx(images, labels)?.take(cfg.train_count);
            let test = dataio::load_idx(test_images, test_labels)?.take(cfg.test_count);
            Ok((train, test))
        }
        DataSource::CifarBinary { train, test } => {
            let train = dataio::load_cifar_binary(train)?.take(cfg.train_count);
            let test = dataio::load_cifar_binary(test)?.take(cfg.test_count);
            Ok((train, test))
        }
    }
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed,
    }
}

fn save_classifier(c: &Classifier, preset: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w, ch) = c.spec.input;
    let manifest = format!(
        "[model]\npreset = {}\ninput = {}x{}x{}\nclass_count = {}\n",
        preset, h, w, ch, c.spec.class_count
    );
    fs::write(dir.join("manifest.cfg"), manifest)?;
    write_tensors(&dir.join("weights.bzw"), &c.params)?;
    Ok(())
}

fn load_classifier(dir: &Path) -> Result<Classifier> {
    let raw = crate::config::RawConfig::from_file(&dir.join("manifest.cfg"))?;
    let preset = raw.require("model", "preset")?;
    let class_count: usize = raw.parse_value("model", "class_count")?;
    let input = raw.require("model", "input")?;
    let dims: Vec<usize> = input
        .split('x')
        .map(|v| v.parse().map_err(|_| Error::config(format!("bad input '{}'", input))))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::config(format!("bad input shape '{}'", input)));
    }
    let spec = NetworkSpec::parse_preset(&preset, (dims[0], dims[1], dims[2]), class_count)?;
    let params = read_tensors(&dir.join("weights.bzw"))?;
    let expected = spec.param_shapes()?;
    if expected.len() != params.len() {
        return Err(Error::config(format!(
            "checkpoint in {} holds {} tensors, expected {}",
            dir.display(),
            params.len(),
            expected.len()
        )));
    }
    let label_map = (0..class_count).map(|i| format!("class_{}", i)).collect();
    Ok(Classifier { spec, params, label_map })
}

/// Trains the undefended target plus every configured defense variant and
/// writes each as a bundle directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let (train, _test) = load_data(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let (h, w, c) = train.image_shape();
    let spec = NetworkSpec::parse_preset(&cfg.preset, (h, w, c), train.class_count)?;
    let vanilla = models::train(&spec, &train, &train_config(cfg, seeding::derive(cfg.seed, 0x7a0)))?;
    save_classifier(&vanilla, &cfg.preset, &cfg.out_dir.join("vanilla"))?;
    println!("trained vanilla -> {}", cfg.out_dir.join("vanilla").display());
    for variant in &cfg.variants {
        let tc = train_config(cfg, 0); // per-layer seeds derive inside
        let d = defense::build_buzz(&cfg.profile, &train, *variant, seeding::derive(cfg.seed, 0xd0), &tc)?;
        let dir = cfg.out_dir.join(variant.name());
        defense::save_bundle(&d, &dir)?;
        println!("trained {} ({} layers) -> {}", variant.name(), d.layers.len(), dir.display());
    }
    Ok(())
}

struct Targets {
    vanilla: Classifier,
    defenses: Vec<(String, BuzzDefense)>,
}

fn load_targets(cfg: &ExperimentConfig) -> Result<Targets> {
    let vanilla = load_classifier(&cfg.out_dir.join("vanilla"))?;
    let mut defenses = Vec::new();
    for variant in &cfg.variants {
        let dir = cfg.out_dir.join(variant.name());
        if !dir.exists() {
            return Err(Error::config(format!(
                "bundle {} missing; run the train subcommand first",
                dir.display()
            )));
        }
        defenses.push((variant.name(), defense::load_bundle(&dir)?));
    }
    Ok(Targets { vanilla, defenses })
}

fn cell_filename(defense: &str, family: Family, mode: Mode, pipeline: Pipeline) -> String {
    format!("{}__{}__{}__{}.csv", defense, family.name(), mode.name(), pipeline.name())
}

/// Runs every (defense, attack, mode, pipeline) campaign cell and writes
/// one CSV per cell plus a clean-accuracy table.
pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<()> {
    let (train, test) = load_data(cfg)?;
    let targets = load_targets(cfg)?;
    let campaigns_dir = cfg.out_dir.join("campaigns");
    fs::create_dir_all(&campaigns_dir)?;

    let mut accuracy = String::from("defense,clean_accuracy\n");
    let p_vanilla = metrics::clean_accuracy(&targets.vanilla, &test)?;
    accuracy.push_str(&format!("vanilla,{}\n", p_vanilla));
    let mut cells: Vec<(String, &dyn LabelModel)> = vec![("vanilla".to_string(), &targets.vanilla)];
    for (name, d) in &targets.defenses {
        accuracy.push_str(&format!("{},{}\n", name, metrics::clean_accuracy(d, &test)?));
        cells.push((name.clone(), d));
    }
    fs::write(cfg.out_dir.join("accuracy.csv"), accuracy)?;

    let (h, w, c) = train.image_shape();
    let sub_net = NetworkSpec::parse_preset(&cfg.preset, (h, w, c), train.class_count)?;
    let seed_pool = match cfg.blackbox_seed_count {
        0 => train.len(),
        n => n.min(train.len()),
    };
    let x0: Vec<_> = train.images[..seed_pool].to_vec();

    for (name, target) in &cells {
        let (eval, exhausted) = dataio::split_first_correct(*target, &test, cfg.eval_count)?;
        if eval.is_empty() {
            return Err(Error::invalid(format!("no correctly classified eval samples for {}", name)));
        }
        if exhausted {
            eprintln!(
                "note: only {} correctly classified samples available for {}",
                eval.len(),
                name
            );
        }
        for &family in &cfg.attacks {
            for &mode in &cfg.modes {
                for &pipeline in &cfg.pipelines {
                    let mut atk = AttackConfig::from_profile(
                        family,
                        mode == Mode::Targeted,
                        &cfg.profile.attack,
                    );
                    if let Some(pi) = cfg.penalty_iterations {
                        atk.penalty_iterations = pi;
                    }
                    let spec = SyntheticSpec::new(
                        sub_net.clone(),
                        cfg.profile.blackbox_lambda,
                        cfg.profile.blackbox_rounds,
                        train_config(cfg, 0),
                    )?;
                    let seed = seeding::derive(cfg.seed, cell_seed(name, family, mode, pipeline));
                    let report = match pipeline {
                        Pipeline::Pure => blackbox::pure_blackbox_campaign(
                            *target, &train, &spec, &atk, &eval, seed,
                        )?,
                        Pipeline::Mixed => blackbox::mixed_blackbox_campaign(
                            *target, &x0, &spec, &atk, &eval, seed,
                        )?,
                    };
                    let path = campaigns_dir.join(cell_filename(name, family, mode, pipeline));
                    fs::write(&path, report.csv())?;
                    println!(
                        "{}: alpha = {:.3} ({} samples, {} training queries)",
                        path.file_stem().unwrap().to_string_lossy(),
                        report.success_rate(),
                        report.records.len(),
                        report.training_queries
                    );
                }
            }
        }
    }
    Ok(())
}

fn cell_seed(defense: &str, family: Family, mode: Mode, pipeline: Pipeline) -> u64 {
    // stable per-cell stream id from the cell's human name
    let tag = format!("{}|{}|{}|{}", defense, family.name(), mode.name(), pipeline.name());
    tag.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

fn parse_success_column(csv: &str) -> Result<Vec<bool>> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::invalid("empty campaign file".to_string()))?;
    let success_idx = header
        .split(',')
        .position(|c| c == "success")
        .ok_or_else(|| Error::invalid("campaign file lacks a success column".to_string()))?;
    lines
        .map(|l| {
            let field = l.split(',').nth(success_idx).ok_or_else(|| {
                Error::invalid(format!("short campaign row '{}'", l))
            })?;
            field
                .parse()
                .map_err(|_| Error::invalid(format!("bad success flag '{}'", field)))
        })
        .collect()
}

/// Aggregates campaign CSVs into the defense-comparison table and the
/// accuracy-versus-score scatter file.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<()> {
    let accuracy_path = cfg.out_dir.join("accuracy.csv");
    let accuracy = fs::read_to_string(&accuracy_path)
        .map_err(|_| Error::config(format!("{} missing; run the attack subcommand first", accuracy_path.display())))?;
    let mut p_of = std::collections::BTreeMap::new();
    for line in accuracy.lines().skip(1) {
        let (name, p) = line
            .split_once(',')
            .ok_or_else(|| Error::invalid(format!("bad accuracy row '{}'", line)))?;
        let p: f64 = p
            .parse()
            .map_err(|_| Error::invalid(format!("bad accuracy value '{}'", line)))?;
        p_of.insert(name.to_string(), p);
    }
    let p = *p_of
        .get("vanilla")
        .ok_or_else(|| Error::invalid("accuracy table lacks the vanilla row".to_string()))?;

    let campaigns_dir = cfg.out_dir.join("campaigns");
    let mut report = EvaluationReport::default();
    let mut names: Vec<PathBuf> = fs::read_dir(&campaigns_dir)
        .map_err(|_| Error::config(format!("{} missing; run the attack subcommand first", campaigns_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |e| e == "csv"))
        .collect();
    names.sort();
    for path in names {
        let stem = path.file_stem().unwrap().to_string_lossy().to_string();
        let parts: Vec<&str> = stem.split("__").collect();
        if parts.len() != 4 {
            continue;
        }
        let (defense, family, mode, pipeline) = (parts[0], parts[1], parts[2], parts[3]);
        let successes = parse_success_column(&fs::read_to_string(&path)?)?;
        let alpha = metrics::attack_success_rate_from_flags(&successes)?;
        let p_d = *p_of
            .get(defense)
            .ok_or_else(|| Error::invalid(format!("no clean accuracy recorded for {}", defense)))?;
        // defenses can only lose clean accuracy relative to the same
        // undefended network; clamp tiny training noise
        let p_eff = p.max(p_d);
        report.push(defense, &format!("{}-{}", family, pipeline), mode, p_eff, p_d, alpha)?;
    }
    if report.rows.is_empty() {
        return Err(Error::invalid("no campaign files found".to_string()));
    }
    fs::write(cfg.out_dir.join("report.csv"), report.csv())?;
    fs::write(cfg.out_dir.join("scatter.csv"), report.scatter_csv())?;
    for row in &report.rows {
        println!(
            "{:>10} {:>12} {:>10}  p={:.2} p_d={:.2} alpha={:.2} delta={:.2}",
            row.defense, row.attack, row.mode, row.p, row.p_d, row.alpha, row.delta
        );
    }
    Ok(())
}

/// Renders one decision-region map per target around the first test
/// sample the undefended network classifies correctly.
pub fn cmd_map(cfg: &ExperimentConfig) -> Result<()> {
    let (_, test) = load_data(cfg)?;
    let targets = load_targets(cfg)?;
    let maps_dir = cfg.out_dir.join("maps");
    fs::create_dir_all(&maps_dir)?;
    let idx = (0..test.len())
        .find(|&i| targets.vanilla.label(&test.images[i]).ok() == Some(test.labels[i]))
        .ok_or_else(|| Error::invalid("no correctly classified sample to map".to_string()))?;
    let image = &test.images[idx];
    let label = test.labels[idx];
    let mut grid = GridConfig::default_for_eps(
        cfg.profile.attack.fgsm_eps,
        image.len(),
        seeding::derive(cfg.seed, 0x9a9),
    );
    grid.nx = cfg.map_grid;
    grid.ny = cfg.map_grid;
    grid.orth = OrthMode::parse(&cfg.orth_mode)?;

    let map = bufferviz::build_map(&targets.vanilla, image, label, &grid)?;
    let path = maps_dir.join("vanilla.ppm");
    bufferviz::render_map(&map, &path)?;
    println!("vanilla: gray fraction {:.3} -> {}", map.gray_fraction(), path.display());
    for (name, d) in &targets.defenses {
        let map = bufferviz::build_map(d, image, label, &grid)?;
        let path = maps_dir.join(format!("{}.ppm", name));
        bufferviz::render_map(&map, &path)?;
        println!("{}: gray fraction {:.3} -> {}", name, map.gray_fraction(), path.display());
    }
    Ok(())
}

/// Small end-to-end determinism run plus fast invariant probes; the whole
/// output tree under out/ is a pure function of the seed.
pub fn cmd_selfcheck(cfg: &ExperimentConfig) -> Result<()> {
    let mut small = cfg.clone();
    small.source = DataSource::Synthetic { classes: 2, per_class: 60, side: 8 };
    small.train_count = 96;
    small.test_count = 24;
    small.eval_count = 8;
    small.epochs = 3;
    small.batch_size = 16;
    small.variants = vec![Variant::Buzz { m: 2 }];
    small.attacks = vec![Family::Fgsm];
    small.modes = vec![Mode::Untargeted];
    small.pipelines = vec![Pipeline::Mixed];
    small.map_grid = 21;
    small.blackbox_seed_count = 16;

    cmd_train(&small)?;
    cmd_attack(&small)?;
    cmd_report(&small)?;
    cmd_map(&small)?;

    // fast invariant probes on top of the end-to-end artifacts
    let (_, d) = metrics::delta(0.93, 0.85, 0.32)?;
    if (d - 0.352).abs() > 1e-12 {
        return Err(Error::invalid("score arithmetic drifted".to_string()));
    }
    let report = fs::read_to_string(small.out_dir.join("report.csv"))?;
    for line in report.lines().skip(1) {
        let f: Vec<f64> = line.split(',').skip(3).map(|v| v.parse().unwrap_or(f64::NAN)).collect();
        let (p, p_d, gamma, alpha, delta) = (f[0], f[1], f[2], f[3], f[4]);
        if (delta - (gamma + (p - gamma) * alpha)).abs() > 1e-12 || (gamma - (p - p_d)).abs() > 1e-12 {
            return Err(Error::invalid(format!("report row fails the score identity: {}", line)));
        }
    }
    println!("selfcheck ok");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RawConfig;

    fn small_cfg(out: &Path) -> ExperimentConfig {
        let raw = RawConfig::parse(&format!(
            "[dataset]\nprofile = synthetic\nsource = synthetic\nclasses = 2\nper_class = 70\nside = 8\n\
             train_count = 100\ntest_count = 30\neval_count = 6\n\
             [network]\npreset = small\nepochs = 3\nbatch_size = 16\n\
             [defense]\nvariants = buzz-2\n\
             [attack]\nfamilies = fgsm\nmodes = untargeted\npipelines = pure, mixed\nseed_count = 16\n\
             [map]\ngrid = 9\n\
             [run]\nseed = 3\nout = {}\n",
            out.display()
        ))
        .unwrap();
        ExperimentConfig::from_raw(&raw).unwrap()
    }

    #[test]
    fn train_attack_report_map_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        cmd_train(&cfg).unwrap();
        assert!(dir.path().join("vanilla/weights.bzw").exists());
        assert!(dir.path().join("buzz-2/manifest.cfg").exists());
        cmd_attack(&cfg).unwrap();
        // one file per (defense, attack, mode, pipeline) cell
        let cells = fs::read_dir(dir.path().join("campaigns")).unwrap().count();
        assert_eq!(cells, 2 * 1 * 1 * 2);
        cmd_report(&cfg).unwrap();
        let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(report.lines().count(), 1 + 4);
        cmd_map(&cfg).unwrap();
        assert!(dir.path().join("maps/vanilla.ppm").exists());
        assert!(dir.path().join("maps/buzz-2.csv").exists());
    }

    #[test]
    fn retrain_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        cmd_train(&cfg).unwrap();
        let first = fs::read(dir.path().join("vanilla/weights.bzw")).unwrap();
        let first_manifest = fs::read(dir.path().join("buzz-2/manifest.cfg")).unwrap();
        cmd_train(&cfg).unwrap();
        assert_eq!(first, fs::read(dir.path().join("vanilla/weights.bzw")).unwrap());
        assert_eq!(first_manifest, fs::read(dir.path().join("buzz-2/manifest.cfg")).unwrap());
    }

    #[test]
    fn report_without_campaigns_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        assert!(matches!(cmd_report(&cfg), Err(Error::Config(_))));
    }
}
