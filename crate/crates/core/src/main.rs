use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use mmrnet::error::{Error, Result};
use mmrnet::fusion::export_gate_record;
use mmrnet::harness::{
    condition_outputs, evaluate_sets, gate_shift_analysis, ground_truth_index, mc_vs_confidence, modality_ablation,
    predict_all, render_report, scatter_csv, ReportInputs,
};
use mmrnet::mcscore::{mc_report, Aggregation, SceneOutputs};
use mmrnet::model::{load_checkpoint, predict_scene, save_checkpoint, DetectionSet, ModalityCondition, MODALITY_NAMES};
use mmrnet::synthdata::{generate_dataset, write_dataset, DatasetManifest, GeneratorConfig, Split};
use mmrnet::training::{train, TrainConfig, TrainingData};

#[derive(Parser)]
#[command(name = "mmrnet", version, about = "RGB-D detection with soft-gate fusion and consistency scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Flat,
    PerModality,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Flat => Aggregation::Flat,
            AggregationArg::PerModality => Aggregation::PerModality,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic RGB-D dataset.
    GenerateData {
        /// Generator TOML; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the best checkpoint and its log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `<name>.ckpt`, `<name>_log.json` and `<name>_log.jsonl`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Write detection sets for every scene of a split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "both")]
        condition: ModalityCondition,
        #[arg(long)]
        out: PathBuf,
    },
    /// Box and mask AP of a split under one condition.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "both")]
        condition: ModalityCondition,
        /// Merge all classes into one.
        #[arg(long)]
        class_agnostic: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// AP with both inputs, RGB removed and depth removed, plus MC.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Model name shown in reports; defaults to the checkpoint stem.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consistency scores from detection-set files, paired by position.
    McScore {
        #[arg(long = "output", required = true, num_args = 1..)]
        outputs: Vec<PathBuf>,
        #[arg(long = "rgb", required = true, num_args = 1..)]
        rgb: Vec<PathBuf>,
        #[arg(long = "depth", required = true, num_args = 1..)]
        depth: Vec<PathBuf>,
        /// Dataset used for splits and ground-truth IoU.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "flat")]
        aggregation: AggregationArg,
        #[arg(long)]
        out: PathBuf,
        /// Per-class CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// MC against confidence over the train, test and test_novel splits.
    McAnalysis {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "flat")]
        aggregation: AggregationArg,
        /// Output directory for `mc_report.json`, `mc_vs_confidence.json`,
        /// `mc_per_class.csv` and `mc_scatter.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Gate heatmaps of one scene under every condition.
    GateHeatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean gate weights per condition and scale over a split.
    GateShift {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Markdown summary from JSON artifacts.
    Report {
        #[arg(long = "ablation", num_args = 0..)]
        ablations: Vec<PathBuf>,
        #[arg(long)]
        gates: Option<PathBuf>,
        #[arg(long)]
        mc: Option<PathBuf>,
        #[arg(long)]
        confidence: Option<PathBuf>,
        /// Dataset manifest, for class names.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("artifacts serialise");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Missing { path: path.into() });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

fn open_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.exists() {
        return Err(Error::Missing { path: root.into() });
    }
    DatasetManifest::open(root)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { config, out } => {
            let config = match config {
                Some(p) => GeneratorConfig::from_toml(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?,
                None => GeneratorConfig::default(),
            };
            let (manifest, scenes) = generate_dataset(&config)?;
            let manifest = write_dataset(&manifest, &scenes, &out)?;
            for (split, n) in manifest.split_counts() {
                eprintln!("{split}: {n} scenes");
            }
        }
        Command::Train { config, data, out, name } => {
            let config = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            let manifest = open_dataset(&data)?;
            let training = TrainingData::load(&manifest, &config.arch)?;
            let params = mmrnet::ModelParams::new(config.arch, config.seed)?;
            let (best, mut log) = train(&params, &training, &config, &mut |e| {
                let ap: Vec<String> = e.val_box_ap.iter().map(|(c, v)| format!("{c} {v:.3}")).collect();
                eprintln!(
                    "epoch {:>3}  loss {:.4}  val box AP [{}]{}",
                    e.epoch,
                    e.mean_loss,
                    ap.join(", "),
                    if e.best { "  *" } else { "" }
                );
            })?;
            let ckpt = out.join(format!("{name}.ckpt"));
            let metadata = BTreeMap::from([
                ("mode".to_string(), config.mode.as_str().to_string()),
                ("seed".to_string(), config.seed.to_string()),
                ("best_epoch".to_string(), log.best_epoch.to_string()),
                ("dataset_config_hash".to_string(), manifest.config_hash.clone()),
            ]);
            save_checkpoint(&ckpt, &best, &metadata)?;
            log.checkpoint = Some(format!("{name}.ckpt"));
            log.write(&out, &format!("{name}_log"))?;
            eprintln!("best epoch {}; wrote {}", log.best_epoch, ckpt.display());
        }
        Command::Predict { checkpoint, data, split, condition, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let scenes = open_dataset(&data)?.load_split(split)?;
            let thresholds = Default::default();
            for (set, _) in predict_all(&ck.params, &scenes, condition, &thresholds)? {
                set.save(&out.join(format!("{}.{condition}.json", set.scene_id)))?;
            }
            eprintln!("wrote {} detection sets to {}", scenes.len(), out.display());
        }
        Command::Evaluate { checkpoint, data, split, condition, class_agnostic, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let scenes = open_dataset(&data)?.load_split(split)?;
            let sets: Vec<DetectionSet> = predict_all(&ck.params, &scenes, condition, &Default::default())?
                .into_iter()
                .map(|(d, _)| d)
                .collect();
            let ap = evaluate_sets(&sets, &scenes, class_agnostic)?;
            eprintln!("box mAP {:.4}  mask mAP {:.4}", ap.bbox.map, ap.mask.map);
            write_json(&out, &ap)?;
        }
        Command::Ablate { checkpoint, data, split, name, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let scenes = open_dataset(&data)?.load_split(split)?;
            let name = name.unwrap_or_else(|| {
                checkpoint
                    .file_stem()
                    .map_or("model".into(), |s| s.to_string_lossy().into_owned())
            });
            let report = modality_ablation(&ck.params, &scenes, &Default::default(), &name, split.as_str())?;
            eprintln!(
                "box AP both {:.4}  rgb off {:.4} ({:.3}x)  depth off {:.4} ({:.3}x)",
                report.both.ap.bbox.map,
                report.rgb_off.ap.bbox.map,
                report.rgb_off_ratio(),
                report.depth_off.ap.bbox.map,
                report.depth_off_ratio()
            );
            write_json(&out, &report)?;
        }
        Command::McScore { outputs, rgb, depth, data, aggregation, out, csv } => {
            if outputs.len() != rgb.len() || outputs.len() != depth.len() {
                return Err(Error::InvalidArgument(format!(
                    "got {} output, {} rgb and {} depth files; counts must match",
                    outputs.len(),
                    rgb.len(),
                    depth.len()
                )));
            }
            let manifest = data.as_deref().map(open_dataset).transpose()?;
            let mut scenes = Vec::with_capacity(outputs.len());
            for ((o, r), d) in outputs.iter().zip(&rgb).zip(&depth) {
                let output = DetectionSet::load(o)?;
                scenes.push(SceneOutputs {
                    split: manifest.as_ref().and_then(|m| m.split_of(&output.scene_id)),
                    output,
                    rgb: DetectionSet::load(r)?,
                    depth: DetectionSet::load(d)?,
                });
            }
            let gt = match &manifest {
                Some(m) => {
                    let samples = scenes
                        .iter()
                        .map(|s| m.load_scene_by_id(&s.output.scene_id))
                        .collect::<Result<Vec<_>>>()?;
                    Some(ground_truth_index(&samples))
                }
                None => None,
            };
            let report = mc_report(&scenes, gt.as_ref(), aggregation.into())?;
            eprintln!(
                "mask MC {:.2}  box MC {:.2}  over {} detections",
                report.per_modality.mask.combined, report.per_modality.bbox.combined, report.per_modality.detections
            );
            write_json(&out, &report)?;
            if let Some(path) = csv {
                let names = |l: u32| manifest.as_ref().and_then(|m| m.class_name(l)).map(str::to_string);
                write_text(&path, &report.class_csv(&names))?;
            }
        }
        Command::McAnalysis { checkpoint, data, aggregation, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let manifest = open_dataset(&data)?;
            let mut scenes = Vec::new();
            for split in [Split::Train, Split::Test, Split::TestNovel] {
                scenes.extend(manifest.load_split(split)?);
            }
            let outputs = condition_outputs(&ck.params, &scenes, &Default::default())?;
            let report = mc_report(&outputs, Some(&ground_truth_index(&scenes)), aggregation.into())?;
            let comparison = mc_vs_confidence(&report, &["train", "test", "test_novel"])?;
            for s in &comparison.splits {
                eprintln!("{:<10} mask MC {:6.2}  confidence {:6.2}", s.split, s.mask_mc, s.confidence);
            }
            let names = |l: u32| manifest.class_name(l).map(str::to_string);
            write_json(&out.join("mc_report.json"), &report)?;
            write_json(&out.join("mc_vs_confidence.json"), &comparison)?;
            write_text(&out.join("mc_per_class.csv"), &report.class_csv(&names))?;
            write_text(&out.join("mc_scatter.csv"), &scatter_csv(&report))?;
        }
        Command::GateHeatmap { checkpoint, data, scene, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let sample = open_dataset(&data)?.load_scene_by_id(&scene)?;
            for c in ModalityCondition::ALL {
                let (_, record) = predict_scene(&ck.params, &sample, c, &Default::default())?;
                let sidecar = export_gate_record(&record, &MODALITY_NAMES, &out, &format!("{scene}_{c}_"))?;
                let means: Vec<String> = sidecar
                    .mean_weight
                    .iter()
                    .map(|w| format!("{:.3}/{:.3}", w[0], w[1]))
                    .collect();
                eprintln!("{c:<10} rgb/depth per scale: {}", means.join("  "));
            }
        }
        Command::GateShift { checkpoint, data, split, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let scenes = open_dataset(&data)?.load_split(split)?;
            let report = gate_shift_analysis(&ck.params, &scenes, &Default::default(), None)?;
            for (c, w) in &report.mean_weight {
                let depth: Vec<String> = w.iter().map(|v| format!("{:.3}", v[1])).collect();
                eprintln!("{c:<10} mean depth weight per scale: {}", depth.join("  "));
            }
            write_json(&out, &report)?;
        }
        Command::Report { ablations, gates, mc, confidence, manifest, out } => {
            let class_names = match manifest {
                Some(p) => {
                    let m: DatasetManifest = read_json(&p)?;
                    let mut names = Vec::new();
                    for c in &m.classes {
                        let i = c.id as usize;
                        if names.len() <= i {
                            names.resize(i + 1, String::new());
                        }
                        names[i] = c.name.clone();
                    }
                    names
                }
                None => Vec::new(),
            };
            let inputs = ReportInputs {
                ablations: ablations.iter().map(|p| read_json(p)).collect::<Result<_>>()?,
                gates: gates.as_deref().map(read_json).transpose()?,
                mc: mc.as_deref().map(read_json).transpose()?,
                confidence: confidence.as_deref().map(read_json).transpose()?,
                class_names,
            };
            write_text(&out, &render_report(&inputs))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
