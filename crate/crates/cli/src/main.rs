use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use nightseg_core::datagen::{self, SceneOptions, SceneSpec, StoredSample};
use nightseg_core::eval::{self, palette, ConfusionMatrix};
use nightseg_core::io;
use nightseg_core::trainer::{self, Checkpoint, RunPaths, Stage, TrainConfig};
use nightseg_core::types::{ClassTaxonomy, Domain};
use nightseg_core::ModelBundle;

#[derive(Parser)]
#[command(name = "nightseg", version, about = "Night-time semantic segmentation by day-to-night adaptation")]
struct Cli {
    /// Class taxonomy file (TOML); defaults to the nine synthetic street classes.
    #[arg(long, global = true)]
    taxonomy: Option<PathBuf>,
    /// Worker threads for generation and evaluation; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Warmup,
    Selftrain,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic paired day/night corpus.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_val: usize,
        #[arg(long, default_value_t = 0)]
        n_test: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Maximum day/night translation in pixels.
        #[arg(long, default_value_t = 12.0)]
        pose_shift_max: f64,
        #[arg(long, default_value_t = 5.0)]
        pose_shift_deg: f64,
        /// Keep cars and people in place between the two views.
        #[arg(long)]
        no_resample: bool,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Single-threaded execution for bit-reproducible runs.
        #[arg(long)]
        deterministic: bool,
    },
    /// Write offline pseudo-labels for the training split from a warm-up checkpoint.
    Pseudo {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Self-training config whose `[selftrain]` table sets threshold and classes.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score night predictions on a labelled split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image and write a colour panel.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        panel: PathBuf,
        /// Optional ground-truth label map shown as an extra tile.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Self-train once per tau from the same warm-up weights and pseudo-labels.
    SweepTau {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1.0")]
        taus: Vec<f64>,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// List night/day pairs whose predicted thin-object layouts overlap enough.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 0.5)]
        lor_min: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = match &cli.cmd {
        Cmd::Train { deterministic: true, .. } => 1,
        _ => cli.threads,
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    let tax = match &cli.taxonomy {
        Some(p) => ClassTaxonomy::load(p).with_context(|| format!("reading taxonomy {}", p.display()))?,
        None => ClassTaxonomy::synthetic(),
    };
    match cli.cmd {
        Cmd::Datagen {
            out,
            n_train,
            n_val,
            n_test,
            size,
            pose_shift_max,
            pose_shift_deg,
            no_resample,
            seed,
        } => {
            let opts = SceneOptions {
                height: size,
                width: size,
                pose_shift_max_px: pose_shift_max,
                pose_shift_max_deg: pose_shift_deg,
                resample_dynamic: !no_resample,
                ..SceneOptions::default()
            };
            for (split, n) in [("train", n_train), ("val", n_val), ("test", n_test)] {
                if n == 0 {
                    continue;
                }
                let samples = (0..n)
                    .into_par_iter()
                    .map(|i| datagen::synth_sample(&SceneSpec::random(datagen::split_seed(seed, split, i), &opts)?))
                    .collect::<nightseg_core::Result<Vec<_>>>()?;
                let m = datagen::export_split(&out, split, &samples)?;
                log::info!("{split}: {} samples", m.samples.len());
            }
            tax.save(&out.join("taxonomy.toml"))?;
        }
        Cmd::Train {
            stage,
            config,
            data,
            out,
            resume,
            deterministic: _,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
                None => TrainConfig::default(),
            };
            cfg.stage = match stage {
                StageArg::Warmup => Stage::Warmup,
                StageArg::Selftrain => Stage::Selftrain,
            };
            cfg.validate(&tax)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let t = trainer::run(&cfg, &tax, &RunPaths { data, out: out.clone(), resume })?;
            println!(
                "{}",
                serde_json::json!({
                    "stage": cfg.stage,
                    "steps": t.step,
                    "checkpoint": trainer::checkpoint_dir(&out, t.step),
                    "param_hash": t.bundle.store.hash_all(),
                })
            );
        }
        Cmd::Pseudo { ckpt, data, out, config } => {
            let cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            cfg.selftrain.validate(&tax)?;
            let bundle = load_bundle(&ckpt)?;
            let samples = datagen::load_split(&data, "train", &tax)?;
            let side = trainer::generate_pseudo(&bundle, &samples, &tax, &cfg.selftrain, &out)?;
            println!("{}", serde_json::to_string_pretty(&side)?);
        }
        Cmd::Eval { ckpt, data, split, out } => {
            let bundle = load_bundle(&ckpt)?;
            let samples = labelled_split(&data, &split, &tax)?;
            let cm = samples
                .par_iter()
                .map(|s| eval::evaluate_night(&bundle, std::slice::from_ref(s)))
                .try_reduce(|| ConfusionMatrix::new(tax.num_classes()), |mut a, b| {
                    a.merge(&b);
                    Ok(a)
                })?;
            let miou = cm.miou()?;
            let mut rec = serde_json::json!({
                "split": split,
                "samples": samples.len(),
                "param_hash": bundle.store.hash_all(),
                "per_class": tax.names.iter().zip(&miou.per_class).collect::<std::collections::BTreeMap<_, _>>(),
                "miou": miou.mean,
                "confusion": cm.counts,
            });
            rec["checkpoint"] = serde_json::json!(ckpt);
            let text = serde_json::to_string_pretty(&rec)?;
            match out {
                Some(p) => io::write_atomic(&p, text.as_bytes())?,
                None => println!("{text}"),
            }
        }
        Cmd::Infer {
            ckpt,
            image,
            panel,
            labels,
        } => {
            let bundle = load_bundle(&ckpt)?;
            let x = io::load_image(&image, Domain::Night)?;
            let pred = eval::predict_labels(&bundle, &x);
            let gt = labels.as_deref().map(io::load_labels).transpose()?;
            let mut maps = vec![&pred];
            maps.extend(gt.as_ref());
            let (w, h) = eval::render_panel(&panel, &x, &maps, &palette(tax.num_classes()))?;
            println!("{}", serde_json::json!({ "panel": panel, "width": w, "height": h }));
        }
        Cmd::SweepTau {
            config,
            data,
            out,
            taus,
            split,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            cfg.stage = Stage::Selftrain;
            cfg.validate(&tax)?;
            let train = datagen::load_split(&data, "train", &tax)?;
            let val = labelled_split(&data, &split, &tax)?;
            let rows = eval::sweep_tau(&cfg, &taus, &tax, &train, &val, &out)?;
            let text = serde_json::to_string_pretty(&rows)?;
            io::write_atomic(&out.join("tau_sweep.json"), text.as_bytes())?;
            println!("{text}");
        }
        Cmd::Retrieve {
            ckpt,
            data,
            split,
            lor_min,
            out,
        } => {
            if !(0.0..=1.0).contains(&lor_min) {
                bail!("--lor-min must lie in [0, 1]");
            }
            let bundle = load_bundle(&ckpt)?;
            let samples = datagen::load_split(&data, &split, &tax)?;
            let pairs = eval::retrieve(&bundle, &tax, &samples, lor_min)?;
            let text = serde_json::to_string_pretty(&pairs)?;
            match out {
                Some(p) => io::write_atomic(&p, text.as_bytes())?,
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(ck.bundle(&ck.arch)?)
}

fn labelled_split(root: &Path, split: &str, tax: &ClassTaxonomy) -> Result<Vec<StoredSample>> {
    let samples = datagen::load_split(root, split, tax)?;
    if samples.iter().any(|s| s.y_night.is_none()) {
        bail!("split `{split}` has no night labels");
    }
    Ok(samples)
}
