use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use videopure::attack::save_adversarial;
use videopure::harness::{
    craft_input, emit_ablation_plot, emit_plots, generate_data, run_ablation, run_matrix, select_clips, write_report,
    AblationKnob, EvalReport, ExperimentConfig, Stack,
};
use videopure::nn::train::{train_autoencoder, train_classifier, train_epsilon_model};
use videopure::nn::{Autoencoder, LatentCodec, Model};
use videopure::video::{LabeledClip, Split};

#[derive(Parser)]
#[command(name = "videopure", version, about = "Diffusion purification against video adversarial attacks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the train/test splits described by the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's data_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the noise-prediction network (in the autoencoder latent space when one is configured).
    TrainDiffusion {
        #[arg(long)]
        config: PathBuf,
    },
    TrainClassifier {
        #[arg(long)]
        config: PathBuf,
    },
    TrainAe {
        #[arg(long)]
        config: PathBuf,
    },
    /// Craft adversarial clips for one defense/attack pair of the config and save them.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Index into the config's defenses.
        #[arg(long, default_value_t = 0)]
        defense: usize,
        /// Index into the config's attacks.
        #[arg(long, default_value_t = 1)]
        attack: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the defense × attack matrix and write results.json, summary.csv and plots.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sweep one VideoPure knob: t_star, alpha_s, single_step_k, losses or zt_replace.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        knob: String,
        /// Comma-separated values for numeric knobs.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Redraw plots from an existing results.json.
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn splits(cfg: &ExperimentConfig) -> Result<(Vec<LabeledClip>, Vec<LabeledClip>)> {
    Ok((cfg.clips(Split::Train)?, cfg.clips(Split::Test)?))
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => {
            let cfg = load(&config)?;
            let dir = out.or(cfg.data_dir.clone()).unwrap_or_else(|| cfg.output_dir.join("data"));
            generate_data(&cfg.dataset, &dir)?;
            println!("wrote {}", dir.display());
        }
        Cmd::TrainClassifier { config } => {
            let cfg = load(&config)?;
            let (train, test) = splits(&cfg)?;
            let (m, r) = train_classifier(&train, &test, &cfg.training.classifier)?;
            ensure_parent(&cfg.checkpoints.classifier)?;
            m.save(&cfg.checkpoints.classifier, &r)?;
            println!("held-out accuracy {:.4}", r.held_out_accuracy.unwrap_or(f64::NAN));
        }
        Cmd::TrainAe { config } => {
            let cfg = load(&config)?;
            let Some(path) = cfg.checkpoints.autoencoder.clone() else {
                bail!("config has no checkpoints.autoencoder path");
            };
            let (train, test) = splits(&cfg)?;
            let (m, r) = train_autoencoder(&train, &test, &cfg.training.autoencoder)?;
            ensure_parent(&path)?;
            m.save(&path, &r)?;
            println!("reconstruction MAE {:.4}", r.reconstruction_mae.unwrap_or(f64::NAN));
        }
        Cmd::TrainDiffusion { config } => {
            let cfg = load(&config)?;
            let (train, test) = splits(&cfg)?;
            let codec = match &cfg.checkpoints.autoencoder {
                Some(p) => LatentCodec::Autoencoder(Box::new(Autoencoder::load(p)?)),
                None => LatentCodec::Identity,
            };
            let sched = cfg.schedule.build()?;
            let (m, r) = train_epsilon_model(&train, &test, &codec, sched.base(), &cfg.training.diffusion)?;
            ensure_parent(&cfg.checkpoints.epsilon_model)?;
            m.save(&cfg.checkpoints.epsilon_model, &r)?;
            println!("held-out noise MSE {:.4}", r.held_out_eps_mse.unwrap_or(f64::NAN));
        }
        Cmd::Attack { config, defense, attack, out } => {
            let mut cfg = load(&config)?;
            let (Some(d), Some(a)) = (cfg.defenses.get(defense).cloned(), cfg.attacks.get(attack).copied()) else {
                bail!("defense index {defense} or attack index {attack} out of range");
            };
            cfg.defenses = vec![d.clone()];
            let stack = Stack::load(&cfg)?;
            let purifier = stack.defense(&d)?;
            let clips = select_clips(&cfg.clips(Split::Test)?, cfg.clips_per_class, cfg.seed)?;
            let mut adv = Vec::with_capacity(clips.len());
            for c in &clips {
                let (x, _) = craft_input(purifier.as_ref(), &stack.classifier, c, &a, cfg.seed, false)?;
                adv.push(LabeledClip::new(c.clip_id.clone(), c.label, x, c.flow.clone())?);
            }
            ensure_parent(&out)?;
            save_adversarial(&adv, &a.config, &format!("{}/{}", d.label(), a.label()), &out)?;
            println!("wrote {} clips to {}", adv.len(), out.display());
        }
        Cmd::Eval { config } => {
            let cfg = load(&config)?;
            let report = run_matrix(&cfg)?;
            for p in write_report(&report, &cfg.output_dir)? {
                println!("wrote {}", p.display());
            }
            print!("{}", report.to_csv());
        }
        Cmd::Ablate { config, knob, values } => {
            let cfg = load(&config)?;
            let knob: AblationKnob = knob.parse()?;
            let report = run_ablation(&cfg, knob, values.as_deref())?;
            let dir = cfg.output_dir.clone();
            std::fs::create_dir_all(&dir)?;
            let stem = format!("ablation_{}", serde_json::to_value(knob)?.as_str().unwrap_or("knob"));
            videopure::container::write_atomic(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(&report)?)?;
            videopure::container::write_atomic(&dir.join(format!("{stem}.csv")), report.to_csv().as_bytes())?;
            if let Err(e) = emit_ablation_plot(&report, &dir.join("plots")) {
                log::warn!("plotting failed: {e}");
            }
            print!("{}", report.to_csv());
        }
        Cmd::Plot { results, out } => {
            let bytes = std::fs::read(&results).with_context(|| format!("reading {}", results.display()))?;
            let report: EvalReport = serde_json::from_slice(&bytes)?;
            let dir = out.unwrap_or_else(|| results.parent().unwrap_or(Path::new(".")).join("plots"));
            for p in emit_plots(&report, &dir)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
