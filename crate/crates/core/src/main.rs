use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use patchdistill::harness::{
    eval_student, generate_planted, load_idx, run_ablation, shapley_comparison, toy_utilities, utility_table,
    write_idx, ExperimentConfig,
};
use patchdistill::image::ImageSample;
use patchdistill::model::ModelCheckpoint;
use patchdistill::patch::{attribute_image, pool_heatmap, AttributionCache, PatchGrid};
use patchdistill::pipeline::{distill, read_distilled, train_teachers, write_distilled, Teachers, IMAGE_GRID};
use patchdistill::utility::{per_sample_gradient, utilities, GradSample};
use patchdistill::model::{BatchReduction, Label};
use patchdistill::{seed, Error};

#[derive(Parser, Debug)]
#[command(name = "patchdistill", version, about = "Patch-level dataset distillation at toy scale")]
struct Cli {
    /// key=value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every other seed is derived from it
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-signal corpus as IDX files
    GenData,
    /// Train the teacher and save early and converged checkpoints
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write per-image attribution heatmaps
    Attribute {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
    /// Distill a dataset
    Distill {
        #[arg(long)]
        data: PathBuf,
        /// Directory with early.ckpt and converged.ckpt; trained when absent
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Gradient norms and losses of the training images as CSV
    Score {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Also compute exact utilities over the first N samples
        #[arg(long)]
        utility: Option<usize>,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
    },
    /// Train students on a distilled dataset and report test accuracy
    Eval {
        #[arg(long)]
        distilled: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the strategy ablation matrix
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Numerical oracles
    Oracle {
        #[command(subcommand)]
        which: Oracle,
    },
}

#[derive(Subcommand, Debug)]
enum Oracle {
    /// Exact vs kernel Shapley values on a random game
    Shapley {
        #[arg(long)]
        d: usize,
    },
    /// Exact utility against its gradient-norm bound on a toy model
    Utility {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

fn require_out(cli: &Cli) -> std::result::Result<PathBuf, Failure> {
    cli.out
        .clone()
        .ok_or_else(|| Failure::Usage("the subcommand requires --out <DIR>".into()))
}

fn experiment(cli: &Cli) -> std::result::Result<ExperimentConfig, Failure> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::from_text(&fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    Ok(base.with_master_seed(cli.seed))
}

fn load_split(data: &Path, split: &str) -> patchdistill::Result<Vec<ImageSample>> {
    load_idx(
        &data.join(format!("{split}-images.idx")),
        &data.join(format!("{split}-labels.idx")),
    )
}

fn load_teachers(dir: &Path) -> patchdistill::Result<Teachers> {
    Ok(Teachers {
        early: ModelCheckpoint::load(&dir.join("early.ckpt"))?,
        converged: ModelCheckpoint::load(&dir.join("converged.ckpt"))?,
    })
}

fn teachers_for(
    dir: &Option<PathBuf>,
    train: &[ImageSample],
    config: &ExperimentConfig,
) -> patchdistill::Result<Teachers> {
    match dir {
        Some(d) => load_teachers(d),
        None => train_teachers(train, &config.distill),
    }
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::GenData => {
            let out = require_out(&cli)?;
            let config = experiment(&cli)?;
            let corpus = generate_planted(&config.planted)?;
            fs::create_dir_all(&out)?;
            write_idx(&corpus.train, &out.join("train-images.idx"), &out.join("train-labels.idx"))?;
            write_idx(&corpus.test, &out.join("test-images.idx"), &out.join("test-labels.idx"))?;
            for (name, boxes) in [("train", &corpus.train_boxes), ("test", &corpus.test_boxes)] {
                let mut text = String::from("id\ttop\tleft\theight\twidth\n");
                for (i, b) in boxes.iter().enumerate() {
                    let _ = writeln!(text, "{i}\t{}\t{}\t{}\t{}", b.top, b.left, b.height, b.width);
                }
                fs::write(out.join(format!("{name}-boxes.tsv")), text)?;
            }
            println!("wrote {} train and {} test images to {}", corpus.train.len(), corpus.test.len(), out.display());
        }
        Command::TrainTeacher { data } => {
            let out = require_out(&cli)?;
            let config = experiment(&cli)?;
            let train = load_split(data, "train")?;
            let teachers = train_teachers(&train, &config.distill)?;
            fs::create_dir_all(&out)?;
            teachers.early.save(&out.join("early.ckpt"))?;
            teachers.converged.save(&out.join("converged.ckpt"))?;
            println!(
                "saved checkpoints at epochs {} and {} to {}",
                teachers.early.epoch,
                teachers.converged.epoch,
                out.display()
            );
        }
        Command::Attribute { data, teacher, limit } => {
            let out = require_out(&cli)?;
            let config = experiment(&cli)?;
            let train = load_split(data, "train")?;
            let model = ModelCheckpoint::load(&teacher.join("converged.ckpt"))?;
            fs::create_dir_all(&out)?;
            for sample in train.iter().take(*limit) {
                let grid = PatchGrid::new(sample.pixels.height(), sample.pixels.width(), IMAGE_GRID, IMAGE_GRID)?;
                let kernel_seed = seed::split(config.distill.seed, "kernel", 0);
                let (phi, _) = attribute_image(
                    sample,
                    grid,
                    &model,
                    config.distill.game,
                    config.distill.attribution,
                    seed::split(kernel_seed, "kernel", sample.id as u64),
                )?;
                let heatmap = pool_heatmap(&phi, &grid)?;
                fs::write(out.join(format!("{}.txt", sample.id)), heatmap.to_text())?;
                let mut pgm = Vec::new();
                heatmap.to_image(8).write_pgm(&mut pgm)?;
                fs::write(out.join(format!("{}.pgm", sample.id)), pgm)?;
            }
            println!("wrote {} heatmaps to {}", limit.min(&train.len()), out.display());
        }
        Command::Distill { data, teacher } => {
            let out = require_out(&cli)?;
            let config = experiment(&cli)?;
            let train = load_split(data, "train")?;
            let teachers = teachers_for(teacher, &train, &config)?;
            let (ds, stats) = distill(&train, &teachers, &config.distill, &AttributionCache::new())?;
            write_distilled(&ds, &out)?;
            println!(
                "distilled {} images ({} patches) from {} unique candidates into {}",
                ds.images.len(),
                ds.patch_count(),
                stats.unique_candidates,
                out.display()
            );
        }
        Command::Score { data, teacher, utility, eta } => {
            let out = require_out(&cli)?;
            let train = load_split(data, "train")?;
            let model = ModelCheckpoint::load(&teacher.join("converged.ckpt"))?;
            let grads: Vec<(GradSample, f64)> = train
                .iter()
                .map(|s| {
                    let label = Label::Hard(s.label);
                    let g = per_sample_gradient(&model, s.id, &s.pixels, &label)?;
                    Ok((g, model.loss(&model.fit_input(&s.pixels)?, &label)?))
                })
                .collect::<patchdistill::Result<_>>()?;
            let n_util = utility.unwrap_or(0).min(grads.len());
            let scoring: Vec<GradSample> = grads[..n_util].iter().map(|(g, _)| g.clone()).collect();
            let utils = if n_util > 0 {
                utilities(&scoring, *eta, BatchReduction::Sum)?
            } else {
                Vec::new()
            };
            let mut csv = String::from("sample_id,class,gradnorm,loss,exact_utility,bound\n");
            for (i, (s, (g, loss))) in train.iter().zip(&grads).enumerate() {
                let (u, b) = match utils.get(i) {
                    Some(u) => (format!("{:e}", u.exact_utility), format!("{:e}", u.bound)),
                    None => (String::new(), String::new()),
                };
                let _ = writeln!(csv, "{},{},{:e},{:e},{u},{b}", s.id, s.label, g.norm, loss);
            }
            fs::create_dir_all(&out)?;
            fs::write(out.join("scores.csv"), csv)?;
            println!("scored {} samples into {}", train.len(), out.join("scores.csv").display());
        }
        Command::Eval { distilled, data } => {
            let out = require_out(&cli)?;
            let config = experiment(&cli)?;
            let test = load_split(data, "test")?;
            let ds = read_distilled(distilled)?;
            let report = eval_student("distilled", &ds, &test, &config.student, &config.student_seeds(cli.seed))?;
            let mut tsv = String::from("strategy\tseed\taccuracy\n");
            for (s, a) in report.seeds.iter().zip(&report.accuracies) {
                let _ = writeln!(tsv, "{}\t{s}\t{a:.4}", report.strategy);
            }
            let _ = writeln!(tsv, "{}\tmean\t{:.4}", report.strategy, report.mean());
            let _ = writeln!(tsv, "{}\tstd\t{:.4}", report.strategy, report.std());
            fs::create_dir_all(&out)?;
            fs::write(out.join("report.tsv"), &tsv)?;
            print!("{tsv}");
        }
        Command::Ablate { data, teacher } => {
            let out = require_out(&cli)?;
            let config = experiment(&cli)?;
            let train = load_split(data, "train")?;
            let test = load_split(data, "test")?;
            let teachers = teachers_for(teacher, &train, &config)?;
            let table = run_ablation(
                &train,
                &test,
                &teachers,
                &config.distill,
                &config.student,
                &config.student_seeds(cli.seed),
                &AttributionCache::new(),
            )?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation.tsv"), table.to_tsv())?;
            print!("{}", table.to_tsv());
        }
        Command::Oracle { which } => match which {
            Oracle::Shapley { d } => {
                let cmp = shapley_comparison(*d, cli.seed, &[64, 256, 1024])?;
                print!("{}", cmp.to_text());
            }
            Oracle::Utility { n, eta } => {
                let (_, utils) = toy_utilities(*n, cli.seed, *eta)?;
                print!("{}", utility_table(&utils));
            }
        },
    }
    Ok(())
}
