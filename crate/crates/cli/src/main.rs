//! `hanet`: label statistics, gradient checks, toy training and attention dumps.
//!
//! Exit status is 0 on success, 1 for invalid input or data and 2 for numerical
//! failures such as divergence or a failed gradient check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hanet_core::io;
use hanet_core::kv::{self, derive_seed};
use hanet_core::scenestats::{
    axis_distribution, component_sizes, distribution_divergence, region_report, Axis, AxisDistribution, Bands,
};
use hanet_core::toyseg::eval::{attention_alignment, mean_attention};
use hanet_core::toyseg::model::{parse_layers, Layer, MODEL_KEYS};
use hanet_core::toyseg::synth::{generating_bands, image_batch};
use hanet_core::toyseg::train::TRAIN_KEYS;
use hanet_core::toyseg::{checkpoint, evaluate, synth_banded, train, Dataset, ToySegConfig, TrainConfig};
use hanet_core::verify::{run_suite, SuiteConfig};
use hanet_core::{CoreError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CITYSCAPES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic_light",
    "traffic_sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

#[derive(Parser)]
#[command(name = "hanet", version, about = "Height-driven attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Class distributions of a directory of label rasters.
    Stats(StatsArgs),
    /// Finite-difference checks of the attention module and the toy segmenter.
    Gradcheck(GradcheckArgs),
    /// Writes a banded synthetic dataset.
    Synth(SynthArgs),
    /// Trains the toy segmenter and evaluates it on the validation split.
    Train(TrainArgs),
    /// Evaluates a checkpoint.
    Eval(EvalArgs),
    /// Dumps attention maps as CSV and PGM.
    Attn(AttnArgs),
}

#[derive(clap::Args)]
struct StatsArgs {
    label_dir: PathBuf,
    #[arg(long, default_value_t = 19)]
    classes: usize,
    /// Number of equal bands or ascending edges such as `0,0.4,1`.
    #[arg(long, default_value = "3")]
    bands: String,
    /// Axis of the positional distribution (`h` or `w`).
    #[arg(long, default_value = "h")]
    axis: String,
    #[arg(long, default_value_t = 16)]
    bins: usize,
    /// Classes shown in the table.
    #[arg(long, default_value_t = 5)]
    top: usize,
    /// File name suffixes to include.
    #[arg(long = "pattern", default_values_t = [".png".to_string(), ".pgm".to_string()])]
    patterns: Vec<String>,
    /// `cityscapes` or a file with one class name per line.
    #[arg(long)]
    names: Option<String>,
    #[arg(long, default_value = "stats")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    /// `key = value` file with `module_cases`, `seed` and `epsilon`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    module_cases: Option<usize>,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 24)]
    width: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Directory holding `train/` and optionally `val/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iteration: Option<usize>,
    /// Overrides one config key, e.g. `--set hanet_layers=none`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A dataset directory, or a directory holding `val/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image whose attention is dumped.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Dataset whose mean attention and class distribution are dumped.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long = "layer", required = true)]
    layers: Vec<String>,
    /// Also score the L5 peaks against the synthetic generator's bands.
    #[arg(long)]
    synth_bands: bool,
    #[arg(long, default_value_t = 8)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Stats(a) => cmd_stats(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Attn(a) => cmd_attn(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn class_names(spec: Option<&str>, classes: usize) -> Result<Option<Vec<String>>> {
    let names: Vec<String> = match spec {
        None => return Ok(None),
        Some("cityscapes") => CITYSCAPES.iter().map(|s| s.to_string()).collect(),
        Some(path) => {
            io::read_text(Path::new(path))?.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect()
        }
    };
    if names.len() < classes {
        return Err(CoreError::Argument(format!("{} class names for {classes} classes", names.len())));
    }
    Ok(Some(names))
}

fn header(first: &str, names: Option<&[String]>, classes: usize) -> Vec<String> {
    std::iter::once(first.to_string())
        .chain((0..classes).map(|k| names.and_then(|n| n.get(k).cloned()).unwrap_or_else(|| format!("class{k}"))))
        .collect()
}

fn indexed(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter().enumerate().map(|(i, r)| std::iter::once(i as f64).chain(r.iter().copied()).collect()).collect()
}

fn transpose(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    (0..cols).map(|c| rows.iter().map(|r| r[c]).collect()).collect()
}

fn write_distribution(
    out: &Path,
    tag: &str,
    d: &AxisDistribution,
    names: Option<&[String]>,
    scale: usize,
) -> Result<()> {
    let k = d.class_curves.len();
    io::write_text(
        &out.join(format!("distribution_{tag}.csv")),
        &io::matrix_csv(&header("bin", names, k), &indexed(&d.matrix)),
    )?;
    io::write_heatmap(&out.join(format!("distribution_{tag}.pgm")), &d.matrix, scale)?;
    let curves = transpose(&d.class_curves);
    io::write_text(
        &out.join(format!("class_curves_{tag}.csv")),
        &io::matrix_csv(&header("bin", names, k), &indexed(&curves)),
    )
}

fn cmd_stats(a: &StatsArgs) -> Result<u8> {
    let bands: Bands = a.bands.parse()?;
    let axis: Axis = a.axis.parse()?;
    let names = class_names(a.names.as_deref(), a.classes)?;
    let names = names.as_deref();
    let suffixes: Vec<&str> = a.patterns.iter().map(String::as_str).collect();
    let maps = io::read_label_dir(&a.label_dir, &suffixes)?;
    let report = region_report(&maps, a.classes, &bands)?;
    let height = axis_distribution(&maps, a.classes, Axis::Height, a.bins)?;
    let width = axis_distribution(&maps, a.classes, Axis::Width, a.bins)?;
    let (hs, ws) = distribution_divergence(&height, &width);
    let mut text = format!("{} label maps\n", maps.len());
    text.push_str(&report.render_table(names, a.top));
    let _ = writeln!(text, "height spread: {hs:.4}");
    let _ = writeln!(text, "width spread: {ws:.4}");
    io::create_dir(&a.out)?;
    io::write_text(&a.out.join("report.txt"), &text)?;
    io::write_text(&a.out.join("report.csv"), &report.to_csv(names))?;
    let (tag, chosen) = match axis {
        Axis::Height => ("h", &height),
        Axis::Width => ("w", &width),
    };
    write_distribution(&a.out, tag, chosen, names, 8)?;
    let mut comp = String::from("class,mean_component_pixels\n");
    for (k, m) in component_sizes(&maps, a.classes)?.iter().enumerate() {
        let _ = writeln!(comp, "{},{}", header("", names, a.classes)[k + 1], m.map_or(String::new(), io::sig6));
    }
    io::write_text(&a.out.join("components.csv"), &comp)?;
    print!("{text}");
    Ok(0)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<u8> {
    let d = SuiteConfig::default();
    let map = match &a.config {
        Some(p) => kv::parse(&io::read_text(p)?)?,
        None => BTreeMap::new(),
    };
    kv::reject_unknown(&map, &["module_cases", "seed", "epsilon"])?;
    let cfg = SuiteConfig {
        module_cases: a.module_cases.map_or_else(|| kv::get(&map, "module_cases", d.module_cases), Ok)?,
        seed: a.seed.map_or_else(|| kv::get(&map, "seed", d.seed), Ok)?,
        epsilon: a.epsilon.map_or_else(|| kv::get(&map, "epsilon", d.epsilon), Ok)?,
    };
    if !(cfg.epsilon > 0.0) {
        return Err(CoreError::Config(format!("epsilon {} must be positive", cfg.epsilon)));
    }
    let report = run_suite(&cfg)?;
    print!("{}", report.render());
    Ok(if report.passed() { 0 } else { 2 })
}

fn cmd_synth(a: &SynthArgs) -> Result<u8> {
    for (split, n) in [("train", a.train), ("val", a.val)] {
        let data = synth_banded(derive_seed(a.seed, split), n, a.height, a.width, a.classes, a.noise)?;
        data.save(&a.out.join(split))?;
    }
    let bands = generating_bands(a.height, a.classes);
    let mut text = String::from("class,start,end\n");
    for (c, (s, e)) in bands.iter().enumerate() {
        let _ = writeln!(text, "{c},{s},{e}");
    }
    io::write_text(&a.out.join("bands.csv"), &text)?;
    println!("wrote {} train and {} val samples to {}", a.train, a.val, a.out.display());
    Ok(0)
}

/// Model and training settings from a file, then `--set`, then the dedicated flags.
fn resolve_config(a: &TrainArgs) -> Result<(ToySegConfig, TrainConfig)> {
    let mut map = match &a.config {
        Some(p) => kv::parse(&io::read_text(p)?)?,
        None => BTreeMap::new(),
    };
    for s in &a.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| CoreError::Config(format!("--set {s:?} is not KEY=VALUE")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    if let Some(seed) = a.seed {
        map.insert("seed".into(), seed.to_string());
    }
    if let Some(n) = a.max_iteration {
        map.insert("max_iteration".into(), n.to_string());
    }
    let known: Vec<&str> = MODEL_KEYS.iter().chain(TRAIN_KEYS).copied().collect();
    kv::reject_unknown(&map, &known)?;
    Ok((ToySegConfig::from_map(&map)?, TrainConfig::from_map(&map)?))
}

fn resolved_text(model: &ToySegConfig, train: &TrainConfig) -> String {
    kv::render(model.to_pairs().into_iter().chain(train.to_pairs()))
}

fn cmd_train(a: &TrainArgs) -> Result<u8> {
    let (model_cfg, train_cfg) = resolve_config(a)?;
    io::create_dir(&a.out)?;
    io::write_text(&a.out.join("config.txt"), &resolved_text(&model_cfg, &train_cfg))?;
    let data = Dataset::load(&a.data.join("train"))?;
    let val_dir = a.data.join("val");
    let val = if val_dir.is_dir() { Some(Dataset::load(&val_dir)?) } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(model_cfg.seed, "train-loop"));
    let mut model = hanet_core::toyseg::ToySeg::build(model_cfg)?;
    let outcome = train(&mut model, &data, &train_cfg, &mut rng)?;
    io::write_text(&a.out.join("train_log.csv"), &outcome.log.to_csv())?;
    checkpoint::save(&model, &a.out.join("model.ckpt"))?;
    if let Some(val) = val {
        let report = evaluate(&model, &val)?;
        io::write_text(&a.out.join("eval.txt"), &report.render())?;
        print!("{}", report.render());
    }
    Ok(0)
}

fn eval_data(dir: &Path) -> Result<Dataset> {
    if dir.join("images").is_dir() {
        Dataset::load(dir)
    } else {
        Dataset::load(&dir.join("val"))
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<u8> {
    let model = checkpoint::load(&a.checkpoint)?;
    let report = evaluate(&model, &eval_data(&a.data)?)?;
    if let Some(out) = &a.out {
        io::write_text(out, &report.render())?;
    }
    print!("{}", report.render());
    Ok(0)
}

/// Writes `[channel][row]` values with one line and one heatmap row per image row.
fn write_attention(out: &Path, stem: &str, column: &str, channels: &[Vec<f64>], scale: usize) -> Result<()> {
    let head: Vec<String> =
        std::iter::once("row".to_string()).chain((0..channels.len()).map(|c| format!("{column}{c}"))).collect();
    let by_row = transpose(channels);
    io::write_text(&out.join(format!("{stem}.csv")), &io::matrix_csv(&head, &indexed(&by_row)))?;
    io::write_heatmap(&out.join(format!("{stem}.pgm")), &by_row, scale)
}

fn cmd_attn(a: &AttnArgs) -> Result<u8> {
    if a.image.is_none() && a.data.is_none() {
        return Err(CoreError::Argument("need --image, --data or both".into()));
    }
    let model = checkpoint::load(&a.checkpoint)?;
    let mut layers = Vec::new();
    for s in &a.layers {
        for l in parse_layers(s)? {
            if model.hanet(l).is_none() {
                return Err(CoreError::Argument(format!("checkpoint has no attention at {l}")));
            }
            layers.push(l);
        }
    }
    io::create_dir(&a.out)?;
    if let Some(path) = &a.image {
        let img = io::read_rgb(path)?;
        let (_, maps) = model.infer(image_batch(&[&img])?)?;
        for &l in &layers {
            let t = &maps[&l];
            let (c, h) = (t.shape()[1], t.shape()[2]);
            let rows: Vec<Vec<f64>> = (0..c).map(|ch| t.data()[ch * h..(ch + 1) * h].to_vec()).collect();
            write_attention(&a.out, &l.to_string(), "channel", &rows, a.scale)?;
        }
    }
    if let Some(dir) = &a.data {
        let data = eval_data(dir)?;
        let k = model.config().num_classes;
        for &l in &layers {
            let profile = mean_attention(&model, &data, l)?;
            write_attention(&a.out, &format!("{l}_mean"), "channel", &profile, a.scale)?;
            if l != Layer::L5 {
                continue;
            }
            let rows = profile.first().map_or(0, Vec::len);
            let dist = axis_distribution(&data.labels(), k, Axis::Height, rows)?;
            write_attention(&a.out, "L5_class_distribution", "class", &dist.class_curves, a.scale)?;
            if a.synth_bands {
                let height = data.samples[0].image.height;
                let aligned = attention_alignment(&profile, height, &generating_bands(height, k))?;
                let mut text = String::from("class,peak_row,band_start,band_end,hit\n");
                for b in &aligned {
                    let _ = writeln!(text, "{},{},{},{},{}", b.class, b.peak_row, b.band.0, b.band.1, b.hit());
                }
                io::write_text(&a.out.join("L5_alignment.csv"), &text)?;
                let hits = aligned.iter().filter(|b| b.hit()).count();
                println!("L5 peaks inside their generating band: {hits}/{}", aligned.len());
            }
        }
    }
    Ok(0)
}
