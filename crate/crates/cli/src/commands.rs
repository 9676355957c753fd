use std::fs::{self, File};
use std::io::{self, Write};
use std::path::Path;
use std::process::ExitCode;

use sha2::{Digest, Sha256};

use ppmamba::data_io::{
    default_palette, export_ppm, load_checkpoint, read_tensor, save_checkpoint, synth_generate, write_tensor, Dataset,
    Split, IMAGES_DIR, LABELS_DIR, MANIFEST,
};
use ppmamba::gradsuite::{default_targets, run_targets};
use ppmamba::network::summarize as summarize_model;
use ppmamba::train::{evaluate, infer_image, train as run_training};
use ppmamba::{Error, Result, Tensor};

use crate::config::RunConfig;

/// Hex SHA-256 over the manifest and every file it names, in manifest order.
fn dataset_digest(root: &Path, ds: &Dataset) -> Result<String> {
    let mut hasher = Sha256::new();
    let read = |p: &Path| fs::read(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e });
    hasher.update(read(&root.join(MANIFEST))?);
    for split in [Split::Train, Split::Val] {
        for id in ds.ids(split) {
            for dir in [IMAGES_DIR, LABELS_DIR] {
                hasher.update(read(&root.join(dir).join(format!("{id:04}.ppmt")))?);
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

pub fn synth(config: Option<&Path>, seed: Option<u64>, out: Option<std::path::PathBuf>) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let mut spec = cfg.data.synthetic.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let root = out.unwrap_or(cfg.data.path);
    let samples = synth_generate(&spec)?;
    let ds = Dataset::create(&root, &samples)?;
    println!("out={}", root.display());
    println!("train={}", ds.ids(Split::Train).len());
    println!("val={}", ds.ids(Split::Val).len());
    println!("seed={}", spec.seed);
    println!("digest={}", dataset_digest(&root, &ds)?);
    Ok(ExitCode::SUCCESS)
}

/// Writes every log line to stdout and to `file`.
struct Tee {
    file: File,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.file.write_all(buf)?;
        io::stdout().write_all(buf)?;
        Ok(buf.len())
    }
    fn flush(&mut self) -> io::Result<()> {
        self.file.flush()?;
        io::stdout().flush()
    }
}

pub fn train(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let mut schedule = cfg.schedule.clone();
    if let Some(s) = seed {
        schedule.seed = s;
    }
    let ds = Dataset::open(&cfg.data.path)?;
    let samples = ds.load_split(Split::Train)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let log_path = out.join("train.log");
    let file = File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log = Tee { file };
    let outcome = run_training(&cfg.model, &cfg.optimizer, &schedule, &samples, cfg.metric_scope, &mut log)?;
    let ckpt = out.join("model.ppmk");
    save_checkpoint(&ckpt, &outcome.store, &cfg.model)?;
    println!("checkpoint={}", ckpt.display());
    Ok(ExitCode::SUCCESS)
}

fn tiling(cfg: &RunConfig, stride: Option<usize>) -> Result<ppmamba::data_io::TileSpec> {
    let mut spec = cfg.tiling;
    if let Some(s) = stride {
        spec.stride = s;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn eval(config: Option<&Path>, checkpoint: &Path, stride: Option<usize>, split: &str) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let spec = tiling(&cfg, stride)?;
    let store = load_checkpoint(checkpoint, &cfg.model)?;
    let ds = Dataset::open(&cfg.data.path)?;
    let split: Split = split.parse()?;
    let samples = ds.load_split(split)?;
    if samples.is_empty() {
        return Err(Error::Usage(format!("split {split} of {} is empty", cfg.data.path.display())));
    }
    let report = evaluate(&store, &cfg.model, &samples, Some(&spec), cfg.metric_scope)?;
    print!("{}", report.table(&[]));
    println!("split={split} samples={} window={} stride={}", samples.len(), spec.window, spec.stride);
    print!("{}", report.key_values());
    Ok(ExitCode::SUCCESS)
}

pub fn infer(config: Option<&Path>, checkpoint: &Path, input: &Path, out: &Path, stride: Option<usize>) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let spec = tiling(&cfg, stride)?;
    let store = load_checkpoint(checkpoint, &cfg.model)?;
    let image: Tensor<f32> = read_tensor(input)?;
    let pred = infer_image(&store, &cfg.model, &image, &spec)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_tensor(out.join("pred.ppmt"), &pred)?;
    export_ppm(&pred, &default_palette(cfg.model.num_classes), out.join("pred.ppm"))?;
    let [h, w] = pred.dims2()?;
    println!("height={h} width={w}");
    println!("labels={}", out.join("pred.ppmt").display());
    println!("image={}", out.join("pred.ppm").display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck() -> Result<ExitCode> {
    let rows = run_targets(&default_targets())?;
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    println!("{:<width$}  {:>10}  {:>9}  {:>6}  result", "target", "max rel", "tolerance", "coords");
    for r in &rows {
        println!(
            "{:<width$}  {:>10.3e}  {:>9.0e}  {:>6}  {}",
            r.name,
            r.report.max_rel_error,
            r.tolerance,
            r.report.coords_checked,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("targets={}", rows.len());
    println!("failed={failed}");
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn summarize(config: Option<&Path>, size: usize) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let summary = summarize_model(&cfg.model, [1, cfg.model.input_channels, size, size])?;
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}
