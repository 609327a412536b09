//! Subcommands. Each reads its inputs from the output directory (or the
//! configured data directory), writes its artifacts there and returns a
//! run summary.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use snnforge_core::ann::{forward_all, Checkpoint, CheckpointMeta};
use snnforge_core::conversion::{convert, SpikingNetwork};
use snnforge_core::data::{Dataset, Target};
use snnforge_core::energy::{ann_energy, ann_flops, count_snn_flops, snn_energy, EnergyReport, SnnCounts};
use snnforge_core::finetune::{finetune, FinetuneConfig};
use snnforge_core::metrics::{pearson, psnr, seg_scores_many, ssim, SsimParams};
use snnforge_core::network::{build_unet, Task};
use snnforge_core::snn::{decode_denoise, logits_to_labels, simulate};
use snnforge_core::stats::collect_stats;
use snnforge_core::synth;
use snnforge_core::tensor::Tensor;
use snnforge_core::train::{train, TrainConfig};

use crate::config::{ExperimentConfig, ModelChoice, SyntheticKind};
use crate::dataset_io;
use crate::error::{CliError, Result};
use crate::model_io;
use crate::summary::{files_digest, record_run, rel_string, walk, write_json, RunSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenSynthetic,
    Train,
    Stats,
    Convert,
    Simulate,
    Finetune,
    Eval,
    Energy,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::GenSynthetic,
        Command::Train,
        Command::Stats,
        Command::Convert,
        Command::Simulate,
        Command::Finetune,
        Command::Eval,
        Command::Energy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenSynthetic => "gen-synthetic",
            Command::Train => "train",
            Command::Stats => "stats",
            Command::Convert => "convert",
            Command::Simulate => "simulate",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Energy => "energy",
        }
    }
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const STATS_FILE: &str = "stats.json";
pub const CONVERTED_DIR: &str = "converted";
pub const FINETUNED_DIR: &str = "finetuned";

/// Independent seeds for the random streams of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_TEST_DATA: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_FINETUNE: u64 = 5;

pub struct Context {
    pub cfg: ExperimentConfig,
    pub out_dir: PathBuf,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, out_dir: PathBuf) -> Self {
        Self { cfg, out_dir }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.cfg.paths.data_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    /// Configuration as echoed in summaries; paths are left out because they
    /// depend on where the run happens.
    fn echo(&self) -> Value {
        let mut v = serde_json::to_value(&self.cfg).expect("serialisable");
        if let Some(o) = v.as_object_mut() {
            o.remove("paths");
        }
        v
    }

    fn load_split(&self, split: &str, limit: Option<usize>) -> Result<Dataset> {
        let d = &self.cfg.data;
        dataset_io::load(&self.data_dir().join(split), self.cfg.task, d.num_classes, d.noise_level, limit)
    }

    fn digest_dir(&self, dir: &Path) -> Result<String> {
        if !dir.is_dir() {
            return Err(CliError::missing(dir, "directory not found"));
        }
        files_digest(dir, &walk(dir)?)
    }

    fn digest_split(&self, split: &str) -> Result<String> {
        let dir = self.data_dir().join(split);
        if !dir.is_dir() {
            return Err(CliError::missing(&dir, "dataset split not found; run gen-synthetic or set paths.data_dir"));
        }
        self.digest_dir(&dir)
    }

    fn load_spiking(&self, which: ModelChoice) -> Result<(SpikingNetwork, CheckpointMeta)> {
        let (dir, hint) = match which {
            ModelChoice::Finetuned => (FINETUNED_DIR, "fine-tuned network not found; run `snnforge finetune` first"),
            _ => (CONVERTED_DIR, "converted network not found; run `snnforge convert` first"),
        };
        model_io::load_spiking(&self.path(dir), hint)
    }

    fn model_dir(which: ModelChoice) -> &'static str {
        match which {
            ModelChoice::Ann => CHECKPOINT_DIR,
            ModelChoice::Converted => CONVERTED_DIR,
            ModelChoice::Finetuned => FINETUNED_DIR,
        }
    }
}

fn prefixed(prefix: &str, files: Vec<PathBuf>) -> Vec<String> {
    files.into_iter().map(|f| rel_string(&Path::new(prefix).join(f))).collect()
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(path, text).map_err(CliError::io(format!("writing {}", path.display())))
}

/// Runs `cmd` and records its summary.
pub fn run(cmd: Command, ctx: &Context) -> Result<RunSummary> {
    fs::create_dir_all(&ctx.out_dir).map_err(CliError::io(format!("creating {}", ctx.out_dir.display())))?;
    let mut s = RunSummary::new(cmd.name(), ctx.echo());
    match cmd {
        Command::GenSynthetic => gen_synthetic(ctx, &mut s)?,
        Command::Train => cmd_train(ctx, &mut s)?,
        Command::Stats => cmd_stats(ctx, &mut s)?,
        Command::Convert => cmd_convert(ctx, &mut s)?,
        Command::Simulate => cmd_simulate(ctx, &mut s)?,
        Command::Finetune => cmd_finetune(ctx, &mut s)?,
        Command::Eval => cmd_eval(ctx, &mut s)?,
        Command::Energy => cmd_energy(ctx, &mut s)?,
    }
    record_run(&ctx.out_dir, &mut s)?;
    Ok(s)
}

/// The full chain: data (if absent), train, stats, convert, fine-tune, eval,
/// energy.
pub fn pipeline(ctx: &Context) -> Result<Vec<RunSummary>> {
    let mut out = Vec::new();
    if !ctx.data_dir().join("train").is_dir() {
        out.push(run(Command::GenSynthetic, ctx)?);
    }
    for c in [Command::Train, Command::Stats, Command::Convert, Command::Finetune, Command::Eval, Command::Energy] {
        out.push(run(c, ctx)?);
    }
    Ok(out)
}

fn gen_synthetic(ctx: &Context, s: &mut RunSummary) -> Result<()> {
    let cfg = &ctx.cfg;
    let d = &cfg.data;
    let data_dir = ctx.data_dir();
    let mut metrics = Map::new();
    for (split, count, stream) in
        [("train", d.train_count, STREAM_TRAIN_DATA), ("test", d.test_count, STREAM_TEST_DATA)]
    {
        let dir = data_dir.join(split);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(CliError::io(format!("clearing {}", dir.display())))?;
        }
        let seed = derive_seed(cfg.seed, stream);
        let written = match cfg.synthetic_kind() {
            SyntheticKind::ShapesSeg => {
                let ds = synth::shapes_dataset(count, d.size, seed)?;
                dataset_io::write_segmentation(&dir, &ds)?
            }
            SyntheticKind::NoisyImages => {
                let clean = synth::clean_images(count, d.size, seed)?;
                let mut sets = Vec::new();
                for level in synth::NOISE_LEVELS {
                    let sigma = level as f64 / 255.0;
                    let ds = synth::noisy_dataset(&clean, sigma, synth::noise_seed(seed, level))?;
                    let measured = noise_std(&ds);
                    metrics.insert(format!("{split}_sigma{level}_measured_std"), json!(measured));
                    sets.push((level, ds));
                }
                dataset_io::write_denoising(&dir, &sets)?
            }
        };
        metrics.insert(format!("{split}_count"), json!(count));
        // Artifacts are relative to the output directory when the data lives there.
        if let Ok(rel) = dir.strip_prefix(&ctx.out_dir) {
            s.artifacts.extend(written.into_iter().map(|f| rel_string(&rel.join(f))));
        }
    }
    metrics.insert("kind".into(), serde_json::to_value(cfg.synthetic_kind()).expect("serialisable"));
    s.metrics = Value::Object(metrics);
    Ok(())
}

fn noise_std(ds: &Dataset) -> f64 {
    let vals: Vec<f64> = ds
        .samples
        .iter()
        .flat_map(|s| match &s.target {
            Target::Noise(n) => n.data().to_vec(),
            Target::Labels(_) => Vec::new(),
        })
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn cmd_train(ctx: &Context, s: &mut RunSummary) -> Result<()> {
    let cfg = &ctx.cfg;
    s.inputs.insert("train_data".into(), ctx.digest_split("train")?);
    let ds = ctx.load_split("train", None)?;
    let spec = build_unet(cfg.model.width_factor, cfg.model.in_channels, cfg.out_channels(), cfg.task)?;
    let meta = CheckpointMeta {
        width_factor: cfg.model.width_factor,
        seed: derive_seed(cfg.seed, STREAM_INIT),
        epoch: 0,
        task: cfg.task,
    };
    let ck = Checkpoint::init(spec, meta)?;
    let t = &cfg.training;
    let tc = TrainConfig {
        optimizer: t.optimizer,
        epochs: t.epochs,
        batch_size: t.batch_size,
        seed: derive_seed(cfg.seed, STREAM_TRAIN),
        flip_augment: t.flip_augment,
    };
    let (ck, report) = train(&ck, &ds, &tc)?;
    let written = model_io::save_checkpoint(&ctx.path(CHECKPOINT_DIR), &ck)?;
    s.artifacts.extend(prefixed(CHECKPOINT_DIR, written));
    write_csv(
        &ctx.path("loss_curve.csv"),
        "step,loss",
        report.step_losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")),
    )?;
    s.artifacts.push("loss_curve.csv".into());
    s.metrics = json!({
        "epochs": t.epochs,
        "steps": report.step_losses.len(),
        "final_epoch_loss": report.epoch_losses.last(),
        "epoch_losses": report.epoch_losses,
        "param_count": ck.param_count(),
    });
    Ok(())
}

fn cmd_stats(ctx: &Context, s: &mut RunSummary) -> Result<()> {
    let cfg = &ctx.cfg;
    let ck = model_io::load_checkpoint(&ctx.path(CHECKPOINT_DIR))?;
    s.inputs.insert("checkpoint".into(), ctx.digest_dir(&ctx.path(CHECKPOINT_DIR))?);
    s.inputs.insert("train_data".into(), ctx.digest_split("train")?);
    let ds = ctx.load_split("train", Some(cfg.stats.max_samples))?;
    let stats = collect_stats(&ck, ds.samples.iter().map(|x| &x.input), cfg.stats.percentile)?;
    model_io::save_stats(&ctx.path(STATS_FILE), &stats)?;
    s.artifacts.push(STATS_FILE.into());
    let named: Map<String, Value> =
        stats.layers.iter().map(|(&id, &l)| (ck.spec.layers[id].name.clone(), json!(l))).collect();
    s.metrics = json!({ "samples": ds.len(), "percentile": stats.percentile, "lambdas": named });
    Ok(())
}

fn cmd_convert(ctx: &Context, s: &mut RunSummary) -> Result<()> {
    let ck = model_io::load_checkpoint(&ctx.path(CHECKPOINT_DIR))?;
    let stats = model_io::load_stats(&ctx.path(STATS_FILE))?;
    s.inputs.insert("checkpoint".into(), ctx.digest_dir(&ctx.path(CHECKPOINT_DIR))?);
    s.inputs.insert("stats".into(), crate::summary::file_digest(&ctx.path(STATS_FILE))?);
    let net = convert(&ck, &stats, &ctx.cfg.conversion)?;
    let written = model_io::save_spiking(&ctx.path(CONVERTED_DIR), &net, &ck.meta)?;
    s.artifacts.extend(prefixed(CONVERTED_DIR, written));
    s.metrics = json!({
        "mode": net.mode,
        "neuron_layers": net.schedules.len(),
        "thresholds": ctx.cfg.conversion.thresholds,
    });
    Ok(())
}

fn cmd_simulate(ctx: &Context, s: &mut RunSummary) -> Result<()> {
    let cfg = &ctx.cfg;
    let steps = cfg.simulation.steps;
    let ck = model_io::load_checkpoint(&ctx.path(CHECKPOINT_DIR))?;
    let (net, _) = ctx.load_spiking(ModelChoice::Converted)?;
    s.inputs.insert("checkpoint".into(), ctx.digest_dir(&ctx.path(CHECKPOINT_DIR))?);
    s.inputs.insert("converted".into(), ctx.digest_dir(&ctx.path(CONVERTED_DIR))?);
    s.inputs.insert("test_data".into(), ctx.digest_split("test")?);
    let ds = ctx.load_split("test", Some(cfg.simulation.samples))?;
    let relu = net.spec.relu_layers();
    let mut ann_acts: Vec<Vec<f64>> = vec![Vec::new(); relu.len()];
    let mut rates: Vec<Vec<f64>> = vec![Vec::new(); relu.len()];
    let mut spikes = vec![0u64; relu.len()];
    for sample in &ds.samples {
        let values = forward_all(&ck.spec, &ck.params, &sample.input)?;
        let trace = simulate(&net, &sample.input, steps)?;
        for (k, &id) in relu.iter().enumerate() {
            ann_acts[k].extend_from_slice(values[id].data());
            rates[k].extend(trace.output_flow[id].data().iter().map(|v| v / steps as f64));
            spikes[k] += trace.layer_spikes(id);
        }
    }
    let mut layers = Vec::new();
    let mut min_corr = f64::INFINITY;
    for (k, &id) in relu.iter().enumerate() {
        let corr = pearson(&ann_acts[k], &rates[k])?;
        min_corr = min_corr.min(corr);
        let neurons = ann_acts[k].len() as f64;
        layers.push(json!({
            "layer": net.spec.layers[id].name,
            "spikes": spikes[k],
            "spikes_per_neuron_step": spikes[k] as f64 / (neurons * steps as f64),
            "rate_activation_correlation": corr,
        }));
    }
    let table = json!({ "steps": steps, "samples": ds.len(), "layers": layers });
    write_json(&ctx.path("simulation.json"), &table)?;
    s.artifacts.push("simulation.json".into());
    s.metrics = json!({
        "steps": steps,
        "samples": ds.len(),
        "total_spikes": spikes.iter().sum::<u64>(),
        "min_rate_activation_correlation": if relu.is_empty() { Value::Null } else { json!(min_corr) },
        "layers": layers,
    });
    Ok(())
}

fn cmd_finetune(ctx: &Context, s: &mut RunSummary) -> Result<()> {
    let cfg = &ctx.cfg;
    let (net, meta) = ctx.load_spiking(ModelChoice::Converted)?;
    s.inputs.insert("converted".into(), ctx.digest_dir(&ctx.path(CONVERTED_DIR))?);
    s.inputs.insert("train_data".into(), ctx.digest_split("train")?);
    let ds = ctx.load_split("train", None)?;
    let f = &cfg.finetune;
    let fc = FinetuneConfig {
        steps: f.steps,
        optimizer: f.optimizer,
        epochs: f.epochs,
        batch_size: f.batch_size,
        seed: derive_seed(cfg.seed, STREAM_FINETUNE),
        flip_augment: f.flip_augment,
        task: Some(cfg.task),
    };
    let (tuned, report) = finetune(&net, &ds, &fc)?;
    let written = model_io::save_spiking(&ctx.path(FINETUNED_DIR), &tuned, &meta)?;
    s.artifacts.extend(prefixed(FINETUNED_DIR, written));
    write_csv(
        &ctx.path("finetune_loss.csv"),
        "step,loss",
        report.step_losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")),
    )?;
    s.artifacts.push("finetune_loss.csv".into());
    s.metrics = json!({
        "steps": f.steps,
        "epochs": f.epochs,
        "updates": report.step_losses.len(),
        "first_loss": report.step_losses.first(),
        "final_epoch_loss": report.epoch_losses.last(),
        "epoch_losses": report.epoch_losses,
    });
    Ok(())
}

/// A model ready for evaluation.
pub enum Evaluated {
    Ann(Checkpoint),
    Spiking(SpikingNetwork),
}

impl Evaluated {
    /// Network output for one input: class scores or predicted noise.
    fn predict(&self, input: &Tensor, task: Task, steps: usize) -> Result<Tensor> {
        match self {
            Evaluated::Ann(ck) => Ok(ck.forward(input, false)?.0),
            Evaluated::Spiking(net) => {
                let trace = simulate(net, input, steps)?;
                Ok(match task {
                    Task::Segmentation => trace.final_flow().clone(),
                    Task::Denoising => decode_denoise(&trace),
                })
            }
        }
    }
}

/// Task metrics of one model on a dataset.
pub fn evaluate(model: &Evaluated, ds: &Dataset, steps: usize) -> Result<Map<String, Value>> {
    let mut m = Map::new();
    match ds.task {
        Task::Segmentation => {
            let mut preds = Vec::with_capacity(ds.len());
            let mut truths = Vec::with_capacity(ds.len());
            for sample in &ds.samples {
                preds.extend(logits_to_labels(&model.predict(&sample.input, ds.task, steps)?)?);
                if let Target::Labels(l) = &sample.target {
                    truths.push(l.clone());
                }
            }
            let sc = seg_scores_many(&preds, &truths, ds.num_classes)?;
            m.insert("f1".into(), json!(sc.f1));
            m.insert("js".into(), json!(sc.js));
            m.insert("acc".into(), json!(sc.acc));
            m.insert("miou".into(), json!(sc.miou));
        }
        Task::Denoising => {
            let (mut p, mut q) = (0.0, 0.0);
            let params = SsimParams::default();
            for sample in &ds.samples {
                let noise = model.predict(&sample.input, ds.task, steps)?;
                let clean = sample.clean()?;
                let restored = sample.input.sub(&noise)?.map(|v| v.clamp(0.0, 1.0));
                p += psnr(&restored, &clean, 1.0)?;
                q += ssim(&restored, &clean, &params)?;
            }
            let n = ds.len().max(1) as f64;
            m.insert("psnr".into(), json!(p / n));
            m.insert("ssim".into(), json!(q / n));
        }
    }
    if !m.values().all(|v| v.as_f64().is_some_and(f64::is_finite)) {
        return Err(CliError::Numerical("evaluation produced a non-finite metric".into()));
    }
    Ok(m)
}

/// Loads one of the three models from the output directory.
pub fn load_model(ctx: &Context, which: ModelChoice) -> Result<Evaluated> {
    Ok(match which {
        ModelChoice::Ann => Evaluated::Ann(model_io::load_checkpoint(&ctx.path(CHECKPOINT_DIR))?),
        other => Evaluated::Spiking(ctx.load_spiking(other)?.0),
    })
}

fn cmd_eval(ctx: &Context, s: &mut RunSummary) -> Result<()> {
    let cfg = &ctx.cfg;
    let steps = cfg.eval.steps.unwrap_or(cfg.simulation.steps);
    s.inputs.insert("test_data".into(), ctx.digest_split("test")?);
    let ds = ctx.load_split("test", cfg.eval.limit)?;
    let mut table = Map::new();
    for &which in &cfg.eval.models {
        let dir = Context::model_dir(which);
        s.inputs.insert(which.name().into(), ctx.digest_dir(&ctx.path(dir))?);
        let model = load_model(ctx, which)?;
        table.insert(which.name().into(), Value::Object(evaluate(&model, &ds, steps)?));
    }
    let metrics = json!({ "steps": steps, "samples": ds.len(), "models": table });
    write_json(&ctx.path("eval_metrics.json"), &metrics)?;
    fs::write(ctx.path("eval_table.txt"), eval_table(&metrics)).map_err(CliError::io("writing eval_table.txt"))?;
    s.artifacts.extend(["eval_metrics.json".to_string(), "eval_table.txt".to_string()]);
    s.metrics = metrics;
    Ok(())
}

fn eval_table(metrics: &Value) -> String {
    let models = metrics["models"].as_object().cloned().unwrap_or_default();
    let cols: Vec<String> =
        models.values().next().and_then(|v| v.as_object()).map(|o| o.keys().cloned().collect()).unwrap_or_default();
    let mut out = format!("{:<12}", "model");
    for c in &cols {
        out.push_str(&format!("{c:>10}"));
    }
    out.push('\n');
    for (name, vals) in &models {
        out.push_str(&format!("{name:<12}"));
        for c in &cols {
            out.push_str(&format!("{:>10.4}", vals[c].as_f64().unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}

fn cmd_energy(ctx: &Context, s: &mut RunSummary) -> Result<()> {
    let cfg = &ctx.cfg;
    let e = &cfg.energy;
    let steps = e.steps.unwrap_or(cfg.simulation.steps);
    let ck = model_io::load_checkpoint(&ctx.path(CHECKPOINT_DIR))?;
    let which = if e.network == ModelChoice::Ann { ModelChoice::Converted } else { e.network };
    let (net, _) = ctx.load_spiking(which)?;
    s.inputs.insert("checkpoint".into(), ctx.digest_dir(&ctx.path(CHECKPOINT_DIR))?);
    s.inputs.insert(which.name().into(), ctx.digest_dir(&ctx.path(Context::model_dir(which)))?);
    s.inputs.insert("test_data".into(), ctx.digest_split("test")?);
    let ds = ctx.load_split("test", Some(e.samples))?;
    let (h, w) = match ds.samples.first() {
        Some(x) => (x.input.shape()[2], x.input.shape()[3]),
        None => (cfg.data.size, cfg.data.size),
    };
    let flops = ann_flops(&ck.spec, h, w)?;
    let mut total = SnnCounts::default();
    for sample in &ds.samples {
        let trace = simulate(&net, &sample.input, steps)?;
        let c = count_snn_flops(&trace, &net)?;
        total.op_spikes += c.op_spikes;
        total.op_input_layer += c.op_input_layer;
        total.spikes += c.spikes;
        total.samples += c.samples;
    }
    let per = total.per_sample();
    let ann = ann_energy(flops, ck.param_count(), &e.model);
    let snn = snn_energy(&per, ck.param_count(), &e.model);
    let report = json!({
        "steps": steps,
        "samples": ds.len(),
        "network": which.name(),
        "model": e.model,
        "ann": ann,
        "snn": snn,
        "snn_counts_per_sample": per,
        "ops_energy_ratio_ann_over_snn": if snn.ops_energy > 0.0 { json!(ann.ops_energy / snn.ops_energy) } else { Value::Null },
    });
    write_json(&ctx.path("energy.json"), &report)?;
    fs::write(ctx.path("energy.txt"), energy_table(&ann, &snn)).map_err(CliError::io("writing energy.txt"))?;
    s.artifacts.extend(["energy.json".to_string(), "energy.txt".to_string()]);
    s.metrics = report;
    Ok(())
}

pub fn energy_table(ann: &EnergyReport, snn: &EnergyReport) -> String {
    let mut out = format!("{:<8}{:>12}{:>12}{:>12}{:>12}\n", "model", "FLOPs", "Mem (J)", "Ops (J)", "Total (J)");
    for (name, r) in [("ANN", ann), ("SNN", snn)] {
        out.push_str(&format!(
            "{name:<8}{:>12.3E}{:>12.3E}{:>12.3E}{:>12.3E}\n",
            r.flops as f64, r.memory_energy, r.ops_energy, r.total_energy
        ));
    }
    out
}
