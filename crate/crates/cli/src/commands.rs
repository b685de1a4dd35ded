//! One function per subcommand. Each resolves its config, writes the
//! manifest and resolved config, then its artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use femba::data::io::{save_annotations, save_eegb};
use femba::data::{synth_generate, Label, Scheme, SynthSpec};
use femba::model::{
    assemble_patches, load_checkpoint, mask_seed, sample_mask, save_checkpoint, CheckpointMeta, Femba, ModelConfig,
    Parts,
};
use femba::profile::{self, CostReport, CSV_HEADER};
use femba::train::{self, pretrain::validation_loss, LogLine};
use femba::{Graph, ParamStore, Tensor};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toml::Table;

use crate::config::{self, ConfigError, Loaded, ProfileTask, RunConfig};
use crate::dataset::{self, input_files};
use crate::manifest::{input_hash, Manifest};
use crate::Command;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    /// Every window.
    All,
    /// The held-out 10% of the seeded split.
    Test,
}

/// Model keys that fix the encoder's parameter shapes.
const ENCODER_KEYS: [&str; 9] = [
    "name",
    "num_blocks",
    "embed_dim",
    "state_size",
    "expand",
    "patch_c",
    "patch_t",
    "channels",
    "samples",
];

/// Every model key; a checkpoint used as-is fixes all of them.
const ALL_MODEL_KEYS: [&str; 12] = [
    "name",
    "num_blocks",
    "embed_dim",
    "state_size",
    "expand",
    "patch_c",
    "patch_t",
    "mask_ratio",
    "head",
    "head_hidden",
    "channels",
    "samples",
];

struct Run<'a> {
    command: &'a Command,
    config: RunConfig,
    explicit_model_keys: Vec<String>,
    inputs: Vec<PathBuf>,
}

impl Run<'_> {
    /// Replaces `keys` of the model config with the checkpoint's values.
    /// A key set explicitly to a different value is an error.
    fn adopt(&mut self, ckpt: &ModelConfig, keys: &[&str]) -> Result<()> {
        let ours = Table::try_from(&self.config.model)?;
        let mut merged = ours.clone();
        let theirs = Table::try_from(ckpt)?;
        for &k in keys {
            if ours.get(k) != theirs.get(k) && self.explicit_model_keys.iter().any(|e| e == k) {
                return Err(ConfigError {
                    field: format!("model.{k}"),
                    detail: format!(
                        "set to {} but the checkpoint has {}",
                        ours[k],
                        theirs.get(k).map_or("nothing".into(), |v| v.to_string())
                    ),
                }
                .into());
            }
            if let Some(v) = theirs.get(k) {
                merged.insert(k.to_string(), v.clone());
            }
        }
        let model: ModelConfig = merged.try_into()?;
        model.validate()?;
        self.config.model = model;
        Ok(())
    }

    /// Writes the manifest and resolved config to `dir` (named after `stem`).
    fn record(&self, dir: &Path, stem: &str, out: &Path) -> Result<()> {
        let c = self.command.common();
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let manifest = Manifest {
            command: self.command.name(),
            argv: std::env::args().collect(),
            config_path: c.config.clone(),
            config: &self.config,
            seed: self.config.seed,
            input_hash: input_hash(&self.inputs)?,
            inputs: self.inputs.clone(),
            out: out.to_path_buf(),
            version: env!("CARGO_PKG_VERSION"),
        };
        manifest.write(&dir.join(format!("{stem}manifest.json")))?;
        let cfg_path = dir.join(format!("{stem}config.toml"));
        std::fs::write(&cfg_path, self.config.to_toml()).with_context(|| format!("writing {}", cfg_path.display()))?;
        Ok(())
    }

    fn out_dir(&self) -> PathBuf {
        self.command
            .common()
            .out
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(self.command.name()))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(command: &Command) -> Result<()> {
    let overrides = command.overrides()?;
    let Loaded {
        config,
        explicit_model_keys,
    } = config::load(command.common().config.as_deref(), &overrides)?;
    let mut run = Run {
        command,
        config,
        explicit_model_keys,
        inputs: Vec::new(),
    };
    match command {
        Command::GenSynth { .. } => gen_synth(&mut run),
        Command::Pretrain { data, .. } => pretrain(&mut run, data),
        Command::Finetune { data, checkpoint, .. } => finetune(&mut run, data, checkpoint.as_deref()),
        Command::Eval {
            data, checkpoint, split, ..
        } => eval(&mut run, data, checkpoint, *split),
        Command::Reconstruct {
            data,
            checkpoint,
            window,
            ..
        } => reconstruct(&mut run, data, checkpoint, *window),
        Command::Profile { .. } => profile_cmd(&mut run),
        Command::BenchScaling { .. } => bench(&mut run),
    }
}

fn gen_synth(run: &mut Run) -> Result<()> {
    let dir = run.out_dir();
    run.record(&dir, "", &dir)?;
    let base = &run.config.synth;
    for i in 0..run.config.data.recordings {
        let spec = SynthSpec {
            seed: run.config.seed.wrapping_add(i as u64),
            subject_id: format!("{}{i:03}", base.subject_id),
            ..base.clone()
        };
        let (rec, anns) = synth_generate(&spec)?;
        let path = dir.join(format!("rec_{i:03}.eegb"));
        save_eegb(&rec, &path).with_context(|| format!("writing {}", path.display()))?;
        save_annotations(&anns, dataset::sidecar(&path))?;
        info!("{}: {} x {} samples, {} events", path.display(), rec.channels(), rec.len(), anns.len());
    }
    println!("wrote {} recordings to {}", run.config.data.recordings, dir.display());
    Ok(())
}

/// `step,split,loss,lr` log file that is flushed as lines arrive.
struct LogFile(BufWriter<File>);

impl LogFile {
    fn create(path: &Path) -> Result<Self> {
        let mut w = create(path)?;
        writeln!(w, "step,split,loss,lr")?;
        Ok(Self(w))
    }

    fn push(&mut self, line: &LogLine) {
        if let Err(e) = writeln!(self.0, "{line}").and_then(|()| self.0.flush()) {
            warn!("log write failed: {e}");
        }
    }
}

fn pretrain(run: &mut Run, data: &Path) -> Result<()> {
    run.inputs = input_files(data)?;
    let dir = run.out_dir();
    run.record(&dir, "", &dir)?;
    let cfg = &run.config;
    let windows = dataset::windows(&run.inputs, cfg, None)?;
    let tensors: Vec<Tensor<f32>> = windows.into_iter().map(|w| w.data).collect();
    let s = dataset::split(&tensors, cfg.seed)?;
    info!("{} train / {} val / {} test windows", s.train.len(), s.val.len(), s.test.len());

    let mut store = ParamStore::new();
    let model = Femba::new(&cfg.model, Parts::PRETRAIN, &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    info!("{} parameters", store.num_elements());
    let mut log = LogFile::create(&dir.join("log.csv"))?;
    let report = train::pretrain(&model, &mut store, &s.train, &s.val, &cfg.train, &mut |l| log.push(l))?;

    save_checkpoint(&model, &report.best, &format!("pretrain step {}", report.best_step), dir.join("model.ckpt"))?;
    let mut kv = format!(
        "best_val={:.6}\nbest_step={}\nbest_train={:.6}\n",
        report.best_val, report.best_step, report.best_train
    );
    if !s.test.is_empty() {
        let test = validation_loss(&model, &report.best, &s.test, &cfg.train)?;
        kv.push_str(&format!("test_loss={test:.6}\n"));
    }
    write_text(&dir.join("metrics.kv"), &kv)?;
    print!("{kv}");
    Ok(())
}

fn labeled(files: &[PathBuf], cfg: &RunConfig, scheme: Scheme) -> Result<Vec<(Tensor<f32>, Label)>> {
    Ok(dataset::windows(files, cfg, Some(scheme))?
        .into_iter()
        .filter_map(|w| w.label.map(|l| (w.data, l)))
        .collect())
}

fn finetune(run: &mut Run, data: &Path, checkpoint: Option<&Path>) -> Result<()> {
    run.inputs = input_files(data)?;
    let pretrained = match checkpoint {
        Some(p) => {
            let (_, ckpt_store, meta): (Femba, ParamStore<f32>, CheckpointMeta) =
                load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            run.adopt(&meta.model, &ENCODER_KEYS)?;
            run.inputs.push(p.to_path_buf());
            Some(ckpt_store)
        }
        None => None,
    };
    let dir = run.out_dir();
    run.record(&dir, "", &dir)?;
    let files: Vec<PathBuf> = run.inputs.iter().filter(|p| Some(p.as_path()) != checkpoint).cloned().collect();
    let cfg = &run.config;
    let scheme = cfg.data.scheme;
    let items = labeled(&files, cfg, scheme)?;
    let s = dataset::split(&items, cfg.seed)?;
    info!("{} train / {} val / {} test windows", s.train.len(), s.val.len(), s.test.len());

    let mut store = ParamStore::new();
    let model = Femba::new(
        &cfg.model,
        Parts::classifier(scheme),
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    )?;
    if let Some(src) = pretrained {
        let mut encoder = ParamStore::new();
        for (_, p) in src.iter() {
            if p.name.starts_with("tokenizer.") || p.name.starts_with("encoder.") {
                encoder.add(p.name.clone(), p.value.clone());
            }
        }
        let n = store.load_matching(&encoder)?;
        info!("loaded {n} encoder tensors from the checkpoint");
    }
    let mut log = LogFile::create(&dir.join("log.csv"))?;
    let report = train::finetune(&model, &mut store, &s.train, &s.val, &cfg.train, &mut |l| log.push(l))?;
    save_checkpoint(&model, &report.best, &format!("finetune epoch {}", report.best_epoch), dir.join("model.ckpt"))?;

    let (name, set) = if s.test.is_empty() {
        warn!("test split is empty; reporting validation metrics");
        ("val", &s.val)
    } else {
        ("test", &s.test)
    };
    let metrics = train::evaluate(&model, &report.best, set)?;
    let mut kv = format!(
        "split={name}\nscheme={scheme}\nepochs_run={}\nstopped_early={}\nbest_epoch={}\nbest_val={:.6}\ntrainable_params={}\n",
        report.epochs_run, report.stopped_early, report.best_epoch, report.best_val, report.trainable_params
    );
    kv.push_str(&metrics.to_kv());
    write_text(&dir.join("metrics.kv"), &kv)?;
    write_text(&dir.join("metrics.txt"), &format!("{name} split, scheme {scheme}\n{metrics}\n"))?;
    println!("{name} split, scheme {scheme}\n{metrics}");
    Ok(())
}

fn eval(run: &mut Run, data: &Path, checkpoint: &Path, split: EvalSplit) -> Result<()> {
    let mut files = input_files(data)?;
    let (model, store, meta): (Femba, ParamStore<f32>, CheckpointMeta) =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let Some(scheme) = meta.head else {
        bail!("{} has no classifier head", checkpoint.display());
    };
    run.adopt(&meta.model, &ALL_MODEL_KEYS)?;
    run.config.data.scheme = scheme;
    files.push(checkpoint.to_path_buf());
    run.inputs = files;
    let dir = run.out_dir();
    run.record(&dir, "", &dir)?;
    run.inputs.pop();
    let items = labeled(&run.inputs, &run.config, scheme)?;
    let set = match split {
        EvalSplit::All => items,
        EvalSplit::Test => {
            let test = dataset::split(&items, run.config.seed)?.test;
            if test.is_empty() {
                bail!("test split of {} windows is empty; use --split all", items.len());
            }
            test
        }
    };
    let metrics = train::evaluate(&model, &store, &set)?;
    let label = format!("{} windows, scheme {scheme}", set.len());
    write_text(&dir.join("metrics.kv"), &format!("windows={}\nscheme={scheme}\n{}", set.len(), metrics.to_kv()))?;
    write_text(&dir.join("metrics.txt"), &format!("{label}\n{metrics}\n"))?;
    println!("{label}\n{metrics}");
    Ok(())
}

fn reconstruct(run: &mut Run, data: &Path, checkpoint: &Path, index: usize) -> Result<()> {
    let mut files = input_files(data)?;
    let (model, store, meta): (Femba, ParamStore<f32>, CheckpointMeta) =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    if !meta.decoder {
        bail!("{} has no reconstruction decoder", checkpoint.display());
    }
    run.adopt(&meta.model, &ALL_MODEL_KEYS)?;
    files.push(checkpoint.to_path_buf());
    run.inputs = files;
    let out = run
        .command
        .common()
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join("reconstruct").join("rec.csv"));
    let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = out.file_stem().map_or_else(|| "rec".into(), |s| s.to_string_lossy().into_owned());
    run.record(&dir, &format!("{stem}."), &out)?;
    run.inputs.pop();

    let cfg = &run.config.model;
    let windows = dataset::windows(&run.inputs, &run.config, None)?;
    let Some(w) = windows.get(index) else {
        bail!("window {index} requested but the inputs have {} windows", windows.len());
    };
    let mask = sample_mask(cfg.num_tokens(), cfg.mask_ratio, mask_seed(run.config.seed, 0, index as u64))?;
    let mut g = Graph::inference();
    let pred = model.reconstruct(&mut g, &store, &w.data, &mask)?;
    let rec = assemble_patches(g.value(pred), cfg)?;
    let flags = mask.flags();
    let (p, q, gc) = (cfg.patch_c, cfg.patch_t, cfg.grid_c());

    let mut f = create(&out)?;
    writeln!(f, "channel,sample,original,reconstruction,masked")?;
    for c in 0..cfg.channels {
        for t in 0..cfg.samples {
            let token = (t / q) * gc + c / p;
            let i = c * cfg.samples + t;
            writeln!(
                f,
                "{c},{t},{},{},{}",
                w.data.data()[i],
                rec.data()[i],
                u8::from(flags[token])
            )?;
        }
    }
    f.flush()?;
    let masked_path = dir.join(format!("{stem}.masked.csv"));
    let mut m = create(&masked_path)?;
    writeln!(m, "token,channel_start,channel_end,sample_start,sample_end")?;
    for &k in &mask.indices {
        let (tp, cp) = (k / gc, k % gc);
        let c0 = (cp * p).min(cfg.channels);
        let t0 = (tp * q).min(cfg.samples);
        writeln!(
            m,
            "{k},{c0},{},{t0},{}",
            ((cp + 1) * p).min(cfg.channels),
            ((tp + 1) * q).min(cfg.samples)
        )?;
    }
    m.flush()?;
    println!(
        "window {index} of {}: {} of {} tokens masked, written to {}",
        w.subject_id,
        mask.len(),
        cfg.num_tokens(),
        out.display()
    );
    Ok(())
}

fn profile_cmd(run: &mut Run) -> Result<()> {
    let dir = run.out_dir();
    run.record(&dir, "", &dir)?;
    let cfg = &run.config;
    let parts = match cfg.profile.task {
        ProfileTask::Encoder => Parts::ENCODER,
        ProfileTask::Pretrain => Parts::PRETRAIN,
        ProfileTask::Classifier => Parts::classifier(cfg.data.scheme),
    };
    let m = &cfg.model;
    let report = CostReport::new(m, parts, cfg.profile.batch, cfg.profile.memory_batch, m.channels, m.samples)?;
    println!("{report}");
    let mut csv = format!("{CSV_HEADER}\n");
    csv.push_str(&profile::csv_row(
        &format!("femba-{}", report.variant),
        Some(report.tokens),
        Some(report.batch),
        Some(report.params),
        report.flops as f64,
        report.peak_bytes as f64,
        None,
    ));
    csv.push('\n');
    for r in profile::reference_csv_rows() {
        csv.push_str(&r);
        csv.push('\n');
    }
    write_text(&dir.join("profile.csv"), &csv)?;
    write_text(&dir.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(())
}

fn bench(run: &mut Run) -> Result<()> {
    let dir = run.out_dir();
    run.record(&dir, "", &dir)?;
    let report = profile::bench_scaling(&run.config.model, &run.config.bench)?;
    let mut csv = format!("{CSV_HEADER}\n");
    for r in report.rows.iter().map(|r| r.csv()).chain(profile::reference_csv_rows()) {
        csv.push_str(&r);
        csv.push('\n');
    }
    write_text(&dir.join("bench.csv"), &csv)?;
    let kv = format!(
        "encoder_slope={:.4}\nattention_slope={:.4}\n",
        report.encoder_slope, report.attention_slope
    );
    write_text(&dir.join("slopes.kv"), &kv)?;
    print!("{csv}{kv}");
    Ok(())
}
