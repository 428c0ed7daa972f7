//! The `semgen` command line: corpus generation, every training stage,
//! sampling and the experiment harnesses, over a directory of runs.
//!
//! Each command writes `runs/<name>/` under the artifact root (`SEMGEN_ROOT`,
//! default `.`). Training commands resume from `ckpt_latest.bin` when present.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autoencoder::{self, train_autoencoder_from, AutoEncoder};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_override, Config};
use crate::error::{config_err, Error, Result};
use crate::eval::{
    compression_ablation, convergence_experiment, drift_experiment, write_csv, write_filmstrip, write_json, Lab,
    LabConfig, SystemSpec,
};
use crate::numerics::Rng;
use crate::pipeline::{
    generate, generate_long, latent_eval_loss, prepare, semantic_eval_loss, semantic_targets, train_latent_generator,
    train_semantic_generator, FairnessRecord, GenerateOptions, LatentGenerator, SemanticGenerator, StageId,
    TrainingData,
};
use crate::semantics::{
    pretrain_semantic_encoder, train_factor_net, FactorNet, FactorReport, SemanticEncoder, ENCODER_KIND,
};
use crate::synthdata::{corpus_hash, load_corpus, make_corpus, save_corpus, Clip, ClipLength, Video, CHANNELS};
use crate::train::TrainState;

pub const ROOT_ENV: &str = "SEMGEN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "semgen", version, about = "Two-stage semantic video generation on a synthetic sprite corpus")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON file of dotted config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for this command's stochastic part (corpus, training, sampling or harness).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory name under runs/.
    #[arg(long)]
    name: Option<String>,
    /// Dotted-key overrides, applied last.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct LongArgs {
    #[command(flatten)]
    common: Common,
    /// Use the long clips and the long-mode stage configs.
    #[arg(long)]
    long: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Baseline {
    Ct,
    CtSwin,
    Vae2stage,
}

#[derive(Args, Debug, Clone)]
struct BaselineArgs {
    #[command(flatten)]
    common: LongArgs,
    #[arg(long, value_enum)]
    stage: Baseline,
}

#[derive(Args, Debug, Clone)]
struct CorpusArgs {
    #[command(flatten)]
    common: Common,
    /// Also write long clips.
    #[arg(long)]
    long: bool,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Render the training and held-out sprite corpora.
    MakeCorpus(CorpusArgs),
    /// Train the frame autoencoder.
    TrainAe(Common),
    /// Pretrain the semantic encoder and the evaluation probe.
    PretrainSem(Common),
    /// Stage one: latent generator with the semantic compressor.
    TrainLatentGen(LongArgs),
    /// Stage two: semantic generator on the frozen compressor.
    TrainSemGen(LongArgs),
    /// Matched-budget baseline (ct, ct-swin or vae2stage).
    TrainBaseline(BaselineArgs),
    /// Generate short clips from trained generators.
    Sample(Common),
    /// Generate long clips with the windowed layout.
    SampleLong(Common),
    /// Long-clip drift of the semantic pipeline against the windowed baseline.
    EvalDrift(Common),
    /// Sweep of the compressed semantic width.
    AblateCompression(Common),
    /// Semantic-space against compressed-VAE-space two-stage training.
    CompareSpaces(Common),
}

fn key_listing() -> String {
    let mut s = String::from("Config keys (defaults):\n");
    for (k, v) in Config::default().flat() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str("\nExit codes: 0 ok, 1 internal, 2 config, 3 missing dependency, 4 numeric failure.\n");
    s.push_str(&format!("Artifacts go to $SEMGEN_ROOT/runs/<name> ({ROOT_ENV} defaults to the working directory).\n"));
    s.push_str("With --long, dependency names deps.latent_gen and deps.sem_gen get a `_long` suffix.\n");
    s
}

fn command() -> clap::Command {
    let keys = key_listing();
    let mut cmd = Cli::command().after_long_help(keys.clone()).after_help(keys);
    // Subcommand help lists the keys too.
    let names: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_string()).collect();
    for n in names {
        cmd = cmd.mut_subcommand(n, |c| c.after_help(key_listing()));
    }
    cmd
}

/// Entry point of the binary; returns the process exit code.
pub fn main_entry() -> i32 {
    let root = std::env::var_os(ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    let argv: Vec<String> = std::env::args().collect();
    run_with_root(&argv, &root)
}

/// Parse `argv` (program name first) and run it against `root`.
pub fn run_with_root(argv: &[String], root: &Path) -> i32 {
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        2
                    } else {
                        0
                    }
                }
                _ => {
                    let msg = e.to_string();
                    let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("bad arguments");
                    eprintln!("error[config]: {}", line.trim_start_matches("error: "));
                    2
                }
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error[config]: {e}");
            return 2;
        }
    };
    match dispatch(cli.verb, root) {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", cat.as_str());
            cat.exit_code()
        }
    }
}

fn dispatch(verb: Verb, root: &Path) -> Result<()> {
    match verb {
        Verb::MakeCorpus(a) => make_corpus_cmd(&Ctx::new(root, &a.common, "corpus", &["corpus.seed"])?, a.long),
        Verb::TrainAe(c) => train_ae_cmd(&Ctx::new(root, &c, "ae", &["ae.train.seed"])?),
        Verb::PretrainSem(c) => pretrain_sem_cmd(&Ctx::new(root, &c, "sem", &["sem.train.seed"])?),
        Verb::TrainLatentGen(a) => {
            let sec = section("latent_gen", a.long);
            let ctx = Ctx::new(root, &a.common, &long_name("latent_gen", a.long), &[&format!("{sec}.train.seed")])?;
            train_latent_cmd(&ctx, StageId::LatentGen, a.long)
        }
        Verb::TrainBaseline(b) => {
            let stage = match b.stage {
                Baseline::Ct => StageId::BaselineCt,
                Baseline::CtSwin => StageId::BaselineCtSwin,
                Baseline::Vae2stage => StageId::BaselineVae2stage,
            };
            let long = b.common.long;
            let sec = section("latent_gen", long);
            let ctx = Ctx::new(root, &b.common.common, &long_name(stage.as_str(), long), &[&format!("{sec}.train.seed")])?;
            train_latent_cmd(&ctx, stage, long)
        }
        Verb::TrainSemGen(a) => {
            let sec = section("sem_gen", a.long);
            let ctx = Ctx::new(root, &a.common, &long_name("sem_gen", a.long), &[&format!("{sec}.train.seed")])?;
            train_sem_cmd(&ctx, a.long)
        }
        Verb::Sample(c) => sample_cmd(&Ctx::new(root, &c, "sample", &["generate.seed"])?, false),
        Verb::SampleLong(c) => sample_cmd(&Ctx::new(root, &c, "sample_long", &["generate.seed"])?, true),
        Verb::EvalDrift(c) => harness_cmd(&Ctx::new(root, &c, "drift", &[])?, Harness::Drift),
        Verb::AblateCompression(c) => harness_cmd(&Ctx::new(root, &c, "ablation", &[])?, Harness::Ablation),
        Verb::CompareSpaces(c) => harness_cmd(&Ctx::new(root, &c, "compare", &[])?, Harness::Compare),
    }
}

fn section(base: &str, long: bool) -> String {
    if long {
        format!("long.{base}")
    } else {
        base.to_string()
    }
}

fn long_name(base: &str, long: bool) -> String {
    if long {
        format!("{base}_long")
    } else {
        base.to_string()
    }
}

/// Resolved configuration and run directory of one command.
struct Ctx {
    root: PathBuf,
    cfg: Config,
    run: PathBuf,
}

impl Ctx {
    /// Defaults, then the config file, then `--seed` (into `seed_keys`, or
    /// `harness.seeds` when there are none), then `key=value` overrides.
    fn new(root: &Path, c: &Common, default_name: &str, seed_keys: &[&str]) -> Result<Self> {
        let mut cfg = Config::default();
        if let Some(p) = &c.config {
            cfg = cfg.apply(&Config::load(p)?)?;
        }
        if let Some(s) = c.seed {
            let mut a = BTreeMap::new();
            if seed_keys.is_empty() {
                a.insert("harness.seeds".to_string(), Value::from(vec![s]));
            }
            for k in seed_keys {
                a.insert(k.to_string(), Value::from(s));
            }
            cfg = cfg.apply(&a)?;
        }
        let mut a = BTreeMap::new();
        for o in &c.overrides {
            let (k, v) = parse_override(o)?;
            a.insert(k, v);
        }
        cfg = cfg.apply(&a)?;
        let name = c.name.clone().unwrap_or_else(|| default_name.to_string());
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(config_err!("run name `{name}` is not a plain directory name"));
        }
        let run = root.join("runs").join(&name);
        std::fs::create_dir_all(&run).map_err(|e| Error::io(&run, e))?;
        let ctx = Self {
            root: root.to_path_buf(),
            cfg,
            run,
        };
        let snap = ctx.file("config.json");
        std::fs::write(&snap, ctx.cfg.to_flat_json()).map_err(|e| Error::io(&snap, e))?;
        Ok(ctx)
    }

    fn file(&self, f: &str) -> PathBuf {
        self.run.join(f)
    }

    fn dep(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }

    fn load_ckpt(&self, run: &str, file: &str, kind: &str) -> Result<Checkpoint> {
        let p = self.dep(run).join(file);
        if !p.exists() {
            return Err(Error::Dependency(format!(
                "{} not found; run the command that produces `{run}` first",
                p.display()
            )));
        }
        let ck = Checkpoint::load(&p)?;
        ck.expect_kind(kind, &p)?;
        Ok(ck)
    }

    fn corpus(&self, split: &str) -> Result<Vec<Clip>> {
        let dir = self.dep(&self.cfg.deps.corpus).join(split);
        if !dir.join("header.json").exists() {
            return Err(Error::Dependency(format!(
                "corpus split {} not found; run make-corpus{} first",
                dir.display(),
                if split.contains("long") { " --long" } else { "" }
            )));
        }
        Ok(load_corpus(&dir)?.1)
    }

    fn ae(&self) -> Result<AutoEncoder> {
        AutoEncoder::from_checkpoint(&self.load_ckpt(&self.cfg.deps.ae, "ckpt_final.bin", autoencoder::CKPT_KIND)?)
    }

    fn encoder(&self) -> Result<SemanticEncoder> {
        SemanticEncoder::from_checkpoint(&self.load_ckpt(&self.cfg.deps.sem, "ckpt_final.bin", ENCODER_KIND)?)
    }

    fn latent(&self, run: &str) -> Result<LatentGenerator> {
        let ck = self.load_ckpt(run, "ckpt_final.bin", crate::pipeline::LATENT_GEN_KIND)?;
        let comp_path = self.dep(run).join("ckpt_final_compressor.bin");
        let comp = if comp_path.exists() { Some(Checkpoint::load(&comp_path)?) } else { None };
        LatentGenerator::from_checkpoints(&ck, comp.as_ref())
    }
}

/// Per-step wall clock, carried across resumes through loss.csv.
struct Clock {
    last: Instant,
    seconds: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LossRow {
    step: usize,
    loss: f64,
    seconds: f64,
}

impl Clock {
    fn resume(path: &Path, steps_done: usize) -> Self {
        let mut seconds: Vec<f64> = csv::Reader::from_path(path)
            .ok()
            .map(|mut r| r.deserialize::<LossRow>().filter_map(|x| x.ok()).map(|x| x.seconds).collect())
            .unwrap_or_default();
        seconds.resize(steps_done, f64::NAN);
        Self {
            last: Instant::now(),
            seconds,
        }
    }

    fn tick(&mut self) {
        let now = Instant::now();
        self.seconds.push((now - self.last).as_secs_f64());
        self.last = now;
    }

    fn write(&self, path: &Path, losses: &[f64]) -> Result<()> {
        let rows: Vec<LossRow> = losses
            .iter()
            .enumerate()
            .map(|(i, &loss)| LossRow {
                step: i + 1,
                loss,
                seconds: self.seconds.get(i).copied().unwrap_or(f64::NAN),
            })
            .collect();
        write_csv(path, &rows)
    }
}

fn due(step: usize, every: usize, total: usize) -> bool {
    step == total || (every > 0 && step % every == 0)
}

fn adam_of(ck: &Checkpoint, path: &Path) -> Result<crate::numerics::AdamState> {
    ck.adam.clone().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: "resume checkpoint has no optimiser state".into(),
    })
}

fn make_corpus_cmd(ctx: &Ctx, long: bool) -> Result<()> {
    let lab = ctx.cfg.lab();
    lab.corpus.validate()?;
    let mut hashes = BTreeMap::new();
    let mut splits = vec![("train", lab.corpus.clone(), ClipLength::Short), ("eval", lab.eval_corpus(), ClipLength::Short)];
    if long {
        splits.push(("long_train", lab.corpus.clone(), ClipLength::Long));
        splits.push(("long_eval", lab.eval_corpus(), ClipLength::Long));
    }
    for (split, cfg, len) in splits {
        let clips = make_corpus(&cfg, len)?;
        save_corpus(&ctx.file(split), &cfg, &clips)?;
        hashes.insert(split.to_string(), corpus_hash(&clips));
    }
    write_json(&ctx.file("summary.json"), &hashes)?;
    println!("corpus {} train hash {}", ctx.run.display(), hashes["train"]);
    Ok(())
}

fn train_ae_cmd(ctx: &Ctx) -> Result<()> {
    let clips = ctx.corpus("train")?;
    let videos: Vec<&Video> = clips.iter().map(|c| &c.video).collect();
    let cfg = &ctx.cfg.ae;
    let seed = cfg.train.seed;
    let mut ae = AutoEncoder::new(cfg, CHANNELS, &mut Rng::new(seed));
    let latest = ctx.file("ckpt_latest.bin");
    let mut state = if latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        ck.expect_kind(autoencoder::CKPT_KIND, &latest)?;
        ae.store.load_from(&ck.params.to_entries())?;
        TrainState {
            step: ck.step as usize,
            adam: vec![adam_of(&ck, &latest)?],
            losses: ck.losses.clone(),
        }
    } else {
        TrainState::new(&[&ae.store])
    };
    if state.step > 0 {
        log::info!("resuming autoencoder at step {}", state.step);
    }
    let mut clock = Clock::resume(&ctx.file("loss.csv"), state.step);
    let tmpl = ae.clone();
    let every = cfg.train.checkpoint_every;
    let total = cfg.train.steps;
    train_autoencoder_from(&mut ae, &mut state, &videos, |store, st| {
        clock.tick();
        if due(st.step, every, total) {
            let mut m = tmpl.clone();
            m.store = store.clone();
            let mut ck = m.checkpoint(seed);
            ck.step = st.step as u64;
            ck.adam = Some(st.adam[0].clone());
            ck.losses = st.losses.clone();
            ck.save(&latest)?;
            clock.write(&ctx.file("loss.csv"), &st.losses)?;
        }
        Ok(())
    })?;
    clock.write(&ctx.file("loss.csv"), &state.losses)?;
    ae.store.freeze();
    let mut ck = ae.checkpoint(seed);
    ck.step = state.step as u64;
    ck.losses = state.losses.clone();
    ck.save(&ctx.file("ckpt_final.bin"))?;
    let psnr = autoencoder::reconstruction_psnr(&ae, &clips[0].video)?;
    write_json(&ctx.file("summary.json"), &serde_json::json!({ "psnr_clip0": psnr, "steps": state.step }))?;
    println!("autoencoder {} psnr {psnr:.2} dB", ctx.run.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SemSummary {
    encoder_train: FactorReport,
    probe_eval: FactorReport,
    config_hash: String,
}

fn json_hash<T: Serialize>(v: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("plain data")))
}

/// Pretraining restarts from scratch unless a finished result for the same
/// configuration exists.
fn pretrain_sem_cmd(ctx: &Ctx) -> Result<()> {
    let lab = ctx.cfg.lab();
    let config_hash = json_hash(&(&lab.sem, &lab.probe));
    let summary_path = ctx.file("summary.json");
    if let Ok(text) = std::fs::read_to_string(&summary_path) {
        if let Ok(s) = serde_json::from_str::<SemSummary>(&text) {
            if s.config_hash == config_hash && ctx.file("ckpt_final.bin").exists() {
                println!("semantic encoder {} already trained", ctx.run.display());
                return Ok(());
            }
        }
    }
    let clips = ctx.corpus("train")?;
    let eval = ctx.corpus("eval")?;
    let header = clips.first().ok_or_else(|| config_err!("empty corpus"))?;
    let mut lab = lab;
    lab.corpus.frames = header.video.frames;
    lab.corpus.height = header.video.height;
    lab.corpus.width = header.video.width;
    let refs: Vec<&Clip> = clips.iter().collect();
    let vocab = corpus_vocab(ctx)?;
    let (enc, encoder_train, losses) = pretrain_semantic_encoder(&refs, &lab.sem, lab.geometry(), vocab)?;
    let (probe, _) = train_factor_net(&refs, &lab.probe.net, lab.probe_geometry()?, vocab)?;
    let eval_refs: Vec<&Clip> = eval.iter().collect();
    let probe_eval = probe.report(&eval_refs)?;
    let mut ck = enc.checkpoint(ENCODER_KIND, lab.sem.train.seed);
    ck.step = losses.len() as u64;
    ck.losses = losses.clone();
    ck.save(&ctx.file("ckpt_final.bin"))?;
    let (t, h) = probe.checkpoints(lab.probe.net.train.seed);
    t.save(&ctx.file("ckpt_probe_trunk.bin"))?;
    h.save(&ctx.file("ckpt_probe_heads.bin"))?;
    let clock = Clock::resume(Path::new(""), 0);
    clock.write(&ctx.file("loss.csv"), &losses)?;
    write_json(
        &summary_path,
        &SemSummary {
            encoder_train,
            probe_eval: probe_eval.clone(),
            config_hash,
        },
    )?;
    println!(
        "semantic encoder {} probe held-out shape {:.3} motion {:.3}",
        ctx.run.display(),
        probe_eval.shape_acc,
        probe_eval.motion_acc
    );
    Ok(())
}

fn corpus_vocab(ctx: &Ctx) -> Result<crate::synthdata::VocabSizes> {
    let dir = ctx.dep(&ctx.cfg.deps.corpus).join("train").join("header.json");
    let text = std::fs::read_to_string(&dir).map_err(|e| Error::io(&dir, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: dir.clone(),
        reason: e.to_string(),
    })?;
    let cfg: crate::synthdata::CorpusConfig = serde_json::from_value(v["config"].clone()).map_err(|e| Error::Format {
        path: dir,
        reason: e.to_string(),
    })?;
    Ok(cfg.vocab_sizes())
}

fn training_data(ctx: &Ctx, source: crate::pipeline::SemSource, long: bool) -> Result<TrainingData> {
    let clips = ctx.corpus(if long { "long_train" } else { "train" })?;
    let ae = ctx.ae()?;
    let enc = ctx.encoder()?;
    prepare(&clips, &ae, &enc, source, corpus_vocab(ctx)?)
}

fn save_latent(gen: &LatentGenerator, seed: u64, st: &TrainState, main: &Path, comp: &Path, with_adam: bool) -> Result<()> {
    if let Some(c) = &gen.compressor {
        let mut k = c.checkpoint(seed);
        k.step = st.step as u64;
        if with_adam {
            k.adam = Some(st.adam[1].clone());
        }
        k.save(comp)?;
    }
    let mut ck = gen.checkpoint(seed);
    ck.step = st.step as u64;
    ck.losses = st.losses.clone();
    if with_adam {
        ck.adam = Some(st.adam[0].clone());
    }
    ck.save(main)
}

/// The semantic run matched against each baseline.
fn matched_run(ctx: &Ctx, stage: StageId, long: bool) -> Option<String> {
    match stage {
        StageId::LatentGen | StageId::SemGen => None,
        _ => Some(long_name(&ctx.cfg.deps.latent_gen, long)),
    }
}

fn train_latent_cmd(ctx: &Ctx, stage: StageId, long: bool) -> Result<()> {
    let scfg = if long { &ctx.cfg.long.latent_gen } else { &ctx.cfg.latent_gen };
    scfg.validate(stage)?;
    let data = training_data(ctx, stage.source(), long)?;
    let seed = scfg.train.seed;
    let fairness = FairnessRecord::new(&data.corpus_hash, &scfg.train, data.len());
    if let Some(other) = matched_run(ctx, stage, long) {
        let p = ctx.dep(&other).join("fairness.json");
        if let Ok(text) = std::fs::read_to_string(&p) {
            let theirs: FairnessRecord = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: p.clone(),
                reason: e.to_string(),
            })?;
            theirs.check_matched(&fairness)?;
        } else {
            log::warn!("no matched run `{other}` yet; fairness unchecked");
        }
    }
    let mut gen = LatentGenerator::new(stage, scfg, &ctx.cfg.compressor, &data, seed)?;
    let latest = ctx.file("ckpt_latest.bin");
    let latest_comp = ctx.file("ckpt_latest_compressor.bin");
    let mut state = if latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        ck.expect_kind(crate::pipeline::LATENT_GEN_KIND, &latest)?;
        gen.dit.store.load_from(&ck.params.to_entries())?;
        let mut adam = vec![adam_of(&ck, &latest)?];
        if let Some(c) = &mut gen.compressor {
            let k = Checkpoint::load(&latest_comp)?;
            if k.step != ck.step {
                return Err(Error::Format {
                    path: latest_comp,
                    reason: format!("compressor at step {}, generator at step {}", k.step, ck.step),
                });
            }
            c.store.load_from(&k.params.to_entries())?;
            adam.push(adam_of(&k, &latest_comp)?);
        }
        log::info!("resuming {} at step {}", stage.as_str(), ck.step);
        TrainState {
            step: ck.step as usize,
            adam,
            losses: ck.losses.clone(),
        }
    } else {
        TrainState::new(&gen.stores())
    };
    let mut clock = Clock::resume(&ctx.file("loss.csv"), state.step);
    let tmpl = gen.clone();
    let (every, total) = (scfg.train.checkpoint_every, scfg.train.steps);
    train_latent_generator(&mut gen, &data, &scfg.train, ctx.cfg.compressor.kl_weight, &mut state, |stores, st| {
        clock.tick();
        if due(st.step, every, total) {
            let mut m = tmpl.clone();
            m.dit.store = stores[0].clone();
            if let Some(c) = &mut m.compressor {
                c.store = stores[1].clone();
            }
            save_latent(&m, seed, st, &latest, &latest_comp, true)?;
            clock.write(&ctx.file("loss.csv"), &st.losses)?;
        }
        Ok(())
    })?;
    clock.write(&ctx.file("loss.csv"), &state.losses)?;
    gen.freeze();
    save_latent(&gen, seed, &state, &ctx.file("ckpt_final.bin"), &ctx.file("ckpt_final_compressor.bin"), false)?;
    write_json(&ctx.file("fairness.json"), &fairness)?;
    let idx: Vec<usize> = (0..ctx.cfg.harness.eval_loss_clips.min(data.len())).collect();
    let eval_loss = latent_eval_loss(&gen, &data, &idx, 0xE7A1)?;
    write_json(
        &ctx.file("summary.json"),
        &serde_json::json!({
            "stage": stage.as_str(),
            "steps": state.step,
            "eval_loss": eval_loss,
            "token_ratio": data.token_ratio(),
            "corpus_hash": data.corpus_hash,
        }),
    )?;
    println!("{} {} eval loss {eval_loss:.4}", stage.as_str(), ctx.run.display());
    Ok(())
}

fn train_sem_cmd(ctx: &Ctx, long: bool) -> Result<()> {
    let scfg = if long { &ctx.cfg.long.sem_gen } else { &ctx.cfg.sem_gen };
    scfg.validate(StageId::SemGen)?;
    let stage_one = ctx.latent(&long_name(&ctx.cfg.deps.latent_gen, long))?;
    let data = training_data(ctx, stage_one.source, long)?;
    if stage_one.frozen != data.frozen {
        return Err(config_err!("stage-one run was trained against different frozen autoencoder or encoder checkpoints"));
    }
    let targets = semantic_targets(&stage_one, &data)?;
    let seed = scfg.train.seed;
    let mut gen = SemanticGenerator::new(scfg, &targets, &data, seed)?;
    let latest = ctx.file("ckpt_latest.bin");
    let mut state = if latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        ck.expect_kind(crate::pipeline::SEM_GEN_KIND, &latest)?;
        gen.dit.store.load_from(&ck.params.to_entries())?;
        log::info!("resuming sem_gen at step {}", ck.step);
        TrainState {
            step: ck.step as usize,
            adam: vec![adam_of(&ck, &latest)?],
            losses: ck.losses.clone(),
        }
    } else {
        TrainState::new(&[&gen.dit.store])
    };
    let mut clock = Clock::resume(&ctx.file("loss.csv"), state.step);
    let tmpl = gen.clone();
    let (every, total) = (scfg.train.checkpoint_every, scfg.train.steps);
    train_semantic_generator(&mut gen, &stage_one, &targets, &data, &scfg.train, &mut state, |stores, st| {
        clock.tick();
        if due(st.step, every, total) {
            let mut m = tmpl.clone();
            m.dit.store = stores[0].clone();
            let mut ck = m.checkpoint(seed);
            ck.step = st.step as u64;
            ck.adam = Some(st.adam[0].clone());
            ck.losses = st.losses.clone();
            ck.save(&latest)?;
            clock.write(&ctx.file("loss.csv"), &st.losses)?;
        }
        Ok(())
    })?;
    clock.write(&ctx.file("loss.csv"), &state.losses)?;
    gen.dit.store.freeze();
    let mut ck = gen.checkpoint(seed);
    ck.step = state.step as u64;
    ck.losses = state.losses.clone();
    ck.save(&ctx.file("ckpt_final.bin"))?;
    let idx: Vec<usize> = (0..ctx.cfg.harness.eval_loss_clips.min(data.len())).collect();
    let eval_loss = semantic_eval_loss(&gen, &targets, &data, &idx, 0xE7A1)?;
    write_json(
        &ctx.file("summary.json"),
        &serde_json::json!({ "steps": state.step, "eval_loss": eval_loss, "compressor_hash": gen.compressor_hash }),
    )?;
    println!("sem_gen {} eval loss {eval_loss:.4}", ctx.run.display());
    Ok(())
}

#[derive(Serialize)]
struct SampleRecord {
    index: usize,
    file: String,
    png: String,
    sha256: String,
    spec: crate::synthdata::FactorSpec,
}

fn sample_cmd(ctx: &Ctx, long: bool) -> Result<()> {
    let ae = ctx.ae()?;
    let latent = ctx.latent(&long_name(&ctx.cfg.deps.latent_gen, long))?;
    let sem = if latent.compressor.is_some() {
        let ck = ctx.load_ckpt(&long_name(&ctx.cfg.deps.sem_gen, long), "ckpt_final.bin", crate::pipeline::SEM_GEN_KIND)?;
        Some(SemanticGenerator::from_checkpoint(&ck)?)
    } else {
        None
    };
    let eval = ctx.corpus(if long { "long_eval" } else { "eval" })?;
    let n = ctx.cfg.sample.count.min(eval.len());
    if n == 0 {
        return Err(config_err!("sample.count must be positive"));
    }
    let specs: Vec<_> = eval.iter().take(n).map(|c| c.spec.clone()).collect();
    let (w, h) = (eval[0].video.width, eval[0].video.height);
    let conds: Vec<_> = specs.iter().map(|s| crate::dit::Condition::from_spec(s, w, h)).collect();
    let opts: &GenerateOptions = &ctx.cfg.generate;
    let videos = if long {
        generate_long(&conds, sem.as_ref(), &latent, &ae, opts)?
    } else {
        generate(&conds, sem.as_ref(), &latent, &ae, opts)?
    };
    let dir = ctx.file("samples");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut index = Vec::new();
    for (i, (v, spec)) in videos.iter().zip(specs).enumerate() {
        let bytes = v.to_le_bytes();
        let file = format!("sample_{i}.bin");
        let png = format!("sample_{i}.png");
        let p = dir.join(&file);
        std::fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
        write_filmstrip(&dir.join(&png), v, ctx.cfg.sample.png_scale)?;
        let sha = hex::encode(Sha256::digest(&bytes));
        println!("{file} {sha}");
        index.push(SampleRecord {
            index: i,
            file,
            png,
            sha256: sha,
            spec,
        });
    }
    let first = &videos[0];
    write_json(
        &dir.join("index.json"),
        &serde_json::json!({
            "frames": first.frames, "channels": first.channels, "height": first.height,
            "width": first.width, "fps": first.fps, "seed": opts.seed, "samples": index,
        }),
    )
}

enum Harness {
    Compare,
    Ablation,
    Drift,
}

/// Lab over the frozen corpus, autoencoder, encoder and probe of earlier runs.
fn lab_from_deps(ctx: &Ctx) -> Result<Lab> {
    let clips = ctx.corpus("train")?;
    let eval = ctx.corpus("eval")?;
    let ae = ctx.ae()?;
    let encoder = ctx.encoder()?;
    let trunk = ctx.load_ckpt(&ctx.cfg.deps.sem, "ckpt_probe_trunk.bin", crate::semantics::PROBE_TRUNK_KIND)?;
    let heads = ctx.load_ckpt(&ctx.cfg.deps.sem, "ckpt_probe_heads.bin", crate::semantics::PROBE_HEADS_KIND)?;
    let probe = FactorNet::from_checkpoints(&trunk, &heads)?;
    let summary: Option<SemSummary> = std::fs::read_to_string(ctx.dep(&ctx.cfg.deps.sem).join("summary.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let encoder_report = summary.map(|s| s.encoder_train).unwrap_or_default();
    let eval_refs: Vec<&Clip> = eval.iter().collect();
    let probe_report = probe.report(&eval_refs)?;
    let header = ctx.dep(&ctx.cfg.deps.corpus).join("train").join("header.json");
    let text = std::fs::read_to_string(&header).map_err(|e| Error::io(&header, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: header.clone(),
        reason: e.to_string(),
    })?;
    let corpus = serde_json::from_value(v["config"].clone()).map_err(|e| Error::Format {
        path: header,
        reason: e.to_string(),
    })?;
    let cfg = LabConfig {
        corpus,
        eval_clips: eval.len().min(ctx.cfg.harness.eval_clips),
        ..ctx.cfg.lab()
    };
    Ok(Lab::from_parts(cfg, clips, eval, ae, encoder, encoder_report, probe, probe_report))
}

fn strips(ctx: &Ctx, lab: &Lab, tag: &str, snap: &crate::eval::Snapshot, conds: &[crate::dit::Condition], seed: u64) -> Result<()> {
    let exp = ctx.cfg.experiment();
    let videos = lab.sample(snap, conds, &exp, seed)?;
    for (i, v) in videos.iter().enumerate() {
        write_filmstrip(&ctx.file(&format!("samples/{tag}_{i}.png")), v, ctx.cfg.sample.png_scale)?;
    }
    Ok(())
}

fn harness_cmd(ctx: &Ctx, which: Harness) -> Result<()> {
    let lab = lab_from_deps(ctx)?;
    let exp = ctx.cfg.experiment();
    let seed0 = *exp.seeds.first().ok_or_else(|| config_err!("harness.seeds is empty"))?;
    let specs = lab.eval_specs(2);
    let conds = lab.conditions(&specs);
    let started = Instant::now();
    match which {
        Harness::Compare => {
            let r = convergence_experiment(&lab, &exp)?;
            write_csv(&ctx.file("report.csv"), &r.rows)?;
            write_json(&ctx.file("report.json"), &r)?;
            for stage in [StageId::LatentGen, StageId::BaselineVae2stage] {
                let spec = SystemSpec {
                    stage,
                    d_c: exp.compressor.d_c,
                };
                let run = lab.system(stage, &exp, spec.d_c, seed0, false, &r.steps)?;
                for snap in &run.snapshots {
                    strips(ctx, &lab, &format!("{}_step{}", spec.label(), snap.step), snap, &conds, seed0)?;
                }
            }
            println!("{}: {}", r.final_gate.name, verdict(r.final_gate.passed));
            println!("{}: {}", r.early_gate.name, verdict(r.early_gate.passed));
        }
        Harness::Ablation => {
            let r = compression_ablation(&lab, &exp)?;
            write_csv(&ctx.file("report.csv"), &r.rows)?;
            write_json(&ctx.file("report.json"), &r)?;
            let total = exp.latent.train.steps;
            let early = ((total as f64 * exp.early_fraction).round() as usize).clamp(1, total);
            let grid: Vec<usize> = if early < total { vec![early, total] } else { vec![total] };
            for &d_c in &r.sweep {
                let run = lab.system(StageId::LatentGen, &exp, d_c, seed0, false, &grid)?;
                strips(ctx, &lab, &format!("dc{d_c}"), run.last(), &conds, seed0)?;
            }
            println!("{}: {}", r.gate.name, verdict(r.gate.passed));
        }
        Harness::Drift => {
            let r = drift_experiment(&lab, &exp)?;
            write_csv(&ctx.file("report.csv"), &r.rows)?;
            write_json(&ctx.file("report.json"), &r)?;
            let long = lab.long_clips()?;
            let lspecs: Vec<_> = long.1.iter().take(1).map(|c| c.spec.clone()).collect();
            let lconds = lab.conditions(&lspecs);
            for (stage, d_c) in [(StageId::LatentGen, exp.compressor.d_c), (StageId::BaselineCtSwin, 0)] {
                let run = lab.system(stage, &exp, d_c, seed0, true, &[])?;
                strips(ctx, &lab, &SystemSpec { stage, d_c }.label(), run.last(), &lconds, seed0)?;
            }
            println!("{}: {}", r.gate.name, verdict(r.gate.passed));
        }
    }
    log::info!("harness finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn verdict(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "fail"
    }
}
