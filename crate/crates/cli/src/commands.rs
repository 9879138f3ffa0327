use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use xlign_core::corpus::{generate, LanguageCode};
use xlign_core::eval::{SweepGrid, SweepResult};
use xlign_core::model::Model;
use xlign_core::peft::PeftVariant;
use xlign_core::pipeline::{self, CorpusSource, RunConfig};
use xlign_core::trainer::{fingerprint, Checkpoint, Scenario};
use xlign_core::{Error, Result};

use crate::output::OutputDir;
use crate::Command;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub jobs: usize,
    pub seed: Option<u64>,
}

impl Context {
    /// Reads and validates the configuration. A `--seed` (or `XLIGN_SEED`)
    /// replaces the corpus seed for `gen-corpus` and the training seed for
    /// everything else.
    pub fn load(config: Option<&Path>, seed: Option<u64>, jobs: usize, out: Option<PathBuf>, command: &Command) -> Result<Self> {
        let mut cfg = match config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                let mut cfg = RunConfig::from_json(&text)?;
                resolve_paths(&mut cfg, path.parent().unwrap_or(Path::new(".")));
                cfg
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = seed {
            match (command, &mut cfg.corpus) {
                (Command::GenCorpus, CorpusSource::Generate(spec)) => spec.seed = seed,
                (Command::GenCorpus, CorpusSource::Files { .. }) => {}
                _ => cfg.train.seed = seed,
            }
        }
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        cfg.validate()?;
        let out = out
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("xlign-out"));
        Ok(Self { cfg, out, jobs, seed })
    }
}

fn resolve_paths(cfg: &mut RunConfig, base: &Path) {
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    if let CorpusSource::Files { dataset, images, .. } = &mut cfg.corpus {
        fix(dataset);
        fix(images);
    }
    if let Some(p) = &mut cfg.init_checkpoint {
        fix(p);
    }
    if let Some(p) = &mut cfg.output_dir {
        fix(p);
    }
}

/// Prints the error, records it in `error.txt`, and picks the exit code:
/// 2 for bad configuration or inputs, 1 for failures while running.
pub fn report_failure(ctx: &Context, err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    if fs::create_dir_all(&ctx.out).is_ok() {
        let _ = fs::write(ctx.out.join("error.txt"), format!("{err}\n"));
        if let Error::Diverged { checkpoint, .. } = err {
            let path = ctx.out.join("diverged_checkpoint.json");
            if checkpoint.save(&path).is_ok() {
                eprintln!("last finite state saved to {}", path.display());
            }
        }
    }
    if err.is_validation() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn config_json(cfg: &RunConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)? + "\n")
}

pub fn gen_corpus(ctx: &Context) -> Result<ExitCode> {
    let CorpusSource::Generate(spec) = &ctx.cfg.corpus else {
        return Err(Error::Config("gen-corpus needs a generated corpus source".into()));
    };
    let g = generate(spec)?;
    let mut out = OutputDir::create(&ctx.out)?;
    out.write("dataset.tsv", &g.dataset.to_tsv())?;
    out.write("images.tsv", &g.bank.to_tsv())?;
    out.write("config.json", &config_json(&ctx.cfg)?)?;
    out.finish("gen-corpus")?;
    println!(
        "{} items, {} languages, {} images -> {}",
        g.dataset.len(),
        g.dataset.languages().len(),
        g.bank.len(),
        ctx.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(ctx: &Context) -> Result<ExitCode> {
    let cfg = &ctx.cfg;
    let corpus = pipeline::load_corpus(cfg)?;
    let base = pipeline::base_encoder(cfg, &corpus)?;
    let mut out = OutputDir::create(&ctx.out)?;
    out.write("config.json", &config_json(cfg)?)?;
    let hash = fingerprint(cfg);
    let base_model = Model::frozen(base.encoder.clone());
    out.write(
        "base.json",
        &Checkpoint::full(&base_model, &hash, 0, base.dev_r1.unwrap_or(0.0)).to_json()?,
    )?;
    if let Some(trace) = &base.trace {
        out.write("traces/pretrain.csv", &trace.to_csv())?;
    }
    let (runs, report) = pipeline::run_training(cfg, &corpus, &base.encoder)?;
    for run in &runs {
        out.write(&format!("checkpoints/{}.json", run.language), &run.checkpoint.to_json()?)?;
        out.write(&format!("traces/{}.csv", run.language), &run.trace.to_csv())?;
    }
    out.write("report.csv", &report.to_csv())?;
    out.write("report.json", &report.to_json()?)?;
    out.finish("train")?;
    print!("{}", report.to_csv());
    Ok(ExitCode::SUCCESS)
}

/// Without `checkpoints`, scores the base encoder (zero-shot). With it,
/// scores each `<dir>/checkpoints/<lang>.json` on top of `<dir>/base.json`.
pub fn eval(ctx: &Context, checkpoints: Option<&Path>) -> Result<ExitCode> {
    let corpus = pipeline::load_corpus(&ctx.cfg)?;
    let report = match checkpoints {
        None => {
            let base = pipeline::base_encoder(&ctx.cfg, &corpus)?;
            pipeline::run_zero_shot(&ctx.cfg, &corpus, &base.encoder)?
        }
        Some(dir) => {
            let mut cfg = ctx.cfg.clone();
            cfg.init_checkpoint = Some(dir.join("base.json"));
            if cfg.train.scenario == Scenario::ZeroShot {
                cfg.train.scenario = Scenario::FewShot;
            }
            let base = pipeline::base_encoder(&cfg, &corpus)?;
            let ckpts = pipeline::run_languages(&cfg, &corpus)
                .into_iter()
                .map(|lang| {
                    let path = dir.join("checkpoints").join(format!("{lang}.json"));
                    let ckpt = Checkpoint::load(&path)
                        .map_err(|e| Error::Config(format!("cannot load {}: {e}", path.display())))?;
                    Ok((lang, ckpt))
                })
                .collect::<Result<Vec<_>>>()?;
            pipeline::evaluate_checkpoints(&cfg, &corpus, &base.encoder, &ckpts)?
        }
    };
    let mut out = OutputDir::create(&ctx.out)?;
    out.write("config.json", &config_json(&ctx.cfg)?)?;
    out.write("report.csv", &report.to_csv())?;
    out.write("report.json", &report.to_json()?)?;
    out.finish("eval")?;
    print!("{}", report.to_csv());
    Ok(ExitCode::SUCCESS)
}

pub fn sweep(ctx: &Context) -> Result<ExitCode> {
    let cfg = &ctx.cfg;
    let grid = cfg.sweep.clone().unwrap_or_else(|| match cfg.peft.variant {
        PeftVariant::Full => SweepGrid::full_finetune_default(),
        _ => SweepGrid::peft_default(),
    });
    let corpus = pipeline::load_corpus(cfg)?;
    let base = pipeline::base_encoder(cfg, &corpus)?;
    let result = pipeline::run_sweep(cfg, &corpus, &base.encoder, &grid, ctx.jobs)?;
    let best = best_configs(cfg, &result, &pipeline::run_languages(cfg, &corpus));
    let mut out = OutputDir::create(&ctx.out)?;
    out.write("config.json", &config_json(cfg)?)?;
    out.write("sweep.csv", &result.to_csv())?;
    out.write("best_config.json", &(serde_json::to_string_pretty(&best)? + "\n"))?;
    out.finish("sweep")?;
    print!("{}", result.to_csv());
    Ok(ExitCode::SUCCESS)
}

fn best_configs(cfg: &RunConfig, result: &SweepResult, langs: &[LanguageCode]) -> BTreeMap<String, RunConfig> {
    langs
        .iter()
        .filter_map(|l| pipeline::selected_config(cfg, result, l).map(|c| (l.to_string(), c)))
        .collect()
}

pub fn gradcheck(ctx: &Context) -> Result<ExitCode> {
    let mut g = ctx.cfg.gradcheck.clone().unwrap_or_default();
    if let Some(seed) = ctx.seed {
        g.seeds = vec![seed];
    }
    let rows = pipeline::gradcheck_suite(&g)?;

    let mut csv = String::from("combo,variant,seed,max_rel_error,passed\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{:.3e},{}\n", r.combo, r.variant, r.seed, r.max_rel_error, r.passed));
    }
    let mut out = OutputDir::create(&ctx.out)?;
    out.write("gradcheck.csv", &csv)?;
    out.finish("gradcheck")?;

    // Worst error over seeds for each (variant, combo).
    let mut worst: BTreeMap<(&str, char), (f64, bool)> = BTreeMap::new();
    for r in &rows {
        let e = worst.entry((r.variant.as_str(), r.combo)).or_insert((0.0, true));
        e.0 = e.0.max(r.max_rel_error);
        e.1 &= r.passed;
    }
    let combos: Vec<char> = {
        let mut c: Vec<char> = rows.iter().map(|r| r.combo).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    print!("{:<12}", "variant");
    for c in &combos {
        print!(" {:>14}", c);
    }
    println!();
    let mut variants: Vec<&str> = Vec::new();
    for r in &rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    for v in variants {
        print!("{v:<12}");
        for &c in &combos {
            let (err, ok) = worst[&(v, c)];
            print!(" {:>9.2e} {:>4}", err, if ok { "ok" } else { "FAIL" });
        }
        println!();
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed (tol {:e})", rows.len() - failed, rows.len(), g.tol);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
