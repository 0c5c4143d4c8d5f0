use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use speechlm::config::RunConfig;
use speechlm::distill;
use speechlm::eval::{self, AblationConfigs, PreferenceReport, ProbeKind, StageAccuracy};
use speechlm::interleave;
use speechlm::model::{read_journal, JournalWriter, ModelState, TrainData, Trainer};
use speechlm::pipeline::{self, Distilled};
use speechlm::rng;
use speechlm::scoring;
use speechlm::synthgen::{Codebook, Factor, World};
use speechlm::vocab::UnifiedVocab;
use speechlm::{corpus, Error, Result};

use crate::artifacts::{self, Provenance};
use crate::{Cli, Command, FactorArg, ProbeArg};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Resume { checkpoint, .. } if cli.config.is_none() => {
            // Without --config the run continues under the config it was started with.
            let base = artifacts::manifest_config(checkpoint)?.to_toml()?;
            dispatch(cli, &RunConfig::from_toml_str(&base, &cli.overrides)?)
        }
        _ => dispatch(cli, &RunConfig::load(cli.config.as_deref(), &cli.overrides)?),
    }
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    match &cli.command {
        Command::FitCodebook { out } => fit_codebook(cfg, out),
        Command::GenData { codebook, out } => gen_data(cfg, codebook, out),
        Command::FitCentroids { corpus, out } => fit_centroids(cfg, corpus, out),
        Command::InitEmbed { centroids, out } => init_embed(cfg, centroids, out),
        Command::Train { init, corpus, out_dir } => train(cfg, init, corpus, out_dir, false),
        Command::Resume {
            checkpoint,
            corpus,
            out_dir,
        } => train(cfg, checkpoint, corpus, out_dir, true),
        Command::Score {
            checkpoint,
            input,
            out,
            per_token,
        } => score(cfg, checkpoint, input, out.as_deref(), *per_token),
        Command::EvalPref {
            checkpoint,
            codebook,
            factor,
            out,
            dump_pairs,
        } => eval_pref(cli, cfg, checkpoint, codebook, factor, out.as_deref(), dump_pairs.as_deref()),
        Command::Ablate {
            init,
            corpus,
            codebook,
            seeds,
            factor,
            out,
        } => ablate(cli, cfg, init, corpus, codebook, seeds, factor, out.as_deref()),
        Command::Probe {
            checkpoints,
            stages,
            codebook,
            task,
            out,
        } => probe(cli, cfg, checkpoints, stages, codebook, *task, out.as_deref()),
    }
}

fn factors(args: &[FactorArg]) -> Vec<Factor> {
    if args.is_empty() {
        Factor::ALL.to_vec()
    } else {
        args.iter().map(|&f| f.into()).collect()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn emit<T: Serialize>(cli: &Cli, report: &T, text: impl FnOnce() -> String) -> Result<()> {
    if cli.json {
        println!("{}", serde_json::to_string_pretty(report)?);
    } else {
        print!("{}", text());
    }
    Ok(())
}

/// World and vocabulary from the config, codebook from its artifact.
fn world_with(cfg: &RunConfig, prov: &mut Provenance, codebook: &Path) -> Result<(World, Codebook, UnifiedVocab)> {
    let world = pipeline::world(cfg)?;
    let cb = artifacts::load_codebook(&prov.input(codebook)?)?;
    let vocab = pipeline::vocab(&world, cb.n_codes())?;
    Ok((world, cb, vocab))
}

fn load_state(prov: &mut Provenance, path: &Path) -> Result<ModelState> {
    ModelState::load_checkpoint(&prov.input(path)?)
}

fn fit_codebook(cfg: &RunConfig, out: &Path) -> Result<()> {
    let prov = Provenance::new("fit-codebook", cfg);
    let world = pipeline::world(cfg)?;
    let cb = pipeline::codebook(cfg, &world)?;
    artifacts::save_codebook(&cb, out)?;
    prov.output(out)?;
    log::info!("codebook {} codes × {} dims -> {}", cb.n_codes(), cb.dim(), out.display());
    Ok(())
}

fn gen_data(cfg: &RunConfig, codebook: &Path, out: &Path) -> Result<()> {
    let mut prov = Provenance::new("gen-data", cfg);
    let world = pipeline::world(cfg)?;
    let cb = artifacts::load_codebook(&prov.input(codebook)?)?;
    let streams = pipeline::corpus(cfg, &world, &cb)?;
    corpus::write(out, &streams, true)?;
    prov.output(out)
}

fn fit_centroids(cfg: &RunConfig, corpus_path: &Path, out: &Path) -> Result<()> {
    let mut prov = Provenance::new("fit-centroids", cfg);
    let streams = corpus::read(&prov.input(corpus_path)?)?;
    let c = distill::fit_centroids(&streams, cfg.codebook.n_codes)?;
    artifacts::save_centroids(&c, out)?;
    prov.output(out)
}

fn init_embed(cfg: &RunConfig, centroids: &Path, out: &Path) -> Result<()> {
    let mut prov = Provenance::new("init-embed", cfg);
    let c = artifacts::load_centroids(&prov.input(centroids)?)?;
    let world = pipeline::world(cfg)?;
    let vocab = pipeline::vocab(&world, c.n_codes())?;
    let distilled: Distilled = pipeline::distill_from_centroids(cfg, c)?;
    let state = pipeline::init_state(cfg, &vocab, &distilled)?;
    state.save_checkpoint(out)?;
    prov.output(out)
}

fn checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.ckpt")
}

/// Training up to `train.steps`, writing periodic checkpoints, probe-stage
/// checkpoints at 10/40/100% and the loss journal into `out_dir`. A resumed
/// run drops journal entries past its checkpoint before appending.
fn train(cfg: &RunConfig, start: &Path, corpus_path: &Path, out_dir: &Path, resume: bool) -> Result<()> {
    let mut prov = Provenance::new(if resume { "resume" } else { "train" }, cfg);
    let mut state = load_state(&mut prov, start)?;
    let streams = corpus::read(&prov.input(corpus_path)?)?;
    let world = pipeline::world(cfg)?;
    let vocab = pipeline::vocab(&world, state.config.n_codes)?;
    let expected = pipeline::model_config(cfg, &vocab);
    if state.config != expected {
        return Err(Error::Config(format!(
            "checkpoint model {:?} does not match the config {:?}",
            state.config, expected
        )));
    }
    if resume && state.step == 0 {
        log::warn!("resuming from step 0; this is a fresh run");
    }
    if !resume && state.step != 0 {
        return Err(Error::Config(format!(
            "{} is at step {}; use resume to continue it",
            start.display(),
            state.step
        )));
    }
    let steps = cfg.train.steps;
    if state.step > steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {} beyond train.steps {steps}",
            state.step
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let journal = out_dir.join("journal.jsonl");
    let kept = if resume && journal.exists() {
        read_journal(&journal)?
            .into_iter()
            .filter(|e| e.step <= state.step)
            .collect()
    } else {
        Vec::new()
    };
    if journal.exists() {
        std::fs::remove_file(&journal).map_err(|e| Error::io(&journal, e))?;
    }
    let mut jw = JournalWriter::append(&journal, false)?;
    for e in &kept {
        jw.write(e)?;
    }

    let every = cfg.train.checkpoint_every;
    let stages: Vec<(u64, u32)> = [10u32, 40, 100].iter().map(|&p| (steps * p as u64 / 100, p)).collect();
    let save = |st: &ModelState, path: PathBuf| -> Result<()> {
        st.save_checkpoint(&path)?;
        prov.output(&path)
    };
    let data = TrainData {
        streams: &streams,
        vocab: &vocab,
    };
    let trainer = Trainer::new(data, &cfg.train.config);
    let todo = steps - state.step;
    trainer.run(&mut state, todo, |st, entry| {
        jw.write(entry)?;
        if every > 0 && st.step % every == 0 {
            save(st, out_dir.join(checkpoint_name(st.step)))?;
        }
        for &(at, pct) in &stages {
            if st.step == at {
                save(st, out_dir.join(format!("stage-{pct:03}.ckpt")))?;
            }
        }
        log::info!("step {} main {:.4}", st.step, entry.losses.main);
        Ok(())
    })?;
    drop(jw);
    save(&state, out_dir.join("final.ckpt"))?;
    prov.output(&journal)
}

fn score(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: Option<&Path>, per_token: bool) -> Result<()> {
    let mut prov = Provenance::new("score", cfg);
    let state = load_state(&mut prov, checkpoint)?;
    let streams = corpus::read(&prov.input(input)?)?;
    let vocab = pipeline::vocab(&pipeline::world(cfg)?, state.config.n_codes)?;
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let err_path = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<stdout>"));
    for s in &streams {
        let seq = interleave::speech_only(s, &vocab)?;
        let r = scoring::score(&state, &seq, per_token)?;
        writeln!(sink, "{}", serde_json::to_string(&r)?).map_err(|e| Error::io(&err_path, e))?;
    }
    sink.flush().map_err(|e| Error::io(&err_path, e))?;
    drop(sink);
    if let Some(p) = out {
        prov.output(p)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct FactorReport {
    factor: Factor,
    #[serde(flatten)]
    report: PreferenceReport,
}

fn pref_table(rows: &[FactorReport]) -> String {
    let mut s = format!(
        "{:<12}{:>10}  {:<18}{:>8}{:>10}\n",
        "factor", "accuracy", "95% CI", "scored", "excluded"
    );
    for r in rows {
        s += &format!(
            "{:<12}{:>10.3}  [{:.3}, {:.3}]    {:>8}{:>10}\n",
            r.factor.name(),
            r.report.accuracy,
            r.report.ci.0,
            r.report.ci.1,
            r.report.n_scored,
            r.report.n_excluded
        );
    }
    s
}

fn eval_pref(
    cli: &Cli,
    cfg: &RunConfig,
    checkpoint: &Path,
    codebook: &Path,
    factor: &[FactorArg],
    out: Option<&Path>,
    dump: Option<&Path>,
) -> Result<()> {
    let mut prov = Provenance::new("eval-pref", cfg);
    let state = load_state(&mut prov, checkpoint)?;
    let (world, cb, vocab) = world_with(cfg, &mut prov, codebook)?;
    let mut rows = Vec::new();
    for f in factors(factor) {
        let pairs = pipeline::preference_pairs(cfg, &world, &cb, &vocab, f)?;
        rows.push(FactorReport {
            factor: f,
            report: eval::preference_accuracy(&state, &pairs, cfg.seeds.eval)?,
        });
    }
    if let Some(p) = dump {
        let mut w = create(p)?;
        for r in &rows {
            for ps in &r.report.pairs {
                let line = serde_json::json!({ "factor": r.factor, "pair": ps });
                writeln!(w, "{line}").map_err(|e| Error::io(p, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(p, e))?;
        drop(w);
        prov.output(p)?;
    }
    if let Some(p) = out {
        write_json(p, &rows)?;
        prov.output(p)?;
    }
    emit(cli, &rows, || pref_table(&rows))
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    cli: &Cli,
    cfg: &RunConfig,
    init: &Path,
    corpus_path: &Path,
    codebook: &Path,
    seeds: &[u64],
    factor: &[FactorArg],
    out: Option<&Path>,
) -> Result<()> {
    let mut prov = Provenance::new("ablate", cfg);
    let base = load_state(&mut prov, init)?;
    let streams = corpus::read(&prov.input(corpus_path)?)?;
    let (world, cb, vocab) = world_with(cfg, &mut prov, codebook)?;
    let mut minus = cfg.train.config.clone();
    minus.weights.coarse = 0.0;
    minus.weights.next = 0.0;
    let configs = AblationConfigs {
        plus_aux: cfg.train.config.clone(),
        minus_aux: minus,
    };
    let pairs = factors(factor)
        .into_iter()
        .map(|f| Ok((f, pipeline::preference_pairs(cfg, &world, &cb, &vocab, f)?)))
        .collect::<Result<Vec<_>>>()?;
    let init_for = |seed: u64| {
        let mut s = base.clone();
        s.rng = rng::seeded(rng::derive_named(seed, "train"));
        Ok(s)
    };
    let data = TrainData {
        streams: &streams,
        vocab: &vocab,
    };
    let report = eval::run_ablation(&configs, &init_for, data, cfg.train.steps, &pairs, seeds, cfg.seeds.eval)?;
    if let Some(p) = out {
        write_json(p, &report)?;
        prov.output(p)?;
    }
    emit(cli, &report, || {
        let mut s = format!("{:<12}{:>6}{:>10}{:>10}\n", "factor", "seed", "+aux", "-aux");
        for r in &report.per_seed {
            s += &format!("{:<12}{:>6}{:>10.3}{:>10.3}\n", r.factor.name(), r.seed, r.plus_aux, r.minus_aux);
        }
        s += &format!("\n{:<12}{:>16}{:>16}{:>10}\n", "factor", "+aux mean±sd", "-aux mean±sd", "diff");
        for f in &report.summary {
            s += &format!(
                "{:<12}{:>10.3}±{:.3}{:>10.3}±{:.3}{:>+10.3}\n",
                f.factor.name(),
                f.plus_aux_mean,
                f.plus_aux_std,
                f.minus_aux_mean,
                f.minus_aux_std,
                f.paired_diff_mean
            );
        }
        s
    })
}

fn probe(
    cli: &Cli,
    cfg: &RunConfig,
    checkpoints: &[String],
    stages: &[u32],
    codebook: &Path,
    task: ProbeArg,
    out: Option<&Path>,
) -> Result<()> {
    let mut prov = Provenance::new("probe", cfg);
    let mut loaded: Vec<(u32, ModelState)> = Vec::new();
    for spec in checkpoints {
        let (pct, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--checkpoint {spec:?} is not PERCENT=PATH")))?;
        let pct: u32 = pct
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad stage percent in {spec:?}")))?;
        loaded.push((pct, load_state(&mut prov, Path::new(path))?));
    }
    let (world, cb, vocab) = world_with(cfg, &mut prov, codebook)?;
    let set = pipeline::probe_set(cfg, &world, &cb, &vocab)?;
    let (labels, kind) = match task {
        ProbeArg::Content => (&set.content, ProbeKind::Content),
        ProbeArg::Prosody => (&set.speaker, ProbeKind::ProsodyAnalog),
    };
    let wanted: Vec<(u32, Option<&ModelState>)> = stages
        .iter()
        .map(|&s| (s, loaded.iter().find(|(p, _)| *p == s).map(|(_, st)| st)))
        .collect();
    let report: Vec<StageAccuracy> =
        eval::probe_stages(&wanted, &set.inputs, labels, kind, &cfg.eval.probe, cfg.seeds.eval)?;
    if let Some(p) = out {
        write_json(p, &report)?;
        prov.output(p)?;
    }
    emit(cli, &report, || {
        let mut s = format!("{:<8}{:>12}{:>12}{:>8}\n", "stage", "train acc", "test acc", "epochs");
        for r in &report {
            s += &format!(
                "{:<8}{:>12.3}{:>12.3}{:>8}\n",
                format!("{}%", r.stage),
                r.result.train_accuracy,
                r.result.test_accuracy,
                r.result.epochs_run
            );
        }
        s
    })
}
