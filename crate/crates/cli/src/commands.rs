use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use cqr_core::bounds_sim::{run_seeds, GraphConfig};
use cqr_core::corpus::{
    chunk_text, load_conversations, load_passages, Corpus, Dataset, Passage, Split, TurnKey,
};
use cqr_core::jsonl;
use cqr_core::lm_client::{LmClient, MockBackend, OpenAiBackend, RetryPolicy};
use cqr_core::metrics::{write_csv, MetricReport};
use cqr_core::pipeline::{
    evaluate_pseudo, evaluate_retrieval, load_artifacts, turn_seed, CandidateRecord,
    CommandTrainer, IdentityTrainer, Pipeline, PipelineConfig, Trainer,
};
use cqr_core::preference::{
    export_training_data, generate_candidates, sample_pairs, score_candidates, sft_target,
    PreferenceFeedback, PromptTemplates, SftRecord,
};
use cqr_core::pseudo_ref::{generate_pseudo_refs, refine_or_empty, PseudoRefRecord};
use cqr_core::retriever::{InvertedIndex, Retriever};
use serde::Deserialize;

use crate::{load_config, Backend, BackendArgs, Cli, Command, DataArgs, TrainerArgs};

#[derive(Debug, Deserialize)]
struct Reformulation {
    session_id: String,
    turn: u32,
    text: String,
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let backend = &cli.global.backend;
    match cli.command {
        Command::Chunk {
            input,
            output,
            size,
            overlap,
        } => chunk(&input, &output, size, overlap),
        Command::Index { passages, output } => {
            let corpus = load_passages(&passages)?;
            let index = InvertedIndex::build(&corpus, cfg.index)?;
            index.save(&output)?;
            println!(
                "indexed {} passages ({} terms) into {}",
                index.doc_count(),
                index.vocabulary_size(),
                output.display()
            );
            Ok(())
        }
        Command::Candidates { data, output } => candidates(&cfg, backend, &data, &output),
        Command::Pseudo {
            data,
            refine_model,
            iteration,
            output,
        } => pseudo(
            &cfg,
            backend,
            &data,
            refine_model.as_deref(),
            iteration,
            &output,
        ),
        Command::Prefs {
            data,
            candidates,
            pseudo,
            output,
        } => prefs(&cfg, &data, &candidates, &pseudo, &output),
        Command::Export {
            conversations,
            feedback,
            out_dir,
            iteration,
        } => export(&cfg, &conversations, &feedback, &out_dir, iteration),
        Command::Run {
            data,
            trainer,
            out_dir,
        } => run(&cfg, backend, &data, &trainer, &out_dir, false),
        Command::Resume {
            data,
            trainer,
            out_dir,
        } => run(&cfg, backend, &data, &trainer, &out_dir, true),
        Command::EvalRetrieval {
            data,
            reformulations,
            output,
            csv,
        } => eval_retrieval(&cfg, &data, &reformulations, &output, csv.as_deref()),
        Command::EvalPseudo {
            conversations,
            passages,
            run_dir,
            csv,
        } => {
            let corpus = passages.as_deref().map(load_passages).transpose()?;
            let dataset = load_conversations(&conversations, corpus.as_ref(), Split::Test)?;
            let artifacts = load_artifacts(&run_dir)?;
            if artifacts.is_empty() {
                bail!("{} holds no completed iterations", run_dir.display());
            }
            let trend = evaluate_pseudo(&artifacts, &dataset.gold(), &cfg.report_cutoffs)?;
            trend.write_csv(&csv)?;
            println!("{}", MetricReport::csv_header(&cfg.report_cutoffs));
            for r in &trend.reports {
                println!("{}", r.csv_row());
            }
            Ok(())
        }
        Command::SimulateBounds {
            n,
            c,
            mu,
            err,
            labels,
            seeds,
            skew,
            output,
        } => {
            let graph = GraphConfig {
                skew,
                ..GraphConfig::new(n, c, mu, labels, 0)
            };
            let seeds: Vec<u64> = (0..seeds).collect();
            let report = run_seeds(&graph, err, &seeds)?;
            report.save_csv(&output)?;
            println!(
                "mean errors over {} seeds: labeler {:.4}, single {:.4}, dual {:.4}; bounds single {:.4}, dual {:.4}",
                seeds.len(),
                report.mean_labeler_error,
                report.mean_single_error,
                report.mean_dual_error,
                report.bound_single,
                report.bound_dual
            );
            Ok(())
        }
    }
}

fn client(args: &BackendArgs) -> Result<LmClient> {
    let client = match args.backend {
        Backend::Mock => LmClient::new(Arc::new(MockBackend::new(args.mock_seed)))
            .with_retry(RetryPolicy::no_delay(3)),
        Backend::Openai => {
            if std::env::var(&args.api_key_env).is_err() {
                log::warn!(
                    "{} is not set; requests go out without credentials",
                    args.api_key_env
                );
            }
            LmClient::new(Arc::new(OpenAiBackend::from_env(
                args.base_url.as_str(),
                &args.api_key_env,
            )?))
        }
    };
    let client = client.with_max_in_flight(args.max_in_flight);
    Ok(match &args.request_log {
        Some(path) => client
            .with_request_log(path)
            .with_context(|| format!("opening {}", path.display()))?,
        None => client,
    })
}

fn load_data(data: &DataArgs) -> Result<(Corpus, Dataset)> {
    let corpus = load_passages(&data.passages)?;
    let dataset = load_conversations(&data.conversations, Some(&corpus), Split::Train)?;
    Ok((corpus, dataset))
}

fn retriever(cfg: &PipelineConfig, data: &DataArgs, corpus: &Corpus) -> Result<InvertedIndex> {
    Ok(match &data.index {
        Some(path) => InvertedIndex::load(path)?,
        None => InvertedIndex::build(corpus, cfg.index)?,
    })
}

fn prompts(data: &DataArgs) -> Result<PromptTemplates> {
    Ok(match &data.prompts {
        Some(dir) => PromptTemplates::load(&dir.join("rewrite.txt"), &dir.join("expand.txt"))?,
        None => PromptTemplates::default(),
    })
}

fn chunk(input: &Path, output: &Path, size: usize, overlap: usize) -> Result<()> {
    let docs: Vec<Passage> = jsonl::read(input)?;
    let mut chunks = Vec::new();
    for doc in &docs {
        chunks.extend(chunk_text(&doc.id, &doc.text, size, overlap)?);
    }
    let corpus = Corpus::new(chunks)?;
    corpus.write_jsonl(output)?;
    println!("{} documents -> {} passages", docs.len(), corpus.len());
    Ok(())
}

fn candidates(
    cfg: &PipelineConfig,
    backend: &BackendArgs,
    data: &DataArgs,
    output: &Path,
) -> Result<()> {
    let (_, dataset) = load_data(data)?;
    let client = client(backend)?;
    let prompts = prompts(data)?;
    let contexts = dataset.contexts();
    let records = client.map_bounded(&contexts, |(turn, ctx)| {
        let key = turn.key();
        let outcome = generate_candidates(
            ctx,
            &client,
            &cfg.candidates,
            &prompts,
            turn_seed(cfg.seed, &key, 0),
        );
        for w in &outcome.warnings {
            log::warn!("{key}: {w}");
        }
        CandidateRecord {
            key,
            candidates: outcome.candidates,
        }
    });
    jsonl::write(output, &records)?;
    println!(
        "candidates for {} turns written to {}",
        records.len(),
        output.display()
    );
    Ok(())
}

fn pseudo(
    cfg: &PipelineConfig,
    backend: &BackendArgs,
    data: &DataArgs,
    refine_model: Option<&str>,
    iteration: usize,
    output: &Path,
) -> Result<()> {
    let (corpus, dataset) = load_data(data)?;
    let index = retriever(cfg, data, &corpus)?;
    let client = client(backend)?;
    let contexts = dataset.contexts();
    let refined = client.map_bounded(&contexts, |(turn, ctx)| {
        refine_or_empty(
            ctx,
            &turn.response,
            refine_model,
            &client,
            cfg.refine_params,
        )
    });
    let mut records = Vec::with_capacity(contexts.len());
    for ((turn, _), (text, warning)) in contexts.iter().zip(refined) {
        if let Some(w) = &warning {
            log::warn!("{}: {w}", turn.key());
        }
        let set = generate_pseudo_refs(&turn.response, &text, &index, cfg.k_pseudo)?;
        records.push(PseudoRefRecord::new(turn.key(), iteration, set, warning));
    }
    jsonl::write(output, &records)?;
    println!(
        "pseudo references for {} turns written to {}",
        records.len(),
        output.display()
    );
    Ok(())
}

fn prefs(
    cfg: &PipelineConfig,
    data: &DataArgs,
    candidates: &Path,
    pseudo: &Path,
    output: &Path,
) -> Result<()> {
    let (corpus, _) = load_data(data)?;
    let index = retriever(cfg, data, &corpus)?;
    let candidates: BTreeMap<TurnKey, CandidateRecord> =
        jsonl::read::<CandidateRecord>(candidates)?
            .into_iter()
            .map(|r| (r.key.clone(), r))
            .collect();
    let pseudo: Vec<PseudoRefRecord> = jsonl::read(pseudo)?;
    let mut feedback = Vec::new();
    for r in &pseudo {
        let Some(c) = candidates.get(&r.key) else {
            log::warn!("{}: no candidates", r.key);
            continue;
        };
        if c.candidates.len() < 2 || r.ref_ids.is_empty() {
            log::warn!(
                "{}: skipped (needs 2 candidates and a pseudo reference)",
                r.key
            );
            continue;
        }
        match score_candidates(
            r.key.clone(),
            &c.candidates,
            &r.set(),
            &index,
            &cfg.weights,
            cfg.top_n,
        ) {
            Ok(fb) => feedback.push(fb),
            Err(e) => log::warn!("{}: {e}", r.key),
        }
    }
    jsonl::write(output, &feedback)?;
    println!(
        "feedback for {} turns written to {}",
        feedback.len(),
        output.display()
    );
    Ok(())
}

fn export(
    cfg: &PipelineConfig,
    conversations: &Path,
    feedback: &Path,
    out_dir: &Path,
    iteration: usize,
) -> Result<()> {
    let dataset = load_conversations(conversations, None, Split::Train)?;
    let contexts: BTreeMap<TurnKey, _> = dataset
        .contexts()
        .into_iter()
        .map(|(t, c)| (t.key(), c))
        .collect();
    let feedback: Vec<PreferenceFeedback> = jsonl::read(feedback)?;
    let mut sft = Vec::new();
    let mut pairs = Vec::new();
    for fb in &feedback {
        let ctx = contexts
            .get(&fb.key)
            .with_context(|| format!("feedback for unknown turn {}", fb.key))?;
        sft.push(SftRecord {
            session_id: fb.key.session_id.clone(),
            turn: fb.key.turn,
            context_serialized: ctx.serialize(),
            target: sft_target(fb)?.text.clone(),
        });
        pairs.extend(sample_pairs(fb, ctx, cfg.pairs)?);
    }
    let paths = export_training_data(&sft, &pairs, out_dir, iteration, &cfg.hash())?;
    println!(
        "{} SFT records and {} DPO pairs written ({}, {})",
        sft.len(),
        pairs.len(),
        paths.sft.display(),
        paths.dpo.display()
    );
    Ok(())
}

fn run(
    cfg: &PipelineConfig,
    backend: &BackendArgs,
    data: &DataArgs,
    trainer: &TrainerArgs,
    out_dir: &Path,
    resume: bool,
) -> Result<()> {
    let (corpus, dataset) = load_data(data)?;
    let client = client(backend)?;
    let trainer: Box<dyn Trainer> = match &trainer.trainer_cmd {
        Some(cmd) => Box::new(CommandTrainer::new(cmd, trainer.trainer_args.clone())),
        None => Box::new(IdentityTrainer),
    };
    let mut pipeline = Pipeline::new(cfg, &dataset, &corpus, &client, trainer.as_ref())?
        .with_prompts(prompts(data)?);
    if let Some(path) = &data.index {
        pipeline =
            pipeline.with_retriever(Box::new(InvertedIndex::load(path)?) as Box<dyn Retriever>);
    }
    let done = if resume {
        pipeline.resume(out_dir)?
    } else {
        pipeline.run(out_dir)?
    };
    for a in &done {
        let m = &a.manifest;
        println!(
            "iteration {}: {} -> {}; {} feedback turns, {} SFT, {} DPO, {} warnings",
            m.iteration,
            m.model_ref_in,
            m.model_ref_out,
            m.feedback_turns,
            m.sft_records,
            m.dpo_records,
            m.warnings
        );
    }
    if done.is_empty() {
        println!("nothing to do: run in {} is complete", out_dir.display());
    }
    Ok(())
}

fn eval_retrieval(
    cfg: &PipelineConfig,
    data: &DataArgs,
    reformulations: &Path,
    output: &Path,
    csv: Option<&Path>,
) -> Result<()> {
    let (corpus, dataset) = load_data(data)?;
    let index = retriever(cfg, data, &corpus)?;
    let reformulations: BTreeMap<TurnKey, String> = jsonl::read::<Reformulation>(reformulations)?
        .into_iter()
        .map(|r| (TurnKey::new(r.session_id, r.turn), r.text))
        .collect();
    let report = evaluate_retrieval(
        &reformulations,
        &dataset.gold(),
        &index,
        cfg.top_n,
        &cfg.report_cutoffs,
    )?;
    report.write_jsonl(output)?;
    if let Some(csv) = csv {
        write_csv(csv, None, std::slice::from_ref(&report))?;
    }
    println!("{}", MetricReport::csv_header(&cfg.report_cutoffs));
    println!("{}", report.csv_row());
    Ok(())
}
