use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use qaroute_core::agents::{gate_route, Engine, Session};
use qaroute_core::config::{EngineConfig, LoadedConfig};
use qaroute_core::eval::{evaluate, parse_judge_file, DecisionRecord, RecordFlags};
use qaroute_core::ftdata::{build_dataset, to_chat_record, to_chat_template};
use qaroute_core::ingest::{
    balance, convert, duplicate_ids, load_source, populate_batch, validate, BalanceTargets,
};
use qaroute_core::kg::{
    extract_phase1, link_samples, path_score, postprocess, reinforce_phase3, validate_phase2,
    KnowledgeGraph,
};
use qaroute_core::providers::{ProviderError, Providers};
use qaroute_core::retrieval::{chunk_corpus, hybrid_retrieve, rerank_and_compress, Chunk, Index};
use qaroute_core::sample::{Source, UnifiedSample};
use qaroute_core::state::{Action, InformationState};
use qaroute_core::text::normalize_variable;
use serde_json::{json, Value};

use crate::io::{lines, read_jsonl, read_samples, read_to_string, write_json, write_jsonl};
use crate::{
    Cli, Command, DecideArgs, EngineArgs, EvalArgs, FtdataCmd, GranularityArg, IndexCmd, IngestCmd,
    KgCmd, PhaseArg, RouteArgs, RouterArg, SourceArg,
};

struct Ctx<'a> {
    cfg: LoadedConfig,
    offline: bool,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.cfg.config.seed
    }

    fn config(&self) -> &EngineConfig {
        &self.cfg.config
    }

    /// A missing endpoint is a configuration problem, not a transport one.
    fn providers(&self) -> Result<Providers> {
        match self.cfg.providers(self.offline) {
            Err(ProviderError::Config(m)) => Err(anyhow!("{m}")),
            other => Ok(other?),
        }
    }

    fn print_json(&mut self, v: &Value) -> Result<()> {
        writeln!(self.out, "{}", serde_json::to_string_pretty(v)?)?;
        Ok(())
    }
}

pub fn dispatch(cli: Cli, stdin: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let mut cfg = EngineConfig::load(cli.config.as_deref()).context("loading configuration")?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let mut ctx = Ctx {
        cfg,
        offline: cli.offline,
        out,
    };
    match cli.command {
        Command::Config => {
            let echo = ctx.cfg.echo();
            ctx.print_json(&echo)
        }
        Command::Ingest(c) => ingest(&mut ctx, c),
        Command::Index(c) => index(&mut ctx, c),
        Command::Kg(c) => kg(&mut ctx, c),
        Command::Ftdata(c) => ftdata(&mut ctx, c),
        Command::Route(a) => route(&mut ctx, a),
        Command::Decide(a) => decide(&mut ctx, a),
        Command::Eval(a) => eval(&mut ctx, a),
        Command::Repl(a) => repl(&mut ctx, a, stdin),
    }
}

fn source_of(s: SourceArg) -> Source {
    match s {
        SourceArg::Sharc => Source::Sharc,
        SourceArg::Quac => Source::Quac,
        SourceArg::Hotpotqa => Source::HotpotQa,
        SourceArg::ContractNli => Source::ContractNli,
    }
}

fn action_counts(samples: &[UnifiedSample]) -> BTreeMap<&'static str, usize> {
    let mut m: BTreeMap<&'static str, usize> =
        Action::ALL.iter().map(|a| (a.as_str(), 0)).collect();
    for s in samples {
        *m.entry(s.action.as_str()).or_default() += 1;
    }
    m
}

fn ingest(ctx: &mut Ctx, cmd: IngestCmd) -> Result<()> {
    match cmd {
        IngestCmd::Convert {
            source,
            input,
            out,
            skip_invalid,
        } => {
            let src = source_of(source);
            let records = load_source(src, &read_to_string(&input)?)?;
            let mut samples = Vec::with_capacity(records.len());
            let mut skipped = 0;
            for (i, r) in records.iter().enumerate() {
                match convert(r) {
                    Ok(s) => samples.push(s),
                    Err(e) if skip_invalid => {
                        log::warn!("record {i}: {e}");
                        skipped += 1;
                    }
                    Err(e) => bail!("record {i}: {e}"),
                }
            }
            write_jsonl(&out, &samples)?;
            let summary = json!({"source": src.as_str(), "records": records.len(), "converted": samples.len(), "skipped": skipped, "actions": action_counts(&samples)});
            ctx.print_json(&summary)
        }
        IngestCmd::Balance {
            input,
            out,
            targets,
            report,
        } => {
            let samples = read_samples(&input)?;
            let targets: BalanceTargets = match targets {
                Some(p) => serde_json::from_str(&read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => ctx.config().balance.clone(),
            };
            let (picked, rep) = balance(&samples, &targets, ctx.seed())?;
            write_jsonl(&out, &picked)?;
            let rep = serde_json::to_value(&rep)?;
            match report {
                Some(p) => write_json(&p, &rep),
                None => ctx.print_json(&rep),
            }
        }
        IngestCmd::Populate {
            input,
            out,
            checkpoint,
            resume,
        } => {
            let samples = read_samples(&input)?;
            let providers = ctx.providers()?;
            let filled = populate_batch(
                &samples,
                providers.chat.as_ref(),
                checkpoint.as_deref(),
                resume,
            )?;
            write_jsonl(&out, &filled)?;
            let review = filled
                .iter()
                .filter(|s| {
                    s.metadata
                        .population
                        .as_ref()
                        .is_some_and(|p| p.needs_review)
                })
                .count();
            ctx.print_json(&json!({"samples": filled.len(), "needs_review": review}))
        }
        IngestCmd::Validate { input } => {
            let mut valid = Vec::new();
            let mut problems = Vec::new();
            for (n, line) in lines(&input)? {
                match validate(&line) {
                    Ok(s) => valid.push(s),
                    Err(errs) => problems.extend(
                        errs.into_iter()
                            .map(|e| json!({"line": n, "path": e.path, "message": e.message})),
                    ),
                }
            }
            for id in duplicate_ids(&valid) {
                problems.push(
                    json!({"line": null, "path": "$.id", "message": format!("duplicate id {id}")}),
                );
            }
            let ok = problems.is_empty();
            ctx.print_json(&json!({"valid": valid.len(), "errors": problems}))?;
            if !ok {
                bail!("validation failed");
            }
            Ok(())
        }
    }
}

fn documents(samples: &[UnifiedSample]) -> Vec<(qaroute_core::sample::ContextDocument, Source)> {
    let mut seen = std::collections::HashSet::new();
    let mut docs = Vec::new();
    for s in samples {
        for d in &s.context.documents {
            if seen.insert(d.doc_id.clone()) {
                docs.push((d.clone(), s.metadata.source));
            }
        }
    }
    docs
}

fn load_index(path: Option<&Path>) -> Result<Index> {
    match path {
        Some(p) => Index::load(p).with_context(|| format!("loading index {}", p.display())),
        None => {
            log::warn!("no index given; retrieval will be empty");
            Ok(Index::empty())
        }
    }
}

fn load_graph(path: Option<&Path>) -> Result<KnowledgeGraph> {
    match path {
        Some(p) => {
            KnowledgeGraph::load(p).with_context(|| format!("loading graph {}", p.display()))
        }
        None => {
            log::warn!("no graph given; planner context will be empty");
            Ok(KnowledgeGraph::default())
        }
    }
}

fn index(ctx: &mut Ctx, cmd: IndexCmd) -> Result<()> {
    match cmd {
        IndexCmd::Build {
            input,
            out,
            granularity,
        } => {
            let samples = read_samples(&input)?;
            let docs = documents(&samples);
            let chunks = chunk_corpus(&docs, granularity == GranularityArg::Fine);
            let n = chunks.len();
            let providers = ctx.providers()?;
            let idx = Index::build(chunks, providers.embedder.as_ref(), ctx.config().bm25)?;
            idx.save(&out)?;
            ctx.print_json(&json!({"documents": docs.len(), "chunks": n, "out": out}))
        }
        IndexCmd::Query {
            index,
            query,
            k,
            alpha,
            top_m,
        } => {
            let idx = load_index(Some(&index))?;
            let providers = ctx.providers()?;
            let r = &ctx.config().retrieval;
            let (k, alpha, top_m) = (
                k.unwrap_or(r.k),
                alpha.unwrap_or(r.alpha),
                top_m.unwrap_or(r.top_m),
            );
            if !(0.0..=1.0).contains(&alpha) {
                bail!("--alpha must lie in [0, 1]");
            }
            let found = hybrid_retrieve(&idx, providers.embedder.as_ref(), &query, k, alpha)?;
            let kept = rerank_and_compress(
                &idx,
                providers.reranker.as_ref(),
                &query,
                &found.results,
                top_m,
            );
            let rows: Vec<Value> = kept
                .kept
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    json!({
                        "rank": i + 1,
                        "chunk_id": c.result.chunk_id,
                        "fused": c.result.fused_score,
                        "sparse": c.result.sparse_score,
                        "dense": c.result.dense_score,
                        "rerank": c.result.rerank_score,
                        "text": c.compressed_text,
                    })
                })
                .collect();
            ctx.print_json(
                &json!({"query": query, "rerank_failed": kept.rerank_failed, "results": rows}),
            )
        }
    }
}

fn kg(ctx: &mut Ctx, cmd: KgCmd) -> Result<()> {
    match cmd {
        KgCmd::Build {
            index,
            chunks,
            samples,
            out,
            phase,
        } => {
            let chunks: Vec<Chunk> = match (index, chunks) {
                (Some(dir), _) => load_index(Some(&dir))?.chunks,
                (None, Some(p)) => read_jsonl(&p)?,
                (None, None) => bail!("kg build needs --index or --chunks"),
            };
            let samples = match (&samples, phase) {
                (Some(p), _) => read_samples(p)?,
                (None, PhaseArg::Three | PhaseArg::Post) => {
                    bail!("phase 3 and later need --samples")
                }
                (None, _) => Vec::new(),
            };
            let providers = ctx.providers()?;
            let params = ctx.config().kg;
            let mut reports = serde_json::Map::new();
            let (mut g, r1) = extract_phase1(&chunks, providers.ner.as_ref(), &params);
            reports.insert("phase1".into(), serde_json::to_value(&r1)?);
            if phase != PhaseArg::One {
                let (g1, r2) = validate_phase2(&g, &chunks, providers.embedder.as_ref(), &params);
                reports.insert("phase2".into(), serde_json::to_value(&r2)?);
                g = g1;
            }
            if matches!(phase, PhaseArg::Three | PhaseArg::Post) {
                let linked = link_samples(&samples, &chunks);
                let (g2, r3) = reinforce_phase3(
                    &g,
                    &linked,
                    providers.ner.as_ref(),
                    providers.embedder.as_ref(),
                    &params,
                )?;
                reports.insert("phase3".into(), serde_json::to_value(&r3)?);
                g = g2;
            }
            if phase == PhaseArg::Post {
                let (gp, rp) = postprocess(
                    &g,
                    providers.ner.as_ref(),
                    providers.embedder.as_ref(),
                    &params,
                )?;
                reports.insert("post".into(), serde_json::to_value(&rp)?);
                g = gp;
            }
            g.save(&out)?;
            ctx.print_json(&json!({"out": out, "phase_stats": g.phase_stats, "reports": reports}))
        }
        KgCmd::Import { tsv, out } => {
            let g = KnowledgeGraph::from_tsv(&read_to_string(&tsv)?)?;
            g.save(&out)?;
            ctx.print_json(&json!({"out": out, "nodes": g.nodes.len(), "edges": g.edges.len()}))
        }
        KgCmd::Stats { graph } => {
            let g = load_graph(Some(&graph))?;
            let requires = g.edges.iter().filter(|e| e.is_requires()).count();
            ctx.print_json(&json!({
                "nodes": g.nodes.len(),
                "entity_nodes": g.entity_nodes().count(),
                "variable_nodes": g.variable_nodes().count(),
                "edges": g.edges.len(),
                "requires_edges": requires,
                "phase_stats": g.phase_stats,
            }))
        }
        KgCmd::Path {
            graph,
            from,
            to,
            max_hops,
        } => {
            let g = load_graph(Some(&graph))?;
            let resolve = |name: &str| {
                if g.node(name).is_some() {
                    name.to_string()
                } else {
                    normalize_variable(name)
                }
            };
            let (a, b) = (resolve(&from), resolve(&to));
            let score = path_score(&g, &a, &b, max_hops)?;
            ctx.print_json(&json!({"from": a, "to": b, "max_hops": max_hops, "score": score}))
        }
    }
}

fn ftdata(ctx: &mut Ctx, cmd: FtdataCmd) -> Result<()> {
    let FtdataCmd::Build { graph, input, out } = cmd;
    let g = load_graph(Some(&graph))?;
    let samples = read_samples(&input)?;
    let providers = ctx.providers()?;
    let cfg = ctx.config();
    let (accepted, report) = build_dataset(
        &samples,
        &g,
        providers.embedder.as_ref(),
        &cfg.ftdata,
        cfg.split,
        ctx.seed(),
    )?;
    write_jsonl(&out.join("samples.jsonl"), &accepted)?;
    write_jsonl(
        &out.join("chat.jsonl"),
        &accepted.iter().map(to_chat_record).collect::<Vec<_>>(),
    )?;
    write_jsonl(
        &out.join("template.jsonl"),
        &accepted.iter().map(to_chat_template).collect::<Vec<_>>(),
    )?;
    write_json(&out.join("report.json"), &report)?;
    ctx.print_json(&serde_json::to_value(&report)?)
}

fn engine(ctx: &Ctx, args: &EngineArgs) -> Result<Engine> {
    let paths = &ctx.config().paths;
    let index = load_index(args.index.as_deref().or(paths.index.as_deref()))?;
    let graph = load_graph(args.graph.as_deref().or(paths.graph.as_deref()))?;
    let cfg = ctx.config();
    Ok(Engine::new(
        graph,
        index,
        ctx.providers()?,
        cfg.ftdata.clone(),
        cfg.retrieval.clone(),
    )?)
}

fn route(ctx: &mut Ctx, args: RouteArgs) -> Result<()> {
    let samples = read_samples(&args.input)?;
    let engine = engine(ctx, &args.engine)?;
    let cfg = ctx.config();
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let state = s.information_state();
        let gate = gate_route(
            &s.query,
            &state,
            &engine.index,
            &engine.providers,
            &cfg.retrieval,
            &cfg.gate,
        )
        .with_context(|| format!("sample {}", s.id))?;
        let outcome = match args.router {
            RouterArg::Planner => engine.decide_and_respond(&s.query, &state, &[], &[]),
            RouterArg::Gate => engine.respond_to_gate(&gate, &state, &[]),
        }
        .with_context(|| format!("sample {}", s.id))?;
        records.push(DecisionRecord {
            id: s.id.clone(),
            gold_action: Some(s.action),
            predicted_action: outcome.action,
            response: outcome.response,
            signals: Some(gate.signals),
            flags: RecordFlags {
                malformed: outcome.decision.malformed,
                non_strict: outcome.decision.non_strict,
                fallback: outcome.fallback,
                rule: (args.router == RouterArg::Gate).then_some(gate.rule),
            },
            correct: None,
        });
    }
    write_jsonl(&args.out, &records)?;
    let mut predicted: BTreeMap<&str, usize> =
        Action::ALL.iter().map(|a| (a.as_str(), 0)).collect();
    for r in &records {
        *predicted.entry(r.predicted_action.as_str()).or_default() += 1;
    }
    ctx.print_json(&json!({"records": records.len(), "predicted": predicted, "out": args.out}))
}

fn decide(ctx: &mut Ctx, args: DecideArgs) -> Result<()> {
    let index = load_index(
        args.index
            .as_deref()
            .or(ctx.config().paths.index.as_deref()),
    )?;
    let providers = ctx.providers()?;
    let state = InformationState::from_parts(
        args.known.iter().filter(|k| !k.trim().is_empty()),
        args.missing.iter().filter(|m| !m.trim().is_empty()),
    );
    let cfg = ctx.config();
    let report = gate_route(
        &args.query,
        &state,
        &index,
        &providers,
        &cfg.retrieval,
        &cfg.gate,
    )?;
    ctx.print_json(&serde_json::to_value(&report)?)
}

fn eval(ctx: &mut Ctx, args: EvalArgs) -> Result<()> {
    let records: Vec<DecisionRecord> = read_jsonl(&args.input)?;
    let judge = match &args.judge_file {
        Some(p) => Some(parse_judge_file(&read_to_string(p)?).map_err(|e| anyhow!(e))?),
        None => None,
    };
    let report = evaluate(&records, judge.as_ref())?;
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    write!(ctx.out, "{}", report.table())?;
    writeln!(ctx.out)?;
    ctx.print_json(&serde_json::to_value(&report)?)
}

fn list(items: &[String]) -> String {
    if items.is_empty() {
        "none".into()
    } else {
        items.join(", ")
    }
}

fn repl(ctx: &mut Ctx, args: EngineArgs, stdin: &mut dyn BufRead) -> Result<()> {
    let engine = engine(ctx, &args)?;
    let cfg = ctx.config().clone();
    let mut session = Session::new(&engine);
    writeln!(ctx.out, "qaroute repl. Type a question; :state shows the information state, :reset starts over, :quit exits.")?;
    let mut line = String::new();
    loop {
        write!(ctx.out, "> ")?;
        ctx.out.flush()?;
        line.clear();
        if stdin.read_line(&mut line)? == 0 {
            break;
        }
        let input = line.trim();
        match input {
            "" => continue,
            ":quit" | ":q" => break,
            ":reset" => {
                session = Session::new(&engine);
                writeln!(ctx.out, "session reset")?;
                continue;
            }
            ":state" => {
                let st = &session.state;
                let known: Vec<String> = st.known_variables.iter().cloned().collect();
                let missing: Vec<String> = st.missing_variables.iter().cloned().collect();
                writeln!(
                    ctx.out,
                    "known: {} | missing: {} | incompleteness {:.2} | turn {}",
                    list(&known),
                    list(&missing),
                    st.incompleteness(),
                    st.turn
                )?;
                continue;
            }
            _ => {}
        }
        if session.pending_variable().is_none() {
            let gate = gate_route(
                input,
                &session.state,
                &engine.index,
                &engine.providers,
                &cfg.retrieval,
                &cfg.gate,
            )?;
            let s = gate.signals;
            writeln!(
                ctx.out,
                "signals: confidence {:.2} coverage {:.2} ambiguity {:.2} conflict {:.2} | gate rule {} -> {}",
                s.confidence,
                s.coverage,
                s.ambiguity,
                s.conflict,
                gate.rule,
                gate.action.as_str()
            )?;
        }
        let outcome = session.route(input)?;
        if let Some(v) = &outcome.resolved {
            writeln!(ctx.out, "resolved: {v}")?;
        }
        let why = if outcome.decision.malformed {
            "planner output malformed".to_string()
        } else {
            outcome.decision.justification.clone()
        };
        writeln!(ctx.out, "decision: {} ({why})", outcome.action.as_str())?;
        writeln!(ctx.out, "{}", outcome.response)?;
    }
    Ok(())
}
