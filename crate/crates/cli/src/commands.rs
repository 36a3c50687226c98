use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use polyparse::automaton::{build_graph, ComponentGraph};
use polyparse::bpe::{learn_bpe, BpeModel, Side};
use polyparse::corpus::{load_corpus, make_language_token, tokenize, ParallelCorpus, TagMode};
use polyparse::eval::{evaluate, EvalRecord, Normalization};
use polyparse::kbest::{decode_k, kbest_per_language, KBestList};
use polyparse::lexical_decoder::{LexicalOptions, LexicalQuery};
use polyparse::model1::{train_lexical_model, LexicalModel, Model1Options};
use polyparse::neural::{self, load_parameters, save_parameters, NeuralConfig, NeuralParameters, TrainOptions};
use polyparse::neural_decoder::NeuralQuery;
use polyparse::search::{SearchStart, SearchStats, SuffixSearch};
use polyparse::Execution;

use crate::{
    BpeArgs, BuildGraphArgs, Cli, Cmd, CorpusArgs, DecodeArgs, EvalArgs, LearnBpeArgs, QueryArgs, ScorerArg,
    ScorerArgs, SideArg, TagModeArg, TrainArgs, UsageError,
};

struct Ctx {
    exec: Execution,
    verbose: bool,
}

impl Ctx {
    fn diag(&self, value: serde_json::Value) {
        if self.verbose {
            eprintln!("{value}");
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let exec = if cli.jobs > 1 {
        polyparse::par::set_worker_threads(cli.jobs as usize);
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    let ctx = Ctx { exec, verbose: cli.verbose };
    match cli.command {
        Cmd::BuildGraph(a) => build_graph_cmd(&ctx, a),
        Cmd::LearnBpe(a) => learn_bpe_cmd(&ctx, a),
        Cmd::Train(a) => train_cmd(&ctx, a),
        Cmd::Decode(a) => decode_cmd(&ctx, a, 1),
        Cmd::Kbest(a) => decode_cmd(&ctx, a, 10),
        Cmd::Eval(a) => eval_cmd(&ctx, a),
        Cmd::Query(a) => query_cmd(&ctx, a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn tag_mode(m: TagModeArg) -> TagMode {
    match m {
        TagModeArg::None => TagMode::None,
        TagModeArg::Column => TagMode::FromColumn,
        TagModeArg::Filename => TagMode::FromFilename,
    }
}

fn side(s: SideArg) -> Side {
    match s {
        SideArg::Source => Side::Source,
        SideArg::Target => Side::Target,
        SideArg::Both => Side::Both,
    }
}

fn load_corpora(paths: &[PathBuf], mode: TagModeArg) -> Result<ParallelCorpus> {
    let corpora = paths
        .iter()
        .map(|p| load_corpus(p, tag_mode(mode)))
        .collect::<polyparse::Result<Vec<_>>>()?;
    Ok(ParallelCorpus::concat(corpora))
}

/// Loaded subword merges and the side they apply to.
struct Subwords(Option<(BpeModel, Side)>);

impl Subwords {
    fn load(args: &BpeArgs) -> Result<Self> {
        Ok(Subwords(match &args.bpe {
            Some(p) => Some((BpeModel::load(p)?, side(args.bpe_side))),
            None => None,
        }))
    }

    fn corpus(&self, corpus: ParallelCorpus) -> ParallelCorpus {
        match &self.0 {
            Some((m, s)) => m.apply_to_corpus(&corpus, *s),
            None => corpus,
        }
    }

    fn input(&self, tokens: Vec<String>) -> Vec<String> {
        match &self.0 {
            Some((m, Side::Source | Side::Both)) => m.apply(&tokens),
            _ => tokens,
        }
    }
}

fn corpus_from(args: &CorpusArgs) -> Result<ParallelCorpus> {
    let corpus = load_corpora(&args.corpus, args.tag_mode)?;
    Ok(Subwords::load(&args.bpe)?.corpus(corpus))
}

fn build_graph_cmd(ctx: &Ctx, a: BuildGraphArgs) -> Result<()> {
    let corpus = corpus_from(&a.corpus)?;
    let graph = build_graph(&corpus.target_sequences())?;
    graph.save(&a.out)?;
    let (nodes, edges, paths) = (graph.node_count(), graph.edge_count(), graph.count_paths());
    println!("{nodes} nodes, {edges} edges, {paths} paths");
    ctx.diag(json!({
        "event": "graph",
        "nodes": nodes,
        "edges": edges,
        "paths": paths.to_string(),
        "languages": graph.language_tokens(),
    }));
    Ok(())
}

fn learn_bpe_cmd(ctx: &Ctx, a: LearnBpeArgs) -> Result<()> {
    let corpus = load_corpora(&a.corpus, a.tag_mode)?;
    let model = learn_bpe(&corpus, a.merges, side(a.side))?;
    model.save(&a.out)?;
    println!("{} merges", model.merge_count());
    ctx.diag(json!({ "event": "bpe", "requested": a.merges, "learned": model.merge_count() }));
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let corpus = corpus_from(&a.corpus)?;
    match a.scorer {
        ScorerArg::Lexical => {
            let opts = Model1Options { iterations: a.iterations, null: !a.no_null, floor: a.floor, ..Default::default() };
            let (model, forward, inverse) = train_lexical_model(&corpus, &opts, ctx.exec)?;
            model.save(&a.out)?;
            for (direction, trace) in [("forward", &forward), ("inverse", &inverse)] {
                for (i, ll) in trace.log_likelihood.iter().enumerate() {
                    ctx.diag(json!({ "event": "em", "direction": direction, "iteration": i, "log_likelihood": ll }));
                }
            }
            println!(
                "lexical model: {} pairs, final log-likelihood {} (forward) {} (inverse)",
                corpus.len(),
                forward.log_likelihood.last().copied().unwrap_or(f64::NAN),
                inverse.log_likelihood.last().copied().unwrap_or(f64::NAN)
            );
        }
        ScorerArg::Neural => {
            let lexical = match (&a.lexical_model, a.bias) {
                (Some(p), true) => Some(LexicalModel::load(p)?),
                (None, true) => return Err(usage("--bias needs --lexical-model")),
                _ => None,
            };
            let config = NeuralConfig {
                embedding: a.embedding,
                hidden: a.hidden,
                attention: a.attention,
                mlp: a.mlp,
                epsilon: a.epsilon,
                bias: a.bias,
                copy: a.copy,
                init_scale: a.init_scale,
                seed: a.seed,
            };
            let mut params = NeuralParameters::new(config, &corpus)?;
            let opts = TrainOptions {
                epochs: a.epochs,
                learning_rate: a.learning_rate,
                clip: (a.clip > 0.0).then_some(a.clip),
                batch_size: a.batch_size,
                seed: a.seed,
                exec: ctx.exec,
            };
            let report = neural::train(&mut params, &corpus, lexical.as_ref().map(|m| &m.inverse), &opts)?;
            save_parameters(&params, &a.out)?;
            for (epoch, loss) in report.losses.iter().enumerate() {
                ctx.diag(json!({ "event": "epoch", "epoch": epoch + 1, "loss": loss }));
            }
            println!(
                "neural model: {} pairs, {} epochs, final loss {}",
                corpus.len(),
                report.losses.len(),
                report.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

enum Scorer {
    Lexical(LexicalModel, LexicalOptions),
    Neural(Box<NeuralParameters>, Option<LexicalModel>, usize),
}

/// Everything needed to answer queries.
struct Decoder {
    graph: ComponentGraph,
    scorer: Scorer,
    subwords: Subwords,
    language: Option<String>,
}

impl Decoder {
    fn load(a: &ScorerArgs) -> Result<Self> {
        let graph_path = a.graph.as_ref().ok_or_else(|| usage("--graph is required"))?;
        let model_path = a.model.as_ref().ok_or_else(|| usage("--model is required"))?;
        if a.beam == 0 {
            return Err(usage("--beam must be at least 1"));
        }
        let graph = ComponentGraph::load(graph_path)?;
        let scorer = match a.scorer {
            ScorerArg::Lexical => Scorer::Lexical(
                LexicalModel::load(model_path)?,
                LexicalOptions { null_init: !a.no_null_init, ..Default::default() },
            ),
            ScorerArg::Neural => {
                let params = load_parameters(model_path)?;
                let lexical = match (&a.lexical_model, params.config.bias) {
                    (Some(p), _) => Some(LexicalModel::load(p)?),
                    (None, true) => return Err(usage("this neural model uses the bias term; pass --lexical-model")),
                    (None, false) => None,
                };
                Scorer::Neural(Box::new(params), lexical, a.beam)
            }
        };
        let language = a.language.as_deref().map(make_language_token).transpose()?;
        if let Some(t) = &language {
            graph.language_start(Some(t))?;
        }
        Ok(Decoder { graph, scorer, subwords: Subwords::load(&a.bpe)?, language })
    }

    fn query<'a>(&'a self, x: &[String], start: SearchStart) -> polyparse::Result<Box<dyn SuffixSearch + 'a>> {
        Ok(match &self.scorer {
            Scorer::Lexical(m, opts) => Box::new(LexicalQuery::new(&self.graph, &m.forward, x, start, opts)?),
            Scorer::Neural(p, lexical, beam) => Box::new(NeuralQuery::new(
                &self.graph,
                p,
                lexical.as_ref().map(|m| &m.inverse),
                x,
                start,
                *beam,
            )?),
        })
    }

    fn start(&self) -> polyparse::Result<SearchStart> {
        SearchStart::for_language(&self.graph, self.language.as_deref())
    }

    fn kbest(&self, x: &[String], k: usize) -> polyparse::Result<KBestList> {
        let query = self.query(x, self.start()?)?;
        decode_k(query.as_ref(), k, Execution::Sequential)
    }
}

fn stats_json(s: &SearchStats) -> serde_json::Value {
    json!({
        "nodes_visited": s.nodes_visited,
        "edges_examined": s.edges_examined,
        "edges_pruned": s.edges_pruned,
        "state_clobbers": s.state_clobbers,
        "unknown_labels": s.unknown_labels,
    })
}

fn read_lines(input: Option<&Path>) -> Result<Vec<String>> {
    let lines: Vec<String> = match input {
        Some(p) => fs::read_to_string(p)
            .with_context(|| p.display().to_string())?
            .lines()
            .map(str::to_owned)
            .collect(),
        None => io::stdin().lock().lines().collect::<io::Result<_>>().context("stdin")?,
    };
    Ok(lines)
}

/// Decodes every non-empty line; the result keeps input order.
fn decode_lines(ctx: &Ctx, decoder: &Decoder, lines: &[Vec<String>], k: usize) -> Result<Vec<KBestList>> {
    let results = ctx.exec.map(lines, |x| decoder.kbest(&decoder.subwords.input(x.clone()), k));
    let mut lists = Vec::with_capacity(lines.len());
    for (i, r) in results.into_iter().enumerate() {
        let list = r.with_context(|| format!("input line {}", i + 1))?;
        ctx.diag(json!({ "event": "decode", "line": i + 1, "found": list.len(), "stats": stats_json(&list.stats) }));
        lists.push(list);
    }
    Ok(lists)
}

fn decode_cmd(ctx: &Ctx, a: DecodeArgs, default_k: usize) -> Result<()> {
    let k = a.k.unwrap_or(default_k);
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let decoder = Decoder::load(&a.scorer)?;
    let inputs: Vec<Vec<String>> = read_lines(a.input.as_deref())?
        .iter()
        .map(|l| tokenize(l))
        .filter(|t| !t.is_empty())
        .collect();
    let lists = decode_lines(ctx, &decoder, &inputs, k)?;
    let mut out = io::BufWriter::new(io::stdout().lock());
    for (x, list) in inputs.iter().zip(&lists) {
        let input = x.join(" ");
        for (rank, t) in list.items.iter().enumerate() {
            writeln!(out, "{input}\t{}\t{}\t{}", rank + 1, t.score, t.labels.join(" "))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Ranked outputs per input from a file written by `decode` or `kbest`.
fn read_decoded(path: &Path) -> Result<HashMap<String, Vec<Vec<String>>>> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let mut ranked: HashMap<String, Vec<(usize, Vec<String>)>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || polyparse::Error::InvalidInput(format!("{}:{}: expected `input TAB rank TAB score TAB labels`", path.display(), i + 1));
        if cols.len() != 4 {
            return Err(bad().into());
        }
        let rank: usize = cols[1].parse().map_err(|_| bad())?;
        ranked.entry(cols[0].to_owned()).or_default().push((rank, tokenize(cols[3])));
    }
    Ok(ranked
        .into_iter()
        .map(|(input, mut v)| {
            v.sort_by_key(|(r, _)| *r);
            (input, v.into_iter().map(|(_, labels)| labels).collect())
        })
        .collect())
}

fn eval_cmd(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let raw = load_corpora(&a.test, a.tag_mode)?;
    let test = Subwords::load(&a.scorer.bpe)?.corpus(raw.clone());
    let norm = Normalization { strip_language: a.strip_language, join_subwords: a.join_subwords };
    let graph = match &a.scorer.graph {
        Some(p) => Some(ComponentGraph::load(p)?),
        None => None,
    };
    // Inputs are keyed and decoded in their unsplit form, as `decode` does.
    let outputs: Vec<Vec<Vec<String>>> = match &a.decoded {
        Some(path) => {
            let decoded = read_decoded(path)?;
            raw.pairs
                .iter()
                .map(|p| decoded.get(&p.source.join(" ")).cloned().unwrap_or_default())
                .collect()
        }
        None => {
            let decoder = Decoder::load(&a.scorer)?;
            let inputs: Vec<Vec<String>> = raw.pairs.iter().map(|p| p.source.clone()).collect();
            decode_lines(ctx, &decoder, &inputs, a.k)?
                .into_iter()
                .map(|l| l.items.into_iter().map(|t| t.labels).collect())
                .collect()
        }
    };
    let records: Vec<EvalRecord> = test
        .pairs
        .iter()
        .zip(outputs)
        .zip(&raw.pairs)
        .map(|((p, outs), r)| {
            let well_formed = graph.as_ref().map(|g| outs.iter().all(|o| g.accepts(o)));
            let mut rec = EvalRecord::new(r.source.clone(), p.target.clone(), outs, p.tag.clone(), a.k, norm);
            rec.well_formed = well_formed;
            rec
        })
        .collect();
    let summary = evaluate(&records)?;
    if a.table {
        print!("{}", summary.to_table());
    } else {
        print!("{}", summary.to_key_values());
    }
    Ok(())
}

fn query_cmd(ctx: &Ctx, a: QueryArgs) -> Result<()> {
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let decoder = Decoder::load(&a.scorer)?;
    let x = decoder.subwords.input(tokenize(&a.text.join(" ")));
    if x.is_empty() {
        return Err(usage("empty question"));
    }
    let grouped: Vec<(String, KBestList)> = if decoder.language.is_none() && !decoder.graph.language_tokens().is_empty() {
        kbest_per_language(&decoder.graph, a.k, ctx.exec, |start| decoder.query(&x, start))?
    } else {
        let list = decoder.kbest(&x, a.k)?;
        let name = a.scorer.language.clone().unwrap_or_else(|| "-".to_owned());
        vec![(name, list)]
    };
    let mut out = io::BufWriter::new(io::stdout().lock());
    for (tag, list) in &grouped {
        ctx.diag(json!({ "event": "query", "language": tag, "found": list.len(), "stats": stats_json(&list.stats) }));
        for (rank, t) in list.items.iter().enumerate() {
            writeln!(out, "{tag}\t{}\t{}\t{}", rank + 1, t.score, t.labels.join(" "))?;
        }
    }
    out.flush()?;
    Ok(())
}
