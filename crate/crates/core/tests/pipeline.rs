use std::path::Path;

use polyparse::automaton::{build_graph, ComponentGraph};
use polyparse::bpe::{join_pieces, learn_bpe, Side};
use polyparse::corpus::{parse_corpus, TagMode};
use polyparse::eval::{evaluate, split_dataset, EvalRecord, Normalization};
use polyparse::kbest::decode_k;
use polyparse::lexical_decoder::{LexicalOptions, LexicalQuery};
use polyparse::model1::{train_lexical_model, LexicalModel, Model1Options};
use polyparse::neural::{load_parameters, save_parameters, train, NeuralConfig, NeuralParameters, TrainOptions};
use polyparse::neural_decoder::NeuralQuery;
use polyparse::search::{SearchStart, SuffixSearch};
use polyparse::Execution;

const CORPUS: &str = "\
returns the smallest integer not less than x\tceiling x\tC
returns the largest integer not greater than x\tflooring x\tC
returns the absolute value of x\tabsolute x\tC
compares two strings\tstringcompare left right\tC
returns the smallest integer not less than n\tceiling n\tGo
returns the largest integer not greater than n\tflooring n\tGo
returns the length of a string\tstringlength text\tGo
";

#[test]
fn subword_pipeline_round_trips_through_files() {
    let corpus = parse_corpus(CORPUS, Path::new("mem.tsv"), TagMode::FromColumn).unwrap();
    let bpe = learn_bpe(&corpus, 40, Side::Target).unwrap();
    let split = bpe.apply_to_corpus(&corpus, Side::Target);
    let graph = build_graph(&split.target_sequences()).unwrap();
    assert_eq!(graph.language_tokens(), ["2C", "2Go"]);

    let dir = tempfile::tempdir().unwrap();
    graph.save(dir.path().join("graph.txt")).unwrap();
    assert_eq!(ComponentGraph::load(dir.path().join("graph.txt")).unwrap(), graph);

    let (lexical, forward, _) = train_lexical_model(&split, &Model1Options::default(), Execution::Parallel).unwrap();
    assert!(forward.is_non_decreasing(1e-9));
    lexical.save(dir.path().join("lex.txt")).unwrap();
    assert_eq!(LexicalModel::load(dir.path().join("lex.txt")).unwrap(), lexical);

    let config = NeuralConfig { embedding: 8, hidden: 8, attention: 8, mlp: 8, bias: true, copy: true, ..Default::default() };
    let mut params = NeuralParameters::new(config, &split).unwrap();
    train(&mut params, &split, Some(&lexical.inverse), &TrainOptions { epochs: 5, ..Default::default() }).unwrap();
    save_parameters(&params, dir.path().join("nn.safetensors")).unwrap();
    let params = load_parameters(dir.path().join("nn.safetensors")).unwrap();

    let norm = Normalization { strip_language: true, join_subwords: true };
    let mut records = Vec::new();
    for pair in &split.pairs {
        let start = SearchStart::for_language(&graph, Some(&pair.target[0])).unwrap();
        let lq = LexicalQuery::new(&graph, &lexical.forward, &pair.source, start.clone(), &LexicalOptions::default()).unwrap();
        let nq = NeuralQuery::new(&graph, &params, Some(&lexical.inverse), &pair.source, start, 3).unwrap();
        for q in [&lq as &dyn SuffixSearch, &nq] {
            let list = decode_k(q, 3, Execution::Sequential).unwrap();
            for t in &list.items {
                assert!(graph.accepts(&t.labels));
                assert_eq!(t.labels[0], pair.target[0]);
                // Every output joins back into a whole original sequence.
                let words = join_pieces(t.component());
                assert!(corpus.pairs.iter().any(|p| p.component() == words), "{words:?}");
            }
        }
        let outs = decode_k(&lq, 3, Execution::Sequential).unwrap().items.into_iter().map(|t| t.labels).collect();
        records.push(EvalRecord::new(pair.source.clone(), pair.target.clone(), outs, pair.tag.clone(), 3, norm));
    }
    let summary = evaluate(&records).unwrap();
    assert!(summary.acc_at_1 <= summary.mrr);
    assert_eq!(summary.per_tag.len(), 2);
    assert!(summary.acc_at_10.is_none());
}

#[test]
fn splits_partition_the_corpus() {
    let corpus = parse_corpus(CORPUS, Path::new("mem.tsv"), TagMode::FromColumn).unwrap();
    let (a, b, c) = split_dataset(&corpus, (0.5, 0.25, 0.25), 3).unwrap();
    let mut all: Vec<_> = [a, b, c].into_iter().flat_map(|p| p.pairs).collect();
    all.sort_by(|x, y| x.source.cmp(&y.source));
    let mut want = corpus.pairs.clone();
    want.sort_by(|x, y| x.source.cmp(&y.source));
    assert_eq!(all, want);
}
