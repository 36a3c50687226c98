use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polyparse::automaton::build_graph;
use polyparse::corpus::{Pair, ParallelCorpus};
use polyparse::kbest::decode_k;
use polyparse::lexical_decoder::{decode_lexical, LexicalOptions, LexicalQuery};
use polyparse::model1::{train_model1, Model1Options};
use polyparse::neural::{train, NeuralConfig, NeuralParameters, TrainOptions};
use polyparse::search::SearchStart;
use polyparse::Execution;

const POLICIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn sentence(r: &mut ChaCha8Rng, prefix: &str, vocab: usize, max_len: usize) -> Vec<String> {
    let len = r.random_range(1..=max_len);
    (0..len).map(|_| format!("{prefix}{}", r.random_range(0..vocab))).collect()
}

fn corpus(n: usize, seed: u64) -> ParallelCorpus {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|_| Pair::new(sentence(&mut r, "w", 300, 12), sentence(&mut r, "c", 200, 6), None).unwrap())
        .collect();
    ParallelCorpus::from_pairs(pairs)
}

fn em(c: &mut Criterion) {
    let data = corpus(2000, 1);
    let opts = Model1Options { iterations: 3, ..Default::default() };
    let mut group = c.benchmark_group("model1_em");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(name, |b| b.iter(|| train_model1(&data, &opts, exec).unwrap()));
    }
    group.finish();
}

fn batch_decode(c: &mut Criterion) {
    let data = corpus(1000, 2);
    let graph = build_graph(&data.target_sequences()).unwrap();
    let (table, _) = train_model1(&data, &Model1Options::default(), Execution::Parallel).unwrap();
    let inputs: Vec<Vec<String>> = data.pairs.iter().take(200).map(|p| p.source.clone()).collect();
    let start = SearchStart::source(&graph);
    let opts = LexicalOptions::default();
    let mut group = c.benchmark_group("lexical_batch_decode");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(name, |b| {
            b.iter(|| exec.map(&inputs, |x| decode_lexical(x, &graph, &table, &start, &opts).unwrap()))
        });
    }
    group.finish();
}

fn kbest(c: &mut Criterion) {
    let data = corpus(1000, 3);
    let graph = build_graph(&data.target_sequences()).unwrap();
    let (table, _) = train_model1(&data, &Model1Options::default(), Execution::Parallel).unwrap();
    let x = data.pairs[0].source.clone();
    let query = LexicalQuery::new(&graph, &table, &x, SearchStart::source(&graph), &LexicalOptions::default()).unwrap();
    let mut group = c.benchmark_group("kbest");
    group.sample_size(10);
    for k in [10, 50] {
        for (name, exec) in POLICIES {
            group.bench_with_input(BenchmarkId::new(name, k), &k, |b, &k| b.iter(|| decode_k(&query, k, exec).unwrap()));
        }
    }
    group.finish();
}

fn neural_epoch(c: &mut Criterion) {
    let data = corpus(64, 4);
    let config = NeuralConfig { embedding: 16, hidden: 16, attention: 16, mlp: 16, ..Default::default() };
    let params = NeuralParameters::new(config, &data).unwrap();
    let mut group = c.benchmark_group("neural_epoch");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        let opts = TrainOptions { epochs: 1, batch_size: 16, exec, ..Default::default() };
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut p = params.clone();
                train(&mut p, &data, None, &opts).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, em, batch_decode, kbest, neural_epoch);
criterion_main!(benches);
