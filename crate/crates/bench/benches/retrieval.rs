use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use gprf_core::metrics::ndcg_at_k;
use gprf_core::synthetic::{generate, SyntheticParams};
use gprf_core::{
    Bm25Params, EmbedderClient, EmbeddingStore, HashingEmbedder, InvertedIndex, Similarity,
};

fn retrieval(c: &mut Criterion) {
    let corpus = generate(SyntheticParams {
        topics: 100,
        ..Default::default()
    })
    .unwrap();
    let index = InvertedIndex::build(&corpus.collection).unwrap();
    let query = &corpus.queries[0];
    let model = index.query_model(&query.text);

    c.bench_function("bm25_search_top1000", |b| {
        b.iter(|| {
            index
                .search("q", black_box(&model), 1000, Bm25Params::default())
                .unwrap()
        })
    });
    c.bench_function("bm25_index_build", |b| {
        b.iter(|| InvertedIndex::build(black_box(&corpus.collection)).unwrap())
    });

    let embedder = HashingEmbedder::new(1024).unwrap();
    let texts: Vec<String> = corpus.collection.iter().map(|d| d.text.clone()).collect();
    let store = EmbeddingStore::new(
        corpus
            .collection
            .iter()
            .map(|d| d.doc_id.clone())
            .zip(embedder.embed(&texts).unwrap())
            .collect(),
        Similarity::Cosine,
    )
    .unwrap();
    let q = embedder.embed_one(&query.text);
    c.bench_function("dense_exact_search_top1000", |b| {
        b.iter(|| store.search("q", black_box(&q), 1000).unwrap())
    });

    let run = index
        .search(&query.query_id, &model, 1000, Bm25Params::default())
        .unwrap();
    c.bench_function("ndcg_at_10", |b| {
        b.iter(|| ndcg_at_k(black_box(&run), &corpus.qrels, 10))
    });
}

criterion_group!(benches, retrieval);
criterion_main!(benches);
