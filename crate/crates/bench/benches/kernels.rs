use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use droplstm::data::batchify;
use droplstm::infer::{beam_search, perplexity};
use droplstm::train::{train_epoch, TrainConfig};
use droplstm::{BeamConfig, Dropout, LstmState, Preset, Tape, Tensor};
use droplstm_bench::{corpus, model};

fn affine(c: &mut Criterion) {
    let mut group = c.benchmark_group("affine");
    for &(batch, n) in &[(1usize, 200usize), (20, 200), (20, 650)] {
        let w = Tensor::new(
            &[4 * n, 2 * n],
            (0..8 * n * n).map(|i| (i % 13) as f64 * 1e-3).collect(),
        )
        .unwrap();
        let b = Tensor::zeros(&[4 * n]);
        let x = Tensor::new(&[batch, 2 * n], vec![0.5; batch * 2 * n]).unwrap();
        group.throughput(Throughput::Elements((batch * 8 * n * n) as u64));
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("B{batch}xn{n}")),
            &(),
            |bench, _| {
                bench.iter(|| {
                    let mut tape = Tape::new();
                    let (w, b, x) = (tape.leaf(&w), tape.leaf(&b), tape.leaf(&x));
                    let y = tape.affine(w, b, x).unwrap();
                    black_box(tape.value(y)[0])
                })
            },
        );
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let (tokens, vocab) = corpus(20 * 21 * 4, 200);
    let cfg = TrainConfig {
        hidden: 64,
        unroll: 20,
        epochs: 1,
        dropout: 0.3,
        ..Preset::BaselineSmall.config()
    };
    let data = batchify(&tokens, cfg.batch_size).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("epoch_4_windows_n64", |bench| {
        let mut params = model(vocab.len(), cfg.hidden, cfg.layers);
        params.set_requires_grad(true);
        let mut drop = Dropout::train(cfg.dropout, 1).unwrap();
        bench.iter(|| {
            let state = LstmState::for_model(&params, cfg.batch_size);
            let (stats, _) = train_epoch(&mut params, &data, state, &cfg, 0.1, &mut drop).unwrap();
            black_box(stats.nll_sum)
        })
    });
    let params = model(vocab.len(), cfg.hidden, cfg.layers);
    group.bench_function("perplexity_n64", |bench| {
        bench.iter(|| black_box(perplexity(&params, &data, cfg.unroll).unwrap()))
    });
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let params = model(50, 32, 2);
    let mut group = c.benchmark_group("beam_search");
    for width in [1usize, 4, 12] {
        let cfg = BeamConfig {
            width,
            max_len: 20,
            eos: 0,
            length_normalize: false,
        };
        group.bench_with_input(BenchmarkId::from_parameter(width), &cfg, |bench, cfg| {
            bench.iter(|| black_box(beam_search(&params, &[3, 4, 5, 2], cfg).unwrap().log_prob))
        });
    }
    group.finish();
}

criterion_group!(benches, affine, training, decoding);
criterion_main!(benches);
