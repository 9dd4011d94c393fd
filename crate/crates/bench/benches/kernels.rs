//! Benchmarks for the numeric hot paths: the two convolution kernels, one
//! recurrent cell step, and a whole tiny-preset forward.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mgst_bench::randn;
use mgst_core::nn::convlstm::{cell_step, cell_init, CellState};
use mgst_core::nn::model::{ForwardOpts, Model, ModelConfig};
use mgst_core::nn::{Graph, Mode, Params};
use mgst_core::tensor::{ops, ConvSpec};

fn conv_benches(c: &mut Criterion) {
    let x = randn(1, "x", &[16, 24, 24]);
    let w = randn(2, "w", &[32, 16, 3, 3]);
    let b = randn(3, "b", &[32]);
    let spec = ConvSpec::spatial(3, 3).with_pad(0, 1, 1);
    c.bench_function("conv2d 16x24x24 -> 32", |bench| {
        bench.iter(|| ops::conv2d(black_box(&x), &w, Some(&b), &spec).unwrap())
    });

    let x3 = randn(4, "x3", &[8, 8, 16, 16]);
    let w3 = randn(5, "w3", &[8, 8, 3, 3, 3]);
    let b3 = randn(6, "b3", &[8]);
    let spec3 = ConvSpec::cube(3, 3, 3).with_pad(1, 1, 1);
    c.bench_function("conv3d 8x8x16x16 -> 8", |bench| {
        bench.iter(|| ops::conv3d(black_box(&x3), &w3, Some(&b3), &spec3).unwrap())
    });
}

fn cell_bench(c: &mut Criterion) {
    let mut params = Params::<f32>::new();
    cell_init(&mut params, "cell", 32, 8, 3, (2, 2), 7);
    let x = randn(8, "cx", &[32, 2, 2]);
    c.bench_function("convlstm cell step 32ch -> 8", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(&params, Mode::Eval);
            let xn = g.input(x.clone());
            let prev = CellState {
                c: g.input(mgst_core::tensor::Tensor::zeros(&[8, 2, 2])),
                h: g.input(mgst_core::tensor::Tensor::zeros(&[8, 2, 2])),
            };
            let out = cell_step(&mut g, "cell", xn, &prev, 3).unwrap();
            black_box(g.tape.value(out.h).data()[0])
        })
    });
}

fn model_bench(c: &mut Criterion) {
    let model = Model::<f32>::build(ModelConfig::tiny(), 0).unwrap();
    let video = randn(9, "video", &[1, 8, 32, 32]).map(|v| v.abs().min(1.0));
    c.bench_function("tiny preset eval forward", |bench| {
        bench.iter(|| model.forward(black_box(&video), Mode::Eval, ForwardOpts::default()).unwrap())
    });
}

criterion_group!(benches, conv_benches, cell_bench, model_bench);
criterion_main!(benches);
