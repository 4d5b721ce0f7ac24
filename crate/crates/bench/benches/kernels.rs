use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use stgaze_bench::{clip, model, random};
use stgaze_core::geometry::ScreenGeometry;
use stgaze_core::loss::{clip_loss, LossWeights};
use stgaze_core::model::ModelConfig;
use stgaze_core::synth::{render_eye, SceneParams, Side};
use stgaze_core::geometry::GazeAngles;
use stgaze_core::{Graph, ParamStore, Tensor};

fn conv(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", random(&[16, 8, 3, 3], 1)).unwrap();
    let x: Tensor<f32> = random(&[8, 64, 64], 2);
    c.bench_function("conv2d_8x64x64_to_16_fwd_bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new(&store);
            let xv = g.constant(x.clone());
            let wv = g.param(w);
            let y = g.conv2d(xv, wv, None, 2, (1, 1)).unwrap();
            let s = g.sum(y);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn gru(c: &mut Criterion) {
    let mut group = c.benchmark_group("gru_scan_fwd_bwd");
    for &len in &[64usize, 256] {
        let mut store = ParamStore::<f32>::new();
        let hidden = 40;
        let w_hh = store.add("w_hh", random(&[3 * hidden, hidden], 3)).unwrap();
        let b_hh = store.add("b_hh", random(&[3 * hidden], 4)).unwrap();
        let gx: Tensor<f32> = random(&[len, 3 * hidden], 5);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| {
                let mut g = Graph::new(&store);
                let gv = g.constant(gx.clone());
                let h0 = g.constant(Tensor::zeros(&[hidden]).unwrap());
                let (wv, bv) = (g.param(w_hh), g.param(b_hh));
                let y = g.gru_scan(gv, h0, wv, bv).unwrap();
                let s = g.sum(y);
                black_box(g.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn tiny_model(c: &mut Criterion) {
    let (store, net) = model::<f32>(ModelConfig::tiny(), 0);
    let sample = clip(2, 7);
    let targets = sample.targets();
    let geom = ScreenGeometry::default();
    let weights = LossWeights::default();
    let mut group = c.benchmark_group("tiny_model_2_frames");
    group.sample_size(20);
    group.bench_function("forward", |b| {
        b.iter(|| black_box(net.predict(&store, &sample.frames, None).unwrap()))
    });
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new(&store);
            let out = net.forward(&mut g, &sample.frames, None, false).unwrap();
            let terms = clip_loss(&mut g, out.gaze_vectors, &targets, &geom, &weights).unwrap();
            black_box(g.backward(terms.total).unwrap());
        })
    });
    group.finish();
}

fn render(c: &mut Criterion) {
    let params = SceneParams::default();
    c.bench_function("render_eye_128", |b| {
        b.iter(|| black_box(render_eye(GazeAngles::from_degrees(5.0, -10.0), Side::Left, &params, 3)))
    });
}

criterion_group!(benches, conv, gru, tiny_model, render);
criterion_main!(benches);
