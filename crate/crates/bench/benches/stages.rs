use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use flowvid_bench::{batch_bundle, fixture, small_model};
use flowvid_core::denoiser::Denoiser;
use flowvid_core::diffusion::{ddim_invert, ddim_sample, GuidanceConfig};
use flowvid_core::editprop::{
    edit_video, interpolate_nonkeys, BatchPlan, CalibrationMode, DiffusionGenerator, EditSpec, GenerationOptions,
};
use flowvid_core::flow::{estimate_flow, warp_first_frame, AdjacentFlows, ConsistencyParams, FlowParams};

const STEPS: usize = 5;

fn flow(c: &mut Criterion) {
    let fx = fixture(2).unwrap();
    let p = FlowParams::default();
    c.bench_function("flow/pair_64x64", |b| {
        b.iter(|| estimate_flow(black_box(&fx.clip.frames[1]), &fx.clip.frames[0], &p).unwrap())
    });
}

fn warping(c: &mut Criterion) {
    let fx = fixture(8).unwrap();
    let model = small_model();
    let (flows, _) = batch_bundle(&model, &fx).unwrap();
    let first = &fx.clip.frames[0];
    c.bench_function("warping/first_frame_x8", |b| {
        b.iter(|| {
            for (f, o) in flows.bwd.iter().zip(&flows.bwd_occ) {
                black_box(warp_first_frame(first, f, o, 0.5).unwrap());
            }
        })
    });
}

fn diffusion(c: &mut Criterion) {
    let fx = fixture(4).unwrap();
    let model = small_model();
    let (_, bundle) = batch_bundle(&model, &fx).unwrap();
    let z0 = model.conditioner.encode_all(&fx.clip.frames).unwrap();
    let mut net = Denoiser::new(&model.params, &model.cfg, &bundle);
    let (z_t, store) = ddim_invert(&model.schedule, &mut net, &z0, STEPS).unwrap();
    let mut g = c.benchmark_group("diffusion");
    g.sample_size(10);
    g.bench_function("inversion", |b| {
        b.iter(|| ddim_invert(&model.schedule, &mut net, black_box(&z0), STEPS).unwrap())
    });
    g.bench_function("keyframe_sampling", |b| {
        b.iter(|| {
            let guide = GuidanceConfig::new(7.5).unwrap();
            ddim_sample(&model.schedule, &mut net, black_box(&z_t), STEPS, guide, Some(&store)).unwrap()
        })
    });
    g.finish();
}

fn interpolation(c: &mut Criterion) {
    let fx = fixture(9).unwrap();
    let keys = fx.clip.select(&[0, 4, 8], 4).unwrap();
    let flows = AdjacentFlows::estimate(&keys, &FlowParams::default(), &ConsistencyParams::default()).unwrap();
    c.bench_function("interpolation/3_keys_interval_4", |b| {
        b.iter(|| interpolate_nonkeys(black_box(&keys.frames), 4, Some(&flows)).unwrap())
    });
}

fn end_to_end(c: &mut Criterion) {
    let plan = BatchPlan::new(2, 4, 2).unwrap();
    let fx = fixture(plan.input_span()).unwrap();
    let edit = EditSpec::identity(fx.prompt.clone());
    let mut g = c.benchmark_group("edit_video");
    g.sample_size(10);
    g.bench_function("two_batches", |b| {
        b.iter(|| {
            let opts = GenerationOptions {
                steps: STEPS,
                ..GenerationOptions::default()
            };
            let mut gen = DiffusionGenerator::new(small_model(), opts);
            edit_video(
                &fx.clip,
                &fx.conditions,
                &edit,
                &plan,
                Some(CalibrationMode::PerChannel),
                &mut gen,
                &FlowParams::default(),
                &ConsistencyParams::default(),
            )
            .unwrap()
        })
    });
    g.finish();
}

criterion_group!(stages, flow, warping, diffusion, interpolation, end_to_end);
criterion_main!(stages);
