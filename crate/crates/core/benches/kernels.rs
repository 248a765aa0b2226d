//! Parallel vs sequential timing of the heavy kernels.
//!
//! With the default `parallel` feature each kernel runs inside a one-thread
//! rayon pool and inside a pool with every available core. Built with
//! `--no-default-features` the same kernels run through the sequential
//! fallback:
//!
//! ```text
//! cargo bench -p qmt-core --bench kernels
//! cargo bench -p qmt-core --bench kernels --no-default-features
//! ```

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array3;

use qmt_core::data::{normalize_dataset, EchoSeries};
use qmt_core::encoding::undersample;
use qmt_core::fit::{fit_pixelwise, FitConfig};
use qmt_core::lowrank::LlrBlocks;
use qmt_core::net::{backward_net, forward_net, init_params, Mode, NetParams, NetSpec};
use qmt_core::phantom::{make_phantom, synthesize_echoes, PhantomSpec, KNEE_TE_MS};
use qmt_core::sampling::{make_maskset, MaskParams};

struct Inputs {
    full: EchoSeries,
    zero_filled: EchoSeries,
    net: NetParams,
    batch: Vec<Array3<f64>>,
}

fn inputs() -> Inputs {
    let truth = make_phantom(&PhantomSpec::knee(64, 64, 1)).unwrap();
    let series = synthesize_echoes(&truth, &KNEE_TE_MS, 1.0 / 40.0, 1).unwrap();
    let (full, _) = normalize_dataset(&series).unwrap();
    let masks = make_maskset(&MaskParams::new(64, KNEE_TE_MS.len(), 5.0), 2).unwrap();
    let (_, zero_filled) = undersample(&full, &masks).unwrap();
    let net = init_params(&NetSpec::new(KNEE_TE_MS.len()).with_base_filters(8), 3).unwrap();
    let batch = vec![zero_filled.magnitudes(); 3];
    Inputs { full, zero_filled, net, batch }
}

#[cfg(feature = "parallel")]
type Pool = rayon::ThreadPool;
#[cfg(not(feature = "parallel"))]
type Pool = ();

#[cfg(feature = "parallel")]
fn on<R: Send>(pool: &Pool, f: impl FnOnce() -> R + Send) -> R {
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn on<R>(_: &Pool, f: impl FnOnce() -> R) -> R {
    f()
}

fn kernels(c: &mut Criterion, label: &str, pool: &Pool) {
    let inp = inputs();
    let blocks = LlrBlocks::new(64, 64, 8, 4).unwrap();
    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);

    g.bench_function(BenchmarkId::new("fit_64x64", label), |b| {
        b.iter(|| on(pool, || black_box(fit_pixelwise(&inp.full, &FitConfig::default()).unwrap())))
    });
    g.bench_function(BenchmarkId::new("llr_prox_64x64", label), |b| {
        b.iter(|| on(pool, || black_box(blocks.prox(inp.zero_filled.data(), 0.05))))
    });
    g.bench_function(BenchmarkId::new("net_step_batch3", label), |b| {
        b.iter(|| {
            on(pool, || {
                let (out, tape) = forward_net(&inp.net, &inp.batch, Mode::Train).unwrap();
                black_box(backward_net(&inp.net, &tape, &out).unwrap())
            })
        })
    });
    g.finish();
}

#[cfg(feature = "parallel")]
fn bench(c: &mut Criterion) {
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    for threads in [1, n] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        kernels(c, &format!("rayon-{threads}"), &pool);
        if n == 1 {
            break;
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn bench(c: &mut Criterion) {
    kernels(c, "sequential", &());
}

criterion_group!(benches, bench);
criterion_main!(benches);
