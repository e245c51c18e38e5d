//! Shared builders for integration tests: seeded random networks in the
//! three supported topologies and random input batches.
#![allow(dead_code)] // each test binary uses its own subset

use intnet::ir::{
    BRelu, BiasData, Conv2d, KernelData, Layer, LayerId, LayerOp, NetworkIR,
};
use intnet::model_io::Model;
use intnet::ratio;
use intnet::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_weights(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn conv_layer(
    rng: &mut ChaCha8Rng,
    id: &str,
    inputs: &[&str],
    o: usize,
    i: usize,
    k: usize,
    scale: f32,
) -> Layer {
    Layer {
        id: LayerId::new(id),
        inputs: inputs.iter().map(|s| LayerId::new(*s)).collect(),
        op: LayerOp::Conv2d(Conv2d {
            kernel: KernelData::Float(
                Tensor::new(vec![o, i, k, k], rand_weights(rng, o * i * k * k, scale)).unwrap(),
            ),
            bias: BiasData::Float(rand_weights(rng, o, scale * 0.1)),
            stride: 1,
            padding: k / 2,
            batch_norm: None,
        }),
    }
}

pub fn brelu_layer(id: &str, input: &str, upper: f64) -> Layer {
    Layer {
        id: LayerId::new(id),
        inputs: vec![LayerId::new(input)],
        op: LayerOp::BRelu(BRelu { upper }),
    }
}

/// Four convolution levels with two two-branch concats, patterned after
/// compact artifact-reduction networks: 5x5 stem, mixed-kernel branch pairs,
/// and a single-channel head that predicts a residual.
pub fn four_level_concat_net(seed: u64, side: usize) -> Model {
    let mut g = rng(seed);
    let layers = vec![
        conv_layer(&mut g, "c1", &[], 16, 1, 5, 0.25),
        brelu_layer("r1", "c1", f64::INFINITY),
        conv_layer(&mut g, "c2a", &["r1"], 8, 16, 5, 0.12),
        brelu_layer("r2a", "c2a", f64::INFINITY),
        conv_layer(&mut g, "c2b", &["r1"], 8, 16, 3, 0.18),
        brelu_layer("r2b", "c2b", f64::INFINITY),
        Layer {
            id: LayerId::new("cat2"),
            inputs: vec![LayerId::new("r2a"), LayerId::new("r2b")],
            op: LayerOp::Concat,
        },
        conv_layer(&mut g, "c3a", &["cat2"], 8, 16, 3, 0.15),
        brelu_layer("r3a", "c3a", f64::INFINITY),
        conv_layer(&mut g, "c3b", &["cat2"], 8, 16, 1, 0.3),
        brelu_layer("r3b", "c3b", f64::INFINITY),
        Layer {
            id: LayerId::new("cat3"),
            inputs: vec![LayerId::new("r3a"), LayerId::new("r3b")],
            op: LayerOp::Concat,
        },
        conv_layer(&mut g, "c4", &["cat3"], 1, 16, 3, 0.2),
    ];
    Model::float(NetworkIR {
        name: format!("four-level-{seed}"),
        input_shape: [1, side, side],
        input_ratio: ratio::from_i64(256),
        layers,
    })
}

/// Straight conv/brelu chain.
pub fn linear_net(seed: u64, side: usize) -> Model {
    let mut g = rng(seed);
    Model::float(NetworkIR {
        name: format!("linear-{seed}"),
        input_shape: [1, side, side],
        input_ratio: ratio::from_i64(256),
        layers: vec![
            conv_layer(&mut g, "c1", &[], 8, 1, 3, 0.3),
            brelu_layer("r1", "c1", f64::INFINITY),
            conv_layer(&mut g, "c2", &["r1"], 8, 8, 3, 0.2),
            brelu_layer("r2", "c2", f64::INFINITY),
            conv_layer(&mut g, "c3", &["r2"], 2, 8, 3, 0.2),
        ],
    })
}

/// One residual block: the skip taps the first activation, the main path
/// runs two more convolutions, and their sum feeds a final activation.
pub fn residual_net(seed: u64, side: usize) -> Model {
    let mut g = rng(seed);
    Model::float(NetworkIR {
        name: format!("residual-{seed}"),
        input_shape: [1, side, side],
        input_ratio: ratio::from_i64(256),
        layers: vec![
            conv_layer(&mut g, "c1", &[], 8, 1, 3, 0.3),
            brelu_layer("r1", "c1", f64::INFINITY),
            conv_layer(&mut g, "c2", &["r1"], 8, 8, 3, 0.2),
            brelu_layer("r2", "c2", f64::INFINITY),
            conv_layer(&mut g, "c3", &["r2"], 8, 8, 3, 0.2),
            Layer {
                id: LayerId::new("add"),
                inputs: vec![LayerId::new("c3"), LayerId::new("r1")],
                op: LayerOp::ResidualAdd,
            },
            brelu_layer("r3", "add", f64::INFINITY),
            conv_layer(&mut g, "c4", &["r3"], 1, 8, 3, 0.25),
        ],
    })
}

/// Two-branch concat topology.
pub fn concat_net(seed: u64, side: usize) -> Model {
    let mut g = rng(seed);
    Model::float(NetworkIR {
        name: format!("concat-{seed}"),
        input_shape: [1, side, side],
        input_ratio: ratio::from_i64(256),
        layers: vec![
            conv_layer(&mut g, "c1", &[], 6, 1, 3, 0.3),
            brelu_layer("r1", "c1", f64::INFINITY),
            conv_layer(&mut g, "c2a", &["r1"], 4, 6, 3, 0.25),
            brelu_layer("r2a", "c2a", f64::INFINITY),
            conv_layer(&mut g, "c2b", &["r1"], 4, 6, 1, 0.4),
            brelu_layer("r2b", "c2b", f64::INFINITY),
            Layer {
                id: LayerId::new("cat"),
                inputs: vec![LayerId::new("r2a"), LayerId::new("r2b")],
                op: LayerOp::Concat,
            },
            conv_layer(&mut g, "c3", &["cat"], 1, 8, 3, 0.25),
        ],
    })
}

/// Channel-heavy chain on an 8x8x8 input: the kernel payload dwarfs the
/// header, matching the size profile of real models.
pub fn wide_net(seed: u64) -> Model {
    let mut g = rng(seed);
    Model::float(NetworkIR {
        name: format!("wide-{seed}"),
        input_shape: [8, 8, 8],
        input_ratio: ratio::from_i64(256),
        layers: vec![
            conv_layer(&mut g, "c1", &[], 48, 8, 3, 0.2),
            brelu_layer("r1", "c1", f64::INFINITY),
            conv_layer(&mut g, "c2", &["r1"], 48, 48, 3, 0.1),
            brelu_layer("r2", "c2", f64::INFINITY),
            conv_layer(&mut g, "c3", &["r2"], 8, 48, 3, 0.1),
        ],
    })
}

/// Random raw input batch in NCHW, full byte range.
pub fn rand_batch(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<u8> {
    let data = (0..n * c * h * w).map(|_| rng.random::<u8>()).collect();
    Tensor::new(vec![n, c, h, w], data).unwrap()
}

/// Runs the integer engine inside a dedicated thread pool of `threads`.
pub fn on_pool<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(job)
}
