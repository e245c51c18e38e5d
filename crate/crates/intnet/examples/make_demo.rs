//! Generates a demo float model and a directory of random input batches so
//! the command-line walkthrough in the README can run end to end:
//!
//! ```text
//! cargo run -p intnet --example make_demo -- demo
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use intnet::ir::{BRelu, BiasData, Conv2d, KernelData, Layer, LayerId, LayerOp, NetworkIR};
use intnet::model_io::{save, Model};
use intnet::ratio;
use intnet::tensor::{write_blob_file, AnyTensor, Tensor};

fn conv(g: &mut ChaCha8Rng, id: &str, inputs: &[&str], o: usize, i: usize, k: usize, s: f32) -> Layer {
    let weights: Vec<f32> = (0..o * i * k * k).map(|_| g.random_range(-s..s)).collect();
    let bias: Vec<f32> = (0..o).map(|_| g.random_range(-s * 0.1..s * 0.1)).collect();
    Layer {
        id: LayerId::new(id),
        inputs: inputs.iter().map(|x| LayerId::new(*x)).collect(),
        op: LayerOp::Conv2d(Conv2d {
            kernel: KernelData::Float(Tensor::new(vec![o, i, k, k], weights).unwrap()),
            bias: BiasData::Float(bias),
            stride: 1,
            padding: k / 2,
            batch_norm: None,
        }),
    }
}

fn brelu(id: &str, input: &str) -> Layer {
    Layer {
        id: LayerId::new(id),
        inputs: vec![LayerId::new(input)],
        op: LayerOp::BRelu(BRelu {
            upper: f64::INFINITY,
        }),
    }
}

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "demo".into());
    let dir = Path::new(&dir);
    std::fs::create_dir_all(dir.join("data")).expect("create demo directory");

    // Four convolution levels with two mixed-kernel branch pairs, patterned
    // after compact artifact-reduction networks; grayscale in, residual out.
    let mut g = ChaCha8Rng::seed_from_u64(2024);
    let model = Model::float(NetworkIR {
        name: "demo artifact-reduction net".into(),
        input_shape: [1, 32, 32],
        input_ratio: ratio::from_i64(256),
        layers: vec![
            conv(&mut g, "c1", &[], 16, 1, 5, 0.25),
            brelu("r1", "c1"),
            conv(&mut g, "c2a", &["r1"], 8, 16, 5, 0.12),
            brelu("r2a", "c2a"),
            conv(&mut g, "c2b", &["r1"], 8, 16, 3, 0.18),
            brelu("r2b", "c2b"),
            Layer {
                id: LayerId::new("cat2"),
                inputs: vec![LayerId::new("r2a"), LayerId::new("r2b")],
                op: LayerOp::Concat,
            },
            conv(&mut g, "c3a", &["cat2"], 8, 16, 3, 0.15),
            brelu("r3a", "c3a"),
            conv(&mut g, "c3b", &["cat2"], 8, 16, 1, 0.3),
            brelu("r3b", "c3b"),
            Layer {
                id: LayerId::new("cat3"),
                inputs: vec![LayerId::new("r3a"), LayerId::new("r3b")],
                op: LayerOp::Concat,
            },
            conv(&mut g, "c4", &["cat3"], 1, 16, 3, 0.2),
        ],
    });
    let model_path = dir.join("model.fnet");
    save(&model, &model_path).expect("write model");

    for b in 0..8 {
        let batch = Tensor::new(
            vec![4, 1, 32, 32],
            (0..4 * 32 * 32).map(|_| g.random()).collect(),
        )
        .unwrap();
        write_blob_file(
            &dir.join("data").join(format!("batch{b:02}.tblob")),
            &AnyTensor::U8(batch),
        )
        .expect("write batch");
    }

    println!("model: {}", model_path.display());
    println!("data:  {} (8 batches of 4 images)", dir.join("data").display());
}
