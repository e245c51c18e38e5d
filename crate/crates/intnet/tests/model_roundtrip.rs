//! On-disk round trips for models and tensor blobs: loading reproduces the
//! bytes and the behavior, and malformed files are rejected.

mod common;

use intnet::calibrate::output_peak;
use intnet::convert::{convert, BoundSource, PipelineConfig};
use intnet::int_engine::{forward_int, ExecOptions};
use intnet::model_io::{from_bytes, load, save, to_bytes};
use intnet::ratio;
use intnet::tensor::{read_blob_file, write_blob_file, AnyTensor, Tensor};
use proptest::prelude::*;

use common::*;

#[test]
fn float_model_file_round_trips_bytes_and_behavior() {
    let model = residual_net(0x51, 12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.fnet");
    save(&model, &path).unwrap();
    let loaded = load(&path).unwrap();
    assert_eq!(to_bytes(&model).unwrap(), to_bytes(&loaded).unwrap());
    assert_eq!(loaded.ir.name, model.ir.name);
    assert!(loaded.quant.is_none());

    // Behavior identical: float forward is bitwise reproducible.
    let mut g = rng(1);
    let raw = rand_batch(&mut g, 1, 1, 12, 12);
    let input = intnet::quant::renormalize_input_f32(&raw, &model.ir.input_ratio);
    let a = intnet::float_engine::forward_f32(&model.ir, &input, false).unwrap();
    let b = intnet::float_engine::forward_f32(&loaded.ir, &input, false).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.output), bits(&b.output));
}

#[test]
fn integer_model_file_round_trips_bytes_and_behavior() {
    let float_model = concat_net(0x52, 12);
    let mut g = rng(2);
    let batch = rand_batch(&mut g, 2, 1, 12, 12);
    let an = output_peak(&float_model.ir, std::slice::from_ref(&batch)).unwrap();
    let converted = convert(
        &float_model,
        &BoundSource::Geometric { a0: 0.5, an },
        &PipelineConfig::default(),
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.inet");
    save(&converted.integer, &path).unwrap();
    let loaded = load(&path).unwrap();
    assert_eq!(
        to_bytes(&converted.integer).unwrap(),
        to_bytes(&loaded).unwrap()
    );

    // Every derived scale survives the trip exactly.
    let before = converted.integer.quant.as_ref().unwrap();
    let after = loaded.quant.as_ref().unwrap();
    assert_eq!(before.output_ratio, after.output_ratio);
    assert_eq!(before.max_int, after.max_int);
    for (b, a) in before.records.iter().zip(&after.records) {
        assert_eq!(b.layer, a.layer);
        assert_eq!(b.delta, a.delta);
        assert_eq!(b.ratio_y, a.ratio_y);
        match (&b.act, &a.act) {
            (Some(x), Some(y)) => {
                assert_eq!(x.h_ri, y.h_ri);
                assert_eq!(x.mul_shift, y.mul_shift);
                assert_eq!(x.ratio_v, y.ratio_v);
                assert_eq!(x.h_f, y.h_f);
                assert_eq!(x.h_i, y.h_i);
            }
            (None, None) => {}
            _ => panic!("activation record lost in round trip"),
        }
    }

    let raw = rand_batch(&mut g, 1, 1, 12, 12);
    let a = forward_int(&converted.integer, &raw, &ExecOptions::default()).unwrap();
    let b = forward_int(&loaded, &raw, &ExecOptions::default()).unwrap();
    let blob = |t: &AnyTensor| {
        let mut buf = Vec::new();
        t.write_blob(&mut buf);
        buf
    };
    assert_eq!(blob(&a.output), blob(&b.output));
    assert_eq!(a.output_ratio, b.output_ratio);
}

#[test]
fn header_stays_human_readable() {
    let model = linear_net(0x53, 8);
    let bytes = to_bytes(&model).unwrap();
    let header_end = bytes
        .windows(7)
        .position(|w| w == b"\ndata:\n")
        .expect("header/data marker");
    let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
    assert!(header.contains("kind: float"));
    assert!(header.contains("input: 1x8x8"));
    assert!(header.contains("layer: c1 conv2d"));
    assert!(header.contains("layer: r1 brelu"));
}

#[test]
fn truncated_and_corrupted_files_are_rejected() {
    let model = linear_net(0x54, 8);
    let bytes = to_bytes(&model).unwrap();

    // Truncations at every region: inside the header, at the marker, inside
    // the blob payload.
    for cut in [10, bytes.len() / 2, bytes.len() - 3] {
        assert!(from_bytes(&bytes[..cut]).is_err(), "cut at {cut} accepted");
    }
    // Trailing garbage.
    let mut extended = bytes.clone();
    extended.extend_from_slice(b"xx");
    assert!(from_bytes(&extended).is_err());
}

#[test]
fn tensor_blob_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tblob");
    let t = Tensor::new(vec![2, 3], vec![-1i8, 2, -3, 4, -5, 6]).unwrap();
    write_blob_file(&path, &AnyTensor::I8(t.clone())).unwrap();
    let back = read_blob_file(&path).unwrap();
    let AnyTensor::I8(got) = back else {
        panic!("kind changed");
    };
    assert_eq!(got.shape(), t.shape());
    assert_eq!(got.data(), t.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Blob serialization is lossless for every element kind, including
    /// f32 payloads compared bit for bit.
    #[test]
    fn blob_round_trip_is_exact(
        dims in proptest::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
    ) {
        let len: usize = dims.iter().product();
        let mut g = rng(seed);
        use rand::Rng as _;

        let f: Vec<f32> = (0..len).map(|_| f32::from_bits(g.random::<u32>())).collect();
        // NaNs are rejected by design elsewhere; keep payload finite here.
        let f: Vec<f32> = f
            .into_iter()
            .map(|v| if v.is_finite() { v } else { 0.0 })
            .collect();
        let t = Tensor::new(dims.clone(), f).unwrap();
        let mut buf = Vec::new();
        intnet::tensor::write_blob(&t, &mut buf);
        let mut cursor = 0;
        let back: Tensor<f32> = intnet::tensor::read_blob(&buf, &mut cursor).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        let eq = back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(eq);

        let i: Vec<i32> = (0..len).map(|_| g.random()).collect();
        let t = Tensor::new(dims, i).unwrap();
        let mut buf = Vec::new();
        intnet::tensor::write_blob(&t, &mut buf);
        let mut cursor = 0;
        let back: Tensor<i32> = intnet::tensor::read_blob(&buf, &mut cursor).unwrap();
        prop_assert_eq!(back.data(), t.data());
    }

    /// Rational text form parses back to the identical value.
    #[test]
    fn rational_text_round_trips(n in -1_000_000i64..1_000_000, d in 1i64..1_000_000) {
        let r = ratio::new(n, d);
        let text = ratio::format(&r);
        let back = ratio::parse(&text).unwrap();
        prop_assert_eq!(back, r);
    }

    /// Model serialization is a pure function of the model.
    #[test]
    fn serialization_is_deterministic(seed in any::<u64>()) {
        let model = linear_net(seed, 6);
        prop_assert_eq!(to_bytes(&model).unwrap(), to_bytes(&model).unwrap());
    }
}
