//! End-to-end compress, serialize, parse and decompress on a smooth volume.

use std::f64::consts::PI;

use ndarray::Array3;
use tinc::metrics::psnr;
use tinc::octree::TreeConfig;
use tinc::train::TrainConfig;
use tinc::volume::{Dtype, Volume};
use tinc::{compress, decompress, CompressOptions, CompressedArtifact};

fn smooth(n: usize) -> Volume {
    let data = Array3::from_shape_fn((n, n, n), |(z, y, x)| {
        let t = 2.0 * PI / n as f64;
        let s = (t * z as f64).sin() + (t * (y + x) as f64 + 0.7).cos();
        (30000.0 + 15000.0 * s).round() as f32
    });
    Volume::from_array(data, Dtype::U16).unwrap()
}

fn opts() -> CompressOptions {
    CompressOptions {
        tree: TreeConfig::new(2, 1).unwrap(),
        train: TrainConfig {
            iterations: 1500,
            ..TrainConfig::default()
        },
        ..CompressOptions::default()
    }
}

fn roundtrip_psnr(vol: &Volume, ratio: f64) -> f64 {
    let (art, report) = compress(vol, ratio, &opts()).unwrap();
    let bytes = art.to_bytes();
    assert_eq!(bytes.len(), report.file_bytes);
    assert!(bytes.len() as f64 <= vol.raw_byte_len() as f64 / ratio + 1e-6);
    let parsed = CompressedArtifact::from_bytes(&bytes).unwrap();
    let back = decompress(&parsed).unwrap();
    assert_eq!(back.dims(), vol.dims());
    assert_eq!(back.data(), decompress(&art).unwrap().data());
    psnr(vol, &back).unwrap()
}

#[test]
fn lower_ratio_is_not_worse() {
    let vol = smooth(64);
    let p64 = roundtrip_psnr(&vol, 64.0);
    let p512 = roundtrip_psnr(&vol, 512.0);
    assert!(p64 >= p512, "64x {p64:.2} dB vs 512x {p512:.2} dB");
}
