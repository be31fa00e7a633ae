//! Fidelity metrics (PSNR, 3D SSIM, binarized accuracy) and the data
//! analyses that drive allocation choices (spectral complexity, region
//! similarity, global consistency).

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayView3, Zip};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Serialize, Serializer};

use crate::error::ConfigError;
use crate::volume::{partition_octree, Volume};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_same(a: &Volume, b: &Volume) -> Result<(), ConfigError> {
    if a.dims() != b.dims() {
        return Err(ConfigError::Invalid(format!(
            "volume dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.dtype() != b.dtype() {
        return Err(ConfigError::Invalid(format!(
            "volume dtypes differ: {} vs {}",
            a.dtype(),
            b.dtype()
        )));
    }
    Ok(())
}

/// Peak shared by two volumes: the dtype range for integers, the union of
/// both value ranges for floats (1 when that range is empty).
pub fn joint_peak(a: &Volume, b: &Volume) -> f64 {
    match a.dtype().integer_max() {
        Some(max) => max,
        None => {
            let range = a.d_max().max(b.d_max()) - a.d_min().min(b.d_min());
            if range > 0.0 {
                range
            } else {
                1.0
            }
        }
    }
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Volume, b: &Volume) -> Result<f64, ConfigError> {
    check_same(a, b)?;
    let mut sse = 0.0;
    Zip::from(a.data()).and(b.data()).for_each(|&x, &y| {
        let d = f64::from(x) - f64::from(y);
        sse += d * d;
    });
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / a.len() as f64;
    let peak = joint_peak(a, b);
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Fraction of voxels on which `a > tau` and `b > tau` agree.
pub fn acc_tau(a: &Volume, b: &Volume, tau: f64) -> Result<f64, ConfigError> {
    check_same(a, b)?;
    let mut agree = 0usize;
    Zip::from(a.data()).and(b.data()).for_each(|&x, &y| {
        if (f64::from(x) > tau) == (f64::from(y) > tau) {
            agree += 1;
        }
    });
    Ok(agree as f64 / a.len() as f64)
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Valid (unpadded) correlation with `kernel` along `axis`.
fn filter_axis(data: &Array3<f64>, kernel: &[f64], axis: usize) -> Array3<f64> {
    let (nz, ny, nx) = data.dim();
    let k = kernel.len();
    let mut shape = [nz, ny, nx];
    shape[axis] -= k - 1;
    Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(z, y, x)| {
        let mut acc = 0.0;
        for (t, w) in kernel.iter().enumerate() {
            let v = match axis {
                0 => data[[z + t, y, x]],
                1 => data[[z, y + t, x]],
                _ => data[[z, y, x + t]],
            };
            acc += w * v;
        }
        acc
    })
}

fn gaussian_filter(data: &Array3<f64>, kernel: &[f64]) -> Array3<f64> {
    let fx = filter_axis(data, kernel, 2);
    let fy = filter_axis(&fx, kernel, 1);
    filter_axis(&fy, kernel, 0)
}

/// Windowed first and second moments of one block.
struct LocalMoments {
    values: Array3<f64>,
    mean: Array3<f64>,
    mean_sq: Array3<f64>,
}

impl LocalMoments {
    fn new(view: ArrayView3<'_, f32>, kernel: &[f64]) -> Self {
        let values = view.mapv(f64::from);
        let mean = gaussian_filter(&values, kernel);
        let mean_sq = gaussian_filter(&values.mapv(|v| v * v), kernel);
        Self {
            values,
            mean,
            mean_sq,
        }
    }
}

fn ssim_from_moments(a: &LocalMoments, b: &LocalMoments, kernel: &[f64], peak: f64) -> f64 {
    let cross = gaussian_filter(&(&a.values * &b.values), kernel);
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let mut total = 0.0;
    Zip::from(&a.mean)
        .and(&b.mean)
        .and(&a.mean_sq)
        .and(&b.mean_sq)
        .and(&cross)
        .for_each(|&ma, &mb, &sa, &sb, &sab| {
            let va = sa - ma * ma;
            let vb = sb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        });
    total / cross.len() as f64
}

/// Mean local SSIM over every window position fully inside the grid, using a
/// normalized 7³ Gaussian window (σ = 1.5).
pub fn ssim3d_view(
    a: ArrayView3<'_, f32>,
    b: ArrayView3<'_, f32>,
    peak: f64,
) -> Result<f64, ConfigError> {
    if a.dim() != b.dim() {
        return Err(ConfigError::Invalid(format!(
            "block shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (z, y, x) = a.dim();
    if z < SSIM_WINDOW || y < SSIM_WINDOW || x < SSIM_WINDOW {
        return Err(ConfigError::Invalid(format!(
            "SSIM needs every axis >= {SSIM_WINDOW}, got {:?}",
            [z, y, x]
        )));
    }
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let ma = LocalMoments::new(a, &kernel);
    let mb = LocalMoments::new(b, &kernel);
    Ok(ssim_from_moments(&ma, &mb, &kernel, peak))
}

pub fn ssim3d(a: &Volume, b: &Volume) -> Result<f64, ConfigError> {
    check_same(a, b)?;
    ssim3d_view(a.data().view(), b.data().view(), joint_peak(a, b))
}

/// In-place 3D FFT of a z-major `(nz, ny, nx)` buffer.
fn fft3d(buf: &mut [Complex64], dims: [usize; 3]) {
    let [nz, ny, nx] = dims;
    let mut planner = FftPlanner::new();
    let fx = planner.plan_fft_forward(nx);
    for row in buf.chunks_exact_mut(nx) {
        fx.process(row);
    }
    let mut line = Vec::new();
    let fy = planner.plan_fft_forward(ny);
    for z in 0..nz {
        for x in 0..nx {
            line.clear();
            line.extend((0..ny).map(|y| buf[(z * ny + y) * nx + x]));
            fy.process(&mut line);
            for (y, v) in line.iter().enumerate() {
                buf[(z * ny + y) * nx + x] = *v;
            }
        }
    }
    let fz = planner.plan_fft_forward(nz);
    for y in 0..ny {
        for x in 0..nx {
            line.clear();
            line.extend((0..nz).map(|z| buf[(z * ny + y) * nx + x]));
            fz.process(&mut line);
            for (z, v) in line.iter().enumerate() {
                buf[(z * ny + y) * nx + x] = *v;
            }
        }
    }
}

/// Signed frequency of DFT bin `k` on an axis of length `n`.
fn signed_freq(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Share of spectral energy outside the centred low-frequency box
/// `|f_a| <= band·D_a` (DC included). 0 for a constant or all-zero volume.
pub fn complexity(volume: &Volume, band: f64) -> f64 {
    let dims = volume.dims();
    let mut buf: Vec<Complex64> = volume
        .data()
        .iter()
        .map(|&v| Complex64::new(f64::from(v), 0.0))
        .collect();
    fft3d(&mut buf, dims);
    let [nz, ny, nx] = dims;
    let mut total = 0.0;
    let mut low = 0.0;
    for z in 0..nz {
        let fz = signed_freq(z, nz).abs() <= band * nz as f64;
        for y in 0..ny {
            let fy = signed_freq(y, ny).abs() <= band * ny as f64;
            for x in 0..nx {
                let e = buf[(z * ny + y) * nx + x].norm_sqr();
                total += e;
                if fz && fy && signed_freq(x, nx).abs() <= band * nx as f64 {
                    low += e;
                }
            }
        }
    }
    if total <= 0.0 {
        return 0.0;
    }
    (1.0 - low / total).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionSimilarity {
    /// Pairwise SSIM between z-curve ordered regions; the diagonal holds 1.
    pub raw: Vec<Vec<f64>>,
    /// Off-diagonal entries min-max normalized; the diagonal holds 0.
    pub normalized: Vec<Vec<f64>>,
    /// Normalized row sums divided by `n - 1`.
    pub scores: Vec<f64>,
    /// Mean raw off-diagonal SSIM mapped from [-1, 1] to [0, 1].
    pub global_consistency: f64,
}

/// Splits the volume into `8^(levels-1)` regions and compares them pairwise.
pub fn region_similarity(volume: &Volume, levels: u32) -> Result<RegionSimilarity, ConfigError> {
    if levels < 2 {
        return Err(ConfigError::Invalid(
            "region similarity needs at least 2 levels".into(),
        ));
    }
    let regions = partition_octree(volume.dims(), levels)?;
    let shape = regions[0].shape();
    if shape.iter().any(|&s| s < SSIM_WINDOW) {
        return Err(ConfigError::Invalid(format!(
            "regions of shape {shape:?} are smaller than the {SSIM_WINDOW}³ SSIM window"
        )));
    }
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let peak = if volume.peak() > 0.0 { volume.peak() } else { 1.0 };
    let moments: Vec<LocalMoments> = regions
        .iter()
        .map(|r| LocalMoments::new(volume.region_view(r), &kernel))
        .collect();
    let n = regions.len();
    let mut raw = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = ssim_from_moments(&moments[i], &moments[j], &kernel, peak);
            raw[i][j] = s;
            raw[j][i] = s;
        }
    }
    let off: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| raw[i][j])
        .collect();
    let lo = off.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = off.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match (i == j, hi > lo) {
                    (true, _) => 0.0,
                    (false, true) => (raw[i][j] - lo) / (hi - lo),
                    (false, false) => 1.0,
                })
                .collect()
        })
        .collect();
    let scores = normalized
        .iter()
        .map(|row| row.iter().sum::<f64>() / (n - 1) as f64)
        .collect();
    let mean = off.iter().sum::<f64>() / off.len() as f64;
    Ok(RegionSimilarity {
        raw,
        normalized,
        scores,
        global_consistency: ((mean + 1.0) / 2.0).clamp(0.0, 1.0),
    })
}

/// Inter-level allocation ratio for a given global consistency:
/// favour shallow levels above 0.7, deep levels below 0.6, even otherwise.
pub fn suggest_inter_ratio(global_consistency: f64) -> f64 {
    if global_consistency > 0.7 {
        1.2
    } else if global_consistency < 0.6 {
        0.8
    } else {
        1.0
    }
}

/// Which metrics to compute when evaluating a reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricSpec {
    Psnr,
    Ssim,
    Acc(f64),
}

impl MetricSpec {
    pub fn key(&self) -> String {
        match self {
            MetricSpec::Psnr => "psnr".into(),
            MetricSpec::Ssim => "ssim".into(),
            MetricSpec::Acc(t) => format!("acc:{t}"),
        }
    }

    /// Parses a comma separated list such as `psnr,ssim,acc:200`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>, String> {
        let mut out: Vec<Self> = Vec::new();
        for item in s.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let spec = match item {
                "psnr" => MetricSpec::Psnr,
                "ssim" => MetricSpec::Ssim,
                other => match other.strip_prefix("acc:") {
                    Some(t) => MetricSpec::Acc(
                        t.parse()
                            .map_err(|_| format!("bad accuracy threshold in {other:?}"))?,
                    ),
                    None => return Err(format!("unknown metric {other:?}")),
                },
            };
            if !out.iter().any(|m| m.key() == spec.key()) {
                out.push(spec);
            }
        }
        Ok(out)
    }
}

impl Serialize for MetricSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

fn serialize_db<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "serialize_db")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", flatten)]
    pub acc: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_consistency: Option<f64>,
}

impl MetricReport {
    pub fn evaluate(a: &Volume, b: &Volume, specs: &[MetricSpec]) -> Result<Self, ConfigError> {
        let mut report = MetricReport::default();
        for spec in specs {
            match spec {
                MetricSpec::Psnr => report.psnr = Some(psnr(a, b)?),
                MetricSpec::Ssim => report.ssim = Some(ssim3d(a, b)?),
                MetricSpec::Acc(t) => {
                    report.acc.insert(spec.key(), acc_tau(a, b, *t)?);
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dtype;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(data: Array3<f32>, dtype: Dtype) -> Volume {
        Volume::from_array(data, dtype).unwrap()
    }

    fn random_u8(dims: (usize, usize, usize), seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vol(
            Array3::from_shape_fn(dims, |_| rng.gen_range(0..=255u8) as f32),
            Dtype::U8,
        )
    }

    /// Direct triple sum over every window, centred moments.
    fn naive_ssim(a: &Array3<f32>, b: &Array3<f32>, peak: f64) -> f64 {
        let g = gaussian_kernel(7, 1.5);
        let (nz, ny, nx) = a.dim();
        let c1 = (0.01 * peak).powi(2);
        let c2 = (0.03 * peak).powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for z in 0..=nz - 7 {
            for y in 0..=ny - 7 {
                for x in 0..=nx - 7 {
                    let mut wsum = 0.0;
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in 0..7 {
                        for j in 0..7 {
                            for k in 0..7 {
                                let w = g[i] * g[j] * g[k];
                                wsum += w;
                                ma += w * a[[z + i, y + j, x + k]] as f64;
                                mb += w * b[[z + i, y + j, x + k]] as f64;
                            }
                        }
                    }
                    ma /= wsum;
                    mb /= wsum;
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..7 {
                        for j in 0..7 {
                            for k in 0..7 {
                                let w = g[i] * g[j] * g[k] / wsum;
                                let da = a[[z + i, y + j, x + k]] as f64 - ma;
                                let db = b[[z + i, y + j, x + k]] as f64 - mb;
                                va += w * da * da;
                                vb += w * db * db;
                                cov += w * da * db;
                            }
                        }
                    }
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_examples() {
        let a = random_u8((4, 5, 6), 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);

        let base = Array3::from_shape_fn((4, 4, 4), |(z, y, x)| (10 * z + y + x) as f32);
        let a = vol(base.clone(), Dtype::U8);
        let b = vol(base.mapv(|v| v + 1.0), Dtype::U8);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0 * 255f64.log10()).abs() < 1e-9);
        assert!((p - 48.1308).abs() < 1e-4);

        let z = vol(Array3::zeros((3, 3, 3)), Dtype::U16);
        let m = vol(Array3::from_elem((3, 3, 3), 65535.0), Dtype::U16);
        assert_eq!(psnr(&z, &m).unwrap(), 0.0);
        assert!(psnr(&z, &random_u8((3, 3, 3), 0)).is_err());
    }

    #[test]
    fn acc_examples() {
        let a = random_u8((4, 4, 4), 3);
        assert_eq!(acc_tau(&a, &a, 100.0).unwrap(), 1.0);
        let lo = vol(Array3::from_elem((4, 4, 4), 10.0), Dtype::U8);
        let hi = vol(Array3::from_elem((4, 4, 4), 200.0), Dtype::U8);
        assert_eq!(acc_tau(&lo, &hi, 100.0).unwrap(), 0.0);
        let half = vol(
            Array3::from_shape_fn((4, 4, 4), |(z, _, _)| if z < 2 { 200.0 } else { 0.0 }),
            Dtype::U8,
        );
        assert_eq!(acc_tau(&half, &lo, 100.0).unwrap(), 0.5);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = random_u8((9, 10, 11), 4);
        assert!((ssim3d(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = vol(a.data().mapv(|v| 255.0 - v), Dtype::U8);
        assert!(ssim3d(&a, &inv).unwrap() < 1.0);
        let small = random_u8((6, 10, 10), 5);
        assert!(ssim3d(&small, &small).is_err());
    }

    #[test]
    fn ssim_matches_naive_oracle() {
        let checker = Array3::from_shape_fn((8, 8, 8), |(z, y, x)| {
            if (z + y + x) % 2 == 0 {
                200.0
            } else {
                50.0
            }
        });
        let flat = Array3::from_elem((8, 8, 8), 125.0f32);
        let fast = ssim3d_view(checker.view(), flat.view(), 255.0).unwrap();
        assert!((fast - naive_ssim(&checker, &flat, 255.0)).abs() < 1e-10);

        for seed in 0..3 {
            let a = random_u8((8, 9, 10), seed);
            let b = random_u8((8, 9, 10), seed + 100);
            let fast = ssim3d(&a, &b).unwrap();
            let slow = naive_ssim(a.data(), b.data(), 255.0);
            assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        }
    }

    #[test]
    fn kernel_normalized() {
        let g = gaussian_kernel(7, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[6]);
        assert!(g[3] > g[2]);
    }

    #[test]
    fn complexity_examples() {
        let c = vol(Array3::from_elem((8, 8, 8), 17.0), Dtype::U8);
        assert_eq!(complexity(&c, 0.25), 0.0);

        // (-1)^x: all energy in the Nyquist bin along x.
        let nyq = Volume::from_array(
            Array3::from_shape_fn((8, 8, 16), |(_, _, x)| if x % 2 == 0 { 1.0 } else { -1.0 }),
            Dtype::F32,
        )
        .unwrap();
        assert!((complexity(&nyq, 0.25) - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = vol(
            Array3::from_shape_fn((16, 16, 16), |_| rng.gen_range(0..=255u8) as f32),
            Dtype::U8,
        );
        let mut prev = -1.0;
        for band in [0.5, 0.4, 0.3, 0.25, 0.2, 0.1, 0.05, 0.0] {
            let c = complexity(&noise, band);
            assert!((0.0..=1.0).contains(&c));
            assert!(c >= prev, "band {band}: {c} < {prev}");
            prev = c;
        }
        assert!(complexity(&noise, 0.5) < 1e-12);
    }

    #[test]
    fn region_similarity_identical_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = Array3::from_shape_fn((8, 8, 8), |_| rng.gen_range(0..=255u8) as f32);
        let data = Array3::from_shape_fn((32, 32, 32), |(z, y, x)| block[[z % 8, y % 8, x % 8]]);
        let sim = region_similarity(&vol(data, Dtype::U8), 3).unwrap();
        assert_eq!(sim.raw.len(), 64);
        for i in 0..64 {
            for j in 0..64 {
                assert!((sim.raw[i][j] - 1.0).abs() < 1e-12);
            }
        }
        assert!((sim.global_consistency - 1.0).abs() < 1e-12);
        assert_eq!(suggest_inter_ratio(sim.global_consistency), 1.2);
    }

    #[test]
    fn region_similarity_noise() {
        let noise = random_u8((64, 64, 64), 99);
        let sim = region_similarity(&noise, 3).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(sim.raw[i][j], sim.raw[j][i]);
            }
        }
        assert!((sim.global_consistency - 0.5).abs() <= 0.1, "{}", sim.global_consistency);
        assert!(sim.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        assert_eq!(suggest_inter_ratio(sim.global_consistency), 0.8);
    }

    #[test]
    fn inter_ratio_thresholds() {
        assert_eq!(suggest_inter_ratio(0.75), 1.2);
        assert_eq!(suggest_inter_ratio(0.55), 0.8);
        assert_eq!(suggest_inter_ratio(0.65), 1.0);
        assert_eq!(suggest_inter_ratio(0.7), 1.0);
        assert_eq!(suggest_inter_ratio(0.6), 1.0);
    }

    #[test]
    fn metric_spec_parsing() {
        let specs = MetricSpec::parse_list("psnr,ssim,acc:200,acc:500,psnr").unwrap();
        let keys: Vec<_> = specs.iter().map(MetricSpec::key).collect();
        assert_eq!(keys, ["psnr", "ssim", "acc:200", "acc:500"]);
        assert!(MetricSpec::parse_list("mse").is_err());
        assert!(MetricSpec::parse_list("acc:x").is_err());
    }

    #[test]
    fn report_serializes_infinity() {
        let a = random_u8((8, 8, 8), 2);
        let r = MetricReport::evaluate(&a, &a, &MetricSpec::parse_list("psnr,ssim,acc:500").unwrap()).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["psnr"], "inf");
        assert_eq!(json["ssim"], 1.0);
        assert_eq!(json["acc:500"], 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_volume() -> impl Strategy<Value = (Volume, Volume)> {
            (7usize..10, 7usize..10, 7usize..10, any::<u64>()).prop_map(|(z, y, x, seed)| {
                (random_u8((z, y, x), seed), random_u8((z, y, x), seed ^ 0xabcdef))
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn identities((a, _b) in arb_volume(), tau in 0.0f64..255.0) {
                prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
                prop_assert!((ssim3d(&a, &a).unwrap() - 1.0).abs() < 1e-12);
                prop_assert_eq!(acc_tau(&a, &a, tau).unwrap(), 1.0);
            }

            #[test]
            fn symmetry((a, b) in arb_volume(), tau in 0.0f64..255.0) {
                prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
                prop_assert!((ssim3d(&a, &b).unwrap() - ssim3d(&b, &a).unwrap()).abs() < 1e-12);
                prop_assert_eq!(acc_tau(&a, &b, tau).unwrap(), acc_tau(&b, &a, tau).unwrap());
                let c = complexity(&a, 0.25);
                prop_assert!((0.0..=1.0).contains(&c));
            }
        }
    }
}
