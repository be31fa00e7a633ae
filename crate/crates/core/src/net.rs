//! The tree-structured sine MLP.
//!
//! All learnable scalars live in one flat buffer in canonical order:
//! breadth-first nodes; within a node the root input layer (root only),
//! then the hyper layers in depth order, then the output layer (leaves
//! only); within a layer the weights row-major (`out × in`) followed by
//! the biases. The file payload uses the same order.

use std::ops::Range;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::Executor;
use crate::octree::{TreeConfig, COORD_DIM};
use crate::volume::{axis_coord, partition_octree, Region};
use crate::error::ConfigError;

/// Frequency scale of the input layer.
pub const OMEGA_0: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// `sin(omega · (W x + b))`
    Sine { omega: f64 },
    Linear,
}

/// Where one fully connected layer lives in the parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerShape {
    pub offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.fan_out * self.fan_in + self.fan_out
    }

    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.fan_out * self.fan_in
    }

    pub fn biases(&self) -> Range<usize> {
        let start = self.offset + self.fan_out * self.fan_in;
        start..start + self.fan_out
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.param_count()
    }
}

/// Borrowed view of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams<'a> {
    pub weights: &'a [f64],
    pub biases: &'a [f64],
    pub fan_in: usize,
    pub activation: Activation,
}

impl LayerParams<'_> {
    /// `out = act(W x + b)`; the dot product accumulates left to right and
    /// adds the bias last.
    #[inline]
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.fan_in).zip(self.biases))
        {
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            let z = acc + b;
            *o = match self.activation {
                Activation::Sine { omega } => (omega * z).sin(),
                Activation::Linear => z,
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TincNet {
    cfg: TreeConfig,
    dims: [usize; 3],
    widths: Vec<u32>,
    layers: Vec<LayerShape>,
    /// Layer indices owned by each node, in canonical order.
    node_layers: Vec<Range<usize>>,
    /// Layer indices evaluated for each leaf, input to output.
    paths: Vec<Vec<usize>>,
    regions: Vec<Region>,
    params: Vec<f64>,
}

impl TincNet {
    /// Builds the topology with all parameters set to zero.
    pub fn zeros(cfg: TreeConfig, widths: &[u32], dims: [usize; 3]) -> Result<Self, ConfigError> {
        cfg.validate()?;
        if widths.len() != cfg.node_count() {
            return Err(ConfigError::Invalid(format!(
                "expected {} widths, got {}",
                cfg.node_count(),
                widths.len()
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(ConfigError::Invalid("layer widths must be positive".into()));
        }
        let regions = partition_octree(dims, cfg.levels)?;

        let mut layers = Vec::new();
        let mut node_layers = Vec::with_capacity(widths.len());
        let mut offset = 0;
        let mut push = |layers: &mut Vec<LayerShape>, fan_in: usize, fan_out: usize, act| {
            let l = LayerShape {
                offset,
                fan_in,
                fan_out,
                activation: act,
            };
            offset += l.param_count();
            layers.push(l);
        };
        let hidden = Activation::Sine { omega: 1.0 };
        for node in 0..widths.len() {
            let first = layers.len();
            let w = widths[node] as usize;
            let fan_in = match cfg.parent(node) {
                None => {
                    push(&mut layers, COORD_DIM, w, Activation::Sine { omega: OMEGA_0 });
                    w
                }
                Some(p) => widths[p] as usize,
            };
            push(&mut layers, fan_in, w, hidden);
            for _ in 1..cfg.hyper_depth {
                push(&mut layers, w, w, hidden);
            }
            if cfg.is_leaf(node) {
                push(&mut layers, w, 1, Activation::Linear);
            }
            node_layers.push(first..layers.len());
        }
        let total = offset;

        let paths = (0..cfg.leaf_count())
            .map(|leaf| {
                let path = cfg.path(leaf);
                path.iter()
                    .flat_map(|&n| node_layers[n].clone())
                    .collect()
            })
            .collect();

        Ok(Self {
            cfg,
            dims,
            widths: widths.to_vec(),
            layers,
            node_layers,
            paths,
            regions,
            params: vec![0.0; total],
        })
    }

    /// SIREN initialisation. The input layer draws from `U(-1/fan_in, 1/fan_in)`,
    /// every other layer from `U(-√(6/fan_in), √(6/fan_in))`; biases are zero.
    ///
    /// Draws come from ChaCha8 (stream 0) seeded with `seed`, one `f32` per
    /// weight in canonical order, so fresh parameters are exactly
    /// representable in the f32 payload.
    pub fn init_siren(cfg: TreeConfig, widths: &[u32], dims: [usize; 3], seed: u64) -> Result<Self, ConfigError> {
        let mut net = Self::zeros(cfg, widths, dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        for (i, layer) in net.layers.iter().enumerate() {
            let fan_in = layer.fan_in as f64;
            // Layer 0 is always the root input layer.
            let bound = if i == 0 { 1.0 / fan_in } else { (6.0 / fan_in).sqrt() };
            let bound = f32_at_most(bound);
            for p in &mut net.params[layer.weights()] {
                *p = f64::from(rng.gen_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn cfg(&self) -> &TreeConfig {
        &self.cfg
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn widths(&self) -> &[u32] {
        &self.widths
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn node_layers(&self, node: usize) -> Range<usize> {
        self.node_layers[node].clone()
    }

    /// Layer indices on `leaf`'s root-to-output path.
    pub fn path(&self, leaf: usize) -> &[usize] {
        &self.paths[leaf]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Parameter range owned by `node` (contiguous in canonical order).
    pub fn node_param_range(&self, node: usize) -> Range<usize> {
        let ls = &self.node_layers[node];
        self.layers[ls.start].offset..self.layers[ls.end - 1].range().end
    }

    pub fn layer(&self, index: usize) -> LayerParams<'_> {
        let shape = &self.layers[index];
        LayerParams {
            weights: &self.params[shape.weights()],
            biases: &self.params[shape.biases()],
            fan_in: shape.fan_in,
            activation: shape.activation,
        }
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(1).max(COORD_DIM as u32) as usize
    }

    /// Rounds every parameter to the nearest f32.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            *p = f64::from(*p as f32);
        }
    }

    /// Evaluates one coordinate through `leaf`'s path with caller-provided scratch.
    pub fn eval_one(&self, v: [f64; 3], leaf: usize, a: &mut Vec<f64>, b: &mut Vec<f64>) -> f64 {
        let path = &self.paths[leaf];
        a.clear();
        a.extend_from_slice(&v);
        for &li in path {
            let layer = self.layer(li);
            b.clear();
            b.resize(self.layers[li].fan_out, 0.0);
            layer.apply(a, b);
            std::mem::swap(a, b);
        }
        a[0]
    }

    /// Predicted normalized intensities. Each coordinate is routed to the leaf
    /// given alongside it; callers guarantee the coordinate lies in that leaf.
    ///
    /// Panics if a leaf ordinal is out of range.
    pub fn forward(&self, coords: &[[f64; 3]], leaf_ids: &[usize]) -> Vec<f64> {
        assert_eq!(coords.len(), leaf_ids.len(), "coords and leaf ids differ in length");
        let k = self.cfg.leaf_count();
        let mut a = Vec::with_capacity(self.max_width());
        let mut b = Vec::with_capacity(self.max_width());
        coords
            .iter()
            .zip(leaf_ids)
            .map(|(&v, &leaf)| {
                assert!(leaf < k, "leaf ordinal {leaf} out of range (have {k})");
                self.eval_one(v, leaf, &mut a, &mut b)
            })
            .collect()
    }

    /// Outputs of every layer on `leaf`'s path for one coordinate.
    pub fn trace(&self, v: [f64; 3], leaf: usize) -> Vec<Vec<f64>> {
        let mut cur = v.to_vec();
        let mut out = Vec::new();
        for &li in &self.paths[leaf] {
            let mut next = vec![0.0; self.layers[li].fan_out];
            self.layer(li).apply(&cur, &mut next);
            out.push(next.clone());
            cur = next;
        }
        out
    }

    /// Evaluates every voxel of the grid through its leaf.
    pub fn dense_eval(&self, exec: &Executor) -> Array3<f64> {
        let per_leaf: Vec<Vec<f64>> = exec.map(self.regions.len(), |leaf| {
            let region = &self.regions[leaf];
            let mut a = Vec::with_capacity(self.max_width());
            let mut b = Vec::with_capacity(self.max_width());
            (0..region.voxel_count())
                .map(|i| {
                    let idx = region.voxel_at(i);
                    let v = [
                        axis_coord(idx[0], self.dims[0]),
                        axis_coord(idx[1], self.dims[1]),
                        axis_coord(idx[2], self.dims[2]),
                    ];
                    self.eval_one(v, leaf, &mut a, &mut b)
                })
                .collect()
        });
        let mut out = Array3::zeros((self.dims[0], self.dims[1], self.dims[2]));
        for (region, values) in self.regions.iter().zip(per_leaf) {
            for (i, value) in values.into_iter().enumerate() {
                out[region.voxel_at(i)] = value;
            }
        }
        out
    }

    /// Copies `leaf`'s ancestor-path layers into a standalone MLP.
    pub fn assemble_leaf_mlp(&self, leaf: usize) -> FlatMlp {
        FlatMlp {
            layers: self.paths[leaf]
                .iter()
                .map(|&li| {
                    let s = &self.layers[li];
                    FlatLayer {
                        fan_in: s.fan_in,
                        fan_out: s.fan_out,
                        weights: self.params[s.weights()].to_vec(),
                        biases: self.params[s.biases()].to_vec(),
                        activation: s.activation,
                    }
                })
                .collect(),
        }
    }
}

/// Largest f32 not exceeding `x`.
fn f32_at_most(x: f64) -> f32 {
    let f = x as f32;
    if f64::from(f) > x {
        f.next_down()
    } else {
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

/// A plain sine MLP owning its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatMlp {
    pub layers: Vec<FlatLayer>,
}

impl FlatMlp {
    pub fn eval(&self, v: [f64; 3]) -> f64 {
        let mut x = v.to_vec();
        for layer in &self.layers {
            let mut y = Vec::with_capacity(layer.fan_out);
            for o in 0..layer.fan_out {
                let mut acc = 0.0;
                for i in 0..layer.fan_in {
                    acc += layer.weights[o * layer.fan_in + i] * x[i];
                }
                let z = acc + layer.biases[o];
                y.push(match layer.activation {
                    Activation::Sine { omega } => (omega * z).sin(),
                    Activation::Linear => z,
                });
            }
            x = y;
        }
        x[0]
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::octree::realized_params;

    fn net(levels: u32, h: u32, widths: &[u32], dims: [usize; 3], seed: u64) -> TincNet {
        TincNet::init_siren(TreeConfig::new(levels, h).unwrap(), widths, dims, seed).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = net(2, 1, &[8; 9], [16; 3], 7);
        let b = net(2, 1, &[8; 9], [16; 3], 7);
        let c = net(2, 1, &[8; 9], [16; 3], 8);
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn init_bounds() {
        let n = net(2, 2, &[16; 9], [16; 3], 3);
        for (i, layer) in n.layers().iter().enumerate() {
            let p = n.layer(i);
            let bound = if i == 0 {
                assert_eq!(layer.fan_in, 3);
                1.0 / 3.0
            } else {
                (6.0 / layer.fan_in as f64).sqrt()
            };
            if layer.fan_in == 16 {
                assert!((bound - 0.6124).abs() < 1e-4);
            }
            assert!(p.weights.iter().all(|w| w.abs() <= bound));
            assert!(p.biases.iter().all(|&b| b == 0.0));
            // f32-representable
            assert!(p.weights.iter().all(|&w| f64::from(w as f32) == w));
        }
        let max_in = n.layer(0).weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        assert!(max_in > 0.25, "input weights should span the range");
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut n = TincNet::zeros(TreeConfig::new(2, 1).unwrap(), &[4; 9], [8; 3]).unwrap();
        for leaf in 0..8 {
            let out = n.layers()[*n.path(leaf).last().unwrap()];
            n.params_mut()[out.biases()][0] = leaf as f64 + 0.5;
        }
        let y = n.forward(&[[0.3, -0.2, 0.9], [-1.0, 1.0, 0.0]], &[3, 6]);
        assert_eq!(y, vec![3.5, 6.5]);
    }

    #[test]
    fn single_level_matches_flat_mlp() {
        let n = net(1, 2, &[12], [8; 3], 11);
        assert_eq!(n.path(0).len(), 4);
        // Independent flat MLP built from the same parameter slices.
        let p = n.params();
        let layers = n.layers();
        let v = [0.25, -0.5, 0.75];
        let mut x = v.to_vec();
        for (k, l) in layers.iter().enumerate() {
            let w = &p[l.weights()];
            let b = &p[l.biases()];
            x = (0..l.fan_out)
                .map(|o| {
                    let mut acc = 0.0;
                    for i in 0..l.fan_in {
                        acc += w[o * l.fan_in + i] * x[i];
                    }
                    let z = acc + b[o];
                    match k {
                        0 => (30.0 * z).sin(),
                        3 => z,
                        _ => z.sin(),
                    }
                })
                .collect();
        }
        assert_eq!(n.forward(&[v], &[0])[0], x[0]);
    }

    #[test]
    fn siblings_share_root_segment() {
        let n = net(2, 1, &[6, 5, 5, 5, 5, 5, 5, 5, 5], [8; 3], 2);
        let v = [0.1, 0.2, 0.3];
        let a = n.trace(v, 0);
        let b = n.trace(v, 5);
        // input + root hyper layer are shared storage
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], b[1]);
        assert_eq!(n.path(0)[..2], n.path(5)[..2]);
        assert_ne!(a[2], b[2]);
    }

    #[test]
    fn param_count_examples() {
        let n = TincNet::zeros(TreeConfig::new(1, 1).unwrap(), &[28], [4; 3]).unwrap();
        assert_eq!(n.param_count(), 953);

        for w in [1u32, 3, 8, 17] {
            let cfg = TreeConfig::new(2, 1).unwrap();
            let n = TincNet::zeros(cfg, &[w; 9], [4; 3]).unwrap();
            let w = w as usize;
            let closed = (3 * w + w) + (w * w + w) + 8 * ((w * w + w) + (w + 1));
            assert_eq!(n.param_count(), closed);
            assert_eq!(n.param_count() as u64, realized_params(&cfg, &[w as u32; 9]));

            let cfg2 = TreeConfig::new(2, 2).unwrap();
            let n2 = TincNet::zeros(cfg2, &[w as u32; 9], [4; 3]).unwrap();
            assert_eq!(n2.param_count() - n.param_count(), 9 * (w * w + w));
        }
    }

    #[test]
    fn param_count_matches_octree_accounting() {
        let cfg = TreeConfig::new(3, 2).unwrap();
        let widths: Vec<u32> = (0..73).map(|i| 2 + (i % 5) as u32).collect();
        let n = TincNet::zeros(cfg, &widths, [8; 3]).unwrap();
        assert_eq!(n.param_count() as u64, realized_params(&cfg, &widths));
        for node in 0..73 {
            let r = n.node_param_range(node);
            let parent = cfg.parent(node).map(|p| widths[p]);
            assert_eq!(
                r.len() as u64,
                crate::octree::owned_params(&cfg, node, widths[node], parent)
            );
        }
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn forward_rejects_bad_leaf() {
        let n = net(2, 1, &[4; 9], [8; 3], 0);
        n.forward(&[[0.0; 3]], &[8]);
    }

    #[test]
    fn dense_eval_routes_by_region() {
        let mut n = TincNet::zeros(TreeConfig::new(2, 1).unwrap(), &[2; 9], [4, 6, 8]).unwrap();
        for leaf in 0..8 {
            let out = n.layers()[*n.path(leaf).last().unwrap()];
            n.params_mut()[out.biases()][0] = leaf as f64;
        }
        let dense = n.dense_eval(&Executor::sequential());
        for r in n.regions() {
            for i in 0..r.voxel_count() {
                assert_eq!(dense[r.voxel_at(i)], r.leaf_index as f64);
            }
        }
    }
}
