//! Shared helpers for the integration suites: a seeded generator producing
//! random-but-valid networks mixing all six layer kinds.

use slugplan_core::graph::NetworkGraph;
use slugplan_core::layers::{LayerSpec, ParamTensor, ParamVec, PoolGeom};
use slugplan_core::tensor::{prng_fill, Shape, SplitMix64, Tensor};

fn param_vec(rng: &mut SplitMix64, len: usize, lo: f32, hi: f32) -> ParamVec {
    ParamVec::inline((0..len).map(|_| rng.next_in(lo, hi)).collect())
}

fn scaled_tensor(rng: &mut SplitMix64, shape: Shape, scale: f32) -> ParamTensor {
    let seed = rng.next_u64();
    let t = prng_fill(seed, shape).unwrap();
    let data = t.data().iter().map(|v| v * scale).collect();
    ParamTensor::inline(Tensor::new(shape, data).unwrap())
}

/// Deterministic random network: depth 1..=40, batch <= 4, channels <= 8,
/// spatial extent <= 32, layer kinds mixed. Weights are scaled so values
/// stay finite through deep chains.
pub fn random_network(seed: u64) -> NetworkGraph {
    let mut rng = SplitMix64::new(seed);
    let n = 1 + rng.next_below(4);
    let c = 1 + rng.next_below(8);
    let h = 4 + rng.next_below(29);
    let w = 4 + rng.next_below(29);
    let depth = 1 + rng.next_below(40);

    let input_shape = Shape::new(n, c, h, w);
    let mut cur = input_shape;
    let mut layers = Vec::with_capacity(depth);
    for _ in 0..depth {
        let roll = rng.next_below(100);
        if roll < 25 {
            layers.push(LayerSpec::Relu);
        } else if roll < 45 {
            layers.push(LayerSpec::Batchnorm {
                gamma: param_vec(&mut rng, cur.c, -1.0, 1.0),
                beta: param_vec(&mut rng, cur.c, -1.0, 1.0),
                running_mean: param_vec(&mut rng, cur.c, -1.0, 1.0),
                running_var: param_vec(&mut rng, cur.c, 0.25, 1.25),
                eps: 1e-5,
            });
        } else if roll < 75 {
            let kh = 1 + rng.next_below(cur.h.min(4));
            let kw = 1 + rng.next_below(cur.w.min(4));
            let geom = PoolGeom::new(
                (kh, kw),
                (1 + rng.next_below(3), 1 + rng.next_below(3)),
                (rng.next_below(kh), rng.next_below(kw)),
            );
            layers.push(if roll < 60 { LayerSpec::Maxpool(geom) } else { LayerSpec::Avgpool(geom) });
            let (oh, ow) = geom.out_extent(cur.extent()).unwrap();
            cur = Shape::new(cur.n, cur.c, oh, ow);
        } else if roll < 90 {
            let k_out = 1 + rng.next_below(8);
            let kh = 1 + rng.next_below(cur.h.min(3));
            let kw = 1 + rng.next_below(cur.w.min(3));
            let stride = (1 + rng.next_below(2), 1 + rng.next_below(2));
            let padding = (rng.next_below(kh), rng.next_below(kw));
            let scale = 1.0 / (cur.c * kh * kw) as f32;
            let weights = scaled_tensor(&mut rng, Shape::new(k_out, cur.c, kh, kw), scale);
            layers.push(LayerSpec::Conv2d {
                weights,
                bias: param_vec(&mut rng, k_out, -1.0, 1.0),
                stride,
                padding,
            });
            let geom = PoolGeom::new((kh, kw), stride, padding);
            let (oh, ow) = geom.out_extent(cur.extent()).unwrap();
            cur = Shape::new(cur.n, k_out, oh, ow);
        } else {
            let out_features = 1 + rng.next_below(8);
            let features = cur.c * cur.h * cur.w;
            let scale = 1.0 / features as f32;
            let weight = scaled_tensor(&mut rng, Shape::new(1, 1, out_features, features), scale);
            layers.push(LayerSpec::Linear {
                weight,
                bias: param_vec(&mut rng, out_features, -1.0, 1.0),
            });
            cur = Shape::new(cur.n, out_features, 1, 1);
        }
    }
    NetworkGraph { input_shape, layers }
}
