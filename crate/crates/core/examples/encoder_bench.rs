//! Encoder forward/backward wall time at a few grid sizes.
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tafnet::encoder::{Encoder, EncoderConfig};
use tafnet_nn::{Graph, ParamStore, Tensor};

fn main() {
    for &(grid, batch) in &[(16, 4), (32, 1), (32, 4)] {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EncoderConfig { input_grid: grid, ..Default::default() };
        let enc = Encoder::new(&mut ps, &cfg, &mut rng).unwrap();
        let x = Tensor::full(&[batch, 1, grid, grid, grid], 0.3);
        let t = Instant::now();
        let mut g = Graph::new(true);
        let xv = g.input(x.clone());
        let out = enc.forward(&mut g, &ps, xv).unwrap();
        let fwd = t.elapsed().as_secs_f64();
        let pooled = g.gap(out.bottleneck).unwrap();
        let loss = g.weighted_sum(pooled, &Tensor::full(&[batch, 128], 1.0)).unwrap();
        let t = Instant::now();
        let _ = g.backward(loss).unwrap();
        let bwd = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let mut ge = Graph::new(false);
        let xv = ge.input(x);
        enc.forward(&mut ge, &ps, xv).unwrap();
        let eval = t.elapsed().as_secs_f64();
        println!("grid {grid} batch {batch}: train fwd {fwd:.3}s bwd {bwd:.3}s eval fwd {eval:.3}s  ({:.3}s/vol train step)", (fwd + bwd) / batch as f64);
    }
}
