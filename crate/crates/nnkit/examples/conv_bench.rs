//! Rough conv3d throughput at encoder-like shapes.
use std::time::Instant;

use tafnet_nn::conv::{conv3d_backward, conv3d_forward};
use tafnet_nn::Tensor;

fn main() {
    for &(b, cin, cout, s) in &[(1, 16, 16, 32), (4, 16, 16, 32), (1, 32, 32, 16), (1, 128, 128, 4)] {
        let x = Tensor::full(&[b, cin, s, s, s], 0.5);
        let w = Tensor::full(&[cout, cin, 3, 3, 3], 0.01);
        let t = Instant::now();
        let y = conv3d_forward(&x, &w, None, 1, 1).unwrap();
        let fwd = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let _ = conv3d_backward(&x, &w, &y, 1, 1, true).unwrap();
        let bwd = t.elapsed().as_secs_f64();
        let flops = 2.0 * (b * cout * s * s * s * cin * 27) as f64;
        println!("b={b} {cin}->{cout} @{s}^3: fwd {:.3}s ({:.1} GF/s) bwd {:.3}s", fwd, flops / fwd / 1e9, bwd);
    }
}

