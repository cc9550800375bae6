use std::time::Instant;
fn main() {
    for &(m, k, n) in &[(512usize, 512usize, 512usize), (16, 432, 32768), (128, 3456, 64)] {
        let a = vec![0.5; m * k];
        let b = vec![0.25; k * n];
        let t = Instant::now();
        let c = tafnet_nn::conv::matmul(&a, &b, m, k, n, false, false);
        let dt = t.elapsed().as_secs_f64();
        println!("{m}x{k}x{n}: {:.1} GF/s ({})", 2.0 * (m * k * n) as f64 / dt / 1e9, c[0]);
    }
}
