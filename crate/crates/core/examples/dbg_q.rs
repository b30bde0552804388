use act_core::numerics::*;
use act_core::quantizer::*;
use act_core::verify::quantizer_suite_tensor;

fn main() {
    let x = quantizer_suite_tensor();
    let group = 256;
    let stats = conditioned_group_stats(&x, group).unwrap();
    let bits = BitWidth::new(8).unwrap();
    let levels = bits.levels() as f64;
    let n_keys = 100_000u64;
    let mut sum = vec![0.0f64; x.len()];
    for s in 0..n_keys {
        let q = quantize(&x, bits, group, StreamKey::new(7_000_000 + s, 3)).unwrap();
        let y = dequantize(&q).unwrap();
        for (j, &v) in y.data().iter().enumerate() {
            sum[j] += v;
        }
    }
    let mut shown = 0;
    for j in 0..x.len() {
        let g = stats[j / group];
        let mean = sum[j] / n_keys as f64;
        let step = g.range as f64 / levels;
        let t = levels * ((x.data()[j] - g.min as f64) / g.range as f64);
        let p = t - t.floor();
        let sigma = step * (p * (1.0 - p)).sqrt() / (n_keys as f64).sqrt();
        let tol = 4.0 * sigma + 1e-12;
        let dev = (mean - x.data()[j]).abs();
        if dev > tol && shown < 8 {
            println!("j={j} x={:.20} mean={:.20} dev={dev:.3e} tol={tol:.3e} t={t:.20} p={p:.3e} min={} range={}",
                x.data()[j], mean, g.min, g.range);
            shown += 1;
        }
    }
}
