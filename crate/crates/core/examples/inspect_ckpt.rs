//! Prints per-tensor norms of a checkpoint (debugging aid).
fn main() {
    let path = std::env::args().nth(1).expect("usage: inspect_ckpt <path>");
    let params = tse_core::nn::checkpoint::load(&path).expect("load");
    for (name, v) in params.iter() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let max = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        println!("{name:<24} shape {:?} l2 {norm:.4} max {max:.4}", v.dim());
    }
}
