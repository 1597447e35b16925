//! Checks whether a trained extractor responds to the enrollment input.
use tse_core::config::RepoConfig;
use tse_core::nn::MeanVelocityNet;
use tse_core::spectral::stft;
use tse_core::synth::{open_dataset, Split};

fn main() {
    let ckpt = std::env::args().nth(1).expect("ckpt");
    let data = std::env::args().nth(2).expect("data dir");
    let cfg_path = std::env::args().nth(3);
    let cfg = RepoConfig::load_or_default(cfg_path.as_deref().map(std::path::Path::new)).unwrap();
    let params = tse_core::nn::checkpoint::load(&ckpt).unwrap();
    let net = MeanVelocityNet::new(cfg.predictor).unwrap();
    let ds = open_dataset(&data).unwrap();
    let recs: Vec<_> = ds.records_for(Split::Test).take(8).collect();
    for r in recs {
        let ex = ds.load_example(r).unwrap();
        let y = stft(&ex.mixture, &cfg.stft).unwrap();
        let e_own = stft(&ex.enroll, &cfg.stft).unwrap();
        // Wrong enrollment: another test example with a different target speaker.
        let other = ds
            .records_for(Split::Test)
            .find(|o| o.target_speaker != r.target_speaker)
            .unwrap();
        let ex2 = ds.load_example(other).unwrap();
        let e_other = stft(&ex2.enroll, &cfg.stft).unwrap();
        let u1 = net.mean_velocity(&params, &y, &e_own, 0.0, 1.0).unwrap();
        let u2 = net.mean_velocity(&params, &y, &e_other, 0.0, 1.0).unwrap();
        let diff: f64 = (u1.data() - u2.data()).iter().map(|v| v * v).sum::<f64>().sqrt();
        let base: f64 = u1.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "ex {}: |u(E_target) - u(E_other)| = {diff:.4}, |u| = {base:.4}, ratio {:.3}",
            r.id,
            diff / base.max(1e-9)
        );
    }
}
