//! Upper bound probe: SI-SDR of ideal masks at the desk STFT resolution.
use tse_core::config::RepoConfig;
use tse_core::metrics::si_sdr;
use tse_core::spectral::{istft_with_rate, stft, Spectrogram};
use tse_core::synth::{open_dataset, Split};

fn main() {
    let data = std::env::args().nth(1).expect("data dir");
    let cfg_path = std::env::args().nth(2);
    let cfg = RepoConfig::load_or_default(cfg_path.as_deref().map(std::path::Path::new)).unwrap();
    let ds = open_dataset(&data).unwrap();
    let mut ibm_acc = 0.0;
    let mut irm_acc = 0.0;
    let mut mix_acc = 0.0;
    let mut oracle_acc = 0.0;
    let mut n = 0.0;
    for r in ds.records_for(Split::Test).take(32) {
        let ex = ds.load_example(r).unwrap();
        let y = stft(&ex.mixture, &cfg.stft).unwrap();
        let s = stft(&ex.target, &cfg.stft).unwrap();
        let b = stft(&ex.background, &cfg.stft).unwrap();
        let f = y.freq_bins();
        let frames = y.frames();
        let mut ibm = y.data().clone();
        let mut irm = y.data().clone();
        for t in 0..frames {
            for k in 0..f {
                let sm = (s.data()[[k, t]].powi(2) + s.data()[[f + k, t]].powi(2)).sqrt() * ex.tau_star;
                let bm = (b.data()[[k, t]].powi(2) + b.data()[[f + k, t]].powi(2)).sqrt() * (1.0 - ex.tau_star);
                let keep = if sm >= bm { 1.0 } else { 0.0 };
                let ratio = sm / (sm + bm + 1e-12);
                ibm[[k, t]] *= keep;
                ibm[[f + k, t]] *= keep;
                irm[[k, t]] *= ratio;
                irm[[f + k, t]] *= ratio;
            }
        }
        let ibm_w = istft_with_rate(&Spectrogram::from_data(ibm).unwrap(), &cfg.stft, ex.mixture.len(), 8000).unwrap();
        let irm_w = istft_with_rate(&Spectrogram::from_data(irm).unwrap(), &cfg.stft, ex.mixture.len(), 8000).unwrap();
        let oracle_w = istft_with_rate(&s, &cfg.stft, ex.mixture.len(), 8000).unwrap();
        ibm_acc += si_sdr(&ibm_w, &ex.target).unwrap();
        irm_acc += si_sdr(&irm_w, &ex.target).unwrap();
        oracle_acc += si_sdr(&oracle_w, &ex.target).unwrap();
        mix_acc += si_sdr(&ex.mixture, &ex.target).unwrap();
        n += 1.0;
    }
    println!("mixture SI-SDR      {:.2} dB", mix_acc / n);
    println!("ideal binary mask   {:.2} dB", ibm_acc / n);
    println!("ideal ratio mask    {:.2} dB", irm_acc / n);
    println!("oracle spectrum     {:.2} dB", oracle_acc / n);
}
