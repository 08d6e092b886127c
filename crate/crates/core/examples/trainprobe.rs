use shiftcal_core::autodiff::Mode;
use shiftcal_core::backbone::{BackboneConfig, HeadKind, ScaleKind};
use shiftcal_core::data::{generate_synthetic, NoiseProfile, Segment, SyntheticShiftSpec};
use shiftcal_core::metrics::spearman;
use shiftcal_core::rng::SplitMix64;
use shiftcal_core::train::{train_model, LossKind, TrainConfig};
use std::time::Instant;

fn main() {
    for (n_subj, epochs) in [(90usize, 35usize), (120, 25), (120, 35)] {
        let spec = SyntheticShiftSpec {
            n_subjects: n_subj,
            segments_per_subject: 16,
            signal_len: 48,
            target_mean_shift: 0.0,
            target_scale: 1.0,
            noise_profile: NoiseProfile::Heteroscedastic,
            seed: 11,
        };
        let corpus = generate_synthetic(&spec).unwrap();
        let splits = shiftcal_core::data::split_by_subject(&corpus, (0.6, 0.15, 0.1, 0.15), 3).unwrap();
        let train: Vec<&Segment> = splits.take("train", &corpus).unwrap();
        let val: Vec<&Segment> = splits.take("val", &corpus).unwrap();
        let test: Vec<&Segment> = splits.take("test", &corpus).unwrap();

        let bb = BackboneConfig {
            block_counts: vec![1, 1, 1, 1],
            expansion: 2,
            stem_channels: None,
            base_width: None,
            dropout_rate: 0.0,
            head: HeadKind::Gaussian,
            scale: ScaleKind::Desk,
        };
        let cfg = TrainConfig {
            epochs,
            effective_batch: 64,
            micro_batch: 16,
            lr: 1e-3,
            weight_decay: 1e-2,
            loss: LossKind::Gnll,
            seed: 5,
        };
        let t0 = Instant::now();
        let (ckpt, log) = train_model(&train, &val, &bb, &cfg).unwrap();
        let train_time = t0.elapsed();
        let mut pred_var = Vec::new();
        let mut true_var = Vec::new();
        let mut abs_err = Vec::new();
        for seg in &test {
            let mut rng = SplitMix64::new(0);
            let (mu, var) = ckpt.model.predict_one(&seg.signal, Mode::Eval, &mut rng).unwrap();
            pred_var.push(var.unwrap());
            let sd = spec.noise_sd(&seg.signal);
            true_var.push(sd * sd);
            abs_err.push((mu - seg.target).abs());
        }
        let rho = spearman(&pred_var, &true_var).unwrap();
        let mae: f64 = abs_err.iter().sum::<f64>() / abs_err.len() as f64;
        println!(
            "subj {n_subj} epochs {epochs}: val_mae {:.4} (ep {}), test mae {:.4}, spearman {:.4}, {:.1?} ({} train segs)",
            ckpt.val_mae, ckpt.epoch, mae, rho, train_time, train.len()
        );
        let _ = log;
    }
}
