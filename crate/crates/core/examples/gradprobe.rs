use shiftcal_core::autodiff::{Mode, Tensor};
use shiftcal_core::backbone::{build_model, BackboneConfig, HeadKind, ScaleKind};
use shiftcal_core::gradcheck::check_model_gradients;
use shiftcal_core::rng::{stream, SplitMix64};
use shiftcal_core::train::LossKind;
use std::time::Instant;

fn main() {
    let cfg = BackboneConfig {
        block_counts: vec![2, 1, 1, 1],
        expansion: 2,
        stem_channels: None,
        base_width: None,
        dropout_rate: 0.4,
        head: HeadKind::Gaussian,
        scale: ScaleKind::Desk,
    };
    let mut model = build_model(&cfg, 99).unwrap();
    let mut prng = SplitMix64::new(7);
    for p in model.params_mut() {
        if p.name.ends_with(".bn3.gamma") {
            for v in p.tensor.data_mut() {
                *v = prng.uniform(0.5, 1.5);
            }
        }
    }
    for batch_seed in 1u64..=6 {
        let mut rng = stream(batch_seed, &[0xbb]);
        let (n, len) = (3usize, 16usize);
        let x = Tensor::new(vec![n, 1, len], (0..n * len).map(|_| rng.gaussian()).collect()).unwrap();
        let targets: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let t0 = Instant::now();
        let report = check_model_gradients(&model, &x, &targets, LossKind::Gnll, Mode::Train, 1234, 1e-4).unwrap();
        println!(
            "batch {batch_seed}: max {:.3e}, >1e-4: {}, refined {}, {:.1?}",
            report.max_rel_err, report.count_above(1e-4), report.n_refined, t0.elapsed()
        );
    }
}
