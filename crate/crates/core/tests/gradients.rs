//! End-to-end finite-difference checks of encoder plus head.

use croprot_core::encoders::EncoderDims;
use croprot_core::heads::{head_feature, HeadVariant, LabelHistory};
use croprot_core::model::{Architecture, Model};
use croprot_core::tensor::{finite_diff_check, Probe, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLASSES: usize = 4;

fn tiny() -> EncoderDims {
    EncoderDims {
        channels: 3,
        sample_size: 4,
        pse_hidden: 6,
        pse_dim: 4,
        embed_dim: 8,
        heads: 2,
        key_dim: 2,
        descriptor_dim: 8,
        pe_tau: 1000.0,
    }
}

fn check(variant: HeadVariant, seed: u64) -> (f64, usize, usize, usize) {
    let dims = tiny();
    let arch = Architecture {
        decoder_hidden: 6,
        ..Architecture::new(dims.clone(), CLASSES, variant)
    };
    let mut model = Model::<f64>::new(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = 5;
    let rows: Vec<f64> = (0..t * dims.sample_size * dims.channels)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let rows = Tensor::<f64>::from_f64(vec![t * dims.sample_size, dims.channels], &rows).unwrap();
    let days: Vec<u16> = vec![10, 60, 95, 180, 300];
    let history = LabelHistory::new(CLASSES, Some(1), Some(3)).unwrap();
    let prev: Vec<Tensor<f64>> = (0..2)
        .map(|_| {
            let v: Vec<f64> = (0..dims.descriptor_dim).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::from_f64(vec![dims.descriptor_dim], &v).unwrap()
        })
        .collect();
    let feature =
        head_feature(variant, 3, Some(&history), (Some(&prev[0]), Some(&prev[1])), dims.descriptor_dim, CLASSES)
            .unwrap();
    let label = 2;
    let params = model.params.flatten();
    let (_, analytic, _) = model.loss_gradient(&rows, &days, feature.as_ref(), label).unwrap();
    let n = params.len();
    let report = finite_diff_check(
        |w| {
            model.params.unflatten(w).unwrap();
            let (loss, _, sig) = model.loss_gradient(&rows, &days, feature.as_ref(), label).unwrap();
            Probe { value: loss, signature: sig }
        },
        &params,
        &analytic,
        1e-3,
    );
    (report.max_rel_error, report.checked, report.skipped_kinks, n)
}

#[test]
fn every_head_matches_central_differences() {
    for variant in HeadVariant::ALL {
        for seed in [1, 2] {
            let (err, checked, skipped, n) = check(variant, seed);
            assert!(n <= 2000, "{variant}: {n} parameters");
            assert!(err < 1e-4, "{variant} seed {seed}: max relative error {err:e}");
            assert!(skipped * 20 <= n, "{variant}: {skipped} of {n} coordinates sit on a kink");
            assert_eq!(checked + skipped, n);
        }
    }
}
