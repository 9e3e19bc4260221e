//! Scratch sweep for the GAN copy-task setting. Not part of the deliverable.

use vita_core::data::{generate_synthetic, SyntheticSpec};
use vita_core::networks::{PatchGan, UNet};
use vita_core::rng::rng_from_seed;
use vita_core::tensor::Tensor;
use vita_core::training::gan::{
    train_translator_scheduled, GanConfig, IdentitySource, LrSchedule,
};

fn mae(t: &UNet, images: &Tensor) -> f64 {
    let out = t.forward(images, None).unwrap();
    out.data()
        .iter()
        .zip(images.data().iter())
        .map(|(&a, &b)| (a - b).abs() as f64)
        .sum::<f64>()
        / images.numel() as f64
}

fn run(
    images: &Tensor,
    d_base: usize,
    lr: f32,
    batch: usize,
    schedule: LrSchedule,
    seed: u64,
) -> f64 {
    let mut t = UNet::new(8, &mut rng_from_seed(seed));
    let mut d = PatchGan::new(d_base, &mut rng_from_seed(seed + 1));
    let cfg = GanConfig { lr, batch_size: batch, seed, ..GanConfig::default() };
    let source = IdentitySource { images: images.clone() };
    let steps_per_epoch = images.shape()[0] / batch;
    let epochs = 200 / steps_per_epoch;
    train_translator_scheduled(&mut t, &mut d, &source, &cfg, epochs, None, schedule).unwrap();
    mae(&t, images)
}

fn main() {
    let ds = generate_synthetic(
        &SyntheticSpec { num_classes: 4, per_class: 16, extent: 16, noise: 0.05 },
        30,
    )
    .unwrap();
    let images = ds.images;
    let schedules = [
        (LrSchedule::LinearToZero, "lin"),
        (LrSchedule::ConstantThenLinear, "half"),
    ];
    for d_base in [16, 32] {
        for lr in [0.03f32, 0.06] {
            for batch in [16usize, 64] {
                for (schedule, sname) in schedules {
                    let mut worst = 0.0f64;
                    for seed in [31u64, 41, 51] {
                        let m = run(&images, d_base, lr, batch, schedule, seed);
                        if m > worst {
                            worst = m;
                        }
                    }
                    println!("d{d_base} lr={lr} b={batch} sched={sname} worst={worst:.4}");
                }
            }
        }
    }
}
