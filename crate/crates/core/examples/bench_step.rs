//! Times one forward and backward pass of the default model on a batch of 32.

use std::time::Instant;

use fedmae::mae::{self, Image, MaeArchitecture};

fn main() {
    let arch = MaeArchitecture::default();
    let w = mae::init_params(&arch, 1);
    let images: Vec<Image> = (0..32)
        .map(|i| Image::constant(16, 3, 0.01 * i as f64))
        .collect();
    let masks: Vec<_> = (0..32)
        .map(|i| mae::sample_mask(16, 0.75, i).unwrap())
        .collect();
    let image_refs: Vec<&Image> = images.iter().collect();
    let mask_refs: Vec<_> = masks.iter().collect();
    let iters = 20;
    let t = Instant::now();
    for _ in 0..iters {
        mae::loss_and_grad(&w, &arch, &image_refs, &mask_refs).unwrap();
    }
    println!("params {} step {:?}", w.len(), t.elapsed() / iters);
}
