//! The class-prototype memory: label-masked feature pooling into one
//! normalized row per class, blended across steps by an exponential moving
//! average that leaves absent classes untouched.
//!
//!     cargo run --release --example prototype_memory

use pdssnet::apem::{ClassPrototypeMemory, OneHotLabels, IGNORE_LABEL};
use pdssnet::grid::Tensor;
use pdssnet::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn row_norm(t: &Tensor, k: usize) -> f64 {
    let c = t.shape()[1];
    t.data()[k * c..(k + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn main() -> Result<()> {
    let (n_cls, c_feat, h, w) = (4, 6, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // Labels: class 3 never appears; a few pixels carry the ignore value
    // and take part in nothing.
    let mut lab = vec![0.0; h * w];
    for (i, v) in lab.iter_mut().enumerate() {
        *v = match i % 4 {
            0 => 0.0,
            1 => 1.0,
            2 => 2.0,
            _ => IGNORE_LABEL,
        };
    }
    let labels = OneHotLabels::encode(&Tensor::new(vec![h, w], lab)?, n_cls)?;
    println!(
        "valid pixels: {} of {}; classes present: {:?}",
        labels.valid_pixels(),
        h * w,
        labels.present()
    );

    let mut memory = ClassPrototypeMemory::new(n_cls, c_feat);
    println!("fresh memory rows are zero (norm {})", row_norm(&memory.protos, 0));

    // Three update steps with different feature maps. Each update pools
    // the per-pixel normalized features under the label mask and blends:
    // new_row = beta * old_row + (1 - beta) * pooled_row.
    let beta = 0.7;
    for step in 0..3 {
        let features = Tensor::uniform(&[c_feat, h, w], &mut rng, -1.0, 1.0);
        memory.update(&features, &labels, beta)?;
        let norms: Vec<f64> = (0..n_cls)
            .map(|k| (row_norm(&memory.protos, k) * 1e3).round() / 1e3)
            .collect();
        println!("after update {}: row norms {:?}", step + 1, norms);
    }
    println!("class 3 was never seen, so its row stayed exactly zero\n");

    // Endpoint behavior of the blend factor, starting from a memory whose
    // absent-class row holds something worth preserving.
    let mut start = memory.protos.clone();
    let c = c_feat;
    for (j, v) in start.data_mut()[3 * c..4 * c].iter_mut().enumerate() {
        *v = 0.1 * (j + 1) as f64;
    }
    let features = Tensor::uniform(&[c_feat, h, w], &mut rng, -1.0, 1.0);

    let mut keep = ClassPrototypeMemory::from_tensor(start.clone())?;
    keep.update(&features, &labels, 1.0)?;
    println!(
        "beta = 1.0 keeps the memory bit-identical: {}",
        keep.protos.bits_eq(&start)
    );

    let mut replace = ClassPrototypeMemory::from_tensor(start.clone())?;
    replace.update(&features, &labels, 0.0)?;
    let mut fresh = ClassPrototypeMemory::new(n_cls, c_feat);
    fresh.update(&features, &labels, 0.0)?;
    // Rows of present classes equal the pooled features regardless of the
    // starting memory; the absent row keeps its history either way.
    let same_present = (0..3).all(|k| {
        replace.protos.data()[k * c..(k + 1) * c] == fresh.protos.data()[k * c..(k + 1) * c]
    });
    println!("beta = 0.0 replaces every present row with the pooled features: {same_present}");
    println!(
        "  ... while the absent row keeps its history exactly: {}",
        replace.protos.data()[3 * c..4 * c] == start.data()[3 * c..4 * c]
    );
    Ok(())
}
