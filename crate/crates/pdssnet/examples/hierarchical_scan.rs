//! The hierarchical scan: in each traversal direction a semantic scan reads
//! the class-conditioned map, and its final hidden state becomes the
//! initial state of a structural scan over the edge map — high-level
//! context steers the low-level pass. An ablation switch severs the
//! handoff.
//!
//!     cargo run --release --example hierarchical_scan

use pdssnet::autodiff::Tape;
use pdssnet::grid::Tensor;
use pdssnet::sscm::{sobel_structure, sscm_forward, SSCMParams};
use pdssnet::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let (n_cls, c_feat, n_state, h, w) = (3, 8, 4, 10, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let params = SSCMParams::init(n_cls, c_feat, n_state, &mut rng);

    // Inputs: a class-conditioned positional map [n_cls*c_feat, H, W] and a
    // raw feature map whose edge magnitudes form the structural channel.
    let pos = Tensor::uniform(&[n_cls * c_feat, h, w], &mut rng, -1.0, 1.0);
    let x1 = Tensor::uniform(&[c_feat, h, w], &mut rng, -1.0, 1.0);
    let edges = sobel_structure(&x1)?;
    println!(
        "edge map from the early features: {:?}, mean magnitude {:.3}",
        edges.shape(),
        edges.data().iter().sum::<f64>() / edges.numel() as f64
    );

    let run = |seed_structural: bool| -> Result<(Tensor, Vec<pdssnet::sscm::DirectionTrace>)> {
        let mut tape = Tape::new();
        let sv = params.push_vars(&mut tape);
        let pv = tape.var(pos.clone());
        let xv = tape.var(x1.clone());
        let mut traces = Vec::new();
        let out = sscm_forward(
            &mut tape,
            &sv,
            pv,
            xv,
            Default::default(),
            seed_structural,
            Some(&mut traces),
        )?;
        Ok((tape.val(out).clone(), traces))
    };

    let (seeded, traces) = run(true)?;
    println!("fused output: {:?}", seeded.shape());
    println!("semantic final-state norms handed to the structural scan:");
    for t in &traces {
        let norm = t.h_sem.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("  {:13} |h_sem| = {:.3}", t.direction.tag(), norm);
    }

    // Severing the handoff changes the result: the structural scans start
    // cold and lose the semantic context.
    let (cold, _) = run(false)?;
    let max_gap = seeded
        .data()
        .iter()
        .zip(cold.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("max |seeded - cold| over the output map: {max_gap:.3e} (nonzero: the handoff matters)");

    // The handoff is exactly linear in the seed: the difference between the
    // seeded and cold structural scans is the zero-input scan launched from
    // the semantic state alone. The verification suite checks that law per
    // direction to 1e-10; here we just show the two runs share every input
    // yet differ only through the initial state.
    println!(
        "both runs consumed identical token sequences: {}",
        traces
            .iter()
            .zip(run(false)?.1.iter())
            .all(|(a, b)| a.struct_tokens.bits_eq(&b.struct_tokens))
    );
    Ok(())
}
