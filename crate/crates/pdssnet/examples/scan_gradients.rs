//! The scan kernel's hand-derived reverse-mode gradients, verified against
//! central finite differences — first one operand explicitly, then the full
//! randomized sweep used by `pdssnet gradcheck`.
//!
//!     cargo run --release --example scan_gradients

use pdssnet::cli::scan_gradcheck_sweep;
use pdssnet::grid::Tensor;
use pdssnet::ssm::{
    finite_diff_check, scan_vjp, selective_scan_seq, Discretization, ScanParams, ScanState,
    SeqOrStatic,
};
use pdssnet::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let (l, d_ch, n_state) = (12, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = ScanParams {
        a: Tensor::uniform(&[d_ch, n_state], &mut rng, -1.0, -0.05),
        b: SeqOrStatic::PerStep(Tensor::uniform(&[l, d_ch, n_state], &mut rng, -1.0, 1.0)),
        c: SeqOrStatic::PerStep(Tensor::uniform(&[l, d_ch, n_state], &mut rng, -1.0, 1.0)),
        d: Tensor::uniform(&[d_ch], &mut rng, -1.0, 1.0),
        delta: Tensor::uniform(&[l, d_ch], &mut rng, 0.05, 0.3),
        disc: Discretization::Taylor,
    };
    let u = Tensor::uniform(&[l, d_ch], &mut rng, -1.0, 1.0);
    let h0 = ScanState::zero(d_ch, n_state);

    // Probe loss: a fixed random weighting of the per-token outputs.
    let wy = Tensor::uniform(&[l, d_ch], &mut rng, -1.0, 1.0);
    let loss = |p: &ScanParams, u: &Tensor| -> f64 {
        let out = selective_scan_seq(p, u, &h0).expect("probe scan");
        out.y.data().iter().zip(wy.data()).map(|(a, b)| a * b).sum()
    };

    // Reverse sweep: seed the output cotangent with the probe weights and
    // pull gradients back through the whole recurrence in one pass.
    let fwd = selective_scan_seq(&p, &u, &h0)?;
    let grads = scan_vjp(&p, &u, &h0, &fwd, Some(&wy), None, None)?;

    let r = finite_diff_check(|x| loss(&p, x), &u, 5e-5, &grads.du);
    println!(
        "d(loss)/d(input): {} coordinates, max relative error {:.3e}",
        u.numel(),
        r.max_rel_error
    );
    let r = finite_diff_check(
        |x| loss(&ScanParams { delta: x.clone(), ..p.clone() }, &u),
        &p.delta,
        5e-5,
        &grads.ddelta,
    );
    println!(
        "d(loss)/d(step sizes): max relative error {:.3e}",
        r.max_rel_error
    );

    // The full sweep: 20 random problem sizes, every operand (input,
    // transition, both mixers, skip, steps, initial state).
    let worst = scan_gradcheck_sweep(7, 20)?;
    println!("randomized sweep over 20 instances: worst relative error {worst:.3e}");
    println!("tolerance used by the verification suite: 1e-5");
    Ok(())
}
