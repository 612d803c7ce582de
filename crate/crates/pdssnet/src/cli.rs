//! Batch command implementations behind the `pdssnet` binary: synthetic
//! fixture generation, checkpoint forward passes, toy training, gradient
//! checks, scan throughput measurement, and metric reports. Every command
//! is deterministic given its seed (bench timings aside), and re-running
//! one with identical inputs overwrites its outputs with identical bytes.

use crate::apem::OneHotLabels;
use crate::autodiff::Tape;
use crate::data::{gen_dataset, load_dataset, save_dataset, SegSample};
use crate::error::{PdssError, Result};
use crate::eval::{argmax_channels, ConfusionMatrix, MetricsReport};
use crate::grid::{read_tensor_file, write_tensor_file, Tensor};
use crate::network::{
    infer, load_checkpoint, pdssnet_forward, save_checkpoint, train_step, Guidance,
    NetworkConfig, NetworkParams, TrainState,
};
use crate::ssm::{
    selective_scan_chunked, selective_scan_seq, Discretization, ScanParams, SeqOrStatic,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Load the run config: `--config` JSON if given (fields default
/// individually), then an explicit `--seed` flag wins over the file.
pub fn resolve_config(config_path: Option<&Path>, seed_flag: Option<u64>) -> Result<NetworkConfig> {
    let mut cfg: NetworkConfig = match config_path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| {
            // an unreadable file is an i/o failure, but a file that does not
            // parse as a config is a validation failure
            PdssError::InvalidArgument(format!("config {}: {e}", p.display()))
        })?,
        None => NetworkConfig::default(),
    };
    if let Some(s) = seed_flag {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Run `f` on a dedicated thread pool of `threads` workers (0 = library
/// default). Scan chunking is grouping-only, so results do not depend on
/// the pool size — only speed does.
pub fn with_thread_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PdssError::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// `gen-fixtures`: write a deterministic synthetic tile set and print its
/// label histogram.
pub fn cmd_gen_fixtures(cfg: &NetworkConfig, tiles: usize, out: &Path) -> Result<()> {
    let samples = gen_dataset(cfg.seed, cfg.n_cls, cfg.tile, tiles)?;
    let manifest = save_dataset(&samples, cfg.seed, cfg.n_cls, out)?;
    let total: u64 = manifest.histogram.iter().sum();
    println!(
        "wrote {} tiles of {}x{} with {} classes to {}",
        manifest.n_tiles,
        manifest.tile,
        manifest.tile,
        manifest.n_cls,
        out.display()
    );
    println!(
        "label histogram {:?} (sum {total} = {} tiles x {} px)",
        manifest.histogram,
        manifest.n_tiles,
        manifest.tile * manifest.tile
    );
    Ok(())
}

/// `forward`: load a checkpoint, run one inference forward on an image
/// tensor file, write logits and the argmax label map.
pub fn cmd_forward(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let (state, cfg) = load_checkpoint(checkpoint)?;
    let image = read_tensor_file(input)?;
    let logits = infer(&state.params, &cfg, &state.memory, &image)?;
    let pred = argmax_channels(&logits)?;
    std::fs::create_dir_all(out)?;
    write_tensor_file(&logits, &out.join("logits.pdst"))?;
    write_tensor_file(&pred, &out.join("pred.pdst"))?;
    println!(
        "forward: logits {:?} and argmax map written to {}",
        logits.shape(),
        out.display()
    );
    Ok(())
}

/// Split a dataset into train and held-out parts: the last eighth (at
/// least four tiles) is held out.
pub fn holdout_split(samples: &[SegSample]) -> (&[SegSample], &[SegSample]) {
    let k = (samples.len() / 8).max(4).min(samples.len().saturating_sub(1));
    samples.split_at(samples.len() - k)
}

/// `train-toy`: train on a fixture directory, write a checkpoint, a loss
/// CSV (`step,loss_ce,loss_dice,loss_total`), and print held-out metrics.
pub fn cmd_train_toy(cfg: &NetworkConfig, data_dir: &Path, out: &Path) -> Result<MetricsReport> {
    let (samples, manifest) = load_dataset(data_dir)?;
    if manifest.n_cls != cfg.n_cls || manifest.tile != cfg.tile {
        return Err(PdssError::InvalidArgument(format!(
            "dataset is {} classes at tile {}, config wants {} at {}",
            manifest.n_cls, manifest.tile, cfg.n_cls, cfg.tile
        )));
    }
    let (train, held_out) = holdout_split(&samples);
    let mut state = TrainState::new(cfg)?;
    let mut csv = String::from("step,loss_ce,loss_dice,loss_total\n");
    for i in 0..cfg.steps {
        let s = &train[i % train.len()];
        let labels = OneHotLabels::encode(&s.labels, cfg.n_cls)?;
        let r = train_step(&mut state, cfg, &s.image, &labels)?;
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.loss_ce, r.loss_dice, r.loss_total
        ));
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("loss.csv"), csv)?;
    save_checkpoint(&state, cfg, &out.join("checkpoint"))?;

    let mut cm = ConfusionMatrix::new(cfg.n_cls);
    for s in held_out {
        let logits = infer(&state.params, &cfg, &state.memory, &s.image)?;
        cm.accumulate(&argmax_channels(&logits)?, &s.labels)?;
    }
    let report = cm.metrics();
    println!(
        "trained {} steps on {} tiles; held-out ({} tiles): OA {:.4}, mIoU {:.4}, mean F1 {:.4}",
        cfg.steps,
        train.len(),
        held_out.len(),
        report.overall_accuracy,
        report.mean_iou,
        report.mean_f1
    );
    std::fs::write(
        out.join("heldout_metrics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

fn random_scan_instance(
    rng: &mut ChaCha8Rng,
    l: usize,
    d: usize,
    n: usize,
) -> (ScanParams, Tensor) {
    let a = Tensor::uniform(&[d, n], rng, -1.0, -0.05);
    let b = Tensor::uniform(&[l, d, n], rng, -1.0, 1.0);
    let c = Tensor::uniform(&[l, d, n], rng, -1.0, 1.0);
    let dd = Tensor::uniform(&[d], rng, -1.0, 1.0);
    let delta = Tensor::uniform(&[l, d], rng, 0.01, 0.3);
    let u = Tensor::uniform(&[l, d], rng, -1.0, 1.0);
    (
        ScanParams {
            a,
            b: SeqOrStatic::PerStep(b),
            c: SeqOrStatic::PerStep(c),
            d: dd,
            delta,
            disc: Discretization::Taylor,
        },
        u,
    )
}

/// Gradcheck every operand of the scan kernel (input, transition, input
/// and output mixers, skip, step sizes, initial state) on `instances`
/// random problem sizes with L <= 32. Returns the worst relative error
/// over all operands and coordinates.
pub fn scan_gradcheck_sweep(seed: u64, instances: usize) -> Result<f64> {
    use crate::ssm::{finite_diff_check, scan_vjp, ScanState};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let l = rng.gen_range(2..=32);
        let d = rng.gen_range(1..=3);
        let n = rng.gen_range(1..=4);
        let (p, u) = random_scan_instance(&mut rng, l, d, n);
        let h0 = ScanState {
            h: Tensor::uniform(&[d, n], &mut rng, -0.5, 0.5),
            step: 0,
        };
        // Scalar probe: fixed random weights against every output block,
        // so each operand's full jacobian participates.
        let wy = Tensor::uniform(&[l, d], &mut rng, -1.0, 1.0);
        let wall = Tensor::uniform(&[l, d, n], &mut rng, -1.0, 1.0);
        let wfin = Tensor::uniform(&[d, n], &mut rng, -1.0, 1.0);
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        let loss = |p: &ScanParams, u: &Tensor, h0: &ScanState| -> f64 {
            let out = selective_scan_seq(p, u, h0).expect("probe scan");
            dot(&out.y, &wy) + dot(&out.h_all, &wall) + dot(&out.h_final.h, &wfin)
        };
        let fwd = selective_scan_seq(&p, &u, &h0)?;
        let g = scan_vjp(&p, &u, &h0, &fwd, Some(&wy), Some(&wall), Some(&wfin))?;
        let step = 5e-5;
        let checks: Vec<crate::ssm::GradCheckReport> = vec![
            finite_diff_check(|x| loss(&p, x, &h0), &u, step, &g.du),
            finite_diff_check(
                |x| loss(&ScanParams { a: x.clone(), ..p.clone() }, &u, &h0),
                &p.a,
                step,
                &g.da,
            ),
            finite_diff_check(
                |x| {
                    let q = ScanParams { b: SeqOrStatic::PerStep(x.clone()), ..p.clone() };
                    loss(&q, &u, &h0)
                },
                p.b.tensor(),
                step,
                g.db.tensor(),
            ),
            finite_diff_check(
                |x| {
                    let q = ScanParams { c: SeqOrStatic::PerStep(x.clone()), ..p.clone() };
                    loss(&q, &u, &h0)
                },
                p.c.tensor(),
                step,
                g.dc.tensor(),
            ),
            finite_diff_check(
                |x| loss(&ScanParams { d: x.clone(), ..p.clone() }, &u, &h0),
                &p.d,
                step,
                &g.dd,
            ),
            finite_diff_check(
                |x| loss(&ScanParams { delta: x.clone(), ..p.clone() }, &u, &h0),
                &p.delta,
                step,
                &g.ddelta,
            ),
            finite_diff_check(
                |x| loss(&p, &u, &ScanState { h: x.clone(), step: h0.step }),
                &h0.h,
                step,
                &g.dh0,
            ),
        ];
        for r in checks {
            worst = worst.max(r.max_rel_error);
        }
    }
    Ok(worst)
}

/// `gradcheck`: finite-difference verification. `scale` picks the scan
/// kernel sweep, the end-to-end micro network, or both. Prints the worst
/// relative error; errors above tolerance exit nonzero (numeric failure).
pub fn cmd_gradcheck(scale: &str, seed: u64) -> Result<()> {
    let mut worst_overall: f64 = 0.0;
    let run_scan = scale == "scan" || scale == "all";
    let run_network = scale == "network" || scale == "all";
    if !run_scan && !run_network {
        return Err(PdssError::InvalidArgument(format!(
            "unknown gradcheck scale {scale:?} (expected scan, network, or all)"
        )));
    }
    if run_scan {
        let worst = scan_gradcheck_sweep(seed, 20)?;
        println!("scan gradcheck over 20 instances: max rel error {worst:.3e} (tolerance 1e-5)");
        worst_overall = worst_overall.max(worst / 1e-5);
        if worst > 1e-5 {
            return Err(PdssError::NonFinite(format!(
                "scan gradient mismatch: {worst:.3e} > 1e-5"
            )));
        }
    }
    if run_network {
        let cfg = NetworkConfig {
            n_cls: 2,
            c_feat: 4,
            n_state: 2,
            tile: 8,
            seed,
            ..NetworkConfig::default()
        };
        let worst = network_micro_gradcheck(&cfg, 0.01)?;
        println!(
            "end-to-end micro gradcheck (1% of parameters): max rel error {worst:.3e} (tolerance 1e-4)"
        );
        worst_overall = worst_overall.max(worst / 1e-4);
        if worst > 1e-4 {
            return Err(PdssError::NonFinite(format!(
                "network gradient mismatch: {worst:.3e} > 1e-4"
            )));
        }
    }
    println!("gradcheck passed (worst at {:.1}% of tolerance)", worst_overall * 100.0);
    Ok(())
}

/// Central finite differences on a random fraction of all network
/// parameters against the reverse-mode sweep; returns the worst relative
/// error (with a 1e-6 floor on the denominator).
pub fn network_micro_gradcheck(cfg: &NetworkConfig, fraction: f64) -> Result<f64> {
    let params = NetworkParams::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    let image = Tensor::uniform(&[3, cfg.tile, cfg.tile], &mut rng, 0.0, 1.0);
    let lab: Vec<f64> = (0..cfg.tile * cfg.tile)
        .map(|_| rng.gen_range(0..cfg.n_cls) as f64)
        .collect();
    let labels = OneHotLabels::encode(
        &Tensor::new_unchecked(vec![cfg.tile, cfg.tile], lab),
        cfg.n_cls,
    )?;

    let loss_of = |p: &NetworkParams| -> Result<f64> {
        let mut tape = Tape::new();
        let nv = p.push_vars(&mut tape);
        let iv = tape.var(image.clone());
        let fwd = pdssnet_forward(&mut tape, &nv, cfg, iv, Guidance::Labels(&labels), false)?;
        let probs = tape.softmax_channels(fwd.logits)?;
        let l = crate::eval::combined_loss_on_tape(&mut tape, probs, &labels, true, true)?;
        Ok(tape.val(l).data()[0])
    };

    let mut tape = Tape::new();
    let nv = params.push_vars(&mut tape);
    let registry = crate::network::leaf_registry(&params, &nv, &tape)?;
    let iv = tape.var(image.clone());
    let fwd = pdssnet_forward(&mut tape, &nv, cfg, iv, Guidance::Labels(&labels), false)?;
    let probs = tape.softmax_channels(fwd.logits)?;
    let l = crate::eval::combined_loss_on_tape(&mut tape, probs, &labels, true, true)?;
    let grads = tape.backward(l)?;

    let n_scalars = params.n_scalars();
    let n_checks = ((n_scalars as f64 * fraction).ceil() as usize).max(8);
    let mut worst: f64 = 0.0;
    for _ in 0..n_checks {
        let (name, id) = &registry[rng.gen_range(0..registry.len())];
        let numel = tape.val(*id).numel();
        let coord = rng.gen_range(0..numel);
        let analytic = grads.get(*id).map(|g| g.data()[coord]).unwrap_or(0.0);
        let step = 5e-5;
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus.visit_mut(&mut |n, t| {
            if n == *name {
                t.data_mut()[coord] += step;
            }
        });
        minus.visit_mut(&mut |n, t| {
            if n == *name {
                t.data_mut()[coord] -= step;
            }
        });
        let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * step);
        let denom = analytic.abs().max(fd.abs()).max(1e-6);
        worst = worst.max((analytic - fd).abs() / denom);
    }
    Ok(worst)
}

/// `bench-scan`: tokens/second of the sequential kernel vs the chunked
/// kernel at each requested worker count.
pub fn cmd_bench_scan(l: usize, d_ch: usize, chunk: usize, thread_counts: &[usize]) -> Result<()> {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (p, u) = random_scan_instance(&mut rng, l, d_ch, n);
    let h0 = crate::ssm::ScanState::zero(d_ch, n);

    let time_it = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
        f()?; // warm up
        let reps = 3;
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            f()?;
        }
        Ok(t0.elapsed().as_secs_f64() / reps as f64)
    };

    let t_seq = time_it(&|| selective_scan_seq(&p, &u, &h0).map(|_| ()))?;
    println!(
        "sequential: L={l} D={d_ch} N={n}: {:.3e} tokens/s",
        l as f64 / t_seq
    );
    for &tc in thread_counts {
        let t_chunk = with_thread_pool(tc, || {
            time_it(&|| selective_scan_chunked(&p, &u, &h0, chunk).map(|_| ()))
        })??;
        println!(
            "chunked (chunk={chunk}, threads={tc}): {:.3e} tokens/s ({:.2}x sequential)",
            l as f64 / t_chunk,
            t_seq / t_chunk
        );
    }
    Ok(())
}

/// `metrics`: score label maps in `pred_dir` against `gt_dir` (matching
/// file names, `[H,W]` tensor files) and print the JSON report.
pub fn cmd_metrics(pred_dir: &Path, gt_dir: &Path, n_cls: usize, out: Option<&Path>) -> Result<MetricsReport> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(gt_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "pdst").unwrap_or(false))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(PdssError::InvalidArgument(format!(
            "no .pdst label maps in {}",
            gt_dir.display()
        )));
    }
    let mut cm = ConfusionMatrix::new(n_cls);
    for gt_path in &names {
        let fname = gt_path.file_name().unwrap();
        let pred_path = pred_dir.join(fname);
        if !pred_path.exists() {
            return Err(PdssError::BadFile(format!(
                "prediction missing for {}",
                fname.to_string_lossy()
            )));
        }
        let gt = read_tensor_file(gt_path)?;
        let pred = read_tensor_file(&pred_path)?;
        cm.accumulate(&pred, &gt)?;
    }
    let report = cm.metrics();
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), json)?;
    }
    Ok(report)
}

/// One-line human summary of a run config, printed by the binary before
/// long commands so logs are self-describing.
pub fn describe(cfg: &NetworkConfig) -> String {
    format!(
        "classes {}, features {}, states {}, tile {}, chunk {}, simstep {}, seeding {}",
        cfg.n_cls, cfg.c_feat, cfg.n_state, cfg.tile, cfg.chunk, cfg.simstep, cfg.seed_structural
    )
}
