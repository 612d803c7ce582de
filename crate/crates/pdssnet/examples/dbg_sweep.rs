//! Scratch sweep: lr/width/steps → final loss + held-out mIoU.
//! args: lr c_feat n_state steps [simstep(0|1) seed_structural(0|1) seed]

use pdssnet::apem::OneHotLabels;
use pdssnet::data::gen_dataset;
use pdssnet::eval::{argmax_channels, ConfusionMatrix};
use pdssnet::network::{infer, train_step, NetworkConfig, TrainState};
use pdssnet::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let c_feat: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let n_state: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let steps: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(200);
    let simstep = args.get(5).map(|s| s != "0").unwrap_or(true);
    let seed_structural = args.get(6).map(|s| s != "0").unwrap_or(true);
    let seed: u64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(42);

    let cfg = NetworkConfig {
        n_cls: 3,
        c_feat,
        n_state,
        lr,
        steps,
        simstep,
        seed_structural,
        seed,
        ..NetworkConfig::default()
    };
    let tiles = gen_dataset(7, cfg.n_cls, cfg.tile, 64)?;
    let (train, held_out) = tiles.split_at(56);

    let mut state = TrainState::new(&cfg)?;
    let t0 = std::time::Instant::now();
    let mut last = Vec::new();
    for i in 0..cfg.steps {
        let s = &train[i % train.len()];
        let labels = OneHotLabels::encode(&s.labels, cfg.n_cls)?;
        let r = train_step(&mut state, &cfg, &s.image, &labels)?;
        if r.step % 40 == 0 || r.step == 1 {
            println!("  step {:>4} total {:.4}", r.step, r.loss_total);
        }
        last.push(r.loss_total);
    }
    let dt = t0.elapsed().as_secs_f64();
    let tail = &last[last.len().saturating_sub(10)..];
    let tail_mean: f64 = tail.iter().sum::<f64>() / tail.len() as f64;

    let mut cm = ConfusionMatrix::new(cfg.n_cls);
    let mut cm_lab = ConfusionMatrix::new(cfg.n_cls);
    for s in held_out {
        let logits = infer(&state.params, &cfg, &state.memory, &s.image)?;
        cm.accumulate(&argmax_channels(&logits)?, &s.labels)?;

        // diagnostic: label-guided prototypes on the held-out tile itself
        let labels = OneHotLabels::encode(&s.labels, cfg.n_cls)?;
        let mut tape = pdssnet::autodiff::Tape::new();
        let nv = state.params.push_vars(&mut tape);
        let iv = tape.var(s.image.clone());
        let out = pdssnet::network::pdssnet_forward(
            &mut tape,
            &nv,
            &cfg,
            iv,
            pdssnet::network::Guidance::Labels(&labels),
            false,
        )?;
        let lv = tape.val(out.logits).clone();
        cm_lab.accumulate(&argmax_channels(&lv)?, &s.labels)?;
    }
    let rep = cm.metrics();
    let rep_lab = cm_lab.metrics();

    // diagnostics: pairwise cosines of memory rows vs fresh label prototypes
    let cos = |a: &[f64], b: &[f64]| {
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
        ab / (aa.sqrt() * bb.sqrt()).max(1e-12)
    };
    let m = &state.memory.protos;
    let c = cfg.c_feat;
    let mut mem_cos = Vec::new();
    for i in 0..cfg.n_cls {
        for j in i + 1..cfg.n_cls {
            mem_cos.push(cos(
                &m.data()[i * c..(i + 1) * c],
                &m.data()[j * c..(j + 1) * c],
            ));
        }
    }
    // fresh training-style prototypes + confidence sharpness on one train tile
    let s = &train[0];
    let labels = OneHotLabels::encode(&s.labels, cfg.n_cls)?;
    let mut tape = pdssnet::autodiff::Tape::new();
    let nv = state.params.push_vars(&mut tape);
    let iv = tape.var(s.image.clone());
    let out = pdssnet::network::pdssnet_forward(
        &mut tape,
        &nv,
        &cfg,
        iv,
        pdssnet::network::Guidance::Labels(&labels),
        true,
    )?;
    let tr = out.trace.unwrap();
    let q = &tr.prototypes;
    let mut q_cos = Vec::new();
    for i in 0..cfg.n_cls {
        for j in i + 1..cfg.n_cls {
            q_cos.push(cos(
                &q.data()[i * c..(i + 1) * c],
                &q.data()[j * c..(j + 1) * c],
            ));
        }
    }
    let mut mem_vs_q = Vec::new();
    for i in 0..cfg.n_cls {
        mem_vs_q.push(cos(
            &m.data()[i * c..(i + 1) * c],
            &q.data()[i * c..(i + 1) * c],
        ));
    }

    println!(
        "lr {lr} c {c_feat} n {n_state} steps {steps} sim {simstep} seed_st {seed_structural} seed {seed} | tail loss {tail_mean:.4} | mem mIoU {:.4} OA {:.4} | lab mIoU {:.4} | {:.2} s/step, {dt:.0}s",
        rep.mean_iou, rep.overall_accuracy, rep_lab.mean_iou, dt / steps as f64
    );
    // conf sharpness: mean |sigmoid - 0.5| of the confidence maps
    let conf_vals = {
        let mut t2 = pdssnet::autodiff::Tape::new();
        let nv2 = state.params.push_vars(&mut t2);
        let iv2 = t2.var(s.image.clone());
        let pre = t2.conv2d(iv2, nv2.enc[0].0, nv2.enc[0].1, 1, 1)?;
        let x1 = t2.silu(pre);
        let cpre = t2.conv2d(x1, nv2.conf_w, nv2.conf_b, 1, 0)?;
        let conf = t2.sigmoid(cpre);
        t2.val(conf).clone()
    };
    let conf_sharp: f64 =
        conf_vals.data().iter().map(|v| (v - 0.5).abs()).sum::<f64>() / conf_vals.numel() as f64;
    println!(
        "  mem row cos {:?} | q proto cos {:?} | mem-vs-q {:?} | conf sharpness {:.3}",
        mem_cos.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
        q_cos.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
        mem_vs_q.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
        conf_sharp
    );
    let _ = &tr.pos;
    Ok(())
}
