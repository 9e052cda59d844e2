//! Acceptance suite. Runs every criterion, prints one `PASS`/`FAIL` line
//! each and exits non-zero if any failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ecm_core::autograd::{check_input_gradients, check_param_gradients, Init, ParamStore, Tensor};
use ecm_core::checkpoint::Checkpoint;
use ecm_core::conditioning::{Conditioner, ConditioningConfig, InitialFrame};
use ecm_core::eval_metrics::{box_iou, frechet_distance, FeatureStats};
use ecm_core::masked_attention::{
    attention_weights, cross_attention, masked_cross_attention, raw_corner_map, AttentionInputs, CornerCombine, MaskMode,
};
use ecm_core::motion_curves::{EncodingMode, MotionCurveSet, MotionEncoder, MotionEncoderConfig};
use ecm_core::nn::Activation;
use ecm_core::phantom_data::{
    detect_clip, read_clip, read_dataset, render_phantom_with, write_clip, write_dataset, PhantomConfig, RenderOptions,
    DEFAULT_BANDS,
};
use ecm_core::video_diffusion::unet::{BlockContext, SpatioTemporalBlock};
use ecm_core::video_diffusion::{ddim_sample, q_sample_alpha, NoiseSchedule};

#[path = "acceptance/smoke.rs"]
mod smoke;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn kernel_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut bitwise, mut worst_row) = (true, 0.0f64);
    for _ in 0..100 {
        let (nq, nk, d) = (rng.gen_range(1..40), rng.gen_range(1..12), rng.gen_range(1..24));
        let q = normals(&mut rng, nq * d);
        let k = normals(&mut rng, nk * d);
        let v = normals(&mut rng, nk * d);
        let inputs = AttentionInputs::new(&q, &k, &v, d).unwrap();
        let ones = vec![1.0; nq * nk];
        let plain = cross_attention(&inputs).unwrap();
        let masked = masked_cross_attention(&inputs, &ones).unwrap();
        bitwise &= plain.iter().zip(&masked).all(|(a, b)| a.to_bits() == b.to_bits());
        let mask: Vec<f64> = (0..nq * nk).map(|_| rng.gen_range(1e-3..1.0)).collect();
        for m in [None, Some(mask.as_slice())] {
            let w = attention_weights(&inputs, m, MaskMode::Multiplicative).unwrap();
            for row in w.chunks(nk) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(bitwise && worst_row <= 1e-6 && secs < 10.0, format!("bitwise={bitwise} max|rowsum-1|={worst_row:.2e} time={secs:.2}s"))
}

fn gaussian_fidelity() -> Outcome {
    let sigma = 10.0;
    let peak = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    // Corners sit on pixel centres; the nearest other corner is 40 px away.
    let map = raw_corner_map([10.5, 10.5, 50.5, 50.5], sigma, 64, 64, CornerCombine::Max);
    let at_center = map[10 * 64 + 10];
    let at_sigma = map[10 * 64 + 20];
    let e1 = (at_center - peak).abs();
    let e2 = (at_sigma - peak * (-0.5f64).exp()).abs();
    Outcome::new(
        e1 <= 1e-12 && e2 <= 1e-9 && (peak - 1.59155e-3).abs() < 1e-8,
        format!("peak={at_center:.6e} |err|={e1:.1e} radius-sigma |err|={e2:.1e}"),
    )
}

type Mat = Vec<Vec<f64>>;

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
}

fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a.iter().enumerate().map(|(i, r)| r.iter().copied().chain((0..n).map(|j| (i == j) as u8 as f64)).collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        let d = m[c][c];
        m[c].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                let row = m[c].clone();
                m[r].iter_mut().zip(row).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Trace of `(Σa Σb)^½` by Denman–Beavers iteration on the product.
fn trace_sqrt_product(a: &Mat, b: &Mat) -> f64 {
    let n = a.len();
    let mut y = matmul(a, b);
    let mut z: Mat = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _ in 0..100 {
        let (yi, zi) = (inverse(&y), inverse(&z));
        let ny: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect()).collect();
        let nz: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect()).collect();
        y = ny;
        z = nz;
    }
    (0..n).map(|i| y[i][i]).sum()
}

fn stats(mean: Vec<f64>, cov: &Mat) -> FeatureStats {
    let n = mean.len();
    FeatureStats { mean: DVector::from_vec(mean), cov: DMatrix::from_fn(n, n, |i, j| cov[i][j]) }
}

fn frechet_oracles() -> Outcome {
    let mut worst_1d = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (ma, mb) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let (sa, sb): (f64, f64) = (rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0));
        let got = frechet_distance(&stats(vec![ma], &vec![vec![sa * sa]]), &stats(vec![mb], &vec![vec![sb * sb]])).unwrap();
        worst_1d = worst_1d.max((got - ((ma - mb).powi(2) + (sa - sb).powi(2))).abs());
    }
    let mut worst_5d = 0.0f64;
    for _ in 0..20 {
        let psd = |rng: &mut ChaCha8Rng| -> Mat {
            let l: Mat = (0..5).map(|_| normals(rng, 5)).collect();
            (0..5).map(|i| (0..5).map(|j| (0..5).map(|k| l[i][k] * l[j][k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 }).collect()).collect()
        };
        let (ca, cb) = (psd(&mut rng), psd(&mut rng));
        let (ma, mb) = (normals(&mut rng, 5), normals(&mut rng, 5));
        let trace = |m: &Mat| (0..5).map(|i| m[i][i]).sum::<f64>();
        let oracle = ma.iter().zip(&mb).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + trace(&ca) + trace(&cb)
            - 2.0 * trace_sqrt_product(&ca, &cb);
        let got = frechet_distance(&stats(ma, &ca), &stats(mb, &cb)).unwrap();
        worst_5d = worst_5d.max((got - oracle).abs() / oracle.abs().max(1e-12));
    }
    Outcome::new(worst_1d <= 1e-9 && worst_5d <= 1e-6, format!("1-D max|err|={worst_1d:.1e} 5-D max rel={worst_5d:.1e}"))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut init = Init::new(11);
    let mut reports = Vec::new();

    // (a) motion embedding
    let mut store = ParamStore::<f64>::new();
    let cfg = MotionEncoderConfig { levels: 2, dim: 5, depth: 2, activation: Activation::Silu, mode: EncodingMode::PerCoordinate };
    let enc = MotionEncoder::new(&mut store, &mut Init::new(5), "motion", cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut curves = MotionCurveSet {
        frames: 2,
        categories: 2,
        coords: (0..4).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0))).collect(),
        present: vec![true; 4],
    };
    curves.present[1] = false;
    let w: Tensor<f64> = init.normal(&[4, 5], 1.0);
    reports.push(("embed_motion", check_param_gradients(&store, 1e-4, 12, |g, s| {
        let y = enc.embed(g, s, &curves).unwrap();
        let wv = g.input(w.clone());
        let p = g.mul(y, wv);
        g.sum(p)
    })));

    // (b) structure encoding + alignment
    let mut store = ParamStore::<f64>::new();
    let ccfg = ConditioningConfig { patch: 8, encoder_channels: 2, dim: 3, cond_dim: 4, ..Default::default() };
    let cond = Conditioner::new(&mut store, &mut Init::new(3), "cond", ccfg, 2);
    let frame: Vec<f32> = (0..256).map(|i| ((i * 37 % 101) as f32) / 100.0).collect();
    let frames = [InitialFrame {
        pixels: &frame,
        height: 16,
        width: 16,
        boxes: vec![[1.0, 1.5, 9.0, 9.0], [4.0, 2.0, 14.5, 12.0]],
        present: vec![true; 2],
    }];
    let motion: Tensor<f64> = init.normal(&[4, 3], 1.0);
    let w: Tensor<f64> = init.normal(&[4, 4], 1.0);
    reports.push(("align", check_param_gradients(&store, 1e-4, 6, |g, s| {
        let m = g.input(motion.clone());
        let t = cond.tokens(g, s, &frames, 2, m).unwrap();
        let wv = g.input(w.clone());
        let p = g.mul(t, wv);
        g.sum(p)
    })));

    // (c) masked cross-attention, all inputs including the mask
    let q: Tensor<f64> = init.normal(&[2, 5, 4], 1.0);
    let k: Tensor<f64> = init.normal(&[2, 3, 4], 1.0);
    let v: Tensor<f64> = init.normal(&[2, 3, 4], 1.0);
    let m = Tensor::new(&[2, 5, 3], (0..30).map(|i| 0.2 + (i % 7) as f64 / 9.0).collect());
    let w: Tensor<f64> = init.normal(&[2, 5, 4], 1.0);
    reports.push(("masked_cross_attention", check_input_gradients(&[q, k, v, m], 1e-4, |g, x| {
        let y = g.attention(x[0], x[1], x[2], Some(x[3]), MaskMode::Multiplicative, 2);
        let wv = g.input(w.clone());
        let p = g.mul(y, wv);
        g.sum(p)
    })));

    // (d) one spatio-temporal denoiser block
    let mut store = ParamStore::<f64>::new();
    let block = SpatioTemporalBlock::new(&mut store, &mut init, "blk", 4, 4, 6, 5, 2);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.value(id).shape.clone();
        *store.value_mut(id) = init.normal(&shape, 0.5);
    }
    let x: Tensor<f64> = init.normal(&[4, 3, 3, 4], 1.0);
    let temb: Tensor<f64> = init.normal(&[4, 6], 1.0);
    let tokens: Tensor<f64> = init.normal(&[8, 5], 1.0);
    let mask = Tensor::new(&[4, 9, 2], (0..72).map(|i| 0.1 + (i % 7) as f64 / 7.0).collect());
    let pos: Tensor<f64> = init.normal(&[2, 4], 1.0);
    let w: Tensor<f64> = init.normal(&[4, 3, 3, 4], 1.0);
    reports.push(("denoiser_block", check_param_gradients(&store, 1e-4, 4, |g, s| {
        let ctx = BlockContext {
            clips: 2,
            temb: g.input(temb.clone()),
            tokens: g.input(tokens.clone()),
            mask: Some(g.input(mask.clone())),
            mode: MaskMode::Multiplicative,
            positions: g.input(pos.clone()),
        };
        let xv = g.input(x.clone());
        let y = block.forward(g, s, xv, &ctx);
        let wv = g.input(w.clone());
        let p = g.mul(y, wv);
        g.sum(p)
    })));

    let secs = start.elapsed().as_secs_f64();
    let ok = reports.iter().all(|(_, r)| r.checked > 0 && r.max_rel_err <= 1e-3) && secs < 120.0;
    let detail = reports.iter().map(|(n, r)| format!("{n}={:.1e}({})", r.max_rel_err, r.checked)).collect::<Vec<_>>().join(" ");
    Outcome::new(ok, format!("{detail} time={secs:.1}s"))
}

fn diffusion_math() -> Outcome {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let mut moments_ok = true;
    let mut detail = String::new();
    let cases = [(None, 0.8f64), (Some(10usize), 0.8), (Some(500), -1.3), (Some(999), 2.0)];
    for (t, x0) in cases {
        let ab = t.map_or(0.5, |t| s.alpha_bar[t]);
        let eps = normals(&mut rng, n);
        let xt = match t {
            Some(t) => s.q_sample(&vec![x0; n], t, &eps).unwrap(),
            None => q_sample_alpha(&vec![x0; n], 0.5, &eps).unwrap(),
        };
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (em, ev) = (ab.sqrt() * x0, 1.0 - ab);
        let mean_ok = (mean - em).abs() <= 3.0 * (ev / n as f64).sqrt();
        let var_ok = (var - ev).abs() <= 0.05 * ev;
        moments_ok &= mean_ok && var_ok;
        detail += &format!("abar={ab:.3}: mean {mean:.4}/{em:.4} var {var:.4}/{ev:.4}; ");
    }
    let x0 = normals(&mut rng, 64);
    let mut worst = 0.0f64;
    for steps in [5, 10, 50] {
        let x_t = normals(&mut rng, 64);
        let mut oracle = |x: &[f64], t: usize| -> ecm_core::Result<Vec<f64>> {
            let ab = s.alpha_bar[t];
            Ok(x.iter().zip(&x0).map(|(xt, x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect())
        };
        let out = ddim_sample(&s, steps, x_t, &mut oracle).unwrap();
        worst = worst.max(out.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Outcome::new(moments_ok && worst <= 1e-4, format!("{detail}ddim max|x0 err|={worst:.1e}"))
}

fn ecm() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ecm"));
    c.env("ECM_DETERMINISTIC", "1");
    c
}

fn run_ok(cmd: &mut Command) -> Result<(), String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).trim().to_string())
    }
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.into_iter().map(|p| (p.file_name().unwrap().into(), fs::read(&p).unwrap())).collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), smoke::determinism_config()).unwrap();
    let run = |tag: &str| -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
        let root = dir.path().join(tag);
        let p = |n: &str| root.join(n);
        let cfg = dir.path().join("run.toml");
        run_ok(ecm().args(["make-data", "--config"]).arg(&cfg).arg("--out").arg(p("data")))?;
        run_ok(ecm().args(["train-codec", "--config"]).arg(&cfg).arg("--data").arg(p("data")).arg("--out").arg(p("codec.ckpt")))?;
        run_ok(
            ecm().args(["train", "--steps", "200", "--config"]).arg(&cfg).arg("--data").arg(p("data")).arg("--codec").arg(p("codec.ckpt")).arg("--out").arg(p("den.ckpt")),
        )?;
        let clip = p("data").join("clip-00000.ecmv");
        run_ok(ecm().arg("extract-curves").arg("--clip").arg(&clip).arg("--out").arg(p("curves.json")))?;
        run_ok(
            ecm().arg("generate").arg("--checkpoint").arg(p("den.ckpt")).arg("--codec").arg(p("codec.ckpt")).arg("--frame").arg(&clip).arg("--curves").arg(p("curves.json")).arg("--out").arg(p("gen.ecmv")).args(["--seed", "7"]),
        )?;
        let mut all = tree_bytes(&p("data"));
        for f in ["codec.ckpt", "den.ckpt", "gen.ecmv"] {
            all.push((f.into(), fs::read(p(f)).unwrap()));
        }
        Ok(all)
    };
    match (run("a"), run("b")) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<String> =
                a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.display().to_string()).collect();
            Outcome::new(a.len() == b.len() && differing.is_empty(), format!("{} files compared, differing: {differing:?}", a.len()))
        }
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, format!("command failed: {e}")),
    }
}

fn detector_validity() -> Outcome {
    let cfg = PhantomConfig { clip_count: 50, ..Default::default() };
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..cfg.clip_count {
        let clip = render_phantom_with(&cfg.clip_specs(i), cfg.frames, cfg.height, cfg.width, 0, RenderOptions::noiseless()).unwrap();
        let det = detect_clip(&clip, &DEFAULT_BANDS);
        for t in 0..clip.frames {
            for c in 0..clip.categories {
                if clip.is_present(t, c) {
                    let iou = if det.is_present(t, c) {
                        box_iou(clip.bbox(t, c).map(|v| v as f64), det.bbox(t, c).map(|v| v as f64))
                    } else {
                        0.0
                    };
                    sum += iou;
                    n += 1;
                }
            }
        }
    }
    let mean = sum / n as f64;
    Outcome::new(mean >= 0.90, format!("mean IoU {mean:.4} over {n} boxes"))
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let cfg = PhantomConfig { clip_count: 3, frames: 6, height: 32, width: 32, ..Default::default() };
    let (clips, manifest) = ecm_core::phantom_data::generate_dataset(&cfg).unwrap();
    let bits = |c: &ecm_core::phantom_data::VideoClip| {
        (c.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), c.boxes.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>(), c.present.clone(), (c.frames, c.height, c.width, c.categories))
    };
    write_dataset(&dir.path().join("ds"), &clips, &manifest).unwrap();
    let (back, back_manifest) = read_dataset(&dir.path().join("ds")).unwrap();
    let dataset_ok = back_manifest == manifest && back.iter().zip(&clips).all(|(a, b)| bits(a) == bits(b)) && back.len() == clips.len();
    let clip_path = dir.path().join("one.ecmv");
    write_clip(&clip_path, &clips[1]).unwrap();
    let first = fs::read(&clip_path).unwrap();
    write_clip(&clip_path, &read_clip(&clip_path).unwrap()).unwrap();
    let clip_ok = first == fs::read(&clip_path).unwrap();
    notes.push(format!("dataset={dataset_ok} clip={clip_ok}"));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut curves = MotionCurveSet::from_clip(&clips[0]);
    for c in curves.coords.iter_mut().flatten() {
        *c += rng.gen_range(-1e-3..1e-3);
    }
    let cpath = dir.path().join("c.json");
    curves.write(&cpath).unwrap();
    let cback = MotionCurveSet::read(&cpath).unwrap();
    let curve_bits = |c: &MotionCurveSet| c.coords.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    let curves_ok = curve_bits(&cback) == curve_bits(&curves) && cback == curves;
    notes.push(format!("curves={curves_ok}"));

    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(4);
    store.add("w", init.normal(&[7, 3], 1.0));
    store.add("b", init.normal(&[3], 1.0));
    let ck = Checkpoint { kind: "test".into(), config: "{\"a\":1}".into(), step: 17, seed: 3, meta: "{}".into(), params: store };
    let kpath = dir.path().join("k.ckpt");
    ck.save(&kpath).unwrap();
    let kb = fs::read(&kpath).unwrap();
    let kback = Checkpoint::load(&kpath).unwrap();
    kback.save(&kpath).unwrap();
    let ck_ok = kback == ck && fs::read(&kpath).unwrap() == kb;
    notes.push(format!("checkpoint={ck_ok}"));

    Outcome::new(dataset_ok && clip_ok && curves_ok && ck_ok, notes.join(" "))
}

fn main() {
    // libtest-style filtering: `cargo test -- <name>` runs only matching criteria.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "kernel_exactness", kernel_exactness),
        (2, "gaussian_mask_fidelity", gaussian_fidelity),
        (3, "frechet_oracles", frechet_oracles),
        (4, "gradient_checks", gradient_checks),
        (5, "diffusion_math", diffusion_math),
        (6, "determinism", determinism),
        (7, "detector_validity", detector_validity),
        (8, "end_to_end_smoke", smoke::end_to_end),
        (9, "controllability", smoke::controllability),
        (10, "round_trips", round_trips),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = f();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {name}: {verdict} ({:.1}s) {}", start.elapsed().as_secs_f64(), out.detail);
        failed += (!out.pass) as usize;
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
