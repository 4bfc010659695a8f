//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ternvit_core::data::SyntheticSpec;
use ternvit_core::diagnostics::{
    hessian_top_eigenvalue, loss_landscape_2d, objective_landscape_2d, patch_embed_vs_block_median, power_iteration,
    Objective, Quadratic,
};
use ternvit_core::io::{idx_dataset, Checkpoint, Dtype, RunConfig, StoredTensor};
use ternvit_core::kernels::{int8_gemm_f32, int8_gemm_i8, ternary_gemm_f32, ternary_gemm_i8};
use ternvit_core::quantization::policy::{ActivationBits, WeightBits};
use ternvit_core::quantization::ternary::ternary_code;
use ternvit_core::quantization::{quantize_minmax8, quantize_minmax8_columns, ternarize, Granularity, PolicySpec};
use ternvit_core::training::{ablation_suite, Pipeline};
use ternvit_core::{Error, Tape, Tensor, Var, ViTConfig, VisionTransformer};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_limit(elapsed: Duration, limit: f64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit, || {
        format!("{what} took {:.2}s, limit {limit}s", elapsed.as_secs_f64())
    })
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let std = r.random_range(0.01..3.0);
    let mut t = Tensor::randn(&[rows, cols], std, r);
    // occasionally zero out a channel
    if cols > 1 && r.random_bool(0.1) {
        let j = r.random_range(0..cols);
        for k in 0..rows {
            t.data_mut()[k * cols + j] = 0.0;
        }
    }
    t
}

// 1 ------------------------------------------------------------------------

fn model_size() -> Outcome {
    let expect = [
        ("deit_tiny.toml", 22.7, 1.6, 13.35),
        ("deit_small.toml", 88.2, 6.0, 14.70),
        ("deit_base.toml", 346.2, 22.7, 15.25),
    ];
    let mut report = Vec::new();
    for (file, real, tern, ratio) in expect {
        let start = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_ternvit"))
            .args(["size", "--config"])
            .arg(config_path(file))
            .output()
            .map_err(|e| e.to_string())?;
        within_limit(start.elapsed(), 1.0, file)?;
        ensure(out.status.success(), || format!("{file}: exit {:?}", out.status.code()))?;
        let text = String::from_utf8_lossy(&out.stdout).to_string();
        let value = |key: &str, suffix: &str| -> Result<f64, String> {
            text.lines()
                .find_map(|l| l.strip_prefix(key))
                .and_then(|rest| rest.trim().split(suffix).next())
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| format!("{file}: no `{key}` in output"))
        };
        let (r, t, c) = (
            value("real-valued:", "MB")?,
            value("quantized:", "MB")?,
            value("compression:", "x")?,
        );
        ensure((r - real).abs() <= 0.02 * real, || {
            format!("{file}: real {r} MB vs {real}")
        })?;
        ensure((t - tern).abs() <= 0.10 * tern, || {
            format!("{file}: ternary {t} MB vs {tern}")
        })?;
        ensure((c - ratio).abs() <= 0.5, || format!("{file}: ratio {c}x vs {ratio}x"))?;
        report.push(format!("{r:.1}/{t:.2} MB {c:.2}x"));
    }
    Ok(report.join("; "))
}

// 2 ------------------------------------------------------------------------

fn ternarization() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let mut worst_alpha = 0.0f64;
    let mut worst_delta = 0.0f64;
    for case in 0..1000 {
        let (rows, cols) = (r.random_range(1..40), r.random_range(1..40));
        let w = random_matrix(&mut r, rows, cols);
        let t = ternarize(&w).map_err(|e| e.to_string())?;
        let codes = t.codes().map_err(|e| e.to_string())?;
        for j in 0..cols {
            let l1: f64 = (0..rows).map(|k| (w.at2(k, j) as f64).abs()).sum();
            let cam = l1 / rows as f64;
            let delta = 0.7 * l1 / rows as f64;
            worst_alpha = worst_alpha.max((t.alpha()[j] as f64 - cam).abs());
            worst_delta = worst_delta.max((t.thresholds()[j] as f64 - delta).abs());
            for k in 0..rows {
                let v = w.at2(k, j) as f64;
                let expect = if delta == 0.0 {
                    0
                } else if v < -delta {
                    -1
                } else if v < delta {
                    0
                } else {
                    1
                };
                let got = codes[k * cols + j];
                ensure(got == expect, || {
                    format!("case {case}: W={v} Δ={delta} code {got}, expected {expect}")
                })?;
            }
        }
    }
    ensure(worst_alpha <= 1e-6, || format!("alpha error {worst_alpha:e}"))?;
    ensure(worst_delta <= 1e-6, || format!("threshold error {worst_delta:e}"))?;

    // exact boundaries: W = Δ is +1, W = −Δ is 0, just below −Δ is −1
    for delta in [0.35, 1e-3, 7.0] {
        ensure(ternary_code(delta, delta) == 1, || format!("W = Δ = {delta}"))?;
        ensure(ternary_code(-delta, delta) == 0, || format!("W = −Δ = {delta}"))?;
        ensure(ternary_code(-delta - delta * 1e-12, delta) == -1, || {
            format!("W < −Δ = {delta}")
        })?;
        ensure(ternary_code(delta * (1.0 - 1e-12), delta) == 0, || {
            format!("W < Δ = {delta}")
        })?;
    }
    // a channel whose threshold lands exactly on one of its entries
    let w = Tensor::from_rows(&[&[0.7], &[-0.7], &[1.4], &[-1.4], &[0.0]]).unwrap();
    let expect_delta = 0.7 * (0.7f32 as f64 * 2.0 + 1.4f32 as f64 * 2.0) / 5.0;
    let t = ternarize(&w).map_err(|e| e.to_string())?;
    let codes = t.codes().map_err(|e| e.to_string())?;
    let manual: Vec<i8> = w.data().iter().map(|&v| ternary_code(v as f64, expect_delta)).collect();
    ensure(codes == manual, || format!("{codes:?} vs {manual:?}"))?;
    within_limit(start.elapsed(), 10.0, "ternarization suite")?;
    Ok(format!(
        "1000 matrices, max |α−CAM| {worst_alpha:.1e}, max |Δ−0.7·L1/n| {worst_delta:.1e}, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

// 3 ------------------------------------------------------------------------

fn normwise(got: &Tensor, reference: &[f64]) -> f64 {
    let diff = got
        .data()
        .iter()
        .zip(reference)
        .map(|(&g, &r)| (g as f64 - r).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().map(|r| r.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn dense64(x: &[f64], w: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| x[i * k + t] * w[t * n + j]).sum();
        }
    }
    out
}

fn kernel_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let mut worst = [0.0f64; 4];
    let mut degenerate = 0;
    let cases = 1200;
    for case in 0..cases {
        let (m, k, n) = (r.random_range(1..9), r.random_range(1..65), r.random_range(1..9));
        let x = if case % 8 == 0 {
            degenerate += 1;
            Tensor::full(&[m, k], r.random_range(-2.0..2.0))
        } else {
            Tensor::randn(&[m, k], r.random_range(0.1..4.0), &mut r)
        };
        let w = random_matrix(&mut r, k, n);
        let wt = ternarize(&w).map_err(|e| e.to_string())?;
        let w8 = quantize_minmax8_columns(&w).map_err(|e| e.to_string())?;
        let xq = quantize_minmax8(&x).map_err(|e| e.to_string())?;
        if case % 8 == 0 {
            ensure(xq.scale() == 0.0, || {
                format!("case {case}: constant input has scale {}", xq.scale())
            })?;
        }
        let f64s = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let xf = f64s(&x);
        let params = xq.params();
        let xd: Vec<f64> = xq.codes().iter().map(|&c| params.dequant(c)).collect();
        let wtd = f64s(&wt.dequantize().map_err(|e| e.to_string())?);
        let (s8, o8) = (w8.scales(), w8.offsets());
        let w8d: Vec<f64> = w8
            .codes()
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 * s8[i % n] as f64 + o8[i % n] as f64)
            .collect();

        let checks = [
            (ternary_gemm_f32(&x, &wt), dense64(&xf, &wtd, m, k, n), 1e-5),
            (ternary_gemm_i8(&xq, &wt), dense64(&xd, &wtd, m, k, n), 1e-4),
            (int8_gemm_f32(&x, &w8), dense64(&xf, &w8d, m, k, n), 1e-5),
            (int8_gemm_i8(&xq, &w8), dense64(&xd, &w8d, m, k, n), 1e-4),
        ];
        for (slot, (got, reference, tol)) in checks.into_iter().enumerate() {
            let got = got.map_err(|e| e.to_string())?;
            let err = normwise(&got, &reference);
            worst[slot] = worst[slot].max(err);
            ensure(err <= tol, || {
                format!("case {case} ({m}x{k}x{n}) kernel {slot}: rel err {err:e} > {tol:e}")
            })?;
        }
    }
    within_limit(start.elapsed(), 60.0, "kernel suite")?;
    Ok(format!(
        "{cases} cases ({degenerate} with s=0); max rel err ternary_f32 {:.1e}, ternary_i8 {:.1e}, int8_f32 {:.1e}, int8_i8 {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// 4 ------------------------------------------------------------------------

const FD_EPS: f64 = 1e-3;
const FD_TOL: f64 = 1e-3;
/// Step for the whole-model check; curvature through attention makes the
/// O(ε²) truncation term visible at 1e-3.
const MODEL_FD_EPS: f64 = 1e-4;
/// Denominator floor so near-zero gradients are compared absolutely.
const FD_FLOOR: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

type Build = dyn Fn(&mut Tape, &[Var]) -> ternvit_core::Result<Var>;

/// Checks `Σ r ∘ f(inputs)` against central differences for every input.
fn fd_check(name: &str, inputs: &[Tensor], build: &Build, seed: u64, tol: f64) -> Result<f64, String> {
    let err = |e: Error| format!("{name}: {e}");
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(&grad(t))).collect();
    let y = build(&mut tape, &leaves).map_err(err)?;
    let shape = tape.shape(y).to_vec();
    let weights = Tensor::randn(&shape, 1.0, &mut rng(seed));
    let wv = tape.constant(&weights);
    let prod = tape.mul(y, wv).map_err(err)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).map_err(err)?;

    let eval = |values: &[Vec<f64>]| -> ternvit_core::Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(values)
            .map(|(inp, v)| t.constant_f64(inp.shape().to_vec(), v.clone()))
            .collect();
        let y = build(&mut t, &vars)?;
        let wv = t.constant(&weights);
        let p = t.mul(y, wv)?;
        let l = t.sum(p);
        Ok(t.scalar(l))
    };
    let mut values: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(*leaf)
            .ok_or_else(|| format!("{name}: input {i} has no gradient"))?
            .to_vec();
        for e in 0..values[i].len() {
            let orig = values[i][e];
            values[i][e] = orig + FD_EPS;
            let up = eval(&values).map_err(err)?;
            values[i][e] = orig - FD_EPS;
            let down = eval(&values).map_err(err)?;
            values[i][e] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let re = rel_err(analytic[e], numeric);
            worst = worst.max(re);
            ensure(re <= tol, || {
                format!(
                    "{name}: input {i}[{e}] analytic {} numeric {numeric} rel {re:e}",
                    analytic[e]
                )
            })?;
        }
    }
    Ok(worst)
}

fn op_suite() -> Result<(usize, f64), String> {
    let mut r = rng(40);
    let mut t = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut r);
    let labels = [2usize, 0, 3];
    let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
        (
            "matmul",
            vec![t(&[4, 5]), t(&[5, 3])],
            Box::new(|tp: &mut Tape, v: &[Var]| tp.matmul(v[0], v[1])),
        ),
        (
            "transpose",
            vec![t(&[3, 4])],
            Box::new(|tp: &mut Tape, v: &[Var]| tp.transpose(v[0])),
        ),
        (
            "add",
            vec![t(&[3, 4]), t(&[3, 4])],
            Box::new(|tp: &mut Tape, v: &[Var]| tp.add(v[0], v[1])),
        ),
        (
            "add_row_bias",
            vec![t(&[3, 4]), t(&[4])],
            Box::new(|tp: &mut Tape, v: &[Var]| tp.add_row_bias(v[0], v[1])),
        ),
        (
            "mul",
            vec![t(&[3, 4]), t(&[3, 4])],
            Box::new(|tp: &mut Tape, v: &[Var]| tp.mul(v[0], v[1])),
        ),
        (
            "scale",
            vec![t(&[2, 3])],
            Box::new(|tp: &mut Tape, v: &[Var]| Ok(tp.scale(v[0], -1.7))),
        ),
        (
            "gelu",
            vec![t(&[4, 5])],
            Box::new(|tp: &mut Tape, v: &[Var]| Ok(tp.gelu(v[0]))),
        ),
        (
            "softmax",
            vec![t(&[3, 6])],
            Box::new(|tp: &mut Tape, v: &[Var]| tp.softmax_lastdim(v[0])),
        ),
        (
            "layernorm",
            vec![t(&[3, 6]), t(&[6]), t(&[6])],
            Box::new(|tp: &mut Tape, v: &[Var]| tp.layernorm(v[0], v[1], v[2])),
        ),
        (
            "sum",
            vec![t(&[3, 4])],
            Box::new(|tp: &mut Tape, v: &[Var]| Ok(tp.sum(v[0]))),
        ),
        (
            "cross_entropy",
            vec![t(&[3, 5])],
            Box::new(move |tp: &mut Tape, v: &[Var]| tp.cross_entropy(v[0], &labels)),
        ),
        (
            "slice",
            vec![t(&[4, 6])],
            Box::new(|tp: &mut Tape, v: &[Var]| tp.slice(v[0], 1, 2, 2, 3)),
        ),
        (
            "concat_cols",
            vec![t(&[3, 2]), t(&[3, 4])],
            Box::new(|tp: &mut Tape, v: &[Var]| tp.concat_cols(&[v[0], v[1]])),
        ),
        (
            "concat_rows",
            vec![t(&[2, 3]), t(&[4, 3])],
            Box::new(|tp: &mut Tape, v: &[Var]| tp.concat_rows(&[v[0], v[1]])),
        ),
        (
            "assemble_tokens",
            vec![t(&[4, 3]), t(&[1, 3]), t(&[3, 3])],
            Box::new(|tp: &mut Tape, v: &[Var]| tp.assemble_tokens(v[0], v[1], v[2], 2)),
        ),
        (
            "select_rows",
            vec![t(&[5, 3])],
            Box::new(|tp: &mut Tape, v: &[Var]| tp.select_rows(v[0], &[4, 0, 4])),
        ),
        (
            "attention chain",
            vec![t(&[4, 6]), t(&[6, 6]), t(&[6, 6])],
            Box::new(|tp: &mut Tape, v: &[Var]| {
                let q = tp.matmul(v[0], v[1])?;
                let k = tp.matmul(v[0], v[2])?;
                let kt = tp.transpose(k)?;
                let s = tp.matmul(q, kt)?;
                let s = tp.scale(s, 0.4);
                let p = tp.softmax_lastdim(s)?;
                tp.matmul(p, v[0])
            }),
        ),
    ];
    let mut worst = 0.0f64;
    for (i, (name, inputs, build)) in cases.iter().enumerate() {
        // matmul is held to the tighter bound
        let tol = if *name == "matmul" { 1e-4 } else { FD_TOL };
        worst = worst.max(fd_check(name, inputs, build.as_ref(), 100 + i as u64, tol)?);
    }
    Ok((cases.len(), worst))
}

/// Full toy model, every parameter, real-valued policy.
fn model_fd() -> Result<(usize, f64), String> {
    let config = ViTConfig::toy();
    let mut model = VisionTransformer::new(config.clone(), &mut rng(41)).map_err(|e| e.to_string())?;
    let params = model.parameter_count();
    ensure(params <= 10_000, || format!("toy model has {params} parameters"))?;
    let images = Tensor::randn(
        &[2, config.in_channels, config.image_size, config.image_size],
        1.0,
        &mut rng(42),
    );
    let labels = [3usize, 7];
    let policy = config.policy(&PolicySpec::real32()).map_err(|e| e.to_string())?;

    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &images, &policy).map_err(|e| e.to_string())?;
    let loss = tape.cross_entropy(pass.logits, &labels).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let analytic: Vec<(String, Vec<f64>)> = pass
        .bindings
        .iter()
        .map(|(n, v)| (n.clone(), grads.get(*v).map(|g| g.to_vec()).unwrap_or_default()))
        .collect();

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, g) in analytic {
        let len = model.parameter(&name).ok_or("unknown binding")?.len();
        for e in 0..len {
            let orig = model.parameter(&name).unwrap().data()[e];
            let mut at = |v: f32| -> Result<(f64, f64), String> {
                model.parameter_mut(&name).unwrap().data_mut()[e] = v;
                let l = model
                    .evaluate_batch(&images, &labels, &policy)
                    .map_err(|e| e.to_string())?
                    .loss;
                Ok((l, v as f64))
            };
            // use the f32-representable step actually taken
            let (up, hi) = at((orig as f64 + MODEL_FD_EPS) as f32)?;
            let (down, lo) = at((orig as f64 - MODEL_FD_EPS) as f32)?;
            model.parameter_mut(&name).unwrap().data_mut()[e] = orig;
            let numeric = (up - down) / (hi - lo);
            let re = rel_err(g[e], numeric);
            worst = worst.max(re);
            checked += 1;
            ensure(re <= FD_TOL, || {
                format!("{name}[{e}]: analytic {} numeric {numeric} rel {re:e}", g[e])
            })?;
        }
    }
    ensure(checked == params, || {
        format!("checked {checked} of {params} parameters")
    })?;
    Ok((checked, worst))
}

/// Quantized graph vs. the same graph with each quantizer replaced by a
/// constant holding its output: latent-weight gradients must equal
/// `α·g` (ternary) or `g` (8-bit), bit for bit.
fn ste_oracle() -> Result<usize, String> {
    let e = |e: Error| e.to_string();
    let mut r = rng(43);
    let mut compared = 0;

    // single-op identities
    for granularity in [Granularity::ChannelWise, Granularity::LayerWise] {
        let w = Tensor::randn(&[6, 4], 0.5, &mut r);
        let x = Tensor::randn(&[3, 6], 1.0, &mut r);
        let weights = Tensor::randn(&[3, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let (wv, xv) = (tape.leaf(&grad(&w)), tape.leaf(&grad(&x)));
        let q = tape.fake_ternary(wv, granularity).map_err(e)?;
        let qv = tape.value(q);
        let y = tape.matmul(xv, q).map_err(e)?;
        let c = tape.constant(&weights);
        let p = tape.mul(y, c).map_err(e)?;
        let l = tape.sum(p);
        let g = tape.backward(l).map_err(e)?;

        let mut oracle = Tape::new();
        let xo = oracle.leaf(&grad(&x));
        let qo = oracle.leaf(&grad(&qv));
        let yo = oracle.matmul(xo, qo).map_err(e)?;
        let co = oracle.constant(&weights);
        let po = oracle.mul(yo, co).map_err(e)?;
        let lo = oracle.sum(po);
        let go = oracle.backward(lo).map_err(e)?;

        let alpha: Vec<f64> = match granularity {
            Granularity::ChannelWise => ternarize(&w).map_err(e)?.alpha().iter().map(|&a| a as f64).collect(),
            Granularity::LayerWise => {
                let a = (w.data().iter().map(|v| (*v as f64).abs()).sum::<f64>() / 24.0) as f32 as f64;
                vec![a; 4]
            }
        };
        let gw = g.get(wv).ok_or("no weight gradient")?;
        let gq = go.get(qo).ok_or("no oracle gradient")?;
        for (i, (&a, &b)) in gw.iter().zip(gq).enumerate() {
            ensure(a == b * alpha[i % 4], || {
                format!("fake_ternary[{i}]: {a} vs {}", b * alpha[i % 4])
            })?;
            compared += 1;
        }
        ensure(g.get(xv) == go.get(xo), || "input gradients differ".into())?;
    }

    // 8-bit quantizers pass the gradient through unchanged; the downstream is
    // linear so the oracle does not depend on rounding the fake output to f32
    let x = Tensor::randn(&[4, 5], 2.0, &mut r);
    let weights = Tensor::randn(&[4, 5], 1.0, &mut r);
    for variant in 0..2 {
        let mut tape = Tape::new();
        let xv = tape.leaf(&grad(&x));
        let q = if variant == 0 {
            tape.fake_quant8(xv, None)
        } else {
            tape.fake_quant8_columns(xv).map_err(e)?
        };
        let qv = tape.value(q);
        let c = tape.constant(&weights);
        let p = tape.mul(q, c).map_err(e)?;
        let l = tape.sum(p);
        let g = tape.backward(l).map_err(e)?;
        let mut oracle = Tape::new();
        let qo = oracle.leaf(&grad(&qv));
        let co = oracle.constant(&weights);
        let po = oracle.mul(qo, co).map_err(e)?;
        let lo = oracle.sum(po);
        let go = oracle.backward(lo).map_err(e)?;
        ensure(g.get(xv) == go.get(qo), || {
            format!("8-bit variant {variant} gradients differ")
        })?;
        compared += x.len();
    }

    // the whole toy model with ternary weights and real activations
    let config = ViTConfig::toy();
    let model = VisionTransformer::new(config.clone(), &mut rng(44)).map_err(e)?;
    let images = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut r);
    let labels = [1usize, 4];
    let spec = PolicySpec::uniform(WeightBits::Ternary, ActivationBits::Real32);
    let policy = config.policy(&spec).map_err(e)?;
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &images, &policy).map_err(e)?;
    let loss = tape.cross_entropy(pass.logits, &labels).map_err(e)?;
    let grads = tape.backward(loss).map_err(e)?;

    let mut substituted = model.clone();
    let mut scales = std::collections::BTreeMap::new();
    for (id, _, _) in config.linear_shapes() {
        let lin = substituted.linear(&id).ok_or("missing layer")?;
        let (deq, alpha) = match policy.weight_bits(&id).map_err(e)? {
            WeightBits::Ternary => {
                let t = ternarize(&lin.weight).map_err(e)?;
                (t.dequantize().map_err(e)?, Some(t.alpha().to_vec()))
            }
            WeightBits::Int8 => (quantize_minmax8_columns(&lin.weight).map_err(e)?.dequantize(), None),
            WeightBits::Real32 => (lin.weight.clone(), None),
        };
        substituted
            .parameter_mut(&format!("{id}.weight"))
            .ok_or("missing weight")?
            .data_mut()
            .copy_from_slice(deq.data());
        scales.insert(format!("{id}.weight"), alpha);
    }
    let real = config.policy(&PolicySpec::real32()).map_err(e)?;
    let mut oracle = Tape::new();
    let opass = substituted.forward(&mut oracle, &images, &real).map_err(e)?;
    let oloss = oracle.cross_entropy(opass.logits, &labels).map_err(e)?;
    ensure(oracle.scalar(oloss) == tape.scalar(loss), || {
        "substituted graph changes the loss".into()
    })?;
    let ograds = oracle.backward(oloss).map_err(e)?;
    for ((name, v), (oname, ov)) in pass.bindings.iter().zip(&opass.bindings) {
        ensure(name == oname, || format!("binding order {name} vs {oname}"))?;
        let g = grads.get(*v).ok_or("no gradient")?;
        let go = ograds.get(*ov).ok_or("no oracle gradient")?;
        let cols = model.parameter(name).map(|p| *p.shape().last().unwrap()).unwrap_or(1);
        for (i, (&a, &b)) in g.iter().zip(go).enumerate() {
            let expect = match scales.get(name) {
                Some(Some(alpha)) => b * alpha[i % cols] as f64,
                _ => b,
            };
            ensure(a == expect, || format!("{name}[{i}]: {a} vs {expect}"))?;
            compared += 1;
        }
    }
    Ok(compared)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let (ops, op_worst) = op_suite()?;
    let (params, model_worst) = model_fd()?;
    let ste = ste_oracle()?;
    within_limit(start.elapsed(), 120.0, "gradient suite")?;
    Ok(format!(
        "{ops} ops (max rel {op_worst:.1e}), {params} toy-ViT parameters (max rel {model_worst:.1e}), {ste} STE gradients exact, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

// 5 ------------------------------------------------------------------------

fn quantization_error() -> Outcome {
    let mut r = rng(5);
    let mut worst = f64::NEG_INFINITY;
    for case in 0..1000 {
        let shape = [r.random_range(1..12), r.random_range(1..12)];
        let x = match case % 10 {
            0 => Tensor::full(&shape, r.random_range(-5.0..5.0)),
            1 => Tensor::uniform(&shape, 1e3, 1e3 + 1e-2, &mut r),
            _ => Tensor::randn(&shape, r.random_range(1e-3..50.0), &mut r),
        };
        let q = quantize_minmax8(&x).map_err(|e| e.to_string())?;
        let d = q.dequantize();
        let s = q.scale() as f64;
        for (&a, &b) in x.data().iter().zip(d.data()) {
            let err = (a as f64 - b as f64).abs();
            worst = worst.max(err - s / 2.0);
            ensure(err <= s / 2.0 + 1e-6, || {
                format!("case {case}: |{a} − {b}| = {err} > s/2 = {}", s / 2.0)
            })?;
        }
        let qc = quantize_minmax8_columns(&x).map_err(|e| e.to_string())?;
        let dc = qc.dequantize();
        let scales = qc.scales();
        for (i, (&a, &b)) in x.data().iter().zip(dc.data()).enumerate() {
            let s = scales[i % shape[1]] as f64;
            let err = (a as f64 - b as f64).abs();
            worst = worst.max(err - s / 2.0);
            ensure(err <= s / 2.0 + 1e-6, || {
                format!("case {case} per-column: error {err} > s/2 = {}", s / 2.0)
            })?;
        }
    }
    Ok(format!(
        "1000 tensors, per-tensor and per-column; max (error − s/2) = {worst:.1e}"
    ))
}

// 6 ------------------------------------------------------------------------

fn progressive_ordering() -> Outcome {
    let base = RunConfig::from_path(config_path("toy.toml")).map_err(|e| e.to_string())?;
    let mut pt_wins = 0;
    let mut lines = Vec::new();
    let mut problems = Vec::new();
    for seed in 1..=3u64 {
        let start = Instant::now();
        let mut cfg = base.clone();
        cfg.schedule.seed = seed;
        let ternvit_core::io::DataSource::Synthetic(spec) = &cfg.data else {
            return Err("toy config must use synthetic data".into());
        };
        let data = SyntheticSpec { seed, ..spec.clone() }
            .generate()
            .map_err(|e| e.to_string())?;
        let report =
            ablation_suite(&cfg.model, &cfg.quantization, &cfg.schedule, &data, None).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        if elapsed.as_secs_f64() > 300.0 {
            problems.push(format!("seed {seed} took {:.0}s", elapsed.as_secs_f64()));
        }
        for row in &report.rows {
            if row.loss_reduction() < 0.5 {
                problems.push(format!(
                    "seed {seed} {}: loss {:.4} -> {:.4} ({:.0}%)",
                    row.pipeline.label(),
                    row.initial_loss,
                    row.final_loss,
                    100.0 * row.loss_reduction()
                ));
            }
            if let Some(h) = &row.handoff {
                if !h.bit_exact() {
                    problems.push(format!(
                        "seed {seed} {}: handoff changed the latent weights",
                        row.pipeline.label()
                    ));
                }
            } else if row.pipeline.progressive() {
                problems.push(format!("seed {seed} {}: no handoff recorded", row.pipeline.label()));
            }
        }
        let acc = |p: Pipeline| report.row(p).map(|r| r.final_train_acc).unwrap_or(f64::NAN);
        let (cw_pt, lw) = (acc(Pipeline::ChannelWisePt), acc(Pipeline::LayerWise));
        if cw_pt >= lw {
            pt_wins += 1;
        }
        let min_red = report
            .rows
            .iter()
            .map(|r| r.loss_reduction())
            .fold(f64::INFINITY, f64::min);
        lines.push(format!(
            "seed {seed}: cw+PT {cw_pt:.3} vs lw {lw:.3}, min loss cut {:.0}%, {:.1}s",
            100.0 * min_red,
            elapsed.as_secs_f64()
        ));
    }
    if pt_wins < 2 {
        problems.push(format!("channel-wise + PT >= layer-wise in only {pt_wins}/3 seeds"));
    }
    let summary = format!("{} ({pt_wins}/3 ordered)", lines.join("; "));
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", problems.join("; ")))
    }
}

// 7 ------------------------------------------------------------------------

fn hessian() -> Outcome {
    let start = Instant::now();
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for case in 0..10 {
        let n = r.random_range(2..20);
        let mut eigs: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        eigs[0] = r.random_range(2.0..20.0);
        let q = spectral_quadratic(&eigs, &mut r);
        let theta: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let est = power_iteration(&q, &theta, 1000, 1e-10, case).map_err(|e| e.to_string())?;
        let rel = (est.eigenvalue - eigs[0]).abs() / eigs[0];
        worst = worst.max(rel);
        ensure(rel <= 0.01, || {
            format!("case {case}: {} vs {}", est.eigenvalue, eigs[0])
        })?;
    }

    let config = ViTConfig::toy();
    let model = VisionTransformer::new(config.clone(), &mut rng(70)).map_err(|e| e.to_string())?;
    let data = SyntheticSpec::new(70, 16, config.num_classes, config.image_size)
        .generate()
        .map_err(|e| e.to_string())?;
    let policy = config.policy(&PolicySpec::real32()).map_err(|e| e.to_string())?;
    let mut layers = Vec::new();
    for (id, _, _) in config.linear_shapes() {
        let h = hessian_top_eigenvalue(&model, &id, data.images(), data.labels(), &policy, 100, 1e-4, 7)
            .map_err(|e| e.to_string())?;
        ensure(h.eigenvalue.is_finite(), || format!("{id}: {h:?}"))?;
        layers.push((id, h));
    }
    let (pe, median) = patch_embed_vs_block_median(&layers).ok_or("no block layers")?;
    within_limit(start.elapsed(), 120.0, "hessian suite")?;
    Ok(format!(
        "10 quadratics within {:.2}%; toy ViT patch-embed λ {pe:.4} vs block median {median:.4} ({}), {:.1}s",
        100.0 * worst,
        if pe > median {
            "patch-embed higher"
        } else {
            "patch-embed not higher"
        },
        start.elapsed().as_secs_f64()
    ))
}

fn spectral_quadratic(eigs: &[f64], r: &mut ChaCha8Rng) -> Quadratic {
    let n = eigs.len();
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..n).map(|k| q[k][i] * eigs[k] * q[k][j]).sum();
        }
    }
    Quadratic { n, a }
}

// 8 ------------------------------------------------------------------------

fn landscape() -> Outcome {
    let config = ViTConfig::toy();
    let model = VisionTransformer::new(config.clone(), &mut rng(80)).map_err(|e| e.to_string())?;
    let data = SyntheticSpec::new(80, 8, config.num_classes, config.image_size)
        .generate()
        .map_err(|e| e.to_string())?;
    let before = model.parameter_digest();
    for spec in [PolicySpec::real32(), PolicySpec::ternary()] {
        let policy = config.policy(&spec).map_err(|e| e.to_string())?;
        let base = model
            .evaluate_batch(data.images(), data.labels(), &policy)
            .map_err(|e| e.to_string())?
            .loss;
        let grid =
            loss_landscape_2d(&model, data.images(), data.labels(), &policy, 7, 1.0, 8).map_err(|e| e.to_string())?;
        ensure(grid.center() == base, || {
            format!("center {} vs loss {base}", grid.center())
        })?;
    }
    ensure(model.parameter_digest() == before, || "model parameters changed".into())?;

    let mut r = rng(81);
    let q = spectral_quadratic(&[4.0, 2.0, 1.0, 0.5, 0.1], &mut r);
    let theta = [0.5, -0.25, 0.75, 0.1, -0.6];
    let grid = objective_landscape_2d(&q, &theta, 11, 2.0, 9).map_err(|e| e.to_string())?;
    ensure(grid.center() == q.loss(&theta).map_err(|e| e.to_string())?, || {
        "quadratic center".into()
    })?;
    let v = &grid.values;
    let n = grid.resolution();
    let (d2a, d2b) = (v[0][2] - 2.0 * v[0][1] + v[0][0], v[2][0] - 2.0 * v[1][0] + v[0][0]);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 1..n - 1 {
            worst = worst.max((v[i][j + 1] - 2.0 * v[i][j] + v[i][j - 1] - d2a).abs());
            worst = worst.max((v[j + 1][i] - 2.0 * v[j][i] + v[j - 1][i] - d2b).abs());
        }
    }
    ensure(worst < 1e-4, || format!("second differences vary by {worst:e}"))?;
    Ok(format!(
        "centers exact, parameters unchanged, quadratic second-difference spread {worst:.1e}"
    ))
}

// 9 ------------------------------------------------------------------------

fn serialization() -> Outcome {
    let e = |e: Error| e.to_string();
    let config = ViTConfig::toy();
    let model = VisionTransformer::new(config.clone(), &mut rng(90)).map_err(e)?;
    let mut dtypes = [false; 3];
    for ckpt in [
        Checkpoint::from_model(&model, None, None),
        Checkpoint::quantized(&model, &PolicySpec::ternary()).map_err(e)?,
    ] {
        let bytes = ckpt.to_bytes().map_err(e)?;
        let back = Checkpoint::from_bytes(&bytes, Some(&config)).map_err(e)?;
        ensure(back.to_bytes().map_err(e)? == bytes, || "save/load/save differs".into())?;
        for ((na, a), (nb, b)) in ckpt.tensors.iter().zip(&back.tensors) {
            dtypes[a.dtype() as usize] = true;
            let same = match (a, b) {
                (StoredTensor::Packed2(x), StoredTensor::Packed2(y)) => {
                    x.packed() == y.packed() && x.alpha() == y.alpha()
                }
                (StoredTensor::F32(x), StoredTensor::F32(y)) => {
                    x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
                }
                _ => a == b,
            };
            ensure(na == nb && same, || format!("tensor {na} differs after round trip"))?;
        }
        // truncation anywhere is a clean error
        for cut in (0..bytes.len()).step_by(bytes.len() / 50 + 1) {
            match Checkpoint::from_bytes(&bytes[..cut], None) {
                Err(Error::UnexpectedEof { .. }) => {}
                other => return Err(format!("truncation at {cut}: {:?}", other.map(|_| ()))),
            }
        }
        let mut bad = bytes.clone();
        bad[3] ^= 0xff;
        ensure(
            matches!(Checkpoint::from_bytes(&bad, None), Err(Error::Format(_))),
            || "bad magic accepted".into(),
        )?;
    }
    ensure(dtypes == [true; 3], || format!("dtypes covered {dtypes:?}"))?;
    let _ = Dtype::Packed2;

    #[rustfmt::skip]
    let images: Vec<u8> = vec![
        0, 0, 8, 3,  0, 0, 0, 2,  0, 0, 0, 3,  0, 0, 0, 3,
        0, 51, 102,  153, 204, 255,  10, 20, 30,
        255, 0, 255,  0, 255, 0,  5, 15, 25,
    ];
    let labels: Vec<u8> = vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 0];
    let d = idx_dataset(&images, &labels, Some(2)).map_err(e)?;
    let px = d.images().data();
    ensure(d.images().shape() == [2, 1, 3, 3], || "IDX shape".into())?;
    ensure(px[..6] == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], || {
        format!("IDX pixels {:?}", &px[..6])
    })?;
    ensure(px[6] == 10.0 / 255.0 && px[9] == 1.0 && px[10] == 0.0, || {
        "IDX pixels".into()
    })?;
    ensure(d.labels() == [1, 0], || "IDX labels".into())?;
    let mut wrong = labels.clone();
    wrong[3] = 3;
    let msg = idx_dataset(&images, &wrong, None)
        .map_err(|e| e.to_string())
        .unwrap_err();
    ensure(msg.contains("0x00000803"), || format!("magic not named: {msg}"))?;
    ensure(
        matches!(
            idx_dataset(&images[..images.len() - 2], &labels, None),
            Err(Error::UnexpectedEof { .. })
        ),
        || "truncated IDX accepted".into(),
    )?;
    Ok("f32/u8/packed2 bit-exact, save-load-save identical, truncation and magic corruption rejected, IDX fixture exact".into())
}

// 10 -----------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("ternvit-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let mut traces = Vec::new();
    for i in 0..2 {
        let trace = dir.join(format!("trace{i}.csv"));
        let out = Command::new(env!("CARGO_BIN_EXE_ternvit"))
            .args(["progressive", "--config"])
            .arg(config_path("toy.toml"))
            .arg("--out")
            .arg(dir.join(format!("model{i}.ckpt")))
            .arg("--trace")
            .arg(&trace)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            String::from_utf8_lossy(&out.stderr).to_string()
        })?;
        traces.push(std::fs::read(&trace).map_err(|e| e.to_string())?);
    }
    let _ = std::fs::remove_dir_all(&dir);
    ensure(traces[0] == traces[1], || "loss traces differ".into())?;
    let rows = traces[0].iter().filter(|&&b| b == b'\n').count() - 1;
    Ok(format!("two progressive runs, {rows}-row traces byte-identical"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("model size", model_size),
        ("ternarization", ternarization),
        ("kernel oracle", kernel_oracle),
        ("gradient suite", gradient_suite),
        ("8-bit error bound", quantization_error),
        ("progressive ordering", progressive_ordering),
        ("hessian oracle", hessian),
        ("loss landscape", landscape),
        ("serialization", serialization),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("[{:02}] {name}: PASS - {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[{:02}] {name}: FAIL - {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn grad(t: &Tensor) -> Tensor {
    t.clone().with_requires_grad(true)
}
