use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ternvit_core::data::Dataset;
use ternvit_core::diagnostics::{
    hessian_top_eigenvalue, loss_landscape_2d, patch_embed_vs_block_median, DiagnosticsReport,
};
use ternvit_core::io::{Checkpoint, RunConfig};
use ternvit_core::kernels::{bench, model_gemm_shapes, KernelKind, PackedGemmPlan, CSV_HEADER};
use ternvit_core::model::model_size_bytes;
use ternvit_core::quantization::policy::WeightBits;
use ternvit_core::training::{
    ablation_suite, evaluate, format_ablation_table, format_split_table, pipeline_model, pretrain, progressive_train,
    split_sweep, trace_csv, train_phase,
};
use ternvit_core::{Error, PolicySpec, Result, ViTConfig, VisionTransformer};

use crate::args::*;

const DEFAULT_SEED: u64 = 42;

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train(a) => train(a, seed),
        Command::Progressive(a) => progressive(a, seed),
        Command::Ablate(a) => ablate(a, seed),
        Command::Eval(a) => eval(a),
        Command::Quantize(a) => quantize(a),
        Command::Size(a) => size(a),
        Command::Diagnose(a) => diagnose(a, seed.unwrap_or(DEFAULT_SEED)),
        Command::Landscape(a) => landscape(a, seed.unwrap_or(DEFAULT_SEED)),
        Command::Bench(a) => bench_cmd(a, seed.unwrap_or(DEFAULT_SEED)),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.schedule.seed = s;
    }
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

/// Preset name or a TOML file holding a `[quantization]`-style table.
fn resolve_policy(name: &str) -> Result<PolicySpec> {
    if let Some(p) = PolicySpec::preset(name) {
        return Ok(p);
    }
    let path = Path::new(name);
    if !path.is_file() {
        return Err(Error::config(
            "policy",
            format!("`{name}` is neither a preset (real32, int8, ternary, ternary-layerwise, ternary-all) nor a file"),
        ));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::config("policy", e.message().trim().to_string()))
}

fn checkpoint_policy(ckpt: &Checkpoint, flag: Option<&str>) -> Result<PolicySpec> {
    match flag {
        Some(name) => resolve_policy(name),
        None => Ok(ckpt.policy.clone().unwrap_or_else(PolicySpec::real32)),
    }
}

fn mode_policy(mode: Mode, cfg: &RunConfig) -> PolicySpec {
    match mode {
        Mode::Real32 => PolicySpec::real32(),
        Mode::Int8 => PolicySpec::int8(),
        Mode::Ternary => PolicySpec {
            body_bits: WeightBits::Ternary,
            ..cfg.quantization.clone()
        },
    }
}

fn report_trace(label: &str, rows: &[ternvit_core::training::TraceRow]) {
    for r in rows {
        let eval = r.eval_acc.map(|a| format!(" eval_acc {a:.4}")).unwrap_or_default();
        eprintln!(
            "[{label}] {} epoch {:>3}: loss {:.5} acc {:.4}{eval}",
            r.phase, r.epoch, r.train_loss, r.train_acc
        );
    }
}

fn fresh_model(config: &ViTConfig, seed: u64) -> Result<VisionTransformer> {
    VisionTransformer::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(seed))
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let spec = mode_policy(a.mode, &cfg);
    let policy = cfg.model.policy(&spec)?;
    let (data, eval) = cfg.load_data()?;
    let mut model = fresh_model(&cfg.model, cfg.schedule.seed)?;
    let mut trace = Vec::new();
    if a.mode != Mode::Real32 {
        eprintln!("pretraining for {} epochs", cfg.schedule.pretrain_epochs);
        trace.extend(pretrain(&mut model, &cfg.schedule, &data, eval.as_ref())?);
    }
    let label = match a.mode {
        Mode::Real32 => "real32",
        Mode::Int8 => "int8",
        Mode::Ternary => "ternary",
    };
    eprintln!("training {label} for {} epochs", cfg.schedule.total_epochs());
    trace.extend(train_phase(
        &mut model,
        &policy,
        label,
        &cfg.schedule,
        &data,
        eval.as_ref(),
    )?);
    report_trace("train", &trace);
    if cfg.quantization.calibration == ternvit_core::quantization::Calibration::Frozen {
        model.calibrate(data.images(), &policy)?;
    }
    Checkpoint::from_model(&model, Some(&spec), None).save(&a.out)?;
    emit(a.trace.as_deref(), &trace_csv(&trace))
}

fn progressive(a: ProgressiveArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let target = cfg.policy()?;
    let (data, eval) = cfg.load_data()?;
    eprintln!("pretraining for {} epochs", cfg.schedule.pretrain_epochs);
    let (mut model, mut trace) = pipeline_model(&cfg.model, &cfg.schedule, &data, eval.as_ref())?;
    eprintln!(
        "progressive training: {} 8-bit + {} ternary epochs",
        cfg.schedule.phase_a_epochs, cfg.schedule.phase_b_epochs
    );
    let out = progressive_train(&mut model, &target, &cfg.schedule, &data, eval.as_ref())?;
    trace.extend(out.trace());
    report_trace("progressive", &trace);
    if let Some(h) = &out.handoff {
        eprintln!(
            "handoff: latent weights {} across phases, loss {:.5} -> {:.5}",
            if h.bit_exact() { "identical" } else { "CHANGED" },
            h.loss_before,
            h.loss_after
        );
    }
    if cfg.quantization.calibration == ternvit_core::quantization::Calibration::Frozen {
        model.calibrate(data.images(), &target)?;
    }
    Checkpoint::from_model(&model, Some(&cfg.quantization), Some(&out.optimizer)).save(&a.out)?;
    emit(a.trace.as_deref(), &trace_csv(&trace))
}

fn parse_splits(raw: &[String]) -> Result<Vec<(usize, usize)>> {
    raw.iter()
        .map(|s| {
            let parse = |v: Option<&str>| v.and_then(|x| x.trim().parse::<usize>().ok());
            let mut it = s.split(':');
            match (parse(it.next()), parse(it.next()), it.next()) {
                (Some(a), Some(b), None) => Ok((a, b)),
                _ => Err(Error::config("splits", format!("`{s}` is not of the form A:B"))),
            }
        })
        .collect()
}

fn ablate(a: AblateArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let splits = parse_splits(&a.splits)?;
    let (data, eval) = cfg.load_data()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    eprintln!("running {} pipelines", ternvit_core::training::Pipeline::ALL.len());
    let report = ablation_suite(&cfg.model, &cfg.quantization, &cfg.schedule, &data, eval.as_ref())?;
    let table = format_ablation_table(&report);
    write_file(&a.out.join("ablation.csv"), &table)?;
    write_file(&a.out.join("pretrain_trace.csv"), trace_csv(&report.pretrain))?;
    for r in &report.rows {
        let name = r.pipeline.label().replace(" + PT", "_pt").replace('-', "_");
        write_file(&a.out.join(format!("trace_{name}.csv")), trace_csv(&r.trace))?;
    }
    print!("{table}");
    if !splits.is_empty() {
        eprintln!("running split sweep over {} splits", splits.len());
        let rows = split_sweep(
            &cfg.model,
            &cfg.quantization,
            &cfg.schedule,
            &splits,
            &data,
            eval.as_ref(),
        )?;
        let table = format_split_table(&rows);
        write_file(&a.out.join("splits.csv"), &table)?;
        print!("\n{table}");
    }
    Ok(())
}

fn source_data(path: &Path, config: &ViTConfig, split: Split) -> Result<(Dataset, usize)> {
    let src = RunConfig::from_path(path)?;
    let (train, eval) = src.data.load(config.num_classes)?;
    let data = match split {
        Split::Train => train,
        Split::Eval => eval.ok_or_else(|| Error::config("data", "the source has no eval split"))?,
    };
    let want = [config.in_channels, config.image_size, config.image_size];
    if data.image_shape() != want {
        return Err(Error::config(
            "data",
            format!(
                "images are {:?} but the checkpoint expects {want:?}",
                data.image_shape()
            ),
        ));
    }
    Ok((data, src.schedule.batch_size))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt, None)?;
    let spec = checkpoint_policy(&ckpt, a.policy.as_deref())?;
    let policy = ckpt.config.policy(&spec)?;
    let model = ckpt.to_model()?;
    let (data, batch) = source_data(&a.data, &ckpt.config, a.split)?;
    let (loss, acc) = evaluate(&model, &policy, &data, batch)?;
    println!("samples,loss,accuracy");
    println!("{},{loss:.6},{acc:.6}", data.len());
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let spec = resolve_policy(&a.policy)?;
    let ckpt = Checkpoint::load(&a.ckpt, None)?;
    let model = ckpt.to_model()?;
    let out = Checkpoint::quantized(&model, &spec)?;
    out.save(&a.out)?;
    let bytes = |c: &Checkpoint| c.to_bytes().map(|b| b.len());
    println!("input_bytes,output_bytes");
    println!("{},{}", bytes(&ckpt)?, bytes(&out)?);
    Ok(())
}

fn size(a: SizeArgs) -> Result<()> {
    let cfg = RunConfig::from_path(&a.config)?;
    let spec = match &a.policy {
        Some(p) => resolve_policy(p)?,
        None => cfg.quantization.clone(),
    };
    let r = model_size_bytes(&cfg.model, &spec)?;
    println!("parameters: {}", r.parameters);
    println!("real-valued: {:.1} MB", r.real_mb());
    println!("quantized: {:.2} MB", r.nominal_mb());
    println!("compression: {:.2}x", r.compression_ratio);
    println!("storage: {:.2} MB ({:.2}x)", r.storage_mb(), r.storage_ratio);
    Ok(())
}

fn batch_of(path: &Path, config: &ViTConfig, n: usize) -> Result<(ternvit_core::Tensor, Vec<usize>)> {
    if n == 0 {
        return Err(Error::config("batch", "must be at least 1"));
    }
    let (data, _) = source_data(path, config, Split::Train)?;
    Ok(data.head(n))
}

fn diagnose(a: DiagnoseArgs, seed: u64) -> Result<()> {
    if a.hessian && a.data.is_none() {
        return Err(Error::config("data", "--hessian needs --data"));
    }
    let ckpt = Checkpoint::load(&a.ckpt, None)?;
    let model = ckpt.to_model()?;
    let reference = match &a.reference {
        Some(p) => Some(Checkpoint::load(p, Some(&ckpt.config))?.to_model()?),
        None => None,
    };
    let mut report = DiagnosticsReport::weight_stats(&model, reference.as_ref())?;
    if a.hessian {
        let policy = ckpt.config.policy(&checkpoint_policy(&ckpt, None)?)?;
        let (x, y) = batch_of(a.data.as_deref().expect("checked above"), &ckpt.config, a.batch)?;
        for (id, _, _) in ckpt.config.linear_shapes() {
            eprintln!("hessian: {id}");
            let h = hessian_top_eigenvalue(&model, &id, &x, &y, &policy, a.iters, a.tol, seed)?;
            report.hessian.push((id, h));
        }
    }
    let mut summary = report.sdam_csv();
    if let Some((pe, median)) = patch_embed_vs_block_median(&report.hessian) {
        summary.push('\n');
        summary.push_str(&report.hessian_csv());
        let _ = writeln!(
            summary,
            "\npatch_embed_eigenvalue,block_median_eigenvalue\n{pe},{median}"
        );
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("cam.csv"), report.cam_csv())?;
        write_file(&dir.join("sdam.csv"), report.sdam_csv())?;
        if a.hessian {
            write_file(&dir.join("hessian.csv"), report.hessian_csv())?;
        }
    }
    print!("{summary}");
    Ok(())
}

fn landscape(a: LandscapeArgs, seed: u64) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt, None)?;
    let spec = checkpoint_policy(&ckpt, a.policy.as_deref())?;
    let policy = ckpt.config.policy(&spec)?;
    let model = ckpt.to_model()?;
    let (x, y) = batch_of(&a.data, &ckpt.config, a.batch)?;
    eprintln!("evaluating {}x{} grid", a.resolution, a.resolution);
    let grid = loss_landscape_2d(&model, &x, &y, &policy, a.resolution, a.span, seed)?;
    emit(a.out.as_deref(), &grid.to_csv())
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config("shapes", format!("`{s}` is not MxKxN")))?;
    match dims[..] {
        [m, k, n] => Ok((m, k, n)),
        _ => Err(Error::config("shapes", format!("`{s}` is not MxKxN"))),
    }
}

fn bench_cmd(a: BenchArgs, seed: u64) -> Result<()> {
    let kernels: Vec<KernelKind> = if a.kernels.is_empty() {
        KernelKind::ALL.to_vec()
    } else {
        a.kernels
            .iter()
            .map(|k| {
                KernelKind::ALL
                    .into_iter()
                    .find(|c| c.to_string() == k.trim())
                    .ok_or_else(|| Error::config("kernels", format!("unknown kernel `{k}`")))
            })
            .collect::<Result<_>>()?
    };
    let shapes = match &a.model {
        Some(p) => model_gemm_shapes(&RunConfig::from_path(p)?.model, a.batch),
        None => a.shapes.iter().map(|s| parse_shape(s)).collect::<Result<_>>()?,
    };
    let mut plans = Vec::new();
    for &(m, k, n) in &shapes {
        for &kernel in &kernels {
            plans.push(PackedGemmPlan {
                seed,
                ..PackedGemmPlan::new(m, k, n, kernel)?
            });
        }
    }
    if a.reps == 0 {
        return Err(Error::config("reps", "must be at least 1"));
    }
    println!("{CSV_HEADER}");
    for plan in &plans {
        eprintln!("bench {}x{}x{} {}", plan.m, plan.k, plan.n, plan.kernel);
        println!("{}", bench(plan, a.reps)?);
    }
    Ok(())
}
