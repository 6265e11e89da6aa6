use std::path::{Path, PathBuf};
use std::time::Duration;

use flowreg::data::{
    generate_pairs, read_cloud, read_dataset, read_trajectory, sample_shape, write_dataset, write_trajectory,
    pose_row, derive_seed, make_pair, DatasetSpec, PerturbationSpec, ShapeFamily, ShapeSpec,
};
use flowreg::diagnostics::{gradient_suite, SUITE_TOLERANCE};
use flowreg::evaluation::{
    accumulate_odometry, evaluate_pairs, export_noise_sweep, export_report, kitti_segment_errors, IcpMethod,
    IdentityMethod, OracleMethod, RegistrationMethod, SweepEntry, Trajectory,
};
use flowreg::icp::{IcpConfig, IcpVariant};
use flowreg::network::{Model, ModelConfig, OdometryRunner};
use flowreg::training::{self, write_loss_history, TrainManifest, TrainOptions};
use serde::Serialize;

use crate::error::{usage, CliError};
use crate::manifest::{create_dir, sidecar, write_text, RunManifest};
use crate::{
    BenchArgs, ConfigPreset, EvaluateArgs, Family, GenDataArgs, GradcheckArgs, MethodArgs, MethodKind,
    OdometryArgs, PerturbationPreset, RegisterArgs, TrainArgs,
};

pub const THREADS_ENV: &str = "FLOWREG_THREADS";

fn shape_family(f: Family, k: f64) -> ShapeFamily {
    match f {
        Family::Sphere => ShapeFamily::Sphere { radius: 0.5 * k },
        Family::Box => ShapeFamily::Box {
            size: [1.0 * k, 0.6 * k, 0.3 * k],
        },
        Family::Cylinder => ShapeFamily::Cylinder {
            radius: 0.3 * k,
            height: 1.0 * k,
        },
        Family::Torus => ShapeFamily::Torus {
            major: 0.4 * k,
            minor: 0.15 * k,
        },
        Family::Plane => ShapeFamily::Plane {
            width: 1.0 * k,
            depth: 1.0 * k,
        },
    }
}

fn dataset_spec(a: &GenDataArgs) -> Result<DatasetSpec, CliError> {
    if let Some(path) = &a.spec {
        let text = std::fs::read_to_string(path).map_err(|e| flowreg::Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        return toml::from_str(&text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(1);
            CliError::Core(flowreg::Error::Parse {
                source_name: path.display().to_string(),
                line,
                detail: e.message().to_string(),
            })
        });
    }
    let mut perturbation = match a.preset {
        PerturbationPreset::Modelnet => PerturbationSpec::modelnet(),
        PerturbationPreset::Kitti => PerturbationSpec::kitti(),
        PerturbationPreset::None => PerturbationSpec::none(),
    };
    if a.translation_max_units.is_some() || a.rotation_max_deg.is_some() {
        match &mut perturbation {
            PerturbationSpec::Uniform {
                translation,
                rotation_deg,
                ..
            } => {
                if let Some(t) = a.translation_max_units {
                    translation[1] = t;
                }
                if let Some(r) = a.rotation_max_deg {
                    rotation_deg[1] = r;
                }
            }
            PerturbationSpec::GaussianEuler { .. } => {
                return Err(usage("range flags apply to the modelnet and none presets only"));
            }
        }
    }
    if let Some(s) = a.noise_std_units {
        perturbation = perturbation.with_noise(s);
    }
    let shapes = a
        .shapes
        .iter()
        .map(|&f| ShapeSpec {
            family: shape_family(f, a.scale_units),
            n_points: a.points,
            with_normals: a.normals,
        })
        .collect();
    Ok(DatasetSpec {
        shapes,
        perturbation,
        pairs_per_shape: a.pairs_per_shape,
        seed: a.seed,
        augment: a.augment,
    })
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let spec = dataset_spec(&a)?;
    let pairs = generate_pairs(&spec)?;
    let manifest_path = write_dataset(&pairs, Some(&spec), &a.out)?;
    let mut run = RunManifest::new("gen-data", Some(spec.seed), &spec).output(&manifest_path);
    if let Some(p) = &a.spec {
        run = run.input(p);
    }
    run.write(&a.out.join("run_manifest.json"))?;
    println!("pairs {}", pairs.len());
    println!("manifest {}", manifest_path.display());
    Ok(())
}

fn env_threads() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .map(Some)
            .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let manifest = TrainManifest::load(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let mut config = manifest.train.clone();
    if let Some(n) = a.max_steps {
        config.max_steps = Some(n);
    }
    if let Some(n) = a.threads.or(env_threads()?) {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        config.threads = n;
    }
    let dataset_path = base.join(&manifest.dataset);
    let dataset = read_dataset(&dataset_path)?;
    let init = match &manifest.init_checkpoint {
        Some(p) => Some(Model::load_checkpoint(base.join(p))?.into_params()),
        None => None,
    };
    create_dir(&a.out)?;
    let mut on_step = |r: &training::LossRecord| {
        if r.step % 100 == 0 {
            eprintln!("step {} L {:.6e} L_real {:.6e} L_dual {:.6e}", r.step, r.l, r.l_real, r.l_dual);
        }
    };
    let outcome = training::train(
        &dataset.pairs,
        &config,
        TrainOptions {
            checkpoint_dir: Some(&a.out),
            init,
            on_step: Some(&mut on_step),
        },
    )?;
    let checkpoint = a.out.join("checkpoint.json");
    outcome.model.save_checkpoint(&checkpoint)?;
    let history = a.out.join("loss_history.csv");
    write_loss_history(&outcome.history, &history)?;
    let mut run = RunManifest::new("train", Some(config.seed), &config)
        .input(&a.manifest)
        .input(&dataset_path)
        .output(&checkpoint)
        .output(&history);
    for c in &outcome.checkpoints {
        run = run.output(c);
    }
    run.write(&a.out.join("run_manifest.json"))?;
    println!("steps {}", outcome.history.len());
    if let Some(last) = outcome.history.last() {
        println!("final_loss {:?}", last.l);
    }
    println!("checkpoint {}", checkpoint.display());
    Ok(())
}

enum Method {
    Network(Model),
    Icp(IcpMethod),
    Identity,
    Oracle,
}

impl Method {
    fn as_dyn(&self) -> &dyn RegistrationMethod {
        match self {
            Method::Network(m) => m,
            Method::Icp(m) => m,
            Method::Identity => &IdentityMethod,
            Method::Oracle => &OracleMethod,
        }
    }

    fn config(&self) -> serde_json::Value {
        match self {
            Method::Network(m) => serde_json::json!({
                "model": m.config(),
                "fingerprint": m.fingerprint(),
            }),
            Method::Icp(m) => serde_json::to_value(m.config).expect("config serializes"),
            Method::Identity | Method::Oracle => serde_json::Value::Null,
        }
    }
}

fn build_method(kind: MethodKind, a: &MethodArgs) -> Result<Method, CliError> {
    let icp = |variant| -> Result<Method, CliError> {
        let d = a
            .icp_max_dist_units
            .ok_or_else(|| usage("icp methods need --icp-max-dist-units"))?;
        let mut config = IcpConfig::new(variant, d);
        config.max_iterations = a.icp_max_iterations;
        config.validate()?;
        Ok(Method::Icp(IcpMethod { config }))
    };
    match kind {
        MethodKind::Network => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| usage("the network method needs --checkpoint"))?;
            Ok(Method::Network(Model::load_checkpoint(path)?))
        }
        MethodKind::IcpPoint2point => icp(IcpVariant::PointToPoint),
        MethodKind::IcpPoint2plane => icp(IcpVariant::PointToPlane),
        MethodKind::Identity => Ok(Method::Identity),
        MethodKind::Oracle => Ok(Method::Oracle),
    }
}

pub fn register(a: RegisterArgs) -> Result<(), CliError> {
    if a.method == MethodKind::Oracle {
        return Err(usage("the oracle method needs labelled pairs; use evaluate"));
    }
    let method = build_method(a.method, &a.method_args)?;
    let template = read_cloud(&a.template)?;
    let source = read_cloud(&a.source)?;
    let start = std::time::Instant::now();
    let t = method.as_dyn().register(&template, &source)?;
    let elapsed = start.elapsed().as_secs_f64();
    let row = pose_row(&t);
    println!("{row}");
    println!("time_s {elapsed:?}");
    if let Some(out) = &a.out {
        write_text(out, &format!("{row}\n"))?;
        let mut run = RunManifest::new("register", None, method.config())
            .input(&a.template)
            .input(&a.source)
            .output(out);
        if let Some(c) = &a.method_args.checkpoint {
            run = run.input(c);
        }
        run.write(&sidecar(out))?;
    }
    Ok(())
}

fn scan_paths(a: &OdometryArgs) -> Result<Vec<PathBuf>, CliError> {
    let Some(list) = &a.scan_list else {
        return Ok(a.scans.clone());
    };
    let text = std::fs::read_to_string(list).map_err(|e| flowreg::Error::Io {
        path: list.display().to_string(),
        source: e,
    })?;
    let base = list.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

pub fn odometry(a: OdometryArgs) -> Result<(), CliError> {
    let paths = scan_paths(&a)?;
    if paths.len() < 2 {
        return Err(usage("odometry needs at least two scans"));
    }
    let model = Model::load_checkpoint(&a.checkpoint)?;
    model.reset_counters();
    let mut runner = OdometryRunner::new(&model);
    let mut relative = Vec::with_capacity(paths.len() - 1);
    for p in &paths {
        let scan = read_cloud(p)?;
        if let Some(pred) = runner.push(&scan)? {
            relative.push(pred.transform);
        }
    }
    let trajectory = accumulate_odometry(&relative);
    write_trajectory(trajectory.poses(), &a.out)?;
    let sa = model.sa_invocations();
    eprintln!("set abstractions {sa} for {} scans", paths.len());
    println!("poses {}", trajectory.len());
    println!("set_abstractions {sa}");
    let mut run = RunManifest::new(
        "odometry",
        None,
        serde_json::json!({
            "model": model.config(),
            "fingerprint": model.fingerprint(),
            "set_abstractions": sa,
        }),
    )
    .input(&a.checkpoint);
    for p in &paths {
        run = run.input(p);
    }
    run.output(&a.out).write(&sidecar(&a.out))
}

fn method_file_name(name: &str) -> String {
    name.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_")
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    create_dir(&a.out)?;
    if let (Some(gt), Some(pred)) = (&a.gt_trajectory, &a.pred_trajectory) {
        return evaluate_trajectories(gt, pred, &a.out);
    }
    let dataset_path = a.dataset.as_ref().expect("clap enforces one input");
    let methods = a
        .methods
        .iter()
        .map(|&k| build_method(k, &a.method_args))
        .collect::<Result<Vec<_>, _>>()?;
    let dataset = read_dataset(dataset_path)?;
    let mut run = RunManifest::new(
        "evaluate",
        None,
        methods.iter().map(|m| (m.as_dyn().name(), m.config())).collect::<Vec<_>>(),
    )
    .input(dataset_path);
    for m in &methods {
        let report = evaluate_pairs(m.as_dyn(), &dataset.pairs);
        let stem = method_file_name(&report.method);
        let csv = a.out.join(format!("report_{stem}.csv"));
        export_report(&report, &csv)?;
        let summary = a.out.join(format!("summary_{stem}.json"));
        write_text(&summary, &(report.summary_json() + "\n"))?;
        let agg = report.aggregates();
        println!(
            "{} pairs {} failed {} t_mean {:.6} r_mean_deg {:.6} t_rmse {:.6} r_rmse_deg {:.6}",
            report.method, agg.pairs, agg.failed, agg.t_mean, agg.r_mean, agg.t_rmse, agg.r_rmse
        );
        run = run.output(&csv).output(&summary);
    }
    if !a.noise_sweep_units.is_empty() {
        let spec = read_dataset_spec(dataset_path)?;
        let mut entries = Vec::new();
        for &sigma in &a.noise_sweep_units {
            let spec = DatasetSpec {
                perturbation: spec.perturbation.with_noise(sigma),
                ..spec.clone()
            };
            let pairs = generate_pairs(&spec)?;
            for m in &methods {
                entries.push(SweepEntry {
                    noise_std: sigma,
                    report: evaluate_pairs(m.as_dyn(), &pairs),
                });
            }
        }
        let sweep = a.out.join("noise_sweep.csv");
        export_noise_sweep(&entries, &sweep)?;
        println!("noise_sweep {}", sweep.display());
        run = run.output(&sweep);
    }
    run.write(&a.out.join("run_manifest.json"))
}

/// The generation recipe stored in a dataset manifest.
fn read_dataset_spec(path: &Path) -> Result<DatasetSpec, CliError> {
    let manifest = if path.is_dir() {
        path.join(flowreg::data::MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&manifest).map_err(|e| flowreg::Error::Io {
        path: manifest.display().to_string(),
        source: e,
    })?;
    let parsed: flowreg::data::DatasetManifest = toml::from_str(&text).map_err(|e| flowreg::Error::Parse {
        source_name: manifest.display().to_string(),
        line: 1,
        detail: e.message().to_string(),
    })?;
    parsed
        .spec
        .ok_or_else(|| usage("the noise sweep needs a dataset generated by gen-data (manifest has no spec)"))
}

fn evaluate_trajectories(gt: &Path, pred: &Path, out: &Path) -> Result<(), CliError> {
    let g = Trajectory::new(read_trajectory(gt)?)?;
    let p = Trajectory::new(read_trajectory(pred)?)?;
    let errors = kitti_segment_errors(&g, &p)?;
    let path = out.join("segment_errors.json");
    let text = serde_json::to_string_pretty(&errors).expect("errors serialize") + "\n";
    write_text(&path, &text)?;
    match errors {
        Some(e) => println!(
            "translation_pct {:.6} rotation_deg_per_100m {:.6} segments {}",
            e.translation_pct, e.rotation_deg_per_100m, e.segments
        ),
        None => println!("no segment fits the trajectory"),
    }
    RunManifest::new("evaluate", None, serde_json::Value::Null)
        .input(gt)
        .input(pred)
        .output(&path)
        .write(&out.join("run_manifest.json"))
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let cases = gradient_suite(a.seed)?;
    let mut failed = 0;
    for c in &cases {
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!("{verdict} {} rel_err {:.3e} inputs {}", c.name, c.max_relative_error, c.inputs);
    }
    println!("tolerance {SUITE_TOLERANCE:e}");
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&cases).expect("cases serialize") + "\n";
        write_text(out, &text)?;
        RunManifest::new("gradcheck", Some(a.seed), serde_json::json!({ "tolerance": SUITE_TOLERANCE }))
            .output(out)
            .write(&sidecar(out))?;
    }
    if failed > 0 {
        return Err(CliError::GradcheckFailed {
            failed,
            total: cases.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct StageStats {
    mean_ms: f64,
    max_ms: f64,
}

impl StageStats {
    fn of(d: &[Duration]) -> Self {
        let ms: Vec<f64> = d.iter().map(|x| x.as_secs_f64() * 1e3).collect();
        Self {
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            max_ms: ms.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Serialize)]
struct BenchReport {
    runs: usize,
    points: usize,
    set_abstraction: StageStats,
    flow_embedding: StageStats,
    head: StageStats,
    total: StageStats,
}

pub fn bench(a: BenchArgs) -> Result<(), CliError> {
    if a.runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let model = match &a.checkpoint {
        Some(p) => Model::load_checkpoint(p)?,
        None => {
            let config = match a.preset {
                ConfigPreset::Toy => ModelConfig::toy(),
                ConfigPreset::Compact => ModelConfig::compact(),
                ConfigPreset::Modelnet => ModelConfig::modelnet(),
                ConfigPreset::Kitti => ModelConfig::kitti(),
            };
            Model::init(config, a.seed)?
        }
    };
    let features = model.config().input_features;
    let shape = ShapeSpec {
        family: ShapeFamily::Box { size: [1.0, 0.6, 0.3] },
        n_points: a.points,
        with_normals: features == 3,
    };
    if features != 0 && features != 3 {
        return Err(usage("bench generates clouds without features or with normals only"));
    }
    let (mut sa, mut fe, mut head, mut total) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in 0..a.runs as u64 {
        let seed = derive_seed(a.seed, r);
        let pair = make_pair(&sample_shape(&shape, seed), &PerturbationSpec::modelnet(), seed);
        let (_, times) = model.forward_timed(&pair.template, &pair.source)?;
        sa.push(times.set_abstraction);
        fe.push(times.flow_embedding);
        head.push(times.head);
        total.push(times.set_abstraction + times.flow_embedding + times.head);
    }
    let report = BenchReport {
        runs: a.runs,
        points: a.points,
        set_abstraction: StageStats::of(&sa),
        flow_embedding: StageStats::of(&fe),
        head: StageStats::of(&head),
        total: StageStats::of(&total),
    };
    for (name, s) in [
        ("set_abstraction", &report.set_abstraction),
        ("flow_embedding", &report.flow_embedding),
        ("head", &report.head),
        ("total", &report.total),
    ] {
        println!("{name} mean_ms {:.3} max_ms {:.3}", s.mean_ms, s.max_ms);
    }
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        write_text(out, &text)?;
        RunManifest::new("bench", Some(a.seed), model.config())
            .output(out)
            .write(&sidecar(out))?;
    }
    Ok(())
}
