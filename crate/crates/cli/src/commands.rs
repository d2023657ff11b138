use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::json;
use topoflow::blockworld::{fusion_system, script_demo, Episode, Observation, TaskId, TokenType, N_TYPES};
use topoflow::checkpoint::Checkpoint;
use topoflow::flow::{integrate, IntegratorSpec, Method};
use topoflow::fusion::FusionSystem;
use topoflow::topomask::{build_mask, TopoMask};
use topoflow::trainer::{self, sample_sequence, TaskMetrics, TrainReport, Trained, Trainer, Variant, MASK_TOL};
use topoflow::{Rng, Tensor};

use crate::config::RunConfig;
use crate::output::{csv_bytes, json_bytes, InputRef, Provenance, Staged};
use crate::render as rnd;
use crate::Failure;

type Res = Result<(), Failure>;

pub fn parse_variant(s: &str) -> Result<Variant, Failure> {
    match s.to_ascii_lowercase().as_str() {
        "full" => Ok(Variant::Full),
        "nt" => Ok(Variant::NoTopology),
        "nh" => Ok(Variant::NoHierarchy),
        _ => Err(Failure::Usage(format!("variant must be full, nt or nh, got `{s}`"))),
    }
}

fn read_input(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_dataset(path: &Path) -> anyhow::Result<(Vec<Episode>, Vec<u8>)> {
    let bytes = read_input(path)?;
    let text = std::str::from_utf8(&bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
    let eps = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}: bad episode", path.display(), i + 1)))
        .collect::<anyhow::Result<Vec<Episode>>>()?;
    if eps.is_empty() {
        return Err(anyhow!("{}: no episodes", path.display()));
    }
    Ok((eps, bytes))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(Checkpoint, InputRef)> {
    let bytes = read_input(path)?;
    let ck = Checkpoint::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok((ck, InputRef::new("checkpoint", path, &bytes)))
}

fn commit(staged: Staged) -> Res {
    for p in staged.commit()? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> Res {
    cfg.model.validate()?;
    let shape = cfg.shape();
    let mut lines = String::new();
    let mut counts = vec![0usize; cfg.tasks.len()];
    for i in 0..cfg.n {
        let t = i % cfg.tasks.len();
        let mut rng = Rng::stream(cfg.seed, i as u64);
        let ep = script_demo(cfg.tasks[t], &mut rng, cfg.jitter, shape)?;
        lines.push_str(&serde_json::to_string(&ep).map_err(anyhow::Error::from)?);
        lines.push('\n');
        counts[t] += 1;
    }
    let prov = Provenance::new("gen-data", cfg);
    let mix: serde_json::Map<String, serde_json::Value> =
        cfg.tasks.iter().zip(&counts).map(|(t, c)| (t.name().to_string(), json!(c))).collect();
    let data_path = cfg.out.join("dataset.jsonl");
    let manifest = json!({
        "provenance": prov.to_json(),
        "dataset": InputRef::new("dataset", &data_path, lines.as_bytes()),
        "schema_version": topoflow::blockworld::EPISODE_SCHEMA_VERSION,
        "seed": cfg.seed,
        "episodes": cfg.n,
        "task_mix": mix,
        "shape": shape,
        "jitter": cfg.jitter,
    });
    let mut staged = Staged::default();
    staged.add(data_path, lines.into_bytes());
    staged.add(cfg.out.join("manifest.json"), json_bytes(&manifest)?);
    commit(staged)
}

fn checkpoint_of(t: &Trained, prov: &Provenance, variant: Variant) -> Checkpoint {
    Checkpoint {
        model: t.model.clone(),
        params: t.params.clone(),
        mask: t.mask.clone(),
        fusion: t.fusion.clone(),
        meta: json!({ "variant": variant.label(), "provenance": prov.to_json() }),
    }
}

fn loss_curve_rows(report: &TrainReport) -> Vec<Vec<String>> {
    report
        .epochs
        .iter()
        .map(|e| {
            let l = &e.loss;
            vec![
                e.epoch.to_string(),
                l.flow.to_string(),
                l.task.to_string(),
                l.smooth.to_string(),
                l.topo.to_string(),
                l.total.to_string(),
                e.mask_residual.to_string(),
                e.grad_norm_mean.to_string(),
                e.clipped_steps.to_string(),
            ]
        })
        .collect()
}

const LOSS_HEADER: [&str; 9] =
    ["epoch", "flow", "task", "smooth", "topo", "total", "mask_residual", "grad_norm_mean", "clipped_steps"];

/// Runs all epochs with progress on stderr. On failure, writes the last
/// good weights and a diagnostic file before returning the error.
fn run_training(
    data: &[Episode],
    cfg: &RunConfig,
    variant: Variant,
    prov: &Provenance,
    tag: &str,
) -> Result<Trained, Failure> {
    let fs = fusion_system();
    let model = variant.model_config(&cfg.model);
    let (mask, trainable) = variant.initial_mask(&fs, model.mask_mode);
    let mut t = Trainer::new(data, cfg.train.clone(), model, fs, mask, trainable)?;
    let started = Instant::now();
    let epochs = cfg.train.epochs;
    eprintln!("{tag}: {} parameters, {} episodes, {epochs} epochs", t.report().n_params, data.len());
    for _ in 0..epochs {
        match t.run_epoch() {
            Ok(e) => {
                let clip = if e.clipped_steps > 0 { format!("  clipped {}/{}", e.clipped_steps, e.steps) } else { String::new() };
                eprintln!(
                    "{tag}: epoch {}/{epochs}  total {:.4}  flow {:.4}  task {:.4}  smooth {:.4}  topo {:.4}  residual {:.1e}  |g| {:.3}{clip}  [{:.1}s]",
                    e.epoch,
                    e.loss.total,
                    e.loss.flow,
                    e.loss.task,
                    e.loss.smooth,
                    e.loss.topo,
                    e.mask_residual,
                    e.grad_norm_mean,
                    started.elapsed().as_secs_f64()
                );
            }
            Err(err) => {
                let last = Trained {
                    params: t.params().clone(),
                    mask: t.mask().clone(),
                    fusion: t.fusion().clone(),
                    model: variant.model_config(&cfg.model),
                    report: t.report().clone(),
                };
                let mut staged = Staged::default();
                staged.add(cfg.out.join(format!("{tag}_last_good.oplc")), checkpoint_of(&last, prov, variant).to_bytes()?);
                let diag = json!({
                    "error": err.to_string(),
                    "epochs_completed": t.epochs_done(),
                    "mask_residual": t.mask().residual(t.fusion()).ok(),
                    "report": t.report(),
                    "provenance": prov.to_json(),
                });
                staged.add(cfg.out.join(format!("{tag}_diagnostic.json")), json_bytes(&diag)?);
                let _ = commit(staged);
                return Err(Failure::Runtime(anyhow::Error::from(err).context(format!("{tag} aborted"))));
            }
        }
    }
    eprintln!("{tag}: finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(t.finish())
}

pub fn train(cfg: &RunConfig, data_path: &Path, variant: Variant) -> Res {
    let (data, bytes) = read_dataset(data_path)?;
    let prov = Provenance::new("train", cfg).with_input(InputRef::new("dataset", data_path, &bytes));
    let mut trained = run_training(&data, cfg, variant, &prov, "train")?;
    trained.report.checkpoint = Some("model.oplc".into());

    let mut staged = Staged::default();
    staged.add(cfg.out.join("model.oplc"), checkpoint_of(&trained, &prov, variant).to_bytes()?);
    staged.add(
        cfg.out.join("train_report.json"),
        json_bytes(&json!({ "provenance": prov.to_json(), "variant": variant.label(), "report": trained.report }))?,
    );
    staged.add(cfg.out.join("loss_curve.csv"), csv_bytes(&prov, &LOSS_HEADER, &loss_curve_rows(&trained.report))?);
    commit(staged)
}

fn parse_observations(path: &Path) -> anyhow::Result<(Vec<Observation>, Vec<u8>)> {
    let bytes = read_input(path)?;
    let text = std::str::from_utf8(&bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let obs = match serde_json::from_str::<Episode>(line) {
            Ok(ep) => ep.observation,
            Err(_) => serde_json::from_str::<Observation>(line)
                .with_context(|| format!("{}:{}: expected an observation or an episode", path.display(), i + 1))?,
        };
        out.push(obs);
    }
    Ok((out, bytes))
}

#[derive(Serialize)]
struct SampleLine<'a> {
    index: usize,
    task: &'a str,
    fn_evals: usize,
    actions: &'a topoflow::blockworld::ActionSequence,
}

pub fn sample(cfg: &RunConfig, ckpt: &Path, observations: Option<&Path>) -> Res {
    let (ck, ck_ref) = load_checkpoint(ckpt)?;
    let mut prov = Provenance::new("sample", cfg).with_input(ck_ref);
    let obs: Vec<Observation> = match observations {
        Some(p) => {
            let (obs, bytes) = parse_observations(p)?;
            prov = prov.with_input(InputRef::new("observations", p, &bytes));
            obs
        }
        None => {
            let mut obs = Vec::new();
            for &task in &cfg.tasks {
                let mut rng = Rng::stream(cfg.seed, task.index() as u64);
                for _ in 0..cfg.n_episodes {
                    obs.push(task.sample_start(&mut rng)?.observe(ck.model.n_cameras));
                }
            }
            obs
        }
    };
    let mut lines = String::new();
    for (i, o) in obs.iter().enumerate() {
        let task = TaskId::ALL.get(o.task_token).ok_or_else(|| anyhow!("observation {i}: task token {} out of range", o.task_token))?;
        let mut rng = Rng::stream(cfg.seed ^ 0x5eed, i as u64);
        let s = sample_sequence(&ck.params, &ck.mask, &ck.model, o, &cfg.integrator, &mut rng)?;
        let line = SampleLine { index: i, task: task.name(), fn_evals: s.fn_evals, actions: &s.sequence };
        lines.push_str(&serde_json::to_string(&line).map_err(anyhow::Error::from)?);
        lines.push('\n');
    }
    let path = cfg.out.join("samples.jsonl");
    let manifest = json!({
        "provenance": prov.to_json(),
        "samples": InputRef::new("samples", &path, lines.as_bytes()),
        "count": obs.len(),
        "integrator": cfg.integrator,
    });
    let mut staged = Staged::default();
    staged.add(path, lines.into_bytes());
    staged.add(cfg.out.join("samples.manifest.json"), json_bytes(&manifest)?);
    commit(staged)
}

pub const METRICS_HEADER: [&str; 9] = [
    "task",
    "model_variant",
    "atp_mean",
    "violation_rate",
    "d_phys_mean",
    "fn_evals",
    "wall_ms",
    "transition_violations",
    "invariant_ok",
];

fn metrics_row(m: &TaskMetrics, variant: &str) -> Vec<String> {
    vec![
        m.task.name().to_string(),
        variant.to_string(),
        format!("{:.6}", m.atp_mean),
        format!("{:.6}", m.violation_rate),
        format!("{:.6}", m.d_phys_mean),
        m.fn_evals.to_string(),
        format!("{:.3}", m.wall_ms),
        m.transition_violations.to_string(),
        format!("{:.6}", m.invariant_ok),
    ]
}

pub fn eval(cfg: &RunConfig, ckpt: &Path, label: Option<String>) -> Res {
    let (ck, ck_ref) = load_checkpoint(ckpt)?;
    let label = label
        .or_else(|| ck.meta.get("variant").and_then(|v| v.as_str()).map(str::to_string))
        .unwrap_or_else(|| "full".into());
    let metrics = trainer::evaluate(&ck.params, &ck.mask, &ck.model, &cfg.tasks, cfg.n_episodes, &cfg.integrator, cfg.seed)?;
    let rows: Vec<_> = metrics.iter().map(|m| metrics_row(m, &label)).collect();
    let prov = Provenance::new("eval", cfg).with_input(ck_ref);
    let mut staged = Staged::default();
    staged.add(cfg.out.join("metrics.csv"), csv_bytes(&prov, &METRICS_HEADER, &rows)?);
    commit(staged)
}

pub fn ablate(cfg: &RunConfig, data_path: &Path) -> Res {
    let (data, bytes) = read_dataset(data_path)?;
    let prov = Provenance::new("ablate", cfg).with_input(InputRef::new("dataset", data_path, &bytes));
    let full = run_training(&data, cfg, Variant::Full, &prov, "full")?;
    let nt = run_training(&data, cfg, Variant::NoTopology, &prov, "NT")?;
    let nh = run_training(&data, cfg, Variant::NoHierarchy, &prov, "NH")?;

    let mut per_variant = Vec::new();
    for (variant, t) in [(Variant::Full, &full), (Variant::NoTopology, &nt), (Variant::NoRk4, &full), (Variant::NoHierarchy, &nh)] {
        let m = trainer::evaluate(&t.params, &t.mask, &t.model, &cfg.tasks, cfg.n_episodes, &variant.integrator(), cfg.seed)?;
        per_variant.push((variant, m));
    }
    let mut rows = Vec::new();
    for (i, _) in cfg.tasks.iter().enumerate() {
        for (variant, m) in &per_variant {
            rows.push(metrics_row(&m[i], variant.label()));
        }
    }
    let reports = json!({
        "provenance": prov.to_json(),
        "full": full.report,
        "NT": nt.report,
        "NH": nh.report,
    });
    let mut staged = Staged::default();
    staged.add(cfg.out.join("ablation.csv"), csv_bytes(&prov, &METRICS_HEADER, &rows)?);
    staged.add(cfg.out.join("ablation_train.json"), json_bytes(&reports)?);
    commit(staged)
}

pub const BENCH_HEADER: [&str; 8] =
    ["field", "integrator", "n_steps", "fn_evals", "endpoint", "reference", "abs_error", "wall_ms"];

fn specs() -> [(&'static str, IntegratorSpec); 2] {
    [("euler-10", IntegratorSpec::euler_10()), ("rk4-4", IntegratorSpec::rk4_4())]
}

/// Decay field `dx/dτ = −x` from `x(0) = 1`; exact endpoint `e⁻¹`.
pub fn analytic_rows() -> anyhow::Result<Vec<Vec<String>>> {
    const REPEATS: usize = 1000;
    let exact = (-1.0f64).exp();
    let x0 = Tensor::scalar(1.0);
    let mut rows = Vec::new();
    for (name, spec) in specs() {
        let mut out = (Tensor::scalar(0.0), 0);
        let start = Instant::now();
        for _ in 0..REPEATS {
            out = integrate(|x, _| Ok(x.scale(-1.0)), &x0, &spec)?;
        }
        let wall_ms = start.elapsed().as_secs_f64() * 1e3 / REPEATS as f64;
        let end = out.0.data()[0];
        rows.push(vec![
            "decay".into(),
            name.into(),
            spec.n_steps.to_string(),
            out.1.to_string(),
            format!("{end:.10}"),
            format!("{exact:.10}"),
            format!("{:.3e}", (end - exact).abs()),
            format!("{wall_ms:.6}"),
        ]);
    }
    Ok(rows)
}

fn model_rows(cfg: &RunConfig, ck: &Checkpoint) -> anyhow::Result<Vec<Vec<String>>> {
    let reference = IntegratorSpec::steps(Method::Rk4, 64)?;
    let mut rows = Vec::new();
    for &task in &cfg.tasks {
        let mut env = Rng::stream(cfg.seed, task.index() as u64);
        let mut starts = Vec::new();
        for _ in 0..cfg.n_episodes.max(1) {
            let obs = task.sample_start(&mut env)?.observe(ck.model.n_cameras);
            let a0 = Rng::stream(cfg.seed ^ 0xbe4c, starts.len() as u64).gaussian(&[ck.model.h, ck.model.d_a]);
            starts.push((obs, a0));
        }
        let field = |obs: &Observation| {
            let obs = obs.clone();
            move |a: &Tensor, tau: f64| topoflow::policy::forward(&ck.params, &obs, a, tau, &ck.mask, &ck.model)
        };
        let refs: Vec<Tensor> = starts
            .iter()
            .map(|(o, a0)| integrate(field(o), a0, &reference).map(|r| r.0))
            .collect::<Result<_, _>>()?;
        for (name, spec) in specs() {
            let start = Instant::now();
            let mut err = 0.0;
            let mut evals = 0;
            for ((o, a0), r) in starts.iter().zip(&refs) {
                let (end, n) = integrate(field(o), a0, &spec)?;
                evals = n;
                err += end.sub(r)?.frobenius_norm();
            }
            let k = starts.len() as f64;
            rows.push(vec![
                format!("model:{}", task.name()),
                name.into(),
                spec.n_steps.to_string(),
                evals.to_string(),
                String::new(),
                "rk4-64".into(),
                format!("{:.3e}", err / k),
                format!("{:.3}", start.elapsed().as_secs_f64() * 1e3 / k),
            ]);
        }
    }
    Ok(rows)
}

pub fn bench_integrators(cfg: &RunConfig, analytic: bool, ckpt: Option<&Path>) -> Res {
    let mut prov = Provenance::new("bench-integrators", cfg);
    let mut rows = Vec::new();
    if analytic {
        rows.extend(analytic_rows()?);
    }
    if let Some(p) = ckpt {
        let (ck, r) = load_checkpoint(p)?;
        prov = prov.with_input(r);
        rows.extend(model_rows(cfg, &ck)?);
    }
    let mut staged = Staged::default();
    staged.add(cfg.out.join("bench_integrators.csv"), csv_bytes(&prov, &BENCH_HEADER, &rows)?);
    let table: Vec<String> = BENCH_HEADER.iter().map(|s| s.to_string()).collect();
    print!("{}", rnd::format_table(&table, &rows));
    commit(staged)
}

pub fn dump_mask(cfg: &RunConfig, ckpt: Option<&Path>) -> Res {
    let mut prov = Provenance::new("dump-mask", cfg);
    let mask: TopoMask = match ckpt {
        Some(p) => {
            let (ck, r) = load_checkpoint(p)?;
            prov = prov.with_input(r);
            ck.mask
        }
        None => build_mask(&fusion_system(), MASK_TOL, cfg.model.mask_mode),
    };
    let names: Vec<&str> = if mask.n() == N_TYPES { TokenType::ALL.iter().map(|t| t.name()).collect() } else { Vec::new() };
    let label = |i: usize| names.get(i).map_or_else(|| i.to_string(), |s| s.to_string());
    let mut header = vec!["from\\to".to_string()];
    header.extend((0..mask.n()).map(label));
    let rows: Vec<Vec<String>> = (0..mask.n())
        .map(|i| std::iter::once(label(i)).chain((0..mask.n()).map(|j| mask.get(i, j).to_string())).collect())
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let bytes = csv_bytes(&prov, &h, &rows)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

/// Largest braiding residual over all triples with both couplings present.
fn max_braiding(fs: &FusionSystem) -> Option<f64> {
    let pairs: Vec<(usize, usize)> = fs.couplings().keys().copied().collect();
    let mut worst: Option<f64> = None;
    for &(i, j) in &pairs {
        for &(j2, k) in &pairs {
            if j2 == j {
                if let Ok(r) = fs.braiding_residual(i, j, k) {
                    worst = Some(worst.map_or(r, |w: f64| w.max(r)));
                }
            }
        }
    }
    worst
}

pub fn check_fusion(path: &Path, tol: f64) -> Res {
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(Failure::Usage(format!("--tol must be a non-negative number, got {tol}")));
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let fs = FusionSystem::parse(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    let pent = fs.pentagon_residual();
    let hex = fs.hexagon_residual();
    let braid = max_braiding(&fs);
    println!("file              {}", path.display());
    println!("n_types           {}", fs.n_types());
    println!("tolerance         {tol:.3e}");
    println!("pentagon          {pent:.6e}  {}", if pent <= tol { "ok" } else { "BREACH" });
    match braid {
        Some(b) => println!("braiding (max)    {b:.6e}  {}", if b <= tol { "ok" } else { "BREACH" }),
        None => println!("braiding (max)    n/a (no chained couplings)"),
    }
    println!("hexagon           {hex:.6e}  (diagnostic)");
    println!("projectors        {}", fs.projectors().len());
    let breach = pent > tol || braid.is_some_and(|b| b > tol);
    if breach {
        return Err(Failure::Breach(format!("{}: consistency residual exceeds {tol:.3e}", path.display())));
    }
    println!("status            ok");
    Ok(())
}

pub fn render(path: &Path, plot_dir: Option<&Path>) -> Res {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table = rnd::render(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    print!("{table}");
    let Some(dir) = plot_dir else { return Ok(()) };
    let t = rnd::parse_csv(&text)?;
    let stem = path.file_stem().map_or("plot".into(), |s| s.to_string_lossy().into_owned());
    let mut staged = Staged::default();
    if t.header.iter().any(|h| h == "epoch") {
        staged.add(dir.join(format!("{stem}.svg")), rnd::line_plot(&t, "epoch", &stem)?.into_bytes());
    }
    if let Some(g) = rnd::Grid::from_table(&t, "atp_mean")? {
        if !g.variants.is_empty() {
            staged.add(dir.join(format!("{stem}_atp.svg")), rnd::bar_plot(&g, &format!("{stem}: ATP")).into_bytes());
        }
    }
    if staged.paths().next().is_none() {
        eprintln!("nothing to plot in {}", path.display());
    }
    commit(staged)
}
