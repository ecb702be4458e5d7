use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context};
use cpca_core::checks::{run_scope, CheckDims, Scope};
use cpca_core::data::{gen_common_ensemble, gen_toy_dg, load_domain_csv, DatasetManifest, DomainData, DomainSet};
use cpca_core::fg::{fg_fit, ml_residual, negloglik};
use cpca_core::net::{
    naive_subspace_classifier, run_sweep, save_checkpoint, train, write_sweep_csv, Pipeline, TrainedModel,
};
use cpca_core::unfold::{check_etas, cpca_loss, unfold_solve, UnfoldConfig};
use cpca_core::{CovarianceSet, OrthogonalBasis};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_list, RunConfig};
use crate::{
    BenchArgs, Cli, Command, FgArgs, GenWhat, GradcheckArgs, MetricArg, PipelineArg, ScopeArg, Status, SweepArgs,
    TrainArgs, UnfoldArgs,
};

const DEFAULT_OUT: &str = "cpca-out";

struct Ctx {
    config: RunConfig,
    seed_flag: Option<u64>,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn seed(&self, fallback: u64) -> u64 {
        self.config.seed(self.seed_flag, fallback)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<Status> {
    let config = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = cli
        .global
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let ctx = Ctx {
        config,
        seed_flag: cli.global.seed,
        out,
        quiet: cli.global.quiet,
    };
    match cli.command {
        Command::Fg(a) => cmd_fg(&ctx, a),
        Command::Unfold(a) => cmd_unfold(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
        Command::Gen(a) => cmd_gen(&ctx, a.what),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Bench(a) => cmd_bench(&ctx, a),
    }
}

fn read_covs(path: &Path) -> anyhow::Result<CovarianceSet> {
    CovarianceSet::read_json_file(path).with_context(|| format!("reading covariance set {}", path.display()))
}

fn cmd_fg(ctx: &Ctx, a: FgArgs) -> anyhow::Result<Status> {
    let covs = read_covs(&a.covs)?;
    let mut cfg = ctx.config.fg.clone();
    if let Some(t) = a.tol {
        cfg.tol = t;
    }
    if let Some(m) = a.max_sweeps {
        cfg.max_sweeps = m;
    }
    let result = fg_fit(&covs, &cfg)?;
    let path = ctx.write("fg.json", result.to_json())?;
    ctx.say(format!(
        "fg: {} after {} sweep(s), residual {:.3e} -> {}",
        if result.converged() { "converged" } else { "NOT converged" },
        result.sweeps_used,
        result.residual,
        path.display()
    ));
    Ok(if result.converged() { Status::Ok } else { Status::NotConverged })
}

fn cmd_unfold(ctx: &Ctx, a: UnfoldArgs) -> anyhow::Result<Status> {
    let covs = read_covs(&a.covs)?;
    let section = &ctx.config.unfold;
    let explicit = match &a.etas {
        Some(text) => Some(parse_list::<f64>(text)?),
        None if a.hyper.is_none() => section.etas.clone(),
        None => None,
    };
    let etas = match explicit {
        Some(etas) => {
            if let Some(t) = a.stages {
                ensure!(t == etas.len(), "--stages {t} disagrees with {} step sizes", etas.len());
            }
            etas
        }
        // hypernet at zero: 0.5·σ(0) at every stage
        None => vec![0.25; a.stages.unwrap_or(section.stages)],
    };
    check_etas(&etas)?;
    let cfg = UnfoldConfig {
        stages: etas.len(),
        eps: section.eps,
        eps_norm: section.eps_norm,
        dim: covs.dim(),
    };
    let (_, trace) = unfold_solve(&covs, &etas, &cfg)?;
    let path = ctx.write("unfold.json", trace.to_json())?;
    ctx.say(format!(
        "unfold: {} stage(s), offdiag {:.3e} -> {:.3e} -> {}",
        etas.len(),
        trace.initial_offdiag,
        trace.final_offdiag(),
        path.display()
    ));
    Ok(Status::Ok)
}

fn cmd_gradcheck(ctx: &Ctx, a: GradcheckArgs) -> anyhow::Result<Status> {
    let section = &ctx.config.gradcheck;
    let scope = match a.scope {
        Some(ScopeArg::Primitive) => Scope::Primitive,
        Some(ScopeArg::Unfold) => Scope::Unfold,
        Some(ScopeArg::Full) => Scope::Full,
        None => section.scope,
    };
    let dims = CheckDims {
        d: a.d.unwrap_or(section.d),
        stages: a.stages.unwrap_or(section.stages),
        domains: a.domains.unwrap_or(section.domains),
    };
    let floored = match a.metric {
        MetricArg::Strict => false,
        MetricArg::Floored => true,
        MetricArg::Auto => scope == Scope::Full,
    };
    let report = run_scope(scope, &dims, ctx.seed(0), a.inject_adjoint_fault)?;
    let (errors, worst, pass) = if floored {
        (&report.floored, report.worst_floored(), report.floored_pass())
    } else {
        (&report.strict, report.worst_strict(), report.strict_pass())
    };
    ctx.write("gradcheck.json", serde_json::to_string_pretty(&report)?)?;
    for (group, err) in errors {
        ctx.say(format!("{group:<40} {err:.3e}"));
    }
    ctx.say(format!(
        "gradcheck {scope:?} ({} metric): worst {worst:.3e}, threshold {:e}: {}",
        if floored { "floored" } else { "strict" },
        report.threshold,
        if pass { "PASS" } else { "FAIL" }
    ));
    Ok(if pass { Status::Ok } else { Status::GradcheckFailed })
}

fn cmd_gen(ctx: &Ctx, what: GenWhat) -> anyhow::Result<Status> {
    match what {
        GenWhat::Ensemble { d, k, noise } => {
            let mut params = ctx.config.ensemble.clone();
            params.d = d.unwrap_or(params.d);
            params.k = k.unwrap_or(params.k);
            params.noise_level = noise.unwrap_or(params.noise_level);
            let ens = gen_common_ensemble(&params, ctx.seed(0))?;
            let covs = ctx.write("covs.json", ens.covs.to_json())?;
            let truth = json!({
                "truth": ens.truth.to_rows(),
                "spectra": ens.spectra,
                "noise-level": ens.noise_level,
            });
            ctx.write("truth.json", serde_json::to_string_pretty(&truth)?)?;
            ctx.say(format!("gen: {} covariances of dim {} -> {}", params.k, params.d, covs.display()));
        }
        GenWhat::Toy { p, k, c, n, strength } => {
            let mut params = ctx.config.toy.clone();
            params.p = p.unwrap_or(params.p);
            params.k = k.unwrap_or(params.k);
            params.c = c.unwrap_or(params.c);
            params.n_per_domain = n.unwrap_or(params.n_per_domain);
            params.spurious_strength = strength.unwrap_or(params.spurious_strength);
            let ds = gen_toy_dg(&params, ctx.seed(0))?;
            std::fs::create_dir_all(&ctx.out)?;
            ds.write_csv(&ctx.out)?;
            ctx.say(format!(
                "gen: {} domains x {} rows (held-out domain {}) -> {}",
                params.k,
                params.n_per_domain,
                ds.heldout,
                ctx.out.join("manifest.json").display()
            ));
        }
    }
    Ok(Status::Ok)
}

fn load_manifest(path: &Path) -> anyhow::Result<(DomainData, DomainSet, usize)> {
    let (manifest, paths) =
        DatasetManifest::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
    ensure!(manifest.heldout < paths.len(), "held-out index {} out of range", manifest.heldout);
    let train_paths: Vec<PathBuf> = paths
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != manifest.heldout)
        .map(|(_, p)| p.clone())
        .collect();
    let train = load_domain_csv(&train_paths)?;
    let heldout = load_domain_csv(&paths[manifest.heldout..=manifest.heldout])?
        .domains
        .remove(0);
    Ok((train, heldout, manifest.num_classes))
}

#[derive(Serialize)]
struct TrainSummary {
    pipeline: Pipeline,
    seed: u64,
    steps: usize,
    train_acc: f64,
    heldout_acc: f64,
    final_task_loss: f64,
    final_cpca_loss: Option<f64>,
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> anyhow::Result<Status> {
    let mut cfg = ctx.config.train.clone();
    cfg.seed = ctx.seed(cfg.seed);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.lambda_cpca = a.lambda_cpca.unwrap_or(cfg.lambda_cpca);
    cfg.freeze_modulation |= a.freeze_modulation;
    let (data, heldout, classes) = match &a.data {
        Some(path) => load_manifest(path)?,
        None => {
            let ds = gen_toy_dg(&ctx.config.toy, cfg.seed)?;
            (ds.train_data(), ds.heldout_domain().clone(), ds.num_classes)
        }
    };
    let p = data.domains[0].x.cols();
    ensure!(
        (cfg.p, cfg.domains, cfg.classes) == (p, data.num_domains(), classes),
        "config expects p = {}, K = {}, C = {} but the data has p = {p}, K = {} training domains, C = {classes}",
        cfg.p,
        cfg.domains,
        cfg.classes,
        data.num_domains()
    );
    let pipeline = match a.pipeline {
        PipelineArg::Cpcanet => Pipeline::CpcaNet,
        PipelineArg::Erm => Pipeline::Erm,
    };
    let outcome = train(pipeline, &data, Some(&heldout), &cfg)?;
    let mut csv = Vec::new();
    outcome.log.write_csv(&mut csv)?;
    ctx.write("metrics.csv", csv)?;
    std::fs::create_dir_all(&ctx.out)?;
    save_checkpoint(&outcome.model, &cfg.architecture(), &ctx.out, "model")?;

    let mut train_acc = 0.0;
    for dom in &data.domains {
        train_acc += outcome.model.accuracy(dom)?;
    }
    let last = outcome.log.rows.last();
    let summary = TrainSummary {
        pipeline,
        seed: cfg.seed,
        steps: cfg.steps,
        train_acc: train_acc / data.num_domains() as f64,
        heldout_acc: outcome.model.accuracy(&heldout)?,
        final_task_loss: last.map_or(f64::NAN, |r| r.task_loss),
        final_cpca_loss: last.and_then(|r| r.cpca_loss),
    };
    ctx.write("summary.json", serde_json::to_string_pretty(&summary)?)?;
    ctx.say(format!(
        "train {pipeline:?}: {} steps, train acc {:.3}, held-out acc {:.3} -> {}",
        cfg.steps,
        summary.train_acc,
        summary.heldout_acc,
        ctx.out.display()
    ));
    Ok(Status::Ok)
}

fn cmd_sweep(ctx: &Ctx, a: SweepArgs) -> anyhow::Result<Status> {
    let mut cfg = ctx.config.sweep.clone();
    if let Some(text) = &a.dims {
        cfg.dims = parse_list(text)?;
    }
    if let Some(text) = &a.stages {
        cfg.stages = parse_list(text)?;
    }
    cfg.seeds = a.seeds.unwrap_or(cfg.seeds);
    cfg.base.steps = a.steps.unwrap_or(cfg.base.steps);
    cfg.base.seed = ctx.seed(cfg.base.seed);
    let cells = run_sweep(&cfg)?;
    if let Some(bad) = cells
        .iter()
        .find(|c| !(c.heldout_acc.is_finite() && c.final_task_loss.is_finite() && c.final_cpca_loss.is_finite()))
    {
        bail!("non-finite result in cell d = {}, T = {}", bad.d, bad.stages);
    }
    let mut csv = Vec::new();
    write_sweep_csv(&cells, &mut csv)?;
    let path = ctx.write("sweep.csv", csv)?;
    for c in &cells {
        ctx.say(format!(
            "d = {:<4} T = {}: held-out {:5.1} ± {:.1}",
            c.d,
            c.stages,
            100.0 * c.heldout_acc.mean,
            100.0 * c.heldout_acc.std
        ));
    }
    ctx.say(format!("sweep: {} cell(s) -> {}", cells.len(), path.display()));
    Ok(Status::Ok)
}

fn solver_row(basis: &OrthogonalBasis, covs: &CovarianceSet) -> anyhow::Result<serde_json::Value> {
    Ok(json!({
        "objective": negloglik(basis, covs),
        "offdiag": cpca_loss(basis, covs)?,
        "residual": ml_residual(basis, covs),
    }))
}

fn timed<T>(reps: usize, mut f: impl FnMut() -> anyhow::Result<T>) -> anyhow::Result<(T, f64)> {
    let start = Instant::now();
    let mut last = f()?;
    for _ in 1..reps {
        last = f()?;
    }
    Ok((last, start.elapsed().as_secs_f64() / reps as f64))
}

fn cmd_bench(ctx: &Ctx, a: BenchArgs) -> anyhow::Result<Status> {
    let section = &ctx.config.bench;
    let seed = ctx.seed(0);
    let mut params = ctx.config.ensemble.clone();
    params.d = a.d.unwrap_or(params.d);
    params.k = a.k.unwrap_or(params.k);
    params.noise_level = a.noise.unwrap_or(params.noise_level);
    let ens = gen_common_ensemble(&params, seed)?;
    let covs = &ens.covs;
    let reps = section.reps.max(1);

    let (fg, fg_secs) = timed(reps, || Ok(fg_fit(covs, &ctx.config.fg)?))?;
    let stages = a.stages.unwrap_or(section.stages);
    let etas = vec![a.eta.unwrap_or(section.eta); stages];
    let ucfg = UnfoldConfig {
        stages,
        dim: covs.dim(),
        ..UnfoldConfig::default()
    };
    let ((ubasis, _), unfold_secs) = timed(reps, || Ok(unfold_solve(covs, &etas, &ucfg)?))?;

    let mut fg_row = solver_row(&fg.basis, covs)?;
    fg_row["sweeps"] = json!(fg.sweeps_used);
    fg_row["converged"] = json!(fg.converged());
    fg_row["seconds"] = json!(fg_secs);
    let mut unfold_row = solver_row(&ubasis, covs)?;
    unfold_row["stages"] = json!(stages);
    unfold_row["eta"] = json!(etas[0]);
    unfold_row["seconds"] = json!(unfold_secs);

    // subspace-classifier diagnostic on a briefly trained CPCANet
    let toy = gen_toy_dg(&ctx.config.toy, seed)?;
    let mut tcfg = ctx.config.train.clone();
    tcfg.seed = seed;
    tcfg.steps = section.naive_train_steps;
    let trained = train(Pipeline::CpcaNet, &toy.train_data(), None, &tcfg)?;
    let TrainedModel::CpcaNet { params: net, basis } = &trained.model else {
        unreachable!("CPCANet pipeline returns a CPCANet model")
    };
    let naive = naive_subspace_classifier(
        net,
        basis,
        &toy.train_data(),
        toy.heldout_domain(),
        section.naive_fit_steps,
        tcfg.lr_cpcanet.max(1e-3),
    )?;

    let report = json!({
        "d": params.d,
        "k": params.k,
        "noise-level": params.noise_level,
        "seed": seed,
        "identity": solver_row(&OrthogonalBasis::identity(params.d), covs)?,
        "fg": fg_row,
        "unfold": unfold_row,
        "naive-classifier": naive,
    });
    let path = ctx.write("bench.json", serde_json::to_string_pretty(&report)?)?;
    ctx.say(format!(
        "bench: fg offdiag {:.3e} in {:.2e}s, unfold offdiag {:.3e} in {:.2e}s, naive held-out acc {:.3} -> {}",
        report["fg"]["offdiag"].as_f64().unwrap_or(f64::NAN),
        fg_secs,
        report["unfold"]["offdiag"].as_f64().unwrap_or(f64::NAN),
        unfold_secs,
        naive.heldout_acc,
        path.display()
    ));
    Ok(Status::Ok)
}
