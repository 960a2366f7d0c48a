// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::fs;
use std::path::Path;

use eots_core::embedding::{build_chi, partition, TextEmbeddings, TokenPartition};
use eots_core::eot_analysis::{eot_distance_matrix, eot_separation, rank_curve, DistanceMetric, EotMatrix};
use eots_core::error::{Error, FormatError};
use eots_core::fixtures::{seeded_latent, FixtureParams, SuppressionFixture};
use eots_core::gradcheck::run_suite;
use eots_core::io::{self, DistanceSection, JsonF64, MapDump, Report, SpectrumSection};
use eots_core::ito::{self, AnchorSource, ItoConfig, UpdateColumns};
use eots_core::metrics::{psnr_auto, relative_frobenius_error, ssim, token_map, SsimParams};
use eots_core::swr::{suppress_detailed, svd, SpectrumRule, WnnmWeights, DEFAULT_WNNM_EPSILON};
use eots_core::toy_attention::{AttentionMaps, LossKind, LossWeights, ToyDenoiser, ToyDenoiserConfig};
use serde_json::json;

use crate::{AnalyzeArgs, GradcheckArgs, LossArg, Metric, Mode, OptimizeArgs, SuppressArgs, UpdateColsArg};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    /// A check ran to completion and found values over tolerance.
    Breach(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_numerical() => 1,
            CliError::Core(_) => 2,
            CliError::Breach(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(Error::Format(e)) => write!(f, "[{}] {e}", e.code()),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Breach(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// `EOTS_SEED` overrides the flag when present.
fn effective_seed(flag: u64) -> CliResult<u64> {
    match std::env::var("EOTS_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("EOTS_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|source| {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn resolve_ne(flag: &Option<Vec<usize>>, manifest: &[usize]) -> Vec<usize> {
    flag.clone().unwrap_or_else(|| manifest.to_vec())
}

fn rule_from(args: &SuppressArgs) -> CliResult<SpectrumRule> {
    let need_k = || args.k.ok_or_else(|| CliError::Usage(format!("--mode {:?} needs --k", args.mode)));
    Ok(match args.mode {
        Mode::Soft => SpectrumRule::Soft { gamma: args.gamma },
        Mode::Strengthen => SpectrumRule::Strengthen {
            alpha: args.alpha,
            beta: args.beta,
        },
        Mode::Topk => SpectrumRule::ZeroTop { k: need_k()? },
        Mode::Bottomk => SpectrumRule::ZeroBottom { k: need_k()? },
        Mode::Wnnm => SpectrumRule::Wnnm(WnnmWeights::Adaptive {
            lambda: args
                .lambda
                .ok_or_else(|| CliError::Usage("--mode wnnm needs --lambda".into()))?,
            epsilon: DEFAULT_WNNM_EPSILON,
        }),
    })
}

fn spectrum_section(
    rule: SpectrumRule,
    before: Vec<f64>,
    after: Vec<f64>,
    emb: &TextEmbeddings,
    part: &TokenPartition,
) -> SpectrumSection {
    SpectrumSection {
        rule,
        before,
        after,
        rank_bound: part.chi_rank_bound(emb.embed_dim()),
        reference_rank_bound: part.reference_rank_bound(emb.embed_dim()),
        ne_positions: part.ne_indices().to_vec(),
    }
}

pub fn suppress(args: &SuppressArgs) -> CliResult {
    let (emb, mut manifest) = io::read_emb(&args.emb)?;
    let ne = resolve_ne(&args.ne, &manifest.ne_positions);
    if ne.is_empty() {
        return Err(CliError::Usage(
            "no negative targets: pass --ne or list ne_positions in the manifest".into(),
        ));
    }
    let part = partition(emb.prompt_len(), emb.token_count(), &ne)?;
    let rule = rule_from(args)?;
    let result = suppress_detailed(&emb, &part, &rule)?;
    manifest.ne_positions = ne.clone();
    io::write_emb(&args.out, &result.embeddings, &manifest)?;

    let change = relative_frobenius_error(emb.data(), result.embeddings.data())?;
    let rank_after = result.sigma_after.iter().filter(|&&s| s > 0.0).count();
    println!(
        "suppressed tokens {ne:?} + {} EOT: {} singular values, rank after {rank_after}, relative change {change:.6e}",
        part.eot_count(),
        result.rank_bound
    );
    if let Some(path) = &args.report {
        let mut report = Report::new(
            "suppress",
            None,
            json!({
                "emb": args.emb,
                "ne": ne,
                "rule": rule,
                "out": args.out,
            }),
        );
        report.spectrum = Some(spectrum_section(
            rule,
            result.sigma_before.clone(),
            result.sigma_after.clone(),
            &emb,
            &part,
        ));
        report.metrics.insert("relative_change".into(), JsonF64(change));
        report.metrics.insert("rank_after".into(), JsonF64(rank_after as f64));
        io::write_report(path, &report)?;
    }
    Ok(())
}

fn distance_metric(m: Metric) -> DistanceMetric {
    match m {
        Metric::Euclidean => DistanceMetric::Euclidean,
        Metric::Cosine => DistanceMetric::Cosine,
    }
}

pub fn analyze(args: &AnalyzeArgs) -> CliResult {
    let (emb, manifest) = io::read_emb(&args.emb)?;
    let metric = distance_metric(args.metric);
    let dist = eot_distance_matrix(&emb, metric)?;
    let separation = eot_separation(&emb, metric)?;
    let curve = rank_curve(&EotMatrix::from_embeddings(&emb))?;
    let eot: Vec<usize> = emb.eot_range().collect();

    let mut report = Report::new(
        "analyze",
        None,
        json!({ "emb": args.emb, "metric": metric, "ne": args.ne }),
    );
    report.distance = Some(DistanceSection {
        metric,
        tokens: eot.clone(),
        matrix: dist.row_iter().map(|r| r.iter().copied().collect()).collect(),
        separation: Some(separation),
    });
    report.rank_curve = Some(curve.clone());
    for tol in [1e-1, 1e-2, 1e-3] {
        if let Some(k) = curve.knee(tol) {
            report.metrics.insert(format!("eot_rank_at_rel_error_{tol:e}"), JsonF64(k as f64));
        }
    }

    let ne = resolve_ne(&args.ne, &manifest.ne_positions);
    if !ne.is_empty() {
        let part = partition(emb.prompt_len(), emb.token_count(), &ne)?;
        let sigma = svd(build_chi(&emb, &part)?.matrix())?.singular_values().to_vec();
        // Identity rule: the section records the unmodified spectrum.
        report.spectrum = Some(spectrum_section(
            SpectrumRule::Soft { gamma: 0.0 },
            sigma.clone(),
            sigma,
            &emb,
            &part,
        ));
    }
    io::write_report(&args.report, &report)?;

    if let Some(dir) = &args.csv_dir {
        create_dir(dir)?;
        io::write_matrix_csv(&dir.join("distance.csv"), &eot, &dist)?;
        io::write_records_csv(&dir.join("rank_curve.csv"), &curve.points)?;
    }
    println!(
        "{} EOT columns, {} distance: within {:.6} vs to prompt {:.6}; leading energy {:.6}",
        eot.len(),
        metric.name(),
        separation.mean_intra_eot,
        separation.mean_eot_to_prompt,
        curve.points.get(1).map_or(1.0, |p| p.energy_fraction)
    );
    Ok(())
}

struct Setup {
    model: ToyDenoiser,
    embeddings: TextEmbeddings,
    partition: TokenPartition,
    latent: nalgebra::DMatrix<f64>,
    source: String,
}

fn optimize_setup(args: &OptimizeArgs, seed: u64) -> CliResult<Setup> {
    let model_cfg = ToyDenoiserConfig {
        timesteps: args.timesteps,
        seed,
        ..ToyDenoiserConfig::default()
    };
    model_cfg.validate()?;
    match &args.emb {
        Some(path) => {
            let (embeddings, _) = io::read_emb(path)?;
            let ne = args.ne.clone().unwrap_or_default();
            let partition = partition(embeddings.prompt_len(), embeddings.token_count(), &ne)?;
            let model = ToyDenoiser::new(model_cfg, embeddings.embed_dim())?;
            Ok(Setup {
                latent: seeded_latent(seed, &model_cfg),
                model,
                embeddings,
                partition,
                source: path.display().to_string(),
            })
        }
        None => {
            let f = SuppressionFixture::with_params(seed, model_cfg, FixtureParams::default())?;
            let partition = match &args.ne {
                Some(ne) => partition(f.embeddings.prompt_len(), f.embeddings.token_count(), ne)?,
                None => f.partition,
            };
            Ok(Setup {
                model: f.model,
                embeddings: f.embeddings,
                partition,
                latent: f.latent,
                source: "fixture".into(),
            })
        }
    }
}

fn dump_maps(
    dir: &Path,
    prefix: &str,
    maps: &AttentionMaps,
    cfg: &ToyDenoiserConfig,
    dumps: &mut Vec<MapDump>,
) -> CliResult {
    for token in 0..maps.token_count() {
        let field = token_map(maps, token, cfg.grid_h, cfg.grid_w)?;
        let name = format!("{prefix}_tok{token:02}.pgm");
        let (min, max) = io::write_pgm16(&dir.join(&name), &field)?;
        dumps.push(MapDump {
            token,
            label: prefix.into(),
            path: format!("maps/{name}"),
            min,
            max,
        });
    }
    Ok(())
}

/// Mean PSNR (peak = reference max) and SSIM over the positive-target maps.
fn pe_fidelity(
    reference: &AttentionMaps,
    test: &AttentionMaps,
    part: &TokenPartition,
    cfg: &ToyDenoiserConfig,
) -> CliResult<Option<(f64, f64)>> {
    let window = SsimParams::default().window;
    if part.pe_indices().is_empty() || cfg.grid_h < window || cfg.grid_w < window {
        return Ok(None);
    }
    let (mut p, mut s) = (0.0, 0.0);
    for &j in part.pe_indices() {
        let a = token_map(reference, j, cfg.grid_h, cfg.grid_w)?;
        let b = token_map(test, j, cfg.grid_h, cfg.grid_w)?;
        p += psnr_auto(&a, &b)?;
        let peak = a.max().max(b.max());
        s += ssim(&a, &b, SsimParams { peak, ..SsimParams::default() })?;
    }
    let n = part.pe_indices().len() as f64;
    Ok(Some((p / n, s / n)))
}

pub fn optimize(args: &OptimizeArgs) -> CliResult {
    let seed = effective_seed(args.seed)?;
    let setup = optimize_setup(args, seed)?;
    let cfg = ItoConfig {
        timesteps: args.timesteps,
        cutoff: args.cutoff,
        inner_iters: args.iters,
        eta: args.eta,
        weights: LossWeights {
            pl: args.lambda_pl,
            nl: args.lambda_nl,
        },
        loss_kind: match args.loss {
            LossArg::Attention => LossKind::Attention,
            LossArg::Value => LossKind::Value,
        },
        update_columns: match args.update_cols {
            UpdateColsArg::All => UpdateColumns::All,
            UpdateColsArg::NeEot => UpdateColumns::NegativeAndEot,
        },
        anchor_source: AnchorSource::Original,
        eta_guard: !args.no_eta_guard,
    };
    cfg.validate()?;
    let rule = SpectrumRule::Soft { gamma: args.gamma };
    let model_cfg = *setup.model.config();

    let out_dir = &args.out_dir;
    let maps_dir = out_dir.join("maps");
    create_dir(&maps_dir)?;
    let trace_path = out_dir.join("trace.csv");
    let report_path = out_dir.join("report.json");

    let mut report = Report::new(
        "optimize",
        Some(seed),
        json!({
            "source": setup.source,
            "ne": setup.partition.ne_indices(),
            "rule": rule,
            "ito": cfg,
            "model": model_cfg,
        }),
    );

    let baseline = ito::rollout(&setup.model, &setup.embeddings, &setup.partition, &setup.latent)?;
    let run = match ito::run(&setup.embeddings, &setup.partition, &rule, &setup.model, &setup.latent, &cfg) {
        Ok(run) => run,
        Err(failure) => {
            io::write_records_csv(&trace_path, &failure.trace.iterations)?;
            report
                .notes
                .push(format!("run failed after {} records: {}", failure.trace.iterations.len(), failure.error));
            io::write_report(&report_path, &report)?;
            return Err(failure.error.into());
        }
    };

    io::write_records_csv(&trace_path, &run.trace.iterations)?;
    io::write_records_csv(&out_dir.join("steps.csv"), &run.trace.steps)?;
    let summary = ito::suppression_report(&run.trace, &baseline.steps)?;
    report.spectrum = Some(spectrum_section(
        rule,
        run.regularization.sigma_before.clone(),
        run.regularization.sigma_after.clone(),
        &setup.embeddings,
        &setup.partition,
    ));
    report.metrics.insert("ne_mass_reduction".into(), JsonF64(summary.ne_mass_reduction));
    report.metrics.insert("baseline_ne_mass".into(), JsonF64(summary.baseline_ne_mass));
    report.metrics.insert("suppressed_ne_mass".into(), JsonF64(summary.suppressed_ne_mass));
    report.metrics.insert("pe_deviation".into(), JsonF64(summary.pe_deviation));

    match &run.active_end_maps {
        Some(maps) => {
            let reference = &baseline.maps[summary.compared_step];
            dump_maps(&maps_dir, "suppressed", maps, &model_cfg, &mut report.maps)?;
            dump_maps(&maps_dir, "baseline", reference, &model_cfg, &mut report.maps)?;
            if let Some((p, s)) = pe_fidelity(reference, maps, &setup.partition, &model_cfg)? {
                report.metrics.insert("pe_map_psnr_mean".into(), JsonF64(p));
                report.metrics.insert("pe_map_ssim_mean".into(), JsonF64(s));
            }
        }
        None => report.notes.push("cutoff is 0: no optimized maps to dump".into()),
    }
    println!(
        "seed {seed}: {} records, NE mass {:.6} -> {:.6} ({:+.2}%) at step {}, PE deviation {:.6}, eta halvings {}",
        summary.iteration_records,
        summary.baseline_ne_mass,
        summary.suppressed_ne_mass,
        -100.0 * summary.ne_mass_reduction,
        summary.compared_step,
        summary.pe_deviation,
        summary.eta_halvings
    );
    report.suppression = Some(summary);
    io::write_report(&report_path, &report)?;
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult {
    if !(args.h > 0.0) || !(args.tol > 0.0) {
        return Err(CliError::Usage("--h and --tol must be positive".into()));
    }
    let results = run_suite(0..args.instances, args.h, args.tol)?;
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    let worst = results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    println!(
        "{} checks, {} over tolerance {:e}, worst relative error {worst:.3e}",
        results.len(),
        failed.len(),
        args.tol
    );
    if let Some(path) = &args.report {
        let mut report = Report::new(
            "gradcheck",
            None,
            json!({ "instances": args.instances, "h": args.h, "tol": args.tol, "results": results }),
        );
        report.metrics.insert("worst_relative_error".into(), JsonF64(worst));
        report.metrics.insert("failed".into(), JsonF64(failed.len() as f64));
        io::write_report(path, &report)?;
    }
    if let Some(first) = failed.first() {
        return Err(CliError::Breach(format!(
            "gradient check failed on {} of {} checks (first: seed {}, {:?}, rel error {:e})",
            failed.len(),
            results.len(),
            first.seed,
            first.loss_kind,
            first.max_relative_error
        )));
    }
    Ok(())
}
