//! One function per pipeline stage, reading and writing a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use sieve_core::pipeline::{
    assemble_report, hypothesize_all, select_neurons, ClusterRecord, HypothesisStage, Verification,
};
use sieve_core::selection::SelectionResult;
use sieve_core::synth::{
    generate_world, planted_recovery_check, synth_generate_images, GroundTruth, SyntheticWorldSpec,
    GENERATOR_ID,
};
use sieve_core::tensor::jsonio::{read_json, read_jsonl, write_json, write_jsonl};
use sieve_core::tensor::{compare_ids, AlignmentStatus};
use sieve_core::verification::{
    agreement_metrics, build_generation_plan, filter_by_initial_mean, verify_plan, GenManifest,
    GenerationPlan, SpaceAgreement, VerificationRecord,
};
use sieve_core::{
    ActivationMapStack, ActivationTable, ConceptSet, EmbeddingTable, RunManifest, SieveError, Stage,
};

use crate::config::{sha256_hex, AgreementConfig, PipelineConfig};
use crate::error::{CliError, CliResult};
use crate::rundir::{
    clear_downstream, manifest_path, require_prerequisite, stage_dir, StagingDir, GENERATE_DIR,
    INPUTS_DIR, MANIFEST,
};

pub const SELECTION: &str = "selection.jsonl";
pub const CLUSTERS: &str = "clusters.jsonl";
pub const HYPOTHESES: &str = "hypotheses.jsonl";
pub const GENPLAN: &str = "genplan.json";
pub const VERIFICATION: &str = "verification.jsonl";
pub const REPORT: &str = "report.json";
pub const SUMMARY: &str = "summary.md";
pub const RECOVERY: &str = "recovery.json";
pub const GEN_ACTS: &str = "gen_acts.svt1";
pub const GEN_MANIFEST: &str = "gen_manifest.json";

/// A run directory together with its resolved configuration.
#[derive(Debug, Clone)]
pub struct Context {
    pub run_dir: PathBuf,
    pub config: PipelineConfig,
    pub digest: String,
}

impl Context {
    pub fn new(run_dir: impl Into<PathBuf>, config: PipelineConfig) -> Self {
        let digest = config.digest();
        Self {
            run_dir: run_dir.into(),
            config,
            digest,
        }
    }

    fn manifest(&self, stage: Stage) -> RunManifest {
        RunManifest::new(stage, self.digest.clone())
    }

    fn stage_file(&self, stage: Stage, file: &str) -> PathBuf {
        stage_dir(&self.run_dir, stage).join(file)
    }
}

fn finish(
    ctx: &Context,
    stage: Stage,
    out: StagingDir,
    mut manifest: RunManifest,
    outputs: &[&str],
) -> CliResult<PathBuf> {
    manifest.outputs = outputs.iter().map(|s| s.to_string()).collect();
    manifest.check_inputs()?;
    manifest.save(&out.path(MANIFEST))?;
    let dir = out.commit()?;
    clear_downstream(&ctx.run_dir, stage)?;
    Ok(dir)
}

pub fn run_select(ctx: &Context) -> CliResult<String> {
    require_prerequisite(&ctx.run_dir, Stage::Select)?;
    let paths = &ctx.config.paths;
    let params = ctx.config.params()?;
    let acts = ActivationTable::load(&paths.activations)?;
    let mut manifest = ctx
        .manifest(Stage::Select)
        .with_input("activations", &paths.activations);
    let maps = if paths.maps.exists() {
        let maps = ActivationMapStack::load(&paths.maps)?;
        if let AlignmentStatus::Mismatch {
            missing_in_right,
            missing_in_left,
        } = compare_ids(acts.sample_ids(), maps.sample_ids())
        {
            return Err(SieveError::Validation(format!(
                "activation maps do not cover the same samples as the activations ({} missing from maps, {} extra)",
                missing_in_right.len(),
                missing_in_left.len()
            ))
            .into());
        }
        manifest = manifest.with_input("maps", &paths.maps);
        Some(maps)
    } else {
        None
    };
    let selections = select_neurons(&acts, maps.as_ref(), &params.selection)?;
    let n_disc = selections.iter().filter(|s| s.discriminative).count();

    let out = StagingDir::begin(&ctx.run_dir, Stage::Select.name())?;
    write_jsonl(&out.path(SELECTION), &selections)?;
    manifest
        .notes
        .insert("n_neurons".into(), json!(selections.len()));
    manifest
        .notes
        .insert("n_discriminative".into(), json!(n_disc));
    manifest
        .notes
        .insert("crops_from_maps".into(), json!(maps.is_some()));
    let dir = finish(ctx, Stage::Select, out, manifest, &[SELECTION])?;
    Ok(format!(
        "select: {} neurons, {} discriminative at beta={} -> {}",
        selections.len(),
        n_disc,
        params.selection.beta,
        dir.display()
    ))
}

pub fn run_hypothesize(ctx: &Context) -> CliResult<String> {
    require_prerequisite(&ctx.run_dir, Stage::Hypothesize)?;
    let paths = &ctx.config.paths;
    let params = ctx.config.params()?;
    let selection_path = ctx.stage_file(Stage::Select, SELECTION);
    let selections: Vec<SelectionResult> = read_jsonl(&selection_path)?;
    let patch_embs = EmbeddingTable::load(&paths.patch_embeddings)?;
    let concept_embs = EmbeddingTable::load(&paths.concept_embeddings)?;
    let concepts = ConceptSet::load(&paths.concepts)?;
    let stage = hypothesize_all(&selections, &patch_embs, &concept_embs, &concepts, &params)?;
    let plan = build_generation_plan(&stage.hypotheses, params.n_images, params.seed)?;

    let out = StagingDir::begin(&ctx.run_dir, Stage::Hypothesize.name())?;
    write_jsonl(&out.path(CLUSTERS), &stage.clusters)?;
    write_jsonl(&out.path(HYPOTHESES), &stage.hypotheses)?;
    write_json(&out.path(GENPLAN), &plan)?;
    let mut manifest = ctx
        .manifest(Stage::Hypothesize)
        .with_input("selection", &selection_path)
        .with_input("patch_embeddings", &paths.patch_embeddings)
        .with_input("concept_embeddings", &paths.concept_embeddings)
        .with_input("concepts", &paths.concepts);
    manifest
        .notes
        .insert("n_clustered_neurons".into(), json!(stage.clusters.len()));
    manifest
        .notes
        .insert("n_hypotheses".into(), json!(stage.hypotheses.len()));
    manifest
        .notes
        .insert("n_plan_entries".into(), json!(plan.entries.len()));
    let dir = finish(
        ctx,
        Stage::Hypothesize,
        out,
        manifest,
        &[CLUSTERS, HYPOTHESES, GENPLAN],
    )?;
    Ok(format!(
        "hypothesize: {} neurons clustered, {} hypotheses, {} generation entries -> {}",
        stage.clusters.len(),
        stage.hypotheses.len(),
        plan.entries.len(),
        dir.display()
    ))
}

/// Generated activations for `plan`: the adapter's files when they match the
/// plan, else the synthetic world's own generator when the run has one.
fn obtain_generated(
    ctx: &Context,
    plan: &GenerationPlan,
    plan_digest: &str,
    plan_path: &Path,
) -> CliResult<(ActivationTable, GenManifest, bool)> {
    let paths = &ctx.config.paths;
    let synth = paths.synth_world.exists();
    if paths.gen_manifest.exists() && paths.generated_activations.exists() {
        let gm: GenManifest = read_json(&paths.gen_manifest)?;
        let stale = gm.plan_digest.as_deref().is_some_and(|d| d != plan_digest);
        if !stale {
            return Ok((
                ActivationTable::load(&paths.generated_activations)?,
                gm,
                false,
            ));
        }
        if !(synth && gm.generator == GENERATOR_ID) {
            return Err(SieveError::Validation(format!(
                "{} was produced for a different generation plan than {}",
                paths.gen_manifest.display(),
                plan_path.display()
            ))
            .into());
        }
    }
    if !synth {
        return Err(SieveError::StageOrder(format!(
            "generation plan {} has not been fulfilled; the generation adapter must write {} and {}",
            plan_path.display(),
            paths.generated_activations.display(),
            paths.gen_manifest.display()
        ))
        .into());
    }
    let spec: SyntheticWorldSpec = read_json(&paths.synth_world)?;
    let world = generate_world(&spec)?;
    let (table, mut gm) = synth_generate_images(plan, &world)?;
    gm.plan_digest = Some(plan_digest.to_string());
    let out = StagingDir::begin(&ctx.run_dir, GENERATE_DIR)?;
    table.save(&out.path(GEN_ACTS))?;
    write_json(&out.path(GEN_MANIFEST), &gm)?;
    out.commit()?;
    Ok((table, gm, true))
}

pub fn run_verify(ctx: &Context) -> CliResult<String> {
    require_prerequisite(&ctx.run_dir, Stage::Verify)?;
    let paths = &ctx.config.paths;
    let plan_path = ctx.stage_file(Stage::Hypothesize, GENPLAN);
    let plan_bytes = fs::read(&plan_path).map_err(|e| CliError::io(&plan_path, e))?;
    let plan_digest = sha256_hex(&plan_bytes);
    let plan: GenerationPlan = read_json(&plan_path)?;
    let mut manifest = ctx
        .manifest(Stage::Verify)
        .with_input("genplan", &plan_path)
        .with_input("activations", &paths.activations);

    let mut records: Vec<VerificationRecord> = Vec::new();
    let mut means = None;
    let mut generated_here = false;
    if ctx.config.verify && !plan.entries.is_empty() {
        let probe = ActivationTable::load(&paths.activations)?;
        let (generated, gm, synthesized) = obtain_generated(ctx, &plan, &plan_digest, &plan_path)?;
        generated_here = synthesized;
        if synthesized {
            manifest = manifest.with_input("synth_world", &paths.synth_world);
        } else {
            manifest = manifest
                .with_input("generated_activations", &paths.generated_activations)
                .with_input("gen_manifest", &paths.gen_manifest);
        }
        let raw = verify_plan(&plan, &probe, &generated, &gm)?;
        if !raw.is_empty() {
            let outcome = filter_by_initial_mean(&raw)?;
            means = Some((outcome.initial_mean, outcome.retained_mean));
            records = outcome.records;
        }
    }

    let out = StagingDir::begin(&ctx.run_dir, Stage::Verify.name())?;
    write_jsonl(&out.path(VERIFICATION), &records)?;
    let mode = if ctx.config.verify {
        "enabled"
    } else {
        "disabled"
    };
    manifest.notes.insert("verification".into(), json!(mode));
    manifest
        .notes
        .insert("plan_digest".into(), json!(plan_digest));
    manifest
        .notes
        .insert("n_records".into(), json!(records.len()));
    manifest.notes.insert(
        "n_retained".into(),
        json!(records.iter().filter(|r| r.retained).count()),
    );
    manifest
        .notes
        .insert("synthetic_generation".into(), json!(generated_here));
    if let Some((a, b)) = means {
        manifest.notes.insert("initial_mean_ar".into(), json!(a));
        manifest.notes.insert("retained_mean_ar".into(), json!(b));
    }
    let dir = finish(ctx, Stage::Verify, out, manifest, &[VERIFICATION])?;
    let detail = match (ctx.config.verify, means) {
        (false, _) => "verification disabled".to_string(),
        (true, None) => "no generated activations to score".to_string(),
        (true, Some((a, b))) => format!(
            "{} records, {} retained, mean AR {a:.4} -> {b:.4}",
            records.len(),
            records.iter().filter(|r| r.retained).count()
        ),
    };
    Ok(format!("verify: {detail} -> {}", dir.display()))
}

fn agreement(cfg: &AgreementConfig) -> CliResult<Vec<SpaceAgreement>> {
    let pairing: Vec<(String, String)> = read_json(&cfg.pairing)?;
    let spaces = cfg
        .spaces
        .iter()
        .map(|s| {
            Ok((
                EmbeddingTable::load(&s.predictions)?,
                EmbeddingTable::load(&s.labels)?,
            ))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(agreement_metrics(&spaces, &pairing)?)
}

pub fn run_report(ctx: &Context) -> CliResult<String> {
    let verify_manifest =
        require_prerequisite(&ctx.run_dir, Stage::Report)?.expect("report has a prerequisite");
    let paths = &ctx.config.paths;
    let selections: Vec<SelectionResult> = read_jsonl(&ctx.stage_file(Stage::Select, SELECTION))?;
    let clusters: Vec<ClusterRecord> = read_jsonl(&ctx.stage_file(Stage::Hypothesize, CLUSTERS))?;
    let hypotheses = read_jsonl(&ctx.stage_file(Stage::Hypothesize, HYPOTHESES))?;
    let records: Vec<VerificationRecord> =
        read_jsonl(&ctx.stage_file(Stage::Verify, VERIFICATION))?;
    let disabled = verify_manifest.notes.get("verification") == Some(&json!("disabled"));
    let outcome = if records.is_empty() {
        None
    } else {
        Some(filter_by_initial_mean(&records)?)
    };
    let verification = if disabled {
        Verification::Disabled
    } else {
        Verification::Done(outcome.as_ref())
    };
    let stage = HypothesisStage {
        clusters,
        hypotheses,
    };
    let mut report = assemble_report(&selections, &stage, verification);
    let mut manifest = ctx
        .manifest(Stage::Report)
        .with_input("selection", ctx.stage_file(Stage::Select, SELECTION))
        .with_input("clusters", ctx.stage_file(Stage::Hypothesize, CLUSTERS))
        .with_input("hypotheses", ctx.stage_file(Stage::Hypothesize, HYPOTHESES))
        .with_input("verification", ctx.stage_file(Stage::Verify, VERIFICATION));
    if let Some(a) = &paths.agreement {
        report.summary.agreement = agreement(a)?;
        manifest = manifest.with_input("agreement_pairing", &a.pairing);
    }

    let out = StagingDir::begin(&ctx.run_dir, Stage::Report.name())?;
    write_json(&out.path(REPORT), &report)?;
    fs::write(out.path(SUMMARY), report.to_markdown())
        .map_err(|e| CliError::io(out.path(SUMMARY), e))?;
    let mut outputs = vec![REPORT, SUMMARY];
    let mut recovery_line = String::new();
    if paths.ground_truth.exists() {
        let truth: GroundTruth = read_json(&paths.ground_truth)?;
        let metrics = planted_recovery_check(&report, &truth);
        write_json(&out.path(RECOVERY), &metrics)?;
        outputs.push(RECOVERY);
        manifest = manifest.with_input("ground_truth", &paths.ground_truth);
        recovery_line = format!(
            ", planted recovery {:.3} (top-1 {:.3}), distractor exclusion {:.3}",
            metrics.recovery, metrics.top1_recovery, metrics.distractor_exclusion
        );
    }
    let dir = finish(ctx, Stage::Report, out, manifest, &outputs)?;
    let s = &report.summary;
    Ok(format!(
        "report: {} discriminative neurons, {} of {} hypotheses retained{recovery_line} -> {}",
        s.n_discriminative,
        s.n_retained,
        s.n_hypotheses,
        dir.display()
    ))
}

pub fn run_stage(ctx: &Context, stage: Stage) -> CliResult<String> {
    match stage {
        Stage::Select => run_select(ctx),
        Stage::Hypothesize => run_hypothesize(ctx),
        Stage::Verify => run_verify(ctx),
        Stage::Report => run_report(ctx),
    }
}

/// Writes a synthetic world into `<out>/inputs` and clears any earlier stage
/// outputs there.
pub fn write_synth_run(spec: &SyntheticWorldSpec, out: &Path) -> CliResult<String> {
    let world = generate_world(spec)?;
    let staging = StagingDir::begin(out, INPUTS_DIR)?;
    world.acts.save(&staging.path("acts.svt1"))?;
    world.maps.save(&staging.path("maps.svt1"))?;
    world.patch_embs.save(&staging.path("patch_embs.svt1"))?;
    world
        .concept_embs
        .save(&staging.path("concept_embs.svt1"))?;
    world.concepts.save(&staging.path("concepts.json"))?;
    write_json(&staging.path("world.json"), spec)?;
    write_json(&staging.path("ground_truth.json"), &world.truth)?;
    let dir = staging.commit()?;
    for d in Stage::ALL
        .iter()
        .map(|s| stage_dir(out, *s))
        .chain([out.join(GENERATE_DIR)])
    {
        if d.exists() {
            fs::remove_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        }
    }
    Ok(format!(
        "synth: {} samples, {} neurons ({} planted, {} distractors), {} concepts -> {}",
        world.acts.n_samples(),
        world.acts.n_neurons(),
        world.truth.planted.len(),
        world.truth.distractors.len(),
        world.concepts.len(),
        dir.display()
    ))
}

/// True when every stage of `run_dir` has a manifest.
pub fn is_complete(run_dir: &Path) -> bool {
    Stage::ALL
        .iter()
        .all(|s| manifest_path(run_dir, *s).exists())
}
