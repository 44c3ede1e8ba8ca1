//! End-to-end run orchestration. A run is a directory of content-addressed
//! artifacts plus a manifest recording which stages completed and what they
//! wrote. Re-running the same configuration resumes after the last stage
//! whose artifacts still verify, and the manifest identity hash covers
//! everything except wall-clock time, so two identical runs agree on it
//! byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{assign_groups, generate_calibration, split_validation, CalibrationSet};
use crate::config::ExperimentConfig;
use crate::diagnostics::{
    alignment_for_state, dissimilarity_matrix, loss_delta_by_group, per_group_loss, write_json,
    DiagnosticsReport, GroupDelta, RunProfile, ALIGNMENT_BUCKETS,
};
use crate::diffusion::{train_fp, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::params::ParamVector;
use crate::quant::{
    block_calibrate, calibrate_activations, init_quant, BlockPlan, BlockReport, QuantState,
};
use crate::rng::stream;
use crate::weighting::{
    algorithm1_optimize, verify_lemma_42, verify_lemma_43, Lemma42Report, Lemma43Options,
    Lemma43Report, MetaReport, ReconObjective, SampleWeights,
};

pub const MANIFEST_VERSION: u32 = 1;

/// Whether block reconstruction runs under learned or uniform weights.
/// The mode is part of the run directory name, not of the configuration,
/// so one experiment definition covers both arms of a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Uniform,
    Weighted,
}

impl RunMode {
    pub fn label(self) -> &'static str {
        match self {
            RunMode::Uniform => "uniform",
            RunMode::Weighted => "weighted",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// How far [`run_full`] executes before returning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StopStage {
    FpTrain,
    Calibration,
    Quantize,
    Diagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Paths relative to the run directory, in the order they were written.
    pub artifacts: Vec<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub mode: RunMode,
    pub stages: Vec<StageRecord>,
    /// Hex SHA-256 of every artifact, keyed by run-relative path.
    pub artifacts: BTreeMap<String, String>,
    /// Covers config hash, seed, mode, and artifact hashes. Wall-clock is
    /// excluded, so repeated identical runs report identical identities.
    pub identity: String,
}

impl RunManifest {
    fn fresh(run_id: &str, config_hash: &str, seed: u64, mode: RunMode) -> Self {
        RunManifest {
            version: MANIFEST_VERSION,
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            mode,
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
            identity: String::new(),
        }
    }

    pub fn compute_identity(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_hash.as_bytes());
        h.update(b"\n");
        h.update(self.seed.to_le_bytes());
        h.update(self.mode.label().as_bytes());
        h.update(b"\n");
        for (path, hash) in &self.artifacts {
            h.update(path.as_bytes());
            h.update(b"=");
            h.update(hash.as_bytes());
            h.update(b"\n");
        }
        let digest: [u8; 32] = h.finalize().into();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    use std::io::Read;
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest: [u8; 32] = hasher.finalize().into();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_id: String,
    pub root: PathBuf,
    pub manifest: RunManifest,
    /// Final validation loss profile; present once diagnostics have run.
    pub profile: Option<RunProfile>,
}

/// Loads an existing manifest and keeps the longest prefix of stages whose
/// artifacts still hash to their recorded values; everything after the
/// first mismatch is dropped and will be recomputed.
fn load_or_init_manifest(
    root: &Path,
    run_id: &str,
    config_hash: &str,
    seed: u64,
    mode: RunMode,
) -> Result<RunManifest> {
    let path = root.join("manifest.json");
    if !path.is_file() {
        return Ok(RunManifest::fresh(run_id, config_hash, seed, mode));
    }
    let bytes = std::fs::read(&path)?;
    let m: RunManifest = serde_json::from_slice(&bytes).map_err(|e| Error::BadArtifact {
        path: path.clone(),
        why: e.to_string(),
    })?;
    if m.version != MANIFEST_VERSION
        || m.config_hash != config_hash
        || m.seed != seed
        || m.mode != mode
    {
        return Err(Error::BadArtifact {
            path,
            why: "existing manifest belongs to a different run".to_string(),
        });
    }
    let mut kept = Vec::new();
    'stages: for st in &m.stages {
        for rel in &st.artifacts {
            let file = root.join(rel);
            let verified = match m.artifacts.get(rel) {
                Some(hash) if file.is_file() => sha256_file(&file)? == *hash,
                _ => false,
            };
            if !verified {
                break 'stages;
            }
        }
        kept.push(st.clone());
    }
    let mut artifacts = BTreeMap::new();
    for st in &kept {
        for rel in &st.artifacts {
            artifacts.insert(rel.clone(), m.artifacts[rel].clone());
        }
    }
    Ok(RunManifest {
        version: m.version,
        run_id: m.run_id,
        config_hash: m.config_hash,
        seed: m.seed,
        mode: m.mode,
        stages: kept,
        artifacts,
        identity: String::new(),
    })
}

#[derive(Debug, Serialize)]
struct BlockArtifacts<'a> {
    report: &'a BlockReport,
    meta: Option<&'a MetaReport>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    mode: RunMode,
    root: PathBuf,
    manifest: RunManifest,
}

impl<'a> Runner<'a> {
    fn is_done(&self, name: &str) -> bool {
        self.manifest.stages.iter().any(|s| s.name == name)
    }

    fn save_manifest(&mut self) -> Result<()> {
        self.manifest.identity = self.manifest.compute_identity();
        write_json(&self.root.join("manifest.json"), &self.manifest)
    }

    fn record(&mut self, name: &str, artifacts: Vec<String>, started: Instant) -> Result<()> {
        for rel in &artifacts {
            let hash = sha256_file(&self.root.join(rel))?;
            self.manifest.artifacts.insert(rel.clone(), hash);
        }
        self.manifest.stages.push(StageRecord {
            name: name.to_string(),
            artifacts,
            seconds: started.elapsed().as_secs_f64(),
        });
        self.save_manifest()
    }

    fn finish(self, profile: Option<RunProfile>) -> Result<RunOutcome> {
        Ok(RunOutcome {
            run_id: self.manifest.run_id.clone(),
            root: self.root,
            manifest: self.manifest,
            profile,
        })
    }

    fn stage_fp_train(
        &mut self,
        schedule: &NoiseSchedule,
        arch: &Architecture,
    ) -> Result<ParamVector> {
        let rel = "checkpoints/fp.qcw";
        if self.is_done("fp-train") {
            return ParamVector::load(&self.root.join(rel));
        }
        let started = Instant::now();
        let d = &self.cfg.diffusion;
        let mut rng = stream(self.seed, "model-init", 0);
        let init = arch.init_params(&mut rng)?;
        let (fp, report) = train_fp(arch, init, schedule, &d.dataset, &d.train, self.seed)?;
        fp.save(&self.root.join(rel))?;
        write_json(&self.root.join("reports/fp.json"), &report)?;
        self.record(
            "fp-train",
            vec![rel.to_string(), "reports/fp.json".to_string()],
            started,
        )?;
        Ok(fp)
    }

    fn stage_calibration(
        &mut self,
        schedule: &NoiseSchedule,
        arch: &Architecture,
        fp: &ParamVector,
    ) -> Result<CalibrationSet> {
        let rel = "checkpoints/calib.qcw";
        if self.is_done("calibration") {
            let set = CalibrationSet::load(&self.root.join(rel))?;
            if set.schedule_hash() != schedule.content_hash() {
                return Err(Error::BadArtifact {
                    path: self.root.join(rel),
                    why: "calibration set was built against a different noise schedule"
                        .to_string(),
                });
            }
            return Ok(set);
        }
        let started = Instant::now();
        let c = &self.cfg.calibration;
        let mut set =
            generate_calibration(schedule, arch, fp, c.trajectories, c.interval, self.seed)?;
        split_validation(&mut set, c.val_fraction, self.seed)?;
        assign_groups(&mut set, c.groups)?;
        set.save(&self.root.join(rel))?;
        self.record("calibration", vec![rel.to_string()], started)?;
        Ok(set)
    }

    fn stage_quant_init(
        &mut self,
        arch: &Architecture,
        fp: &ParamVector,
        calib: &CalibrationSet,
    ) -> Result<QuantState> {
        let rel = "checkpoints/quant-init.qcw";
        if self.is_done("quant-init") {
            return QuantState::load(&self.root.join(rel));
        }
        let started = Instant::now();
        let mut state = init_quant(arch, fp, &self.cfg.quant)?;
        if self.cfg.quant.act_bits.is_some() {
            calibrate_activations(arch, fp, calib, &mut state)?;
        }
        state.save(&self.root.join(rel))?;
        self.record(
            "quant-init",
            vec![rel.to_string(), format!("{rel}.json")],
            started,
        )?;
        Ok(state)
    }

    /// Runs one block reconstruction, optionally preceded by a round of
    /// weight optimization against the current partially quantized model.
    /// On replay the stored checkpoint and weights are loaded instead.
    fn stage_block(
        &mut self,
        arch: &Architecture,
        fp: &ParamVector,
        calib: &CalibrationSet,
        plan: &BlockPlan,
        state: &mut QuantState,
        weights: &mut SampleWeights,
        block_idx: usize,
    ) -> Result<()> {
        let name = format!("block-{block_idx}");
        let ckpt = format!("checkpoints/quant-block{block_idx}.qcw");
        let weights_rel = format!("reports/weights-block{block_idx}.json");
        if self.is_done(&name) {
            *state = QuantState::load(&self.root.join(&ckpt))?;
            let weights_path = self.root.join(&weights_rel);
            if weights_path.is_file() {
                *weights = SampleWeights::load(&weights_path)?;
            }
            return Ok(());
        }
        let started = Instant::now();
        let w = &self.cfg.weighting;
        let mut artifacts = Vec::new();
        let mut meta = None;
        let learn = self.mode == RunMode::Weighted
            && w.meta_iters > 0
            && (w.update_every_block || block_idx == 0);
        if learn {
            let theta = state.effective_params(fp)?;
            let obj = ReconObjective::new(arch, fp, calib)?;
            let (next, report) = algorithm1_optimize(
                &obj,
                &theta,
                weights,
                &w.meta_config(),
                self.seed,
                block_idx as u64,
            )?;
            *weights = next;
            weights.save(&self.root.join(&weights_rel))?;
            artifacts.push(weights_rel);
            meta = Some(report);
        }
        let omega = weights.weights()?;
        let report = block_calibrate(arch, fp, state, plan, block_idx, calib, &omega, self.seed)?;
        state.save(&self.root.join(&ckpt))?;
        let report_rel = format!("reports/block{block_idx}.json");
        write_json(
            &self.root.join(&report_rel),
            &BlockArtifacts {
                report: &report,
                meta: meta.as_ref(),
            },
        )?;
        artifacts.push(ckpt.clone());
        artifacts.push(format!("{ckpt}.json"));
        artifacts.push(report_rel);
        self.record(&name, artifacts, started)
    }

    fn stage_diagnostics(
        &mut self,
        arch: &Architecture,
        fp: &ParamVector,
        calib: &CalibrationSet,
        plan: &BlockPlan,
        state: &QuantState,
        weights: &SampleWeights,
    ) -> Result<RunProfile> {
        if self.is_done("diagnostics") {
            let bytes = std::fs::read(self.root.join("reports/profile.json"))?;
            return Ok(serde_json::from_slice(&bytes)?);
        }
        let started = Instant::now();
        let obj = ReconObjective::new(arch, fp, calib)?;
        let theta_final = state.effective_params(fp)?;
        // The "initial" views describe plain round-to-nearest: a fresh
        // initialization with every layer frozen at its rounding threshold.
        let mut init_state = QuantState::load(&self.root.join("checkpoints/quant-init.qcw"))?;
        for layer in &mut init_state.layers {
            layer.frozen = true;
        }
        let theta_init = init_state.effective_params(fp)?;
        // Alignment pairs the committed weights with gradients taken at the
        // state the last weight optimization ran against: earlier blocks
        // frozen, the optimized block and everything after still exact.
        // Calibration afterwards fits away precisely the residuals the
        // high-weight samples were selected for, so the final state carries
        // no readable trace of the selection.
        let meta_ckpt = if self.cfg.weighting.update_every_block && plan.len() >= 2 {
            format!("checkpoints/quant-block{}.qcw", plan.len() - 2)
        } else {
            "checkpoints/quant-init.qcw".to_string()
        };
        let theta_meta = QuantState::load(&self.root.join(&meta_ckpt))?.effective_params(fp)?;

        let report = DiagnosticsReport {
            config_hash: self.manifest.config_hash.clone(),
            seed: self.seed,
            dissimilarity_initial: Some(dissimilarity_matrix(&obj, &theta_init, false)?),
            dissimilarity_final: Some(dissimilarity_matrix(&obj, &theta_final, false)?),
            group_losses_initial: Some(per_group_loss(&obj, &theta_init)?),
            group_losses_final: per_group_loss(&obj, &theta_final)?,
            alignment: Some(alignment_for_state(&obj, &theta_meta, weights, ALIGNMENT_BUCKETS)?),
            lemma43: None,
            lemma42: None,
            warnings: state.warnings.clone(),
        };
        report.validate()?;
        write_json(&self.root.join("reports/diagnostics.json"), &report)?;

        let profile = RunProfile {
            config: self.cfg.canonical_value()?,
            seed: self.seed,
            profile: report.group_losses_final.clone(),
        };
        write_json(&self.root.join("reports/profile.json"), &profile)?;

        let csv: [(&str, String); 5] = [
            (
                "csv/dissimilarity-initial.csv",
                report.dissimilarity_initial.as_ref().unwrap().to_csv(),
            ),
            (
                "csv/dissimilarity-final.csv",
                report.dissimilarity_final.as_ref().unwrap().to_csv(),
            ),
            (
                "csv/group-losses-initial.csv",
                report.group_losses_initial.as_ref().unwrap().to_csv(),
            ),
            ("csv/group-losses-final.csv", report.group_losses_final.to_csv()),
            ("csv/alignment.csv", report.alignment.as_ref().unwrap().to_csv()),
        ];
        let mut artifacts = vec![
            "reports/diagnostics.json".to_string(),
            "reports/profile.json".to_string(),
        ];
        for (rel, text) in csv {
            std::fs::write(self.root.join(rel), text)?;
            artifacts.push(rel.to_string());
        }
        self.record("diagnostics", artifacts, started)?;
        Ok(profile)
    }
}

/// Executes (or resumes) one run up to `stop` and returns its manifest.
/// The run directory is `<out_root>/<mode>-s<seed>-<hash8>`.
pub fn run_full(
    cfg: &ExperimentConfig,
    seed: u64,
    mode: RunMode,
    out_root: &Path,
    stop: StopStage,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let config_hash = cfg.config_hash()?;
    let run_id = format!("{}-s{seed}-{}", mode.label(), &config_hash[..8]);
    let root = out_root.join(&run_id);
    for sub in ["checkpoints", "reports", "csv"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    let manifest = load_or_init_manifest(&root, &run_id, &config_hash, seed, mode)?;
    let mut runner = Runner {
        cfg,
        seed,
        mode,
        root,
        manifest,
    };
    runner.save_manifest()?;

    let d = &cfg.diffusion;
    let schedule = NoiseSchedule::linear(d.t_steps, d.beta_start, d.beta_end)?;
    let arch = Architecture::mlp(
        d.dataset.dim(),
        d.width,
        d.hidden,
        d.time_embed_dim,
        d.layer_norm,
    )?;

    let fp = runner.stage_fp_train(&schedule, &arch)?;
    if stop == StopStage::FpTrain {
        return runner.finish(None);
    }

    let calib = runner.stage_calibration(&schedule, &arch, &fp)?;
    if stop == StopStage::Calibration {
        return runner.finish(None);
    }

    let plan = BlockPlan::new(&arch)?;
    let mut state = runner.stage_quant_init(&arch, &fp, &calib)?;
    let mut weights = SampleWeights::uniform(calib.len(), cfg.weighting.tau);
    for block_idx in 0..plan.len() {
        runner.stage_block(&arch, &fp, &calib, &plan, &mut state, &mut weights, block_idx)?;
    }
    if stop == StopStage::Quantize {
        return runner.finish(None);
    }

    let profile = runner.stage_diagnostics(&arch, &fp, &calib, &plan, &state, &weights)?;
    runner.finish(Some(profile))
}

/// One weighted-versus-uniform comparison at a single seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub uniform_val_mse: f64,
    pub weighted_val_mse: f64,
    /// Weighted run at or below the uniform run on global validation loss.
    pub improved: bool,
    /// The group with the highest uniform loss got strictly better.
    pub worst_group_improved: bool,
    pub deltas: Vec<GroupDelta>,
}

/// Runs both arms at one seed and compares their final loss profiles.
/// Arms already on disk are resumed, not recomputed.
pub fn run_baseline_pair(
    cfg: &ExperimentConfig,
    seed: u64,
    out_root: &Path,
) -> Result<ComparisonReport> {
    let missing = || Error::invalid("comparison", "diagnostics stage produced no profile");
    let uniform = run_full(cfg, seed, RunMode::Uniform, out_root, StopStage::Diagnostics)?;
    let weighted = run_full(cfg, seed, RunMode::Weighted, out_root, StopStage::Diagnostics)?;
    let up = uniform.profile.ok_or_else(missing)?;
    let wp = weighted.profile.ok_or_else(missing)?;
    let deltas = loss_delta_by_group(&wp, &up)?;
    // Deltas are sorted by ascending uniform loss, so the worst group is last.
    let worst_group_improved = deltas.last().map(|d| d.delta > 0.0).unwrap_or(false);
    Ok(ComparisonReport {
        seed,
        uniform_val_mse: up.profile.global,
        weighted_val_mse: wp.profile.global,
        improved: wp.profile.global <= up.profile.global,
        worst_group_improved,
        deltas,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub runs: Vec<ComparisonReport>,
    /// Seeds where the weighted arm was at or below the uniform arm.
    pub improved: usize,
    /// Seeds where the highest-loss group got strictly better.
    pub worst_group_improved: usize,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("seed,uniform_val_mse,weighted_val_mse,improved,worst_group_improved\n");
        for r in &self.runs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.seed, r.uniform_val_mse, r.weighted_val_mse, r.improved, r.worst_group_improved
            ));
        }
        out
    }
}

/// Runs the baseline pair at every seed and tallies the outcomes.
pub fn compare_over_seeds(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out_root: &Path,
) -> Result<SweepReport> {
    if seeds.is_empty() {
        return Err(Error::EmptySet("seed list"));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        runs.push(run_baseline_pair(cfg, seed, out_root)?);
    }
    let improved = runs.iter().filter(|r| r.improved).count();
    let worst_group_improved = runs.iter().filter(|r| r.worst_group_improved).count();
    Ok(SweepReport {
        config_hash: cfg.config_hash()?,
        runs,
        improved,
        worst_group_improved,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub config_hash: String,
    pub seed: u64,
    pub lemma43: Lemma43Report,
    pub lemma42: Lemma42Report,
}

/// Runs both lemma checks against the round-to-nearest quantization of a
/// freshly trained model under uniform weights. Nothing is written to disk.
pub fn run_verification(cfg: &ExperimentConfig, seed: u64) -> Result<VerificationReport> {
    cfg.validate()?;
    let d = &cfg.diffusion;
    let schedule = NoiseSchedule::linear(d.t_steps, d.beta_start, d.beta_end)?;
    let arch = Architecture::mlp(
        d.dataset.dim(),
        d.width,
        d.hidden,
        d.time_embed_dim,
        d.layer_norm,
    )?;
    let mut rng = stream(seed, "model-init", 0);
    let init = arch.init_params(&mut rng)?;
    let (fp, _) = train_fp(&arch, init, &schedule, &d.dataset, &d.train, seed)?;
    let c = &cfg.calibration;
    let mut calib = generate_calibration(&schedule, &arch, &fp, c.trajectories, c.interval, seed)?;
    split_validation(&mut calib, c.val_fraction, seed)?;
    assign_groups(&mut calib, c.groups)?;
    let mut state = init_quant(&arch, &fp, &cfg.quant)?;
    for layer in &mut state.layers {
        layer.frozen = true;
    }
    let theta_q = state.effective_params(&fp)?;
    let obj = ReconObjective::new(&arch, &fp, &calib)?;
    let weights = SampleWeights::uniform(calib.len(), cfg.weighting.tau);
    let v = &cfg.verify;
    let opts = Lemma43Options {
        eta_pseudo: v.eta_pseudo,
        eta_inner: v.eta_inner,
        t_acc: v.t_acc,
        batch_size: v.batch_size,
    };
    let lemma43 = verify_lemma_43(&obj, &theta_q, &weights, &opts, seed)?;
    let lemma42 = verify_lemma_42(
        &obj,
        &theta_q,
        &weights,
        v.eta_inner,
        v.lemma42_configs,
        v.lemma42_spread,
        seed,
    )?;
    Ok(VerificationReport {
        config_hash: cfg.config_hash()?,
        seed,
        lemma43,
        lemma42,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Budgets small enough that a full run takes well under a second.
    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.diffusion.t_steps = 6;
        cfg.diffusion.width = 8;
        cfg.diffusion.hidden = 2;
        cfg.diffusion.time_embed_dim = 4;
        cfg.diffusion.train.iters = 60;
        cfg.diffusion.train.batch_size = 32;
        cfg.diffusion.train.train_size = 128;
        cfg.diffusion.train.val_size = 32;
        cfg.calibration.trajectories = 12;
        cfg.calibration.interval = 2;
        cfg.calibration.val_fraction = 0.25;
        cfg.calibration.groups = 3;
        cfg.quant.iters_per_block = 40;
        cfg.quant.minibatch = 16;
        cfg.weighting.meta_iters = 8;
        cfg.weighting.t_acc = 2;
        cfg.weighting.batch_size = 8;
        cfg.verify.t_acc = 2;
        cfg.verify.batch_size = 4;
        cfg.verify.lemma42_configs = 5;
        cfg
    }

    fn expected_stages() -> Vec<&'static str> {
        vec![
            "fp-train",
            "calibration",
            "quant-init",
            "block-0",
            "block-1",
            "block-2",
            "diagnostics",
        ]
    }

    #[test]
    fn full_run_writes_every_stage_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let out = run_full(&cfg, 5, RunMode::Weighted, dir.path(), StopStage::Diagnostics)
            .unwrap();
        let names: Vec<&str> = out.manifest.stages.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, expected_stages());
        assert!(out.profile.is_some());
        assert!(!out.manifest.identity.is_empty());
        for (rel, hash) in &out.manifest.artifacts {
            let path = out.root.join(rel);
            assert!(path.is_file(), "missing artifact {rel}");
            assert_eq!(&sha256_file(&path).unwrap(), hash, "stale hash for {rel}");
        }
        // Weight files exist for every block because updates run per block.
        assert!(out.root.join("reports/weights-block2.json").is_file());
        assert!(out.root.join("csv/alignment.csv").is_file());
    }

    #[test]
    fn identical_runs_report_identical_identity() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let ra = run_full(&cfg, 11, RunMode::Weighted, a.path(), StopStage::Diagnostics).unwrap();
        let rb = run_full(&cfg, 11, RunMode::Weighted, b.path(), StopStage::Diagnostics).unwrap();
        assert_eq!(ra.manifest.identity, rb.manifest.identity);
        assert_eq!(ra.manifest.artifacts, rb.manifest.artifacts);
        let ca = std::fs::read(ra.root.join("checkpoints/quant-block2.qcw")).unwrap();
        let cb = std::fs::read(rb.root.join("checkpoints/quant-block2.qcw")).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn resume_replays_finished_stages_and_recovers_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let first =
            run_full(&cfg, 3, RunMode::Weighted, dir.path(), StopStage::Calibration).unwrap();
        assert_eq!(first.manifest.stages.len(), 2);
        let fp_hash = first.manifest.artifacts["checkpoints/fp.qcw"].clone();

        let full =
            run_full(&cfg, 3, RunMode::Weighted, dir.path(), StopStage::Diagnostics).unwrap();
        assert_eq!(full.manifest.stages.len(), expected_stages().len());
        assert_eq!(full.manifest.artifacts["checkpoints/fp.qcw"], fp_hash);
        let identity = full.manifest.identity.clone();

        // Damaging a middle artifact drops it and everything after it; the
        // rerun recomputes from there and lands on the same identity.
        let victim = full.root.join("checkpoints/quant-block0.qcw");
        let mut bytes = std::fs::read(&victim).unwrap();
        bytes.push(0xfe);
        std::fs::write(&victim, bytes).unwrap();
        let repaired =
            run_full(&cfg, 3, RunMode::Weighted, dir.path(), StopStage::Diagnostics).unwrap();
        assert_eq!(repaired.manifest.identity, identity);
    }

    #[test]
    fn manifest_for_a_different_run_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let out = run_full(&cfg, 2, RunMode::Uniform, dir.path(), StopStage::FpTrain).unwrap();
        // Forging the seed in place makes the directory lie about itself.
        let path = out.root.join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"seed\": 2", "\"seed\": 9")).unwrap();
        let err = run_full(&cfg, 2, RunMode::Uniform, dir.path(), StopStage::FpTrain).unwrap_err();
        assert!(matches!(err, Error::BadArtifact { .. }));
    }

    #[test]
    fn identity_ignores_wall_clock() {
        let mut m = RunManifest::fresh("weighted-s1-abcd1234", "abcd", 1, RunMode::Weighted);
        m.artifacts
            .insert("checkpoints/fp.qcw".to_string(), "00ff".to_string());
        m.stages.push(StageRecord {
            name: "fp-train".to_string(),
            artifacts: vec!["checkpoints/fp.qcw".to_string()],
            seconds: 1.0,
        });
        let a = m.compute_identity();
        m.stages[0].seconds = 999.0;
        assert_eq!(a, m.compute_identity());
        m.artifacts
            .insert("checkpoints/calib.qcw".to_string(), "11aa".to_string());
        assert_ne!(a, m.compute_identity());
    }

    #[test]
    fn uniform_and_disabled_weighting_agree_byte_for_byte() {
        let base = tiny_config();
        let mut no_iters = base.clone();
        no_iters.weighting.meta_iters = 0;
        let mut zero_step = base.clone();
        zero_step.weighting.eta_outer = 0.0;

        let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
        let uniform =
            run_full(&base, 4, RunMode::Uniform, dirs[0].path(), StopStage::Quantize).unwrap();
        let ablated =
            run_full(&no_iters, 4, RunMode::Weighted, dirs[1].path(), StopStage::Quantize)
                .unwrap();
        let frozen =
            run_full(&zero_step, 4, RunMode::Weighted, dirs[2].path(), StopStage::Quantize)
                .unwrap();

        for rel in [
            "checkpoints/quant-block2.qcw",
            "checkpoints/quant-block2.qcw.json",
        ] {
            let u = std::fs::read(uniform.root.join(rel)).unwrap();
            let a = std::fs::read(ablated.root.join(rel)).unwrap();
            let f = std::fs::read(frozen.root.join(rel)).unwrap();
            assert_eq!(u, a, "meta_iters = 0 diverged from uniform on {rel}");
            assert_eq!(u, f, "eta_outer = 0 diverged from uniform on {rel}");
        }
    }

    #[test]
    fn baseline_pair_compares_group_for_group() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let report = run_baseline_pair(&cfg, 1, dir.path()).unwrap();
        assert_eq!(report.deltas.len(), 3);
        assert!(report.uniform_val_mse.is_finite() && report.uniform_val_mse > 0.0);
        assert!(report.weighted_val_mse.is_finite() && report.weighted_val_mse > 0.0);
        // Ascending uniform loss is the documented delta order.
        for pair in report.deltas.windows(2) {
            assert!(pair[0].uniform <= pair[1].uniform);
        }
        let sweep = compare_over_seeds(&cfg, &[1, 2], dir.path()).unwrap();
        assert_eq!(sweep.runs.len(), 2);
        assert!(sweep.improved <= 2);
        let csv = sweep.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("seed,"));
    }

    #[test]
    fn verification_runs_both_checks() {
        let report = run_verification(&tiny_config(), 6).unwrap();
        assert!(report.lemma43.composite_residual.is_finite());
        assert!(report.lemma43.mse_only_residual.is_finite());
        assert!(report.lemma42.degenerate || report.lemma42.spearman.is_some());
    }
}
