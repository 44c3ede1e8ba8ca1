//! Analysis artifacts: gradient-dissimilarity matrices, per-group loss
//! profiles, the weight-vs-alignment table, and their CSV/JSON writers.
//!
//! Everything here is a pure function of a model snapshot. Gradients are
//! taken of the reconstruction error against the full-precision reference,
//! per-group statistics always use the validation split, and every
//! artifact serializes deterministically so a rerun reproduces files byte
//! for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::CalibrationSet;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::stats::spearman;
use crate::weighting::{GroupLoss, Lemma42Report, Lemma43Report, ReconObjective, SampleWeights};

/// Default bucket count for the alignment table.
pub const ALIGNMENT_BUCKETS: usize = 50;

/// Pairwise cosine distances between per-group gradients. A pair whose
/// cosine is undefined (a zero-norm gradient) is recorded as missing rather
/// than forced to an arbitrary distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityMatrix {
    pub labels: Vec<String>,
    /// Row-major `G x G` distances in [0, 2]; `None` marks an undefined
    /// pair. The diagonal is zero by definition.
    pub entries: Vec<Vec<Option<f64>>>,
}

impl DissimilarityMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i][j]
    }

    /// Checks the structural invariants: square, symmetric, zero diagonal,
    /// entries in [0, 2].
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.entries.len() != n || self.entries.iter().any(|row| row.len() != n) {
            return Err(Error::invalid("dissimilarity matrix", "not square"));
        }
        for i in 0..n {
            if self.entries[i][i] != Some(0.0) {
                return Err(Error::invalid(
                    "dissimilarity matrix",
                    format!("diagonal entry {i} is not zero"),
                ));
            }
            for j in 0..n {
                if self.entries[i][j] != self.entries[j][i] {
                    return Err(Error::invalid(
                        "dissimilarity matrix",
                        format!("asymmetric at ({i}, {j})"),
                    ));
                }
                if let Some(d) = self.entries[i][j] {
                    if !(0.0..=2.0).contains(&d) {
                        return Err(Error::invalid(
                            "dissimilarity matrix",
                            format!("entry ({i}, {j}) = {d} outside [0, 2]"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// CSV with group labels as both header row and leading column; missing
    /// entries render as `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group");
        for label in &self.labels {
            write!(out, ",{label}").unwrap();
        }
        out.push('\n');
        for (i, label) in self.labels.iter().enumerate() {
            out.push_str(label);
            for j in 0..self.labels.len() {
                match self.entries[i][j] {
                    Some(d) => write!(out, ",{d}").unwrap(),
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// One label per timestep group, naming the group's collected timestep
/// range.
pub fn group_labels(calib: &CalibrationSet) -> Vec<String> {
    let mut ranges: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for t in calib.collection_timesteps() {
        if let Ok(g) = calib.group_of_timestep(t) {
            let (lo, hi) = ranges.entry(g).or_insert((t, t));
            *lo = (*lo).min(t);
            *hi = (*hi).max(t);
        }
    }
    (0..calib.group_count())
        .map(|g| match ranges.get(&g) {
            Some((lo, hi)) if lo == hi => format!("t{lo}"),
            Some((lo, hi)) => format!("t{lo}-{hi}"),
            None => format!("g{g}"),
        })
        .collect()
}

/// Distance matrix from one gradient vector per group: entry (i, j) is
/// `1 - cos(g_i, g_j)`, missing where either gradient has zero norm.
pub fn dissimilarity_from_gradients(
    labels: Vec<String>,
    grads: &[ParamVector],
) -> Result<DissimilarityMatrix> {
    if labels.len() != grads.len() {
        return Err(Error::invalid(
            "dissimilarity matrix",
            format!("{} labels for {} gradients", labels.len(), grads.len()),
        ));
    }
    if grads.len() < 2 {
        return Err(Error::invalid("dissimilarity matrix", "needs at least two groups"));
    }
    let norms: Vec<f64> = grads.iter().map(|g| g.norm()).collect();
    let n = grads.len();
    let mut entries = vec![vec![Some(0.0); n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = if norms[i] > 0.0 && norms[j] > 0.0 {
                let cos = (grads[i].dot(&grads[j])? / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                Some(1.0 - cos)
            } else {
                None
            };
            entries[i][j] = d;
            entries[j][i] = d;
        }
    }
    Ok(DissimilarityMatrix { labels, entries })
}

/// Gradient-dissimilarity matrix of the reconstruction objective at
/// `theta`, over per-group validation gradients. With `per_sample`, each
/// entry pools pairwise cosines over individual sample gradients instead
/// of comparing the two group means.
pub fn dissimilarity_matrix(
    obj: &ReconObjective,
    theta: &ParamVector,
    per_sample: bool,
) -> Result<DissimilarityMatrix> {
    let calib = obj.calib();
    if calib.group_count() < 2 {
        return Err(Error::invalid(
            "dissimilarity matrix",
            "needs at least two groups",
        ));
    }
    let labels = group_labels(calib);
    if !per_sample {
        let mut grads = Vec::with_capacity(calib.group_count());
        for g in 0..calib.group_count() {
            let idx = calib.group_val_indices(g)?;
            grads.push(obj.mean_loss_grad(theta, &idx)?.1);
        }
        return dissimilarity_from_gradients(labels, &grads);
    }

    let mut group_grads = Vec::with_capacity(calib.group_count());
    for g in 0..calib.group_count() {
        let idx = calib.group_val_indices(g)?;
        if idx.is_empty() {
            return Err(Error::EmptySet("group validation samples"));
        }
        group_grads.push(obj.per_sample_grads(theta, &idx)?);
    }
    let n = group_grads.len();
    let mut entries = vec![vec![Some(0.0); n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for a in &group_grads[i] {
                let na = a.norm();
                if na == 0.0 {
                    continue;
                }
                for b in &group_grads[j] {
                    let nb = b.norm();
                    if nb == 0.0 {
                        continue;
                    }
                    total += (a.dot(b)? / (na * nb)).clamp(-1.0, 1.0);
                    pairs += 1;
                }
            }
            let d = if pairs > 0 {
                Some(1.0 - total / pairs as f64)
            } else {
                None
            };
            entries[i][j] = d;
            entries[j][i] = d;
        }
    }
    Ok(DissimilarityMatrix { labels, entries })
}

/// Per-group validation losses plus the pooled loss they recombine to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupLossProfile {
    /// Mean reconstruction error over the whole validation split.
    pub global: f64,
    pub groups: Vec<GroupLoss>,
}

impl GroupLossProfile {
    /// Count-weighted mean of the group losses, which equals `global` up to
    /// accumulation order.
    pub fn recombined(&self) -> f64 {
        let total: usize = self.groups.iter().map(|g| g.count).sum();
        let sum: f64 = self.groups.iter().map(|g| g.mse * g.count as f64).sum();
        sum / total as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,count,mse\n");
        for g in &self.groups {
            writeln!(out, "{},{},{}", g.group, g.count, g.mse).unwrap();
        }
        out
    }
}

/// Mean reconstruction error per timestep group over validation samples.
pub fn per_group_loss(obj: &ReconObjective, theta: &ParamVector) -> Result<GroupLossProfile> {
    let calib = obj.calib();
    let global = obj.mean_loss(theta, &calib.val_indices())?;
    let mut groups = Vec::with_capacity(calib.group_count());
    for g in 0..calib.group_count() {
        let idx = calib.group_val_indices(g)?;
        if idx.is_empty() {
            return Err(Error::EmptySet("group validation samples"));
        }
        groups.push(GroupLoss {
            group: g,
            count: idx.len(),
            mse: obj.mean_loss(theta, &idx)?,
        });
    }
    Ok(GroupLossProfile { global, groups })
}

/// Group-loss profile of one finished run, carrying enough identity to
/// check that two runs are comparable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunProfile {
    /// Full experiment configuration as a JSON tree.
    pub config: serde_json::Value,
    pub seed: u64,
    pub profile: GroupLossProfile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupDelta {
    pub group: usize,
    pub uniform: f64,
    pub weighted: f64,
    /// `uniform - weighted`; positive means weighting improved the group.
    pub delta: f64,
}

pub fn deltas_to_csv(deltas: &[GroupDelta]) -> String {
    let mut out = String::from("group,uniform,weighted,delta\n");
    for d in deltas {
        writeln!(out, "{},{},{},{}", d.group, d.uniform, d.weighted, d.delta).unwrap();
    }
    out
}

/// Flattens a JSON tree to dotted-path keys with scalar JSON values.
fn flatten_config(prefix: &str, value: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_config(&path, v, out);
            }
        }
        serde_json::Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten_config(&format!("{prefix}[{i}]"), v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), value.to_string());
        }
    }
}

/// Per-group loss differences between a weighted and a uniform run on the
/// same data, ordered by ascending uniform loss so the worst-off groups
/// come last. The runs must agree on seed and on every configuration key
/// outside the `weighting` section.
pub fn loss_delta_by_group(weighted: &RunProfile, uniform: &RunProfile) -> Result<Vec<GroupDelta>> {
    let mut keys = Vec::new();
    if weighted.seed != uniform.seed {
        keys.push("seed".to_string());
    }
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    flatten_config("", &weighted.config, &mut a);
    flatten_config("", &uniform.config, &mut b);
    let comparable = |k: &str| !k.starts_with("weighting.") && k != "weighting";
    for (k, v) in &a {
        if comparable(k) && b.get(k) != Some(v) {
            keys.push(k.clone());
        }
    }
    for k in b.keys() {
        if comparable(k) && !a.contains_key(k) {
            keys.push(k.clone());
        }
    }
    if !keys.is_empty() {
        keys.sort();
        keys.dedup();
        return Err(Error::ConfigMismatch { keys });
    }
    if weighted.profile.groups.len() != uniform.profile.groups.len() {
        return Err(Error::invalid(
            "run comparison",
            format!(
                "{} groups vs {}",
                weighted.profile.groups.len(),
                uniform.profile.groups.len()
            ),
        ));
    }
    let mut deltas: Vec<GroupDelta> = weighted
        .profile
        .groups
        .iter()
        .zip(&uniform.profile.groups)
        .map(|(w, u)| GroupDelta {
            group: u.group,
            uniform: u.mse,
            weighted: w.mse,
            delta: u.mse - w.mse,
        })
        .collect();
    deltas.sort_by(|x, y| {
        x.uniform
            .partial_cmp(&y.uniform)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.group.cmp(&y.group))
    });
    Ok(deltas)
}

/// One training sample's weight and its mean gradient alignment across
/// groups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub weight: f64,
    /// Mean over groups of the cosine between this sample's gradient and
    /// the group's validation gradient.
    pub alignment: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentBucket {
    pub count: usize,
    pub mean_weight: f64,
    pub mean_alignment: f64,
}

/// Weight-vs-alignment table: samples sorted by weight, bucketed evenly,
/// with a rank correlation over the bucket means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentTable {
    pub samples: Vec<AlignmentRow>,
    pub buckets: Vec<AlignmentBucket>,
    pub spearman: Option<f64>,
    /// Set when the correlation is undefined, e.g. under uniform weights.
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

impl AlignmentTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,count,mean_weight,mean_alignment\n");
        for (i, b) in self.buckets.iter().enumerate() {
            writeln!(out, "{},{},{},{}", i, b.count, b.mean_weight, b.mean_alignment).unwrap();
        }
        out
    }
}

/// Builds the alignment table from raw ingredients: one weight and one
/// gradient per training sample, plus one validation gradient per group.
/// Samples or groups with zero-norm gradients are dropped with a warning.
pub fn alignment_correlation(
    omega: &[f64],
    sample_grads: &[ParamVector],
    group_grads: &[ParamVector],
    buckets: usize,
) -> Result<AlignmentTable> {
    if omega.len() != sample_grads.len() {
        return Err(Error::invalid(
            "alignment table",
            format!("{} weights for {} gradients", omega.len(), sample_grads.len()),
        ));
    }
    if sample_grads.is_empty() {
        return Err(Error::EmptySet("alignment samples"));
    }
    if buckets == 0 {
        return Err(Error::invalid("alignment buckets", "must be positive"));
    }
    let mut warnings = Vec::new();
    let usable_groups: Vec<(&ParamVector, f64)> = group_grads
        .iter()
        .map(|g| (g, g.norm()))
        .filter(|(_, n)| *n > 0.0)
        .collect();
    if usable_groups.len() < group_grads.len() {
        warnings.push(format!(
            "{} group gradient(s) with zero norm skipped",
            group_grads.len() - usable_groups.len()
        ));
    }
    if usable_groups.is_empty() {
        return Err(Error::EmptySet("group gradients"));
    }

    let mut samples = Vec::with_capacity(omega.len());
    let mut dropped = 0usize;
    for (w, g) in omega.iter().zip(sample_grads) {
        let n = g.norm();
        if n == 0.0 {
            dropped += 1;
            continue;
        }
        let mut total = 0.0;
        for (gg, gn) in &usable_groups {
            total += (g.dot(gg)? / (n * gn)).clamp(-1.0, 1.0);
        }
        samples.push(AlignmentRow {
            weight: *w,
            alignment: total / usable_groups.len() as f64,
        });
    }
    if dropped > 0 {
        warnings.push(format!("{dropped} sample gradient(s) with zero norm dropped"));
    }
    if samples.is_empty() {
        return Err(Error::EmptySet("alignment samples"));
    }
    samples.sort_by(|a, b| {
        a.weight
            .partial_cmp(&b.weight)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let k = buckets.min(samples.len());
    if k < buckets {
        warnings.push(format!(
            "bucket count reduced from {buckets} to {k} for {} samples",
            samples.len()
        ));
    }
    // Even partition: the first `rem` buckets take one extra sample.
    let base = samples.len() / k;
    let rem = samples.len() % k;
    let mut out_buckets = Vec::with_capacity(k);
    let mut cursor = 0;
    for b in 0..k {
        let size = base + usize::from(b < rem);
        let chunk = &samples[cursor..cursor + size];
        cursor += size;
        out_buckets.push(AlignmentBucket {
            count: size,
            mean_weight: chunk.iter().map(|r| r.weight).sum::<f64>() / size as f64,
            mean_alignment: chunk.iter().map(|r| r.alignment).sum::<f64>() / size as f64,
        });
    }
    let xs: Vec<f64> = out_buckets.iter().map(|b| b.mean_weight).collect();
    let ys: Vec<f64> = out_buckets.iter().map(|b| b.mean_alignment).collect();
    let rho = spearman(&xs, &ys);
    Ok(AlignmentTable {
        samples,
        buckets: out_buckets,
        degenerate: rho.is_none(),
        spearman: rho,
        warnings,
    })
}

/// Alignment table for a model state: per-sample gradients over the
/// training split against per-group validation gradients, weights taken
/// from the current scores.
pub fn alignment_for_state(
    obj: &ReconObjective,
    theta: &ParamVector,
    weights: &SampleWeights,
    buckets: usize,
) -> Result<AlignmentTable> {
    let calib = obj.calib();
    let train = calib.train_indices();
    if train.is_empty() {
        return Err(Error::EmptySet("training split"));
    }
    let all_omega = weights.weights()?;
    let omega: Vec<f64> = train.iter().map(|&i| all_omega[i]).collect();
    let sample_grads = obj.per_sample_grads(theta, &train)?;
    let mut group_grads = Vec::with_capacity(calib.group_count());
    for g in 0..calib.group_count() {
        let idx = calib.group_val_indices(g)?;
        group_grads.push(obj.mean_loss_grad(theta, &idx)?.1);
    }
    alignment_correlation(&omega, &sample_grads, &group_grads, buckets)
}

/// Consolidated analysis report for one run. Wall-clock timings live in the
/// run manifest, never here, so the report is reproducible bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub config_hash: String,
    pub seed: u64,
    /// State before calibration, i.e. plain round-to-nearest.
    pub dissimilarity_initial: Option<DissimilarityMatrix>,
    pub dissimilarity_final: Option<DissimilarityMatrix>,
    pub group_losses_initial: Option<GroupLossProfile>,
    pub group_losses_final: GroupLossProfile,
    /// Weight-versus-alignment table evaluated at the model state the last
    /// weight optimization ran against, where the committed scores are
    /// meaningful; calibration afterwards shrinks exactly the residuals the
    /// high-weight samples were chosen for.
    pub alignment: Option<AlignmentTable>,
    pub lemma43: Option<Lemma43Report>,
    pub lemma42: Option<Lemma42Report>,
    pub warnings: Vec<String>,
}

impl DiagnosticsReport {
    /// Checks every embedded artifact's invariants and that all numbers are
    /// finite.
    pub fn validate(&self) -> Result<()> {
        for m in [&self.dissimilarity_initial, &self.dissimilarity_final]
            .into_iter()
            .flatten()
        {
            m.validate()?;
        }
        let check = |context: &str, v: f64| -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite {
                    context: context.to_string(),
                })
            }
        };
        for profile in std::iter::once(&self.group_losses_final)
            .chain(self.group_losses_initial.as_ref())
        {
            check("group loss profile", profile.global)?;
            for g in &profile.groups {
                check("group loss", g.mse)?;
            }
        }
        if let Some(table) = &self.alignment {
            for row in &table.samples {
                check("alignment row", row.weight)?;
                check("alignment row", row.alignment)?;
            }
            if let Some(rho) = table.spearman {
                check("alignment correlation", rho)?;
            }
        }
        if let Some(l) = &self.lemma43 {
            check("drift residual", l.mse_only_residual)?;
            check("drift residual", l.composite_residual)?;
        }
        if let Some(l) = &self.lemma42 {
            if let Some(rho) = l.spearman {
                check("surrogate correlation", rho)?;
            }
        }
        Ok(())
    }
}

/// Writes any serializable artifact as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{GroupSpec, TrajectoryState};
    use crate::model::Architecture;
    use crate::params::{ParamVector, SegmentTable};
    use crate::quant::{init_quant, QuantConfig};
    use crate::rng::stream;
    use crate::weighting::SampleWeights;
    use rand_distr::{Distribution, StandardNormal};
    use serde_json::json;

    fn pv(data: &[f64]) -> ParamVector {
        let table = SegmentTable::new(&[("g".to_string(), data.len())]).unwrap();
        ParamVector::from_data(table, data.to_vec()).unwrap()
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|g| format!("g{g}")).collect()
    }

    /// Three groups, each with train and validation samples.
    fn grouped_calib(n_per_group: usize, n_val: usize, seed: u64) -> CalibrationSet {
        let t_steps = 6;
        let mut rng = stream(seed, "diag-test-data", 0);
        let mut samples = Vec::new();
        let mut is_val = Vec::new();
        for g in 0..3 {
            for i in 0..n_per_group {
                let x: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
                samples.push(TrajectoryState { x, t: g * 2 + (i % 2) });
                is_val.push(i < n_val);
            }
        }
        let groups = GroupSpec {
            group_count: 3,
            group_of_timestep: (0..t_steps).map(|t| (t, t / 2)).collect(),
        };
        CalibrationSet::from_parts(2, t_steps, samples, is_val, groups)
    }

    fn toy_state(seed: u64) -> (Architecture, ParamVector, ParamVector) {
        let arch = Architecture::mlp(2, 8, 1, 4, false).unwrap();
        let mut rng = stream(seed, "model-init", 0);
        let params = arch.init_params(&mut rng).unwrap();
        let state = init_quant(&arch, &params, &QuantConfig::default()).unwrap();
        let mut nearest = state.clone();
        for layer in &mut nearest.layers {
            layer.frozen = true;
        }
        let theta_q = nearest.effective_params(&params).unwrap();
        (arch, params, theta_q)
    }

    #[test]
    fn identical_gradients_give_a_zero_matrix() {
        let g = pv(&[0.3, -0.7, 1.1]);
        let m = dissimilarity_from_gradients(labels(3), &[g.clone(), g.clone(), g]).unwrap();
        m.validate().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), Some(0.0));
            }
        }
    }

    #[test]
    fn opposite_gradients_sit_at_distance_two() {
        let g = pv(&[3.0, -4.0]);
        let mut neg = g.clone();
        neg.scale(-1.0);
        let m = dissimilarity_from_gradients(labels(2), &[g, neg]).unwrap();
        m.validate().unwrap();
        assert_eq!(m.get(0, 1), Some(2.0));
    }

    #[test]
    fn three_group_matrix_matches_hand_cosines() {
        let s = 1.0 / 2.0_f64.sqrt();
        let m = dissimilarity_from_gradients(
            labels(3),
            &[pv(&[1.0, 0.0]), pv(&[0.0, 1.0]), pv(&[s, s])],
        )
        .unwrap();
        m.validate().unwrap();
        assert!((m.get(0, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!((m.get(0, 2).unwrap() - (1.0 - s)).abs() < 1e-12);
        assert!((m.get(1, 2).unwrap() - (1.0 - s)).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_gradients_are_reported_missing() {
        let m = dissimilarity_from_gradients(
            labels(3),
            &[pv(&[1.0, 0.0]), pv(&[0.0, 0.0]), pv(&[0.0, 1.0])],
        )
        .unwrap();
        m.validate().unwrap();
        assert_eq!(m.get(0, 1), None);
        assert_eq!(m.get(1, 2), None);
        assert_eq!(m.get(1, 1), Some(0.0));
        assert!((m.get(0, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_malformed_matrices() {
        let mut m = dissimilarity_from_gradients(labels(2), &[pv(&[1.0]), pv(&[2.0])]).unwrap();
        m.entries[0][1] = Some(0.5);
        assert!(m.validate().is_err());
        m.entries[0][1] = m.entries[1][0];
        m.entries[1][1] = Some(0.1);
        assert!(m.validate().is_err());
        m.entries[1][1] = Some(0.0);
        m.entries[0][1] = Some(2.5);
        m.entries[1][0] = Some(2.5);
        assert!(m.validate().is_err());
    }

    #[test]
    fn model_state_matrices_hold_their_invariants() {
        let (arch, params, theta_q) = toy_state(5);
        let calib = grouped_calib(8, 3, 50);
        let obj = ReconObjective::new(&arch, &params, &calib).unwrap();
        for per_sample in [false, true] {
            let m = dissimilarity_matrix(&obj, &theta_q, per_sample).unwrap();
            m.validate().unwrap();
            assert_eq!(m.labels, vec!["t0-1", "t2-3", "t4-5"]);
            for i in 0..3 {
                for j in 0..3 {
                    assert!(m.get(i, j).is_some());
                }
            }
        }
    }

    #[test]
    fn group_losses_recombine_to_the_global_loss() {
        let (arch, params, theta_q) = toy_state(6);
        // Unequal validation counts across groups exercise the weighting.
        let calib = grouped_calib(9, 3, 51);
        let obj = ReconObjective::new(&arch, &params, &calib).unwrap();
        let profile = per_group_loss(&obj, &theta_q).unwrap();
        assert!(profile.global > 0.0);
        assert!((profile.global - profile.recombined()).abs() <= 1e-10 * profile.global);

        // The reference parameters reconstruct themselves exactly.
        let zero = per_group_loss(&obj, &params).unwrap();
        assert_eq!(zero.global, 0.0);
        for g in &zero.groups {
            assert_eq!(g.mse, 0.0);
        }
    }

    #[test]
    fn identical_runs_compare_to_zero_deltas() {
        let profile = GroupLossProfile {
            global: 0.2,
            groups: vec![
                GroupLoss { group: 0, count: 4, mse: 0.3 },
                GroupLoss { group: 1, count: 4, mse: 0.1 },
                GroupLoss { group: 2, count: 4, mse: 0.2 },
            ],
        };
        let run = RunProfile {
            config: json!({"quant": {"weight_bits": 4}, "weighting": {"tau": 1.0}}),
            seed: 7,
            profile,
        };
        let deltas = loss_delta_by_group(&run, &run).unwrap();
        assert_eq!(deltas.len(), 3);
        // Ascending by uniform loss: groups 1, 2, 0.
        let order: Vec<usize> = deltas.iter().map(|d| d.group).collect();
        assert_eq!(order, vec![1, 2, 0]);
        for d in &deltas {
            assert_eq!(d.delta, 0.0);
        }
    }

    #[test]
    fn comparison_rejects_mismatched_configs_by_key() {
        let profile = GroupLossProfile {
            global: 0.0,
            groups: vec![GroupLoss { group: 0, count: 1, mse: 0.0 }],
        };
        let base = RunProfile {
            config: json!({"quant": {"weight_bits": 4}, "weighting": {"tau": 1.0}}),
            seed: 7,
            profile: profile.clone(),
        };
        let mut other = base.clone();
        other.config = json!({"quant": {"weight_bits": 8}, "weighting": {"tau": 0.5}});
        other.seed = 8;
        let err = loss_delta_by_group(&base, &other).unwrap_err();
        match err {
            Error::ConfigMismatch { keys } => {
                assert_eq!(keys, vec!["quant.weight_bits".to_string(), "seed".to_string()]);
            }
            other => panic!("expected a config mismatch, got {other:?}"),
        }

        // Differences confined to the weighting section are the point of
        // the comparison and never a mismatch.
        let mut weighted = base.clone();
        weighted.config = json!({"quant": {"weight_bits": 4}, "weighting": {"tau": 0.25}});
        assert!(loss_delta_by_group(&weighted, &base).is_ok());
    }

    #[test]
    fn alignment_proportional_weights_correlate_perfectly() {
        // Sample gradients with known cosines against one group gradient.
        let group = vec![pv(&[1.0, 0.0])];
        let mut grads = Vec::new();
        let mut omega = Vec::new();
        let n = 60;
        for i in 0..n {
            let angle = 1.4 * (i as f64 / n as f64 - 0.5);
            grads.push(pv(&[angle.cos(), angle.sin()]));
            // Weight strictly increasing in the alignment cos(angle).
            omega.push(2.0 + angle.cos() * (1.0 + 0.001 * i as f64));
        }
        let table = alignment_correlation(&omega, &grads, &group, 10).unwrap();
        assert_eq!(table.buckets.len(), 10);
        assert_eq!(table.spearman, Some(1.0));
        assert!(!table.degenerate);
    }

    #[test]
    fn alignment_uniform_weights_are_degenerate() {
        let group = vec![pv(&[1.0, 0.0])];
        let grads: Vec<ParamVector> =
            (0..20).map(|i| pv(&[1.0, i as f64 * 0.1])).collect();
        let table = alignment_correlation(&[0.05; 20], &grads, &group, 5).unwrap();
        assert!(table.degenerate);
        assert_eq!(table.spearman, None);
    }

    #[test]
    fn alignment_buckets_partition_evenly() {
        let group = vec![pv(&[1.0, 1.0])];
        let n = 103;
        let grads: Vec<ParamVector> = (0..n).map(|i| pv(&[1.0, i as f64])).collect();
        let omega: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0) / n as f64).collect();
        let table = alignment_correlation(&omega, &grads, &group, ALIGNMENT_BUCKETS).unwrap();
        assert_eq!(table.buckets.len(), ALIGNMENT_BUCKETS);
        let sizes: Vec<usize> = table.buckets.iter().map(|b| b.count).collect();
        assert_eq!(sizes.iter().sum::<usize>(), n);
        assert_eq!(sizes.iter().max(), Some(&3));
        assert_eq!(sizes.iter().min(), Some(&2));
        assert_eq!(sizes.iter().filter(|&&s| s == 3).count(), 3);
    }

    #[test]
    fn alignment_reduces_buckets_for_small_samples() {
        let group = vec![pv(&[1.0, 0.0])];
        let grads: Vec<ParamVector> = (0..7).map(|i| pv(&[1.0, i as f64])).collect();
        let omega: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let table = alignment_correlation(&omega, &grads, &group, 50).unwrap();
        assert_eq!(table.buckets.len(), 7);
        assert!(table.warnings.iter().any(|w| w.contains("reduced")));
    }

    #[test]
    fn alignment_from_a_model_state_is_well_formed() {
        let (arch, params, theta_q) = toy_state(9);
        let calib = grouped_calib(10, 3, 52);
        let obj = ReconObjective::new(&arch, &params, &calib).unwrap();
        let weights = SampleWeights::uniform(calib.len(), 1.0);
        let table = alignment_for_state(&obj, &theta_q, &weights, 50).unwrap();
        assert_eq!(table.samples.len(), calib.train_indices().len());
        // Uniform weights leave nothing to rank.
        assert!(table.degenerate);
        for row in &table.samples {
            assert!(row.alignment.is_finite());
            assert!((-1.0..=1.0).contains(&row.alignment));
        }
    }

    #[test]
    fn csv_writers_emit_stable_bytes() {
        let m = dissimilarity_from_gradients(
            labels(2),
            &[pv(&[1.0, 0.0]), pv(&[0.0, 0.0])],
        )
        .unwrap();
        assert_eq!(m.to_csv(), "group,g0,g1\ng0,0,NA\ng1,NA,0\n");

        let profile = GroupLossProfile {
            global: 0.25,
            groups: vec![
                GroupLoss { group: 0, count: 2, mse: 0.5 },
                GroupLoss { group: 1, count: 2, mse: 0.0 },
            ],
        };
        assert_eq!(profile.to_csv(), "group,count,mse\n0,2,0.5\n1,2,0\n");

        let deltas = vec![GroupDelta {
            group: 3,
            uniform: 0.125,
            weighted: 0.0625,
            delta: 0.0625,
        }];
        assert_eq!(
            deltas_to_csv(&deltas),
            "group,uniform,weighted,delta\n3,0.125,0.0625,0.0625\n"
        );
    }

    #[test]
    fn report_validation_catches_non_finite_numbers() {
        let good = DiagnosticsReport {
            config_hash: "abc".to_string(),
            seed: 1,
            dissimilarity_initial: None,
            dissimilarity_final: None,
            group_losses_initial: None,
            group_losses_final: GroupLossProfile {
                global: 0.5,
                groups: vec![GroupLoss { group: 0, count: 1, mse: 0.5 }],
            },
            alignment: None,
            lemma43: None,
            lemma42: None,
            warnings: Vec::new(),
        };
        good.validate().unwrap();
        let mut bad = good.clone();
        bad.group_losses_final.global = f64::NAN;
        assert!(bad.validate().is_err());
    }
}
