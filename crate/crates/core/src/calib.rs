//! Calibration data: intermediate sampler states, their validation split,
//! and the grouping of collection timesteps.
//!
//! Trajectories are recorded while the deterministic sampler walks the full
//! ladder; every `interval`-th ladder position is a collection timestep, so
//! `n` trajectories yield exactly `n` states per collection timestep. The
//! split is stratified per timestep and groups are contiguous timestep
//! ranges, which is what the weighting stage samples over.
//!
//! On disk a set is a small JSON header followed by the raw state matrix in
//! little-endian f64, so save/load round-trips are byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_sample_with, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::params::ParamVector;
use crate::rng::stream;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"QCS1";

/// One recorded sampler state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState {
    pub x: Vec<f64>,
    pub t: usize,
}

/// Assignment of collection timesteps to contiguous groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub group_count: usize,
    /// Keys are collection timesteps, values group indices; groups are
    /// numbered in ascending timestep order.
    pub group_of_timestep: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone)]
pub struct CalibrationSet {
    dim: usize,
    t_steps: usize,
    interval: usize,
    schedule_hash: String,
    samples: Vec<TrajectoryState>,
    is_val: Vec<bool>,
    groups: GroupSpec,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dim: usize,
    t_steps: usize,
    interval: usize,
    schedule_hash: String,
    timesteps: Vec<usize>,
    is_val: Vec<bool>,
    groups: GroupSpec,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn schedule_hash(&self) -> &str {
        &self.schedule_hash
    }

    pub fn samples(&self) -> &[TrajectoryState] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &TrajectoryState {
        &self.samples[i]
    }

    pub fn is_val(&self, i: usize) -> bool {
        self.is_val[i]
    }

    /// Sorted distinct timesteps at which states were collected.
    pub fn collection_timesteps(&self) -> Vec<usize> {
        self.groups.group_of_timestep.keys().copied().collect()
    }

    pub fn group_count(&self) -> usize {
        self.groups.group_count
    }

    pub fn groups(&self) -> &GroupSpec {
        &self.groups
    }

    pub fn group_of_timestep(&self, t: usize) -> Result<usize> {
        self.groups
            .group_of_timestep
            .get(&t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                t_steps: self.t_steps,
            })
    }

    pub fn group_of_sample(&self, i: usize) -> Result<usize> {
        self.group_of_timestep(self.samples[i].t)
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_val[i]).collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_val[i]).collect()
    }

    pub fn group_train_indices(&self, g: usize) -> Result<Vec<usize>> {
        self.group_indices(g, false)
    }

    pub fn group_val_indices(&self, g: usize) -> Result<Vec<usize>> {
        self.group_indices(g, true)
    }

    fn group_indices(&self, g: usize, val: bool) -> Result<Vec<usize>> {
        if g >= self.group_count() {
            return Err(Error::invalid(
                "group index",
                format!("group {g} of {}", self.group_count()),
            ));
        }
        let mut out = Vec::new();
        for i in 0..self.len() {
            if self.is_val[i] == val && self.group_of_sample(i)? == g {
                out.push(i);
            }
        }
        Ok(out)
    }

    /// Hand-built set for tests that need exact control over membership.
    #[cfg(test)]
    pub(crate) fn from_parts(
        dim: usize,
        t_steps: usize,
        samples: Vec<TrajectoryState>,
        is_val: Vec<bool>,
        groups: GroupSpec,
    ) -> Self {
        assert_eq!(samples.len(), is_val.len());
        CalibrationSet {
            dim,
            t_steps,
            interval: 1,
            schedule_hash: String::from("test"),
            samples,
            is_val,
            groups,
        }
    }

    /// States of the given samples as a `[n, dim]` matrix plus timesteps.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        let mut ts = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.samples[i].x);
            ts.push(self.samples[i].t);
        }
        Ok((Tensor::new(vec![idx.len(), self.dim], data)?, ts))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            version: 1,
            dim: self.dim,
            t_steps: self.t_steps,
            interval: self.interval,
            schedule_hash: self.schedule_hash.clone(),
            timesteps: self.samples.iter().map(|s| s.t).collect(),
            is_val: self.is_val.clone(),
            groups: self.groups.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for s in &self.samples {
            for v in &s.x {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |why: &str| Error::BadArtifact {
            path: path.to_path_buf(),
            why: why.to_string(),
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])?;
        if header.version != 1 {
            return Err(bad("unsupported version"));
        }
        let n = header.timesteps.len();
        if header.is_val.len() != n {
            return Err(bad("split length disagrees with sample count"));
        }
        let want = 8 + hlen + n * header.dim * 8;
        if bytes.len() != want {
            return Err(bad("data length disagrees with header"));
        }
        let mut samples = Vec::with_capacity(n);
        let mut off = 8 + hlen;
        for &t in &header.timesteps {
            let mut x = Vec::with_capacity(header.dim);
            for _ in 0..header.dim {
                x.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
                off += 8;
            }
            samples.push(TrajectoryState { x, t });
        }
        Ok(CalibrationSet {
            dim: header.dim,
            t_steps: header.t_steps,
            interval: header.interval,
            schedule_hash: header.schedule_hash,
            samples,
            is_val: header.is_val,
            groups: header.groups,
        })
    }
}

/// Records `n_trajectories` sampler runs, keeping every `interval`-th ladder
/// state. The result has exactly `n_trajectories` states per collection
/// timestep, no split, and a single group until `assign_groups` is called.
pub fn generate_calibration(
    schedule: &NoiseSchedule,
    arch: &Architecture,
    params: &ParamVector,
    n_trajectories: usize,
    interval: usize,
    master_seed: u64,
) -> Result<CalibrationSet> {
    let t_steps = schedule.t_steps();
    if n_trajectories == 0 {
        return Err(Error::invalid("calibration", "needs at least one trajectory"));
    }
    if interval == 0 || t_steps % interval != 0 {
        return Err(Error::invalid(
            "calibration",
            format!("interval {interval} does not divide the {t_steps}-step ladder"),
        ));
    }
    let dim = arch.input_dim;
    let mut rng = stream(master_seed, "calib-gen", 0);
    let mut init = Vec::with_capacity(n_trajectories * dim);
    for _ in 0..n_trajectories * dim {
        let z: f64 = StandardNormal.sample(&mut rng);
        init.push(z);
    }
    let x_init = Tensor::new(vec![n_trajectories, dim], init)?;

    let mut samples = Vec::new();
    let mut collected = BTreeMap::new();
    ddim_sample_with(schedule, arch, params, x_init, |k, t, x| {
        if k % interval == 0 {
            collected.insert(t, 0usize);
            for r in 0..n_trajectories {
                samples.push(TrajectoryState {
                    x: x.row_slice(r)?.to_vec(),
                    t,
                });
            }
        }
        Ok(())
    })?;

    let group_of_timestep = collected.keys().map(|&t| (t, 0)).collect();
    Ok(CalibrationSet {
        dim,
        t_steps,
        interval,
        schedule_hash: schedule.content_hash(),
        is_val: vec![false; samples.len()],
        samples,
        groups: GroupSpec {
            group_count: 1,
            group_of_timestep,
        },
    })
}

/// Marks `round(fraction * n_t)` samples per collection timestep as
/// validation. Errors if any timestep's share rounds to zero or swallows
/// the whole timestep.
pub fn split_validation(
    set: &mut CalibrationSet,
    fraction: f64,
    master_seed: u64,
) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(
            "validation fraction",
            format!("{fraction} not in (0, 1)"),
        ));
    }
    set.is_val = vec![false; set.len()];
    for t in set.collection_timesteps() {
        let mut idx: Vec<usize> = (0..set.len()).filter(|&i| set.samples[i].t == t).collect();
        let n_t = idx.len();
        let n_val = (fraction * n_t as f64).round() as usize;
        if n_val == 0 {
            return Err(Error::ValidationSplitEmpty { timestep: t });
        }
        if n_val >= n_t {
            return Err(Error::invalid(
                "validation fraction",
                format!("leaves no training samples at timestep {t}"),
            ));
        }
        let mut rng = stream(master_seed, "calib-split", t as u64);
        idx.shuffle(&mut rng);
        for &i in &idx[..n_val] {
            set.is_val[i] = true;
        }
    }
    Ok(())
}

/// Partitions the collection timesteps into `group_count` contiguous ranges
/// whose sizes differ by at most one, lowest timesteps first.
pub fn assign_groups(set: &mut CalibrationSet, group_count: usize) -> Result<()> {
    let ts = set.collection_timesteps();
    if group_count == 0 || group_count > ts.len() {
        return Err(Error::GroupCount {
            groups: group_count,
            timesteps: ts.len(),
        });
    }
    let base = ts.len() / group_count;
    let rem = ts.len() % group_count;
    let mut map = BTreeMap::new();
    let mut pos = 0;
    for g in 0..group_count {
        let width = base + usize::from(g < rem);
        for _ in 0..width {
            map.insert(ts[pos], g);
            pos += 1;
        }
    }
    set.groups = GroupSpec {
        group_count,
        group_of_timestep: map,
    };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSchedule;
    use crate::rng::stream;

    fn tiny_model(t_steps: usize) -> (Architecture, ParamVector, NoiseSchedule) {
        let arch = Architecture::mlp(2, 4, 1, 4, false).unwrap();
        let mut rng = stream(21, "model-init", 0);
        let params = arch.init_params(&mut rng).unwrap();
        let schedule = NoiseSchedule::linear(t_steps, 0.1, 0.5).unwrap();
        (arch, params, schedule)
    }

    #[test]
    fn interval_four_over_twenty_steps_collects_five_timesteps() {
        let (arch, params, schedule) = tiny_model(20);
        let set = generate_calibration(&schedule, &arch, &params, 32, 4, 1).unwrap();
        assert_eq!(set.collection_timesteps(), vec![3, 7, 11, 15, 19]);
        assert_eq!(set.len(), 5 * 32);
        for t in set.collection_timesteps() {
            let n = set.samples().iter().filter(|s| s.t == t).count();
            assert_eq!(n, 32);
        }
    }

    #[test]
    fn interval_equal_to_ladder_collects_only_pure_noise_states() {
        let (arch, params, schedule) = tiny_model(10);
        let set = generate_calibration(&schedule, &arch, &params, 8, 10, 1).unwrap();
        assert_eq!(set.collection_timesteps(), vec![9]);
        assert_eq!(set.len(), 8);
    }

    #[test]
    fn interval_must_divide_the_ladder() {
        let (arch, params, schedule) = tiny_model(20);
        assert!(generate_calibration(&schedule, &arch, &params, 4, 3, 1).is_err());
        assert!(generate_calibration(&schedule, &arch, &params, 4, 0, 1).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let (arch, params, schedule) = tiny_model(10);
        let a = generate_calibration(&schedule, &arch, &params, 6, 2, 5).unwrap();
        let b = generate_calibration(&schedule, &arch, &params, 6, 2, 5).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let (arch, params, schedule) = tiny_model(10);
        let mut set = generate_calibration(&schedule, &arch, &params, 100, 2, 5).unwrap();
        split_validation(&mut set, 0.05, 5).unwrap();
        for t in set.collection_timesteps() {
            let val = (0..set.len())
                .filter(|&i| set.sample(i).t == t && set.is_val(i))
                .count();
            assert_eq!(val, 5);
        }
        let train = set.train_indices();
        let val = set.val_indices();
        assert_eq!(train.len() + val.len(), set.len());
        assert!(train.iter().all(|i| !val.contains(i)));
    }

    #[test]
    fn two_samples_at_half_fraction_keep_one_for_training() {
        let (arch, params, schedule) = tiny_model(10);
        let mut set = generate_calibration(&schedule, &arch, &params, 2, 2, 5).unwrap();
        split_validation(&mut set, 0.5, 5).unwrap();
        for t in set.collection_timesteps() {
            let val = (0..set.len())
                .filter(|&i| set.sample(i).t == t && set.is_val(i))
                .count();
            assert_eq!(val, 1);
        }
    }

    #[test]
    fn vanishing_split_is_a_typed_error() {
        let (arch, params, schedule) = tiny_model(10);
        let mut set = generate_calibration(&schedule, &arch, &params, 4, 2, 5).unwrap();
        assert!(matches!(
            split_validation(&mut set, 0.05, 5),
            Err(Error::ValidationSplitEmpty { .. })
        ));
        assert!(split_validation(&mut set, 0.9, 5).is_err());
    }

    #[test]
    fn groups_are_contiguous_with_near_equal_widths() {
        let (arch, params, schedule) = tiny_model(20);
        let mut set = generate_calibration(&schedule, &arch, &params, 4, 2, 5).unwrap();
        assert_eq!(set.collection_timesteps().len(), 10);
        assign_groups(&mut set, 4).unwrap();
        let ts = set.collection_timesteps();
        let mut widths = vec![0usize; 4];
        let mut last_group = 0;
        for &t in &ts {
            let g = set.group_of_timestep(t).unwrap();
            assert!(g >= last_group, "groups must be contiguous in t");
            last_group = g;
            widths[g] += 1;
        }
        assert_eq!(widths.iter().sum::<usize>(), 10);
        assert!(widths.iter().all(|&w| w == 2 || w == 3));
    }

    #[test]
    fn more_groups_than_timesteps_is_a_typed_error() {
        let (arch, params, schedule) = tiny_model(10);
        let mut set = generate_calibration(&schedule, &arch, &params, 4, 5, 5).unwrap();
        assert!(matches!(
            assign_groups(&mut set, 3),
            Err(Error::GroupCount { .. })
        ));
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let (arch, params, schedule) = tiny_model(10);
        let mut set = generate_calibration(&schedule, &arch, &params, 10, 2, 5).unwrap();
        split_validation(&mut set, 0.2, 5).unwrap();
        assign_groups(&mut set, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.qcs");
        let p2 = dir.path().join("b.qcs");
        set.save(&p1).unwrap();
        let loaded = CalibrationSet::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.samples(), set.samples());
        assert_eq!(loaded.group_count(), 2);
    }
}
