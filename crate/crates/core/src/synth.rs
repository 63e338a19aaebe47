//! Synthetic classification data with controllable identity/task entanglement.
//!
//! Every sample belongs to an identity. In a random orthonormal latent basis
//! the first `task_dim` directions carry the class prototypes, the next
//! `identity_dim` directions are reserved for identity information. Each
//! identity vector puts a fraction `entanglement` of its energy inside the
//! task subspace and the rest in the reserved orthogonal directions. A sample
//! is `prototype[label] + identity_scale · identity + noise`, squashed into
//! `input_range` with a logistic map.
//!
//! # Dataset file layout
//!
//! All integers and floats are little-endian.
//!
//! | field | type |
//! |---|---|
//! | magic `DLFDSET\0` | 8 bytes |
//! | format version (= 1) | u32 |
//! | flags (bit 0: generator config present) | u8 |
//! | generator config, if flagged: `num_identities, samples_per_identity, task_classes, task_dim, identity_dim, input_dim` | 6 × u32 |
//! | … `entanglement, noise_sigma, prototype_scale, identity_scale, range_lo, range_hi` | 6 × f64 |
//! | … `seed` | u64 |
//! | `forget_identity_fraction, unseen_identity_fraction, test_fraction` | 3 × f64 |
//! | split seed | u64 |
//! | input dim | u32 |
//! | row count | u64 |
//! | SHA-256 of the payload | 32 bytes |
//! | payload: per row `input_dim × f64`, label u32, identity u32, split tag u32 | |
//!
//! Split tags are 0 retain, 1 forget, 2 unseen, 3 test; rows are stored
//! split by split in that order.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::eval::DatasetTag;
use crate::matrix::{dot, Matrix};
use crate::nn::{hex_digest, ByteReader};
use crate::{Error, Result};

const DATASET_MAGIC: &[u8; 8] = b"DLFDSET\0";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub task_classes: usize,
    pub task_dim: usize,
    pub identity_dim: usize,
    pub input_dim: usize,
    /// Fraction of identity energy inside the task subspace, in `[0, 1]`.
    pub entanglement: f64,
    pub noise_sigma: f64,
    /// Distance of each class prototype from the latent origin.
    pub prototype_scale: f64,
    /// Multiplier on the unit-variance identity vectors.
    pub identity_scale: f64,
    pub input_range: (f64, f64),
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_identities: 40,
            samples_per_identity: 50,
            task_classes: 4,
            task_dim: 4,
            identity_dim: 4,
            input_dim: 16,
            entanglement: 0.6,
            noise_sigma: 0.8,
            prototype_scale: 1.5,
            identity_scale: 1.0,
            input_range: (0.0, 1.0),
            seed: 42,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_identities == 0 || self.samples_per_identity == 0 {
            return fail("num_identities and samples_per_identity must be positive".into());
        }
        if self.task_classes < 2 {
            return fail(format!("task_classes must be >= 2, got {}", self.task_classes));
        }
        if self.task_dim == 0 || self.identity_dim == 0 {
            return fail("task_dim and identity_dim must be positive".into());
        }
        if self.task_dim + self.identity_dim > self.input_dim {
            return fail(format!(
                "task_dim + identity_dim ({}) exceeds input_dim ({})",
                self.task_dim + self.identity_dim,
                self.input_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.entanglement) {
            return fail(format!("entanglement must be in [0, 1], got {}", self.entanglement));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("prototype_scale", self.prototype_scale),
            ("identity_scale", self.identity_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        let (lo, hi) = self.input_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return fail(format!("input_range must satisfy lo < hi, got ({lo}, {hi})"));
        }
        Ok(())
    }

    /// Maps a latent coordinate into `input_range`.
    pub fn squash(&self, latent: f64) -> f64 {
        let (lo, hi) = self.input_range;
        let s = 1.0 / (1.0 + (-latent).exp());
        (lo + (hi - lo) * s).clamp(lo, hi)
    }

    /// Inverse of [`GenConfig::squash`] on the open range.
    pub fn unsquash(&self, x: f64) -> f64 {
        let (lo, hi) = self.input_range;
        let s = (x - lo) / (hi - lo);
        (s / (1.0 - s)).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub input: Vec<f64>,
    pub task_label: usize,
    pub identity_id: usize,
}

/// The latent geometry behind a generated dataset.
#[derive(Debug, Clone)]
pub struct LatentModel {
    /// Orthonormal basis vectors as rows; rows `0..task_dim` span the task subspace.
    pub basis: Matrix,
    pub task_dim: usize,
    pub identity_dim: usize,
    /// Class prototypes in latent coordinates, one per row.
    pub prototypes: Matrix,
    /// Entangled identity vectors (already multiplied by `identity_scale`), one per row.
    pub identity_vectors: Matrix,
}

impl LatentModel {
    /// Coordinates of a latent vector along the task directions.
    pub fn task_projection(&self, latent: &[f64]) -> Vec<f64> {
        (0..self.task_dim).map(|k| dot(self.basis.row(k), latent)).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn orthonormal_basis(dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut basis = Matrix::zeros(dim, dim);
    let mut k = 0;
    while k < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for j in 0..k {
            let proj = dot(&v, basis.row(j));
            for (x, b) in v.iter_mut().zip(basis.row(j)) {
                *x -= proj * b;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        basis.row_mut(k).iter_mut().zip(&v).for_each(|(b, x)| *b = x / norm);
        k += 1;
    }
    basis
}

/// Deterministically builds the latent basis, prototypes and identity vectors.
pub fn latent_model(config: &GenConfig) -> Result<LatentModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.input_dim;
    let basis = orthonormal_basis(d, &mut rng);

    let mut prototypes = Matrix::zeros(config.task_classes, d);
    for c in 0..config.task_classes {
        // orthogonal prototypes while the task subspace has room, random directions after
        let coords: Vec<f64> = if config.task_classes <= config.task_dim {
            (0..config.task_dim).map(|k| if k == c { 1.0 } else { 0.0 }).collect()
        } else {
            let v: Vec<f64> = (0..config.task_dim).map(|_| gaussian(&mut rng)).collect();
            let n = dot(&v, &v).sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        };
        let row = prototypes.row_mut(c);
        for (k, &a) in coords.iter().enumerate() {
            for (r, b) in row.iter_mut().zip(basis.row(k)) {
                *r += config.prototype_scale * a * b;
            }
        }
    }

    // identity latent -> task coordinates, scaled so E‖Az‖² = ‖z‖²
    let mix_scale = 1.0 / (config.task_dim as f64).sqrt();
    let mixing: Vec<f64> = (0..config.task_dim * config.identity_dim)
        .map(|_| gaussian(&mut rng) * mix_scale)
        .collect();
    let in_task = config.entanglement.sqrt();
    let outside = (1.0 - config.entanglement).sqrt();
    let mut identity_vectors = Matrix::zeros(config.num_identities, d);
    for id in 0..config.num_identities {
        let z: Vec<f64> = (0..config.identity_dim).map(|_| gaussian(&mut rng)).collect();
        let row = identity_vectors.row_mut(id);
        for k in 0..config.task_dim {
            let coef = in_task * dot(&mixing[k * config.identity_dim..(k + 1) * config.identity_dim], &z);
            for (r, b) in row.iter_mut().zip(basis.row(k)) {
                *r += config.identity_scale * coef * b;
            }
        }
        for (j, &zj) in z.iter().enumerate() {
            for (r, b) in row.iter_mut().zip(basis.row(config.task_dim + j)) {
                *r += config.identity_scale * outside * zj * b;
            }
        }
    }

    Ok(LatentModel {
        basis,
        task_dim: config.task_dim,
        identity_dim: config.identity_dim,
        prototypes,
        identity_vectors,
    })
}

/// Generates `num_identities × samples_per_identity` samples, grouped by identity.
pub fn generate(config: &GenConfig) -> Result<Vec<SyntheticSample>> {
    let latent = latent_model(config)?;
    // separate stream so the geometry does not depend on the sample count
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a_0000_0001);
    let d = config.input_dim;
    let mut samples = Vec::with_capacity(config.num_identities * config.samples_per_identity);
    for id in 0..config.num_identities {
        for _ in 0..config.samples_per_identity {
            let label = rng.random_range(0..config.task_classes);
            let input = (0..d)
                .map(|k| {
                    let z = latent.prototypes.get(label, k)
                        + latent.identity_vectors.get(id, k)
                        + config.noise_sigma * gaussian(&mut rng);
                    config.squash(z)
                })
                .collect();
            samples.push(SyntheticSample {
                input,
                task_label: label,
                identity_id: id,
            });
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub forget_identity_fraction: f64,
    pub unseen_identity_fraction: f64,
    /// Sample-level fraction of the remaining identities' samples held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            forget_identity_fraction: 0.05,
            unseen_identity_fraction: 0.1,
            test_fraction: 0.2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub generator: Option<GenConfig>,
    pub split: SplitConfig,
    pub retain: Vec<SyntheticSample>,
    pub forget: Vec<SyntheticSample>,
    pub unseen: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl DatasetSplits {
    pub fn get(&self, tag: DatasetTag) -> &[SyntheticSample] {
        match tag {
            DatasetTag::Retain => &self.retain,
            DatasetTag::Forget => &self.forget,
            DatasetTag::Unseen => &self.unseen,
            DatasetTag::Test => &self.test,
        }
    }

    pub fn inputs(&self, tag: DatasetTag) -> Matrix {
        let rows: Vec<&[f64]> = self.get(tag).iter().map(|s| s.input.as_slice()).collect();
        let cols = self.input_dim();
        let mut m = Matrix::zeros(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(r);
        }
        m
    }

    pub fn labels(&self, tag: DatasetTag) -> Vec<usize> {
        self.get(tag).iter().map(|s| s.task_label).collect()
    }

    pub fn identities(&self, tag: DatasetTag) -> BTreeSet<usize> {
        self.get(tag).iter().map(|s| s.identity_id).collect()
    }

    pub fn input_dim(&self) -> usize {
        [&self.retain, &self.forget, &self.unseen, &self.test]
            .iter()
            .find_map(|s| s.first().map(|x| x.input.len()))
            .unwrap_or(0)
    }

    pub fn class_count(&self) -> usize {
        match self.generator {
            Some(g) => g.task_classes,
            None => [&self.retain, &self.forget, &self.unseen, &self.test]
                .iter()
                .flat_map(|s| s.iter().map(|x| x.task_label + 1))
                .max()
                .unwrap_or(0),
        }
    }

    pub fn input_range(&self) -> Option<(f64, f64)> {
        self.generator.map(|g| g.input_range)
    }

    pub fn total_len(&self) -> usize {
        self.retain.len() + self.forget.len() + self.unseen.len() + self.test.len()
    }

    /// Checks identity disjointness of forget / retain / unseen and that test
    /// holds no forget identity.
    pub fn validate(&self) -> Result<()> {
        let retain = self.identities(DatasetTag::Retain);
        let forget = self.identities(DatasetTag::Forget);
        let unseen = self.identities(DatasetTag::Unseen);
        let test = self.identities(DatasetTag::Test);
        let overlap = |a: &BTreeSet<usize>, b: &BTreeSet<usize>| a.intersection(b).next().copied();
        for (name, a, b) in [
            ("retain/forget", &retain, &forget),
            ("retain/unseen", &retain, &unseen),
            ("forget/unseen", &forget, &unseen),
            ("test/forget", &test, &forget),
        ] {
            if let Some(id) = overlap(a, b) {
                return Err(Error::Consistency(format!("identity {id} appears in both {name}")));
            }
        }
        Ok(())
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (tag, split) in [
            (0u32, &self.retain),
            (1, &self.forget),
            (2, &self.unseen),
            (3, &self.test),
        ] {
            for s in split.iter() {
                for v in &s.input {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&(s.task_label as u32).to_le_bytes());
                out.extend_from_slice(&(s.identity_id as u32).to_le_bytes());
                out.extend_from_slice(&tag.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of the row payload, hex encoded.
    pub fn checksum(&self) -> String {
        hex_digest(&self.payload())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(payload.len() + 256);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_FORMAT_VERSION.to_le_bytes());
        out.push(u8::from(self.generator.is_some()));
        if let Some(g) = &self.generator {
            for v in [
                g.num_identities,
                g.samples_per_identity,
                g.task_classes,
                g.task_dim,
                g.identity_dim,
                g.input_dim,
            ] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for v in [
                g.entanglement,
                g.noise_sigma,
                g.prototype_scale,
                g.identity_scale,
                g.input_range.0,
                g.input_range.1,
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&g.seed.to_le_bytes());
        }
        for v in [
            self.split.forget_identity_fraction,
            self.split.unseen_identity_fraction,
            self.split.test_fraction,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.split.seed.to_le_bytes());
        out.extend_from_slice(&(self.input_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.total_len() as u64).to_le_bytes());
        out.extend_from_slice(&sha256_bytes(&payload));
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "dataset format version {version} is not supported (expected {DATASET_FORMAT_VERSION})"
            )));
        }
        let generator = match r.u8()? {
            0 => None,
            1 => {
                let mut ints = [0usize; 6];
                for v in ints.iter_mut() {
                    *v = r.u32()? as usize;
                }
                let mut floats = [0f64; 6];
                for v in floats.iter_mut() {
                    *v = r.f64()?;
                }
                Some(GenConfig {
                    num_identities: ints[0],
                    samples_per_identity: ints[1],
                    task_classes: ints[2],
                    task_dim: ints[3],
                    identity_dim: ints[4],
                    input_dim: ints[5],
                    entanglement: floats[0],
                    noise_sigma: floats[1],
                    prototype_scale: floats[2],
                    identity_scale: floats[3],
                    input_range: (floats[4], floats[5]),
                    seed: r.u64()?,
                })
            }
            other => return Err(Error::Format(format!("unknown header flags {other:#x}"))),
        };
        let split = SplitConfig {
            forget_identity_fraction: r.f64()?,
            unseen_identity_fraction: r.f64()?,
            test_fraction: r.f64()?,
            seed: r.u64()?,
        };
        let input_dim = r.u32()? as usize;
        let rows = r.u64()?;
        let checksum: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let payload = r.rest();
        let row_bytes = input_dim * 8 + 12;
        if (payload.len() as u64) != rows.saturating_mul(row_bytes as u64) {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header announces {rows} rows of {row_bytes} bytes",
                payload.len()
            )));
        }
        if sha256_bytes(payload) != checksum {
            return Err(Error::Format("payload checksum mismatch".into()));
        }
        let mut out = DatasetSplits {
            generator,
            split,
            retain: Vec::new(),
            forget: Vec::new(),
            unseen: Vec::new(),
            test: Vec::new(),
        };
        let mut pr = ByteReader::new(payload);
        let mut last_tag = 0;
        for _ in 0..rows {
            let input = (0..input_dim).map(|_| pr.f64()).collect::<Result<Vec<_>>>()?;
            let task_label = pr.u32()? as usize;
            let identity_id = pr.u32()? as usize;
            let tag = pr.u32()?;
            if tag < last_tag {
                return Err(Error::Format("rows are not grouped by split".into()));
            }
            last_tag = tag;
            let sample = SyntheticSample {
                input,
                task_label,
                identity_id,
            };
            match tag {
                0 => out.retain.push(sample),
                1 => out.forget.push(sample),
                2 => out.unseen.push(sample),
                3 => out.test.push(sample),
                t => return Err(Error::Format(format!("unknown split tag {t}"))),
            }
        }
        Ok(out)
    }
}

fn sha256_bytes(bytes: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).into()
}

/// Partitions identities into forget / unseen / remaining, then splits the
/// remaining identities' samples into retain and test.
pub fn make_splits(samples: &[SyntheticSample], split: &SplitConfig) -> Result<DatasetSplits> {
    for (name, v) in [
        ("forget_identity_fraction", split.forget_identity_fraction),
        ("unseen_identity_fraction", split.unseen_identity_fraction),
        ("test_fraction", split.test_fraction),
    ] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Config(format!("{name} must be in (0, 1), got {v}")));
        }
    }
    let ids: BTreeSet<usize> = samples.iter().map(|s| s.identity_id).collect();
    let n = ids.len();
    let n_forget = (split.forget_identity_fraction * n as f64).round() as usize;
    let n_unseen = (split.unseen_identity_fraction * n as f64).round() as usize;
    if n_forget == 0 || n_unseen == 0 || n_forget + n_unseen >= n {
        return Err(Error::Config(format!(
            "fractions give {n_forget} forget and {n_unseen} unseen identities out of {n}; \
             each needs at least one and some must remain"
        )));
    }
    let mut order: Vec<usize> = ids.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
    order.shuffle(&mut rng);
    let forget_ids: BTreeSet<usize> = order[..n_forget].iter().copied().collect();
    let unseen_ids: BTreeSet<usize> = order[n_forget..n_forget + n_unseen].iter().copied().collect();

    let mut out = DatasetSplits {
        generator: None,
        split: *split,
        retain: Vec::new(),
        forget: Vec::new(),
        unseen: Vec::new(),
        test: Vec::new(),
    };
    let mut remaining = Vec::new();
    for s in samples {
        if forget_ids.contains(&s.identity_id) {
            out.forget.push(s.clone());
        } else if unseen_ids.contains(&s.identity_id) {
            out.unseen.push(s.clone());
        } else {
            remaining.push(s);
        }
    }
    let mut idx: Vec<usize> = (0..remaining.len()).collect();
    idx.shuffle(&mut rng);
    let n_test = (split.test_fraction * remaining.len() as f64).round() as usize;
    let test_set: BTreeSet<usize> = idx[..n_test].iter().copied().collect();
    for (i, s) in remaining.into_iter().enumerate() {
        if test_set.contains(&i) {
            out.test.push(s.clone());
        } else {
            out.retain.push(s.clone());
        }
    }
    if out.retain.is_empty() || out.test.is_empty() {
        return Err(Error::Config("test_fraction leaves retain or test empty".into()));
    }
    out.validate()?;
    Ok(out)
}

/// Generates samples and splits them, recording the generator config.
pub fn generate_splits(gen: &GenConfig, split: &SplitConfig) -> Result<DatasetSplits> {
    let samples = generate(gen)?;
    let mut splits = make_splits(&samples, split)?;
    splits.generator = Some(*gen);
    Ok(splits)
}

pub fn save_dataset(splits: &DatasetSplits, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, splits.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetSplits> {
    DatasetSplits::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            num_identities: 10,
            samples_per_identity: 20,
            ..GenConfig::default()
        }
    }

    #[test]
    fn counts_per_identity() {
        let samples = generate(&small()).unwrap();
        assert_eq!(samples.len(), 200);
        for id in 0..10 {
            assert_eq!(samples.iter().filter(|s| s.identity_id == id).count(), 20);
        }
        assert!(samples.iter().all(|s| s.task_label < 4 && s.input.len() == 16));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = GenConfig { seed: 43, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn inputs_stay_in_range() {
        let cfg = GenConfig {
            input_range: (-2.0, 3.0),
            noise_sigma: 5.0,
            ..small()
        };
        for s in generate(&cfg).unwrap() {
            assert!(s.input.iter().all(|&x| (-2.0..=3.0).contains(&x)));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            GenConfig { input_dim: 6, ..small() },
            GenConfig { entanglement: 1.5, ..small() },
            GenConfig { task_classes: 1, ..small() },
            GenConfig { input_range: (1.0, 1.0), ..small() },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn unentangled_task_projection_recovers_labels() {
        let cfg = GenConfig {
            entanglement: 0.0,
            noise_sigma: 0.05,
            ..GenConfig::default()
        };
        let latent = latent_model(&cfg).unwrap();
        let protos: Vec<Vec<f64>> = (0..cfg.task_classes)
            .map(|c| latent.task_projection(latent.prototypes.row(c)))
            .collect();
        let samples = generate(&cfg).unwrap();
        let correct = samples
            .iter()
            .filter(|s| {
                let z: Vec<f64> = s.input.iter().map(|&x| cfg.unsquash(x)).collect();
                let p = latent.task_projection(&z);
                let nearest = (0..protos.len())
                    .min_by(|&a, &b| {
                        let da: f64 = p.iter().zip(&protos[a]).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = p.iter().zip(&protos[b]).map(|(x, y)| (x - y).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                nearest == s.task_label
            })
            .count();
        let acc = correct as f64 / samples.len() as f64;
        assert!(acc >= 0.95, "projection accuracy {acc}");
    }

    /// Nearest-centroid identity probe on the task-subspace projection,
    /// fitted on even samples and scored on odd ones.
    fn identity_probe_accuracy(cfg: &GenConfig) -> f64 {
        let latent = latent_model(cfg).unwrap();
        let samples = generate(cfg).unwrap();
        let proj: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| {
                let z: Vec<f64> = s.input.iter().map(|&x| cfg.unsquash(x)).collect();
                latent.task_projection(&z)
            })
            .collect();
        let k = cfg.task_dim;
        let mut centroids = vec![vec![0.0; k]; cfg.num_identities];
        let mut counts = vec![0usize; cfg.num_identities];
        for (i, s) in samples.iter().enumerate().filter(|(i, _)| i % 2 == 0) {
            for (c, p) in centroids[s.identity_id].iter_mut().zip(&proj[i]) {
                *c += p;
            }
            counts[s.identity_id] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let (mut hit, mut total) = (0, 0);
        for (i, s) in samples.iter().enumerate().filter(|(i, _)| i % 2 == 1) {
            let best = (0..cfg.num_identities)
                .min_by(|&a, &b| {
                    let da: f64 = proj[i].iter().zip(&centroids[a]).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = proj[i].iter().zip(&centroids[b]).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            hit += usize::from(best == s.identity_id);
            total += 1;
        }
        hit as f64 / total as f64
    }

    #[test]
    fn identity_leaks_into_task_subspace_with_entanglement() {
        let mut prev = 0.0;
        for rho in [0.0, 0.5, 1.0] {
            let acc: f64 = (0..5)
                .map(|seed| {
                    identity_probe_accuracy(&GenConfig {
                        entanglement: rho,
                        seed,
                        ..GenConfig::default()
                    })
                })
                .sum::<f64>()
                / 5.0;
            assert!(acc >= prev, "rho {rho}: probe accuracy {acc} < {prev}");
            prev = acc;
        }
    }

    #[test]
    fn splits_are_identity_disjoint() {
        let samples = generate(&small()).unwrap();
        let split = SplitConfig {
            forget_identity_fraction: 0.2,
            unseen_identity_fraction: 0.2,
            test_fraction: 0.25,
            seed: 3,
        };
        let s = make_splits(&samples, &split).unwrap();
        assert_eq!(s.identities(DatasetTag::Forget).len(), 2);
        assert_eq!(s.forget.len(), 40);
        for f in &s.forget {
            assert!(s.identities(DatasetTag::Forget).contains(&f.identity_id));
        }
        assert_eq!(s.total_len(), samples.len());

        for seed in 0..100 {
            let s = make_splits(&samples, &SplitConfig { seed, ..split }).unwrap();
            s.validate().unwrap();
            assert!(s.identities(DatasetTag::Forget).is_disjoint(&s.identities(DatasetTag::Retain)));
            assert!(s.identities(DatasetTag::Unseen).is_disjoint(&s.identities(DatasetTag::Retain)));
            assert!(s.identities(DatasetTag::Forget).is_disjoint(&s.identities(DatasetTag::Unseen)));
            assert!(s.identities(DatasetTag::Test).is_disjoint(&s.identities(DatasetTag::Forget)));
        }
    }

    #[test]
    fn union_of_splits_is_input_multiset() {
        let samples = generate(&small()).unwrap();
        let s = make_splits(&samples, &SplitConfig::default()).unwrap();
        let key = |x: &SyntheticSample| {
            let mut k: Vec<u64> = x.input.iter().map(|v| v.to_bits()).collect();
            k.push(x.task_label as u64);
            k.push(x.identity_id as u64);
            k
        };
        let mut a: Vec<_> = samples.iter().map(key).collect();
        let mut b: Vec<_> = [&s.retain, &s.forget, &s.unseen, &s.test]
            .iter()
            .flat_map(|v| v.iter().map(key))
            .collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_fractions_rejected() {
        let samples = generate(&small()).unwrap();
        let bad = SplitConfig {
            forget_identity_fraction: 0.01,
            ..SplitConfig::default()
        };
        assert!(matches!(make_splits(&samples, &bad), Err(Error::Config(_))));
        let bad = SplitConfig {
            forget_identity_fraction: 0.5,
            unseen_identity_fraction: 0.5,
            ..SplitConfig::default()
        };
        assert!(matches!(make_splits(&samples, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let split = SplitConfig {
            forget_identity_fraction: 0.2,
            ..SplitConfig::default()
        };
        let splits = generate_splits(&small(), &split).unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_dataset(&splits, &p1).unwrap();
        let loaded = load_dataset(&p1).unwrap();
        assert_eq!(loaded, splits);
        save_dataset(&loaded, &p2).unwrap();
        let bytes = fs::read(&p1).unwrap();
        assert_eq!(bytes, fs::read(&p2).unwrap());

        // header checksum equals a recomputation over the payload
        let payload_start = bytes.len() - splits.total_len() * (16 * 8 + 12);
        let recorded = &bytes[payload_start - 32..payload_start];
        assert_eq!(recorded, sha256_bytes(&bytes[payload_start..]));

        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(DatasetSplits::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 20;
        flipped[last] ^= 0xff;
        assert!(matches!(DatasetSplits::from_bytes(&flipped), Err(Error::Format(_))));
        let mut version = bytes;
        version[8] = 2;
        let err = DatasetSplits::from_bytes(&version).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
