//! Deterministic synthetic phantom corpora.
//!
//! Phantoms are Gaussian-noise backgrounds with axis-aligned ellipsoid
//! "organs", one label channel per class. Ellipsoids give exact analytic
//! oracles for region sizes, which is what the size-prior machinery needs.
//! Generation is a pure function of `(seed, spec)`: per-sample and per-organ
//! RNG streams are derived by seed splitting, so parallel and serial
//! generation agree bit-exactly.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::volume::{AnnotationVector, LabelMask, Orientation, Volume};
use serde::{Deserialize, Serialize};

/// Inclusive fractional range.
pub type Range = (f64, f64);

/// Geometry and intensity distribution of one organ class.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganSpec {
    /// Index into the global class set, in `[0, C)`.
    pub class_id: usize,
    /// Fractional center box per axis; centers are sampled uniformly inside.
    pub center_range: [Range; 3],
    /// Fractional ellipsoid semi-axes per axis, relative to the grid extent.
    pub radii_range: [Range; 3],
    /// Mean in-organ intensity.
    pub intensity_mean: f64,
    /// In-organ intensity standard deviation.
    pub intensity_sigma: f64,
    /// Whether this organ may overlap others that also allow overlap.
    #[serde(default)]
    pub allow_overlap: bool,
}

impl OrganSpec {
    /// The organ must fit inside the unit cube for every sampleable center.
    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let (c0, c1) = self.center_range[axis];
            let (r0, r1) = self.radii_range[axis];
            if !(0.0 < r0 && r0 <= r1) {
                return Err(Error::SpecInfeasible(format!(
                    "organ {}: radii range ({r0}, {r1}) on axis {axis} must be positive and ordered",
                    self.class_id
                )));
            }
            if !(c0 <= c1) {
                return Err(Error::SpecInfeasible(format!(
                    "organ {}: center range ({c0}, {c1}) on axis {axis} is not ordered",
                    self.class_id
                )));
            }
            if c0 - r1 < 0.0 || c1 + r1 > 1.0 {
                return Err(Error::SpecInfeasible(format!(
                    "organ {}: ellipsoid can leave the grid on axis {axis} (center {c0}..{c1}, radius up to {r1})",
                    self.class_id
                )));
            }
        }
        Ok(())
    }
}

/// One source dataset of the pretraining assembly (or a few-shot target).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub n_volumes: usize,
    /// Which global classes this dataset annotates.
    pub annotation: AnnotationVector,
    pub grid_shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Background mean intensity.
    #[serde(default = "default_base_intensity")]
    pub base_intensity: f64,
    /// Background noise standard deviation.
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    /// Additive shift applied to every organ's intensity mean (domain shift).
    #[serde(default)]
    pub intensity_shift: f64,
    /// Half-width of the per-sample uniform offset added to all organ means;
    /// models scanner/protocol contrast variation between volumes of one
    /// institution.
    #[serde(default)]
    pub intensity_jitter: f64,
    /// Multiplicative scale applied to organ radii ranges (domain shift).
    #[serde(default = "default_radii_scale")]
    pub radii_scale: f64,
}

fn default_base_intensity() -> f64 {
    0.2
}

fn default_noise_sigma() -> f64 {
    0.05
}

fn default_radii_scale() -> f64 {
    1.0
}

impl DatasetSpec {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.n_volumes == 0 {
            return Err(Error::InvalidArgument(format!("dataset {}: n_volumes must be >= 1", self.name)));
        }
        if self.annotation.len() != n_classes {
            return Err(Error::InvalidArgument(format!(
                "dataset {}: annotation vector length {} != class count {}",
                self.name,
                self.annotation.len(),
                n_classes
            )));
        }
        if self.annotation.annotated_count() == 0 {
            return Err(Error::InvalidArgument(format!(
                "dataset {}: at least one class must be annotated",
                self.name
            )));
        }
        if self.grid_shape.iter().any(|&d| d < 16) {
            return Err(Error::InvalidArgument(format!(
                "dataset {}: grid dims must be >= 16, got {:?}",
                self.name, self.grid_shape
            )));
        }
        if self.radii_scale <= 0.0 {
            return Err(Error::InvalidArgument(format!("dataset {}: radii_scale must be > 0", self.name)));
        }
        Ok(())
    }

    /// Organ specs with this dataset's domain-shift offsets applied.
    pub fn shifted_organs(&self, organs: &[OrganSpec]) -> Vec<OrganSpec> {
        organs
            .iter()
            .map(|o| {
                let mut o = o.clone();
                o.intensity_mean += self.intensity_shift;
                for axis in 0..3 {
                    o.radii_range[axis].0 *= self.radii_scale;
                    o.radii_range[axis].1 *= self.radii_scale;
                }
                o
            })
            .collect()
    }
}

/// Scalar parameters of a single phantom draw.
#[derive(Debug, Clone)]
pub struct PhantomParams {
    pub grid_shape: [usize; 3],
    pub spacing: [f64; 3],
    pub channels: usize,
    pub base_intensity: f64,
    pub noise_sigma: f64,
    pub intensity_jitter: f64,
}

impl PhantomParams {
    pub fn from_dataset(spec: &DatasetSpec, channels: usize) -> Self {
        PhantomParams {
            grid_shape: spec.grid_shape,
            spacing: spec.spacing,
            channels,
            base_intensity: spec.base_intensity,
            noise_sigma: spec.noise_sigma,
            intensity_jitter: spec.intensity_jitter,
        }
    }
}

/// Sampled ellipsoid in voxel coordinates.
#[derive(Debug, Clone)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        let di = (i as f64 - self.center[0]) / self.radii[0];
        let dj = (j as f64 - self.center[1]) / self.radii[1];
        let dk = (k as f64 - self.center[2]) / self.radii[2];
        di * di + dj * dj + dk * dk <= 1.0
    }
}

const OVERLAP_RETRIES: u64 = 16;

/// Generate one phantom: Gaussian background plus one ellipsoid per organ
/// spec, with label channel `c` marking exactly the voxels inside organ `c`.
/// Identical `(seed, specs, params)` produce bit-identical output.
pub fn generate_phantom(
    seed: u64,
    specs: &[OrganSpec],
    params: &PhantomParams,
) -> Result<(Volume, LabelMask)> {
    if specs.is_empty() {
        return Err(Error::SpecInfeasible("phantom needs at least one organ spec".into()));
    }
    if params.grid_shape.iter().any(|&d| d < 16) {
        return Err(Error::InvalidArgument(format!(
            "grid dims must be >= 16, got {:?}",
            params.grid_shape
        )));
    }
    for s in specs {
        s.validate()?;
        if s.class_id >= params.channels {
            return Err(Error::InvalidArgument(format!(
                "organ class {} out of range for {} channels",
                s.class_id, params.channels
            )));
        }
    }
    let root = Rng::new(seed);
    let [d, h, w] = params.grid_shape;

    // Background noise stream is independent of organ placement streams.
    let mut noise_rng = root.split(0);
    let mut vol = Tensor::from_fn(&[d, h, w], |_| {
        noise_rng.normal_with(params.base_intensity, params.noise_sigma)
    });

    // Place ellipsoids; organs that may not overlap get resampled against the
    // already-placed set, deterministically, a bounded number of times.
    let mut placed: Vec<(usize, Ellipsoid, bool)> = Vec::new();
    for (idx, spec) in specs.iter().enumerate() {
        let organ_rng = root.split(1 + idx as u64);
        let mut chosen: Option<Ellipsoid> = None;
        for attempt in 0..OVERLAP_RETRIES {
            let mut r = organ_rng.split(attempt);
            let e = sample_ellipsoid(spec, params.grid_shape, &mut r);
            let conflict = placed.iter().any(|(_, other, other_overlap)| {
                !(spec.allow_overlap && *other_overlap) && ellipsoids_overlap(&e, other)
            });
            if !conflict {
                chosen = Some(e);
                break;
            }
        }
        let e = chosen.ok_or_else(|| {
            Error::SpecInfeasible(format!(
                "organ {}: could not place without forbidden overlap after {OVERLAP_RETRIES} attempts",
                spec.class_id
            ))
        })?;
        placed.push((idx, e, spec.allow_overlap));
    }

    let sample_offset = if params.intensity_jitter > 0.0 {
        let mut jr = root.split(99);
        jr.uniform_in(-params.intensity_jitter, params.intensity_jitter)
    } else {
        0.0
    };
    let mut mask = Tensor::zeros(&[params.channels, d, h, w]);
    for (idx, ell, _) in &placed {
        let spec = &specs[*idx];
        let mut intensity_rng = root.split(101 + *idx as u64);
        let ch = mask.channel_mut(spec.class_id);
        let i0 = (ell.center[0] - ell.radii[0]).floor().max(0.0) as usize;
        let i1 = ((ell.center[0] + ell.radii[0]).ceil() as usize).min(d - 1);
        let j0 = (ell.center[1] - ell.radii[1]).floor().max(0.0) as usize;
        let j1 = ((ell.center[1] + ell.radii[1]).ceil() as usize).min(h - 1);
        let k0 = (ell.center[2] - ell.radii[2]).floor().max(0.0) as usize;
        let k1 = ((ell.center[2] + ell.radii[2]).ceil() as usize).min(w - 1);
        for i in i0..=i1 {
            for j in j0..=j1 {
                for k in k0..=k1 {
                    if ell.contains(i, j, k) {
                        ch[(i * h + j) * w + k] = 1.0;
                        vol.data_mut()[(i * h + j) * w + k] =
                            intensity_rng.normal_with(spec.intensity_mean + sample_offset, spec.intensity_sigma);
                    }
                }
            }
        }
    }

    let volume = Volume::new(vol, params.spacing, Orientation::RAS)?;
    let mask = LabelMask::new(mask)?;
    Ok((volume, mask))
}

fn sample_ellipsoid(spec: &OrganSpec, grid: [usize; 3], rng: &mut Rng) -> Ellipsoid {
    let mut center = [0.0; 3];
    let mut radii = [0.0; 3];
    for axis in 0..3 {
        let cf = rng.uniform_in(spec.center_range[axis].0, spec.center_range[axis].1);
        let rf = rng.uniform_in(spec.radii_range[axis].0, spec.radii_range[axis].1);
        center[axis] = cf * (grid[axis] - 1) as f64;
        radii[axis] = rf * grid[axis] as f64;
    }
    Ellipsoid { center, radii }
}

/// Conservative overlap test on bounding boxes; adequate for placement checks.
fn ellipsoids_overlap(a: &Ellipsoid, b: &Ellipsoid) -> bool {
    (0..3).all(|ax| (a.center[ax] - b.center[ax]).abs() <= a.radii[ax] + b.radii[ax])
}

/// Analytic voxel count of the ellipsoid volume `(4/3) pi r0 r1 r2` for the
/// given fractional radii on a grid; used by size-prior oracles.
pub fn analytic_ellipsoid_voxels(radii_frac: [f64; 3], grid: [usize; 3]) -> f64 {
    let r: f64 = (0..3).map(|a| radii_frac[a] * grid[a] as f64).product();
    4.0 / 3.0 * std::f64::consts::PI * r
}

/// Zero out the channels a dataset does not annotate. The annotation vector,
/// not the mask, is what encodes "unknown" for the loss.
pub fn partially_annotate(full: &LabelMask, w: &AnnotationVector) -> Result<LabelMask> {
    if w.len() != full.channels() {
        return Err(Error::InvalidArgument(format!(
            "annotation vector length {} != mask channels {}",
            w.len(),
            full.channels()
        )));
    }
    let mut data = full.data.clone();
    for (c, &flag) in w.0.iter().enumerate() {
        if flag == 0 {
            data.channel_mut(c).fill(0.0);
        }
    }
    LabelMask::new(data)
}

/// One pretraining sample: a volume, its (partially annotated) labels, and
/// the annotation vector of its source dataset.
#[derive(Debug, Clone)]
pub struct AssemblySample {
    pub volume: Volume,
    pub labels: LabelMask,
    pub annotation: AnnotationVector,
    pub dataset: String,
    pub index_in_dataset: usize,
    pub seed: u64,
}

/// Materialized pretraining corpus.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub samples: Vec<AssemblySample>,
    pub n_classes: usize,
    pub warnings: Vec<String>,
}

/// Build the pretraining assembly: every dataset contributes `n_volumes`
/// phantoms carrying that dataset's annotation vector. Ordering is by
/// (dataset index, volume index) and is deterministic under a fixed seed.
pub fn build_assembly(
    dataset_specs: &[DatasetSpec],
    organs: &[OrganSpec],
    n_classes: usize,
    seed: u64,
) -> Result<Assembly> {
    if dataset_specs.is_empty() {
        return Err(Error::InvalidArgument("assembly needs at least one dataset".into()));
    }
    for ds in dataset_specs {
        ds.validate(n_classes)?;
    }
    let mut warnings = Vec::new();
    let distinct: std::collections::BTreeSet<Vec<u8>> =
        dataset_specs.iter().map(|d| d.annotation.0.clone()).collect();
    if distinct.len() < 2 {
        warnings.push(
            "all datasets share one annotation vector; partial-label masking is untested".to_string(),
        );
    }
    let root = Rng::new(seed);
    let mut samples = Vec::new();
    for (di, ds) in dataset_specs.iter().enumerate() {
        let shifted = ds.shifted_organs(organs);
        let params = PhantomParams::from_dataset(ds, n_classes);
        let ds_rng = root.split(di as u64);
        for vi in 0..ds.n_volumes {
            let sample_seed = ds_rng.split(vi as u64).next_u64();
            let (volume, full) = generate_phantom(sample_seed, &shifted, &params)?;
            let labels = partially_annotate(&full, &ds.annotation)?;
            samples.push(AssemblySample {
                volume,
                labels,
                annotation: ds.annotation.clone(),
                dataset: ds.name.clone(),
                index_in_dataset: vi,
                seed: sample_seed,
            });
        }
    }
    Ok(Assembly { samples, n_classes, warnings })
}

/// Ground truth for the query volume, quarantined behind an explicit
/// evaluation accessor so adaptation code has no casual path to it.
#[derive(Debug, Clone)]
pub struct QueryGroundTruth {
    mask: LabelMask,
}

impl QueryGroundTruth {
    pub fn new(mask: LabelMask) -> Self {
        QueryGroundTruth { mask }
    }

    /// Evaluation-only access. Adaptation engines must not call this; a
    /// poisoning test asserts that adapted parameters are byte-identical
    /// when this mask is replaced with garbage.
    pub fn for_evaluation(&self) -> &LabelMask {
        &self.mask
    }
}

/// A few-shot adaptation task: K labeled support volumes plus one unlabeled
/// query. Support masks are single-channel (the target organ).
#[derive(Debug, Clone)]
pub struct FewShotTask {
    pub organ_class: usize,
    pub support: Vec<(Volume, LabelMask)>,
    pub query: Volume,
    query_gt: QueryGroundTruth,
    pub seeds: Vec<u64>,
}

impl FewShotTask {
    pub fn shots(&self) -> usize {
        self.support.len()
    }

    pub fn eval_ground_truth(&self) -> &QueryGroundTruth {
        &self.query_gt
    }

    /// Replace the quarantined ground truth (poisoning tests, external eval).
    pub fn replace_ground_truth(&mut self, gt: QueryGroundTruth) {
        self.query_gt = gt;
    }
}

/// Build a few-shot task from a target dataset spec: K support phantoms and
/// one query, all drawn from the (possibly domain-shifted) target
/// distribution with disjoint per-sample seeds.
pub fn build_fewshot_task(
    target_spec: &DatasetSpec,
    organs: &[OrganSpec],
    n_classes: usize,
    organ: usize,
    k: usize,
    seed: u64,
) -> Result<FewShotTask> {
    if k == 0 {
        return Err(Error::InvalidArgument("few-shot task needs K >= 1".into()));
    }
    target_spec.validate(n_classes)?;
    if !target_spec.annotation.is_annotated(organ) {
        return Err(Error::InvalidArgument(format!(
            "organ {organ} is not annotated in target dataset {}",
            target_spec.name
        )));
    }
    if !organs.iter().any(|o| o.class_id == organ) {
        return Err(Error::InvalidArgument(format!("organ {organ} has no spec")));
    }
    let shifted = target_spec.shifted_organs(organs);
    let params = PhantomParams::from_dataset(target_spec, n_classes);
    let root = Rng::new(seed).split(0x5EED);
    // Support streams are labeled by shot index; the query stream has a fixed
    // label so the same task seed yields the same query regardless of K.
    let mut seeds = Vec::with_capacity(k + 1);
    for idx in 0..k {
        seeds.push(root.split(idx as u64).next_u64());
    }
    seeds.push(root.split(u64::MAX).next_u64());
    {
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != seeds.len() {
            return Err(Error::InvalidArgument("support/query seed collision".into()));
        }
    }
    let mut support = Vec::with_capacity(k);
    for &s in &seeds[..k] {
        let (vol, full) = generate_phantom(s, &shifted, &params)?;
        support.push((vol, full.channel_mask(organ)?));
    }
    let (query, query_full) = generate_phantom(seeds[k], &shifted, &params)?;
    let query_gt = QueryGroundTruth::new(query_full.channel_mask(organ)?);
    Ok(FewShotTask { organ_class: organ, support, query, query_gt, seeds })
}
