//! Online training augmentation: dense deformation from a 2×2×2 control
//! lattice, and random fixed-size crops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::volume_io::{Volume, VolumeKind};
use crate::{derive_seed, Error, Result, Scalar};

/// Training patch size in voxels.
pub const PATCH_SHAPE: [usize; 3] = [96, 96, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Bound on each control-point displacement component, in voxels.
    pub max_displacement: f64,
    /// Probability that a crop is forced to intersect the foreground.
    pub foreground_bias: f64,
    pub patch_shape: [usize; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, max_displacement: 4.0, foreground_bias: 0.5, patch_shape: PATCH_SHAPE }
    }
}

/// Dense per-voxel displacement (voxel units), stored component-major as
/// `[3, nx, ny, nz]` with x fastest inside each component.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    shape: [usize; 3],
    /// Corner displacements, corner index `cx + 2*cy + 4*cz`.
    control: [[f64; 3]; 8],
    displacement: Vec<f64>,
    pub max_displacement: f64,
    pub seed: u64,
}

impl DeformationField {
    pub const CONTROL_GRID: [usize; 3] = [2, 2, 2];

    /// Interpolates the control lattice (corners of the volume) to every
    /// voxel. With two control points per axis the B-spline is first order,
    /// i.e. trilinear.
    pub fn from_control_points(shape: [usize; 3], control: [[f64; 3]; 8]) -> Result<Self> {
        if shape.iter().any(|&n| n < 2) {
            return Err(Error::Contract(format!("deformation field needs every axis >= 2, got {shape:?}")));
        }
        let plane = shape.iter().product::<usize>();
        let mut displacement = vec![0.0; 3 * plane];
        let mut i = 0;
        for z in 0..shape[2] {
            let wz = z as f64 / (shape[2] - 1) as f64;
            for y in 0..shape[1] {
                let wy = y as f64 / (shape[1] - 1) as f64;
                for x in 0..shape[0] {
                    let wx = x as f64 / (shape[0] - 1) as f64;
                    for (comp, slot) in displacement.chunks_mut(plane).enumerate() {
                        let c = |cx: usize, cy: usize, cz: usize| control[cx + 2 * cy + 4 * cz][comp];
                        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
                        let v0 = lerp(lerp(c(0, 0, 0), c(1, 0, 0), wx), lerp(c(0, 1, 0), c(1, 1, 0), wx), wy);
                        let v1 = lerp(lerp(c(0, 0, 1), c(1, 0, 1), wx), lerp(c(0, 1, 1), c(1, 1, 1), wx), wy);
                        slot[i] = lerp(v0, v1, wz);
                    }
                    i += 1;
                }
            }
        }
        let max_displacement = control.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(DeformationField { shape, control, displacement, max_displacement, seed: 0 })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn control_points(&self) -> &[[f64; 3]; 8] {
        &self.control
    }

    /// Displacement vector at voxel `(x, y, z)`.
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let plane = self.shape.iter().product::<usize>();
        let i = x + self.shape[0] * (y + self.shape[1] * z);
        [self.displacement[i], self.displacement[plane + i], self.displacement[2 * plane + i]]
    }

    pub fn components(&self) -> &[f64] {
        &self.displacement
    }
}

/// Draws the eight control displacements uniformly in `[-max, max]^3`.
pub fn sample_bspline_field(shape: [usize; 3], max_displacement: f64, seed: u64) -> Result<DeformationField> {
    if !(max_displacement >= 0.0) {
        return Err(Error::Contract("max_displacement must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut control = [[0.0; 3]; 8];
    if max_displacement > 0.0 {
        for v in control.iter_mut().flatten() {
            *v = rng.gen_range(-max_displacement..=max_displacement);
        }
    }
    let mut field = DeformationField::from_control_points(shape, control)?;
    field.max_displacement = max_displacement;
    field.seed = seed;
    Ok(field)
}

/// `out(p) = in(p + d(p))`: trilinear for images, nearest for labels,
/// clamped at the border.
pub fn warp<T: Scalar>(volume: &Volume<T>, field: &DeformationField) -> Result<Volume<T>> {
    if volume.dims() != field.shape {
        return Err(Error::Contract(format!(
            "deformation field shape {:?} does not match volume {:?}",
            field.shape,
            volume.dims()
        )));
    }
    let out = Volume::from_fn(volume.dims(), volume.spacing(), volume.kind(), |x, y, z| {
        let d = field.at(x, y, z);
        volume.sample([x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]])
    })?;
    Ok(out.with_origin(volume.origin()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch<T> {
    pub image: Volume<T>,
    pub label: Volume<T>,
    /// Crop start in the unpadded parent volume; negative when the parent
    /// was padded on that axis.
    pub source_origin: [isize; 3],
}

/// Bounding box `(min, max)` inclusive of foreground voxels.
pub fn foreground_bbox<T: Scalar>(label: &Volume<T>) -> Option<([usize; 3], [usize; 3])> {
    let d = label.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if label.get(x, y, z) > T::zero() {
                    any = true;
                    for (a, v) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v);
                    }
                }
            }
        }
    }
    any.then_some((lo, hi))
}

/// Crops `crop` voxels at a seeded random origin. Volumes smaller than the
/// crop are first padded symmetrically (image with its minimum, label with 0).
pub fn random_crop<T: Scalar>(
    image: &Volume<T>,
    label: &Volume<T>,
    crop: [usize; 3],
    foreground_bias: f64,
    seed: u64,
) -> Result<Patch<T>> {
    if image.dims() != label.dims() {
        return Err(Error::Contract(format!(
            "image {:?} and label {:?} shapes differ",
            image.dims(),
            label.dims()
        )));
    }
    if label.kind() != VolumeKind::Label {
        return Err(Error::Contract("random_crop expects a label volume".into()));
    }
    let (image, pad) = image.pad_to(crop, image.min_value());
    let (label, _) = label.pad_to(crop, T::zero());
    let dims = image.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let biased = rng.gen::<f64>() < foreground_bias;
    // A biased crop is anchored on a uniformly drawn foreground voxel, so it
    // always contains foreground.
    let anchor = if biased {
        let count = label.foreground_count();
        (count > 0).then(|| {
            let k = rng.gen_range(0..count);
            let i = label.data().iter().enumerate().filter(|(_, v)| **v > T::zero()).nth(k).map(|(i, _)| i);
            let i = i.unwrap_or_else(|| unreachable!());
            [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])]
        })
    } else {
        None
    };
    let mut origin = [0usize; 3];
    for a in 0..3 {
        let max_start = dims[a] - crop[a];
        let (lo, hi) = match anchor {
            Some(v) => ((v[a] + 1).saturating_sub(crop[a]), v[a].min(max_start)),
            None => (0, max_start),
        };
        origin[a] = rng.gen_range(lo..=hi);
    }
    Ok(Patch {
        image: image.crop(origin, crop)?,
        label: label.crop(origin, crop)?,
        source_origin: std::array::from_fn(|a| origin[a] as isize - pad[a] as isize),
    })
}

/// Deform the whole volume, then crop: the online augmentation for one sample.
pub fn augment_sample<T: Scalar>(
    image: &Volume<T>,
    label: &Volume<T>,
    config: &AugmentConfig,
    seed: u64,
) -> Result<Patch<T>> {
    if !config.enabled {
        return random_crop(image, label, config.patch_shape, config.foreground_bias, derive_seed(seed, 1));
    }
    let can_warp = image.dims().iter().all(|&n| n >= 2) && config.max_displacement > 0.0;
    if !can_warp {
        return random_crop(image, label, config.patch_shape, config.foreground_bias, derive_seed(seed, 1));
    }
    let field = sample_bspline_field(image.dims(), config.max_displacement, derive_seed(seed, 0))?;
    let image = warp(image, &field)?;
    let label = warp(label, &field)?;
    random_crop(&image, &label, config.patch_shape, config.foreground_bias, derive_seed(seed, 1))
}
