//! Synthetic ellipsoid volumes with exactly known masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::volume_io::{Volume, VolumeKind, CANONICAL_SPACING};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub foreground_intensity: f64,
    pub background_intensity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Centered ellipsoid filling roughly half of each axis.
    pub fn centered(shape: [usize; 3], seed: u64) -> Self {
        PhantomSpec {
            shape,
            center: shape.map(|n| (n as f64 - 1.0) / 2.0),
            radii: shape.map(|n| n as f64 / 4.0),
            foreground_intensity: 1.0,
            background_intensity: 0.0,
            noise_sigma: 0.1,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n == 0) {
            return Err(Error::Contract(format!("phantom shape must be positive, got {:?}", self.shape)));
        }
        if self.radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Contract(format!("phantom radii must be strictly positive, got {:?}", self.radii)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Contract("phantom noise sigma must be non-negative".into()));
        }
        for a in 0..3 {
            let (lo, hi) = (self.center[a] - self.radii[a], self.center[a] + self.radii[a]);
            if lo < 0.0 || hi > (self.shape[a] - 1) as f64 {
                return Err(Error::Contract(format!(
                    "ellipsoid spans [{lo}, {hi}] on axis {a}, outside 0..{}",
                    self.shape[a] - 1
                )));
            }
        }
        Ok(())
    }

    /// Membership test at an integer voxel centre.
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Standard normal draw for voxel `index`, independent of evaluation order:
/// the ChaCha stream is positioned at a per-voxel word offset.
fn voxel_normal(rng: &mut ChaCha8Rng, index: usize) -> f64 {
    rng.set_word_pos(index as u128 * 4);
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Returns `(image, mask)` on the canonical spacing.
pub fn make_ellipsoid_phantom<T: Scalar>(spec: &PhantomSpec) -> Result<(Volume<T>, Volume<T>)> {
    spec.validate()?;
    let mask = Volume::from_fn(spec.shape, CANONICAL_SPACING, VolumeKind::Label, |x, y, z| {
        if spec.contains(x, y, z) {
            T::one()
        } else {
            T::zero()
        }
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let contrast = spec.foreground_intensity - spec.background_intensity;
    let data = mask
        .data()
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let noise = if spec.noise_sigma > 0.0 { spec.noise_sigma * voxel_normal(&mut rng, i) } else { 0.0 };
            T::of(spec.background_intensity + contrast * m.as_f64() + noise)
        })
        .collect();
    let image = mask.with_data(data, VolumeKind::Image)?;
    Ok((image, mask))
}
