//! Volumes with physical metadata: MetaImage I/O, resampling and intensity
//! normalization.

mod metaimage;

pub use metaimage::{read_metaimage, write_metaimage, ElementType};

use edgeseg_tensor::{Shape5, Tensor};

use crate::{Error, Result, Scalar};

/// Canonical voxel spacing in millimetres.
pub const CANONICAL_SPACING: [f64; 3] = [0.625, 0.625, 1.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VolumeKind {
    Image,
    Label,
}

/// Rank-3 scalar field indexed `[x, y, z]` (z is the slice axis), stored
/// x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    data: Vec<T>,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    kind: VolumeKind,
}

impl<T: Scalar> Volume<T> {
    pub fn new(data: Vec<T>, dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], kind: VolumeKind) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("volume dimensions must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Contract(format!("spacing must be strictly positive, got {spacing:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Contract(format!("{} voxels do not fill dimensions {dims:?}", data.len())));
        }
        if kind == VolumeKind::Label {
            if let Some(v) = data.iter().find(|&&v| v != T::zero() && v != T::one()) {
                return Err(Error::Contract(format!("label volume holds non-binary value {v}")));
            }
        }
        Ok(Volume { data, dims, spacing, origin, kind })
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        kind: VolumeKind,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::new(data, dims, spacing, [0.0; 3], kind)
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], kind: VolumeKind, value: T) -> Result<Self> {
        Volume::new(vec![value; dims.iter().product()], dims, spacing, [0.0; 3], kind)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Contract(format!("spacing must be strictly positive, got {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    /// Reinterprets the volume as a label map; fails on non-binary data.
    pub fn into_label(self) -> Result<Self> {
        Volume::new(self.data, self.dims, self.spacing, self.origin, VolumeKind::Label)
    }

    /// Same geometry, new voxel values.
    pub fn with_data(&self, data: Vec<T>, kind: VolumeKind) -> Result<Self> {
        Volume::new(data, self.dims, self.spacing, self.origin, kind)
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > T::zero()).count()
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    /// `[1, 1, x, y, z]` tensor view of the voxels.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(Shape5::new(1, 1, self.dims[0], self.dims[1], self.dims[2]), self.data.clone())
    }

    /// Inverse of [`Volume::to_tensor`] for a single-item, single-channel tensor.
    pub fn from_tensor(t: &Tensor<T>, spacing: [f64; 3], kind: VolumeKind) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::Shape(format!("expected a [1, 1, x, y, z] tensor, got {s}")));
        }
        Volume::new(t.data().to_vec(), s.spatial(), spacing, [0.0; 3], kind)
    }

    /// Sub-block starting at `start` (must lie inside the volume).
    pub fn crop(&self, start: [usize; 3], size: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| start[a] + size[a] > self.dims[a]) {
            return Err(Error::Contract(format!(
                "crop {start:?}+{size:?} exceeds volume {:?}",
                self.dims
            )));
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[2] {
            for y in 0..size[1] {
                let row = self.index(start[0], start[1] + y, start[2] + z);
                data.extend_from_slice(&self.data[row..row + size[0]]);
            }
        }
        let origin = std::array::from_fn(|a| self.origin[a] + start[a] as f64 * self.spacing[a]);
        Volume::new(data, size, self.spacing, origin, self.kind)
    }

    /// Pads to at least `min_dims`, splitting the padding evenly with the
    /// extra voxel after. Returns the padded volume and the leading padding.
    pub fn pad_to(&self, min_dims: [usize; 3], fill: T) -> (Self, [usize; 3]) {
        let dims: [usize; 3] = std::array::from_fn(|a| self.dims[a].max(min_dims[a]));
        let before: [usize; 3] = std::array::from_fn(|a| (dims[a] - self.dims[a]) / 2);
        if dims == self.dims {
            return (self.clone(), before);
        }
        let mut data = vec![fill; dims.iter().product()];
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                let src = self.index(0, y, z);
                let dst = before[0] + dims[0] * (before[1] + y + dims[1] * (before[2] + z));
                data[dst..dst + self.dims[0]].copy_from_slice(&self.data[src..src + self.dims[0]]);
            }
        }
        let origin = std::array::from_fn(|a| self.origin[a] - before[a] as f64 * self.spacing[a]);
        (Volume { data, dims, spacing: self.spacing, origin, kind: self.kind }, before)
    }

    /// Trilinear sample at a continuous voxel coordinate, clamped to the border.
    pub fn sample_linear(&self, p: [f64; 3]) -> T {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let max = (self.dims[a] - 1) as f64;
            let c = p[a].clamp(0.0, max);
            let f = c.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(self.dims[a] - 1);
            frac[a] = c - f;
        }
        let v = |x: usize, y: usize, z: usize| self.get(x, y, z).as_f64();
        // a + t * (b - a) keeps constant neighbourhoods exact
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let c00 = lerp(v(lo[0], lo[1], lo[2]), v(hi[0], lo[1], lo[2]), frac[0]);
        let c10 = lerp(v(lo[0], hi[1], lo[2]), v(hi[0], hi[1], lo[2]), frac[0]);
        let c01 = lerp(v(lo[0], lo[1], hi[2]), v(hi[0], lo[1], hi[2]), frac[0]);
        let c11 = lerp(v(lo[0], hi[1], hi[2]), v(hi[0], hi[1], hi[2]), frac[0]);
        let c0 = lerp(c00, c10, frac[1]);
        let c1 = lerp(c01, c11, frac[1]);
        T::of(lerp(c0, c1, frac[2]))
    }

    /// Nearest-neighbour sample (round half away from zero), clamped to the border.
    pub fn sample_nearest(&self, p: [f64; 3]) -> T {
        let idx: [usize; 3] = std::array::from_fn(|a| p[a].round().clamp(0.0, (self.dims[a] - 1) as f64) as usize);
        self.get(idx[0], idx[1], idx[2])
    }

    /// Samples with the interpolation appropriate for the volume kind.
    pub fn sample(&self, p: [f64; 3]) -> T {
        match self.kind {
            VolumeKind::Image => self.sample_linear(p),
            VolumeKind::Label => self.sample_nearest(p),
        }
    }
}

/// Output size per axis: `round(n * in_spacing / target_spacing)`, at least 1.
pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    std::array::from_fn(|a| ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1))
}

/// Resamples onto `target_spacing`; images trilinearly, labels by nearest
/// neighbour. The origin is kept.
pub fn resample<T: Scalar>(volume: &Volume<T>, target_spacing: [f64; 3]) -> Result<Volume<T>> {
    if target_spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Contract(format!("target spacing must be strictly positive, got {target_spacing:?}")));
    }
    let dims = resampled_dims(volume.dims, volume.spacing, target_spacing);
    resample_to(volume, dims, target_spacing)
}

/// Resamples onto an explicit grid sharing the origin, e.g. to map a
/// prediction back onto the grid it was resampled from.
pub fn resample_to<T: Scalar>(volume: &Volume<T>, dims: [usize; 3], spacing: [f64; 3]) -> Result<Volume<T>> {
    let ratio: [f64; 3] = std::array::from_fn(|a| spacing[a] / volume.spacing[a]);
    let out = Volume::from_fn(dims, spacing, volume.kind, |x, y, z| {
        volume.sample([x as f64 * ratio[0], y as f64 * ratio[1], z as f64 * ratio[2]])
    })?;
    Ok(out.with_origin(volume.origin))
}

/// Floor applied to the variance before dividing.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Per-volume z-score: zero mean, unit variance.
pub fn normalize_intensity<T: Scalar>(volume: &Volume<T>) -> Result<Volume<T>> {
    if volume.kind != VolumeKind::Image {
        return Err(Error::Contract("intensity normalization applies to image volumes only".into()));
    }
    let n = volume.len() as f64;
    let mean = volume.data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = volume.data.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    let std = var.max(VARIANCE_FLOOR).sqrt();
    let data = volume.data.iter().map(|v| T::of((v.as_f64() - mean) / std)).collect();
    volume.with_data(data, VolumeKind::Image)
}
