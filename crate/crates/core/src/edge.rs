//! Ground-truth boundary maps for deep edge supervision.

use crate::volume_io::{Volume, VolumeKind};
use crate::{Error, Result, Scalar};

/// Downsampling factors from patch resolution to the three supervised
/// decoder levels, coarsest first.
pub const LEVEL_FACTORS: [[usize; 3]; 3] = [[4, 4, 2], [2, 2, 1], [1, 1, 1]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EdgeExtractor {
    /// 6-connected inner surface of the mask.
    #[default]
    Surface,
    /// High-frequency energy of a one-level 3D Haar transform.
    Haar,
}

impl std::str::FromStr for EdgeExtractor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surface" => Ok(EdgeExtractor::Surface),
            "haar" => Ok(EdgeExtractor::Haar),
            other => Err(Error::Config(format!("edge.extractor must be surface or haar, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for EdgeExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EdgeExtractor::Surface => "surface",
            EdgeExtractor::Haar => "haar",
        })
    }
}

fn require_binary<T: Scalar>(mask: &Volume<T>) -> Result<()> {
    match mask.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(Error::Contract(format!("edge extraction needs a binary mask, found {v}"))),
        None => Ok(()),
    }
}

/// A voxel is an edge voxel when it is foreground and at least one of its six
/// face neighbours is background; outside the volume counts as background.
pub fn extract_edge_map<T: Scalar>(mask: &Volume<T>) -> Result<Volume<T>> {
    require_binary(mask)?;
    let d = mask.dims();
    let fg = |x: isize, y: isize, z: isize| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < d[0]
            && (y as usize) < d[1]
            && (z as usize) < d[2]
            && mask.get(x as usize, y as usize, z as usize) == T::one()
    };
    let out = Volume::from_fn(d, mask.spacing(), VolumeKind::Label, |x, y, z| {
        let (x, y, z) = (x as isize, y as isize, z as isize);
        let edge = fg(x, y, z)
            && !(fg(x - 1, y, z) && fg(x + 1, y, z) && fg(x, y - 1, z) && fg(x, y + 1, z) && fg(x, y, z - 1) && fg(x, y, z + 1));
        if edge {
            T::one()
        } else {
            T::zero()
        }
    })?;
    Ok(out.with_origin(mask.origin()))
}

/// Block max-pool with window = stride = `factor`.
pub fn downsample_edge_map<T: Scalar>(edge: &Volume<T>, factor: [usize; 3]) -> Result<Volume<T>> {
    let d = edge.dims();
    if (0..3).any(|a| factor[a] == 0 || d[a] % factor[a] != 0) {
        return Err(Error::Contract(format!("edge map {d:?} is not divisible by factor {factor:?}")));
    }
    let out_dims: [usize; 3] = std::array::from_fn(|a| d[a] / factor[a]);
    let spacing: [f64; 3] = std::array::from_fn(|a| edge.spacing()[a] * factor[a] as f64);
    let out = Volume::from_fn(out_dims, spacing, edge.kind(), |x, y, z| {
        let mut m = T::zero();
        for dz in 0..factor[2] {
            for dy in 0..factor[1] {
                for dx in 0..factor[0] {
                    m = m.max(edge.get(x * factor[0] + dx, y * factor[1] + dy, z * factor[2] + dz));
                }
            }
        }
        m
    })?;
    Ok(out.with_origin(edge.origin()))
}

/// One-level orthonormal 3D Haar transform on 2×2×2 blocks. Each output voxel
/// holds the magnitude of its block's seven high-pass coefficients divided by
/// `sqrt(2)`, the largest magnitude a binary block can reach, so values lie in
/// `[0, 1]`.
pub fn haar_edge_map<T: Scalar>(mask: &Volume<T>) -> Result<Volume<T>> {
    require_binary(mask)?;
    let d = mask.dims();
    if d.iter().any(|n| n % 2 != 0) {
        return Err(Error::Contract(format!("Haar edge map needs even dimensions, got {d:?}")));
    }
    let blocks: [usize; 3] = d.map(|n| n / 2);
    let mut magnitude = vec![0.0f64; blocks.iter().product()];
    let norm = 1.0 / 8f64.sqrt();
    for bz in 0..blocks[2] {
        for by in 0..blocks[1] {
            for bx in 0..blocks[0] {
                let mut v = [0.0f64; 8];
                for (i, slot) in v.iter_mut().enumerate() {
                    *slot = mask.get(2 * bx + (i & 1), 2 * by + ((i >> 1) & 1), 2 * bz + (i >> 2)).as_f64();
                }
                // subband s has sign (-1)^(popcount(s & i)) on element i; s = 0 is LLL
                let mut energy = 0.0;
                for s in 1..8usize {
                    let coef: f64 = v
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| if (s & i).count_ones() % 2 == 0 { x } else { -x })
                        .sum::<f64>()
                        * norm;
                    energy += coef * coef;
                }
                magnitude[bx + blocks[0] * (by + blocks[1] * bz)] = (energy / 2.0).sqrt().min(1.0);
            }
        }
    }
    let out = Volume::from_fn(d, mask.spacing(), VolumeKind::Image, |x, y, z| {
        T::of(magnitude[x / 2 + blocks[0] * (y / 2 + blocks[1] * (z / 2))])
    })?;
    Ok(out.with_origin(mask.origin()))
}

/// Supervision targets for the three decoder levels, coarsest first.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMapSet<T> {
    pub maps: [Volume<T>; 3],
}

impl<T: Scalar> EdgeMapSet<T> {
    pub fn from_mask(mask: &Volume<T>, extractor: EdgeExtractor) -> Result<Self> {
        let full = match extractor {
            EdgeExtractor::Surface => extract_edge_map(mask)?,
            EdgeExtractor::Haar => haar_edge_map(mask)?,
        };
        let coarse = downsample_edge_map(&full, LEVEL_FACTORS[0])?;
        let mid = downsample_edge_map(&full, LEVEL_FACTORS[1])?;
        Ok(EdgeMapSet { maps: [coarse, mid, full] })
    }

    pub fn shapes(&self) -> [[usize; 3]; 3] {
        [self.maps[0].dims(), self.maps[1].dims(), self.maps[2].dims()]
    }
}
