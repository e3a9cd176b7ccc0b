//! Whole-volume prediction by averaging overlapping window predictions.

use std::collections::VecDeque;

use edgeseg_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::network::Model;
use crate::trainer::Preprocess;
use crate::volume_io::{resample_to, Volume, VolumeKind};
use crate::{Error, Result, Scalar};

pub const WINDOW: [usize; 3] = [96, 96, 32];
pub const STRIDE: [usize; 3] = [24, 24, 8];

#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub origins: Vec<[usize; 3]>,
    /// Shape after padding short axes up to the window.
    pub padded_shape: [usize; 3],
    /// Padding inserted before the volume on each axis.
    pub pad_before: [usize; 3],
}

fn axis_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + window <= dim).collect();
    if out.last().map_or(true, |&o| o + window < dim) {
        out.push(dim - window);
    }
    out
}

/// Window origins on a grid of `stride`, plus a final origin flush with the
/// end of each axis when the grid does not reach it.
pub fn plan_windows(shape: [usize; 3], window: [usize; 3], stride: [usize; 3]) -> Result<WindowPlan> {
    if window.iter().chain(&stride).any(|&v| v == 0) {
        return Err(Error::Contract(format!("window {window:?} and stride {stride:?} must be positive")));
    }
    let padded_shape: [usize; 3] = std::array::from_fn(|a| shape[a].max(window[a]));
    let pad_before = std::array::from_fn(|a| (padded_shape[a] - shape[a]) / 2);
    let per_axis: [Vec<usize>; 3] = std::array::from_fn(|a| axis_origins(padded_shape[a], window[a], stride[a]));
    let mut origins = Vec::new();
    for &z in &per_axis[2] {
        for &y in &per_axis[1] {
            for &x in &per_axis[0] {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(WindowPlan { window, stride, origins, padded_shape, pad_before })
}

impl WindowPlan {
    /// Number of windows covering each voxel of the padded volume.
    pub fn coverage(&self) -> Vec<u32> {
        let [px, py, _] = self.padded_shape;
        let mut counts = vec![0u32; self.padded_shape.iter().product()];
        for o in &self.origins {
            for z in o[2]..o[2] + self.window[2] {
                for y in o[1]..o[1] + self.window[1] {
                    let row = px * (y + py * z);
                    counts[row + o[0]..row + o[0] + self.window[0]].iter_mut().for_each(|c| *c += 1);
                }
            }
        }
        counts
    }
}

/// Anything that maps a `[1, 1, x, y, z]` patch to probabilities of the same
/// shape.
pub trait PatchPredictor<T: Scalar>: Sync {
    fn predict(&self, patch: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> PatchPredictor<T> for Model<T> {
    fn predict(&self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(patch)?.prob)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WindowOrder {
    #[default]
    Raster,
    Reverse,
    Shuffled(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub workers: usize,
    pub order: WindowOrder,
    pub threshold: f64,
    /// Keep only the largest 6-connected component after thresholding.
    pub lcc: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { window: WINDOW, stride: STRIDE, workers: 1, order: WindowOrder::Raster, threshold: 0.5, lcc: false }
    }
}

/// Averages predictor outputs over every window of the plan and crops the
/// result back to the volume's shape.
///
/// Each worker keeps its own running per-voxel mean and count, merged at
/// the end, so the result does not depend on scheduling beyond
/// floating-point rounding. Running means keep identical window outputs
/// exact (a plain sum of three 0.7s divided by 3 is not 0.7).
pub fn sliding_window_predict<T: Scalar, P: PatchPredictor<T> + ?Sized>(
    predictor: &P,
    volume: &Volume<T>,
    config: &InferConfig,
) -> Result<Volume<T>> {
    let plan = plan_windows(volume.dims(), config.window, config.stride)?;
    let (padded, before) = volume.pad_to(config.window, volume.min_value());
    debug_assert_eq!(before, plan.pad_before);
    let mut order = plan.origins.clone();
    match config.order {
        WindowOrder::Raster => {}
        WindowOrder::Reverse => order.reverse(),
        WindowOrder::Shuffled(seed) => order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    let workers = config.workers.clamp(1, order.len());
    let n: usize = plan.padded_shape.iter().product();
    let queue = std::sync::Mutex::new(order.into_iter().collect::<VecDeque<_>>());
    let run_worker = || -> Result<(Vec<f64>, Vec<u32>)> {
        let mut mean = vec![0.0f64; n];
        let mut count = vec![0u32; n];
        loop {
            let next = queue.lock().unwrap_or_else(|e| e.into_inner()).pop_front();
            let Some(o) = next else { break };
            let patch = padded.crop(o, plan.window)?.to_tensor();
            let prob = predictor.predict(&patch)?;
            if prob.shape() != patch.shape() {
                return Err(Error::Contract(format!("predictor returned {} for a {} patch", prob.shape(), patch.shape())));
            }
            accumulate(&mut mean, &mut count, plan.padded_shape, o, plan.window, prob.data());
        }
        Ok((mean, count))
    };
    let partials: Vec<Result<(Vec<f64>, Vec<u32>)>> = if workers == 1 {
        vec![run_worker()]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers).map(|_| s.spawn(&run_worker)).collect();
            handles.into_iter().map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e))).collect()
        })
    };
    let mut mean = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    for p in partials {
        let (m, c) = p?;
        for i in 0..n {
            if c[i] > 0 {
                let total = count[i] + c[i];
                mean[i] += (m[i] - mean[i]) * (c[i] as f64 / total as f64);
                count[i] = total;
            }
        }
    }
    let avg: Vec<T> = mean.into_iter().map(T::of).collect();
    let stitched = Volume::new(avg, plan.padded_shape, volume.spacing(), [0.0; 3], VolumeKind::Image)?;
    Ok(stitched.crop(plan.pad_before, volume.dims())?.with_origin(volume.origin()))
}

fn accumulate<T: Scalar>(
    mean: &mut [f64],
    count: &mut [u32],
    shape: [usize; 3],
    o: [usize; 3],
    window: [usize; 3],
    prob: &[T],
) {
    let [wx, wy, wz] = window;
    for z in 0..wz {
        for y in 0..wy {
            let dst = o[0] + shape[0] * ((o[1] + y) + shape[1] * (o[2] + z));
            let src = wx * (y + wy * z);
            for x in 0..wx {
                let (i, v) = (dst + x, prob[src + x].as_f64());
                count[i] += 1;
                mean[i] += (v - mean[i]) / count[i] as f64;
            }
        }
    }
}

/// Thresholds at `prob >= threshold`, optionally keeping only the largest
/// 6-connected component (the first one found in raster order on ties).
pub fn binarize<T: Scalar>(prob: &Volume<T>, threshold: f64, lcc: bool) -> Result<Volume<T>> {
    let mask: Vec<bool> = prob.data().iter().map(|v| v.as_f64() >= threshold).collect();
    let mask = if lcc { largest_component(&mask, prob.dims()) } else { mask };
    let data = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    prob.with_data(data, VolumeKind::Label)
}

/// Component labels (1-based, 0 for background) and their sizes.
pub fn connected_components(mask: &[bool], dims: [usize; 3]) -> (Vec<u32>, Vec<usize>) {
    let [nx, ny, nz] = dims;
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let mut visit = |j: usize| {
                if mask[j] && labels[j] == 0 {
                    labels[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

fn largest_component(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let (labels, sizes) = connected_components(mask, dims);
    let Some(best) = sizes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).map(|(i, _)| i as u32 + 1)
    else {
        return mask.to_vec();
    };
    labels.iter().map(|&l| l == best).collect()
}

/// Preprocesses a raw image, predicts, and maps probabilities back onto the
/// image's own grid.
pub fn predict_volume<T: Scalar, P: PatchPredictor<T> + ?Sized>(
    predictor: &P,
    image: &Volume<T>,
    pre: &Preprocess,
    config: &InferConfig,
) -> Result<Volume<T>> {
    let prepared = pre.image(image)?;
    let prob = sliding_window_predict(predictor, &prepared, config)?;
    resample_to(&prob, image.dims(), image.spacing())
}
