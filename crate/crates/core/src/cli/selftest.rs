//! Phantom-based invariant checks runnable from the installed binary.

use std::path::Path;

use crate::augment::{augment_sample, warp, AugmentConfig, DeformationField};
use crate::edge::{extract_edge_map, EdgeMapSet, EdgeExtractor, LEVEL_FACTORS};
use crate::inference::{sliding_window_predict, InferConfig, PatchPredictor};
use crate::losses::{cross_entropy, dice_loss, edge_loss};
use crate::metrics::{dice_score, surface_distances};
use crate::network::{Mode, Model, NetworkConfig};
use crate::phantom::{make_ellipsoid_phantom, PhantomSpec};
use crate::trainer::{lr_schedule, TrainConfig};
use crate::volume_io::{read_metaimage, write_metaimage, Volume, VolumeKind};
use crate::{Error, Result, Shape5, Tensor};

type Check = std::result::Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

struct Constant(f64);

impl PatchPredictor<f64> for Constant {
    fn predict(&self, patch: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(Tensor::full(patch.shape(), self.0))
    }
}

/// Writes the phantom pair into `dir`, runs every check, prints one line per
/// property and fails if any property fails.
pub fn run(dir: &Path) -> Result<()> {
    let (image, label) = make_ellipsoid_phantom::<f64>(&PhantomSpec::centered([32, 32, 16], 0))?;
    let (image_path, label_path) = (dir.join("phantom_image.mhd"), dir.join("phantom_label.mhd"));
    write_metaimage(&image, &image_path)?;
    write_metaimage(&label, &label_path)?;

    let checks: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("metaimage round trip", Box::new(|| {
            let i = read_metaimage::<f64>(&image_path, VolumeKind::Image).map_err(err)?;
            let l = read_metaimage::<f64>(&label_path, VolumeKind::Label).map_err(err)?;
            ensure(i == image && l == label, || "read-back differs from the written phantom".into())
        })),
        ("edge map is the 6-connected inner surface", Box::new(|| {
            let e = extract_edge_map(&label).map_err(err)?;
            let [nx, ny, nz] = label.dims();
            let fg = |x: isize, y: isize, z: isize| {
                x >= 0
                    && y >= 0
                    && z >= 0
                    && (x as usize) < nx
                    && (y as usize) < ny
                    && (z as usize) < nz
                    && label.get(x as usize, y as usize, z as usize) > 0.0
            };
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                        let n = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                        let expect = fg(xi, yi, zi) && n.iter().any(|&(a, b, c)| !fg(xi + a, yi + b, zi + c));
                        if (e.get(x, y, z) > 0.0) != expect {
                            return Err(format!("mismatch at ({x}, {y}, {z})"));
                        }
                    }
                }
            }
            Ok(())
        })),
        ("edge pyramid shapes", Box::new(|| {
            let set = EdgeMapSet::from_mask(&label, EdgeExtractor::Surface).map_err(err)?;
            let d = label.dims();
            let expect = LEVEL_FACTORS.map(|f| [d[0] / f[0], d[1] / f[1], d[2] / f[2]]);
            ensure(set.shapes() == expect, || format!("{:?} vs {expect:?}", set.shapes()))
        })),
        ("losses vanish at the exact mask", Box::new(|| {
            let t = label.to_tensor();
            let e = extract_edge_map(&label).map_err(err)?.to_tensor();
            let d = dice_loss(&t, &t, 1e-5).map_err(err)?.value;
            let ce = cross_entropy(&t, &t, 1e-7).map_err(err)?.value;
            let el = edge_loss(&e, &e).map_err(err)?.value;
            ensure(d.abs() < 1e-6 && ce.abs() < 1e-6 && el == 0.0, || format!("dice {d}, ce {ce}, edge {el}"))
        })),
        ("metrics of identical masks", Box::new(|| {
            let d = dice_score(&label, &label).map_err(err)?;
            let s = surface_distances(&label, &label, label.spacing()).map_err(err)?;
            ensure(d == 1.0 && s.map(|s| (s.hd95, s.msd)) == Some((0.0, 0.0)), || format!("dice {d}, {s:?}"))
        })),
        ("zero deformation is the identity", Box::new(|| {
            let field = DeformationField::from_control_points(image.dims(), [[0.0; 3]; 8]).map_err(err)?;
            let w = warp(&image, &field).map_err(err)?;
            let max = w.data().iter().zip(image.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure(max < 1e-12, || format!("max difference {max}"))
        })),
        ("augmented labels stay binary and aligned", Box::new(|| {
            let cfg = AugmentConfig { patch_shape: [16, 16, 8], foreground_bias: 1.0, ..AugmentConfig::default() };
            for seed in 0..4 {
                let p = augment_sample(&image, &label, &cfg, seed).map_err(err)?;
                if p.label.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(format!("seed {seed}: non-binary label"));
                }
                let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
                for (&i, &l) in p.image.data().iter().zip(p.label.data()) {
                    let acc = if l > 0.0 { &mut inside } else { &mut outside };
                    acc.0 += i;
                    acc.1 += 1;
                }
                if inside.1 == 0 {
                    return Err(format!("seed {seed}: foreground-biased crop has no foreground"));
                }
                if outside.1 > 0 && inside.0 / inside.1 as f64 <= outside.0 / outside.1 as f64 {
                    return Err(format!("seed {seed}: image and label disagree"));
                }
            }
            Ok(())
        })),
        ("stitching a constant predictor is exact", Box::new(|| {
            let v = Volume::filled([40, 40, 12], [1.0; 3], VolumeKind::Image, 0.0).map_err(err)?;
            let cfg = InferConfig { window: [16, 16, 8], stride: [8, 8, 4], ..InferConfig::default() };
            let out = sliding_window_predict(&Constant(0.7), &v, &cfg).map_err(err)?;
            ensure(out.data().iter().all(|&p| p == 0.7), || "stitched values differ from 0.7".into())
        })),
        ("network outputs are probabilities at input shape", Box::new(|| {
            let net = NetworkConfig { width_multiplier: 0.0625, blocks: [1, 1, 1, 1] };
            let model = Model::<f64>::new(&net, Mode::Full, 0).map_err(err)?;
            let x = Tensor::from_fn(Shape5::new(1, 1, 16, 16, 8), |i| ((i % 7) as f64 - 3.0) / 3.0);
            let out = model.forward(&x).map_err(err)?;
            let edges = out.edges.ok_or("no edge outputs")?;
            let in_range = |t: &Tensor<f64>| t.data().iter().all(|v| (0.0..=1.0).contains(v));
            ensure(out.prob.shape() == x.shape(), || format!("prob shape {}", out.prob.shape()))?;
            ensure(in_range(&out.prob) && edges.iter().all(in_range), || "output outside [0, 1]".into())
        })),
        ("learning-rate schedule", Box::new(|| {
            let cfg = TrainConfig::new(Mode::Full);
            let got = [0, 2000, 4000].map(|it| lr_schedule(it, &cfg, 1));
            ensure(got == [0.001, 0.0001, 0.00001], || format!("{got:?}"))
        })),
    ];

    let mut failed = 0;
    for (name, check) in &checks {
        match check() {
            Ok(()) => println!("PASS  {name}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("selftest: {}/{} properties passed; phantom written to {}", checks.len() - failed, checks.len(), dir.display());
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} selftest properties failed")));
    }
    Ok(())
}
