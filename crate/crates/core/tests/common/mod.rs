#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edgeseg::phantom::{make_ellipsoid_phantom, PhantomSpec};
use edgeseg::volume_io::write_metaimage;

/// `n` phantom cases named `Case00..` with the label suffix convention.
pub fn phantom_dataset(dir: &Path, n: usize, shape: [usize; 3]) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let mut spec = PhantomSpec::centered(shape, i as u64);
        spec.center[0] += i as f64 - 1.0;
        let (image, label) = make_ellipsoid_phantom::<f32>(&spec).unwrap();
        write_metaimage(&image, dir.join(format!("Case{i:02}.mhd"))).unwrap();
        write_metaimage(&label, dir.join(format!("Case{i:02}_segmentation.mhd"))).unwrap();
    }
    dir.to_path_buf()
}

/// Flags for a network small enough to train in seconds.
pub const TINY: &[&str] = &[
    "--network.width_multiplier",
    "0.0625",
    "--network.blocks",
    "1,1,1,1",
    "--train.patch_shape",
    "16,16,8",
    "--train.batch_size",
    "2",
    "--augment.max_displacement",
    "2",
];

pub fn edgeseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgeseg")).args(args).env_remove("EDGESEG_DATA_ROOT").output().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
