#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fluidnn_core::data::{load_mnist, save_checkpoint, Dataset, Split};
use fluidnn_core::model::{init_params, FluidParams};

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub checkpoint: PathBuf,
    pub params: FluidParams,
    pub test: Dataset,
}

impl Fixture {
    pub fn mnist_dir(&self) -> &Path {
        self.dir.path()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn write_idx(dir: &Path, prefix: &str, n: usize, rng: &mut ChaCha8Rng) {
    let mut images = Vec::with_capacity(16 + n * 784);
    for v in [0x0803u32, n as u32, 28, 28] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend((0..n * 784).map(|_| rng.gen::<u8>()));
    let mut labels = Vec::with_capacity(8 + n);
    for v in [0x0801u32, n as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend((0..n).map(|_| rng.gen_range(0..10u8)));
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

/// Random labeled images in MNIST layout and an untrained checkpoint.
pub fn fixture(n_test: usize, seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    write_idx(dir.path(), "t10k", n_test, &mut rng);
    write_idx(dir.path(), "train", 512, &mut rng);
    let params = init_params(seed);
    let checkpoint = dir.path().join("model.fldn");
    save_checkpoint(&params, &checkpoint).unwrap();
    let test = load_mnist(dir.path(), Split::Test).unwrap();
    Fixture {
        dir,
        checkpoint,
        params,
        test,
    }
}
