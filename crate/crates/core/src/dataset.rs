//! Loading generated datasets from disk, train/test split files, and an
//! access log that records which images each experiment phase touched.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dishgen::{
    image_seed, read_json, render_image, render_mask, sample_scene, DatasetManifest, GeneratorParams, ImageRecord,
    MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::netpbm::{self, RgbImage};
use crate::tensor::Tensor;

pub const TRAINVAL_SPLIT_FILE: &str = "split_trainval.txt";
pub const TEST_SPLIT_FILE: &str = "split_test.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: LabelMask,
}

/// Stacks images into a (n, 3, h, w) tensor with values in [0, 1].
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = images.into_iter().map(RgbImage::to_tensor).collect();
    Tensor::stack(&parts)
}

/// Generates `n` samples in memory with the same per-image seeds as
/// [`crate::dishgen::generate_dataset`].
pub fn synthesize(params: &GeneratorParams, n: usize, seed: u64) -> Result<Vec<Sample>> {
    params.validate()?;
    (0..n)
        .map(|id| {
            let scene = sample_scene(params, image_seed(seed, id))?;
            Ok(Sample {
                id: format!("{id:03}"),
                image: render_image(&scene),
                mask: render_mask(&scene),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub phase: String,
    pub file: String,
}

/// A generated dataset directory.
#[derive(Debug)]
pub struct DatasetDir {
    root: PathBuf,
    manifest: DatasetManifest,
    log: RefCell<Vec<AccessRecord>>,
}

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&root.join(MANIFEST_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            log: RefCell::new(Vec::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn record(&self, id: usize) -> Result<&ImageRecord> {
        self.manifest
            .images
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Invalid(format!("image id {id} is not in the manifest")))
    }

    /// Reads the given images, logging every file under `phase`.
    pub fn load(&self, ids: &[usize], phase: &str) -> Result<Vec<Sample>> {
        ids.iter()
            .map(|&id| {
                let rec = self.record(id)?;
                let mut log = self.log.borrow_mut();
                for f in [&rec.image, &rec.mask] {
                    log.push(AccessRecord {
                        phase: phase.to_string(),
                        file: f.clone(),
                    });
                }
                drop(log);
                Ok(Sample {
                    id: format!("{id:03}"),
                    image: netpbm::read_ppm(&self.root.join(&rec.image))?,
                    mask: netpbm::read_pgm_mask(&self.root.join(&rec.mask))?,
                })
            })
            .collect()
    }

    pub fn access_log(&self) -> Vec<AccessRecord> {
        self.log.borrow().clone()
    }

    pub fn read_split(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        Ok((
            read_id_list(&self.root.join(TRAINVAL_SPLIT_FILE))?,
            read_id_list(&self.root.join(TEST_SPLIT_FILE))?,
        ))
    }
}

/// Seeded random split; the test part has `round(n * test_fraction)` ids.
pub fn make_split(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let mut test = ids.split_off(n - n_test.min(n));
    ids.sort_unstable();
    test.sort_unstable();
    (ids, test)
}

pub fn write_split(root: &Path, trainval: &[usize], test: &[usize]) -> Result<()> {
    write_id_list(&root.join(TRAINVAL_SPLIT_FILE), trainval)?;
    write_id_list(&root.join(TEST_SPLIT_FILE), test)
}

fn write_id_list(path: &Path, ids: &[usize]) -> Result<()> {
    let text: String = ids.iter().map(|i| format!("{i}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_id_list(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse()
                .map_err(|_| Error::Invalid(format!("{}: bad id `{l}`", path.display())))
        })
        .collect()
}
