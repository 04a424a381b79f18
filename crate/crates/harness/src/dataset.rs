//! Synthetic dataset generation and loading.

use std::fs;
use std::path::{Path, PathBuf};

use cvgl_numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::manifest::{Manifest, Record, Split, ViewKind};
use crate::raster::RawImage;
use crate::synth::{render, Ground, Jitter, Scene, View};

pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub train_locations: usize,
    pub heldout_locations: usize,
    pub a_views: usize,
    pub b_views: usize,
    pub image_size: usize,
    pub seed: u64,
    pub jitter: Jitter,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::standard(7)
    }
}

impl DatasetConfig {
    /// 200 training and 50 held-out locations, 8 A-views and 1 B-view each.
    pub fn standard(seed: u64) -> Self {
        Self {
            train_locations: 200,
            heldout_locations: 50,
            a_views: 8,
            b_views: 1,
            image_size: 64,
            seed,
            jitter: Jitter::default(),
        }
    }

    pub fn locations(&self) -> usize {
        self.train_locations + self.heldout_locations
    }

    pub fn validate(&self) -> Result<()> {
        if self.locations() < 2 {
            return Err(HarnessError::Config("at least two locations are required".into()));
        }
        if self.a_views == 0 || self.b_views == 0 {
            return Err(HarnessError::Config("each location needs at least one view of each kind".into()));
        }
        if self.image_size == 0 {
            return Err(HarnessError::Config("image size must be positive".into()));
        }
        let j = &self.jitter;
        if !(j.min_scale > 0.0 && j.min_scale <= j.max_scale)
            || j.min_brightness > j.max_brightness
            || j.noise_std < 0.0
        {
            return Err(HarnessError::Config(format!("inconsistent jitter ranges {j:?}")));
        }
        Ok(())
    }
}

/// Independent stream per (location, item) so generation order never
/// changes the output.
fn item_rng(seed: u64, location: usize, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((location as u64) << 20) | item as u64);
    rng
}

fn image_path(location: usize, view: ViewKind, index: usize) -> PathBuf {
    PathBuf::from(IMAGE_DIR).join(format!("L{location:04}_{view}{index}.raw"))
}

/// Renders every image and writes them with the manifest under `out_dir`.
pub fn gen_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let images = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| HarnessError::io(&images, e))?;

    let per_location: Vec<Vec<Record>> = (0..cfg.locations())
        .into_par_iter()
        .map(|loc| -> Result<Vec<Record>> {
            let heldout = loc >= cfg.train_locations;
            let scene = Scene::random(&mut item_rng(cfg.seed, loc, 0));
            let mut records = Vec::with_capacity(cfg.a_views + cfg.b_views);
            for (view, count) in [(ViewKind::A, cfg.a_views), (ViewKind::B, cfg.b_views)] {
                for i in 0..count {
                    let item = 1 + i + if view == ViewKind::B { cfg.a_views } else { 0 };
                    let mut rng = item_rng(cfg.seed, loc, item);
                    let v = match view {
                        ViewKind::A => View::random(&cfg.jitter, &mut rng),
                        ViewKind::B => View::canonical(),
                    };
                    let ground = Ground::random(&mut rng);
                    let img = render(&scene, &ground, &v, cfg.image_size, cfg.jitter.noise_std, &mut rng);
                    let rel = image_path(loc, view, i);
                    img.save(&out_dir.join(&rel))?;
                    let split = match (heldout, view) {
                        (false, _) => Split::Train,
                        (true, ViewKind::A) => Split::Query,
                        (true, ViewKind::B) => Split::Gallery,
                    };
                    records.push(Record {
                        path: rel,
                        location: loc,
                        view,
                        split,
                    });
                }
            }
            Ok(records)
        })
        .collect::<Result<_>>()?;

    let manifest = Manifest {
        seed: cfg.seed,
        image_size: cfg.image_size,
        locations: cfg.locations(),
        records: per_location.into_iter().flatten().collect(),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// A manifest with every image decoded to a normalized network input.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, root) = Manifest::load(path)?;
        let images = manifest
            .records
            .par_iter()
            .map(|r| {
                let img = RawImage::load(&root.join(&r.path))?;
                let s = manifest.image_size as u32;
                if img.width != s || img.height != s || img.channels != 3 {
                    return Err(HarnessError::format(
                        root.join(&r.path),
                        format!("expected {s}x{s}x3, got {}x{}x{}", img.width, img.height, img.channels),
                    ));
                }
                Ok(img.to_tensor())
            })
            .collect::<Result<_>>()?;
        Ok(Self { manifest, images })
    }

    /// Indices of records with the given role.
    pub fn indices(&self, split: Split, view: ViewKind) -> Vec<usize> {
        (0..self.manifest.records.len())
            .filter(|&i| self.manifest.records[i].split == split && self.manifest.records[i].view == view)
            .collect()
    }

    /// For every training location, its A-view and B-view record indices.
    pub fn train_pairs(&self) -> Vec<(usize, Vec<usize>, Vec<usize>)> {
        let locs = self.manifest.train_locations();
        let mut a = vec![Vec::new(); self.manifest.locations];
        let mut b = vec![Vec::new(); self.manifest.locations];
        for (i, r) in self.manifest.records.iter().enumerate() {
            if r.split == Split::Train {
                match r.view {
                    ViewKind::A => a[r.location].push(i),
                    ViewKind::B => b[r.location].push(i),
                }
            }
        }
        locs.into_iter()
            .map(|l| (l, std::mem::take(&mut a[l]), std::mem::take(&mut b[l])))
            .filter(|(_, a, b)| !a.is_empty() && !b.is_empty())
            .collect()
    }
}
