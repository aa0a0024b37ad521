// Copyright 2026 The OSKT Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::numerics::{RngStream, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_ids: usize,
    pub views: usize,
    pub samples_per_id_view: usize,
    /// `[C, H, W]` images or `[D]` vectors.
    pub sample_shape: Vec<usize>,
    pub noise_scale: f64,
    /// Identities held out of training and used for query/gallery.
    pub test_ids: usize,
    /// Seeds the view transforms, shared by datasets of one world.
    pub world_seed: u64,
    /// Size of the random part of each view's linear map.
    pub view_strength: f64,
    /// Standard deviation of each view's offset.
    pub view_offset: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_ids: 16,
            views: 2,
            samples_per_id_view: 8,
            sample_shape: vec![3, 8, 8],
            noise_scale: 0.5,
            test_ids: 8,
            world_seed: 0,
            view_strength: 0.3,
            view_offset: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// Per-view affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTransform {
    /// Square mixing matrix over the mixing axis (channels for images,
    /// features for vectors).
    pub mix: Vec<f64>,
    pub offset: Vec<f64>,
    /// Circular spatial shift `(dy, dx)` for images.
    pub shift: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyReIDDataset<T: Scalar = f32> {
    pub config: DatasetConfig,
    /// `[N, ...sample_shape]`.
    pub samples: Tensor<T>,
    pub ids: Vec<usize>,
    pub views: Vec<usize>,
    pub splits: Vec<Split>,
    /// Noise-free identity prototypes, `[num_ids, D]`.
    pub prototypes: Vec<f64>,
    pub transforms: Vec<ViewTransform>,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 || self.views < 2 {
            return Err(contract_err!("need at least 2 identities and 2 views"));
        }
        if self.test_ids >= self.num_ids {
            return Err(contract_err!(
                "{} test identities leave none of {} for training",
                self.test_ids,
                self.num_ids
            ));
        }
        if self.samples_per_id_view == 0 {
            return Err(contract_err!("samples_per_id_view must be positive"));
        }
        if !matches!(self.sample_shape.len(), 1 | 3) || self.sample_shape.contains(&0) {
            return Err(contract_err!(
                "sample shape {:?} is not [C,H,W] or [D]",
                self.sample_shape
            ));
        }
        if !(self.noise_scale >= 0.0 && self.view_strength >= 0.0 && self.view_offset >= 0.0) {
            return Err(contract_err!("noise and view scales must be non-negative"));
        }
        Ok(())
    }

    pub fn train_ids(&self) -> usize {
        self.num_ids - self.test_ids
    }

    fn dims(&self) -> usize {
        self.sample_shape.iter().product()
    }
}

fn normals(n: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn view_transforms(cfg: &DatasetConfig) -> Vec<ViewTransform> {
    let world = RngStream::new(cfg.world_seed);
    let (axis, spatial) = match cfg.sample_shape[..] {
        [c, h, w] => (c, Some((h, w))),
        _ => (cfg.dims(), None),
    };
    (0..cfg.views)
        .map(|v| {
            let mut r = world.derive(v as u64);
            let g = normals(axis * axis, &mut r);
            let scale = cfg.view_strength / (axis as f64).sqrt();
            let mix = (0..axis * axis)
                .map(|i| g[i] * scale + if i / axis == i % axis { 1.0 } else { 0.0 })
                .collect();
            let offset = normals(axis, &mut r).into_iter().map(|o| o * cfg.view_offset).collect();
            let shift = match spatial {
                Some((h, w)) => (r.random_range(0..h), r.random_range(0..w)),
                None => (0, 0),
            };
            ViewTransform { mix, offset, shift }
        })
        .collect()
}

/// Identity prototypes: images are drawn at half resolution and upsampled,
/// so every identity is a smooth pattern; vectors are plain normals.
fn prototypes(cfg: &DatasetConfig, rng: &RngStream) -> Vec<f64> {
    let d = cfg.dims();
    let mut out = Vec::with_capacity(cfg.num_ids * d);
    for id in 0..cfg.num_ids {
        let mut r = rng.derive(id as u64);
        match cfg.sample_shape[..] {
            [c, h, w] => {
                let (lh, lw) = (h.div_ceil(2), w.div_ceil(2));
                let low = normals(c * lh * lw, &mut r);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            out.push(low[(ch * lh + y / 2) * lw + x / 2]);
                        }
                    }
                }
            }
            _ => out.extend(normals(d, &mut r)),
        }
    }
    out
}

impl ViewTransform {
    /// Applies the transform to one sample of shape `shape`.
    pub fn apply(&self, x: &[f64], shape: &[usize]) -> Vec<f64> {
        match shape[..] {
            [c, h, w] => {
                let mut out = vec![0.0; x.len()];
                for y in 0..h {
                    for xx in 0..w {
                        let (sy, sx) = ((y + self.shift.0) % h, (xx + self.shift.1) % w);
                        for o in 0..c {
                            let mut acc = self.offset[o];
                            for i in 0..c {
                                acc += self.mix[o * c + i] * x[(i * h + sy) * w + sx];
                            }
                            out[(o * h + y) * w + xx] = acc;
                        }
                    }
                }
                out
            }
            _ => {
                let d = x.len();
                (0..d)
                    .map(|o| self.offset[o] + (0..d).map(|i| self.mix[o * d + i] * x[i]).sum::<f64>())
                    .collect()
            }
        }
    }
}

/// Samples every (identity, view) pair and splits identities open-set:
/// the first `num_ids - test_ids` identities train, the rest give view-0
/// queries and other-view gallery entries.
pub fn generate<T: Scalar>(cfg: &DatasetConfig, seed: u64) -> Result<ToyReIDDataset<T>> {
    cfg.validate()?;
    let rng = RngStream::new(seed);
    let d = cfg.dims();
    let protos = prototypes(cfg, &rng.derive(0));
    let transforms = view_transforms(cfg);
    let n = cfg.num_ids * cfg.views * cfg.samples_per_id_view;
    let mut data = Vec::with_capacity(n * d);
    let (mut ids, mut views, mut splits) = (Vec::new(), Vec::new(), Vec::new());
    let mut noise_rng = rng.derive(1);
    for id in 0..cfg.num_ids {
        for (v, t) in transforms.iter().enumerate() {
            let clean = t.apply(&protos[id * d..(id + 1) * d], &cfg.sample_shape);
            for _ in 0..cfg.samples_per_id_view {
                let noise = normals(d, &mut noise_rng);
                data.extend(clean.iter().zip(&noise).map(|(c, e)| T::lit(c + cfg.noise_scale * e)));
                ids.push(id);
                views.push(v);
                splits.push(if id < cfg.train_ids() {
                    Split::Train
                } else if v == 0 {
                    Split::Query
                } else {
                    Split::Gallery
                });
            }
        }
    }
    let mut shape = vec![n];
    shape.extend(&cfg.sample_shape);
    Ok(ToyReIDDataset {
        config: cfg.clone(),
        samples: Tensor::new(&shape, data)?,
        ids,
        views,
        splits,
        prototypes: protos,
        transforms,
    })
}

impl<T: Scalar> ToyReIDDataset<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Samples at `idx` as one batch.
    pub fn batch(&self, idx: &[usize]) -> Tensor<T> {
        let w = self.samples.row_width();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.samples.row(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend(&self.config.sample_shape);
        Tensor::new(&shape, data).expect("rows of the sample tensor")
    }

    /// Noise-free sample of an identity seen from a view.
    pub fn clean_sample(&self, id: usize, view: usize) -> Vec<f64> {
        let d = self.samples.row_width();
        self.transforms[view].apply(&self.prototypes[id * d..(id + 1) * d], &self.config.sample_shape)
    }
}
