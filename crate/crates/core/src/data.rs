//! Synthetic multi-modal videos whose class needs both object identity and
//! motion.
//!
//! Each clip holds one moving square. The object mask carries its identity
//! `o` (noisy, one-hot per pixel), the flow carries its motion pattern `m`,
//! and rgb shows a colour that only encodes `o mod 4` plus the displacement.
//! With `g = objects * motions / classes` objects per label group the class is
//! `(o / g) * motions + ((o % g) + m) % motions`, a Latin pairing in which
//! neither identity nor motion alone decides the label.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModalityInputs;
use crate::params::stream_rng;
use crate::tensor::{Shape, Tensor};

const PALETTE: [[f64; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
const DIRECTIONS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
const RGB_NOISE: f64 = 0.1;
const FLOW_NOISE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub num_objects: usize,
    pub motion_patterns: usize,
    pub mask_noise_rate: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_classes: 16,
            num_objects: 8,
            motion_patterns: 4,
            mask_noise_rate: 0.15,
            frames: 4,
            height: 16,
            width: 16,
            train_samples: 2000,
            test_samples: 400,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.num_classes == 0 || self.num_objects == 0 || self.motion_patterns == 0 {
            return bad("classes, objects and motion patterns must be positive");
        }
        let cells = self.num_objects * self.motion_patterns;
        if self.num_classes > cells || cells % self.num_classes != 0 {
            return bad("num_classes must divide num_objects * motion_patterns");
        }
        if self.group_size() > self.motion_patterns {
            return bad("too few classes for a Latin pairing (objects per group exceeds motion patterns)");
        }
        if self.num_objects % self.group_size() != 0 {
            return bad("objects per label group must divide num_objects");
        }
        if !(0.0..1.0).contains(&self.mask_noise_rate) {
            return bad("mask_noise_rate must lie in [0, 1)");
        }
        if self.frames == 0 || self.height < 4 || self.width < 4 {
            return bad("clips need T >= 1 and at least 4x4 pixels");
        }
        Ok(())
    }

    /// Mask channels: background plus one per object.
    pub fn mask_channels(&self) -> usize {
        self.num_objects + 1
    }

    fn group_size(&self) -> usize {
        self.num_objects * self.motion_patterns / self.num_classes
    }

    pub fn pairing(&self, object: usize, motion: usize) -> usize {
        let g = self.group_size();
        let p = self.motion_patterns;
        (object / g) * p + ((object % g) + motion) % p
    }

    fn square(&self) -> usize {
        (self.height.min(self.width) / 4).max(2)
    }
}

/// One clip; every tensor has batch dimension 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub rgb: Tensor,
    pub flow: Tensor,
    pub object_mask: Tensor,
    pub label: usize,
    pub object: usize,
    pub motion: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7a1,
            Split::Test => 0x7e5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Generates one clip; a pure function of (config, split, index).
pub fn generate_sample(config: &GeneratorConfig, split: Split, index: usize) -> SyntheticSample {
    let mut rng = stream_rng(config.seed, &[0xda7a, split.tag(), index as u64]);
    let object = rng.gen_range(0..config.num_objects);
    let motion = rng.gen_range(0..config.motion_patterns);
    let (t, h, w) = (config.frames, config.height, config.width);
    let side = config.square();
    let (dx, dy) = DIRECTIONS[motion % 4];
    let speed = (1 + motion / 4) as i64;
    let max_speed = config.motion_patterns.div_ceil(4) as f64;
    let (x0, y0) = (rng.gen_range(0..w) as i64, rng.gen_range(0..h) as i64);

    let mut rgb = Tensor::zeros(Shape::new(1, t, h, w, 3));
    let mut flow = Tensor::zeros(Shape::new(1, t, h, w, 2));
    let mut mask = Tensor::zeros(Shape::new(1, t, h, w, config.mask_channels()));
    let colour = PALETTE[object % 4];
    for f in 0..t {
        let fx = (x0 + dx * speed * f as i64).rem_euclid(w as i64) as usize;
        let fy = (y0 + dy * speed * f as i64).rem_euclid(h as i64) as usize;
        let inside = |y: usize, x: usize| (y + h - fy) % h < side && (x + w - fx) % w < side;
        for y in 0..h {
            for x in 0..w {
                let hit = inside(y, x);
                let px = rgb.shape().offset(0, f, y, x, 0);
                for c in 0..3 {
                    let base = if hit { colour[c] } else { 0.0 };
                    rgb.data_mut()[px + c] = base + RGB_NOISE * gaussian(&mut rng);
                }
                let fl = flow.shape().offset(0, f, y, x, 0);
                let (vx, vy) = if hit { ((dx * speed) as f64 / max_speed, (dy * speed) as f64 / max_speed) } else { (0.0, 0.0) };
                flow.data_mut()[fl] = (vx + FLOW_NOISE * gaussian(&mut rng)).clamp(-1.0, 1.0);
                flow.data_mut()[fl + 1] = (vy + FLOW_NOISE * gaussian(&mut rng)).clamp(-1.0, 1.0);
                let truth = if hit { object + 1 } else { 0 };
                let class = if rng.gen::<f64>() < config.mask_noise_rate {
                    let other = rng.gen_range(0..config.mask_channels() - 1);
                    if other >= truth { other + 1 } else { other }
                } else {
                    truth
                };
                let mo = mask.shape().offset(0, f, y, x, class);
                mask.data_mut()[mo] = 1.0;
            }
        }
    }
    SyntheticSample { rgb, flow, object_mask: mask, label: config.pairing(object, motion), object, motion }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

pub fn generate_dataset(config: &GeneratorConfig, split: Split) -> Result<Vec<SyntheticSample>> {
    config.validate()?;
    let n = match split {
        Split::Train => config.train_samples,
        Split::Test => config.test_samples,
    };
    Ok((0..n).map(|i| generate_sample(config, split, i)).collect())
}

/// Endless seeded mini-batch index stream: a fresh shuffle per epoch, the
/// ragged tail of each epoch dropped.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || batch > len {
            return Err(Error::Config(format!("batch {batch} does not fit a dataset of {len}")));
        }
        let mut b = Batcher { order: (0..len).collect(), batch, pos: len, rng: stream_rng(seed, &[0xba7c]) };
        b.reshuffle();
        Ok(b)
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch
    }
}

impl Iterator for Batcher {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        Some(out)
    }
}

/// Stacks the selected samples into model inputs and labels.
pub fn collate(samples: &[SyntheticSample], indices: &[usize]) -> Result<(ModalityInputs, Vec<usize>)> {
    let pick = |f: fn(&SyntheticSample) -> &Tensor| {
        let items: Vec<&Tensor> = indices.iter().map(|&i| f(&samples[i])).collect();
        Tensor::stack(&items)
    };
    let inputs = ModalityInputs {
        rgb: Some(pick(|s| &s.rgb)?),
        flow: Some(pick(|s| &s.flow)?),
        object: Some(pick(|s| &s.object_mask)?),
    };
    Ok((inputs, indices.iter().map(|&i| samples[i].label).collect()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DumpManifest {
    pub split: String,
    pub count: usize,
    pub rgb_shape: [usize; 5],
    pub flow_shape: [usize; 5],
    pub mask_shape: [usize; 5],
    pub layout: String,
    pub labels: Vec<usize>,
    pub config: GeneratorConfig,
}

/// Writes `<split>.bin` (per sample: rgb, flow, mask as little-endian f64)
/// and `<split>.json`.
pub fn dump_split(dir: &Path, split: Split, samples: &[SyntheticSample], config: &GeneratorConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(format!("{}.bin", split.name()));
    let file = File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        for t in [&s.rgb, &s.flow, &s.object_mask] {
            for v in t.data() {
                out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin, e))?;
            }
        }
    }
    out.flush().map_err(|e| Error::io(&bin, e))?;
    let shape = |f: fn(&SyntheticSample) -> &Tensor| samples.first().map(|s| f(s).shape().0).unwrap_or_default();
    let manifest = DumpManifest {
        split: split.name().into(),
        count: samples.len(),
        rgb_shape: shape(|s| &s.rgb),
        flow_shape: shape(|s| &s.flow),
        mask_shape: shape(|s| &s.object_mask),
        layout: "per sample: rgb, flow, mask; f64 little-endian; channel fastest".into(),
        labels: samples.iter().map(|s| s.label).collect(),
        config: config.clone(),
    };
    let path = dir.join(format!("{}.json", split.name()));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
