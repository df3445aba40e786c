//! Synthetic class-conditional image data.
//!
//! Each class owns a fixed random template; a sample is its class template
//! plus i.i.d. Gaussian noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, permutation};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub noise_std: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.channels == 0 || self.image_size == 0 {
            return Err(Error::invalid("dataset needs at least two classes and a non-empty image"));
        }
        for (name, n) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if n == 0 || n % self.num_classes != 0 {
                return Err(Error::invalid(format!(
                    "{name} split size {n} must be a positive multiple of {} classes",
                    self.num_classes
                )));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise standard deviation must be non-negative"));
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    images: Tensor<f32>,
    labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gathers the samples at `indices` into one `[B, C, H, W]` batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let shape = self.images.shape();
        let per = shape[1..].iter().product::<usize>();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..][..per]);
        }
        let mut bshape = shape.to_vec();
        bshape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(bshape, data).expect("batch shape"), labels)
    }

    /// Index batches of `batch_size`, in order or shuffled by `rng`. A
    /// trailing batch of one sample is folded into its predecessor so every
    /// batch has a defined per-channel variance.
    pub fn batches(&self, batch_size: usize, rng: Option<&mut dyn rand::RngCore>) -> Vec<Vec<usize>> {
        let order = match rng {
            Some(r) => permutation(r, self.len()),
            None => (0..self.len()).collect(),
        };
        let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
            let last = out.pop().expect("non-empty");
            out.last_mut().expect("non-empty").extend(last);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub templates: Tensor<f32>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

fn make_split(spec: &DatasetSpec, templates: &Tensor<f32>, n: usize, rng: &mut impl Rng) -> Split {
    let per = spec.pixels();
    let order = permutation(rng, n);
    let labels: Vec<usize> = order.iter().map(|&i| i % spec.num_classes).collect();
    let mut data = Vec::with_capacity(n * per);
    for &label in &labels {
        let template = &templates.data()[label * per..][..per];
        let noise = normal_vec(rng, per, spec.noise_std);
        data.extend(template.iter().zip(noise).map(|(t, e)| t + e));
    }
    let shape = [n, spec.channels, spec.image_size, spec.image_size];
    Split { images: Tensor::new(shape, data).expect("split shape"), labels }
}

/// Draws templates and the three splits from `rng`. Each split holds exactly
/// `n / num_classes` samples of every class.
pub fn synth_dataset(spec: &DatasetSpec, rng: &mut impl Rng) -> Result<Dataset> {
    spec.validate()?;
    let per = spec.pixels();
    let templates = Tensor::new(
        [spec.num_classes, spec.channels, spec.image_size, spec.image_size],
        normal_vec(rng, spec.num_classes * per, 1.0),
    )?;
    let train = make_split(spec, &templates, spec.train, rng);
    let val = make_split(spec, &templates, spec.val, rng);
    let test = make_split(spec, &templates, spec.test, rng);
    Ok(Dataset { spec: *spec, templates, train, val, test })
}
