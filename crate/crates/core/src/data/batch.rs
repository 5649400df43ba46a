use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::Sample;
use super::vocab::{Vocab, PAD};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// A group of samples with reports right-padded to `t_max`.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Positions of the samples in the source corpus.
    pub indices: Vec<usize>,
    /// `[B, H, W, C]`
    pub images: Tensor<f32>,
    /// Row-major `[B, t_max]` token ids.
    pub reports: Vec<usize>,
    pub lengths: Vec<usize>,
    pub t_max: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Unpadded token ids of sample `i`.
    pub fn report(&self, i: usize) -> &[usize] {
        &self.reports[i * self.t_max..i * self.t_max + self.lengths[i]]
    }

    /// Image of sample `i` as `[H, W, C]`.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        let shape = &self.images.shape()[1..];
        let n: usize = shape.iter().product();
        Tensor::new(shape, self.images.data()[i * n..(i + 1) * n].to_vec()).expect("image slice")
    }
}

pub fn make_batch(corpus: &[Sample], indices: &[usize], vocab: &Vocab, t_max: usize) -> Result<Batch> {
    let first = corpus
        .get(*indices.first().ok_or_else(|| Error::Invalid("empty batch".into()))?)
        .ok_or_else(|| Error::Invalid("batch index out of range".into()))?;
    let img_shape = first.image.shape().to_vec();
    let mut images = Vec::with_capacity(indices.len() * first.image.numel());
    let mut reports = vec![PAD; indices.len() * t_max];
    let mut lengths = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        let s = &corpus[i];
        if s.image.shape() != img_shape.as_slice() {
            return Err(Error::Shape("images in a batch must share a shape".into()));
        }
        images.extend_from_slice(s.image.data());
        let ids = vocab.encode(&s.report);
        if ids.len() > t_max {
            return Err(Error::Invalid(format!(
                "report of sample {} has {} tokens, limit is {t_max}",
                s.id,
                ids.len()
            )));
        }
        reports[row * t_max..row * t_max + ids.len()].copy_from_slice(&ids);
        lengths.push(ids.len());
    }
    let mut shape = vec![indices.len()];
    shape.extend(img_shape);
    Ok(Batch {
        indices: indices.to_vec(),
        images: Tensor::new(&shape, images)?,
        reports,
        lengths,
        t_max,
    })
}

/// Seeded shuffle of the corpus into batches; the last partial batch is kept.
pub fn batchify(
    corpus: &[Sample],
    batch_size: usize,
    shuffle_seed: u64,
    vocab: &Vocab,
    t_max: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    order
        .chunks(batch_size)
        .map(|chunk| make_batch(corpus, chunk, vocab, t_max))
        .collect()
}
