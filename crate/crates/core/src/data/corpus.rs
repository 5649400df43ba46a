//! Deterministic synthetic image/report pairs.
//!
//! Every image is a black canvas split into a 2x2 grid. Each region is either
//! empty or holds one shape in one color, and the paired report describes the
//! regions in raster order with one templated sentence each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const REGION_NAMES: [&str; 4] = ["upper left", "upper right", "lower left", "lower right"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Disc,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Square, Self::Disc, Self::Cross, Self::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Self::Square => "square",
            Self::Disc => "disc",
            Self::Cross => "cross",
            Self::Ring => "ring",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Self::Red, Self::Green, Self::Blue];

    pub fn name(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
        }
    }

    /// Index of the lit channel.
    pub fn channel(self) -> usize {
        match self {
            Self::Red => 0,
            Self::Green => 1,
            Self::Blue => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Empty,
    Filled { shape: ShapeKind, color: Color },
}

/// Canvas geometry and region statistics for corpus generation.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    /// Height and width of the square canvas, divisible by 2.
    pub image_size: usize,
    /// Probability that a region is left empty.
    pub empty_prob: f64,
    /// Maximum shift in pixels of a shape's center from its region center.
    pub jitter: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            empty_prob: 0.25,
            jitter: 4,
        }
    }
}

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[H, W, 3]` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub regions: [Region; 4],
    pub report: String,
}

/// Template sentence for every region, in raster order.
pub fn render_report(regions: &[Region; 4]) -> String {
    let mut out = String::new();
    for (region, name) in regions.iter().zip(REGION_NAMES) {
        match region {
            Region::Empty => out.push_str(&format!("the {name} is clear . ")),
            Region::Filled { shape, color } => out.push_str(&format!(
                "there is a {} {} in the {name} . ",
                color.name(),
                shape.name()
            )),
        }
    }
    out.trim_end().to_string()
}

fn shape_mask(shape: ShapeKind, dy: f64, dx: f64) -> bool {
    // Offsets are measured from the shape center in pixels.
    let r2 = dy * dy + dx * dx;
    match shape {
        ShapeKind::Square => dy.abs() <= 9.0 && dx.abs() <= 9.0,
        ShapeKind::Disc => r2 <= 9.5 * 9.5,
        ShapeKind::Ring => r2 <= 9.5 * 9.5 && r2 > 5.0 * 5.0,
        ShapeKind::Cross => {
            (dy.abs() <= 9.0 && dx.abs() <= 2.0) || (dy.abs() <= 2.0 && dx.abs() <= 9.0)
        }
    }
}

/// Rasterize a region layout. Centers are given per region as pixel offsets.
pub fn render_image(spec: &GridSpec, regions: &[Region; 4], offsets: &[(i64, i64); 4]) -> Tensor<f32> {
    let size = spec.image_size;
    let half = size / 2;
    let mut data = vec![0f32; size * size * CHANNELS];
    for (r, region) in regions.iter().enumerate() {
        let Region::Filled { shape, color } = region else {
            continue;
        };
        let (ry, rx) = (r / 2, r % 2);
        let cy = (ry * half + half / 2) as f64 + offsets[r].0 as f64 - 0.5;
        let cx = (rx * half + half / 2) as f64 + offsets[r].1 as f64 - 0.5;
        for y in ry * half..(ry + 1) * half {
            for x in rx * half..(rx + 1) * half {
                if shape_mask(*shape, y as f64 - cy, x as f64 - cx) {
                    data[(y * size + x) * CHANNELS + color.channel()] = 1.0;
                }
            }
        }
    }
    Tensor::new(&[size, size, CHANNELS], data).expect("canvas shape")
}

/// Sample `index` of the corpus for `seed`; pure in `(seed, index)`.
pub fn generate_sample(seed: u64, index: usize, spec: &GridSpec) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut regions = [Region::Empty; 4];
    let mut offsets = [(0i64, 0i64); 4];
    let j = spec.jitter as i64;
    for r in 0..4 {
        if !rng.random_bool(spec.empty_prob) {
            regions[r] = Region::Filled {
                shape: ShapeKind::ALL[rng.random_range(0..4)],
                color: Color::ALL[rng.random_range(0..3)],
            };
        }
        offsets[r] = (rng.random_range(-j..=j), rng.random_range(-j..=j));
    }
    Sample {
        id: index,
        image: render_image(spec, &regions, &offsets),
        regions,
        report: render_report(&regions),
    }
}

pub fn generate_corpus(seed: u64, n_samples: usize, spec: &GridSpec) -> Result<Vec<Sample>> {
    if n_samples == 0 {
        return Err(Error::Invalid("corpus needs at least one sample".into()));
    }
    if spec.image_size < 32 || !spec.image_size.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "image size {} must be even and at least 32",
            spec.image_size
        )));
    }
    Ok((0..n_samples)
        .map(|i| generate_sample(seed, i, spec))
        .collect())
}

/// Seeded 80/10/10 partition into (train, validation, test).
pub fn split_corpus(corpus: Vec<Sample>, seed: u64) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    use rand::seq::SliceRandom;
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5711);
    order.shuffle(&mut rng);
    let n_val = (n / 10).max(usize::from(n >= 3));
    let n_test = (n / 10).max(usize::from(n >= 3));
    let mut slots: Vec<Option<Sample>> = corpus.into_iter().map(Some).collect();
    let mut take = |ix: &[usize]| -> Vec<Sample> {
        let mut v: Vec<Sample> = ix.iter().map(|&i| slots[i].take().unwrap()).collect();
        v.sort_by_key(|s| s.id);
        v
    };
    let val = take(&order[..n_val]);
    let test = take(&order[n_val..n_val + n_test]);
    let train = take(&order[n_val + n_test..]);
    (train, val, test)
}
