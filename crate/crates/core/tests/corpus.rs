use std::io::BufReader;

use expertformer::data::corpus::{generate_sample, Color, ShapeKind, REGION_NAMES};
use expertformer::data::records::{read_records, write_records};
use expertformer::data::{generate_corpus, make_batch, split_corpus, GridSpec, Region, Vocab, PAD};
use expertformer::harness::{prepare_data, template_vocab, RunConfig};

/// Reads one quadrant back from pixels alone.
///
/// The lit channel gives the color. A shape filling its bounding box is a
/// square, an unlit bounding-box center is a ring, a fill ratio under 0.6 is a
/// cross and anything else is a disc.
fn decode_quadrant(image: &[f32], size: usize, quadrant: usize) -> Option<(String, String)> {
    let half = size / 2;
    let (qy, qx) = (quadrant / 2, quadrant % 2);
    let mut lit = Vec::new();
    let mut channel = None;
    for y in qy * half..(qy + 1) * half {
        for x in qx * half..(qx + 1) * half {
            for c in 0..3 {
                if image[(y * size + x) * 3 + c] > 0.5 {
                    lit.push((y, x));
                    assert!(channel.is_none() || channel == Some(c), "one color per quadrant");
                    channel = Some(c);
                }
            }
        }
    }
    let channel = channel?;
    let color = ["red", "green", "blue"][channel];
    let (y0, y1) = (lit.iter().map(|p| p.0).min()?, lit.iter().map(|p| p.0).max()?);
    let (x0, x1) = (lit.iter().map(|p| p.1).min()?, lit.iter().map(|p| p.1).max()?);
    let area = (y1 - y0 + 1) * (x1 - x0 + 1);
    let center_lit = lit.contains(&((y0 + y1) / 2, (x0 + x1) / 2));
    let shape = if lit.len() == area {
        "square"
    } else if !center_lit {
        "ring"
    } else if (lit.len() as f64) < 0.6 * area as f64 {
        "cross"
    } else {
        "disc"
    };
    Some((color.to_string(), shape.to_string()))
}

fn report_from_pixels(image: &[f32], size: usize) -> String {
    let mut out = Vec::new();
    for (q, name) in REGION_NAMES.iter().enumerate() {
        out.push(match decode_quadrant(image, size, q) {
            Some((color, shape)) => format!("there is a {color} {shape} in the {name} ."),
            None => format!("the {name} is clear ."),
        });
    }
    out.join(" ")
}

#[test]
fn reports_are_recoverable_from_pixels() {
    let spec = GridSpec::default();
    let corpus = generate_corpus(11, 1000, &spec).unwrap();
    for s in &corpus {
        assert_eq!(report_from_pixels(s.image.data(), spec.image_size), s.report, "sample {}", s.id);
    }
}

#[test]
fn every_shape_and_color_appears() {
    let corpus = generate_corpus(3, 300, &GridSpec::default()).unwrap();
    for shape in ShapeKind::ALL {
        for color in Color::ALL {
            let want = Region::Filled { shape, color };
            assert!(corpus.iter().any(|s| s.regions.contains(&want)), "{shape:?} {color:?}");
        }
    }
    assert!(corpus.iter().any(|s| s.regions.contains(&Region::Empty)));
}

#[test]
fn generation_is_seeded_and_per_sample() {
    let spec = GridSpec::default();
    let a = generate_corpus(5, 20, &spec).unwrap();
    assert_eq!(a, generate_corpus(5, 20, &spec).unwrap());
    assert_eq!(a[13], generate_sample(5, 13, &spec));
    assert_ne!(a, generate_corpus(6, 20, &spec).unwrap());
}

#[test]
fn split_is_a_partition() {
    let corpus = generate_corpus(1, 200, &GridSpec::default()).unwrap();
    let (train, val, test) = split_corpus(corpus, 1);
    assert_eq!((train.len(), val.len(), test.len()), (160, 20, 20));
    let mut ids: Vec<usize> = train.iter().chain(&val).chain(&test).map(|s| s.id).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..200).collect::<Vec<_>>());
}

#[test]
fn records_round_trip() {
    let corpus = generate_corpus(2, 25, &GridSpec::default()).unwrap();
    let mut buf = Vec::new();
    write_records(&mut buf, &corpus).unwrap();
    assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 25);
    let back = read_records(BufReader::new(&buf[..])).unwrap();
    for (s, r) in corpus.iter().zip(&back) {
        assert_eq!(s.id, r.id);
        assert_eq!(s.report, r.report);
        assert_eq!(s.image, r.image, "binary canvases survive 8-bit quantization exactly");
    }
    let mut again = Vec::new();
    let samples: Vec<_> = back.into_iter().map(|r| r.into_sample()).collect();
    write_records(&mut again, &samples).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn malformed_records_are_rejected() {
    let bad = b"{\"id\":0,\"height\":2,\"width\":2,\"channels\":3,\"image\":\"00\",\"report\":\"x\"}\n";
    assert!(read_records(BufReader::new(&bad[..])).is_err());
    assert!(read_records(BufReader::new(&b"not json\n"[..])).is_err());
}

#[test]
fn vocabulary_is_deterministic_and_encodes_round_trip() {
    let v = template_vocab();
    assert_eq!(v, template_vocab());
    let cfg = RunConfig { dataset_size: 100, ..RunConfig::default() };
    let data = prepare_data(&cfg).unwrap();
    let texts: Vec<&str> = data.train.iter().map(|s| s.report.as_str()).collect();
    let built = Vocab::build(texts.iter().copied());
    for w in built.words() {
        assert!(v.id(w).is_some(), "{w}");
    }
    for s in data.train.iter().chain(&data.test) {
        assert_eq!(v.decode(&v.encode(&s.report)), s.report);
    }
}

#[test]
fn longest_report_fits_t_max() {
    let v = template_vocab();
    let full = Region::Filled {
        shape: ShapeKind::Square,
        color: Color::Green,
    };
    let longest = expertformer::data::render_report(&[full; 4]);
    assert!(v.encode(&longest).len() <= 48);
    let corpus = generate_corpus(9, 100, &GridSpec::default()).unwrap();
    let indices: Vec<usize> = (0..corpus.len()).collect();
    let batch = make_batch(&corpus, &indices, &v, 48).unwrap();
    for i in 0..batch.len() {
        let row = &batch.reports[i * 48..(i + 1) * 48];
        assert!(row[batch.lengths[i]..].iter().all(|&t| t == PAD));
    }
}
