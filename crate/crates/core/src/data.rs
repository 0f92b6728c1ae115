//! Synthetic temporal grounding data and frame-level ranking metrics.
//!
//! A fixed "world" (drawn from `world_seed`) holds three disjoint sets of
//! orthonormal concept vectors: query concepts, video background concepts
//! and language filler concepts, plus one projection per modality. Each
//! sample picks a query concept; frames inside a contiguous span render it
//! through the video projection, every other frame renders a background
//! concept, and the language renders the query concept at some token
//! positions and filler concepts elsewhere.
//!
//! # On-disk layout
//!
//! ```text
//! <dir>/header.json            spec, per-split sample shapes, concept ids and query-word masks
//! <dir>/<split>.video.f32      all frame features of the split, row-major, f32 LE
//! <dir>/<split>.lang.f32       all token features of the split, row-major, f32 LE
//! <dir>/<split>.labels         one line per sample of '0'/'1' characters
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    /// Seeds the samples.
    pub seed: u64,
    /// Seeds the concept vocabulary and projections.
    pub world_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Inclusive frame-count range.
    pub n_v: (usize, usize),
    /// Inclusive token-count range.
    pub n_l: (usize, usize),
    /// Inclusive highlight-span length range.
    pub span: (usize, usize),
    pub concept_dim: usize,
    pub n_concepts: usize,
    pub n_background: usize,
    pub n_filler: usize,
    pub d_video: usize,
    pub d_lang: usize,
    pub noise_sigma: f64,
    /// Correlation between the video and language projections.
    pub lang_alignment: f64,
    /// Strength of a fixed perturbation applied to both projections.
    pub domain_shift: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            world_seed: 0,
            n_train: 40,
            n_val: 200,
            n_test: 200,
            n_v: (8, 12),
            n_l: (4, 6),
            span: (2, 4),
            concept_dim: 24,
            n_concepts: 12,
            n_background: 6,
            n_filler: 6,
            d_video: 32,
            d_lang: 32,
            noise_sigma: 0.5,
            lang_alignment: 0.8,
            domain_shift: 0.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
            ("concept_dim", self.concept_dim),
            ("n_concepts", self.n_concepts),
            ("n_background", self.n_background),
            ("n_filler", self.n_filler),
            ("d_video", self.d_video),
            ("d_lang", self.d_lang),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be positive")));
            }
        }
        for (name, (lo, hi)) in [("n_v", self.n_v), ("n_l", self.n_l), ("span", self.span)] {
            if lo == 0 || lo > hi {
                return Err(Error::Spec(format!("{name} range ({lo}, {hi}) is empty or starts at 0")));
            }
        }
        if self.span.1 >= self.n_v.0 {
            return Err(Error::Spec(format!(
                "span length up to {} leaves no negative frame in a {}-frame video",
                self.span.1, self.n_v.0
            )));
        }
        if self.n_concepts < 2 {
            return Err(Error::Spec("need at least two query concepts".into()));
        }
        let total = self.n_concepts + self.n_background + self.n_filler;
        if total > self.concept_dim {
            return Err(Error::Spec(format!(
                "{total} orthonormal concepts do not fit in dimension {}",
                self.concept_dim
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Spec(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.lang_alignment) || !(0.0..=1.0).contains(&self.domain_shift) {
            return Err(Error::Spec("lang_alignment and domain_shift must lie in [0, 1]".into()));
        }
        if self.lang_alignment > 0.0 && self.d_video != self.d_lang {
            return Err(Error::Spec("aligned projections need d_video == d_lang".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    pub video: Tensor,
    pub lang: Tensor,
    pub labels: Vec<bool>,
    /// Index of the query concept.
    pub concept: usize,
    /// Token positions that render the query concept.
    pub query_tokens: Vec<bool>,
}

impl GroundingSample {
    pub fn targets(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()
    }

    pub fn n_frames(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<GroundingSample>,
    pub val: Vec<GroundingSample>,
    pub test: Vec<GroundingSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[GroundingSample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

struct World {
    concepts: Vec<Vec<f64>>,
    p_video: Tensor,
    p_lang: Tensor,
}

fn orthonormal(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = Tensor::randn(&[dim], 1.0, rng).into_data();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

fn mix(a: &Tensor, b: &Tensor, wa: f64, wb: f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| wa * x + wb * y).collect();
    Tensor::new(a.shape(), data).expect("matching shapes")
}

impl World {
    fn new(spec: &DatasetSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.world_seed);
        let total = spec.n_concepts + spec.n_background + spec.n_filler;
        let concepts = orthonormal(total, spec.concept_dim, &mut rng);
        let p_video = Tensor::randn(&[spec.concept_dim, spec.d_video], 1.0, &mut rng);
        let free = Tensor::randn(&[spec.concept_dim, spec.d_lang], 1.0, &mut rng);
        let a = spec.lang_alignment;
        let p_lang = if a > 0.0 { mix(&p_video, &free, a, (1.0 - a * a).sqrt()) } else { free };
        if spec.domain_shift == 0.0 {
            return Self {
                concepts,
                p_video,
                p_lang,
            };
        }
        // drawn from a separate stream so the unshifted world is unchanged
        let mut shift_rng = ChaCha8Rng::seed_from_u64(spec.world_seed ^ 0x5348_4946_5400_0000);
        let s = spec.domain_shift;
        let keep = (1.0 - s * s).sqrt();
        let dv = Tensor::randn(p_video.shape(), 1.0, &mut shift_rng);
        let dl = Tensor::randn(p_lang.shape(), 1.0, &mut shift_rng);
        Self {
            concepts,
            p_video: mix(&p_video, &dv, keep, s),
            p_lang: mix(&p_lang, &dl, keep, s),
        }
    }

    fn render(&self, concept: usize, proj: &Tensor, sigma: f64, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        let c = &self.concepts[concept];
        let d = proj.cols();
        for j in 0..d {
            let mut v: f64 = c.iter().enumerate().map(|(i, ci)| ci * proj.at(i, j)).sum();
            if sigma > 0.0 {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                v += sigma * z;
            }
            out.push(v as f32 as f64);
        }
    }
}

fn draw(range: (usize, usize), rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(range.0..=range.1)
}

fn sample_one(spec: &DatasetSpec, world: &World, rng: &mut ChaCha8Rng) -> GroundingSample {
    let n_v = draw(spec.n_v, rng);
    let n_l = draw(spec.n_l, rng);
    let span = draw(spec.span, rng);
    let start = rng.random_range(0..=n_v - span);
    let concept = rng.random_range(0..spec.n_concepts);
    let background = spec.n_concepts;
    let filler = spec.n_concepts + spec.n_background;

    let mut labels = vec![false; n_v];
    let mut video = Vec::with_capacity(n_v * spec.d_video);
    for (t, label) in labels.iter_mut().enumerate() {
        let c = if (start..start + span).contains(&t) {
            *label = true;
            concept
        } else {
            background + rng.random_range(0..spec.n_background)
        };
        world.render(c, &world.p_video, spec.noise_sigma, rng, &mut video);
    }

    let n_query = (n_l / 2).max(1);
    let mut is_query: Vec<bool> = (0..n_l).map(|i| i < n_query).collect();
    is_query.shuffle(rng);
    let mut lang = Vec::with_capacity(n_l * spec.d_lang);
    for &q in &is_query {
        let c = if q {
            concept
        } else {
            filler + rng.random_range(0..spec.n_filler)
        };
        world.render(c, &world.p_lang, spec.noise_sigma, rng, &mut lang);
    }

    GroundingSample {
        video: Tensor::new(&[n_v, spec.d_video], video).expect("sized above"),
        lang: Tensor::new(&[n_l, spec.d_lang], lang).expect("sized above"),
        labels,
        concept,
        query_tokens: is_query,
    }
}

fn split_seed(seed: u64, split: Split) -> u64 {
    let tag = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Test => 3,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 56)
}

/// Draws train/val/test splits; deterministic in the spec.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let world = World::new(spec);
    let make = |split: Split, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(spec.seed, split));
        (0..n).map(|_| sample_one(spec, &world, &mut rng)).collect::<Vec<_>>()
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: make(Split::Train, spec.n_train),
        val: make(Split::Val, spec.n_val),
        test: make(Split::Test, spec.n_test),
    })
}

/// Frame-level average precision. Ties rank the lower index first.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("average_precision", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("average_precision: NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// Unweighted mean of per-sample AP.
pub fn mean_average_precision<'a, I>(per_sample: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [f64], &'a [bool])>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for (s, l) in per_sample {
        sum += average_precision(s, l)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("mean AP over an empty split".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Serialize, Deserialize)]
struct SplitHeader {
    shapes: Vec<(usize, usize)>,
    concepts: Vec<usize>,
    query_tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    spec: DatasetSpec,
    train: SplitHeader,
    val: SplitHeader,
    test: SplitHeader,
}

fn write_f32(path: &Path, tensors: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = tensors.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Compat(format!("{} is not a whole number of f32 values", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn bits(v: &[bool]) -> String {
    v.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let head = |s: &[GroundingSample]| SplitHeader {
        shapes: s.iter().map(|x| (x.video.rows(), x.lang.rows())).collect(),
        concepts: s.iter().map(|x| x.concept).collect(),
        query_tokens: s.iter().map(|x| bits(&x.query_tokens)).collect(),
    };
    let header = Header {
        format: 1,
        spec: ds.spec.clone(),
        train: head(&ds.train),
        val: head(&ds.val),
        test: head(&ds.test),
    };
    let path = dir.join("header.json");
    fs::write(&path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&path, e))?;
    for split in Split::ALL {
        let samples = ds.split(split);
        let name = split.name();
        write_f32(
            &dir.join(format!("{name}.video.f32")),
            samples.iter().flat_map(|s| s.video.data().iter().copied()),
        )?;
        write_f32(
            &dir.join(format!("{name}.lang.f32")),
            samples.iter().flat_map(|s| s.lang.data().iter().copied()),
        )?;
        let mut text = String::new();
        for s in samples {
            text.push_str(&bits(&s.labels));
            text.push('\n');
        }
        let path = dir.join(format!("{name}.labels"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("header.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: Header = serde_json::from_str(&text)?;
    if header.format != 1 {
        return Err(Error::Compat(format!("unsupported dataset format {}", header.format)));
    }
    let spec = header.spec;
    let load_split = |split: Split, h: &SplitHeader| -> Result<Vec<GroundingSample>> {
        let name = split.name();
        let video = read_f32(&dir.join(format!("{name}.video.f32")))?;
        let lang = read_f32(&dir.join(format!("{name}.lang.f32")))?;
        let label_path = dir.join(format!("{name}.labels"));
        let labels = fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
        let label_lines: Vec<&str> = labels.lines().collect();
        let want_v: usize = h.shapes.iter().map(|s| s.0 * spec.d_video).sum();
        let want_l: usize = h.shapes.iter().map(|s| s.1 * spec.d_lang).sum();
        let n = h.shapes.len();
        if video.len() != want_v
            || lang.len() != want_l
            || label_lines.len() != n
            || h.concepts.len() != n
            || h.query_tokens.len() != n
        {
            return Err(Error::Compat(format!("{name} split files disagree with header.json")));
        }
        let (mut ov, mut ol) = (0, 0);
        let mut out = Vec::with_capacity(h.shapes.len());
        for (i, &(n_v, n_l)) in h.shapes.iter().enumerate() {
            let line = label_lines[i];
            let query = &h.query_tokens[i];
            let is_bits = |t: &str| t.bytes().all(|b| b == b'0' || b == b'1');
            if line.len() != n_v || !is_bits(line) || query.len() != n_l || !is_bits(query) {
                return Err(Error::Compat(format!("{name} sample {i} has malformed labels")));
            }
            let v = video[ov..ov + n_v * spec.d_video].to_vec();
            let l = lang[ol..ol + n_l * spec.d_lang].to_vec();
            ov += n_v * spec.d_video;
            ol += n_l * spec.d_lang;
            out.push(GroundingSample {
                video: Tensor::new(&[n_v, spec.d_video], v)?,
                lang: Tensor::new(&[n_l, spec.d_lang], l)?,
                labels: line.bytes().map(|b| b == b'1').collect(),
                concept: h.concepts[i],
                query_tokens: query.bytes().map(|b| b == b'1').collect(),
            });
        }
        Ok(out)
    };
    Ok(Dataset {
        train: load_split(Split::Train, &header.train)?,
        val: load_split(Split::Val, &header.val)?,
        test: load_split(Split::Test, &header.test)?,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pot::cosine_cost;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_train: 12,
            n_val: 10,
            n_test: 10,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert!(x.video.bitwise_eq(&y.video) && x.lang.bitwise_eq(&y.lang));
        }
        let c = generate_dataset(&DatasetSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn labels_form_one_span_with_both_classes() {
        let ds = generate_dataset(&DatasetSpec {
            n_train: 100,
            ..small_spec()
        })
        .unwrap();
        for s in ds.train.iter().chain(&ds.val) {
            let pos: Vec<usize> = (0..s.n_frames()).filter(|&i| s.labels[i]).collect();
            assert!(!pos.is_empty() && pos.len() < s.n_frames());
            assert_eq!(pos.last().unwrap() - pos[0] + 1, pos.len());
            assert_eq!(s.video.rows(), s.n_frames());
        }
    }

    #[test]
    fn spec_errors() {
        let bad = DatasetSpec {
            n_v: (3, 5),
            span: (4, 4),
            ..small_spec()
        };
        assert!(matches!(generate_dataset(&bad), Err(Error::Spec(_))));
        let crowded = DatasetSpec {
            concept_dim: 4,
            ..small_spec()
        };
        assert!(matches!(crowded.validate(), Err(Error::Spec(_))));
        let noisy = DatasetSpec {
            noise_sigma: -1.0,
            ..small_spec()
        };
        assert!(noisy.validate().is_err());
    }

    #[test]
    fn noise_free_spans_are_identical_and_aligned() {
        let ds = generate_dataset(&DatasetSpec {
            noise_sigma: 0.0,
            n_train: 100,
            ..small_spec()
        })
        .unwrap();
        for s in &ds.train {
            let span: Vec<usize> = (0..s.n_frames()).filter(|&i| s.labels[i]).collect();
            for &i in &span[1..] {
                assert_eq!(s.video.row(i), s.video.row(span[0]));
            }
            let c = cosine_cost(&s.video, &s.lang).unwrap();
            assert!(s.query_tokens.iter().any(|&q| q));
            for &i in &span {
                for j in (0..s.lang.rows()).filter(|&j| s.query_tokens[j]) {
                    for k in (0..s.lang.rows()).filter(|&k| !s.query_tokens[k]) {
                        assert!(c.at(i, j) < c.at(i, k), "{} vs {}", c.at(i, j), c.at(i, k));
                    }
                }
            }
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let n = 7;
        let mut labels = vec![false; n];
        labels[n - 1] = true;
        let scores: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
        assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0 / n as f64);
        let ap = average_precision(&[0.9, 0.5, 0.1], &[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert!(matches!(
            average_precision(&[1.0, 2.0], &[false, false]),
            Err(Error::UndefinedMetric(_))
        ));
        // ties rank lower index first
        assert_eq!(average_precision(&[0.0, 0.0, 0.0], &[false, false, true]).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn ap_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.random_range(2..12);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[rng.random_range(0..n)] = true;
            let ap = average_precision(&scores, &labels).unwrap();
            let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 2.0).collect();
            assert_eq!(ap, average_precision(&squashed, &labels).unwrap());

            // demote one positive just below the negative ranked right after it
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            if let Some(w) = order.windows(2).find(|w| labels[w[0]] && !labels[w[1]]) {
                let mut swapped = scores.clone();
                swapped.swap(w[0], w[1]);
                assert!(average_precision(&swapped, &labels).unwrap() <= ap);
            }
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);

        fs::write(dir.path().join("val.labels"), "01\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Compat(_))));
    }
}
