//! Face-video frame corpora: scanning, loading and pair sampling.
//!
//! A corpus is a directory tree `identity_id/clip_id/frame.{png,jpg,jpeg}`,
//! pre-cropped so faces are centered; frames are typically extracted at 6
//! fps upstream. Frame indices come from the digits in the file stem
//! (`frame_000123.png` or `123.jpg`).
//!
//! Samplers draw the two pair kinds training needs: same-identity pairs for
//! the facial-motion cycle (either a horizontal flip of one frame or two
//! frames of one clip) and cross-identity pairs for the identity cycle.
//! Record-level sampling is separated from image loading so the sampling
//! distributions are testable without touching the filesystem.

use crate::error::{FaceCycleError, Result};
use image::imageops::FilterType;
use ndarray::Array3;
use rand::Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One frame of one clip of one identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub identity_id: String,
    pub clip_id: String,
    pub frame_index: u32,
    pub path: PathBuf,
}

/// Normalized `3 x S x S` RGB tensor with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    pixels: Array3<f32>,
}

impl FaceImage {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 || h != w {
            return Err(FaceCycleError::ShapeMismatch(format!(
                "face image must be 3xSxS, got {c}x{h}x{w}"
            )));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(FaceCycleError::Other(
                "face image values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(FaceImage { pixels })
    }

    /// Clamp-and-wrap for decoder outputs that are within rounding of range.
    pub fn from_raw_clamped(mut pixels: Array3<f32>) -> Self {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        FaceImage { pixels }
    }

    pub fn size(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    /// Mirror along the horizontal axis. Exact involution.
    pub fn flip_horizontal(&self) -> FaceImage {
        let mut flipped = self.pixels.clone();
        flipped.invert_axis(ndarray::Axis(2));
        FaceImage { pixels: flipped }
    }
}

/// How the two faces of a [`PairSample`] relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    SameIdentityFlip,
    SameIdentityFrames,
    CrossIdentity,
}

/// A training pair with its provenance.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub face_a: FaceImage,
    pub face_b: FaceImage,
    pub pair_kind: PairKind,
}

/// Corpus summary produced by [`scan_corpus`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub num_identities: usize,
    pub num_clips: usize,
    pub num_frames: usize,
    pub num_skipped: usize,
}

impl std::fmt::Display for CorpusManifest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} identities, {} clips, {} frames ({} skipped)",
            self.num_identities, self.num_clips, self.num_frames, self.num_skipped
        )
    }
}

fn is_image_ext(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png") | Some("jpg") | Some("jpeg")
    )
}

/// Frame index = the digits embedded in the file stem, e.g.
/// `frame_000123` -> 123. Stems without digits sort by name at index 0.
fn frame_index_of(path: &Path) -> u32 {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
    digits.parse().unwrap_or(0)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| FaceCycleError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| FaceCycleError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Scan `root` for decodable frames, sorted by (identity, clip, frame index).
/// Undecodable image files are skipped with a warning and counted in the
/// manifest; an empty result is a fatal configuration error.
pub fn scan_corpus(root: &Path) -> Result<(Vec<FrameRecord>, CorpusManifest)> {
    if !root.is_dir() {
        return Err(FaceCycleError::Config(format!(
            "corpus root {} is not a directory",
            root.display()
        )));
    }
    let mut records = Vec::new();
    let mut skipped = 0usize;
    let mut clips = 0usize;
    let mut identities = 0usize;
    for identity_dir in sorted_subdirs(root)? {
        let identity_id = identity_dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let mut identity_has_frames = false;
        for clip_dir in sorted_subdirs(&identity_dir)? {
            let clip_id = clip_dir
                .file_name()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let mut files: Vec<PathBuf> = std::fs::read_dir(&clip_dir)
                .map_err(|e| FaceCycleError::io(&clip_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image_ext(p))
                .collect();
            files.sort();
            let mut clip_has_frames = false;
            for file in files {
                // Header probe only; full decoding happens at load time.
                match image::ImageReader::open(&file)
                    .map_err(|e| e.to_string())
                    .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
                    .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()))
                {
                    Ok(_) => {
                        records.push(FrameRecord {
                            identity_id: identity_id.clone(),
                            clip_id: clip_id.clone(),
                            frame_index: frame_index_of(&file),
                            path: file,
                        });
                        clip_has_frames = true;
                    }
                    Err(err) => {
                        log::warn!("skipping undecodable frame {}: {err}", file.display());
                        skipped += 1;
                    }
                }
            }
            if clip_has_frames {
                clips += 1;
                identity_has_frames = true;
            }
        }
        if identity_has_frames {
            identities += 1;
        }
    }
    if records.is_empty() {
        return Err(FaceCycleError::EmptyCorpus(root.to_path_buf()));
    }
    records.sort_by(|a, b| {
        (&a.identity_id, &a.clip_id, a.frame_index).cmp(&(&b.identity_id, &b.clip_id, b.frame_index))
    });
    let manifest = CorpusManifest {
        num_identities: identities,
        num_clips: clips,
        num_frames: records.len(),
        num_skipped: skipped,
    };
    Ok((records, manifest))
}

/// Write the manifest file: one record per line,
/// `identity_id TAB clip_id TAB frame_index TAB relative_path`.
pub fn write_manifest(records: &[FrameRecord], root: &Path, out: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        let rel = r.path.strip_prefix(root).unwrap_or(&r.path);
        writeln!(
            text,
            "{}\t{}\t{}\t{}",
            r.identity_id,
            r.clip_id,
            r.frame_index,
            rel.display()
        )
        .expect("string write");
    }
    std::fs::write(out, text).map_err(|e| FaceCycleError::io(out, e))
}

/// Load one frame: decode, bilinear-resize to `image_size`², scale to [0, 1].
/// Decode failures are recoverable load errors.
pub fn load_face(record: &FrameRecord, image_size: usize) -> Result<FaceImage> {
    let img = image::open(&record.path).map_err(|e| FaceCycleError::ImageDecode {
        path: record.path.clone(),
        source: e,
    })?;
    let rgb = img.to_rgb8();
    let resized = if (rgb.width() as usize, rgb.height() as usize) == (image_size, image_size) {
        rgb
    } else {
        image::imageops::resize(
            &rgb,
            image_size as u32,
            image_size as u32,
            FilterType::Triangle,
        )
    };
    let mut pixels = Array3::<f32>::zeros((3, image_size, image_size));
    for (x, y, p) in resized.enumerate_pixels() {
        for c in 0..3 {
            pixels[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    FaceImage::new(pixels)
}

/// Indexed view of a corpus: identities and clips grouped for sampling.
#[derive(Debug, Clone)]
pub struct Corpus {
    records: Vec<FrameRecord>,
    /// Indices into `records`, grouped per identity (sorted by identity id).
    identity_groups: Vec<Vec<usize>>,
    /// Indices into `records`, grouped per clip; only clips with >= 2 frames.
    multiframe_clips: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn from_records(records: Vec<FrameRecord>) -> Self {
        let mut by_identity: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut by_clip: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_identity.entry(&r.identity_id).or_default().push(i);
            by_clip
                .entry((&r.identity_id, &r.clip_id))
                .or_default()
                .push(i);
        }
        let identity_groups: Vec<Vec<usize>> = by_identity.into_values().collect();
        let multiframe_clips: Vec<Vec<usize>> = by_clip
            .into_values()
            .filter(|v| v.len() >= 2)
            .collect();
        Corpus {
            records,
            identity_groups,
            multiframe_clips,
        }
    }

    pub fn records(&self) -> &[FrameRecord] {
        &self.records
    }

    pub fn num_identities(&self) -> usize {
        self.identity_groups.len()
    }

    pub fn has_multiframe_clip(&self) -> bool {
        !self.multiframe_clips.is_empty()
    }
}

/// Record-level stage-1 draw: what to pair, before any image IO.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage1Draw {
    /// Pair a frame with its horizontal mirror.
    Flip(usize),
    /// Pair two distinct frames of one clip.
    Frames(usize, usize),
}

/// Draw the structure of a stage-1 pair. With probability `flip_probability`
/// a frame is paired with its mirror; otherwise two distinct frames are
/// drawn uniformly from a uniformly drawn multi-frame clip.
pub fn sample_stage1_draw<R: Rng>(
    corpus: &Corpus,
    rng: &mut R,
    flip_probability: f64,
) -> Result<Stage1Draw> {
    if !(0.0..=1.0).contains(&flip_probability) {
        return Err(FaceCycleError::Config(format!(
            "flip_probability must be in [0,1], got {flip_probability}"
        )));
    }
    if !corpus.has_multiframe_clip() && flip_probability < 1.0 {
        return Err(FaceCycleError::Sampling(
            "no clip has >= 2 frames; frame pairs are impossible (set flip_probability = 1)"
                .into(),
        ));
    }
    let use_flip = flip_probability >= 1.0 || rng.random::<f64>() < flip_probability;
    if use_flip {
        let idx = rng.random_range(0..corpus.records.len());
        Ok(Stage1Draw::Flip(idx))
    } else {
        let clip = &corpus.multiframe_clips[rng.random_range(0..corpus.multiframe_clips.len())];
        let a = rng.random_range(0..clip.len());
        let mut b = rng.random_range(0..clip.len() - 1);
        if b >= a {
            b += 1;
        }
        Ok(Stage1Draw::Frames(clip[a], clip[b]))
    }
}

/// Record-level stage-2 draw: one frame each from two distinct identities,
/// identities uniform, frames uniform within the identity.
pub fn sample_stage2_draw<R: Rng>(corpus: &Corpus, rng: &mut R) -> Result<(usize, usize)> {
    let k = corpus.identity_groups.len();
    if k < 2 {
        return Err(FaceCycleError::Sampling(
            "cross-identity pairs need a corpus with >= 2 identities".into(),
        ));
    }
    let ia = rng.random_range(0..k);
    let mut ib = rng.random_range(0..k - 1);
    if ib >= ia {
        ib += 1;
    }
    let ga = &corpus.identity_groups[ia];
    let gb = &corpus.identity_groups[ib];
    Ok((
        ga[rng.random_range(0..ga.len())],
        gb[rng.random_range(0..gb.len())],
    ))
}

/// Loads faces for sampled records, caching decoded images for small corpora.
pub struct FaceLoader {
    image_size: usize,
    cache: Vec<Option<FaceImage>>,
    cache_enabled: bool,
}

impl FaceLoader {
    /// Corpora up to this many frames are cached fully in memory.
    const CACHE_LIMIT: usize = 4096;

    pub fn new(corpus: &Corpus, image_size: usize) -> Self {
        let n = corpus.records().len();
        FaceLoader {
            image_size,
            cache: vec![None; n],
            cache_enabled: n <= Self::CACHE_LIMIT,
        }
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn load(&mut self, corpus: &Corpus, index: usize) -> Result<FaceImage> {
        if self.cache_enabled {
            if let Some(face) = &self.cache[index] {
                return Ok(face.clone());
            }
        }
        let face = load_face(&corpus.records()[index], self.image_size)?;
        if self.cache_enabled {
            self.cache[index] = Some(face.clone());
        }
        Ok(face)
    }
}

/// Full stage-1 sampling: draw structure, load images, assemble the pair.
pub fn sample_stage1_pair<R: Rng>(
    corpus: &Corpus,
    loader: &mut FaceLoader,
    rng: &mut R,
    flip_probability: f64,
) -> Result<PairSample> {
    match sample_stage1_draw(corpus, rng, flip_probability)? {
        Stage1Draw::Flip(idx) => {
            let face_a = loader.load(corpus, idx)?;
            let face_b = face_a.flip_horizontal();
            Ok(PairSample {
                face_a,
                face_b,
                pair_kind: PairKind::SameIdentityFlip,
            })
        }
        Stage1Draw::Frames(a, b) => Ok(PairSample {
            face_a: loader.load(corpus, a)?,
            face_b: loader.load(corpus, b)?,
            pair_kind: PairKind::SameIdentityFrames,
        }),
    }
}

/// Full stage-2 sampling: two faces of distinct identities.
pub fn sample_stage2_pair<R: Rng>(
    corpus: &Corpus,
    loader: &mut FaceLoader,
    rng: &mut R,
) -> Result<PairSample> {
    let (a, b) = sample_stage2_draw(corpus, rng)?;
    Ok(PairSample {
        face_a: loader.load(corpus, a)?,
        face_b: loader.load(corpus, b)?,
        pair_kind: PairKind::CrossIdentity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fake_records(identities: usize, clips: usize, frames: usize) -> Vec<FrameRecord> {
        let mut out = Vec::new();
        for i in 0..identities {
            for c in 0..clips {
                for f in 0..frames {
                    out.push(FrameRecord {
                        identity_id: format!("id{i:04}"),
                        clip_id: format!("clip{c:02}"),
                        frame_index: f as u32,
                        path: PathBuf::from(format!("id{i:04}/clip{c:02}/{f:03}.png")),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn flip_is_an_exact_involution() {
        let pixels = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| {
            ((c * 31 + y * 7 + x * 3) % 11) as f32 / 11.0
        });
        let face = FaceImage::new(pixels).unwrap();
        assert_eq!(face.flip_horizontal().flip_horizontal(), face);
    }

    #[test]
    fn stage1_flip_probability_one_always_flips() {
        let corpus = Corpus::from_records(fake_records(1, 1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            match sample_stage1_draw(&corpus, &mut rng, 1.0).unwrap() {
                Stage1Draw::Flip(_) => {}
                other => panic!("expected flip, got {other:?}"),
            }
        }
    }

    #[test]
    fn stage1_frame_pairs_are_distinct_and_same_clip() {
        let corpus = Corpus::from_records(fake_records(2, 2, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            if let Stage1Draw::Frames(a, b) = sample_stage1_draw(&corpus, &mut rng, 0.0).unwrap() {
                assert_ne!(a, b);
                let ra = &corpus.records()[a];
                let rb = &corpus.records()[b];
                assert_eq!(ra.identity_id, rb.identity_id);
                assert_eq!(ra.clip_id, rb.clip_id);
            } else {
                panic!("flip drawn at probability 0");
            }
        }
    }

    #[test]
    fn stage1_single_frame_clips_error_without_flips() {
        let corpus = Corpus::from_records(fake_records(3, 2, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            sample_stage1_draw(&corpus, &mut rng, 0.0),
            Err(FaceCycleError::Sampling(_))
        ));
        // but flips alone are fine
        assert!(sample_stage1_draw(&corpus, &mut rng, 1.0).is_ok());
    }

    #[test]
    fn stage2_requires_two_identities() {
        let corpus = Corpus::from_records(fake_records(1, 2, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            sample_stage2_draw(&corpus, &mut rng),
            Err(FaceCycleError::Sampling(_))
        ));
    }

    #[test]
    fn stage2_identities_differ() {
        let corpus = Corpus::from_records(fake_records(2, 1, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (a, b) = sample_stage2_draw(&corpus, &mut rng).unwrap();
            assert_ne!(
                corpus.records()[a].identity_id,
                corpus.records()[b].identity_id
            );
        }
    }

    #[test]
    fn stage2_identity_marginals_pass_chi_square() {
        // Frequency oracle: with k identities and m draws of pairs, each
        // identity is picked with probability 2/k per draw. The chi-square
        // statistic over identity counts should stay within 6 sigma of its
        // dof. Seeded, so the check is deterministic.
        let k = 200usize;
        let draws = 60_000usize;
        let corpus = Corpus::from_records(fake_records(k, 1, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = vec![0u64; k];
        let id_of = |idx: usize| corpus.records()[idx].identity_id.clone();
        for _ in 0..draws {
            let (a, b) = sample_stage2_draw(&corpus, &mut rng).unwrap();
            let ia: usize = id_of(a)[2..].parse().unwrap();
            let ib: usize = id_of(b)[2..].parse().unwrap();
            counts[ia] += 1;
            counts[ib] += 1;
        }
        let expected = (2 * draws) as f64 / k as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let dof = (k - 1) as f64;
        let bound = dof + 6.0 * (2.0 * dof).sqrt();
        assert!(chi2 < bound, "chi2 {chi2} over bound {bound}");
    }

    #[test]
    fn sampling_is_reproducible_bit_for_bit() {
        let corpus = Corpus::from_records(fake_records(4, 2, 4));
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_stage1_draw(&corpus, &mut rng, 0.5).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }
}
