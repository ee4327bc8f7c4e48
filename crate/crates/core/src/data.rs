//! Dataset generators, IDX ingestion, the block-downsampling transform and
//! the manifest + blob persistence format shared by weight snapshots and
//! dataset exports.

use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::convnet::{Architecture, WeightSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Generator name, seed and parameters that reproduce a dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    pub params: Vec<(String, String)>,
}

/// Inputs stored channel-major as `channels x width` vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub channels: usize,
    pub width: usize,
    pub classes: usize,
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        channels: usize,
        width: usize,
        classes: usize,
        inputs: Vec<Vec<f32>>,
        labels: Vec<usize>,
        provenance: Provenance,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::shape(format!("{} inputs but {} labels", inputs.len(), labels.len())));
        }
        if let Some(i) = inputs.iter().position(|x| x.len() != channels * width) {
            return Err(Error::shape(format!("input {i} does not have {channels} x {width} entries")));
        }
        if let Some(i) = labels.iter().position(|&y| y >= classes) {
            return Err(Error::invalid("labels", format!("label at {i} is not below {classes}")));
        }
        Ok(LabeledDataset {
            channels,
            width,
            classes,
            inputs,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input<T: Scalar>(&self, i: usize) -> Vec<T> {
        self.inputs[i].iter().map(|&v| T::lit(v as f64)).collect()
    }

    /// Samples `range` in order, keeping provenance.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        LabeledDataset {
            inputs: self.inputs[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            provenance: self.provenance.clone(),
            channels: self.channels,
            width: self.width,
            classes: self.classes,
        }
    }
}

pub const SIGNATURE_COUNT: usize = 20;
pub const SIGNATURE_LEN: usize = 15;
pub const SIGNATURES_PER_SAMPLE: usize = 5;
pub const ALPHABET: usize = 4;

/// Where one sample's signatures went.
#[derive(Clone, Debug, PartialEq)]
pub struct InsertionLog {
    /// The five drawn signature ids; ids below 10 vote for class 0.
    pub signatures: Vec<usize>,
    /// `(signature id, start offset)` for every inserted copy.
    pub placements: Vec<(usize, usize)>,
}

impl InsertionLog {
    /// Majority class of the drawn signatures.
    pub fn majority(&self) -> usize {
        let ones = self.signatures.iter().filter(|&&s| s >= SIGNATURE_COUNT / 2).count();
        usize::from(2 * ones > self.signatures.len())
    }
}

/// The 20 signatures determined by `seed`.
pub fn signatures(seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    (0..SIGNATURE_COUNT)
        .map(|_| (0..SIGNATURE_LEN).map(|_| rng.random_range(0..ALPHABET as u8)).collect())
        .collect()
}

/// Uniformly random start offsets of `k` non-overlapping length-`w`
/// intervals in `0..len`, in random order.
fn place_intervals<R: Rng>(k: usize, w: usize, len: usize, rng: &mut R) -> Vec<usize> {
    // Sorted k-subsets of 0..len-k(w-1) biject with sorted placements.
    let slots = len - k * (w - 1);
    let mut picks = rand::seq::index::sample(rng, slots, k).into_vec();
    picks.sort_unstable();
    let mut starts: Vec<usize> = picks.iter().enumerate().map(|(i, &c)| c + i * (w - 1)).collect();
    starts.shuffle(rng);
    starts
}

fn signature_sample(sigs: &[Vec<u8>], seed: u64, index: usize, len: usize, iter: usize) -> (Vec<f32>, InsertionLog) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let mut seq: Vec<u8> = (0..len).map(|_| rng.random_range(0..ALPHABET as u8)).collect();
    let drawn: Vec<usize> = (0..SIGNATURES_PER_SAMPLE).map(|_| rng.random_range(0..SIGNATURE_COUNT)).collect();
    let starts = place_intervals(SIGNATURES_PER_SAMPLE * iter, SIGNATURE_LEN, len, &mut rng);
    let mut placements = Vec::with_capacity(starts.len());
    for (slot, &start) in starts.iter().enumerate() {
        let id = drawn[slot / iter];
        seq[start..start + SIGNATURE_LEN].copy_from_slice(&sigs[id]);
        placements.push((id, start));
    }
    let mut x = vec![0.0f32; ALPHABET * len];
    for (p, &c) in seq.iter().enumerate() {
        x[c as usize * len + p] = 1.0;
    }
    (
        x,
        InsertionLog {
            signatures: drawn,
            placements,
        },
    )
}

/// Samples `range` of the signature dataset; any split of the index range
/// reproduces the serial result.
pub fn gen_signature_range(
    seed: u64,
    range: std::ops::Range<usize>,
    len: usize,
    iter: usize,
) -> Result<(Vec<Vec<f32>>, Vec<usize>, Vec<InsertionLog>)> {
    if iter == 0 {
        return Err(Error::invalid("iter", "must be at least 1"));
    }
    let need = SIGNATURES_PER_SAMPLE * SIGNATURE_LEN * iter;
    if len < need {
        return Err(Error::invalid(
            "len",
            format!("{len} cannot hold {} non-overlapping signature copies ({need} positions)", SIGNATURES_PER_SAMPLE * iter),
        ));
    }
    let sigs = signatures(seed);
    let mut inputs = Vec::with_capacity(range.len());
    let mut labels = Vec::with_capacity(range.len());
    let mut logs = Vec::with_capacity(range.len());
    for i in range {
        let (x, log) = signature_sample(&sigs, seed, i, len, iter);
        labels.push(log.majority());
        inputs.push(x);
        logs.push(log);
    }
    Ok((inputs, labels, logs))
}

/// One-hot sequences over a 4-letter alphabet labelled by the majority class
/// of five inserted signatures, each repeated `iter` times.
pub fn gen_signature_dataset(seed: u64, n: usize, len: usize, iter: usize) -> Result<(LabeledDataset, Vec<InsertionLog>)> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    let (inputs, labels, logs) = gen_signature_range(seed, 0..n, len, iter)?;
    let provenance = Provenance {
        generator: "signatures".into(),
        seed,
        params: vec![
            ("n".into(), n.to_string()),
            ("len".into(), len.to_string()),
            ("iter".into(), iter.to_string()),
        ],
    };
    Ok((LabeledDataset::new(ALPHABET, len, 2, inputs, labels, provenance)?, logs))
}

/// Parsed IDX container with unsigned-byte payload.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an IDX container, requiring the given magic number.
pub fn read_idx(bytes: &[u8], magic: u32) -> Result<IdxArray> {
    let fmt = |offset: usize, reason: String| Error::Format {
        what: "IDX container",
        offset,
        reason,
    };
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| fmt(bytes.len(), format!("header truncated, needs 4 bytes at {at}")))
    };
    let found = word(0)?;
    if found != magic {
        return Err(fmt(0, format!("magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..ndim).map(|i| word(4 + 4 * i).map(|d| d as usize)).collect::<Result<_>>()?;
    let start = 4 + 4 * ndim;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fmt(4, "dimension product overflows".into()))?;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() < count {
        return Err(fmt(
            bytes.len(),
            format!("payload has {} bytes, dimensions {dims:?} need {count}", payload.len()),
        ));
    }
    if payload.len() > count {
        return Err(fmt(start + count, format!("{} trailing bytes", payload.len() - count)));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

/// Grayscale images from an IDX image container.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

pub fn read_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let a = read_idx(bytes, IDX_IMAGES_MAGIC)?;
    Ok(IdxImages {
        count: a.dims[0],
        rows: a.dims[1],
        cols: a.dims[2],
        pixels: a.data,
    })
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    Ok(read_idx(bytes, IDX_LABELS_MAGIC)?.data)
}

/// Serializes images back into an IDX container.
pub fn write_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

const PLACEMENT_TRIES: usize = 1000;

/// Top-left corners of `copies` disjoint `size x size` squares in a
/// `canvas x canvas` grid.
fn place_squares(copies: usize, size: usize, canvas: usize, seed: u64, index: usize) -> Vec<(usize, usize)> {
    let span = canvas - size + 1;
    for attempt in 0u64.. {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((index as u64) << 16) | attempt);
        let mut corners: Vec<(usize, usize)> = Vec::with_capacity(copies);
        let mut tries = 0;
        while corners.len() < copies && tries < PLACEMENT_TRIES {
            tries += 1;
            let c = (rng.random_range(0..span), rng.random_range(0..span));
            let clash = corners
                .iter()
                .any(|&(r, q)| c.0 < r + size && r < c.0 + size && c.1 < q + size && q < c.1 + size);
            if !clash {
                corners.push(c);
            }
        }
        if corners.len() == copies {
            return corners;
        }
    }
    unreachable!("the attempt counter is unbounded")
}

/// Embeds `s/2` disjoint copies of a source digit into a black `28s x 28s`
/// canvas for each of `n_out` samples, with pixels scaled to `[0, 1]`.
/// Sources are visited in a seeded permutation, cycling when `n_out`
/// exceeds the source count.
pub fn augment_mnist(images: &IdxImages, labels: &[u8], s: usize, n_out: usize, seed: u64) -> Result<(LabeledDataset, Vec<AugmentLog>)> {
    if s < 2 || s % 2 != 0 {
        return Err(Error::invalid("s", format!("scale must be even and at least 2, got {s}")));
    }
    if images.count != labels.len() || images.count == 0 {
        return Err(Error::shape(format!("{} images but {} labels", images.count, labels.len())));
    }
    if let Some(i) = labels.iter().position(|&y| y >= 10) {
        return Err(Error::invalid("labels", format!("label {} at {i} is not a digit", labels[i])));
    }
    let (rows, cols) = (images.rows, images.cols);
    if rows != cols {
        return Err(Error::invalid("images", "source images must be square"));
    }
    let size = rows;
    let canvas = size * s;
    let copies = s / 2;
    let mut order: Vec<usize> = (0..images.count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let mut inputs = Vec::with_capacity(n_out);
    let mut out_labels = Vec::with_capacity(n_out);
    let mut logs = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let src = order[i % order.len()];
        let corners = place_squares(copies, size, canvas, seed, i);
        let mut x = vec![0.0f32; canvas * canvas];
        let img = images.image(src);
        for &(r0, c0) in &corners {
            for r in 0..size {
                for c in 0..size {
                    x[(r0 + r) * canvas + c0 + c] = img[r * size + c] as f32 / 255.0;
                }
            }
        }
        inputs.push(x);
        out_labels.push(labels[src] as usize);
        logs.push(AugmentLog { source: src, corners });
    }
    let provenance = Provenance {
        generator: "augmented-mnist".into(),
        seed,
        params: vec![
            ("s".into(), s.to_string()),
            ("n".into(), n_out.to_string()),
            ("sources".into(), images.count.to_string()),
            ("pixel_scale".into(), "1/255".into()),
        ],
    };
    Ok((LabeledDataset::new(1, canvas * canvas, 10, inputs, out_labels, provenance)?, logs))
}

/// Source image and copy positions of one augmented sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentLog {
    pub source: usize,
    pub corners: Vec<(usize, usize)>,
}

/// Collapses a `2x2`-block-constant image and the filters of a stride-2
/// convolution with even kernel into a half-resolution image and a
/// half-size stride-1 filter bank. Pixels become `2 x` the block value;
/// each `2x2` weight block becomes its L2 norm.
///
/// `x` is `channels x height x width`; filter columns follow the
/// [`crate::convnet::PatchMap::conv2d`] order (channel, row, column).
pub fn downsample_pair<T: Scalar>(
    x: &[T],
    channels: usize,
    height: usize,
    width: usize,
    filters: &Matrix<T>,
    kh: usize,
    kw: usize,
) -> Result<(Vec<T>, Matrix<T>)> {
    if height % 2 != 0 || width % 2 != 0 || kh % 2 != 0 || kw % 2 != 0 {
        return Err(Error::invalid("shape", "image and kernel sides must be even"));
    }
    if x.len() != channels * height * width {
        return Err(Error::shape("image length differs from channels x height x width"));
    }
    if filters.cols() != channels * kh * kw {
        return Err(Error::shape("filter width differs from channels x kh x kw"));
    }
    let (h2, w2) = (height / 2, width / 2);
    let two = T::lit(2.0);
    let mut xt = Vec::with_capacity(channels * h2 * w2);
    for c in 0..channels {
        for i in 0..h2 {
            for j in 0..w2 {
                let at = |r: usize, q: usize| x[c * height * width + r * width + q];
                let v = at(2 * i, 2 * j);
                if at(2 * i, 2 * j + 1) != v || at(2 * i + 1, 2 * j) != v || at(2 * i + 1, 2 * j + 1) != v {
                    return Err(Error::invalid(
                        "x",
                        format!("block ({i}, {j}) of channel {c} is not constant"),
                    ));
                }
                xt.push(two * v);
            }
        }
    }
    let (kh2, kw2) = (kh / 2, kw / 2);
    let mut data = Vec::with_capacity(filters.rows() * channels * kh2 * kw2);
    for o in 0..filters.rows() {
        let row = filters.row(o);
        for c in 0..channels {
            for i in 0..kh2 {
                for j in 0..kw2 {
                    let at = |r: usize, q: usize| row[c * kh * kw + r * kw + q];
                    let s = [at(2 * i, 2 * j), at(2 * i, 2 * j + 1), at(2 * i + 1, 2 * j), at(2 * i + 1, 2 * j + 1)]
                        .iter()
                        .fold(T::zero(), |acc, &v| acc + v * v);
                    data.push(s.sqrt());
                }
            }
        }
    }
    Ok((xt, Matrix::new(filters.rows(), channels * kh2 * kw2, data)?))
}

/// FNV-1a 64-bit hash.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// One named `rows x cols` array inside a blob.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub len: usize,
    pub checksum: u64,
}

/// Text manifest plus a little-endian `f32` blob.
///
/// Manifest lines: `meta <key> <value>`, `blob <bytes> <checksum>` and
/// `record <name> <rows> <cols> <offset> <len> <checksum>`, checksums in
/// hex. The blob lives next to the manifest with `.bin` appended.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlobFile {
    pub meta: Vec<(String, String)>,
    pub records: Vec<BlobRecord>,
    pub blob: Vec<u8>,
}

const MANIFEST_HEADER: &str = "# convbound manifest v1";

impl BlobFile {
    pub fn push(&mut self, name: &str, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
        if values.len() != rows * cols {
            return Err(Error::shape(format!("record `{name}` has {} values for {rows} x {cols}", values.len())));
        }
        if name.contains(char::is_whitespace) || name.is_empty() {
            return Err(Error::invalid("name", format!("record name `{name}` must be a nonempty word")));
        }
        let offset = self.blob.len();
        for v in values {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        let len = values.len() * 4;
        self.records.push(BlobRecord {
            name: name.into(),
            rows,
            cols,
            offset,
            len,
            checksum: fnv64(&self.blob[offset..]),
        });
        Ok(())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.into(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn record(&self, name: &str) -> Result<(&BlobRecord, Vec<f32>)> {
        let r = self
            .records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::invalid("record", format!("no record named `{name}`")))?;
        let bytes = &self.blob[r.offset..r.offset + r.len];
        Ok((
            r,
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ))
    }

    pub fn manifest(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MANIFEST_HEADER}").unwrap();
        for (k, v) in &self.meta {
            writeln!(s, "meta {k} {}", v.replace('\n', " ")).unwrap();
        }
        writeln!(s, "blob {} {:016x}", self.blob.len(), fnv64(&self.blob)).unwrap();
        for r in &self.records {
            writeln!(
                s,
                "record {} {} {} {} {} {:016x}",
                r.name, r.rows, r.cols, r.offset, r.len, r.checksum
            )
            .unwrap();
        }
        s
    }

    pub fn blob_path(manifest: &Path) -> PathBuf {
        let mut p = manifest.as_os_str().to_owned();
        p.push(".bin");
        PathBuf::from(p)
    }

    pub fn write(&self, manifest: &Path) -> Result<()> {
        std::fs::write(manifest, self.manifest())?;
        std::fs::write(Self::blob_path(manifest), &self.blob)?;
        Ok(())
    }

    pub fn read(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest)?;
        let blob = std::fs::read(Self::blob_path(manifest))?;
        Self::parse(&text, blob)
    }

    /// Parses a manifest and validates the blob against it.
    pub fn parse(text: &str, blob: Vec<u8>) -> Result<Self> {
        let fmt = |offset: usize, reason: String| Error::Format {
            what: "manifest",
            offset,
            reason,
        };
        let mut out = BlobFile::default();
        let mut declared: Option<(usize, u64)> = None;
        let mut offset = 0;
        let mut lines = text.lines();
        match lines.next() {
            Some(MANIFEST_HEADER) => offset += MANIFEST_HEADER.len() + 1,
            _ => return Err(fmt(0, "missing manifest header".into())),
        }
        for line in lines {
            let at = offset;
            offset += line.len() + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    out.meta.push((k.into(), v.into()));
                }
                "blob" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    if f.len() != 2 {
                        return Err(fmt(at, "blob line needs a length and a checksum".into()));
                    }
                    let len = f[0].parse().map_err(|_| fmt(at, format!("bad blob length `{}`", f[0])))?;
                    let sum = u64::from_str_radix(f[1], 16).map_err(|_| fmt(at, format!("bad checksum `{}`", f[1])))?;
                    declared = Some((len, sum));
                }
                "record" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    if f.len() != 6 {
                        return Err(fmt(at, "record line needs six fields".into()));
                    }
                    let num = |s: &str| s.parse::<usize>().map_err(|_| fmt(at, format!("bad number `{s}`")));
                    out.records.push(BlobRecord {
                        name: f[0].into(),
                        rows: num(f[1])?,
                        cols: num(f[2])?,
                        offset: num(f[3])?,
                        len: num(f[4])?,
                        checksum: u64::from_str_radix(f[5], 16).map_err(|_| fmt(at, format!("bad checksum `{}`", f[5])))?,
                    });
                }
                other => return Err(fmt(at, format!("unknown line kind `{other}`"))),
            }
        }
        for r in &out.records {
            if r.len != r.rows * r.cols * 4 {
                return Err(Error::shape(format!(
                    "record `{}` declares {} bytes for {} x {} floats",
                    r.name, r.len, r.rows, r.cols
                )));
            }
            if r.offset + r.len > blob.len() {
                return Err(Error::Format {
                    what: "blob",
                    offset: blob.len(),
                    reason: format!(
                        "record `{}` needs bytes {}..{} but the blob has {}",
                        r.name,
                        r.offset,
                        r.offset + r.len,
                        blob.len()
                    ),
                });
            }
            let found = fnv64(&blob[r.offset..r.offset + r.len]);
            if found != r.checksum {
                return Err(Error::Checksum {
                    name: r.name.clone(),
                    expected: r.checksum,
                    found,
                });
            }
        }
        let (len, sum) = declared.ok_or_else(|| fmt(offset, "missing blob line".into()))?;
        if len != blob.len() {
            return Err(Error::Format {
                what: "blob",
                offset: blob.len(),
                reason: format!("manifest declares {len} bytes"),
            });
        }
        let found = fnv64(&blob);
        if found != sum {
            return Err(Error::Checksum {
                name: "blob".into(),
                expected: sum,
                found,
            });
        }
        out.blob = blob;
        Ok(out)
    }
}

/// Trained weights `A` with the initialization `M` they are measured against.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub weights: WeightSet<f32>,
    pub reference: WeightSet<f32>,
    pub meta: Vec<(String, String)>,
}

impl Snapshot {
    pub fn to_blob(&self) -> Result<BlobFile> {
        if self.weights.filters.len() != self.reference.filters.len() {
            return Err(Error::shape("weights and reference have different depths"));
        }
        let mut b = BlobFile {
            meta: self.meta.clone(),
            ..Default::default()
        };
        b.set_meta("layers", self.weights.filters.len());
        for (prefix, set) in [("A", &self.weights), ("M", &self.reference)] {
            for (l, a) in set.filters.iter().enumerate() {
                b.push(&format!("{prefix}{}", l + 1), a.rows(), a.cols(), a.as_slice())?;
            }
        }
        Ok(b)
    }

    pub fn from_blob(b: &BlobFile) -> Result<Self> {
        let depth: usize = b
            .meta("layers")
            .and_then(|v| v.parse().ok())
            .ok_or(Error::MissingField("layers"))?;
        let load = |prefix: &str| -> Result<WeightSet<f32>> {
            let filters = (1..=depth)
                .map(|l| {
                    let (r, v) = b.record(&format!("{prefix}{l}"))?;
                    Matrix::new(r.rows, r.cols, v)
                })
                .collect::<Result<_>>()?;
            Ok(WeightSet { filters })
        };
        let weights = load("A")?;
        let reference = load("M")?;
        for (l, (a, m)) in weights.filters.iter().zip(&reference.filters).enumerate() {
            if a.shape() != m.shape() {
                return Err(Error::shape(format!("layer {} weights and reference differ in shape", l + 1)));
            }
        }
        Ok(Snapshot {
            weights,
            reference,
            meta: b.meta.iter().filter(|(k, _)| k != "layers").cloned().collect(),
        })
    }

    /// Checks both weight sets against an architecture.
    pub fn check(&self, arch: &Architecture) -> Result<()> {
        self.weights.check(arch)?;
        self.reference.check(arch)
    }

    pub fn write(&self, manifest: &Path) -> Result<()> {
        self.to_blob()?.write(manifest)
    }

    pub fn read(manifest: &Path) -> Result<Self> {
        Self::from_blob(&BlobFile::read(manifest)?)
    }
}

/// Writes inputs and labels in the blob format, provenance as metadata.
pub fn export_dataset(ds: &LabeledDataset, manifest: &Path) -> Result<()> {
    dataset_blob(ds)?.write(manifest)
}

pub fn dataset_blob(ds: &LabeledDataset) -> Result<BlobFile> {
    let mut b = BlobFile::default();
    b.set_meta("channels", ds.channels);
    b.set_meta("width", ds.width);
    b.set_meta("classes", ds.classes);
    b.set_meta("generator", &ds.provenance.generator);
    b.set_meta("seed", ds.provenance.seed);
    for (k, v) in &ds.provenance.params {
        b.set_meta(&format!("param.{k}"), v);
    }
    let flat: Vec<f32> = ds.inputs.iter().flatten().copied().collect();
    b.push("inputs", ds.len(), ds.channels * ds.width, &flat)?;
    let labels: Vec<f32> = ds.labels.iter().map(|&y| y as f32).collect();
    b.push("labels", ds.len(), 1, &labels)?;
    Ok(b)
}

pub fn import_dataset(manifest: &Path) -> Result<LabeledDataset> {
    let b = BlobFile::read(manifest)?;
    let num = |k: &'static str| -> Result<usize> {
        b.meta(k).and_then(|v| v.parse().ok()).ok_or(Error::MissingField(k))
    };
    let (channels, width, classes) = (num("channels")?, num("width")?, num("classes")?);
    let (r, flat) = b.record("inputs")?;
    if r.cols != channels * width {
        return Err(Error::shape("inputs record width differs from channels x width"));
    }
    let inputs = flat.chunks_exact(r.cols.max(1)).map(<[f32]>::to_vec).collect();
    let (_, labels) = b.record("labels")?;
    let labels = labels.iter().map(|&v| v as usize).collect();
    let provenance = Provenance {
        generator: b.meta("generator").unwrap_or_default().into(),
        seed: b.meta("seed").and_then(|v| v.parse().ok()).unwrap_or_default(),
        params: b
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("param.").map(|k| (k.to_string(), v.clone())))
            .collect(),
    };
    LabeledDataset::new(channels, width, classes, inputs, labels, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::PatchMap;
    use crate::linalg::matrix_norms;
    use crate::measures::patch_norm;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn signature_generation_is_deterministic() {
        let (a, la) = gen_signature_dataset(3, 20, 200, 2).unwrap();
        let (b, lb) = gen_signature_dataset(3, 20, 200, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = gen_signature_dataset(4, 20, 200, 2).unwrap();
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn signature_labels_and_placements() {
        let sigs = signatures(9);
        let (ds, logs) = gen_signature_dataset(9, 200, 400, 3).unwrap();
        for (i, log) in logs.iter().enumerate() {
            assert_eq!(ds.labels[i], log.majority());
            assert_eq!(log.placements.len(), 15);
            let mut starts: Vec<usize> = log.placements.iter().map(|p| p.1).collect();
            starts.sort_unstable();
            assert!(starts.windows(2).all(|w| w[1] >= w[0] + SIGNATURE_LEN));
            let x = &ds.inputs[i];
            assert!((0..400).all(|p| (0..4).map(|c| x[c * 400 + p]).sum::<f32>() == 1.0));
            for &(id, s) in &log.placements {
                for t in 0..SIGNATURE_LEN {
                    assert_eq!(x[sigs[id][t] as usize * 400 + s + t], 1.0);
                }
            }
            for (k, &id) in log.signatures.iter().enumerate() {
                let count = log.placements.iter().filter(|p| p.0 == id).count();
                let dup = log.signatures.iter().filter(|&&s| s == id).count();
                assert_eq!(count, 3 * dup, "signature {k}");
            }
        }
    }

    #[test]
    fn signature_tight_length_and_rejection() {
        assert!(gen_signature_dataset(1, 10, 75, 1).is_ok());
        assert!(gen_signature_dataset(1, 10, 74, 1).is_err());
        assert!(gen_signature_dataset(1, 10, 149, 2).is_err());
    }

    #[test]
    fn signature_ranges_match_serial() {
        let (all, labels, logs) = gen_signature_range(11, 0..30, 120, 1).unwrap();
        let (a, la, ga) = gen_signature_range(11, 0..13, 120, 1).unwrap();
        let (b, lb, gb) = gen_signature_range(11, 13..30, 120, 1).unwrap();
        assert_eq!(all, [a, b].concat());
        assert_eq!(labels, [la, lb].concat());
        assert_eq!(logs, [ga, gb].concat());
    }

    #[test]
    fn signature_vote_split_is_binomial() {
        let n = 20_000;
        let (_, _, logs) = gen_signature_range(2024, 0..n, 80, 1).unwrap();
        let mut counts = [0usize; 3];
        for log in &logs {
            let ones = log.signatures.iter().filter(|&&s| s >= 10).count();
            let lead = ones.max(5 - ones);
            counts[lead - 3] += 1;
        }
        for (c, p) in counts.iter().zip([20.0 / 32.0, 10.0 / 32.0, 2.0 / 32.0]) {
            let mean = n as f64 * p;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - mean).abs() <= 3.0 * sd, "{c} vs {mean}");
        }
    }

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn idx_examples() {
        let bytes = idx_bytes(IDX_IMAGES_MAGIC, &[1, 2, 2], &[1, 2, 3, 4]);
        let img = read_idx_images(&bytes).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (1, 2, 2));
        assert_eq!(img.image(0), &[1, 2, 3, 4]);
        assert_eq!(write_idx_images(&img), bytes);
        let labels = idx_bytes(IDX_LABELS_MAGIC, &[3], &[7, 8, 9]);
        assert_eq!(read_idx_labels(&labels).unwrap(), vec![7, 8, 9]);
        let e = read_idx_images(&labels).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 0, .. }), "{e}");
        let short = idx_bytes(IDX_IMAGES_MAGIC, &[1, 2, 2], &[1, 2, 3]);
        assert!(matches!(read_idx_images(&short), Err(Error::Format { offset: 19, .. })));
        assert!(read_idx_images(&bytes[..6]).is_err());
    }

    #[test]
    fn fixture_mnist_subset() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
        let img = read_idx_images(&std::fs::read(dir.join("mnist2000-images-idx3-ubyte")).unwrap()).unwrap();
        let lab = read_idx_labels(&std::fs::read(dir.join("mnist2000-labels-idx1-ubyte")).unwrap()).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (2000, 28, 28));
        assert_eq!(lab.len(), 2000);
        assert!(lab.iter().all(|&y| y < 10));
    }

    fn toy_images() -> (IdxImages, Vec<u8>) {
        let pixels: Vec<u8> = (0..3 * 28 * 28).map(|i| ((i * 37) % 256) as u8).collect();
        (IdxImages { count: 3, rows: 28, cols: 28, pixels }, vec![1, 5, 9])
    }

    #[test]
    fn augment_examples() {
        let (img, lab) = toy_images();
        let (d2, l2) = augment_mnist(&img, &lab, 2, 5, 1).unwrap();
        assert_eq!(d2.width, 56 * 56);
        assert!(l2.iter().all(|l| l.corners.len() == 1));
        let (d4, l4) = augment_mnist(&img, &lab, 4, 6, 1).unwrap();
        assert_eq!(d4.width, 112 * 112);
        for (i, log) in l4.iter().enumerate() {
            assert_eq!(log.corners.len(), 2);
            let (a, b) = (log.corners[0], log.corners[1]);
            assert!(a.0 + 28 <= b.0 || b.0 + 28 <= a.0 || a.1 + 28 <= b.1 || b.1 + 28 <= a.1);
            let src: f64 = img.image(log.source).iter().map(|&p| p as f64 / 255.0).sum();
            let total: f64 = d4.inputs[i].iter().map(|&p| p as f64).sum();
            assert!((total - 2.0 * src).abs() < 1e-3);
            assert_eq!(d4.labels[i], lab[log.source] as usize);
            for &(r0, c0) in &log.corners {
                for r in 0..28 {
                    for c in 0..28 {
                        let want = img.image(log.source)[r * 28 + c] as f32 / 255.0;
                        assert_eq!(d4.inputs[i][(r0 + r) * 112 + c0 + c], want);
                    }
                }
            }
        }
        assert!(augment_mnist(&img, &lab, 3, 1, 1).is_err());
        assert_eq!(augment_mnist(&img, &lab, 10, 4, 2).unwrap().1[3].corners.len(), 5);
    }

    #[test]
    fn downsample_examples() {
        let x = vec![0.5f64; 4];
        let f = Matrix::<f64>::from_f64_rows(&[&[1.0, 1.0, 1.0, 1.0]]).unwrap();
        let (xt, ft) = downsample_pair(&x, 1, 2, 2, &f, 2, 2).unwrap();
        assert_eq!(xt, vec![1.0]);
        assert_eq!(ft.as_slice(), &[2.0]);
        assert_eq!(xt[0] * xt[0], 4.0 * 0.25);
        let bad = vec![0.5, 0.5, 0.5, 0.25];
        assert!(downsample_pair(&bad, 1, 2, 2, &f, 2, 2).is_err());
    }

    fn block_instance(seed: u64) -> (Vec<f64>, Matrix<f64>, usize, usize, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h2, k2) = (rng.random_range(1..3), rng.random_range(3..7), rng.random_range(1..3));
        let h = 2 * h2;
        let mut x = vec![0.0; c * h * h];
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..h2 {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        x[ch * h * h + (2 * i + dr) * h + 2 * j + dc] = v;
                    }
                }
            }
        }
        let m = rng.random_range(1..5);
        let k = 2 * k2;
        let data = (0..m * c * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        (x, Matrix::new(m, c * k * k, data).unwrap(), c, h, k)
    }

    #[test]
    fn downsample_preserves_bound_inputs() {
        for seed in 0..20 {
            let (x, f, c, h, k) = block_instance(seed);
            let (xt, ft) = downsample_pair(&x, c, h, h, &f, k, k).unwrap();
            let (pm, _, _) = PatchMap::conv2d(c, h, h, k, k, 2).unwrap();
            let (pmt, _, _) = PatchMap::conv2d(c, h / 2, h / 2, k / 2, k / 2, 1).unwrap();
            assert_eq!(pm.len(), pmt.len());
            for (p, q) in pm.patches().iter().zip(pmt.patches()) {
                let a: f64 = p.iter().map(|&i| x[i] * x[i]).sum();
                let b: f64 = q.iter().map(|&i| xt[i] * xt[i]).sum();
                assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            }
            let na = matrix_norms(&f).unwrap();
            let nb = matrix_norms(&ft).unwrap();
            assert!((na.l21_of_transpose - nb.l21_of_transpose).abs() <= 1e-12 * na.l21_of_transpose);
            assert!((na.frobenius - nb.frobenius).abs() <= 1e-12 * na.frobenius);
        }
    }

    #[test]
    fn downsample_patch_norm_helper() {
        let (x, f, c, h, k) = block_instance(77);
        let (xt, _) = downsample_pair(&x, c, h, h, &f, k, k).unwrap();
        let arch = |cc: usize, hh: usize, kk: usize, s: usize| {
            use crate::convnet::{Activation, LayerSpec, Pooling};
            let (pm, oh, ow) = PatchMap::conv2d(cc, hh, hh, kk, kk, s).unwrap();
            let o = pm.len();
            let conv = LayerSpec::new(2, pm, Pooling::none(o), Activation::Relu).unwrap();
            let out = LayerSpec::dense_output(2 * oh * ow, 2).unwrap();
            Architecture::new(cc, hh * hh, vec![conv, out]).unwrap()
        };
        let b0 = patch_norm(&arch(c, h, k, 2), 0, &x).unwrap();
        let b0t = patch_norm(&arch(c, h / 2, k / 2, 1), 0, &xt).unwrap();
        assert!((b0 - b0t).abs() <= 1e-12 * b0.max(1.0));
    }

    #[test]
    fn snapshot_round_trip() {
        let arch = Architecture::synthetic2(40).unwrap();
        let a = WeightSet::<f32>::glorot(&arch, 1);
        let m = WeightSet::<f32>::glorot(&arch, 2);
        let snap = Snapshot { weights: a, reference: m, meta: vec![("preset".into(), "synthetic2".into())] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.snap");
        snap.write(&path).unwrap();
        let back = Snapshot::read(&path).unwrap();
        assert_eq!(back, snap);
        back.check(&arch).unwrap();
        for (x, y) in snap.weights.filters.iter().zip(&back.weights.filters) {
            let bits = |m: &Matrix<f32>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
            assert_eq!(matrix_norms(x).unwrap(), matrix_norms(y).unwrap());
        }
        // Truncated blob names the record it cuts.
        let blob_path = BlobFile::blob_path(&path);
        let mut blob = std::fs::read(&blob_path).unwrap();
        blob.truncate(blob.len() - 8);
        std::fs::write(&blob_path, &blob).unwrap();
        let e = Snapshot::read(&path).unwrap_err().to_string();
        assert!(e.contains("M2"), "{e}");
        // A flipped byte fails its record checksum.
        let mut blob = snap.to_blob().unwrap().blob;
        blob[3] ^= 1;
        let text = snap.to_blob().unwrap().manifest();
        assert!(matches!(BlobFile::parse(&text, blob), Err(Error::Checksum { name, .. }) if name == "A1"));
    }

    #[test]
    fn dataset_export_round_trip() {
        let (ds, _) = gen_signature_dataset(5, 12, 90, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.data");
        export_dataset(&ds, &path).unwrap();
        assert_eq!(import_dataset(&path).unwrap(), ds);
        let again = dir.path().join("e.data");
        export_dataset(&gen_signature_dataset(5, 12, 90, 1).unwrap().0, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        assert_eq!(
            std::fs::read(BlobFile::blob_path(&path)).unwrap(),
            std::fs::read(BlobFile::blob_path(&again)).unwrap()
        );
    }

    proptest! {
        #[test]
        fn blob_round_trip(values in proptest::collection::vec(any::<f32>(), 1..64)) {
            let mut b = BlobFile::default();
            b.push("x", 1, values.len(), &values).unwrap();
            let back = BlobFile::parse(&b.manifest(), b.blob.clone()).unwrap();
            let (_, got) = back.record("x").unwrap();
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&got), bits(&values));
        }
    }
}
