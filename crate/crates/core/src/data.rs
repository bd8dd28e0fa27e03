//! Datasets in the MS-TCN directory layout, feature files, temporal
//! resampling and a synthetic generator.
//!
//! ```text
//! root/mapping.txt             "<id> <class-name>" per line
//! root/groundTruth/<vid>.txt   one class name per frame
//! root/features/<vid>.bin      TUTFEAT1 feature matrix (T × d)
//! root/splits/<name>.bundle    video ids, one per line
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"TUTFEAT1";

/// Bijection between class names and ids `0..C`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassMapping {
    names: Vec<String>,
}

impl ClassMapping {
    pub fn new(names: Vec<String>) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::config(format!(
                    "class name '{n}' must be a non-empty word"
                )));
            }
            if names[..i].contains(n) {
                return Err(Error::config(format!("duplicate class name '{n}'")));
            }
        }
        Ok(ClassMapping { names })
    }

    /// Parses `"<id> <name>"` lines; ids must run `0..C` in order.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut names = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (id, name) = match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(name), None) => (id, name),
                _ => {
                    return Err(Error::load(
                        path,
                        format!("line {}: expected '<id> <name>', got '{line}'", i + 1),
                    ))
                }
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::load(path, format!("line {}: bad class id '{id}'", i + 1)))?;
            if id != names.len() {
                return Err(Error::load(
                    path,
                    format!(
                        "line {}: class id {id} out of order, expected {}",
                        i + 1,
                        names.len()
                    ),
                ));
            }
            names.push(name.to_string());
        }
        ClassMapping::new(names).map_err(|e| Error::load(path, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{i} {n}\n"))
            .collect()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// `T × d_in` frame features.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub fps: f64,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub mapping: ClassMapping,
    pub videos: Vec<VideoSample>,
}

impl Dataset {
    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.cols())
    }
}

pub fn features_to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    if t.shape().len() != 2 {
        return Err(Error::dim(format!(
            "feature matrix must be 2-D, got {:?}",
            t.shape()
        )));
    }
    let mut out = Vec::with_capacity(28 + 4 * t.numel());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&2u32.to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn features_from_bytes(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 12 || &bytes[..8] != FEATURE_MAGIC {
        return Err("not a TUTFEAT1 feature file".into());
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if rank != 2 {
        return Err(format!("feature rank {rank}, expected 2"));
    }
    if bytes.len() < 28 {
        return Err("truncated header".into());
    }
    let t = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let n = t.checked_mul(d).ok_or("feature dimensions overflow")?;
    let payload = &bytes[28..];
    if payload.len() != 4 * n {
        return Err(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            4 * n
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![t, d], data).map_err(|e| e.to_string())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    features_from_bytes(&bytes).map_err(|m| Error::load(path, m))
}

pub fn write_features(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, features_to_bytes(t)?)?;
    Ok(())
}

/// Reads a 2-D `.npy` array of `f4` or `f8`. With `transpose`, the file is
/// taken as `d × T` (the layout of the published I3D features).
pub fn import_npy(path: impl AsRef<Path>, transpose: bool) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    let npy = npyz::NpyFile::new(&bytes[..]).map_err(|e| Error::load(path, e.to_string()))?;
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    if shape.len() != 2 {
        return Err(Error::load(
            path,
            format!("expected a 2-D array, got shape {shape:?}"),
        ));
    }
    let fortran = npy.order() == npyz::Order::Fortran;
    let descr = npy.dtype().descr();
    let data: Vec<f64> = if descr.contains("f4") {
        npy.into_vec::<f32>()
            .map_err(|e| Error::load(path, e.to_string()))?
            .into_iter()
            .map(f64::from)
            .collect()
    } else if descr.contains("f8") {
        npy.into_vec::<f64>()
            .map_err(|e| Error::load(path, e.to_string()))?
    } else {
        return Err(Error::load(path, format!("unsupported dtype {descr}")));
    };
    let (r, c) = (shape[0], shape[1]);
    // Element (i, j) of the stored array, whatever its memory order.
    let at = |i: usize, j: usize| {
        if fortran {
            data[j * r + i]
        } else {
            data[i * c + j]
        }
    };
    let (rows, cols) = if transpose { (c, r) } else { (r, c) };
    let mut out = Vec::with_capacity(r * c);
    for i in 0..rows {
        for j in 0..cols {
            out.push(if transpose { at(j, i) } else { at(i, j) });
        }
    }
    Tensor::new(vec![rows, cols], out)
}

pub fn read_labels(path: &Path, mapping: &ClassMapping) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            mapping.id(l.trim()).ok_or_else(|| {
                Error::load(
                    path,
                    format!("line {}: unknown class '{}'", i + 1, l.trim()),
                )
            })
        })
        .collect()
}

pub fn labels_to_text(labels: &[usize], mapping: &ClassMapping) -> Result<String> {
    let mut s = String::with_capacity(labels.len() * 8);
    for &l in labels {
        let name = mapping
            .name(l)
            .ok_or_else(|| Error::Domain(format!("class id {l} outside the mapping")))?;
        s.push_str(name);
        s.push('\n');
    }
    Ok(s)
}

/// Video ids listed in a split file; a trailing `.txt` is dropped.
pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.strip_suffix(".txt").unwrap_or(l).to_string())
        .collect())
}

/// Directory layout of one dataset root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn mapping(&self) -> PathBuf {
        self.root.join("mapping.txt")
    }

    pub fn ground_truth(&self, id: &str) -> PathBuf {
        self.root.join("groundTruth").join(format!("{id}.txt"))
    }

    pub fn features(&self, id: &str) -> PathBuf {
        self.root.join("features").join(format!("{id}.bin"))
    }

    /// A split given by name resolves to `splits/<name>.bundle`; anything
    /// that exists as a path is used directly.
    pub fn split(&self, split: &str) -> PathBuf {
        let direct = PathBuf::from(split);
        if direct.is_file() {
            direct
        } else {
            self.root.join("splits").join(format!("{split}.bundle"))
        }
    }
}

/// Loads the videos of `split` (or every ground-truth file when `None`).
pub fn load_dataset(root: impl AsRef<Path>, split: Option<&str>, fps: f64) -> Result<Dataset> {
    let layout = Layout::new(root.as_ref());
    let mapping = ClassMapping::load(layout.mapping())?;
    let ids = match split {
        Some(s) => read_split(&layout.split(s))?,
        None => {
            let dir = layout.root.join("groundTruth");
            let mut ids: Vec<String> = fs::read_dir(&dir)
                .map_err(|e| Error::load(&dir, e.to_string()))?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let name = e.file_name().into_string().ok()?;
                    name.strip_suffix(".txt").map(String::from)
                })
                .collect();
            ids.sort();
            ids
        }
    };
    let mut videos = Vec::with_capacity(ids.len());
    for id in ids {
        let labels = read_labels(&layout.ground_truth(&id), &mapping)?;
        let fpath = layout.features(&id);
        if !fpath.is_file() {
            return Err(Error::load(&fpath, "missing feature file"));
        }
        let mut features = read_features(&fpath)?;
        let mut labels = labels;
        let (nf, nl) = (features.rows(), labels.len());
        if nf != nl {
            let n = nf.min(nl);
            warn!("{id}: {nf} feature frames and {nl} labels, truncating to {n}");
            labels.truncate(n);
            let d = features.cols();
            let mut data = features.into_data();
            data.truncate(n * d);
            features = Tensor::new(vec![n, d], data)?;
        }
        videos.push(VideoSample {
            id,
            features,
            labels,
            fps,
        });
    }
    if let Some(d) = videos.first().map(|v| v.features.cols()) {
        if let Some(v) = videos.iter().find(|v| v.features.cols() != d) {
            return Err(Error::load(
                layout.features(&v.id),
                format!("feature dimension {} differs from {d}", v.features.cols()),
            ));
        }
    }
    Ok(Dataset { mapping, videos })
}

/// Writes `ds` in the directory layout, with a split file listing every video.
pub fn write_dataset(ds: &Dataset, root: impl AsRef<Path>, split_name: &str) -> Result<()> {
    let layout = Layout::new(root.as_ref());
    fs::create_dir_all(layout.root.join("groundTruth"))?;
    fs::create_dir_all(layout.root.join("features"))?;
    fs::create_dir_all(layout.root.join("splits"))?;
    fs::write(layout.mapping(), ds.mapping.to_text())?;
    let mut split = fs::File::create(layout.split(split_name))?;
    for v in &ds.videos {
        fs::write(
            layout.ground_truth(&v.id),
            labels_to_text(&v.labels, &ds.mapping)?,
        )?;
        write_features(layout.features(&v.id), &v.features)?;
        writeln!(split, "{}.txt", v.id)?;
    }
    Ok(())
}

/// Integer ratio `source / target`, or an unsupported error.
fn fps_ratio(source_fps: f64, target_fps: f64) -> Result<usize> {
    if !(source_fps > 0.0 && target_fps > 0.0) {
        return Err(Error::Domain("frame rates must be positive".into()));
    }
    let r = source_fps / target_fps;
    let k = r.round();
    if k < 1.0 || (r - k).abs() > 1e-9 {
        return Err(Error::Unsupported(format!(
            "resampling {source_fps} fps to {target_fps} fps needs an integer ratio"
        )));
    }
    Ok(k as usize)
}

/// Keeps every `k`-th frame and label, `k = source/target`.
pub fn resample_temporal(
    sample: &VideoSample,
    source_fps: f64,
    target_fps: f64,
) -> Result<VideoSample> {
    let k = fps_ratio(source_fps, target_fps)?;
    let idx: Vec<usize> = (0..sample.len()).step_by(k).collect();
    let d = sample.features.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in &idx {
        data.extend_from_slice(sample.features.row(i));
    }
    Ok(VideoSample {
        id: sample.id.clone(),
        features: Tensor::new(vec![idx.len(), d], data)?,
        labels: idx.iter().map(|&i| sample.labels[i]).collect(),
        fps: target_fps,
    })
}

/// Repeats each label `factor` times, then trims or extends with the last
/// label to `original_len`.
pub fn upsample_predictions(labels: &[usize], factor: usize, original_len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = labels
        .iter()
        .flat_map(|&l| std::iter::repeat_n(l, factor))
        .take(original_len)
        .collect();
    if let Some(&last) = out.last() {
        out.resize(original_len, last);
    }
    out
}

/// Settings of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    /// Feature dimension.
    pub dim: usize,
    /// Standard deviation of the isotropic feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            videos: 8,
            min_len: 128,
            max_len: 256,
            min_segments: 4,
            max_segments: 8,
            dim: 16,
            noise: 0.25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synthetic data needs at least two classes"));
        }
        if self.videos == 0 || self.dim == 0 {
            return Err(Error::config("synthetic videos and dim must be positive"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("synthetic length range is empty"));
        }
        if self.min_segments == 0
            || self.min_segments > self.max_segments
            || self.max_segments > self.min_len
        {
            return Err(Error::config(
                "synthetic segment range must lie in 1..=min_len",
            ));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("synthetic noise must be non-negative"));
        }
        Ok(())
    }
}

/// Class prototypes of the synthetic generator: row `c` is the mean feature of class `c`.
pub fn synthetic_prototypes(spec: &SynthSpec) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let data = (0..spec.classes * spec.dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::new(vec![spec.classes, spec.dim], data).expect("prototype shape")
}

/// Random segment sequences over class prototypes plus Gaussian noise.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let protos = synthetic_prototypes(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut videos = Vec::with_capacity(spec.videos);
    for v in 0..spec.videos {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let segs = rng.random_range(spec.min_segments..=spec.max_segments);
        // Distinct cut points split [0, len) into `segs` non-empty runs.
        let mut cuts = rand::seq::index::sample(&mut rng, len - 1, segs - 1).into_vec();
        cuts.iter_mut().for_each(|c| *c += 1);
        cuts.sort_unstable();
        cuts.push(len);
        let mut labels = Vec::with_capacity(len);
        let mut class = rng.random_range(0..spec.classes);
        let mut start = 0;
        for &end in &cuts {
            labels.extend(std::iter::repeat_n(class, end - start));
            start = end;
            class = (class + rng.random_range(1..spec.classes)) % spec.classes;
        }
        let mut data = Vec::with_capacity(len * spec.dim);
        for &l in &labels {
            for &p in protos.row(l) {
                let n: f64 = StandardNormal.sample(&mut rng);
                data.push(p + spec.noise * n);
            }
        }
        videos.push(VideoSample {
            id: format!("synth_{v:03}"),
            features: Tensor::new(vec![len, spec.dim], data)?,
            labels,
            fps: 15.0,
        });
    }
    let mapping = ClassMapping::new((0..spec.classes).map(|c| format!("action_{c}")).collect())?;
    Ok(Dataset { mapping, videos })
}
