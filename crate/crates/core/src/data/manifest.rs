//! Precomputed feature files plus a CSV manifest.
//!
//! A manifest starts with a `#`-prefixed header block declaring the domain,
//! element type, per-sample shape and label vocabulary, followed by a CSV table
//! with header `path,label,split`. Each feature file holds one sample as raw
//! little-endian `f32` values in row-major order. Paths are relative to the
//! manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "odil-manifest v1";
const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub label: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureManifest {
    pub root: PathBuf,
    pub domain: u32,
    pub shape: Vec<usize>,
    pub vocabulary: Vec<String>,
    /// Class ids of this domain (indices into `vocabulary`).
    pub classes: Vec<usize>,
    pub rows: Vec<ManifestRow>,
}

fn header_value<'a>(headers: &'a [(String, String)], key: &str) -> Result<&'a str> {
    headers
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::data(None, format!("manifest header lacks `{key}`")))
}

fn parse_list<T: std::str::FromStr>(value: &str, what: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::data(None, format!("bad {what} entry `{s}`")))
        })
        .collect()
}

impl FeatureManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut headers = Vec::new();
        let mut body = String::new();
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l.trim_start_matches('#').trim() == MAGIC => {}
            _ => return Err(Error::data(None, format!("manifest must start with `# {MAGIC}`"))),
        }
        for line in lines {
            if let Some(h) = line.strip_prefix('#') {
                let (k, v) = h
                    .split_once('=')
                    .ok_or_else(|| Error::data(None, format!("bad header line `{line}`")))?;
                headers.push((k.trim().to_string(), v.trim().to_string()));
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        if header_value(&headers, "dtype")? != DTYPE {
            return Err(Error::data(None, format!("only dtype {DTYPE} is supported")));
        }
        let domain = header_value(&headers, "domain")?
            .parse()
            .map_err(|_| Error::data(None, "bad domain id"))?;
        let shape: Vec<usize> = parse_list(header_value(&headers, "shape")?, "shape")?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::data(None, format!("bad declared shape {shape:?}")));
        }
        let vocabulary: Vec<String> = header_value(&headers, "vocabulary")?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let classes: Vec<usize> = parse_list(header_value(&headers, "classes")?, "classes")?;
        if classes.iter().any(|&c| c >= vocabulary.len()) {
            return Err(Error::data(None, "domain classes outside vocabulary"));
        }

        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
        let header = reader.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::data(None, "manifest table header must be `path,label,split`"));
        }
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row_no = i + 1;
            let record = record.map_err(|e| Error::data(Some(row_no), e.to_string()))?;
            if record.len() != 3 {
                return Err(Error::data(Some(row_no), "expected 3 fields"));
            }
            let split = match &record[2] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::data(Some(row_no), format!("unknown split `{other}`"))),
            };
            rows.push(ManifestRow {
                path: record[0].to_string(),
                label: record[1].to_string(),
                split,
            });
        }
        Ok(Self {
            root,
            domain,
            shape,
            vocabulary,
            classes,
            rows,
        })
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(&format!("# {MAGIC}\n"));
        out.push_str(&format!("# domain={}\n", self.domain));
        out.push_str(&format!("# dtype={DTYPE}\n"));
        out.push_str(&format!("# shape={}\n", join(&self.shape)));
        out.push_str(&format!("# vocabulary={}\n", self.vocabulary.join(",")));
        out.push_str(&format!("# classes={}\n", join(&self.classes)));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "label", "split"])?;
        for r in &self.rows {
            w.write_record([r.path.as_str(), r.label.as_str(), r.split.as_str()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::data(None, e.to_string()))?;
        out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
        Ok(out)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Loads `(train, test)` in manifest row order. `train` is `None` when the
/// manifest has no train rows.
pub fn load_feature_dir(manifest: &FeatureManifest) -> Result<(Option<Dataset>, Dataset)> {
    if manifest.rows.is_empty() {
        return Err(Error::data(None, "manifest has no rows"));
    }
    let per_item: usize = manifest.shape.iter().product();
    let mut splits: [(Vec<f64>, Vec<usize>); 2] = Default::default();
    for (i, row) in manifest.rows.iter().enumerate() {
        let row_no = i + 1;
        let class = manifest
            .vocabulary
            .iter()
            .position(|v| *v == row.label)
            .ok_or_else(|| Error::data(Some(row_no), format!("unknown label `{}`", row.label)))?;
        if !manifest.classes.contains(&class) {
            return Err(Error::data(
                Some(row_no),
                format!("label `{}` not among this domain's classes", row.label),
            ));
        }
        let path = manifest.root.join(&row.path);
        let bytes = fs::read(&path).map_err(|e| Error::data(Some(row_no), format!("{}: {e}", path.display())))?;
        if bytes.len() != per_item * 4 {
            return Err(Error::data(
                Some(row_no),
                format!(
                    "{} holds {} bytes, declared shape {:?} needs {}",
                    row.path,
                    bytes.len(),
                    manifest.shape,
                    per_item * 4
                ),
            ));
        }
        let (data, labels) = &mut splits[(row.split == Split::Test) as usize];
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::data(Some(row_no), "non-finite feature value"));
            }
            data.push(f64::from(v));
        }
        labels.push(class);
    }
    let [(train_data, train_labels), (test_data, test_labels)] = splits;
    let build = |data: Vec<f64>, labels: Vec<usize>, split| -> Result<Dataset> {
        let mut shape = vec![labels.len()];
        shape.extend_from_slice(&manifest.shape);
        Dataset::new(
            manifest.domain,
            split,
            manifest.classes.clone(),
            Tensor::new(shape, data)?,
            labels,
        )
    };
    if test_labels.is_empty() {
        return Err(Error::data(None, "manifest has no test rows"));
    }
    let train = if train_labels.is_empty() {
        None
    } else {
        Some(build(train_data, train_labels, Split::Train)?)
    };
    Ok((train, build(test_data, test_labels, Split::Test)?))
}

/// Writes one `f32` file per sample under `dir/features/d<domain>/<split>/` and
/// the manifest at `dir/d<domain>.csv`. Fails if a sample is not exactly
/// representable as `f32`.
pub fn export_dataset_pair(
    dir: &Path,
    train: Option<&Dataset>,
    test: &Dataset,
    vocabulary: &[String],
) -> Result<FeatureManifest> {
    let domain = test.domain;
    let mut rows = Vec::new();
    for ds in train.into_iter().chain(std::iter::once(test)) {
        let rel_dir = format!("features/d{domain}/{}", ds.split.as_str());
        let abs_dir = dir.join(&rel_dir);
        fs::create_dir_all(&abs_dir).map_err(|e| Error::io(&abs_dir, e))?;
        for i in 0..ds.len() {
            let mut bytes = Vec::with_capacity(ds.samples.item_len() * 4);
            for &v in ds.samples.item(i) {
                let f = v as f32;
                if f64::from(f).to_bits() != v.to_bits() {
                    return Err(Error::data(None, format!("sample {i} is not f32-representable")));
                }
                bytes.extend_from_slice(&f.to_le_bytes());
            }
            let rel = format!("{rel_dir}/{i:06}.f32");
            let abs = dir.join(&rel);
            fs::write(&abs, bytes).map_err(|e| Error::io(&abs, e))?;
            let label = vocabulary
                .get(ds.labels[i])
                .ok_or_else(|| Error::data(None, format!("label {} outside vocabulary", ds.labels[i])))?;
            rows.push(ManifestRow {
                path: rel,
                label: label.clone(),
                split: ds.split,
            });
        }
    }
    let manifest = FeatureManifest {
        root: dir.to_path_buf(),
        domain,
        shape: test.item_shape().to_vec(),
        vocabulary: vocabulary.to_vec(),
        classes: test.classes.clone(),
        rows,
    };
    let path = dir.join(format!("d{domain}.csv"));
    fs::write(&path, manifest.to_text()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
