use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SvtError};

pub const CSV_HEADER: [&str; 5] = [
    "example_id",
    "path_or_vector",
    "class_id",
    "class_word",
    "partition",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Partition> {
        match s.trim() {
            "train" => Some(Partition::Train),
            "test" => Some(Partition::Test),
            _ => None,
        }
    }
}

/// Where an example's input comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    /// Raw feature vector (synthetic datasets, precomputed features).
    Vector(Vec<f64>),
    /// Image file, resized to the configured resolution at load time.
    Image(PathBuf),
}

impl Payload {
    fn encode(&self) -> String {
        match self {
            Payload::Vector(v) => v
                .iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(";"),
            Payload::Image(p) => p.display().to_string(),
        }
    }

    /// A field is a vector when every `;`-separated part parses as a float.
    fn decode(field: &str, base_dir: &Path) -> Payload {
        let parts: Option<Vec<f64>> = field
            .split(';')
            .map(|p| p.trim().parse::<f64>().ok())
            .collect();
        match parts {
            Some(v) if !v.is_empty() => Payload::Vector(v),
            _ => {
                let p = PathBuf::from(field);
                Payload::Image(if p.is_absolute() { p } else { base_dir.join(p) })
            }
        }
    }

    /// Pixel values in `[0, 1]`, height × width × channels, for images; the
    /// stored values for vectors.
    pub fn load(&self, image_size: usize, channels: usize) -> Result<Vec<f64>> {
        match self {
            Payload::Vector(v) => Ok(v.clone()),
            Payload::Image(path) => load_image(path, image_size, channels),
        }
    }
}

fn load_image(path: &Path, size: usize, channels: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| SvtError::Input(format!("{}: {e}", path.display())))?;
    let img = img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle);
    let raw: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        4 => img.to_rgba8().into_raw(),
        c => {
            return Err(SvtError::Config(format!(
                "images support 1, 3 or 4 channels, not {c}"
            )))
        }
    };
    Ok(raw.into_iter().map(|b| b as f64 / 255.0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub payload: Payload,
    pub class_id: usize,
    pub partition: Partition,
}

/// A validated labelled dataset: examples plus one word per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    examples: Vec<Example>,
    class_words: Vec<String>,
}

impl DatasetManifest {
    /// Validates and wraps examples. `class_words[c]` names class `c`.
    pub fn new(examples: Vec<Example>, class_words: Vec<String>) -> Result<Self> {
        let class_count = class_words.len();
        if let Some(c) = class_words.iter().position(|w| w.trim().is_empty()) {
            return Err(SvtError::Validation(format!("class {c} has an empty class_word")));
        }
        let mut seen = HashSet::with_capacity(examples.len());
        let mut train = vec![0usize; class_count];
        let mut test = vec![0usize; class_count];
        for ex in &examples {
            if ex.class_id >= class_count {
                return Err(SvtError::Validation(format!(
                    "example {} has class_id {} outside 0..{class_count}",
                    ex.id, ex.class_id
                )));
            }
            if !seen.insert(ex.id.as_str()) {
                return Err(SvtError::Validation(format!("duplicate example_id {}", ex.id)));
            }
            match ex.partition {
                Partition::Train => train[ex.class_id] += 1,
                Partition::Test => test[ex.class_id] += 1,
            }
        }
        for c in 0..class_count {
            if train[c] == 0 {
                return Err(SvtError::Validation(format!(
                    "class {c} ({}) has no train examples",
                    class_words[c]
                )));
            }
            if test[c] == 0 {
                return Err(SvtError::Validation(format!(
                    "class {c} ({}) has no test examples",
                    class_words[c]
                )));
            }
        }
        Ok(DatasetManifest {
            examples,
            class_words,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn example(&self, index: usize) -> &Example {
        &self.examples[index]
    }

    pub fn class_count(&self) -> usize {
        self.class_words.len()
    }

    pub fn class_words(&self) -> &[String] {
        &self.class_words
    }

    pub fn class_word(&self, class_id: usize) -> &str {
        &self.class_words[class_id]
    }

    pub fn class_of_word(&self, word: &str) -> Option<usize> {
        self.class_words.iter().position(|w| w == word)
    }

    /// Manifest indices of one class's examples in one partition, in
    /// manifest order.
    pub fn indices_of(&self, class_id: usize, partition: Partition) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.class_id == class_id && e.partition == partition)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let fmt = |e: csv::Error| SvtError::Format(e.to_string());
        w.write_record(CSV_HEADER).map_err(fmt)?;
        for ex in &self.examples {
            w.write_record([
                ex.id.as_str(),
                &ex.payload.encode(),
                &ex.class_id.to_string(),
                &self.class_words[ex.class_id],
                ex.partition.as_str(),
            ])
            .map_err(fmt)?;
        }
        w.flush().map_err(|e| SvtError::Format(e.to_string()))
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}

/// Loads a CSV manifest file or a `root/<partition>/<class_word>/<file>`
/// directory tree.
pub fn load_dataset_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(SvtError::Input(format!("{} does not exist", path.display())));
    }
    if path.is_dir() {
        load_directory(path)
    } else {
        let bytes = fs::read(path).map_err(|e| SvtError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        parse_csv(&bytes, base)
    }
}

/// Parses manifest CSV; relative image paths resolve against `base_dir`.
pub fn parse_csv(bytes: &[u8], base_dir: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::Reader::from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| SvtError::Validation(format!("unreadable header: {e}")))?
        .clone();
    let mut col = [0usize; 5];
    for (slot, name) in col.iter_mut().zip(CSV_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| SvtError::Validation(format!("manifest is missing the {name} column")))?;
    }
    let mut words: BTreeMap<usize, String> = BTreeMap::new();
    let mut examples = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| SvtError::Validation(format!("row {}: {e}", line + 2)))?;
        let field = |i: usize| record.get(col[i]).unwrap_or("").trim();
        let id = field(0).to_string();
        let class_id: usize = field(2).parse().map_err(|_| {
            SvtError::Validation(format!("example {id}: bad class_id {:?}", field(2)))
        })?;
        let word = field(3).to_string();
        if word.is_empty() {
            return Err(SvtError::Validation(format!("example {id}: empty class_word")));
        }
        match words.get(&class_id) {
            Some(w) if *w != word => {
                return Err(SvtError::Validation(format!(
                    "class {class_id} named both {w:?} and {word:?} (example {id})"
                )))
            }
            Some(_) => {}
            None => {
                words.insert(class_id, word);
            }
        }
        let partition = Partition::parse(field(4)).ok_or_else(|| {
            SvtError::Validation(format!("example {id}: bad partition {:?}", field(4)))
        })?;
        examples.push(Example {
            payload: Payload::decode(field(1), base_dir),
            id,
            class_id,
            partition,
        });
    }
    let class_count = words.keys().next_back().map_or(0, |m| m + 1);
    let mut class_words = Vec::with_capacity(class_count);
    for c in 0..class_count {
        class_words.push(
            words
                .remove(&c)
                .ok_or_else(|| SvtError::Validation(format!("class {c} has no examples")))?,
        );
    }
    DatasetManifest::new(examples, class_words)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| SvtError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| SvtError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn load_directory(root: &Path) -> Result<DatasetManifest> {
    let mut files: Vec<(Partition, String, PathBuf)> = Vec::new();
    for partition in [Partition::Train, Partition::Test] {
        let pdir = root.join(partition.as_str());
        if !pdir.is_dir() {
            return Err(SvtError::Input(format!(
                "{} is missing the {} directory",
                root.display(),
                partition.as_str()
            )));
        }
        for class_dir in sorted_entries(&pdir)?.into_iter().filter(|p| p.is_dir()) {
            let word = file_name(&class_dir);
            for f in sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_file()) {
                files.push((partition, word.clone(), f));
            }
        }
    }
    let words: BTreeSet<&String> = files.iter().map(|(_, w, _)| w).collect();
    let class_words: Vec<String> = words.into_iter().cloned().collect();
    let examples = files
        .iter()
        .map(|(partition, word, f)| Example {
            id: format!("{}/{}/{}", partition.as_str(), word, file_name(f)),
            payload: Payload::Image(f.clone()),
            class_id: class_words.binary_search(word).expect("collected above"),
            partition: *partition,
        })
        .collect();
    DatasetManifest::new(examples, class_words)
}
