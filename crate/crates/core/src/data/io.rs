//! On-disk layout:
//!
//! ```text
//! root/manifest.csv                       # "# classes: a,b,..." then path,label,split rows
//! root/{train,test}/<class>/img_#####.pgm # 8-bit binary PGM (P5)
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{DataError, Dataset, Sample, Split};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.csv";
const CLASSES_PREFIX: &str = "# classes:";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

pub(crate) fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    out
}

pub(crate) fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Image, DataError> {
    let bad = |detail: &str| DataError::Image { path: path.to_path_buf(), detail: detail.to_string() };
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string());
    }
    if tokens[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    pos += 1; // single whitespace after maxval
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("pixel data shorter than header claims"))?;
    if w == 0 || h == 0 {
        return Err(bad("empty image"));
    }
    if maxval == 255 {
        Ok(Image::from_u8(h, w, data))
    } else {
        Ok(Image::new(h, w, data.iter().map(|&b| b as f32 / maxval as f32).collect()))
    }
}

/// Writes images and the manifest. Per-class indices restart at 0 in each split.
pub fn save(dir: &Path, ds: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = format!("{CLASSES_PREFIX} {}\npath,label,split\n", ds.class_names().join(","));
    let mut counters = vec![[0usize; 2]; ds.num_classes()];
    for s in ds.samples() {
        let slot = &mut counters[s.label][s.split as usize];
        let rel = format!("{}/{}/img_{:05}.pgm", s.split.as_str(), ds.class_names()[s.label], *slot);
        *slot += 1;
        let path = dir.join(&rel);
        let parent = path.parent().expect("relative path has a parent");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        fs::write(&path, encode_pgm(&s.image)).map_err(io_err(&path))?;
        manifest.push_str(&format!("{rel},{},{}\n", s.label, s.split.as_str()));
    }
    let mpath = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&mpath).map_err(io_err(&mpath))?;
    f.write_all(manifest.as_bytes()).map_err(io_err(&mpath))?;
    Ok(())
}

/// Reads a dataset written by [`save`] or supplied externally in the same layout.
pub fn load(dir: &Path) -> Result<Dataset, DataError> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let bad = |detail: String| DataError::Manifest { path: mpath.clone(), detail };
    let (first, rest) = text.split_once('\n').ok_or_else(|| bad("empty manifest".into()))?;
    let classes = first
        .strip_prefix(CLASSES_PREFIX)
        .ok_or_else(|| bad(format!("first line must start with '{CLASSES_PREFIX}'")))?;
    let class_names: Vec<String> = classes.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(rest.as_bytes());
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
        return Err(bad(format!("expected columns path,label,split, got {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut samples = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let line = row + 3;
        let rel = PathBuf::from(&rec[0]);
        let label: usize = rec[1].trim().parse().map_err(|_| bad(format!("line {line}: label '{}' is not an integer", &rec[1])))?;
        let name = class_names
            .get(label)
            .ok_or_else(|| bad(format!("line {line}: label {label} outside the {} header classes", class_names.len())))?;
        let split = match rec[2].trim() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(bad(format!("line {line}: unknown split '{other}'"))),
        };
        let comps: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        if comps.len() >= 2 && comps[comps.len() - 2] != *name {
            return Err(bad(format!("line {line}: {} is filed under '{}' but labelled '{name}'", rel.display(), comps[comps.len() - 2])));
        }
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => DataError::MissingFile(path.clone()),
            _ => DataError::Io { path: path.clone(), source: e },
        })?;
        let image = decode_pgm(&bytes, &path)?;
        samples.push(Sample { image, label, split, is_labelled: false });
    }
    Dataset::new(class_names, samples).map_err(|e| bad(e.to_string()))
}
