//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<sample_id>/image.ppm     binary P6, 8-bit RGB
//! <dir>/<sample_id>/class.pgm     binary P5, 16-bit big-endian class ids (0 = unlabeled)
//! <dir>/<sample_id>/instance.pgm  binary P5, 16-bit big-endian instance ids (0 = unlabeled)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CatalogEntry, Dataset};
use crate::domain::{ClassId, ImageSample, Mask, SegmentLabel};
use crate::error::{LabError, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub class_catalog: Vec<CatalogEntry>,
    pub image_count: usize,
    pub sample_ids: Vec<String>,
    pub class_counts: BTreeMap<ClassId, usize>,
}

fn valid_sample_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let (h, w) = (dataset.height, dataset.width);
    let known: BTreeSet<ClassId> = dataset.class_catalog.iter().map(|e| e.class_id).collect();
    let mut ids = BTreeSet::new();
    for s in &dataset.samples {
        if !valid_sample_id(&s.sample_id) {
            return Err(LabError::InvalidArgument(format!(
                "sample id {:?} is not a portable folder name",
                s.sample_id
            )));
        }
        if !ids.insert(s.sample_id.as_str()) {
            return Err(LabError::InvalidArgument(format!(
                "duplicate sample id {}",
                s.sample_id
            )));
        }
        if s.height != h || s.width != w {
            return Err(LabError::DimensionMismatch(format!(
                "sample {} is {}x{}, dataset is {h}x{w}",
                s.sample_id, s.height, s.width
            )));
        }
        s.validate()?;
        if let Some(l) = s.labels.iter().find(|l| !known.contains(&l.class_id)) {
            return Err(LabError::UnknownClass(l.class_id.0));
        }
        let sdir = dir.join(&s.sample_id);
        fs::create_dir_all(&sdir).map_err(|e| LabError::io(&sdir, e))?;

        let mut ppm = format!("P6\n{w} {h}\n255\n").into_bytes();
        ppm.extend_from_slice(&s.pixels);
        write_file(&sdir.join("image.ppm"), &ppm)?;

        let mut class_map = vec![0u16; h * w];
        let mut inst_map = vec![0u16; h * w];
        for l in &s.labels {
            if l.instance_id == 0 {
                return Err(LabError::InvalidArgument(format!(
                    "sample {} has a label with instance id 0",
                    s.sample_id
                )));
            }
            for (i, &b) in l.mask.bits.iter().enumerate() {
                if b {
                    class_map[i] = l.class_id.0;
                    inst_map[i] = l.instance_id;
                }
            }
        }
        write_file(&sdir.join("class.pgm"), &encode_pgm16(w, h, &class_map))?;
        write_file(&sdir.join("instance.pgm"), &encode_pgm16(w, h, &inst_map))?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        height: h,
        width: w,
        class_catalog: dataset.class_catalog.clone(),
        image_count: dataset.samples.len(),
        sample_ids: dataset.samples.iter().map(|s| s.sample_id.clone()).collect(),
        class_counts: dataset.class_counts(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_file(&dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let raw = fs::read(&path).map_err(|e| LabError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| LabError::malformed("manifest.json", e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(LabError::malformed(
            "manifest.json",
            format!("unsupported version {}", manifest.version),
        ));
    }
    if manifest.image_count != manifest.sample_ids.len() {
        return Err(LabError::malformed(
            "manifest.json",
            format!(
                "image_count {} but {} sample ids",
                manifest.image_count,
                manifest.sample_ids.len()
            ),
        ));
    }
    let (h, w) = (manifest.height, manifest.width);
    let known: BTreeSet<ClassId> = manifest.class_catalog.iter().map(|e| e.class_id).collect();
    let mut samples = Vec::with_capacity(manifest.sample_ids.len());
    for id in &manifest.sample_ids {
        if !valid_sample_id(id) {
            return Err(LabError::malformed("manifest.json", format!("bad sample id {id:?}")));
        }
        let sdir = dir.join(id);
        let ppm_path = sdir.join("image.ppm");
        let ppm = fs::read(&ppm_path).map_err(|e| LabError::io(&ppm_path, e))?;
        let (pw, ph, maxval, body) = parse_netpbm(&ppm, b"P6", &ppm_path)?;
        check_dims(&ppm_path, (pw, ph), (w, h))?;
        if maxval != 255 || body.len() != 3 * w * h {
            return Err(LabError::malformed(
                ppm_path.display().to_string(),
                format!("expected 8-bit body of {} bytes", 3 * w * h),
            ));
        }
        let class_map = read_pgm16(&sdir.join("class.pgm"), w, h)?;
        let inst_map = read_pgm16(&sdir.join("instance.pgm"), w, h)?;

        let mut by_instance: BTreeMap<u16, (u16, Vec<bool>)> = BTreeMap::new();
        for i in 0..w * h {
            let (c, inst) = (class_map[i], inst_map[i]);
            match (c, inst) {
                (0, 0) => continue,
                (0, _) | (_, 0) => {
                    return Err(LabError::malformed(
                        sdir.display().to_string(),
                        format!("class and instance maps disagree at pixel {i}"),
                    ))
                }
                _ => {}
            }
            if !known.contains(&ClassId(c)) {
                return Err(LabError::UnknownClass(c));
            }
            let entry = by_instance
                .entry(inst)
                .or_insert_with(|| (c, vec![false; w * h]));
            if entry.0 != c {
                return Err(LabError::malformed(
                    sdir.display().to_string(),
                    format!("instance {inst} spans classes {} and {c}", entry.0),
                ));
            }
            entry.1[i] = true;
        }
        let labels = by_instance
            .into_iter()
            .map(|(instance_id, (c, bits))| SegmentLabel {
                class_id: ClassId(c),
                mask: Mask {
                    height: h,
                    width: w,
                    bits,
                },
                instance_id,
                is_pseudo: false,
            })
            .collect();
        samples.push(ImageSample {
            sample_id: id.clone(),
            height: h,
            width: w,
            pixels: body.to_vec(),
            labels,
        });
    }
    Ok(Dataset {
        height: h,
        width: w,
        class_catalog: manifest.class_catalog,
        samples,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

fn encode_pgm16(w: usize, h: usize, values: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

fn check_dims(path: &Path, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(LabError::DimensionMismatch(format!(
            "{} is {}x{}, manifest says {}x{}",
            path.display(),
            got.1,
            got.0,
            want.1,
            want.0
        )));
    }
    Ok(())
}

fn read_pgm16(path: &Path, w: usize, h: usize) -> Result<Vec<u16>> {
    let raw = fs::read(path).map_err(|e| LabError::io(path, e))?;
    let (pw, ph, maxval, body) = parse_netpbm(&raw, b"P5", path)?;
    check_dims(path, (pw, ph), (w, h))?;
    if maxval != 65535 || body.len() != 2 * w * h {
        return Err(LabError::malformed(
            path.display().to_string(),
            format!("expected 16-bit body of {} bytes", 2 * w * h),
        ));
    }
    Ok(body
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect())
}

/// Parses a binary netpbm header; returns `(width, height, maxval, body)`.
fn parse_netpbm<'a>(
    raw: &'a [u8],
    magic: &[u8],
    path: &Path,
) -> Result<(usize, usize, usize, &'a [u8])> {
    let bad = |detail: &str| LabError::malformed(path.display().to_string(), detail.to_string());
    if raw.len() < 2 || &raw[..2] != magic {
        return Err(bad("wrong magic number"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match raw.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while raw.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while raw.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&raw[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header field out of range"))?;
    }
    if !raw.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    Ok((fields[0], fields[1], fields[2], &raw[pos + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{class_histogram, generate_dataset, SceneSpec};

    fn dataset(n: usize) -> Dataset {
        let spec = SceneSpec::default_six(16, 20);
        let classes = spec.class_catalog.iter().map(|e| e.class_id).collect();
        generate_dataset(&spec, &classes, n, 42, "img").unwrap()
    }

    #[test]
    fn empty_dataset_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = dataset(0);
        d.samples.clear();
        let m = write_dataset(&d, dir.path()).unwrap();
        assert_eq!(m.image_count, 0);
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn three_images_round_trip_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let d = dataset(3);
        let m = write_dataset(&d, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
        // manifest counts against a brute-force recount
        let mut recount: BTreeMap<ClassId, usize> = BTreeMap::new();
        for s in &d.samples {
            for l in &s.labels {
                *recount.entry(l.class_id).or_default() += 1;
            }
        }
        assert_eq!(m.class_counts, recount);
        assert_eq!(m.class_counts, class_histogram(&d.samples));
    }

    #[test]
    fn malformed_inputs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let d = dataset(1);
        write_dataset(&d, dir.path()).unwrap();
        let id = &d.samples[0].sample_id;

        let ppm = dir.path().join(id).join("image.ppm");
        let good = fs::read(&ppm).unwrap();
        fs::write(&ppm, b"P3\n1 1\n255\n").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(LabError::Malformed { .. })));

        let mut wrong = b"P6\n5 5\n255\n".to_vec();
        wrong.extend(vec![0u8; 75]);
        fs::write(&ppm, wrong).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(LabError::DimensionMismatch(_))));
        fs::write(&ppm, good).unwrap();

        let cls = dir.path().join(id).join("class.pgm");
        let mut map = vec![0u16; 16 * 20];
        let inst = read_pgm16(&dir.path().join(id).join("instance.pgm"), 20, 16).unwrap();
        for (m, i) in map.iter_mut().zip(&inst) {
            if *i != 0 {
                *m = 99;
            }
        }
        fs::write(&cls, encode_pgm16(20, 16, &map)).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(LabError::UnknownClass(99))));
    }

    #[test]
    fn header_comments_are_skipped() {
        let raw = b"P5\n# made by hand\n2 1\n65535\n\x00\x01\x01\x00";
        let (w, h, maxval, body) = parse_netpbm(raw, b"P5", Path::new("x")).unwrap();
        assert_eq!((w, h, maxval), (2, 1, 65535));
        assert_eq!(body, &[0, 1, 1, 0]);
    }
}
