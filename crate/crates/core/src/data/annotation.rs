use std::fs;
use std::path::{Path, PathBuf};

use super::{ImageSample, Point};
use crate::error::{Error, Result};

/// One line of an annotation file: `id<TAB>path<TAB>x<TAB>y`.
///
/// Relative image paths resolve against the annotation file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub id: String,
    pub path: PathBuf,
    pub vp: Point,
}

fn parse_line(line: &str, lineno: usize, source: &Path) -> Result<AnnotationRecord> {
    let bad = |what: &str| Error::data(format!("{}:{lineno}: {what}", source.display()));
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(bad(&format!("expected 4 tab-separated fields, found {}", fields.len())));
    }
    let coord = |s: &str, name: &str| -> Result<f64> {
        let v: f64 = s.trim().parse().map_err(|_| bad(&format!("{name} is not a number: {s:?}")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(bad(&format!("{name} is not finite")))
        }
    };
    if fields[0].is_empty() {
        return Err(bad("empty id"));
    }
    Ok(AnnotationRecord {
        id: fields[0].to_string(),
        path: PathBuf::from(fields[1]),
        vp: Point::new(coord(fields[2], "x")?, coord(fields[3], "y")?),
    })
}

/// Parses an annotation file. Blank lines are skipped.
pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(line, i + 1, path)?);
    }
    Ok(records)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        if r.id.contains(['\t', '\n']) {
            return Err(Error::data(format!("id {:?} contains a tab or newline", r.id)));
        }
        let p = r.path.to_string_lossy();
        // `{}` on f64 prints the shortest string that parses back exactly
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.id, p, r.vp.x, r.vp.y));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads every image listed in an annotation file.
pub fn load_dataset(annotations: &Path) -> Result<Vec<ImageSample>> {
    let base = annotations.parent().unwrap_or(Path::new("."));
    let records = read_annotations(annotations)?;
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let path = if r.path.is_absolute() { r.path.clone() } else { base.join(&r.path) };
        let image = image::open(&path)
            .map_err(|source| Error::Image { path: path.clone(), source })?
            .to_rgb8();
        samples.push(ImageSample::new(r.id, image, r.vp)?);
    }
    Ok(samples)
}

/// Writes samples as `<id>.png` plus `annotations.tsv` into `dir`, returning
/// the annotation file path.
pub fn save_dataset(dir: &Path, samples: &[ImageSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let name = format!("{}.png", s.id);
        let path = dir.join(&name);
        s.image
            .save(&path)
            .map_err(|source| Error::Image { path: path.clone(), source })?;
        records.push(AnnotationRecord {
            id: s.id.clone(),
            path: PathBuf::from(name),
            vp: s.vp,
        });
    }
    let ann = dir.join("annotations.tsv");
    write_annotations(&ann, &records)?;
    Ok(ann)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;
    use proptest::prelude::*;

    #[test]
    fn parses_and_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tsv");
        fs::write(&p, "a\timg/a.png\t1.5\t2\n\nb\tb.jpg\t3\t4\r\n").unwrap();
        let recs = read_annotations(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].vp, Point::new(1.5, 2.0));
        assert_eq!(recs[1].path, PathBuf::from("b.jpg"));

        fs::write(&p, "a\tx.png\t1\n").unwrap();
        let err = read_annotations(&p).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
        fs::write(&p, "a\tx.png\t1\tnan\n").unwrap();
        assert!(read_annotations(&p).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(6, 4);
        img.put_pixel(2, 1, image::Rgb([10, 200, 30]));
        let s = ImageSample::new("s0", img, Point::new(2.25, 3.5)).unwrap();
        let ann = save_dataset(dir.path(), std::slice::from_ref(&s)).unwrap();
        let back = load_dataset(&ann).unwrap();
        assert_eq!(back, vec![s]);
    }

    #[test]
    fn missing_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tsv");
        fs::write(&p, "a\tnope.png\t1\t1\n").unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Image { .. })));
    }

    proptest! {
        #[test]
        fn write_read_identity(
            recs in prop::collection::vec(("[a-z0-9_]{1,8}", "[a-z/]{1,10}\\.png", -1e4f64..1e4, -1e4f64..1e4), 0..12)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.tsv");
            let recs: Vec<AnnotationRecord> = recs
                .into_iter()
                .map(|(id, path, x, y)| AnnotationRecord { id, path: PathBuf::from(path), vp: Point::new(x, y) })
                .collect();
            write_annotations(&p, &recs).unwrap();
            prop_assert_eq!(read_annotations(&p).unwrap(), recs);
        }
    }
}
