//! JSON Lines annotation files, one image per line:
//!
//! ```text
//! {"image_id": "1", "width": 640, "height": 480,
//!  "instances": [{"class": 3, "box": [10, 20, 110, 220]}, ...],
//!  "triplets": [{"sub": 0, "pred": 7, "obj": 1}, ...]}
//! ```
//!
//! `class` and `pred` index the vocabulary; `sub` and `obj` index `instances`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoxCoords, ImageRecord, InstanceSet, RelationshipTriplet, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct InstanceLine {
    class: usize,
    #[serde(rename = "box")]
    bbox: BoxCoords,
}

#[derive(Debug, Serialize, Deserialize)]
struct TripletLine {
    sub: usize,
    pred: usize,
    obj: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageLine {
    image_id: String,
    width: f64,
    height: f64,
    instances: Vec<InstanceLine>,
    #[serde(default)]
    triplets: Vec<TripletLine>,
}

fn to_record(line: ImageLine, vocab: &Vocabulary) -> Result<ImageRecord> {
    let tag = |e: Error| Error::Validation(format!("image {}: {e}", line.image_id));
    let classes: Vec<usize> = line.instances.iter().map(|i| i.class).collect();
    let boxes: Vec<BoxCoords> = line.instances.iter().map(|i| i.bbox).collect();
    let instances =
        InstanceSet::from_ground_truth(classes.clone(), boxes, vocab.num_objects(), line.width, line.height)
            .map_err(tag)?;
    let mut triplets = Vec::with_capacity(line.triplets.len());
    for t in &line.triplets {
        let (Some(&sc), Some(&oc)) = (classes.get(t.sub), classes.get(t.obj)) else {
            return Err(Error::Validation(format!(
                "image {}: triplet references instance {} but only {} exist",
                line.image_id,
                t.sub.max(t.obj),
                classes.len()
            )));
        };
        triplets.push(RelationshipTriplet {
            subject_class: sc,
            predicate_class: t.pred,
            object_class: oc,
            subject_instance: t.sub,
            object_instance: t.obj,
        });
    }
    let rec = ImageRecord {
        image_id: line.image_id.clone(),
        instances,
        triplets,
    };
    rec.validate(vocab)?;
    Ok(rec)
}

/// Reads and validates an annotation file, preserving file order.
///
/// Blank lines are skipped. Features are left empty (`n x 0`); attach them
/// with [`super::load_instance_set`].
pub fn load_triplet_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<ImageRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ImageLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(to_record(parsed, vocab)?);
    }
    Ok(out)
}

/// Writes records in the format read by [`load_triplet_corpus`]. Features are
/// not part of this format.
pub fn write_triplet_corpus(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let classes = r
            .instances
            .gt_classes
            .clone()
            .unwrap_or_else(|| r.instances.argmax_labels());
        let line = ImageLine {
            image_id: r.image_id.clone(),
            width: r.instances.image_width,
            height: r.instances.image_height,
            instances: classes
                .iter()
                .zip(&r.instances.boxes)
                .map(|(&class, &bbox)| InstanceLine { class, bbox })
                .collect(),
            triplets: r
                .triplets
                .iter()
                .map(|t| TripletLine {
                    sub: t.subject_instance,
                    pred: t.predicate_class,
                    obj: t.object_instance,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary {
            object_classes: vec!["pillow".into(), "bed".into()],
            predicate_classes: vec!["on".into()],
        }
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let f = write("");
        assert!(load_triplet_corpus(f.path(), &vocab()).unwrap().is_empty());
    }

    #[test]
    fn pillow_on_bed() {
        let f = write(
            r#"{"image_id":"a","width":100,"height":100,"instances":[{"class":0,"box":[10,10,30,20]},{"class":1,"box":[0,15,90,60]}],"triplets":[{"sub":0,"pred":0,"obj":1}]}"#,
        );
        let recs = load_triplet_corpus(f.path(), &vocab()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].triplets.len(), 1);
        assert_eq!(recs[0].triplets[0].key(), (0, 0, 1));
    }

    #[test]
    fn out_of_range_instance_is_validation_error() {
        let f = write(
            r#"{"image_id":"img7","width":100,"height":100,"instances":[{"class":0,"box":[10,10,30,20]},{"class":1,"box":[0,15,90,60]}],"triplets":[{"sub":0,"pred":0,"obj":2}]}"#,
        );
        let err = load_triplet_corpus(f.path(), &vocab()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("img7")), "{err}");
    }

    #[test]
    fn malformed_line_names_line_number() {
        let f = write(
            "{\"image_id\":\"a\",\"width\":10,\"height\":10,\"instances\":[]}\n{not json\n",
        );
        let err = load_triplet_corpus(f.path(), &vocab()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn round_trip() {
        let f = write(
            r#"{"image_id":"a","width":100,"height":100,"instances":[{"class":0,"box":[10,10,30,20]},{"class":1,"box":[0,15,90,60]}],"triplets":[{"sub":0,"pred":0,"obj":1}]}"#,
        );
        let recs = load_triplet_corpus(f.path(), &vocab()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_triplet_corpus(out.path(), &recs).unwrap();
        assert_eq!(load_triplet_corpus(out.path(), &vocab()).unwrap(), recs);
    }
}
