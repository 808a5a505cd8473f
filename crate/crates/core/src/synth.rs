//! Synthetic dataset builders: statistics-scale manifests for loader and
//! validator checks, and a small separable linking task whose gold pairs
//! share tokens and image bytes, so a correct training loop must push them
//! to the top of the ranking.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{self, DatasetSplit, EntityCatalog, SplitName};
use crate::error::{Error, Result};

/// Write a mention manifest with `n` records, the first `n_with_image` of
/// which carry an image reference. Gold ids all resolve to "e0".
pub fn write_mention_manifest(path: impl AsRef<Path>, n: usize, n_with_image: usize) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(&display, e))?);
    for i in 0..n {
        let image = if i < n_with_image {
            format!("\"img/m{i}.bin\"")
        } else {
            "null".to_string()
        };
        writeln!(
            out,
            r#"{{"id":"m{i}","mention_word":"word{i}","context":"context for record {i}","image":{image},"gold_entity":"e0","enhanced_context":null}}"#
        )
        .map_err(|e| Error::io(&display, e))?;
    }
    out.flush().map_err(|e| Error::io(&display, e))
}

/// Write an entity file with `n` records, the first `n_with_image` of which
/// carry an image reference.
pub fn write_entity_manifest(path: impl AsRef<Path>, n: usize, n_with_image: usize) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(&display, e))?);
    for i in 0..n {
        let image = if i < n_with_image {
            format!("\"img/e{i}.bin\"")
        } else {
            "null".to_string()
        };
        writeln!(
            out,
            r#"{{"entity_id":"e{i}","name":"entity {i}","attributes":"attr {i}","image":{image},"qid":null}}"#
        )
        .map_err(|e| Error::io(&display, e))?;
    }
    out.flush().map_err(|e| Error::io(&display, e))
}

/// Paths of one generated toy task.
#[derive(Debug, Clone)]
pub struct ToyFiles {
    pub train_path: PathBuf,
    pub valid_path: PathBuf,
    pub entities_path: PathBuf,
    pub kb_path: PathBuf,
}

/// Loaded toy task.
pub struct ToyTask {
    pub train: DatasetSplit,
    pub valid: DatasetSplit,
    pub catalog: EntityCatalog,
    pub files: ToyFiles,
}

/// Generate an n-pair separable task under `dir`: mention i and entity i
/// share two unique tokens and a byte-identical image; every record also
/// carries common filler tokens. A KB fixture with one candidate per
/// mention word is included so the enhancement pass has work to do.
pub fn write_toy_task(dir: impl AsRef<Path>, n: usize, seed: u64) -> Result<ToyFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("img"))
        .map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write = |name: &str, body: String| -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    };

    let mut train = String::new();
    let mut valid = String::new();
    let mut entities = String::new();
    let mut kb = String::new();
    for i in 0..n {
        let img = dir.join("img").join(format!("pair{i:02}.bin"));
        let bytes: Vec<u8> = (0u8..16)
            .map(|b| (seed as u8) ^ (i as u8) ^ b.wrapping_mul(37))
            .collect();
        std::fs::write(&img, &bytes).map_err(|e| Error::io(img.display().to_string(), e))?;
        let img_str = img.display().to_string();
        let word = format!("thing{i:02}");
        let tag = format!("marker{i:02}");
        train.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "id": format!("m{i:02}"),
                "mention_word": word,
                "context": format!("{word} {tag} appears among common filler words"),
                "image": img_str,
                "gold_entity": format!("e{i:02}"),
                "enhanced_context": null,
            })
        ));
        valid.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "id": format!("v{i:02}"),
                "mention_word": word,
                "context": format!("{word} {tag} appears among common filler words"),
                "image": img_str,
                "gold_entity": format!("e{i:02}"),
                "enhanced_context": null,
            })
        ));
        entities.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "entity_id": format!("e{i:02}"),
                "name": word,
                "attributes": format!("{tag} common filler words"),
                "image": img_str,
                "qid": format!("Q{}", 1000 + i),
            })
        ));
        kb.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "label": word,
                "qid": format!("Q{}", 1000 + i),
                "description": format!("{tag} described in the knowledge base"),
            })
        ));
    }
    Ok(ToyFiles {
        train_path: write("train.jsonl", train)?,
        valid_path: write("valid.jsonl", valid)?,
        entities_path: write("entities.jsonl", entities)?,
        kb_path: write("kb.jsonl", kb)?,
    })
}

/// Generate and load a toy task in one step.
pub fn toy_task(dir: impl AsRef<Path>, n: usize, seed: u64) -> Result<ToyTask> {
    let files = write_toy_task(&dir, n, seed)?;
    Ok(ToyTask {
        train: data::load_dataset(&files.train_path, SplitName::Train)?,
        valid: data::load_dataset(&files.valid_path, SplitName::Valid)?,
        catalog: data::build_entity_catalog(&files.entities_path)?,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_counts_and_image_split() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_mention_manifest(&p, 137, 41).unwrap();
        let split = data::load_dataset(&p, SplitName::Train).unwrap();
        assert_eq!(split.len(), 137);
        let with_img = split
            .mentions()
            .iter()
            .filter(|m| m.image_ref.is_some())
            .count();
        assert_eq!(with_img, 41);
    }

    #[test]
    fn entity_manifest_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        write_entity_manifest(&p, 40, 10).unwrap();
        let cat = data::build_entity_catalog(&p).unwrap();
        assert_eq!(cat.len(), 40);
        assert!((cat.image_coverage() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn toy_task_loads_and_golds_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let task = toy_task(dir.path(), 6, 1).unwrap();
        assert_eq!(task.train.len(), 6);
        assert_eq!(task.valid.len(), 6);
        assert_eq!(task.catalog.len(), 6);
        for m in task.train.mentions() {
            assert!(task.catalog.contains(&m.gold_entity_id));
            assert!(m.image_ref.is_some());
        }
        // mention and gold entity share the image bytes
        let m0 = &task.train.mentions()[0];
        let e0 = task.catalog.get(&m0.gold_entity_id).unwrap();
        let a = std::fs::read(m0.image_ref.as_ref().unwrap()).unwrap();
        let b = std::fs::read(e0.image_ref.as_ref().unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
