use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdomains::{
    load_png, read_labels, BuiltDataset, DatasetManifest, ObjectInstance, RenderedSample,
};

/// In-memory training data: the labeled source plus, for every labeled
/// scene, its stylized auxiliary counterparts keyed by scene id. Reverse
/// records (unlabeled scenes moved into the labeled style) become
/// image-level-only pairs.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub labeled: Vec<RenderedSample>,
    pub counterparts: BTreeMap<u64, Vec<RenderedSample>>,
    pub reverse_pairs: Vec<(RenderedSample, RenderedSample)>,
}

impl TrainData {
    pub fn counterpart_styles(&self) -> Vec<String> {
        let mut styles: Vec<String> = self
            .counterparts
            .values()
            .flat_map(|v| v.iter().map(|s| s.style_id.clone()))
            .collect();
        styles.sort();
        styles.dedup();
        styles
    }
}

fn label_path_for(image_path: &str) -> String {
    image_path
        .replace("/images/", "/labels/")
        .replace(".png", ".txt")
}

fn load_record(root: &Path, path: &str, scene_id: u64, style_id: &str, labeled: bool) -> Result<RenderedSample> {
    let image = load_png(&root.join(path))?;
    let labels = if labeled {
        Some(read_labels(&root.join(label_path_for(path)))?)
    } else {
        None
    };
    Ok(RenderedSample {
        scene_id,
        style_id: style_id.to_string(),
        image,
        labels,
    })
}

/// Load every sample referenced by a manifest.
pub fn load_split(root: &Path, manifest: &DatasetManifest) -> Result<Vec<RenderedSample>> {
    manifest
        .records
        .iter()
        .map(|r| load_record(root, &r.path, r.scene_id, &r.style_id, r.labeled))
        .collect()
}

/// Load target images together with their evaluation-only ground truth. The
/// labels live in `eval_gt/`, deliberately outside the training loader's
/// paths.
pub fn load_target_with_gt(
    root: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<(RenderedSample, Vec<ObjectInstance>)>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let sample = load_record(root, &r.path, r.scene_id, &r.style_id, false)?;
            let gt_path = r.path.replace("/images/", "/eval_gt/").replace(".png", ".txt");
            let gt = read_labels(&root.join(gt_path))?;
            Ok((sample, gt))
        })
        .collect()
}

/// Assemble training data from a built dataset.
pub fn load_train_data(data: &BuiltDataset) -> Result<TrainData> {
    let labeled = load_split(&data.root, &data.labeled)?;
    if labeled.is_empty() {
        return Err(Error::Data("labeled manifest is empty".into()));
    }
    let labeled_scene_styles: BTreeMap<u64, &RenderedSample> =
        labeled.iter().map(|s| (s.scene_id, s)).collect();

    let mut counterparts: BTreeMap<u64, Vec<RenderedSample>> = BTreeMap::new();
    let mut reverse_pairs = Vec::new();
    let mut unlabeled_cache: BTreeMap<u64, RenderedSample> = BTreeMap::new();
    for m in &data.unlabeled {
        for s in load_split(&data.root, m)? {
            unlabeled_cache.insert(s.scene_id, s);
        }
    }
    for rec in &data.auxiliary.records {
        let sample = load_record(&data.root, &rec.path, rec.scene_id, &rec.style_id, false)?;
        if labeled_scene_styles.contains_key(&rec.scene_id) && rec.labeled {
            counterparts.entry(rec.scene_id).or_default().push(sample);
        } else if let Some(orig) = unlabeled_cache.get(&rec.scene_id) {
            reverse_pairs.push((orig.clone(), sample));
        }
    }
    if counterparts.is_empty() {
        return Err(Error::Data("auxiliary manifest has no counterparts for labeled scenes".into()));
    }
    for s in &labeled {
        if !counterparts.contains_key(&s.scene_id) {
            return Err(Error::Data(format!(
                "labeled scene {} has no auxiliary counterpart",
                s.scene_id
            )));
        }
    }
    Ok(TrainData {
        labeled,
        counterparts,
        reverse_pairs,
    })
}
