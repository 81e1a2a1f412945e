use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::render::DomainGenerator;
use super::scene::ObjectInstance;

/// Which split a manifest describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    LabeledSource,
    UnlabeledSource,
    Auxiliary,
    Target,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::LabeledSource => "labeled_source",
            Role::UnlabeledSource => "unlabeled_source",
            Role::Auxiliary => "auxiliary",
            Role::Target => "target",
        };
        f.write_str(s)
    }
}

impl Role {
    fn parse(s: &str) -> Result<Role> {
        match s {
            "labeled_source" => Ok(Role::LabeledSource),
            "unlabeled_source" => Ok(Role::UnlabeledSource),
            "auxiliary" => Ok(Role::Auxiliary),
            "target" => Ok(Role::Target),
            other => Err(Error::Data(format!("unknown manifest role: {other}"))),
        }
    }
}

/// One sample reference. `path` is relative to the dataset root.
/// On disk: `<path> <scene_id> <style_id> <labeled 0|1>`, one per line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub scene_id: u64,
    pub style_id: String,
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub role: Role,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn scene_ids(&self) -> BTreeSet<u64> {
        self.records.iter().map(|r| r.scene_id).collect()
    }

    pub fn style_ids(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.style_id.clone()).collect()
    }
}

fn sample_stem(scene_id: u64, style_id: &str) -> String {
    format!("s{scene_id:05}_{style_id}")
}

fn image_rel_path(split_dir: &str, scene_id: u64, style_id: &str) -> String {
    format!("{split_dir}/images/{}.png", sample_stem(scene_id, style_id))
}

/// Protocol under evaluation: generalization to held-out styles (DG) or
/// adaptation to the unlabeled source style itself (DA).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolMode {
    Dg,
    Da,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub labeled_style: String,
    pub unlabeled_styles: Vec<String>,
    pub mode: ProtocolMode,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_target: usize,
}

/// Assign disjoint scene pools and styles to the labeled source, unlabeled
/// sources and targets. Target styles never appear in any source manifest in
/// DG mode; in DA mode the targets are the unlabeled source styles (on fresh
/// scenes).
pub fn split_protocol(
    cfg: &ProtocolConfig,
    all_styles: &[String],
) -> Result<(DatasetManifest, Vec<DatasetManifest>, Vec<DatasetManifest>)> {
    if cfg.unlabeled_styles.is_empty() {
        return Err(Error::Config(
            "protocol needs at least 2 source styles (1 labeled + 1 unlabeled)".into(),
        ));
    }
    let mut seen = BTreeSet::new();
    for s in std::iter::once(&cfg.labeled_style).chain(cfg.unlabeled_styles.iter()) {
        if !all_styles.contains(s) {
            return Err(Error::Config(format!("style not defined: {s}")));
        }
        if !seen.insert(s.clone()) {
            return Err(Error::Config(format!("style assigned twice: {s}")));
        }
    }
    let source_styles: BTreeSet<&String> = seen.iter().collect();
    let target_styles: Vec<String> = match cfg.mode {
        ProtocolMode::Dg => all_styles
            .iter()
            .filter(|s| !source_styles.contains(s))
            .cloned()
            .collect(),
        ProtocolMode::Da => cfg.unlabeled_styles.clone(),
    };
    if target_styles.is_empty() {
        return Err(Error::Config(
            "no target styles left; DG needs at least one non-source style".into(),
        ));
    }
    if cfg.n_labeled == 0 || cfg.n_unlabeled == 0 || cfg.n_target == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }

    let mut next_scene: u64 = 0;
    let mut take = |n: usize| -> Vec<u64> {
        let ids: Vec<u64> = (next_scene..next_scene + n as u64).collect();
        next_scene += n as u64;
        ids
    };

    let labeled = DatasetManifest {
        role: Role::LabeledSource,
        records: take(cfg.n_labeled)
            .into_iter()
            .map(|id| ManifestRecord {
                path: image_rel_path("labeled_source", id, &cfg.labeled_style),
                scene_id: id,
                style_id: cfg.labeled_style.clone(),
                labeled: true,
            })
            .collect(),
    };

    let unlabeled: Vec<DatasetManifest> = cfg
        .unlabeled_styles
        .iter()
        .map(|style| DatasetManifest {
            role: Role::UnlabeledSource,
            records: take(cfg.n_unlabeled)
                .into_iter()
                .map(|id| ManifestRecord {
                    path: image_rel_path(&format!("unlabeled_source_{style}"), id, style),
                    scene_id: id,
                    style_id: style.clone(),
                    labeled: false,
                })
                .collect(),
        })
        .collect();

    let targets: Vec<DatasetManifest> = target_styles
        .iter()
        .map(|style| DatasetManifest {
            role: Role::Target,
            records: take(cfg.n_target)
                .into_iter()
                .map(|id| ManifestRecord {
                    path: image_rel_path(&format!("target_{style}"), id, style),
                    scene_id: id,
                    style_id: style.clone(),
                    labeled: false,
                })
                .collect(),
        })
        .collect();

    Ok((labeled, unlabeled, targets))
}

/// Build the auxiliary manifest: every labeled scene re-rendered in every
/// unlabeled style. With `reverse` set to the unlabeled manifests plus the
/// labeled style, unlabeled scenes are also transferred into the labeled
/// style, without labels.
pub fn build_auxiliary_domain(
    labeled: &DatasetManifest,
    unlabeled_styles: &[String],
    reverse: Option<(&[DatasetManifest], &str)>,
) -> Result<DatasetManifest> {
    if labeled.role != Role::LabeledSource {
        return Err(Error::Data("auxiliary must be built from the labeled source".into()));
    }
    if unlabeled_styles.is_empty() {
        return Err(Error::Data("auxiliary needs at least one unlabeled style".into()));
    }
    let mut records = Vec::new();
    for style in unlabeled_styles {
        for rec in &labeled.records {
            records.push(ManifestRecord {
                path: image_rel_path("auxiliary", rec.scene_id, style),
                scene_id: rec.scene_id,
                style_id: style.clone(),
                labeled: true,
            });
        }
    }
    if let Some((sources, labeled_style)) = reverse {
        for m in sources {
            for rec in &m.records {
                records.push(ManifestRecord {
                    path: image_rel_path("auxiliary", rec.scene_id, labeled_style),
                    scene_id: rec.scene_id,
                    style_id: labeled_style.to_string(),
                    labeled: false,
                });
            }
        }
    }
    Ok(DatasetManifest {
        role: Role::Auxiliary,
        records,
    })
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    out.push_str(&format!("# role {}\n", manifest.role));
    for r in &manifest.records {
        out.push_str(&format!(
            "{} {} {} {}\n",
            r.path,
            r.scene_id,
            r.style_id,
            u8::from(r.labeled)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("empty manifest: {}", path.display())))??;
    let role = header
        .strip_prefix("# role ")
        .ok_or_else(|| Error::Data("manifest missing role header".into()))
        .and_then(Role::parse)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Data(format!("bad manifest line: {line}")));
        }
        records.push(ManifestRecord {
            path: parts[0].to_string(),
            scene_id: parts[1]
                .parse()
                .map_err(|_| Error::Data(format!("bad scene id: {line}")))?,
            style_id: parts[2].to_string(),
            labeled: match parts[3] {
                "0" => false,
                "1" => true,
                _ => return Err(Error::Data(format!("bad labeled flag: {line}"))),
            },
        });
    }
    Ok(DatasetManifest { role, records })
}

pub fn save_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let (h, w, _) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[[y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[y, x, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[y, x, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png write {}: {e}", path.display())))?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("png read {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x, y);
            for c in 0..3 {
                out[[y as usize, x as usize, c]] = f64::from(px[c]) / 255.0;
            }
        }
    }
    Ok(out)
}

pub fn write_labels(path: &Path, objects: &[ObjectInstance]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    for o in objects {
        writeln!(
            f,
            "{} {} {} {} {}",
            o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3], o.category
        )?;
    }
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<ObjectInstance>> {
    let content = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in content.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(Error::Data(format!("bad label line: {line}")));
        }
        let nums: Vec<u32> = parts[..4]
            .iter()
            .map(|p| p.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Data(format!("bad label line: {line}")))?;
        out.push(ObjectInstance {
            bbox: [nums[0], nums[1], nums[2], nums[3]],
            category: parts[4]
                .parse()
                .map_err(|_| Error::Data(format!("bad label line: {line}")))?,
        });
    }
    Ok(out)
}

/// All manifests of one built dataset, with the on-disk root they refer to.
#[derive(Clone, Debug)]
pub struct BuiltDataset {
    pub root: PathBuf,
    pub labeled: DatasetManifest,
    pub unlabeled: Vec<DatasetManifest>,
    pub auxiliary: DatasetManifest,
    pub targets: Vec<DatasetManifest>,
}

impl BuiltDataset {
    pub fn manifest_paths(root: &Path) -> (PathBuf, PathBuf) {
        (root.join("labeled_source/manifest.txt"), root.join("auxiliary/manifest.txt"))
    }

    pub fn load(root: &Path) -> Result<BuiltDataset> {
        let labeled = read_manifest(&root.join("labeled_source/manifest.txt"))?;
        let auxiliary = read_manifest(&root.join("auxiliary/manifest.txt"))?;
        let mut unlabeled = Vec::new();
        let mut targets = Vec::new();
        let mut entries: Vec<_> = fs::read_dir(root)?
            .collect::<std::result::Result<Vec<_>, _>>()?
            .into_iter()
            .map(|e| e.path())
            .collect();
        entries.sort();
        for dir in entries {
            let name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
            let manifest = dir.join("manifest.txt");
            if name.starts_with("unlabeled_source_") && manifest.exists() {
                unlabeled.push(read_manifest(&manifest)?);
            } else if name.starts_with("target_") && manifest.exists() {
                targets.push(read_manifest(&manifest)?);
            }
        }
        if unlabeled.is_empty() || targets.is_empty() {
            return Err(Error::Data(format!(
                "dataset at {} is missing unlabeled or target splits",
                root.display()
            )));
        }
        Ok(BuiltDataset {
            root: root.to_path_buf(),
            labeled,
            unlabeled,
            auxiliary,
            targets,
        })
    }
}

/// Render and write a full dataset to `root`: labeled source, unlabeled
/// sources, the auxiliary domain, targets, manifests, label sidecars for the
/// labeled split, and evaluation-only ground truth for targets under
/// `eval_gt/` (never read by the training loader).
pub fn build_dataset(
    generator: &DomainGenerator,
    protocol: &ProtocolConfig,
    reverse_stylization: bool,
    root: &Path,
) -> Result<BuiltDataset> {
    let all_styles = generator.style_ids();
    let (labeled, unlabeled, targets) = split_protocol(protocol, &all_styles)?;
    let reverse_src: Vec<DatasetManifest> = unlabeled.clone();
    let auxiliary = build_auxiliary_domain(
        &labeled,
        &protocol.unlabeled_styles,
        reverse_stylization.then_some((reverse_src.as_slice(), protocol.labeled_style.as_str())),
    )?;

    fs::create_dir_all(root)?;

    let render_record = |rec: &ManifestRecord| -> Result<()> {
        let sample = generator.render_scene(rec.scene_id, &rec.style_id)?;
        save_png(&root.join(&rec.path), &sample.image)?;
        Ok(())
    };

    for rec in &labeled.records {
        render_record(rec)?;
        let scene = generator.scene(rec.scene_id)?;
        let label_path = root.join(format!(
            "labeled_source/labels/{}.txt",
            sample_stem(rec.scene_id, &rec.style_id)
        ));
        write_labels(&label_path, &scene.objects)?;
    }
    write_manifest(&labeled, &root.join("labeled_source/manifest.txt"))?;

    for m in &unlabeled {
        let style = &m.records[0].style_id;
        for rec in &m.records {
            render_record(rec)?;
        }
        write_manifest(m, &root.join(format!("unlabeled_source_{style}/manifest.txt")))?;
    }

    for rec in &auxiliary.records {
        render_record(rec)?;
        if rec.labeled {
            let scene = generator.scene(rec.scene_id)?;
            let label_path = root.join(format!(
                "auxiliary/labels/{}.txt",
                sample_stem(rec.scene_id, &rec.style_id)
            ));
            write_labels(&label_path, &scene.objects)?;
        }
    }
    write_manifest(&auxiliary, &root.join("auxiliary/manifest.txt"))?;

    for m in &targets {
        let style = &m.records[0].style_id;
        for rec in &m.records {
            render_record(rec)?;
            // held-out ground truth, visible to the evaluator only
            let scene = generator.scene(rec.scene_id)?;
            let gt_path = root.join(format!(
                "target_{style}/eval_gt/{}.txt",
                sample_stem(rec.scene_id, &rec.style_id)
            ));
            write_labels(&gt_path, &scene.objects)?;
        }
        write_manifest(m, &root.join(format!("target_{style}/manifest.txt")))?;
    }

    Ok(BuiltDataset {
        root: root.to_path_buf(),
        labeled,
        unlabeled,
        auxiliary,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::super::render::DomainGenerator;
    use super::super::scene::GeneratorConfig;
    use super::super::style::default_styles;
    use super::*;

    fn protocol() -> ProtocolConfig {
        ProtocolConfig {
            labeled_style: "plain".into(),
            unlabeled_styles: vec!["inkwash".into()],
            mode: ProtocolMode::Dg,
            n_labeled: 6,
            n_unlabeled: 4,
            n_target: 3,
        }
    }

    fn style_names() -> Vec<String> {
        default_styles().iter().map(|s| s.style_id.clone()).collect()
    }

    #[test]
    fn dg_targets_are_the_left_over_styles() {
        let (_l, _u, t) = split_protocol(&protocol(), &style_names()).unwrap();
        let styles: Vec<_> = t.iter().flat_map(|m| m.style_ids()).collect();
        assert_eq!(styles, vec!["negative".to_string(), "sepia".to_string()]);
    }

    #[test]
    fn da_target_is_the_unlabeled_style() {
        let cfg = ProtocolConfig {
            mode: ProtocolMode::Da,
            ..protocol()
        };
        let (_l, _u, t) = split_protocol(&cfg, &style_names()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].style_ids().into_iter().collect::<Vec<_>>(), vec!["inkwash"]);
    }

    #[test]
    fn scene_pools_are_pairwise_disjoint() {
        let (l, u, t) = split_protocol(&protocol(), &style_names()).unwrap();
        let mut pools = vec![l.scene_ids()];
        pools.extend(u.iter().map(|m| m.scene_ids()));
        pools.extend(t.iter().map(|m| m.scene_ids()));
        for i in 0..pools.len() {
            for j in i + 1..pools.len() {
                assert!(pools[i].is_disjoint(&pools[j]));
            }
        }
    }

    #[test]
    fn overlapping_style_assignment_rejected() {
        let cfg = ProtocolConfig {
            unlabeled_styles: vec!["plain".into()],
            ..protocol()
        };
        assert!(split_protocol(&cfg, &style_names()).is_err());
    }

    #[test]
    fn auxiliary_size_matches_pair_count() {
        let names = style_names();
        let mk = |n_labeled| {
            let cfg = ProtocolConfig {
                n_labeled,
                ..protocol()
            };
            split_protocol(&cfg, &names).unwrap().0
        };
        // one unlabeled style, forward only: |aux| = N_L
        let aux = build_auxiliary_domain(&mk(100), &["inkwash".into()], None).unwrap();
        assert_eq!(aux.records.len(), 100);
        // two unlabeled styles: |aux| = 2 * N_L
        let aux2 =
            build_auxiliary_domain(&mk(100), &["inkwash".into(), "negative".into()], None).unwrap();
        assert_eq!(aux2.records.len(), 200);
    }

    #[test]
    fn auxiliary_of_empty_labeled_is_empty() {
        let labeled = DatasetManifest {
            role: Role::LabeledSource,
            records: vec![],
        };
        let aux = build_auxiliary_domain(&labeled, &["inkwash".into()], None).unwrap();
        assert!(aux.records.is_empty());
    }

    #[test]
    fn auxiliary_requires_styles() {
        let labeled = DatasetManifest {
            role: Role::LabeledSource,
            records: vec![],
        };
        assert!(build_auxiliary_domain(&labeled, &[], None).is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let (l, _, _) = split_protocol(&protocol(), &style_names()).unwrap();
        let dir = std::env::temp_dir().join(format!("cddmsl_manifest_{}", std::process::id()));
        let path = dir.join("manifest.txt");
        write_manifest(&l, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(l, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn built_dataset_round_trips_images_and_labels() {
        let gen = DomainGenerator::new(GeneratorConfig::default(), default_styles(), 5);
        let dir = std::env::temp_dir().join(format!("cddmsl_data_{}", std::process::id()));
        let built = build_dataset(&gen, &protocol(), false, &dir).unwrap();
        assert_eq!(built.auxiliary.records.len(), 6);
        // auxiliary scenes mirror the labeled scenes
        assert_eq!(built.auxiliary.scene_ids(), built.labeled.scene_ids());
        // label transport: sidecars equal the scene objects
        let rec = &built.labeled.records[0];
        let labels = read_labels(&dir.join(format!(
            "labeled_source/labels/{}.txt",
            sample_stem(rec.scene_id, &rec.style_id)
        )))
        .unwrap();
        assert_eq!(labels, gen.scene(rec.scene_id).unwrap().objects);
        // images decode to the quantized render
        let img = load_png(&dir.join(&rec.path)).unwrap();
        let fresh = gen.render_scene(rec.scene_id, &rec.style_id).unwrap();
        let max_err = (&img - &fresh.image).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-9);
        let reloaded = BuiltDataset::load(&dir).unwrap();
        assert_eq!(reloaded.labeled, built.labeled);
        assert_eq!(reloaded.targets.len(), 2);
        std::fs::remove_dir_all(&dir).ok();
    }
}
