//! Synthetic scene generation and VOC-style dataset IO.
//!
//! Synthetic scenes are filled rectangles of a fixed foreground intensity over
//! low-amplitude noise. Uniform placement scatters boxes anywhere (positions
//! and sizes quantized to 1/16 px so annotation round-trips are exact);
//! hierarchy-aligned placement puts every object exactly on a hierarchy node,
//! which gives the learning experiments attainable optima.
//!
//! Annotations follow the VOC XML layout with 1-based inclusive pixel
//! corners; loading shifts them to this crate's 0-based exclusive convention,
//! filters to a single class, and skips objects marked difficult. Scenes with
//! no matching objects are dropped.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{GroundTruth, Scene};
use crate::error::{Error, Result};
use crate::features::ImageRaster;
use crate::geometry::{children, BBox, HierarchyScheme};
use crate::pnm;

/// Where objects go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementMode {
    /// Anywhere inside the image.
    Uniform,
    /// Exactly on hierarchy nodes at the configured depths.
    HierarchyAligned,
}

impl PlacementMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PlacementMode::Uniform),
            "hierarchy-aligned" => Ok(PlacementMode::HierarchyAligned),
            other => Err(Error::Config(format!(
                "unknown placement '{other}' (expected 'uniform' or 'hierarchy-aligned')"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PlacementMode::Uniform => "uniform",
            PlacementMode::HierarchyAligned => "hierarchy-aligned",
        }
    }
}

/// Recipe for a synthetic dataset; generation is a pure function of this.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_scenes: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Objects per scene, inclusive.
    pub count_range: (usize, usize),
    /// Object side as a fraction of the image side (uniform mode).
    pub size_range: (f64, f64),
    pub placement: PlacementMode,
    /// Hierarchy used for aligned placement.
    pub scheme: HierarchyScheme,
    /// Node depths for aligned placement, inclusive, >= 1.
    pub depth_range: (usize, usize),
    /// Background noise amplitude in [0, 1).
    pub noise_amplitude: f64,
    pub foreground_intensity: f64,
    pub label: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_scenes: 100,
            image_size: 64,
            count_range: (1, 1),
            size_range: (0.2, 0.6),
            placement: PlacementMode::Uniform,
            scheme: HierarchyScheme::Overlapped,
            depth_range: (1, 2),
            noise_amplitude: 0.1,
            foreground_intensity: 0.9,
            label: "object".into(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let s = self.image_size as f64;
        if self.count_range.0 < 1 || self.count_range.0 > self.count_range.1 {
            return Err(Error::InfeasiblePlacement(format!(
                "bad object count range {:?}",
                self.count_range
            )));
        }
        match self.placement {
            PlacementMode::Uniform => {
                let (lo, hi) = self.size_range;
                if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                    return Err(Error::InfeasiblePlacement(format!(
                        "size fractions {:?} outside (0, 1]",
                        self.size_range
                    )));
                }
                if lo * s < 2.0 {
                    return Err(Error::InfeasiblePlacement(format!(
                        "smallest object {:.2} px would be invisible",
                        lo * s
                    )));
                }
            }
            PlacementMode::HierarchyAligned => {
                let (lo, hi) = self.depth_range;
                if lo < 1 || lo > hi || hi > 8 {
                    return Err(Error::InfeasiblePlacement(format!(
                        "bad depth range {:?}",
                        self.depth_range
                    )));
                }
                let shrink: f64 = match self.scheme {
                    HierarchyScheme::NonOverlapped => 0.5,
                    HierarchyScheme::Overlapped => 0.75,
                };
                if s * shrink.powi(hi as i32) < 2.0 {
                    return Err(Error::InfeasiblePlacement(format!(
                        "depth {hi} nodes smaller than 2 px"
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&self.noise_amplitude)
            || !(0.0..=1.0).contains(&self.foreground_intensity)
        {
            return Err(Error::InfeasiblePlacement(
                "intensities must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Snap to 1/16 px so the +1/-1 annotation convention round-trips exactly.
fn quantize(v: f64) -> f64 {
    (v * 16.0).round() / 16.0
}

fn place_object(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> BBox {
    let s = spec.image_size as f64;
    match spec.placement {
        PlacementMode::Uniform => {
            let (lo, hi) = spec.size_range;
            let w = quantize(rng.gen_range(lo..=hi) * s).clamp(1.0, s);
            let h = quantize(rng.gen_range(lo..=hi) * s).clamp(1.0, s);
            let x0 = quantize(rng.gen_range(0.0..=(s - w)));
            let y0 = quantize(rng.gen_range(0.0..=(s - h)));
            BBox { x0, y0, x1: x0 + w, y1: y0 + h }
        }
        PlacementMode::HierarchyAligned => {
            let depth = rng.gen_range(spec.depth_range.0..=spec.depth_range.1);
            let mut node = BBox { x0: 0.0, y0: 0.0, x1: s, y1: s };
            for _ in 0..depth {
                node = children(&node, spec.scheme)[rng.gen_range(0..5)];
            }
            node
        }
    }
}

/// Deterministic synthetic scenes: noisy background, filled rectangles, and
/// ground truth exactly matching the rectangles.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = spec.image_size;
    let fg = (spec.foreground_intensity * 255.0).round() as u8;
    let noise_scale = spec.noise_amplitude * 255.0;
    let mut scenes = Vec::with_capacity(spec.num_scenes);
    for _ in 0..spec.num_scenes {
        let mut pixels = vec![0u8; side * side];
        for p in pixels.iter_mut() {
            *p = (rng.gen::<f64>() * noise_scale).round() as u8;
        }
        let count = rng.gen_range(spec.count_range.0..=spec.count_range.1);
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let bbox = place_object(spec, &mut rng);
            for py in 0..side {
                let cy = py as f64 + 0.5;
                if cy < bbox.y0 || cy >= bbox.y1 {
                    continue;
                }
                for px in 0..side {
                    let cx = px as f64 + 0.5;
                    if cx >= bbox.x0 && cx < bbox.x1 {
                        pixels[py * side + px] = fg;
                    }
                }
            }
            objects.push(GroundTruth { bbox, label: spec.label.clone() });
        }
        let image = ImageRaster::from_u8(side, side, 1, &pixels)?;
        scenes.push(Scene::new(image, objects)?);
    }
    Ok(scenes)
}

/// (image, annotation) path pairs plus a split label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: String,
    pub entries: Vec<(PathBuf, PathBuf)>,
}

impl DatasetManifest {
    /// CSV with one `image,annotation,split` row per scene. Relative paths
    /// resolve against the manifest's directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("image,annotation,split\n");
        for (img, ann) in &self.entries {
            writeln!(out, "{},{},{}", img.display(), ann.display(), self.split)
                .expect("string write");
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        let mut split = String::new();
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 {
                if line.trim() != "image,annotation,split" {
                    return Err(Error::Parse {
                        file: path.display().to_string(),
                        msg: format!("unexpected header '{line}'"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    msg: format!("line {}: expected 3 fields", ln + 1),
                });
            }
            entries.push((base.join(fields[0]), base.join(fields[1])));
            split = fields[2].to_string();
        }
        Ok(DatasetManifest { split, entries })
    }
}

fn write_voc_annotation(path: &Path, image_name: &str, scene: &Scene) -> Result<()> {
    let mut xml = String::new();
    xml.push_str("<annotation>\n");
    let _ = writeln!(xml, "  <filename>{image_name}</filename>");
    let _ = writeln!(
        xml,
        "  <size><width>{}</width><height>{}</height><depth>{}</depth></size>",
        scene.image.width, scene.image.height, scene.image.channels
    );
    for obj in &scene.objects {
        xml.push_str("  <object>\n");
        let _ = writeln!(xml, "    <name>{}</name>", obj.label);
        xml.push_str("    <difficult>0</difficult>\n");
        let _ = writeln!(
            xml,
            "    <bndbox><xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax></bndbox>",
            obj.bbox.x0 + 1.0,
            obj.bbox.y0 + 1.0,
            obj.bbox.x1,
            obj.bbox.y1
        );
        xml.push_str("  </object>\n");
    }
    xml.push_str("</annotation>\n");
    fs::write(path, xml)?;
    Ok(())
}

/// Writes `scene_NNNN.{pgm,xml}` pairs under `dir` and returns a manifest of
/// relative paths.
pub fn save_dataset(dir: &Path, split: &str, scenes: &[Scene]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let ext = if scene.image.channels == 3 { "ppm" } else { "pgm" };
        let img_name = format!("scene_{i:04}.{ext}");
        let ann_name = format!("scene_{i:04}.xml");
        pnm::write_pnm(&dir.join(&img_name), &scene.image)?;
        write_voc_annotation(&dir.join(&ann_name), &img_name, scene)?;
        entries.push((PathBuf::from(&img_name), PathBuf::from(&ann_name)));
    }
    Ok(DatasetManifest { split: split.to_string(), entries })
}

fn parse_f64(node: roxmltree::Node, tag: &str, file: &str) -> Result<f64> {
    let text = node
        .children()
        .find(|c| c.has_tag_name(tag))
        .and_then(|c| c.text())
        .ok_or_else(|| Error::Parse {
            file: file.into(),
            msg: format!("missing <{tag}>"),
        })?;
    text.trim().parse().map_err(|_| Error::Parse {
        file: file.into(),
        msg: format!("bad <{tag}> value '{}'", text.trim()),
    })
}

/// Loads every manifest entry, keeping only objects of `class_label` that are
/// not marked difficult. Scenes left with no objects are excluded. VOC's
/// 1-based inclusive corners become 0-based exclusive boxes.
pub fn load_voc_annotations(manifest: &DatasetManifest, class_label: &str) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (img_path, ann_path) in &manifest.entries {
        let image = pnm::read_pnm(img_path)?;
        let file = ann_path.display().to_string();
        let text = fs::read_to_string(ann_path).map_err(|e| Error::Parse {
            file: file.clone(),
            msg: e.to_string(),
        })?;
        let doc = roxmltree::Document::parse(&text).map_err(|e| Error::Parse {
            file: file.clone(),
            msg: e.to_string(),
        })?;
        let root = doc.root_element();
        if let Some(size) = root.children().find(|c| c.has_tag_name("size")) {
            let w = parse_f64(size, "width", &file)? as usize;
            let h = parse_f64(size, "height", &file)? as usize;
            if w != image.width || h != image.height {
                return Err(Error::Parse {
                    file,
                    msg: format!(
                        "annotation size {w}x{h} != image {}x{}",
                        image.width, image.height
                    ),
                });
            }
        }
        let mut objects = Vec::new();
        for node in root.children().filter(|c| c.has_tag_name("object")) {
            let name = node
                .children()
                .find(|c| c.has_tag_name("name"))
                .and_then(|c| c.text())
                .unwrap_or("")
                .trim()
                .to_string();
            if name != class_label {
                continue;
            }
            let difficult = node
                .children()
                .find(|c| c.has_tag_name("difficult"))
                .and_then(|c| c.text())
                .map(|t| t.trim() == "1")
                .unwrap_or(false);
            if difficult {
                continue;
            }
            let bnd = node
                .children()
                .find(|c| c.has_tag_name("bndbox"))
                .ok_or_else(|| Error::Parse {
                    file: file.clone(),
                    msg: "object without <bndbox>".into(),
                })?;
            let xmin = parse_f64(bnd, "xmin", &file)?;
            let ymin = parse_f64(bnd, "ymin", &file)?;
            let xmax = parse_f64(bnd, "xmax", &file)?;
            let ymax = parse_f64(bnd, "ymax", &file)?;
            let bbox =
                BBox::new(xmin - 1.0, ymin - 1.0, xmax, ymax).map_err(|e| Error::Parse {
                    file: file.clone(),
                    msg: format!("bad bndbox: {e}"),
                })?;
            objects.push(GroundTruth { bbox, label: name });
        }
        if objects.is_empty() {
            continue;
        }
        scenes.push(Scene::new(image, objects)?);
    }
    Ok(scenes)
}
