use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::augment::ImageTensor;
use crate::error::Result;
use crate::types::{detection_order, BBox, Detection, Domain, LabelKind, LabelSet};

use super::config::SceneConfig;

/// Per-object quantities the detector model needs beyond the GT box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectTraits {
    /// 0 is easy, 1 is hard; lowers the detector's score on the object.
    pub difficulty: f64,
    /// Standard-normal offsets reused across epochs, so a detector repeats
    /// part of its localization and scoring error on the same object.
    pub loc_bias: [f64; 4],
    pub score_bias: f64,
}

/// A synthetic image with ground truth. `traits[i]` belongs to `gt.detections()[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: String,
    pub gt: LabelSet,
    pub traits: Vec<ObjectTraits>,
    pub domain: Domain,
    pub rendered: Option<ImageTensor>,
}

impl Scene {
    /// Builds a scene from unsorted objects, keeping traits aligned with the
    /// canonical GT order.
    pub fn from_objects(
        image_id: impl Into<String>,
        domain: Domain,
        mut objects: Vec<(Detection, ObjectTraits)>,
        rendered: Option<ImageTensor>,
    ) -> Self {
        let image_id = image_id.into();
        for (d, _) in objects.iter_mut() {
            d.score = 1.0;
        }
        objects.sort_by(|a, b| detection_order(&a.0, &b.0));
        let (dets, traits): (Vec<_>, Vec<_>) = objects.into_iter().unzip();
        Self { gt: LabelSet::new(image_id.clone(), LabelKind::GroundTruth, dets), image_id, traits, domain, rendered }
    }

    pub fn objects(&self) -> impl Iterator<Item = (&Detection, &ObjectTraits)> {
        self.gt.detections().iter().zip(&self.traits)
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn class_intensity(class_id: u32, class_count: u32, domain: Domain) -> f64 {
    let base = 0.15 + 0.7 * f64::from(class_id + 1) / f64::from(class_count + 1);
    match domain {
        Domain::Source => base,
        // the target domain renders with inverted contrast
        Domain::Target => 1.0 - base,
    }
}

/// Solid rectangles on a noisy background.
pub fn render_scene<R: Rng>(
    objects: &[(Detection, ObjectTraits)],
    cfg: &SceneConfig,
    domain: Domain,
    rng: &mut R,
) -> Result<ImageTensor> {
    let n = cfg.render_size;
    let bg = match domain {
        Domain::Source => 0.35,
        Domain::Target => 0.6,
    };
    let data = (0..n * n).map(|_| bg + rng.random_range(-0.1..0.1)).collect();
    let mut img = ImageTensor::new(n, n, 1, data)?;
    for (det, _) in objects {
        let [x1, y1, x2, y2] = det.bbox.to_pixels(n as f64, n as f64);
        let v = class_intensity(det.class_id, cfg.class_count, domain);
        let (px1, py1) = (x1.floor() as usize, y1.floor() as usize);
        let (px2, py2) = ((x2.ceil() as usize).min(n), (y2.ceil() as usize).min(n));
        for y in py1..py2 {
            for x in px1..px2 {
                img.set(x, y, 0, v);
            }
        }
    }
    Ok(img)
}

/// Uniformly placed boxes with sizes drawn from the configured range.
pub fn generate_scene<R: Rng>(image_id: impl Into<String>, rng: &mut R, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let [lo, hi] = cfg.box_count;
    let count = rng.random_range(lo..=hi);
    let [smin, smax] = cfg.box_size;
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let w = rng.random_range(smin..=smax);
        let h = rng.random_range(smin..=smax);
        let x1 = rng.random_range(0.0..=1.0 - w);
        let y1 = rng.random_range(0.0..=1.0 - h);
        let class_id = rng.random_range(0..cfg.class_count);
        let bbox = BBox::new(x1, y1, x1 + w, y1 + h)?;
        let traits = ObjectTraits {
            difficulty: rng.random_range(0.0..1.0),
            loc_bias: [normal(rng), normal(rng), normal(rng), normal(rng)],
            score_bias: normal(rng),
        };
        objects.push((Detection::new(bbox, class_id, 1.0)?, traits));
    }
    let rendered = if cfg.render_size > 0 { Some(render_scene(&objects, cfg, cfg.domain, rng)?) } else { None };
    Ok(Scene::from_objects(image_id, cfg.domain, objects, rendered))
}
