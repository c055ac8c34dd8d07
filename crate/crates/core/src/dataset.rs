//! Domain data model shared by every stage: annotated object views,
//! collections, and their on-disk form.
//!
//! A collection file is a single UTF-8 JSON document. Every floating point
//! value is written with 17 significant digits so that loading a saved
//! collection reproduces it bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::Real;

pub type Vec2 = Vector2<Real>;

/// Default bounding-box height all instances are normalized to.
pub const DEFAULT_HEIGHT: Real = 150.0;
/// Default spacing of regular feature grids.
pub const DEFAULT_STRIDE: Real = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    /// Pixels. `(0, 0)` when not visible.
    pub position: Vec2,
    pub visible: bool,
}

impl Keypoint {
    pub fn visible(name: impl Into<String>, position: Vec2) -> Self {
        Self { name: name.into(), position, visible: true }
    }

    pub fn missing(name: impl Into<String>) -> Self {
        Self { name: name.into(), position: Vec2::zeros(), visible: false }
    }
}

/// Keypoints of one view, in the class-wide order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeypointSet {
    pub keypoints: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Keypoint> {
        self.keypoints.get(index)
    }

    /// Position of keypoint `index` if it is visible.
    pub fn visible_position(&self, index: usize) -> Option<Vec2> {
        self.keypoints.get(index).filter(|k| k.visible).map(|k| k.position)
    }

    pub fn visible_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.visible).count()
    }

    /// Indices visible in both sets, ascending.
    pub fn shared_visible(&self, other: &KeypointSet) -> Vec<usize> {
        (0..self.len().min(other.len()))
            .filter(|&z| self.keypoints[z].visible && other.keypoints[z].visible)
            .collect()
    }
}

/// Feature locations and their descriptors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub points: Vec<Vec2>,
    pub descriptors: Vec<Vec<Real>>,
    pub stride: Real,
}

impl FeatureGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn descriptor_dim(&self) -> Option<usize> {
        self.descriptors.first().map(Vec::len)
    }

    pub fn bounding_box(&self) -> Option<BoundingBox> {
        BoundingBox::around(self.points.iter().copied())
    }

    /// Mean of the descriptors.
    pub fn mean_descriptor(&self) -> Vec<Real> {
        let Some(dim) = self.descriptor_dim() else { return Vec::new() };
        let mut mean = vec![0.0; dim];
        for d in &self.descriptors {
            for (m, v) in mean.iter_mut().zip(d) {
                *m += v;
            }
        }
        let n = self.descriptors.len() as Real;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Axis-aligned box `[min.x, max.x] × [min.y, max.y]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub min: Vec2,
    pub max: Vec2,
}

impl BoundingBox {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Self { min, max }
    }

    pub fn around(points: impl IntoIterator<Item = Vec2>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (mut min, mut max) = (first, first);
        for p in it {
            min = min.inf(&p);
            max = max.sup(&p);
        }
        Some(Self { min, max })
    }

    pub fn width(&self) -> Real {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> Real {
        self.max.y - self.min.y
    }

    /// Corners in the order top-left, top-right, bottom-right, bottom-left.
    pub fn corners(&self) -> [Vec2; 4] {
        [
            self.min,
            Vec2::new(self.max.x, self.min.y),
            self.max,
            Vec2::new(self.min.x, self.max.y),
        ]
    }
}

/// Run-length encoded binary raster. Runs alternate background/foreground in
/// row-major order, starting with background. Raster cell `(c, r)` covers the
/// image square `[c, c+1) × [r, r+1)` scaled by `pixel_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub pixel_size: Real,
    pub runs: Vec<u32>,
}

impl RleMask {
    pub fn from_bitmap(width: u32, height: u32, pixel_size: Real, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize, "bitmap size");
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        Self { width, height, pixel_size, runs }
    }

    pub fn to_bitmap(&self) -> Vec<bool> {
        let mut bits = Vec::with_capacity(self.width as usize * self.height as usize);
        for (i, &run) in self.runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, run as usize));
        }
        bits
    }

    fn cell(&self, x: Real, y: Real) -> Option<usize> {
        let c = (x / self.pixel_size).floor();
        let r = (y / self.pixel_size).floor();
        if c < 0.0 || r < 0.0 || c >= self.width as Real || r >= self.height as Real {
            return None;
        }
        Some(r as usize * self.width as usize + c as usize)
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        let Some(target) = self.cell(p.x, p.y) else { return false };
        let mut offset = 0usize;
        for (i, &run) in self.runs.iter().enumerate() {
            offset += run as usize;
            if target < offset {
                return i % 2 == 1;
            }
        }
        false
    }

    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let bits = self.to_bitmap();
        let w = self.width as usize;
        let (mut c0, mut c1, mut r0, mut r1) = (usize::MAX, 0, usize::MAX, 0);
        for (idx, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
            let (r, c) = (idx / w, idx % w);
            c0 = c0.min(c);
            c1 = c1.max(c);
            r0 = r0.min(r);
            r1 = r1.max(r);
        }
        if c0 == usize::MAX {
            return None;
        }
        let s = self.pixel_size;
        Some(BoundingBox::new(
            Vec2::new(c0 as Real * s, r0 as Real * s),
            Vec2::new((c1 + 1) as Real * s, (r1 + 1) as Real * s),
        ))
    }

    pub fn flipped_horizontally(&self) -> Self {
        let w = self.width as usize;
        let bits = self.to_bitmap();
        let mut out = vec![false; bits.len()];
        for (row_in, row_out) in bits.chunks(w.max(1)).zip(out.chunks_mut(w.max(1))) {
            for (c, &b) in row_in.iter().enumerate() {
                row_out[w - 1 - c] = b;
            }
        }
        Self::from_bitmap(self.width, self.height, self.pixel_size, &out)
    }
}

/// Object segmentation: a raster or a simple polygon in image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mask {
    Rle(RleMask),
    Polygon { vertices: Vec<Vec2> },
}

impl Mask {
    pub fn contains(&self, p: &Vec2) -> bool {
        match self {
            Mask::Rle(m) => m.contains(p),
            Mask::Polygon { vertices } => point_in_polygon(vertices, p),
        }
    }

    pub fn bounding_box(&self) -> Option<BoundingBox> {
        match self {
            Mask::Rle(m) => m.bounding_box(),
            Mask::Polygon { vertices } if vertices.len() >= 3 => {
                BoundingBox::around(vertices.iter().copied())
            }
            Mask::Polygon { .. } => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.bounding_box().is_none_or(|b| b.height() <= 0.0 || b.width() <= 0.0)
    }

    pub fn scaled(&self, factor: Real) -> Self {
        match self {
            Mask::Rle(m) => Mask::Rle(RleMask { pixel_size: m.pixel_size * factor, ..m.clone() }),
            Mask::Polygon { vertices } => {
                Mask::Polygon { vertices: vertices.iter().map(|v| v * factor).collect() }
            }
        }
    }

    /// Mirror about the vertical line `x = width / 2` of an image `width` wide.
    pub fn flipped(&self, width: Real) -> Self {
        match self {
            Mask::Rle(m) => Mask::Rle(m.flipped_horizontally()),
            Mask::Polygon { vertices } => Mask::Polygon {
                vertices: vertices.iter().rev().map(|v| Vec2::new(width - v.x, v.y)).collect(),
            },
        }
    }
}

fn point_in_polygon(vertices: &[Vec2], p: &Vec2) -> bool {
    let n = vertices.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (vertices[i], vertices[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Regular grid of in-mask locations with the given stride, anchored at the
/// mask bounding box corner and offset by half a stride.
pub fn regular_grid(mask: &Mask, stride: Real) -> Vec<Vec2> {
    let Some(bb) = mask.bounding_box() else { return Vec::new() };
    let mut out = Vec::new();
    let mut y = bb.min.y + 0.5 * stride;
    while y < bb.max.y {
        let mut x = bb.min.x + 0.5 * stride;
        while x < bb.max.x {
            let p = Vec2::new(x, y);
            if mask.contains(&p) {
                out.push(p);
            }
            x += stride;
        }
        y += stride;
    }
    out
}

/// One annotated view of an object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: String,
    /// `(width, height)` in pixels.
    pub image_size: [Real; 2],
    pub mask: Mask,
    pub grid: FeatureGrid,
    pub keypoints: KeypointSet,
    #[serde(default)]
    pub camera: Option<Camera<Real>>,
    #[serde(default)]
    pub global_descriptor: Option<Vec<Real>>,
}

impl ObjectInstance {
    pub fn width(&self) -> Real {
        self.image_size[0]
    }

    pub fn height(&self) -> Real {
        self.image_size[1]
    }

    /// Stored global descriptor, or the mean grid descriptor.
    pub fn global_descriptor_or_mean(&self) -> Vec<Real> {
        self.global_descriptor.clone().unwrap_or_else(|| self.grid.mean_descriptor())
    }

    /// Object bounding box: the mask box, else the grid box.
    pub fn object_box(&self) -> Option<BoundingBox> {
        self.mask.bounding_box().or_else(|| self.grid.bounding_box())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Error::invariant(&self.id, msg);
        let finite = |v: &Vec2| v.x.is_finite() && v.y.is_finite();
        if !self.image_size.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(fail("image_size must be positive and finite".into()));
        }
        if self.grid.points.len() != self.grid.descriptors.len() {
            return Err(fail(format!(
                "grid has {} points but {} descriptors",
                self.grid.points.len(),
                self.grid.descriptors.len()
            )));
        }
        if !self.grid.stride.is_finite() || self.grid.stride < 0.0 {
            return Err(fail("grid stride must be finite and non-negative".into()));
        }
        if let Some(dim) = self.grid.descriptor_dim() {
            if let Some(bad) = self.grid.descriptors.iter().position(|d| d.len() != dim) {
                return Err(fail(format!("descriptor dimension mismatch at grid point {bad}")));
            }
        }
        if self.grid.descriptors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(fail("non-finite descriptor value".into()));
        }
        for (k, p) in self.grid.points.iter().enumerate() {
            if !finite(p) {
                return Err(fail(format!("non-finite grid point {k}")));
            }
            if !self.mask.contains(p) {
                return Err(fail(format!("grid point {k} lies outside the mask")));
            }
        }
        if self.keypoints.visible_count() == 0 {
            return Err(fail("no visible keypoint".into()));
        }
        for kp in self.keypoints.keypoints.iter().filter(|k| k.visible) {
            let p = kp.position;
            if !finite(&p) {
                return Err(fail(format!("keypoint `{}` is not finite", kp.name)));
            }
            if p.x < 0.0 || p.y < 0.0 || p.x > self.width() || p.y > self.height() {
                return Err(fail(format!("keypoint `{}` outside the image", kp.name)));
            }
        }
        if let Mask::Rle(m) = &self.mask {
            let cells: u64 = m.runs.iter().map(|&r| r as u64).sum();
            if cells != m.width as u64 * m.height as u64 {
                return Err(fail("mask runs do not cover the raster".into()));
            }
            if !m.pixel_size.is_finite() || m.pixel_size <= 0.0 {
                return Err(fail("mask pixel_size must be positive".into()));
            }
            if (m.width as Real * m.pixel_size - self.width()).abs() > 1e-9 * self.width() {
                return Err(fail("raster mask must span the image width".into()));
            }
        }
        if let Some(cam) = &self.camera {
            cam.validate().map_err(|e| fail(format!("camera: {e}")))?;
        }
        if let Some(g) = &self.global_descriptor {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(fail("non-finite global descriptor".into()));
            }
        }
        Ok(())
    }
}

/// All annotated views of one object class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Collection {
    pub class_label: String,
    pub instances: Vec<ObjectInstance>,
    /// Keypoint permutation under left/right mirroring.
    pub symmetry_swap: Vec<usize>,
}

impl Collection {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn keypoint_count(&self) -> usize {
        self.symmetry_swap.len()
    }

    pub fn find(&self, id: &str) -> Option<(usize, &ObjectInstance)> {
        self.instances.iter().enumerate().find(|(_, inst)| inst.id == id)
    }

    pub fn cameras(&self) -> Result<Vec<Camera<Real>>> {
        self.instances
            .iter()
            .map(|inst| {
                inst.camera.ok_or_else(|| Error::invariant(&inst.id, "instance has no camera"))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let z = self.symmetry_swap.len();
        for (a, &b) in self.symmetry_swap.iter().enumerate() {
            if b >= z || self.symmetry_swap[b] != a {
                return Err(Error::schema("symmetry_swap", "not an involution over keypoint indices"));
            }
        }
        let mut dim: Option<usize> = None;
        for inst in &self.instances {
            inst.validate()?;
            if inst.keypoints.len() != z {
                return Err(Error::invariant(
                    &inst.id,
                    format!("has {} keypoints, class has {z}", inst.keypoints.len()),
                ));
            }
            if let Some(d) = inst.grid.descriptor_dim() {
                match dim {
                    None => dim = Some(d),
                    Some(expected) if expected != d => {
                        return Err(Error::invariant(
                            &inst.id,
                            format!("descriptor dimension {d} differs from collection dimension {expected}"),
                        ));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

const FORMAT_TAG: &str = "vvn-collection";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct DocumentOut<'a> {
    format: &'static str,
    version: u32,
    class_label: &'a str,
    symmetry_swap: &'a [usize],
    instances: &'a [ObjectInstance],
}

#[derive(Deserialize)]
struct DocumentIn {
    format: String,
    version: u32,
    class_label: String,
    symmetry_swap: Vec<usize>,
    instances: Vec<ObjectInstance>,
}

/// JSON formatter writing floats with 17 significant digits.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        write!(writer, "{value:.8e}")
    }
}

/// Serializes any value as JSON with full-precision floats.
pub fn to_json_writer<W: Write, T: Serialize + ?Sized>(writer: W, value: &T) -> Result<()> {
    let mut ser = serde_json::Serializer::with_formatter(writer, FullPrecision);
    value.serialize(&mut ser)?;
    Ok(())
}

pub fn collection_to_string(collection: &Collection) -> Result<String> {
    collection.validate()?;
    let mut buf = Vec::new();
    let doc = DocumentOut {
        format: FORMAT_TAG,
        version: FORMAT_VERSION,
        class_label: &collection.class_label,
        symmetry_swap: &collection.symmetry_swap,
        instances: &collection.instances,
    };
    to_json_writer(&mut buf, &doc)?;
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}

pub fn collection_from_str(text: &str) -> Result<Collection> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: DocumentIn = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::schema(field, e.into_inner().to_string())
    })?;
    check_header(&doc.format, doc.version)?;
    let collection = Collection {
        class_label: doc.class_label,
        instances: doc.instances,
        symmetry_swap: doc.symmetry_swap,
    };
    collection.validate()?;
    Ok(collection)
}

fn check_header(format: &str, version: u32) -> Result<()> {
    if format != FORMAT_TAG {
        return Err(Error::schema("format", format!("expected `{FORMAT_TAG}`, found `{format}`")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::schema("version", format!("unsupported version {version}")));
    }
    Ok(())
}

pub fn load_collection(path: impl AsRef<Path>) -> Result<Collection> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    collection_from_str(&text)
}

pub fn save_collection(collection: &Collection, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = collection_to_string(collection)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Reads a JSON document with the same float conventions as collections.
pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_reader(BufReader::new(file));
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::schema(field, e.into_inner().to_string())
    })
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    to_json_writer(&mut w, value)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rescales an instance so its mask bounding box is `target_height` tall.
/// Every 2D quantity (grid, keypoints, mask, image size, camera scale and
/// translation) is multiplied by the same factor.
pub fn normalize_instance(instance: &ObjectInstance, target_height: Real) -> Result<ObjectInstance> {
    if !target_height.is_finite() || target_height <= 0.0 {
        return Err(Error::InvalidInput(format!("target height {target_height} must be positive")));
    }
    let bb = instance
        .mask
        .bounding_box()
        .filter(|b| b.height() > 0.0)
        .ok_or_else(|| Error::invariant(&instance.id, "empty mask"))?;
    let factor = target_height / bb.height();
    if (factor - 1.0).abs() < 1e-12 {
        return Ok(instance.clone());
    }
    Ok(scale_instance(instance, factor))
}

fn scale_instance(instance: &ObjectInstance, factor: Real) -> ObjectInstance {
    let keypoints = KeypointSet {
        keypoints: instance
            .keypoints
            .keypoints
            .iter()
            .map(|k| Keypoint {
                name: k.name.clone(),
                position: if k.visible { k.position * factor } else { Vec2::zeros() },
                visible: k.visible,
            })
            .collect(),
    };
    ObjectInstance {
        id: instance.id.clone(),
        image_size: [instance.image_size[0] * factor, instance.image_size[1] * factor],
        mask: instance.mask.scaled(factor),
        grid: FeatureGrid {
            points: instance.grid.points.iter().map(|p| p * factor).collect(),
            descriptors: instance.grid.descriptors.clone(),
            stride: instance.grid.stride * factor,
        },
        keypoints,
        camera: instance.camera.map(|c| c.rescaled(factor)),
        global_descriptor: instance.global_descriptor.clone(),
    }
}

/// Normalizes every instance of a collection.
pub fn normalize_collection(collection: &Collection, target_height: Real) -> Result<Collection> {
    let instances = collection
        .instances
        .iter()
        .map(|inst| normalize_instance(inst, target_height))
        .collect::<Result<Vec<_>>>()?;
    Ok(Collection { instances, ..collection.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn square_mask(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Mask {
        let mut bits = vec![false; (w * h) as usize];
        for r in y0..y1 {
            for c in x0..x1 {
                bits[(r * w + c) as usize] = true;
            }
        }
        Mask::Rle(RleMask::from_bitmap(w, h, 1.0, &bits))
    }

    fn tiny_instance() -> ObjectInstance {
        let mask = square_mask(40, 40, 5, 5, 35, 35);
        let points: Vec<Vec2> = (0..10).map(|i| Vec2::new(10.0 + 2.0 * i as Real, 20.0)).collect();
        let descriptors = (0..10).map(|i| vec![i as Real, 1.0, -0.5]).collect();
        let kp = |n: &str, x: Real, y: Real| Keypoint::visible(n, Vec2::new(x, y));
        ObjectInstance {
            id: "a".into(),
            image_size: [40.0, 40.0],
            mask,
            grid: FeatureGrid { points, descriptors, stride: 2.0 },
            keypoints: KeypointSet {
                keypoints: vec![
                    kp("l", 6.0, 6.0),
                    kp("r", 34.0, 6.0),
                    kp("c", 20.0, 20.0),
                    Keypoint::missing("t"),
                ],
            },
            camera: Some(Camera::new(Matrix3::identity(), 2.0, Vec2::new(1.0, 3.0)).unwrap()),
            global_descriptor: None,
        }
    }

    fn tiny_collection() -> Collection {
        Collection {
            class_label: "toy".into(),
            instances: vec![tiny_instance()],
            symmetry_swap: vec![1, 0, 2, 3],
        }
    }

    #[test]
    fn rle_round_trip_and_contains() {
        let mask = square_mask(8, 4, 2, 1, 5, 3);
        let Mask::Rle(rle) = &mask else { unreachable!() };
        let back = RleMask::from_bitmap(8, 4, 1.0, &rle.to_bitmap());
        assert_eq!(&back, rle);
        assert!(mask.contains(&Vec2::new(2.5, 1.5)));
        assert!(!mask.contains(&Vec2::new(5.5, 1.5)));
        let bb = mask.bounding_box().unwrap();
        assert_eq!((bb.min, bb.max), (Vec2::new(2.0, 1.0), Vec2::new(5.0, 3.0)));
    }

    #[test]
    fn flip_mask_mirrors_cells() {
        let mask = square_mask(10, 2, 0, 0, 3, 2);
        let flipped = mask.flipped(10.0);
        assert!(flipped.contains(&Vec2::new(9.5, 0.5)));
        assert!(!flipped.contains(&Vec2::new(0.5, 0.5)));
        assert_eq!(flipped.flipped(10.0), mask);
    }

    #[test]
    fn polygon_mask() {
        let mask = Mask::Polygon {
            vertices: vec![
                Vec2::new(0.0, 0.0),
                Vec2::new(10.0, 0.0),
                Vec2::new(10.0, 10.0),
                Vec2::new(0.0, 10.0),
            ],
        };
        assert!(mask.contains(&Vec2::new(5.0, 5.0)));
        assert!(!mask.contains(&Vec2::new(11.0, 5.0)));
        assert!(mask.flipped(20.0).contains(&Vec2::new(15.0, 5.0)));
    }

    #[test]
    fn minimal_file_loads() {
        let text = collection_to_string(&tiny_collection()).unwrap();
        let back = collection_from_str(&text).unwrap();
        assert_eq!(back.keypoint_count(), 4);
        assert_eq!(back.instances[0].grid.len(), 10);
        assert_eq!(back, tiny_collection());
    }

    #[test]
    fn floats_use_seventeen_digits() {
        let text = collection_to_string(&tiny_collection()).unwrap();
        assert!(text.contains("2.0000000000000000e0"), "{}", &text[..200]);
    }

    #[test]
    fn descriptor_dimension_mismatch_is_reported() {
        let mut c = tiny_collection();
        let mut other = tiny_instance();
        other.id = "b".into();
        other.grid.descriptors.iter_mut().for_each(|d| d.push(0.0));
        c.instances.push(other);
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("descriptor dimension"), "{err}");
    }

    #[test]
    fn schema_errors_name_the_field() {
        let text = collection_to_string(&tiny_collection()).unwrap();
        let broken = text.replace("\"stride\"", "\"strid\"");
        let err = collection_from_str(&broken).unwrap_err().to_string();
        assert!(err.contains("instances[0].grid"), "{err}");
    }

    #[test]
    fn empty_collection_round_trips() {
        let c = Collection { class_label: "none".into(), instances: vec![], symmetry_swap: vec![] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.vvn");
        save_collection(&c, &path).unwrap();
        assert_eq!(load_collection(&path).unwrap(), c);
    }

    #[test]
    fn reflected_camera_rejected_before_write() {
        let mut c = tiny_collection();
        let bad = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, -1.0));
        c.instances[0].camera = Some(Camera::new_unchecked(bad, 1.0, Vec2::zeros()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vvn");
        assert!(save_collection(&c, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn swap_must_be_involution() {
        let mut c = tiny_collection();
        c.symmetry_swap = vec![1, 2, 0, 3];
        assert!(matches!(c.validate(), Err(Error::Schema { .. })));
    }

    #[test]
    fn normalize_halves_coordinates() {
        // 300-px-tall mask rescaled to 150.
        let mut inst = tiny_instance();
        inst.mask = Mask::Rle(RleMask { pixel_size: 10.0, ..match &inst.mask {
            Mask::Rle(m) => m.clone(),
            _ => unreachable!(),
        } });
        inst.image_size = [400.0, 400.0];
        assert_eq!(inst.mask.bounding_box().unwrap().height(), 300.0);
        let out = normalize_instance(&inst, 150.0).unwrap();
        assert_eq!(out.grid.points[3], inst.grid.points[3] * 0.5);
        assert_eq!(out.camera.unwrap().scale(), 1.0);
        assert_eq!(out.camera.unwrap().translation(), &Vec2::new(0.5, 1.5));
        assert_eq!(out.mask.bounding_box().unwrap().height(), 150.0);
        assert!(out.keypoints.keypoints[3].position == Vec2::zeros());
    }

    #[test]
    fn normalize_at_target_is_identity_and_idempotent() {
        let inst = tiny_instance();
        let h = inst.mask.bounding_box().unwrap().height();
        assert_eq!(normalize_instance(&inst, h).unwrap(), inst);
        let once = normalize_instance(&inst, 150.0).unwrap();
        assert_eq!(normalize_instance(&once, 150.0).unwrap(), once);
    }

    #[test]
    fn normalize_maps_top_left_corner() {
        let mut inst = tiny_instance();
        let bb = inst.mask.bounding_box().unwrap();
        inst.keypoints.keypoints[0].position = bb.min;
        let out = normalize_instance(&inst, 150.0).unwrap();
        let factor = 150.0 / bb.height();
        let nbb = out.mask.bounding_box().unwrap();
        assert!((out.keypoints.keypoints[0].position - nbb.min).norm() < 1e-12);
        assert!((nbb.min - bb.min * factor).norm() < 1e-12);
    }

    #[test]
    fn normalize_rejects_empty_mask() {
        let mut inst = tiny_instance();
        inst.mask = square_mask(4, 4, 0, 0, 0, 0);
        assert!(normalize_instance(&inst, 150.0).is_err());
    }

    #[test]
    fn regular_grid_stays_inside_mask() {
        let mask = square_mask(64, 64, 4, 8, 60, 40);
        let pts = regular_grid(&mask, DEFAULT_STRIDE);
        assert_eq!(pts.len(), 7 * 4);
        assert!(pts.iter().all(|p| mask.contains(p)));
    }
}
