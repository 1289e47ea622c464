//! Dense-area supervision: slide a window over a density map, take the
//! most crowded window, compare it with the warning criterion and report
//! where it lies.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateBox {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub count: f64,
}

impl CandidateBox {
    pub fn center(&self) -> (f64, f64) {
        (
            self.x0 as f64 + self.width as f64 / 2.0,
            self.y0 as f64 + self.height as f64 / 2.0,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64
            && x < (self.x0 + self.width) as f64
            && y >= self.y0 as f64
            && y < (self.y0 + self.height) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Normal,
    Warning,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "center")]
    Center,
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("serializes");
        write!(f, "{}", s.as_str().expect("string variant"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlertMessage {
    pub image_id: String,
    pub p_max: f64,
    pub p_d: f64,
    pub intensity: Intensity,
    pub direction: Direction,
    #[serde(rename = "box")]
    pub bbox: CandidateBox,
}

/// Summed-area table with a zero first row and column.
struct IntegralImage {
    w1: usize,
    table: Vec<f64>,
}

impl IntegralImage {
    fn new(map: &DensityMap) -> Self {
        let (h, w) = (map.height(), map.width());
        let w1 = w + 1;
        let mut table = vec![0.0; (h + 1) * w1];
        let data = map.values.data();
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += data[y * w + x];
                table[(y + 1) * w1 + x + 1] = table[y * w1 + x + 1] + row;
            }
        }
        Self { w1, table }
    }

    fn sum(&self, x0: usize, y0: usize, w: usize, h: usize) -> f64 {
        let t = |y: usize, x: usize| self.table[y * self.w1 + x];
        t(y0 + h, x0 + w) - t(y0, x0 + w) - t(y0 + h, x0) + t(y0, x0)
    }
}

/// Every grid-aligned `(w, h)` window at the given stride, in row-major
/// order of its top-left corner.
pub fn enumerate_boxes(map: &DensityMap, box_size: (usize, usize), stride: usize) -> Result<Vec<CandidateBox>> {
    let (bw, bh) = box_size;
    let (h, w) = (map.height(), map.width());
    if stride == 0 {
        return Err(Error::invalid("enumerate_boxes", "stride must be at least 1"));
    }
    if bw == 0 || bh == 0 || bw > w || bh > h {
        return Err(Error::invalid(
            "enumerate_boxes",
            format!("box {bw}x{bh} does not fit in a {w}x{h} map"),
        ));
    }
    let integral = IntegralImage::new(map);
    let mut boxes = Vec::new();
    for y0 in (0..=h - bh).step_by(stride) {
        for x0 in (0..=w - bw).step_by(stride) {
            boxes.push(CandidateBox {
                x0,
                y0,
                width: bw,
                height: bh,
                count: integral.sum(x0, y0, bw, bh).max(0.0),
            });
        }
    }
    Ok(boxes)
}

/// Counts within this relative distance of the maximum are ties.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// The box with the largest count; ties go to the smallest `(y0, x0)`.
pub fn find_pmax(boxes: &[CandidateBox]) -> Result<CandidateBox> {
    let max = boxes
        .iter()
        .map(|b| b.count)
        .fold(None, |m: Option<f64>, c| Some(m.map_or(c, |m| m.max(c))))
        .ok_or_else(|| Error::invalid("find_pmax", "no candidate boxes"))?;
    let floor = max - TIE_TOLERANCE * max.abs();
    Ok(*boxes
        .iter()
        .filter(|b| b.count >= floor)
        .min_by_key(|b| (b.y0, b.x0))
        .expect("the maximum itself qualifies"))
}

/// Half-width of the central dead zone, as a fraction of each dimension.
pub const DEAD_ZONE: f64 = 0.05;

/// Compass direction of `(x, y)` from the center of an `h x w` image.
/// Angles are taken on coordinates normalized by the image size, with
/// north pointing to row 0.
pub fn direction_of(x: f64, y: f64, (h, w): (usize, usize)) -> Direction {
    let dx = (x - w as f64 / 2.0) / w as f64;
    let dy = (h as f64 / 2.0 - y) / h as f64;
    if dx.abs() <= DEAD_ZONE && dy.abs() <= DEAD_ZONE {
        return Direction::Center;
    }
    let angle = dy.atan2(dx).to_degrees().rem_euclid(360.0);
    const SECTORS: [Direction; 8] = [
        Direction::E,
        Direction::NE,
        Direction::N,
        Direction::NW,
        Direction::W,
        Direction::SW,
        Direction::S,
        Direction::SE,
    ];
    SECTORS[((angle / 45.0).round() as usize) % 8]
}

pub fn decide_alert(bbox: CandidateBox, p_d: f64, image_size: (usize, usize), image_id: &str) -> Result<AlertMessage> {
    if !(p_d >= 0.0) {
        return Err(Error::invalid("decide_alert", format!("p_d must be non-negative, got {p_d}")));
    }
    let (cx, cy) = bbox.center();
    Ok(AlertMessage {
        image_id: image_id.to_string(),
        p_max: bbox.count,
        p_d,
        intensity: if bbox.count > p_d {
            Intensity::Warning
        } else {
            Intensity::Normal
        },
        direction: direction_of(cx, cy, image_size),
        bbox,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisorParams {
    pub p_d: f64,
    /// `(w, h)`; defaults to a quarter of each image dimension.
    pub box_size: Option<(usize, usize)>,
    /// Defaults to an eighth of the smaller image dimension.
    pub stride: Option<usize>,
    pub image_id: String,
}

impl SupervisorParams {
    pub fn new(p_d: f64) -> Self {
        Self {
            p_d,
            box_size: None,
            stride: None,
            image_id: String::new(),
        }
    }

    pub fn resolved(&self, (h, w): (usize, usize)) -> ((usize, usize), usize) {
        let size = self.box_size.unwrap_or(((w / 4).max(1), (h / 4).max(1)));
        let stride = self.stride.unwrap_or((h.min(w) / 8).max(1));
        (size, stride)
    }
}

pub fn supervise(map: &DensityMap, params: &SupervisorParams) -> Result<AlertMessage> {
    let geometry = (map.height(), map.width());
    let (size, stride) = params.resolved(geometry);
    let boxes = enumerate_boxes(map, size, stride)?;
    let best = find_pmax(&boxes)?;
    decide_alert(best, params.p_d, geometry, &params.image_id)
}
