//! Box representations, IoU and generalized IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator floor for zero-area unions and enclosures.
pub const AREA_FLOOR: f64 = 1e-9;

/// Normalized center/size box, the form predicted by the box head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCxCyWh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxXyXy {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxCxCyWh {
    /// Validated constructor: every component in `[0, 1]`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if !b.is_valid() {
            return Err(Error::Data(format!("box components must lie in [0,1]: {b:?}")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corners at center +/- half extent; negative extents clamp to zero.
    pub fn to_xyxy(&self) -> BoxXyXy {
        let (hw, hh) = (self.w.max(0.0) / 2.0, self.h.max(0.0) / 2.0);
        BoxXyXy {
            x0: self.cx - hw,
            y0: self.cy - hh,
            x1: self.cx + hw,
            y1: self.cy + hh,
        }
    }
}

impl BoxXyXy {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn to_cxcywh(&self) -> BoxCxCyWh {
        BoxCxCyWh {
            cx: (self.x0 + self.x1) / 2.0,
            cy: (self.y0 + self.y1) / 2.0,
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        }
    }
}

struct Overlap {
    inter: f64,
    union: f64,
    enclosing: f64,
}

fn overlap(a: &BoxXyXy, b: &BoxXyXy) -> Overlap {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let ew = a.x1.max(b.x1) - a.x0.min(b.x0);
    let eh = a.y1.max(b.y1) - a.y0.min(b.y0);
    Overlap {
        inter,
        union,
        enclosing: ew * eh,
    }
}

/// Intersection over union; 0 when both boxes are degenerate.
pub fn iou(a: &BoxXyXy, b: &BoxXyXy) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union.max(AREA_FLOOR)
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BoxXyXy, b: &BoxXyXy) -> f64 {
    let o = overlap(a, b);
    // nested boxes can round to a slightly negative empty area
    let empty = (o.enclosing - o.union).max(0.0);
    o.inter / o.union.max(AREA_FLOOR) - empty / o.enclosing.max(AREA_FLOOR)
}

pub fn giou_loss(pred: &BoxCxCyWh, gold: &BoxCxCyWh) -> f64 {
    1.0 - giou(&pred.to_xyxy(), &gold.to_xyxy())
}

/// `1 - giou` and its gradient with respect to the predicted `(cx, cy, w, h)`.
///
/// Kinks of min/max/clamp take subgradient 0.
pub fn giou_loss_with_grad(pred: &BoxCxCyWh, gold: &BoxCxCyWh) -> (f64, [f64; 4]) {
    let p = pred.to_xyxy();
    let g = gold.to_xyxy();
    let loss = 1.0 - giou(&p, &g);

    let step = |c: bool| if c { 1.0 } else { 0.0 };
    let (pw, ph) = (p.x1 - p.x0, p.y1 - p.y0);

    // intersection extents and their partials w.r.t. (x0, y0, x1, y1)
    let iw_raw = p.x1.min(g.x1) - p.x0.max(g.x0);
    let ih_raw = p.y1.min(g.y1) - p.y0.max(g.y0);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let d_iw = if iw_raw > 0.0 {
        [-step(p.x0 > g.x0), 0.0, step(p.x1 < g.x1), 0.0]
    } else {
        [0.0; 4]
    };
    let d_ih = if ih_raw > 0.0 {
        [0.0, -step(p.y0 > g.y0), 0.0, step(p.y1 < g.y1)]
    } else {
        [0.0; 4]
    };
    let inter = iw * ih;
    let d_inter: [f64; 4] = std::array::from_fn(|k| d_iw[k] * ih + iw * d_ih[k]);

    let d_area = [-ph, -pw, ph, pw];
    let union = p.area() + g.area() - inter;
    let d_union: [f64; 4] = std::array::from_fn(|k| d_area[k] - d_inter[k]);

    let ew = p.x1.max(g.x1) - p.x0.min(g.x0);
    let eh = p.y1.max(g.y1) - p.y0.min(g.y0);
    let d_ew = [-step(p.x0 < g.x0), 0.0, step(p.x1 > g.x1), 0.0];
    let d_eh = [0.0, -step(p.y0 < g.y0), 0.0, step(p.y1 > g.y1)];
    let encl = ew * eh;
    let d_encl: [f64; 4] = std::array::from_fn(|k| d_ew[k] * eh + ew * d_eh[k]);

    let u = union.max(AREA_FLOOR);
    let du = if union > AREA_FLOOR { d_union } else { [0.0; 4] };
    let e = encl.max(AREA_FLOOR);
    let de = if encl > AREA_FLOOR { d_encl } else { [0.0; 4] };

    // loss = 1 - inter/u + (encl - union)/e
    let d_xyxy: [f64; 4] = std::array::from_fn(|k| {
        let d_iou = (d_inter[k] * u - inter * du[k]) / (u * u);
        let d_pen = (d_encl[k] - d_union[k]) / e - (encl - union) * de[k] / (e * e);
        -d_iou + d_pen
    });
    // x0 = cx - w/2, x1 = cx + w/2 (same for y)
    let grad = [
        d_xyxy[0] + d_xyxy[2],
        d_xyxy[1] + d_xyxy[3],
        (d_xyxy[2] - d_xyxy[0]) / 2.0,
        (d_xyxy[3] - d_xyxy[1]) / 2.0,
    ];
    (loss, grad)
}

/// Sum of absolute coordinate differences in cxcywh space.
pub fn l1_box(pred: &BoxCxCyWh, gold: &BoxCxCyWh) -> f64 {
    pred.to_array()
        .iter()
        .zip(gold.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum()
}
