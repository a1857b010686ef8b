//! Box geometry: center-size boxes on the unit image, IoU/GIoU in plain and
//! differentiable form, and RoIAlign resampling of feature maps.
//!
//! All coordinates are normalized to `[0,1]` with x to the right and y down.
//! Plain-float routines serve matching costs and data generation; graph
//! routines serve the loss. The two are tested against each other and against
//! area-counting oracles.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{bilinear_stencil, Graph, Stencil4, Var};
use crate::tensor::Tensor;

/// Axis-aligned box in center-size form, normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn to_xyxy(self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn from_xyxy(c: [f64; 4]) -> Self {
        BBox {
            cx: 0.5 * (c[0] + c[2]),
            cy: 0.5 * (c[1] + c[3]),
            w: c[2] - c[0],
            h: c[3] - c[1],
        }
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    /// Corners clipped to the unit square. Errors if nothing remains.
    pub fn clipped_xyxy(self) -> Result<[f64; 4]> {
        let [x1, y1, x2, y2] = self.to_xyxy();
        let c = [x1.max(0.0), y1.max(0.0), x2.min(1.0), y2.min(1.0)];
        if !(c[2] > c[0]) || !(c[3] > c[1]) {
            return Err(Error::value(
                "bbox",
                format!("box {self:?} is empty after clipping to the unit square"),
            ));
        }
        Ok(c)
    }

    /// L1 distance in center-size coordinates.
    pub fn l1(self, other: BBox) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }

    /// Whether `(x, y)` lies inside the clipped box, within `eps` slack.
    pub fn contains(self, x: f64, y: f64, eps: f64) -> bool {
        match self.clipped_xyxy() {
            Ok([x1, y1, x2, y2]) => {
                x >= x1 - eps && x <= x2 + eps && y >= y1 - eps && y <= y2 + eps
            }
            Err(_) => false,
        }
    }
}

/// Intersection-over-union of two corner-form boxes. Caller guarantees
/// positive sizes.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

/// Generalized IoU: IoU minus the hull waste, in `(-1, 1]`.
pub fn giou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (hull - union) / hull
}

/// Differentiable GIoU between matched box pairs.
///
/// `pred` is `K x 4` center-size (graph values must have positive sizes),
/// `gt` is a constant `K x 4` tensor; the result is length-`K` GIoU values.
pub fn giou_pairs(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    let sp = g.shape(pred).to_vec();
    if sp.len() != 2 || sp[1] != 4 || gt.shape() != sp.as_slice() {
        return Err(Error::shape(
            "giou",
            format!(
                "expected matching K x 4 boxes, got {} and {}",
                crate::error::shape_str(&sp),
                crate::error::shape_str(gt.shape())
            ),
        ));
    }
    let k = sp[0];
    for (name, data) in [("predicted", g.value(pred).data()), ("ground-truth", gt.data())] {
        for row in 0..k {
            let (w, h) = (data[row * 4 + 2], data[row * 4 + 3]);
            if !(w > 0.0) || !(h > 0.0) || !w.is_finite() || !h.is_finite() {
                return Err(Error::value(
                    "giou",
                    format!("{name} box {row} has non-positive size {w}x{h}"),
                ));
            }
        }
    }

    let col = |g: &mut Graph, v: Var, c: usize| g.slice(v, 1, c, 1);
    let corners = |g: &mut Graph, v: Var| -> Result<[Var; 6]> {
        let cx = col(g, v, 0)?;
        let cy = col(g, v, 1)?;
        let w = col(g, v, 2)?;
        let h = col(g, v, 3)?;
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        let x1 = g.sub(cx, hw)?;
        let x2 = g.add(cx, hw)?;
        let y1 = g.sub(cy, hh)?;
        let y2 = g.add(cy, hh)?;
        Ok([x1, y1, x2, y2, w, h])
    };
    let gt_var = g.constant(gt.clone());
    let [px1, py1, px2, py2, pw, ph] = corners(g, pred)?;
    let [gx1, gy1, gx2, gy2, gw, gh] = corners(g, gt_var)?;

    let ix1 = g.max_elem(px1, gx1)?;
    let iy1 = g.max_elem(py1, gy1)?;
    let ix2 = g.min_elem(px2, gx2)?;
    let iy2 = g.min_elem(py2, gy2)?;
    let iwd = g.sub(ix2, ix1)?;
    let ihd = g.sub(iy2, iy1)?;
    let iw = g.relu(iwd);
    let ih = g.relu(ihd);
    let inter = g.mul(iw, ih)?;

    let area_p = g.mul(pw, ph)?;
    let area_g = g.mul(gw, gh)?;
    let areas = g.add(area_p, area_g)?;
    let union = g.sub(areas, inter)?;
    let iou = g.div(inter, union)?;

    let hx1 = g.min_elem(px1, gx1)?;
    let hy1 = g.min_elem(py1, gy1)?;
    let hx2 = g.max_elem(px2, gx2)?;
    let hy2 = g.max_elem(py2, gy2)?;
    let hw = g.sub(hx2, hx1)?;
    let hh = g.sub(hy2, hy1)?;
    let hull = g.mul(hw, hh)?;
    let waste_num = g.sub(hull, union)?;
    let waste = g.div(waste_num, hull)?;
    let giou = g.sub(iou, waste)?;
    g.reshape(giou, &[k])
}

/// Normalized image coordinates of the `grid x grid` RoI cell centers for one
/// box, row-major by (row, col). The points of a valid box always lie inside
/// its clipped extent.
pub fn roi_sample_points(b: BBox, grid: usize) -> Result<Vec<[f64; 2]>> {
    if grid == 0 {
        return Err(Error::value("roi_align", "grid size must be positive"));
    }
    let [x1, y1, x2, y2] = b.clipped_xyxy()?;
    let mut pts = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        let v = (i as f64 + 0.5) / grid as f64;
        let y = y1 + v * (y2 - y1);
        for j in 0..grid {
            let u = (j as f64 + 0.5) / grid as f64;
            let x = x1 + u * (x2 - x1);
            pts.push([x, y]);
        }
    }
    Ok(pts)
}

/// RoIAlign: bilinearly resample an `H x W x C` feature map inside each box
/// onto a `grid x grid` lattice of cell centers, giving `N x grid x grid x C`.
/// Boxes are clipped to the unit square first; sampling clamps at edge pixel
/// centers. Differentiable wrt the feature map; box geometry is constant.
pub fn roi_align(g: &mut Graph, fmap: Var, boxes: &[BBox], grid: usize) -> Result<Var> {
    let sf = g.shape(fmap).to_vec();
    if sf.len() != 3 {
        return Err(Error::shape(
            "roi_align",
            format!("feature map must be H x W x C, got {}", crate::error::shape_str(&sf)),
        ));
    }
    if boxes.is_empty() {
        return Err(Error::value("roi_align", "no boxes to sample"));
    }
    let (h, w, c) = (sf[0], sf[1], sf[2]);
    let mut stencils = Vec::with_capacity(boxes.len() * grid * grid);
    for (bi, b) in boxes.iter().enumerate() {
        let pts = roi_sample_points(*b, grid)
            .map_err(|e| Error::value("roi_align", format!("box {bi}: {e}")))?;
        for [x, y] in pts {
            stencils.push(pixel_center(x, y, h, w));
        }
    }
    g.stencil_gather(fmap, stencils, &[boxes.len(), grid, grid, c])
}

/// Pixel-center stencil identical to the `PixelCenter` mode of point
/// sampling, so RoIAlign and point sampling agree bitwise on shared points.
fn pixel_center(x: f64, y: f64, h: usize, w: usize) -> Stencil4 {
    bilinear_stencil(x * w as f64 - 0.5, y * h as f64 - 0.5, h, w, 0.0, 0.0).0
}

/// Plain bilinear read of an `H x W x C` tensor at normalized `(x, y)` under
/// the pixel-center convention, matching the graph sampler bitwise.
pub fn bilinear_point_sample(map: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(Error::shape(
            "point_sample",
            format!("map must be H x W x C, got {}", crate::error::shape_str(s)),
        ));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let st = pixel_center(x, y, h, w);
    let d = map.data();
    let mut out = alloc::vec![0.0; c];
    for j in 0..4 {
        let base = st.idx[j] * c;
        for (k, o) in out.iter_mut().enumerate() {
            *o += st.w[j] * d[base + k];
        }
    }
    Ok(out)
}
