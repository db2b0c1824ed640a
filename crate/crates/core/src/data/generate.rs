//! Procedural base images and forgery edits. All geometry is integer; floats appear only
//! when colours are mixed, so the same seed renders the same bytes everywhere.

use crate::diffusion::{MaskState, TAMPERED, UNTAMPERED};
use crate::error::{invalid, Result};
use crate::image::{quantize, Image};
use crate::rng::{key_of, mix64, RngStream};

use super::{Difficulty, ForgeryKind};

const BASE_TAG: u64 = 0x6261_7365;
const DONOR_TAG: u64 = 0x646f_6e6f;
const EDIT_TAG: u64 = 0x6564_6974;
const MAX_TRIES: usize = 100;

/// Brightness offset that marks easy edits.
pub const EASY_OFFSET: f64 = 0.02;
/// Width in pixels of the blend band along ambiguous edits.
pub const FEATHER: usize = 2;
pub const MIN_AREA: f64 = 0.02;
pub const MAX_AREA: f64 = 0.4;

/// Base images are compressed into this range so the easy offset never clips.
const RENDER_LO: f64 = 0.04;
const RENDER_SPAN: f64 = 0.9;

fn hash01(parts: &[u64]) -> f64 {
    (key_of(parts) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise on a square lattice of `cell` pixels, in `[0, 1]`.
fn value_noise(key: u64, x: usize, y: usize, cell: usize) -> f64 {
    let (ix, iy) = ((x / cell) as u64, (y / cell) as u64);
    let fx = smooth((x % cell) as f64 / cell as f64);
    let fy = smooth((y % cell) as f64 / cell as f64);
    let v = |dx: u64, dy: u64| hash01(&[key, ix + dx, iy + dy]);
    let top = v(0, 0) * (1.0 - fx) + v(1, 0) * fx;
    let bottom = v(0, 1) * (1.0 - fx) + v(1, 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Centre and radius, in quarter pixels.
    Circle {
        cx: i64,
        cy: i64,
        r: i64,
    },
    Rect {
        x0: i64,
        y0: i64,
        x1: i64,
        y1: i64,
    },
    Triangle {
        p: [(i64, i64); 3],
    },
}

impl Shape {
    fn random(rng: &mut RngStream, h: usize, w: usize) -> Shape {
        let (h4, w4) = (4 * h as i64, 4 * w as i64);
        match rng.below(3) {
            0 => Shape::Circle {
                cx: rng.range_inclusive(0, w4),
                cy: rng.range_inclusive(0, h4),
                r: rng.range_inclusive(w4 / 16, w4 / 4),
            },
            1 => {
                let (x0, y0) = (
                    rng.range_inclusive(-w4 / 8, w4 * 3 / 4),
                    rng.range_inclusive(-h4 / 8, h4 * 3 / 4),
                );
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.range_inclusive(w4 / 8, w4 / 2),
                    y1: y0 + rng.range_inclusive(h4 / 8, h4 / 2),
                }
            }
            _ => Shape::Triangle {
                p: std::array::from_fn(|_| {
                    (rng.range_inclusive(0, w4), rng.range_inclusive(0, h4))
                }),
            },
        }
    }

    /// Membership of a sub-pixel point given in quarter-pixel units (offset by 1/8 pixel
    /// through doubled coordinates).
    fn contains(&self, qx: i64, qy: i64) -> bool {
        // Sample points sit at (2q + 1) / 8 pixels; compare in eighth-pixel units.
        let (px, py) = (2 * qx + 1, 2 * qy + 1);
        match *self {
            Shape::Circle { cx, cy, r } => {
                let (dx, dy) = (px - 2 * cx, py - 2 * cy);
                dx * dx + dy * dy <= 4 * r * r
            }
            Shape::Rect { x0, y0, x1, y1 } => {
                px >= 2 * x0 && px < 2 * x1 && py >= 2 * y0 && py < 2 * y1
            }
            Shape::Triangle { p } => {
                let e = |a: (i64, i64), b: (i64, i64)| {
                    (2 * b.0 - 2 * a.0) * (py - 2 * a.1) - (2 * b.1 - 2 * a.1) * (px - 2 * a.0)
                };
                let (d0, d1, d2) = (e(p[0], p[1]), e(p[1], p[2]), e(p[2], p[0]));
                (d0 >= 0 && d1 >= 0 && d2 >= 0) || (d0 <= 0 && d1 <= 0 && d2 <= 0)
            }
        }
    }

    /// Fraction of the 4x4 sub-samples of pixel `(x, y)` inside the shape.
    fn coverage(&self, x: usize, y: usize) -> f64 {
        let mut n = 0;
        for j in 0..4 {
            for i in 0..4 {
                if self.contains(4 * x as i64 + i, 4 * y as i64 + j) {
                    n += 1;
                }
            }
        }
        n as f64 / 16.0
    }
}

fn check_size(height: usize, width: usize) -> Result<()> {
    if height < 32 || width < 32 || !height.is_multiple_of(8) || !width.is_multiple_of(8) {
        return Err(invalid(format!(
            "image size {height}x{width} must be at least 32x32 and divisible by 8"
        )));
    }
    Ok(())
}

/// Gradient background, two octaves of value noise, per-pixel grain and 2-5
/// anti-aliased shapes. Values are 8-bit levels inside `[0.04, 0.94]`.
pub fn generate_base_image(seed: u64, height: usize, width: usize) -> Result<Image> {
    check_size(height, width)?;
    let mut rng = RngStream::keyed(&[BASE_TAG, seed]);
    let c0: [f64; 3] = std::array::from_fn(|_| rng.uniform());
    let c1: [f64; 3] = std::array::from_fn(|_| rng.uniform());
    let (gx, gy) = loop {
        let g = (rng.range_inclusive(-8, 8), rng.range_inclusive(-8, 8));
        if g != (0, 0) {
            break g;
        }
    };
    let corners = [
        (0, 0),
        (width as i64 - 1, 0),
        (0, height as i64 - 1),
        (width as i64 - 1, height as i64 - 1),
    ];
    let proj: Vec<i64> = corners.iter().map(|&(x, y)| x * gx + y * gy).collect();
    let (pmin, pmax) = (*proj.iter().min().unwrap(), *proj.iter().max().unwrap());
    let amp = 0.06 + 0.08 * rng.uniform();
    let grain = 0.01 + 0.02 * rng.uniform();
    let tint: [f64; 3] = std::array::from_fn(|_| 0.5 + rng.uniform());
    let noise_key = rng.next_u64();
    let shapes: Vec<(Shape, [f64; 3])> = (0..rng.range_inclusive(2, 5))
        .map(|_| {
            (
                Shape::random(&mut rng, height, width),
                std::array::from_fn(|_| rng.uniform()),
            )
        })
        .collect();

    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let t = ((x as i64 * gx + y as i64 * gy) - pmin) as f64 / (pmax - pmin) as f64;
            let mut px: [f64; 3] = std::array::from_fn(|c| c0[c] * (1.0 - t) + c1[c] * t);
            for (shape, color) in &shapes {
                let a = shape.coverage(x, y);
                if a > 0.0 {
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - a) + color[c] * a;
                    }
                }
            }
            let n =
                value_noise(noise_key, x, y, 8) + 0.5 * value_noise(noise_key ^ 1, x, y, 4) - 0.75;
            for (c, v) in px.iter_mut().enumerate() {
                let g = hash01(&[noise_key, 2, (y * width + x) as u64, c as u64]) - 0.5;
                let raw = *v + amp * tint[c] * n + grain * g;
                data.push(quantize(RENDER_LO + RENDER_SPAN * raw.clamp(0.0, 1.0)));
            }
        }
    }
    Image::new(height, width, data)
}

/// Axis-aligned box, optionally with an inscribed ellipse as the actual region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub ellipse: bool,
}

impl Region {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        if x < self.x || y < self.y || x >= self.x + self.w || y >= self.y + self.h {
            return false;
        }
        if !self.ellipse {
            return true;
        }
        let (w, h) = (self.w as i64, self.h as i64);
        let dx = 2 * (x - self.x) as i64 + 1 - w;
        let dy = 2 * (y - self.y) as i64 + 1 - h;
        dx * dx * h * h + dy * dy * w * w <= w * w * h * h
    }

    pub fn area(&self) -> usize {
        (self.y..self.y + self.h)
            .map(|y| {
                (self.x..self.x + self.w)
                    .filter(|&x| self.contains(x, y))
                    .count()
            })
            .sum()
    }

    /// Whether the bounding boxes overlap.
    pub fn overlaps(&self, other: &Region) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }

    fn at(self, x: usize, y: usize) -> Region {
        Region { x, y, ..self }
    }
}

fn random_region(rng: &mut RngStream, height: usize, width: usize) -> Result<Region> {
    let total = (height * width) as f64;
    for _ in 0..MAX_TRIES {
        let w = rng.range_inclusive(width as i64 / 6, width as i64 * 9 / 16) as usize;
        let h = rng.range_inclusive(height as i64 / 6, height as i64 * 9 / 16) as usize;
        let r = Region {
            x: rng.below((width - w + 1) as u64) as usize,
            y: rng.below((height - h + 1) as u64) as usize,
            w,
            h,
            ellipse: rng.below(2) == 1,
        };
        let frac = r.area() as f64 / total;
        if (MIN_AREA..=MAX_AREA).contains(&frac) {
            return Ok(r);
        }
    }
    Err(invalid(format!(
        "no forgery region found after {MAX_TRIES} tries"
    )))
}

/// Where the edited content of a forgery came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditPlan {
    pub target: Region,
    /// Source box for splice (in the donor) and copy-move (in the same image).
    pub source: Option<Region>,
}

/// Region content replaced according to `kind`, before any offset or feathering.
fn edited_content(
    image: &Image,
    kind: ForgeryKind,
    seed: u64,
    rng: &mut RngStream,
) -> Result<(EditPlan, Image)> {
    let (height, width) = (image.height(), image.width());
    let mut target = random_region(rng, height, width)?;
    let mut disjoint = Vec::new();
    if kind == ForgeryKind::CopyMove {
        for _ in 0..MAX_TRIES {
            disjoint = (0..=height - target.h)
                .flat_map(|y| (0..=width - target.w).map(move |x| (x, y)))
                .map(|(x, y)| target.at(x, y))
                .filter(|s| !s.overlaps(&target))
                .collect();
            if !disjoint.is_empty() {
                break;
            }
            target = random_region(rng, height, width)?;
        }
        if disjoint.is_empty() {
            return Err(invalid(format!(
                "no disjoint copy-move source after {MAX_TRIES} tries"
            )));
        }
    }
    let mut out = image.data().to_vec();
    let copy_from = |src_img: &Image, src: Region, out: &mut Vec<f64>| {
        for y in target.y..target.y + target.h {
            for x in target.x..target.x + target.w {
                if target.contains(x, y) {
                    let p = src_img.pixel(src.y + y - target.y, src.x + x - target.x);
                    out[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&p);
                }
            }
        }
    };
    let source = match kind {
        ForgeryKind::Splice => {
            let donor = generate_base_image(mix64(seed ^ DONOR_TAG), height, width)?;
            let src = target.at(
                rng.below((width - target.w + 1) as u64) as usize,
                rng.below((height - target.h + 1) as u64) as usize,
            );
            copy_from(&donor, src, &mut out);
            Some(src)
        }
        ForgeryKind::CopyMove => {
            let src = disjoint[rng.below(disjoint.len() as u64) as usize];
            copy_from(image, src, &mut out);
            Some(src)
        }
        ForgeryKind::Removal => {
            fill_from_surroundings(image, &target, &mut out);
            None
        }
    };
    Ok((EditPlan { target, source }, Image::new(height, width, out)?))
}

/// Replaces the region by the average of row-wise and column-wise linear interpolation
/// between the nearest pixels outside it.
fn fill_from_surroundings(image: &Image, region: &Region, out: &mut [f64]) {
    let (height, width) = (image.height(), image.width());
    let interp = |a: Option<(usize, [f64; 3])>,
                  b: Option<(usize, [f64; 3])>,
                  pos: usize|
     -> Option<[f64; 3]> {
        match (a, b) {
            (Some((ia, va)), Some((ib, vb))) => {
                let t = (pos - ia) as f64 / (ib - ia) as f64;
                Some(std::array::from_fn(|c| va[c] * (1.0 - t) + vb[c] * t))
            }
            (Some((_, v)), None) | (None, Some((_, v))) => Some(v),
            (None, None) => None,
        }
    };
    for y in region.y..region.y + region.h {
        for x in region.x..region.x + region.w {
            if !region.contains(x, y) {
                continue;
            }
            let left = (0..x)
                .rev()
                .find(|&i| !region.contains(i, y))
                .map(|i| (i, image.pixel(y, i)));
            let right = (x + 1..width)
                .find(|&i| !region.contains(i, y))
                .map(|i| (i, image.pixel(y, i)));
            let up = (0..y)
                .rev()
                .find(|&j| !region.contains(x, j))
                .map(|j| (j, image.pixel(j, x)));
            let down = (y + 1..height)
                .find(|&j| !region.contains(x, j))
                .map(|j| (j, image.pixel(j, x)));
            let hv = interp(left, right, x);
            let vv = interp(up, down, y);
            let v = match (hv, vv) {
                (Some(a), Some(b)) => std::array::from_fn(|c| 0.5 * (a[c] + b[c])),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => image.pixel(y, x),
            };
            out[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&v);
        }
    }
}

/// Chebyshev distance (capped at `FEATHER + 1`) from a region pixel to the nearest
/// in-image pixel outside the region.
fn inner_distance(region: &Region, x: usize, y: usize, height: usize, width: usize) -> usize {
    for d in 1..=FEATHER {
        let (x0, x1) = (x.saturating_sub(d), (x + d).min(width - 1));
        let (y0, y1) = (y.saturating_sub(d), (y + d).min(height - 1));
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                if !region.contains(xx, yy) {
                    return d;
                }
            }
        }
    }
    FEATHER + 1
}

/// Applies one forgery. The mask marks exactly the region pixels. Easy edits add
/// [`EASY_OFFSET`] and differ from the original at every marked pixel; ambiguous edits
/// have no offset and blend into the original across a [`FEATHER`]-pixel band.
pub fn apply_forgery(
    image: &Image,
    kind: ForgeryKind,
    difficulty: Difficulty,
    seed: u64,
) -> Result<(Image, MaskState, EditPlan)> {
    check_size(image.height(), image.width())?;
    let (height, width) = (image.height(), image.width());
    let mut rng = RngStream::keyed(&[EDIT_TAG, seed]);
    let (plan, edited) = edited_content(image, kind, seed, &mut rng)?;
    let region = plan.target;
    let mut data = image.data().to_vec();
    let mut labels = vec![UNTAMPERED; height * width];
    for y in region.y..region.y + region.h {
        for x in region.x..region.x + region.w {
            if !region.contains(x, y) {
                continue;
            }
            let i = y * width + x;
            labels[i] = TAMPERED;
            let (orig, new) = (image.pixel(y, x), edited.pixel(y, x));
            let px = &mut data[i * 3..i * 3 + 3];
            match difficulty {
                Difficulty::Easy => {
                    for c in 0..3 {
                        px[c] = quantize((new[c] + EASY_OFFSET).min(1.0));
                    }
                    if px.iter().zip(&orig).all(|(a, b)| a == b) {
                        px[0] = if px[0] < 1.0 {
                            px[0] + 1.0 / 255.0
                        } else {
                            px[0] - 1.0 / 255.0
                        };
                        px[0] = quantize(px[0]);
                    }
                }
                Difficulty::Ambiguous => {
                    let a =
                        inner_distance(&region, x, y, height, width) as f64 / (FEATHER + 1) as f64;
                    for c in 0..3 {
                        px[c] = quantize(a * new[c] + (1.0 - a) * orig[c]);
                    }
                }
            }
        }
    }
    Ok((
        Image::new(height, width, data)?,
        MaskState::new(height, width, labels, 0)?,
        plan,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_image_is_deterministic_and_in_range() {
        let a = generate_base_image(5, 64, 64).unwrap();
        let b = generate_base_image(5, 64, 64).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_base_image(6, 64, 64).unwrap());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.data().iter().all(|&v| quantize(v) == v));
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_base_image(0, 16, 64).is_err());
        assert!(generate_base_image(0, 60, 64).is_err());
    }

    #[test]
    fn ellipse_is_inside_box() {
        let r = Region {
            x: 3,
            y: 4,
            w: 10,
            h: 6,
            ellipse: true,
        };
        assert!(r.contains(8, 7));
        assert!(!r.contains(3, 4));
        assert!(!r.contains(13, 7));
        assert!(r.area() < 60 && r.area() > 40);
    }

    #[test]
    fn easy_edits_change_exactly_the_mask() {
        for seed in 0..30u64 {
            let img = generate_base_image(seed, 64, 64).unwrap();
            let kind = [
                ForgeryKind::Splice,
                ForgeryKind::CopyMove,
                ForgeryKind::Removal,
            ][seed as usize % 3];
            let (forged, mask, _) = apply_forgery(&img, kind, Difficulty::Easy, seed).unwrap();
            for (i, &l) in mask.labels().iter().enumerate() {
                let changed = forged.data()[i * 3..i * 3 + 3] != img.data()[i * 3..i * 3 + 3];
                assert_eq!(changed, l == TAMPERED, "seed {seed} pixel {i}");
            }
            let f = mask.tampered_fraction();
            assert!((MIN_AREA..=MAX_AREA).contains(&f), "fraction {f}");
        }
    }

    #[test]
    fn copy_move_source_is_disjoint() {
        for seed in 0..50u64 {
            let img = generate_base_image(seed, 64, 64).unwrap();
            let (_, _, plan) =
                apply_forgery(&img, ForgeryKind::CopyMove, Difficulty::Easy, seed).unwrap();
            let src = plan.source.unwrap();
            let t = plan.target;
            let overlap_x = src.x < t.x + t.w && t.x < src.x + src.w;
            let overlap_y = src.y < t.y + t.h && t.y < src.y + src.h;
            assert!(!(overlap_x && overlap_y), "seed {seed}: {src:?} vs {t:?}");
        }
    }

    #[test]
    fn ambiguous_edits_stay_inside_mask_and_feather() {
        let img = generate_base_image(9, 64, 64).unwrap();
        let (forged, mask, plan) =
            apply_forgery(&img, ForgeryKind::Splice, Difficulty::Ambiguous, 9).unwrap();
        for (i, &l) in mask.labels().iter().enumerate() {
            if l == UNTAMPERED {
                assert_eq!(
                    forged.data()[i * 3..i * 3 + 3],
                    img.data()[i * 3..i * 3 + 3]
                );
            }
        }
        let r = plan.target;
        let (y, x) = (
            r.y + r.h / 2,
            (r.x..r.x + r.w)
                .find(|&x| r.contains(x, r.y + r.h / 2))
                .unwrap(),
        );
        assert_eq!(inner_distance(&r, x, y, 64, 64), 1);
    }

    #[test]
    fn removal_fill_is_smooth() {
        let img = generate_base_image(3, 64, 64).unwrap();
        let mut rng = RngStream::new(1);
        let (plan, edited) = edited_content(&img, ForgeryKind::Removal, 3, &mut rng).unwrap();
        let r = plan.target;
        let (y, x) = (r.y + r.h / 2, r.x + r.w / 2);
        let d: f64 = (0..3)
            .map(|c| (edited.pixel(y, x)[c] - edited.pixel(y, x + 1)[c]).abs())
            .sum();
        assert!(d < 0.1);
    }
}
