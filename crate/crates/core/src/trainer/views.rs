use crate::error::{Error, Result};
use crate::image::{Image, Patch, Rect};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitAxis {
    /// Left and right halves.
    Vertical,
    /// Top and bottom halves.
    Horizontal,
}

/// Two non-overlapping squares, cropped at the same place from every
/// version of a scene.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub axis: SplitAxis,
    pub rect1: Rect,
    pub rect2: Rect,
    pub view1: Vec<Patch>,
    pub view2: Vec<Patch>,
}

impl ViewPair {
    pub fn versions(&self) -> usize {
        self.view1.len()
    }
}

/// Largest square inside `(x0, y0, w, h)` at a uniformly random position.
fn square_in(x0: usize, y0: usize, w: usize, h: usize, rng: &mut SeededRng) -> Rect {
    let side = w.min(h);
    let dx = rng.below(w - side + 1);
    let dy = rng.below(h - side + 1);
    Rect::new(x0 + dx, y0 + dy, side)
}

/// Picks the split axis uniformly, then the largest square in each half at
/// a uniformly random valid placement.
pub fn view_rects(width: usize, height: usize, rng: &mut SeededRng) -> (SplitAxis, Rect, Rect) {
    if rng.coin() {
        let left = width / 2;
        let a = square_in(0, 0, left, height, rng);
        let b = square_in(left, 0, width - left, height, rng);
        (SplitAxis::Vertical, a, b)
    } else {
        let top = height / 2;
        let a = square_in(0, 0, width, top, rng);
        let b = square_in(0, top, width, height - top, rng);
        (SplitAxis::Horizontal, a, b)
    }
}

pub fn make_views(versions: &[Image], min_side: usize, rng: &mut SeededRng) -> Result<ViewPair> {
    let first = versions
        .first()
        .ok_or_else(|| Error::InvalidParameter("no versions to view".into()))?;
    if versions.iter().any(|v| v.width() != first.width() || v.height() != first.height()) {
        return Err(Error::DimensionMismatch("scene versions differ in size".into()));
    }
    let (w, h) = (first.width(), first.height());
    if w.min(h) < 2 * min_side.max(1) {
        return Err(Error::TooSmall(format!(
            "{w}x{h} cannot hold two {min_side}-pixel views"
        )));
    }
    let (axis, rect1, rect2) = view_rects(w, h, rng);
    let crop = |r: Rect| -> Result<Vec<Patch>> {
        versions
            .iter()
            .map(|v| {
                Ok(Patch {
                    rect: r,
                    pixels: v.crop(r)?,
                })
            })
            .collect()
    };
    Ok(ViewPair {
        axis,
        rect1,
        rect2,
        view1: crop(rect1)?,
        view2: crop(rect2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn landscape_vertical_split_is_forced() {
        let imgs = vec![Image::zeros(100, 50, 3); 3];
        let mut rng = SeededRng::new(0);
        let mut seen_vertical = false;
        for _ in 0..20 {
            let v = make_views(&imgs, 8, &mut rng).unwrap();
            if v.axis == SplitAxis::Vertical {
                seen_vertical = true;
                assert_eq!(v.rect1, Rect::new(0, 0, 50));
                assert_eq!(v.rect2, Rect::new(50, 0, 50));
            }
            assert!(!v.rect1.intersects(&v.rect2));
            assert_eq!(v.view1.len(), 3);
            assert!(v.view1.iter().all(|p| p.rect == v.rect1));
        }
        assert!(seen_vertical);
    }

    #[test]
    fn deterministic() {
        let imgs = vec![Image::zeros(90, 70, 3); 2];
        let a = make_views(&imgs, 8, &mut SeededRng::new(5)).unwrap();
        let b = make_views(&imgs, 8, &mut SeededRng::new(5)).unwrap();
        assert_eq!((a.rect1, a.rect2), (b.rect1, b.rect2));
    }

    #[test]
    fn too_small_rejected() {
        let imgs = vec![Image::zeros(20, 12, 3); 2];
        assert!(matches!(
            make_views(&imgs, 8, &mut SeededRng::new(0)),
            Err(Error::TooSmall(_))
        ));
    }

    #[test]
    fn offsets_are_uniform() {
        // 200x100: a horizontal split leaves a 200x50 half, so the square's
        // x offset ranges over 151 positions.
        let mut rng = SeededRng::new(1234);
        let bins = 10usize;
        let mut counts = vec![0.0; bins];
        let mut horizontal = 0usize;
        let draws = 1000;
        for _ in 0..draws {
            let (axis, r1, r2) = view_rects(200, 100, &mut rng);
            match axis {
                SplitAxis::Horizontal => {
                    horizontal += 1;
                    assert_eq!((r1.side, r1.y, r2.y), (50, 0, 50));
                    for r in [r1, r2] {
                        counts[(r.x * bins / 151).min(bins - 1)] += 1.0;
                    }
                }
                SplitAxis::Vertical => {
                    assert_eq!((r1, r2), (Rect::new(0, 0, 100), Rect::new(100, 0, 100)));
                }
            }
        }
        // Expected count per bin follows the number of positions it covers.
        let total: f64 = counts.iter().sum();
        let mut width = vec![0.0; bins];
        for x in 0..151 {
            width[(x * bins / 151).min(bins - 1)] += 1.0;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&width)
            .map(|(&o, &w)| {
                let e = total * w / 151.0;
                (o - e).powi(2) / e
            })
            .sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
        // Axis choice is a fair coin.
        let z = (horizontal as f64 - draws as f64 / 2.0) / (draws as f64 / 4.0).sqrt();
        assert!(z.abs() < 3.3);
    }
}
