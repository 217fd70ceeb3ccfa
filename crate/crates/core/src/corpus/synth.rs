//! Procedural stand-ins for well-lit photographs.
//!
//! A scene is a two-colour gradient, a band of oriented sinusoids with a
//! roughly 1/f amplitude falloff, and a dozen saturated shapes, some of
//! which carry fine stripes. That gives the generator sharp edges, flat
//! regions and strong colour in varying proportions.

use std::f64::consts::PI;

use crate::image::Image;
use crate::rng::SeededRng;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) < r * r,
        }
    }
}

struct Layer {
    shape: Shape,
    color: [f64; 3],
    alpha: f64,
    /// Stripe period in pixels and orientation, if textured.
    stripes: Option<(f64, f64)>,
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: [f64; 3],
}

pub fn synthetic_scene(width: usize, height: usize, rng: &mut SeededRng) -> Image {
    let (wf, hf) = (width as f64, height as f64);
    let c0 = hsv_to_rgb(rng.uniform(), rng.uniform_range(0.2, 0.7), rng.uniform_range(0.35, 0.8));
    let c1 = hsv_to_rgb(rng.uniform(), rng.uniform_range(0.2, 0.7), rng.uniform_range(0.35, 0.8));
    let angle = rng.uniform_range(0.0, 2.0 * PI);
    let (gx, gy) = (angle.cos(), angle.sin());

    let waves: Vec<Wave> = (0..16)
        .map(|_| {
            let f = (rng.uniform_range((1.0f64 / 64.0).ln(), (1.0f64 / 3.0).ln())).exp();
            let th = rng.uniform_range(0.0, PI);
            let base = 0.05 * (1.0 / 64.0 / f).powf(0.5);
            Wave {
                fx: 2.0 * PI * f * th.cos(),
                fy: 2.0 * PI * f * th.sin(),
                phase: rng.uniform_range(0.0, 2.0 * PI),
                amp: [
                    base * rng.uniform_range(0.5, 1.5),
                    base * rng.uniform_range(0.5, 1.5),
                    base * rng.uniform_range(0.5, 1.5),
                ],
            }
        })
        .collect();

    let layers: Vec<Layer> = (0..12)
        .map(|_| {
            let shape = if rng.coin() {
                let x0 = rng.uniform_range(-0.1, 0.9) * wf;
                let y0 = rng.uniform_range(-0.1, 0.9) * hf;
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.uniform_range(0.08, 0.45) * wf,
                    y1: y0 + rng.uniform_range(0.08, 0.45) * hf,
                }
            } else {
                Shape::Disc {
                    cx: rng.uniform() * wf,
                    cy: rng.uniform() * hf,
                    r: rng.uniform_range(0.05, 0.25) * wf.min(hf),
                }
            };
            let color = hsv_to_rgb(rng.uniform(), rng.uniform_range(0.5, 1.0), rng.uniform_range(0.35, 1.0));
            let stripes = if rng.uniform() < 0.4 {
                Some((rng.uniform_range(2.5, 8.0), rng.uniform_range(0.0, PI)))
            } else {
                None
            };
            Layer {
                shape,
                color,
                alpha: rng.uniform_range(0.7, 1.0),
                stripes,
            }
        })
        .collect();

    let mut img = Image::zeros(width, height, 3);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let t = (((xf / wf - 0.5) * gx + (yf / hf - 0.5) * gy) + 0.5).clamp(0.0, 1.0);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
            for w in &waves {
                let s = (w.fx * xf + w.fy * yf + w.phase).sin();
                for c in 0..3 {
                    px[c] += w.amp[c] * s;
                }
            }
            for l in &layers {
                if !l.shape.contains(xf, yf) {
                    continue;
                }
                let mut col = l.color;
                if let Some((period, th)) = l.stripes {
                    let u = xf * th.cos() + yf * th.sin();
                    let k = if (u / period).rem_euclid(1.0) < 0.5 { 1.0 } else { 0.55 };
                    col = [col[0] * k, col[1] * k, col[2] * k];
                }
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - l.alpha) + col[c] * l.alpha;
                }
            }
            for (c, v) in px.iter().enumerate() {
                img.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synthetic_scene(40, 30, &mut SeededRng::new(1));
        let b = synthetic_scene(40, 30, &mut SeededRng::new(1));
        let c = synthetic_scene(40, 30, &mut SeededRng::new(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }
}
