//! Procedural scenes: one colored shape moving along a periodic path while
//! its color changes at random event times.

use serde::{Deserialize, Serialize};

pub const SHAPES: [&str; 2] = ["circle", "square"];
pub const MOTIONS: [&str; 5] = ["slide", "bob", "drift", "orbit", "zigzag"];

/// Palette names paired with 8-bit RGB values.
pub const PALETTE: [(&str, [u8; 3]); 10] = [
    ("red", [230, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 90, 240]),
    ("yellow", [240, 225, 40]),
    ("cyan", [40, 215, 225]),
    ("magenta", [225, 50, 215]),
    ("orange", [250, 140, 20]),
    ("white", [245, 245, 245]),
    ("purple", [130, 40, 190]),
    ("brown", [130, 75, 30]),
];

pub const BACKGROUND: [u8; 3] = [24, 24, 28];

pub fn num_categories() -> usize {
    SHAPES.len() * MOTIONS.len()
}

pub fn category_name(category: usize) -> String {
    format!("{}-{}", SHAPES[category / MOTIONS.len()], MOTIONS[category % MOTIONS.len()])
}

/// Everything needed to render any frame of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shape: usize,
    pub motion: usize,
    /// Shape extent as a fraction of the frame side.
    pub size: f64,
    /// Path half-width as a fraction of the frame side.
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
    /// +1 or −1: orientation of orbits and diagonals.
    pub handedness: f64,
    /// Static offset of the path's secondary axis.
    pub offset: f64,
    /// Strength of the background tint toward the current color.
    pub tint: f64,
    /// `(time, palette index)`, sorted by time; the first entry is at 0.
    pub color_events: Vec<(f64, usize)>,
}

fn triangle(u: f64) -> f64 {
    let f = u - u.floor();
    if f < 0.5 {
        4.0 * f - 1.0
    } else {
        3.0 - 4.0 * f
    }
}

impl Scene {
    pub fn category(&self) -> usize {
        self.shape * MOTIONS.len() + self.motion
    }

    /// Shape center in normalized frame coordinates `(x, y)`.
    pub fn position(&self, t: f64) -> (f64, f64) {
        let u = t / self.period + self.phase;
        let a = self.amplitude;
        let (dx, dy) = match MOTIONS[self.motion] {
            "slide" => (a * triangle(u), self.offset),
            "bob" => (self.offset, a * triangle(u)),
            "drift" => {
                let d = a * triangle(u);
                (d, self.handedness * d)
            }
            "orbit" => {
                let th = std::f64::consts::TAU * u;
                (a * th.cos(), self.handedness * a * th.sin())
            }
            _ => (a * triangle(u), a * triangle(2.0 * u + 0.25)),
        };
        (0.5 + dx, 0.5 + dy)
    }

    /// Palette index in effect at time `t`.
    pub fn color_at(&self, t: f64) -> usize {
        let i = self.color_events.partition_point(|&(te, _)| te <= t);
        self.color_events[i.saturating_sub(1)].1
    }

    /// Rasterizes the frame at time `t` as row-major `h×w×3` bytes.
    pub fn render(&self, t: f64, h: usize, w: usize) -> Vec<u8> {
        let color = PALETTE[self.color_at(t)].1;
        let bg: [u8; 3] = std::array::from_fn(|c| {
            let b = f64::from(BACKGROUND[c]);
            (b + self.tint * (f64::from(color[c]) - b)).round() as u8
        });
        let (cx, cy) = self.position(t);
        let half = self.size / 2.0;
        let square = SHAPES[self.shape] == "square";
        let mut out = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            let y = (r as f64 + 0.5) / h as f64;
            for c in 0..w {
                let x = (c as f64 + 0.5) / w as f64;
                let (dx, dy) = (x - cx, y - cy);
                let inside = if square {
                    dx.abs() <= half && dy.abs() <= half
                } else {
                    dx * dx + dy * dy <= half * half
                };
                out.extend_from_slice(if inside { &color } else { &bg });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(motion: usize) -> Scene {
        Scene {
            shape: 0,
            motion,
            size: 0.4,
            amplitude: 0.25,
            period: 8.0,
            phase: 0.1,
            handedness: 1.0,
            offset: 0.05,
            tint: 0.0,
            color_events: vec![(0.0, 0), (2.5, 3), (5.0, 7)],
        }
    }

    #[test]
    fn color_changes_at_events() {
        let s = scene(0);
        assert_eq!(s.color_at(0.0), 0);
        assert_eq!(s.color_at(2.49), 0);
        assert_eq!(s.color_at(2.5), 3);
        assert_eq!(s.color_at(100.0), 7);
    }

    #[test]
    fn shape_stays_inside_frame() {
        for m in 0..MOTIONS.len() {
            let s = scene(m);
            for i in 0..200 {
                let (x, y) = s.position(i as f64 * 0.1);
                assert!(x - 0.2 >= -1e-9 && x + 0.2 <= 1.0 + 1e-9, "{m} x={x}");
                assert!(y - 0.2 >= -1e-9 && y + 0.2 <= 1.0 + 1e-9, "{m} y={y}");
            }
        }
    }

    #[test]
    fn render_paints_shape_color_at_center() {
        let s = scene(1);
        let f = s.render(3.0, 32, 32);
        assert_eq!(f.len(), 32 * 32 * 3);
        let (cx, cy) = s.position(3.0);
        let (r, c) = ((cy * 32.0) as usize, (cx * 32.0) as usize);
        assert_eq!(&f[(r * 32 + c) * 3..(r * 32 + c) * 3 + 3], &PALETTE[3].1);
        assert_eq!(&f[..3], &BACKGROUND);
    }
}
