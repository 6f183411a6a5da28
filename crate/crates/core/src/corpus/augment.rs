use rand::Rng;

use super::ClipFrames;

/// Crops the same random `1/scale` window from every frame of the clip and
/// resizes it back to the clip resolution with bilinear interpolation.
pub fn random_crop_resize(clip: &ClipFrames, scale: f64, rng: &mut impl Rng) -> ClipFrames {
    if scale <= 1.0 {
        return clip.clone();
    }
    let (h, w) = (clip.height, clip.width);
    let ch = h as f64 / scale;
    let cw = w as f64 / scale;
    let y0 = rng.gen_range(0.0..=(h as f64 - ch));
    let x0 = rng.gen_range(0.0..=(w as f64 - cw));
    let mut pixels = Vec::with_capacity(clip.pixels.len());
    for j in 0..clip.len() {
        let f = clip.frame(j);
        for r in 0..h {
            let sy = (y0 + (r as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (r0, fy) = (sy.floor() as usize, sy - sy.floor());
            let r1 = (r0 + 1).min(h - 1);
            for c in 0..w {
                let sx = (x0 + (c as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (c0, fx) = (sx.floor() as usize, sx - sx.floor());
                let c1 = (c0 + 1).min(w - 1);
                for k in 0..3 {
                    let p = |rr: usize, cc: usize| f64::from(f[(rr * w + cc) * 3 + k]);
                    let top = p(r0, c0) * (1.0 - fx) + p(r0, c1) * fx;
                    let bot = p(r1, c0) * (1.0 - fx) + p(r1, c1) * fx;
                    pixels.push((top * (1.0 - fy) + bot * fy) as f32);
                }
            }
        }
    }
    ClipFrames {
        pixels,
        ..clip.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derived_rng;

    #[test]
    fn constant_frames_stay_constant() {
        let clip = ClipFrames {
            height: 8,
            width: 8,
            pixels: vec![0.25; 2 * 8 * 8 * 3],
            times: vec![0.0, 1.0],
        };
        let out = random_crop_resize(&clip, 1.15, &mut derived_rng(0, &[]));
        assert_eq!(out.pixels.len(), clip.pixels.len());
        assert!(out.pixels.iter().all(|&p| (p - 0.25).abs() < 1e-6));
    }

    #[test]
    fn unit_scale_is_identity() {
        let clip = ClipFrames {
            height: 4,
            width: 4,
            pixels: (0..48).map(|i| i as f32).collect(),
            times: vec![0.0],
        };
        assert_eq!(random_crop_resize(&clip, 1.0, &mut derived_rng(0, &[])), clip);
    }
}
