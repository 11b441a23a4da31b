//! Heat-map rendering: a blue–white–red diverging colormap over
//! normalized saliency, upsampled to image resolution and alpha-blended
//! onto the base image, with a vertical color bar appended.

use crate::error::{Error, Result};
use crate::image_io::RawImage;
use crate::rollout::SaliencyMap;

/// Map a normalized value in [-1, 1] to RGB: -1 pure blue, 0 white,
/// +1 pure red. Values outside the range are clamped.
pub fn diverging_color(v: f64) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    // round-half-up on the faded channels
    let fade = |x: f64| ((1.0 - x) * 255.0 + 0.5).floor() as u8;
    if v >= 0.0 {
        [255, fade(v), fade(v)]
    } else {
        [fade(-v), fade(-v), 255]
    }
}

const BAR_WIDTH: usize = 16;
const BAR_GAP: usize = 4;

/// Nearest-neighbor upsample of the per-patch heat colors to pixels.
fn heat_pixel(s: &SaliencyMap, y: usize, x: usize, h: usize, w: usize) -> [u8; 3] {
    if s.degenerate {
        return [255, 255, 255];
    }
    let (gr, gc) = s.grid;
    let row = (y * gr / h).min(gr - 1);
    let col = (x * gc / w).min(gc - 1);
    diverging_color(s.normalized[row * gc + col])
}

/// Blend the heat map over a base image: out = alpha*base +
/// (1-alpha)*heat per channel, then append the color bar on the right.
/// A degenerate map renders uniform white.
pub fn render_overlay(s: &SaliencyMap, base: &RawImage, alpha: f64) -> Result<RawImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside [0,1]"
        )));
    }
    let (gr, gc) = s.grid;
    if s.normalized.len() != gr * gc {
        return Err(Error::SaliencyLengthMismatch {
            got: s.normalized.len(),
            want: gr * gc,
        });
    }
    let (h, w) = (base.height, base.width);
    let out_w = w + BAR_GAP + BAR_WIDTH;
    let mut out = RawImage {
        width: out_w,
        height: h,
        pixels: vec![255u8; out_w * h * 3],
    };
    for y in 0..h {
        for x in 0..w {
            let heat = heat_pixel(s, y, x, h, w);
            for (c, &hv) in heat.iter().enumerate() {
                let b = base.pixels[(y * w + x) * 3 + c] as f64;
                let v = alpha * b + (1.0 - alpha) * hv as f64;
                out.pixels[(y * out_w + x) * 3 + c] = (v + 0.5).floor().min(255.0) as u8;
            }
        }
        // color bar: +1 at the top row, -1 at the bottom
        let v = if h > 1 {
            1.0 - 2.0 * y as f64 / (h - 1) as f64
        } else {
            0.0
        };
        let bar = diverging_color(v);
        for x in w + BAR_GAP..out_w {
            out.pixels[(y * out_w + x) * 3..][..3].copy_from_slice(&bar);
        }
    }
    Ok(out)
}

/// Render the heat map alone (no base image), one block of `scale`
/// pixels per patch, no color bar.
pub fn render_heat(s: &SaliencyMap, scale: usize) -> Result<RawImage> {
    let (gr, gc) = s.grid;
    if s.normalized.len() != gr * gc {
        return Err(Error::SaliencyLengthMismatch {
            got: s.normalized.len(),
            want: gr * gc,
        });
    }
    if scale == 0 {
        return Err(Error::InvalidArgument("scale must be >= 1".into()));
    }
    let (h, w) = (gr * scale, gc * scale);
    let mut out = RawImage {
        width: w,
        height: h,
        pixels: vec![0u8; w * h * 3],
    };
    for y in 0..h {
        for x in 0..w {
            let color = heat_pixel(s, y, x, h, w);
            out.pixels[(y * w + x) * 3..][..3].copy_from_slice(&color);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(grid: (usize, usize), normalized: Vec<f64>) -> SaliencyMap {
        SaliencyMap {
            grid,
            scores: normalized.clone(),
            normalized,
            degenerate: false,
            scheme: None,
            loss: None,
        }
    }

    #[test]
    fn endpoint_colors() {
        assert_eq!(diverging_color(1.0), [255, 0, 0]);
        assert_eq!(diverging_color(-1.0), [0, 0, 255]);
        assert_eq!(diverging_color(0.0), [255, 255, 255]);
    }

    #[test]
    fn half_values_round_half_up() {
        // 0.5 -> faded channel (1-0.5)*255 = 127.5 -> 128
        assert_eq!(diverging_color(0.5), [255, 128, 128]);
        assert_eq!(diverging_color(-0.5), [128, 128, 255]);
    }

    #[test]
    fn out_of_range_clamps() {
        assert_eq!(diverging_color(3.0), [255, 0, 0]);
        assert_eq!(diverging_color(-3.0), [0, 0, 255]);
    }

    #[test]
    fn degenerate_renders_white() {
        let mut s = map((2, 2), vec![0.0; 4]);
        s.degenerate = true;
        let img = render_heat(&s, 2).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 255));
    }

    #[test]
    fn heat_blocks_are_nearest_neighbor() {
        let s = map((1, 2), vec![1.0, -1.0]);
        let img = render_heat(&s, 2).unwrap();
        // left 2x2 block red, right 2x2 block blue
        assert_eq!(&img.pixels[0..3], &[255, 0, 0]);
        assert_eq!(&img.pixels[6..9], &[0, 0, 255]);
    }

    #[test]
    fn overlay_alpha_zero_is_pure_heat() {
        let s = map((1, 1), vec![1.0]);
        let base = RawImage {
            width: 2,
            height: 2,
            pixels: vec![0u8; 12],
        };
        let out = render_overlay(&s, &base, 0.0).unwrap();
        assert_eq!(&out.pixels[0..3], &[255, 0, 0]);
    }

    #[test]
    fn overlay_alpha_one_keeps_base() {
        let s = map((1, 1), vec![1.0]);
        let base = RawImage {
            width: 2,
            height: 2,
            pixels: vec![40u8; 12],
        };
        let out = render_overlay(&s, &base, 1.0).unwrap();
        assert_eq!(&out.pixels[0..3], &[40, 40, 40]);
    }

    #[test]
    fn overlay_appends_color_bar() {
        let s = map((1, 1), vec![0.0]);
        let base = RawImage {
            width: 4,
            height: 4,
            pixels: vec![0u8; 48],
        };
        let out = render_overlay(&s, &base, 0.5).unwrap();
        assert_eq!(out.width, 4 + BAR_GAP + BAR_WIDTH);
        // top-right bar pixel is +1 red, bottom-right is -1 blue
        let top = (4 + BAR_GAP) * 3;
        assert_eq!(&out.pixels[top..top + 3], &[255, 0, 0]);
        let bottom = ((3 * out.width + 4 + BAR_GAP) * 3) as usize;
        assert_eq!(&out.pixels[bottom..bottom + 3], &[0, 0, 255]);
    }

    #[test]
    fn bad_alpha_rejected() {
        let s = map((1, 1), vec![0.0]);
        let base = RawImage {
            width: 1,
            height: 1,
            pixels: vec![0u8; 3],
        };
        assert!(render_overlay(&s, &base, 1.5).is_err());
    }
}
