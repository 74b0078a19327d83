use image::{Rgb, RgbImage};

/// One polyline of a plot.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
}

const MARGIN: u32 = 24;

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round();
        let y = (a.1 + t * (b.1 - a.1)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Renders series as polylines on white with black axes. `x_range` and
/// `y_range` default to the data extent.
pub fn plot_lines(
    series: &[Series],
    width: u32,
    height: u32,
    x_range: Option<(f64, f64)>,
    y_range: Option<(f64, f64)>,
) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let all = || series.iter().flat_map(|s| s.points.iter());
    let extent = |f: fn(&(f64, f64)) -> f64| {
        let lo = all().map(f).fold(f64::INFINITY, f64::min);
        let hi = all().map(f).fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else if lo.is_finite() {
            (lo - 0.5, lo + 0.5)
        } else {
            (0.0, 1.0)
        }
    };
    let (x0, x1) = x_range.unwrap_or_else(|| extent(|p| p.0));
    let (y0, y1) = y_range.unwrap_or_else(|| extent(|p| p.1));
    let (pw, ph) = (width.saturating_sub(2 * MARGIN) as f64, height.saturating_sub(2 * MARGIN) as f64);
    let to_px = |(x, y): (f64, f64)| {
        (
            MARGIN as f64 + (x - x0) / (x1 - x0) * pw,
            height as f64 - MARGIN as f64 - (y - y0) / (y1 - y0) * ph,
        )
    };
    let black = Rgb([0, 0, 0]);
    let origin = (MARGIN as f64, height as f64 - MARGIN as f64);
    draw_line(&mut img, origin, (origin.0 + pw, origin.1), black);
    draw_line(&mut img, origin, (origin.0, origin.1 - ph), black);
    for k in 0..=10 {
        let tx = origin.0 + pw * k as f64 / 10.0;
        let ty = origin.1 - ph * k as f64 / 10.0;
        draw_line(&mut img, (tx, origin.1), (tx, origin.1 + 4.0), black);
        draw_line(&mut img, (origin.0 - 4.0, ty), (origin.0, ty), black);
    }
    for s in series {
        let c = Rgb(s.color);
        for w in s.points.windows(2) {
            draw_line(&mut img, to_px(w[0]), to_px(w[1]), c);
        }
        if let [p] = s.points.as_slice() {
            draw_line(&mut img, to_px(*p), to_px(*p), c);
        }
    }
    img
}
