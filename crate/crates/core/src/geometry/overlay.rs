//! Projects the fitted needle and holder primitives onto the frame.

use font8x8::{UnicodeFonts, BASIC_FONTS};
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_cross_mut, draw_filled_rect_mut, draw_hollow_circle_mut, draw_line_segment_mut, draw_polygon_mut};
use imageproc::point::Point;
use imageproc::rect::Rect;
use nalgebra::{Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::{FrameAnalysis, GeometryConfig};
use crate::camera::CameraModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlayStyle {
    /// Opacity of the needle-plane quad.
    pub plane_alpha: f32,
    /// Length of the drawn holder axis, mm.
    pub axis_length_mm: f64,
    pub text_scale: u32,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self { plane_alpha: 0.25, axis_length_mm: 40.0, text_scale: 1 }
    }
}

const TIP_THIRD: Rgb<u8> = Rgb([230, 60, 60]);
const MID_THIRD: Rgb<u8> = Rgb([240, 200, 40]);
const TAIL_THIRD: Rgb<u8> = Rgb([60, 200, 90]);
const GRASP_BAND: Rgb<u8> = Rgb([40, 220, 240]);
const CIRCLE: Rgb<u8> = Rgb([200, 200, 200]);
const PLANE: Rgb<u8> = Rgb([120, 160, 255]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

/// Draws `text` with the 8x8 bitmap font; `scale` multiplies the glyph size.
pub fn draw_text(img: &mut RgbImage, x: i32, y: i32, text: &str, color: Rgb<u8>, scale: u32) {
    let s = scale.max(1) as i32;
    for (i, ch) in text.chars().enumerate() {
        let Some(glyph) = BASIC_FONTS.get(ch) else { continue };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 0 {
                    continue;
                }
                for dy in 0..s {
                    for dx in 0..s {
                        let px = x + (i as i32 * 8 + col) * s + dx;
                        let py = y + row as i32 * s + dy;
                        if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                            img.put_pixel(px as u32, py as u32, color);
                        }
                    }
                }
            }
        }
    }
}

fn to_f32(p: &Point2<f64>) -> (f32, f32) {
    (p.x as f32, p.y as f32)
}

/// Polyline through projected 3D points; segments with a point behind the
/// camera are skipped. Dashed polylines draw every other segment.
fn polyline(img: &mut RgbImage, camera: &CameraModel, pts: &[Point3<f64>], color: Rgb<u8>, dashed: bool, thick: bool) {
    let proj: Vec<Option<Point2<f64>>> = pts.iter().map(|p| camera.project(p)).collect();
    for (k, w) in proj.windows(2).enumerate() {
        if dashed && (k / 2) % 2 == 1 {
            continue;
        }
        if let (Some(a), Some(b)) = (&w[0], &w[1]) {
            draw_line_segment_mut(img, to_f32(a), to_f32(b), color);
            if thick {
                for (ox, oy) in [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)] {
                    draw_line_segment_mut(img, (a.x as f32 + ox, a.y as f32 + oy), (b.x as f32 + ox, b.y as f32 + oy), color);
                }
            }
        }
    }
}

fn segment(a: &Point3<f64>, b: &Point3<f64>, n: usize) -> Vec<Point3<f64>> {
    (0..=n).map(|k| a + (b - a) * (k as f64 / n as f64)).collect()
}

fn blend_polygon(img: &mut RgbImage, poly: &[Point<i32>], color: Rgb<u8>, alpha: f32) {
    let mut layer = img.clone();
    draw_polygon_mut(&mut layer, poly, color);
    for (dst, src) in img.pixels_mut().zip(layer.pixels()) {
        if src != dst {
            for c in 0..3 {
                dst[c] = (dst[c] as f32 * (1.0 - alpha) + src[c] as f32 * alpha).round() as u8;
            }
        }
    }
}

/// Draws the fitted circle, the needle arc in thirds from the tip with the
/// recommended grasp band highlighted, the rotation center, the needle
/// plane, the holder axis triad and a metrics block. Low-confidence fits are
/// dashed; a frame without detections gets a banner.
pub fn render_overlay(rgb: &RgbImage, camera: &CameraModel, analysis: &FrameAnalysis, geometry: &GeometryConfig, style: &OverlayStyle) -> RgbImage {
    let mut img = rgb.clone();
    let scale = style.text_scale.max(1);

    if !analysis.detected() {
        let h = 12 * scale;
        let rect = Rect::at(0, 0).of_size(img.width(), h);
        draw_filled_rect_mut(&mut img, rect, Rgb([20, 20, 20]));
        draw_text(&mut img, 4, 2, "no detection", WHITE, scale);
        return img;
    }

    if let Some(c) = &analysis.circle {
        let dashed = c.low_confidence;
        let (u, v) = (c.basis_u, c.basis_v());
        // Needle plane quad, slightly larger than the circle.
        let half = 1.2 * c.radius;
        let corners = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)].map(|(a, b)| c.center + half * (a * u + b * v));
        let quad: Option<Vec<Point<i32>>> = corners
            .iter()
            .map(|p| camera.project(p).map(|q| Point::new(q.x.round() as i32, q.y.round() as i32)))
            .collect();
        if let Some(mut quad) = quad {
            quad.dedup();
            if quad.len() >= 3 && quad.first() != quad.last() {
                blend_polygon(&mut img, &quad, PLANE, style.plane_alpha);
            }
        }

        let full: Vec<Point3<f64>> = (0..=180).map(|k| c.point_at(std::f64::consts::TAU * k as f64 / 180.0)).collect();
        polyline(&mut img, camera, &full, CIRCLE, true, false);

        // Arc parameterized from the tip: fraction f maps to angle tip ± f·span.
        let (tip, sign) = match &analysis.metrics {
            Some(m) if m.tip_angle == c.arc_end => (c.arc_end, -1.0),
            _ => (c.arc_start, 1.0),
        };
        let at = |f: f64| c.point_at(tip + sign * f * c.arc_span());
        let piece = |f0: f64, f1: f64| (0..=30).map(|k| at(f0 + (f1 - f0) * k as f64 / 30.0)).collect::<Vec<_>>();
        polyline(&mut img, camera, &piece(0.0, 1.0 / 3.0), TIP_THIRD, dashed, true);
        polyline(&mut img, camera, &piece(1.0 / 3.0, 2.0 / 3.0), MID_THIRD, dashed, true);
        polyline(&mut img, camera, &piece(2.0 / 3.0, 1.0), TAIL_THIRD, dashed, true);
        let [g0, g1] = geometry.grasp_band;
        polyline(&mut img, camera, &piece(g0, g1), GRASP_BAND, false, true);

        if let Some(center) = camera.project(&c.center) {
            let (x, y) = (center.x.round() as i32, center.y.round() as i32);
            draw_cross_mut(&mut img, WHITE, x, y);
            draw_hollow_circle_mut(&mut img, (x, y), 4, WHITE);
        }
        if let Some(m) = &analysis.metrics {
            if let Some(g) = camera.project(&c.point_at(m.grasp_angle)) {
                draw_hollow_circle_mut(&mut img, (g.x.round() as i32, g.y.round() as i32), 5, GRASP_BAND);
            }
        }
    }

    if let Some(a) = &analysis.axis {
        let dashed = a.low_confidence;
        let end = a.tip + style.axis_length_mm * a.direction;
        polyline(&mut img, camera, &segment(&a.tip, &end, 20), Rgb([80, 120, 255]), dashed, true);
        let helper = if a.direction.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = a.direction.cross(&helper).normalize();
        let e2 = a.direction.cross(&e1);
        let arm = style.axis_length_mm / 4.0;
        polyline(&mut img, camera, &segment(&a.tip, &(a.tip + arm * e1), 8), Rgb([255, 80, 80]), dashed, false);
        polyline(&mut img, camera, &segment(&a.tip, &(a.tip + arm * e2), 8), Rgb([80, 255, 80]), dashed, false);
    }

    let mut lines = Vec::new();
    if let Some(c) = &analysis.circle {
        lines.push(format!("needle r {:.1} mm{}", c.radius, if c.low_confidence { " (low conf)" } else { "" }));
    }
    if let Some(m) = &analysis.metrics {
        let ok = |b: bool| if b { "ok" } else { "--" };
        lines.push(format!("grasp {:.2} {}", m.grasp_fraction, ok(m.flags.grasp_fraction_ok)));
        lines.push(format!("grasp angle {:.0} {}", m.grasp_angle_deg, ok(m.flags.grasp_angle_ok)));
        lines.push(format!("plane/axis {:.0}", m.plane_instrument_angle_deg));
        if let (Some(e), Some(flag)) = (m.entry_angle_deg, m.flags.entry_angle_ok) {
            lines.push(format!("entry {:.0} {}", e, ok(flag)));
        }
        if m.tip_ambiguous {
            lines.push("tip ambiguous".into());
        }
    }
    if !lines.is_empty() {
        let w = lines.iter().map(|l| l.len()).max().unwrap_or(0) as u32 * 8 * scale + 8;
        let h = lines.len() as u32 * 10 * scale + 6;
        let rect = Rect::at(0, 0).of_size(w.min(img.width()), h.min(img.height()));
        draw_filled_rect_mut(&mut img, rect, Rgb([20, 20, 20]));
        for (i, l) in lines.iter().enumerate() {
            draw_text(&mut img, 4, 3 + (i as u32 * 10 * scale) as i32, l, WHITE, scale);
        }
    }
    img
}
