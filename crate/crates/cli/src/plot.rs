//! Three orthogonal slices through the first glimpse with the visit-ordered
//! path projected onto each. The first location is drawn green, later ones
//! red, and consecutive locations are joined in yellow.

use image::{Rgb, RgbImage};
use voxattn::dataset::resize_trilinear;
use voxattn::model::rvn::TrajectoryFile;
use voxattn::scan_io::VoxelVolume;
use voxattn::{Error, Result};

const FIRST: Rgb<u8> = Rgb([40, 220, 60]);
const LATER: Rgb<u8> = Rgb([230, 40, 40]);
const PATH: Rgb<u8> = Rgb([240, 210, 40]);
const GAP: u32 = 8;
/// Panels are upscaled until their longer side reaches this many pixels.
const MIN_PANEL: usize = 192;

/// Axes shown by each panel as (rows, cols), and the axis sliced through.
const PANELS: [((usize, usize), usize); 3] = [((1, 2), 0), ((0, 2), 1), ((0, 1), 2)];

pub fn render_trajectory(traj: &TrajectoryFile, volume: Option<&VoxelVolume>) -> Result<RgbImage> {
    let shape = traj.volume_shape;
    if shape.contains(&0) || traj.voxels.is_empty() {
        return Err(Error::Validation(
            "trajectory has no volume shape or no locations".into(),
        ));
    }
    if let Some(v) = traj.voxels.iter().find(|v| (0..3).any(|i| v[i] >= shape[i])) {
        return Err(Error::Validation(format!("voxel {v:?} outside {shape:?}")));
    }
    let volume = match volume {
        Some(v) if v.shape() == shape => Some(v.clone()),
        Some(v) => Some(resize_trilinear(v, shape)?),
        None => None,
    };
    let (lo, hi) = volume.as_ref().map_or((0.0, 1.0), |v| {
        v.voxels()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
    });
    let span = if hi > lo { hi - lo } else { 1.0 };

    let scale = MIN_PANEL.div_ceil(*shape.iter().max().expect("three dims")).max(1);
    let sizes: Vec<(u32, u32)> = PANELS
        .iter()
        .map(|&((r, c), _)| ((shape[c] * scale) as u32, (shape[r] * scale) as u32))
        .collect();
    let width = sizes.iter().map(|s| s.0).sum::<u32>() + GAP * (PANELS.len() as u32 - 1);
    let height = sizes.iter().map(|s| s.1).max().expect("three panels");
    let mut img = RgbImage::from_pixel(width, height, Rgb([0, 0, 0]));

    let anchor = traj.voxels[0];
    let mut x0 = 0u32;
    for (&((r, c), axis), &(w, h)) in PANELS.iter().zip(&sizes) {
        for py in 0..h {
            for px in 0..w {
                let mut idx = anchor;
                idx[r] = py as usize / scale;
                idx[c] = px as usize / scale;
                idx[axis] = anchor[axis];
                let g = volume.as_ref().map_or(40, |v| {
                    (255.0 * (v.at(idx[0], idx[1], idx[2]) - lo) / span)
                        .round()
                        .clamp(0.0, 255.0) as u8
                });
                img.put_pixel(x0 + px, py, Rgb([g, g, g]));
            }
        }
        let project = |v: &[usize; 3]| {
            let half = scale as i64 / 2;
            (x0 as i64 + (v[c] * scale) as i64 + half, (v[r] * scale) as i64 + half)
        };
        for pair in traj.voxels.windows(2) {
            line(&mut img, project(&pair[0]), project(&pair[1]), PATH);
        }
        for (t, v) in traj.voxels.iter().enumerate().rev() {
            dot(&mut img, project(v), if t == 0 { FIRST } else { LATER });
        }
        x0 += w + GAP;
    }
    Ok(img)
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn dot(img: &mut RgbImage, (x, y): (i64, i64), color: Rgb<u8>) {
    for dy in -3..=3 {
        for dx in -3..=3 {
            if dx * dx + dy * dy <= 9 {
                put(img, x + dx, y + dy, color);
            }
        }
    }
}

/// Bresenham.
fn line(img: &mut RgbImage, (mut x, mut y): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
    let (sx, sy) = ((x1 - x).signum(), (y1 - y).signum());
    let mut err = dx + dy;
    loop {
        put(img, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}
