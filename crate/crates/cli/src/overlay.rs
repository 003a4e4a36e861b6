//! Static trajectory renderings: trails plus a marker per query, filled when
//! visible and hollow when occluded.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_circle_mut, draw_line_segment_mut};
use probtrack_core::tracker::{read_trajectories, Trajectory};

use crate::commands::{io_error, CliError};

const MARKER_RADIUS: i32 = 3;

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn colour(query: usize) -> Rgb<u8> {
    Rgb(PALETTE[query % PALETTE.len()])
}

/// Draws frame `t` of every trajectory onto `img`.
pub fn draw_frame(img: &mut RgbImage, trajectories: &[Trajectory], t: usize, trail: usize) {
    for traj in trajectories {
        let c = colour(traj.query_id);
        let start = t.saturating_sub(trail);
        for k in start..t {
            let (a, b) = (traj.states[k], traj.states[k + 1]);
            if a.visible && b.visible {
                let p = (a.estimate.mean.x as f32, a.estimate.mean.y as f32);
                let q = (b.estimate.mean.x as f32, b.estimate.mean.y as f32);
                draw_line_segment_mut(img, p, q, c);
            }
        }
        let s = traj.states[t];
        let centre = (
            s.estimate.mean.x.round() as i32,
            s.estimate.mean.y.round() as i32,
        );
        if s.visible {
            draw_filled_circle_mut(img, centre, MARKER_RADIUS, c);
        } else {
            draw_hollow_circle_mut(img, centre, MARKER_RADIUS, c);
        }
    }
}

pub fn run(pred: &Path, frames: &Path, out: &Path, trail: usize) -> Result<(), CliError> {
    let trajectories = read_trajectories(pred)?;
    let num_frames = trajectories.first().map_or(0, |t| t.states.len());
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    for t in 0..num_frames {
        let src = frames.join(format!("{t}.png"));
        if !src.is_file() {
            return Err(CliError::Io(format!("missing frame {}", src.display())));
        }
        let mut img = image::open(&src).map_err(|e| io_error(&src, e))?.to_rgb8();
        draw_frame(&mut img, &trajectories, t, trail);
        let dst = out.join(format!("{t}.png"));
        img.save(&dst).map_err(|e| io_error(&dst, e))?;
    }
    println!("wrote {num_frames} frames -> {}", out.display());
    Ok(())
}
