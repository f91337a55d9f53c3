//! Minimal raster plotting: latent-traversal reward heatmaps, imagined
//! signal profiles, and seed-averaged learning curves. Everything is
//! drawn directly into PNG pixel buffers; there are no axis labels, so
//! file names carry the meaning.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::env::{EnvId, EnvSchema};
use crate::error::{Error, Result};
use crate::nn::ParameterStore;
use crate::world::WorldModel;

const CELL: u32 = 4;
const GRID: u32 = 40;
const PAD: u32 = 6;

/// Five-stop blue-to-yellow ramp over `t` in `[0, 1]`.
fn heat_color(t: f64) -> Rgb<u8> {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.00, [68.0, 1.0, 84.0]),
        (0.25, [59.0, 82.0, 139.0]),
        (0.50, [33.0, 145.0, 140.0]),
        (0.75, [94.0, 201.0, 98.0]),
        (1.00, [253.0, 231.0, 37.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    for pair in STOPS.windows(2) {
        let (t0, c0) = pair[0];
        let (t1, c1) = pair[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            let mix = |a: f64, b: f64| (a + f * (b - a)).round() as u8;
            return Rgb([mix(c0[0], c1[0]), mix(c0[1], c1[1]), mix(c0[2], c1[2])]);
        }
    }
    Rgb([253, 231, 37])
}

/// Distinct line colors cycled by series index.
fn series_color(i: usize) -> Rgb<u8> {
    const PALETTE: [[u8; 3]; 6] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
    ];
    Rgb(PALETTE[i % PALETTE.len()])
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
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

fn blank(width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for x in 0..width {
        img.put_pixel(x, 0, Rgb([0, 0, 0]));
        img.put_pixel(x, height - 1, Rgb([0, 0, 0]));
    }
    for y in 0..height {
        img.put_pixel(0, y, Rgb([0, 0, 0]));
        img.put_pixel(width - 1, y, Rgb([0, 0, 0]));
    }
    img
}

/// The two observation dimensions a traversal heatmap sweeps, chosen so
/// the reward structure of each env is visible on a plane.
pub fn traversal_plane(env: EnvId) -> (usize, usize) {
    match env {
        EnvId::Nav2d => (0, 1),
        EnvId::CartPole => (0, 2),
        EnvId::Highway => (1, 2),
    }
}

/// One PNG per latent dim: a horizontal strip of reward heatmaps over
/// the traversal plane, the latent dim swept low to high across panels
/// with the other dims held at zero. Returns the written paths.
pub fn emit_traversal_heatmaps(
    wm: &WorldModel,
    world_store: &ParameterStore,
    schema: &EnvSchema,
    sweep: &[f64],
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    if sweep.len() < 2 {
        return Err(Error::Config("traversal sweep needs >= 2 values".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let (xi, yi) = traversal_plane(schema.id);
    let action = neutral_action(schema);
    let mid: Vec<f64> = schema
        .obs
        .iter()
        .map(|d| 0.5 * (d.lo + d.hi))
        .collect();

    let panel = GRID * CELL;
    let width = sweep.len() as u32 * panel + (sweep.len() as u32 + 1) * PAD;
    let height = panel + 2 * PAD;
    let mut paths = Vec::new();
    for dim in 0..wm.latent_dim() {
        // Sample every panel first so the color scale is shared.
        let mut values = vec![vec![0.0f64; (GRID * GRID) as usize]; sweep.len()];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (p, &zval) in sweep.iter().enumerate() {
            let mut z = vec![0.0; wm.latent_dim()];
            z[dim] = zval;
            for gy in 0..GRID {
                for gx in 0..GRID {
                    let mut s = mid.clone();
                    let fx = (gx as f64 + 0.5) / GRID as f64;
                    let fy = (gy as f64 + 0.5) / GRID as f64;
                    s[xi] = schema.obs[xi].lo + fx * (schema.obs[xi].hi - schema.obs[xi].lo);
                    s[yi] = schema.obs[yi].lo + fy * (schema.obs[yi].hi - schema.obs[yi].lo);
                    let r = wm.predict_reward(world_store, &s, &action, &z)?;
                    values[p][(gy * GRID + gx) as usize] = r;
                    lo = lo.min(r);
                    hi = hi.max(r);
                }
            }
        }
        let span = if hi > lo { hi - lo } else { 1.0 };

        let mut img = blank(width, height);
        for (p, panel_values) in values.iter().enumerate() {
            let x0 = PAD + p as u32 * (panel + PAD);
            for gy in 0..GRID {
                for gx in 0..GRID {
                    let t = (panel_values[(gy * GRID + gx) as usize] - lo) / span;
                    let color = heat_color(t);
                    for py in 0..CELL {
                        for px in 0..CELL {
                            // Image rows grow downward; flip so high y is up.
                            let ix = x0 + gx * CELL + px;
                            let iy = PAD + (GRID - 1 - gy) * CELL + py;
                            img.put_pixel(ix, iy, color);
                        }
                    }
                }
            }
        }
        let path = out_dir.join(format!("traversal_z{dim}.png"));
        img.save(&path)
            .map_err(|e| Error::Artifact(format!("writing {}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}

fn neutral_action(schema: &EnvSchema) -> crate::env::Action {
    match &schema.action {
        crate::env::ActionSpace::Continuous { dim, .. } => {
            crate::env::Action::Continuous(vec![0.0; *dim])
        }
        crate::env::ActionSpace::Discrete { .. } => crate::env::Action::Discrete(0),
    }
}

/// Polyline chart of one scalar series per latent, drawn over step
/// index. Used for imagined acceleration or reward profiles.
pub fn emit_profile_plot(series: &[Vec<f64>], path: &Path) -> Result<()> {
    if series.is_empty() || series.iter().any(|s| s.len() < 2) {
        return Err(Error::InsufficientData(
            "profile plot needs >= 1 series of >= 2 points".into(),
        ));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (width, height) = (480u32, 320u32);
    let mut img = blank(width, height);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &v in s {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("profile plot values".into()));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let inner_w = (width - 2 * PAD) as f64;
    let inner_h = (height - 2 * PAD) as f64;
    for (i, s) in series.iter().enumerate() {
        let color = series_color(i);
        let n = s.len() as f64;
        let px = |t: usize| PAD as i64 + (t as f64 / (n - 1.0) * (inner_w - 1.0)) as i64;
        let py = |v: f64| PAD as i64 + ((1.0 - (v - lo) / span) * (inner_h - 1.0)) as i64;
        for t in 1..s.len() {
            draw_line(&mut img, px(t - 1), py(s[t - 1]), px(t), py(s[t]), color);
        }
    }
    img.save(path)
        .map_err(|e| Error::Artifact(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

/// Mean learning curve over seeds with a min-to-max shaded band. Each
/// inner vector is one seed's per-iteration series; all must agree in
/// length.
pub fn emit_learning_curve(per_seed: &[Vec<f64>], path: &Path) -> Result<()> {
    if per_seed.is_empty() {
        return Err(Error::InsufficientData("no seed series".into()));
    }
    let len = per_seed[0].len();
    if len < 2 || per_seed.iter().any(|s| s.len() != len) {
        return Err(Error::InsufficientData(
            "seed series must share a length of >= 2".into(),
        ));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (width, height) = (480u32, 320u32);
    let mut img = blank(width, height);
    let mut mean = vec![0.0; len];
    let mut lo_band = vec![f64::INFINITY; len];
    let mut hi_band = vec![f64::NEG_INFINITY; len];
    for s in per_seed {
        for (t, &v) in s.iter().enumerate() {
            mean[t] += v / per_seed.len() as f64;
            lo_band[t] = lo_band[t].min(v);
            hi_band[t] = hi_band[t].max(v);
        }
    }
    let lo = lo_band.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = hi_band.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("learning curve values".into()));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let inner_w = (width - 2 * PAD) as f64;
    let inner_h = (height - 2 * PAD) as f64;
    let px = |t: usize| PAD as i64 + (t as f64 / (len as f64 - 1.0) * (inner_w - 1.0)) as i64;
    let py = |v: f64| PAD as i64 + ((1.0 - (v - lo) / span) * (inner_h - 1.0)) as i64;

    let band = Rgb([198, 219, 239]);
    for t in 0..len {
        let (x, y_top, y_bot) = (px(t), py(hi_band[t]), py(lo_band[t]));
        draw_line(&mut img, x, y_top, x, y_bot, band);
    }
    let line = series_color(0);
    for t in 1..len {
        draw_line(&mut img, px(t - 1), py(mean[t - 1]), px(t), py(mean[t]), line);
    }
    img.save(path)
        .map_err(|e| Error::Artifact(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::schema_for;
    use crate::rng::derive_rng;
    use crate::world::PhysicsTemplate;

    #[test]
    fn heatmaps_are_written_per_latent_dim_and_idempotent() {
        let schema = schema_for(EnvId::Nav2d);
        let mut store = ParameterStore::new("world");
        let mut rng = derive_rng(1, "plot-test");
        let wm = WorldModel::new(
            &mut store,
            &schema,
            PhysicsTemplate::for_env(EnvId::Nav2d),
            2,
            &[8],
            &mut rng,
        )
        .unwrap();
        let dir = std::env::temp_dir().join("md_plot_test_traversal");
        let _ = std::fs::remove_dir_all(&dir);
        let sweep = [-2.0, 0.0, 2.0];
        let paths = emit_traversal_heatmaps(&wm, &store, &schema, &sweep, &dir).unwrap();
        assert_eq!(paths.len(), 2);
        let first: Vec<Vec<u8>> = paths
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect();
        let again = emit_traversal_heatmaps(&wm, &store, &schema, &sweep, &dir).unwrap();
        for (p, bytes) in again.iter().zip(&first) {
            assert_eq!(&std::fs::read(p).unwrap(), bytes);
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn profile_and_curve_plots_write_valid_png() {
        let dir = std::env::temp_dir().join("md_plot_test_lines");
        let _ = std::fs::remove_dir_all(&dir);
        let profile = dir.join("profile.png");
        emit_profile_plot(
            &[vec![0.0, 1.0, 0.5, -0.5], vec![1.0, 1.0, 1.0, 1.0]],
            &profile,
        )
        .unwrap();
        let curve = dir.join("curve.png");
        emit_learning_curve(
            &[
                vec![-10.0, -8.0, -5.0, -4.0],
                vec![-11.0, -7.5, -6.0, -3.0],
                vec![-9.0, -8.5, -5.5, -4.5],
            ],
            &curve,
        )
        .unwrap();
        for p in [&profile, &curve] {
            let bytes = std::fs::read(p).unwrap();
            assert_eq!(&bytes[1..4], b"PNG");
        }
        assert!(emit_profile_plot(&[], &profile).is_err());
        assert!(emit_learning_curve(&[vec![1.0]], &curve).is_err());
        let _ = std::fs::remove_dir_all(&dir);
    }
}
