//! Deterministic synthetic video scenarios: identity-colored striped blobs
//! moving with reflective bounds, optional forced crossings, and scripted
//! occlusions. Also the MOTChallenge text interchange format.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::losses::GtObject;

/// RGB frame, row-major, values in [0, 1].
#[derive(Clone, Debug)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Ground truth for one frame. Boxes stay valid during occlusions; the
/// visible flag goes false instead.
#[derive(Clone, Debug, Default)]
pub struct GtFrame {
    pub objects: Vec<GtObject>,
}

/// One scripted disappearance: the object is not rendered and marked
/// invisible for `duration` frames starting at `start`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcclusionScript {
    pub identity: u64,
    pub start: usize,
    pub duration: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_objects: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub min_speed: f64,
    pub max_speed: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Steer the first two objects through a mid-sequence crossing.
    pub crossing: bool,
    pub occlusions: Vec<OcclusionScript>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            n_objects: 3,
            frames: 16,
            width: 64,
            height: 64,
            min_speed: 0.8,
            max_speed: 2.2,
            min_size: 10.0,
            max_size: 15.0,
            crossing: false,
            occlusions: Vec::new(),
        }
    }
}

const BACKGROUND: f64 = 0.05;
const MIN_COLOR_DIST: f64 = 0.45;
const COVER_HIDE_FRACTION: f64 = 0.95;
const STRIPE_BAND: usize = 2;
const STRIPE_DIM: f64 = 0.55;

struct Blob {
    color: [f64; 3],
    stripe_phase: usize,
    w: f64,
    h: f64,
    pos: [f64; 2],
    vel: [f64; 2],
}

fn sample_palette(rng: &mut ChaCha12Rng, n: usize) -> Vec<[f64; 3]> {
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(n);
    while colors.len() < n {
        let c = [
            rng.random_range(0.25..1.0),
            rng.random_range(0.25..1.0),
            rng.random_range(0.25..1.0),
        ];
        let ok = colors.iter().all(|e| {
            let d2: f64 = e.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= MIN_COLOR_DIST
        });
        if ok {
            colors.push(c);
        }
    }
    colors
}

/// Distinct-appearance guarantee used by tests: smallest pairwise color
/// distance across identities.
pub fn min_color_distance(colors: &[[f64; 3]]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..colors.len() {
        for j in (i + 1)..colors.len() {
            let d2: f64 = colors[i]
                .iter()
                .zip(&colors[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d2.sqrt());
        }
    }
    best
}

fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if *pos < lo {
        *pos = lo + (lo - *pos);
        *vel = -*vel;
    }
    if *pos > hi {
        *pos = hi - (*pos - hi);
        *vel = -*vel;
    }
    *pos = pos.clamp(lo, hi);
}

/// Generate a scenario: deterministic in the seed, blobs rendered with
/// per-identity color and stripe phase, occluded objects not rendered.
pub fn generate(cfg: &ScenarioConfig) -> Result<Vec<(Image, GtFrame)>> {
    if cfg.n_objects > 0 {
        let area: f64 = cfg.max_size * cfg.max_size * cfg.n_objects as f64;
        if area > 0.35 * (cfg.width * cfg.height) as f64 {
            return Err(Error::Generation(format!(
                "{} objects of size up to {} cannot fit a {}x{} image",
                cfg.n_objects, cfg.max_size, cfg.width, cfg.height
            )));
        }
    }
    for occ in &cfg.occlusions {
        if occ.identity >= cfg.n_objects as u64 || occ.start + occ.duration > cfg.frames {
            return Err(Error::Generation(format!(
                "occlusion {occ:?} outside scenario bounds"
            )));
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let palette = sample_palette(&mut rng, cfg.n_objects);
    let mut blobs: Vec<Blob> = Vec::with_capacity(cfg.n_objects);
    for color in palette {
        let w = rng.random_range(cfg.min_size..=cfg.max_size);
        let h = rng.random_range(cfg.min_size..=cfg.max_size);
        let margin_x = w / 2.0 + 1.0;
        let margin_y = h / 2.0 + 1.0;
        let pos = [
            rng.random_range(margin_x..cfg.width as f64 - margin_x),
            rng.random_range(margin_y..cfg.height as f64 - margin_y),
        ];
        let speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        blobs.push(Blob {
            color,
            stripe_phase: rng.random_range(0..2 * STRIPE_BAND),
            w,
            h,
            pos,
            vel: [speed * angle.cos(), speed * angle.sin()],
        });
    }

    if cfg.crossing && cfg.n_objects >= 2 {
        steer_crossing(cfg, &mut rng, &mut blobs);
    }

    let mut out = Vec::with_capacity(cfg.frames);
    for frame in 0..cfg.frames {
        let occluded: Vec<bool> = (0..cfg.n_objects)
            .map(|i| {
                cfg.occlusions.iter().any(|o| {
                    o.identity == i as u64 && (o.start..o.start + o.duration).contains(&frame)
                })
            })
            .collect();

        // Decide who renders: scripted occlusions drop out, then anything
        // almost fully covered by later-id renderers is dropped too so the
        // visibility flag always matches the pixels.
        let mut renders: Vec<bool> = occluded.iter().map(|&o| !o).collect();
        for i in (0..cfg.n_objects).rev() {
            if !renders[i] {
                continue;
            }
            let above: Vec<usize> = ((i + 1)..cfg.n_objects).filter(|&j| renders[j]).collect();
            if covered_fraction(&blobs, i, &above) >= COVER_HIDE_FRACTION {
                renders[i] = false;
            }
        }

        let mut img = Image::filled(cfg.width, cfg.height, BACKGROUND);
        let mut gt = GtFrame::default();
        for (i, blob) in blobs.iter().enumerate() {
            if renders[i] {
                render_blob(&mut img, blob);
            }
            gt.objects.push(GtObject {
                identity: i as u64,
                bbox: [
                    blob.pos[0] / cfg.width as f64,
                    blob.pos[1] / cfg.height as f64,
                    blob.w / cfg.width as f64,
                    blob.h / cfg.height as f64,
                ],
                visible: renders[i],
            });
        }
        out.push((img, gt));

        for blob in &mut blobs {
            blob.pos[0] += blob.vel[0];
            blob.pos[1] += blob.vel[1];
            let mx = blob.w / 2.0 + 1.0;
            let my = blob.h / 2.0 + 1.0;
            reflect(&mut blob.pos[0], &mut blob.vel[0], mx, cfg.width as f64 - mx);
            reflect(&mut blob.pos[1], &mut blob.vel[1], my, cfg.height as f64 - my);
        }
    }
    Ok(out)
}

/// Aim blobs 0 and 1 at a shared point mid-sequence while keeping both in
/// bounds for the whole run; retry directions deterministically.
fn steer_crossing(cfg: &ScenarioConfig, rng: &mut ChaCha12Rng, blobs: &mut [Blob]) {
    let t_meet = (cfg.frames / 2) as f64;
    for _ in 0..200 {
        let meet = [
            rng.random_range(cfg.width as f64 * 0.3..cfg.width as f64 * 0.7),
            rng.random_range(cfg.height as f64 * 0.3..cfg.height as f64 * 0.7),
        ];
        let mut ok = true;
        let mut starts = Vec::new();
        for blob in blobs.iter().take(2) {
            let speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let vel = [speed * angle.cos(), speed * angle.sin()];
            let start = [meet[0] - vel[0] * t_meet, meet[1] - vel[1] * t_meet];
            let mx = blob.w / 2.0 + 1.0;
            let my = blob.h / 2.0 + 1.0;
            let end = [
                start[0] + vel[0] * cfg.frames as f64,
                start[1] + vel[1] * cfg.frames as f64,
            ];
            let in_bounds = |p: &[f64; 2]| {
                p[0] >= mx && p[0] <= cfg.width as f64 - mx && p[1] >= my && p[1] <= cfg.height as f64 - my
            };
            if !in_bounds(&start) || !in_bounds(&end) {
                ok = false;
                break;
            }
            starts.push((start, vel));
        }
        if ok {
            for (blob, (start, vel)) in blobs.iter_mut().zip(starts) {
                blob.pos = start;
                blob.vel = vel;
            }
            return;
        }
    }
}

fn rect_pixels(blob: &Blob, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let x1 = ((blob.pos[0] - blob.w / 2.0).round().max(0.0)) as usize;
    let y1 = ((blob.pos[1] - blob.h / 2.0).round().max(0.0)) as usize;
    let x2 = ((blob.pos[0] + blob.w / 2.0).round() as usize).min(width);
    let y2 = ((blob.pos[1] + blob.h / 2.0).round() as usize).min(height);
    (x1, y1, x2, y2)
}

fn covered_fraction(blobs: &[Blob], target: usize, above: &[usize]) -> f64 {
    if above.is_empty() {
        return 0.0;
    }
    let t = &blobs[target];
    let size = 4096;
    let (x1, y1, x2, y2) = rect_pixels(t, size, size);
    if x2 <= x1 || y2 <= y1 {
        return 1.0;
    }
    let mut covered = 0usize;
    let mut total = 0usize;
    for y in y1..y2 {
        for x in x1..x2 {
            total += 1;
            let hit = above.iter().any(|&j| {
                let (bx1, by1, bx2, by2) = rect_pixels(&blobs[j], size, size);
                x >= bx1 && x < bx2 && y >= by1 && y < by2
            });
            if hit {
                covered += 1;
            }
        }
    }
    covered as f64 / total as f64
}

fn render_blob(img: &mut Image, blob: &Blob) {
    let (x1, y1, x2, y2) = rect_pixels(blob, img.width, img.height);
    for y in y1..y2 {
        for x in x1..x2 {
            let band = ((x + blob.stripe_phase) / STRIPE_BAND) % 2;
            let k = if band == 0 { 1.0 } else { STRIPE_DIM };
            img.set_pixel(x, y, [blob.color[0] * k, blob.color[1] * k, blob.color[2] * k]);
        }
    }
}

/// Mirror a frame and its ground truth about the vertical axis.
pub fn flip_horizontal(img: &Image, gt: &GtFrame) -> (Image, GtFrame) {
    let mut flipped = Image::filled(img.width, img.height, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            flipped.set_pixel(img.width - 1 - x, y, img.pixel(x, y));
        }
    }
    let objects = gt
        .objects
        .iter()
        .map(|o| GtObject {
            identity: o.identity,
            bbox: [1.0 - o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]],
            visible: o.visible,
        })
        .collect();
    (flipped, GtFrame { objects })
}

// ── Pinned acceptance suite ─────────────────────────────────────────────

/// The fixed 20-train / 5-held-out scenario suite used by the end-to-end
/// acceptance run: 2-4 objects, 16 frames, 64x64, one scripted 3-frame
/// occlusion each, alternating forced crossings.
pub fn pinned_suite() -> (Vec<ScenarioConfig>, Vec<ScenarioConfig>) {
    let build = |seed_base: u64, count: usize| -> Vec<ScenarioConfig> {
        (0..count)
            .map(|i| {
                let n_objects = 2 + i % 3;
                ScenarioConfig {
                    seed: seed_base + i as u64,
                    n_objects,
                    frames: 16,
                    width: 64,
                    height: 64,
                    crossing: i % 2 == 0,
                    occlusions: vec![OcclusionScript {
                        identity: (i % n_objects) as u64,
                        start: 5 + i % 4,
                        duration: 3,
                    }],
                    ..Default::default()
                }
            })
            .collect()
    };
    (build(1000, 20), build(9000, 5))
}

// ── MOTChallenge text format ────────────────────────────────────────────

/// One line of the MOTChallenge text format, pixel units, 1-based frames.
#[derive(Clone, Debug, PartialEq)]
pub struct MotRecord {
    pub frame: u64,
    pub id: u64,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub conf: f64,
}

impl MotRecord {
    /// Center-format normalized box given image dimensions.
    pub fn to_norm_bbox(&self, img_w: usize, img_h: usize) -> [f64; 4] {
        [
            (self.left + self.width / 2.0) / img_w as f64,
            (self.top + self.height / 2.0) / img_h as f64,
            self.width / img_w as f64,
            self.height / img_h as f64,
        ]
    }

    pub fn from_norm_bbox(frame: u64, id: u64, bbox: &[f64; 4], conf: f64, img_w: usize, img_h: usize) -> Self {
        MotRecord {
            frame,
            id,
            left: (bbox[0] - bbox[2] / 2.0) * img_w as f64,
            top: (bbox[1] - bbox[3] / 2.0) * img_h as f64,
            width: bbox[2] * img_w as f64,
            height: bbox[3] * img_h as f64,
            conf,
        }
    }
}

/// Serialize records as `frame,id,left,top,width,height,conf,-1,-1,-1`
/// lines, sorted by frame then id. Floats print in shortest round-trip form.
pub fn mot_lines(records: &[MotRecord]) -> String {
    let mut sorted: Vec<&MotRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (a.frame, a.id).cmp(&(b.frame, b.id)));
    let mut out = String::new();
    for r in sorted {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},-1,-1,-1",
            r.frame, r.id, r.left, r.top, r.width, r.height, r.conf
        );
    }
    out
}

pub fn parse_mot(text: &str) -> Result<Vec<MotRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 7 {
            return Err(Error::Parse(format!(
                "line {}: expected at least 7 comma-separated fields",
                lineno + 1
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: field {}: {e}", lineno + 1, i + 1)))
        };
        records.push(MotRecord {
            frame: num(0)? as u64,
            id: num(1)? as u64,
            left: num(2)?,
            top: num(3)?,
            width: num(4)?,
            height: num(5)?,
            conf: num(6)?,
        });
    }
    Ok(records)
}

pub fn write_mot(records: &[MotRecord], path: &Path) -> Result<()> {
    std::fs::write(path, mot_lines(records))?;
    Ok(())
}

pub fn read_mot(path: &Path) -> Result<Vec<MotRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse_mot(&text)
}

/// Records for the visible ground truth of a generated scenario.
pub fn gt_to_records(frames: &[(Image, GtFrame)], img_w: usize, img_h: usize) -> Vec<MotRecord> {
    let mut records = Vec::new();
    for (i, (_, gt)) in frames.iter().enumerate() {
        for o in &gt.objects {
            if o.visible {
                records.push(MotRecord::from_norm_bbox(
                    i as u64 + 1,
                    o.identity,
                    &o.bbox,
                    1.0,
                    img_w,
                    img_h,
                ));
            }
        }
    }
    records
}

// ── Scenario config as key=value text ───────────────────────────────────

impl ScenarioConfig {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "n_objects={}", self.n_objects);
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "min_speed={}", self.min_speed);
        let _ = writeln!(s, "max_speed={}", self.max_speed);
        let _ = writeln!(s, "min_size={}", self.min_size);
        let _ = writeln!(s, "max_size={}", self.max_size);
        let _ = writeln!(s, "crossing={}", self.crossing);
        for o in &self.occlusions {
            let _ = writeln!(s, "occlusion={},{},{}", o.identity, o.start, o.duration);
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ScenarioConfig {
            occlusions: Vec::new(),
            ..Default::default()
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("scenario line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| Error::Config(format!("scenario key {key}: {e}"));
            match key {
                "seed" => cfg.seed = value.parse().map_err(|e| bad(format!("{e}")))?,
                "n_objects" => cfg.n_objects = value.parse().map_err(|e| bad(format!("{e}")))?,
                "frames" => cfg.frames = value.parse().map_err(|e| bad(format!("{e}")))?,
                "width" => cfg.width = value.parse().map_err(|e| bad(format!("{e}")))?,
                "height" => cfg.height = value.parse().map_err(|e| bad(format!("{e}")))?,
                "min_speed" => cfg.min_speed = value.parse().map_err(|e| bad(format!("{e}")))?,
                "max_speed" => cfg.max_speed = value.parse().map_err(|e| bad(format!("{e}")))?,
                "min_size" => cfg.min_size = value.parse().map_err(|e| bad(format!("{e}")))?,
                "max_size" => cfg.max_size = value.parse().map_err(|e| bad(format!("{e}")))?,
                "crossing" => cfg.crossing = value.parse().map_err(|e| bad(format!("{e}")))?,
                "occlusion" => {
                    let parts: Vec<&str> = value.split(',').collect();
                    if parts.len() != 3 {
                        return Err(bad("expected identity,start,duration".into()));
                    }
                    cfg.occlusions.push(OcclusionScript {
                        identity: parts[0].trim().parse().map_err(|e| bad(format!("{e}")))?,
                        start: parts[1].trim().parse().map_err(|e| bad(format!("{e}")))?,
                        duration: parts[2].trim().parse().map_err(|e| bad(format!("{e}")))?,
                    });
                }
                other => {
                    return Err(Error::Config(format!("unknown scenario key {other}")));
                }
            }
        }
        Ok(cfg)
    }
}
