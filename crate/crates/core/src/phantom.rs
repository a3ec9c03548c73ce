//! Synthetic apical cine loops with known degradations.
//!
//! A fan-shaped field holds elliptical chambers (four for A4C, two for A2C)
//! with bright walls. Over 20 frames the ventricle contracts from end-diastole
//! (frame 0) to end-systole (frame 10) and back. Each degradation knob
//! touches one visual property:
//!
//! * `axis_rotation_deg` rotates the anatomy about the probe apex,
//! * `contrast_level` stretches intensities around the tissue level,
//! * `gain_gradient` multiplies intensity by a depth ramp,
//! * `foreshorten_level` shortens the ventricle and lets its apex travel
//!   during systole,
//! * `noise_amplitude` adds multiplicative uniform speckle.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{ApexTrack, Point2, Severity};
use crate::metrics::{rms_contrast, Frame, Origin, Roi};
use crate::nn::rng::Rng;
use crate::rubric::{contrast_to_clinical, Attribute, AttributeScores, Column, Rubric, View};

pub const FRAME_SIZE: usize = 227;
pub const CLIP_LEN: usize = 20;
pub const ED_INDEX: usize = 0;
pub const ES_INDEX: usize = 10;

const ORIGIN_X: f64 = 113.0;
const ORIGIN_Y: f64 = 8.0;
const SECTOR_RADIUS: f64 = 215.0;
const SECTOR_HALF_ANGLE_DEG: f64 = 40.0;

const TISSUE: f64 = 0.40;
const WALL: f64 = 0.85;
const BLOOD: f64 = 0.08;
const WALL_PX: f64 = 7.0;
const EDGE_PX: f64 = 1.5;

const LV_APEX: f64 = 34.0;
const LV_BASE: f64 = 150.0;

/// Contrast level at which the template is shown unchanged.
pub const OPTIMUM_CONTRAST: f64 = 0.8;
pub const OVER_CONTRAST: f64 = 1.0;

/// Region used for contrast measurements. It lies inside the sector and
/// covers the left heart of an unrotated view.
pub const CONTRAST_ROI: Roi = Roi {
    x: 78,
    y: 60,
    width: 70,
    height: 150,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub seed: u64,
    pub view: View,
    /// `[0, 1]`; 0.8 renders the template as designed, 1.0 over-stretches.
    pub contrast_level: f64,
    /// `[-1, 1]`; negative darkens the far field, positive over-gains it.
    pub gain_gradient: f64,
    /// `[-30, 30]` degrees of in-plane rotation.
    pub axis_rotation_deg: f64,
    pub foreshorten_level: Severity,
    /// `[0, 0.2]`
    pub noise_amplitude: f64,
}

impl PhantomParams {
    /// Undegraded A4C clip.
    pub fn pristine(seed: u64) -> Self {
        Self {
            seed,
            view: View::A4C,
            contrast_level: OPTIMUM_CONTRAST,
            gain_gradient: 0.0,
            axis_rotation_deg: 0.0,
            foreshorten_level: Severity::Zero,
            noise_amplitude: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("contrast_level", self.contrast_level, 0.0, 1.0),
            ("gain_gradient", self.gain_gradient, -1.0, 1.0),
            ("axis_rotation_deg", self.axis_rotation_deg, -30.0, 30.0),
            ("noise_amplitude", self.noise_amplitude, 0.0, 0.2),
        ];
        for (name, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(invalid(format!("{name} = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Injected degradation for one attribute on a 0 (none) to 1 (worst)
    /// scale. Contrast has no monotone knob (both too little and too much
    /// degrade), so its degradation is the clinical deficit of the clip's
    /// reference contrast.
    pub fn degradation(&self, attribute: Attribute, rubric: &Rubric) -> Result<f64> {
        Ok(match attribute {
            Attribute::OnAxis => (self.axis_rotation_deg.abs() / 30.0).min(1.0),
            Attribute::DepthGain => self.gain_gradient.abs().min(1.0),
            Attribute::Foreshorten => self.foreshorten_level.ordinal() as f64 / 2.0,
            Attribute::LvClarity => 1.0 - clarity_clinical(self, rubric)? / 9.0,
        })
    }
}

/// A fixed-length clip with clip-level labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CineClip {
    pub id: String,
    pub view: View,
    pub frames: Vec<Frame>,
    pub labels: AttributeScores,
    pub apex_track: Option<ApexTrack>,
    pub params: Option<PhantomParams>,
    /// Who produced the labels: `phantom`, `GT1`, `GT2`, ...
    pub provenance: String,
}

impl CineClip {
    pub fn check(&self) -> Result<()> {
        if self.frames.len() != CLIP_LEN {
            return Err(invalid(format!(
                "clip {} has {} frames, expected {CLIP_LEN}",
                self.id,
                self.frames.len()
            )));
        }
        let (w, h) = (self.frames[0].width(), self.frames[0].height());
        if self.frames.iter().any(|f| f.width() != w || f.height() != h) {
            return Err(invalid(format!("clip {} mixes frame sizes", self.id)));
        }
        Ok(())
    }
}

/// Systolic phase: 0 at end-diastole, 1 at end-systole.
pub fn phase(t: usize) -> f64 {
    (1.0 - (2.0 * std::f64::consts::PI * t as f64 / CLIP_LEN as f64).cos()) / 2.0
}

fn apex_travel_px(level: Severity) -> f64 {
    let fraction = match level {
        Severity::Zero => 0.0,
        Severity::Mild => 0.04,
        Severity::Severe => 0.09,
    };
    fraction * FRAME_SIZE as f64
}

fn static_shortening(level: Severity) -> f64 {
    match level {
        Severity::Zero => 1.0,
        Severity::Mild => 0.9,
        Severity::Severe => 0.8,
    }
}

#[derive(Clone, Copy, Debug)]
struct Chamber {
    cu: f64,
    cv: f64,
    au: f64,
    av: f64,
}

impl Chamber {
    /// Approximate signed distance in pixels to the boundary.
    fn distance(&self, u: f64, v: f64) -> f64 {
        let e = (((u - self.cu) / self.au).powi(2) + ((v - self.cv) / self.av).powi(2)).sqrt();
        (e - 1.0) * self.au.min(self.av)
    }
}

struct Anatomy {
    chambers: Vec<Chamber>,
    /// LV apex in anatomy coordinates.
    apex: (f64, f64),
}

fn lv_column(view: View) -> f64 {
    match view {
        View::A4C => 24.0,
        View::A2C => 0.0,
    }
}

fn anatomy(view: View, level: Severity, t: usize) -> Anatomy {
    let p = phase(t);
    let length = LV_BASE - LV_APEX;
    let apex_v = LV_APEX + (1.0 - static_shortening(level)) * length + apex_travel_px(level) * p;
    let base_v = LV_BASE - 0.12 * length * p;
    let lu = lv_column(view);
    let lv = Chamber {
        cu: lu,
        cv: (apex_v + base_v) / 2.0,
        au: 20.0 * (1.0 - 0.18 * p),
        av: (base_v - apex_v) / 2.0,
    };
    let atrium = |cu: f64, au: f64| Chamber {
        cu,
        cv: 178.0 - 0.06 * length * p,
        au: au * (1.0 + 0.08 * p),
        av: 24.0 * (1.0 + 0.08 * p),
    };
    let mut chambers = vec![lv, atrium(lu, 19.0)];
    if view == View::A4C {
        chambers.push(Chamber {
            cu: -26.0,
            cv: 100.0 - 0.04 * length * p,
            au: 17.0 * (1.0 - 0.15 * p),
            av: 48.0 * (1.0 - 0.05 * p),
        });
        chambers.push(atrium(-26.0, 17.0));
    }
    Anatomy {
        chambers,
        apex: (lu, apex_v),
    }
}

fn template_value(anat: &Anatomy, u: f64, v: f64) -> f64 {
    let ramp = |d: f64| (0.5 - d / EDGE_PX).clamp(0.0, 1.0);
    let mut wall = 0.0f64;
    let mut blood = 0.0f64;
    for c in &anat.chambers {
        let d = c.distance(u, v);
        wall = wall.max(ramp(d - WALL_PX));
        blood = blood.max(ramp(d));
    }
    let value = TISSUE + (WALL - TISSUE) * wall;
    value + (BLOOD - value) * blood
}

/// Intensity gain `(c / 0.8)^2` applied around the tissue level.
pub fn contrast_gain(level: f64) -> f64 {
    (level / OPTIMUM_CONTRAST).powi(2)
}

/// Depth ramp: 1 near the probe, `1 + 1.2 g (depth - 0.15)` further out.
pub fn depth_gain(gradient: f64, depth: f64) -> f64 {
    (1.0 + 1.2 * gradient * (depth - 0.15)).max(0.0)
}

fn render_frame(params: &PhantomParams, t: usize, noise: Option<&mut Rng>) -> Frame {
    let anat = anatomy(params.view, params.foreshorten_level, t);
    let theta = params.axis_rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let k = contrast_gain(params.contrast_level);
    let half = SECTOR_HALF_ANGLE_DEG.to_radians();
    let mut rng = noise;
    let mut px = vec![0.0f32; FRAME_SIZE * FRAME_SIZE];
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let dx = x as f64 - ORIGIN_X;
            let dy = y as f64 - ORIGIN_Y;
            let r = dx.hypot(dy);
            if dy <= 0.0 || r > SECTOR_RADIUS || dx.atan2(dy).abs() > half {
                continue;
            }
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let a = template_value(&anat, u, v);
            let mut value = (TISSUE + k * (a - TISSUE)) * depth_gain(params.gain_gradient, r / SECTOR_RADIUS);
            if let Some(rng) = rng.as_deref_mut() {
                value *= 1.0 + params.noise_amplitude * rng.range(-1.0, 1.0);
            }
            px[y * FRAME_SIZE + x] = value.clamp(0.0, 1.0) as f32;
        }
    }
    Frame::new(FRAME_SIZE, FRAME_SIZE, px, Origin::Phantom).expect("rendered frame is valid")
}

/// Apex pixel positions for every frame.
pub fn apex_track(params: &PhantomParams) -> ApexTrack {
    let theta = params.axis_rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let pts = (0..CLIP_LEN)
        .map(|t| {
            let (u, v) = anatomy(params.view, params.foreshorten_level, t).apex;
            Point2::new(ORIGIN_X + u * cos - v * sin, ORIGIN_Y + u * sin + v * cos)
        })
        .collect();
    ApexTrack::new(pts, ED_INDEX, ES_INDEX, FRAME_SIZE).expect("fixed ED/ES indices")
}

/// RMS contrast of the undegraded end-diastolic frame at this contrast level.
pub fn reference_contrast(view: View, contrast_level: f64) -> f64 {
    let p = PhantomParams {
        view,
        contrast_level,
        ..PhantomParams::pristine(0)
    };
    rms_contrast(&render_frame(&p, ED_INDEX, None), Some(CONTRAST_ROI)).expect("fixed roi fits")
}

/// Contrast anchors as measured on this generator.
pub fn calibrate_contrast_anchors(view: View) -> crate::rubric::ContrastAnchors {
    crate::rubric::ContrastAnchors {
        optimum: reference_contrast(view, OPTIMUM_CONTRAST),
        over: reference_contrast(view, OVER_CONTRAST),
    }
}

fn clarity_clinical(params: &PhantomParams, rubric: &Rubric) -> Result<f64> {
    let anchors = rubric.anchors(params.view)?;
    Ok(contrast_to_clinical(
        reference_contrast(params.view, params.contrast_level),
        anchors,
    ))
}

/// Position on the rubric's column axis (0 zeros, 1 poor, 2 average,
/// 3 optimum) whose composite equals a clinical score, for attributes whose
/// column sums are 4 / 6 / 9.
fn level_for_clinical(score: f64) -> f64 {
    if score <= 4.0 {
        score / 4.0
    } else if score <= 6.0 {
        1.0 + (score - 4.0) / 2.0
    } else {
        2.0 + (score - 6.0) / 3.0
    }
}

/// Table criteria implied by the generating parameters, composed through the
/// rubric into clip labels.
pub fn label_clip(params: &PhantomParams, rubric: &Rubric) -> Result<AttributeScores> {
    let severity_level = |s: f64| 3.0 - 2.0 * s.clamp(0.0, 1.0);
    let levels = [
        severity_level(params.degradation(Attribute::OnAxis, rubric)?),
        level_for_clinical(clarity_clinical(params, rubric)?),
        severity_level(params.degradation(Attribute::DepthGain, rubric)?),
        severity_level(params.degradation(Attribute::Foreshorten, rubric)?),
    ];
    let mut raw = [0.0; 4];
    for a in Attribute::ALL {
        let criteria = rubric.interpolate(a, levels[a.index()]);
        raw[a.index()] = rubric.composite_score(a, &criteria)?;
    }
    rubric.scores(raw)
}

pub fn generate_clip(params: &PhantomParams, rubric: &Rubric) -> Result<CineClip> {
    params.validate()?;
    let mut rng = Rng::new(params.seed);
    let frames = (0..CLIP_LEN)
        .map(|t| render_frame(params, t, Some(&mut rng)))
        .collect();
    Ok(CineClip {
        id: format!("phantom-{:016x}", params.seed),
        view: params.view,
        frames,
        labels: label_clip(params, rubric)?,
        apex_track: Some(apex_track(params)),
        params: Some(*params),
        provenance: "phantom".into(),
    })
}

/// Share of clips drawn at each quality level, applied per attribute.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationMix {
    pub poor: f64,
    pub average: f64,
    pub optimum: f64,
}

impl DegradationMix {
    pub fn uniform() -> Self {
        Self {
            poor: 1.0 / 3.0,
            average: 1.0 / 3.0,
            optimum: 1.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.poor, self.average, self.optimum];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("mix probabilities must lie in [0, 1]"));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mix probabilities sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Exact per-level counts for `n` clips (largest remainder).
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let parts = [self.poor, self.average, self.optimum];
        let mut counts = parts.map(|p| (p * n as f64).floor() as usize);
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = parts[a] * n as f64 - counts[a] as f64;
            let fb = parts[b] * n as f64 - counts[b] as f64;
            fb.total_cmp(&fa)
        });
        let mut left = n - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

const LEVELS: [Column; 3] = [Column::Poor, Column::Average, Column::Optimum];

/// Parameters for one attribute at a target level. Ranges are chosen so the
/// resulting label falls in the matching quality band.
fn draw_knob(attribute: Attribute, level: Column, rng: &mut Rng) -> f64 {
    let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
    match (attribute, level) {
        (Attribute::OnAxis, Column::Optimum) => sign * rng.range(0.0, 4.5),
        (Attribute::OnAxis, Column::Average) => sign * rng.range(13.5, 16.5),
        (Attribute::OnAxis, Column::Poor) => sign * rng.range(27.0, 30.0),
        (Attribute::DepthGain, Column::Optimum) => sign * rng.range(0.0, 0.15),
        (Attribute::DepthGain, Column::Average) => sign * rng.range(0.45, 0.55),
        (Attribute::DepthGain, Column::Poor) => sign * rng.range(0.9, 1.0),
        (Attribute::LvClarity, Column::Optimum) => rng.range(0.75, 0.84),
        (Attribute::LvClarity, Column::Average) => {
            if rng.bernoulli(1.0 / 3.0) {
                rng.range(0.95, 1.0)
            } else {
                rng.range(0.62, 0.68)
            }
        }
        (Attribute::LvClarity, Column::Poor) => rng.range(0.45, 0.53),
        (Attribute::Foreshorten, c) => match c {
            Column::Optimum => 0.0,
            Column::Average => 1.0,
            Column::Poor => 2.0,
        },
    }
}

fn stratified_levels(n: usize, mix: &DegradationMix, rng: &mut Rng) -> Vec<Column> {
    let counts = mix.apportion(n);
    let mut levels: Vec<Column> = LEVELS
        .iter()
        .zip(counts)
        .flat_map(|(&l, c)| std::iter::repeat(l).take(c))
        .collect();
    rng.shuffle(&mut levels);
    levels
}

/// Clip id for position `i` (0-based) in a dataset of `count` clips.
pub fn clip_id(i: usize, count: usize) -> String {
    let width = count.to_string().len().max(3);
    format!("c{:0width$}", i + 1)
}

/// Parameters for a stratified dataset: every attribute gets exactly the
/// mix's share of poor, average and optimum draws.
pub fn dataset_params(count: usize, seed: u64, mix: &DegradationMix) -> Result<Vec<PhantomParams>> {
    if count < 5 {
        return Err(invalid(format!("dataset needs at least 5 clips, got {count}")));
    }
    mix.validate()?;
    let mut rng = Rng::new(seed);
    let levels: Vec<Vec<Column>> = Attribute::ALL
        .iter()
        .map(|_| stratified_levels(count, mix, &mut rng))
        .collect();
    Ok((0..count)
        .map(|i| {
            let mut knob = |a: Attribute| draw_knob(a, levels[a.index()][i], &mut rng);
            let axis = knob(Attribute::OnAxis);
            let contrast = knob(Attribute::LvClarity);
            let gain = knob(Attribute::DepthGain);
            let fs = Severity::ALL[knob(Attribute::Foreshorten) as usize];
            PhantomParams {
                seed: rng.next_u64(),
                view: if rng.bernoulli(0.25) { View::A2C } else { View::A4C },
                contrast_level: contrast,
                gain_gradient: gain,
                axis_rotation_deg: axis,
                foreshorten_level: fs,
                noise_amplitude: rng.range(0.0, 0.1),
            }
        })
        .collect())
}

pub fn generate_dataset(
    count: usize,
    seed: u64,
    mix: &DegradationMix,
    rubric: &Rubric,
) -> Result<Vec<CineClip>> {
    dataset_params(count, seed, mix)?
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut clip = generate_clip(p, rubric)?;
            clip.id = clip_id(i, count);
            Ok(clip)
        })
        .collect()
}
