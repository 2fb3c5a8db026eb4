//! Procedural articulated hand: a 21-joint skeleton dressed in capsules.
//!
//! Joint order is wrist first, then four joints per digit from thumb to
//! pinky (base, two intermediate joints, tip). The rest hand lies in the
//! x-y plane with fingers along +y and the palm facing +z.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_6};
use std::fmt::Write as _;

use nalgebra::{Point3, Rotation3, Unit, Vector3};

use crate::error::{LabError, Result};
use crate::image::GrayImage;
use crate::render::{Camera, DenseGrid};

pub const NUM_JOINTS: usize = 21;
pub const NUM_DIGITS: usize = 5;

/// Density assigned to occupied cells by [`voxelize`].
pub const VOXEL_DENSITY: f64 = 40.0;

/// Parent joint of each joint; the wrist is the root.
pub const PARENTS: [Option<usize>; NUM_JOINTS] = {
    let mut p = [None; NUM_JOINTS];
    let mut j = 1;
    while j < NUM_JOINTS {
        p[j] = if (j - 1) % 4 == 0 { Some(0) } else { Some(j - 1) };
        j += 1;
    }
    p
};

/// Digit owning a non-root joint (0 = thumb).
pub fn digit_of(joint: usize) -> Option<usize> {
    (joint > 0).then(|| (joint - 1) / 4)
}

fn digit_base(digit: usize) -> usize {
    1 + 4 * digit
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandSkeleton {
    pub joints: [Point3<f64>; NUM_JOINTS],
}

impl HandSkeleton {
    pub fn bone_length(&self, child: usize) -> Option<f64> {
        PARENTS[child].map(|p| (self.joints[child] - self.joints[p]).norm())
    }

    /// One line per joint: `index parent x y z`, parent -1 for the wrist.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (j, p) in self.joints.iter().enumerate() {
            let parent = PARENTS[j].map_or(-1, |q| q as i64);
            writeln!(out, "{j} {parent} {:.9} {:.9} {:.9}", p.x, p.y, p.z).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut joints = [Point3::origin(); NUM_JOINTS];
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || LabError::Format {
                path: "skeleton".into(),
                reason: format!("bad line '{line}'"),
            };
            if f.len() != 5 {
                return Err(bad());
            }
            let j: usize = f[0].parse().map_err(|_| bad())?;
            let parent: i64 = f[1].parse().map_err(|_| bad())?;
            if j >= NUM_JOINTS || parent != PARENTS[j].map_or(-1, |q| q as i64) {
                return Err(bad());
            }
            let c: Vec<f64> = f[2..].iter().map(|s| s.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            joints[j] = Point3::new(c[0], c[1], c[2]);
            seen += 1;
        }
        if seen != NUM_JOINTS {
            return Err(LabError::shape("skeleton joints", NUM_JOINTS, seen));
        }
        Ok(Self { joints })
    }
}

/// Proxy articulation: per-digit curl and spread, then a global rigid motion.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseParams {
    pub curl: [f64; NUM_DIGITS],
    pub spread: [f64; NUM_DIGITS],
    /// Euler angles (x, y, z), radians, applied about the origin.
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl PoseParams {
    pub fn validate(&self) -> Result<()> {
        for d in 0..NUM_DIGITS {
            if !(0.0..=FRAC_PI_2).contains(&self.curl[d]) {
                return Err(LabError::Domain(format!(
                    "curl[{d}] = {} outside [0, pi/2]",
                    self.curl[d]
                )));
            }
            if !(-FRAC_PI_6..=FRAC_PI_6).contains(&self.spread[d]) {
                return Err(LabError::Domain(format!(
                    "spread[{d}] = {} outside [-pi/6, pi/6]",
                    self.spread[d]
                )));
            }
        }
        if self.rotation.iter().chain(&self.translation).any(|v| !v.is_finite()) {
            return Err(LabError::Domain("global rotation/translation must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Point3<f64>,
    pub b: Point3<f64>,
    pub radius: f64,
}

impl Capsule {
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        let h = if len2 > 0.0 {
            ((p - self.a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p - (self.a + ab * h)).norm()
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        self.distance(p) <= self.radius
    }

    pub fn volume(&self) -> f64 {
        let r = self.radius;
        let len = (self.b - self.a).norm();
        std::f64::consts::PI * r * r * len + 4.0 / 3.0 * std::f64::consts::PI * r.powi(3)
    }

    /// Entry distance of a unit-direction ray, if it hits at t > 0.
    pub fn ray_entry(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut best = f64::INFINITY;
        let axis = self.b - self.a;
        let len = axis.norm();
        if len > 1e-12 {
            let u = axis / len;
            let oa = origin - self.a;
            let d_perp = dir - u * dir.dot(&u);
            let o_perp = oa - u * oa.dot(&u);
            let qa = d_perp.norm_squared();
            if qa > 1e-14 {
                let qb = o_perp.dot(&d_perp);
                let qc = o_perp.norm_squared() - self.radius * self.radius;
                let disc = qb * qb - qa * qc;
                if disc >= 0.0 {
                    let t = (-qb - disc.sqrt()) / qa;
                    let s = (oa + dir * t).dot(&u);
                    if t > 0.0 && (0.0..=len).contains(&s) {
                        best = best.min(t);
                    }
                }
            }
        }
        for c in [self.a, self.b] {
            let oc = origin - c;
            let hb = oc.dot(dir);
            let disc = hb * hb - (oc.norm_squared() - self.radius * self.radius);
            if disc >= 0.0 {
                let t = -hb - disc.sqrt();
                if t > 0.0 {
                    best = best.min(t);
                }
            }
        }
        best.is_finite().then_some(best)
    }
}

/// Which candidate geometry a hand encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HandVariant {
    Five,
    /// Thumb capsules removed.
    Four,
}

impl HandVariant {
    pub fn name(&self) -> &'static str {
        match self {
            HandVariant::Five => "five",
            HandVariant::Four => "four",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "five" => Ok(HandVariant::Five),
            "four" => Ok(HandVariant::Four),
            other => Err(LabError::Config(format!("unknown hand variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapsuleOwner {
    /// Bone ending at this child joint.
    Bone(usize),
    Palm(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleHand {
    pub skeleton: HandSkeleton,
    /// Radius of the bone ending at joint `j + 1`.
    pub radii: [f64; NUM_JOINTS - 1],
    pub palm: Vec<Capsule>,
    pub digits: [bool; NUM_DIGITS],
}

const FINGER_BASE_X: [f64; 4] = [-0.3, -0.1, 0.1, 0.3];
const FINGER_LENGTH: [f64; 4] = [1.0, 1.1, 1.0, 0.9];
const BONE_FRACTIONS: [f64; 3] = [0.45, 0.3, 0.25];
const THUMB_LENGTH: f64 = 0.7;
const THUMB_FRACTIONS: [f64; 3] = [0.4, 0.33, 0.27];
const WRIST: [f64; 3] = [0.0, -0.95, 0.0];

/// Palm color followed by thumb to pinky. Every entry has channel mean
/// 0.5, the gray of an untrained cell, so luminance sees geometry only.
pub const PALETTE: [[f64; 3]; 6] = [
    [0.66, 0.46, 0.38],
    [0.62, 0.46, 0.42],
    [0.70, 0.44, 0.36],
    [0.64, 0.48, 0.38],
    [0.68, 0.45, 0.37],
    [0.60, 0.48, 0.42],
];

fn rest_direction(digit: usize) -> Vector3<f64> {
    if digit == 0 {
        Vector3::new(-0.85, 0.45, 0.27).normalize()
    } else {
        Vector3::new(FINGER_BASE_X[digit - 1] * 0.25, 1.0, 0.0).normalize()
    }
}

/// Axis about which positive curl bends a digit toward the palm side.
fn flexion_axis(digit: usize, dir: &Vector3<f64>) -> Vector3<f64> {
    let toward = if digit == 0 {
        Vector3::new(1.0, 0.0, 1.0).normalize()
    } else {
        Vector3::z()
    };
    dir.cross(&toward).normalize()
}

impl CapsuleHand {
    /// The five-digit hand in its rest pose.
    pub fn rest() -> Self {
        let mut joints = [Point3::origin(); NUM_JOINTS];
        let wrist = Point3::from(WRIST);
        joints[0] = wrist;
        let mut radii = [0.0; NUM_JOINTS - 1];
        for digit in 0..NUM_DIGITS {
            let base = digit_base(digit);
            let (start, length, fractions) = if digit == 0 {
                (Point3::new(-0.4, -0.7, 0.05), THUMB_LENGTH, THUMB_FRACTIONS)
            } else {
                (
                    Point3::new(FINGER_BASE_X[digit - 1], -0.15, 0.0),
                    FINGER_LENGTH[digit - 1],
                    BONE_FRACTIONS,
                )
            };
            joints[base] = start;
            radii[base - 1] = 0.1;
            let dir = rest_direction(digit);
            let taper = if digit == 4 { 0.9 } else { 1.0 };
            let bone_radii = if digit == 0 {
                [0.085, 0.08, 0.07]
            } else {
                [0.075 * taper, 0.07 * taper, 0.065 * taper]
            };
            for k in 0..3 {
                joints[base + k + 1] = joints[base + k] + dir * (length * fractions[k]);
                radii[base + k] = bone_radii[k];
            }
        }
        let palm = vec![
            Capsule {
                a: joints[5],
                b: joints[17],
                radius: 0.1,
            },
            Capsule {
                a: Point3::new(-0.25, -0.55, 0.0),
                b: Point3::new(0.25, -0.55, 0.0),
                radius: 0.1,
            },
            Capsule {
                a: Point3::new(-0.2, WRIST[1], 0.0),
                b: Point3::new(0.2, WRIST[1], 0.0),
                radius: 0.1,
            },
        ];
        Self {
            skeleton: HandSkeleton { joints },
            radii,
            palm,
            digits: [true; NUM_DIGITS],
        }
    }

    pub fn with_variant(mut self, variant: HandVariant) -> Self {
        self.digits = [true; NUM_DIGITS];
        if variant == HandVariant::Four {
            self.digits[0] = false;
        }
        self
    }

    /// Active capsules with their owners. A missing digit drops its three
    /// distal bones; palm bones stay.
    pub fn capsules(&self) -> Vec<(CapsuleOwner, Capsule)> {
        let j = &self.skeleton.joints;
        let mut out = Vec::with_capacity(NUM_JOINTS + self.palm.len());
        for child in 1..NUM_JOINTS {
            let parent = PARENTS[child].unwrap();
            let digit = digit_of(child).unwrap();
            let is_palm_bone = parent == 0;
            if !is_palm_bone && !self.digits[digit] {
                continue;
            }
            out.push((
                CapsuleOwner::Bone(child),
                Capsule {
                    a: j[parent],
                    b: j[child],
                    radius: self.radii[child - 1],
                },
            ));
        }
        for (k, c) in self.palm.iter().enumerate() {
            out.push((CapsuleOwner::Palm(k), *c));
        }
        out
    }

    /// Palette color for a capsule owner.
    pub fn color_of(&self, owner: CapsuleOwner) -> [f64; 3] {
        match owner {
            CapsuleOwner::Bone(child) if PARENTS[child] != Some(0) => {
                PALETTE[1 + digit_of(child).unwrap()]
            }
            _ => PALETTE[0],
        }
    }
}

/// Forward kinematics of `pose` applied on top of `rest`.
pub fn articulate(rest: &CapsuleHand, pose: &PoseParams) -> Result<CapsuleHand> {
    pose.validate()?;
    let rj = &rest.skeleton.joints;
    let mut joints = *rj;
    for digit in 0..NUM_DIGITS {
        let base = digit_base(digit);
        let first_bone = rj[base + 1] - rj[base];
        if first_bone.norm() == 0.0 {
            return Err(LabError::Domain(format!("digit {digit} has a zero-length bone")));
        }
        let dir = first_bone.normalize();
        let spread = Rotation3::from_axis_angle(&Vector3::z_axis(), pose.spread[digit]);
        let flex_axis = Unit::new_normalize(flexion_axis(digit, &dir));
        for k in 0..3 {
            let flex = Rotation3::from_axis_angle(&flex_axis, pose.curl[digit] * (k + 1) as f64);
            let bone = rj[base + k + 1] - rj[base + k];
            joints[base + k + 1] = joints[base + k] + spread * (flex * bone);
        }
    }
    let [rx, ry, rz] = pose.rotation;
    let global = Rotation3::from_euler_angles(rx, ry, rz);
    let shift = Vector3::from(pose.translation);
    let moved = |p: &Point3<f64>| global * p + shift;
    let joints = joints.map(|p| moved(&p));
    let palm = rest
        .palm
        .iter()
        .map(|c| Capsule {
            a: moved(&c.a),
            b: moved(&c.b),
            radius: c.radius,
        })
        .collect();
    Ok(CapsuleHand {
        skeleton: HandSkeleton { joints },
        radii: rest.radii,
        palm,
        digits: rest.digits,
    })
}

fn first_hit(caps: &[(CapsuleOwner, Capsule)], origin: &Point3<f64>, dir: &Vector3<f64>) -> bool {
    caps.iter().any(|(_, c)| c.ray_entry(origin, dir).is_some())
}

/// Binary mask: 1 where the pixel-center ray hits any capsule.
pub fn silhouette_mask(hand: &CapsuleHand, camera: &Camera) -> GrayImage {
    let size = camera.image_size();
    let caps = hand.capsules();
    let origin = camera.position();
    let mut mask = GrayImage::new(size);
    for row in 0..size {
        for col in 0..size {
            if first_hit(&caps, &origin, &camera.pixel_ray(row, col)) {
                mask.data[row * size + col] = 1.0;
            }
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub visible: bool,
}

/// Projects all joints. A joint is visible when it lies in front of the
/// camera and no capsule that does not contain it is entered before the
/// first capsule that does.
pub fn project_keypoints(hand: &CapsuleHand, camera: &Camera) -> Vec<Keypoint> {
    let caps = hand.capsules();
    let origin = camera.position();
    hand.skeleton
        .joints
        .iter()
        .map(|joint| {
            let (x, y, depth) = camera.project(joint);
            let visible = depth > 0.0 && {
                let dir = (joint - origin).normalize();
                let mut own = f64::INFINITY;
                let mut other = f64::INFINITY;
                let mut has_own = false;
                for (_, c) in &caps {
                    let inside = c.distance(joint) <= c.radius + 1e-9;
                    has_own |= inside;
                    if let Some(t) = c.ray_entry(&origin, &dir) {
                        if inside {
                            own = own.min(t);
                        } else {
                            other = other.min(t);
                        }
                    }
                }
                has_own && own <= other
            };
            Keypoint {
                x,
                y,
                depth,
                visible,
            }
        })
        .collect()
}

/// Occupancy grid of the hand: `VOXEL_DENSITY` at cell centers inside any
/// capsule, zero elsewhere; colors from the per-digit palette.
pub fn voxelize(hand: &CapsuleHand, resolution: usize, extent: f64) -> Result<DenseGrid> {
    if resolution < 8 {
        return Err(LabError::Domain(format!("voxel resolution {resolution} < 8")));
    }
    let caps = hand.capsules();
    let mut grid = DenseGrid::empty(resolution, extent);
    let [r, g, b] = PALETTE[0];
    for iz in 0..resolution {
        for iy in 0..resolution {
            for ix in 0..resolution {
                let p = grid.cell_center(ix, iy, iz);
                let k = grid.index(ix, iy, iz);
                grid.cells[k] = [0.0, r, g, b];
                let hit = caps
                    .iter()
                    .filter(|(_, c)| c.contains(&p))
                    .min_by(|x, y| x.1.distance(&p).total_cmp(&y.1.distance(&p)));
                if let Some((owner, _)) = hit {
                    let [r, g, b] = hand.color_of(*owner);
                    grid.cells[k] = [VOXEL_DENSITY, r, g, b];
                }
            }
        }
    }
    Ok(grid)
}
