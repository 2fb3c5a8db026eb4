//! Scenes, single runs, mode assignment and run artifacts.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::engine::{init_stage, optimize_stage2, StageReport};
use crate::error::{LabError, Result};
use crate::hand::{articulate, silhouette_mask, voxelize, CapsuleHand, HandVariant};
use crate::image::{encode_depth, write_atomic, GrayImage, RgbImage};
use crate::lab::config::ExperimentConfig;
use crate::render::{
    camera_ring, inverse_softplus, normal_snapshot, render_grid, Camera, DenseGrid, RenderOutput,
    VoxelField,
};
use crate::score::{nearest_mode, GaussianMode, LatentCodec, ModeLabel, ViewLabel, ViewLandscape};
use crate::engine::condition_key;
use crate::schedule::NoiseSchedule;

/// Everything a run needs that is fixed by the configuration.
#[derive(Debug, Clone)]
pub struct Scene {
    /// The conditioned variant in the configured pose.
    pub hand: CapsuleHand,
    pub cameras: Vec<Camera>,
    pub init_cameras: Vec<Camera>,
    pub landscape: ViewLandscape,
}

pub fn posed_hand(config: &ExperimentConfig, variant: HandVariant) -> Result<CapsuleHand> {
    articulate(&CapsuleHand::rest().with_variant(variant), &config.pose())
}

pub fn stage2_cameras(config: &ExperimentConfig) -> Result<Vec<Camera>> {
    camera_ring(
        config.ring_count,
        config.ring_radius,
        &config.ring_elevations,
        config.fov_deg,
        config.image_size,
        Point3::origin(),
    )
}

pub fn init_cameras(config: &ExperimentConfig) -> Result<Vec<Camera>> {
    camera_ring(
        config.init_ring_count,
        config.ring_radius,
        &config.init_ring_elevations,
        config.fov_deg,
        config.image_size,
        Point3::origin(),
    )
}

/// Voxelized reference grid of one variant.
pub fn reference_grid(config: &ExperimentConfig, variant: HandVariant) -> Result<DenseGrid> {
    voxelize(&posed_hand(config, variant)?, config.field_resolution, config.field_extent)
}

/// One bucket per view label present in the ring. Each bucket holds a mode
/// per (variant, camera in the bucket): the encoded render of that
/// variant's reference grid, keyed by its projected skeleton, with weight
/// `variant_weight / cameras_in_bucket`.
pub fn build_landscape(config: &ExperimentConfig, cameras: &[Camera]) -> Result<ViewLandscape> {
    let codec = LatentCodec::new(config.image_size)?;
    let settings = config.render_settings();
    let mut per_view: BTreeMap<ViewLabel, usize> = BTreeMap::new();
    for cam in cameras {
        *per_view.entry(ViewLabel::of_camera(cam)).or_default() += 1;
    }
    let mut buckets: BTreeMap<ViewLabel, Vec<GaussianMode>> = BTreeMap::new();
    for (name, weight) in config.variants.iter().zip(&config.variant_weights) {
        let variant = HandVariant::parse(name)?;
        let hand = posed_hand(config, variant)?;
        let grid = voxelize(&hand, config.field_resolution, config.field_extent)?;
        for cam in cameras {
            let view = ViewLabel::of_camera(cam);
            let render = render_grid(&grid, cam, &settings, None)?;
            buckets.entry(view).or_default().push(GaussianMode {
                mu: codec.encode(&render.color_image)?,
                weight: weight / per_view[&view] as f64,
                label: ModeLabel {
                    variant: name.clone(),
                    key: condition_key(&hand, cam),
                },
            });
        }
    }
    // Renormalize away rounding so each bucket sums to one.
    for modes in buckets.values_mut() {
        let total: f64 = modes.iter().map(|m| m.weight).sum();
        for m in modes.iter_mut() {
            m.weight /= total;
        }
    }
    ViewLandscape::new(buckets, codec, Arc::new(NoiseSchedule::default()))
}

pub fn build_scene(config: &ExperimentConfig) -> Result<Scene> {
    config.validate()?;
    let cameras = stage2_cameras(config)?;
    let landscape = build_landscape(config, &cameras)?;
    Ok(Scene {
        hand: posed_hand(config, HandVariant::parse(&config.condition_variant)?)?,
        init_cameras: init_cameras(config)?,
        cameras,
        landscape,
    })
}

/// Uniform ball of the given density and radius `init_radius * extent`;
/// empty outside.
pub fn sphere_field(config: &ExperimentConfig, density: f64) -> Result<VoxelField> {
    let mut field = VoxelField::new(config.field_resolution, config.field_extent, config.density_scale)?;
    let grid = DenseGrid::empty(config.field_resolution, config.field_extent);
    let radius = config.init_radius * config.field_extent;
    let inside = inverse_softplus(density / config.density_scale);
    let n = config.field_resolution;
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                if grid.cell_center(ix, iy, iz).coords.norm() <= radius {
                    field.raw_density[grid.index(ix, iy, iz)] = inside;
                }
            }
        }
    }
    Ok(field)
}

/// The `init_density` ball plus seeded Gaussian jitter on raw densities inside it and on
/// all raw colors.
pub fn random_init<R: Rng + ?Sized>(config: &ExperimentConfig, rng: &mut R) -> Result<VoxelField> {
    let mut field = sphere_field(config, config.init_density)?;
    if config.init_noise == 0.0 {
        return Ok(field);
    }
    let normal = Normal::new(0.0, config.init_noise).map_err(|e| LabError::Config(format!("init_noise: {e}")))?;
    let floor = inverse_softplus(0.0);
    for raw in field.raw_density.iter_mut() {
        let jitter = normal.sample(rng);
        if *raw > floor {
            *raw += jitter;
        }
    }
    for raw in field.raw_color.iter_mut() {
        *raw += normal.sample(rng);
    }
    Ok(field)
}

/// Shares stage-1 results between runs whose stage 1 is identical.
#[derive(Debug, Default)]
pub struct InitCache {
    entries: Mutex<HashMap<String, (VoxelField, StageReport)>>,
}

impl InitCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs stage 1 from the uniform `shape_init_density` ball, or returns
    /// the cached result.
    pub fn shape_init(&self, config: &ExperimentConfig, scene: &Scene) -> Result<(VoxelField, StageReport)> {
        let key = config.init_signature();
        if let Some(hit) = self.entries.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let mut field = sphere_field(config, config.shape_init_density)?;
        let report = init_stage(
            &mut field,
            &scene.hand,
            &scene.init_cameras,
            config.init_iters,
            &config.stage_options(),
        )?;
        self.entries.lock().unwrap().insert(key, (field.clone(), report.clone()));
        Ok((field, report))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewAssignment {
    pub camera: usize,
    pub view: ViewLabel,
    pub variant: String,
    pub distance: f64,
}

/// Nearest-mode label per view and the fraction agreeing with the majority.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeAssignment {
    pub views: Vec<ViewAssignment>,
    pub majority: String,
    pub consistency: f64,
}

impl ModeAssignment {
    pub const CSV_HEADER: &'static str = "camera,view,variant,distance";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for v in &self.views {
            writeln!(out, "{},{},{},{}", v.camera, v.view, v.variant, v.distance).unwrap();
        }
        out
    }
}

/// Encodes each view and assigns the nearest clean mode of its bucket.
/// Majority ties resolve to the lexicographically smallest label.
pub fn mode_consistency(views: &[(ViewLabel, &RgbImage)], landscape: &ViewLandscape) -> Result<ModeAssignment> {
    if views.len() < 2 {
        return Err(LabError::Domain(format!("mode consistency needs >= 2 views, got {}", views.len())));
    }
    let mut assigned = Vec::with_capacity(views.len());
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (k, (view, image)) in views.iter().enumerate() {
        let z = landscape.codec().encode(image)?;
        let (mode, distance) = nearest_mode(landscape.bucket(*view)?, &z)?;
        *counts.entry(mode.label.variant.clone()).or_default() += 1;
        assigned.push(ViewAssignment {
            camera: k,
            view: *view,
            variant: mode.label.variant.clone(),
            distance,
        });
    }
    let (majority, count) = counts
        .iter()
        .fold((String::new(), 0), |best, (label, &c)| if c > best.1 { (label.clone(), c) } else { best });
    Ok(ModeAssignment {
        views: assigned,
        majority,
        consistency: count as f64 / views.len() as f64,
    })
}

#[derive(Debug, Clone)]
pub struct FinalView {
    pub view: ViewLabel,
    pub render: RenderOutput,
    pub normal: RgbImage,
}

/// Final renders of a field from every ring camera.
pub fn final_views(field: &VoxelField, scene: &Scene, config: &ExperimentConfig) -> Result<Vec<FinalView>> {
    let grid = field.activate();
    let settings = config.render_settings();
    scene
        .cameras
        .iter()
        .map(|cam| {
            let render = render_grid(&grid, cam, &settings, None)?;
            let normal = normal_snapshot(&grid, cam, &render);
            Ok(FinalView {
                view: ViewLabel::of_camera(cam),
                render,
                normal,
            })
        })
        .collect()
}

/// Mean over cameras of the root-mean-square normalized-opacity error.
pub fn silhouette_rms(views: &[FinalView], hand: &CapsuleHand, cameras: &[Camera]) -> f64 {
    let total: f64 = views
        .iter()
        .zip(cameras)
        .map(|(v, cam)| {
            let mask = silhouette_mask(hand, cam);
            let o = &v.render.normalized_opacity;
            let mse = o.data.iter().zip(&mask.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / o.data.len() as f64;
            mse.sqrt()
        })
        .sum();
    total / views.len() as f64
}

pub fn assign_views(views: &[FinalView], landscape: &ViewLandscape) -> Result<ModeAssignment> {
    let pairs: Vec<(ViewLabel, &RgbImage)> = views.iter().map(|v| (v.view, &v.render.color_image)).collect();
    mode_consistency(&pairs, landscape)
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub stage1: Option<StageReport>,
    pub stage2: StageReport,
    pub field: VoxelField,
    pub views: Vec<FinalView>,
    pub assignment: ModeAssignment,
    /// Mean silhouette RMS of the final field over the ring.
    pub final_chs: f64,
}

impl RunReport {
    pub fn summary_csv(&self) -> String {
        format!(
            "majority,consistency,final_chs\n{},{},{}\n",
            self.assignment.majority, self.assignment.consistency, self.final_chs
        )
    }

    /// SHA-256 over the CSV reports, in hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        if let Some(s1) = &self.stage1 {
            h.update(s1.to_csv());
        }
        h.update(self.stage2.to_csv());
        h.update(self.assignment.to_csv());
        h.update(self.summary_csv());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the run's file set into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("config.txt"), self.config.emit().as_bytes())?;
        if let Some(s1) = &self.stage1 {
            write_atomic(&dir.join("stage1.csv"), s1.to_csv().as_bytes())?;
        }
        write_atomic(&dir.join("stage2.csv"), self.stage2.to_csv().as_bytes())?;
        write_atomic(&dir.join("modes.csv"), self.assignment.to_csv().as_bytes())?;
        write_atomic(&dir.join("summary.csv"), self.summary_csv().as_bytes())?;
        write_atomic(&dir.join("field.bin"), &self.field.to_snapshot())?;
        let views = dir.join("views");
        for (k, v) in self.views.iter().enumerate() {
            let stem = format!("cam{k:02}");
            v.render.color_image.write_ppm(&views.join(format!("{stem}_color.ppm")))?;
            v.render.normalized_opacity.write_pgm(&views.join(format!("{stem}_opacity.pgm")))?;
            write_atomic(&views.join(format!("{stem}_depth.bin")), &encode_depth(&v.render.depth_map))?;
            v.normal.write_ppm(&views.join(format!("{stem}_normal.ppm")))?;
        }
        Ok(())
    }
}

/// Stage 1 iff `shape_init` (else the seeded random ball), then stage 2
/// with the configured toggles, final renders and mode assignment.
pub fn run(config: &ExperimentConfig, cache: Option<&InitCache>) -> Result<RunReport> {
    let scene = build_scene(config)?;
    run_in_scene(config, &scene, cache)
}

/// As [`run`], reusing a scene built from an equivalent configuration.
pub fn run_in_scene(config: &ExperimentConfig, scene: &Scene, cache: Option<&InitCache>) -> Result<RunReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut field, stage1) = if config.shape_init {
        let local;
        let cache = match cache {
            Some(c) => c,
            None => {
                local = InitCache::new();
                &local
            }
        };
        let (field, report) = cache.shape_init(config, scene)?;
        (field, Some(report))
    } else {
        (random_init(config, &mut rng)?, None)
    };
    let stage2 = match config.plan()? {
        Some(plan) => optimize_stage2(
            &mut field,
            &scene.landscape,
            &scene.hand,
            &scene.cameras,
            &plan,
            &config.stage2_options(),
            &mut rng,
        )?,
        None => StageReport::default(),
    };
    let views = final_views(&field, scene, config)?;
    let assignment = assign_views(&views, &scene.landscape)?;
    let final_chs = silhouette_rms(&views, &scene.hand, &scene.cameras);
    Ok(RunReport {
        config: config.clone(),
        stage1,
        stage2,
        field,
        views,
        assignment,
        final_chs,
    })
}

/// Recomputes the mode assignment of a finished run directory from its
/// configuration and field snapshot.
pub fn consistency_of_run_dir(dir: &Path) -> Result<ModeAssignment> {
    let config = ExperimentConfig::load(&dir.join("config.txt"))?;
    let path = dir.join("field.bin");
    let bytes = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
    let field = VoxelField::from_snapshot(&bytes, &path.display().to_string())?;
    let scene = build_scene(&config)?;
    assign_views(&final_views(&field, &scene, &config)?, &scene.landscape)
}

/// Renders of a reference grid from each ring camera.
pub fn reference_views(grid: &DenseGrid, cameras: &[Camera], config: &ExperimentConfig) -> Result<Vec<RgbImage>> {
    let settings = config.render_settings();
    cameras
        .iter()
        .map(|cam| Ok(render_grid(grid, cam, &settings, None)?.color_image))
        .collect()
}

/// Silhouette masks of a hand from each camera.
pub fn masks(hand: &CapsuleHand, cameras: &[Camera]) -> Vec<GrayImage> {
    cameras.iter().map(|c| silhouette_mask(hand, c)).collect()
}
