//! Synthetic multi-view datasets on disk.
//!
//! Layout:
//! ```text
//! cameras.json            [{position, look_at, up, fov_deg, width, height, split}]
//! images/view_0000.pfm    linear HDR render
//! images/view_0000.png    tone-mapped preview
//! masks/view_0000.png     0/255 hit mask
//! env.pfm                 environment map
//! meta.json               {ior_object, ior_air, seed, n_views, ...}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{fibonacci_cameras, Camera, DEFAULT_CAMERA_RADIUS, DEFAULT_FOV_DEG};
use super::{render_image, SyntheticScene, DEFAULT_B_MAX};
use crate::envmap::EnvironmentMap;
use crate::error::DatasetError;
use crate::image::{Image, Mask};
use crate::math::Vec3;
use crate::sdf::ShapeSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// How to lay out and render the views.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_views: usize,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub radius: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_views: 200,
            width: 128,
            height: 128,
            fov_deg: DEFAULT_FOV_DEG,
            radius: DEFAULT_CAMERA_RADIUS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub ior_object: f64,
    pub ior_air: f64,
    pub seed: u64,
    pub n_views: usize,
    /// Analytic ground-truth shape, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<ShapeSpec>,
    #[serde(default = "default_b_max")]
    pub b_max: usize,
}

fn default_b_max() -> usize {
    DEFAULT_B_MAX
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CameraEntry {
    #[serde(flatten)]
    camera: Camera,
    split: Split,
}

#[derive(Clone, Debug)]
pub struct View {
    pub index: usize,
    pub camera: Camera,
    pub split: Split,
    pub image: Image,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub env: EnvironmentMap,
    pub views: Vec<View>,
}

fn image_path(root: &Path, i: usize, ext: &str) -> PathBuf {
    root.join("images").join(format!("view_{i:04}.{ext}"))
}

fn mask_path(root: &Path, i: usize) -> PathBuf {
    root.join("masks").join(format!("view_{i:04}.png"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn img_err(path: &Path) -> impl FnOnce(crate::error::ImageError) -> DatasetError + '_ {
    move |source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Seeded split: the first `ceil(n/2)` indices of a shuffle train, the rest test.
pub fn split_assignment(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Test; n];
    for &i in &order[..n.div_ceil(2)] {
        out[i] = Split::Train;
    }
    out
}

/// Renders `spec.n_views` views of `scene` into `out_dir`.
pub fn generate_dataset(
    scene: &SyntheticScene,
    spec: &DatasetSpec,
    shape: Option<&ShapeSpec>,
    out_dir: impl AsRef<Path>,
) -> Result<Dataset, DatasetError> {
    let root = out_dir.as_ref();
    if spec.n_views == 0 {
        return Err(DatasetError::Invalid("n_views must be at least 1".into()));
    }
    for sub in ["images", "masks"] {
        let p = root.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let center = scene.field.bounding_box().center();
    let cams = fibonacci_cameras(spec.n_views, spec.radius, center, spec.fov_deg, spec.width, spec.height);
    let splits = split_assignment(spec.n_views, spec.seed);

    let mut views = Vec::with_capacity(cams.len());
    for (i, (camera, split)) in cams.into_iter().zip(splits).enumerate() {
        let (image, mask) = render_image(scene, &camera);
        let p = image_path(root, i, "pfm");
        image.save_pfm(&p).map_err(img_err(&p))?;
        let p = image_path(root, i, "png");
        image.save_png(&p).map_err(img_err(&p))?;
        let p = mask_path(root, i);
        mask.save_png(&p).map_err(img_err(&p))?;
        views.push(View {
            index: i,
            camera,
            split,
            image,
            mask,
        });
    }

    let entries: Vec<CameraEntry> = views
        .iter()
        .map(|v| CameraEntry {
            camera: v.camera.clone(),
            split: v.split,
        })
        .collect();
    let p = root.join("cameras.json");
    fs::write(&p, serde_json::to_string_pretty(&entries)?).map_err(io_err(&p))?;
    let p = root.join("env.pfm");
    scene.env.save_pfm(&p).map_err(img_err(&p))?;
    let meta = DatasetMeta {
        ior_object: scene.ior_object,
        ior_air: scene.ior_air,
        seed: spec.seed,
        n_views: spec.n_views,
        shape: shape.cloned(),
        b_max: scene.b_max,
    };
    let p = root.join("meta.json");
    fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(io_err(&p))?;

    Ok(Dataset {
        root: root.to_path_buf(),
        meta,
        env: scene.env.clone(),
        views,
    })
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let root = dir.as_ref();
        let read = |name: &str| {
            let p = root.join(name);
            fs::read_to_string(&p).map_err(io_err(&p))
        };
        let meta: DatasetMeta = serde_json::from_str(&read("meta.json")?)?;
        let entries: Vec<CameraEntry> = serde_json::from_str(&read("cameras.json")?)?;
        if entries.len() != meta.n_views {
            return Err(DatasetError::Invalid(format!(
                "cameras.json lists {} views but meta.json says {}",
                entries.len(),
                meta.n_views
            )));
        }
        let p = root.join("env.pfm");
        let env = EnvironmentMap::load_pfm(&p).map_err(img_err(&p))?;

        let mut views = Vec::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            e.camera
                .validate()
                .map_err(|m| DatasetError::Invalid(format!("view {i}: {m}")))?;
            let p = image_path(root, i, "pfm");
            let image = Image::load_pfm(&p).map_err(img_err(&p))?;
            let p = mask_path(root, i);
            let mask = Mask::load_png(&p).map_err(img_err(&p))?;
            let (w, h) = (e.camera.width, e.camera.height);
            if (image.width(), image.height()) != (w, h) || (mask.width(), mask.height()) != (w, h) {
                return Err(DatasetError::Invalid(format!(
                    "view {i}: image size does not match its camera"
                )));
            }
            views.push(View {
                index: i,
                camera: e.camera,
                split: e.split,
                image,
                mask,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            meta,
            env,
            views,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &View> {
        self.views.iter().filter(move |v| v.split == split)
    }

    /// The oracle scene, when the dataset records its analytic shape.
    pub fn scene(&self) -> Option<Result<SyntheticScene, DatasetError>> {
        let shape = self.meta.shape.as_ref()?;
        Some(
            shape
                .to_field()
                .map(|field| SyntheticScene {
                    field,
                    env: self.env.clone(),
                    ior_object: self.meta.ior_object,
                    ior_air: self.meta.ior_air,
                    b_max: self.meta.b_max,
                })
                .map_err(|e| DatasetError::Invalid(e.to_string())),
        )
    }

    /// Center of the camera targets.
    pub fn look_at(&self) -> Vec3<f64> {
        self.views
            .first()
            .map_or(Vec3::zero(), |v| Vec3::from_array(v.camera.look_at))
    }
}
