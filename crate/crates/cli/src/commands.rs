use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use nemto_core::envmap::{presets, EnvironmentMap};
use nemto_core::image::{Image, Mask};
use nemto_core::math::Rgb;
use nemto_core::metrics::{chamfer_l1, evaluate_view, ImagePair, MetricReport};
use nemto_core::nn::Checkpoint;
use nemto_core::oracle::{generate_dataset, Dataset, DatasetSpec, Split, SyntheticScene};
use nemto_core::sdf::{extract_mesh as extract_surface, ShapeSpec, TriangleMesh, MAX_RESOLUTION, MIN_RESOLUTION};
use nemto_core::train::{train as run_training, Model, TrainConfig};

use crate::error::CliError;
use crate::{
    Crop, EnvPreset, EvalArgs, ExtractMeshArgs, GenerateArgs, MakeEnvArgs, Precision, SplitArg, TrainArgs,
    ViewSelection,
};

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn positive(v: f64, name: &str) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::usage(format!("--{name} must be positive, got {v}")))
    }
}

enum ShapeArg {
    Preset(ShapeSpec),
    File(PathBuf),
}

fn parse_shape(s: &str) -> Result<ShapeArg, CliError> {
    if let Some(file) = s.strip_prefix("csg:") {
        return Ok(ShapeArg::File(PathBuf::from(file)));
    }
    ShapeSpec::preset(s).map(ShapeArg::Preset).ok_or_else(|| {
        CliError::usage(format!(
            "unknown shape {s:?}; expected sphere, box, torus or csg:<file>"
        ))
    })
}

fn load_shape_file(path: &Path) -> Result<ShapeSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from(e).context(path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let spec: ShapeSpec = if is_toml {
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
    };
    spec.validate()?;
    Ok(spec)
}

pub fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    if a.views == 0 {
        return Err(CliError::usage("--views must be at least 1"));
    }
    if a.res == 0 {
        return Err(CliError::usage("--res must be at least 1"));
    }
    positive(a.ior, "ior")?;
    positive(a.radius, "radius")?;
    if !(a.fov > 0.0 && a.fov < 180.0) {
        return Err(CliError::usage(format!("--fov must lie in (0, 180), got {}", a.fov)));
    }
    if a.b_max == 0 {
        return Err(CliError::usage("--b-max must be at least 1"));
    }
    let shape = parse_shape(&a.shape)?;
    if let ShapeArg::File(p) = &shape {
        require_file(p, "shape file")?;
    }
    require_file(&a.env, "environment map")?;

    let shape = match shape {
        ShapeArg::Preset(s) => s,
        ShapeArg::File(p) => load_shape_file(&p)?,
    };
    let env = EnvironmentMap::load(&a.env).map_err(|e| CliError::from(e).context(a.env.display()))?;
    let mut scene = SyntheticScene::new(shape.to_field()?, env, a.ior);
    scene.b_max = a.b_max;
    let spec = DatasetSpec {
        n_views: a.views,
        width: a.res,
        height: a.res,
        fov_deg: a.fov,
        radius: a.radius,
        seed: a.seed,
    };
    let ds = generate_dataset(&scene, &spec, Some(&shape), &a.out)?;
    let train = ds.split(Split::Train).count();
    println!(
        "wrote {} views ({} train, {} test) at {}x{} to {}",
        ds.views.len(),
        train,
        ds.views.len() - train,
        a.res,
        a.res,
        a.out.display()
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    require_dir(&a.dataset, "dataset")?;
    if let Some(c) = &a.config {
        require_file(c, "config")?;
    }
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p).map_err(|e| CliError::from(e).context(p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(n) = a.iterations {
        config.iterations = n;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.freeze_geometry |= a.freeze_geometry;
    config.validate()?;

    let ds = Dataset::load(&a.dataset)?;
    let summary = match a.precision {
        Precision::F32 => run_training::<f32>(&ds, config, &a.out)?,
        Precision::F64 => run_training::<f64>(&ds, config, &a.out)?,
    };
    match summary.last {
        Some(r) => println!(
            "trained {} steps, final loss {:.6}; model written to {}",
            summary.steps,
            r.total,
            summary.model_path.display()
        ),
        None => println!(
            "no steps run; initialization written to {}",
            summary.model_path.display()
        ),
    }
    Ok(())
}

fn selected(split: SplitArg, s: Split) -> bool {
    match split {
        SplitArg::All => true,
        SplitArg::Train => s == Split::Train,
        SplitArg::Test => s == Split::Test,
    }
}

fn load_model(path: &Path) -> Result<Model<f64>, CliError> {
    let ckpt = Checkpoint::load(path).map_err(|e| CliError::from(e).context(path.display()))?;
    Model::from_checkpoint(&ckpt).map_err(|e| CliError::from(e).context(path.display()))
}

/// Output layout shared with datasets: `images/view_NNNN.{pfm,png}` and
/// `masks/view_NNNN.png`.
fn write_view(out: &Path, index: usize, image: &Image, mask: &Mask) -> Result<(), CliError> {
    let name = format!("view_{index:04}");
    let wrap = |p: PathBuf| move |e| CliError::from(e).context(p.display());
    let p = out.join("images").join(format!("{name}.pfm"));
    image.save_pfm(&p).map_err(wrap(p.clone()))?;
    let p = out.join("images").join(format!("{name}.png"));
    image.save_png(&p).map_err(wrap(p.clone()))?;
    let p = out.join("masks").join(format!("{name}.png"));
    mask.save_png(&p).map_err(wrap(p.clone()))?;
    Ok(())
}

/// Renders the selected views; `env` replaces the dataset's lighting.
pub fn render(v: &ViewSelection, env: Option<&PathBuf>) -> Result<(), CliError> {
    require_file(&v.checkpoint, "checkpoint")?;
    require_dir(&v.dataset, "dataset")?;
    if let Some(e) = env {
        require_file(e, "environment map")?;
    }
    let mut model = load_model(&v.checkpoint)?;
    let ds = Dataset::load(&v.dataset)?;
    model.ior_air = ds.meta.ior_air;
    let env = match env {
        Some(p) => EnvironmentMap::load(p).map_err(|e| CliError::from(e).context(p.display()))?,
        None => ds.env.clone(),
    };
    let views: Vec<_> = ds.views.iter().filter(|view| selected(v.split, view.split)).collect();
    if views.is_empty() {
        return Err(CliError::usage("no views in the requested split"));
    }
    let full = Crop {
        x: 0,
        y: 0,
        width: views[0].camera.width,
        height: views[0].camera.height,
    };
    let crop = v.crop.unwrap_or(full);
    for view in &views {
        let cam = &view.camera;
        if crop.x + crop.width > cam.width || crop.y + crop.height > cam.height {
            return Err(CliError::usage(format!(
                "--crop {},{},{},{} exceeds the {}x{} view",
                crop.x, crop.y, crop.width, crop.height, cam.width, cam.height
            )));
        }
    }
    for sub in ["images", "masks"] {
        fs::create_dir_all(v.out.join(sub))?;
    }
    for view in &views {
        let rays: Vec<_> = (0..crop.height)
            .flat_map(|y| (0..crop.width).map(move |x| (crop.x + x, crop.y + y)))
            .map(|(x, y)| view.camera.ray(x, y))
            .collect();
        let res = model.render_rays(&rays, &env);
        let w = crop.width;
        let image = Image::from_fn(w, crop.height, |x, y| res[y * w + x].radiance);
        let mask = Mask::from_fn(w, crop.height, |x, y| res[y * w + x].hit);
        write_view(&v.out, view.index, &image, &mask)?;
    }
    println!("rendered {} views to {}", views.len(), v.out.display());
    Ok(())
}

pub fn extract_mesh(a: &ExtractMeshArgs) -> Result<(), CliError> {
    if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&a.resolution) {
        return Err(CliError::usage(format!(
            "--resolution must lie in [{MIN_RESOLUTION}, {MAX_RESOLUTION}], got {}",
            a.resolution
        )));
    }
    require_file(&a.checkpoint, "checkpoint")?;
    let model = load_model(&a.checkpoint)?;
    let mesh = extract_surface(model.geometry.field(), a.resolution)?;
    mesh.save_obj(&a.out)
        .map_err(|e| CliError::from(e).context(a.out.display()))?;
    println!(
        "wrote {} vertices and {} triangles to {}",
        mesh.vertices.len(),
        mesh.faces.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none", flatten)]
    images: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    chamfer_l1: Option<f64>,
}

fn view_names(dir: &Path) -> Result<Vec<String>, CliError> {
    let images = dir.join("images");
    let mut names = Vec::new();
    for entry in fs::read_dir(&images).map_err(|e| CliError::from(e).context(images.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pfm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

fn load_image(path: &Path) -> Result<Image, CliError> {
    Image::load_pfm(path).map_err(|e| CliError::from(e).context(path.display()))
}

fn load_mask(path: &Path) -> Result<Option<Mask>, CliError> {
    if !path.is_file() {
        return Ok(None);
    }
    Mask::load_png(path)
        .map(Some)
        .map_err(|e| CliError::from(e).context(path.display()))
}

fn eval_images(pred: &Path, reference: &Path, masked: bool, tone_map: bool) -> Result<MetricReport, CliError> {
    let names = view_names(pred)?;
    if names.is_empty() {
        return Err(CliError::usage(format!(
            "no images under {}",
            pred.join("images").display()
        )));
    }
    let mut per_view = Vec::with_capacity(names.len());
    for name in &names {
        let file = format!("{name}.pfm");
        let ref_path = reference.join("images").join(&file);
        require_file(&ref_path, "reference image")?;
        let p = load_image(&pred.join("images").join(&file))?;
        let r = load_image(&ref_path)?;
        let mask_file = format!("{name}.png");
        let pm = load_mask(&pred.join("masks").join(&mask_file))?;
        let rm = load_mask(&reference.join("masks").join(&mask_file))?;
        if masked && rm.is_none() {
            return Err(CliError::usage(format!(
                "--masked needs {}",
                reference.join("masks").join(&mask_file).display()
            )));
        }
        let pair = ImagePair {
            name: name.clone(),
            pred: &p,
            reference: &r,
            mask: if masked { rm.as_ref() } else { None },
            masks: pm.as_ref().zip(rm.as_ref()),
        };
        per_view.push(evaluate_view(&pair, tone_map).map_err(|e| CliError::from(e).context(name))?);
    }
    Ok(MetricReport::new(per_view))
}

fn eval_meshes(pred: &Path, reference: &Path, samples: usize, seed: u64) -> Result<f64, CliError> {
    let load = |p: &Path| TriangleMesh::load_obj(p).map_err(|e| CliError::from(e).context(p.display()));
    let (a, b) = (load(pred)?, load(reference)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pa = a.sample_points(samples, &mut rng);
    let pb = b.sample_points(samples, &mut rng);
    Ok(chamfer_l1(&pa, &pb)?)
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    if a.pred.is_none() && a.mesh.is_none() {
        return Err(CliError::usage(
            "nothing to evaluate: pass --pred/--ref and/or --mesh/--ref-mesh",
        ));
    }
    if a.samples == 0 {
        return Err(CliError::usage("--samples must be at least 1"));
    }
    if let (Some(p), Some(r)) = (&a.pred, &a.reference) {
        require_dir(p, "prediction")?;
        require_dir(r, "reference")?;
    }
    if let (Some(p), Some(r)) = (&a.mesh, &a.ref_mesh) {
        require_file(p, "mesh")?;
        require_file(r, "reference mesh")?;
    }

    let images = match (&a.pred, &a.reference) {
        (Some(p), Some(r)) => Some(eval_images(p, r, a.masked, !a.linear)?),
        _ => None,
    };
    let chamfer = match (&a.mesh, &a.ref_mesh) {
        (Some(p), Some(r)) => Some(eval_meshes(p, r, a.samples, a.seed)?),
        _ => None,
    };
    if let Some(r) = &images {
        print!("{}", r.to_tsv());
    }
    if let Some(c) = chamfer {
        println!("chamfer_l1\t{c:.6e}");
    }
    if let Some(path) = &a.report {
        let report = EvalReport {
            images,
            chamfer_l1: chamfer,
        };
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| CliError::from(e).context(path.display()))?;
    }
    Ok(())
}

fn parse_rgb(s: &str) -> Result<Rgb, CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::usage(format!("--value {s:?}: {e}")))?;
    let c = match v[..] {
        [x] => Rgb::splat(x),
        [r, g, b] => Rgb::new(r, g, b),
        _ => return Err(CliError::usage("--value takes one or three numbers")),
    };
    if (0..3).any(|i| !(c[i] >= 0.0 && c[i].is_finite())) {
        return Err(CliError::usage("--value must be non-negative and finite"));
    }
    Ok(c)
}

pub fn make_env(a: &MakeEnvArgs) -> Result<(), CliError> {
    if a.width < 2 || a.height < 2 {
        return Err(CliError::usage("--width and --height must be at least 2"));
    }
    let value = parse_rgb(&a.value)?;
    let env = match a.preset {
        EnvPreset::Constant => EnvironmentMap::constant(a.width, a.height, value),
        EnvPreset::Sky => EnvironmentMap::from_fn(a.width, a.height, presets::sky),
        EnvPreset::Studio => EnvironmentMap::from_fn(a.width, a.height, presets::studio),
        EnvPreset::Checker => EnvironmentMap::from_fn(a.width, a.height, presets::checker),
        EnvPreset::Gradient => EnvironmentMap::from_fn(a.width, a.height, presets::gradient),
    }?;
    let is_png = a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let saved = if is_png {
        env.save_png(&a.out)
    } else {
        env.save_pfm(&a.out)
    };
    saved.map_err(|e| CliError::from(e).context(a.out.display()))?;
    println!("wrote {}x{} environment map to {}", a.width, a.height, a.out.display());
    Ok(())
}
