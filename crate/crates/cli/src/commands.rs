use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use voxelseg::nifti::{parse_header, read_nifti, write_nifti, Datatype};
use voxelseg::normalize::normalize_label;
use voxelseg::patching::sample_training_patches;
use voxelseg::trainer::{init_model, predict_volume, threshold, train, Sample};
use voxelseg::volume::{AffineSource, Volume};
use voxelseg::{checkpoint, losses, phantom, reorient, OrientationCode, RngStream};

use crate::config::{read_input, thread_budget, PipelineConfig};
use crate::CliError;

pub fn read_volume(path: &Path) -> Result<(Volume, Datatype)> {
    let bytes = read_input(path)?;
    let ctx = || format!("parsing {}", path.display());
    let header = parse_header(&bytes).with_context(ctx)?;
    let volume = read_nifti(&bytes).with_context(ctx)?;
    Ok((volume, header.datatype))
}

pub fn write_volume(path: &Path, v: &Volume, datatype: Datatype) -> Result<()> {
    let bytes = write_nifti(v, datatype).with_context(|| format!("encoding {}", path.display()))?;
    write_file(path, &bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Refuse to write over any of `inputs`.
fn guard_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let Ok(target) = out.canonicalize() else {
        return Ok(());
    };
    for input in inputs {
        if input.canonicalize().is_ok_and(|p| p == target) {
            return Err(CliError::Usage(format!(
                "output {} would overwrite an input",
                out.display()
            ))
            .into());
        }
    }
    Ok(())
}

pub fn info(input: &Path) -> Result<()> {
    let (v, dt) = read_volume(input)?;
    let join = |xs: &[String]| xs.join(",");
    println!("extents={}", join(&v.extents().map(|e| e.to_string())));
    println!("spacing={}", join(&v.spacing().map(|s| format!("{s:.6}"))));
    println!("orientation={}", v.orientation());
    println!("datatype={}", dt.name());
    let source = match v.affine_source() {
        AffineSource::Sform => "sform",
        AffineSource::PixdimFallback => "pixdim",
    };
    println!("affine_source={source}");
    Ok(())
}

pub fn phantom(cfg: &PipelineConfig, out: &Path, count: u64) -> Result<()> {
    for offset in 0..count {
        let pc = phantom::PhantomConfig {
            seed: cfg.phantom.seed + offset,
            ..cfg.phantom.clone()
        };
        let (image, mask) = phantom::generate(&pc)?;
        let stem = format!("phantom_{:03}", pc.seed);
        write_volume(
            &out.join(format!("{stem}_image.nii")),
            &image,
            Datatype::Float32,
        )?;
        write_volume(
            &out.join(format!("{stem}_mask.nii")),
            &mask,
            Datatype::Uint8,
        )?;
        println!("{stem} foreground={}", mask.data().iter().sum::<f64>());
    }
    Ok(())
}

pub fn reorient_cmd(input: &Path, out: &Path, target: OrientationCode) -> Result<()> {
    guard_output(out, &[input])?;
    let (v, dt) = read_volume(input)?;
    write_volume(out, &reorient(&v, target), dt)
}

pub fn normalize(cfg: &PipelineConfig, input: &Path, out: &Path, label: bool) -> Result<()> {
    guard_output(out, &[input])?;
    let (v, _) = read_volume(input)?;
    if label {
        write_volume(out, &normalize_label(&v), Datatype::Uint8)
    } else {
        write_volume(out, &cfg.normalization.apply(&v)?, Datatype::Float32)
    }
}

#[derive(Serialize)]
struct PatchManifest<'a> {
    source_image: &'a Path,
    source_label: &'a Path,
    seed: u64,
    patch_size: [usize; 3],
    fg_fraction: f64,
    patches: Vec<PatchEntry>,
}

#[derive(Serialize)]
struct PatchEntry {
    index: usize,
    center: [usize; 3],
    foreground_centered: bool,
    contains_foreground: bool,
    image: String,
    label: String,
}

pub fn sample_patches(
    cfg: &PipelineConfig,
    image: &Path,
    label: &Path,
    count: usize,
    out: &Path,
) -> Result<()> {
    let (img, _) = read_volume(image)?;
    let (lbl, _) = read_volume(label)?;
    let spec = cfg.patch.spec();
    let mut rng = RngStream::new(cfg.train.seed);
    let patches = sample_training_patches(&img, &lbl, &spec, count, &mut rng)?;
    let mut entries = Vec::with_capacity(patches.len());
    for (index, p) in patches.iter().enumerate() {
        let (image_name, label_name) = (
            format!("patch_{index:04}_image.nii"),
            format!("patch_{index:04}_label.nii"),
        );
        write_volume(&out.join(&image_name), &p.image, Datatype::Float32)?;
        write_volume(&out.join(&label_name), &p.label, Datatype::Uint8)?;
        entries.push(PatchEntry {
            index,
            center: p.center,
            foreground_centered: p.foreground_centered,
            contains_foreground: p.contains_foreground(),
            image: image_name,
            label: label_name,
        });
    }
    let manifest = PatchManifest {
        source_image: image,
        source_label: label,
        seed: cfg.train.seed,
        patch_size: spec.size,
        fg_fraction: spec.fg_fraction,
        patches: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&out.join("manifest.json"), format!("{json}\n").as_bytes())?;
    println!("wrote {count} patches to {}", out.display());
    Ok(())
}

fn load_samples(images: &[PathBuf], labels: &[PathBuf]) -> Result<Vec<Sample>> {
    if images.len() != labels.len() {
        return Err(CliError::Usage(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        ))
        .into());
    }
    images
        .iter()
        .zip(labels)
        .map(|(i, l)| {
            Ok(Sample {
                image: read_volume(i)?.0,
                label: read_volume(l)?.0,
            })
        })
        .collect()
}

pub struct TrainInputs {
    pub images: Vec<PathBuf>,
    pub labels: Vec<PathBuf>,
    pub held_out_images: Vec<PathBuf>,
    pub held_out_labels: Vec<PathBuf>,
    pub log: Option<PathBuf>,
}

pub fn train_cmd(cfg: &PipelineConfig, inputs: TrainInputs, out: &Path) -> Result<()> {
    let pick =
        |flag: Vec<PathBuf>, io: &[PathBuf]| if flag.is_empty() { io.to_vec() } else { flag };
    let train_set = load_samples(
        &pick(inputs.images, &cfg.io.train_images),
        &pick(inputs.labels, &cfg.io.train_labels),
    )?;
    let held_out = load_samples(
        &pick(inputs.held_out_images, &cfg.io.held_out_images),
        &pick(inputs.held_out_labels, &cfg.io.held_out_labels),
    )?;
    let tc = cfg.train_config()?;
    let model = init_model(cfg.model.clone(), tc.seed)?;
    let inference = cfg.patch.inference(thread_budget()?);
    let (model, log) = train(&train_set, &held_out, model, &tc, &inference)?;

    let log_path = inputs.log.unwrap_or_else(|| out.with_extension("log"));
    write_file(out, &checkpoint::save(&model))?;
    write_file(&log_path, log.to_string().as_bytes())?;
    let last_loss = log.losses().last().copied().unwrap_or(f64::NAN);
    print!("steps={} final_loss={last_loss:.6}", tc.steps);
    if let Some((_, dice)) = log.evals().last() {
        print!(" held_out_dice={dice:.6}");
    }
    println!();
    Ok(())
}

pub fn predict(
    cfg: &PipelineConfig,
    image: &Path,
    model_path: &Path,
    out: &Path,
    mask_out: Option<PathBuf>,
) -> Result<()> {
    let mask_out = mask_out.unwrap_or_else(|| {
        let stem = out
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("prediction");
        out.with_file_name(format!("{stem}_mask.nii"))
    });
    guard_output(out, &[image, model_path])?;
    guard_output(&mask_out, &[image, model_path])?;
    let (v, _) = read_volume(image)?;
    let model = checkpoint::load(&read_input(model_path)?)
        .with_context(|| format!("loading {}", model_path.display()))?;
    let probs = predict_volume(&model, &v, &cfg.patch.inference(thread_budget()?))?;
    write_volume(out, &probs, Datatype::Float32)?;
    let mask = threshold(&probs);
    write_volume(&mask_out, &mask, Datatype::Uint8)?;
    println!("foreground={}", mask.data().iter().sum::<f64>());
    Ok(())
}

pub fn evaluate(cfg: &PipelineConfig, prediction: &Path, truth: &Path) -> Result<()> {
    let (p, _) = read_volume(prediction)?;
    let (g, _) = read_volume(truth)?;
    let c = losses::counts(p.data(), g.data())?;
    println!("jaccard={:.6}", losses::jaccard(&c));
    println!("dice={:.6}", losses::dice(&c));
    println!("tversky={:.6}", losses::tversky(&c, &cfg.tversky()?));
    Ok(())
}
