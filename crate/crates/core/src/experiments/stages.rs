use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{BackendKind, DatasetKind, RunManifest, TaskKind};
use super::plot::scatter_svg;
use super::stream_seed;
use super::toy::toy_scene;
use crate::degradations::{
    add_awgn, apply_mask, central_mask, degrade_colorization, g_inverse_colorization, sample_blind_sigma,
    sample_random_masks_with, ForwardModel, Mask, RandomMaskParams,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse_colorization, fuse_lifted, hallucination_report};
use crate::imagestack::{
    centered_to_lab, convert_range, lab_to_centered, lab_to_rgb, load_array, load_image, load_mask_raster, rgb_to_lab,
    save_array, save_image, save_mask_raster, save_phi_heatmap, ColorSpace, FloatArray, Image, PhiMap, Shape,
    ValueRange,
};
use crate::metrics::{
    analyze_phi, auc_colorization, psnr, ssim, write_scatter_data, AbGrid, MetricRow, MetricTable, PhiRecord,
};
use crate::phinet::{PhiNet, TrainSample, Trainer};
use crate::priors::{
    fit_dictionary, invert, pretrain_autoencoder, project_dictionary, project_dictionary_observed, DictionaryPrior,
    GaussianPixelPrior, MultiCodeGenerator,
};

const DONE: &str = ".done";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prepare,
    Invert,
    Train,
    Evaluate,
    AnalyzePhi,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Prepare, Stage::Invert, Stage::Train, Stage::Evaluate, Stage::AnalyzePhi, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Invert => "invert",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::AnalyzePhi => "analyze-phi",
            Stage::Report => "report",
        }
    }
}

/// Paths inside one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.toml")
    }

    fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    fn items(&self) -> PathBuf {
        self.data().join("items.toml")
    }

    fn item(&self, split: Split, id: &str) -> PathBuf {
        self.data().join(split.dir()).join(id)
    }

    fn pool_item(&self, id: &str) -> PathBuf {
        self.data().join("prior_pool").join(id)
    }

    fn prior_model(&self) -> PathBuf {
        self.root.join("priors").join("model")
    }

    pub fn prior_item(&self, split: Split, id: &str) -> PathBuf {
        self.root.join("priors").join(split.dir()).join(id)
    }

    fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint_state(&self) -> PathBuf {
        self.checkpoints().join("state")
    }

    pub fn history(&self) -> PathBuf {
        self.checkpoints().join("history.toml")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn metrics(&self) -> PathBuf {
        self.eval().join("metrics.tsv")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    if let Some(parent) = p.parent() {
        mkdir(parent)?;
    }
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn read(p: &Path) -> Result<String> {
    if !p.exists() {
        return Err(Error::MissingArtifact(p.to_path_buf()));
    }
    fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

fn to_toml<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("records are serializable")
}

fn from_toml<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T> {
    toml::from_str(&read(p)?).map_err(|e| Error::Decode { path: p.to_path_buf(), reason: e.to_string() })
}

fn marked(dir: &Path) -> bool {
    dir.join(DONE).exists()
}

fn mark(dir: &Path) -> Result<()> {
    write(&dir.join(DONE), "")
}

fn save_img(p: &Path, img: &Image) -> Result<()> {
    save_array(p, &FloatArray::from_image(img))
}

fn load_img(p: &Path, range: ValueRange, space: ColorSpace) -> Result<Image> {
    if !p.exists() {
        return Err(Error::MissingArtifact(p.to_path_buf()));
    }
    load_array(p)?.into_image(range, space)
}

/// One image of the train or test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub split: Split,
    /// Blind-AWGN level in 8-bit units, recorded for analysis only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ItemIndex {
    task: TaskKind,
    side: usize,
    prior_pool: Vec<String>,
    items: Vec<ItemRecord>,
}

pub fn load_items(run: &RunDir) -> Result<Vec<ItemRecord>> {
    Ok(from_toml::<ItemIndex>(&run.items())?.items)
}

/// The task's coordinate conventions: loss space is centered RGB, or
/// centered Lab `(L/100 - 0.5, a/256, b/256)` for colorization.
struct Task {
    kind: TaskKind,
}

impl Task {
    fn loss_tags(&self) -> (ValueRange, ColorSpace) {
        match self.kind {
            TaskKind::Colorization => (ValueRange::Centered, ColorSpace::Lab),
            _ => (ValueRange::Centered, ColorSpace::Rgb),
        }
    }

    fn observation_tags(&self) -> (ValueRange, ColorSpace) {
        match self.kind {
            TaskKind::Colorization => (ValueRange::Lab, ColorSpace::Gray),
            _ => (ValueRange::Centered, ColorSpace::Rgb),
        }
    }

    /// Clean unit-range RGB into loss space.
    fn target(&self, x: &Image) -> Result<Image> {
        match self.kind {
            TaskKind::Colorization => lab_to_centered(&rgb_to_lab(x)?),
            _ => convert_range(x, ValueRange::Centered),
        }
    }

    /// `g⁻¹(y)` in loss space; for colorization `(L_c, 0, 0)`.
    fn fidelity(&self, y: &Image) -> Result<Image> {
        match self.kind {
            TaskKind::Colorization => {
                let mut data: Vec<f64> = y.data().iter().map(|l| l / 100.0 - 0.5).collect();
                data.resize(3 * y.data().len(), 0.0);
                Image::new(Shape::new(3, y.height(), y.width()), data, ValueRange::Centered, ColorSpace::Lab)
            }
            _ => Ok(y.clone()),
        }
    }

    fn net_input(&self, y: &Image) -> Result<Image> {
        match self.kind {
            TaskKind::Colorization => convert_range(&g_inverse_colorization(y)?, ValueRange::Centered),
            _ => Ok(y.clone()),
        }
    }

    /// Loss-space image to unit-range RGB. RGB tasks are not clamped so
    /// metrics see exactly what the fusion produced.
    fn display(&self, img: &Image) -> Result<Image> {
        match self.kind {
            TaskKind::Colorization => lab_to_rgb(&clamp_lab(&centered_to_lab(img)?)?),
            _ => convert_range(img, ValueRange::Unit),
        }
    }
}

fn clamp_lab(img: &Image) -> Result<Image> {
    let p = img.shape().plane();
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if i < p { v.clamp(0.0, 100.0) } else { v.clamp(-128.0, 127.0) })
        .collect();
    Image::new(img.shape(), data, ValueRange::Lab, ColorSpace::Lab)
}

fn clamp_unit(img: &Image) -> Result<Image> {
    img.map(|v| v.clamp(0.0, 1.0))
}

fn check_manifest(run: &RunDir, m: &RunManifest) -> Result<()> {
    let stored = RunManifest::load(run.manifest())?;
    let strip = |m: &RunManifest| RunManifest { output_dir: None, ..m.clone() };
    if strip(&stored) != strip(m) {
        return Err(Error::Manifest(format!("{} was prepared from a different manifest", run.root().display())));
    }
    Ok(())
}

fn item_mask(run: &RunDir, item: &ItemRecord) -> Result<Mask> {
    load_mask_raster(run.item(item.split, &item.id).join("mask.png"))
}

fn load_clean(dir: &Path) -> Result<Image> {
    load_img(&dir.join("clean.pfaf"), ValueRange::Unit, ColorSpace::Rgb)
}

fn directory_images(path: &Path) -> Result<Vec<Image>> {
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for f in &files {
        let img = load_image(f)?;
        if img.space() != ColorSpace::Rgb {
            return Err(Error::InvalidArgument(format!("{} is not an RGB image", f.display())));
        }
        if let Some(first) = out.first().map(|i: &Image| i.shape()) {
            img.require_shape(first)?;
        }
        out.push(convert_range(&img, ValueRange::Unit)?);
    }
    Ok(out)
}

/// Materializes the split and the degraded observations.
pub fn cmd_prepare(m: &RunManifest, run: &RunDir) -> Result<()> {
    m.validate()?;
    if marked(&run.data()) {
        check_manifest(run, m)?;
        log::info!("prepare: already complete");
        return Ok(());
    }
    mkdir(run.root())?;
    write(&run.manifest(), &m.to_toml())?;
    let d = &m.dataset;
    let (mut images, pool) = match d.kind {
        DatasetKind::Toy => {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(m.seed, "dataset"));
            let images = (0..d.count).map(|_| toy_scene(d.side, &mut rng)).collect::<Result<Vec<_>>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(m.seed, "prior-pool"));
            let pool = (0..d.prior_pool).map(|_| toy_scene(d.side, &mut rng)).collect::<Result<Vec<_>>>()?;
            (images, pool)
        }
        DatasetKind::Directory => {
            let path = d.path.as_deref().expect("validated");
            let mut images = directory_images(path)?;
            images.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(m.seed, "split")));
            (images, Vec::new())
        }
    };
    let n = images.len();
    let n_train = (n as f64 * d.train_fraction).round() as usize;
    let n_test = (n as f64 * d.test_fraction).round() as usize;
    if n_train == 0 || n_test == 0 || n_train + n_test > n {
        return Err(Error::InsufficientData(format!(
            "{n} images cannot be split {}/{} into non-empty train and test sets",
            d.train_fraction, d.test_fraction
        )));
    }
    images.truncate(n_train + n_test);
    let shape = images[0].shape();
    let task = Task { kind: m.task };
    let mut deg_rng = ChaCha8Rng::seed_from_u64(stream_seed(m.seed, "degradation"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(stream_seed(m.seed, "noise"));
    let central = match m.task {
        TaskKind::InpaintingCentral => {
            Some(central_mask(shape.height, shape.width, m.central_patch.unwrap_or(shape.height.min(shape.width) / 4))?)
        }
        _ => None,
    };
    let mut items = Vec::with_capacity(images.len());
    for (i, x) in images.iter().enumerate() {
        let split = if i < n_train { Split::Train } else { Split::Test };
        let id = format!("{i:05}");
        let dir = run.item(split, &id);
        save_img(&dir.join("clean.pfaf"), x)?;
        save_image(dir.join("clean.png"), x)?;
        let mut sigma = None;
        let y = match m.task {
            TaskKind::AwgnBlind => {
                let s = sample_blind_sigma(&mut deg_rng);
                sigma = Some(s);
                add_awgn(&task.target(x)?, s, &mut noise_rng)?
            }
            TaskKind::InpaintingCentral | TaskKind::InpaintingRandom => {
                let mask = match &central {
                    Some(c) => c.clone(),
                    None => sample_random_masks_with(
                        shape.height,
                        shape.width,
                        &RandomMaskParams::scaled_to(shape.height.min(shape.width)),
                        &mut deg_rng,
                    )?,
                };
                save_mask_raster(dir.join("mask.png"), &mask)?;
                apply_mask(&task.target(x)?, &mask)?
            }
            TaskKind::Colorization => degrade_colorization(x)?,
        };
        save_img(&dir.join("observation.pfaf"), &y)?;
        let shown = match m.task {
            TaskKind::Colorization => g_inverse_colorization(&y)?,
            _ => clamp_unit(&convert_range(&y, ValueRange::Unit)?)?,
        };
        save_image(dir.join("observation.png"), &shown)?;
        items.push(ItemRecord { id, split, sigma });
    }
    let mut pool_ids = Vec::with_capacity(pool.len());
    for (i, x) in pool.iter().enumerate() {
        let id = format!("p{i:05}");
        save_img(&run.pool_item(&id).join("clean.pfaf"), x)?;
        pool_ids.push(id);
    }
    let index = ItemIndex { task: m.task, side: shape.height, prior_pool: pool_ids, items };
    write(&run.items(), &to_toml(&index))?;
    mark(&run.data())?;
    log::info!("prepare: {n_train} train / {n_test} test images");
    Ok(())
}

fn require_prepared(m: &RunManifest, run: &RunDir) -> Result<ItemIndex> {
    if !marked(&run.data()) {
        return Err(Error::MissingArtifact(run.data().join(DONE)));
    }
    check_manifest(run, m)?;
    from_toml(&run.items())
}

enum FittedPrior {
    Gaussian(GaussianPixelPrior),
    Dictionary(DictionaryPrior),
    Generator(MultiCodeGenerator),
}

fn fit_images(run: &RunDir, index: &ItemIndex) -> Result<Vec<Image>> {
    if index.prior_pool.is_empty() {
        index
            .items
            .iter()
            .filter(|it| it.split == Split::Train)
            .map(|it| load_clean(&run.item(it.split, &it.id)))
            .collect()
    } else {
        index.prior_pool.iter().map(|id| load_clean(&run.pool_item(id))).collect()
    }
}

fn fit_prior(m: &RunManifest, run: &RunDir, index: &ItemIndex, task: &Task) -> Result<FittedPrior> {
    let dir = run.prior_model();
    let (range, space) = task.loss_tags();
    if marked(&dir) {
        return Ok(match m.prior.backend {
            BackendKind::Gaussian => {
                let mean = load_img(&dir.join("mean.pfaf"), range, space)?;
                let std = load_array(dir.join("std.pfaf"))?.data.to_f64();
                FittedPrior::Gaussian(GaussianPixelPrior::new(mean, std)?)
            }
            BackendKind::Dictionary => FittedPrior::Dictionary(DictionaryPrior::load(&dir)?),
            BackendKind::Generator => FittedPrior::Generator(MultiCodeGenerator::load(&dir)?),
        });
    }
    let clean = fit_images(run, index)?;
    let fitted = match m.prior.backend {
        BackendKind::Gaussian => {
            let targets = clean.iter().map(|x| task.target(x)).collect::<Result<Vec<_>>>()?;
            let p = GaussianPixelPrior::fit(&targets)?;
            save_img(&dir.join("mean.pfaf"), p.mean())?;
            save_array(dir.join("std.pfaf"), &FloatArray::f64(vec![p.std().len()], p.std().to_vec())?)?;
            FittedPrior::Gaussian(p)
        }
        BackendKind::Dictionary => {
            let targets = clean.iter().map(|x| task.target(x)).collect::<Result<Vec<_>>>()?;
            let p = fit_dictionary(&targets, m.prior.atoms)?;
            p.save(&dir)?;
            FittedPrior::Dictionary(p)
        }
        BackendKind::Generator => {
            let spec = m.prior.generator.as_ref().expect("validated");
            let rgb = clean.iter().map(|x| convert_range(x, ValueRange::Centered)).collect::<Result<Vec<_>>>()?;
            let cfg = crate::priors::PretrainConfig { seed: stream_seed(m.seed, "generator"), ..spec.pretrain };
            let (gen, history) = pretrain_autoencoder(spec.arch, &rgb, &cfg)?;
            log::info!("invert: generator pretraining loss {:?}", history.last());
            gen.save(&dir)?;
            FittedPrior::Generator(gen)
        }
    };
    mark(&dir)?;
    Ok(fitted)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct PriorLoss {
    initial_loss: f64,
    final_loss: f64,
}

/// Entries of the loss-space image that the observation constrains.
fn observed_flags(kind: TaskKind, shape: Shape, mask: Option<&Mask>) -> Vec<bool> {
    let plane = shape.plane();
    (0..shape.len())
        .map(|i| match kind {
            TaskKind::Colorization => i < plane,
            TaskKind::InpaintingCentral | TaskKind::InpaintingRandom => mask.is_none_or(|m| m.bits()[i % plane] == 0),
            TaskKind::AwgnBlind => true,
        })
        .collect()
}

/// Pixel-term observation loss of a loss-space candidate.
fn observed_loss(candidate: &Image, fidelity: &Image, flags: &[bool]) -> f64 {
    candidate
        .data()
        .iter()
        .zip(fidelity.data())
        .zip(flags)
        .filter(|(_, &f)| f)
        .map(|((a, b), _)| (a - b) * (a - b))
        .sum()
}

fn with_lightness(prior: &Image, fidelity: &Image) -> Result<Image> {
    let p = prior.shape().plane();
    let mut data = prior.data().to_vec();
    data[..p].copy_from_slice(&fidelity.data()[..p]);
    Image::new(prior.shape(), data, prior.range(), prior.space())
}

fn compute_prior(
    m: &RunManifest,
    task: &Task,
    fitted: &FittedPrior,
    y: &Image,
    mask: Option<&Mask>,
    id: &str,
) -> Result<(Image, PriorLoss)> {
    let fid = task.fidelity(y)?;
    let flags = observed_flags(m.task, fid.shape(), mask);
    match fitted {
        FittedPrior::Gaussian(p) => {
            let l = observed_loss(p.mean(), &fid, &flags);
            Ok((p.mean().clone(), PriorLoss { initial_loss: l, final_loss: l }))
        }
        FittedPrior::Dictionary(d) => {
            let mut prior = match m.task {
                TaskKind::AwgnBlind => project_dictionary(d, &fid, m.prior.topk)?,
                _ => project_dictionary_observed(d, &fid, &flags, m.prior.ridge)?,
            };
            if m.task == TaskKind::Colorization {
                prior = with_lightness(&prior, &fid)?;
            }
            let initial_loss = observed_loss(&d.mean_image(), &fid, &flags);
            Ok((prior.clone(), PriorLoss { initial_loss, final_loss: observed_loss(&prior, &fid, &flags) }))
        }
        FittedPrior::Generator(gen) => {
            let mut cfg = m.inversion_config()?;
            cfg.seed = stream_seed(m.seed, &format!("invert/{id}"));
            let (f, target_y) = match m.task {
                TaskKind::Colorization => {
                    let l = Image::new(
                        Shape::new(1, y.height(), y.width()),
                        fid.channel(0).to_vec(),
                        ValueRange::Centered,
                        ColorSpace::Gray,
                    )?;
                    (ForwardModel::Luminance, l)
                }
                TaskKind::InpaintingCentral | TaskKind::InpaintingRandom => {
                    (ForwardModel::Mask(mask.expect("inpainting items carry a mask").clone()), y.clone())
                }
                TaskKind::AwgnBlind => (ForwardModel::Identity, y.clone()),
            };
            let res = invert(gen, &target_y, &f, &cfg)?;
            let prior = match m.task {
                TaskKind::Colorization => {
                    let rgb = clamp_unit(&convert_range(&res.projection, ValueRange::Unit)?)?;
                    with_lightness(&lab_to_centered(&rgb_to_lab(&rgb)?)?, &fid)?
                }
                _ => res.projection.clone(),
            };
            Ok((prior, PriorLoss { initial_loss: res.initial_loss, final_loss: res.final_loss }))
        }
    }
}

fn load_observation(run: &RunDir, task: &Task, item: &ItemRecord) -> Result<Image> {
    let (r, s) = task.observation_tags();
    load_img(&run.item(item.split, &item.id).join("observation.pfaf"), r, s)
}

/// Prior projection of every observation; resumable per item.
pub fn cmd_invert(m: &RunManifest, run: &RunDir) -> Result<()> {
    let index = require_prepared(m, run)?;
    let task = Task { kind: m.task };
    let fitted = fit_prior(m, run, &index, &task)?;
    if let FittedPrior::Generator(g) = &fitted {
        let s = g.output_shape();
        if (s.height, s.width) != (index.side, index.side) || s.channels != 3 {
            return Err(Error::shape(Shape::new(3, index.side, index.side), s));
        }
    }
    let mut done = 0;
    for item in &index.items {
        let dir = run.prior_item(item.split, &item.id);
        if marked(&dir) {
            continue;
        }
        let y = load_observation(run, &task, item)?;
        let mask = if m.task.is_inpainting() { Some(item_mask(run, item)?) } else { None };
        let (prior, loss) = compute_prior(m, &task, &fitted, &y, mask.as_ref(), &item.id)?;
        save_img(&dir.join("prior.pfaf"), &prior)?;
        save_image(dir.join("prior.png"), &clamp_unit(&task.display(&prior)?)?)?;
        write(&dir.join("loss.toml"), &to_toml(&loss))?;
        mark(&dir)?;
        done += 1;
    }
    log::info!("invert: {done} new priors, {} total", index.items.len());
    Ok(())
}

fn load_prior(run: &RunDir, task: &Task, item: &ItemRecord) -> Result<Image> {
    let dir = run.prior_item(item.split, &item.id);
    if !marked(&dir) {
        return Err(Error::MissingArtifact(dir.join(DONE)));
    }
    let (r, s) = task.loss_tags();
    load_img(&dir.join("prior.pfaf"), r, s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HistoryFile {
    epoch_loss: Vec<f64>,
    lr_trace: Vec<f64>,
}

/// Trains the φ estimator on the train split, checkpointing every epoch.
pub fn cmd_train(m: &RunManifest, run: &RunDir) -> Result<()> {
    let index = require_prepared(m, run)?;
    if marked(&run.checkpoints()) {
        log::info!("train: already complete");
        return Ok(());
    }
    let task = Task { kind: m.task };
    let mut data = Vec::new();
    for item in index.items.iter().filter(|it| it.split == Split::Train) {
        let prior = load_prior(run, &task, item)?;
        let y = load_observation(run, &task, item)?;
        let x = load_clean(&run.item(item.split, &item.id))?;
        data.push(TrainSample::new(task.net_input(&y)?, task.fidelity(&y)?, prior, task.target(&x)?)?);
    }
    let cfg = crate::phinet::TrainConfig { seed: stream_seed(m.seed, "train-shuffle"), ..m.train };
    let state = run.checkpoint_state();
    let mut trainer = if state.join("checkpoint.toml").exists() {
        let t = Trainer::load(&state)?;
        if *t.config() != cfg || t.net().config() != m.phinet.config() {
            return Err(Error::Manifest(format!("checkpoint in {} belongs to another configuration", state.display())));
        }
        log::info!("train: resuming after epoch {}", t.epoch());
        t
    } else {
        Trainer::new(PhiNet::new(m.phinet.config(), stream_seed(m.seed, "phinet-init"))?, cfg)?
    };
    trainer.run(&data, |t| {
        log::info!("train: epoch {} loss {:.6}", t.epoch(), t.history().epoch_loss.last().copied().unwrap_or(f64::NAN));
        t.save(&state)
    })?;
    let h = trainer.history();
    write(&run.history(), &to_toml(&HistoryFile { epoch_loss: h.epoch_loss.clone(), lr_trace: h.lr_trace.clone() }))?;
    mark(&run.checkpoints())
}

/// Per-image evaluation values, as stored in `eval/records.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub sigma: Option<f64>,
    pub mean_phi: f64,
    pub psnr: f64,
    pub prior_psnr: f64,
    pub fidelity_psnr: f64,
    pub ssim: f64,
    pub prior_ssim: f64,
    pub fidelity_ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    /// IoU of `{φ̄ > 0.5}` with the inpainting hole.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_iou: Option<f64>,
    pub fraction_above_half: f64,
}

#[derive(Serialize, Deserialize)]
struct EvalFile {
    records: Vec<EvalRecord>,
}

pub fn load_eval_records(run: &RunDir) -> Result<Vec<EvalRecord>> {
    Ok(from_toml::<EvalFile>(&run.eval().join("records.toml"))?.records)
}

fn mask_iou(phi: &PhiMap, mask: &Mask) -> f64 {
    let avg = phi.channel_average();
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, &b) in avg.iter().zip(mask.bits()) {
        let (a, b) = (*p > 0.5, b == 1);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fused, prior-only and fidelity-only outputs and their metrics for the
/// test split. Priors and the network are only read.
pub fn cmd_evaluate(m: &RunManifest, run: &RunDir) -> Result<MetricTable> {
    let index = require_prepared(m, run)?;
    if !marked(&run.checkpoints()) {
        return Err(Error::MissingArtifact(run.checkpoints().join(DONE)));
    }
    let (net, _) = Trainer::load(run.checkpoint_state())?.into_parts();
    let task = Task { kind: m.task };
    let colorization = m.task == TaskKind::Colorization;
    let mut extra_columns: Vec<String> = ["prior_ssim", "fidelity_psnr", "fidelity_ssim"].map(String::from).to_vec();
    if colorization {
        extra_columns.extend(["prior_auc", "fidelity_auc"].map(String::from));
    }
    if m.task.is_inpainting() {
        extra_columns.push("mask_iou".into());
    }
    let mut table = MetricTable { extra_columns, rows: Vec::new() };
    let mut records = Vec::new();
    let mut halluc = String::from("image_id\tmean_phi\tfraction_above_half\tmax_channel_mean\n");
    for item in index.items.iter().filter(|it| it.split == Split::Test) {
        let y = load_observation(run, &task, item)?;
        let prior = load_prior(run, &task, item)?;
        let x = load_clean(&run.item(item.split, &item.id))?;
        let fid = task.fidelity(&y)?;
        let phi = net.predict_phi(&task.net_input(&y)?)?;
        let fused = if colorization {
            lab_to_centered(&fuse_colorization(&y, &phi, &clamp_lab(&centered_to_lab(&prior)?)?)?)?
        } else {
            fuse_lifted(&fid, &phi, &prior)?
        };
        let (fused_d, prior_d, fid_d) = (task.display(&fused)?, task.display(&prior)?, task.display(&fid)?);
        let out = run.eval().join(&item.id);
        save_img(&out.join("fused.pfaf"), &fused)?;
        save_image(out.join("fused.png"), &clamp_unit(&fused_d)?)?;
        save_array(out.join("phi.pfaf"), &FloatArray::from_phi(&phi))?;
        save_phi_heatmap(out.join("phi.png"), &phi)?;
        let report = hallucination_report(&phi);
        write(&out.join("hallucination.txt"), &report.to_string())?;
        let max_ch = report.channel_means.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(halluc, "{}\t{:.6}\t{:.6}\t{max_ch:.6}", item.id, report.mean, report.fraction_above_half);

        let p = |a: &Image| psnr(a, &x, 1.0);
        let s = |a: &Image| ssim(a, &x, 1.0);
        let (psnr_f, psnr_p, psnr_g) = (p(&fused_d)?, p(&prior_d)?, p(&fid_d)?);
        let (ssim_f, ssim_p, ssim_g) = (s(&fused_d)?, s(&prior_d)?, s(&fid_d)?);
        let mut extra = vec![Some(ssim_p), Some(psnr_g.value()), Some(ssim_g)];
        let mut auc = None;
        if colorization {
            let gt = AbGrid::from_lab(&rgb_to_lab(&x)?)?;
            let a = |img: &Image| -> Result<f64> {
                Ok(auc_colorization(&AbGrid::from_lab(&clamp_lab(&centered_to_lab(img)?)?)?, &gt)?.auc)
            };
            auc = Some(a(&fused)?);
            extra.push(Some(a(&prior)?));
            extra.push(Some(a(&fid)?));
        }
        let mut iou = None;
        if m.task.is_inpainting() {
            iou = Some(mask_iou(&phi, &item_mask(run, item)?));
            extra.push(iou);
        }
        table.rows.push(MetricRow {
            image_id: item.id.clone(),
            task: m.task.name().into(),
            psnr: psnr_f,
            ssim: ssim_f,
            auc,
            mean_phi: report.mean,
            sigma_n: item.sigma,
            prior_psnr: psnr_p,
            extra,
        });
        records.push(EvalRecord {
            id: item.id.clone(),
            sigma: item.sigma,
            mean_phi: report.mean,
            psnr: psnr_f.value(),
            prior_psnr: psnr_p.value(),
            fidelity_psnr: psnr_g.value(),
            ssim: ssim_f,
            prior_ssim: ssim_p,
            fidelity_ssim: ssim_g,
            auc,
            mask_iou: iou,
            fraction_above_half: report.fraction_above_half,
        });
    }
    if records.is_empty() {
        return Err(Error::InsufficientData("empty test split".into()));
    }
    write(&run.eval().join("records.toml"), &to_toml(&EvalFile { records }))?;
    write(&run.eval().join("hallucination.tsv"), &halluc)?;
    write(&run.metrics(), &table.to_tsv())?;
    log::info!("evaluate: {} test images", table.rows.len());
    Ok(table)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorrelationFile {
    images: usize,
    r_phi_sigma: f64,
    r_phi_priorpsnr: f64,
}

const PLOTS: [&str; 2] = ["phi_vs_sigma.svg", "phi_vs_prior_psnr.svg"];

/// Correlation of mean φ with the noise level and with the prior quality.
pub fn cmd_analyze_phi(m: &RunManifest, run: &RunDir) -> Result<crate::metrics::PhiAnalysis> {
    if m.task != TaskKind::AwgnBlind {
        return Err(Error::InvalidArgument(format!(
            "analyze-phi needs an awgn-blind run, this one is {}",
            m.task.name()
        )));
    }
    require_prepared(m, run)?;
    let records = load_eval_records(run)?;
    let phi_records: Vec<PhiRecord> = records
        .iter()
        .map(|r| PhiRecord {
            image_id: r.id.clone(),
            mean_phi: r.mean_phi,
            sigma_n: r.sigma.unwrap_or(f64::NAN),
            prior_psnr: r.prior_psnr,
        })
        .collect();
    let analysis = analyze_phi(&phi_records)?;
    let dir = run.plots();
    write_scatter_data(&analysis, &dir)?;
    let pts =
        |f: fn(&PhiRecord) -> f64| -> Vec<(f64, f64)> { phi_records.iter().map(|r| (f(r), r.mean_phi)).collect() };
    write(
        &dir.join(PLOTS[0]),
        &scatter_svg(
            "mean phi vs noise level",
            "sigma_n (8-bit units)",
            "mean phi",
            &pts(|r| r.sigma_n),
            analysis.r_phi_sigma,
        ),
    )?;
    write(
        &dir.join(PLOTS[1]),
        &scatter_svg(
            "mean phi vs prior PSNR",
            "prior PSNR (dB)",
            "mean phi",
            &pts(|r| r.prior_psnr),
            analysis.r_phi_priorpsnr,
        ),
    )?;
    let corr = CorrelationFile {
        images: phi_records.len(),
        r_phi_sigma: analysis.r_phi_sigma,
        r_phi_priorpsnr: analysis.r_phi_priorpsnr,
    };
    write(&dir.join("correlation.toml"), &to_toml(&corr))?;
    log::info!(
        "analyze-phi: r(phi, sigma) = {:.4}, r(phi, prior psnr) = {:.4}",
        corr.r_phi_sigma,
        corr.r_phi_priorpsnr
    );
    Ok(analysis)
}

/// Writes `report.md` from whatever the run directory holds. Missing
/// plots are listed in the report and turn the result into an error.
pub fn cmd_report(run: &RunDir) -> Result<PathBuf> {
    if !run.root().is_dir() {
        return Err(Error::Report(format!("run directory {} does not exist", run.root().display())));
    }
    if !run.metrics().exists() {
        return Err(Error::Report(format!("no evaluated run in {}", run.root().display())));
    }
    let manifest = read(&run.manifest())?;
    let m = RunManifest::from_toml(&manifest)?;
    let metrics = read(&run.metrics())?;
    let mut out = String::new();
    let _ = writeln!(out, "# Run report: {}\n", m.task.name());
    let _ = writeln!(out, "## Manifest\n\n```toml\n{}```\n", manifest);
    if run.history().exists() {
        let h: HistoryFile = from_toml(&run.history())?;
        let _ = writeln!(out, "## Training\n");
        for (i, l) in h.epoch_loss.iter().enumerate() {
            let _ = writeln!(out, "- epoch {}: loss {l:.6}", i + 1);
        }
        out.push('\n');
    }
    let _ = writeln!(out, "## Metrics\n\n```text\n{metrics}```\n");
    let halluc = run.eval().join("hallucination.tsv");
    if halluc.exists() {
        let _ = writeln!(out, "## Hallucination summary\n\n```text\n{}```\n", read(&halluc)?);
    }
    let mut missing = Vec::new();
    if m.task == TaskKind::AwgnBlind {
        let _ = writeln!(out, "## Fusion map analysis\n");
        let corr = run.plots().join("correlation.toml");
        if corr.exists() {
            let c: CorrelationFile = from_toml(&corr)?;
            let _ = writeln!(out, "- images: {}", c.images);
            let _ = writeln!(out, "- r(mean phi, sigma_n) = {:.6}", c.r_phi_sigma);
            let _ = writeln!(out, "- r(mean phi, prior PSNR) = {:.6}\n", c.r_phi_priorpsnr);
        }
        for p in PLOTS {
            if run.plots().join(p).exists() {
                let _ = writeln!(out, "![{p}](plots/{p})");
            } else {
                let _ = writeln!(out, "- MISSING plot: plots/{p}");
                missing.push(p);
            }
        }
    }
    write(&run.report(), &out)?;
    if !missing.is_empty() {
        return Err(Error::Report(format!("report written, but plots are missing: {}", missing.join(", "))));
    }
    Ok(run.report())
}

/// Runs every stage in order. Analysis runs only for blind AWGN.
pub fn run_all(m: &RunManifest, run: &RunDir) -> Result<MetricTable> {
    cmd_prepare(m, run)?;
    cmd_invert(m, run)?;
    cmd_train(m, run)?;
    let table = cmd_evaluate(m, run)?;
    if m.task == TaskKind::AwgnBlind {
        cmd_analyze_phi(m, run)?;
    }
    cmd_report(run)?;
    Ok(table)
}
