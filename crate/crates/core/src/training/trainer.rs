use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Access, Dataset, Domain, Sample, Split};
use crate::losses::{
    category_weights, discriminator_loss, generator_adversarial_loss, margin_contrastive_loss_reduced,
    segmentation_loss, self_information_map, total_generator_loss, LossWeights,
};
use crate::metrics::{angle_histogram, mean_foreground_dice, AngleHistogram};
use crate::models::{Bound, Discriminator, Generator, GeneratorConfig};
use crate::numerics::{Graph, Tensor, Var};
use crate::prototypes::{
    cosine_scores, prototypes_from_means, refine_prototypes, ClassMeans, FeatureMap, PrototypeSet,
};
use crate::pseudo_labels::{assign_pseudo_labels, LabelMap};

use super::{Adam, Checkpoint, Sgd, TrainConfig, TrainError};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const NAN_DUMP: &str = "nan_dump.txt";

/// Images per generator call when no gradients are needed.
const INFER_CHUNK: usize = 8;
/// Bins of the angle histograms tracked during training.
const ANGLE_BINS: usize = 36;

/// Mean positive-prototype angle over a probe set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleSummary {
    pub mean: f64,
    pub fraction_below_quarter_pi: f64,
    pub pixels: usize,
}

impl AngleSummary {
    fn from_hist(h: &AngleHistogram) -> Self {
        Self {
            mean: h.mean(),
            fraction_below_quarter_pi: h.fraction_below_quarter_pi(),
            pixels: h.total(),
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Sgd,
    pub opt_d: Adam,
    pub prototypes: Option<PrototypeSet>,
    /// Completed iterations.
    pub iteration: u64,
    pub best_val_dice: Option<f64>,
    pub best_iteration: Option<u64>,
    pub angle_start: Option<AngleSummary>,
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for the batch draw of one iteration; stream 0 belongs to init.
fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(iteration + 1);
    r
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, num_categories: usize) -> Self {
        let mut rng = init_rng(cfg.seed);
        let generator = Generator::new(
            GeneratorConfig {
                num_categories,
                ..GeneratorConfig::default()
            },
            &mut rng,
        );
        let discriminator = Discriminator::new(num_categories, &mut rng);
        let opt_g = Sgd::new(cfg.lr_g, cfg.momentum, cfg.weight_decay, generator.params().tensors());
        let opt_d = Adam::new(cfg.lr_d, discriminator.params().tensors());
        Self {
            generator,
            discriminator,
            opt_g,
            opt_d,
            prototypes: None,
            iteration: 0,
            best_val_dice: None,
            best_iteration: None,
            angle_start: None,
        }
    }

    /// Read a checkpoint together with the config it was written with.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig), TrainError> {
        let ck = Checkpoint::load(path)?;
        let cfg = TrainConfig::from_kv(&ck.config)?;
        Ok((Self::from_checkpoint(&ck, &cfg)?, cfg))
    }

    pub fn num_categories(&self) -> usize {
        self.generator.config().num_categories
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut tensors = Vec::new();
        let g = self.generator.params();
        let d = self.discriminator.params();
        for (n, t) in g.iter() {
            tensors.push((format!("gen.{n}"), t.clone()));
        }
        for (n, t) in d.iter() {
            tensors.push((format!("disc.{n}"), t.clone()));
        }
        let like = |t: &Tensor, v: &[f64]| Tensor::new(t.shape().to_vec(), v.to_vec()).expect("shape");
        for ((n, t), v) in g.iter().zip(&self.opt_g.velocity) {
            tensors.push((format!("opt_g.velocity.{n}"), like(t, v)));
        }
        for (((n, t), m), v) in d.iter().zip(&self.opt_d.m).zip(&self.opt_d.v) {
            tensors.push((format!("opt_d.m.{n}"), like(t, m)));
            tensors.push((format!("opt_d.v.{n}"), like(t, v)));
        }
        tensors.push(("opt_d.t".into(), Tensor::scalar(self.opt_d.t as f64)));
        if let (Some(d), Some(i)) = (self.best_val_dice, self.best_iteration) {
            tensors.push(("train.best".into(), Tensor::from_vec(vec![d, i as f64])));
        }
        if let Some(a) = self.angle_start {
            tensors.push((
                "train.angle_start".into(),
                Tensor::from_vec(vec![a.mean, a.fraction_below_quarter_pi, a.pixels as f64]),
            ));
        }
        Checkpoint {
            tensors,
            config: cfg.to_kv(),
            iteration: self.iteration,
            prototypes: self.prototypes.clone(),
        }
    }

    /// Rebuild a state; optimizer hyperparameters come from `cfg`.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let missing = |what: &str| TrainError::CheckpointContent(what.to_string());
        let cls = ck.tensor("gen.cls.bias").ok_or_else(|| missing("gen.cls.bias"))?;
        let mut state = Self::new(cfg, cls.len());
        state.generator.params_mut().load(|n| ck.tensor(&format!("gen.{n}")))?;
        state
            .discriminator
            .params_mut()
            .load(|n| ck.tensor(&format!("disc.{n}")))?;
        let read = |name: String, len: usize| -> Result<Vec<f64>, TrainError> {
            let t = ck.tensor(&name).ok_or_else(|| missing(&name))?;
            if t.len() != len {
                return Err(missing(&name));
            }
            Ok(t.data().to_vec())
        };
        let g = state.generator.params().clone();
        for (i, (n, t)) in g.iter().enumerate() {
            state.opt_g.velocity[i] = read(format!("opt_g.velocity.{n}"), t.len())?;
        }
        let d = state.discriminator.params().clone();
        for (i, (n, t)) in d.iter().enumerate() {
            state.opt_d.m[i] = read(format!("opt_d.m.{n}"), t.len())?;
            state.opt_d.v[i] = read(format!("opt_d.v.{n}"), t.len())?;
        }
        state.opt_d.t = read("opt_d.t".into(), 1)?[0] as u64;
        if let Some(b) = ck.tensor("train.best") {
            if b.len() != 2 {
                return Err(missing("train.best"));
            }
            state.best_val_dice = Some(b.data()[0]);
            state.best_iteration = Some(b.data()[1] as u64);
        }
        if let Some(a) = ck.tensor("train.angle_start") {
            if a.len() != 3 {
                return Err(missing("train.angle_start"));
            }
            state.angle_start = Some(AngleSummary {
                mean: a.data()[0],
                fraction_below_quarter_pi: a.data()[1],
                pixels: a.data()[2] as usize,
            });
        }
        state.prototypes = ck.prototypes.clone();
        state.iteration = ck.iteration;
        Ok(state)
    }
}

/// Labeled source images stacked as `[n, h, w, 1]`.
#[derive(Clone, Debug)]
pub struct SourceBatch {
    pub images: Tensor,
    pub labels: Vec<LabelMap>,
}

/// Loss values of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct StepLosses {
    pub seg: f64,
    pub c_src: f64,
    pub c_trg: f64,
    pub adv: f64,
    pub disc: f64,
    pub total: f64,
    /// Fraction of target pixels that received a pseudo-label.
    pub assigned: f64,
}

fn image_dims(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

fn feature_maps(g: &Graph, flat: Var, n: usize, h: usize, w: usize) -> Vec<FeatureMap> {
    let d = g.value(flat).last_dim();
    g.value(flat)
        .data()
        .chunks(h * w * d)
        .take(n)
        .map(|c| FeatureMap::new(h, w, Tensor::new(vec![h * w, d], c.to_vec()).expect("shape")).expect("shape"))
        .collect()
}

fn check_finite(iteration: u64, pairs: &[(&str, f64)]) -> Result<(), TrainError> {
    match pairs.iter().find(|(_, v)| !v.is_finite()) {
        Some((what, v)) => Err(TrainError::NonFinite {
            iteration,
            what: format!("{what} loss ({v})"),
            dump: None,
        }),
        None => Ok(()),
    }
}

/// Warm-up iteration: generator on segmentation + adversarial terms, then
/// one discriminator update.
pub fn phase1_step(
    state: &mut TrainState,
    src: &SourceBatch,
    trg: &Tensor,
    cfg: &TrainConfig,
) -> Result<StepLosses, TrainError> {
    step(state, src, trg, cfg, false)
}

/// Full iteration: pseudo-labels from the current prototypes, the complete
/// generator objective, a discriminator update, then prototype refinement on
/// the source batch.
pub fn phase2_step(
    state: &mut TrainState,
    src: &SourceBatch,
    trg: &Tensor,
    cfg: &TrainConfig,
) -> Result<StepLosses, TrainError> {
    if state.prototypes.is_none() {
        return Err(TrainError::NoPrototypes);
    }
    step(state, src, trg, cfg, true)
}

/// Generator graph of one iteration, evaluated but not yet differentiated.
struct Objective {
    g: Graph,
    params: Bound,
    total: Var,
    losses: StepLosses,
    probs_src: Var,
    probs_trg: Var,
    src_maps: Vec<FeatureMap>,
    pseudo: Vec<(FeatureMap, LabelMap)>,
}

/// Build the generator objective. Without prototypes this is the warm-up
/// objective (segmentation and adversarial terms only); with them, target
/// pseudo-labels are drawn from the current features and both contrastive
/// terms are added.
fn objective(
    gen: &Generator,
    disc: &Discriminator,
    protos: Option<&PrototypeSet>,
    src: &SourceBatch,
    trg: &Tensor,
    cfg: &TrainConfig,
) -> Result<Objective, TrainError> {
    let (n, h, w) = image_dims(&src.images);
    let nt = trg.shape()[0];
    let hw = h * w;
    let l = gen.config().num_categories;
    let d = gen.config().feature_dim;

    let mut g = Graph::new();
    let params = gen.bind(&mut g, true);
    let xs = g.constant(src.images.clone());
    let xt = g.constant(trg.clone());
    let os = gen.forward(&mut g, &params, xs)?;
    let ot = gen.forward(&mut g, &params, xt)?;

    let ps = g.reshape(os.probs, &[n * hw, l])?;
    let label_refs: Vec<&LabelMap> = src.labels.iter().collect();
    let weights = category_weights(&label_refs);
    let mut seg_terms = Vec::with_capacity(n);
    for (i, labels) in src.labels.iter().enumerate() {
        let pi = g.slice_rows(ps, i * hw, hw)?;
        let s = segmentation_loss(&mut g, pi, labels, &weights)?;
        seg_terms.push(g.reshape(s, &[1])?);
    }
    let seg_all = g.concat_rows(&seg_terms)?;
    let seg = g.sum(seg_all)?;

    let info_t = self_information_map(&mut g, ot.probs)?;
    let adv = generator_adversarial_loss(&mut g, disc, info_t)?;

    let mut pseudo = Vec::new();
    let mut src_maps = Vec::new();
    let (c_src, c_trg, loss_w) = if let Some(protos) = protos {
        let fs = g.reshape(os.features, &[n * hw, d])?;
        let ft = g.reshape(ot.features, &[nt * hw, d])?;
        src_maps = feature_maps(&g, fs, n, h, w);
        for fm in feature_maps(&g, ft, nt, h, w) {
            let scores = cosine_scores(&fm, protos)?;
            let (labels, _) = assign_pseudo_labels(&scores, cfg.delta_th)?;
            pseudo.push((fm, labels));
        }
        let mut cs = Vec::with_capacity(n);
        for (i, labels) in src.labels.iter().enumerate() {
            let f = g.slice_rows(fs, i * hw, hw)?;
            let c =
                margin_contrastive_loss_reduced(&mut g, f, labels, protos, cfg.m, cfg.tau, cfg.contrastive_reduction)?;
            cs.push(g.reshape(c, &[1])?);
        }
        let mut ct = Vec::with_capacity(nt);
        for (i, (_, labels)) in pseudo.iter().enumerate() {
            let f = g.slice_rows(ft, i * hw, hw)?;
            let c =
                margin_contrastive_loss_reduced(&mut g, f, labels, protos, cfg.m, cfg.tau, cfg.contrastive_reduction)?;
            ct.push(g.reshape(c, &[1])?);
        }
        let cs = g.concat_rows(&cs)?;
        let ct = g.concat_rows(&ct)?;
        (g.sum(cs)?, g.sum(ct)?, cfg.weights())
    } else {
        let zero = g.constant(Tensor::scalar(0.0));
        (
            zero,
            zero,
            LossWeights {
                gamma: 0.0,
                beta: 0.0,
                lambda: cfg.lambda,
            },
        )
    };
    let total = total_generator_loss(&mut g, seg, c_src, c_trg, adv, &loss_w)?;
    let scalar = |v: Var| g.value(v).item().expect("scalar");
    let mut losses = StepLosses {
        seg: scalar(seg),
        c_src: scalar(c_src),
        c_trg: scalar(c_trg),
        adv: scalar(adv),
        total: scalar(total),
        ..StepLosses::default()
    };
    if protos.is_some() {
        let assigned: usize = pseudo.iter().map(|(_, l)| l.assigned_count()).sum();
        losses.assigned = assigned as f64 / (nt * hw) as f64;
    }
    Ok(Objective {
        g,
        params,
        total,
        losses,
        probs_src: os.probs,
        probs_trg: ot.probs,
        src_maps,
        pseudo,
    })
}

/// Generator loss terms for a batch without updating anything. Phase 2
/// terms are included when `phase2` is set, using the current prototypes.
pub fn generator_objective(
    state: &TrainState,
    src: &SourceBatch,
    trg: &Tensor,
    cfg: &TrainConfig,
    phase2: bool,
) -> Result<StepLosses, TrainError> {
    let protos = if phase2 {
        Some(state.prototypes.as_ref().ok_or(TrainError::NoPrototypes)?)
    } else {
        None
    };
    Ok(objective(&state.generator, &state.discriminator, protos, src, trg, cfg)?.losses)
}

fn step(
    state: &mut TrainState,
    src: &SourceBatch,
    trg: &Tensor,
    cfg: &TrainConfig,
    phase2: bool,
) -> Result<StepLosses, TrainError> {
    let protos = if phase2 {
        Some(state.prototypes.as_ref().ok_or(TrainError::NoPrototypes)?)
    } else {
        None
    };
    let Objective {
        mut g,
        params,
        total,
        mut losses,
        probs_src,
        probs_trg,
        src_maps,
        pseudo,
    } = objective(&state.generator, &state.discriminator, protos, src, trg, cfg)?;
    check_finite(
        state.iteration,
        &[
            ("segmentation", losses.seg),
            ("source contrastive", losses.c_src),
            ("target contrastive", losses.c_trg),
            ("adversarial", losses.adv),
            ("generator total", losses.total),
        ],
    )?;
    g.backward(total)?;
    let grads = params.grads(&g);
    let probs_src = g.value(probs_src).clone();
    let probs_trg = g.value(probs_trg).clone();
    drop(g);

    // Discriminator on the self-information of the predictions made before
    // the generator update.
    let disc = &state.discriminator;
    let mut gd = Graph::new();
    let cs = gd.constant(probs_src);
    let ct = gd.constant(probs_trg);
    let is = self_information_map(&mut gd, cs)?;
    let it = self_information_map(&mut gd, ct)?;
    let dp = disc.bind(&mut gd, true);
    let ld = discriminator_loss(&mut gd, disc, &dp, is, it)?;
    losses.disc = gd.value(ld).item().expect("scalar");
    check_finite(state.iteration, &[("discriminator", losses.disc)])?;
    gd.backward(ld)?;
    let dgrads = dp.grads(&gd);
    drop(gd);

    state.opt_g.step(state.generator.params_mut().tensors_mut(), &grads);
    state
        .opt_d
        .step(state.discriminator.params_mut().tensors_mut(), &dgrads);

    if let Some(protos) = &state.prototypes {
        if phase2 {
            let mut maps = src_maps;
            let mut labels: Vec<LabelMap> = src.labels.clone();
            if cfg.refine_with_target {
                for (fm, l) in pseudo {
                    maps.push(fm);
                    labels.push(l);
                }
            }
            state.prototypes = Some(refine_prototypes(protos, &maps, &labels)?);
        }
    }
    Ok(losses)
}

/// Class-mean prototypes of the generator's features over labeled samples.
pub fn bootstrap_prototypes(gen: &Generator, source: &[Sample], alpha: f64) -> Result<PrototypeSet, TrainError> {
    let mut acc = ClassMeans::new(gen.config().num_categories, gen.config().feature_dim);
    for (ci, chunk) in source.chunks(INFER_CHUNK).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (maps, _) = gen.infer(&Sample::batch(&refs))?;
        for (j, (fm, s)) in maps.iter().zip(chunk).enumerate() {
            let mask = s
                .mask
                .as_ref()
                .ok_or_else(|| TrainError::EmptyData("source masks".into()))?;
            let cats: Vec<usize> = mask.iter().map(|&c| c as usize).collect();
            let labels = LabelMap::ground_truth(s.height, s.width, gen.config().num_categories, &cats)?;
            acc.add(ci * INFER_CHUNK + j, fm, &labels)?;
        }
    }
    Ok(prototypes_from_means(&acc, alpha)?)
}

/// Argmax category masks for every sample.
pub fn predict(gen: &Generator, samples: &[Sample]) -> Result<Vec<Vec<u8>>, TrainError> {
    let l = gen.config().num_categories;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFER_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (_, probs) = gen.infer(&Sample::batch(&refs))?;
        let hw = chunk[0].height * chunk[0].width;
        for img in probs.data().chunks(hw * l) {
            out.push(img.chunks(l).map(|row| argmax(row) as u8).collect());
        }
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Angles between every pixel feature and the prototype of its most similar
/// category.
pub fn target_angles(
    gen: &Generator,
    protos: &PrototypeSet,
    images: &[Sample],
    bins: usize,
) -> Result<AngleHistogram, TrainError> {
    let mut hist = AngleHistogram::empty(bins)?;
    for chunk in images.chunks(INFER_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (maps, _) = gen.infer(&Sample::batch(&refs))?;
        for fm in &maps {
            let (labels, _) = assign_pseudo_labels(&cosine_scores(fm, protos)?, -1.0)?;
            hist.merge(&angle_histogram(fm, &labels, protos, bins)?);
        }
    }
    Ok(hist)
}

/// Where a run reads and writes.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
}

/// One row of `loss_curve.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub iteration: u64,
    pub losses: StepLosses,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub iterations: u64,
    pub best_iteration: Option<u64>,
    pub best_val_dice: Option<f64>,
    pub angle_start: Option<AngleSummary>,
    pub angle_end: Option<AngleSummary>,
    pub rows: Vec<LossRow>,
    pub state: TrainState,
}

const CURVE_HEADER: &str = "iteration,seg,contrast_src,contrast_trg,adv,disc,val_dice";

fn curve_csv(rows: &[LossRow]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.losses;
        let _ = write!(
            s,
            "{},{:?},{:?},{:?},{:?},{:?},",
            r.iteration, l.seg, l.c_src, l.c_trg, l.adv, l.disc
        );
        if let Some(v) = r.val_dice {
            let _ = write!(s, "{v:?}");
        }
        s.push('\n');
    }
    s
}

fn read_curve(path: &Path, upto: u64) -> Result<Vec<LossRow>, TrainError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(TrainError::io(path, e)),
    };
    let bad = || TrainError::CheckpointContent(format!("loss curve {}", path.display()));
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let iteration: u64 = f[0].parse().map_err(|_| bad())?;
        if iteration > upto {
            break;
        }
        rows.push(LossRow {
            iteration,
            losses: StepLosses {
                seg: num(1)?,
                c_src: num(2)?,
                c_trg: num(3)?,
                adv: num(4)?,
                disc: num(5)?,
                ..StepLosses::default()
            },
            val_dice: if f[6].is_empty() { None } else { Some(num(6)?) },
        });
    }
    Ok(rows)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), TrainError> {
    std::fs::write(path, contents).map_err(|e| TrainError::io(path, e))
}

fn dump_batch(
    out_dir: &Path,
    iteration: u64,
    err: &TrainError,
    src_idx: &[usize],
    trg_idx: &[usize],
    src: &[Sample],
    trg: &[Sample],
) -> Option<PathBuf> {
    let mut s = format!("iteration {iteration}\nerror {err}\n");
    let mut describe = |tag: &str, idx: &[usize], pool: &[Sample]| {
        for &i in idx {
            let img = &pool[i].image;
            let (lo, hi) = img
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            let _ = writeln!(
                s,
                "{tag} index {i} name {} min {lo:?} max {hi:?} mean {mean:?}",
                pool[i].name
            );
        }
    };
    describe("source", src_idx, src);
    describe("target", trg_idx, trg);
    let path = out_dir.join(NAN_DUMP);
    std::fs::write(&path, s).ok().map(|_| path)
}

/// Run phase 1, the prototype bootstrap and phase 2, validating on the
/// target validation split every `eval_every` iterations.
///
/// Writes `best.ckpt`, `last.ckpt` and `loss_curve.csv` into the output
/// directory. Target-domain masks are read only for validation, through a
/// separate evaluation-access handle.
pub fn train(cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let train_ds = Dataset::open(&opts.data_dir, Access::Training)?;
    let src = train_ds.labeled(Split::Train, Domain::Source)?;
    let trg = train_ds.images(Split::Train, Domain::Target)?;
    if src.is_empty() {
        return Err(TrainError::EmptyData("source training images".into()));
    }
    if trg.is_empty() {
        return Err(TrainError::EmptyData("target training images".into()));
    }
    let val = Dataset::open(&opts.data_dir, Access::Evaluation)?.labeled(Split::Val, Domain::Target)?;
    let val_masks: Vec<Vec<u8>> = val.iter().map(|s| s.mask.clone().expect("evaluation access")).collect();

    let num_categories = src
        .iter()
        .flat_map(|s| s.mask.as_ref().expect("labeled").iter().copied())
        .max()
        .map_or(0, |m| m as usize + 1)
        .max(2);
    let src_labels: Vec<LabelMap> = src
        .iter()
        .map(|s| {
            let cats: Vec<usize> = s.mask.as_ref().expect("labeled").iter().map(|&c| c as usize).collect();
            LabelMap::ground_truth(s.height, s.width, num_categories, &cats)
        })
        .collect::<Result<_, _>>()?;
    // angle statistics are tracked on held-out target images when available
    let probe: &[Sample] = if val.is_empty() {
        &trg[..trg.len().min(20)]
    } else {
        &val
    };

    std::fs::create_dir_all(&opts.out_dir).map_err(|e| TrainError::io(&opts.out_dir, e))?;
    let curve_path = opts.out_dir.join(LOSS_CURVE);
    let (mut state, mut rows) = match &opts.resume {
        Some(p) => {
            let st = TrainState::from_checkpoint(&Checkpoint::load(p)?, cfg)?;
            // resuming into a fresh directory carries the earlier history along
            if let Some(prev) = p.parent().filter(|d| *d != opts.out_dir.as_path()) {
                for name in [LOSS_CURVE, BEST_CHECKPOINT] {
                    let (from, to) = (prev.join(name), opts.out_dir.join(name));
                    if from.is_file() && !to.exists() {
                        std::fs::copy(&from, &to).map_err(|e| TrainError::io(&to, e))?;
                    }
                }
            }
            let rows = read_curve(&curve_path, st.iteration)?;
            (st, rows)
        }
        None => (TrainState::new(cfg, num_categories), Vec::new()),
    };
    if state.num_categories() != num_categories {
        return Err(TrainError::Config(format!(
            "checkpoint has {} categories but the data has {num_categories}",
            state.num_categories()
        )));
    }

    let total = cfg.total_iters();
    let bs = cfg.batch_size;
    while state.iteration < total {
        let it = state.iteration;
        let phase2 = it >= cfg.phase1_iters;
        if phase2 && state.prototypes.is_none() {
            let protos = bootstrap_prototypes(&state.generator, &src, cfg.alpha)?;
            state.angle_start = Some(AngleSummary::from_hist(&target_angles(
                &state.generator,
                &protos,
                probe,
                ANGLE_BINS,
            )?));
            state.prototypes = Some(protos);
        }
        let mut rng = iteration_rng(cfg.seed, it);
        let si: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..src.len())).collect();
        let ti: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..trg.len())).collect();
        let batch = SourceBatch {
            images: Sample::batch(&si.iter().map(|&i| &src[i]).collect::<Vec<_>>()),
            labels: si.iter().map(|&i| src_labels[i].clone()).collect(),
        };
        let trg_images = Sample::batch(&ti.iter().map(|&i| &trg[i]).collect::<Vec<_>>());
        let result = if phase2 {
            phase2_step(&mut state, &batch, &trg_images, cfg)
        } else {
            phase1_step(&mut state, &batch, &trg_images, cfg)
        };
        let losses = match result {
            Ok(l) => l,
            Err(TrainError::NonFinite { iteration, what, .. }) => {
                let err = TrainError::NonFinite {
                    iteration,
                    what: what.clone(),
                    dump: None,
                };
                let dump = dump_batch(&opts.out_dir, iteration, &err, &si, &ti, &src, &trg);
                return Err(TrainError::NonFinite { iteration, what, dump });
            }
            Err(e) => return Err(e),
        };
        state.iteration = it + 1;
        let mut row = LossRow {
            iteration: it + 1,
            losses,
            val_dice: None,
        };
        let evaluate_now = (it + 1) % cfg.eval_every == 0 || it + 1 == total;
        if evaluate_now && !val.is_empty() {
            let preds = predict(&state.generator, &val)?;
            let vd = mean_foreground_dice(&preds, &val_masks, num_categories)?;
            row.val_dice = Some(vd);
            if state.best_val_dice.is_none_or(|b| vd > b) {
                state.best_val_dice = Some(vd);
                state.best_iteration = Some(it + 1);
                state.to_checkpoint(cfg).save(&opts.out_dir.join(BEST_CHECKPOINT))?;
            }
        }
        rows.push(row);
        if evaluate_now {
            write_file(&curve_path, curve_csv(&rows).as_bytes())?;
            state.to_checkpoint(cfg).save(&opts.out_dir.join(LAST_CHECKPOINT))?;
        }
    }

    let angle_end = match &state.prototypes {
        Some(p) if cfg.phase2_iters > 0 => Some(AngleSummary::from_hist(&target_angles(
            &state.generator,
            p,
            probe,
            ANGLE_BINS,
        )?)),
        _ => None,
    };
    let last = state.to_checkpoint(cfg);
    last.save(&opts.out_dir.join(LAST_CHECKPOINT))?;
    let best_path = opts.out_dir.join(BEST_CHECKPOINT);
    if val.is_empty() || !best_path.exists() {
        last.save(&best_path)?;
    }
    write_file(&curve_path, curve_csv(&rows).as_bytes())?;
    Ok(TrainReport {
        iterations: state.iteration,
        best_iteration: state.best_iteration,
        best_val_dice: state.best_val_dice,
        angle_start: state.angle_start,
        angle_end,
        rows,
        state,
    })
}
