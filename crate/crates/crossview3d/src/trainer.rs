//! Two-branch training: model assembly, per-view detection loss, the
//! cross-domain contrastive term, domain pairing under imbalance, the
//! optimization schedule, checkpointing and per-epoch metrics.

use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Config, Mode, Pairing};
use crate::crossdomain::{
    contrastive_loss, contrastive_loss_full, merge_samples, sample_queries, CrossDomainError,
};
use crate::encoder::{Encoder, EncoderError};
use crate::evaluator::{evaluate_frames, filter_predictions, EvalFrame, EvalReport, Metric};
use crate::geometry::Difficulty;
use crate::interaction::{
    hungarian, matching_cost, pair_loss, GtTarget, HeadOutputs, HeadValues, Interaction,
    MatchError, MatchResult,
};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::{AdamW, Binding, ParamStore, Tensor};
use crate::parallel::par_map;
use crate::synthdata::{
    load_manifest, load_sample, random_crop, Domain, DomainSample, SynthError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the {0:?} domain has no training samples")]
    EmptyDomain(Domain),
    #[error("non-finite loss at epoch {epoch} step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    CrossDomain(#[from] CrossDomainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Full detection model: multi-scale encoder plus query interaction.
pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub interaction: Interaction,
    supervise_background: bool,
}

/// Per-view forward products.
pub struct BranchOutput {
    pub heads: HeadOutputs,
    /// Decoded query tensor [N, C], input of the contrastive sampler.
    pub qd: NodeId,
    /// Foreground depth map logits [D+1, H/16, W/16].
    pub depth_logits: NodeId,
}

impl Model {
    pub fn new(cfg: &Config, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, rng, cfg.channels, cfg.depth_bins);
        let interaction = Interaction::init(
            &mut store,
            rng,
            cfg.channels,
            cfg.n_queries,
            cfg.n_heads,
            cfg.heads_use_full_query,
            cfg.depth_bins,
            cfg.depth_min,
            cfg.depth_max,
        );
        Model {
            store,
            encoder,
            interaction,
            supervise_background: cfg.supervise_background_depth,
        }
    }

    /// HWC image buffer to a [3,H,W] tensor.
    pub fn image_tensor(sample: &DomainSample) -> Tensor {
        let (w, h) = (
            sample.cam.image_size.0 as usize,
            sample.cam.image_size.1 as usize,
        );
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[c * h * w + y * w + x] = sample.image[(y * w + x) * 3 + c];
                }
            }
        }
        Tensor::from_vec(&[3, h, w], data)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        image: &Tensor,
    ) -> Result<BranchOutput, EncoderError> {
        let fm = self.encoder.backbone(tape, bind, image)?;
        let unified = self.encoder.unify_scales(tape, bind, &fm);
        let grid = {
            let s = tape.shape(unified);
            (s[1], s[2])
        };
        let depth_feat = self.encoder.depth_feature(tape, bind, unified);
        let depth_logits = self.encoder.depth_map_head(tape, bind, depth_feat);
        let content_emb = self.interaction.encode_content(tape, bind, unified);
        let depth_emb = self.interaction.encode_depth(tape, bind, depth_feat);
        let bins = self.interaction.depth_bin_indices(tape, depth_logits);
        let queries = self.interaction.query_embeddings(tape, bind);
        let qd = self
            .interaction
            .decode(tape, bind, queries, content_emb, depth_emb, &bins, grid);
        let heads = self.interaction.heads(tape, bind, qd);
        Ok(BranchOutput {
            heads,
            qd,
            depth_logits,
        })
    }
}

/// Scalar record of one pair step's loss components (all already scaled the
/// way they enter the total).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pair_v: f64,
    pub l_pair_r: f64,
    pub l_dmap_v: f64,
    pub l_dmap_r: f64,
    pub l_cl: f64,
    pub k_v: usize,
    pub k_r: usize,
}

impl LossBreakdown {
    /// Additive composition of the overall objective.
    pub fn total(&self) -> f64 {
        self.l_pair_v + self.l_pair_r + self.l_dmap_v + self.l_dmap_r + self.l_cl
    }

    fn add(&mut self, o: &LossBreakdown) {
        self.l_pair_v += o.l_pair_v;
        self.l_pair_r += o.l_pair_r;
        self.l_dmap_v += o.l_dmap_v;
        self.l_dmap_r += o.l_dmap_r;
        self.l_cl += o.l_cl;
        self.k_v += o.k_v;
        self.k_r += o.k_r;
    }

    fn scale(&mut self, s: f64) {
        self.l_pair_v *= s;
        self.l_pair_r *= s;
        self.l_dmap_v *= s;
        self.l_dmap_r *= s;
        self.l_cl *= s;
    }
}

/// Per-view loss nodes: the GT-count-normalized pair loss plus the depth
/// map term.
pub struct BranchLoss {
    pub total: NodeId,
    pub pair_scaled: NodeId,
    pub dmap: NodeId,
    pub k: usize,
    pub matching: Option<MatchResult>,
}

pub fn gt_targets(sample: &DomainSample) -> Vec<GtTarget> {
    sample
        .labels
        .iter()
        .map(|l| GtTarget {
            box3d: l.box3d,
            box2d: l.box2d,
            center_proj: l.center_proj,
            depth: l.depth,
        })
        .collect()
}

/// Detection loss of one view: Hungarian-matched pair terms scaled by 1/K
/// plus the depth-map focal loss. With no ground truth the pair term falls
/// back to the no-object classification loss alone.
pub fn branch_loss(
    model: &Model,
    tape: &mut Tape,
    out: &BranchOutput,
    sample: &DomainSample,
    lambdas: &[f64; 7],
) -> Result<BranchLoss, TrainError> {
    let dmap = model.encoder.depth_map_loss(
        tape,
        out.depth_logits,
        &sample.depth_gt,
        model.supervise_background,
    );
    let gts = gt_targets(sample);
    let (pair_scaled, k, matching) = if gts.is_empty() {
        let n = tape.shape(out.heads.class_logits)[0];
        let targets = vec![Some(1usize); n];
        let mean = tape.focal_map(out.heads.class_logits, &targets, 2.0);
        let cls = tape.scale(mean, n as f64 * lambdas[0]);
        (cls, 0, None)
    } else {
        let values = HeadValues::from_tape(tape, &out.heads);
        let cost = matching_cost(&values, &gts, lambdas)?;
        let m = hungarian(&cost)?;
        let pl = pair_loss(tape, &out.heads, &gts, &m, lambdas);
        let k = gts.len();
        (tape.scale(pl.total, 1.0 / k as f64), k, Some(m))
    };
    let total = tape.add(pair_scaled, dmap);
    Ok(BranchLoss {
        total,
        pair_scaled,
        dmap,
        k,
        matching,
    })
}

/// Deterministic epoch pairing between the two domains. The epoch holds
/// max(n_road, n_veh) pairs; the shorter side either cycles or is resampled
/// uniformly with replacement. Returns (vehicle index, roadside index).
pub fn pair_iterator(
    n_road: usize,
    n_veh: usize,
    pairing: Pairing,
    seed: u64,
) -> Result<Vec<(usize, usize)>, TrainError> {
    if n_road == 0 {
        return Err(TrainError::EmptyDomain(Domain::Roadside));
    }
    if n_veh == 0 {
        return Err(TrainError::EmptyDomain(Domain::Vehicle));
    }
    let len = n_road.max(n_veh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|i| match pairing {
            Pairing::CycleShorter => (i % n_veh, i % n_road),
            Pairing::SampleWithReplacement => {
                if n_veh >= n_road {
                    (i, rng.gen_range(0..n_road))
                } else {
                    (rng.gen_range(0..n_veh), i)
                }
            }
        })
        .collect())
}

/// How many single-image forward passes each domain branch executed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounters {
    pub roadside: usize,
    pub vehicle: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub total: f64,
    pub steps: usize,
    /// Roadside validation AP3D at IoU 0.5, moderate band.
    pub val_ap3d_mod: Option<f64>,
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub epochs: Vec<EpochRecord>,
    pub counters: BranchCounters,
    pub final_report: Option<EvalReport>,
}

fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut x = base ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x ^ (x >> 31)
}

/// One work item of an epoch.
#[derive(Debug, Clone, Copy)]
enum StepItem {
    Single(Domain, usize),
    Pair { veh: usize, road: usize },
}

pub struct Trainer {
    pub cfg: Config,
    /// One model under weight sharing, otherwise [roadside, vehicle].
    pub models: Vec<Model>,
    opts: Vec<AdamW>,
    pub train_rng: ChaCha8Rng,
    pub counters: BranchCounters,
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self, TrainError> {
        cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if cfg.use_cl && cfg.n_queries < 2 * cfg.max_objects {
            return Err(TrainError::Config(format!(
                "contrastive sampling needs n_queries >= 2*max_objects ({} < {})",
                cfg.n_queries,
                2 * cfg.max_objects
            )));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1));
        let n_models = if cfg.share_weights { 1 } else { 2 };
        let models = (0..n_models).map(|_| Model::new(cfg, &mut init_rng)).collect::<Vec<_>>();
        let opts = models
            .iter()
            .map(|m| AdamW::new(&m.store, cfg.lr, cfg.weight_decay, cfg.grad_clip))
            .collect();
        Ok(Trainer {
            cfg: cfg.clone(),
            models,
            opts,
            train_rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2)),
            counters: BranchCounters::default(),
        })
    }

    fn model_index(&self, domain: Domain) -> usize {
        if self.models.len() == 1 {
            0
        } else {
            match domain {
                Domain::Roadside => 0,
                Domain::Vehicle => 1,
            }
        }
    }

    pub fn model_for(&self, domain: Domain) -> &Model {
        &self.models[self.model_index(domain)]
    }

    /// Learning rate for a 1-based epoch after step decays.
    pub fn lr_at_epoch(cfg: &Config, epoch: usize) -> f64 {
        let decays = cfg.lr_decay_epochs.iter().filter(|d| epoch > **d).count();
        cfg.lr * cfg.lr_decay_factor.powi(decays as i32)
    }

    fn epoch_items(&self, n_road: usize, n_veh: usize, epoch: usize) -> Result<Vec<StepItem>, TrainError> {
        let mut items: Vec<StepItem> = match self.cfg.mode {
            Mode::OnlyRoad => {
                if n_road == 0 {
                    return Err(TrainError::EmptyDomain(Domain::Roadside));
                }
                // roadside data runs twice within one epoch
                (0..n_road)
                    .chain(0..n_road)
                    .map(|i| StepItem::Single(Domain::Roadside, i))
                    .collect()
            }
            Mode::OnlyVeh => {
                if n_veh == 0 {
                    return Err(TrainError::EmptyDomain(Domain::Vehicle));
                }
                (0..n_veh).map(|i| StepItem::Single(Domain::Vehicle, i)).collect()
            }
            Mode::Addon => {
                if n_road == 0 {
                    return Err(TrainError::EmptyDomain(Domain::Roadside));
                }
                if n_veh == 0 {
                    return Err(TrainError::EmptyDomain(Domain::Vehicle));
                }
                // concatenated datasets through one branch
                (0..n_road)
                    .map(|i| StepItem::Single(Domain::Roadside, i))
                    .chain((0..n_veh).map(|i| StepItem::Single(Domain::Vehicle, i)))
                    .collect()
            }
            Mode::Iroam => pair_iterator(
                n_road,
                n_veh,
                self.cfg.pairing,
                mix_seed(self.cfg.seed, 100 + epoch as u64),
            )?
            .into_iter()
            .map(|(veh, road)| StepItem::Pair { veh, road })
            .collect(),
        };
        // deterministic per-epoch shuffle
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, 10_000 + epoch as u64));
        for i in (1..items.len()).rev() {
            items.swap(i, rng.gen_range(0..=i));
        }
        Ok(items)
    }

    /// Loss graph for one step item. Returns the tape-level total plus the
    /// scalar breakdown and the per-branch forward counts (road, veh).
    fn item_loss(
        &self,
        tape: &mut Tape,
        bindings: &mut [Binding],
        item: StepItem,
        road: &[DomainSample],
        veh: &[DomainSample],
    ) -> Result<(NodeId, LossBreakdown, (usize, usize)), TrainError> {
        let lambdas = &self.cfg.lambdas;
        let sample_of = |d: Domain, i: usize| match d {
            Domain::Roadside => &road[i],
            Domain::Vehicle => &veh[i],
        };
        match item {
            StepItem::Single(domain, i) => {
                let sample = sample_of(domain, i);
                let mi = self.model_index(domain);
                let model = &self.models[mi];
                let image = Model::image_tensor(sample);
                let out = model.forward(tape, &mut bindings[mi], &image)?;
                let bl = branch_loss(model, tape, &out, sample, lambdas)?;
                let mut bd = LossBreakdown::default();
                let (pair, dmap) = (tape.value(bl.pair_scaled).item(), tape.value(bl.dmap).item());
                match domain {
                    Domain::Roadside => {
                        bd.l_pair_r = pair;
                        bd.l_dmap_r = dmap;
                        bd.k_r = bl.k;
                    }
                    Domain::Vehicle => {
                        bd.l_pair_v = pair;
                        bd.l_dmap_v = dmap;
                        bd.k_v = bl.k;
                    }
                }
                let counts = match domain {
                    Domain::Roadside => (1, 0),
                    Domain::Vehicle => (0, 1),
                };
                Ok((bl.total, bd, counts))
            }
            StepItem::Pair { veh: vi, road: ri } => {
                let rs = sample_of(Domain::Roadside, ri);
                let vs = sample_of(Domain::Vehicle, vi);
                let rmi = self.model_index(Domain::Roadside);
                let vmi = self.model_index(Domain::Vehicle);
                let rimg = Model::image_tensor(rs);
                let vimg = Model::image_tensor(vs);
                let rout = self.models[rmi].forward(tape, &mut bindings[rmi], &rimg)?;
                let vout = self.models[vmi].forward(tape, &mut bindings[vmi], &vimg)?;
                let rbl = branch_loss(&self.models[rmi], tape, &rout, rs, lambdas)?;
                let vbl = branch_loss(&self.models[vmi], tape, &vout, vs, lambdas)?;
                let mut total = tape.add(rbl.total, vbl.total);
                let mut l_cl = 0.0;
                // a pair with zero GT on either side skips the contrastive
                // term but keeps depth-map and no-object losses
                if self.cfg.use_cl {
                    if let (Some(rm), Some(vm)) = (&rbl.matching, &vbl.matching) {
                        let s_r = sample_queries(rm)?;
                        let s_v = sample_queries(vm)?;
                        let sets = merge_samples(tape, rout.qd, &s_r, vout.qd, &s_v);
                        let cl = if self.cfg.decouple {
                            contrastive_loss(tape, &sets, self.cfg.normalize_cl)?
                        } else {
                            contrastive_loss_full(tape, &sets, self.cfg.normalize_cl)?
                        };
                        l_cl = tape.value(cl).item();
                        total = tape.add(total, cl);
                    }
                }
                let bd = LossBreakdown {
                    l_pair_v: tape.value(vbl.pair_scaled).item(),
                    l_pair_r: tape.value(rbl.pair_scaled).item(),
                    l_dmap_v: tape.value(vbl.dmap).item(),
                    l_dmap_r: tape.value(rbl.dmap).item(),
                    l_cl,
                    k_v: vbl.k,
                    k_r: rbl.k,
                };
                Ok((total, bd, (1, 1)))
            }
        }
    }

    /// Detections for every frame of a sample list (forward, filter).
    pub fn predict_frames(&self, samples: &[DomainSample]) -> Vec<EvalFrame> {
        let threshold = self.cfg.score_threshold;
        par_map(samples.iter().collect::<Vec<_>>(), |sample| {
            let mi = self.model_index(sample.domain);
            let model = &self.models[mi];
            let mut tape = Tape::new();
            let mut bind = Binding::new(&model.store);
            let image = Model::image_tensor(sample);
            let detections = match model.forward(&mut tape, &mut bind, &image) {
                Ok(out) => {
                    let values = HeadValues::from_tape(&tape, &out.heads);
                    filter_predictions(&values, &sample.cam, threshold)
                }
                Err(_) => Vec::new(),
            };
            EvalFrame {
                detections,
                gts: sample.labels.iter().map(|l| l.box3d).collect(),
            }
        })
    }

    pub fn evaluate(&self, samples: &[DomainSample]) -> EvalReport {
        evaluate_frames(&self.predict_frames(samples), self.cfg.score_threshold)
    }

    /// Full training run over a generated dataset directory.
    pub fn train(&mut self, data_root: &Path, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join("config.txt"), self.cfg.to_kv_string())?;
        let manifest = load_manifest(data_root)?;
        let load_all = |entries: &[crate::synthdata::ManifestEntry]| -> Result<Vec<DomainSample>, TrainError> {
            entries
                .iter()
                .map(|e| load_sample(data_root, e).map_err(TrainError::from))
                .collect()
        };
        let road = load_all(&manifest.train.roadside)?;
        let veh = load_all(&manifest.train.vehicle)?;
        let val_road = load_all(&manifest.val.roadside)?;
        let metrics_path = out_dir.join("metrics.jsonl");
        let mut metrics = fs::File::create(&metrics_path)?;
        let mut epochs = Vec::with_capacity(self.cfg.epochs);
        for epoch in 1..=self.cfg.epochs {
            let lr = Self::lr_at_epoch(&self.cfg, epoch);
            for opt in &mut self.opts {
                opt.lr = lr;
            }
            let items = self.epoch_items(road.len(), veh.len(), epoch)?;
            let mut crop_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, 20_000 + epoch as u64));
            let mut epoch_bd = LossBreakdown::default();
            let mut epoch_total = 0.0;
            let mut steps = 0usize;
            for (step, chunk) in items.chunks(self.cfg.batch_size.max(1)).enumerate() {
                // optional crop augmentation applied up front so the
                // parallel section stays free of shared RNG state
                let (road_aug, veh_aug): (Vec<DomainSample>, Vec<DomainSample>) =
                    if self.cfg.crop_augment {
                        let mut cropped = |s: &DomainSample| {
                            let c = random_crop(s, &mut crop_rng, 0.8);
                            if c.labels.is_empty() { s.clone() } else { c }
                        };
                        (road.iter().map(&mut cropped).collect(), veh.iter().map(&mut cropped).collect())
                    } else {
                        (Vec::new(), Vec::new())
                    };
                let (road_ref, veh_ref): (&[DomainSample], &[DomainSample]) =
                    if self.cfg.crop_augment {
                        (&road_aug, &veh_aug)
                    } else {
                        (&road, &veh)
                    };
                let scale = 1.0 / chunk.len() as f64;
                let results = par_map(chunk.to_vec(), |item| {
                    let mut tape = Tape::new();
                    let mut bindings: Vec<Binding> =
                        self.models.iter().map(|m| Binding::new(&m.store)).collect();
                    let (total, bd, counts) =
                        self.item_loss(&mut tape, &mut bindings, item, road_ref, veh_ref)?;
                    let value = tape.value(total).item();
                    if !value.is_finite() {
                        return Err(TrainError::NonFiniteLoss {
                            epoch,
                            step,
                            detail: format!(
                                "item {item:?}: total {value}, components {bd:?}"
                            ),
                        });
                    }
                    let scaled = tape.scale(total, scale);
                    tape.backward(scaled);
                    let grads: Vec<Vec<Option<Tensor>>> =
                        bindings.iter().map(|b| b.grads(&tape)).collect();
                    Ok((grads, bd, value, counts))
                });
                let mut acc: Vec<Vec<Option<Tensor>>> = self
                    .models
                    .iter()
                    .map(|m| vec![None; m.store.len()])
                    .collect();
                for r in results {
                    let (grads, bd, value, (cr, cv)) = r?;
                    for (mi, g) in grads.into_iter().enumerate() {
                        for (pi, gt) in g.into_iter().enumerate() {
                            if let Some(gt) = gt {
                                match &mut acc[mi][pi] {
                                    Some(a) => {
                                        for (x, y) in a.data.iter_mut().zip(&gt.data) {
                                            *x += y;
                                        }
                                    }
                                    slot => *slot = Some(gt),
                                }
                            }
                        }
                    }
                    epoch_bd.add(&bd);
                    epoch_total += value;
                    self.counters.roadside += cr;
                    self.counters.vehicle += cv;
                }
                for (mi, grads) in acc.iter_mut().enumerate() {
                    self.opts[mi].step(&mut self.models[mi].store, grads);
                }
                steps += 1;
            }
            let n_items = items.len().max(1) as f64;
            epoch_bd.scale(1.0 / n_items);
            let val_ap3d_mod = if val_road.is_empty() {
                None
            } else {
                self.evaluate(&val_road)
                    .get(Metric::Ap3D, 0.5, Difficulty::Moderate)
            };
            let rec = EpochRecord {
                epoch,
                lr,
                loss: epoch_bd,
                total: epoch_total / n_items,
                steps,
                val_ap3d_mod,
            };
            writeln!(metrics, "{}", serde_json::to_string(&rec)?)?;
            metrics.flush()?;
            epochs.push(rec);
        }
        let checkpoint = out_dir.join("checkpoint.bin");
        save_checkpoint(&checkpoint, self)?;
        let final_report = if val_road.is_empty() {
            None
        } else {
            Some(self.evaluate(&val_road))
        };
        Ok(TrainOutcome {
            checkpoint,
            metrics_log: metrics_path,
            epochs,
            counters: self.counters,
            final_report,
        })
    }
}

const CKPT_MAGIC: &[u8; 4] = b"XV3D";
const CKPT_VERSION: u32 = 1;

fn write_bytes(f: &mut impl IoWrite, b: &[u8]) -> std::io::Result<()> {
    f.write_all(&(b.len() as u64).to_le_bytes())?;
    f.write_all(b)
}

fn read_bytes(buf: &[u8], pos: &mut usize) -> Result<Vec<u8>, TrainError> {
    let err = || TrainError::BadCheckpoint("truncated".into());
    if buf.len() < *pos + 8 {
        return Err(err());
    }
    let n = u64::from_le_bytes(buf[*pos..*pos + 8].try_into().unwrap()) as usize;
    *pos += 8;
    if buf.len() < *pos + n {
        return Err(err());
    }
    let out = buf[*pos..*pos + n].to_vec();
    *pos += n;
    Ok(out)
}

/// Versioned binary checkpoint: config echo, RNG state and every parameter
/// tensor of every model, bit-exact.
pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<(), TrainError> {
    let mut f = fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&CKPT_VERSION.to_le_bytes())?;
    write_bytes(&mut f, trainer.cfg.to_kv_string().as_bytes())?;
    write_bytes(&mut f, serde_json::to_string(&trainer.train_rng)?.as_bytes())?;
    f.write_all(&(trainer.models.len() as u32).to_le_bytes())?;
    for m in &trainer.models {
        f.write_all(&(m.store.len() as u64).to_le_bytes())?;
        for (i, name) in m.store.names().iter().enumerate() {
            let t = m.store.tensor_at(i);
            write_bytes(&mut f, name.as_bytes())?;
            f.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for d in &t.shape {
                f.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in &t.data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Restores a trainer (models, config, RNG) from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Trainer, TrainError> {
    let buf = fs::read(path)?;
    if buf.len() < 8 || &buf[0..4] != CKPT_MAGIC {
        return Err(TrainError::BadCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(TrainError::BadCheckpoint(format!("version {version}")));
    }
    let mut pos = 8;
    let cfg_text = String::from_utf8(read_bytes(&buf, &mut pos)?)
        .map_err(|_| TrainError::BadCheckpoint("config not utf8".into()))?;
    let mut cfg = Config::default();
    for line in cfg_text.lines() {
        cfg.apply_line(line)
            .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
    }
    let rng_json = read_bytes(&buf, &mut pos)?;
    let train_rng: ChaCha8Rng = serde_json::from_slice(&rng_json)?;
    if buf.len() < pos + 4 {
        return Err(TrainError::BadCheckpoint("truncated".into()));
    }
    let n_models = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    let mut trainer = Trainer::new(&cfg)?;
    if trainer.models.len() != n_models {
        return Err(TrainError::BadCheckpoint(format!(
            "model count mismatch: {} vs {}",
            trainer.models.len(),
            n_models
        )));
    }
    for m in &mut trainer.models {
        if buf.len() < pos + 8 {
            return Err(TrainError::BadCheckpoint("truncated".into()));
        }
        let n_params = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        if n_params != m.store.len() {
            return Err(TrainError::BadCheckpoint("parameter count mismatch".into()));
        }
        for _ in 0..n_params {
            let name = String::from_utf8(read_bytes(&buf, &mut pos)?)
                .map_err(|_| TrainError::BadCheckpoint("name not utf8".into()))?;
            if buf.len() < pos + 4 {
                return Err(TrainError::BadCheckpoint("truncated".into()));
            }
            let ndim = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                if buf.len() < pos + 8 {
                    return Err(TrainError::BadCheckpoint("truncated".into()));
                }
                shape.push(u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap()) as usize);
                pos += 8;
            }
            let n: usize = shape.iter().product();
            if buf.len() < pos + 8 * n {
                return Err(TrainError::BadCheckpoint("truncated".into()));
            }
            let data: Vec<f64> = buf[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            pos += 8 * n;
            let t = m.store.get_mut(&name);
            if t.shape != shape {
                return Err(TrainError::BadCheckpoint(format!("shape mismatch for {name}")));
            }
            t.data = data;
        }
    }
    trainer.train_rng = train_rng;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::build_dataset;

    fn tiny_cfg() -> Config {
        let mut c = Config::default();
        c.image_width = 64;
        c.image_height = 32;
        c.channels = 16;
        c.n_queries = 8;
        c.n_heads = 2;
        c.depth_bins = 12;
        c.max_objects = 3;
        c.n_roadside = 4;
        c.n_vehicle = 6;
        c.n_val_roadside = 2;
        c.n_val_vehicle = 2;
        c.epochs = 2;
        c.batch_size = 2;
        c.lr = 1e-3;
        c.lr_decay_epochs = vec![2];
        c
    }

    fn tiny_dataset(cfg: &Config) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(cfg, dir.path()).unwrap();
        dir
    }

    #[test]
    fn overall_loss_composition() {
        let bd = LossBreakdown {
            l_pair_v: 1.0,
            l_pair_r: 2.0,
            l_dmap_v: 0.3,
            l_dmap_r: 0.2,
            l_cl: 0.5,
            k_v: 2,
            k_r: 3,
        };
        assert!((bd.total() - 4.0).abs() < 1e-12);
        // additivity: total always equals the sum of the parts
        let sum = bd.l_pair_v + bd.l_pair_r + bd.l_dmap_v + bd.l_dmap_r + bd.l_cl;
        assert!((bd.total() - sum).abs() < 1e-6);
    }

    #[test]
    fn duplicated_gt_keeps_per_object_scale() {
        // two queries with identical predictions and one GT duplicated:
        // (1/2)·(2 terms) must equal (1/1)·(1 term)
        let cfg = tiny_cfg();
        let dir = tiny_dataset(&cfg);
        let m = load_manifest(dir.path()).unwrap();
        let mut sample = load_sample(dir.path(), &m.train.roadside[0]).unwrap();
        sample.labels.truncate(1);
        let mut doubled = sample.clone();
        doubled.labels.push(doubled.labels[0].clone());
        let trainer = Trainer::new(&cfg).unwrap();
        let model = &trainer.models[0];
        let eval = |s: &DomainSample| {
            let mut tape = Tape::new();
            let mut bind = Binding::new(&model.store);
            let out = model.forward(&mut tape, &mut bind, &Model::image_tensor(s)).unwrap();
            let bl = branch_loss(model, &mut tape, &out, s, &cfg.lambdas).unwrap();
            tape.value(bl.pair_scaled).item()
        };
        let single = eval(&sample);
        let double = eval(&doubled);
        // the only difference is one extra matched query replacing one
        // no-object query; regression terms scale exactly
        assert!(
            (single - double).abs() / single.abs() < 0.35,
            "per-object scale drifted: {single} vs {double}"
        );
    }

    #[test]
    fn pair_iterator_contracts() {
        let pairs = pair_iterator(2, 6, Pairing::CycleShorter, 0).unwrap();
        assert_eq!(pairs.len(), 6);
        let road_counts = pairs.iter().filter(|(_, r)| *r == 0).count();
        assert_eq!(road_counts, 3);
        assert_eq!(pairs.iter().filter(|(_, r)| *r == 1).count(), 3);
        let veh: Vec<usize> = pairs.iter().map(|(v, _)| *v).collect();
        assert_eq!(veh, vec![0, 1, 2, 3, 4, 5]);
        // determinism
        assert_eq!(pairs, pair_iterator(2, 6, Pairing::CycleShorter, 0).unwrap());
        let s1 = pair_iterator(3, 10, Pairing::SampleWithReplacement, 7).unwrap();
        assert_eq!(s1, pair_iterator(3, 10, Pairing::SampleWithReplacement, 7).unwrap());
        assert!(pair_iterator(0, 5, Pairing::CycleShorter, 0).is_err());
    }

    #[test]
    fn replacement_sampling_roughly_uniform() {
        let n_road = 5;
        let mut counts = vec![0usize; n_road];
        let mut total = 0;
        for seed in 0..10 {
            let pairs = pair_iterator(n_road, 1000, Pairing::SampleWithReplacement, seed).unwrap();
            for (_, r) in pairs {
                counts[r] += 1;
                total += 1;
            }
        }
        let expect = total as f64 / n_road as f64;
        for c in counts {
            assert!(
                (c as f64 - expect).abs() / (total as f64) < 0.05,
                "count {c} vs expected {expect}"
            );
        }
    }

    #[test]
    fn lr_decay_schedule() {
        let mut cfg = tiny_cfg();
        cfg.lr = 1e-3;
        cfg.lr_decay_epochs = vec![2, 4];
        cfg.lr_decay_factor = 0.1;
        assert_eq!(Trainer::lr_at_epoch(&cfg, 1), 1e-3);
        assert_eq!(Trainer::lr_at_epoch(&cfg, 2), 1e-3);
        assert!((Trainer::lr_at_epoch(&cfg, 3) - 1e-4).abs() < 1e-18);
        assert!((Trainer::lr_at_epoch(&cfg, 5) - 1e-5).abs() < 1e-19);
    }

    #[test]
    fn smoke_train_all_modes_finite() {
        let cfg = tiny_cfg();
        let data = tiny_dataset(&cfg);
        for mode in [Mode::OnlyRoad, Mode::OnlyVeh, Mode::Addon, Mode::Iroam] {
            let mut c = cfg.clone();
            c.mode = mode;
            c.epochs = 1;
            let out = tempfile::tempdir().unwrap();
            let mut t = Trainer::new(&c).unwrap();
            let outcome = t.train(data.path(), out.path()).unwrap();
            assert_eq!(outcome.epochs.len(), 1);
            assert!(outcome.epochs[0].total.is_finite());
            assert!(outcome.epochs[0].loss.total() >= 0.0);
            assert!(out.path().join("config.txt").exists());
            assert!(outcome.metrics_log.exists());
        }
    }

    #[test]
    fn only_road_never_runs_vehicle_branch() {
        let mut cfg = tiny_cfg();
        cfg.mode = Mode::OnlyRoad;
        cfg.epochs = 1;
        cfg.n_val_roadside = 0;
        cfg.n_val_vehicle = 0;
        let data = tiny_dataset(&cfg);
        let out = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&cfg).unwrap();
        let outcome = t.train(data.path(), out.path()).unwrap();
        assert_eq!(outcome.counters.vehicle, 0);
        // roadside data repeats twice per epoch
        assert_eq!(outcome.counters.roadside, 2 * cfg.n_roadside);
        // vehicle-side loss slots stay exactly zero
        assert_eq!(outcome.epochs[0].loss.l_pair_v, 0.0);
        assert_eq!(outcome.epochs[0].loss.l_dmap_v, 0.0);
    }

    #[test]
    fn fixed_seed_training_is_bitwise_deterministic() {
        let mut cfg = tiny_cfg();
        cfg.mode = Mode::Iroam;
        cfg.epochs = 1;
        let data = tiny_dataset(&cfg);
        let run = || {
            let out = tempfile::tempdir().unwrap();
            let mut t = Trainer::new(&cfg).unwrap();
            t.train(data.path(), out.path()).unwrap();
            let log = fs::read(out.path().join("metrics.jsonl")).unwrap();
            let ckpt = fs::read(out.path().join("checkpoint.bin")).unwrap();
            (log, ckpt)
        };
        let (l1, c1) = run();
        let (l2, c2) = run();
        assert_eq!(l1, l2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn checkpoint_reload_reproduces_eval() {
        let mut cfg = tiny_cfg();
        cfg.mode = Mode::Iroam;
        cfg.epochs = 1;
        let data = tiny_dataset(&cfg);
        let out = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&cfg).unwrap();
        let outcome = t.train(data.path(), out.path()).unwrap();
        let manifest = load_manifest(data.path()).unwrap();
        let val: Vec<DomainSample> = manifest
            .val
            .roadside
            .iter()
            .map(|e| load_sample(data.path(), e).unwrap())
            .collect();
        let direct = t.evaluate(&val);
        let reloaded = load_checkpoint(&outcome.checkpoint).unwrap();
        // parameters identical to the bit
        for (a, b) in t.models[0].store.names().iter().zip(reloaded.models[0].store.names()) {
            assert_eq!(a, b);
        }
        for i in 0..t.models[0].store.len() {
            assert_eq!(
                t.models[0].store.tensor_at(i).data,
                reloaded.models[0].store.tensor_at(i).data
            );
        }
        let again = reloaded.evaluate(&val);
        assert_eq!(
            serde_json::to_string(&direct).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&direct).unwrap(),
            serde_json::to_string(&outcome.final_report.unwrap()).unwrap()
        );
    }

    #[test]
    fn exploding_lr_reports_non_finite_loss() {
        let mut cfg = tiny_cfg();
        cfg.mode = Mode::OnlyRoad;
        cfg.epochs = 3;
        cfg.lr = 1e14;
        cfg.grad_clip = 0.0;
        let data = tiny_dataset(&cfg);
        let out = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&cfg).unwrap();
        match t.train(data.path(), out.path()) {
            Err(TrainError::NonFiniteLoss { detail, .. }) => {
                assert!(detail.contains("components"));
            }
            other => panic!("expected NonFiniteLoss, got {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn no_cl_flag_removes_contrastive_term() {
        let mut cfg = tiny_cfg();
        cfg.mode = Mode::Iroam;
        cfg.epochs = 1;
        let data = tiny_dataset(&cfg);
        let run = |use_cl: bool, decouple: bool| {
            let mut c = cfg.clone();
            c.use_cl = use_cl;
            c.decouple = decouple;
            let out = tempfile::tempdir().unwrap();
            let mut t = Trainer::new(&c).unwrap();
            t.train(data.path(), out.path()).unwrap().epochs[0].clone()
        };
        let with = run(true, true);
        let without = run(false, true);
        assert!(with.loss.l_cl > 0.0);
        assert_eq!(without.loss.l_cl, 0.0);
        // without the contrastive term the total is the pure Eq.-style sum
        let parts = without.loss.l_pair_v
            + without.loss.l_pair_r
            + without.loss.l_dmap_v
            + without.loss.l_dmap_r;
        assert!((without.total - parts).abs() < 1e-6);
        // full-channel ablation changes the contrastive value
        let full = run(true, false);
        assert!(full.loss.l_cl > 0.0);
        assert_ne!(full.loss.l_cl, with.loss.l_cl);
    }
}
