//! Distillation finetuning of all quantization degrees of freedom. The
//! teacher is the full-precision graph, the student the fake-quant
//! simulation; nothing here ever reads a label.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dof::{
    constraint_audit, record_student, snapshot_string, DofSet, FamilyMask, LeafKind, OfflinePlan,
    SCALE_FLOOR,
};
use crate::error::TrainError;
use crate::graph::exec::run_fp_collect;
use crate::graph::Graph;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;
/// segment length of the cosine restart schedule, in epochs
pub const RESTART_EPOCHS: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub images_per_epoch: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    /// cross-entropy mix weight; 0 = pure feature distillation
    pub lambda: f32,
    pub seed: u64,
    #[serde(default = "FamilyMask::all")]
    pub families: FamilyMask,
    /// where to drop the state snapshot if the loss goes non-finite
    #[serde(default)]
    pub failure_snapshot: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            images_per_epoch: 8192,
            batch_size: 16,
            base_lr: 1e-4,
            lambda: 0.0,
            seed: 0,
            families: FamilyMask::all(),
            failure_snapshot: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::Data(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.images_per_epoch == 0 || self.batch_size == 0 {
            return Err(TrainError::Data("sizes must be positive".into()));
        }
        if self.batch_size > self.images_per_epoch {
            return Err(TrainError::Data("batch larger than an epoch".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(TrainError::Data(format!("base_lr {} must be positive", self.base_lr)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.images_per_epoch / self.batch_size).max(1)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }
}

/// Cosine decay to zero over each segment; every restart halves the amplitude.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f32 {
    let seg_steps = RESTART_EPOCHS * cfg.steps_per_epoch();
    let seg = step / seg_steps;
    let amp = cfg.base_lr * 0.5f32.powi(seg as i32);
    let t = (step - seg * seg_steps) as f64 / seg_steps as f64;
    amp * (0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

/// `|t - s|^2 / |t|^2`; a zero-energy teacher falls back to the plain mean
/// square. Returns the loss and whether the fallback fired.
pub fn kd_loss(teacher: &Tensor, student: &Tensor) -> (f32, bool) {
    debug_assert_eq!(teacher.shape, student.shape);
    let num: f64 = teacher
        .data
        .iter()
        .zip(&student.data)
        .map(|(&t, &s)| ((t - s) as f64) * ((t - s) as f64))
        .sum();
    let den: f64 = teacher.data.iter().map(|&t| (t as f64) * (t as f64)).sum();
    if den == 0.0 {
        ((num / teacher.numel() as f64) as f32, true)
    } else {
        ((num / den) as f32, false)
    }
}

pub fn mixed_loss(kd: f32, ce: f32, lambda: f32) -> f32 {
    (1.0 - lambda) * kd + lambda * ce
}

// ── data ─────────────────────────────────────────────────────────────────────

/// Unlabeled image source. One epoch's worth of images is materialized once
/// and then cycled, so the teacher pass per batch can be cached.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Gaussian mixture built from the seed: a fixed set of component
    /// patterns plus per-image noise.
    Synthetic { seed: u64, components: usize, noise: f32 },
    /// directory of raw little-endian f32 files, one image each, read in
    /// filename order
    Dir(PathBuf),
    /// caller-supplied images
    Memory(Vec<Tensor>),
}

impl DataSource {
    pub fn synthetic(seed: u64) -> DataSource {
        DataSource::Synthetic { seed, components: 10, noise: 0.25 }
    }

    /// `n` images of `shape`, cycling or generating as needed.
    pub fn materialize(&self, n: usize, shape: &[usize]) -> Result<Vec<Tensor>, TrainError> {
        let numel: usize = shape.iter().product();
        match self {
            DataSource::Synthetic { seed, components, noise } => {
                let mut r = ChaCha8Rng::seed_from_u64(*seed);
                let k = (*components).max(1);
                let means: Vec<Vec<f32>> = (0..k)
                    .map(|_| (0..numel).map(|_| r.gen_range(-1.0..1.5f32)).collect())
                    .collect();
                Ok((0..n)
                    .map(|i| {
                        let m = &means[i % k];
                        let data =
                            m.iter().map(|&v| v + noise * r.gen_range(-1.0..1.0f32)).collect();
                        Tensor { shape: shape.to_vec(), data }
                    })
                    .collect())
            }
            DataSource::Dir(dir) => {
                let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
                    .map(|e| e.map(|e| e.path()))
                    .collect::<Result<_, _>>()?;
                names.sort();
                names.retain(|p| p.is_file());
                if names.is_empty() {
                    return Err(TrainError::Data(format!("no files under {}", dir.display())));
                }
                let mut images = Vec::with_capacity(names.len());
                for p in &names {
                    let bytes = std::fs::read(p)?;
                    if bytes.len() != numel * 4 {
                        return Err(TrainError::Data(format!(
                            "{}: {} bytes, expected {} for shape {:?}",
                            p.display(),
                            bytes.len(),
                            numel * 4,
                            shape
                        )));
                    }
                    let data: Vec<f32> = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    images.push(Tensor { shape: shape.to_vec(), data });
                }
                Ok((0..n).map(|i| images[i % images.len()].clone()).collect())
            }
            DataSource::Memory(images) => {
                if images.is_empty() {
                    return Err(TrainError::Data("empty in-memory data source".into()));
                }
                for t in images {
                    if t.shape != shape {
                        return Err(TrainError::Data(format!(
                            "image shape {:?} does not match input {:?}",
                            t.shape, shape
                        )));
                    }
                }
                Ok((0..n).map(|i| images[i % images.len()].clone()).collect())
            }
        }
    }
}

fn stack(images: &[Tensor]) -> Tensor {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(&images[0].shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    for t in images {
        data.extend_from_slice(&t.data);
    }
    Tensor { shape, data }
}

// ── optimizer ────────────────────────────────────────────────────────────────

/// Adam with bias correction. Slots are addressed by index so the caller can
/// rebuild its parameter graph each step while the moments persist.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl OptimizerState {
    pub fn new(slots: usize) -> OptimizerState {
        OptimizerState {
            m: vec![Vec::new(); slots],
            v: vec![Vec::new(); slots],
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// Call once per optimization step, before the slot updates.
    pub fn advance(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, lr: f32, grad: &[f32], param: &mut [f32]) {
        if self.m[slot].len() != param.len() {
            self.m[slot] = vec![0.0; param.len()];
            self.v[slot] = vec![0.0; param.len()];
        }
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..param.len() {
            let g = grad[i];
            let m = self.beta1 * self.m[slot][i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v[slot][i] + (1.0 - self.beta2) * g * g;
            self.m[slot][i] = m;
            self.v[slot][i] = v;
            param[i] -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
    }
}

// ── the loop ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_curve: Vec<f64>,
    pub warnings: Vec<String>,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct TeacherPass {
    feature: Tensor,
    /// squared norm of the feature tensor, the loss normalizer
    feat_energy: f64,
    /// per-row soft targets, present when the ce mix is active
    soft: Option<Tensor>,
}

fn teacher_pass(
    graph: &Graph,
    plan: &OfflinePlan,
    batch: &Tensor,
    want_soft: bool,
) -> Result<TeacherPass, TrainError> {
    let topo = graph.validate()?;
    let outs = run_fp_collect(graph, &topo, batch)?;
    let feat_name = &graph.layers[plan.feature].name;
    let out_name = &graph.layers[topo.output].name;
    let feature = outs[feat_name].clone();
    let logits = outs[out_name].clone();
    let feat_energy: f64 = feature.data.iter().map(|&t| (t as f64) * (t as f64)).sum();
    let soft = if want_soft {
        if logits.rank() != 2 {
            return Err(TrainError::Data(format!(
                "cross-entropy mix needs 2-d teacher logits, got {:?}",
                logits.shape
            )));
        }
        let (n, k) = (logits.shape[0], logits.shape[1]);
        let mut p = vec![0.0f32; n * k];
        for i in 0..n {
            let row = &logits.data[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(b as f64));
            let exps: Vec<f64> = row.iter().map(|&x| ((x as f64) - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..k {
                p[i * k + j] = (exps[j] / z) as f32;
            }
        }
        Some(Tensor { shape: vec![n, k], data: p })
    } else {
        None
    };
    Ok(TeacherPass { feature, feat_energy, soft })
}

/// Record the mixed loss for one batch on `tape`. Returns the loss node and
/// whether the zero-energy fallback was used.
fn loss_node(
    tape: &mut Tape,
    teacher: &TeacherPass,
    student_feature: VarId,
    student_logits: VarId,
    lambda: f32,
) -> Result<(VarId, bool), TrainError> {
    let t_const = tape.constant(teacher.feature.clone());
    let diff = tape.sub(student_feature, t_const)?;
    let sq = tape.mul(diff, diff)?;
    let sse = tape.reduce_sum(sq);
    let (kd, fallback) = if teacher.feat_energy == 0.0 {
        (tape.mul_const(sse, 1.0 / teacher.feature.numel() as f32), true)
    } else {
        (tape.mul_const(sse, (1.0 / teacher.feat_energy) as f32), false)
    };
    if lambda == 0.0 {
        return Ok((kd, fallback));
    }
    let soft = teacher.soft.as_ref().expect("soft targets prepared when lambda > 0");
    let rows = soft.shape[0] as f32;
    let logq = tape.log_softmax(student_logits)?;
    let p = tape.constant(soft.clone());
    let plogq = tape.mul(p, logq)?;
    let ce_sum = tape.reduce_sum(plogq);
    let ce = tape.mul_const(ce_sum, -1.0 / rows);
    let a = tape.mul_const(kd, 1.0 - lambda);
    let b = tape.mul_const(ce, lambda);
    Ok((tape.add(a, b)?, fallback))
}

fn write_back(dof: &mut DofSet, kind: LeafKind, index: usize, data: &[f32]) {
    let dst = match kind {
        LeafKind::Weight => &mut dof.layers[index].weight.data,
        LeafKind::Bias => &mut dof.layers[index].bias.data,
        LeafKind::Rescale => &mut dof.layers[index].f_hat.data,
        LeafKind::ActScale => &mut dof.groups[index].s_a.data,
    };
    dst.copy_from_slice(data);
    if matches!(kind, LeafKind::Rescale | LeafKind::ActScale) {
        for v in dst.iter_mut() {
            if *v < SCALE_FLOOR {
                *v = SCALE_FLOOR;
            }
        }
    }
}

/// Run the finetuning loop, mutating `dof` in place.
pub fn train(
    graph: &Graph,
    plan: &OfflinePlan,
    dof: &mut DofSet,
    data: &DataSource,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut warnings: Vec<String> = Vec::new();

    let images = data.materialize(cfg.images_per_epoch, &graph.input_shape)?;
    let spe = cfg.steps_per_epoch();
    let batches: Vec<Tensor> =
        (0..spe).map(|b| stack(&images[b * cfg.batch_size..(b + 1) * cfg.batch_size])).collect();
    let mut teacher_cache: BTreeMap<usize, TeacherPass> = BTreeMap::new();

    let total = cfg.total_steps();
    let n_slots = dof.layers.len() * 3 + dof.groups.len();
    let mut opt = OptimizerState::new(n_slots);
    let mut curve: Vec<f64> = Vec::with_capacity(total.max(1));
    let mut fallback_warned = false;

    let mut eval_step = |dof: &mut DofSet,
                         step: usize,
                         update: bool,
                         teacher_cache: &mut BTreeMap<usize, TeacherPass>,
                         opt: &mut OptimizerState,
                         warnings: &mut Vec<String>|
     -> Result<f64, TrainError> {
        let bi = step % spe;
        if !teacher_cache.contains_key(&bi) {
            teacher_cache.insert(bi, teacher_pass(graph, plan, &batches[bi], cfg.lambda > 0.0)?);
        }
        let teacher = &teacher_cache[&bi];

        let mut tape = Tape::new();
        let mask = if update { cfg.families } else { FamilyMask::none() };
        let nodes = plan.record(graph, dof, &mut tape, &mask)?;
        let st = record_student(graph, plan, dof, &nodes, &mut tape, &batches[bi])?;
        let (loss, fallback) = loss_node(&mut tape, teacher, st.feature, st.logits, cfg.lambda)?;
        if fallback && !fallback_warned {
            warnings.push("teacher feature energy is zero; using plain mean square".into());
            fallback_warned = true;
        }
        let loss_val = tape.value(loss).data[0] as f64;
        if !loss_val.is_finite() {
            let path = cfg.failure_snapshot.as_ref().and_then(|p| {
                let text = snapshot_string(dof).ok()?;
                std::fs::write(p, text).ok()?;
                Some(p.display().to_string())
            });
            return Err(TrainError::NumericFailure { step, snapshot: path });
        }
        if !update {
            return Ok(loss_val);
        }

        tape.backward(loss)?;
        let lr = lr_at(step, cfg);
        opt.advance();
        for (slot, binding) in nodes.bindings(dof).iter().enumerate() {
            if !tape.is_trainable(binding.id) {
                continue;
            }
            let mut param = tape.value(binding.id).data.clone();
            let grad = tape.grad(binding.id).data.clone();
            opt.update(slot, lr, &grad, &mut param);
            write_back(dof, binding.kind, binding.index, &param);
        }
        Ok(loss_val)
    };

    if total == 0 {
        let loss =
            eval_step(dof, 0, false, &mut teacher_cache, &mut opt, &mut warnings)?;
        return Ok(TrainReport {
            steps: 0,
            initial_loss: loss,
            final_loss: loss,
            loss_curve: vec![loss],
            warnings,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }

    for step in 0..total {
        let loss = eval_step(dof, step, true, &mut teacher_cache, &mut opt, &mut warnings)?;
        curve.push(loss);
    }

    constraint_audit(graph, plan, dof)?;
    Ok(TrainReport {
        steps: total,
        initial_loss: curve[0],
        final_loss: *curve.last().unwrap(),
        loss_curve: curve.clone(),
        warnings,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
