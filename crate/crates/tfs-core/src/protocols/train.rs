//! The three training phases. Each phase derives its own rng stream from
//! (config seed, phase label), never from the regime name, so a phase run
//! under one regime is bit-identical to the same phase under another. Every
//! phase starts a fresh optimizer: promoting a student to teacher poses a
//! new optimization problem, so no Adam state crosses a phase or round
//! boundary.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Example, Label, LabeledSet, UnlabeledSet};
use crate::error::{Result, TfsError};
use crate::model::{
    EncodedBatch, EncoderConfig, HeadKind, Model, ModelCheckpoint, ParamNodes, stage_named,
};
use crate::objectives::{apply_dynamic_mask, mlm_loss, st_loss, supervised_loss, PseudoLabel};
use crate::protocols::infer::{evaluate, generate_pseudo_labels};
use crate::protocols::{PhaseLog, RegimeConfig, RoundLog};
use crate::seeding;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, NodeId, Tensor};

/// Held-out fraction of the labeled set when no dev file is supplied.
pub const DEV_FRACTION: f64 = 0.1;

/// One model being optimized: parameter tensors, Adam state, and the
/// encoder config used at runtime (checkpoint architecture, configured
/// dropout).
struct Trainer {
    arch: EncoderConfig,
    runtime: EncoderConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    adam: AdamState,
}

impl Trainer {
    fn new(model: Model, optimizer: AdamConfig, dropout: f64) -> Result<Self> {
        let (arch, names, tensors) = model.into_parts();
        let adam = AdamState::for_params(optimizer, &tensors)?;
        let runtime = EncoderConfig { dropout, ..arch };
        Ok(Trainer { arch, runtime, names, tensors, adam })
    }

    fn runtime(&self) -> &EncoderConfig {
        &self.runtime
    }

    fn uses_dropout(&self) -> bool {
        self.runtime.dropout > 0.0
    }

    /// Build a loss over freshly staged parameters, backprop, and take one
    /// Adam step. Parameters that do not reach the loss (an unused head)
    /// get an exactly zero gradient and are left bit-identical.
    fn step<F>(&mut self, dropout_rng: Option<&mut ChaCha8Rng>, build: F) -> Result<f64>
    where
        F: FnOnce(
            &mut Graph,
            &ParamNodes,
            &EncoderConfig,
            Option<&mut ChaCha8Rng>,
        ) -> Result<NodeId>,
    {
        let mut graph = Graph::new();
        let params = stage_named(&mut graph, &self.names, &self.tensors, true)?;
        let loss = build(&mut graph, &params, &self.runtime, dropout_rng)?;
        let value = graph.value(loss)[0];
        graph.backward(loss)?;
        for (name, tensor) in self.names.iter().zip(&mut self.tensors) {
            let grad = match graph.grad(params[name.as_str()]) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tensor.len()],
            };
            tensor.set_grad(grad)?;
        }
        adam_step(&mut self.tensors, &mut self.adam)?;
        Ok(value)
    }

    fn into_model(self) -> Model {
        Model::from_parts(self.arch, self.names, self.tensors)
    }
}

fn check_architecture(ckpt: &ModelCheckpoint, config: &RegimeConfig, role: &str) -> Result<()> {
    if !ckpt.config.same_architecture(&config.encoder) {
        return Err(TfsError::Protocol(format!(
            "{role} checkpoint {} was built for a different architecture than the configured encoder",
            ckpt.id()
        )));
    }
    Ok(())
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Endless shuffled walk over 0..n, used to pair a labeled mini-batch with
/// every pseudo-labeled step. Reshuffles instead of splitting a draw across
/// the wrap-around.
struct Cycler {
    order: Vec<usize>,
    at: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Cycler { order: (0..n).collect(), at: n }
    }

    fn draw(&mut self, want: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let take = want.min(self.order.len());
        if self.at + take > self.order.len() {
            self.order.shuffle(rng);
            self.at = 0;
        }
        let out = self.order[self.at..self.at + take].to_vec();
        self.at += take;
        out
    }
}

/// Continued masked-token pretraining over a text corpus. The input
/// checkpoint is untouched; the result appends `tapt` to its provenance.
pub fn run_tapt(
    init: &ModelCheckpoint,
    corpus: &[Example],
    config: &RegimeConfig,
) -> Result<(ModelCheckpoint, PhaseLog)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TfsError::Protocol("continued pretraining needs a nonempty corpus".into()));
    }
    check_architecture(init, config, "pretraining init")?;
    let mut model = Model::from_checkpoint(init);
    model.ensure_head(HeadKind::Mlm, seeding::derive(config.seed, &["tapt", "head"]))?;
    let mut trainer = Trainer::new(model, config.optimizer, config.encoder.dropout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(config.seed, &["tapt"]));
    let mut epoch_losses = Vec::new();
    for _ in 0..config.tapt_epochs {
        let order = shuffled(corpus.len(), &mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(config.mlm_batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &corpus[i]).collect();
            let batch = EncodedBatch::build(&refs, trainer.runtime())?;
            let masked = apply_dynamic_mask(&batch, config.mask_prob, &mut rng)?;
            let dropout_rng = trainer.uses_dropout().then_some(&mut rng);
            let loss = trainer.step(dropout_rng, |graph, params, runtime, dr| {
                mlm_loss(graph, params, runtime, &masked, dr)
            })?;
            losses.push(loss);
        }
        epoch_losses.push(mean(&losses));
    }
    let child = init.child_from_model(trainer.into_model(), "tapt", None)?;
    let log = PhaseLog { phase: "tapt".into(), checkpoint_id: child.id(), epoch_losses };
    Ok((child, log))
}

/// Supervised training on the labeled set. Attaches a fresh task head when
/// the init has none; the result appends `finetuned` to the provenance.
pub fn run_finetune(
    init: &ModelCheckpoint,
    labeled: &LabeledSet,
    config: &RegimeConfig,
) -> Result<(ModelCheckpoint, PhaseLog)> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(TfsError::Protocol("finetuning needs a nonempty labeled set".into()));
    }
    check_architecture(init, config, "finetuning init")?;
    let task = config.task;
    let mut model = Model::from_checkpoint(init);
    model.ensure_head(
        HeadKind::for_task(&task),
        seeding::derive(config.seed, &["finetune", "head"]),
    )?;
    let mut trainer = Trainer::new(model, config.optimizer, config.encoder.dropout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(config.seed, &["finetune"]));
    let mut epoch_losses = Vec::new();
    for _ in 0..config.finetune_epochs {
        let order = shuffled(labeled.len(), &mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &labeled.items[i].0).collect();
            let labels: Vec<Label> = chunk.iter().map(|&i| labeled.items[i].1.clone()).collect();
            let batch = EncodedBatch::build(&refs, trainer.runtime())?;
            let dropout_rng = trainer.uses_dropout().then_some(&mut rng);
            let loss = trainer.step(dropout_rng, |graph, params, runtime, dr| {
                supervised_loss(graph, params, runtime, &task, &batch, &labels, dr)
            })?;
            losses.push(loss);
        }
        epoch_losses.push(mean(&losses));
    }
    let child = init.child_from_model(trainer.into_model(), "finetuned", None)?;
    let log = PhaseLog { phase: "finetune".into(), checkpoint_id: child.id(), epoch_losses };
    Ok((child, log))
}

/// Iterative self-training. Each round: the current teacher pseudo-labels
/// the whole unlabeled set afresh, a student trains on the joint objective
/// (round 1 from `student_init`, later rounds from the previous student),
/// and the student becomes the next teacher. Stops at `max_rounds` or after
/// `patience` rounds without a dev improvement. Returns the best checkpoint
/// on dev, which may be the original teacher.
pub fn run_self_training(
    teacher: &ModelCheckpoint,
    student_init: &ModelCheckpoint,
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    dev: &LabeledSet,
    config: &RegimeConfig,
) -> Result<(ModelCheckpoint, Vec<RoundLog>)> {
    config.validate()?;
    if unlabeled.is_empty() {
        return Err(TfsError::Protocol("self-training needs a nonempty unlabeled set".into()));
    }
    if labeled.is_empty() {
        return Err(TfsError::Protocol("self-training needs a nonempty labeled set".into()));
    }
    if dev.is_empty() {
        return Err(TfsError::Protocol("self-training needs a dev set to decide convergence".into()));
    }
    let task = config.task;
    check_architecture(teacher, config, "teacher")?;
    check_architecture(student_init, config, "student init")?;
    if !teacher.has_head(HeadKind::for_task(&task)) {
        return Err(TfsError::Protocol(format!(
            "teacher {} has no task head; finetune it first",
            teacher.id()
        )));
    }

    let teacher_dev =
        evaluate(&Model::from_checkpoint(teacher), &task, dev, config.batch_size, "dev")?;
    let mut best = (teacher.clone(), teacher_dev.value);
    let mut non_improving = 0usize;
    let mut current_teacher = teacher.clone();
    let mut previous: Option<(ModelCheckpoint, crate::objectives::PseudoLabeledSet)> = None;
    let mut logs = Vec::new();

    for round in 1..=config.max_rounds {
        let pseudo =
            generate_pseudo_labels(&current_teacher, unlabeled, &task, config.pseudo_batch_size)?;
        let agreement =
            previous.as_ref().map(|(_, prev)| prev.agreement(&pseudo)).transpose()?;

        let init_ckpt = match &previous {
            None => student_init.clone(),
            Some((student, _)) => student.clone(),
        };
        let mut model = Model::from_checkpoint(&init_ckpt);
        model.ensure_head(HeadKind::for_task(&task), seeding::derive(config.seed, &["st", "head"]))?;
        let mut trainer = Trainer::new(model, config.optimizer, config.encoder.dropout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(
            config.seed,
            &["st", &format!("round_{round}")],
        ));

        let mut labeled_cycle = Cycler::new(labeled.len());
        let mut train_losses = Vec::new();
        for _ in 0..config.st_epochs_per_round {
            let order = shuffled(pseudo.len(), &mut rng);
            let mut losses = Vec::new();
            for chunk in order.chunks(config.pseudo_batch_size) {
                let pseudo_refs: Vec<&Example> =
                    chunk.iter().map(|&i| &pseudo.items[i].0).collect();
                let pseudo_labels: Vec<PseudoLabel> =
                    chunk.iter().map(|&i| pseudo.items[i].1.clone()).collect();
                let labeled_idx = labeled_cycle.draw(config.batch_size, &mut rng);
                let labeled_refs: Vec<&Example> =
                    labeled_idx.iter().map(|&i| &labeled.items[i].0).collect();
                let labels: Vec<Label> =
                    labeled_idx.iter().map(|&i| labeled.items[i].1.clone()).collect();
                let labeled_batch = EncodedBatch::build(&labeled_refs, trainer.runtime())?;
                let pseudo_batch = EncodedBatch::build(&pseudo_refs, trainer.runtime())?;
                let dropout_rng = trainer.uses_dropout().then_some(&mut rng);
                let loss = trainer.step(dropout_rng, |graph, params, runtime, dr| {
                    st_loss(
                        graph,
                        params,
                        runtime,
                        &task,
                        (&labeled_batch, &labels),
                        Some((&pseudo_batch, &pseudo_labels)),
                        config.lambda,
                        dr,
                    )
                })?;
                losses.push(loss);
            }
            train_losses.push(mean(&losses));
        }

        let student = init_ckpt.child_from_model(
            trainer.into_model(),
            &format!("student_round_{round}"),
            Some(current_teacher.id()),
        )?;
        let dev_value =
            evaluate(&Model::from_checkpoint(&student), &task, dev, config.batch_size, "dev")?
                .value;
        logs.push(RoundLog {
            round,
            teacher_id: current_teacher.id(),
            student_id: student.id(),
            pseudo_agreement: agreement,
            pseudo_hash: pseudo.content_hash(),
            dev_metric: dev_value,
            train_losses,
        });

        if dev_value > best.1 {
            best = (student.clone(), dev_value);
            non_improving = 0;
        } else {
            non_improving += 1;
        }
        current_teacher = student.clone();
        previous = Some((student, pseudo));
        if non_improving >= config.patience {
            break;
        }
    }
    Ok((best.0, logs))
}

/// Split a labeled set into (train, dev) by holding out `fraction` of it,
/// at least one example on each side.
pub fn carve_dev(labeled: &LabeledSet, fraction: f64, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    let n = labeled.len();
    if n < 2 {
        return Err(TfsError::Protocol(format!(
            "cannot hold out a dev set from {n} labeled example(s)"
        )));
    }
    if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(TfsError::Config(format!("dev fraction {fraction} must lie in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled(n, &mut rng);
    let dev_n = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut dev_idx: Vec<usize> = order[..dev_n].to_vec();
    let mut train_idx: Vec<usize> = order[dev_n..].to_vec();
    dev_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize]| LabeledSet {
        items: idx.iter().map(|&i| labeled.items[i].clone()).collect(),
    };
    Ok((pick(&train_idx), pick(&dev_idx)))
}
