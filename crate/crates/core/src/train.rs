//! Cross-entropy objective, Adam, and early-stopped mini-batch training.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{make_batches, DatasetSplit, Dialogue, DialogueBatch};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::metrics::{weighted_f1, EvaluationReport};
use crate::model::{argmax_rows, CmRobertaModel};
use crate::params::{GradBuffer, ParamStore};
use crate::tensor::Tensor;

/// Dialogues per gradient chunk. Chunks are reduced in a fixed order so the
/// summed gradient does not depend on scheduling.
pub const GRAD_CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Dialogues per batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Apply weight decay directly to the parameters instead of through the gradient.
    pub decoupled_weight_decay: bool,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 3e-4,
            batch_size: 32,
            max_epochs: 200,
            patience: 15,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decoupled_weight_decay: false,
            grad_clip: None,
            seed: 0,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return fail("batch_size, max_epochs and patience must be positive".into());
        }
        if self.patience > self.max_epochs {
            return fail(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Mean of `-log softmax(logits)[label]` over positions with `mask` set.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[i64], mask: &[bool]) -> Result<Var> {
    let (sum, n) = cross_entropy_sum(g, logits, labels, mask)?;
    Ok(g.scale(sum, 1.0 / n as f64))
}

/// Summed loss and number of valid positions.
pub fn cross_entropy_sum(g: &mut Graph, logits: Var, labels: &[i64], mask: &[bool]) -> Result<(Var, usize)> {
    let (t, c) = g.value(logits).dims2()?;
    if labels.len() != t || mask.len() != t {
        return Err(Error::Contract(format!(
            "{} labels and {} mask entries for {t} logit rows",
            labels.len(),
            mask.len()
        )));
    }
    let mut index = Vec::with_capacity(t);
    for (i, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if y < 0 || y as usize >= c {
            return Err(Error::Data(format!("label {y} at position {i} outside 0..{c}")));
        }
        index.push(i * c + y as usize);
    }
    if index.is_empty() {
        return Err(Error::Contract("no valid positions for the loss".into()));
    }
    let n = index.len();
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.gather(logp, index)?;
    let total = g.sum(picked);
    Ok((g.scale(total, -1.0), n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value().len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, p), (m, v))| m.len() == p.value().len() && v.len() == p.value().len())
    }
}

/// One bias-corrected Adam update with L2 weight decay.
pub fn adam_step(state: &mut AdamState, store: &mut ParamStore, grads: &GradBuffer, cfg: &TrainConfig) -> Result<()> {
    if !state.matches(store) {
        return Err(Error::Contract("Adam state does not match the parameter set".into()));
    }
    let scale = match cfg.grad_clip {
        Some(max) => {
            let norm = store
                .ids()
                .flat_map(|id| grads.get(id).iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > max { max / norm } else { 1.0 }
        }
        None => 1.0,
    };
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let k = id.index();
        let grad = grads.get(id);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let theta = store.value_mut(id).data_mut();
        for i in 0..theta.len() {
            let mut g = grad[i] * scale;
            if !cfg.decoupled_weight_decay {
                g += cfg.weight_decay * theta[i];
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let mut update = m_hat / (v_hat.sqrt() + cfg.adam_eps);
            if cfg.decoupled_weight_decay {
                update += cfg.weight_decay * theta[i];
            }
            theta[i] -= cfg.learning_rate * update;
        }
    }
    Ok(())
}

/// Mean batch loss and its gradient.
///
/// Each dialogue contributes its summed loss divided by the number of valid
/// positions in the whole batch.
pub fn batch_gradients(model: &CmRobertaModel, batch: &DialogueBatch, mode: ExecMode) -> Result<(f64, GradBuffer)> {
    let n_valid = batch.n_valid();
    if n_valid == 0 {
        return Err(Error::Contract("batch without valid positions".into()));
    }
    let weight = 1.0 / n_valid as f64;
    let starts: Vec<usize> = (0..batch.len()).step_by(GRAD_CHUNK).collect();
    let chunks = exec::map(mode, &starts, |&start| -> Result<(f64, GradBuffer)> {
        let mut buf = GradBuffer::zeros_like(model.params());
        let mut loss = 0.0;
        for b in start..(start + GRAD_CHUNK).min(batch.len()) {
            let item = batch.dialogue(b)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, &item.audio, &item.text, item.mask)?;
            let (sum, _) = cross_entropy_sum(&mut g, out.logits, item.labels, item.mask)?;
            let scaled = g.scale(sum, weight);
            loss += g.value(scaled).item()?;
            g.backward(scaled)?.accumulate_into_buffer(&mut buf);
        }
        Ok((loss, buf))
    });
    let mut total = GradBuffer::zeros_like(model.params());
    let mut loss = 0.0;
    for chunk in chunks {
        let (l, buf) = chunk?;
        loss += l;
        total.add_assign(&buf);
    }
    Ok((loss, total))
}

/// Per-utterance predictions and summed loss over a split, in dialogue order.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitOutputs {
    pub loss_sum: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl SplitOutputs {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.labels.len().max(1) as f64
    }
}

pub fn predict_split(model: &CmRobertaModel, split: &DatasetSplit, mode: ExecMode) -> Result<SplitOutputs> {
    let per_dialogue = exec::map(mode, &split.dialogues, |d: &Dialogue| -> Result<(f64, Vec<usize>)> {
        let mask = vec![true; d.len()];
        let labels: Vec<i64> = d.labels.iter().map(|&l| l as i64).collect();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &d.audio, &d.text, &mask)?;
        let (sum, _) = cross_entropy_sum(&mut g, out.logits, &labels, &mask)?;
        Ok((g.value(sum).item()?, argmax_rows(g.value(out.logits))))
    });
    let mut outputs = SplitOutputs {
        loss_sum: 0.0,
        predictions: Vec::with_capacity(split.n_utterances()),
        labels: Vec::with_capacity(split.n_utterances()),
    };
    for (d, res) in split.dialogues.iter().zip(per_dialogue) {
        let (loss, preds) = res?;
        outputs.loss_sum += loss;
        outputs.predictions.extend(preds);
        outputs.labels.extend_from_slice(&d.labels);
    }
    Ok(outputs)
}

/// Arg-max predictions on every utterance, scored with weighted F1.
pub fn evaluate(model: &CmRobertaModel, split: &DatasetSplit, mode: ExecMode) -> Result<EvaluationReport> {
    Ok(evaluate_with_loss(model, split, mode)?.1)
}

pub fn evaluate_with_loss(
    model: &CmRobertaModel,
    split: &DatasetSplit,
    mode: ExecMode,
) -> Result<(f64, EvaluationReport)> {
    let out = predict_split(model, split, mode)?;
    let report = weighted_f1(&out.predictions, &out.labels, &split.header.label_names)?;
    Ok((out.mean_loss(), report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

/// Tracks the best validation loss; an epoch counts as progress only if it
/// strictly lowers the best value seen so far.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stale,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the validation loss of 1-based `epoch`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            Verdict::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Stale
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochSchedule {
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub reason: StopReason,
}

/// Runs `epoch(state, e)` for `e = 1..=max_epochs` until patience runs out.
///
/// `epoch` returns the validation loss; `on_best` fires after each improvement.
pub fn drive_epochs<S, E, B>(
    max_epochs: usize,
    patience: usize,
    state: &mut S,
    mut epoch: E,
    mut on_best: B,
) -> Result<EpochSchedule>
where
    E: FnMut(&mut S, usize) -> Result<f64>,
    B: FnMut(&mut S, usize),
{
    let mut stopper = EarlyStopping::new(patience);
    for e in 1..=max_epochs {
        let loss = epoch(state, e)?;
        if loss.is_nan() {
            return Err(Error::Diverged {
                epoch: e,
                msg: "validation loss is NaN".into(),
            });
        }
        match stopper.observe(e, loss) {
            Verdict::Improved => on_best(state, e),
            Verdict::Stale => {}
            Verdict::Stop => {
                return Ok(EpochSchedule {
                    stopped_epoch: e,
                    best_epoch: stopper.best_epoch(),
                    reason: StopReason::Patience,
                })
            }
        }
    }
    Ok(EpochSchedule {
        stopped_epoch: max_epochs,
        best_epoch: stopper.best_epoch(),
        reason: StopReason::MaxEpochs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_weighted_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_epoch: usize,
    pub stop_reason: StopReason,
}

pub struct FitOutcome {
    pub report: TrainReport,
    /// Optimiser state at the best epoch.
    pub adam: AdamState,
}

/// Shuffle seed for 1-based `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fit(model: &mut CmRobertaModel, train: &DatasetSplit, val: &DatasetSplit, cfg: &TrainConfig) -> Result<FitOutcome> {
    fit_observed(model, train, val, cfg, |_| {})
}

/// Trains until early stopping and restores the best-epoch parameters.
///
/// `observer` sees every epoch record as soon as it is complete.
pub fn fit_observed<O>(
    model: &mut CmRobertaModel,
    train: &DatasetSplit,
    val: &DatasetSplit,
    cfg: &TrainConfig,
    mut observer: O,
) -> Result<FitOutcome>
where
    O: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    struct State<'m> {
        model: &'m mut CmRobertaModel,
        adam: AdamState,
        records: Vec<EpochRecord>,
        best: Option<(Vec<Arc<Tensor>>, AdamState)>,
    }
    let mut state = State {
        adam: AdamState::new(model.params()),
        model,
        records: Vec::new(),
        best: None,
    };
    let n_train = train.n_utterances() as f64;

    let schedule = drive_epochs(
        cfg.max_epochs,
        cfg.patience,
        &mut state,
        |st, epoch| {
            let mut loss_sum = 0.0;
            for batch in make_batches(train, cfg.batch_size, epoch_seed(cfg.seed, epoch))? {
                let (loss, grads) = batch_gradients(st.model, &batch, cfg.exec)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        msg: format!("non-finite training loss {loss}"),
                    });
                }
                adam_step(&mut st.adam, st.model.params_mut(), &grads, cfg)?;
                loss_sum += loss * batch.n_valid() as f64;
            }
            if !st.model.params().all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: "non-finite parameter after update".into(),
                });
            }
            let (val_loss, report) = evaluate_with_loss(st.model, val, cfg.exec)?;
            if !val_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!("non-finite validation loss {val_loss}"),
                });
            }
            let record = EpochRecord {
                epoch,
                train_loss: loss_sum / n_train,
                val_loss,
                val_weighted_f1: report.weighted_f1,
            };
            observer(&record);
            st.records.push(record);
            Ok(val_loss)
        },
        |st, _| st.best = Some((st.model.params().snapshot(), st.adam.clone())),
    )?;

    let (params, adam) = state
        .best
        .take()
        .ok_or_else(|| Error::Contract("no epoch completed".into()))?;
    state.model.params_mut().restore(&params)?;
    let best_val_loss = state.records[schedule.best_epoch - 1].val_loss;
    Ok(FitOutcome {
        report: TrainReport {
            epochs: state.records,
            best_epoch: schedule.best_epoch,
            best_val_loss,
            stopped_epoch: schedule.stopped_epoch,
            stop_reason: schedule.reason,
        },
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{synthesize, SyntheticSpec};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ce_of(logits: Tensor, labels: &[i64], mask: &[bool]) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(logits);
        let l = cross_entropy(&mut g, x, labels, mask)?;
        g.value(l).item()
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = ce_of(Tensor::zeros(&[1, 7]), &[4], &[true]).unwrap();
        assert_abs_diff_eq!(uniform, 7f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(uniform, 1.945910, epsilon = 1e-6);
        let two = ce_of(Tensor::from_rows(&[[3f64.ln(), 0.0]]).unwrap(), &[0], &[true]).unwrap();
        assert_abs_diff_eq!(two, (4.0f64 / 3.0).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(two, 0.287682, epsilon = 1e-6);
        let sure = ce_of(Tensor::from_rows(&[[0.0, 60.0, 0.0]]).unwrap(), &[1], &[true]).unwrap();
        assert!(sure < 1e-25);
    }

    #[test]
    fn cross_entropy_ignores_padding_and_reports_positions() {
        let logits = Tensor::from_rows(&[[0.0, 0.0], [5.0, -5.0]]).unwrap();
        let v = ce_of(logits.clone(), &[0, -1], &[true, false]).unwrap();
        assert_abs_diff_eq!(v, 2f64.ln(), epsilon = 1e-15);
        let err = ce_of(logits.clone(), &[0, 2], &[true, true]).unwrap_err();
        assert!(matches!(err, Error::Data(_)) && err.to_string().contains("position 1"), "{err}");
        assert!(ce_of(logits, &[0, 0], &[false, false]).is_err());
    }

    fn scalar_store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::vector(values.to_vec())).unwrap();
        s
    }

    fn grads_of(store: &ParamStore, g: &[f64]) -> GradBuffer {
        let mut buf = GradBuffer::zeros_like(store);
        buf.0[0].copy_from_slice(g);
        buf
    }

    #[test]
    fn adam_examples() {
        let cfg = TrainConfig { weight_decay: 0.0, learning_rate: 1e-3, ..TrainConfig::default() };
        let mut s = scalar_store(&[0.5, -2.0]);
        let mut st = AdamState::new(&s);
        let gb = grads_of(&s, &[0.0, 0.0]);
        adam_step(&mut st, &mut s, &gb, &cfg).unwrap();
        assert_eq!(s.value(s.id("theta").unwrap()).data(), &[0.5, -2.0]);

        let mut s = scalar_store(&[0.5, -2.0]);
        let mut st = AdamState::new(&s);
        let gb = grads_of(&s, &[3.0, -0.02]);
        adam_step(&mut st, &mut s, &gb, &cfg).unwrap();
        let th = s.value(s.id("theta").unwrap()).data().to_vec();
        assert_abs_diff_eq!(th[0] - 0.5, -1e-3, epsilon = 1e-9);
        assert_abs_diff_eq!(th[1] + 2.0, 1e-3, epsilon = 1e-8);

        let decay = TrainConfig { weight_decay: 3e-4, ..cfg };
        let mut s = scalar_store(&[0.5]);
        let mut st = AdamState::new(&s);
        for _ in 0..3 {
            let before = s.value(s.id("theta").unwrap()).data()[0];
            let gb = grads_of(&s, &[0.0]);
        adam_step(&mut st, &mut s, &gb, &decay).unwrap();
            assert!(s.value(s.id("theta").unwrap()).data()[0] < before);
        }
        assert_eq!(st.t, 3);
        assert!(st.v[0].iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        // independent textbook implementation on one scalar
        for decoupled in [false, true] {
            let cfg = TrainConfig {
                learning_rate: 0.01,
                weight_decay: 0.05,
                decoupled_weight_decay: decoupled,
                ..TrainConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut s = scalar_store(&[0.7]);
            let mut st = AdamState::new(&s);
            let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
            for step in 1..=100 {
                let grad: f64 = rng.random_range(-2.0..2.0);
                let gb = grads_of(&s, &[grad]);
        adam_step(&mut st, &mut s, &gb, &cfg).unwrap();
                let g = if decoupled { grad } else { grad + 0.05 * theta };
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(step));
                let vh = v / (1.0 - 0.999f64.powi(step));
                let wd = if decoupled { 0.05 * theta } else { 0.0 };
                theta -= 0.01 * (mh / (vh.sqrt() + 1e-8) + wd);
                let got = s.value(s.id("theta").unwrap()).data()[0];
                assert_abs_diff_eq!(got, theta, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gradient_clipping_bounds_the_step_direction() {
        let cfg = TrainConfig { weight_decay: 0.0, grad_clip: Some(1.0), learning_rate: 0.1, ..TrainConfig::default() };
        let mut s = scalar_store(&[0.0, 0.0]);
        let mut st = AdamState::new(&s);
        let gb = grads_of(&s, &[30.0, 40.0]);
        adam_step(&mut st, &mut s, &gb, &cfg).unwrap();
        assert_abs_diff_eq!(st.m[0][0], 0.1 * 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(st.m[0][1], 0.1 * 0.8, epsilon = 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { weight_decay: -1.0, ..TrainConfig::default() },
            TrainConfig { patience: 201, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { beta2: 1.0, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    fn schedule(losses: impl Fn(usize) -> f64, max: usize, patience: usize) -> (EpochSchedule, Vec<usize>) {
        let mut improved = Vec::new();
        let s = drive_epochs(max, patience, &mut improved, |_, e| Ok(losses(e)), |imp, e| imp.push(e)).unwrap();
        (s, improved)
    }

    #[test]
    fn early_stopping_counts() {
        let (s, imp) = schedule(|_| 1.0, 200, 15);
        assert_eq!((s.stopped_epoch, s.best_epoch, s.reason), (16, 1, StopReason::Patience));
        assert_eq!(imp, vec![1]);
        assert_eq!(s.stopped_epoch - s.best_epoch, 15);

        let (s, imp) = schedule(|e| 1.0 / e as f64, 200, 15);
        assert_eq!((s.stopped_epoch, s.best_epoch, s.reason), (200, 200, StopReason::MaxEpochs));
        assert_eq!(imp.len(), 200);

        let (s, _) = schedule(|_| 1.0, 20, 5);
        assert_eq!(s.stopped_epoch, 6);
        let (s, _) = schedule(|e| 1.0 / e as f64, 20, 5);
        assert_eq!(s.stopped_epoch, 20);

        // improvement at epoch 4 resets the counter
        let (s, _) = schedule(|e| if e >= 4 { 0.5 } else { 1.0 }, 50, 5);
        assert_eq!((s.stopped_epoch, s.best_epoch), (9, 4));
    }

    #[test]
    fn nan_validation_loss_is_divergence() {
        let err = drive_epochs(10, 3, &mut (), |_, e| Ok(if e == 2 { f64::NAN } else { 1.0 }), |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 2, .. }));
    }

    fn tiny_setup(seed: u64) -> (CmRobertaModel, DatasetSplit, DatasetSplit) {
        let spec = SyntheticSpec {
            n_dialogues: 12,
            min_utterances: 2,
            max_utterances: 4,
            d_audio: 6,
            d_text: 5,
            n_classes: 3,
            seed,
            ..SyntheticSpec::default()
        };
        let synth = crate::synth::Synthesizer::new(spec).unwrap();
        let model = CmRobertaModel::new(ModelConfig {
            d_audio_in: 6,
            d_text_in: 5,
            d_model: 8,
            n_sca_layers: 1,
            n_classes: 3,
            audio_lld_dim: 3,
            seed,
            ..ModelConfig::default()
        })
        .unwrap();
        (model, synth.split(0, 12).unwrap(), synth.split(1, 6).unwrap())
    }

    #[test]
    fn batch_gradients_are_mode_independent_and_additive() {
        let (model, train, _) = tiny_setup(1);
        let batch = crate::data::ordered_batches(&train, 7).unwrap().remove(0);
        let (ls, gs) = batch_gradients(&model, &batch, ExecMode::Sequential).unwrap();
        let (lp, gp) = batch_gradients(&model, &batch, ExecMode::Parallel).unwrap();
        assert_eq!(ls.to_bits(), lp.to_bits());
        assert_eq!(gs, gp);

        // loss equals the mean per-utterance loss over the batch
        let mut total = 0.0;
        for b in 0..batch.len() {
            let item = batch.dialogue(b).unwrap();
            let mut g = Graph::new();
            let out = model.forward(&mut g, &item.audio, &item.text, item.mask).unwrap();
            let (sum, _) = cross_entropy_sum(&mut g, out.logits, item.labels, item.mask).unwrap();
            total += g.value(sum).item().unwrap();
        }
        assert_abs_diff_eq!(ls, total / batch.n_valid() as f64, epsilon = 1e-12);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (model, train, _) = tiny_setup(2);
        let batch = crate::data::ordered_batches(&train, 12).unwrap().remove(0);
        let (_, grads) = batch_gradients(&model, &batch, ExecMode::default()).unwrap();
        for (id, p) in model.params().iter() {
            assert!(grads.get(id).iter().any(|&g| g != 0.0), "{} has no gradient", p.name());
        }
    }

    #[test]
    fn fit_restores_best_parameters_and_is_deterministic() {
        let cfg = TrainConfig { learning_rate: 1e-2, batch_size: 4, max_epochs: 6, patience: 2, seed: 5, ..TrainConfig::default() };
        let (mut a, train, val) = tiny_setup(3);
        let out = fit(&mut a, &train, &val, &cfg).unwrap();
        let r = &out.report;
        assert!(r.epochs.len() <= 6);
        let min = r.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_val_loss, min);
        assert_eq!(r.epochs[r.best_epoch - 1].val_loss, min);
        let (loss, _) = evaluate_with_loss(&a, &val, ExecMode::default()).unwrap();
        assert_eq!(loss, min);

        let (mut b, _, _) = tiny_setup(3);
        let again = fit(&mut b, &train, &val, &TrainConfig { exec: ExecMode::Sequential, ..cfg }).unwrap();
        assert_eq!(again.report, out.report);
        assert_eq!(again.adam, out.adam);
    }

    #[test]
    fn evaluate_is_side_effect_free() {
        let (model, _, val) = tiny_setup(4);
        let a = evaluate(&model, &val, ExecMode::default()).unwrap();
        let b = evaluate(&model, &val, ExecMode::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.confusion.iter().flatten().sum::<usize>(), val.n_utterances());
    }

    #[test]
    fn fit_rejects_empty_splits() {
        let (mut m, train, _) = tiny_setup(5);
        let empty = DatasetSplit::new(train.header.clone()).unwrap();
        assert!(matches!(fit(&mut m, &train, &empty, &TrainConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn epoch_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (1..100).map(|e| epoch_seed(0, e)).collect();
        assert_eq!(seeds.len(), 99);
    }

    #[test]
    fn synthetic_helper_is_usable() {
        assert!(synthesize(&SyntheticSpec { n_dialogues: 1, ..SyntheticSpec::default() }).is_ok());
    }
}
