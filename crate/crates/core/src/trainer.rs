//! Training regimes and evaluation.
//!
//! Every regime runs the same minibatch loop: per-sample forward/backward
//! fans out through [`Exec`], the per-sample gradients are summed in input
//! order, and one AdamW step is applied to the regime's trainable set. The
//! ordered reduction keeps sequential and parallel runs bit-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::config::{parse_value, Configurable};
use crate::data::{Dataset, Sample};
use crate::encoder::{argmax, EncoderModel, ModelGrads, ParamId, Projection};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{Rng, Vector};
use crate::metrics::{self, MetricReport};
use crate::objectives::{fullshot_loss, KlDirection, LossReport, MimKind, MimPairing, MimSpec};
use crate::optim::{best_epoch, early_stop, AdamW, EarlyStop, OptimConfig, OptimState};
use crate::users::{anonymous, pdropout_mask, Mask, PDropoutConfig, UserId, UserRegistry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Regime {
    /// Adapters, head and A-user embeddings trained jointly.
    FullShot,
    /// Only new users' embeddings, on a frozen model.
    FewShot,
    /// Generic full-shot (every user masked), then per-user embedding fits.
    TwoStage,
    /// Task path and head only; users are ignored.
    LoRAOnly,
    /// Person path and head only; the task path is switched off.
    PKIOnly,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::FullShot => "full",
            Regime::FewShot => "fewshot",
            Regime::TwoStage => "2s",
            Regime::LoRAOnly => "lora",
            Regime::PKIOnly => "pki",
        }
    }

    pub fn uses_users(self) -> bool {
        self != Regime::LoRAOnly
    }

    /// Trainable model tensors (user embeddings are handled separately).
    pub fn trainable_params(self, model: &EncoderModel) -> Vec<ParamId> {
        model
            .param_ids()
            .into_iter()
            .filter(|id| match (self, id) {
                (Regime::FewShot, _) => false,
                (_, ParamId::HeadWeight | ParamId::HeadBias) => true,
                (_, ParamId::SharedOut(..)) => true,
                (Regime::LoRAOnly, ParamId::TaskIn(..)) => true,
                (Regime::LoRAOnly, ParamId::PersonIn(..)) => false,
                (Regime::PKIOnly, ParamId::TaskIn(..)) => false,
                (Regime::PKIOnly, ParamId::PersonIn(..)) => true,
                (Regime::FullShot | Regime::TwoStage, _) => true,
            })
            .collect()
    }

    /// Trainable parameter count, user embeddings included.
    pub fn trainable_count(self, model: &EncoderModel, registry: &UserRegistry) -> usize {
        let tensors: usize = self
            .trainable_params(model)
            .into_iter()
            .map(|id| model.param(id).len())
            .sum();
        let users = if self.uses_users() {
            registry.parameter_count()
        } else {
            0
        };
        tensors + users
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" | "fullshot" => Regime::FullShot,
            "fewshot" => Regime::FewShot,
            "2s" | "twostage" => Regime::TwoStage,
            "lora" => Regime::LoRAOnly,
            "pki" => Regime::PKIOnly,
            _ => {
                return Err(Error::Config(format!(
                    "unknown regime {s:?} (expected full, lora, pki, 2s or fewshot)"
                )))
            }
        })
    }
}

/// All parameters: frozen backbone, adapters, head, and registered users.
pub fn total_params(model: &EncoderModel, registry: &UserRegistry) -> usize {
    model.frozen_count() + model.adapter_count() + model.head_count() + registry.parameter_count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub regime: Regime,
    /// Personalized-dropout ratio.
    pub omega: f64,
    /// Weight of the MIM term.
    pub alpha: f64,
    pub mim: MimSpec,
    pub optim: OptimConfig,
    pub lr_fewshot: f64,
    pub epochs: usize,
    pub epochs_fewshot: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            regime: Regime::FullShot,
            omega: 0.2,
            alpha: 2.5,
            mim: MimSpec::default(),
            optim: OptimConfig::default(),
            lr_fewshot: 1e-2,
            epochs: 20,
            epochs_fewshot: 20,
            batch_size: 16,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::Config(format!("omega must lie in [0, 1], got {}", self.omega)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_fewshot > 0.0) {
            return Err(Error::Config("lr_fewshot must be > 0".into()));
        }
        self.optim.validate()
    }

    fn fewshot_optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr_fewshot,
            ..self.optim.clone()
        }
    }
}

fn mim_kind_name(k: MimKind) -> &'static str {
    match k {
        MimKind::Mse => "mse",
        MimKind::Kl => "kl",
    }
}

impl Configurable for RunConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("bad value {value:?} for `{key}`"));
        match key {
            "regime" => self.regime = value.parse()?,
            "omega" => self.omega = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "mim_kind" => {
                self.mim.kind = match value {
                    "mse" => MimKind::Mse,
                    "kl" => MimKind::Kl,
                    _ => return Err(bad()),
                }
            }
            "teacher_stop_grad" => self.mim.teacher_stop_grad = parse_value(key, value)?,
            "kl_direction" => {
                self.mim.kl_direction = match value {
                    "personal_to_generic" => KlDirection::PersonalToGeneric,
                    "generic_to_personal" => KlDirection::GenericToPersonal,
                    _ => return Err(bad()),
                }
            }
            "mim_pairing" => {
                self.mim.pairing = match value {
                    "pooled" => MimPairing::Pooled,
                    "all_blocks" => MimPairing::AllBlocks,
                    _ => return Err(bad()),
                }
            }
            "lr" => self.optim.lr = parse_value(key, value)?,
            "beta1" => self.optim.beta1 = parse_value(key, value)?,
            "beta2" => self.optim.beta2 = parse_value(key, value)?,
            "eps" => self.optim.eps = parse_value(key, value)?,
            "weight_decay" => self.optim.weight_decay = parse_value(key, value)?,
            "patience" => self.optim.patience = parse_value(key, value)?,
            "lr_fewshot" => self.lr_fewshot = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "epochs_fewshot" => self.epochs_fewshot = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        let kl = match self.mim.kl_direction {
            KlDirection::PersonalToGeneric => "personal_to_generic",
            KlDirection::GenericToPersonal => "generic_to_personal",
        };
        let pairing = match self.mim.pairing {
            MimPairing::Pooled => "pooled",
            MimPairing::AllBlocks => "all_blocks",
        };
        let o = &self.optim;
        vec![
            ("regime".into(), self.regime.name().into()),
            ("omega".into(), format!("{:?}", self.omega)),
            ("alpha".into(), format!("{:?}", self.alpha)),
            ("mim_kind".into(), mim_kind_name(self.mim.kind).into()),
            ("teacher_stop_grad".into(), self.mim.teacher_stop_grad.to_string()),
            ("kl_direction".into(), kl.into()),
            ("mim_pairing".into(), pairing.into()),
            ("lr".into(), format!("{:?}", o.lr)),
            ("beta1".into(), format!("{:?}", o.beta1)),
            ("beta2".into(), format!("{:?}", o.beta2)),
            ("eps".into(), format!("{:?}", o.eps)),
            ("weight_decay".into(), format!("{:?}", o.weight_decay)),
            ("patience".into(), o.patience.to_string()),
            ("lr_fewshot".into(), format!("{:?}", self.lr_fewshot)),
            ("epochs".into(), self.epochs.to_string()),
            ("epochs_fewshot".into(), self.epochs_fewshot.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Each sample uses its user's registered embedding.
    Personalized,
    /// Every sample uses the anonymous (zero) embedding.
    ZeroShot,
    /// Plain affine inference through weights folded for this user; only
    /// the user's own samples are scored.
    Merged(UserId),
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Personalized => f.write_str("personalized"),
            EvalMode::ZeroShot => f.write_str("zero-shot"),
            EvalMode::Merged(u) => write!(f, "merged:{u}"),
        }
    }
}

pub fn predict_all(
    model: &EncoderModel,
    registry: &UserRegistry,
    data: &Dataset,
    mode: &EvalMode,
    exec: Exec,
) -> Result<Vec<usize>> {
    let d_p = model.config().plora.d_p;
    match mode {
        EvalMode::Personalized => {
            let ps = data
                .samples
                .iter()
                .map(|s| registry.require(&s.user))
                .collect::<Result<Vec<_>>>()?;
            let items: Vec<(&Sample, &Vector)> = data.samples.iter().zip(ps).collect();
            exec.try_map(&items, |(s, p)| model.predict(&s.tokens, p))
        }
        EvalMode::ZeroShot => {
            let zero = anonymous(d_p);
            exec.try_map(&data.samples, |s| model.predict(&s.tokens, &zero))
        }
        EvalMode::Merged(user) => {
            let p = registry.require(user)?;
            match model.folded_embedding() {
                Some(f) if f == *p => {}
                Some(_) => {
                    return Err(Error::State(format!(
                        "model is not merged for user {user}"
                    )))
                }
                None => return Err(Error::State("model is not merged".into())),
            }
            exec.try_map(&data.samples, |s| {
                let trace = model.forward_folded(&s.tokens)?;
                Ok(argmax(trace.logits.as_slice()))
            })
        }
    }
}

/// Accuracy, MSE and macro-F1 on `data`, with the TP ratio of `regime`.
pub fn evaluate(
    model: &EncoderModel,
    registry: &UserRegistry,
    data: &Dataset,
    mode: &EvalMode,
    regime: Regime,
    exec: Exec,
) -> Result<MetricReport> {
    let scoped;
    let data = match mode {
        EvalMode::Merged(u) => {
            scoped = data.for_user(u);
            if scoped.is_empty() {
                return Err(Error::Data(format!("no samples for user {u}")));
            }
            &scoped
        }
        _ => data,
    };
    let preds = predict_all(model, registry, data, mode, exec)?;
    metrics::compute(
        &preds,
        &data.labels(),
        regime.trainable_count(model, registry),
        total_params(model, registry),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub mim: f64,
    pub masked: usize,
    pub samples: usize,
    pub dev: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept (best dev Acc), if dev was used.
    pub best_epoch: Option<usize>,
    pub optim: OptimState,
    pub log: Vec<String>,
}

impl TrainOutcome {
    fn extend(&mut self, other: TrainOutcome) {
        self.epochs.extend(other.epochs);
        self.log.extend(other.log);
        self.optim = other.optim;
    }
}

fn format_epoch(regime: Regime, s: &EpochStats) -> Vec<String> {
    let mut lines = vec![format!(
        "regime={regime} epoch={} split=train loss={:.6} ce={:.6} mim={:.6} masked={} n={}",
        s.epoch, s.loss, s.ce, s.mim, s.masked, s.samples
    )];
    if let Some(d) = &s.dev {
        lines.push(format!(
            "regime={regime} epoch={} split=dev acc={:.6} mse={:.6} macro_f1={:.6} n={}",
            s.epoch, d.acc, d.mse, d.macro_f1, d.n
        ));
    }
    lines
}

/// What one minibatch loop may change.
struct Trainable {
    params: Vec<ParamId>,
    users: BTreeSet<UserId>,
}

/// Per-sample work: the embedding the sample runs with, and whether it is
/// the user's own (trainable, MIM-eligible) embedding.
struct Item<'a> {
    sample: &'a Sample,
    p: Vector,
    personal: bool,
}

struct SampleGrad {
    grads: ModelGrads,
    report: LossReport,
}

fn sample_grad(model: &EncoderModel, item: &Item<'_>, alpha: f64, mim: &MimSpec) -> Result<SampleGrad> {
    let tokens = &item.sample.tokens;
    let personal = model.forward(tokens, &item.p)?;
    let generic = if item.personal && alpha > 0.0 {
        Some(model.forward(tokens, &anonymous(item.p.len()))?)
    } else {
        None
    };
    let loss = fullshot_loss(&personal, generic.as_ref(), item.sample.label, alpha, mim)?;
    let mut grads = model.backward(&personal, &loss.personal)?;
    if let (Some(trace), Some(up)) = (&generic, &loss.generic) {
        // p is a constant zero on the generic pass; only shared tensors learn
        grads.accumulate_shared(&model.backward(trace, up)?)?;
    }
    Ok(SampleGrad {
        grads,
        report: loss.report,
    })
}

struct EpochSums {
    loss: f64,
    ce: f64,
    mim: f64,
    masked: usize,
    samples: usize,
}

/// One pass over `data` in a seeded random order.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut EncoderModel,
    registry: &mut UserRegistry,
    data: &Dataset,
    trainable: &Trainable,
    opt: &mut AdamW,
    cfg: &RunConfig,
    omega: f64,
    alpha: f64,
    use_users: bool,
    rng: &mut Rng,
) -> Result<EpochSums> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let users: Vec<UserId> = order.iter().map(|&i| data.samples[i].user.clone()).collect();
    let masks = if use_users {
        pdropout_mask(&users, &PDropoutConfig::new(omega, 0)?, rng)?
    } else {
        vec![Mask::Masked; users.len()]
    };
    let d_p = model.config().plora.d_p;
    let mut sums = EpochSums {
        loss: 0.0,
        ce: 0.0,
        mim: 0.0,
        masked: 0,
        samples: 0,
    };
    for (batch, batch_masks) in order.chunks(cfg.batch_size).zip(masks.chunks(cfg.batch_size)) {
        let items = batch
            .iter()
            .zip(batch_masks)
            .map(|(&i, &m)| {
                let sample = &data.samples[i];
                Ok(match m {
                    Mask::Keep => Item {
                        sample,
                        p: registry.require(&sample.user)?.clone(),
                        personal: true,
                    },
                    Mask::Masked => Item {
                        sample,
                        p: anonymous(d_p),
                        personal: false,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if use_users {
            sums.masked += batch_masks.iter().filter(|&&m| m == Mask::Masked).count();
        }
        let snapshot: &EncoderModel = model;
        let per_sample = cfg
            .exec
            .try_map(&items, |item| sample_grad(snapshot, item, alpha, &cfg.mim))?;

        let mut total = ModelGrads::zeros(model.config());
        let mut user_grads: BTreeMap<&UserId, Vector> = BTreeMap::new();
        for (item, sg) in items.iter().zip(&per_sample) {
            if !sg.report.total.is_finite() {
                return Err(Error::Numeric {
                    name: "loss".into(),
                });
            }
            sums.loss += sg.report.total;
            sums.ce += sg.report.ce;
            sums.mim += sg.report.mim;
            total.accumulate_shared(&sg.grads)?;
            if item.personal && trainable.users.contains(&item.sample.user) {
                user_grads
                    .entry(&item.sample.user)
                    .or_insert_with(|| Vector::zeros(d_p))
                    .axpy(1.0, &sg.grads.p)?;
            }
        }
        sums.samples += items.len();
        apply_step(model, registry, trainable, opt, &total, &user_grads, items.len())?;
    }
    Ok(sums)
}

fn apply_step(
    model: &mut EncoderModel,
    registry: &mut UserRegistry,
    trainable: &Trainable,
    opt: &mut AdamW,
    total: &ModelGrads,
    user_grads: &BTreeMap<&UserId, Vector>,
    batch_len: usize,
) -> Result<()> {
    let inv = 1.0 / batch_len as f64;
    let mean = |g: &[f64]| g.iter().map(|v| v * inv).collect::<Vec<f64>>();
    let d_p = registry.d_p();
    let zero = vec![0.0; d_p];

    let param_grads: Vec<(ParamId, Vec<f64>)> = trainable
        .params
        .iter()
        .map(|&id| (id, mean(total.slice(id))))
        .collect();
    let user_mean: Vec<(&UserId, Vec<f64>)> = trainable
        .users
        .iter()
        .map(|u| {
            let g = user_grads.get(u).map_or_else(|| zero.clone(), |g| mean(g.as_slice()));
            (u, g)
        })
        .collect();
    let names: Vec<String> = param_grads.iter().map(|(id, _)| id.name()).collect();
    let user_names: Vec<String> = user_mean.iter().map(|(u, _)| format!("user.{u}")).collect();
    AdamW::check_grads(
        names
            .iter()
            .zip(&param_grads)
            .map(|(n, (_, g))| (n.as_str(), g.as_slice()))
            .chain(
                user_names
                    .iter()
                    .zip(&user_mean)
                    .map(|(n, (_, g))| (n.as_str(), g.as_slice())),
            ),
    )?;
    opt.begin_step();
    for (name, (id, g)) in names.iter().zip(&param_grads) {
        opt.update(name, model.param_mut(*id), g)?;
    }
    for (name, (u, g)) in user_names.iter().zip(&user_mean) {
        let p = registry
            .get_mut(u)
            .ok_or_else(|| Error::UnknownUser(u.to_string()))?;
        opt.update(name, p.as_mut_slice(), g)?;
    }
    Ok(())
}

fn check_frozen(model: &EncoderModel, expected: &[u8; 32]) -> Result<()> {
    if model.frozen_checksum() != *expected {
        return Err(Error::State("frozen backbone tensors changed during training".into()));
    }
    Ok(())
}

/// Full-shot training on the A split for the FullShot, LoRAOnly and
/// PKIOnly regimes (and stage 1 of TwoStage, with every user masked).
///
/// The parameters with the best dev accuracy are restored at the end.
pub fn train_fullshot(
    model: &mut EncoderModel,
    registry: &mut UserRegistry,
    train: &Dataset,
    dev: &Dataset,
    cfg: &RunConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let regime = cfg.regime;
    let omega = match regime {
        Regime::FullShot | Regime::PKIOnly => cfg.omega,
        Regime::TwoStage => 1.0,
        Regime::LoRAOnly => 1.0,
        Regime::FewShot => {
            return Err(Error::Config("few-shot runs go through train_fewshot".into()))
        }
    };
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if model.is_merged() {
        return Err(Error::State("cannot train a merged model; unmerge first".into()));
    }
    if regime == Regime::PKIOnly {
        for l in 0..model.config().n_layers {
            for proj in [Projection::Query, Projection::Value] {
                model.param_mut(ParamId::TaskIn(l, proj)).fill(0.0);
            }
        }
    }
    let mut users = BTreeSet::new();
    if regime.uses_users() {
        let mut init = Rng::new(cfg.seed ^ 0x0BB1_u64);
        for u in train.users() {
            if regime == Regime::PKIOnly && !registry.contains(&u) {
                // with the task path off, a zero embedding and a zero shared
                // output factor give each other zero gradient
                let std = model.config().plora.init_std;
                registry.insert(u.clone(), Vector::gaussian(registry.d_p(), std, &mut init)?, true)?;
            }
            registry.lookup_or_register(&u);
            registry.set_trainable(&u, true)?;
            users.insert(u);
        }
    }
    let trainable = Trainable {
        params: regime.trainable_params(model),
        users,
    };
    let dev_mode = if regime.uses_users() {
        EvalMode::Personalized
    } else {
        EvalMode::ZeroShot
    };

    let frozen = model.frozen_checksum();
    let mut opt = AdamW::new(cfg.optim.clone())?;
    let mut rng = Rng::new(cfg.seed ^ 0x5EED_7A1E);
    let mut out = TrainOutcome {
        epochs: Vec::new(),
        best_epoch: None,
        optim: OptimState::default(),
        log: Vec::new(),
    };
    let mut history = Vec::new();
    let mut best: Option<(EncoderModel, UserRegistry, OptimState)> = None;
    for epoch in 1..=cfg.epochs {
        let sums = run_epoch(
            model,
            registry,
            train,
            &trainable,
            &mut opt,
            cfg,
            omega,
            cfg.alpha,
            regime.uses_users(),
            &mut rng,
        )?;
        check_frozen(model, &frozen)?;
        let dev_report = if dev.is_empty() {
            None
        } else {
            Some(evaluate(model, registry, dev, &dev_mode, regime, cfg.exec)?)
        };
        let n = sums.samples as f64;
        let stats = EpochStats {
            epoch,
            loss: sums.loss / n,
            ce: sums.ce / n,
            mim: sums.mim / n,
            masked: sums.masked,
            samples: sums.samples,
            dev: dev_report,
        };
        out.log.extend(format_epoch(regime, &stats));
        out.epochs.push(stats);
        if let Some(r) = dev_report {
            history.push(r.acc);
            if best_epoch(&history) == Some(history.len() - 1) {
                best = Some((model.clone(), registry.clone(), opt.state().clone()));
                out.best_epoch = Some(epoch);
            }
            if early_stop(&history, cfg.optim.patience) == EarlyStop::Stop {
                out.log.push(format!("regime={regime} epoch={epoch} event=early_stop"));
                break;
            }
        }
    }
    match best {
        Some((m, r, s)) => {
            *model = m;
            *registry = r;
            out.optim = s;
        }
        None => out.optim = opt.into_state(),
    }
    Ok(out)
}

/// Fits only the embeddings of `users` on `view`, with every model tensor
/// and every other user frozen. Users missing from the registry start at
/// zero. An empty view leaves every embedding untouched.
pub fn train_fewshot(
    model: &mut EncoderModel,
    registry: &mut UserRegistry,
    users: &[UserId],
    view: &Dataset,
    cfg: &RunConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.is_merged() {
        return Err(Error::State("cannot train a merged model; unmerge first".into()));
    }
    let fitted: BTreeSet<UserId> = users.iter().cloned().collect();
    for u in &fitted {
        registry.lookup_or_register(u);
    }
    let mut out = TrainOutcome {
        epochs: Vec::new(),
        best_epoch: None,
        optim: OptimState::default(),
        log: Vec::new(),
    };
    if view.is_empty() {
        out.log.push("regime=fewshot epoch=0 event=no_samples".into());
        return Ok(out);
    }
    let present = view.users();
    if let Some(u) = fitted.iter().find(|u| !present.contains(*u)) {
        return Err(Error::Data(format!("user {u} has no few-shot samples")));
    }
    if let Some(u) = present.iter().find(|u| !fitted.contains(*u)) {
        return Err(Error::Data(format!("few-shot view contains unlisted user {u}")));
    }
    let trainable = Trainable {
        params: Vec::new(),
        users: fitted,
    };
    let frozen = model.frozen_checksum();
    let adapters = model.param_checksum(&model.param_ids());
    let mut opt = AdamW::new(cfg.fewshot_optim())?;
    let mut rng = Rng::new(cfg.seed ^ 0xF3_5407);
    for epoch in 1..=cfg.epochs_fewshot {
        let sums = run_epoch(
            model, registry, view, &trainable, &mut opt, cfg, 0.0, 0.0, true, &mut rng,
        )?;
        let n = sums.samples as f64;
        let stats = EpochStats {
            epoch,
            loss: sums.loss / n,
            ce: sums.ce / n,
            mim: 0.0,
            masked: 0,
            samples: sums.samples,
            dev: None,
        };
        out.log.extend(format_epoch(Regime::FewShot, &stats));
        out.epochs.push(stats);
    }
    check_frozen(model, &frozen)?;
    if model.param_checksum(&model.param_ids()) != adapters {
        return Err(Error::State("few-shot fit changed model tensors".into()));
    }
    out.optim = opt.into_state();
    Ok(out)
}

/// Stage 1: full-shot on `train`/`dev` with every user masked. Stage 2:
/// embedding fits for the A users on `train` and for `b_users` on `b_view`.
pub fn train_twostage(
    model: &mut EncoderModel,
    registry: &mut UserRegistry,
    train: &Dataset,
    dev: &Dataset,
    b_users: &[UserId],
    b_view: &Dataset,
    cfg: &RunConfig,
) -> Result<TrainOutcome> {
    let stage1 = RunConfig {
        regime: Regime::TwoStage,
        ..cfg.clone()
    };
    let mut out = train_fullshot(model, registry, train, dev, &stage1)?;
    let mut users: Vec<UserId> = train.users().into_iter().collect();
    users.extend(b_users.iter().cloned());
    let mut view = train.clone();
    view.samples.extend(b_view.samples.iter().cloned());
    let stage2 = train_fewshot(model, registry, &users, &view, cfg)?;
    out.extend(stage2);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorSpec, SplitSpec};
    use crate::encoder::EncoderConfig;
    use crate::plora::PLoRAConfig;

    fn tiny_model(seed: u64) -> EncoderModel {
        let cfg = EncoderConfig {
            vocab_size: 40,
            n_classes: 3,
            max_len: 12,
            d_ff: 16,
            plora: PLoRAConfig {
                d_in: 8,
                d_out: 8,
                rank: 2,
                d_p: 3,
                ..PLoRAConfig::default()
            },
            ..EncoderConfig::default()
        }
        .with_d_model(8);
        EncoderModel::new(cfg, seed).unwrap()
    }

    fn tiny_corpus(seed: u64) -> crate::data::Corpus {
        let gen = GeneratorSpec {
            vocab_size: 40,
            n_sentiment: 8,
            n_classes: 3,
            min_len: 4,
            max_len: 12,
            bias_levels: vec![-1.0, 0.0, 1.0],
            ..GeneratorSpec::default()
        };
        let split = SplitSpec {
            n_users_a: 4,
            n_users_b: 2,
            samples_per_user_a: 20,
            samples_per_user_b: 20,
            min_class_frac: 0.0,
            seed,
            ..SplitSpec::default()
        };
        generate(&gen, &split).unwrap()
    }

    fn cfg(regime: Regime) -> RunConfig {
        RunConfig {
            regime,
            epochs: 2,
            epochs_fewshot: 2,
            batch_size: 8,
            exec: Exec::Sequential,
            ..RunConfig::default()
        }
    }

    #[test]
    fn fresh_model_zero_shot_equals_personalized() {
        let c = tiny_corpus(1);
        let model = tiny_model(1);
        let mut reg = UserRegistry::new(3);
        for u in c.a.test.users() {
            reg.lookup_or_register(&u);
        }
        let a = evaluate(&model, &reg, &c.a.test, &EvalMode::Personalized, Regime::FullShot, Exec::Sequential).unwrap();
        let b = evaluate(&model, &reg, &c.a.test, &EvalMode::ZeroShot, Regime::FullShot, Exec::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_user_is_a_registry_error() {
        let c = tiny_corpus(2);
        let model = tiny_model(2);
        let reg = UserRegistry::new(3);
        let r = evaluate(&model, &reg, &c.a.test, &EvalMode::Personalized, Regime::FullShot, Exec::Sequential);
        assert!(matches!(r, Err(Error::UnknownUser(_))));
    }

    #[test]
    fn no_mim_no_dropout_is_pure_cross_entropy() {
        let c = tiny_corpus(3);
        let mut model = tiny_model(3);
        let mut reg = UserRegistry::new(3);
        let run = RunConfig {
            omega: 0.0,
            alpha: 0.0,
            ..cfg(Regime::FullShot)
        };
        let out = train_fullshot(&mut model, &mut reg, &c.a.train, &c.a.dev, &run).unwrap();
        for e in &out.epochs {
            assert_eq!(e.loss, e.ce);
            assert_eq!(e.mim, 0.0);
            assert_eq!(e.masked, 0);
        }
    }

    #[test]
    fn regimes_keep_frozen_tensors() {
        let c = tiny_corpus(4);
        for regime in [Regime::FullShot, Regime::LoRAOnly, Regime::PKIOnly, Regime::TwoStage] {
            let mut model = tiny_model(4);
            let frozen = model.frozen_checksum();
            let mut reg = UserRegistry::new(3);
            let run = cfg(regime);
            if regime == Regime::TwoStage {
                let b_users: Vec<_> = c.b.train.users().into_iter().collect();
                train_twostage(&mut model, &mut reg, &c.a.train, &c.a.dev, &b_users, &c.b.train, &run).unwrap();
            } else {
                train_fullshot(&mut model, &mut reg, &c.a.train, &c.a.dev, &run).unwrap();
            }
            assert_eq!(model.frozen_checksum(), frozen, "{regime}");
        }
    }

    #[test]
    fn lora_only_leaves_person_path_and_registry_alone() {
        let c = tiny_corpus(5);
        let mut model = tiny_model(5);
        let before: Vec<Vec<f64>> = model
            .param_ids()
            .into_iter()
            .filter(|id| matches!(id, ParamId::PersonIn(..)))
            .map(|id| model.param(id).to_vec())
            .collect();
        let mut reg = UserRegistry::new(3);
        train_fullshot(&mut model, &mut reg, &c.a.train, &c.a.dev, &cfg(Regime::LoRAOnly)).unwrap();
        let after: Vec<Vec<f64>> = model
            .param_ids()
            .into_iter()
            .filter(|id| matches!(id, ParamId::PersonIn(..)))
            .map(|id| model.param(id).to_vec())
            .collect();
        assert_eq!(before, after);
        assert!(reg.is_empty());
    }

    #[test]
    fn pki_only_switches_off_task_path() {
        let c = tiny_corpus(6);
        let mut model = tiny_model(6);
        let mut reg = UserRegistry::new(3);
        train_fullshot(&mut model, &mut reg, &c.a.train, &c.a.dev, &cfg(Regime::PKIOnly)).unwrap();
        for l in model.plora_layers() {
            assert!(l.task_in().is_zero());
        }
        assert!(reg.iter().any(|(_, e)| !e.embedding.is_zero()));
    }

    #[test]
    fn fewshot_touches_only_listed_embeddings() {
        let c = tiny_corpus(7);
        let mut model = tiny_model(7);
        let mut reg = UserRegistry::new(3);
        train_fullshot(&mut model, &mut reg, &c.a.train, &c.a.dev, &cfg(Regime::FullShot)).unwrap();
        let a_before = reg.clone();
        let tensors = model.param_checksum(&model.param_ids());
        let b_users: Vec<_> = c.b.train.users().into_iter().collect();
        let view = crate::data::few_shot_view(&c.b.train, 5).unwrap();
        train_fewshot(&mut model, &mut reg, &b_users, &view, &cfg(Regime::FewShot)).unwrap();
        assert_eq!(model.param_checksum(&model.param_ids()), tensors);
        for (u, e) in a_before.iter() {
            assert_eq!(reg.get(u), Some(&e.embedding));
        }
        assert!(b_users.iter().all(|u| !reg.get(u).unwrap().is_zero()));
    }

    #[test]
    fn fewshot_with_no_samples_keeps_zero_embeddings() {
        let mut model = tiny_model(8);
        let mut reg = UserRegistry::new(3);
        let u = UserId::new("b000").unwrap();
        train_fewshot(&mut model, &mut reg, std::slice::from_ref(&u), &Dataset::default(), &cfg(Regime::FewShot)).unwrap();
        assert!(reg.get(&u).unwrap().is_zero());
    }

    #[test]
    fn fewshot_user_without_samples_is_a_data_error() {
        let c = tiny_corpus(9);
        let mut model = tiny_model(9);
        let mut reg = UserRegistry::new(3);
        let mut users: Vec<_> = c.b.train.users().into_iter().collect();
        users.push(UserId::new("ghost").unwrap());
        let r = train_fewshot(&mut model, &mut reg, &users, &c.b.train, &cfg(Regime::FewShot));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn sequential_and_parallel_runs_are_identical() {
        let c = tiny_corpus(10);
        let mut results = Vec::new();
        for exec in [Exec::Sequential, Exec::Parallel] {
            let mut model = tiny_model(10);
            let mut reg = UserRegistry::new(3);
            let run = RunConfig {
                exec,
                ..cfg(Regime::FullShot)
            };
            let out = train_fullshot(&mut model, &mut reg, &c.a.train, &c.a.dev, &run).unwrap();
            results.push((model, reg, out.log));
        }
        assert_eq!(results[0], results[1]);
    }

    #[test]
    fn empty_training_set_is_a_data_error() {
        let mut model = tiny_model(11);
        let mut reg = UserRegistry::new(3);
        let r = train_fullshot(&mut model, &mut reg, &Dataset::default(), &Dataset::default(), &cfg(Regime::FullShot));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn run_config_round_trips_through_pairs() {
        let mut a = RunConfig {
            regime: Regime::PKIOnly,
            omega: 0.3,
            alpha: 1.25,
            seed: 9,
            ..RunConfig::default()
        };
        a.mim.kind = MimKind::Kl;
        a.mim.pairing = MimPairing::AllBlocks;
        let mut b = RunConfig::default();
        for (k, v) in a.to_pairs() {
            assert!(b.set_key(&k, &v).unwrap(), "{k}");
        }
        assert_eq!(a, b);
        assert!(matches!(RunConfig::default().set_key("omega", "x"), Err(Error::Config(_))));
    }
}
