"""Training loop: one graph-consistency step, Nesterov SGD, cosine schedule,
EMA maintenance, bank upkeep, metrics, and checkpointed resumable runs.

Step layout: augment -> no-grad weak pass producing every gradient-blocked
target -> taped strong/labeled pass for the losses -> backward -> SGD ->
EMA -> bank insertion (after the losses, so a sample never aggregates the
node it just wrote) -> metrics. All randomness is derived from (seed, step),
so runs are bit-reproducible and resumable from a step counter.
"""

from __future__ import annotations

import contextlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import diffcore as dc
from .augment import AugmentPolicy, strong_view, weak_view
from .data import BatchSampler, SplitResult
from .diffcore import Tensor
from .errors import DimensionError, ParameterError, ValidationError
from .graphbank import NodeBank, propagated_pseudo_labels
from .losses import (
    LossWeights,
    DaState,
    da_align_rows,
    da_init,
    da_update,
    edge_edge_loss,
    node_edge_loss,
    node_node_loss,
    supervised_loss,
    total_loss,
)
from .model import (
    NO_DECAY,
    EmaShadow,
    ModelConfig,
    ModelParams,
    classify,
    ema_model,
    ema_update,
    feature_normalize,
    forward_features,
    init_ema,
    init_model,
    params_from_arrays,
    project,
)

# Sub-stream tags for per-step seed derivation.
_SEED_INIT = 11
_SEED_AUG = 23


@dataclass
class TrainConfig:
    # loss weights and graph knobs
    lambda_nn: float = 1.0
    lambda_ne: float = 1.0
    lambda_ee: float = 1.0
    t: float = 0.1
    alpha: float = 0.1
    tau: float = 0.95
    topn: int = 8
    # component toggles
    use_nn: bool = True
    use_ne: bool = True
    use_ee: bool = True
    use_en: bool = True
    da: bool = True
    feature_norm: bool = True
    threshold_on_raw: bool = False
    da_after_propagation: bool = False
    da_momentum: float = 0.99
    # optimization
    steps: int = 3000
    batch_size: int = 16
    mu: int = 7
    base_lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    warmup_steps: int = 0
    # banks
    unlabeled_bank: int = 1024
    labeled_bank: int = 0  # 0 = capacity for every labeled sample
    # model sizes
    hidden_dims: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    proj_hidden: int = 32
    proj_dim: int = 8
    ln_eps: float = 1e-5
    # augmentation
    weak_sigma: float = 0.05
    strong_sigma: float = 0.2
    strong_dropout: float = 0.1
    strong_jitter: float = 0.1
    # bookkeeping
    seed: int = 0
    eval_every: int = 100
    log_every: int = 1

    def validate(self) -> None:
        LossWeights(self.lambda_nn, self.lambda_ne, self.lambda_ee, self.tau, self.t, self.alpha)
        if self.topn < 1:
            raise ParameterError(f"topn must be >= 1, got {self.topn}")
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1 or self.mu < 1:
            raise ParameterError("batch_size and mu must be >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ParameterError(f"ema_decay must be in (0, 1), got {self.ema_decay}")
        if not 0.0 < self.da_momentum < 1.0:
            raise ParameterError(f"da_momentum must be in (0, 1), got {self.da_momentum}")
        if self.unlabeled_bank < 1:
            raise ParameterError("unlabeled_bank must be >= 1")
        if self.labeled_bank < 0:
            raise ParameterError("labeled_bank must be >= 0 (0 = all labeled samples)")
        if self.eval_every < 1 or self.log_every < 1:
            raise ParameterError("eval_every and log_every must be >= 1")
        if self.warmup_steps < 0:
            raise ParameterError("warmup_steps must be >= 0")
        if min(self.base_lr, self.weight_decay) < 0.0:
            raise ParameterError("base_lr and weight_decay must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        AugmentPolicy(self.weak_sigma, self.strong_sigma, self.strong_dropout, self.strong_jitter)

    def model_config(self, input_dim: int, class_count: int) -> ModelConfig:
        return ModelConfig(
            input_dim=input_dim,
            hidden_dims=tuple(self.hidden_dims),
            feature_dim=self.feature_dim,
            proj_hidden=self.proj_hidden,
            proj_dim=self.proj_dim,
            class_count=class_count,
            ln_eps=self.ln_eps,
        )

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_nn, self.lambda_ne, self.lambda_ee, self.tau, self.t, self.alpha)

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.weak_sigma, self.strong_sigma, self.strong_dropout, self.strong_jitter)


@dataclass
class MetricsRecord:
    step: int
    loss_s: float
    loss_nn: float
    loss_ne: float
    loss_ee: float
    loss_total: float
    pseudo_label_accuracy: float | None
    unlabeled_accuracy: float | None
    validation_accuracy: float | None
    norm_gap: float
    lr: float
    warmup: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * cos(7 pi s / (16 S))."""
    if total_steps < 1:
        raise ParameterError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    return base_lr * math.cos(7.0 * math.pi * step / (16.0 * total_steps))


def sgd_nesterov_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
    no_decay: tuple[str, ...] = (),
) -> None:
    """g' = g + wd*theta; v <- m*v + g'; theta <- theta - lr*(g' + m*v)."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.values.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.values.shape} ({name})")
        if weight_decay != 0.0 and name not in no_decay:
            g = g + weight_decay * p.values
        v = momentum * velocity[name] + g
        velocity[name] = v
        p.values = p.values - lr * (g + momentum * v)


def one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], class_count))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class TargetBundle:
    """Everything the no-grad weak pass produces for one step.

    All arrays are constants to the tape: the pseudo-label targets, aligned
    weak predictions, weak edges, and the bank snapshot the strong edges
    must be computed against.
    """

    targets: np.ndarray
    gate_rows: np.ndarray | None
    aligned_pw: np.ndarray
    p_w_raw: np.ndarray
    z_w: np.ndarray
    z_lab: np.ndarray
    h_w_norms: np.ndarray
    e_w: np.ndarray | None
    bank_z: np.ndarray | None
    bank_labels: np.ndarray | None
    nn_active: bool
    ne_active: bool
    ee_active: bool
    warmup: bool
    new_da_state: DaState


@dataclass
class StepLosses:
    s: Tensor
    nn: Tensor | None
    ne: Tensor | None
    ee: Tensor | None
    total: Tensor
    h_s: Tensor


@dataclass
class TrainerState:
    config: TrainConfig
    model_cfg: ModelConfig
    params: ModelParams
    ema: EmaShadow
    velocity: dict[str, np.ndarray]
    unlabeled_bank: NodeBank
    labeled_bank: NodeBank
    da_state: DaState
    step: int = 0
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)


def init_trainer(config: TrainConfig, split: SplitResult) -> TrainerState:
    config.validate()
    n_labeled = split.labeled.features.shape[0]
    model_cfg = config.model_config(split.labeled.features.shape[1], split.class_count)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _SEED_INIT]))
    params = init_model(model_cfg, rng)
    velocity = {name: np.zeros_like(t.values) for name, t in params.named_parameters().items()}
    labeled_capacity = config.labeled_bank if config.labeled_bank > 0 else n_labeled
    counts = np.bincount(split.labeled.labels, minlength=split.class_count)
    return TrainerState(
        config=config,
        model_cfg=model_cfg,
        params=params,
        ema=init_ema(params, config.ema_decay),
        velocity=velocity,
        unlabeled_bank=NodeBank(config.unlabeled_bank, config.proj_dim, split.class_count),
        labeled_bank=NodeBank(labeled_capacity, config.proj_dim, split.class_count),
        da_state=da_init(counts, config.da_momentum),
        step=0,
        policy=config.policy(),
    )


def build_targets(state: TrainerState, unl_weak: np.ndarray, lab_weak: np.ndarray) -> TargetBundle:
    """No-grad weak pass: pseudo-label targets, weak edges, bank snapshot."""
    cfg = state.config
    params = state.params
    heads = params.heads
    with dc.no_grad():
        h_w = forward_features(Tensor(unl_weak), params.encoder)
        hhat_w = feature_normalize(h_w, heads, cfg.feature_norm)
        p_w_raw = classify(hhat_w, heads.classifier_w).values
        z_w = project(hhat_w, heads).values
        h_lab = forward_features(Tensor(lab_weak), params.encoder)
        z_lab = project(feature_normalize(h_lab, heads, cfg.feature_norm), heads).values
    h_w_norms = np.linalg.norm(h_w.values, axis=1)

    if cfg.da:
        aligned = da_align_rows(p_w_raw, state.da_state)
        new_da = da_update(state.da_state, p_w_raw)
    else:
        aligned = p_w_raw
        new_da = state.da_state

    en_active = cfg.use_en and state.labeled_bank.size >= 1
    if en_active:
        propagate_da_late = cfg.da and cfg.da_after_propagation
        base = p_w_raw if propagate_da_late else aligned
        targets = propagated_pseudo_labels(
            z_w, base, state.labeled_bank, cfg.topn, cfg.alpha, cfg.t
        )
        if propagate_da_late:
            targets = da_align_rows(targets, state.da_state)
    else:
        targets = aligned

    unl_ready = state.unlabeled_bank.size >= 2
    ne_active = cfg.use_ne and unl_ready
    ee_active = cfg.use_ee and unl_ready
    bank_z = bank_labels = e_w = None
    if ne_active or ee_active:
        bank_z = state.unlabeled_bank.vectors()
        bank_labels = state.unlabeled_bank.labels()
        if ee_active:
            e_w = dc.softmax_rows(dc.constant(z_w @ bank_z.T), cfg.t).values

    warmup = ((cfg.use_ne or cfg.use_ee) and not unl_ready) or (
        cfg.use_en and state.labeled_bank.size < 1
    )
    return TargetBundle(
        targets=targets,
        gate_rows=aligned if cfg.threshold_on_raw else None,
        aligned_pw=aligned,
        p_w_raw=p_w_raw,
        z_w=z_w,
        z_lab=z_lab,
        h_w_norms=h_w_norms,
        e_w=e_w,
        bank_z=bank_z,
        bank_labels=bank_labels,
        nn_active=cfg.use_nn,
        ne_active=ne_active,
        ee_active=ee_active,
        warmup=warmup,
        new_da_state=new_da,
    )


def compute_losses(
    params: ModelParams,
    cfg: TrainConfig,
    lab_weak: np.ndarray,
    lab_onehot: np.ndarray,
    unl_strong: np.ndarray,
    tb: TargetBundle,
) -> StepLosses:
    """Differentiable loss assembly; run under an active Tape for gradients."""
    heads = params.heads
    h_l = forward_features(Tensor(lab_weak), params.encoder)
    p_l = classify(feature_normalize(h_l, heads, cfg.feature_norm), heads.classifier_w)
    l_s = supervised_loss(lab_onehot, p_l)

    strong_needs_grad = tb.nn_active or tb.ne_active or tb.ee_active
    ctx = contextlib.nullcontext() if strong_needs_grad else dc.no_grad()
    l_nn = l_ne = l_ee = None
    with ctx:
        h_s = forward_features(Tensor(unl_strong), params.encoder)
        hhat_s = feature_normalize(h_s, heads, cfg.feature_norm)
        if tb.nn_active:
            p_s = classify(hhat_s, heads.classifier_w)
            l_nn = node_node_loss(tb.targets, p_s, cfg.tau, tb.gate_rows)
        if tb.ne_active or tb.ee_active:
            z_s = project(hhat_s, heads)
            e_s = dc.softmax_rows(dc.matmul(z_s, dc.constant(tb.bank_z.T)), cfg.t)
            if tb.ne_active:
                l_ne = node_edge_loss(tb.aligned_pw, e_s, tb.bank_labels)
            if tb.ee_active:
                l_ee = edge_edge_loss(tb.e_w, e_s)
    total = total_loss(l_s, l_nn, l_ne, l_ee, cfg.weights())
    return StepLosses(s=l_s, nn=l_nn, ne=l_ne, ee=l_ee, total=total, h_s=h_s)


def _scheduled_lr(cfg: TrainConfig, step: int) -> float:
    lr = cosine_lr(step, cfg.steps, cfg.base_lr)
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        lr *= (step + 1) / cfg.warmup_steps
    return lr


def train_step(
    state: TrainerState,
    lab_x: np.ndarray,
    lab_y: np.ndarray,
    unl_x: np.ndarray,
    unl_truth: np.ndarray | None = None,
) -> MetricsRecord:
    cfg = state.config
    step = state.step
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SEED_AUG, step]))
    lab_weak = weak_view(lab_x, state.policy, rng)
    unl_weak = weak_view(unl_x, state.policy, rng)
    unl_strong = strong_view(unl_x, state.policy, rng)

    tb = build_targets(state, unl_weak, lab_weak)
    lab_onehot = one_hot(lab_y, state.model_cfg.class_count)

    with dc.Tape() as tape:
        out = compute_losses(state.params, cfg, lab_weak, lab_onehot, unl_strong, tb)
        tape.backward(out.total)

    named = state.params.named_parameters()
    grads = {n: t.grad for n, t in named.items() if t.grad is not None}
    lr = _scheduled_lr(cfg, step)
    sgd_nesterov_step(named, grads, state.velocity, lr, cfg.momentum, cfg.weight_decay, NO_DECAY)
    state.params.zero_grad()
    ema_update(state.ema, state.params)
    state.da_state = tb.new_da_state

    # Bank upkeep happens after the losses: a sample never sees its own new node.
    state.unlabeled_bank.insert_batch(tb.z_w, tb.aligned_pw)
    state.labeled_bank.insert_batch(tb.z_lab, lab_onehot)

    h_s_norms = np.linalg.norm(out.h_s.values, axis=1)
    norm_gap = float(np.mean(np.abs(h_s_norms - tb.h_w_norms)))

    pseudo_acc = unl_acc = None
    if unl_truth is not None:
        predicted = np.argmax(tb.targets, axis=1)
        unl_acc = float(np.mean(predicted == unl_truth))
        gate = tb.targets if tb.gate_rows is None else tb.gate_rows
        passing = gate.max(axis=1) > cfg.tau
        if np.any(passing):
            pseudo_acc = float(np.mean(predicted[passing] == unl_truth[passing]))

    state.step += 1
    return MetricsRecord(
        step=step,
        loss_s=out.s.item(),
        loss_nn=out.nn.item() if out.nn is not None else 0.0,
        loss_ne=out.ne.item() if out.ne is not None else 0.0,
        loss_ee=out.ee.item() if out.ee is not None else 0.0,
        loss_total=out.total.item(),
        pseudo_label_accuracy=pseudo_acc,
        unlabeled_accuracy=unl_acc,
        validation_accuracy=None,
        norm_gap=norm_gap,
        lr=lr,
        warmup=tb.warmup,
    )


def evaluate(params: ModelParams, features: np.ndarray, labels: np.ndarray, feature_norm: bool) -> float:
    """Argmax accuracy of classify over the given set (ties go to the lower class id)."""
    with dc.no_grad():
        h = forward_features(Tensor(features), params.encoder)
        p = classify(feature_normalize(h, params.heads, feature_norm), params.heads.classifier_w)
    return float(np.mean(np.argmax(p.values, axis=1) == labels))


# ---------------------------------------------------------------------------
# trainer state <-> checkpoint document
# ---------------------------------------------------------------------------


def save_trainer_state(state: TrainerState, path) -> None:
    cfg = state.config
    meta = {
        "step": str(state.step),
        "seed": str(cfg.seed),
        "class_count": str(state.model_cfg.class_count),
        "input_dim": str(state.model_cfg.input_dim),
        "hidden_dims": ",".join(str(d) for d in state.model_cfg.hidden_dims),
        "feature_dim": str(state.model_cfg.feature_dim),
        "proj_hidden": str(state.model_cfg.proj_hidden),
        "proj_dim": str(state.model_cfg.proj_dim),
        "ln_eps": repr(state.model_cfg.ln_eps),
        "feature_norm": str(int(cfg.feature_norm)),
        "ema_decay": repr(cfg.ema_decay),
        "da_momentum": repr(state.da_state.momentum),
        "unlabeled_bank.size": str(state.unlabeled_bank.size),
        "unlabeled_bank.cursor": str(state.unlabeled_bank.write_cursor),
        "labeled_bank.size": str(state.labeled_bank.size),
        "labeled_bank.cursor": str(state.labeled_bank.write_cursor),
    }
    arrays: dict[str, np.ndarray] = {}
    for name, t in state.params.named_parameters().items():
        arrays[f"param.{name}"] = t.values
    for name, v in state.ema.values.items():
        arrays[f"ema.{name}"] = v
    for name, v in state.velocity.items():
        arrays[f"velocity.{name}"] = v
    arrays["bank.unlabeled.z"] = state.unlabeled_bank._z
    arrays["bank.unlabeled.labels"] = state.unlabeled_bank._labels
    arrays["bank.labeled.z"] = state.labeled_bank._z
    arrays["bank.labeled.labels"] = state.labeled_bank._labels
    arrays["da.running_marginal"] = state.da_state.running_marginal
    arrays["da.target_marginal"] = state.da_state.target_marginal
    ckpt.save_document(path, meta, arrays)


def load_trainer_state(path, config: TrainConfig, split: SplitResult) -> TrainerState:
    """Rebuild a resumable TrainerState from a checkpoint written by save_trainer_state."""
    meta, arrays = ckpt.load_document(path)
    state = init_trainer(config, split)
    if int(meta["class_count"]) != state.model_cfg.class_count:
        raise ValidationError(
            f"checkpoint has {meta['class_count']} classes, split has {state.model_cfg.class_count}"
        )
    for name, t in state.params.named_parameters().items():
        t.values = arrays[f"param.{name}"].copy()
        state.ema.values[name] = arrays[f"ema.{name}"].copy()
        state.velocity[name] = arrays[f"velocity.{name}"].copy()
    for bank, tag in ((state.unlabeled_bank, "unlabeled"), (state.labeled_bank, "labeled")):
        bank._z = arrays[f"bank.{tag}.z"].copy()
        bank._labels = arrays[f"bank.{tag}.labels"].copy()
        bank.size = int(meta[f"{tag}_bank.size"])
        bank.write_cursor = int(meta[f"{tag}_bank.cursor"])
    state.da_state = DaState(
        arrays["da.running_marginal"].copy(),
        arrays["da.target_marginal"].copy(),
        float(meta["da_momentum"]),
    )
    state.step = int(meta["step"])
    return state


def checkpoint_model_config(meta: dict[str, str]) -> ModelConfig:
    hidden = tuple(int(d) for d in meta["hidden_dims"].split(",")) if meta["hidden_dims"] else ()
    return ModelConfig(
        input_dim=int(meta["input_dim"]),
        hidden_dims=hidden,
        feature_dim=int(meta["feature_dim"]),
        proj_hidden=int(meta["proj_hidden"]),
        proj_dim=int(meta["proj_dim"]),
        class_count=int(meta["class_count"]),
        ln_eps=float(meta["ln_eps"]),
    )


def load_eval_model(path) -> tuple[ModelParams, bool]:
    """EMA evaluation model plus its feature_norm flag, from a checkpoint."""
    meta, arrays = ckpt.load_document(path)
    cfg = checkpoint_model_config(meta)
    ema_arrays = {k[len("ema.") :]: v for k, v in arrays.items() if k.startswith("ema.")}
    return params_from_arrays(cfg, ema_arrays), bool(int(meta["feature_norm"]))


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    state: TrainerState
    records: list[MetricsRecord]
    final_validation_accuracy: float | None
    mean_norm_gap: float | None


def run_training(
    config: TrainConfig,
    split: SplitResult,
    out_dir: str | os.PathLike | None = None,
    resume_from: str | os.PathLike | None = None,
) -> TrainResult:
    """Run config.steps training steps (possibly resuming), logging JSONL metrics.

    With an out_dir, metrics stream to metrics.jsonl (appending on resume) and
    the final state lands in checkpoint.ckpt.
    """
    config.validate()
    if resume_from is not None:
        state = load_trainer_state(resume_from, config, split)
    else:
        state = init_trainer(config, split)
    sampler = BatchSampler(
        split.labeled.features.shape[0],
        split.unlabeled.features.shape[0],
        config.batch_size,
        config.mu,
        config.seed,
    )
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        mode = "a" if resume_from is not None else "w"
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), mode)

    records: list[MetricsRecord] = []
    final_val = None
    try:
        for step in range(state.step, config.steps):
            lab_idx, unl_idx = sampler.indices(step)
            record = train_step(
                state,
                split.labeled.features[lab_idx],
                split.labeled.labels[lab_idx],
                split.unlabeled.features[unl_idx],
                split.unlabeled_truth[unl_idx],
            )
            done = step + 1
            if done % config.eval_every == 0 or done == config.steps:
                record.validation_accuracy = evaluate(
                    ema_model(state.ema, state.model_cfg),
                    split.test.features,
                    split.test.labels,
                    config.feature_norm,
                )
                final_val = record.validation_accuracy
            if done % config.log_every == 0 or done == config.steps or record.validation_accuracy is not None:
                records.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(record.to_json() + "\n")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out_dir is not None:
        save_trainer_state(state, os.path.join(out_dir, "checkpoint.ckpt"))
    if config.steps == 0 and split.test.features.shape[0] > 0:
        final_val = evaluate(
            ema_model(state.ema, state.model_cfg),
            split.test.features,
            split.test.labels,
            config.feature_norm,
        )
    gaps = [r.norm_gap for r in records]
    return TrainResult(
        state=state,
        records=records,
        final_validation_accuracy=final_val,
        mean_norm_gap=float(np.mean(gaps)) if gaps else None,
    )
