"""Training regimes: supervised baseline, contrastive self-supervised
pretraining, finetuning, and the layer-wise gradient-aligned block
coordinate trainer for few-shot transfer.

All four trainers share the Adam optimizer with a staged learning-rate
decay (factor 5 at 60% and 80% of total iterations) and two base rates:
one for the turn-encoder layers, one for everything else. The few-shot
trainer backpropagates a source (contrastive) and a target (satisfaction)
loss per iteration and gates each body layer's update on the sign of the
inner product between its two gradients, with an alpha-probability escape
hatch; the target head keeps updating at rate lambda after early stopping.
"""

from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import model as mod
from .autodiff import ContractError
from .data import DSAT, ConfigError, DatasetSplits, Session, Turn, make_batches, window

ALPHA_GRID = (0.001, 0.005, 0.01, 0.05, 0.1)
LAMBDA_GRID = (0.001, 0.002, 0.005, 0.01)

ENCODER_LAYERS = {"embed", "turn_proj"}


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    lr_encoder: float = 1e-3
    lr_other: float = 1e-3
    alpha: float = 0.01
    lam: float = 0.005
    body_lr_scale_finetune: float = 0.1
    patience: int = 3
    seed: int = 0
    val_max_sessions: int = 512
    proportional_blocks: bool = False
    finetune_epochs: int = 0  # 0: reuse `epochs` for the post-gating finetune

    def validate(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha must be in (0,1], got {self.alpha}")
        if not 0 < self.lam <= 1:
            raise ConfigError(f"lambda must be in (0,1], got {self.lam}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.epochs < 0 or self.patience < 1:
            raise ConfigError("epochs must be >= 0 and patience >= 1")


@dataclass
class TrainReport:
    method: str
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    val_accuracies: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    early_stop_step: int | None = None
    layer_acceptance: dict[str, float] = field(default_factory=dict)
    n_train_sessions: int = 0
    hyperparams: dict = field(default_factory=dict)
    final_params: mod.ParamSet | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("final_params")
        return out


def derived_seed(seed: int, *tags) -> int:
    """Stable sub-seed derivation from a master seed and string/int tags."""
    parts = [seed] + [zlib.crc32(t.encode()) if isinstance(t, str) else int(t) for t in tags]
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


# -- learning-rate schedule ---------------------------------------------------


def lr_at(base: float, step: int, total_steps: int) -> float:
    """Staged decay: base until 60% of iterations, base/5 until 80%, base/25 after."""
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    if 5 * step >= 4 * total_steps:
        return base / 25.0
    if 5 * step >= 3 * total_steps:
        return base / 5.0
    return base


# -- optimizer ----------------------------------------------------------------


class OptimizerState:
    """Adam moments per parameter with a per-layer step counter.

    A skipped layer's moments and counter do not advance, so adaptive
    state reflects only the steps a layer actually accepted.
    """

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, params: mod.ParamSet, cfg: TrainConfig, total_steps: int):
        self.m = {t.name: np.zeros_like(t.data) for t in params.tensors()}
        self.v = {t.name: np.zeros_like(t.data) for t in params.tensors()}
        self.layer_step = {name: 0 for name in params.layers}
        self.global_step = 0
        self.total_steps = max(1, total_steps)
        self.lr_encoder = cfg.lr_encoder
        self.lr_other = cfg.lr_other

    def lr_for(self, layer_name: str, body_scale: float = 1.0, role: str = mod.BODY) -> float:
        base = self.lr_encoder if layer_name in ENCODER_LAYERS else self.lr_other
        lr = lr_at(base, min(self.global_step, self.total_steps - 1), self.total_steps)
        return lr * body_scale if role == mod.BODY else lr

    def step_layer(self, layer: mod.Layer, grads: list[np.ndarray], lr: float) -> None:
        t = self.layer_step[layer.name] + 1
        c1 = 1.0 - self.BETA1 ** t
        c2 = 1.0 - self.BETA2 ** t
        for tensor, g in zip(layer.tensors, grads):
            m = self.m[tensor.name]
            v = self.v[tensor.name]
            m *= self.BETA1
            m += (1.0 - self.BETA1) * g
            v *= self.BETA2
            v += (1.0 - self.BETA2) * (g * g)
            tensor.data = tensor.data - lr * (m / c1) / (np.sqrt(v / c2) + self.EPS)
        self.layer_step[layer.name] = t

    def snapshot_moments(self, layer: mod.Layer) -> list[np.ndarray]:
        return [self.m[t.name].copy() for t in layer.tensors] + [
            self.v[t.name].copy() for t in layer.tensors
        ]


# -- noise generation ---------------------------------------------------------


def _derangement(rng, n: int) -> np.ndarray:
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def make_noise_batch(batch: list[Session], rng) -> tuple[list[Session], np.ndarray]:
    """Real sessions labeled 1 followed by their shuffled clones labeled 0.

    One coin per batch picks the shuffled field (targeted utterances or
    targeted responses); the shuffle is a seeded derangement so no clone
    keeps its own pair. Context turns are shared untouched.
    """
    n = len(batch)
    if n < 2:
        raise ContractError("noise generation needs a batch of at least 2 sessions")
    shuffle_utterance = rng.random() < 0.5
    perm = _derangement(rng, n)
    clones = []
    for i, s in enumerate(batch):
        own = s.targeted
        other = batch[perm[i]].targeted
        if shuffle_utterance:
            swapped = Turn(other.utterance, own.response,
                           other.raw_utterance, own.raw_response)
        else:
            swapped = Turn(own.utterance, other.response,
                           own.raw_utterance, other.raw_response)
        turns = s.turns[:s.targeted_index] + (swapped,) + s.turns[s.targeted_index + 1:]
        clones.append(replace(s, turns=turns, label=None, score=None))
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    return list(batch) + clones, labels


# -- shared loss plumbing -------------------------------------------------------


def _batch_logits(params: mod.ParamSet, sessions: list[Session], head: str) -> ad.Tensor:
    cache: dict = {}
    return ad.stack([mod.forward_logit(params, s, head, cache) for s in sessions])


def _satisfaction_targets(sessions: list[Session]) -> np.ndarray:
    # DSAT is the positive (minority, defect) class
    return np.array([1.0 if s.label == DSAT else 0.0 for s in sessions])


def _batches_per_epoch(n: int, batch_size: int) -> int:
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= 2 else 0)


def _subsample(rng, data: list, k: int) -> list:
    idx = rng.choice(len(data), size=min(k, len(data)), replace=False)
    return [data[i] for i in idx]


def _bce_eval(params, sessions, head, targets) -> tuple[float, float]:
    """Loss and accuracy of head logits against targets, off-graph."""
    cache: dict = {}
    logits = np.array([
        float(mod.forward_logit(params, s, head, cache).data) for s in sessions
    ])
    per = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    acc = float(np.mean((logits > 0.0) == (targets > 0.5)))
    return float(per.mean()), acc


# -- the three BCE trainers ------------------------------------------------------


def _train_bce(params, train_data, val_data, cfg, model_cfg, head, *,
               augment, noise, body_lr_scale=1.0, method):
    cfg.validate()
    if not train_data:
        raise ConfigError(f"{method}: empty train set")
    if head == "satisfaction":
        labels = {s.label for s in train_data}
        if len(labels) < 2:
            warnings.warn(f"{method}: train set has a single label class {labels}")

    params = params.clone()
    T = model_cfg.context_T
    total = cfg.epochs * _batches_per_epoch(len(train_data), cfg.batch_size)
    opt = OptimizerState(params, cfg, total)
    report = TrainReport(method=method, n_train_sessions=len(train_data),
                         hyperparams=asdict(cfg))

    # fixed validation material so epochs are comparable
    val_rng = np.random.default_rng(derived_seed(cfg.seed, "valsel"))
    val_sessions = _subsample(val_rng, val_data, cfg.val_max_sessions) if val_data else []
    if noise:
        val_batches = make_batches(val_sessions, cfg.batch_size,
                                   derived_seed(cfg.seed, "valwin"),
                                   augment_window=True, window_T=T) if val_sessions else []
        val_inputs, val_targets = [], []
        vrng = np.random.default_rng(derived_seed(cfg.seed, "valnoise"))
        for b in val_batches:
            inp, lab = make_noise_batch(b, vrng)
            val_inputs.extend(inp)
            val_targets.append(lab)
        val_targets = np.concatenate(val_targets) if val_targets else np.zeros(0)
    else:
        val_inputs = [window(s, T) for s in val_sessions]
        val_targets = _satisfaction_targets(val_inputs)

    def validate():
        if not len(val_inputs):
            return math.inf, float("nan")
        return _bce_eval(params, val_inputs, head, val_targets)

    best = (math.inf, None)
    for epoch in range(cfg.epochs):
        batches = make_batches(train_data, cfg.batch_size,
                               derived_seed(cfg.seed, "epoch", epoch),
                               augment_window=augment, window_T=T)
        noise_rng = np.random.default_rng(derived_seed(cfg.seed, "noise", epoch))
        epoch_losses = []
        for batch in batches:
            if noise:
                inputs, targets = make_noise_batch(batch, noise_rng)
            else:
                inputs, targets = batch, _satisfaction_targets(batch)
            loss = ad.bce_with_logits(_batch_logits(params, inputs, head), targets)
            grads = ad.backward(loss)
            by_layer = params.layer_grads(grads)
            for layer in params.layers.values():
                if any(t.name in grads for t in layer.tensors):
                    lr = opt.lr_for(layer.name, body_lr_scale, layer.role)
                    opt.step_layer(layer, by_layer[layer.name], lr)
            opt.global_step += 1
            epoch_losses.append(float(loss.data))
        vloss, vacc = validate()
        report.train_losses.append(float(np.mean(epoch_losses)) if epoch_losses else math.nan)
        report.val_losses.append(vloss)
        report.val_accuracies.append(vacc)
        if vloss < best[0]:
            best = (vloss, params.clone())
            report.best_epoch = epoch
    final = best[1] if best[1] is not None else params
    report.final_params = final
    return final, report


def real_vs_noise_accuracy(params: mod.ParamSet, sessions: list[Session],
                           batch_size: int = 32, seed: int = 0) -> float:
    """Accuracy of the contrastive head at separating real sessions from
    freshly generated shuffled clones."""
    rng = np.random.default_rng(derived_seed(seed, "acc_noise"))
    correct = total = 0
    for batch in make_batches(sessions, batch_size, derived_seed(seed, "acc_win"),
                              augment_window=True, window_T=params.config.context_T):
        inputs, labels = make_noise_batch(batch, rng)
        cache: dict = {}
        logits = np.array([
            float(mod.forward_logit(params, s, "contrastive", cache).data)
            for s in inputs
        ])
        correct += int(np.sum((logits > 0.0) == (labels > 0.5)))
        total += len(inputs)
    if total == 0:
        raise ConfigError("no sessions to score")
    return correct / total


def contrastive_pretrain(params: mod.ParamSet, splits: DatasetSplits,
                         cfg: TrainConfig) -> tuple[mod.ParamSet, TrainReport]:
    """Real-vs-shuffled training on the unlabeled pool; keeps the best
    validation checkpoint."""
    return _train_bce(params, splits.unsup_train, splits.unsup_validation, cfg,
                      params.config, "contrastive", augment=True, noise=True,
                      method="contrastive_pretrain")


def supervised_train(params: mod.ParamSet, splits: DatasetSplits, cfg: TrainConfig,
                     train_subset: list[Session] | None = None):
    """Plain BCE training of the satisfaction head and body from scratch."""
    data = train_subset if train_subset is not None else splits.train
    return _train_bce(params, data, splits.validation, cfg, params.config,
                      "satisfaction", augment=False, noise=False, method="supervised")


def finetune(pretrained: mod.ParamSet, splits: DatasetSplits, cfg: TrainConfig,
             train_subset: list[Session] | None = None):
    """Attach a fresh satisfaction head and finetune with body rates x0.1."""
    data = train_subset if train_subset is not None else splits.train
    params = mod.reinit_head(pretrained, "satisfaction", derived_seed(cfg.seed, "head"))
    final, report = _train_bce(params, data, splits.validation, cfg, params.config,
                               "satisfaction", augment=False, noise=False,
                               body_lr_scale=cfg.body_lr_scale_finetune,
                               method="finetune")
    report.method = "finetune"
    return final, report


# -- few-shot trainer --------------------------------------------------------------


def layer_alignment(grads_S: dict[str, list[np.ndarray]],
                    grads_T: dict[str, list[np.ndarray]], layer: str) -> float:
    """Flattened inner product of a layer's source and target gradients."""
    if layer not in grads_S or layer not in grads_T:
        raise ContractError(f"layer {layer!r} missing from a gradient map")
    a, b = grads_S[layer], grads_T[layer]
    if len(a) != len(b) or any(x.shape != y.shape for x, y in zip(a, b)):
        raise ContractError(f"gradient shapes disagree for layer {layer!r}")
    return float(sum(np.dot(x.ravel(), y.ravel()) for x, y in zip(a, b)))


@dataclass
class LayerDecision:
    layer: str
    role: str
    accepted: bool
    sim: float | None = None
    coin: float | None = None


def rbcd_step(params: mod.ParamSet, grads_S, grads_T, opt: OptimizerState,
              cfg: TrainConfig, rng, t_head_early_stopped: bool,
              body_lr_scale: float = 1.0) -> list[LayerDecision]:
    """One layer-wise gated update.

    Source-head layers always step with the source gradients. Body layers
    step with the source gradients iff their alignment is strictly
    positive or an alpha-coin fires. The target head steps with the
    target gradients, at rate lambda once early-stopped. Coins are drawn
    for every gated layer in a fixed order so the stream is auditable.
    """
    decisions = []
    prop_scale = None
    if cfg.proportional_blocks:
        sims = [layer_alignment(grads_S, grads_T, l.name)
                for l in params.layers.values() if l.role == mod.BODY]
        prop_scale = max((abs(s) for s in sims), default=0.0) or 1.0
    for layer in params.layers.values():
        if layer.role == mod.HEAD_S:
            decision = LayerDecision(layer.name, layer.role, True)
            grads, lr_role = grads_S, layer.role
        elif layer.role == mod.BODY:
            sim = layer_alignment(grads_S, grads_T, layer.name)
            coin = float(rng.random())
            if cfg.proportional_blocks:
                accept = coin < max(max(sim, 0.0) / prop_scale, cfg.alpha)
            else:
                accept = sim > 0.0 or coin < cfg.alpha
            decision = LayerDecision(layer.name, layer.role, accept, sim=sim, coin=coin)
            grads, lr_role = grads_S, layer.role
        else:  # target head
            coin = float(rng.random())
            accept = (not t_head_early_stopped) or coin < cfg.lam
            decision = LayerDecision(layer.name, layer.role, accept, coin=coin)
            grads, lr_role = grads_T, layer.role
        if decision.accepted:
            lr = opt.lr_for(layer.name, body_lr_scale, lr_role)
            opt.step_layer(layer, grads[layer.name], lr)
        decisions.append(decision)
    opt.global_step += 1
    return decisions


def few_shot_batches(d_source: list[Session], d_target: list[Session],
                     cfg: TrainConfig, context_T: int):
    """Per-iteration (source noise inputs, noise labels, target batch) stream.

    Epochs follow the source pool; target batches are drawn per iteration,
    with replacement when the target set is smaller than a batch.
    """
    for epoch in range(cfg.epochs):
        s_batches = make_batches(d_source, cfg.batch_size,
                                 derived_seed(cfg.seed, "s_epoch", epoch),
                                 augment_window=True, window_T=context_T)
        noise_rng = np.random.default_rng(derived_seed(cfg.seed, "s_noise", epoch))
        t_rng = np.random.default_rng(derived_seed(cfg.seed, "t_draw", epoch))
        for s_batch in s_batches:
            inputs, labels = make_noise_batch(s_batch, noise_rng)
            idx = t_rng.choice(len(d_target), size=cfg.batch_size,
                               replace=len(d_target) < cfg.batch_size)
            t_batch = [window(d_target[i], context_T) for i in idx]
            yield inputs, labels, t_batch


def few_shot_train(params: mod.ParamSet, splits: DatasetSplits, cfg: TrainConfig,
                   t_train: list[Session] | None = None, audit_hook=None):
    """Joint source/target training with gradient-aligned layer gating,
    then a fresh target head finetuned on the target data.

    ``audit_hook(step, grads_S, grads_T, decisions, params, opt)`` runs
    after every gated step when provided.
    """
    cfg.validate()
    d_target = t_train if t_train is not None else splits.train
    if not d_target:
        raise ConfigError("few_shot_train: empty target train set")
    if not splits.validation:
        raise ConfigError("few_shot_train: early stopping needs a validation set")
    if not splits.unsup_train:
        raise ConfigError("few_shot_train: empty source pool")

    params = params.clone()
    T = params.config.context_T
    total = cfg.epochs * _batches_per_epoch(len(splits.unsup_train), cfg.batch_size)
    opt = OptimizerState(params, cfg, total)
    gate_rng = np.random.default_rng(derived_seed(cfg.seed, "gate"))
    report = TrainReport(method="few_shot", n_train_sessions=len(d_target),
                         hyperparams=asdict(cfg))

    val_rng = np.random.default_rng(derived_seed(cfg.seed, "valsel"))
    val_sessions = [window(s, T) for s in
                    _subsample(val_rng, splits.validation, cfg.val_max_sessions)]
    val_targets = _satisfaction_targets(val_sessions)
    # one target-epoch-equivalent, floored so tiny target sets do not
    # trigger a full validation every other step
    val_every = max(16, math.ceil(len(d_target) / cfg.batch_size))

    accept_counts: dict[str, int] = {name: 0 for name in params.layers}
    early_stopped = False
    best_val = math.inf
    stale = 0
    step = 0
    recent_s: list[float] = []
    for inputs, labels, t_batch in few_shot_batches(splits.unsup_train, d_target, cfg, T):
        loss_S = ad.bce_with_logits(_batch_logits(params, inputs, "contrastive"), labels)
        grads_S = params.layer_grads(ad.backward(loss_S))
        loss_T = ad.bce_with_logits(_batch_logits(params, t_batch, "satisfaction"),
                                    _satisfaction_targets(t_batch))
        grads_T = params.layer_grads(ad.backward(loss_T))
        decisions = rbcd_step(params, grads_S, grads_T, opt, cfg, gate_rng, early_stopped)
        for dec in decisions:
            accept_counts[dec.layer] += int(dec.accepted)
        if audit_hook is not None:
            audit_hook(step, grads_S, grads_T, decisions, params, opt)
        step += 1
        recent_s.append(float(loss_S.data))
        if step % val_every == 0:
            vloss, _ = _bce_eval(params, val_sessions, "satisfaction", val_targets)
            report.train_losses.append(float(np.mean(recent_s)))
            report.val_losses.append(vloss)
            recent_s = []
            if not early_stopped:
                if vloss < best_val - 1e-12:
                    best_val = vloss
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        early_stopped = True
                        report.early_stop_step = step
    report.layer_acceptance = {
        name: (count / step if step else 0.0) for name, count in accept_counts.items()
    }

    ft_cfg = cfg if cfg.finetune_epochs <= 0 else replace(cfg, epochs=cfg.finetune_epochs)
    final, ft_report = finetune(params, splits, ft_cfg, train_subset=d_target)
    report.best_epoch = ft_report.best_epoch
    report.final_params = final
    return final, report
