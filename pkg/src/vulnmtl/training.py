"""Adversarial training on identifier embeddings and the joint objective.

One training step for a mini-batch:

1. clean forward pass (no graph) gives class/line probabilities for the loss
   weight and last-layer attention for per-identifier importance;
2. perturbations at identifier positions are drawn from a Gaussian scaled by
   importance and refined with a few normalised gradient-ascent steps, each
   projected back into the [-eps, eps] box;
3. the perturbed forward pass is trained with the uncertainty-weighted sum
   of type cross-entropy and line focal loss, plus KL(clean || perturbed)
   on the class distribution.

With adversarial training disabled the perturbation is identically zero,
step 2 is skipped and the KL term is zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import Sample
from .model import Batch, ForwardOutput, Perturbation, VulnModel, collate

log = logging.getLogger(__name__)

FLAT_GRADIENT = 1e-12


@dataclass
class AdversarialConfig:
    epsilon: float = 0.02
    mu: float = 0.01
    K: int = 3
    sigma: float = 0.01
    enabled: bool = True
    warmup_epochs: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "AdversarialConfig":
        return cls(cfg.pgd_eps, cfg.pgd_mu, cfg.pgd_steps, cfg.sigma, cfg.edat_enabled, cfg.warmup_epochs)

    def effective_epsilon(self, epoch: int) -> float:
        """Budget for 1-based ``epoch``: linear ramp over the warmup epochs."""
        if self.warmup_epochs <= 0:
            return self.epsilon
        return self.epsilon * min(1.0, epoch / self.warmup_epochs)


@dataclass
class PerturbationSet:
    target_indices: np.ndarray  # token positions
    delta: np.ndarray  # [n_targets, d]
    importance: np.ndarray  # [n_targets]
    epsilon: float

    def __post_init__(self):
        self.target_indices = np.asarray(self.target_indices, dtype=np.int64)
        if self.delta.shape[0] != len(self.target_indices):
            raise ValueError("delta rows must match target positions")


# -- perturbation pieces ----------------------------------------------------------


def importance_from_attention(attn: np.ndarray, targets) -> np.ndarray:
    """Mean-over-heads attention from CLS to each target, rescaled to mean 1.

    ``attn`` is [H, T, T] for one sample.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        return np.zeros(0)
    raw = attn[:, 0, targets].mean(axis=0)
    total = raw.mean()
    if total <= 0:
        return np.ones(len(targets))
    return raw / total


def attention_importance(model: VulnModel, sample: Sample) -> np.ndarray:
    with nx.no_grad():
        out = model.forward(collate([sample]))
    return importance_from_attention(out.last_attention[0], sample.targets)


def init_perturbation(targets, sigma: float, importance, d: int, epsilon: float, rng) -> PerturbationSet:
    """Row i ~ N(0, sigma^2 * importance_i), clipped to [-epsilon, epsilon]."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    targets = np.asarray(targets, dtype=np.int64)
    importance = np.asarray(importance, dtype=np.float64)
    if len(importance) != len(targets):
        raise ValueError("importance must align with targets")
    std = sigma * np.sqrt(importance)[:, None]
    delta = np.clip(rng.standard_normal((len(targets), d)) * std, -epsilon, epsilon)
    return PerturbationSet(targets, delta, importance, epsilon)


def ascent_update(delta: np.ndarray, grad: np.ndarray, mu: float, epsilon: float) -> tuple[np.ndarray, bool]:
    """delta + mu * grad / ||grad||_2, clipped per coordinate. Returns the new
    delta and whether the step was taken (False for a flat gradient)."""
    norm = float(np.sqrt(np.sum(grad * grad)))
    if norm < FLAT_GRADIENT:
        return delta, False
    return np.clip(delta + mu * grad / norm, -epsilon, epsilon), True


def _pack(perts: list[PerturbationSet | None], requires_grad: bool, d: int) -> Perturbation | None:
    rows, b_idx, pos = [], [], []
    for b, p in enumerate(perts):
        if p is None or len(p.target_indices) == 0:
            continue
        rows.append(p.delta)
        b_idx.append(np.full(len(p.target_indices), b))
        pos.append(p.target_indices)
    if not rows:
        return None
    delta = nx.Tensor(np.concatenate(rows), requires_grad=requires_grad)
    return Perturbation(delta, np.concatenate(b_idx), np.concatenate(pos))


# -- losses -------------------------------------------------------------------------


def per_sample_cross_entropy(cls_logits: nx.Tensor, labels: np.ndarray) -> nx.Tensor:
    logp = nx.log_softmax(cls_logits, axis=-1)
    return -logp[np.arange(len(labels)), labels]


def per_sample_focal(line_logits: nx.Tensor, line_labels: np.ndarray, mask: np.ndarray, gamma: float) -> nx.Tensor:
    """Focal loss averaged over each sample's masked lines; zero for samples
    with no masked lines."""
    B, N, _ = line_logits.shape
    logp = nx.log_softmax(line_logits, axis=-1)
    bi, li = np.meshgrid(np.arange(B), np.arange(N), indexing="ij")
    logp_t = logp[bi, li, line_labels]
    per = -logp_t if gamma == 0 else -((1.0 - nx.exp(logp_t)) ** gamma) * logp_t
    m = mask.astype(np.float64)
    return (per * m).sum(axis=1) * (1.0 / np.maximum(m.sum(axis=1), 1.0))


def uncertainty_weight(var_loc: float, entropy_cls: float) -> float:
    """lambda = sigmoid(Var(p_loc) + Entropy(p_cls))."""
    return 1.0 / (1.0 + math.exp(-var_loc - entropy_cls))


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def uncertainty_stats(cls_logits: np.ndarray, line_logits: np.ndarray, line_valid: np.ndarray):
    """Per-sample (Var of vulnerable-line probability over valid lines,
    Shannon entropy in nats of the class distribution)."""
    p_cls = _softmax_np(cls_logits)
    entropy = -(p_cls * np.log(np.where(p_cls > 0, p_cls, 1.0))).sum(axis=-1)
    p_vuln = _softmax_np(line_logits)[..., 1]
    var = np.zeros(len(p_cls))
    for b in range(len(p_cls)):
        v = p_vuln[b][line_valid[b]]
        var[b] = v.var() if v.size else 0.0
    return var, entropy


@dataclass
class LossParts:
    total: nx.Tensor
    cls: np.ndarray
    loc: np.ndarray
    kl: np.ndarray
    lam: np.ndarray
    loc_active: np.ndarray
    flags: list = field(default_factory=list)


def joint_loss(
    out_clean: ForwardOutput,
    out_adv: ForwardOutput,
    batch: Batch,
    gamma: float = 2.0,
    task_mode: str = "multi",
    with_kl: bool = True,
) -> LossParts:
    """Batch-mean of lambda*L_cls + (1-lambda)*L_loc + KL per sample.

    lambda comes from the clean pass and is a constant. Samples without any
    surviving vulnerable line skip L_loc and use lambda = 1.
    """
    has_lines = np.array([s.has_line_labels for s in batch.samples]) & batch.line_valid.any(axis=1)
    line_mask = batch.line_valid & has_lines[:, None]
    var, ent = uncertainty_stats(out_clean.cls_logits.data, out_clean.line_logits.data, batch.line_valid)
    lam = np.array([uncertainty_weight(v, e) for v, e in zip(var, ent)])
    lam = np.where(has_lines, lam, 1.0)
    flags = [s.sample_id for s, h in zip(batch.samples, has_lines) if not h]

    l_cls = per_sample_cross_entropy(out_adv.cls_logits, batch.labels)
    l_loc = per_sample_focal(out_adv.line_logits, batch.line_labels, line_mask, gamma)

    if task_mode == "multi":
        per = l_cls * lam + l_loc * (1.0 - lam)
        weights = np.ones(batch.size)
    elif task_mode == "cls-only":
        per = l_cls
        weights = np.ones(batch.size)
    elif task_mode == "loc-only":
        per = l_loc
        weights = has_lines.astype(np.float64)
    else:
        raise ValueError(f"unknown task_mode {task_mode!r}")

    kl_vals = np.zeros(batch.size)
    if with_kl:
        if task_mode == "loc-only":
            kl_lines = nx.kl_divergence(out_clean.line_logits, out_adv.line_logits, reduce=False)  # [B, N_l]
            m = line_mask.astype(np.float64)
            kl = (kl_lines * m).sum(axis=1) * (1.0 / np.maximum(m.sum(axis=1), 1.0))
        else:
            kl = nx.kl_divergence(out_clean.cls_logits, out_adv.cls_logits, reduce=False)
        per = per + kl
        kl_vals = kl.data.copy()

    n = max(weights.sum(), 1.0)
    total = (per * weights).sum() * (1.0 / n)
    return LossParts(total, l_cls.data.copy(), l_loc.data.copy(), kl_vals, lam, has_lines, flags)


def adversarial_objective(out: ForwardOutput, batch: Batch, gamma: float, task_mode: str) -> nx.Tensor:
    """Loss the perturbation ascends: CE + focal per sample, summed."""
    has_lines = np.array([s.has_line_labels for s in batch.samples])
    line_mask = batch.line_valid & has_lines[:, None]
    terms = []
    if task_mode in ("multi", "cls-only"):
        terms.append(per_sample_cross_entropy(out.cls_logits, batch.labels))
    if task_mode in ("multi", "loc-only"):
        terms.append(per_sample_focal(out.line_logits, batch.line_labels, line_mask, gamma))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total.sum()


# -- PGD ------------------------------------------------------------------------------


@dataclass
class _Frozen:
    """Temporarily stop parameters from collecting gradients."""

    model: VulnModel

    def __enter__(self):
        self.flags = {k: p.requires_grad for k, p in self.model.params.items()}
        for p in self.model.params.values():
            p.requires_grad = False

    def __exit__(self, *exc):
        for k, p in self.model.params.items():
            p.requires_grad = self.flags[k]


def pgd_step_batch(
    model: VulnModel,
    batch: Batch,
    perts: list[PerturbationSet | None],
    adv: AdversarialConfig,
    gamma: float = 2.0,
    task_mode: str = "multi",
    dropout_seed: int | None = None,
) -> tuple[list[PerturbationSet | None], int]:
    """One normalised ascent step for every sample's perturbation.

    Model parameters are not touched. Returns updated sets and the number of
    samples whose gradient was flat (step skipped).
    """
    packed = _pack(perts, True, model.config.d_model)
    if packed is None:
        return perts, 0
    with _Frozen(model):
        out = model.forward(batch, packed, dropout_seed)
        loss = adversarial_objective(out, batch, gamma, task_mode)
        loss.backward()
    grad = packed.delta.grad if packed.delta.grad is not None else np.zeros_like(packed.delta.data)
    new, skipped, offset = [], 0, 0
    for p in perts:
        if p is None or len(p.target_indices) == 0:
            new.append(p)
            continue
        n = len(p.target_indices)
        delta, moved = ascent_update(p.delta, grad[offset : offset + n], adv.mu, p.epsilon)
        skipped += not moved
        offset += n
        new.append(PerturbationSet(p.target_indices, delta, p.importance, p.epsilon))
    return new, skipped


def pgd_step(model: VulnModel, sample: Sample, pert: PerturbationSet, adv: AdversarialConfig, gamma: float = 2.0, task_mode: str = "multi") -> PerturbationSet:
    new, _ = pgd_step_batch(model, collate([sample]), [pert], adv, gamma, task_mode)
    return new[0]


def adversarial_loss_value(model: VulnModel, sample: Sample, pert: PerturbationSet | None, gamma: float = 2.0, task_mode: str = "multi") -> float:
    batch = collate([sample])
    with nx.no_grad():
        out = model.forward(batch, _pack([pert], False, model.config.d_model))
        return float(adversarial_objective(out, batch, gamma, task_mode).data)


# -- training loop ----------------------------------------------------------------------


@dataclass
class StepStats:
    loss: float
    cls: float
    loc: float
    kl: float
    lam: float
    skipped: int
    max_delta: float
    perturbations: list = field(default_factory=list)


def make_perturbations(model, batch, clean: ForwardOutput, adv: AdversarialConfig, epsilon: float, rng) -> list[PerturbationSet | None]:
    d = model.config.d_model
    out = []
    for b, s in enumerate(batch.samples):
        if not s.targets:
            out.append(None)
            continue
        alpha = importance_from_attention(clean.last_attention[b], s.targets)
        out.append(init_perturbation(s.targets, adv.sigma, alpha, d, epsilon, rng))
    return out


def train_step(
    model: VulnModel,
    batch: Batch,
    cfg: RunConfig,
    opt: nx.OptimizerState,
    epsilon: float,
    dropout_seed: int | None,
    pert_rng: np.random.Generator,
    hook=None,
) -> StepStats:
    adv = AdversarialConfig.from_run(cfg)
    model.fusion = cfg.task_mode == "multi"
    perts: list = []
    skipped = 0
    if adv.enabled:
        with nx.no_grad():
            clean = model.forward(batch, None, dropout_seed)
        perts = make_perturbations(model, batch, clean, adv, epsilon, pert_rng)
        for _ in range(adv.K):
            perts, n_flat = pgd_step_batch(model, batch, perts, adv, cfg.focal_gamma, cfg.task_mode, dropout_seed)
            skipped += n_flat
            if hook is not None:
                hook(perts, batch)
        packed = _pack(perts, False, model.config.d_model)
        out_adv = model.forward(batch, packed, dropout_seed)
    else:
        out_adv = model.forward(batch, None, dropout_seed)
        clean = out_adv

    parts = joint_loss(clean, out_adv, batch, cfg.focal_gamma, cfg.task_mode, with_kl=adv.enabled)
    if not np.isfinite(parts.total.data):
        raise FloatingPointError(f"non-finite loss {parts.total.data} (samples {[s.sample_id for s in batch.samples]})")
    for p in model.params.values():
        p.grad = None
    parts.total.backward()
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    nx.optimizer_step(model.params, grads, opt)
    max_delta = max((float(np.abs(p.delta).max()) for p in perts if p is not None and p.delta.size), default=0.0)
    return StepStats(
        float(parts.total.data),
        float(parts.cls.mean()),
        float(parts.loc[parts.loc_active].mean()) if parts.loc_active.any() else 0.0,
        float(parts.kl.mean()),
        float(parts.lam.mean()),
        skipped,
        max_delta,
        perts,
    )


@dataclass
class EpochStats:
    epoch: int
    loss: float
    cls: float
    loc: float
    kl: float
    lam: float
    epsilon: float
    skipped: int
    max_delta: float
    steps: int

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss": self.loss,
            "loss_cls": self.cls,
            "loss_loc": self.loc,
            "loss_kl": self.kl,
            "lambda": self.lam,
            "epsilon": self.epsilon,
            "pgd_flat_skips": self.skipped,
            "max_abs_delta": self.max_delta,
            "steps": self.steps,
        }


def batches(samples: list[Sample], batch_size: int, rng: np.random.Generator | None):
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for i in range(0, len(order), batch_size):
        yield collate([samples[j] for j in order[i : i + batch_size]])


def train_epoch(model: VulnModel, samples: list[Sample], cfg: RunConfig, opt: nx.OptimizerState, epoch: int, rng: np.random.Generator, hook=None) -> EpochStats:
    """One pass over ``samples`` (1-based ``epoch``)."""
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    adv = AdversarialConfig.from_run(cfg)
    eps = adv.effective_epsilon(epoch)
    rows = []
    for step, batch in enumerate(batches(samples, cfg.batch, rng)):
        dropout_seed = int(rng.integers(2**31)) if cfg.dropout > 0 else None
        pert_rng = np.random.default_rng([cfg.seed, epoch, step])
        rows.append(train_step(model, batch, cfg, opt, eps, dropout_seed, pert_rng, hook))
    return EpochStats(
        epoch=epoch,
        loss=float(np.mean([r.loss for r in rows])),
        cls=float(np.mean([r.cls for r in rows])),
        loc=float(np.mean([r.loc for r in rows])),
        kl=float(np.mean([r.kl for r in rows])),
        lam=float(np.mean([r.lam for r in rows])),
        epsilon=eps,
        skipped=sum(r.skipped for r in rows),
        max_delta=max(r.max_delta for r in rows),
        steps=len(rows),
    )


# -- inference ------------------------------------------------------------------------------


@dataclass
class Predictions:
    sample_ids: list[str]
    labels: np.ndarray
    pred: np.ndarray
    cls_probs: np.ndarray
    line_probs: list[np.ndarray]  # vulnerable-class probability per line slot
    line_valid: list[np.ndarray]
    vuln_lines: list[list[int]]
    original_vuln_counts: list[int]


def predict_samples(model: VulnModel, samples: list[Sample], batch_size: int = 32, task_mode: str | None = None) -> Predictions:
    if task_mode is not None:
        model.fusion = task_mode == "multi"
    ids, pred, probs, lp, lv = [], [], [], [], []
    with nx.no_grad():
        for batch in batches(samples, batch_size, None):
            out = model.forward(batch)
            pc = _softmax_np(out.cls_logits.data)
            pl = _softmax_np(out.line_logits.data)[..., 1]
            for b, s in enumerate(batch.samples):
                ids.append(s.sample_id)
                probs.append(pc[b])
                pred.append(int(np.argmax(pc[b])))
                lp.append(pl[b].copy())
                lv.append(batch.line_valid[b].copy())
    return Predictions(
        ids,
        np.array([s.label for s in samples], dtype=np.int64),
        np.array(pred, dtype=np.int64),
        np.array(probs),
        lp,
        lv,
        [list(s.vuln_lines) for s in samples],
        [s.original_vuln_count for s in samples],
    )
