"""Shared transformer encoder with a type head and a per-line head.

Both heads run twice. The first pass gives preliminary logits from linear
heads; the second pass lets each head attention-pool the encoder output with
a query biased by the other head's preliminary prediction, and adds the
pooled correction to the preliminary logits. Fusion projections start at
zero, so an untrained model's final logits equal its preliminary ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .data import Sample
from .numerics import Tensor


@dataclass
class EncoderConfig:
    vocab_size: int
    n_classes: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 512
    n_lines: int = 256
    tokens_per_line: int = 64
    dropout: float = 0.2
    d_ff: int = 0  # 0 means 4 * d_model

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        for name in ("vocab_size", "n_classes", "d_model", "n_layers", "n_heads", "max_len", "n_lines", "tokens_per_line"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown encoder config keys {sorted(unknown)}")
        return cls(**obj)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class Batch:
    ids: np.ndarray  # [B, T]
    token_mask: np.ndarray  # [B, T]
    attn_mask: np.ndarray  # [B, T, T]
    pool: np.ndarray  # [B, N_l, T] line-averaging weights
    line_valid: np.ndarray  # [B, N_l]
    line_labels: np.ndarray  # [B, N_l]
    labels: np.ndarray  # [B]
    samples: list

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def collate(samples: list[Sample]) -> Batch:
    """Stack samples, trimming the token axis to the longest one."""
    if not samples:
        raise ValueError("empty batch")
    T = max(s.length for s in samples)
    n_lines = samples[0].line_tokens.shape[0]
    B = len(samples)
    ids = np.stack([s.ids[:T] for s in samples])
    token_mask = np.stack([s.token_mask[:T] for s in samples])
    attn = np.zeros((B, T, T), dtype=bool)
    pool = np.zeros((B, n_lines, T))
    for b, s in enumerate(samples):
        if s.attn_mask is None:
            m = np.zeros((T, T), dtype=bool)
            m[:, :] = token_mask[b][None, :]
            m[~token_mask[b], 0] = True
        else:
            m = s.attn_mask[:T, :T]
        attn[b] = m
        counts = s.line_token_mask.sum(axis=1)
        rows, cols = np.nonzero(s.line_token_mask)
        pool[b, rows, s.line_tokens[rows, cols]] = 1.0 / counts[rows]
    return Batch(
        ids=ids,
        token_mask=token_mask,
        attn_mask=attn,
        pool=pool,
        line_valid=np.stack([s.line_valid for s in samples]),
        line_labels=np.stack([s.line_labels for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        samples=list(samples),
    )


@dataclass
class Perturbation:
    """Rows of ``delta`` are added to the token embeddings at
    (``batch_index``, ``positions``)."""

    delta: Tensor  # [n, d]
    batch_index: np.ndarray
    positions: np.ndarray


@dataclass
class ForwardOutput:
    cls_logits: Tensor  # [B, C]
    line_logits: Tensor  # [B, N_l, 2]
    line_valid: np.ndarray  # [B, N_l]
    prelim_cls_logits: Tensor
    prelim_line_logits: Tensor
    hidden: Tensor  # [B, T, d]
    last_attention: np.ndarray  # [B, H, T, T]


@dataclass
class TaskOutputs:
    cls_logits: Tensor  # [C]
    line_logits: Tensor  # [N_l, 2]
    line_valid_mask: np.ndarray  # [N_l]


class VulnModel:
    """Parameters live in ``self.params`` (name -> Tensor)."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.fusion = True
        rng = np.random.default_rng(seed)
        d, ff, C = config.d_model, config.d_ff, config.n_classes
        p: dict[str, Tensor] = {}

        def normal(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape), requires_grad=True)

        p["embed"] = normal((config.vocab_size, d), 1.0 / math.sqrt(d))
        for i in range(config.n_layers):
            for w in ("wq", "wk", "wv", "wo"):
                p[f"l{i}.{w}"] = normal((d, d), 1.0 / math.sqrt(d))
                p[f"l{i}.b{w[1]}"] = zeros((d,))
            p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"] = ones((d,)), zeros((d,))
            p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"] = ones((d,)), zeros((d,))
            p[f"l{i}.ff1"] = normal((d, ff), 1.0 / math.sqrt(d))
            p[f"l{i}.ff1b"] = zeros((ff,))
            p[f"l{i}.ff2"] = normal((ff, d), 1.0 / math.sqrt(ff))
            p[f"l{i}.ff2b"] = zeros((d,))
        p["lnf.g"], p["lnf.b"] = ones((d,)), zeros((d,))
        p["cls.w"], p["cls.b"] = normal((d, C), 1.0 / math.sqrt(d)), zeros((C,))
        p["loc.w"], p["loc.b"] = normal((d, 2), 1.0 / math.sqrt(d)), zeros((2,))
        # cross-task fusion; zero so the second pass starts inert
        p["fuse.cls.query"] = zeros((d, d))  # line prediction embedding -> cls query bias
        p["fuse.loc.query"] = zeros((C, d))  # class distribution -> line query bias
        p["fuse.cls.out"] = zeros((d, C))
        p["fuse.loc.out"] = zeros((d, 2))
        self.params = p
        self._pos = sinusoidal_positions(config.max_len, d)

    # -- encoder -----------------------------------------------------------

    def embed(self, batch: Batch, perturbation: Perturbation | None = None) -> Tensor:
        d = self.config.d_model
        x = nx.embedding(self.params["embed"], batch.ids)
        if perturbation is not None and len(perturbation.positions):
            index = (perturbation.batch_index, perturbation.positions)
            x = x + nx.scatter_rows(perturbation.delta, index, x.shape)
        return x * math.sqrt(d) + self._pos[: batch.ids.shape[1]]

    def encode_batch(self, batch: Batch, perturbation: Perturbation | None = None, rng=None):
        cfg, p = self.config, self.params
        B, T = batch.ids.shape
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        x = nx.dropout(self.embed(batch, perturbation), cfg.dropout, rng)
        mask = batch.attn_mask[:, None, :, :]
        attn = None
        for i in range(cfg.n_layers):
            h = nx.layer_norm(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])

            def heads(w):
                return (h @ p[f"l{i}.w{w}"] + p[f"l{i}.b{w}"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)

            q, k, v = heads("q"), heads("k"), heads("v")
            scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
            a = nx.softmax(scores, axis=-1, mask=mask)
            attn = a.data
            ctx = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            x = x + nx.dropout(ctx @ p[f"l{i}.wo"] + p[f"l{i}.bo"], cfg.dropout, rng)
            h2 = nx.layer_norm(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
            ff = nx.gelu(h2 @ p[f"l{i}.ff1"] + p[f"l{i}.ff1b"]) @ p[f"l{i}.ff2"] + p[f"l{i}.ff2b"]
            x = x + nx.dropout(ff, cfg.dropout, rng)
        return nx.layer_norm(x, p["lnf.g"], p["lnf.b"]), attn

    # -- heads ---------------------------------------------------------------

    def forward(self, batch: Batch, perturbation: Perturbation | None = None, dropout_seed: int | None = None) -> ForwardOutput:
        """Run encoder and both heads. Dropout is active only when
        ``dropout_seed`` is given; the same seed reproduces the same masks."""
        p = self.params
        d = self.config.d_model
        rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
        E, attn = self.encode_batch(batch, perturbation, rng)
        B = batch.size
        cls_vec = E[:, 0, :]  # [B, d]
        lines = batch.pool @ E  # [B, N_l, d]
        z_cls1 = cls_vec @ p["cls.w"] + p["cls.b"]
        z_loc1 = lines @ p["loc.w"] + p["loc.b"]

        scale = 1.0 / math.sqrt(d)
        # cls head: query = CLS vector (+ projected line prediction embedding)
        q_cls = cls_vec
        line_valid = batch.line_valid.astype(np.float64)
        if self.fusion:
            p_vuln = nx.softmax(z_loc1, axis=-1)[:, :, 1] * line_valid  # [B, N_l]
            n_valid = np.maximum(line_valid.sum(axis=1, keepdims=True), 1.0)
            line_pred_emb = (p_vuln.reshape(B, 1, -1) @ lines).reshape(B, d) * (1.0 / n_valid)
            q_cls = q_cls + line_pred_emb @ p["fuse.cls.query"]
        cls_keys = batch.attn_mask[:, 0, :]  # what CLS may attend to
        s_cls = (E @ q_cls.reshape(B, d, 1)).reshape(B, -1) * scale
        a_cls = nx.softmax(s_cls, axis=-1, mask=cls_keys)
        ctx_cls = (a_cls.reshape(B, 1, -1) @ E).reshape(B, d)
        z_cls = z_cls1 + ctx_cls @ p["fuse.cls.out"]

        # line head: query per line = line vector (+ projected class distribution)
        q_loc = lines
        if self.fusion:
            p_cls = nx.softmax(z_cls1, axis=-1)  # [B, C]
            q_loc = q_loc + (p_cls @ p["fuse.loc.query"]).reshape(B, 1, d)
        s_loc = (q_loc @ E.transpose(0, 2, 1)) * scale  # [B, N_l, T]
        a_loc = nx.softmax(s_loc, axis=-1, mask=batch.token_mask[:, None, :])
        ctx_loc = a_loc @ E
        z_loc = z_loc1 + ctx_loc @ p["fuse.loc.out"]
        return ForwardOutput(z_cls, z_loc, batch.line_valid, z_cls1, z_loc1, E, attn)

    # -- single-sample API -----------------------------------------------------

    def encode(self, sample: Sample, perturbation: Perturbation | None = None) -> Tensor:
        """Token embeddings [T, d] for one sample (evaluation mode)."""
        if sample.attn_mask is not None and sample.attn_mask.shape != (len(sample.ids), len(sample.ids)):
            raise ValueError(f"mask shape {sample.attn_mask.shape} does not match {len(sample.ids)} tokens")
        E, _ = self.encode_batch(collate([sample]), perturbation)
        return E[0]

    def predict(self, sample: Sample, perturbation: Perturbation | None = None) -> TaskOutputs:
        out = self.forward(collate([sample]), perturbation)
        return TaskOutputs(out.cls_logits[0], out.line_logits[0], out.line_valid[0])

    # -- checkpoints -------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint parameters differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != self.params[k].shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape}, model shape {self.params[k].shape}")
            self.params[k].data = arr.copy()


def cls_representation(E: Tensor) -> Tensor:
    return E[0]


def line_representations(E: Tensor, line_map: dict[int, list[int]], n_lines: int):
    """Mean of token rows per line; returns ([n_lines, d] Tensor, valid mask)."""
    T = E.shape[0]
    pool = np.zeros((n_lines, T))
    valid = np.zeros(n_lines, dtype=bool)
    for line, positions in line_map.items():
        pos = [q for q in positions if q < T]
        if 1 <= line <= n_lines and pos:
            pool[line - 1, pos] = 1.0 / len(pos)
            valid[line - 1] = True
    return nx.matmul(pool, E), valid


def save_checkpoint(path, model: VulnModel, extra: dict | None = None) -> None:
    """JSON container: config, named parameter arrays and free-form metadata."""
    doc = {
        "format": "vulnmtl-checkpoint/1",
        "config": model.config.to_dict(),
        "fusion": model.fusion,
        "extra": extra or {},
        "params": {k: {"shape": list(v.shape), "data": v.data.ravel().tolist()} for k, v in sorted(model.params.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path, expected_config: EncoderConfig | None = None):
    """Return ``(model, extra)``. Raises ValueError when ``expected_config``
    disagrees with the stored one."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "vulnmtl-checkpoint/1":
        raise ValueError(f"{path}: not a checkpoint file")
    config = EncoderConfig.from_dict(doc["config"])
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        diff = {k: (v, config.to_dict()[k]) for k, v in expected_config.to_dict().items() if config.to_dict()[k] != v}
        raise ValueError(f"checkpoint config mismatch (expected, stored): {diff}")
    model = VulnModel(config)
    model.fusion = bool(doc.get("fusion", True))
    model.load_state_dict({k: np.array(v["data"]).reshape(v["shape"]) for k, v in doc["params"].items()})
    return model, doc.get("extra", {})
