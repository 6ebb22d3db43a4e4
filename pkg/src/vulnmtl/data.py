"""Dataset records, vocabulary, stratified splitting and fixed-shape samples."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .syntax import TokenizedFunction, lex

log = logging.getLogger(__name__)

PAD, UNK, CLS = "<pad>", "<unk>", "<cls>"
OTHER_CLASS = "OTHER"
_CWE_RE = re.compile(r"^CWE-(\d+)$")


class DatasetError(ValueError):
    """Input data is unusable (schema violations, too many bad lines)."""


@dataclass
class Record:
    id: str
    code: str
    cwe: str
    vuln_lines: list[int]
    project: str | None = None
    commit: str | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> "Record":
        if not isinstance(obj, dict):
            raise DatasetError("record is not a JSON object")
        for key in ("id", "code", "cwe", "vuln_lines"):
            if key not in obj:
                raise DatasetError(f"missing field {key!r}")
        unknown = set(obj) - {"id", "code", "cwe", "vuln_lines", "project", "commit"}
        if unknown:
            raise DatasetError(f"unknown fields {sorted(unknown)}")
        code, cwe, lines = obj["code"], obj["cwe"], obj["vuln_lines"]
        if not isinstance(code, str) or not code.strip():
            raise DatasetError("code must be a non-empty string")
        if not isinstance(cwe, str) or not cwe:
            raise DatasetError("cwe must be a non-empty string")
        if not isinstance(lines, list) or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in lines):
            raise DatasetError("vuln_lines must be a list of integers >= 1")
        return cls(str(obj["id"]), code, cwe, sorted(set(lines)), obj.get("project"), obj.get("commit"))

    def to_dict(self) -> dict:
        out = {"id": self.id, "code": self.code, "cwe": self.cwe, "vuln_lines": list(self.vuln_lines)}
        if self.project is not None:
            out["project"] = self.project
        if self.commit is not None:
            out["commit"] = self.commit
        return out


@dataclass
class LoadSummary:
    n_lines: int = 0
    n_records: int = 0
    malformed: list[tuple[int, str]] = field(default_factory=list)


def load_dataset(path, max_malformed_fraction: float = 0.10, summary: LoadSummary | None = None) -> list[Record]:
    """Read a JSON-lines dataset. Bad lines are collected in ``summary``;
    more than ``max_malformed_fraction`` of them is a hard failure."""
    summary = summary if summary is not None else LoadSummary()
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            summary.n_lines += 1
            try:
                records.append(Record.from_dict(json.loads(raw)))
            except (json.JSONDecodeError, DatasetError) as exc:
                summary.malformed.append((lineno, str(exc)))
    summary.n_records = len(records)
    if summary.malformed:
        log.warning("%s: %d malformed line(s), first: %s", path, len(summary.malformed), summary.malformed[0])
    if summary.n_lines and len(summary.malformed) / summary.n_lines > max_malformed_fraction:
        raise DatasetError(
            f"{path}: {len(summary.malformed)} of {summary.n_lines} lines malformed "
            f"(limit {max_malformed_fraction:.0%})"
        )
    return records


def write_dataset(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def convert_csv(
    src,
    dst,
    code_col: str = "func_before",
    cwe_col: str = "CWE ID",
    lines_col: str = "flaw_line_index",
    id_col: str | None = None,
    lines_base: int = 0,
    project_col: str | None = "project",
    commit_col: str | None = "commit_id",
) -> int:
    """Convert a Big-Vul style CSV into the JSON-lines record format.

    ``lines_col`` holds comma separated line indices counted from
    ``lines_base``. Rows with empty code are skipped. Returns the number of
    records written.
    """
    csv.field_size_limit(2**31 - 1)
    n = 0
    with open(src, encoding="utf-8", newline="") as fh, open(dst, "w", encoding="utf-8", newline="\n") as out:
        for rowno, row in enumerate(csv.DictReader(fh)):
            code = row.get(code_col) or ""
            if not code.strip():
                continue
            raw_lines = (row.get(lines_col) or "").strip()
            lines = sorted({int(float(x)) - lines_base + 1 for x in re.split(r"[,\s]+", raw_lines) if x})
            cwe = (row.get(cwe_col) or "").strip() or OTHER_CLASS
            rec = Record(
                id=str(row[id_col]) if id_col else str(rowno),
                code=code,
                cwe=cwe,
                vuln_lines=[x for x in lines if x >= 1],
                project=(row.get(project_col) or None) if project_col else None,
                commit=(row.get(commit_col) or None) if commit_col else None,
            )
            out.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            n += 1
    return n


# -- labels ------------------------------------------------------------------


def _cwe_sort_key(name: str):
    m = _CWE_RE.match(name)
    return (0, int(m.group(1)), name) if m else (1, 0, name)


@dataclass
class LabelMap:
    """CWE name <-> class index. Unknown or malformed names map to OTHER,
    which is always the last class."""

    classes: list[str]

    @classmethod
    def from_records(cls, records) -> "LabelMap":
        names = {r.cwe for r in records if _CWE_RE.match(r.cwe)}
        return cls(sorted(names, key=_cwe_sort_key) + [OTHER_CLASS])

    def __len__(self) -> int:
        return len(self.classes)

    def index(self, cwe: str) -> int:
        try:
            return self.classes.index(cwe)
        except ValueError:
            return len(self.classes) - 1


# -- vocabulary ----------------------------------------------------------------


class Vocabulary:
    """Token string to id. Ids 0, 1, 2 are PAD, UNK and CLS."""

    def __init__(self, tokens: list[str] | None = None, min_freq: int = 1):
        self.itos = [PAD, UNK, CLS] + [t for t in (tokens or []) if t not in (PAD, UNK, CLS)]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.min_freq = min_freq

    pad_id, unk_id, cls_id = 0, 1, 2

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, t in enumerate(self.itos):
                fh.write(f"{t}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for expected, line in enumerate(fh):
                tok, _, idx = line.rstrip("\n").rpartition("\t")
                if int(idx) != expected:
                    raise DatasetError(f"{path}: ids must be contiguous, got {idx} at line {expected + 1}")
                tokens.append(tok)
        if tokens[:3] != [PAD, UNK, CLS]:
            raise DatasetError(f"{path}: reserved tokens must come first")
        return cls(tokens[3:])

    def to_list(self) -> list[str]:
        return list(self.itos)


def build_vocab(records, min_freq: int = 1) -> Vocabulary:
    """Count lexemes over ``records`` and keep those seen ``min_freq`` times.
    Ids follow (frequency desc, token asc)."""
    counts: Counter = Counter()
    for r in records:
        counts.update(l.text for l in lex(r.code))
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_freq=min_freq)


# -- splitting -------------------------------------------------------------------


def _apportion(n: int, ratios: tuple[float, ...]) -> list[int]:
    """Largest-remainder rounding of ``n`` items into ``ratios`` shares."""
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    base = [math.floor(q) for q in quotas]
    left = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def stratified_split(records, ratios=(8, 1, 1), seed: int = 0, min_class_size: int = 3):
    """Split per CWE class with a seeded shuffle and largest-remainder counts.

    Classes with fewer than ``min_class_size`` records go entirely to train.
    Returns ``(train, valid, test, warnings)``.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"bad split ratios {ratios}")
    by_class: dict[str, list[Record]] = defaultdict(list)
    for r in records:
        by_class[r.cwe].append(r)
    rng = np.random.default_rng(seed)
    train, valid, test, warnings = [], [], [], []
    for cwe in sorted(by_class, key=_cwe_sort_key):
        members = sorted(by_class[cwe], key=lambda r: r.id)
        if len(members) < min_class_size:
            warnings.append(f"{cwe}: only {len(members)} record(s); all assigned to train")
            train.extend(members)
            continue
        order = rng.permutation(len(members))
        members = [members[i] for i in order]
        n_tr, n_va, _ = _apportion(len(members), tuple(ratios))
        train.extend(members[:n_tr])
        valid.extend(members[n_tr : n_tr + n_va])
        test.extend(members[n_tr + n_va :])
    for w in warnings:
        log.warning(w)
    return train, valid, test, warnings


# -- fixed-shape samples ---------------------------------------------------------


@dataclass
class Sample:
    """A function padded/truncated to the model's fixed dimensions."""

    sample_id: str
    ids: np.ndarray  # [L_c] int
    token_mask: np.ndarray  # [L_c] bool
    line_tokens: np.ndarray  # [N_l, N_t] int positions into ids
    line_token_mask: np.ndarray  # [N_l, N_t] bool
    line_valid: np.ndarray  # [N_l] bool
    line_labels: np.ndarray  # [N_l] int (1 = vulnerable)
    label: int
    vuln_lines: list[int]  # surviving ground truth
    truncated_vuln_lines: list[int]
    original_vuln_count: int
    attn_mask: np.ndarray | None = None  # [L_c, L_c] bool
    targets: list[int] = field(default_factory=list)

    @property
    def has_line_labels(self) -> bool:
        return bool(self.vuln_lines)

    @property
    def length(self) -> int:
        return int(self.token_mask.sum())


def pad_truncate(tf: TokenizedFunction, max_len: int, n_lines: int, tokens_per_line: int, attn_mask=None) -> Sample:
    """Force ``tf`` into [max_len] tokens, [n_lines, tokens_per_line] line slots.

    Line slot ``k`` holds source line ``k + 1``. Vulnerable lines that end up
    outside a valid slot are reported in ``truncated_vuln_lines``.
    """
    if min(max_len, n_lines, tokens_per_line) < 1:
        raise ValueError("dimensions must be positive")
    L = min(len(tf.tokens), max_len)
    ids = np.zeros(max_len, dtype=np.int64)
    ids[:L] = tf.tokens[:L]
    token_mask = np.zeros(max_len, dtype=bool)
    token_mask[:L] = True
    line_tokens = np.zeros((n_lines, tokens_per_line), dtype=np.int64)
    line_token_mask = np.zeros((n_lines, tokens_per_line), dtype=bool)
    for line, positions in tf.line_map.items():
        if line > n_lines:
            continue
        pos = [p for p in positions if p < L][:tokens_per_line]
        line_tokens[line - 1, : len(pos)] = pos
        line_token_mask[line - 1, : len(pos)] = True
    line_valid = line_token_mask.any(axis=1)
    kept = sorted(v for v in tf.vuln_lines if v <= n_lines and line_valid[v - 1])
    dropped = sorted(set(tf.vuln_lines) - set(kept))
    labels = np.zeros(n_lines, dtype=np.int64)
    for v in kept:
        labels[v - 1] = 1
    full_mask = None
    if attn_mask is not None:
        full_mask = np.zeros((max_len, max_len), dtype=bool)
        full_mask[:L, :L] = attn_mask[:L, :L]
        # padded query rows look at CLS only so every softmax row is defined
        full_mask[L:, 0] = True
    return Sample(
        sample_id=tf.sample_id,
        ids=ids,
        token_mask=token_mask,
        line_tokens=line_tokens,
        line_token_mask=line_token_mask,
        line_valid=line_valid,
        line_labels=labels,
        label=tf.cwe_label,
        vuln_lines=kept,
        truncated_vuln_lines=dropped,
        original_vuln_count=len(tf.vuln_lines),
        attn_mask=full_mask,
    )


# -- statistics --------------------------------------------------------------------


def _describe(values, bound: int) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "bound": bound,
        "coverage": float(np.mean(arr <= bound)),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "mean": float(arr.mean()),
        "std": float(arr.std()),
    }


def dataset_stats(records, max_len: int = 512, n_lines: int = 256, tokens_per_line: int = 64) -> dict:
    """Coverage of each input dimension plus min/max/mean/std.

    Code length counts source tokens, code lines counts source lines, and
    tokens per line is taken per function as its longest line.
    """
    if not records:
        raise ValueError("dataset_stats needs at least one record")
    lengths, lines, per_line = [], [], []
    for r in records:
        lexemes = lex(r.code)
        lengths.append(len(lexemes))
        lines.append(r.code.count("\n") + (0 if r.code.endswith("\n") else 1))
        counts = Counter(l.line for l in lexemes)
        per_line.append(max(counts.values()) if counts else 0)
    return {
        "n_records": len(records),
        "code_length": _describe(lengths, max_len),
        "code_lines": _describe(lines, n_lines),
        "code_tokens": _describe(per_line, tokens_per_line),
    }
