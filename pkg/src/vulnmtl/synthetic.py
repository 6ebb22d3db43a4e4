"""Synthetic C functions with planted vulnerable lines.

Each class has its own vulnerable statement shape; the rest of the body is
benign filler drawn from a shared pool, so type prediction and line
localisation both have to find the planted line. Local variable names are
drawn from a class-specific pool with probability ``name_bias`` which gives
the corpus a lexical shortcut that identifier renaming removes.
"""

from __future__ import annotations

import numpy as np

from .data import Record
from .syntax import analyze

CLASSES = ("CWE-120", "CWE-190", "CWE-416", "CWE-476")

_NAME_POOLS = {
    "CWE-120": ["dst", "dest", "out", "target", "copybuf"],
    "CWE-190": ["count", "total", "width", "nbytes", "elems"],
    "CWE-416": ["node", "entry", "item", "obj", "handle"],
    "CWE-476": ["ptr", "res", "conn", "ctx", "info"],
}
_SHARED_NAMES = ["tmp", "val", "idx", "acc", "flag", "cur", "pos", "len2", "step", "key"]


def _vulnerable_block(cwe: str, v: dict, rng) -> tuple[list[str], int]:
    """Lines for the planted flaw and the offset of the vulnerable one."""
    a, b = v["a"], v["b"]
    if cwe == "CWE-120":
        call = ["strcpy({a}, {src});", "strcat({a}, {src});", "sprintf({a}, \"%s\", {src});"][rng.integers(3)]
        return [f"char {a}[16];", call.format(a=a, src=v["src"])], 1
    if cwe == "CWE-190":
        return [f"int {a} = {v['n']} * {b};", f"char *{v['c']} = malloc({a});"], 0
    if cwe == "CWE-416":
        return [f"free({a});", f"{b} = {a}->next;"], 1
    if cwe == "CWE-476":
        return [f"{a} = lookup({v['n']});", f"{b} = {a}->field;"], 1
    raise ValueError(cwe)


def _filler(v: dict, rng) -> str:
    x, y = v["x"], v["y"]
    options = [
        f"{x} = {y} + {int(rng.integers(1, 9))};",
        f"if ({x} > {y}) {{ {x} = {y}; }}",
        f"printf(\"%d\\n\", {x});",
        f"{y} = {y} - 1;",
        f"memset({v['buf']}, 0, sizeof({v['buf']}));",
        f"{x} = strlen({v['src']});",
        f"strncpy({v['buf']}, {v['src']}, sizeof({v['buf']}) - 1);",
        f"while ({y} > 0) {{ {y}--; }}",
        f"log_value({x});",
        f"{x} += {v['n']};",
        f"if ({v['src']} == NULL) {{ return -1; }}",
        f"{y} = {x} % {int(rng.integers(2, 7))};",
    ]
    return options[rng.integers(len(options))]


def _distractor(v: dict, rng) -> str:
    """A benign statement that shares its sink API with some vulnerable class."""
    options = [
        f"strcpy({v['buf']}, \"ok\");",
        f"if (lookup({v['n']}) == NULL) {{ return -1; }}",
        f"log_value({v['n']} * 2);",
        "free(NULL);",
        f"sprintf({v['buf']}, \"%d\", {v['x']});",
    ]
    return options[rng.integers(len(options))]


def make_function(
    cwe: str,
    rng,
    name_bias: float = 0.8,
    n_filler: tuple[int, int] = (8, 14),
    distractor_rate: float = 0.0,
):
    """Return (code, vulnerable 1-based line numbers).

    With ``distractor_rate`` > 0 each filler line is replaced, with that
    probability, by a safe use of one of the sink APIs, so the type can only
    be read off the line that is actually vulnerable.
    """
    pool = _NAME_POOLS[cwe] if rng.random() < name_bias else _SHARED_NAMES + sum(_NAME_POOLS.values(), [])
    names = list(rng.choice(sorted(set(pool) | set(_SHARED_NAMES)), size=8, replace=False))
    v = {"a": names[0], "b": names[1], "c": names[2], "x": names[3], "y": names[4], "buf": names[5], "src": "src", "n": "n"}
    head = [
        f"int {['process', 'handle', 'parse', 'update', 'read'][rng.integers(5)]}_{int(rng.integers(100))}(char *src, int n) {{",
        f"    int {v['x']} = 0, {v['y']} = n;",
        f"    char {v['buf']}[32];",
    ]
    if cwe in ("CWE-416", "CWE-476"):
        head.append(f"    struct item *{v['a']} = get_item(n);" if cwe == "CWE-416" else f"    struct item *{v['a']};")
        head.append(f"    struct item *{v['b']};" if cwe == "CWE-416" else f"    int {v['b']};")
    elif cwe == "CWE-190":
        head.append(f"    int {v['b']} = {int(rng.integers(2, 64))};")
    body = [
        "    " + (_distractor(v, rng) if rng.random() < distractor_rate else _filler(v, rng))
        for _ in range(int(rng.integers(*n_filler)))
    ]
    block, hot = _vulnerable_block(cwe, v, rng)
    at = int(rng.integers(0, len(body) + 1))
    body[at:at] = ["    " + line for line in block]
    lines = head + body + [f"    return {v['x']};", "}"]
    vuln_line = len(head) + at + hot + 1
    return "\n".join(lines) + "\n", [vuln_line]


def make_corpus(
    n_per_class: int,
    seed: int = 0,
    classes=CLASSES,
    name_bias: float = 0.8,
    prefix: str = "syn",
    n_filler: tuple[int, int] = (8, 14),
    distractor_rate: float = 0.0,
) -> list[Record]:
    rng = np.random.default_rng(seed)
    records = []
    for c in classes:
        for i in range(n_per_class):
            code, vuln = make_function(c, rng, name_bias, n_filler, distractor_rate)
            records.append(Record(f"{prefix}-{c}-{i}", code, c, vuln))
    order = rng.permutation(len(records))
    return [records[i] for i in order]


def rename_identifiers(record: Record, rng, prefix: str = "r") -> Record:
    """Consistently rename every local variable and parameter to a fresh name."""
    analysis = analyze(record.code)
    lexemes = analysis.lexemes
    mapping: dict[tuple[str, str], str] = {}
    replace: dict[int, str] = {}
    for occ in analysis.occurrences:
        if occ.kind not in ("local-variable", "parameter"):
            continue
        key = (occ.name, occ.scope)
        if key not in mapping:
            mapping[key] = f"{prefix}{len(mapping)}_{''.join(rng.choice(list('qxzjkw'), size=3))}"
        replace[occ.index] = mapping[key]
    lines = record.code.split("\n")
    # apply right-to-left per line so columns stay valid
    for idx in sorted(replace, key=lambda i: (lexemes[i].line, -lexemes[i].col)):
        l = lexemes[idx]
        row = lines[l.line - 1]
        start = l.col - 1
        lines[l.line - 1] = row[:start] + replace[idx] + row[start + len(l.text) :]
    return Record(record.id + "-renamed", "\n".join(lines), record.cwe, list(record.vuln_lines), record.project, record.commit)


def long_tail_counts(n_classes: int = 91, head: int = 400, alpha: float = 1.3, floor: int = 1) -> list[int]:
    """Zipf-like class sizes: class k gets about head / (k+1)^alpha records."""
    return [max(floor, int(round(head / (k + 1) ** alpha))) for k in range(n_classes)]


def long_tail_corpus(n_classes: int = 91, seed: int = 0, head: int = 400) -> list[Record]:
    rng = np.random.default_rng(seed)
    records = []
    for k, n in enumerate(long_tail_counts(n_classes, head)):
        cwe = f"CWE-{100 + k}"
        for i in range(n):
            records.append(Record(f"lt-{k}-{i}", f"int f{i}(int a) {{\n  return a + {k};\n}}\n", cwe, [2]))
    order = rng.permutation(len(records))
    return [records[i] for i in order]
