"""Lexing, identifier analysis and def-use chains for C-family functions.

The parser is a scope-tracking walk over the token stream rather than a
full grammar. It recognises function definitions, declarations,
assignments, calls, field accesses and block structure, which is enough
to classify identifiers and build intra-procedural def-use chains. When
the token stream is not balanced it falls back to purely lexical
detection and labels every identifier ``other``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

KEYWORDS = frozenset(
    """
    auto break case char const continue default do double else enum extern
    float for goto if inline int long register restrict return short signed
    sizeof static struct switch typedef union unsigned void volatile while
    _Bool _Complex _Imaginary bool true false class namespace new delete
    template typename public private protected virtual this throw try catch
    operator friend using nullptr explicit mutable static_cast const_cast
    dynamic_cast reinterpret_cast
    """.split()
)

BUILTIN_TYPES = frozenset(
    "char short int long float double void signed unsigned _Bool bool _Complex".split()
)
QUALIFIERS = frozenset("const volatile static extern register auto inline restrict".split())
TAG_KEYWORDS = frozenset({"struct", "union", "enum", "class"})

ASSIGN_OPS = frozenset({"=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<=", ">>="})

IDENT_KINDS = ("local-variable", "parameter", "function-name", "type-name", "field", "other")

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\f\v]+)
  | (?P<nl>\n)
  | (?P<lcomment>//[^\n]*)
  | (?P<bcomment>/\*.*?\*/)
  | (?P<string>"(?:\\.|[^"\\\n])*")
  | (?P<char>'(?:\\.|[^'\\\n])+')
  | (?P<number>(?:0[xX][0-9a-fA-F]+|\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)[uUlLfF]*)
  | (?P<identifier>[A-Za-z_]\w*)
  | (?P<operator>>>=|<<=|\.\.\.|->|\+\+|--|<<|>>|<=|>=|==|!=|&&|\|\||\+=|-=|\*=|/=|%=|&=|\|=|\^=|::|[-+*/%=<>!&|^~?:.])
  | (?P<punct>[(){}\[\];,#])
  | (?P<other>.)
    """,
    re.VERBOSE | re.DOTALL,
)


@dataclass(frozen=True)
class Lexeme:
    text: str
    kind: str  # identifier, keyword, number, string, char, operator, punct, other
    line: int
    col: int


def lex(source: str) -> list[Lexeme]:
    """Split C-family source into lexemes with 1-based line/column."""
    out: list[Lexeme] = []
    line, line_start = 1, 0
    for m in _TOKEN_RE.finditer(source):
        kind = m.lastgroup
        text = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
            continue
        if kind in ("ws", "lcomment", "bcomment"):
            if kind == "bcomment" and "\n" in text:
                line += text.count("\n")
                line_start = m.start() + text.rfind("\n") + 1
            continue
        if kind == "identifier" and text in KEYWORDS:
            kind = "keyword"
        out.append(Lexeme(text, kind, line, m.start() - line_start + 1))
    return out


# -- identifier analysis -----------------------------------------------------


@dataclass
class IdentifierSpan:
    name: str
    token_indices: list[int]
    kind: str
    def_sites: list[int] = field(default_factory=list)
    use_sites: list[int] = field(default_factory=list)
    scope: str = "global"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "scope": self.scope,
            "token_indices": list(self.token_indices),
            "def_sites": list(self.def_sites),
            "use_sites": list(self.use_sites),
        }


@dataclass
class _Occurrence:
    index: int
    name: str
    line: int
    kind: str
    scope: str
    is_def: bool = False
    is_use: bool = False


@dataclass
class Analysis:
    """Per-occurrence view produced by :func:`analyze`."""

    lexemes: list[Lexeme]
    occurrences: list[_Occurrence]
    fallback: bool
    # lexeme indices of statement terminators; pending defs commit there
    commits: list[int]


def _balanced(lexemes: list[Lexeme]) -> bool:
    pairs = {")": "(", "]": "[", "}": "{"}
    stack = []
    for lx in lexemes:
        if lx.text in "([{" and lx.kind == "punct":
            stack.append(lx.text)
        elif lx.text in pairs and lx.kind == "punct":
            if not stack or stack.pop() != pairs[lx.text]:
                return False
    return not stack


def _match_forward(lexemes: list[Lexeme], i: int) -> int:
    """Index of the bracket closing the one at ``i``."""
    open_, close = lexemes[i].text, {"(": ")", "[": "]", "{": "}"}[lexemes[i].text]
    depth = 0
    for j in range(i, len(lexemes)):
        t = lexemes[j].text
        if t == open_ and lexemes[j].kind == "punct":
            depth += 1
        elif t == close and lexemes[j].kind == "punct":
            depth -= 1
            if depth == 0:
                return j
    return len(lexemes) - 1


class _Walker:
    """Single pass over balanced lexemes, tracking scopes and declarations."""

    def __init__(self, lexemes: list[Lexeme]):
        self.lx = lexemes
        self.n = len(lexemes)
        directive_lines = {l.line for l in lexemes if l.text == "#" and l.col == _first_col(lexemes, l.line)}
        self.skip = {i for i, l in enumerate(lexemes) if l.line in directive_lines}
        self.types = set()
        self.scopes: list[dict[str, tuple[str, str]]] = [{}]
        self.scope_ids = ["global"]
        self.scope_counter = 0
        self.occ: dict[int, _Occurrence] = {}
        self.commit_points: list[int] = []

    # scope helpers
    def push(self):
        self.scope_counter += 1
        self.scopes.append({})
        self.scope_ids.append(f"s{self.scope_counter}")

    def pop(self):
        if len(self.scopes) > 1:
            self.scopes.pop()
            self.scope_ids.pop()

    def declare(self, name: str, kind: str) -> str:
        sid = self.scope_ids[-1]
        self.scopes[-1][name] = (sid, kind)
        return sid

    def resolve(self, name: str):
        for scope in reversed(self.scopes):
            if name in scope:
                return scope[name]
        return None

    def record(self, i: int, kind: str, scope: str, is_def=False, is_use=False):
        l = self.lx[i]
        self.occ[i] = _Occurrence(i, l.text, l.line, kind, scope, is_def, is_use)

    # declaration parsing
    def type_prefix_end(self, i: int) -> int:
        """If a declaration type-specifier sequence starts at ``i``, return the
        index just past it, else -1."""
        j = i
        saw_type = False
        while j < self.n:
            l = self.lx[j]
            if l.kind == "keyword" and l.text in TAG_KEYWORDS:
                if j + 1 < self.n and self.lx[j + 1].kind == "identifier":
                    self.types.add(self.lx[j + 1].text)
                    self.record(j + 1, "type-name", "global")
                    j += 2
                else:
                    j += 1
                if j < self.n and self.lx[j].text == "{":
                    return -1  # struct body definition; treated as a block
                saw_type = True
                continue
            if l.kind == "keyword" and (l.text in BUILTIN_TYPES or l.text in QUALIFIERS):
                saw_type = saw_type or l.text in BUILTIN_TYPES
                j += 1
                continue
            if l.kind == "identifier" and not saw_type:
                # IDENT followed by a declarator start: IDENT IDENT or IDENT * ... IDENT
                k = j + 1
                while k < self.n and self.lx[k].text == "*":
                    k += 1
                known = l.text in self.types or l.text.endswith("_t")
                if k < self.n and self.lx[k].kind == "identifier" and (known or k == j + 1 or self._decl_follow(k)):
                    if self.resolve(l.text) is not None and not known:
                        return -1
                    self.types.add(l.text)
                    self.record(j, "type-name", "global")
                    saw_type = True
                    j += 1
                    continue
            break
        if saw_type or (j > i and any(self.lx[x].text in QUALIFIERS for x in range(i, j))):
            return j
        return -1

    def _decl_follow(self, k: int) -> bool:
        return k + 1 < self.n and self.lx[k + 1].text in ("=", ";", ",", "[")

    def parse_declarators(self, j: int, kind: str, stop: set[str]) -> int:
        """Parse ``*name[...] = init, ...`` starting at ``j``; return the index of
        the stop token."""
        while j < self.n:
            while j < self.n and self.lx[j].text in ("*", "&") or (j < self.n and self.lx[j].text in QUALIFIERS):
                j += 1
            if j >= self.n:
                return j
            l = self.lx[j]
            if l.kind == "identifier":
                sid = self.declare(l.text, kind)
                self.record(j, kind, sid, is_def=True)
                j += 1
            # array dims, initialisers: walk expression tokens until , or stop at depth 0
            while j < self.n:
                t = self.lx[j].text
                if t in stop or t == ",":
                    break
                if t in ("(", "[", "{") and self.lx[j].kind == "punct":
                    end = _match_forward(self.lx, j)
                    self.walk_expr(j + 1, end)
                    j = end + 1
                    continue
                self.walk_expr(j, j + 1)
                j += 1
            if j < self.n and self.lx[j].text == ",":
                j += 1
                continue
            return j
        return j

    def walk_expr(self, start: int, end: int):
        """Classify identifiers in lexemes[start:end] that are not declarations."""
        for i in range(start, end):
            if i in self.occ or i in self.skip:
                continue
            l = self.lx[i]
            if l.kind != "identifier":
                continue
            prev = self.lx[i - 1].text if i > 0 else ""
            nxt = self.lx[i + 1].text if i + 1 < self.n else ""
            if prev in (".", "->"):
                self.record(i, "field", "global", is_use=True)
                continue
            resolved = self.resolve(l.text)
            if nxt == "(" and resolved is None:
                self.record(i, "function-name", "global", is_use=True)
                continue
            if resolved is None and (l.text in self.types or (nxt == ")" and prev == "(" and l.text.endswith("_t"))):
                self.record(i, "type-name", "global")
                continue
            sid, kind = resolved if resolved is not None else ("global", "other")
            is_def = nxt in ASSIGN_OPS
            is_use = nxt != "=" or nxt in ("++", "--")
            if nxt in ("++", "--") or prev in ("++", "--"):
                is_def = is_use = True
            self.record(i, kind, sid, is_def=is_def, is_use=is_use)

    def run(self):
        i = 0
        pending_params: list[int] | None = None
        func_depth: list[int] = []
        stmt_start = True
        while i < self.n:
            if i in self.skip:
                i += 1
                continue
            l = self.lx[i]
            t = l.text
            if t == "{" and l.kind == "punct":
                self.push()
                if pending_params is not None:
                    for p in pending_params:
                        sid = self.declare(self.lx[p].text, "parameter")
                        self.record(p, "parameter", sid, is_def=True)
                    pending_params = None
                self.commit_points.append(i)
                i += 1
                stmt_start = True
                continue
            if t == "}" and l.kind == "punct":
                self.pop()
                if func_depth and func_depth[-1] == len(self.scopes):
                    func_depth.pop()
                self.commit_points.append(i)
                i += 1
                stmt_start = True
                continue
            if t == ";":
                self.commit_points.append(i)
                i += 1
                stmt_start = True
                continue
            if stmt_start:
                # for (init; ...) declarations
                if t == "for" and i + 1 < self.n and self.lx[i + 1].text == "(":
                    end = _match_forward(self.lx, i + 1)
                    self._statement_range(i + 2, end)
                    i = end + 1
                    continue
                j = self.type_prefix_end(i)
                if j > 0:
                    k = j
                    while k < self.n and self.lx[k].text in ("*", "&"):
                        k += 1
                    if (
                        k + 1 < self.n
                        and self.lx[k].kind == "identifier"
                        and self.lx[k + 1].text == "("
                        and len(self.scopes) == 1
                    ):
                        close = _match_forward(self.lx, k + 1)
                        after = self.lx[close + 1].text if close + 1 < self.n else ""
                        self.record(k, "function-name", "global")
                        if after == "{":
                            pending_params = self._params(k + 2, close)
                            func_depth.append(len(self.scopes))
                        else:
                            self._params(k + 2, close)  # prototype: nothing declared
                        i = close + 1
                        stmt_start = False
                        continue
                    i = self.parse_declarators(j, "local-variable", {";", ")", "{"})
                    stmt_start = False
                    continue
            stmt_start = False
            if l.kind == "punct" and t in ("(", "["):
                end = _match_forward(self.lx, i)
                # conditions of if/while/switch and call arguments
                self._statement_range(i + 1, end)
                i = end + 1
                continue
            self.walk_expr(i, i + 1)
            i += 1

    def _statement_range(self, start: int, end: int):
        """Walk a bracketed range that may hold declarations (for-init) and
        nested brackets."""
        j = start
        sub_start = True
        while j < end:
            t = self.lx[j].text
            if t == ";":
                self.commit_points.append(j)
                sub_start = True
                j += 1
                continue
            if sub_start:
                k = self.type_prefix_end(j)
                if k > 0:
                    j = self.parse_declarators(k, "local-variable", {";", ")"})
                    sub_start = False
                    continue
            sub_start = False
            self.walk_expr(j, j + 1)
            j += 1

    def _params(self, start: int, end: int) -> list[int]:
        """Parameter name positions between parentheses."""
        names = []
        depth = 0
        last_ident = None
        for j in range(start, end + 1):
            t = self.lx[j].text
            if t in ("(", "["):
                depth += 1
            elif t in (")", "]"):
                if depth == 0 and j == end:
                    pass
                else:
                    depth -= 1
                    continue
            if j == end or (t == "," and depth == 0):
                if last_ident is not None:
                    names.append(last_ident)
                last_ident = None
                continue
            if depth == 0 and self.lx[j].kind == "identifier":
                if last_ident is not None:
                    self.types.add(self.lx[last_ident].text)
                    self.record(last_ident, "type-name", "global")
                last_ident = j
        for j in range(start, end):
            if self.lx[j].kind == "identifier" and j not in self.occ and j not in names:
                self.record(j, "type-name", "global")
        return names


def _first_col(lexemes: list[Lexeme], line: int) -> int:
    for l in lexemes:
        if l.line == line:
            return l.col
    return 0


def analyze(source: str) -> Analysis:
    lexemes = lex(source)
    if not _balanced(lexemes):
        return _lexical_fallback(lexemes)
    w = _Walker(lexemes)
    w.run()
    occurrences = [w.occ[i] for i in sorted(w.occ)]
    commits = sorted(set(w.commit_points))
    return Analysis(lexemes, occurrences, False, commits)


def _lexical_fallback(lexemes: list[Lexeme]) -> Analysis:
    occ = []
    commits = []
    for i, l in enumerate(lexemes):
        if l.text in (";", "{", "}"):
            commits.append(i)
        if l.kind != "identifier":
            continue
        nxt = lexemes[i + 1].text if i + 1 < len(lexemes) else ""
        is_def = nxt in ASSIGN_OPS
        occ.append(_Occurrence(i, l.text, l.line, "other", "global", is_def, nxt != "="))
    return Analysis(lexemes, occ, True, commits)


def _spans_from(analysis: Analysis) -> list[IdentifierSpan]:
    groups: dict[tuple[str, str], IdentifierSpan] = {}
    for o in analysis.occurrences:
        key = (o.name, o.scope if o.kind not in ("function-name", "type-name", "field") else o.kind)
        span = groups.get(key)
        if span is None:
            span = groups[key] = IdentifierSpan(o.name, [], o.kind, scope=o.scope)
        span.token_indices.append(o.index)
        if o.is_def and o.line not in span.def_sites:
            span.def_sites.append(o.line)
        if o.is_use and o.line not in span.use_sites:
            span.use_sites.append(o.line)
    for span in groups.values():
        if span.kind in ("function-name", "type-name", "field"):
            span.def_sites, span.use_sites = [], []
        span.def_sites.sort()
        span.use_sites.sort()
    return sorted(groups.values(), key=lambda s: s.token_indices[0])


def extract_identifiers(source: str) -> list[IdentifierSpan]:
    """Group every identifier occurrence by (name, scope) and label its kind.

    ``token_indices`` index into ``lex(source)``.
    """
    return _spans_from(analyze(source))


# -- def-use -----------------------------------------------------------------


@dataclass
class DefUseGraph:
    nodes: set[int]
    edges: set[tuple[int, int, str, str]]  # (def_line, use_line, name, scope)

    @property
    def chains(self) -> dict[tuple[str, str], list[tuple[int, int]]]:
        out: dict[tuple[str, str], list[tuple[int, int]]] = {}
        for d, u, name, scope in sorted(self.edges):
            out.setdefault((name, scope), []).append((d, u))
        return out

    def line_edges(self) -> set[tuple[int, int]]:
        return {(d, u) for d, u, _, _ in self.edges}

    def to_dict(self) -> dict:
        return {
            "nodes": sorted(self.nodes),
            "edges": [{"def": d, "use": u, "name": n, "scope": s} for d, u, n, s in sorted(self.edges)],
        }


_VAR_KINDS = ("local-variable", "parameter", "other")


def build_def_use(source: str, analysis: Analysis | None = None) -> DefUseGraph:
    """Textual reaching definitions inside each scope.

    Uses in a statement see the definitions committed before that statement;
    definitions made by the statement take effect at its terminator.
    """
    analysis = analysis or analyze(source)
    nodes = {l.line for l in analysis.lexemes}
    edges: set[tuple[int, int, str, str]] = set()
    current: dict[tuple[str, str], int] = {}
    pending: dict[tuple[str, str], int] = {}
    commits = analysis.commits
    ci = 0
    for o in analysis.occurrences:
        while ci < len(commits) and commits[ci] < o.index:
            current.update(pending)
            pending.clear()
            ci += 1
        if o.kind not in _VAR_KINDS:
            continue
        key = (o.name, o.scope)
        if o.is_use and key in current:
            edges.add((current[key], o.line, o.name, o.scope))
        if o.is_def:
            pending[key] = o.line
    return DefUseGraph(nodes, edges)


# -- tokenised functions -------------------------------------------------------


@dataclass
class TokenizedFunction:
    sample_id: str
    tokens: list[int]
    token_spans: list[tuple[int, int]]
    token_kinds: list[str]
    line_map: dict[int, list[int]]
    identifier_spans: list[IdentifierSpan]
    cwe_label: int = -1
    vuln_lines: set[int] = field(default_factory=set)
    truncated: bool = False
    n_source_tokens: int = 0
    fallback: bool = False

    @property
    def n_lines(self) -> int:
        return max(self.line_map) if self.line_map else 0


CLS_POSITION = 0


def tokenize(
    source: str,
    vocab,
    max_len: int = 512,
    n_lines: int = 256,
    tokens_per_line: int = 64,
    sample_id: str = "",
    analysis: Analysis | None = None,
) -> TokenizedFunction:
    """Lex ``source`` into vocabulary ids with a leading classification token.

    Position 0 holds CLS; source token ``k`` sits at position ``k + 1``. The
    sequence (CLS included) is truncated to ``max_len``. ``line_map`` keeps
    lines ``1..n_lines`` and at most ``tokens_per_line`` positions each.
    """
    if not source or not source.strip():
        raise ValueError("cannot tokenize empty source")
    analysis = analysis or analyze(source)
    lexemes = analysis.lexemes
    if not lexemes:
        raise ValueError("source contains no tokens")
    kept = lexemes[: max_len - 1]
    tokens = [vocab.cls_id] + [vocab.lookup(l.text) for l in kept]
    spans = [(0, 0)] + [(l.line, l.col) for l in kept]
    kinds = ["cls"] + [l.kind for l in kept]
    line_map: dict[int, list[int]] = {}
    for pos, l in enumerate(kept, start=1):
        if l.line > n_lines:
            continue
        bucket = line_map.setdefault(l.line, [])
        if len(bucket) < tokens_per_line:
            bucket.append(pos)
    spans_out = []
    for span in _spans_from(analysis):
        idx = [k + 1 for k in span.token_indices if k + 1 < len(tokens)]
        if idx:
            spans_out.append(
                IdentifierSpan(span.name, idx, span.kind, list(span.def_sites), list(span.use_sites), span.scope)
            )
    return TokenizedFunction(
        sample_id=sample_id,
        tokens=tokens,
        token_spans=spans,
        token_kinds=kinds,
        line_map=line_map,
        identifier_spans=spans_out,
        truncated=len(lexemes) > len(kept),
        n_source_tokens=len(lexemes),
        fallback=analysis.fallback,
    )


ELIGIBLE_KINDS = frozenset({"local-variable", "parameter"})


def filter_report(tf: TokenizedFunction, graph: DefUseGraph) -> list[dict]:
    """Per identifier: whether it is a perturbation target and why not."""
    rows = []
    for span in tf.identifier_spans:
        reasons = []
        if span.kind not in ELIGIBLE_KINDS:
            reasons.append(f"kind:{span.kind}")
        if span.name in KEYWORDS:
            reasons.append("keyword")
        sites = set(span.def_sites) | set(span.use_sites)
        if not sites:
            reasons.append("no-def-use-sites")
        elif not sites <= graph.nodes:
            reasons.append("sites-outside-function")
        if any(tf.token_kinds[i] != "identifier" for i in span.token_indices):
            reasons.append("non-identifier-token")
        rows.append({"name": span.name, "scope": span.scope, "kind": span.kind, "selected": not reasons, "rejected_by": reasons})
    return rows


def select_perturbation_targets(tf: TokenizedFunction, graph: DefUseGraph) -> list[int]:
    """Token positions of locals and parameters whose def/use sites all lie
    inside the analysed function."""
    out: set[int] = set()
    for span, row in zip(tf.identifier_spans, filter_report(tf, graph)):
        if row["selected"]:
            out.update(span.token_indices)
    return sorted(out)


def build_pdg_attention_mask(tf: TokenizedFunction, graph: DefUseGraph) -> np.ndarray:
    """Boolean [T, T] mask: same line, def-use-connected lines, or CLS."""
    T = len(tf.tokens)
    lines = np.array([s[0] for s in tf.token_spans])
    mask = lines[:, None] == lines[None, :]
    mask &= lines[:, None] > 0
    linked = graph.line_edges()
    if linked:
        present = sorted(set(lines[1:].tolist()))
        idx = {ln: np.flatnonzero(lines == ln) for ln in present}
        for d, u in linked:
            if d in idx and u in idx and d != u:
                mask[np.ix_(idx[d], idx[u])] = True
                mask[np.ix_(idx[u], idx[d])] = True
    mask[CLS_POSITION, :] = True
    mask[:, CLS_POSITION] = True
    assert mask.shape == (T, T)
    return mask
