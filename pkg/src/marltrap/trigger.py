"""Spatiotemporal behavior trigger: constraint DSL, matcher, attacker driver.

A trigger couples a window of spatial constraints between the backdoored
agent's unit (`b`) and one attacker-controlled enemy unit (`e`) with a fixed
action script the attacker performs over that window.  Trigger files are
line-oriented:

    trigger v1
    window 5
    at -4: 8.8 < ex - bx < 9.0
    at -4: -0.1 < ey - by < 0.1
    name: at -3: ex - bx >= 6.1
    formula: name and ...        # optional; default is the conjunction
    actions: [west, east, west, east, stop]

Constraint lines bind at a time offset in [-(window-1), 0] relative to the
window end.  Expressions combine the four position variables ex, ey, bx, by
with + - * / (usual precedence, no parentheses); the interval form
`lo < expr < hi` desugars into a conjunction of two strict atoms.  A
`formula:` line may combine *named* constraints with `and`, `or` and
`ite(c, t, f)`; without one, all constraints are conjoined in file order.
Action names come from the arena vocabulary (stop, north, south, east,
west, noop, attackN).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .arena import Arena, WorldState, action_from_name, action_name

VERSION_HEADER = "trigger v1"

RELATORS = (">=", "<=", "==", "!=", ">", "<")


class TriggerParseError(ValueError):
    def __init__(self, message: str, line: int, col: int = 1):
        self.line = line
        self.col = col
        super().__init__(f"line {line}, col {col}: {message}")


# --------------------------------------------------------------------------
# expressions and atoms


@dataclass(frozen=True)
class Var:
    unit: str  # 'e' | 'b'
    axis: str  # 'x' | 'y'


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * /
    left: "Expr"
    right: "Expr"


Expr = Union[Var, BinOp]


def eval_expr(expr: Expr, b_pos, e_pos) -> Optional[float]:
    """Returns None when undefined (division by zero)."""
    if isinstance(expr, Var):
        pos = e_pos if expr.unit == "e" else b_pos
        return float(pos[0] if expr.axis == "x" else pos[1])
    lhs = eval_expr(expr.left, b_pos, e_pos)
    rhs = eval_expr(expr.right, b_pos, e_pos)
    if lhs is None or rhs is None:
        return None
    if expr.op == "+":
        return lhs + rhs
    if expr.op == "-":
        return lhs - rhs
    if expr.op == "*":
        return lhs * rhs
    if rhs == 0.0:
        return None
    return lhs / rhs


def print_expr(expr: Expr) -> str:
    if isinstance(expr, Var):
        return f"{expr.unit}{expr.axis}"
    return f"{print_expr(expr.left)} {expr.op} {print_expr(expr.right)}"


@dataclass(frozen=True)
class SpatialAtom:
    """One relational constraint g(b, e) ~ C at a window time offset."""

    time_offset: int
    expr: Expr
    relator: str
    constant: float


def eval_atom(atom: SpatialAtom, b_pos, e_pos) -> bool:
    """Pure relation check; a missing unit or undefined expression is False."""
    if b_pos is None or e_pos is None:
        return False
    value = eval_expr(atom.expr, b_pos, e_pos)
    if value is None:
        return False
    c = atom.constant
    if atom.relator == ">":
        return value > c
    if atom.relator == ">=":
        return value >= c
    if atom.relator == "<":
        return value < c
    if atom.relator == "<=":
        return value <= c
    if atom.relator == "==":
        return value == c
    return value != c


# --------------------------------------------------------------------------
# formulas


@dataclass(frozen=True)
class Atom:
    atom: SpatialAtom


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Ite:
    cond: "Formula"
    then: "Formula"
    other: "Formula"


Formula = Union[Atom, And, Or, Ite]


@dataclass(frozen=True)
class Constraint:
    """One constraint line: a simple atom or an interval pair."""

    time_offset: int
    atoms: tuple[SpatialAtom, ...]
    name: Optional[str] = None
    interval: Optional[tuple[float, float]] = None  # (lo, hi) for the sugar form

    def as_formula(self) -> Formula:
        f: Formula = Atom(self.atoms[0])
        for a in self.atoms[1:]:
            f = And(f, Atom(a))
        return f


def _eval_window(f: Formula, window: list, n_window: int) -> bool:
    if isinstance(f, Atom):
        idx = n_window - 1 + f.atom.time_offset
        b_pos, e_pos = window[idx]
        return eval_atom(f.atom, b_pos, e_pos)
    if isinstance(f, And):
        return _eval_window(f.left, window, n_window) and _eval_window(f.right, window, n_window)
    if isinstance(f, Or):
        return _eval_window(f.left, window, n_window) or _eval_window(f.right, window, n_window)
    if _eval_window(f.cond, window, n_window):
        return _eval_window(f.then, window, n_window)
    return _eval_window(f.other, window, n_window)


# --------------------------------------------------------------------------
# trigger spec


@dataclass(frozen=True)
class TriggerSpec:
    window: int
    constraints: tuple[Constraint, ...]
    actions: tuple[int, ...]
    explicit_formula: Optional[Formula] = None
    formula_text: Optional[str] = None  # surface form for round-trip printing

    @property
    def formula(self) -> Formula:
        if self.explicit_formula is not None:
            return self.explicit_formula
        f: Formula = self.constraints[0].as_formula()
        for c in self.constraints[1:]:
            f = And(f, c.as_formula())
        return f

    @property
    def anchor(self) -> Constraint:
        """The first constraint at the earliest time offset, used to scout
        candidate enemies before committing the episode's one activation."""
        earliest = min(c.time_offset for c in self.constraints)
        for c in self.constraints:
            if c.time_offset == earliest:
                return c
        raise AssertionError("unreachable")


def eval_formula(spec: TriggerSpec, window: list) -> bool:
    """Evaluate the trigger formula over `window`, a list of (b_pos, e_pos)
    pairs covering exactly the trigger window (last entry = offset 0)."""
    if len(window) != spec.window:
        raise ValueError(f"window length {len(window)} != {spec.window}")
    return _eval_window(spec.formula, window, spec.window)


def match_trajectory(spec: TriggerSpec, pairs: list) -> list[int]:
    """All indices t such that the window of (b_pos, e_pos) pairs ending at t
    satisfies the formula.  Offline ground truth for evaluation."""
    hits = []
    for t in range(spec.window - 1, len(pairs)):
        if eval_formula(spec, list(pairs[t - spec.window + 1: t + 1])):
            hits.append(t)
    return hits


# --------------------------------------------------------------------------
# parser

_NAME_RE = re.compile(r"^[A-Za-z_]\w*$")
_VAR_RE = re.compile(r"^[eb][xy]$")
_NUM_RE = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?$")


def _tokenize_expr_side(text: str, line_no: int, col0: int) -> list[tuple[str, int]]:
    tokens = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        rest = text[i:]
        m = re.match(r"(>=|<=|==|!=|>|<)", rest)
        if m:
            tokens.append((m.group(0), col0 + i))
            i += len(m.group(0))
            continue
        m = re.match(r"([eb][xy])(?!\w)", rest)
        if m:
            tokens.append((m.group(0), col0 + i))
            i += len(m.group(0))
            continue
        m = re.match(r"(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?", rest)
        if m:
            tokens.append((m.group(0), col0 + i))
            i += len(m.group(0))
            continue
        if ch in "+-*/":
            tokens.append((ch, col0 + i))
            i += 1
            continue
        raise TriggerParseError(f"unexpected character {ch!r}", line_no, col0 + i)
    return tokens


class _ExprParser:
    """Precedence-climbing parser over +-*/ with unary minus on numbers only."""

    def __init__(self, tokens: list[tuple[str, int]], line_no: int):
        self.tokens = tokens
        self.pos = 0
        self.line_no = line_no

    def peek(self):
        return self.tokens[self.pos][0] if self.pos < len(self.tokens) else None

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def err(self, msg):
        col = self.tokens[self.pos][1] if self.pos < len(self.tokens) else (
            self.tokens[-1][1] if self.tokens else 1
        )
        raise TriggerParseError(msg, self.line_no, col)

    def parse_number(self) -> float:
        sign = 1.0
        if self.peek() in ("+", "-"):
            sign = -1.0 if self.take()[0] == "-" else 1.0
        if self.peek() is None or not _NUM_RE.match(self.peek()):
            self.err("expected a number")
        return sign * float(self.take()[0])

    def parse_primary(self) -> Expr:
        tok = self.peek()
        if tok is None:
            self.err("expected a variable")
        if _VAR_RE.match(tok):
            self.take()
            return Var(unit=tok[0], axis=tok[1])
        self.err(f"expected one of ex, ey, bx, by; got {tok!r}")

    def parse_expr(self, min_prec=0) -> Expr:
        prec = {"+": 1, "-": 1, "*": 2, "/": 2}
        lhs = self.parse_primary()
        while self.peek() in prec and prec[self.peek()] >= min_prec:
            op = self.take()[0]
            rhs = self.parse_expr(prec[op] + 1)
            lhs = BinOp(op=op, left=lhs, right=rhs)
        return lhs


class _FormulaParser:
    """`or` < `and` < primary(name | ite(f,f,f) | (f))."""

    TOKEN_RE = re.compile(r"\s*(and\b|or\b|ite\b|[(),]|[A-Za-z_]\w*)")

    def __init__(self, text: str, line_no: int, names: dict):
        self.line_no = line_no
        self.names = names
        self.tokens = []
        i = 0
        while i < len(text):
            if text[i].isspace():
                i += 1
                continue
            m = self.TOKEN_RE.match(text, i)
            if not m or m.start(1) != i:
                raise TriggerParseError(f"bad formula token near {text[i:]!r}", line_no, i + 1)
            self.tokens.append((m.group(1), i + 1))
            i = m.end(1)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos][0] if self.pos < len(self.tokens) else None

    def take(self, expect=None):
        if self.pos >= len(self.tokens):
            raise TriggerParseError(f"unexpected end of formula (wanted {expect})", self.line_no)
        tok, col = self.tokens[self.pos]
        if expect is not None and tok != expect:
            raise TriggerParseError(f"expected {expect!r}, got {tok!r}", self.line_no, col)
        self.pos += 1
        return tok, col

    def parse(self) -> Formula:
        f = self.parse_or()
        if self.pos != len(self.tokens):
            tok, col = self.tokens[self.pos]
            raise TriggerParseError(f"trailing formula token {tok!r}", self.line_no, col)
        return f

    def parse_or(self) -> Formula:
        lhs = self.parse_and()
        while self.peek() == "or":
            self.take()
            lhs = Or(lhs, self.parse_and())
        return lhs

    def parse_and(self) -> Formula:
        lhs = self.parse_primary()
        while self.peek() == "and":
            self.take()
            lhs = And(lhs, self.parse_primary())
        return lhs

    def parse_primary(self) -> Formula:
        tok = self.peek()
        if tok == "ite":
            self.take()
            self.take("(")
            cond = self.parse_or()
            self.take(",")
            then = self.parse_or()
            self.take(",")
            other = self.parse_or()
            self.take(")")
            return Ite(cond, then, other)
        if tok == "(":
            self.take()
            f = self.parse_or()
            self.take(")")
            return f
        name, col = self.take("a named constraint" if tok is None else None)
        if name not in self.names:
            raise TriggerParseError(f"unknown constraint name {name!r}", self.line_no, col)
        return self.names[name].as_formula()


def parse_trigger(text: str) -> TriggerSpec:
    lines = text.splitlines()
    window: Optional[int] = None
    constraints: list[Constraint] = []
    actions: Optional[tuple[int, ...]] = None
    formula_text: Optional[str] = None
    formula_line = 0
    names: dict[str, Constraint] = {}
    saw_header = False

    for line_no, raw in enumerate(lines, start=1):
        content = raw.split("#", 1)[0].rstrip()
        if not content.strip():
            continue
        stripped = content.strip()
        if not saw_header:
            if stripped != VERSION_HEADER:
                raise TriggerParseError(f"missing version header {VERSION_HEADER!r}", line_no)
            saw_header = True
            continue
        if stripped.startswith("window"):
            if window is not None:
                raise TriggerParseError("duplicate window line", line_no)
            parts = stripped.split()
            if len(parts) != 2 or not parts[1].isdigit() or int(parts[1]) < 1:
                raise TriggerParseError("window expects a positive integer", line_no)
            window = int(parts[1])
            continue
        if stripped.startswith("actions"):
            if actions is not None:
                raise TriggerParseError("duplicate actions line", line_no)
            m = re.match(r"actions\s*:\s*\[(.*)\]\s*$", stripped)
            if not m:
                raise TriggerParseError("actions line must look like actions: [a, b, ...]", line_no)
            items = [s.strip() for s in m.group(1).split(",") if s.strip()]
            if not items:
                raise TriggerParseError("empty actions list", line_no)
            try:
                actions = tuple(action_from_name(s) for s in items)
            except Exception:
                raise TriggerParseError("unknown action name in list", line_no)
            continue
        if stripped.startswith("formula"):
            if formula_text is not None:
                raise TriggerParseError("duplicate formula line", line_no)
            m = re.match(r"formula\s*:\s*(.+)$", stripped)
            if not m:
                raise TriggerParseError("empty formula line", line_no)
            formula_text = m.group(1).strip()
            formula_line = line_no
            continue
        # constraint line, optionally "name: at -k: ..."
        name = None
        body = stripped
        if not stripped.startswith("at"):
            head, sep, rest = stripped.partition(":")
            if not sep or not _NAME_RE.match(head.strip()):
                raise TriggerParseError(f"unrecognized line {stripped!r}", line_no)
            name = head.strip()
            body = rest.strip()
        m = re.match(r"at\s+(-?\d+)\s*:\s*(.+)$", body)
        if not m:
            raise TriggerParseError("constraint line must look like `at -k: <constraint>`", line_no)
        if window is None:
            raise TriggerParseError("window must be declared before constraints", line_no)
        offset = int(m.group(1))
        if not -(window - 1) <= offset <= 0:
            raise TriggerParseError(
                f"time offset {offset} outside window [-{window - 1}, 0]", line_no
            )
        col0 = content.index(m.group(2), content.index("at"))
        tokens = _tokenize_expr_side(m.group(2), line_no, col0 + 1)
        constraint = _parse_constraint(tokens, offset, name, line_no)
        if name is not None:
            if name in names:
                raise TriggerParseError(f"duplicate constraint name {name!r}", line_no)
            names[name] = constraint
        constraints.append(constraint)

    last = len(lines) or 1
    if not saw_header:
        raise TriggerParseError(f"missing version header {VERSION_HEADER!r}", 1)
    if window is None:
        raise TriggerParseError("missing window line", last)
    if not constraints:
        raise TriggerParseError("no constraints given", last)
    if actions is None:
        raise TriggerParseError("missing actions line", last)
    if len(actions) != window:
        raise TriggerParseError(
            f"actions list has {len(actions)} entries but window is {window}", last
        )
    explicit = None
    if formula_text is not None:
        explicit = _FormulaParser(formula_text, formula_line, names).parse()
    return TriggerSpec(
        window=window,
        constraints=tuple(constraints),
        actions=actions,
        explicit_formula=explicit,
        formula_text=formula_text,
    )


def _parse_constraint(tokens, offset, name, line_no) -> Constraint:
    # interval sugar starts with a (possibly signed) number
    starts_numeric = tokens and (
        _NUM_RE.match(tokens[0][0])
        or (tokens[0][0] in "+-" and len(tokens) > 1 and _NUM_RE.match(tokens[1][0]))
    )
    p = _ExprParser(tokens, line_no)
    if starts_numeric:
        lo = p.parse_number()
        _expect_relator(p, "<")
        expr = p.parse_expr()
        _expect_relator(p, "<")
        hi = p.parse_number()
        if p.peek() is not None:
            p.err("trailing tokens after interval constraint")
        if not lo < hi:
            raise TriggerParseError(f"empty interval ({lo}, {hi})", line_no)
        atoms = (
            SpatialAtom(offset, expr, ">", lo),
            SpatialAtom(offset, expr, "<", hi),
        )
        return Constraint(time_offset=offset, atoms=atoms, name=name, interval=(lo, hi))
    expr = p.parse_expr()
    if p.peek() not in RELATORS:
        p.err("expected a relator (> >= < <= == !=)")
    relator = p.take()[0]
    const = p.parse_number()
    if p.peek() is not None:
        p.err("trailing tokens after constraint")
    return Constraint(
        time_offset=offset,
        atoms=(SpatialAtom(offset, expr, relator, const),),
        name=name,
    )


def _expect_relator(p: _ExprParser, relator: str):
    if p.peek() != relator:
        p.err(f"expected {relator!r} in interval constraint")
    p.take()


def _fmt(x: float) -> str:
    return repr(float(x))


def print_trigger(spec: TriggerSpec) -> str:
    """Canonical text form; parse(print(spec)) reproduces the spec."""
    out = [VERSION_HEADER, f"window {spec.window}"]
    for c in spec.constraints:
        prefix = f"{c.name}: " if c.name else ""
        if c.interval is not None:
            lo, hi = c.interval
            body = f"{_fmt(lo)} < {print_expr(c.atoms[0].expr)} < {_fmt(hi)}"
        else:
            a = c.atoms[0]
            body = f"{print_expr(a.expr)} {a.relator} {_fmt(a.constant)}"
        out.append(f"{prefix}at {c.time_offset}: {body}")
    if spec.formula_text is not None:
        out.append(f"formula: {spec.formula_text}")
    out.append("actions: [" + ", ".join(action_name(a) for a in spec.actions) + "]")
    return "\n".join(out) + "\n"


def load_trigger(path) -> TriggerSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trigger(fh.read())


def trigger_digest(spec: TriggerSpec) -> str:
    import hashlib

    return hashlib.sha256(print_trigger(spec).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# online driver


@dataclass
class MatchState:
    """Per-episode progress of the attacker's scripted performance."""

    active: bool = False
    controlled_enemy: Optional[int] = None
    steps_into_sequence: int = 0
    completion_step: Optional[int] = None
    attempted: bool = False
    window_states: list = field(default_factory=list)


def _unit_pos(state: WorldState, uid: int):
    return state.positions[uid].copy() if state.alive[uid] else None


def drive_attacker(
    spec: TriggerSpec,
    arena: Arena,
    state: WorldState,
    agent_k: int,
    match: MatchState,
) -> tuple[Optional[tuple[int, int]], MatchState]:
    """One per-step tick of the attacker controller.

    While inactive, scans living enemies visible to agent k's unit for one
    whose current position satisfies the anchor constraint; the lowest
    qualifying id is captured (one activation attempt per episode).  While
    active, emits the scripted actions one per step, recording the realized
    (b, e) positions; after the last action it checks the formula over the
    realized window and reports the completion step.  The capture aborts
    without completion if the controlled enemy dies mid-sequence.
    """
    cfg = arena.cfg
    if match.completion_step is not None or (match.attempted and not match.active):
        return None, match

    if not match.active:
        if not state.alive[agent_k]:
            return None, match
        b_pos = state.positions[agent_k]
        candidate = None
        for eid in state.enemy_ids():
            if not state.alive[eid]:
                continue
            if np.linalg.norm(state.positions[eid] - b_pos) > cfg.sight_radius:
                continue
            if all(eval_atom(a, b_pos, state.positions[eid]) for a in spec.anchor.atoms):
                candidate = eid
                break
        if candidate is None:
            return None, match
        match.active = True
        match.attempted = True
        match.controlled_enemy = candidate
        match.steps_into_sequence = 0
        match.window_states = []
    else:
        if match.controlled_enemy is None or not state.alive[match.controlled_enemy]:
            match.active = False
            return None, match

    eid = match.controlled_enemy
    match.window_states.append((_unit_pos(state, agent_k), _unit_pos(state, eid)))
    action = spec.actions[match.steps_into_sequence]
    if not arena.available_actions(state, eid)[action]:
        action = 1  # STOP fallback when the scripted action is masked
    match.steps_into_sequence += 1

    if match.steps_into_sequence == spec.window:
        if eval_formula(spec, match.window_states):
            match.completion_step = state.step_index
        match.active = False
    return (eid, action), match
