"""Cost accounting: MAC and cosine-evaluation counters, traces, reports.

MAC counts tally multiplies in linear ops (matmul m*k*n, depthwise conv
h*w*c*k^2, elementwise products, cosine 3d per pair). Softmax/exp terms
are excluded; the metric is a hardware-neutral relative cost, not a cycle
count. Counters attach to the tensor layer through `cost_scope`, so the
numbers measure exactly what ran.
"""

from __future__ import annotations

from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


class CostCounter:
    """Per-module tallies of MAC and cosine-evaluation counts."""

    def __init__(self):
        self.macs: dict[str, int] = defaultdict(int)
        self.cosines: dict[str, int] = defaultdict(int)
        self._module = "other"

    def add(self, kind: str, amount: int) -> None:
        if kind == "mac":
            self.macs[self._module] += int(amount)
        elif kind == "cosine":
            self.cosines[self._module] += int(amount)

    def total_macs(self) -> int:
        return sum(self.macs.values())

    def total_cosines(self) -> int:
        return sum(self.cosines.values())

    def snapshot(self) -> dict:
        return {
            "macs": dict(self.macs),
            "cosines": dict(self.cosines),
            "total_macs": self.total_macs(),
            "total_cosines": self.total_cosines(),
        }


@contextmanager
def relabel(module: str):
    """Switch the active counter's module label (no-op without a counter).

    Lets a nested path (the fine-alignment build inside an injection) bill
    its cost to its own module regardless of the call site.
    """
    sink = T._COST_SINK
    if sink is None:
        yield
        return
    prev = sink._module
    sink._module = module
    try:
        yield
    finally:
        sink._module = prev


@contextmanager
def cost_scope(counter: CostCounter | None, module: str):
    """Route tensor-level counts into `counter` under a module label."""
    if counter is None:
        yield
        return
    prev_sink = T._COST_SINK
    prev_module = counter._module
    T._COST_SINK = counter
    counter._module = module
    try:
        yield
    finally:
        counter._module = prev_module
        T._COST_SINK = prev_sink


@dataclass
class HierarchyCost:
    """Geometry and measured counts of one fine-alignment mask build."""

    n_rows_l1: int
    n_cols_l1: int
    active_l2: int
    active_l3: int
    cosines: int

    @property
    def full_cosines(self) -> int:
        # Materializing every level everywhere: I*J + 2I*2J + 4I*4J.
        ij = self.n_rows_l1 * self.n_cols_l1
        return 21 * ij

    @property
    def level1_cosines(self) -> int:
        return self.n_rows_l1 * self.n_cols_l1

    @property
    def ratio(self) -> float:
        return self.cosines / self.full_cosines


@dataclass
class Trace:
    """Everything a forward pass records: decisions (masks, selections,
    density flags) in execution order, cost counters, token counts and
    per-invocation fine-alignment geometry."""

    counter: CostCounter = field(default_factory=CostCounter)
    decisions: list = field(default_factory=list)
    token_counts: dict = field(default_factory=dict)
    hierarchy: list[HierarchyCost] = field(default_factory=list)
    injections: int = 0
    injection_macs: list[int] = field(default_factory=list)
    fine_macs: int = 0

    def record_decision(self, kind: str, value) -> None:
        self.decisions.append((kind, value))


class Replay:
    """Consumes a previous trace's decisions in order, freezing every mask,
    top-k selection and density flag while the continuous path recomputes."""

    def __init__(self, trace: Trace):
        self._decisions = trace.decisions
        self._pos = 0

    def next(self, kind: str):
        if self._pos >= len(self._decisions):
            raise IndexError("replay exhausted; structure diverged")
        got_kind, value = self._decisions[self._pos]
        if got_kind != kind:
            raise ValueError(f"replay expected {kind!r}, trace has {got_kind!r}")
        self._pos += 1
        return value


def decide(trace: Trace | None, replay: Replay | None, kind: str, compute):
    """Compute a discrete decision, or replay the recorded one."""
    if replay is not None:
        return replay.next(kind)
    value = compute()
    if trace is not None:
        trace.record_decision(kind, value)
    return value


@dataclass
class CostReport:
    per_module_macs: dict[str, int]
    per_module_cosines: dict[str, int]
    total_macs: int
    total_cosines: int
    token_counts: dict
    fine_cosines: int
    fine_cosines_uniform: int
    fine_ratio: float
    fine_macs: int
    injections: int
    injection_macs: list[int]

    def rows(self) -> list[tuple[str, str]]:
        out = [(k, str(v)) for k, v in sorted(self.per_module_macs.items())]
        out.append(("total_macs", str(self.total_macs)))
        out.append(("total_cosines", str(self.total_cosines)))
        out.append(("fine_cosines", str(self.fine_cosines)))
        out.append(("fine_cosines_uniform", str(self.fine_cosines_uniform)))
        out.append(("fine_ratio", f"{self.fine_ratio:.6f}"))
        return out


def cost_report(trace: Trace) -> CostReport:
    fine = sum(h.cosines for h in trace.hierarchy)
    uniform = sum(h.full_cosines for h in trace.hierarchy)
    return CostReport(
        per_module_macs=dict(trace.counter.macs),
        per_module_cosines=dict(trace.counter.cosines),
        total_macs=trace.counter.total_macs(),
        total_cosines=trace.counter.total_cosines(),
        token_counts=dict(trace.token_counts),
        fine_cosines=fine,
        fine_cosines_uniform=uniform,
        fine_ratio=(fine / uniform) if uniform else 0.0,
        fine_macs=trace.fine_macs,
        injections=trace.injections,
        injection_macs=list(trace.injection_macs),
    )


def cosine_matrix(a: np.ndarray, b: np.ndarray, counter: CostCounter | None, module: str) -> np.ndarray:
    """Vectorized pairwise cosine similarity with zero rows mapping to 0.

    Used for mask construction only (constant w.r.t. gradients), so it
    works on raw arrays and bills its cost explicitly.
    """
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.sqrt(np.sum(b * b, axis=1))
    sa = np.where(na == 0.0, 1.0, na)
    sb = np.where(nb == 0.0, 1.0, nb)
    sims = (a / sa[:, None]) @ (b / sb[:, None]).T
    sims[na == 0.0, :] = 0.0
    sims[:, nb == 0.0] = 0.0
    np.clip(sims, -1.0, 1.0, out=sims)
    if counter is not None:
        with cost_scope(counter, module):
            T._count("mac", 3 * a.shape[1] * a.shape[0] * b.shape[0])
            T._count("cosine", a.shape[0] * b.shape[0])
    return sims
