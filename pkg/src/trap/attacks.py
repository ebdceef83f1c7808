"""Momentum sign-gradient attacks with feature guidance and affine input augmentation.

:func:`run_trap` runs the two-phase procedure: ``t1`` steps of cross-entropy
ascent (the baseline phase), then a reset to the benign image and ``T - t1``
steps ascending a guided intermediate-feature loss whose guidance vector is
an exponential moving average of recent adversarial features. Every
gradient is taken through a randomly drawn multi-form affine warp of the
input with probability ``p``. Presets recover MI-FGSM, AI-MI-FGSM, ILA and
DG-ILA as special cases.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from trap import affine, engine, zoo

PRESETS = ("mi_fgsm", "ai_mi_fgsm", "ila", "dg_ila", "trap")


class GuidanceGapError(ValueError):
    """The guidance vector coincides with the benign feature for some item."""


@dataclass(frozen=True)
class AttackConfig:
    epsilon_255: float = 16
    T: int = 10
    t1: int = 4
    mu: float = 1.0
    p: float = 0.9
    beta: float = 0.8
    gamma: float = 0.8
    tap: str | None = None
    ranges: affine.RangeTable = affine.DEFAULT_RANGES
    seed: int = 0
    transform_enabled: bool = True
    per_batch_transform: bool = False
    order: tuple = affine.DEFAULT_ORDER

    def __post_init__(self):
        if not 0 < self.t1 <= self.T:
            raise ValueError(f"need 0 < t1 <= T, got t1={self.t1}, T={self.T}")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if not 0 <= self.p <= 1 or not 0 <= self.beta <= 1:
            raise ValueError("p and beta must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.epsilon_255 <= 0:
            raise ValueError("epsilon_255 must be positive")
        if set(self.order) != set(affine.KINDS) or len(self.order) != 4:
            raise ValueError(f"order must be a permutation of {affine.KINDS}")

    @property
    def epsilon(self) -> np.float32:
        return np.float32(self.epsilon_255 / 255.0)

    @property
    def transforms_on(self) -> bool:
        return self.transform_enabled and self.p > 0

    def summary(self) -> dict:
        return dict(
            epsilon_255=self.epsilon_255, T=self.T, t1=self.t1, mu=self.mu,
            p=self.p if self.transforms_on else 0.0, beta=self.beta, gamma=self.gamma, seed=self.seed,
        )


def preset(name: str, base: AttackConfig | None = None) -> AttackConfig:
    base = base or AttackConfig()
    if name == "mi_fgsm":
        return replace(base, t1=base.T, p=0.0, transform_enabled=False)
    if name == "ai_mi_fgsm":
        return replace(base, t1=base.T)
    if name == "ila":
        return replace(base, beta=1.0, p=0.0, transform_enabled=False)
    if name == "dg_ila":
        return replace(base, p=0.0, transform_enabled=False)
    if name == "trap":
        return base
    raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")


@dataclass
class GuidanceState:
    h_star: np.ndarray  # (N, D)
    h_x: np.ndarray  # (N, D)

    @property
    def dim(self) -> int:
        return self.h_star.shape[1]

    def gap(self) -> np.ndarray:
        return np.linalg.norm((self.h_star - self.h_x).astype(np.float64), axis=1)


def loss_l1(graph, x, y_true) -> np.ndarray:
    logits, _ = engine.evaluate_graph(graph, x)
    return engine.softmax_cross_entropy(logits, np.asarray(y_true))


class GuidedFeatureHead:
    """cos(h* - h_x, h - h_x) + gamma * |h - h_x| / |h* - h_x| per item.

    At ``h == h_x`` the cosine is taken as 0 and the gradient as
    ``gamma * (h* - h_x) / |h* - h_x|^2``, the limit of the norm-ratio
    gradient approached along the guidance direction. Rows with
    ``active`` False contribute nothing.
    """

    def __init__(self, h_star, h_x, gamma, active=None):
        self.a = np.asarray(h_star, dtype=np.float64) - np.asarray(h_x, dtype=np.float64)
        self.h_x = np.asarray(h_x, dtype=np.float64)
        self.gamma = float(gamma)
        self.na = np.linalg.norm(self.a, axis=1)
        self.active = np.ones(len(self.a), dtype=bool) if active is None else np.asarray(active, dtype=bool)
        if np.any(self.active & (self.na == 0)):
            raise GuidanceGapError("guidance vector equals the benign feature")
        self._na = np.where(self.na > 0, self.na, 1.0)

    def _terms(self, b):
        nb = np.linalg.norm(b, axis=1)
        dot = np.einsum("ij,ij->i", self.a, b)
        cos = np.where(nb > 0, dot / (self._na * np.where(nb > 0, nb, 1.0)), 0.0)
        return nb, dot, cos

    def per_item(self, h):
        b = np.asarray(h, dtype=np.float64) - self.h_x
        nb, _, cos = self._terms(b)
        return np.where(self.active, cos + self.gamma * nb / self._na, 0.0)

    def value_and_grad(self, h):
        b = np.asarray(h, dtype=np.float64) - self.h_x
        nb, dot, cos = self._terms(b)
        na = self._na[:, None]
        safe_nb = np.where(nb > 0, nb, 1.0)[:, None]
        grad = self.a / (na * safe_nb) - dot[:, None] * b / (na * safe_nb**3) + self.gamma * b / (na * safe_nb)
        at_origin = (nb == 0)[:, None]
        grad = np.where(at_origin, self.gamma * self.a / na**2, grad)
        grad[~self.active] = 0.0
        value = np.where(self.active, cos + self.gamma * nb / self._na, 0.0)
        return float(value.sum()), grad.astype(np.asarray(h).dtype, copy=False)

    def difference(self, h, d):
        # cancellation-free form of per_item(h + d) - per_item(h)
        b0 = np.asarray(h, dtype=np.float64) - self.h_x
        d = np.asarray(d, dtype=np.float64)
        b1 = b0 + d
        n0, n1 = np.linalg.norm(b0, axis=1), np.linalg.norm(b1, axis=1)
        a_b0 = np.einsum("ij,ij->i", self.a, b0)
        a_d = np.einsum("ij,ij->i", self.a, d)
        denom = n0 + n1
        dn = np.where(denom > 0, (2 * np.einsum("ij,ij->i", b0, d) + np.einsum("ij,ij->i", d, d)) / np.where(denom > 0, denom, 1), 0)
        ok = (n0 > 0) & (n1 > 0)
        dcos = np.where(ok, (a_d * n0 - a_b0 * dn) / (self._na * np.where(ok, n0 * n1, 1.0)), 0.0)
        naive = self.per_item(h + d) - self.per_item(h)
        out = np.where(ok, dcos + self.gamma * dn / self._na, naive)
        return np.where(self.active, out, 0.0)

    def select(self, rows):
        h_x = self.h_x[rows]
        return GuidedFeatureHead(h_x + self.a[rows], h_x, self.gamma, self.active[rows])


def loss_l2(h_adv, state: GuidanceState, gamma) -> np.ndarray:
    if np.any(state.gap() == 0):
        raise GuidanceGapError("zero guidance gap; the enhancement loss is undefined")
    return GuidedFeatureHead(state.h_star, state.h_x, gamma).per_item(h_adv)


def update_guidance(state: GuidanceState, h_adv_prev, beta) -> GuidanceState:
    h_adv_prev = np.asarray(h_adv_prev)
    if h_adv_prev.shape != state.h_star.shape:
        raise ValueError(f"feature shape {h_adv_prev.shape} does not match guidance {state.h_star.shape}")
    dtype = state.h_star.dtype
    h_star = dtype.type(1 - beta) * h_adv_prev.astype(dtype) + dtype.type(beta) * state.h_star
    return GuidanceState(h_star, state.h_x)


def momentum_normalize(g_raw, g_m, mu):
    """``mu * g_m + g_raw / ||g_raw||_1`` with the L1 norm per batch item; 0/0 -> 0."""
    g_raw = np.asarray(g_raw)
    norm = np.abs(g_raw).reshape(len(g_raw), -1).sum(axis=1)
    norm = norm.reshape((-1,) + (1,) * (g_raw.ndim - 1))
    normalized = np.where(norm > 0, g_raw / np.where(norm > 0, norm, 1), 0).astype(g_raw.dtype)
    return g_raw.dtype.type(mu) * g_m + normalized


def step_and_clip(x_t, x_benign, g, alpha, epsilon):
    x = x_t + alpha * np.sign(g)
    x = np.minimum(np.maximum(x, x_benign - epsilon), x_benign + epsilon)
    return np.clip(x, 0, 1).astype(x_t.dtype, copy=False)


@dataclass
class StepRecord:
    step: int
    phase: str
    loss: float
    transform_rate: float
    alpha: float
    items: int = 0


@dataclass
class AttackTrace:
    records: list = field(default_factory=list)
    flagged: list = field(default_factory=list)  # item indices returned at their baseline result
    guidance: list = field(default_factory=list)  # h* after each step, if recorded
    iterates: list = field(default_factory=list)  # X_t after each step, if recorded
    x_adv: np.ndarray | None = None
    l2_evaluations: int = 0


def item_generators(seed, indices):
    return [np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, int(i)]))) for i in indices]


def resolve_tap(graph, cfg: AttackConfig) -> str:
    tap = cfg.tap
    if tap is None:
        tap = getattr(graph.arch, "default_tap", None)
    if tap is None:
        raise ValueError("no tap layer configured and the graph has no default tap")
    graph.index(tap)
    return tap


def run_trap(graph, x, y_true, cfg: AttackConfig, indices=None, record_guidance=False, record_iterates=False):
    """Craft adversarial examples; returns ``(x_adv, trace)``.

    ``indices`` are the global item numbers used to derive each item's
    transform stream from ``cfg.seed``, so results do not depend on how a
    dataset is split into batches.
    """
    x = np.asarray(x, dtype=np.float32)
    y_true = np.asarray(y_true, dtype=np.int64)
    n = len(x)
    indices = np.arange(n) if indices is None else np.asarray(indices)
    T, t1 = cfg.T, cfg.t1
    eps = cfg.epsilon
    alpha_base = np.float32(eps / t1)
    alpha_enh = np.float32(eps / (T - t1)) if T > t1 else alpha_base
    guided = t1 < T
    tap = resolve_tap(graph, cfg) if guided else None

    if cfg.transforms_on:
        if cfg.per_batch_transform:
            rngs = [np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed])))]
        else:
            rngs = item_generators(cfg.seed, indices)

    trace = AttackTrace()
    x_adv = x.copy()
    g_m = np.zeros_like(x)
    state = None
    h_x = zoo.hidden_output(graph, tap, x) if guided else None
    flagged = np.zeros(n, dtype=bool)
    x_baseline = None

    for t in range(T):
        if t == t1:
            x_baseline = x_adv
            x_adv = x.copy()
            g_m = np.zeros_like(x)
            flagged = state.gap() == 0
            trace.flagged = [int(i) for i in indices[flagged]]

        applied = np.zeros(n, dtype=bool)
        g_graph = graph
        if cfg.transforms_on:
            matrices, applied = affine.draw_transforms(rngs, cfg.p, cfg.ranges, cfg.order)
            if cfg.per_batch_transform:
                matrices, applied = np.repeat(matrices, n, axis=0), np.repeat(applied, n)
            if applied.any():
                g_graph = graph.with_input_warp(matrices, applied)

        if t < t1:
            loss = engine.SoftmaxCrossEntropy(y_true)
            phase = "baseline"
        else:
            active = ~flagged & (state.gap() > 0)
            loss = engine.ActivationLoss(tap, GuidedFeatureHead(state.h_star, state.h_x, cfg.gamma, active))
            phase = "enhancement"
            trace.l2_evaluations += 1
        value, grads = engine.backward_graph(g_graph, x_adv, loss, param_grads=False)

        g_m = momentum_normalize(grads.input_grad, g_m, cfg.mu)
        alpha = alpha_enh if t >= t1 else alpha_base
        x_next = step_and_clip(x_adv, x, g_m, alpha, eps)

        if t >= t1:
            state = update_guidance(state, zoo.hidden_output(graph, tap, x_next), cfg.beta)
        elif guided:
            state = GuidanceState(zoo.hidden_output(graph, tap, x_next), h_x)
        x_adv = x_next

        trace.records.append(StepRecord(t, phase, value / n, float(applied.mean()), float(alpha), n))
        if record_guidance and state is not None:
            trace.guidance.append(state.h_star.copy())
        if record_iterates:
            trace.iterates.append(x_adv.copy())

    if flagged.any():
        x_adv = x_adv.copy()
        x_adv[flagged] = x_baseline[flagged]
    trace.x_adv = x_adv
    return x_adv, trace


def thread_count() -> int:
    value = int(os.environ.get("TRAP_THREADS", "0") or 0)
    return value if value > 0 else (os.cpu_count() or 1)


def run_attack(graph, x, y_true, cfg: AttackConfig, chunk_size=100, threads=None, offset=0):
    """:func:`run_trap` over fixed-size chunks, optionally in parallel.

    Chunk boundaries are fixed by ``chunk_size`` and each item draws from its
    own stream, so the output does not depend on ``threads``.
    """
    x = np.asarray(x, dtype=np.float32)
    starts = list(range(0, len(x), chunk_size))

    def one(start):
        stop = min(len(x), start + chunk_size)
        return run_trap(graph, x[start:stop], y_true[start:stop], cfg, indices=np.arange(start, stop) + offset)

    threads = threads or thread_count()
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, starts))
    else:
        results = [one(s) for s in starts]
    x_adv = np.concatenate([r[0] for r in results]) if results else x.copy()
    return x_adv, merge_traces([r[1] for r in results], x_adv)


def merge_traces(traces, x_adv) -> AttackTrace:
    merged = AttackTrace(x_adv=x_adv)
    if not traces:
        return merged
    for step_records in zip(*(t.records for t in traces)):
        total = sum(r.items for r in step_records)
        first = step_records[0]
        merged.records.append(
            StepRecord(
                first.step,
                first.phase,
                sum(r.loss * r.items for r in step_records) / total,
                sum(r.transform_rate * r.items for r in step_records) / total,
                first.alpha,
                total,
            )
        )
    for t in traces:
        merged.flagged += t.flagged
        merged.l2_evaluations = max(merged.l2_evaluations, t.l2_evaluations)
    return merged
