"""Label-transition layer: per-year-pair joint tables and cascade recursions.

The layer owns one log-joint table per adjacent pair of years (order 1,
shape C x C) or per triple (order 2, C x C x C); tables are independent
parameters, deliberately not shared across years. All inference runs in
log space:

* forward pass:  f[y] = log p(label_y, observations 0..y), built by
  marginalizing earlier labels one year at a time;
* backward pass: b[y] = log p(label_y, observations y..Y-1), the mirror
  recursion using the other conditional of the same joints;
* fusion:        fused[y] = f[y] + b[y] - emission[y] - log P(label_y),
  whose softmax is the per-year posterior given every year's observations.

Emission vectors are per-class log-likelihoods up to an additive per-year
constant; the constants cancel in the fused posteriors.

All functions are built from autodiff ops, so running them under an active
tape makes both the table logits and any upstream emission network
differentiable. Without a tape they are pure numpy pipelines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "JointTransitionTable",
    "CascadeResult",
    "marginal_prior",
    "conditional",
    "forward_cascade",
    "backward_cascade",
    "fuse",
    "forward_cascade_order2",
    "backward_cascade_order2",
    "fuse_order2",
    "init_from_cooccurrence",
    "viterbi_path",
]


@dataclass
class JointTransitionTable:
    """Per-year-pair (or triple) joint log-prior tables.

    ``logits[t]`` holds log P(label_t, label_{t+1}) for order 1, or
    log P(label_t, label_{t+1}, label_{t+2}) for order 2. Entries are
    unconstrained logits kept normalized (logsumexp over the whole table
    equal to zero) by explicit renormalization after optimizer steps.

    ``zero_marginal_slices`` counts how often a conditional had to replace
    a zero-probability conditioning slice with the uniform row; it is a
    diagnostic, not a thread-safe counter.
    """

    order: int
    num_classes: int
    logits: list[Tensor] = field(default_factory=list)
    zero_marginal_slices: int = 0

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError(f"order must be 1 or 2, got {self.order}")
        want = (self.num_classes,) * (self.order + 1)
        for t, lg in enumerate(self.logits):
            if lg.shape != want:
                raise ValueError(f"table {t} has shape {lg.shape}, expected {want}")

    @property
    def num_years(self) -> int:
        return len(self.logits) + self.order

    def values(self) -> list[np.ndarray]:
        return [lg.data for lg in self.logits]

    def copy(self) -> "JointTransitionTable":
        return JointTransitionTable(
            order=self.order,
            num_classes=self.num_classes,
            logits=[Tensor(lg.data.copy(), requires_grad=lg.requires_grad) for lg in self.logits],
            zero_marginal_slices=self.zero_marginal_slices,
        )

    def set_requires_grad(self, flag: bool) -> None:
        for lg in self.logits:
            lg.requires_grad = flag

    def renormalize_(self, tol: float = 1e-12) -> None:
        """Subtract each table's logsumexp so it stays a log-distribution.

        Tables already normalized within ``tol`` are left untouched so a
        zero-learning-rate step is bit-exact.
        """
        for lg in self.logits:
            total = float(_lse_all(lg.data))
            if abs(total) > tol:
                lg.data = lg.data - total

    def max_normalization_error(self) -> float:
        return max((abs(float(_lse_all(lg.data))) for lg in self.logits), default=0.0)

    def marginal_disagreement(self) -> float:
        """Max gap between adjacent tables' marginals for their shared year.

        Zero at co-occurrence initialization; fine-tuning is free to pull
        the tables apart, and this reports how far.
        """
        worst = 0.0
        for t in range(len(self.logits) - 1):
            later = _marginal_values(self.logits[t].data, self.order, "later")
            earlier = _marginal_values(self.logits[t + 1].data, self.order, "earlier")
            if self.order == 2:
                # shared quantity is the pair marginal over (t+1, t+2)
                later = _lse_np(self.logits[t].data, axis=0)
                earlier = _lse_np(self.logits[t + 1].data, axis=2)
            worst = max(worst, float(np.max(np.abs(later - earlier))))
        return worst

    def save(self, directory: str | Path) -> None:
        arrays = [(f"joint_y{t + 1}", lg.data) for t, lg in enumerate(self.logits)]
        meta = {"kind": "hmm", "order": self.order, "num_classes": self.num_classes, "num_years": self.num_years}
        ad.save_arrays(directory, arrays, meta=meta)

    @classmethod
    def load(cls, directory: str | Path) -> "JointTransitionTable":
        arrays, meta = ad.load_arrays(directory)
        if meta.get("kind") != "hmm":
            raise ValueError(f"{directory}: checkpoint kind is {meta.get('kind')!r}, expected 'hmm'")
        order = int(meta["order"])
        n_tables = int(meta["num_years"]) - order
        logits = [Tensor(arrays[f"joint_y{t + 1}"]) for t in range(n_tables)]
        return cls(order=order, num_classes=int(meta["num_classes"]), logits=logits)


@dataclass
class CascadeResult:
    """Per-year forward, backward and fused log-joint vectors plus posteriors.

    All arrays have shape (Y, C). ``logsumexp(fused[y])`` is the same for
    every y when the tables are mutually consistent: the total log-evidence.
    """

    forward: np.ndarray
    backward: np.ndarray
    fused: np.ndarray
    posteriors: np.ndarray


def _lse_np(x: np.ndarray, axis) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.exp(x - safe).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _lse_all(x: np.ndarray) -> float:
    m = x.max()
    if not np.isfinite(m):
        return -np.inf
    return float(m + np.log(np.exp(x - m).sum()))


def _marginal_values(joint: np.ndarray, order: int, side: str) -> np.ndarray:
    if order == 1:
        return _lse_np(joint, axis=1) if side == "earlier" else _lse_np(joint, axis=0)
    if side == "earlier":
        return _lse_np(joint, axis=(1, 2))
    if side == "middle":
        return _lse_np(joint, axis=(0, 2))
    return _lse_np(joint, axis=(0, 1))


def _as_emission_tensors(emissions, C: int) -> list[Tensor]:
    out = []
    for y, e in enumerate(emissions):
        if isinstance(e, Tensor):
            t = e
        elif hasattr(e, "log_scores"):
            t = Tensor(np.asarray(e.log_scores, dtype=np.float64))
        else:
            t = Tensor(np.asarray(e, dtype=np.float64))
        if t.shape != (C,):
            raise ValueError(f"emission {y} has shape {t.shape}, expected ({C},)")
        out.append(t)
    return out


def _check_years(table: JointTransitionTable, emissions: Sequence, op: str) -> None:
    if len(emissions) != table.num_years:
        raise ValueError(
            f"{op}: table covers {table.num_years} years but got {len(emissions)} emission vectors"
        )


# --------------------------------------------------------------------------
# First order.


def marginal_prior(table: JointTransitionTable, index: int, side: str) -> Tensor:
    """Single-year log-marginal extracted from one joint table.

    ``side`` picks which label of the pair (or triple) survives: "earlier"
    keeps the first index, "later" the last, and for order-2 tables
    "middle" keeps the central one.
    """
    if not 0 <= index < len(table.logits):
        raise IndexError(f"table index {index} out of range (have {len(table.logits)} tables)")
    sides = ("earlier", "later") if table.order == 1 else ("earlier", "middle", "later")
    if side not in sides:
        raise ValueError(f"side must be one of {sides}, got {side!r}")
    lg = table.logits[index]
    if table.order == 1:
        if side == "earlier":
            return ad.logsumexp(lg)
        return ad.logsumexp(ad.transpose(lg))
    if side == "earlier":
        return ad.logsumexp(ad.logsumexp(lg))
    if side == "middle":
        return ad.logsumexp(ad.logsumexp(ad.transpose(lg, (1, 0, 2))))
    return ad.logsumexp(ad.logsumexp(ad.transpose(lg, (2, 0, 1))))


def _count_empty(table: JointTransitionTable, joint: np.ndarray, axis: int) -> None:
    n = int(np.isneginf(_lse_np(joint, axis=axis)).sum())
    table.zero_marginal_slices += n


def conditional(table: JointTransitionTable, index: int, direction: str) -> Tensor:
    """Log-conditional between adjacent years, derived from the joint.

    forward:  out[i, j] = log P(label_{t+1}=j | label_t=i)
    backward: out[i, j] = log P(label_t=i | label_{t+1}=j)

    A conditioning class with zero marginal mass would divide by zero; its
    conditional slice is defined as uniform and counted in
    ``zero_marginal_slices``.
    """
    if table.order != 1:
        raise ValueError("conditional is defined for order-1 tables; order-2 uses the triple conditionals internally")
    if not 0 <= index < len(table.logits):
        raise IndexError(f"table index {index} out of range (have {len(table.logits)} tables)")
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    lg = table.logits[index]
    axis = 1 if direction == "forward" else 0
    _count_empty(table, lg.data, axis)
    return ad.log_normalize(lg, axis=axis)


def _uniform_log_prior(C: int) -> Tensor:
    return Tensor(np.full(C, -np.log(C)))


def _forward_tensors(table: JointTransitionTable, emissions: list[Tensor]) -> list[Tensor]:
    C = table.num_classes
    Y = len(emissions)
    if Y == 1:
        # no pair table exists; the only defensible prior is uniform
        return [ad.add(emissions[0], _uniform_log_prior(C))]
    f = [ad.add(emissions[0], marginal_prior(table, 0, "earlier"))]
    for y in range(1, Y):
        cond = conditional(table, y - 1, "forward")
        # scores[j] = logsumexp_i( cond[i, j] + f[y-1][i] )
        scores = ad.logsumexp(ad.add(ad.transpose(cond), f[y - 1]))
        f.append(ad.add(emissions[y], scores))
    return f


def _backward_tensors(table: JointTransitionTable, emissions: list[Tensor]) -> list[Tensor]:
    C = table.num_classes
    Y = len(emissions)
    if Y == 1:
        return [ad.add(emissions[0], _uniform_log_prior(C))]
    b: list[Tensor | None] = [None] * Y
    b[Y - 1] = ad.add(emissions[Y - 1], marginal_prior(table, Y - 2, "later"))
    for y in range(Y - 2, -1, -1):
        cond = conditional(table, y, "backward")
        # scores[i] = logsumexp_j( cond[i, j] + b[y+1][j] )
        scores = ad.logsumexp(ad.add(cond, b[y + 1]))
        b[y] = ad.add(emissions[y], scores)
    return b  # type: ignore[return-value]


def _prior_tensors(table: JointTransitionTable, Y: int) -> list[Tensor]:
    """Fusion denominators: earlier-side marginal of the table anchored at
    each year; the final year falls back to the later side of the last
    table."""
    C = table.num_classes
    if Y == 1:
        return [_uniform_log_prior(C)]
    priors = [marginal_prior(table, y, "earlier") for y in range(Y - 1)]
    priors.append(marginal_prior(table, Y - 2, "later"))
    return priors


def _fused_tensors(
    table: JointTransitionTable,
    emissions: list[Tensor],
    forward: list[Tensor],
    backward: list[Tensor],
) -> list[Tensor]:
    priors = _prior_tensors(table, len(emissions))
    fused = []
    for e, f, b, p in zip(emissions, forward, backward, priors):
        fused.append(ad.sub(ad.sub(ad.add(f, b), e), p))
    return fused


def _package_result(emissions, forward, backward, fused) -> CascadeResult:
    fw = np.stack([t.data for t in forward])
    bw = np.stack([t.data for t in backward])
    fs = np.stack([t.data for t in fused])
    bad = np.isnan(fs) | np.isposinf(fs)
    if bad.any():
        raise ValueError("fused scores contain non-finite entries other than -inf")
    post = np.empty_like(fs)
    for y in range(fs.shape[0]):
        row = fs[y]
        m = row.max()
        if np.isneginf(m):
            raise ValueError(f"fused scores for year {y} are all -inf; every class has zero probability")
        e = np.exp(row - m)
        post[y] = e / e.sum()
    return CascadeResult(forward=fw, backward=bw, fused=fs, posteriors=post)


def forward_cascade(table: JointTransitionTable, emissions) -> list[Tensor]:
    """Prefix scores f[y] = log p(label_y, observations 0..y), one per year."""
    if table.order != 1:
        raise ValueError("forward_cascade expects an order-1 table")
    _check_years(table, emissions, "forward_cascade")
    return _forward_tensors(table, _as_emission_tensors(emissions, table.num_classes))


def backward_cascade(table: JointTransitionTable, emissions) -> list[Tensor]:
    """Suffix scores b[y] = log p(label_y, observations y..Y-1), one per year."""
    if table.order != 1:
        raise ValueError("backward_cascade expects an order-1 table")
    _check_years(table, emissions, "backward_cascade")
    return _backward_tensors(table, _as_emission_tensors(emissions, table.num_classes))


def fuse(table: JointTransitionTable, emissions, forward, backward) -> CascadeResult:
    """Combine prefix and suffix scores into full-sequence posteriors.

    fused[y] = forward[y] + backward[y] - emission[y] - log P(label_y); the
    first and last years collapse to the pure backward and forward scores.
    """
    if table.order != 1:
        raise ValueError("fuse expects an order-1 table; see fuse_order2")
    _check_years(table, emissions, "fuse")
    ems = _as_emission_tensors(emissions, table.num_classes)
    fw = _as_emission_tensors(forward, table.num_classes)
    bw = _as_emission_tensors(backward, table.num_classes)
    fused = _fused_tensors(table, ems, fw, bw)
    return _package_result(ems, fw, bw, fused)


# --------------------------------------------------------------------------
# Second order. The running state is a pair score
# F[y][i, j] = log p(label_{y-1}=i, label_y=j, observations 0..y); single-year
# vectors marginalize the earlier index.


def _cond2(table: JointTransitionTable, index: int, direction: str) -> Tensor:
    lg = table.logits[index]
    axis = 2 if direction == "forward" else 0
    _count_empty(table, lg.data, axis)
    return ad.log_normalize(lg, axis=axis)


def _forward2_states(table: JointTransitionTable, emissions: list[Tensor]) -> list[Tensor]:
    Y = len(emissions)
    pair12 = ad.logsumexp(table.logits[0])  # log P(label_0, label_1)
    base = ad.add(pair12, emissions[1])
    base = ad.transpose(ad.add(ad.transpose(base), emissions[0]))
    states = [base]  # states[k] covers years (k, k+1)
    for y2 in range(2, Y):
        cond = _cond2(table, y2 - 2, "forward")  # (i, j, k) -> P(k | i, j)
        g = ad.add(ad.transpose(cond, (2, 0, 1)), states[-1])  # g[k, i, j]
        scores = ad.transpose(ad.logsumexp(ad.transpose(g, (0, 2, 1))))  # lse over i -> (j, k)
        states.append(ad.add(scores, emissions[y2]))
    return states


def _forward2(table: JointTransitionTable, emissions: list[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
    """Returns (single-year forward vectors, pair states indexed from year 1)."""
    Y = len(emissions)
    f0 = ad.add(emissions[0], marginal_prior(table, 0, "earlier"))
    states = _forward2_states(table, emissions)
    vectors = [f0]
    for st in states:
        vectors.append(ad.logsumexp(ad.transpose(st)))  # lse over earlier index
    return vectors, states


def _backward2(table: JointTransitionTable, emissions: list[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
    Y = len(emissions)
    last = len(table.logits) - 1
    pair23 = ad.logsumexp(ad.transpose(table.logits[last], (1, 2, 0)))  # log P(label_{Y-2}, label_{Y-1})
    base = ad.add(pair23, emissions[Y - 1])
    base = ad.transpose(ad.add(ad.transpose(base), emissions[Y - 2]))
    states: list[Tensor | None] = [None] * (Y - 1)  # states[y] covers years (y, y+1)
    states[Y - 2] = base
    for y in range(Y - 3, -1, -1):
        cond = _cond2(table, y, "backward")  # (i, j, k) -> P(i | j, k)
        g = ad.logsumexp(ad.add(cond, states[y + 1]))  # (i, j, k) + (j, k), lse over k -> (i, j)
        states[y] = ad.transpose(ad.add(ad.transpose(g), emissions[y]))
    vectors = []
    for y in range(Y - 1):
        vectors.append(ad.logsumexp(states[y]))  # lse over the later index
    bY = ad.add(emissions[Y - 1], marginal_prior(table, last, "later"))
    vectors.append(bY)
    return vectors, states  # type: ignore[return-value]


def _pair_prior2(table: JointTransitionTable, y: int) -> Tensor:
    """Joint log-prior of the year pair (y-1, y), used as the fusion
    denominator. Convention mirroring order 1: the first-two-labels
    marginal of the triple anchored at year y-1 where one exists, the
    last-two marginal of the final triple otherwise."""
    if y - 1 < len(table.logits):
        return ad.logsumexp(table.logits[y - 1])
    return ad.logsumexp(ad.transpose(table.logits[-1], (1, 2, 0)))


def _fused2_tensors(
    table: JointTransitionTable,
    emissions: list[Tensor],
    fstates: list[Tensor],
    gstates: list[Tensor],
) -> list[Tensor]:
    """Exact order-2 fusion.

    Conditioning on a single year's label does not separate past from
    future in a second-order chain, so fusion runs on the pair states:
    fusedpair_y = F_y + G_{y-1} - log P(label_{y-1}, label_y)
                  - emission[y-1] - emission[y],
    the pair-state analogue of the order-1 formula. Single-year fused
    vectors marginalize the other label of the pair.
    """
    Y = len(emissions)
    pairs = []
    for y in range(1, Y):
        core = ad.sub(ad.sub(ad.add(fstates[y - 1], gstates[y - 1]), _pair_prior2(table, y)), emissions[y])
        core = ad.transpose(ad.sub(ad.transpose(core), emissions[y - 1]))
        pairs.append(core)
    fused = [ad.logsumexp(pairs[0])]  # year 0: sum out the second label
    for y in range(1, Y):
        fused.append(ad.logsumexp(ad.transpose(pairs[y - 1])))
    return fused


def _pair_fallback_table(table: JointTransitionTable) -> JointTransitionTable:
    """Order-1 view for two-year inference: first triple, third label summed out."""
    pair = ad.logsumexp(table.logits[0])
    return JointTransitionTable(order=1, num_classes=table.num_classes, logits=[pair])


def _check_years2(table: JointTransitionTable, emissions, op: str, allow_pair_fallback: bool) -> bool:
    """True when the two-year fallback applies; raises on other mismatches."""
    if table.order != 2:
        raise ValueError(f"{op} expects an order-2 table")
    if not table.logits:
        raise ValueError(f"{op}: order-2 table holds no triples; it needs at least 3 years of counts")
    if len(emissions) == table.num_years:
        return False
    if len(emissions) == 2 and table.logits:
        if allow_pair_fallback:
            return True
        raise ValueError(
            f"{op}: 2 years of emissions against an order-2 table requires allow_pair_fallback=True"
        )
    raise ValueError(
        f"{op}: table covers {table.num_years} years but got {len(emissions)} emission vectors"
    )


def forward_cascade_order2(table: JointTransitionTable, emissions, allow_pair_fallback: bool = False) -> list[Tensor]:
    """Order-2 prefix scores; with two years falls back to the marginalized first triple."""
    if _check_years2(table, emissions, "forward_cascade_order2", allow_pair_fallback):
        return forward_cascade(_pair_fallback_table(table), emissions)
    ems = _as_emission_tensors(emissions, table.num_classes)
    return _forward2(table, ems)[0]


def backward_cascade_order2(table: JointTransitionTable, emissions, allow_pair_fallback: bool = False) -> list[Tensor]:
    """Order-2 suffix scores; mirror of :func:`forward_cascade_order2`."""
    if _check_years2(table, emissions, "backward_cascade_order2", allow_pair_fallback):
        return backward_cascade(_pair_fallback_table(table), emissions)
    ems = _as_emission_tensors(emissions, table.num_classes)
    return _backward2(table, ems)[0]


def fuse_order2(table: JointTransitionTable, emissions, allow_pair_fallback: bool = False) -> CascadeResult:
    """Order-2 forward/backward cascade plus fusion, in one call."""
    if _check_years2(table, emissions, "fuse_order2", allow_pair_fallback):
        t1 = _pair_fallback_table(table)
        ems = _as_emission_tensors(emissions, table.num_classes)
        fw = _forward_tensors(t1, ems)
        bw = _backward_tensors(t1, ems)
        return _package_result(ems, fw, bw, _fused_tensors(t1, ems, fw, bw))
    ems = _as_emission_tensors(emissions, table.num_classes)
    fw, fstates = _forward2(table, ems)
    bw, gstates = _backward2(table, ems)
    return _package_result(ems, fw, bw, _fused2_tensors(table, ems, fstates, gstates))


def cascade_posterior_tensors(table: JointTransitionTable, emissions: list[Tensor], allow_pair_fallback: bool = False) -> list[Tensor]:
    """Fused log-score tensors for training: gradients flow into table logits
    and into the emission graph."""
    if table.order == 1:
        _check_years(table, emissions, "cascade")
        fw = _forward_tensors(table, emissions)
        bw = _backward_tensors(table, emissions)
        return _fused_tensors(table, emissions, fw, bw)
    if _check_years2(table, emissions, "cascade", allow_pair_fallback):
        t1 = _pair_fallback_table(table)
        fw = _forward_tensors(t1, emissions)
        bw = _backward_tensors(t1, emissions)
        return _fused_tensors(t1, emissions, fw, bw)
    _, fstates = _forward2(table, emissions)
    _, gstates = _backward2(table, emissions)
    return _fused2_tensors(table, emissions, fstates, gstates)


def cascade(table: JointTransitionTable, emissions, allow_pair_fallback: bool = False) -> CascadeResult:
    """Full pipeline convenience wrapper dispatching on table order."""
    if table.order == 1:
        fw = forward_cascade(table, emissions)
        bw = backward_cascade(table, emissions)
        return fuse(table, emissions, fw, bw)
    return fuse_order2(table, emissions, allow_pair_fallback=allow_pair_fallback)


# --------------------------------------------------------------------------
# Estimation and decoding.


def init_from_cooccurrence(
    label_sequences: Sequence[Sequence[int]],
    num_classes: int,
    num_years: int,
    order: int = 1,
    smoothing: float = 1.0,
) -> JointTransitionTable:
    """Tables from smoothed label co-occurrence counts.

    Each adjacent pair (or triple) of years gets its own joint:
    (count + a) / (total + a * C**(order+1)), stored as normalized logits.
    """
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    if smoothing < 0:
        raise ValueError(f"smoothing must be non-negative, got {smoothing}")
    seqs = [list(map(int, s)) for s in label_sequences]
    if not seqs:
        raise ValueError("empty training set")
    for s in seqs:
        if len(s) != num_years:
            raise ValueError(f"label sequence of length {len(s)} does not match num_years={num_years}")
        for lab in s:
            if not 0 <= lab < num_classes:
                raise ValueError(f"label {lab} outside [0, {num_classes})")
    C = num_classes
    n = len(seqs)
    cells = C ** (order + 1)
    logits = []
    for t in range(num_years - order):
        counts = np.zeros((C,) * (order + 1))
        for s in seqs:
            counts[tuple(s[t : t + order + 1])] += 1.0
        joint = (counts + smoothing) / (n + smoothing * cells)
        with np.errstate(divide="ignore"):
            logits.append(Tensor(np.log(joint)))
    return JointTransitionTable(order=order, num_classes=C, logits=logits)


def viterbi_path(table: JointTransitionTable, emissions) -> np.ndarray:
    """Most probable label sequence (max-product analogue of the forward pass).

    Order-1 tables only; ties break toward the lowest class index.
    """
    if table.order != 1:
        raise ValueError("viterbi_path expects an order-1 table")
    _check_years(table, emissions, "viterbi_path")
    ems = np.stack([t.data for t in _as_emission_tensors(emissions, table.num_classes)])
    Y, C = ems.shape
    if Y == 1:
        return np.array([int(np.argmax(ems[0]))])
    prior = _marginal_values(table.logits[0].data, 1, "earlier")
    v = ems[0] + prior
    back = np.zeros((Y, C), dtype=np.intp)
    with np.errstate(invalid="ignore"):
        for y in range(1, Y):
            joint = table.logits[y - 1].data
            marg = _lse_np(joint, axis=1)
            empty = np.isneginf(marg)
            cond = joint - marg[:, None]
            if empty.any():
                cond[empty, :] = -np.log(C)
                table.zero_marginal_slices += int(empty.sum())
            scores = cond + v[:, None]  # (i, j)
            back[y] = np.argmax(scores, axis=0)
            v = ems[y] + np.max(scores, axis=0)
    path = np.zeros(Y, dtype=np.intp)
    path[Y - 1] = int(np.argmax(v))
    for y in range(Y - 1, 0, -1):
        path[y - 1] = back[y, path[y]]
    return path
