"""Independent oracles used across the test suite.

Everything here is deliberately dumb: central finite differences and
exhaustive enumeration over all label sequences, written in plain numpy
with no calls into the code paths they check.
"""

from __future__ import annotations

from itertools import product

import numpy as np


def finite_diff_grad(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f at arr, elementwise."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        hi = f()
        flat[i] = saved - eps
        lo = f()
        flat[i] = saved
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise relative error with an absolute floor on the scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


# --------------------------------------------------------------------------
# Random label-chain models. The joint tables handed to the implementation
# are built from an explicit chain (initial distribution + per-step
# transition matrices), so every adjacent-pair joint is marginal-consistent
# and enumeration under the chain is the ground truth.


def random_chain(rng: np.random.Generator, C: int, Y: int):
    """First-order chain: returns (prior, transitions, joints).

    prior: (C,), transitions: list of Y-1 row-stochastic (C,C),
    joints: list of Y-1 (C,C) with joints[y][i,j] = P(label_y=i, label_{y+1}=j).
    """
    prior = rng.dirichlet(np.ones(C) * 2.0)
    transitions = [rng.dirichlet(np.ones(C) * 2.0, size=C) for _ in range(Y - 1)]
    joints = []
    m = prior
    for T in transitions:
        joints.append(m[:, None] * T)
        m = m @ T
    return prior, transitions, joints


def random_chain2(rng: np.random.Generator, C: int, Y: int):
    """Second-order chain: returns (pair_prior, conds, triples).

    pair_prior: (C,C) joint over the first two years; conds: list of Y-2
    arrays (C,C,C) with conds[y][i,j,k] = P(label_{y+2}=k | label_y=i,
    label_{y+1}=j); triples[y][i,j,k] = P(label_y=i, label_{y+1}=j,
    label_{y+2}=k).
    """
    pair = rng.dirichlet(np.ones(C * C) * 2.0).reshape(C, C)
    conds = [rng.dirichlet(np.ones(C) * 2.0, size=(C, C)) for _ in range(Y - 2)]
    triples = []
    m = pair
    for T in conds:
        tri = m[:, :, None] * T
        triples.append(tri)
        m = tri.sum(axis=0)
    return pair, conds, triples


def random_emissions(rng: np.random.Generator, C: int, Y: int) -> np.ndarray:
    """Per-year log-likelihood surrogates, shape (Y, C)."""
    return rng.normal(0.0, 1.5, size=(Y, C))


def enumerate_posteriors(prior, transitions, emissions) -> np.ndarray:
    """Brute-force per-year posteriors of a first-order chain.

    Sums the full joint over all C**Y label sequences in linear space:
    weight = prior[s0] * prod transitions[y][s_y, s_{y+1}] * prod exp(e_y[s_y]).
    """
    emissions = np.asarray(emissions, dtype=np.float64)
    Y, C = emissions.shape
    like = np.exp(emissions)
    acc = np.zeros((Y, C))
    for seq in product(range(C), repeat=Y):
        w = prior[seq[0]]
        for y in range(Y - 1):
            w *= transitions[y][seq[y], seq[y + 1]]
        for y in range(Y):
            w *= like[y, seq[y]]
        for y in range(Y):
            acc[y, seq[y]] += w
    return acc / acc.sum(axis=1, keepdims=True)


def enumerate_posteriors2(pair_prior, conds, emissions) -> np.ndarray:
    """Brute-force per-year posteriors of a second-order chain."""
    emissions = np.asarray(emissions, dtype=np.float64)
    Y, C = emissions.shape
    like = np.exp(emissions)
    acc = np.zeros((Y, C))
    for seq in product(range(C), repeat=Y):
        w = pair_prior[seq[0], seq[1]]
        for y in range(Y - 2):
            w *= conds[y][seq[y], seq[y + 1], seq[y + 2]]
        for y in range(Y):
            w *= like[y, seq[y]]
        for y in range(Y):
            acc[y, seq[y]] += w
    return acc / acc.sum(axis=1, keepdims=True)


def enumerate_prefix_scores(prior, transitions, emissions, upto: int) -> np.ndarray:
    """Brute-force log p(label_upto = c, observations 0..upto) over prefixes."""
    emissions = np.asarray(emissions, dtype=np.float64)
    _, C = emissions.shape
    like = np.exp(emissions)
    acc = np.zeros(C)
    for seq in product(range(C), repeat=upto + 1):
        w = prior[seq[0]]
        for y in range(upto):
            w *= transitions[y][seq[y], seq[y + 1]]
        for y in range(upto + 1):
            w *= like[y, seq[y]]
        acc[seq[upto]] += w
    with np.errstate(divide="ignore"):
        return np.log(acc)


def table_from_joints(joints) -> "object":
    """Wrap explicit pair joints into the implementation's table type."""
    from cascadehmm.autodiff import Tensor
    from cascadehmm.hmm import JointTransitionTable

    C = np.asarray(joints[0]).shape[0] if joints else 2
    with np.errstate(divide="ignore"):
        logits = [Tensor(np.log(np.asarray(j, dtype=np.float64))) for j in joints]
    return JointTransitionTable(order=1, num_classes=C, logits=logits)


def table_from_triples(triples) -> "object":
    from cascadehmm.autodiff import Tensor
    from cascadehmm.hmm import JointTransitionTable

    C = np.asarray(triples[0]).shape[0]
    with np.errstate(divide="ignore"):
        logits = [Tensor(np.log(np.asarray(t, dtype=np.float64))) for t in triples]
    return JointTransitionTable(order=2, num_classes=C, logits=logits)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def enumerate_best_path(prior, transitions, emissions) -> list[int]:
    """Argmax over all label sequences of the full chain joint."""
    emissions = np.asarray(emissions, dtype=np.float64)
    Y, C = emissions.shape
    like = np.exp(emissions)
    best_w, best_seq = -1.0, None
    for seq in product(range(C), repeat=Y):
        w = prior[seq[0]]
        for y in range(Y - 1):
            w *= transitions[y][seq[y], seq[y + 1]]
        for y in range(Y):
            w *= like[y, seq[y]]
        if w > best_w:
            best_w, best_seq = w, list(seq)
    return best_seq
