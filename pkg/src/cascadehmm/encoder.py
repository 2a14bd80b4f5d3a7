"""Transformer encoder mapping one year's observation series to class scores.

A deliberately small encoder: band projection, sinusoidal position features
on the day of the (agronomic) year, a couple of self-attention blocks, max
pooling over time, and one of two heads:

* discriminative: plain linear layer plus bias; its softmax estimates class
  posteriors under the empirical training prior.
* generative: bias-free cosine head (unit-norm weight rows against the
  unit-normalized pooled feature, times a learnable scale). Its softmax
  behaves like posteriors under a uniform class prior, so the log-scores
  stand in for per-class log-likelihoods up to an additive constant.

:func:`encode` is deterministic and stateless; building it under an active
tape makes every parameter differentiable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "DAYS_PER_YEAR",
    "EncoderConfig",
    "YearlySeries",
    "EmissionScores",
    "EncoderParams",
    "positional_features",
    "encode",
    "encode_tensor",
    "head_posteriors_to_emission",
]

DAYS_PER_YEAR = 366


@dataclass
class EncoderConfig:
    """Architecture and preprocessing knobs; serialized next to checkpoints."""

    num_bands: int
    num_classes: int
    d_model: int = 64
    num_heads: int = 4
    num_layers: int = 2
    d_ff: int = 128
    head_kind: str = "generative"
    input_scale: float = 1.0
    max_len: int = 512

    def __post_init__(self):
        if self.head_kind not in ("generative", "discriminative"):
            raise ValueError(f"head_kind must be 'generative' or 'discriminative', got {self.head_kind!r}")
        for name in ("num_bands", "num_classes", "d_model", "num_heads", "num_layers", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the sinusoidal position features")
        if self.input_scale <= 0:
            raise ValueError("input_scale must be positive")

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "num_bands": self.num_bands,
            "num_classes": self.num_classes,
            "d_model": self.d_model,
            "num_heads": self.num_heads,
            "num_layers": self.num_layers,
            "d_ff": self.d_ff,
            "head_kind": self.head_kind,
            "input_scale": self.input_scale,
            "max_len": self.max_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {k: v for k, v in d.items() if k != "schema_version"}
        return cls(**known)


@dataclass
class YearlySeries:
    """One year of observations: a T x B value matrix plus acquisition days.

    Days are integers in [0, 366), strictly increasing; acquisitions are
    irregular, so positions are encoded from the day, not the index.
    """

    values: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError(f"values must be a T x B matrix with T,B >= 1, got shape {self.values.shape}")
        if self.timestamps.shape != (self.values.shape[0],):
            raise ValueError("timestamps length must match the number of observations")
        if np.any(self.timestamps < 0) or np.any(self.timestamps >= DAYS_PER_YEAR):
            raise ValueError(f"timestamps must lie in [0, {DAYS_PER_YEAR})")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_bands(self) -> int:
        return self.values.shape[1]


@dataclass
class EmissionScores:
    """Per-class log-scores. :func:`encode` returns a normalized
    log-distribution; downstream conversions may shift it by constants."""

    log_scores: np.ndarray

    def __post_init__(self):
        self.log_scores = np.asarray(self.log_scores, dtype=np.float64)
        if self.log_scores.ndim != 1:
            raise ValueError(f"log_scores must be a vector, got shape {self.log_scores.shape}")


@dataclass
class _BlockParams:
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: list[Tensor]
    ln1_gain: Tensor
    ln1_bias: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class EncoderParams:
    config: EncoderConfig
    in_proj_w: Tensor
    in_proj_b: Tensor
    blocks: list[_BlockParams]
    head_w: Tensor
    head_b: Tensor | None
    head_scale: Tensor | None
    class_priors: np.ndarray | None = None

    @classmethod
    def init(cls, config: EncoderConfig, seed: int | np.random.Generator = 0) -> "EncoderParams":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        d, dk = config.d_model, config.d_model // config.num_heads

        def xavier(n_in, n_out):
            limit = np.sqrt(6.0 / (n_in + n_out))
            return Tensor(rng.uniform(-limit, limit, size=(n_in, n_out)), requires_grad=True)

        blocks = []
        for _ in range(config.num_layers):
            blocks.append(
                _BlockParams(
                    wq=[xavier(d, dk) for _ in range(config.num_heads)],
                    wk=[xavier(d, dk) for _ in range(config.num_heads)],
                    wv=[xavier(d, dk) for _ in range(config.num_heads)],
                    wo=[xavier(dk, d) for _ in range(config.num_heads)],
                    ln1_gain=Tensor(np.ones(d), requires_grad=True),
                    ln1_bias=Tensor(np.zeros(d), requires_grad=True),
                    ff_w1=xavier(d, config.d_ff),
                    ff_b1=Tensor(np.zeros(config.d_ff), requires_grad=True),
                    ff_w2=xavier(config.d_ff, d),
                    ff_b2=Tensor(np.zeros(d), requires_grad=True),
                    ln2_gain=Tensor(np.ones(d), requires_grad=True),
                    ln2_bias=Tensor(np.zeros(d), requires_grad=True),
                )
            )
        if config.head_kind == "discriminative":
            limit = np.sqrt(6.0 / (d + config.num_classes))
            head_w = Tensor(rng.uniform(-limit, limit, size=(config.num_classes, d)), requires_grad=True)
            head_b = Tensor(np.zeros(config.num_classes), requires_grad=True)
            head_scale = None
        else:
            rows = rng.normal(size=(config.num_classes, d))
            rows /= np.linalg.norm(rows, axis=1, keepdims=True)
            head_w = Tensor(rows, requires_grad=True)
            head_b = None
            head_scale = Tensor(np.array(10.0), requires_grad=True)
        return cls(
            config=config,
            in_proj_w=xavier(config.num_bands, d),
            in_proj_b=Tensor(np.zeros(d), requires_grad=True),
            blocks=blocks,
            head_w=head_w,
            head_b=head_b,
            head_scale=head_scale,
        )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "in_proj.w", self.in_proj_w
        yield "in_proj.b", self.in_proj_b
        for i, blk in enumerate(self.blocks):
            for h in range(self.config.num_heads):
                yield f"blocks.{i}.attn.{h}.wq", blk.wq[h]
                yield f"blocks.{i}.attn.{h}.wk", blk.wk[h]
                yield f"blocks.{i}.attn.{h}.wv", blk.wv[h]
                yield f"blocks.{i}.attn.{h}.wo", blk.wo[h]
            yield f"blocks.{i}.ln1.gain", blk.ln1_gain
            yield f"blocks.{i}.ln1.bias", blk.ln1_bias
            yield f"blocks.{i}.ff.w1", blk.ff_w1
            yield f"blocks.{i}.ff.b1", blk.ff_b1
            yield f"blocks.{i}.ff.w2", blk.ff_w2
            yield f"blocks.{i}.ff.b2", blk.ff_b2
            yield f"blocks.{i}.ln2.gain", blk.ln2_gain
            yield f"blocks.{i}.ln2.bias", blk.ln2_bias
        yield "head.w", self.head_w
        if self.head_b is not None:
            yield "head.b", self.head_b
        if self.head_scale is not None:
            yield "head.scale", self.head_scale

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag

    def copy(self) -> "EncoderParams":
        new = EncoderParams.init(self.config, seed=0)
        for (_, dst), (_, src) in zip(new.named_parameters(), self.named_parameters()):
            dst.data = src.data.copy()
            dst.requires_grad = src.requires_grad
        new.class_priors = None if self.class_priors is None else self.class_priors.copy()
        return new

    def renormalize_head_rows_(self, tol: float = 1e-12) -> None:
        """Project generative-head rows back to unit norm after a step.

        Rows already unit within ``tol`` stay untouched so zero-learning-rate
        steps are bit-exact.
        """
        if self.config.head_kind != "generative":
            return
        norms = np.linalg.norm(self.head_w.data, axis=1, keepdims=True)
        if np.max(np.abs(norms - 1.0)) > tol:
            self.head_w.data = self.head_w.data / np.where(norms > 0, norms, 1.0)

    def save(self, directory: str | Path, extra_meta: dict | None = None) -> None:
        arrays = list(self.named_parameters())
        if self.class_priors is not None:
            arrays.append(("class_priors", Tensor(self.class_priors)))
        meta = {"kind": "encoder", "config": self.config.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        ad.save_arrays(directory, [(n, t.data) for n, t in arrays], meta=meta)

    @classmethod
    def load(cls, directory: str | Path) -> "EncoderParams":
        arrays, meta = ad.load_arrays(directory)
        if meta.get("kind") != "encoder":
            raise ValueError(f"{directory}: checkpoint kind is {meta.get('kind')!r}, expected 'encoder'")
        config = EncoderConfig.from_dict(meta["config"])
        params = cls.init(config, seed=0)
        for name, t in params.named_parameters():
            if name not in arrays:
                raise ValueError(f"{directory}: missing array {name!r}")
            if arrays[name].shape != t.data.shape:
                raise ValueError(f"{directory}: array {name!r} has shape {arrays[name].shape}, expected {t.data.shape}")
            t.data = arrays[name]
        if "class_priors" in arrays:
            params.class_priors = arrays["class_priors"]
        return params


def positional_features(timestamps: np.ndarray, d_model: int) -> np.ndarray:
    """Sinusoidal features on the day of year: harmonics of the annual cycle.

    Channel pair k holds sin/cos of 2*pi*(k+1)*day/366, so every channel is
    periodic over the year and two different days map to different rows.
    """
    days = np.asarray(timestamps, dtype=np.float64)[:, None]
    k = np.arange(1, d_model // 2 + 1, dtype=np.float64)[None, :]
    ang = 2.0 * np.pi * days * k / DAYS_PER_YEAR
    out = np.empty((days.shape[0], d_model))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def _attention(params: _BlockParams, h: Tensor, num_heads: int, dk: int) -> Tensor:
    out = None
    scale = 1.0 / np.sqrt(dk)
    for i in range(num_heads):
        q = ad.matmul(h, params.wq[i])
        k = ad.matmul(h, params.wk[i])
        v = ad.matmul(h, params.wv[i])
        att = ad.softmax(ad.scalar_mul(ad.matmul(q, ad.transpose(k)), scale))
        contrib = ad.matmul(ad.matmul(att, v), params.wo[i])
        out = contrib if out is None else ad.add(out, contrib)
    return out


def _layer_norm(h: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(h), gain), bias)


def encode_tensor(params: EncoderParams, series: YearlySeries) -> Tensor:
    """Graph-building variant of :func:`encode`; returns the log-score tensor."""
    cfg = params.config
    if series.num_bands != cfg.num_bands:
        raise ValueError(f"series has {series.num_bands} bands, model expects {cfg.num_bands}")
    if series.num_steps > cfg.max_len:
        raise ValueError(f"series length {series.num_steps} exceeds max_len {cfg.max_len}")
    if not np.all(np.isfinite(series.values)):
        raise ValueError("series contains non-finite values")
    x = Tensor(series.values / cfg.input_scale)
    h = ad.add(ad.matmul(x, params.in_proj_w), params.in_proj_b)
    h = ad.add(h, Tensor(positional_features(series.timestamps, cfg.d_model)))
    dk = cfg.d_model // cfg.num_heads
    for blk in params.blocks:
        h = _layer_norm(ad.add(h, _attention(blk, h, cfg.num_heads, dk)), blk.ln1_gain, blk.ln1_bias)
        ff = ad.matmul(ad.relu(ad.add(ad.matmul(h, blk.ff_w1), blk.ff_b1)), blk.ff_w2)
        ff = ad.add(ff, blk.ff_b2)
        h = _layer_norm(ad.add(h, ff), blk.ln2_gain, blk.ln2_bias)
    pooled = ad.max_along(h, axis=0)
    if cfg.head_kind == "discriminative":
        logits = ad.add(ad.matmul(params.head_w, pooled), params.head_b)
    else:
        cos = ad.matmul(ad.l2_normalize_rows(params.head_w), ad.l2_normalize_rows(pooled))
        logits = ad.mul(cos, params.head_scale)
    return ad.log_softmax(logits)


def encode(params: EncoderParams, series: YearlySeries) -> EmissionScores:
    """Per-class normalized log-distribution for one year's series."""
    with ad.paused():
        return EmissionScores(encode_tensor(params, series).data)


def head_posteriors_to_emission(
    scores: EmissionScores, head_kind: str, train_class_priors: np.ndarray
) -> EmissionScores:
    """Turn head posteriors into emission scores for the transition layer.

    The generative head already implies a uniform prior, so its scores pass
    through unchanged. Discriminative posteriors are divided by the training
    class priors (in log space), leaving an un-normalized scaled likelihood;
    the missing constant cancels in fused posteriors.
    """
    if head_kind not in ("generative", "discriminative"):
        raise ValueError(f"head_kind must be 'generative' or 'discriminative', got {head_kind!r}")
    priors = np.asarray(train_class_priors, dtype=np.float64)
    if priors.shape != scores.log_scores.shape:
        raise ValueError(f"priors shape {priors.shape} does not match scores shape {scores.log_scores.shape}")
    if np.any(priors <= 0):
        raise ValueError("class priors must all be positive")
    if abs(priors.sum() - 1.0) > 1e-9:
        raise ValueError(f"class priors must sum to 1, got {priors.sum()}")
    if head_kind == "generative":
        return scores
    return EmissionScores(scores.log_scores - np.log(priors))
