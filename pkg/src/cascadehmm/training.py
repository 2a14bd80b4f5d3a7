"""Emission pretraining, transition-table initialization and fine-tuning.

Three stages, mirroring the pipeline:

1. :func:`train_emission` fits the encoder on individual (year, series,
   label) triples pooled across all years.
2. The transition layer is initialized from label co-occurrence counts
   (:func:`cascadehmm.hmm.init_from_cooccurrence`).
3. :func:`finetune_cascade` trains encoder and tables jointly with the
   cross-entropy of the fused per-year posteriors.

Both loops are deterministic under a fixed seed, select the best state by
validation macro F1 (the untouched initial state competes too, so
fine-tuning never returns something worse on validation than its input),
and stop early after ``patience`` epochs without improvement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import evaluation, hmm
from .autodiff import Tensor
from .data import SampleSequence
from .encoder import EncoderConfig, EncoderParams, encode, encode_tensor, head_posteriors_to_emission

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingError",
    "Adam",
    "compute_class_priors",
    "train_emission",
    "finetune_cascade",
    "predict",
    "evaluate_emission",
    "evaluate_cascade",
    "evaluate_cascade_loss",
    "emissions_for_sample",
]


class TrainingError(RuntimeError):
    """Aborted training run: non-finite loss or inconsistent inputs."""


@dataclass
class TrainConfig:
    """Hyperparameters for both stages; JSON-serializable."""

    lr_pretrain: float = 1e-3
    lr_finetune: float = 1e-4
    batch_size: int = 32
    pretrain_epochs: int = 20
    finetune_epochs: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    smoothing_alpha: float = 1.0
    seed: int = 0
    head_kind: str = "generative"
    hmm_order: int = 1
    patience: int = 10
    prior_correction: bool = True
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.head_kind not in ("generative", "discriminative"):
            raise ValueError(f"head_kind must be 'generative' or 'discriminative', got {self.head_kind!r}")
        if self.hmm_order not in (1, 2):
            raise ValueError(f"hmm_order must be 1 or 2, got {self.hmm_order}")
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be positive")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lr_pretrain < 0 or self.lr_finetune < 0:
            raise ValueError("learning rates must be non-negative")
        if self.smoothing_alpha < 0:
            raise ValueError("smoothing_alpha must be non-negative")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValueError("invalid adam hyperparameters")

    def to_json(self) -> str:
        d = {"schema_version": 1}
        d.update(self.__dict__)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        d.pop("schema_version", None)
        return cls(**d)


@dataclass
class TrainReport:
    """Loss/metric trace of one run. ``best_epoch`` of -1 means the
    initial state was never beaten on validation."""

    train_loss: list[float] = field(default_factory=list)
    val_mf1: list[float] = field(default_factory=list)
    best_epoch: int = -1
    test_metrics: dict | None = None

    def to_json(self) -> str:
        d = {
            "schema_version": 1,
            "train_loss": self.train_loss,
            "val_mf1": self.val_mf1,
            "best_epoch": self.best_epoch,
            "test_metrics": self.test_metrics,
            "meta": {"created_at": datetime.now(timezone.utc).isoformat()},
        }
        return json.dumps(d, indent=2, sort_keys=True)


class Adam:
    """Adaptive-moment optimizer over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            update = (self.m[i] / b1t) / (np.sqrt(self.v[i] / b2t) + self.eps)
            p.data = p.data - self.lr * update


def _index_samples(samples: Sequence[SampleSequence]) -> dict[int, SampleSequence]:
    out = {s.sample_id: s for s in samples}
    if len(out) != len(samples):
        raise ValueError("duplicate sample ids")
    return out


def _select(samples: Sequence[SampleSequence], ids: Sequence[int]) -> list[SampleSequence]:
    by_id = _index_samples(samples)
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ValueError(f"split references unknown sample ids, e.g. {missing[0]}")
    return [by_id[i] for i in ids]


def compute_class_priors(samples: Sequence[SampleSequence], num_classes: int) -> np.ndarray:
    """Add-one-smoothed label frequencies pooled over all years; smoothing
    keeps the downstream prior division defined for unseen classes."""
    counts = np.zeros(num_classes)
    for s in samples:
        for lab in s.labels:
            counts[lab] += 1.0
    return (counts + 1.0) / (counts.sum() + num_classes)


def _ce_from_log_scores(log_scores: Tensor, label: int) -> Tensor:
    pick = ad.mean(ad.gather_rows(log_scores, [label]), axis=0)
    return ad.scalar_mul(pick, -1.0)


def _ce_from_fused(fused: Tensor, label: int) -> Tensor:
    pick = ad.mean(ad.gather_rows(fused, [label]), axis=0)
    return ad.sub(ad.logsumexp(fused), pick)


def emissions_for_sample(
    params: EncoderParams, sample: SampleSequence, prior_correction: bool = True
) -> list[np.ndarray]:
    """Per-year emission log-scores for the transition layer (numpy path)."""
    out = []
    for yr in sample.years:
        scores = encode(params, yr.series)
        if params.config.head_kind == "discriminative" and prior_correction:
            if params.class_priors is None:
                raise ValueError("discriminative prior correction requires class_priors on the encoder")
            scores = head_posteriors_to_emission(scores, "discriminative", params.class_priors)
        out.append(scores.log_scores)
    return out


def _emission_tensors_for_sample(
    params: EncoderParams, sample: SampleSequence, prior_correction: bool
) -> list[Tensor]:
    out = []
    correct = params.config.head_kind == "discriminative" and prior_correction
    if correct and params.class_priors is None:
        raise ValueError("discriminative prior correction requires class_priors on the encoder")
    for yr in sample.years:
        t = encode_tensor(params, yr.series)
        if correct:
            t = ad.sub(t, Tensor(np.log(params.class_priors)))
        out.append(t)
    return out


def _sample_cascade_loss(params: EncoderParams, table: hmm.JointTransitionTable, sample: SampleSequence, prior_correction: bool) -> Tensor:
    emissions = _emission_tensors_for_sample(params, sample, prior_correction)
    fused = hmm.cascade_posterior_tensors(table, emissions)
    loss = None
    for fused_y, label in zip(fused, sample.labels):
        ce = _ce_from_fused(fused_y, label)
        loss = ce if loss is None else ad.add(loss, ce)
    return loss


def evaluate_cascade_loss(
    params: EncoderParams,
    table: hmm.JointTransitionTable,
    samples: Sequence[SampleSequence],
    prior_correction: bool = True,
) -> float:
    """Mean per-sample cascade cross-entropy, no training side effects."""
    with ad.paused():
        vals = [float(_sample_cascade_loss(params, table, s, prior_correction).data) for s in samples]
    return float(np.mean(vals))


def predict(
    params: EncoderParams,
    table: hmm.JointTransitionTable | None,
    sample: SampleSequence,
    prior_correction: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-year labels and posteriors; ties break toward the lowest class.

    With a table, posteriors come from the fused cascade; without one, they
    are the head's own per-year posteriors (emission-only mode).
    """
    if table is None:
        rows = [np.exp(encode(params, yr.series).log_scores) for yr in sample.years]
        posteriors = np.stack(rows)
    else:
        emissions = emissions_for_sample(params, sample, prior_correction)
        posteriors = hmm.cascade(table, emissions).posteriors
    return posteriors.argmax(axis=1), posteriors


def evaluate_emission(params: EncoderParams, samples: Sequence[SampleSequence]) -> tuple[list[int], list[int]]:
    """Pooled (references, predictions) from per-year head argmax."""
    refs: list[int] = []
    preds: list[int] = []
    for s in samples:
        for yr in s.years:
            refs.append(yr.label)
            preds.append(int(np.argmax(encode(params, yr.series).log_scores)))
    return refs, preds


def evaluate_cascade(
    params: EncoderParams,
    table: hmm.JointTransitionTable,
    samples: Sequence[SampleSequence],
    prior_correction: bool = True,
) -> tuple[list[int], list[int]]:
    """Pooled (references, predictions) from fused cascade posteriors."""
    refs: list[int] = []
    preds: list[int] = []
    for s in samples:
        labels, _ = predict(params, table, s, prior_correction)
        refs.extend(s.labels)
        preds.extend(int(v) for v in labels)
    return refs, preds


def _mf1(refs: Sequence[int], preds: Sequence[int], num_classes: int) -> float:
    return evaluation.f1_report(evaluation.score(preds, refs, num_classes)).mean_f1


def train_emission(
    samples: Sequence[SampleSequence],
    split,
    encoder_config: EncoderConfig,
    config: TrainConfig,
    init_params: EncoderParams | None = None,
    on_step: Callable[[int, EncoderParams], None] | None = None,
) -> tuple[EncoderParams, TrainReport]:
    """Fit the encoder on yearly samples; best checkpoint by validation mF1.

    Every (year, series, label) triple of every training sequence is an
    independent sample. Generative-head weight rows are re-normalized to
    unit length after every optimizer step.
    """
    if encoder_config.head_kind != config.head_kind:
        raise ValueError(
            f"encoder_config.head_kind={encoder_config.head_kind!r} disagrees with config.head_kind={config.head_kind!r}"
        )
    rng = np.random.default_rng(config.seed)
    train_samples = _select(samples, split.train)
    val_samples = _select(samples, split.val)
    if not train_samples:
        raise ValueError("training split is empty")
    C = encoder_config.num_classes

    params = init_params.copy() if init_params is not None else EncoderParams.init(encoder_config, seed=rng)
    params.set_requires_grad(True)
    params.class_priors = compute_class_priors(train_samples, C)

    yearly = [(yr.series, yr.label) for s in train_samples for yr in s.years]
    optimizer = Adam(params.parameters(), config.lr_pretrain, config.adam_beta1, config.adam_beta2, config.adam_eps)

    def val_score() -> float:
        refs, preds = evaluate_emission(params, val_samples)
        return _mf1(refs, preds, C)

    report = TrainReport()
    best = params.copy()
    best_mf1 = val_score() if val_samples else -np.inf
    step_index = 0
    since_best = 0
    for epoch in range(config.pretrain_epochs):
        order = rng.permutation(len(yearly))
        sample_losses = np.empty(len(yearly))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            with ad.Tape():
                total = None
                for pos, idx in enumerate(batch):
                    series, label = yearly[idx]
                    ce = _ce_from_log_scores(encode_tensor(params, series), label)
                    sample_losses[start + pos] = float(ce.data)
                    total = ce if total is None else ad.add(total, ce)
                loss = ad.scalar_mul(total, 1.0 / len(batch))
                if not np.isfinite(loss.data):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {step_index}")
                optimizer.zero_grad()
                ad.backward(loss)
            optimizer.step()
            params.renormalize_head_rows_()
            if on_step is not None:
                on_step(step_index, params)
            step_index += 1
        report.train_loss.append(float(np.mean(sample_losses)))
        if val_samples:
            mf1 = val_score()
            report.val_mf1.append(mf1)
            if mf1 > best_mf1:
                best_mf1, best, report.best_epoch = mf1, params.copy(), epoch
                since_best = 0
            else:
                since_best += 1
                if since_best > config.patience:
                    break
        else:
            best, report.best_epoch = params.copy(), epoch
    test_samples = _select(samples, split.test)
    if test_samples:
        refs, preds = evaluate_emission(best, test_samples)
        rep = evaluation.f1_report(evaluation.score(preds, refs, C))
        report.test_metrics = {"mean_f1": rep.mean_f1, "accuracy": rep.accuracy}
    return best, report


def finetune_cascade(
    encoder_params: EncoderParams,
    table: hmm.JointTransitionTable,
    samples: Sequence[SampleSequence],
    split,
    config: TrainConfig,
    on_step: Callable[[int, EncoderParams, hmm.JointTransitionTable], None] | None = None,
) -> tuple[EncoderParams, hmm.JointTransitionTable, TrainReport]:
    """Joint fine-tuning of encoder and tables on whole sequences.

    The loss is the mean over training sequences of the summed per-year
    cross-entropy of the fused posteriors. Table logits are re-normalized
    after every step; so are generative head rows. The initial state is the
    first best-checkpoint candidate, so the returned model is never worse
    than the input on validation mF1.
    """
    rng = np.random.default_rng(config.seed)
    train_samples = _select(samples, split.train)
    val_samples = _select(samples, split.val)
    if not train_samples:
        raise ValueError("training split is empty")
    C = encoder_params.config.num_classes
    if table.num_classes != C:
        raise ValueError(f"table has {table.num_classes} classes, encoder has {C}")
    for s in train_samples + val_samples:
        if len(s.years) != table.num_years:
            raise ValueError(
                f"sample {s.sample_id} has {len(s.years)} years, table covers {table.num_years}"
            )

    params = encoder_params.copy()
    params.set_requires_grad(not config.freeze_encoder)
    table = table.copy()
    table.set_requires_grad(True)
    trainable = ([] if config.freeze_encoder else params.parameters()) + list(table.logits)
    optimizer = Adam(trainable, config.lr_finetune, config.adam_beta1, config.adam_beta2, config.adam_eps)

    def val_score(p: EncoderParams, t: hmm.JointTransitionTable) -> float:
        refs, preds = evaluate_cascade(p, t, val_samples, config.prior_correction)
        return _mf1(refs, preds, C)

    report = TrainReport()
    best_params, best_table = params.copy(), table.copy()
    best_mf1 = val_score(params, table) if val_samples else -np.inf
    step_index = 0
    since_best = 0
    for epoch in range(config.finetune_epochs):
        order = rng.permutation(len(train_samples))
        sample_losses = np.empty(len(train_samples))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            with ad.Tape():
                total = None
                for pos, idx in enumerate(batch):
                    ce = _sample_cascade_loss(params, table, train_samples[idx], config.prior_correction)
                    sample_losses[start + pos] = float(ce.data)
                    total = ce if total is None else ad.add(total, ce)
                loss = ad.scalar_mul(total, 1.0 / len(batch))
                if not np.isfinite(loss.data):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {step_index}")
                optimizer.zero_grad()
                ad.backward(loss)
            optimizer.step()
            table.renormalize_()
            if not config.freeze_encoder:
                params.renormalize_head_rows_()
            if on_step is not None:
                on_step(step_index, params, table)
            step_index += 1
        report.train_loss.append(float(np.mean(sample_losses)))
        if val_samples:
            mf1 = val_score(params, table)
            report.val_mf1.append(mf1)
            if mf1 > best_mf1:
                best_mf1, best_params, best_table, report.best_epoch = mf1, params.copy(), table.copy(), epoch
                since_best = 0
            else:
                since_best += 1
                if since_best > config.patience:
                    break
        else:
            best_params, best_table, report.best_epoch = params.copy(), table.copy(), epoch
    test_samples = _select(samples, split.test)
    if test_samples:
        refs, preds = evaluate_cascade(best_params, best_table, test_samples, config.prior_correction)
        rep = evaluation.f1_report(evaluation.score(preds, refs, C))
        report.test_metrics = {"mean_f1": rep.mean_f1, "accuracy": rep.accuracy}
    return best_params, best_table, report
