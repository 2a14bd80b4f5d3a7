"""Command-line pipeline: synthesize, split, train, initialize, fine-tune,
infer, evaluate.

Each stage reads and writes files, so stages compose via the filesystem and
every run is reproducible from its seed. Exit codes: 0 success, 1 aborted
computation (for example a non-finite loss), 2 usage or I/O errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

from . import data as dt
from . import evaluation, hmm, training
from .encoder import EncoderConfig, EncoderParams

__all__ = ["main"]


def _read_meta(ckpt: Path) -> dict:
    return json.loads((Path(ckpt) / "manifest.json").read_text()).get("meta", {})


def _infer_shape(samples) -> tuple[int, int]:
    """(num_bands, num_classes) from a loaded dataset."""
    bands = samples[0].years[0].series.num_bands
    classes = 1 + max(lab for s in samples for lab in s.labels)
    return bands, classes


def _cmd_gen_synth(args) -> int:
    spec = dt.SynthSpec.from_json(Path(args.spec).read_text())
    samples = dt.generate(spec, args.n, seed=args.seed)
    dt.write_dataset(args.out, samples)
    per_year = [Counter() for _ in range(spec.num_years)]
    for s in samples:
        for y, lab in enumerate(s.labels):
            per_year[y][lab] += 1
    orbits = len({dt.canonical_rotation(s.labels) for s in samples})
    print(f"wrote {len(samples)} samples to {args.out}")
    print(f"rotation orbits: {orbits}")
    for y, counts in enumerate(per_year):
        row = " ".join(f"{c}:{counts.get(c, 0)}" for c in range(spec.num_classes))
        print(f"year {y} labels  {row}")
    return 0


def _cmd_split(args) -> int:
    samples = dt.read_dataset(args.data)
    if not samples:
        print(f"{args.data}: dataset is empty", file=sys.stderr)
        return 2
    clusters = dt.cluster(samples, threshold=args.threshold)
    split = dt.stratified_split(clusters, tuple(args.probabilities), seed=args.seed)
    Path(args.out).write_text(split.to_json() + "\n")
    n = len(samples)
    print(f"clusters: {len(set(clusters.values()))}")
    print(
        f"split fractions  train {len(split.train) / n:.3f}  val {len(split.val) / n:.3f}  test {len(split.test) / n:.3f}"
    )
    return 0


def _load_train_config(args) -> training.TrainConfig:
    if args.train_config:
        return training.TrainConfig.from_json(Path(args.train_config).read_text())
    return training.TrainConfig()


def _cmd_train_emission(args) -> int:
    samples = dt.read_dataset(args.data)
    split = dt.DatasetSplit.from_json(Path(args.split).read_text())
    cfg = _load_train_config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    bands, classes = _infer_shape(samples)
    if args.encoder_config:
        enc = EncoderConfig.from_dict(json.loads(Path(args.encoder_config).read_text()))
        if enc.head_kind != cfg.head_kind:
            print(
                f"encoder config head_kind {enc.head_kind!r} disagrees with train config {cfg.head_kind!r}",
                file=sys.stderr,
            )
            return 2
    else:
        enc = EncoderConfig(num_bands=bands, num_classes=classes, head_kind=cfg.head_kind)
    params, report = training.train_emission(samples, split, enc, cfg)
    params.save(args.out, extra_meta={"stage": "pretrained", "prior_correction": cfg.prior_correction})
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    best = report.val_mf1[report.best_epoch] if 0 <= report.best_epoch < len(report.val_mf1) else None
    print(f"saved encoder to {args.out} (best epoch {report.best_epoch}" + (f", val mF1 {best:.4f})" if best is not None else ")"))
    return 0


def _cmd_init_hmm(args) -> int:
    samples = dt.read_dataset(args.data)
    split = dt.DatasetSplit.from_json(Path(args.split).read_text())
    _, classes = _infer_shape(samples)
    if args.classes:
        classes = args.classes
    by_id = {s.sample_id: s for s in samples}
    labels = [by_id[i].labels for i in split.train]
    if not labels:
        print("training split is empty", file=sys.stderr)
        return 2
    table = hmm.init_from_cooccurrence(labels, classes, len(labels[0]), order=args.order, smoothing=args.alpha)
    table.save(args.out)
    print(f"saved order-{args.order} tables for {table.num_years} years to {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    samples = dt.read_dataset(args.data)
    split = dt.DatasetSplit.from_json(Path(args.split).read_text())
    params = EncoderParams.load(args.encoder)
    table = hmm.JointTransitionTable.load(args.hmm)
    cfg = _load_train_config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.head_kind != params.config.head_kind:
        cfg = replace(cfg, head_kind=params.config.head_kind)
    if cfg.hmm_order != table.order:
        cfg = replace(cfg, hmm_order=table.order)
    out_params, out_table, report = training.finetune_cascade(params, table, samples, split, cfg)
    out_params.save(args.out_encoder, extra_meta={"stage": "finetuned", "prior_correction": cfg.prior_correction})
    out_table.save(args.out_hmm)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    print(f"saved fine-tuned encoder to {args.out_encoder}, tables to {args.out_hmm} (best epoch {report.best_epoch})")
    return 0


def _cmd_infer(args) -> int:
    samples = dt.read_dataset(args.data)
    params = EncoderParams.load(args.encoder)
    prior_correction = bool(_read_meta(Path(args.encoder)).get("prior_correction", True))
    table = None
    if args.mode in ("hmm1", "hmm2"):
        if not args.hmm:
            print(f"mode {args.mode} requires --hmm", file=sys.stderr)
            return 2
        table = hmm.JointTransitionTable.load(args.hmm)
        want = 1 if args.mode == "hmm1" else 2
        if table.order != want:
            print(f"mode {args.mode} needs an order-{want} table, checkpoint has order {table.order}", file=sys.stderr)
            return 2
    with open(args.out, "w") as fh:
        for s in samples:
            labels, posteriors = training.predict(params, table, s, prior_correction)
            fh.write(
                json.dumps({"id": s.sample_id, "labels": [int(v) for v in labels], "posteriors": posteriors.tolist()})
                + "\n"
            )
    print(f"wrote predictions for {len(samples)} samples to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    samples = dt.read_dataset(args.data)
    by_id = {s.sample_id: s for s in samples}
    refs: list[int] = []
    preds: list[int] = []
    per_year: dict[int, tuple[list[int], list[int]]] = {}
    classes = args.classes or 0
    with open(args.pred) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sample = by_id[rec["id"]]
            except (json.JSONDecodeError, KeyError) as e:
                print(f"{args.pred}: line {lineno}: {e}", file=sys.stderr)
                return 2
            if len(rec["labels"]) != len(sample.years):
                print(f"{args.pred}: line {lineno}: year count mismatch", file=sys.stderr)
                return 2
            if not args.classes and rec.get("posteriors"):
                classes = max(classes, len(rec["posteriors"][0]))
            for yr, pred in zip(sample.years, rec["labels"]):
                refs.append(yr.label)
                preds.append(int(pred))
                per_year.setdefault(yr.year, ([], []))[0].append(yr.label)
                per_year[yr.year][1].append(int(pred))
    if not refs:
        print("no predictions matched the dataset", file=sys.stderr)
        return 2
    if not classes:
        classes = 1 + max(max(refs), max(preds))
    cm = evaluation.score(preds, refs, classes)
    rep = evaluation.f1_report(cm)
    print(rep.format_table())
    if args.per_year:
        for year in sorted(per_year):
            r, p = per_year[year]
            year_rep = evaluation.f1_report(evaluation.score(p, r, classes))
            print(f"year {year}: mF1 {year_rep.mean_f1:.4f}  acc {year_rep.accuracy:.4f}")
    if args.report:
        d = rep.to_dict()
        d["mode"] = args.mode
        if args.per_year:
            d["per_year"] = {
                str(year): evaluation.f1_report(evaluation.score(p, r, classes)).mean_f1
                for year, (r, p) in sorted(per_year.items())
            }
        Path(args.report).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    if args.cm_csv:
        cm.to_csv(args.cm_csv)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascadehmm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic rotation dataset")
    p.add_argument("--spec", required=True, help="SynthSpec JSON file")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="output JSONL dataset")
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("split", help="cluster rotations and draw train/val/test")
    p.add_argument("--data", required=True, help="JSONL dataset")
    p.add_argument("--threshold", type=float, default=1.0, help="clustering distance cutoff")
    p.add_argument("--probabilities", type=float, nargs=3, default=(0.6, 0.2, 0.2), metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output split JSON")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train-emission", help="pretrain the emission encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--train-config", help="TrainConfig JSON (defaults used when omitted)")
    p.add_argument("--encoder-config", help="EncoderConfig JSON (inferred from data when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="encoder checkpoint directory")
    p.add_argument("--report", help="TrainReport JSON path")
    p.set_defaults(func=_cmd_train_emission)

    p = sub.add_parser("init-hmm", help="initialize transition tables from co-occurrence counts")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--order", type=int, choices=(1, 2), default=1)
    p.add_argument("--alpha", type=float, default=1.0, help="additive smoothing")
    p.add_argument("--classes", type=int, help="number of classes (inferred when omitted)")
    p.add_argument("--out", required=True, help="table checkpoint directory")
    p.set_defaults(func=_cmd_init_hmm)

    p = sub.add_parser("finetune", help="fine-tune encoder and tables end to end")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--encoder", required=True, help="pretrained encoder checkpoint")
    p.add_argument("--hmm", required=True, help="initialized table checkpoint")
    p.add_argument("--train-config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-encoder", required=True)
    p.add_argument("--out-hmm", required=True)
    p.add_argument("--report")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("infer", help="write per-sample labels and posteriors")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--hmm", help="table checkpoint (hmm1/hmm2 modes)")
    p.add_argument("--mode", choices=("emission-only", "hmm1", "hmm2"), default="emission-only")
    p.add_argument("--out", required=True, help="output predictions JSONL")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score predictions against dataset labels")
    p.add_argument("--pred", required=True, help="predictions JSONL from infer")
    p.add_argument("--data", required=True, help="JSONL dataset with reference labels")
    p.add_argument("--classes", type=int, help="number of classes (inferred when omitted)")
    p.add_argument("--mode", default=None, help="tag recorded in the report")
    p.add_argument("--per-year", action="store_true", help="also report per-year scores")
    p.add_argument("--report", help="report JSON path")
    p.add_argument("--cm-csv", help="confusion matrix CSV path")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except training.TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
