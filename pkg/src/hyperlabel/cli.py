"""Command-line entry point: ``hyperlabel <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile

import numpy as np

from . import adapters, datagen, hlmnet, labelcore, oracle, trainer
from .errors import (
    ContractViolation,
    EnumerationCapError,
    GenerationError,
    LabelParseError,
    ModelFileError,
    NoValidLabelingError,
    NonFiniteError,
    TrainingError,
    ValidSetTooSparseError,
)

EXIT_OK = 0
EXIT_USAGE = 2          # argparse's own code
EXIT_INPUT = 3          # unreadable or malformed input file
EXIT_CONTRACT = 4       # inputs parse but break a precondition
EXIT_ORACLE = 5         # enumeration cap, empty valid set, too-sparse sampling
EXIT_MODEL = 6          # model file version/shape/corruption
EXIT_TRAINING = 7       # generator failure or every run diverged
EXIT_NUMERIC = 8        # non-finite values

FORMATS = """\
file formats:
  label matrix CSV   one row per data point, comma-separated integers.
                     An optional first line starting with '#' is a header.
                     Binary: -1, 0 (abstain), 1. Multi-class: 0 (abstain)
                     or a class id 1..C. UTF-8; LF or CRLF line endings.
  labels CSV         one integer label per line (-1/1, or 1..C).
  subset CSV         'index,label' per line; index is the 0-based row.
  predictions CSV    one probability per line (binary), or C comma-separated
                     class probabilities (multi-class), 17 significant digits.
  model JSON         {"version", "K", "d", "arrays": {name: nested lists}}.
  oracle JSON        {"estimate", "valid_count", "method", "samples_drawn"}.
  eval JSON          {"metric", "value", "n"}.

exit codes:
  0 success, 2 usage, 3 malformed input, 4 precondition violated,
  5 oracle failure, 6 bad model file, 7 training/generation failure,
  8 non-finite numbers.
"""


def _atomic_write_text(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _require_file(path):
    if not os.path.isfile(path):
        raise LabelParseError(f"no such file: {path}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    if args.count < 1:
        raise ContractViolation("--count must be >= 1")
    n_range = tuple(args.n_range)
    m_range = tuple(args.m_range)
    if args.kind == "uniform":
        cfg = datagen.GenConfig(L_m=m_range[0], H_m=m_range[1], L_n=n_range[0], H_n=n_range[1],
                                master_seed=args.seed)
        pairs = [
            datagen.gen_pair(cfg, datagen.stream(args.seed, datagen.TRAIN_STREAM, 0, 0, k),
                             lineage=(args.seed, datagen.TRAIN_STREAM, 0, 0, k))
            for k in range(args.count)
        ]
        params = {"L_n": cfg.L_n, "H_n": cfg.H_n, "L_m": cfg.L_m, "H_m": cfg.H_m,
                  "entry_distribution": cfg.entry_distribution}
    else:
        pairs = datagen.gen_condind_dataset(args.count, n_range, m_range, args.seed)
        params = {"n_range": list(n_range), "m_range": list(m_range),
                  "prior_range": [0.3, 0.7], "accuracy_range": [0.55, 0.95],
                  "propensity_range": [0.1, 0.9]}
    staging = tempfile.mkdtemp(prefix=".gen-", dir=os.path.dirname(os.path.abspath(args.out)) or ".")
    try:
        for k, pair in enumerate(pairs):
            d = os.path.join(staging, f"dataset_{k:05d}")
            os.makedirs(d)
            labelcore.save_matrix(os.path.join(d, "X.csv"), pair.X)
            labelcore.save_labels(os.path.join(d, "y.csv"), pair.y)
            meta = {"generator": args.kind, "seed_lineage": [int(v) for v in pair.seed_lineage],
                    "master_seed": args.seed, "index": k, "parameters": params,
                    "attempts": int(pair.attempts), "n": int(pair.X.shape[0]), "m": int(pair.X.shape[1])}
            meta.update(pair.meta)
            with open(os.path.join(d, "meta.json"), "w", encoding="utf-8") as fh:
                json.dump(meta, fh, indent=2)
                fh.write("\n")
        os.makedirs(args.out, exist_ok=True)
        for name in sorted(os.listdir(staging)):
            target = os.path.join(args.out, name)
            if os.path.exists(target):
                shutil.rmtree(target)
            os.replace(os.path.join(staging, name), target)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return EXIT_OK


def cmd_train(args):
    _require_file(args.config)
    cfg = trainer.TrainConfig.from_json_file(args.config)
    records = []

    def on_record(rec):
        records.append(rec)
        if not args.quiet:
            print(json.dumps(rec), flush=True)

    selected, reports = trainer.train_select(cfg, workers=args.workers, on_record=on_record)
    trainer.write_outputs(args.out, selected, reports, cfg)
    with open(os.path.join(args.out, "progress.jsonl"), "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return EXIT_OK


def cmd_infer(args):
    _require_file(args.model)
    _require_file(args.matrix)
    params = hlmnet.load_params(args.model)
    if args.multiclass:
        X = labelcore.load_matrix(args.matrix, num_classes=args.multiclass)
        probs = adapters.multiclass_infer(params, X)
    else:
        X = labelcore.load_matrix(args.matrix)
        probs = hlmnet.forward(params, X)
    labelcore.save_predictions(args.out, probs)
    return EXIT_OK


def cmd_finetune(args):
    for p in (args.model, args.matrix, args.labels):
        _require_file(p)
    params = hlmnet.load_params(args.model)
    X = labelcore.load_matrix(args.matrix)
    subset = adapters.load_subset(args.labels)
    tuned = adapters.finetune(params, X, subset, lr=args.lr, epochs=args.epochs)
    hlmnet.save_params(args.out, tuned)
    return EXIT_OK


def cmd_oracle(args):
    _require_file(args.matrix)
    X = labelcore.load_matrix(args.matrix)
    if args.mc is not None:
        result = oracle.mc_hstar(X, args.mc, seed=args.seed)
    else:
        result = oracle.exact_hstar(X, cap=args.cap)
    _atomic_write_text(args.out, result.to_json() + "\n")
    return EXIT_OK


def cmd_mv(args):
    _require_file(args.matrix)
    X = labelcore.load_matrix(args.matrix)
    labelcore.save_predictions(args.out, labelcore.majority_vote(X))
    return EXIT_OK


def evaluate(pred, truth, metric="acc", threshold=0.5, positive=1):
    """Accuracy or F1 of predictions against ground truth.

    ``pred`` is a probability vector (binary; thresholded with ties to +1) or an
    n x C soft-label matrix (argmax, classes 1..C). F1 uses ``positive`` as the
    positive class and is 0.0 when there are no true positives.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth)
    if pred.shape[0] != truth.shape[0]:
        raise ContractViolation(f"{pred.shape[0]} predictions for {truth.shape[0]} labels")
    if pred.ndim == 1:
        hard = labelcore.hard_labels(pred, threshold)
    else:
        hard = pred.argmax(axis=1) + 1
    if metric == "acc":
        value = float(np.mean(hard == truth))
    elif metric == "f1":
        tp = int(np.sum((hard == positive) & (truth == positive)))
        fp = int(np.sum((hard == positive) & (truth != positive)))
        fn = int(np.sum((hard != positive) & (truth == positive)))
        value = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
    else:
        raise ContractViolation(f"unknown metric {metric!r}")
    return {"metric": metric, "value": value, "n": int(truth.shape[0])}


def cmd_eval(args):
    _require_file(args.pred)
    _require_file(args.truth)
    result = evaluate(labelcore.load_predictions(args.pred), labelcore.load_labels(args.truth),
                      args.metric, args.threshold, args.positive)
    text = json.dumps(result)
    if args.out:
        _atomic_write_text(args.out, text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hyperlabel",
        description="Aggregate labeling-function votes with a pre-trained hyper label model.",
        epilog=FORMATS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("gen", help="write synthetic datasets", epilog=FORMATS, formatter_class=fmt)
    p.add_argument("--kind", choices=("uniform", "condind"), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory; one dataset_NNNNN/ per dataset")
    p.add_argument("--n-range", type=int, nargs=2, default=(20, 200), metavar=("LO", "HI"))
    p.add_argument("--m-range", type=int, nargs=2, default=(3, 15), metavar=("LO", "HI"))
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="pre-train and select a model", epilog=FORMATS, formatter_class=fmt)
    p.add_argument("--config", required=True, help="JSON config; see configs/desk.json")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1, help="parallel runs (processes)")
    p.add_argument("--quiet", action="store_true", help="do not echo progress records")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict labels in one forward pass", epilog=FORMATS, formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--matrix", required=True)
    p.add_argument("--multiclass", type=int, metavar="C", help="matrix holds classes 1..C")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("finetune", help="fine-tune on revealed labels", epilog=FORMATS, formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--matrix", required=True)
    p.add_argument("--labels", required=True, help="subset CSV of index,label")
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=adapters.FINETUNE_LR)
    p.add_argument("--epochs", type=int, default=None, help="default round(sqrt(#labels))")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("oracle", help="compute the optimal estimator h*", epilog=FORMATS, formatter_class=fmt)
    p.add_argument("--matrix", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--exact", action="store_true", help="enumerate (default)")
    g.add_argument("--mc", type=int, metavar="N", help="Monte-Carlo with N accepted samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cap", type=int, default=oracle.DEFAULT_CAP, help="max n for enumeration")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("mv", help="majority-vote baseline", epilog=FORMATS, formatter_class=fmt)
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mv)

    p = sub.add_parser("eval", help="score predictions", epilog=FORMATS, formatter_class=fmt)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--metric", choices=("acc", "f1"), default="acc")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--positive", type=int, default=1, help="positive class for F1")
    p.add_argument("--out", help="also write the JSON result here")
    p.set_defaults(func=cmd_eval)
    return parser


_EXIT_FOR = [
    (LabelParseError, EXIT_INPUT),
    (ModelFileError, EXIT_MODEL),
    ((EnumerationCapError, NoValidLabelingError, ValidSetTooSparseError), EXIT_ORACLE),
    ((TrainingError, GenerationError), EXIT_TRAINING),
    (NonFiniteError, EXIT_NUMERIC),
    (ContractViolation, EXIT_CONTRACT),
]


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:
        for kinds, code in _EXIT_FOR:
            if isinstance(exc, kinds):
                print(f"hyperlabel {args.command}: error: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
