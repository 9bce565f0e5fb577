"""Command-line entry point: ``dnetloc synth|split|audit|train|eval|compare``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as dmod
from . import labelspace as ls
from .metrics import AucReport, ReportMismatch, compare_runs, evaluate_scores, write_svg
from .splits import SplitError, pooled_split, read_split_files, verify_no_leakage, write_split_files
from .training import PRESETS, NumericalFailure, RunConfig, evaluate_run, parse_key_values, prepare_data, train

logger = logging.getLogger("dnetloc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _onoff(v: str) -> bool:
    low = v.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {v!r}")


def _read_config(path) -> dict[str, str]:
    return parse_key_values(Path(path).read_text(encoding="utf-8")) if path else {}


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    values = _read_config(args.config)
    if args.patients is not None:
        values["patients_cxr14"] = values["patients_plco"] = args.patients
    if args.images_per_patient_mean is not None:
        values["ipp_cxr14"] = values["ipp_plco"] = args.images_per_patient_mean
    for key in ("patients_cxr14", "patients_plco", "size", "seed"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    if args.location_correlation is not None:
        values["location_correlation"] = args.location_correlation
    cfg = dmod.SynthConfig.from_dict(values)
    corpus = dmod.synth_generate(cfg)
    out = Path(args.out)
    dmod.write_corpus(corpus, out)
    (out / "synth_config.txt").write_text("".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items()))
    for tag, m in corpus.manifests.items():
        s = m.stats
        print(f"{tag:6s} images {s.images:6d}  patients {s.patients:6d}  images/patient {s.images_per_patient:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- split / audit


def cmd_split(args) -> int:
    manifests = dmod.load_corpus(args.corpus)
    assignment = pooled_split(manifests, tuple(args.ratios), args.seed)
    out = Path(args.out) if args.out else Path(args.corpus) / "splits"
    for p in write_split_files(assignment, out):
        print(f"wrote {p}")
    report = verify_no_leakage(assignment, list(manifests.values()))
    print(report.render())
    return EXIT_OK if report.clean else EXIT_DATA


def cmd_audit(args) -> int:
    manifests = dmod.load_corpus(args.corpus)
    split_dir = Path(args.splits) if args.splits else Path(args.corpus) / "splits"
    report = verify_no_leakage(read_split_files(split_dir, list(manifests.values())), list(manifests.values()))
    print(report.render())
    return EXIT_OK if report.clean else EXIT_DATA


# ---------------------------------------------------------------- train


_TRAIN_FLAGS = (
    "corpus", "splits", "seed", "epochs", "batch_size", "lr", "patience", "min_delta", "min_lr",
    "loss_mode", "location", "pooled", "norm", "blocks", "layers_per_block", "growth", "batchnorm", "dtype",
)


def run_config_from_args(args) -> RunConfig:
    values: dict = dict(PRESETS[args.preset])
    values.update(_read_config(args.config))
    for key in _TRAIN_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if not values.get("splits") and values.get("corpus"):
        values["splits"] = str(Path(values["corpus"]) / "splits")
    cfg = RunConfig.from_mapping(values)
    if not cfg.corpus:
        raise UsageError("no corpus given (use --corpus or a config file)")
    return cfg


def cmd_train(args) -> int:
    cfg = run_config_from_args(args)
    summary = train(cfg, args.out)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- eval / compare


def _read_predictions(path, ids: list[str], C: int) -> np.ndarray:
    """CSV with an image_id column followed by one score column per label."""
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for n, row in enumerate(csv.reader(fh), 1):
            if n == 1 and row and row[0] == "image_id":
                continue
            if len(row) != C + 1:
                raise ValueError(f"{path}:{n}: expected {C + 1} fields, got {len(row)}")
            rows[row[0]] = [float(v) for v in row[1:]]
    missing = [i for i in ids if i not in rows]
    if missing:
        raise ValueError(f"{path}: no predictions for {len(missing)} images, e.g. {missing[0]!r}")
    return np.array([rows[i] for i in ids])


def _write_report(report: AucReport, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    report.write_csv(out / "report.csv")
    for tag in ls.DATASETS:
        write_svg(report, tag, out / f"auc_{tag.lower()}.svg")


def cmd_eval(args) -> int:
    run = Path(args.run) if args.run else None
    values = _read_config(run / "config.txt") if run else {}
    for key in ("corpus", "splits"):
        if getattr(args, key):
            values[key] = getattr(args, key)
    if not values.get("corpus"):
        raise UsageError("eval needs --run or --corpus")
    if not values.get("splits"):
        values["splits"] = str(Path(values["corpus"]) / "splits")
    cfg = RunConfig.from_mapping(values)
    if args.predictions:
        subsets, _, space = prepare_data(cfg)
        sub = subsets[args.subset]
        scores = _read_predictions(args.predictions, sub.ids, space.C)
        report = evaluate_scores(scores, sub.labels, sub.masks, space, sub.ids)
        report.meta = {"predictions": Path(args.predictions).name, "subset": args.subset}
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else (run / "best.ckpt" if run else None)
        if ckpt is None:
            raise UsageError("eval needs --checkpoint, --run or --predictions")
        report = evaluate_run(ckpt, cfg, args.subset)
    out = Path(args.out) if args.out else (run / f"eval_{args.subset}" if run else Path(f"eval_{args.subset}"))
    _write_report(report, out)
    summary = report.summary()
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def _load_report(path) -> AucReport:
    p = Path(path)
    if p.is_dir():
        candidates = [p / "report.json", p / "eval_test" / "report.json"]
        p = next((c for c in candidates if c.exists()), candidates[0])
    return AucReport.from_json(p.read_text(encoding="utf-8"))


def cmd_compare(args) -> int:
    table = compare_runs(_load_report(args.a), _load_report(args.b))
    print(table.render())
    if args.out:
        table.write_csv(args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="warnings only")
    p = _Parser(prog="dnetloc", description="Location-aware multi-label chest X-ray classifier, desk scale.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    s = add("synth", "generate a planted-signal corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="key = value file of synth options")
    s.add_argument("--seed", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--patients", type=int, help="patients per dataset")
    s.add_argument("--patients-cxr14", type=int)
    s.add_argument("--patients-plco", type=int)
    s.add_argument("--images-per-patient-mean", type=float)
    s.add_argument("--location-correlation", type=_onoff, metavar="on|off")
    s.set_defaults(func=cmd_synth)

    s = add("split", "patient-wise split files plus audit")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", help="split directory (default CORPUS/splits)")
    s.add_argument("--ratios", type=float, nargs=3, default=[0.7, 0.1, 0.2], metavar=("TRAIN", "VAL", "TEST"))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    s = add("audit", "check split files for patient leakage")
    s.add_argument("--corpus", required=True)
    s.add_argument("--splits", help="split directory (default CORPUS/splits)")
    s.set_defaults(func=cmd_audit)

    s = add("train", "train one run")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--config", help="key = value run config (e.g. a previous run's config.txt)")
    s.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    s.add_argument("--corpus")
    s.add_argument("--splits")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--patience", type=int)
    s.add_argument("--min-delta", type=float)
    s.add_argument("--min-lr", type=float)
    s.add_argument("--loss-mode", choices=["weighted", "unweighted"])
    s.add_argument("--location", type=_onoff, metavar="on|off")
    s.add_argument("--pooled", type=_onoff, metavar="on|off")
    s.add_argument("--norm", choices=["dataset", "imagenet"])
    s.add_argument("--blocks", type=int)
    s.add_argument("--layers-per-block", type=int)
    s.add_argument("--growth", type=int)
    s.add_argument("--batchnorm", type=_onoff, metavar="on|off")
    s.add_argument("--dtype", choices=["float32", "float64"])
    s.set_defaults(func=cmd_train)

    s = add("eval", "per-label AUC report")
    s.add_argument("--run", help="run directory (uses its config.txt and best.ckpt)")
    s.add_argument("--checkpoint")
    s.add_argument("--corpus")
    s.add_argument("--splits")
    s.add_argument("--predictions", help="CSV of image_id plus one score per label, scored instead of a model")
    s.add_argument("--subset", choices=["train", "val", "test"], default="test")
    s.add_argument("--out", help="report directory (default RUN/eval_SUBSET)")
    s.set_defaults(func=cmd_eval)

    s = add("compare", "per-label AUC deltas b - a")
    s.add_argument("a", help="report.json or a directory holding one")
    s.add_argument("b")
    s.add_argument("--out", help="write the delta table as CSV")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    verbose, quiet = getattr(args, "verbose", False), getattr(args, "quiet", False)
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dnetloc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"dnetloc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, SplitError, ReportMismatch) as exc:
        print(f"dnetloc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
