"""Run configuration, data preparation and the training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import data as dmod
from . import labelspace as ls
from .lossfns import batch_weights, pooled_loss, pooled_loss_grad_logits, unit_weights
from .metrics import AucReport, evaluate_scores, image_set_hash
from .netcore import DenseNetLoc, ModelSpec, read_checkpoint, save_checkpoint
from .optim import Adam, NonFiniteGradient, PlateauPolicy
from .splits import read_split_files

logger = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    corpus: str = ""
    splits: str = ""
    seed: int = 0
    batch_size: int = 32
    epochs: int = 20
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 3
    min_delta: float = 1e-4
    min_lr: float = 1e-6
    loss_mode: str = "weighted"  # weighted | unweighted
    location: bool = True
    pooled: bool = True
    norm: str = "dataset"  # dataset | imagenet
    blocks: int = 2
    layers_per_block: int = 4
    growth: int = 8
    batchnorm: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.loss_mode not in ("weighted", "unweighted"):
            raise ValueError(f"loss_mode must be weighted or unweighted, not {self.loss_mode!r}")
        if self.norm not in ("dataset", "imagenet"):
            raise ValueError(f"norm must be dataset or imagenet, not {self.norm!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "on" if v else "off"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        values = parse_key_values(text)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in values.items():
            if k not in kinds:
                raise KeyError(f"unknown config key {k!r}")
            out[k] = coerce(v, kinds[k])
        return cls(**out)


PRESETS = {
    "desk": {},
    # the published full-scale setting; not exercised by the test suite
    "faithful": {"batch_size": 128, "batchnorm": True, "dtype": "float32"},
}


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def coerce(v, kind: str):
    if not isinstance(v, str):
        return v
    if kind == "bool":
        low = v.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {v!r}")
    if kind == "int":
        return int(v)
    if kind == "float":
        return float(v)
    return v


# ---------------------------------------------------------------- data preparation


@dataclass
class SubsetData:
    ids: list[str]
    tags: np.ndarray
    x: np.ndarray  # (N, H, W) normalised single channel
    labels: np.ndarray  # (N, C) int8
    masks: np.ndarray  # (N, C) int8
    channel_affine: np.ndarray  # (3, 2): channel c = a_c * x + b_c

    def images(self, idx=None) -> np.ndarray:
        x = self.x if idx is None else self.x[idx]
        a = self.channel_affine[:, 0].astype(x.dtype)[None, :, None, None]
        b = self.channel_affine[:, 1].astype(x.dtype)[None, :, None, None]
        return x[:, None] * a + b

    def __len__(self):
        return len(self.ids)


def load_pixels(record: dmod.SampleRecord, corpus_dir) -> np.ndarray:
    path = Path(record.path) if record.path else Path(corpus_dir) / "images" / f"{record.image_id}.png"
    return dmod.to_8bit(dmod.read_image(path), record.dataset)


def prepare_data(cfg: RunConfig, space: ls.LabelSpace | None = None, norm_stats: dict | None = None):
    """Load corpus and split files into normalised arrays per subset.

    Dataset statistics come from the training subset only, unless
    ``norm_stats`` (as stored in a checkpoint) is supplied.
    """
    space = space or ls.build_combined_labelspace()
    manifests = dmod.load_corpus(cfg.corpus)
    assignment = read_split_files(cfg.splits, list(manifests.values()))
    records = {r.image_id: r for m in manifests.values() for r in m.records}
    pixels = {}
    for iid in sorted(assignment.image_subset):
        pixels[iid] = load_pixels(records[iid], cfg.corpus)
    if norm_stats is None:
        norm_stats = {}
        for tag in manifests:
            train = [pixels[i] for i in assignment.images("train") if records[i].dataset == tag]
            if train:
                st = dmod.dataset_stats(train)
                norm_stats[tag] = [st.mean, st.std]
    subsets = {}
    for subset in ("train", "val", "test"):
        ids = assignment.images(subset)
        if ids:
            subsets[subset] = _build_subset(ids, records, pixels, space, cfg, norm_stats)
    return subsets, norm_stats, space


def _build_subset(ids, records, pixels, space, cfg, norm_stats):
    xs = np.empty((len(ids),) + pixels[ids[0]].shape, dtype=cfg.dtype)
    for k, i in enumerate(ids):
        v = pixels[i].astype(np.float64)
        if cfg.norm == "dataset":
            mean, std = norm_stats[records[i].dataset]
            if not std > 0:
                raise ValueError(f"{records[i].dataset}: zero pixel std in training split")
            xs[k] = (v - mean) / std
        else:
            xs[k] = v / 255.0
    if cfg.norm == "dataset":
        affine = np.array([[1.0, 0.0]] * 3)
    else:
        affine = np.stack([1.0 / dmod.IMAGENET_STD, -dmod.IMAGENET_MEAN / dmod.IMAGENET_STD], axis=1)
    labels = np.stack([ls.build_label_vector(records[i], space) for i in ids])
    masks = np.stack([ls.build_mask_vector(records[i], space, cfg.location) for i in ids])
    tags = np.array([records[i].dataset for i in ids])
    return SubsetData(ids, tags, xs, labels, masks, affine)


# ---------------------------------------------------------------- training


def model_spec_for(cfg: RunConfig, height: int, width: int, n_classes: int) -> ModelSpec:
    return ModelSpec(
        height=height,
        width=width,
        n_classes=n_classes,
        blocks=cfg.blocks,
        layers_per_block=cfg.layers_per_block,
        growth=cfg.growth,
        batchnorm=cfg.batchnorm,
        dtype=cfg.dtype,
    )


def _weights(cfg, labels, masks):
    return batch_weights(labels, masks) if cfg.loss_mode == "weighted" else unit_weights(labels, masks)


def subset_loss(model, sub: SubsetData, cfg: RunConfig, preds=None):
    """Loss over a whole subset with weights from the subset's own counts."""
    if preds is None:
        preds = model.predict(sub.images())
    return pooled_loss(preds, sub.labels, sub.masks, _weights(cfg, sub.labels, sub.masks)), preds


def recall_at_half(preds, labels, masks) -> float:
    """Mean over labels with positives of the fraction of positives scored >= 0.5."""
    vals = []
    for n in range(labels.shape[1]):
        sel = (masks[:, n] != 0) & (labels[:, n] != 0)
        if sel.any():
            vals.append(float(np.mean(preds[sel, n] >= 0.5)))
    return float(np.mean(vals)) if vals else float("nan")


def _r(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def train(cfg: RunConfig, out_dir, prepared=None) -> dict:
    """Train one run into ``out_dir``; returns the summary written to summary.json.

    Output files: config.txt, train_log.csv, best.ckpt, last.ckpt, summary.json.
    Nothing time-dependent is written, so equal configs give equal bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    subsets, norm_stats, space = prepared or prepare_data(cfg)
    tr, va = subsets["train"], subsets.get("val")
    H, W = tr.x.shape[1:]
    model = DenseNetLoc(model_spec_for(cfg, H, W, space.C), seed=cfg.seed)
    opt = Adam(model.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    plateau = PlateauPolicy(cfg.lr, 0.1, cfg.patience, cfg.min_delta, cfg.min_lr)
    extra = {"norm_stats": norm_stats, "norm": cfg.norm, "location": cfg.location, "labelspace": json.loads(space.to_json())}
    names = space.qualified_names()
    best_val = math.inf
    best_epoch = 0
    t0 = time.perf_counter()
    with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
        log = csv.writer(fh, lineterminator="\n")
        log.writerow(["epoch", "split", "lr", "total", "mean_auc", "recall"] + names)
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            per_label = np.zeros(space.C)
            total, n_batches = 0.0, 0
            for idx in dmod.mixed_batch_sampler(tr.tags, cfg.batch_size, cfg.seed, epoch, cfg.pooled):
                y, m = tr.labels[idx], tr.masks[idx]
                w = _weights(cfg, y, m)
                model.zero_grad()
                p = model.forward(tr.images(idx))
                loss = pooled_loss(p, y, m, w)
                if not math.isfinite(loss.total):
                    raise NumericalFailure(f"epoch {epoch}: non-finite training loss {loss.total}")
                model.backward_logits(pooled_loss_grad_logits(p, y, m, w))
                try:
                    opt.step()
                except NonFiniteGradient as exc:
                    raise NumericalFailure(f"epoch {epoch}: {exc}") from None
                total += loss.total
                per_label += loss.per_label
                n_batches += 1
            log.writerow([epoch, "train", _r(opt.lr), _r(total / n_batches), "", ""] + [_r(v) for v in per_label / n_batches])
            row = {"epoch": epoch, "train_loss": total / n_batches}
            if va is not None:
                vloss, vp = subset_loss(model, va, cfg)
                if not math.isfinite(vloss.total):
                    raise NumericalFailure(f"epoch {epoch}: non-finite validation loss")
                rep = evaluate_scores(vp, va.labels, va.masks, space)
                rec = recall_at_half(vp, va.labels, va.masks)
                log.writerow(
                    [epoch, "val", _r(opt.lr), _r(vloss.total), _r(rep.mean), _r(rec)] + [_r(v) for v in vloss.per_label]
                )
                row.update(val_loss=vloss.total, val_mean_auc=rep.mean)
                if vloss.total < best_val:
                    best_val, best_epoch = vloss.total, epoch
                    save_checkpoint(out / "best.ckpt", model, opt, {**extra, "epoch": epoch})
                opt.lr = plateau.update(vloss.total)
            fh.flush()
            logger.info(
                "epoch %d  train %.4f  val %s  auc %s  lr %.2g  (%.0fs)",
                epoch,
                row["train_loss"],
                f"{row.get('val_loss', float('nan')):.4f}",
                f"{row.get('val_mean_auc', float('nan')):.4f}",
                opt.lr,
                time.perf_counter() - t0,
            )
    save_checkpoint(out / "last.ckpt", model, opt, {**extra, "epoch": cfg.epochs})
    if va is None or best_epoch == 0:
        save_checkpoint(out / "best.ckpt", model, opt, {**extra, "epoch": cfg.epochs})
        best_epoch = cfg.epochs
    summary = {"best_epoch": best_epoch, "best_val_loss": best_val if math.isfinite(best_val) else None, "epochs": cfg.epochs}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def load_run_model(checkpoint):
    from .netcore import load_checkpoint

    model, header = load_checkpoint(checkpoint)
    return model, header["extra"]


def evaluate_run(checkpoint, cfg: RunConfig, subset: str = "test") -> AucReport:
    """Score ``subset`` with a checkpoint, normalising with the stats it was trained with."""
    model, extra = load_run_model(checkpoint)
    cfg = RunConfig.from_mapping({**asdict(cfg), "norm": extra.get("norm", cfg.norm), "location": extra.get("location", cfg.location)})
    space = ls.LabelSpace.from_json(json.dumps(extra["labelspace"])) if "labelspace" in extra else None
    subsets, _, space = prepare_data(cfg, space, norm_stats=extra.get("norm_stats"))
    sub = subsets[subset]
    preds = model.predict(sub.images().astype(model.spec.dtype))
    report = evaluate_scores(preds, sub.labels, sub.masks, space, sub.ids)
    report.meta = {"checkpoint": str(checkpoint), "subset": subset, "epoch": extra.get("epoch")}
    return report
