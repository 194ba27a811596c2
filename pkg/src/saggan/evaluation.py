"""Downstream protocol: classifier training per augmentation arm, metrics and reports."""

from __future__ import annotations

import bisect
import copy
import csv
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import NORMAL, TUMOR, SampleRecord, classic_augment, scarce_subset, select

ARMS = ("no_da", "classic_da", "oversample", "undersample", "sag_gan")
REPORT_CSV_HEADER = ["arm", "seed", "accuracy", "auc", "tpr", "tnr", "tp", "fp", "tn", "fn"]


# ----------------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------------


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> ConfusionCounts:
    """Counts with a sample predicted positive iff its score is >= ``threshold``."""
    if len(scores) != len(labels):
        raise ValueError(f"{len(scores)} scores vs {len(labels)} labels")
    if len(scores) == 0:
        raise ValueError("no samples")
    tp = fp = tn = fn = 0
    for s, y in zip(scores, labels):
        pos = s >= threshold
        if y == 1:
            tp, fn = (tp + 1, fn) if pos else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if pos else (fp, tn + 1)
    return ConfusionCounts(tp, fp, tn, fn)


def tpr(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("TPR undefined: no positive samples")
    return c.tp / (c.tp + c.fn)


def tnr(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        raise UndefinedMetricError("TNR undefined: no negative samples")
    return c.tn / (c.tn + c.fp)


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total


def auc_fraction(scores: Sequence[float], labels: Sequence[int]) -> Fraction:
    """P(random positive outscores random negative), ties counted one half, as an exact fraction."""
    if len(scores) != len(labels):
        raise ValueError(f"{len(scores)} scores vs {len(labels)} labels")
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = sorted(s for s, y in zip(scores, labels) if y != 1)
    if not pos or not neg:
        raise UndefinedMetricError("AUC undefined: need both classes")
    twice_wins = 0
    for s in pos:
        lo = bisect.bisect_left(neg, s)
        hi = bisect.bisect_right(neg, s)
        twice_wins += 2 * lo + (hi - lo)
    return Fraction(twice_wins, 2 * len(pos) * len(neg))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    return float(auc_fraction(scores, labels))


# ----------------------------------------------------------------------------
# Classifier
# ----------------------------------------------------------------------------


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResidualClassifier(nn.Module):
    """Stem, three residual stages (w, 2w, 4w), global average pool, one logit."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(1, width, 3, 2, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True)
        )
        self.stages = nn.Sequential(
            ResBlock(width, width),
            ResBlock(width, 2 * width, stride=2),
            ResBlock(2 * width, 4 * width, stride=2),
        )
        self.fc = nn.Linear(4 * width, 1)

    def forward(self, x):
        h = self.stages(self.stem(x))
        return self.fc(h.mean(dim=(-2, -1))).squeeze(-1)


@dataclass
class ClassifierConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    width: int = 16
    seed: int = 0

    def __post_init__(self):
        for key in ("epochs", "batch_size", "width"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def _xy(records: Sequence[SampleRecord]) -> Tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([r.image for r in records]).astype(np.float32))[:, None]
    y = torch.tensor([float(r.label) for r in records])
    return x, y


@torch.no_grad()
def predict_scores(model: nn.Module, images, batch: int = 64) -> np.ndarray:
    model.eval()
    x = images if isinstance(images, torch.Tensor) else _xy(images)[0]
    out = [torch.sigmoid(model(x[i : i + batch])) for i in range(0, len(x), batch)]
    return torch.cat(out).numpy().astype(np.float64)


def _init_classifier(model: nn.Module, gen: torch.Generator) -> None:
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=gen)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, 0.01, generator=gen)
            nn.init.zeros_(m.bias)


def train_classifier(
    train_records: Sequence[SampleRecord],
    val_records: Sequence[SampleRecord],
    config: ClassifierConfig = ClassifierConfig(),
) -> Tuple[ResidualClassifier, dict]:
    """Binary cross-entropy training; returns the parameters of the best validation epoch."""
    labels = {r.label for r in train_records}
    if labels != {0, 1}:
        raise ValueError(f"training set must contain both classes, got labels {sorted(labels)}")
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = ResidualClassifier(config.width)
    _init_classifier(model, gen)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    x, y = _xy(train_records)
    xv, yv = _xy(val_records)

    best = (-1.0, 0, None)
    history = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        perm = torch.from_numpy(rng.permutation(len(x)))
        losses = []
        for i in range(0, len(x), config.batch_size):
            idx = perm[i : i + config.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples
            loss = F.binary_cross_entropy_with_logits(model(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        c = confusion(predict_scores(model, xv), yv.long().tolist())
        val_acc = accuracy(c)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_accuracy": val_acc})
        if val_acc > best[0]:
            best = (val_acc, epoch, copy.deepcopy(model.state_dict()))
    model.load_state_dict(best[2])
    model.eval()
    return model, {"best_epoch": best[1], "best_val_accuracy": best[0], "history": history}


# ----------------------------------------------------------------------------
# Experiment
# ----------------------------------------------------------------------------


@dataclass
class ArmResult:
    arm: str
    seed: int
    accuracy: float
    auc: float
    tpr: float
    tnr: float
    confusion: ConfusionCounts
    n_train: int = 0
    n_train_tumor: int = 0

    def csv_row(self) -> list:
        c = self.confusion
        return [self.arm, self.seed, repr(self.accuracy), repr(self.auc), repr(self.tpr),
                repr(self.tnr), c.tp, c.fp, c.tn, c.fn]


def evaluate_classifier(model: nn.Module, test_records: Sequence[SampleRecord], arm: str, seed: int) -> ArmResult:
    scores = predict_scores(model, test_records)
    labels = [r.label for r in test_records]
    c = confusion(scores, labels)
    return ArmResult(arm, seed, accuracy(c), auc(scores, labels), tpr(c), tnr(c), c)


@dataclass
class ExperimentConfig:
    arms: Tuple[str, ...] = ARMS
    n_seeds: int = 3
    tumor_keep: float = 0.25
    seed: int = 0
    threshold: float = 0.5
    train_gan_first: bool = False

    def __post_init__(self):
        self.arms = tuple(self.arms)
        unknown = [a for a in self.arms if a not in ARMS]
        if unknown or not self.arms:
            raise ValueError(f"arms: unknown or empty: {unknown or '[]'}; choose from {ARMS}")
        if len(set(self.arms)) != len(self.arms):
            raise ValueError("arms must be unique")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be positive")
        if not 0 < self.tumor_keep <= 1:
            raise ValueError("tumor_keep must lie in (0, 1]")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")


def _synthetic_record(i: int, image: np.ndarray, mask: np.ndarray) -> SampleRecord:
    return SampleRecord(f"syn{i:05d}", image, TUMOR, mask, 1, "train")


def build_arm_set(
    arm: str,
    scarce: Sequence[SampleRecord],
    seed: int,
    synthetic: Optional[Sequence[SampleRecord]] = None,
) -> List[SampleRecord]:
    """Training set of one arm, built from the scarce training records."""
    rng = np.random.default_rng(seed)
    normals = [r for r in scarce if r.domain == NORMAL]
    tumors = [r for r in scarce if r.domain == TUMOR]
    deficit = max(len(normals) - len(tumors), 0)
    if arm == "no_da":
        return list(scarce)
    if arm == "oversample":
        extra = [tumors[i] for i in rng.integers(0, len(tumors), deficit)]
        return normals + tumors + extra
    if arm == "undersample":
        keep = sorted(rng.permutation(len(normals))[: len(tumors)])
        return [normals[i] for i in keep] + tumors
    if arm == "classic_da":
        extra = []
        for k, i in enumerate(rng.integers(0, len(tumors), deficit)):
            src = tumors[i]
            img, mask = classic_augment(src.image, src.mask, seed=int(rng.integers(2**31)))
            extra.append(SampleRecord(f"aug{k:05d}_{src.id}", img, TUMOR, mask, 1, "train"))
        return normals + tumors + extra
    if arm == "sag_gan":
        if synthetic is None:
            raise ValueError("sag_gan arm needs synthetic samples")
        pick = rng.choice(len(synthetic), size=deficit, replace=deficit > len(synthetic))
        return normals + tumors + [synthetic[i] for i in sorted(pick)]
    raise ValueError(f"unknown arm {arm!r}")


@dataclass
class MetricsReport:
    results: Dict[str, List[ArmResult]]
    config: dict = field(default_factory=dict)
    config_hash: str = ""

    def summary(self) -> Dict[str, dict]:
        out = {}
        for arm, runs in self.results.items():
            out[arm] = {
                "accuracy": float(np.mean([r.accuracy for r in runs])),
                "auc": float(np.mean([r.auc for r in runs])),
                "tpr": float(np.mean([r.tpr for r in runs])),
                "tnr": float(np.mean([r.tnr for r in runs])),
                "confusion": {
                    k: int(sum(getattr(r.confusion, k) for r in runs)) for k in ("tp", "fp", "tn", "fn")
                },
                "seeds": [
                    {
                        "seed": r.seed,
                        "accuracy": r.accuracy,
                        "auc": r.auc,
                        "tpr": r.tpr,
                        "tnr": r.tnr,
                        "confusion": asdict(r.confusion),
                        "n_train": r.n_train,
                        "n_train_tumor": r.n_train_tumor,
                    }
                    for r in runs
                ],
            }
        return out

    def to_json(self) -> dict:
        doc = self.summary()
        doc["_config"] = {"config_hash": self.config_hash, "config": self.config}
        return doc

    def write(self, out_dir) -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out_dir / "report.json", out_dir / "report.csv"
        with open(jpath, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(cpath, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_CSV_HEADER)
            for runs in self.results.values():
                for r in runs:
                    writer.writerow(r.csv_row())
        return jpath, cpath


class ExperimentError(RuntimeError):
    pass


def run_experiment(
    records: Sequence[SampleRecord],
    experiment: ExperimentConfig = ExperimentConfig(),
    classifier: ClassifierConfig = ClassifierConfig(),
    gan_checkpoint=None,
    gan_config=None,
    out_dir=None,
    config_echo: Optional[dict] = None,
    config_hash: str = "",
) -> MetricsReport:
    """Train and test one classifier per (arm, seed) on the scarce training split.

    ``records`` must carry train/val/test splits. The sag_gan arm uses
    ``gan_checkpoint`` (a directory or a ``ModelState``); without one,
    ``experiment.train_gan_first`` trains a GAN on the scarce training set
    using ``gan_config`` and writes it below ``<out_dir>/gan``.
    """
    from .training import TrainConfig, synthesize_augmented, train

    train_all = select(records, "train")
    val, test = select(records, "val"), select(records, "test")
    if not train_all or not val or not test:
        raise ExperimentError("records need non-empty train, val and test splits")
    scarce = scarce_subset(train_all, experiment.tumor_keep, experiment.seed)

    synthetic = None
    if "sag_gan" in experiment.arms:
        state = gan_checkpoint
        if state is None:
            if not experiment.train_gan_first:
                raise ExperimentError(
                    "sag_gan arm needs a GAN checkpoint or experiment.train_gan_first=true"
                )
            gan_config = gan_config if gan_config is not None else TrainConfig()
            gan_dir = None if out_dir is None else Path(out_dir) / "gan"
            state, _ = train(scarce, gan_config, output_dir=gan_dir)
        normals = [r for r in scarce if r.domain == NORMAL]
        pairs = synthesize_augmented([r.image for r in normals], state, experiment.threshold,
                                     config=gan_config if isinstance(state, (str, Path)) else None)
        synthetic = [_synthetic_record(i, img, m) for i, (img, m) in enumerate(pairs)]

    results: Dict[str, List[ArmResult]] = {}
    for arm in experiment.arms:
        results[arm] = []
        for k in range(experiment.n_seeds):
            seed = classifier.seed + k
            arm_set = build_arm_set(arm, scarce, seed, synthetic)
            cfg = ClassifierConfig(**{**asdict(classifier), "seed": seed})
            model, _ = train_classifier(arm_set, val, cfg)
            res = evaluate_classifier(model, test, arm, seed)
            res.n_train = len(arm_set)
            res.n_train_tumor = sum(r.label for r in arm_set)
            results[arm].append(res)
            print(f"arm={arm} seed={seed} accuracy={res.accuracy:.4f} auc={res.auc:.4f} "
                  f"tpr={res.tpr:.4f} tnr={res.tnr:.4f}", flush=True)
    report = MetricsReport(results, config_echo or {}, config_hash)
    if out_dir is not None:
        report.write(out_dir)
    return report
