"""Segmentation metrics, precision-recall sweeps, patient-level k-fold
splitting and the fusion-strategy ablation harness.

Scalar metrics (DSC, precision, sensitivity, specificity) are computed per
slice and macro-averaged; PR curves pool confusion counts over all slices
before dividing.  A ratio whose denominator is zero is reported as 1: that
only happens when the quantity it measures is vacuously perfect (no
predicted positives for precision, no true positives for sensitivity, ...).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, Sample, prepare_batch
from .model import ModelConfig, build_variant
from .training import TrainConfig, train

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(round(i / 100, 2) for i in range(101))
AGGREGATION_NOTE = (
    "scalar metrics: per-slice values macro-averaged within a fold, then over folds; "
    "PR curves: confusion counts pooled over all test slices (micro-average)"
)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _binary(a, what: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{what} must be binary (0/1)")
        a = a.astype(bool)
    return a


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred = _binary(pred_mask, "prediction")
    gt = _binary(gt_mask, "ground truth")
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def dsc(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp)


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)


METRICS = {"dsc": dsc, "precision": precision, "sensitivity": sensitivity, "specificity": specificity}


def binarize(prob_map, threshold: float = 0.5) -> np.ndarray:
    """Foreground where probability >= threshold (ties count as tumor)."""
    return np.asarray(prob_map) >= threshold


def _check_probs(prob_map) -> np.ndarray:
    p = np.asarray(prob_map)
    if np.isnan(p).any() or p.min(initial=0.0) < 0.0 or p.max(initial=0.0) > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    return p


def pr_counts(prob_map, gt_mask, thresholds=DEFAULT_THRESHOLDS) -> list[ConfusionCounts]:
    p = _check_probs(prob_map)
    gt = _binary(gt_mask, "ground truth")
    return [confusion(binarize(p, t), gt) for t in thresholds]


def pr_points(counts: list[ConfusionCounts], thresholds=DEFAULT_THRESHOLDS) -> list[tuple[float, float, float]]:
    return [(float(t), precision(c), sensitivity(c)) for t, c in zip(thresholds, counts)]


def pr_curve(prob_map, gt_mask, thresholds=DEFAULT_THRESHOLDS) -> list[tuple[float, float, float]]:
    """(threshold, precision, recall) for each threshold."""
    return pr_points(pr_counts(prob_map, gt_mask, thresholds), thresholds)


def kfold_split(patient_ids, k: int = 5, seed: int = 0) -> list[tuple[list[int], list[int]]]:
    """Partition patients into k test folds whose sizes differ by at most one."""
    patients = sorted(set(int(p) for p in patient_ids))
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(patients):
        raise ValueError(f"cannot make {k} folds from {len(patients)} patients")
    shuffled = np.random.default_rng(seed).permutation(patients)
    folds = []
    for chunk in np.array_split(shuffled, k):
        test = sorted(int(p) for p in chunk)
        held = set(test)
        folds.append(([p for p in patients if p not in held], test))
    return folds


@dataclass
class MetricsReport:
    """Metrics of one evaluated slice set, in percent."""

    dsc: float
    precision: float
    sensitivity: float
    specificity: float
    per_sample: list[dict]
    pr: list[tuple[float, float, float]]
    pr_counts: list[ConfusionCounts] = field(repr=False)
    threshold: float = 0.5
    aggregation: str = AGGREGATION_NOTE

    def scalars(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRICS}


def evaluate(model, test_samples: list[Sample], threshold: float = 0.5,
             thresholds=DEFAULT_THRESHOLDS, batch_size: int = 8) -> MetricsReport:
    """Run ``model.predict`` over normalized slices and score the tumor channel."""
    samples = list(test_samples.samples if isinstance(test_samples, Dataset) else test_samples)
    if not samples:
        raise ValueError("test set is empty")
    per_sample = []
    pooled = [ConfusionCounts(0, 0, 0, 0)] * len(thresholds)
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        pet, ct, mask = prepare_batch(batch)
        fg = np.asarray(model.predict(pet, ct))[:, 1]
        for prob, gt in zip(fg, mask):
            c = confusion(binarize(prob, threshold), gt)
            per_sample.append({name: fn(c) for name, fn in METRICS.items()})
            pooled = [a + b for a, b in zip(pooled, pr_counts(prob, gt, thresholds))]
    means = {name: 100.0 * float(np.mean([s[name] for s in per_sample])) for name in METRICS}
    return MetricsReport(
        per_sample=per_sample,
        pr=pr_points(pooled, thresholds),
        pr_counts=pooled,
        threshold=threshold,
        **means,
    )


# ablation -------------------------------------------------------------------


@dataclass
class AblationResult:
    rows: list[dict]  # one per (variant, fold)
    means: dict[str, dict[str, float]]
    pr: dict[str, list[tuple[float, float, float]]]
    ordering: dict
    n_params: dict[str, int]


def fusion_ordering(means: dict[str, dict[str, float]]) -> dict:
    """Whether mean DSC follows hyper > early > late fusion (transformer variants)."""
    hf = "HCT" if "HCT" in means else ("HF-TN" if "HF-TN" in means else None)
    if hf is None or "EF-TN" not in means or "LF-TN" not in means:
        return {"expected": "HF > EF > LF", "status": "not evaluated (needs HCT, EF-TN and LF-TN)"}
    d = {k: means[k]["dsc"] for k in (hf, "EF-TN", "LF-TN")}
    observed = d[hf] > d["EF-TN"] > d["LF-TN"]
    ranked = sorted(d, key=d.get, reverse=True)
    return {
        "expected": "HF > EF > LF",
        "status": "observed" if observed else "not observed",
        "dsc": d,
        "ranking": ranked,
    }


def ablation_run(
    dataset: Dataset,
    variants: list[str],
    train_config: TrainConfig,
    model_config: ModelConfig,
    out_dir=None,
    k: int = 5,
    split_seed: int | None = None,
    threshold: float = 0.5,
    run_config: dict | None = None,
) -> AblationResult:
    """k-fold train/evaluate every variant; optionally write the report files."""
    if not variants:
        raise ValueError("at least one variant is required")
    folds = kfold_split(dataset.patient_ids, k, train_config.seed if split_seed is None else split_seed)
    rows, means, curves, n_params = [], {}, {}, {}
    for variant in variants:
        cfg = ModelConfig.from_dict({**model_config.to_dict(), "variant": variant}).validate()
        fold_scores = []
        pooled = None
        for fold, (train_ids, test_ids) in enumerate(folds):
            model = build_variant(cfg, seed=train_config.seed)
            n_params[variant] = model.n_params()
            train(model, dataset.select(train_ids), train_config)
            report = evaluate(model, dataset.select(test_ids), threshold)
            pooled = report.pr_counts if pooled is None else [a + b for a, b in zip(pooled, report.pr_counts)]
            fold_scores.append(report.scalars())
            rows.append({"variant": variant, "fold": fold, **report.scalars()})
            log.info("%s fold %d: DSC %.2f", variant, fold, report.dsc)
        means[variant] = {m: float(np.mean([s[m] for s in fold_scores])) for m in METRICS}
        curves[variant] = pr_points(pooled)
    result = AblationResult(rows, means, curves, fusion_ordering(means), n_params)
    if out_dir is not None:
        write_reports(out_dir, result, run_config or {
            "model": model_config.to_dict(), "train": train_config.to_dict(), "k": k,
        })
    return result


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "fold", *METRICS])
        for r in rows:
            writer.writerow([r["variant"], r["fold"], *(repr(float(r[m])) for m in METRICS)])


def write_pr_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall"])
        for t, p, r in points:
            writer.writerow([f"{t:.2f}", repr(float(p)), repr(float(r))])


def write_reports(out_dir, result: AblationResult, run_config: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", result.rows)
    for variant, points in result.pr.items():
        write_pr_csv(out / f"pr_{variant}.csv", points)
    summary = {
        "aggregation": AGGREGATION_NOTE,
        "variants": {v: {**m, "n_params": result.n_params.get(v)} for v, m in result.means.items()},
        "fusion_ordering": result.ordering,
        "config": run_config,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
