"""OOD scores and evaluation measures: accuracy, AUROC and ECE."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Optional

import numpy as np
from scipy.stats import rankdata

from .data import LabeledDataset
from .errors import UsageError
from .tensor import softmax_np

DEFAULT_ECE_BINS = 15


def msp_score(logits: np.ndarray) -> np.ndarray:
    """Maximum softmax probability per row; higher means more in-distribution."""
    return softmax_np(np.asarray(logits, dtype=np.float64)).max(axis=1)


def auroc(id_scores, ood_scores) -> float:
    """P(random ID score > random OOD score), ties counted as one half.

    Mann-Whitney U from average ranks over the pooled sample.
    """
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise UsageError("auroc needs nonempty ID and OOD score vectors")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise UsageError("auroc scores must be finite")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def ece(confidences, correct, n_bins: int = DEFAULT_ECE_BINS) -> float:
    """Expected calibration error over equal-width bins on (0, 1].

    Bins are left-open/right-closed; a confidence of exactly 0 joins the first bin.
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size == 0:
        raise UsageError("ece needs at least one sample")
    if conf.size != hit.size:
        raise UsageError(f"{conf.size} confidences but {hit.size} correctness flags")
    if n_bins < 1:
        raise UsageError(f"n_bins must be >= 1, got {n_bins}")
    if np.any(conf < 0) or np.any(conf > 1):
        raise UsageError("confidences must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bins = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    acc_sum = np.bincount(bins, weights=hit, minlength=n_bins)
    conf_sum = np.bincount(bins, weights=conf, minlength=n_bins)
    return float(np.abs(acc_sum - conf_sum).sum() / conf.size)


def accuracy(logits, labels) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels).ravel()
    if logits.shape[0] != labels.size:
        raise UsageError(f"{logits.shape[0]} predictions for {labels.size} labels")
    if labels.size == 0:
        raise UsageError("accuracy of an empty set")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class MetricsRow:
    experiment: str = ""
    study: str = ""
    checkpoint_hash: str = ""
    id_dataset: str = ""
    ood_dataset: Optional[str] = None
    alpha: Optional[float] = None
    lam: Optional[float] = None
    temperature: Optional[float] = None
    seed: Optional[int] = None
    epoch_budget: Optional[int] = None
    accuracy: Optional[float] = None
    ece: Optional[float] = None
    auroc: Optional[float] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def _loss_fields(prov: Mapping) -> dict:
    loss = prov.get("config", {}).get("loss", {})
    kind = loss.get("kind", "hard")
    return {
        "alpha": float(loss.get("alpha", 0.0)) if kind in ("label_smoothing", "distill", "hard") else None,
        "lam": float(loss["lam"]) if kind == "oe" else None,
        "temperature": float(loss.get("temperature", 1.0)) if kind == "distill" else None,
    }


def evaluate_checkpoint(ckpt, id_test: LabeledDataset, ood_sets: Mapping[str, LabeledDataset],
                        n_bins: int = DEFAULT_ECE_BINS, experiment: str = "", study: str = "",
                        batch_size: int = 500) -> list[MetricsRow]:
    """One accuracy/ECE row on the ID test set plus one AUROC row per OOD set."""
    from .train import logits_of

    h = ckpt.hash
    prov = ckpt.provenance
    common = dict(experiment=experiment, study=study, checkpoint_hash=h, id_dataset=id_test.name,
                  seed=prov.get("seed"), epoch_budget=prov.get("epochs"), **_loss_fields(prov))
    logits = logits_of(ckpt, id_test.images, batch_size)
    conf = msp_score(logits)
    labels = id_test.labels
    rows = [MetricsRow(**common, accuracy=accuracy(logits, labels),
                       ece=ece(conf, np.argmax(logits, axis=1) == labels, n_bins))]
    for name, ds in ood_sets.items():
        ood_conf = msp_score(logits_of(ckpt, ds.images, batch_size))
        rows.append(MetricsRow(**common, ood_dataset=name, auroc=auroc(conf, ood_conf)))
    return rows
