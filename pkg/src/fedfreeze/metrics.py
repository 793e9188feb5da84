"""Accuracy, cross-entropy, layer-selection statistics and run records."""
import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .errors import ShapeMismatchError

PROB_EPS = 1e-12


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def accuracy(counts: ConfusionCounts) -> float:
    """(TP + TN) / (TP + TN + FP + FN) as a percentage."""
    if min(counts.tp, counts.tn, counts.fp, counts.fn) < 0:
        raise ValueError("confusion counts must be non-negative")
    if counts.total == 0:
        raise ValueError("accuracy of an empty confusion table is undefined")
    return 100.0 * (counts.tp + counts.tn) / counts.total


def confusion_counts(y_true, y_pred, n_classes: int) -> ConfusionCounts:
    """Micro-summed one-vs-rest counts over all classes.

    Each sample contributes to every class, so the four counts sum to
    ``n_classes * n_samples``.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ShapeMismatchError(f"{y_true.shape} vs {y_pred.shape}")
    n = y_true.size
    tp = int(np.sum(y_true == y_pred))
    fp = n - tp
    fn = n - tp
    tn = n_classes * n - tp - fp - fn
    return ConfusionCounts(tp, tn, fp, fn)


def top1_accuracy(y_true, y_pred) -> float:
    """Multiclass accuracy as a percentage: share of exact label matches.

    Equal to micro-averaged recall, i.e. sum of per-class TP over the
    number of samples.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ShapeMismatchError(f"{y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("accuracy of an empty sample is undefined")
    return 100.0 * float(np.mean(y_true == y_pred))


def cross_entropy(y, yhat) -> float:
    """Mean over samples of ``-sum_i y_i log(yhat_i)``, with yhat clamped to [1e-12, 1]."""
    y = np.asarray(y)
    yhat = np.asarray(yhat)
    if y.shape != yhat.shape:
        raise ShapeMismatchError(f"labels {y.shape} vs predictions {yhat.shape}")
    if y.ndim == 1:
        y, yhat = y[None], yhat[None]
    logp = np.log(np.clip(yhat, PROB_EPS, 1.0))
    per_sample = -(y * logp).sum(axis=-1)
    return float(max(per_sample.mean(), 0.0))


def one_hot(labels, n_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def evaluate(model, features, labels) -> tuple[float, float]:
    """(top-1 accuracy %, mean cross-entropy) of ``model`` in inference mode."""
    probs = model.predict_proba(features)
    n_classes = probs.shape[1]
    acc = top1_accuracy(labels, probs.argmax(axis=1))
    loss = cross_entropy(one_hot(labels, n_classes, probs.dtype), probs)
    return acc, loss


# --- layer selection -------------------------------------------------------------


class SelectionHistogram:
    """Count of (client, unit) selections over a run."""

    def __init__(self, n_clients: int, n_units: int, layer_budget: int):
        self.counts = np.zeros((n_clients, n_units), dtype=np.int64)
        self.participations = np.zeros(n_clients, dtype=np.int64)
        self.layer_budget = layer_budget

    def record(self, client_id: int, units) -> None:
        self.counts[client_id, sorted(units)] += 1
        self.participations[client_id] += 1

    @property
    def n_units(self) -> int:
        return self.counts.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["client", "rounds"] + [f"layer_{i}" for i in range(self.n_units)])
        for k, row in enumerate(self.counts):
            w.writerow([k, int(self.participations[k])] + [int(c) for c in row])
        return buf.getvalue()


@dataclass
class Uniformity:
    frequencies: np.ndarray
    expected: float
    max_abs_deviation: float
    chi_square_stat: float
    dof: int
    critical_99: float

    @property
    def passes(self) -> bool:
        return self.chi_square_stat < self.critical_99


def selection_uniformity(hist: SelectionHistogram) -> Uniformity:
    """Compare per-unit selection frequencies against ``N_l / L``.

    The chi-square statistic accounts for sampling without replacement:
    per-unit counts over R draws of N_l-subsets have covariance
    ``R p (1-p) L/(L-1) (I - 11'/L)`` with ``p = N_l/L``, so
    ``(L-1)/L * sum (O - Rp)^2 / (R p (1-p))`` is chi-square with L-1 dof.
    """
    draws = int(hist.participations.sum())
    if draws == 0 or hist.n_units == 0:
        raise ValueError("selection histogram is empty")
    L = hist.n_units
    p = hist.layer_budget / L
    observed = hist.counts.sum(axis=0).astype(np.float64)
    freq = observed / draws
    dev = float(np.max(np.abs(freq - p)))
    dof = max(L - 1, 1)
    if p >= 1.0 or p <= 0.0:
        chi2 = 0.0 if np.all(observed == draws * p) else float("inf")
    else:
        chi2 = float((L - 1) / L * np.sum((observed - draws * p) ** 2) / (draws * p * (1 - p)))
    return Uniformity(freq, p, dev, chi2, dof, float(stats.chi2.ppf(0.99, dof)))


# --- per-round records -------------------------------------------------------------


@dataclass
class MetricsRecord:
    round: int
    accuracy: float
    loss: float
    uplink_bytes: int = 0
    downlink_bytes: int = 0
    uplink_overhead_bytes: int = 0
    downlink_overhead_bytes: int = 0
    selection_counts: list = field(default_factory=list)
    clients: list = field(default_factory=list)
    client_loss: dict = field(default_factory=dict)
    client_accuracy: dict = field(default_factory=dict)
    client_layers: dict = field(default_factory=dict)
    trained_params: int = 0
    wall_time: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 100]")
        if self.loss < 0:
            raise ValueError(f"negative loss {self.loss}")


def metrics_csv(records: list[MetricsRecord], n_units: int) -> str:
    """Per-round CSV; deterministic for a deterministic run (no timings)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "accuracy", "loss", "uplink_bytes", "downlink_bytes"]
               + [f"layer_{i}" for i in range(n_units)])
    for r in records:
        counts = list(r.selection_counts) or [0] * n_units
        w.writerow([r.round, repr(float(r.accuracy)), repr(float(r.loss)),
                    r.uplink_bytes, r.downlink_bytes] + [int(c) for c in counts])
    return buf.getvalue()


def summary_json(config: dict, records: list[MetricsRecord], extra: dict | None = None) -> str:
    doc = {
        "config": config,
        "rounds": len([r for r in records if r.round > 0]),
        "initial_accuracy": records[0].accuracy if records else None,
        "final_accuracy": records[-1].accuracy if records else None,
        "final_loss": records[-1].loss if records else None,
        "total_uplink_bytes": sum(r.uplink_bytes for r in records),
        "total_downlink_bytes": sum(r.downlink_bytes for r in records),
        "total_uplink_overhead_bytes": sum(r.uplink_overhead_bytes for r in records),
        "total_downlink_overhead_bytes": sum(r.downlink_overhead_bytes for r in records),
        "wall_time_s": sum(r.wall_time for r in records),
        "per_round": [
            {k: v for k, v in asdict(r).items() if k not in ("selection_counts",)}
            for r in records
        ],
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
