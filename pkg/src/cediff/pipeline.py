"""Counterfactual datasets, distance metrics and the analyses built on them.

Metric functions take ``model`` as either a trained :class:`Classifier` or any
callable mapping an (n, d) array to (n, n_classes) class probabilities.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from torch import nn

from .adversarial import classify, robust_model_ce
from .errors import CEDiffError, DomainError, FormatError, ShapeError, UndefinedMetricError
from .sampler import SamplerConfig, generate_ces
from .schedule import Schedule

SCHEMA = "cediff.ce_dataset"
SCHEMA_VERSION = 1
L0_THRESHOLD = 0.02
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


class DiffusionGenerator:
    """Guided reverse-diffusion counterfactuals with a neighborhood term centered on the source."""

    def __init__(self, sched: Schedule, sampler: SamplerConfig, data_predictor, variant: str,
                 w: float = 15.0, sigma_ce: float = 0.2, sigma_t_scaling: bool = True):
        self.sched = sched
        self.sampler = sampler
        self.data_predictor = data_predictor
        self.variant = variant
        self.w = float(w)
        self.sigma_ce = float(sigma_ce)
        self.sigma_t_scaling = bool(sigma_t_scaling)

    @property
    def n_classes(self) -> int:
        return self.data_predictor.n_classes

    @property
    def params(self) -> dict:
        return {"w": self.w, "sigma_ce": self.sigma_ce}

    def generate(self, xs, y_ces, element_ids):
        return generate_ces(self.sched, self.sampler, self.data_predictor, xs, y_ces, self.variant,
                            self.w, self.sigma_ce, element_ids, self.sigma_t_scaling)


class RobustModelGenerator:
    """Counterfactuals by gradient ascent on a robust classifier's target log-probability."""

    variant = "robust"

    def __init__(self, model, tag: str = "robust", step_size: float = 0.05, conf_threshold: float = 0.9,
                 max_steps: int = 200, clip=(0.0, 1.0)):
        self.model = model
        self.tag = tag
        self.step_size = step_size
        self.conf_threshold = conf_threshold
        self.max_steps = max_steps
        self.clip = None if clip is None else tuple(clip)

    @property
    def n_classes(self) -> int:
        return self.model.n_classes

    @property
    def params(self) -> dict:
        return {"model": self.tag, "step_size": self.step_size, "conf_threshold": self.conf_threshold}

    def generate(self, xs, y_ces, element_ids=None):
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        return np.stack([
            robust_model_ce(self.model, x, int(c), self.step_size, self.conf_threshold, self.max_steps, self.clip)[0]
            for x, c in zip(xs, np.broadcast_to(y_ces, (len(xs),)))
        ])


@dataclass
class CERecord:
    record_id: int
    source_id: int
    x: np.ndarray
    y: int
    y_ce: int
    x_ce: np.ndarray
    l2: float
    l0: float
    variant: str
    params: dict

    @property
    def same_class(self) -> bool:
        return self.y == self.y_ce

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id, "source_id": self.source_id, "y": self.y, "y_ce": self.y_ce,
            "variant": self.variant, "params": self.params, "l2": self.l2, "l0": self.l0,
            "x": self.x.tolist(), "x_ce": self.x_ce.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CERecord":
        return cls(
            record_id=int(d["record_id"]), source_id=int(d["source_id"]),
            x=np.asarray(d["x"], dtype=np.float64), y=int(d["y"]), y_ce=int(d["y_ce"]),
            x_ce=np.asarray(d["x_ce"], dtype=np.float64), l2=float(d["l2"]), l0=float(d["l0"]),
            variant=str(d["variant"]), params=dict(d["params"]),
        )


@dataclass
class CEDataset:
    records: list
    n_samples: int
    n_classes: int
    n_per_class: int
    provenance: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def n_failures(self) -> int:
        return len(self.failures)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def arrays(self) -> dict:
        """Stacked per-record arrays (x, x_ce, y, y_ce, source_id, l2, l0)."""
        if not self.records:
            raise UndefinedMetricError("dataset has no records")
        out = {k: self.column(k) for k in ("source_id", "y", "y_ce", "l2", "l0")}
        out["x"] = np.stack([r.x for r in self.records])
        out["x_ce"] = np.stack([r.x_ce for r in self.records])
        return out

    def header(self) -> dict:
        return {
            "schema": SCHEMA, "schema_version": SCHEMA_VERSION, "provenance": self.provenance,
            "n_samples": self.n_samples, "n_classes": self.n_classes, "n_per_class": self.n_per_class,
            "failures": self.failures,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CEDataset":
        with open(path, "rb") as fh:
            raw = fh.read()
        offset = 0
        lines = []
        for line in raw.split(b"\n"):
            if line.strip():
                try:
                    lines.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}: invalid JSON ({exc.msg})", offset=offset + exc.pos) from None
                lines[-1] = (offset, lines[-1])
            offset += len(line) + 1
        if not lines:
            raise FormatError(f"{path}: empty file", offset=0)
        head = lines[0][1]
        if head.get("schema") != SCHEMA:
            raise FormatError(f"{path}: not a CE dataset", offset=0)
        if head.get("schema_version") != SCHEMA_VERSION:
            raise FormatError(f"{path}: unsupported schema version {head.get('schema_version')}", offset=0)
        records = []
        for off, d in lines[1:]:
            try:
                records.append(CERecord.from_json(d))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}: bad record ({exc})", offset=off) from None
        return cls(records, int(head["n_samples"]), int(head["n_classes"]), int(head["n_per_class"]),
                   dict(head["provenance"]), list(head["failures"]))


def distances(x, x_ce, l0_threshold: float = L0_THRESHOLD):
    """L2 distance and fraction of coordinates changed by strictly more than the threshold.

    Works row-wise on (n, d) inputs; returns floats for 1-D inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    x_ce = np.asarray(x_ce, dtype=np.float64)
    if x.shape != x_ce.shape or x.ndim not in (1, 2):
        raise ShapeError(f"shapes {x.shape} and {x_ce.shape} do not match")
    diff = x_ce - x
    l2 = np.linalg.norm(diff, axis=-1)
    l0 = np.mean(np.abs(diff) > l0_threshold, axis=-1)
    if x.ndim == 1:
        return float(l2), float(l0)
    return l2, l0


def _layout(n_samples: int, n_classes: int, n_per_class: int):
    """Record order: source-major, then target class, then repeat."""
    src = np.repeat(np.arange(n_samples), n_classes * n_per_class)
    cls = np.tile(np.repeat(np.arange(n_classes), n_per_class), n_samples)
    return src, cls


def _generate_guarded(generator, xs, y_ces, ids, chunk):
    """Generate in chunks; a failing chunk is retried element-wise to isolate failures."""
    out = np.full(xs.shape, np.nan)
    errors = {}
    for lo in range(0, len(xs), chunk):
        sl = slice(lo, min(len(xs), lo + chunk))
        try:
            out[sl] = generator.generate(xs[sl], y_ces[sl], ids[sl])
            continue
        except CEDiffError:
            pass
        for i in range(sl.start, sl.stop):
            try:
                out[i] = generator.generate(xs[i:i + 1], y_ces[i:i + 1], ids[i:i + 1])[0]
            except CEDiffError as exc:
                errors[i] = f"{type(exc).__name__}: {exc}"
    return out, errors


def build_ce_dataset(generator, x, y, n_per_class: int = 2, source_ids=None, provenance=None,
                     id_offset: int = 0, chunk: int = 2048) -> CEDataset:
    """Generate ``n_per_class`` counterfactuals toward every class (the source's own included).

    Record ``i`` uses noise stream ``id_offset + i``, so a dataset is a
    deterministic function of the generator seed and the inputs.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if len(x) != len(y):
        raise ShapeError(f"{len(x)} samples but {len(y)} labels")
    if n_per_class < 1:
        raise DomainError("n_per_class must be at least 1")
    n_classes = generator.n_classes
    if np.any((y < 0) | (y >= n_classes)):
        raise DomainError(f"labels must lie in [0, {n_classes})")
    source_ids = np.arange(len(x)) if source_ids is None else np.asarray(source_ids, dtype=np.int64)
    src, cls = _layout(len(x), n_classes, n_per_class)
    ids = id_offset + np.arange(len(src))
    x_ce, errors = _generate_guarded(generator, x[src], cls, ids, chunk)
    ok = np.array([i not in errors for i in range(len(src))], dtype=bool)
    l2 = np.full(len(src), np.nan)
    l0 = np.full(len(src), np.nan)
    if ok.any():
        l2[ok], l0[ok] = distances(x[src[ok]], x_ce[ok])
    records, failures = [], []
    params = generator.params
    for i in range(len(src)):
        s = src[i]
        if not ok[i]:
            failures.append({"record_id": int(ids[i]), "source_id": int(source_ids[s]), "y_ce": int(cls[i]),
                             "error": errors[i]})
            continue
        records.append(CERecord(int(ids[i]), int(source_ids[s]), x[s].copy(), int(y[s]), int(cls[i]),
                                x_ce[i], float(l2[i]), float(l0[i]), generator.variant, dict(params)))
    return CEDataset(records, len(x), n_classes, n_per_class, dict(provenance or {}), failures)


def _probs(model, x) -> np.ndarray:
    if isinstance(model, nn.Module):
        return classify(model, x)[1]
    return np.asarray(model(np.asarray(x, dtype=np.float64)), dtype=np.float64)


def _sources(ds: CEDataset):
    """Unique sources in first-appearance order: (ids, x, y)."""
    seen = {}
    for r in ds.records:
        if r.source_id not in seen:
            seen[r.source_id] = r
    recs = list(seen.values())
    if not recs:
        raise UndefinedMetricError("dataset has no records")
    return (np.array([r.source_id for r in recs]), np.stack([r.x for r in recs]),
            np.array([r.y for r in recs]))


def avg_ce_distance(ds: CEDataset, source_id: int, include_same_class: bool = False) -> float:
    """Mean L2 over a source's different-class counterfactuals."""
    vals = [r.l2 for r in ds.records
            if r.source_id == source_id and (include_same_class or r.y_ce != r.y)]
    if not vals:
        raise UndefinedMetricError(f"source {source_id} has no qualifying counterfactuals")
    return float(np.mean(vals))


def avg_ce_distances(ds: CEDataset, include_same_class: bool = False):
    """Vectorized :func:`avg_ce_distance` for every source: (source_ids, averages)."""
    a = ds.arrays()
    keep = np.ones(len(ds), bool) if include_same_class else a["y_ce"] != a["y"]
    ids, _, _ = _sources(ds)
    pos = {s: i for i, s in enumerate(ids)}
    idx = np.array([pos[s] for s in a["source_id"][keep]], dtype=np.int64)
    sums = np.bincount(idx, weights=a["l2"][keep], minlength=len(ids))
    counts = np.bincount(idx, minlength=len(ids))
    if np.any(counts == 0):
        missing = ids[counts == 0][:5].tolist()
        raise UndefinedMetricError(f"sources without qualifying counterfactuals: {missing}")
    return ids, sums / counts


def ols_r2(x, y) -> float:
    """Coefficient of determination of the least-squares line of y on x.

    Constant y gives 0; constant x is undefined.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("x and y must be 1-D of equal length")
    # exact constancy checks: centred sums of squares keep rounding residue
    if len(x) < 2 or np.ptp(x) == 0.0:
        raise UndefinedMetricError("regressor has zero variance")
    if np.ptp(y) == 0.0:
        return 0.0
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    sxy = float(xc @ yc)
    return min(1.0, sxy * sxy / (sxx * syy))


def confidence_distance_correlation(model, ds: CEDataset, include_same_class: bool = False):
    """r^2 of true-class confidence against average counterfactual distance.

    Returns (r2, table) where the table holds per-source columns
    source_id, y, confidence, avg_distance, predicted.
    """
    ids, xs, ys = _sources(ds)
    ids_d, avg = avg_ce_distances(ds, include_same_class)
    probs = _probs(model, xs)
    conf = probs[np.arange(len(ys)), ys]
    table = {"source_id": ids, "y": ys, "confidence": conf, "avg_distance": avg,
             "predicted": probs.argmax(1)}
    return ols_r2(avg, conf), table


def ce_accuracy_report(model, ds: CEDataset) -> dict:
    """Accuracy of predicting y_ce on x_ce, split by same/different class, plus source accuracy."""
    a = ds.arrays()
    pred = _probs(model, a["x_ce"]).argmax(1)
    hit = pred == a["y_ce"]
    same = a["y_ce"] == a["y"]
    _, xs, ys = _sources(ds)
    clean = _probs(model, xs).argmax(1) == ys

    def frac(m):
        return float(hit[m].mean()) if m.any() else float("nan")

    return {"same_class_acc": frac(same), "diff_class_acc": frac(~same), "clean_acc": float(clean.mean()),
            "n_same": int(same.sum()), "n_diff": int((~same).sum()), "n_sources": int(len(ys))}


def source_prediction_probability(model, ds: CEDataset):
    """P(model predicts y on x_ce | y_ce != y and model is correct on x).

    Returns (probability, {"n_qualifying", "n_source_predicted"}).
    """
    a = ds.arrays()
    ids, xs, ys = _sources(ds)
    correct = dict(zip(ids.tolist(), (_probs(model, xs).argmax(1) == ys).tolist()))
    keep = (a["y_ce"] != a["y"]) & np.array([correct[s] for s in a["source_id"]], dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise UndefinedMetricError("no different-class counterfactuals of correctly classified sources")
    hits = int((_probs(model, a["x_ce"][keep]).argmax(1) == a["y"][keep]).sum())
    return hits / n, {"n_qualifying": n, "n_source_predicted": hits}


def ce_distance_classifier(generator, x, n_per_class: int = 1, id_offset: int = 0):
    """Predict the class whose counterfactuals lie closest to x on average.

    Returns (predictions, mean distance matrix of shape (n, n_classes)).
    Ties go to the lowest class index.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = generator.n_classes
    src, cls = _layout(len(x), c, n_per_class)
    x_ce = generator.generate(x[src], cls, id_offset + np.arange(len(src)))
    l2, _ = distances(x[src], x_ce)
    mean = l2.reshape(len(x), c, n_per_class).mean(axis=2)
    return np.argmin(mean, axis=1), mean


def distance_summary(values, edges) -> dict:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise UndefinedMetricError("no distances to summarize")
    counts, _ = np.histogram(values, bins=edges)
    return {"n": int(values.size), "mean": float(values.mean()),
            "quantiles": {q: float(v) for q, v in zip(QUANTILES, np.quantile(values, QUANTILES))},
            "hist": counts.astype(np.int64)}


def _diff_class_l2(ds: CEDataset) -> np.ndarray:
    return np.array([r.l2 for r in ds.records if r.y_ce != r.y])


def ce_from_ce_analysis(generator, base_ces: CEDataset, baseline: CEDataset, n_per_class: int = 1,
                        bins: int = 20, diff_class_only: bool = True, id_offset: int = 0):
    """Regenerate counterfactuals using each base counterfactual as the source datum.

    The base CE's target class becomes the new source label. Returns a dict
    with the regenerated dataset, shared histogram edges, and summaries of
    different-class distances for the regenerated and baseline datasets.
    """
    recs = [r for r in base_ces.records if not diff_class_only or r.y_ce != r.y]
    if not recs:
        raise UndefinedMetricError("no base counterfactuals to regenerate from")
    xs = np.stack([r.x_ce for r in recs])
    ys = np.array([r.y_ce for r in recs])
    regen = build_ce_dataset(generator, xs, ys, n_per_class, source_ids=[r.record_id for r in recs],
                             provenance=base_ces.provenance, id_offset=id_offset)
    d_new = _diff_class_l2(regen)
    d_base = _diff_class_l2(baseline)
    both = np.concatenate([d_new, d_base])
    edges = np.histogram_bin_edges(both, bins=bins)
    return {"dataset": regen, "edges": edges, "from_ce": distance_summary(d_new, edges),
            "baseline": distance_summary(d_base, edges)}
