"""Per-slice IoU and ASSD plus report aggregation."""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .prompting import boundary


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def iou(pred, gt):
    """Intersection over union in percent; 100 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 100.0
    return 100.0 * np.count_nonzero(pred & gt) / union


def surface_distances(a, b, spacing=(1.0, 1.0)):
    """Distances (mm) from each boundary pixel of ``a`` to the boundary of ``b``."""
    ba, bb = boundary(a), boundary(b)
    dt = ndimage.distance_transform_edt(~bb, sampling=spacing)
    return dt[ba]


def assd(pred, gt, spacing=(1.0, 1.0)):
    """Average symmetric surface distance in mm, or ``None`` if either mask
    is empty."""
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return None
    d = np.concatenate([surface_distances(pred, gt, spacing),
                        surface_distances(gt, pred, spacing)])
    return float(d.mean())


@dataclass
class MetricRow:
    anatomy: str
    metric: str
    mean: float
    std: float
    n: int
    excluded: int

    @property
    def no_data(self):
        return self.n == 0


@dataclass
class MetricsReport:
    rows: list
    per_slice: list = field(default_factory=list)
    spacing: object = None

    def row(self, anatomy, metric):
        for r in self.rows:
            if r.anatomy == str(anatomy) and r.metric == metric:
                return r
        raise KeyError((anatomy, metric))

    def mean_over_labels(self, metric):
        vals = [r.mean for r in self.rows if r.metric == metric and not r.no_data]
        return float(np.mean(vals)) if vals else float("nan")

    def to_json(self):
        return json.dumps({
            "rows": [{**r.__dict__, "mean": None if r.no_data else r.mean,
                      "std": None if r.no_data else r.std,
                      "status": "no data" if r.no_data else "ok"} for r in self.rows],
            "per_slice": self.per_slice,
            "spacing": self.spacing,
        }, indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["anatomy", "metric", "mean", "std", "n", "excluded"])
        for r in self.rows:
            if r.no_data:
                w.writerow([r.anatomy, r.metric, "no data", "no data", r.n, r.excluded])
            else:
                w.writerow([r.anatomy, r.metric, repr(r.mean), repr(r.std), r.n, r.excluded])
        return buf.getvalue()


def aggregate(values, spacing=None, per_slice=None) -> MetricsReport:
    """Population mean and std per (anatomy, metric).

    ``values`` maps ``(anatomy, metric)`` to a list of floats where ``None``
    marks an undefined value; undefined entries are excluded and counted.
    """
    rows = []
    for (anatomy, metric), vals in values.items():
        defined = [float(v) for v in vals if v is not None]
        excluded = len(vals) - len(defined)
        if defined:
            arr = np.asarray(defined)
            rows.append(MetricRow(str(anatomy), metric, float(arr.mean()), float(arr.std()),
                                  len(defined), excluded))
        else:
            rows.append(MetricRow(str(anatomy), metric, float("nan"), float("nan"), 0, excluded))
    return MetricsReport(rows, per_slice or [], spacing)


def evaluate_label_maps(pairs, label_set, names=None):
    """Score ``(slice_id, pred_labels, gt_labels, spacing)`` tuples per label."""
    names = names or {l: str(l) for l in label_set}
    values = {}
    for l in label_set:
        values[(names[l], "IoU")] = []
        values[(names[l], "ASSD")] = []
    per_slice = []
    for sid, pred, gt, spacing in pairs:
        for l in label_set:
            i = iou(pred == l, gt == l)
            a = assd(pred == l, gt == l, spacing)
            values[(names[l], "IoU")].append(i)
            values[(names[l], "ASSD")].append(a)
            per_slice.append({"slice": sid, "anatomy": names[l], "IoU": i, "ASSD": a})
    spacings = sorted({tuple(p[3]) for p in pairs})
    return aggregate(values, spacing=[list(s) for s in spacings], per_slice=per_slice)
