"""Prompts derived from ground truth.

Two families live here: the point/box prompts used to drive a promptable
segmenter from a reference mask, and the few-shot target embeddings built by
masked average pooling of frozen encoder features.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .arrayio import atomic_write_bytes, decode_array, encode_array
from .data import LabelMask, mask_to_model_grid, to_model_input
from .encoder import PATCH_SIZE, EmbeddingMap, cache_get_or_encode

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class ConnectedComponent:
    mask: np.ndarray
    label: int
    component_id: int
    pixel_count: int


@dataclass
class PointPrompts:
    coords: np.ndarray  # (c, 2) row, col
    labels: np.ndarray  # (c,)


@dataclass
class BoxPrompts:
    boxes: np.ndarray  # (c, 2, 2): (top-left, bottom-right) as (row, col)


def _labels_of(mask):
    return mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)


def _check_label(mask, label):
    if isinstance(mask, LabelMask) and label not in mask.label_set:
        raise ValueError(f"label {label} not in label_set {mask.label_set}")


def connected_components(mask, label):
    """8-connected components of ``mask == label``, in row-major order of
    their first pixel."""
    _check_label(mask, label)
    binary = _labels_of(mask) == label
    lab, n = ndimage.label(binary, structure=EIGHT_CONNECTED)
    out = []
    for cid in range(1, n + 1):
        m = lab == cid
        out.append(ConnectedComponent(m, int(label), cid, int(m.sum())))
    return out


def boundary(mask):
    """Pixels of ``mask`` with at least one 4-neighbour outside it.

    The image border counts as outside.
    """
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def distance_map(comp):
    """Euclidean distance from each component pixel to the nearest boundary
    pixel; zero outside the component."""
    m = comp.mask if isinstance(comp, ConnectedComponent) else np.asarray(comp, bool)
    b = boundary(m)
    if not b.any():
        return np.zeros(m.shape)
    d = ndimage.distance_transform_edt(~b)
    d[~m] = 0.0
    return d


def _dmf_argmax(m):
    d = distance_map(m)
    rows, cols = np.nonzero(m)  # row-major order
    k = int(np.argmax(d[rows, cols]))  # first maximum wins
    return rows[k], cols[k]


def extract_point_prompts(mask, label) -> PointPrompts:
    comps = connected_components(mask, label)
    coords = np.array([_dmf_argmax(c.mask) for c in comps], dtype=np.int64).reshape(-1, 2)
    return PointPrompts(coords, np.ones(len(comps), dtype=np.int64))


def extract_box_prompts(mask, label) -> BoxPrompts:
    boxes = []
    for c in connected_components(mask, label):
        rows, cols = np.nonzero(c.mask)
        boxes.append([[rows.min(), cols.min()], [rows.max(), cols.max()]])
    return BoxPrompts(np.array(boxes, dtype=np.int64).reshape(-1, 2, 2))


# ---------------------------------------------------------------- few-shot embeddings

def downsample_ground_truth(labels, factor=PATCH_SIZE, rule="majority"):
    """Reduce a label map by ``factor`` per axis.

    ``majority``: most frequent label in each block, ties go to the larger
    label id (so background loses every tie). ``nearest``: the block's
    centre pixel. Dimensions that are not multiples of ``factor`` are padded
    with background.
    """
    y = np.asarray(_labels_of(labels))
    h, w = y.shape
    ph, pw = -h % factor, -w % factor
    if ph or pw:
        y = np.pad(y, ((0, ph), (0, pw)))
    H, W = y.shape[0] // factor, y.shape[1] // factor
    if rule == "nearest":
        return y[factor // 2::factor, factor // 2::factor][:H, :W].copy()
    if rule != "majority":
        raise ValueError(f"unknown downsampling rule {rule!r}")
    blocks = y.reshape(H, factor, W, factor).transpose(0, 2, 1, 3).reshape(H, W, -1)
    ids = np.unique(y)  # ascending
    counts = np.stack([(blocks == v).sum(-1) for v in ids], axis=-1)
    # argmax returns the first maximum, so search from the largest id down
    pick = counts.shape[-1] - 1 - np.argmax(counts[..., ::-1], axis=-1)
    return ids[pick].astype(np.int32)


@dataclass
class TargetEmbedding:
    vector: np.ndarray
    label: int
    provenance: tuple = ()


def masked_average_pool(z, y_small, label, provenance=()) -> TargetEmbedding:
    """Mean of the feature vectors of ``z`` (C, H, W) over cells where
    ``y_small == label``."""
    feats = z.features if isinstance(z, EmbeddingMap) else np.asarray(z)
    y_small = np.asarray(y_small)
    if feats.shape[1:] != y_small.shape:
        raise ValueError(f"mask grid {y_small.shape} does not match embedding grid {feats.shape[1:]}")
    sel = y_small == label
    n = int(sel.sum())
    if n == 0:
        raise ValueError(f"empty mask for label {label}")
    vec = feats[:, sel].astype(np.float64).sum(axis=1) / n
    return TargetEmbedding(vec, int(label), tuple(provenance))


class MissingLabelError(ValueError):
    def __init__(self, missing):
        self.missing = missing
        lines = ", ".join(f"{p} lacks label {l}" for p, l in missing)
        super().__init__(f"few-shot slices missing labels: {lines}")


@dataclass
class FewshotPromptSet:
    embeddings: np.ndarray  # (N_L, C, 256) float32
    label_set: tuple
    provenance: list = field(default_factory=list)
    downsample_rule: str = "majority"
    encoder_identity: str = ""

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.label_set = tuple(int(l) for l in self.label_set)
        if self.embeddings.ndim != 3 or self.embeddings.shape[0] < 1:
            raise ValueError("prompt set needs shape (N_L >= 1, C, D)")
        if self.embeddings.shape[1] != len(self.label_set):
            raise ValueError("embedding label axis does not match label_set")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("prompt embeddings must be finite")

    @property
    def n_shots(self):
        return self.embeddings.shape[0]

    def header(self):
        return {"schema": 1, "label_set": list(self.label_set), "n_shots": self.n_shots,
                "provenance": [list(p) for p in self.provenance],
                "downsample_rule": self.downsample_rule,
                "encoder_identity": self.encoder_identity}

    def to_bytes(self):
        head = json.dumps(self.header(), sort_keys=True).encode()
        return struct.pack("<Q", len(head)) + head + encode_array(self.embeddings)

    @classmethod
    def from_bytes(cls, buf):
        (n,) = struct.unpack_from("<Q", buf, 0)
        head = json.loads(buf[8:8 + n].decode())
        emb = decode_array(buf[8 + n:])
        return cls(emb, tuple(head["label_set"]), [tuple(p) for p in head["provenance"]],
                   head["downsample_rule"], head["encoder_identity"])

    def sha256(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path):
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def embedding_grid_labels(mask: LabelMask, rule="majority"):
    """Ground truth on the encoder's grid: nearest resize to the model input
    size, then downsample by the patch size."""
    return downsample_ground_truth(mask_to_model_grid(mask), PATCH_SIZE, rule)


def build_prompt_set(collection, backend, cache=None, rule="majority") -> FewshotPromptSet:
    """Stack of target embeddings, shape (N_L, C, 256), in collection order.

    ``collection`` holds ``(ImageSlice, LabelMask)`` pairs sharing a label set.
    """
    collection = list(collection)
    if not collection:
        raise ValueError("few-shot collection is empty")
    label_set = collection[0][1].label_set
    grids, missing = [], []
    for img, mask in collection:
        if mask.label_set != label_set:
            raise ValueError("all few-shot masks must share one label_set")
        g = embedding_grid_labels(mask, rule)
        grids.append(g)
        missing += [(img.slice_id, l) for l in label_set if not np.any(g == l)]
    if missing:
        raise MissingLabelError(missing)
    rows, prov = [], []
    for (img, _), g in zip(collection, grids):
        z = cache_get_or_encode(cache, backend, to_model_input(img))
        rows.append([masked_average_pool(z, g, l).vector for l in label_set])
        prov.append(tuple(img.provenance))
    return FewshotPromptSet(np.array(rows), label_set, prov, rule, backend.identity)
