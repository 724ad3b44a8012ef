"""Volume loading, resampling, intensity windowing, slicing and synthetic data."""

import enum
import glob
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .arrayio import atomic_write_bytes, read_array, write_array

MODEL_SIZE = 1024
MANIFEST_SCHEMA = 1


class Modality(str, enum.Enum):
    CT = "CT"
    MRI = "MRI"
    SYNTHETIC = "SYNTHETIC"


class Axis(str, enum.Enum):
    sagittal = "sagittal"
    coronal = "coronal"
    axial = "axial"

    @property
    def index(self):
        # voxel arrays are stored (x, y, z)
        return {"sagittal": 0, "coronal": 1, "axial": 2}[self.value]


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple
    modality: Modality = Modality.CT
    subject_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.modality = Modality(self.modality)
        if self.voxels.ndim != 3 or self.voxels.size == 0:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {self.voxels.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")


@dataclass
class ImageSlice:
    pixels: np.ndarray
    spacing: tuple = (1.0, 1.0)
    provenance: tuple = ("", Axis.axial.value, 0)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.pixels.ndim != 2:
            raise ValueError("slice pixels must be 2D")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("slice pixels must be finite")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("slice pixels must lie in [0, 1]")
        if len(self.spacing) != 2 or min(self.spacing) <= 0:
            raise ValueError(f"invalid slice spacing {self.spacing}")

    @property
    def slice_id(self):
        subject, axis, index = self.provenance
        return f"{subject}_{axis}_{int(index):04d}"


@dataclass
class LabelMask:
    labels: np.ndarray
    label_set: tuple

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(np.int32, copy=False)
        self.label_set = tuple(int(v) for v in self.label_set)
        if self.labels.ndim != 2:
            raise ValueError("label mask must be 2D")
        if 0 in self.label_set or len(set(self.label_set)) != len(self.label_set):
            raise ValueError("label_set must hold distinct non-zero ids")
        extra = set(np.unique(self.labels).tolist()) - {0, *self.label_set}
        if extra:
            raise ValueError(f"mask contains labels outside label_set: {sorted(extra)}")

    def present(self):
        return [l for l in self.label_set if np.any(self.labels == l)]


@dataclass(frozen=True)
class ScaleMeta:
    original_shape: tuple
    factors: tuple


@dataclass
class ModelInput:
    image: np.ndarray
    scale_meta: ScaleMeta

    def __post_init__(self):
        if self.image.shape != (MODEL_SIZE, MODEL_SIZE, 3):
            raise ValueError(f"model input must be {MODEL_SIZE}x{MODEL_SIZE}x3, got {self.image.shape}")


SHAPE_KINDS = ("disk", "rectangle", "ring", "capsule")


@dataclass
class SyntheticDatasetSpec:
    num_subjects: int = 10
    shapes_per_slice: int = 2
    shape_kinds: tuple = ("disk", "rectangle")
    label_assignment: dict = field(default_factory=lambda: {"disk": 1, "rectangle": 2})
    noise_sigma: float = 0.05
    rng_seed: int = 0
    image_size: int = 128
    slices_per_subject: int = 1
    size_range: tuple = (10, 22)

    def __post_init__(self):
        if self.num_subjects < 1:
            raise ValueError("num_subjects must be >= 1")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")
        ids = [self.label_assignment[k] for k in self.shape_kinds]
        if len(set(ids)) != len(ids) or 0 in ids:
            raise ValueError("every shape kind needs a distinct non-zero label id")

    @property
    def label_set(self):
        return tuple(sorted(self.label_assignment[k] for k in self.shape_kinds))


# ---------------------------------------------------------------- resampling

def _resample(arr, spacing, target, order):
    if min(arr.shape) < 2:
        raise ValueError("volume too small to resample")
    spacing = np.asarray(spacing, float)
    target = np.asarray(target, float)
    out_shape = tuple(max(1, int(round(n * s / t))) for n, s, t in zip(arr.shape, spacing, target))
    step = target / spacing
    if np.allclose(step, 1.0) and out_shape == arr.shape:
        return arr.copy()
    return ndimage.affine_transform(arr, np.diag(step), offset=0.0, output_shape=out_shape,
                                    order=order, mode="nearest", prefilter=False)


def _target_spacing(v, target_spacing, mode):
    target = [float(t) for t in np.broadcast_to(target_spacing, (3,))]
    if min(target) <= 0:
        raise ValueError("target spacing must be positive")
    if mode == "in_plane_only":
        target[2] = v.spacing[2]
    elif mode != "isotropic":
        raise ValueError(f"unknown resampling mode {mode!r}")
    return tuple(target)


def resample_volume(v: Volume, target_spacing, mode="isotropic") -> Volume:
    """Linearly resample intensities to ``target_spacing`` (mm).

    ``mode="in_plane_only"`` keeps the original z spacing.
    """
    target = _target_spacing(v, target_spacing, mode)
    out = _resample(v.voxels.astype(np.float64), v.spacing, target, order=1)
    return Volume(out, target, v.modality, v.subject_id)


def resample_mask(mask, v: Volume, target_spacing, mode="isotropic"):
    """Nearest-neighbour resampling of a label volume paired with ``v``."""
    mask = np.asarray(mask)
    if mask.shape != v.voxels.shape:
        raise ValueError("mask shape must match volume shape")
    target = _target_spacing(v, target_spacing, mode)
    return _resample(mask, v.spacing, target, order=0).astype(np.int32)


# ---------------------------------------------------------------- intensities

@dataclass(frozen=True)
class ClipRange:
    lo: float
    hi: float


@dataclass(frozen=True)
class PercentileClip:
    p_lo: float = 0.5
    p_hi: float = 99.5


def clip_and_rescale(v: Volume, policy) -> Volume:
    x = v.voxels.astype(np.float64)
    if isinstance(policy, ClipRange):
        lo, hi = float(policy.lo), float(policy.hi)
        if not lo < hi:
            raise ValueError("clip range requires lo < hi")
    elif isinstance(policy, PercentileClip):
        if not 0 <= policy.p_lo < policy.p_hi <= 100:
            raise ValueError("percentiles require 0 <= p_lo < p_hi <= 100")
        lo, hi = np.percentile(x, [policy.p_lo, policy.p_hi])
        if lo == hi:
            raise ValueError("degenerate intensity range")
    else:
        raise TypeError(f"unsupported clip policy {policy!r}")
    out = (np.clip(x, lo, hi) - lo) / (hi - lo)
    return Volume(out, v.spacing, v.modality, v.subject_id)


def parse_clip_policy(spec):
    """``[lo, hi]`` numbers or ``["0.5%", "99.5%"]`` strings, as in dataset tables."""
    if isinstance(spec, (ClipRange, PercentileClip)):
        return spec
    lo, hi = spec
    if isinstance(lo, str) and lo.strip().endswith("%"):
        return PercentileClip(float(lo.strip()[:-1]), float(hi.strip()[:-1]))
    return ClipRange(float(lo), float(hi))


# ---------------------------------------------------------------- slicing

def _slice_spacing(spacing, axis_index):
    return tuple(s for i, s in enumerate(spacing) if i != axis_index)


def extract_slices(v: Volume, axis, mask_volume=None, label_set=None, skip_empty=False):
    """Cut ``v`` into 2D slices along ``axis``.

    Returns a list of ``(ImageSlice, LabelMask | None)``. ``skip_empty`` drops
    slices whose mask has no foreground.
    """
    try:
        axis = Axis(axis)
    except ValueError:
        raise ValueError(f"axis out of range: {axis!r}") from None
    ax = axis.index
    if mask_volume is not None:
        mask_volume = np.asarray(mask_volume)
        if mask_volume.shape != v.voxels.shape:
            raise ValueError("mask volume shape must equal volume shape")
        if label_set is None:
            label_set = tuple(int(l) for l in np.unique(mask_volume) if l != 0)
    spacing = _slice_spacing(v.spacing, ax)
    out = []
    for i in range(v.voxels.shape[ax]):
        img = ImageSlice(np.take(v.voxels, i, axis=ax), spacing, (v.subject_id, axis.value, i))
        mask = None
        if mask_volume is not None:
            mask = LabelMask(np.take(mask_volume, i, axis=ax), label_set)
            if skip_empty and not np.any(mask.labels):
                continue
        out.append((img, mask))
    return out


def stack_slices(slices, axis):
    """Reassemble slices (as returned by :func:`extract_slices`) into a 3D array."""
    return np.stack([s.pixels for s in slices], axis=Axis(axis).index)


# ---------------------------------------------------------------- model grid

def _linear_weights(n_in, n_out):
    # half-pixel centres, edge clamped
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    W = np.zeros((n_out, n_in))
    np.add.at(W, (np.arange(n_out), i0), 1 - w1)
    np.add.at(W, (np.arange(n_out), i1), w1)
    return W


def resize_bilinear(arr, out_shape):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape == tuple(out_shape):
        return arr.copy()
    Wr = _linear_weights(arr.shape[0], out_shape[0])
    Wc = _linear_weights(arr.shape[1], out_shape[1])
    return Wr @ arr @ Wc.T


def _nearest_index(n_in, n_out):
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)


def resize_nearest(arr, out_shape):
    arr = np.asarray(arr)
    return arr[np.ix_(_nearest_index(arr.shape[0], out_shape[0]),
                      _nearest_index(arr.shape[1], out_shape[1]))]


def to_model_input(s: ImageSlice) -> ModelInput:
    h, w = s.pixels.shape
    img = resize_bilinear(s.pixels, (MODEL_SIZE, MODEL_SIZE)).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)
    meta = ScaleMeta((h, w), (MODEL_SIZE / h, MODEL_SIZE / w))
    return ModelInput(np.repeat(img[:, :, None], 3, axis=2), meta)


def mask_to_model_grid(mask: LabelMask):
    return resize_nearest(mask.labels, (MODEL_SIZE, MODEL_SIZE))


def labels_to_native(label_map, meta: ScaleMeta):
    """Sample a model-grid label map back at native pixel centres."""
    return resize_nearest(label_map, meta.original_shape)


def native_to_model_coords(rc, meta: ScaleMeta):
    rc = np.asarray(rc, dtype=float)
    return (rc + 0.5) * np.asarray(meta.factors) - 0.5


def model_to_native_coords(rc, meta: ScaleMeta):
    rc = np.asarray(rc, dtype=float)
    return (rc + 0.5) / np.asarray(meta.factors) - 0.5


# ---------------------------------------------------------------- synthetic data

def _rasterize(kind, center, size, rng, shape):
    rr, cc = np.mgrid[: shape[0], : shape[1]]
    r0, c0 = center
    if kind == "disk":
        return (rr - r0) ** 2 + (cc - c0) ** 2 <= size ** 2
    if kind == "rectangle":
        hh, hw = size, max(3, int(round(size * rng.uniform(0.5, 1.0))))
        return (np.abs(rr - r0) <= hh) & (np.abs(cc - c0) <= hw)
    if kind == "ring":
        d2 = (rr - r0) ** 2 + (cc - c0) ** 2
        return (d2 <= size ** 2) & (d2 >= (0.55 * size) ** 2)
    if kind == "capsule":
        theta = rng.uniform(0, np.pi)
        half, rad = size * 0.8, max(2.0, size * 0.35)
        dr, dc = np.sin(theta), np.cos(theta)
        t = np.clip((rr - r0) * dr + (cc - c0) * dc, -half, half)
        return (rr - r0 - t * dr) ** 2 + (cc - c0 - t * dc) ** 2 <= rad ** 2
    raise ValueError(kind)


def synthetic_levels(label_set):
    """Label intensities alternating below and above a mid-grey background.

    With the background in the middle, the blurred rim between a shape and
    the background never averages to another label's intensity.
    """
    lows, highs = label_set[0::2], label_set[1::2]
    levels = {l: v for l, v in zip(lows, np.linspace(0.15, 0.35, len(lows)))}
    levels.update({l: v for l, v in zip(highs, np.linspace(0.85, 0.65, len(highs)))})
    return levels


def generate_synthetic_dataset(spec: SyntheticDatasetSpec):
    """Deterministic slices of non-overlapping shapes, one intensity per label."""
    rng = np.random.default_rng(spec.rng_seed)
    n = spec.image_size
    label_set = spec.label_set
    background = 0.5
    levels = synthetic_levels(label_set)
    out = []
    for subj in range(spec.num_subjects):
        sid = f"synth{subj:03d}"
        for idx in range(spec.slices_per_subject):
            labels = np.zeros((n, n), np.int32)
            occupied = np.zeros((n, n), bool)
            for k in range(spec.shapes_per_slice):
                kind = spec.shape_kinds[k % len(spec.shape_kinds)]
                for _ in range(200):
                    size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
                    margin = size + 2
                    if 2 * margin >= n:
                        continue
                    center = rng.integers(margin, n - margin, size=2)
                    shape_mask = _rasterize(kind, center, size, rng, (n, n))
                    if shape_mask.any() and not np.any(shape_mask & occupied):
                        break
                else:
                    raise RuntimeError("could not place shapes")
                labels[shape_mask] = spec.label_assignment[kind]
                occupied |= ndimage.binary_dilation(shape_mask, iterations=3)
            pixels = np.full((n, n), background)
            for l, level in levels.items():
                pixels[labels == l] = level
            if spec.noise_sigma > 0:
                pixels = pixels + rng.normal(0.0, spec.noise_sigma, size=(n, n))
            pixels = np.clip(pixels, 0.0, 1.0)
            out.append((ImageSlice(pixels, (1.0, 1.0), (sid, Axis.axial.value, idx)),
                        LabelMask(labels, label_set)))
    return out


# ---------------------------------------------------------------- volume I/O

_DTYPES = {"float32", "float64", "int16", "int32", "uint8", "uint16", "int8"}


def load_volume(path, subject_id=None):
    """Load a volume and optional label volume.

    Supports NIfTI (needs ``nibabel``; a ``<stem>_seg.nii[.gz]`` file is
    picked up as labels) and raw arrays described by a JSON sidecar::

        {"shape": [x, y, z], "spacing": [sx, sy, sz], "modality": "CT",
         "dtype": "int16", "image": "img.raw",
         "label": "seg.raw", "label_dtype": "uint8"}

    Returns ``(Volume, labels-or-None)``.
    """
    path = os.fspath(path)
    if path.endswith(".json"):
        with open(path) as f:
            meta = json.load(f)
        base = os.path.dirname(path)
        stem = os.path.basename(path)[: -len(".json")]
        shape = tuple(int(s) for s in meta["shape"])
        dtype = meta.get("dtype", "float32")
        if dtype not in _DTYPES:
            raise ValueError(f"{path}: unsupported dtype {dtype}")
        img_path = os.path.join(base, meta.get("image", stem + ".raw"))
        raw = np.fromfile(img_path, dtype=np.dtype(dtype).newbyteorder("<"))
        if raw.size != int(np.prod(shape)):
            raise ValueError(f"{img_path}: expected {int(np.prod(shape))} voxels, found {raw.size}")
        vol = Volume(raw.reshape(shape), meta["spacing"], meta.get("modality", "CT"),
                     subject_id or meta.get("subject_id", stem))
        labels = None
        if meta.get("label"):
            ldt = np.dtype(meta.get("label_dtype", "uint8")).newbyteorder("<")
            labels = np.fromfile(os.path.join(base, meta["label"]), dtype=ldt)
            if labels.size != raw.size:
                raise ValueError(f"{path}: label size does not match image")
            labels = labels.reshape(shape).astype(np.int32)
        return vol, labels
    if path.endswith((".nii", ".nii.gz")):
        try:
            import nibabel as nib
        except ImportError as e:
            raise ImportError("reading NIfTI needs the optional 'nibabel' package") from e
        img = nib.load(path)
        stem = os.path.basename(path).split(".nii")[0]
        vol = Volume(np.asarray(img.dataobj, dtype=np.float32), img.header.get_zooms()[:3],
                     Modality.CT, subject_id or stem)
        seg_path = None
        for ext in (".nii.gz", ".nii"):
            cand = os.path.join(os.path.dirname(path), stem + "_seg" + ext)
            if os.path.exists(cand):
                seg_path = cand
        labels = None
        if seg_path:
            labels = np.asarray(nib.load(seg_path).dataobj).astype(np.int32)
        return vol, labels
    raise ValueError(f"unrecognised volume format: {path}")


def find_volumes(in_dir):
    """Volume files in ``in_dir`` (sidecars and NIfTI, label files excluded)."""
    files = sorted(glob.glob(os.path.join(in_dir, "*.json")))
    nii = sorted(glob.glob(os.path.join(in_dir, "*.nii")) + glob.glob(os.path.join(in_dir, "*.nii.gz")))
    files += [p for p in nii if "_seg.nii" not in p]
    return files


# ---------------------------------------------------------------- slice directories

@dataclass
class SliceRecord:
    slice_id: str
    image: ImageSlice
    mask: Optional[LabelMask]
    split: str = "train"


def write_slice_dir(records: Sequence[SliceRecord], out_dir, label_set, extra=None):
    """Write slices as array files plus ``manifest.json``; returns the manifest dict."""
    os.makedirs(os.path.join(out_dir, "slices"), exist_ok=True)
    entries = []
    for rec in records:
        subject, axis, index = rec.image.provenance
        img_rel = f"slices/{rec.slice_id}.image.arr"
        entry = {
            "id": rec.slice_id,
            "subject_id": subject,
            "axis": axis,
            "index": int(index),
            "spacing": list(rec.image.spacing),
            "shape": list(rec.image.pixels.shape),
            "split": rec.split,
            "image": img_rel,
            "image_sha256": write_array(os.path.join(out_dir, img_rel), rec.image.pixels),
        }
        if rec.mask is not None:
            mask_rel = f"slices/{rec.slice_id}.mask.arr"
            entry["mask"] = mask_rel
            entry["mask_sha256"] = write_array(os.path.join(out_dir, mask_rel), rec.mask.labels)
            entry["labels_present"] = rec.mask.present()
        entries.append(entry)
    manifest = {"schema": MANIFEST_SCHEMA, "label_set": list(label_set), "slices": entries}
    if extra:
        manifest.update(extra)
    atomic_write_bytes(os.path.join(out_dir, "manifest.json"),
                       json.dumps(manifest, indent=2, sort_keys=True).encode())
    return manifest


def read_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.json")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"{path}: unsupported manifest schema {manifest.get('schema')}")
    return manifest


def read_slice_dir(data_dir, ids=None, split=None):
    """Load records from a slice directory, optionally filtered by id or split."""
    manifest = read_manifest(data_dir)
    label_set = tuple(manifest["label_set"])
    by_id = {e["id"]: e for e in manifest["slices"]}
    if ids is not None:
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise KeyError(f"slice ids not in manifest: {missing}")
        entries = [by_id[i] for i in ids]
    else:
        entries = [e for e in manifest["slices"] if split is None or e.get("split") == split]
    out = []
    for e in entries:
        pixels = read_array(os.path.join(data_dir, e["image"]))
        img = ImageSlice(pixels, e["spacing"], (e["subject_id"], e["axis"], e["index"]))
        mask = None
        if "mask" in e:
            mask = LabelMask(np.rint(read_array(os.path.join(data_dir, e["mask"]))), label_set)
        out.append(SliceRecord(e["id"], img, mask, e.get("split", "train")))
    return out


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
