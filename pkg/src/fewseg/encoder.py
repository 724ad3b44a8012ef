"""Frozen image encoders and the content-addressed embedding cache."""

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .arrayio import CorruptArrayError, atomic_write_bytes, decode_array, encode_array
from .data import MODEL_SIZE, ModelInput

log = logging.getLogger(__name__)

EMBED_CHANNELS = 256
PATCH_SIZE = 16


@dataclass
class EmbeddingMap:
    features: np.ndarray  # (256, H/16, W/16) float32
    source_key: str


class EncoderBackend:
    """Base class for frozen encoders.

    Subclasses implement :meth:`forward` mapping an ``(H, W, 3)`` float32
    image to ``(256, H/16, W/16)`` features, and expose a stable
    ``identity`` string. An adapter for pretrained weights only has to
    provide these two members (plus its own input normalisation).
    """

    patch_size = PATCH_SIZE
    identity = "abstract"

    def __init__(self):
        self.calls = 0

    def forward(self, image):
        raise NotImplementedError

    def parameter_hash(self):
        return hashlib.sha256(self.identity.encode()).hexdigest()


class _Block(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class _ToyViT(nn.Module):
    def __init__(self, depth, heads, dim, grid):
        super().__init__()
        self.patch = nn.Conv2d(3, dim, PATCH_SIZE, stride=PATCH_SIZE)
        self.pos = nn.Parameter(torch.zeros(1, grid * grid, dim))
        self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, EMBED_CHANNELS)
        self.out_norm = nn.LayerNorm(EMBED_CHANNELS)

    def forward(self, x):  # (B, 3, H, W)
        x = self.patch(x)
        b, c, h, w = x.shape
        x = x.flatten(2).transpose(1, 2) + self.pos
        for blk in self.blocks:
            x = blk(x)
        x = self.out_norm(self.head(self.norm(x)))
        return x.transpose(1, 2).reshape(b, EMBED_CHANNELS, h, w)


@dataclass(frozen=True)
class ToyEncoderConfig:
    depth: int = 2
    heads: int = 2
    internal_dim: int = 64
    rng_seed: int = 0


class ToyEncoder(EncoderBackend):
    """Small randomly initialised ViT: 16x16 patches, learned positions,
    pre-norm blocks and a linear head to 256 channels."""

    def __init__(self, config: ToyEncoderConfig):
        super().__init__()
        self.config = config
        grid = MODEL_SIZE // PATCH_SIZE
        gen = torch.Generator().manual_seed(int(config.rng_seed))
        self.net = _ToyViT(config.depth, config.heads, config.internal_dim, grid)
        with torch.no_grad():
            for name, p in self.net.named_parameters():
                if "norm" in name:
                    p.copy_(torch.ones_like(p) if name.endswith("weight") else torch.zeros_like(p))
                elif name == "pos":
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
                elif p.ndim > 1:
                    fan_in = p[0].numel()
                    p.copy_(torch.randn(p.shape, generator=gen) / np.sqrt(fan_in))
                else:
                    p.zero_()
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self._hash = self.parameter_hash()
        self.identity = (f"toy-vit-d{config.depth}-h{config.heads}-c{config.internal_dim}"
                         f"-{self._hash[:16]}")
        self._lock = threading.Lock()

    def parameter_hash(self):
        h = hashlib.sha256()
        for name, p in self.net.state_dict().items():
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()

    def forward(self, image):
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
        with torch.no_grad(), self._lock:
            return self.net(x)[0].numpy()


def build_toy_encoder(config=None, **kwargs) -> ToyEncoder:
    if config is None:
        config = ToyEncoderConfig(**kwargs)
    elif isinstance(config, dict):
        config = ToyEncoderConfig(**config)
    for name in ("depth", "heads", "internal_dim"):
        if int(getattr(config, name)) < 1:
            raise ValueError(f"encoder {name} must be >= 1")
    if config.internal_dim % config.heads:
        raise ValueError("internal_dim must be divisible by heads")
    return ToyEncoder(config)


def source_key(backend, image):
    h = hashlib.sha256()
    h.update(backend.identity.encode())
    h.update(b"\0")
    h.update(np.ascontiguousarray(image, dtype="<f4").tobytes())
    return h.hexdigest()


def encode(backend: EncoderBackend, inp: ModelInput) -> EmbeddingMap:
    image = inp.image if isinstance(inp, ModelInput) else np.asarray(inp)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) input, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("invalid input intensities")
    backend.calls += 1
    feats = np.asarray(backend.forward(image), dtype=np.float32)
    p = backend.patch_size
    expected = (EMBED_CHANNELS, image.shape[0] // p, image.shape[1] // p)
    if feats.shape != expected:
        raise RuntimeError(f"backend returned {feats.shape}, expected {expected}")
    return EmbeddingMap(feats, source_key(backend, image))


class EmbeddingCache:
    """Directory of ``blobs/<sha256>.arr`` files plus ``index.json``.

    Index entries record each blob's own SHA-256 so corruption is detected on
    load.
    """

    def __init__(self, root):
        self.root = os.fspath(root)
        os.makedirs(os.path.join(self.root, "blobs"), exist_ok=True)
        self._lock = threading.Lock()

    @property
    def index_path(self):
        return os.path.join(self.root, "index.json")

    def _read_index(self):
        try:
            with open(self.index_path) as f:
                return json.load(f)
        except FileNotFoundError:
            return {"schema": 1, "entries": {}}

    def __contains__(self, key):
        return key in self._read_index()["entries"]

    def __len__(self):
        return len(self._read_index()["entries"])

    def get(self, key):
        entry = self._read_index()["entries"].get(key)
        if entry is None:
            return None
        path = os.path.join(self.root, entry["file"])
        try:
            with open(path, "rb") as f:
                buf = f.read()
        except FileNotFoundError:
            log.warning("cache blob missing for %s", key)
            return None
        if hashlib.sha256(buf).hexdigest() != entry["sha256"]:
            log.warning("cache entry %s is corrupted; recomputing", key)
            return None
        try:
            return decode_array(buf)
        except CorruptArrayError:
            log.warning("cache entry %s is unreadable; recomputing", key)
            return None

    def put(self, key, arr):
        data = encode_array(arr)
        rel = f"blobs/{key}.arr"
        atomic_write_bytes(os.path.join(self.root, rel), data)
        with self._lock:
            index = self._read_index()
            index["entries"][key] = {"file": rel, "sha256": hashlib.sha256(data).hexdigest(),
                                     "shape": list(np.shape(arr))}
            atomic_write_bytes(self.index_path, json.dumps(index, indent=1, sort_keys=True).encode())


def cache_get_or_encode(cache, backend, inp) -> EmbeddingMap:
    if cache is None:
        return encode(backend, inp)
    image = inp.image if isinstance(inp, ModelInput) else inp
    key = source_key(backend, image)
    feats = cache.get(key)
    if feats is not None:
        return EmbeddingMap(feats, key)
    emb = encode(backend, inp)
    cache.put(key, emb.features)
    return emb
