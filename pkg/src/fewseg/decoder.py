"""Mask decoder driven by few-shot target embeddings.

The token sequence is ``2*C`` learned query tokens (foreground, background per
label) followed by the ``N_L*C`` prompt embeddings. Two-way layers let the
sequence and the image grid attend to each other; afterwards the image grid is
upscaled 4x with channels reduced, and each query token is mapped by an MLP to
a vector that is dot-multiplied with every upscaled pixel.

Prompt rows are an unordered set: attention logits toward prompt keys carry a
``-log(N_L)`` bias, so every label's exemplars share one unit of attention
mass whatever their count. Reordering or duplicating exemplars therefore
leaves the output unchanged.
"""

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .arrayio import atomic_write_bytes, read_array, write_array
from .encoder import EmbeddingMap
from .prompting import FewshotPromptSet


@dataclass(frozen=True)
class DecoderConfig:
    num_labels: int = 1
    num_two_way_layers: int = 2
    embed_dim: int = 256
    reduced_dim: int = 32
    upscale_dim: int = 64
    heads: int = 8
    mlp_hidden: int = 2048
    readout_hidden: int = 256
    attention_downsample: int = 2
    tokens_per_label: int = 2
    use_image_positional_encoding: bool = True
    output_size: int = 1024
    upscale_mode: str = "bilinear"  # or "transposed"
    encoder_skip: bool = True

    def validate(self):
        if self.num_labels < 1 or self.num_two_way_layers < 1:
            raise ValueError("need at least one label and one two-way layer")
        if self.tokens_per_label != 2:
            raise ValueError("tokens_per_label is fixed at 2 (foreground, background)")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        inner = self.embed_dim // self.attention_downsample
        if self.embed_dim % self.attention_downsample or inner % self.heads:
            raise ValueError("cross-attention width must be divisible by heads")
        if self.upscale_mode not in ("bilinear", "transposed"):
            raise ValueError("upscale_mode must be 'bilinear' or 'transposed'")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even for positional encodings")
        return self


class Attention(nn.Module):
    def __init__(self, dim, heads, inner):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(dim, inner)
        self.k_proj = nn.Linear(dim, inner)
        self.v_proj = nn.Linear(dim, inner)
        self.out_proj = nn.Linear(inner, dim)

    def _split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, q, k, v, key_bias=None):
        q, k, v = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if key_bias is not None:
            logits = logits + key_bias
        out = torch.softmax(logits, dim=-1) @ v
        b, h, n, c = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, h * c))


class TwoWayLayer(nn.Module):
    def __init__(self, cfg: DecoderConfig, self_attention: bool):
        super().__init__()
        d = cfg.embed_dim
        inner = d // cfg.attention_downsample
        self.has_self_attention = self_attention
        if self_attention:
            self.self_attn = Attention(d, cfg.heads, d)
            self.norm1 = nn.LayerNorm(d)
        self.cross_token_to_image = Attention(d, cfg.heads, inner)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_hidden), nn.GELU(), nn.Linear(cfg.mlp_hidden, d))
        self.norm3 = nn.LayerNorm(d)
        self.cross_image_to_token = Attention(d, cfg.heads, inner)
        self.norm4 = nn.LayerNorm(d)

    def forward(self, queries, keys, query_pe, key_pe, token_bias):
        if self.has_self_attention:
            q = queries + query_pe
            queries = self.norm1(queries + self.self_attn(q, q, queries, token_bias))
        q, k = queries + query_pe, keys + key_pe
        queries = self.norm2(queries + self.cross_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))
        q, k = queries + query_pe, keys + key_pe
        keys = self.norm4(keys + self.cross_image_to_token(k, q, queries, token_bias))
        return queries, keys


class LayerNorm2d(nn.Module):
    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


def _upscaler(cfg):
    """4x spatial upscaling with channels ``embed_dim -> upscale_dim -> reduced_dim``.

    ``transposed`` is the stride-2 transposed-convolution stack. ``bilinear``
    mixes channels with 1x1 convolutions and resizes bilinearly, so every output
    pixel sees the same linear map; with a randomly initialised decoder the
    transposed stack gives each of the 16 sub-pixel phases its own projection,
    which buries the label signal under a phase checkerboard.

    A 1x1 convolution commutes with bilinear resizing (the interpolation weights
    sum to one), so projecting before resizing is the same function on fewer
    channels.
    """
    d, u, r = cfg.embed_dim, cfg.upscale_dim, cfg.reduced_dim
    if cfg.upscale_mode == "transposed":
        return nn.Sequential(nn.ConvTranspose2d(d, u, 2, stride=2), LayerNorm2d(u), nn.GELU(),
                             nn.ConvTranspose2d(u, r, 2, stride=2), nn.GELU())
    up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
    return nn.Sequential(nn.Conv2d(d, u, 1), up, LayerNorm2d(u), nn.GELU(),
                         nn.Conv2d(u, r, 1), up, nn.GELU())


class MaskDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        d, c = cfg.embed_dim, cfg.num_labels
        self.tokens = nn.Parameter(torch.zeros(2 * c, d))
        self.layers = nn.ModuleList(TwoWayLayer(cfg, self_attention=i > 0)
                                    for i in range(cfg.num_two_way_layers))
        self.upscale = _upscaler(cfg)
        h = cfg.readout_hidden
        self.readout_trunk = nn.Sequential(nn.Linear(d, h), nn.GELU(), nn.Linear(h, h), nn.GELU())
        self.readout_weight = nn.Parameter(torch.zeros(2 * c, h, cfg.reduced_dim))
        self.readout_bias = nn.Parameter(torch.zeros(2 * c, cfg.reduced_dim))
        self.register_buffer("pe_gaussian", torch.zeros(2, d // 2))

    def positional_encoding(self, h, w):
        rows = (torch.arange(h, dtype=self.pe_gaussian.dtype) + 0.5) / h
        cols = (torch.arange(w, dtype=self.pe_gaussian.dtype) + 0.5) / w
        grid = torch.stack(torch.meshgrid(cols, rows, indexing="xy"), -1).reshape(h * w, 2)
        proj = 2 * math.pi * ((2 * grid - 1) @ self.pe_gaussian)
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)

    def forward(self, image_embedding, prompts):
        """``image_embedding`` (B, D, h, w), ``prompts`` (N_L, C, D) ->
        logits (B, C, 2, S, S)."""
        cfg = self.config
        b, d, h, w = image_embedding.shape
        if prompts.ndim != 3 or prompts.shape[0] < 1:
            raise ValueError("empty prompt set")
        n, c, pd = prompts.shape
        if c != cfg.num_labels or pd != d or d != cfg.embed_dim:
            raise ValueError(f"prompt shape {tuple(prompts.shape)} / embedding dim {d} "
                             f"incompatible with config (C={cfg.num_labels}, D={cfg.embed_dim})")
        prompts = prompts.to(image_embedding.dtype)
        seq = torch.cat([self.tokens, prompts.reshape(n * c, d)], dim=0)
        token_bias = torch.cat([seq.new_zeros(2 * c), seq.new_full((n * c,), -math.log(n))])
        queries = seq.unsqueeze(0).expand(b, -1, -1)
        query_pe = queries
        keys = image_embedding.flatten(2).transpose(1, 2)
        if cfg.use_image_positional_encoding:
            key_pe = self.positional_encoding(h, w).to(keys.dtype)
        else:
            key_pe = torch.zeros_like(keys[:1])
        for layer in self.layers:
            queries, keys = layer(queries, keys, query_pe, key_pe, token_bias)
        enriched = keys.transpose(1, 2).reshape(b, d, h, w)
        if cfg.encoder_skip:
            enriched = enriched + image_embedding
        up = self.upscale(enriched)
        hyper = torch.einsum("bth,thr->btr", self.readout_trunk(queries[:, : 2 * c]),
                             self.readout_weight) + self.readout_bias
        logits = torch.einsum("btr,brxy->btxy", hyper, up)
        if logits.shape[-1] != cfg.output_size or logits.shape[-2] != cfg.output_size:
            logits = F.interpolate(logits, size=(cfg.output_size, cfg.output_size),
                                   mode="bilinear", align_corners=False)
        return logits.reshape(b, c, 2, cfg.output_size, cfg.output_size)


def _fan_in(name, p):
    if name.startswith("upscale") and p.ndim == 4 and p.shape[2] > 1:  # ConvTranspose2d (in, out, k, k)
        return p.shape[0]
    if name == "tokens":
        return p.shape[1]
    if name == "readout_weight":
        return p.shape[1]
    return p[0].numel()


def init_decoder(config: DecoderConfig, rng_seed=0) -> MaskDecoder:
    """He (fan-in) normal weights, zero biases, unit norm scales."""
    model = MaskDecoder(config)
    gen = torch.Generator().manual_seed(int(rng_seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            is_norm = "norm" in name or isinstance(_owner(model, name), LayerNorm2d)
            if is_norm:
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias" or name == "readout_bias":
                p.zero_()
            else:
                std = math.sqrt(2.0 / _fan_in(name, p))
                p.copy_(torch.randn(p.shape, generator=gen) * std)
        model.pe_gaussian.copy_(torch.randn(model.pe_gaussian.shape, generator=gen))
    return model


def _owner(model, name):
    mod = model
    for part in name.split(".")[:-1]:
        mod = getattr(mod, part)
    return mod


@dataclass
class SegmentationPrediction:
    logits: np.ndarray  # (C, 2, S, S)
    label_set: tuple

    @property
    def label_map(self):
        return resolve_labels(self)


def resolve_labels(pred):
    """One-vs-rest resolution: largest positive (fg - bg) margin wins, else 0."""
    logits = pred.logits if isinstance(pred, SegmentationPrediction) else np.asarray(pred)
    label_set = pred.label_set if isinstance(pred, SegmentationPrediction) \
        else tuple(range(1, logits.shape[0] + 1))
    margin = logits[:, 0] - logits[:, 1]
    best = np.argmax(margin, axis=0)
    claimed = np.take_along_axis(margin, best[None], 0)[0] > 0
    lut = np.asarray(label_set, dtype=np.int32)
    return np.where(claimed, lut[best], 0).astype(np.int32)


def _as_tensor(x, dtype):
    if isinstance(x, EmbeddingMap):
        x = x.features
    if isinstance(x, FewshotPromptSet):
        x = x.embeddings
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def decode(embedding, prompts: FewshotPromptSet, decoder: MaskDecoder) -> SegmentationPrediction:
    if prompts.embeddings.shape[1] != decoder.config.num_labels:
        raise ValueError("prompt label_set size does not match decoder num_labels")
    dtype = next(decoder.parameters()).dtype
    with torch.no_grad():
        z = _as_tensor(embedding, dtype)[None]
        logits = decoder(z, _as_tensor(prompts, dtype))[0]
    return SegmentationPrediction(logits.cpu().numpy(), prompts.label_set)


# ---------------------------------------------------------------- model bundles

def flatten_params(model):
    names, shapes, chunks = [], [], []
    for name, p in model.state_dict().items():
        names.append(name)
        shapes.append(list(p.shape))
        chunks.append(p.detach().cpu().numpy().astype(np.float32).ravel())
    return names, shapes, np.concatenate(chunks)


def save_bundle(out_dir, decoder, prompts: FewshotPromptSet, seed, provenance=None):
    """Write ``manifest.json``, ``params.arr`` and ``prompts.fsps``."""
    os.makedirs(out_dir, exist_ok=True)
    names, shapes, flat = flatten_params(decoder)
    params_sha = write_array(os.path.join(out_dir, "params.arr"), flat)
    prompts.save(os.path.join(out_dir, "prompts.fsps"))
    manifest = {
        "schema": 1,
        "config": asdict(decoder.config),
        "seed": int(seed),
        "encoder_identity": prompts.encoder_identity,
        "label_set": list(prompts.label_set),
        "prompt_set_sha256": prompts.sha256(),
        "params_sha256": params_sha,
        "layout": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
        "provenance": provenance or {},
    }
    atomic_write_bytes(os.path.join(out_dir, "manifest.json"),
                       json.dumps(manifest, indent=2, sort_keys=True).encode())
    return manifest


def load_bundle(bundle_dir):
    with open(os.path.join(bundle_dir, "manifest.json")) as f:
        manifest = json.load(f)
    cfg = DecoderConfig(**manifest["config"])
    model = MaskDecoder(cfg)
    flat = read_array(os.path.join(bundle_dir, "params.arr"))
    state, off = {}, 0
    for entry in manifest["layout"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        state[entry["name"]] = torch.from_numpy(flat[off:off + size].reshape(entry["shape"]).copy())
        off += size
    model.load_state_dict(state)
    prompts = FewshotPromptSet.load(os.path.join(bundle_dir, "prompts.fsps"))
    if prompts.sha256() != manifest["prompt_set_sha256"]:
        raise ValueError("prompt set does not match bundle manifest")
    return model, prompts, manifest
