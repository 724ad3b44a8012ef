"""A short walk through the library on the synthetic dataset.

Run with ``python3 demos/tour.py``. Takes a couple of minutes on one core;
pass ``--quick`` to cut training to a handful of iterations.
"""

import sys
import tempfile

import numpy as np

from fewseg.data import SyntheticDatasetSpec, generate_synthetic_dataset
from fewseg.encoder import EmbeddingCache, build_toy_encoder
from fewseg.finetune import TrainConfig, evaluate, fewshot_candidates, finetune
from fewseg.prompting import (build_prompt_set, embedding_grid_labels, extract_box_prompts,
                              extract_point_prompts)

quick = "--quick" in sys.argv

# %% data: disks are label 1, rectangles label 2
data = generate_synthetic_dataset(SyntheticDatasetSpec(num_subjects=30, rng_seed=0))
train, test = data[:20], data[20:]
img, mask = train[0]
print(img.slice_id, img.pixels.shape, "labels present:", mask.present())

# %% baseline prompts straight from a mask
pts = extract_point_prompts(mask.labels, 1)
boxes = extract_box_prompts(mask.labels, 2)
print("disk point prompt:", pts.coords.tolist())
print("rectangle box:", boxes.boxes.tolist())

# %% the 64x64 embedding grid seen by masked pooling
grid = embedding_grid_labels(mask)
print("grid cells per label:", {l: int(np.sum(grid == l)) for l in (1, 2)})

# %% frozen encoder, cached features, pooled prompts
encoder = build_toy_encoder(depth=2, heads=2, internal_dim=64, rng_seed=0)
cache = EmbeddingCache(tempfile.mkdtemp(prefix="fewseg_cache_"))
shots = fewshot_candidates(train)[:5]
prompts = build_prompt_set(shots, encoder, cache)
print("prompt set:", prompts.embeddings.shape, "(N_L, C, D)")

# %% fine-tune the decoder only
res = finetune(shots, prompts, encoder, cache, TrainConfig(max_iterations=5 if quick else 100))
print("loss: first %.3f, last %.3f" % (res.loss_history[0], res.loss_history[-1]))

# %% evaluate on held-out slices
report = evaluate(res.decoder, prompts, test, encoder, cache, names={1: "disk", 2: "rectangle"})
print(report.to_csv())
