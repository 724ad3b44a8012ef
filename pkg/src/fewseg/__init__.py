"""Few-shot fine-tuning of a promptable mask decoder for anatomical segmentation.

Modules:
    data: volume loading, resampling, clipping, slicing and the synthetic dataset.
    encoder: frozen image encoders and the content-addressed embedding cache.
    prompting: point/box baseline prompts and pooled few-shot target embeddings.
    decoder: the prompt-driven mask decoder.
    finetune: decoder-only training, evaluation and n-shot sweeps.
    metrics: IoU and ASSD with aggregation.
    analysis: per-class embedding sampling and exact t-SNE.
    cli: the ``fewseg`` command line.
"""

__version__ = "0.1.0"
