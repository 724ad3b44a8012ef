"""The ``fewseg`` command line.

Every verb reads one validated configuration document (YAML or JSON) and
writes a ``provenance.json`` next to its outputs. Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error.
"""

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import asdict
from importlib import resources
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from .analysis import projection_csv, sample_class_embeddings, tsne_project
from .arrayio import atomic_write_bytes, write_array
from .data import (PercentileClip, SliceRecord, SyntheticDatasetSpec, clip_and_rescale, extract_slices,
                   find_volumes, generate_synthetic_dataset, load_volume, parse_clip_policy,
                   read_manifest, read_slice_dir, resample_mask, resample_volume, to_model_input,
                   write_slice_dir)
from .decoder import DecoderConfig, load_bundle
from .encoder import EmbeddingCache, ToyEncoderConfig, build_toy_encoder, cache_get_or_encode
from .finetune import (TrainConfig, evaluate, fewshot_candidates, finetune, nshot_sweep, predict,
                       sweep_csv, write_run_dir)
from .prompting import MissingLabelError, build_prompt_set, extract_box_prompts, extract_point_prompts

log = logging.getLogger("fewseg")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- configuration

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    label_set: Optional[list[int]] = None
    label_names: dict[int, str] = {}
    target_spacing: Union[float, list[float]] = 1.0
    resample_mode: Literal["isotropic", "in_plane_only"] = "isotropic"
    clip: Optional[list[Union[float, str]]] = None  # [lo, hi] or ["0.5%", "99.5%"]
    axis: Literal["sagittal", "coronal", "axial"] = "axial"
    skip_empty: bool = False
    test_fraction: float = Field(0.5, ge=0.0, le=1.0)


class SynthSection(_Section):
    num_subjects: int = Field(110, ge=1)
    train_subjects: int = Field(60, ge=0)
    image_size: int = Field(128, ge=16)
    slices_per_subject: int = Field(1, ge=1)
    shapes_per_slice: int = Field(2, ge=1)
    shape_kinds: list[str] = ["disk", "rectangle"]
    label_assignment: dict[str, int] = {"disk": 1, "rectangle": 2}
    noise_sigma: float = Field(0.05, ge=0.0)
    size_range: tuple[int, int] = (10, 22)

    @model_validator(mode="after")
    def _subjects(self):
        if self.train_subjects > self.num_subjects:
            raise ValueError("train_subjects exceeds num_subjects")
        return self


class EncoderSection(_Section):
    depth: int = 2
    heads: int = 2
    internal_dim: int = 64
    rng_seed: int = 0


class DecoderSection(_Section):
    num_two_way_layers: int = 2
    heads: int = 8
    mlp_hidden: int = 2048
    upscale_mode: Literal["bilinear", "transposed"] = "bilinear"
    encoder_skip: bool = True
    use_image_positional_encoding: bool = True


class TrainSection(_Section):
    learning_rate: float = Field(1e-4, gt=0)
    beta1: float = 0.9
    beta2: float = 0.99
    max_iterations: Optional[int] = None
    batch_size: int = Field(1, ge=1)
    iteration_mode: Literal["epoch", "batch"] = "epoch"
    augment: bool = False


class PromptSection(_Section):
    downsample_rule: Literal["majority", "nearest"] = "majority"
    n_shots: int = Field(5, ge=1)


class AnalysisSection(_Section):
    n: int = Field(50, ge=1)
    perplexity: float = Field(25.0, gt=0)
    iterations: int = Field(5000, ge=1)


class SweepSection(_Section):
    sizes: list[int] = [5, 20, 50]


class RunConfig(_Section):
    seed: int = 0
    data: DataSection = DataSection()
    synth: SynthSection = SynthSection()
    encoder: EncoderSection = EncoderSection()
    decoder: DecoderSection = DecoderSection()
    train: TrainSection = TrainSection()
    prompts: PromptSection = PromptSection()
    analysis: AnalysisSection = AnalysisSection()
    sweep: SweepSection = SweepSection()


def _format_validation(err: ValidationError):
    parts = []
    for e in err.errors():
        key = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{key}: {e['msg']}")
    return "invalid config: " + "; ".join(parts)


def load_config(path=None, seed=None) -> RunConfig:
    """Parse and fully validate a config document; ``seed`` overrides the file."""
    doc = {}
    if path:
        try:
            with open(path) as f:
                doc = yaml.safe_load(f) or {}
        except OSError as e:
            raise CliError(f"cannot read config {path}: {e.strerror}", EXIT_USAGE) from None
        except yaml.YAMLError as e:
            raise CliError(f"config {path} is not valid YAML/JSON: {e}", EXIT_USAGE) from None
        if not isinstance(doc, dict):
            raise CliError("config document must be a mapping", EXIT_USAGE)
    if seed is not None:
        doc = {**doc, "seed": seed}
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as e:
        raise CliError(_format_validation(e), EXIT_USAGE) from None


# ---------------------------------------------------------------- helpers

def _dumps(obj):
    return (json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n").encode()


def _default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


@contextlib.contextmanager
def run_lock(directory):
    """Exclusive ``.lock`` file so two commands never share a run directory."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"{directory} is in use by another run (remove {path} if stale)") from None
    os.close(fd)
    try:
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(path)


def _invocation(args, cfg):
    skip = {"func"}
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    return {"tool": "fewseg", "version": __version__, "command": args.command,
            "options": opts, "config": cfg.model_dump(mode="json")}


def write_provenance(path, args, cfg, **extra):
    doc = _invocation(args, cfg)
    doc.update(extra)
    atomic_write_bytes(path, _dumps(doc))


def _cache(args):
    root = args.cache_dir or os.environ.get("FEWSEG_CACHE")
    return EmbeddingCache(root) if root else None


def _backend(cfg):
    return build_toy_encoder(ToyEncoderConfig(**cfg.encoder.model_dump()))


def _train_config(cfg):
    return TrainConfig(**cfg.train.model_dump(), rng_seed=cfg.seed, decoder_seed=cfg.seed)


def _decoder_config(cfg, num_labels):
    return DecoderConfig(num_labels=num_labels, **cfg.decoder.model_dump())


def _names(cfg, label_set):
    return {l: cfg.data.label_names.get(l, str(l)) for l in label_set}


def _need_dir(path, what="data directory"):
    if not os.path.isdir(path):
        raise CliError(f"{what} not found: {path}", EXIT_USAGE)
    if what == "data directory" and not os.path.exists(os.path.join(path, "manifest.json")):
        raise CliError(f"{path} has no manifest.json; run preprocess or synth first", EXIT_USAGE)


def _pairs(records):
    return [(r.image, r.mask) for r in records if r.mask is not None]


def select_fewshot(data_dir, ids=None, auto=None, n=5, rule="majority"):
    """Few-shot records chosen explicitly by id or by the largest-mask heuristic."""
    if ids:
        try:
            return read_slice_dir(data_dir, ids=ids)
        except KeyError as e:
            raise CliError(str(e.args[0]), EXIT_USAGE) from None
    if auto != "largest-mask":
        raise CliError("choose few-shot slices with --ids or --auto-select largest-mask", EXIT_USAGE)
    records = [r for r in read_slice_dir(data_dir, split="train") if r.mask is not None]
    usable = {img.slice_id for img, _ in fewshot_candidates(_pairs(records), rule)}
    ranked = sorted((r for r in records if r.image.slice_id in usable),
                    key=lambda r: (-int(np.count_nonzero(r.mask.labels)), r.slice_id))
    if len(ranked) < n:
        raise CliError(f"only {len(ranked)} training slices hold every label; {n} requested")
    return ranked[:n]


def _prompts_for(records, backend, cache, rule):
    try:
        return build_prompt_set(_pairs(records), backend, cache, rule)
    except MissingLabelError as e:
        bad = sorted({sid for sid, _ in e.missing})
        raise CliError(f"invalid few-shot selection: {e}; offending ids: {','.join(bad)}",
                       EXIT_USAGE) from None


# ---------------------------------------------------------------- verbs

def _synth_records(cfg):
    s = cfg.synth
    spec = SyntheticDatasetSpec(num_subjects=s.num_subjects, shapes_per_slice=s.shapes_per_slice,
                                shape_kinds=tuple(s.shape_kinds), label_assignment=dict(s.label_assignment),
                                noise_sigma=s.noise_sigma, rng_seed=cfg.seed, image_size=s.image_size,
                                slices_per_subject=s.slices_per_subject, size_range=tuple(s.size_range))
    data = generate_synthetic_dataset(spec)
    subjects = list(dict.fromkeys(img.provenance[0] for img, _ in data))
    train = set(subjects[: s.train_subjects])
    records = [SliceRecord(img.slice_id, img, mask, "train" if img.provenance[0] in train else "test")
               for img, mask in data]
    return records, spec.label_set, {"source": "synthetic", "synthetic_spec": asdict(spec)}


def _volume_records(cfg, in_dir):
    d = cfg.data
    files = find_volumes(in_dir)
    if not files:
        raise CliError(f"no volumes found in {in_dir}", EXIT_USAGE)
    policy = parse_clip_policy(d.clip) if d.clip else PercentileClip(0.0, 100.0)
    loaded, errors = [], []
    for path in files:
        try:
            vol, labels = load_volume(path)
            res = resample_volume(vol, d.target_spacing, d.resample_mode)
            lab = resample_mask(labels, vol, d.target_spacing, d.resample_mode) if labels is not None else None
            loaded.append((clip_and_rescale(res, policy), lab))
        except Exception as e:  # per-file report, keep going
            errors.append(f"{path}: {e}")
    label_set = tuple(d.label_set) if d.label_set else tuple(sorted(
        {int(v) for _, lab in loaded if lab is not None for v in np.unique(lab) if v != 0}))
    subjects = sorted({v.subject_id for v, _ in loaded})
    order = np.random.default_rng(cfg.seed).permutation(len(subjects))
    n_test = int(round(d.test_fraction * len(subjects)))
    test = {subjects[i] for i in order[len(subjects) - n_test:]}
    records = []
    for vol, lab in loaded:
        for img, mask in extract_slices(vol, d.axis, lab, label_set or None, d.skip_empty):
            records.append(SliceRecord(img.slice_id, img, mask, "test" if vol.subject_id in test else "train"))
    return records, label_set, {"source": os.path.abspath(in_dir)}, errors


def cmd_preprocess(args, cfg):
    if args.synthetic:
        records, label_set, extra = _synth_records(cfg)
        errors = []
    else:
        if not args.in_dir:
            raise CliError("preprocess needs --in DIR (or --synthetic)", EXIT_USAGE)
        _need_dir(args.in_dir, "input directory")
        records, label_set, extra, errors = _volume_records(cfg, args.in_dir)
    with run_lock(args.out):
        manifest = write_slice_dir(records, args.out, label_set, extra)
        write_provenance(os.path.join(args.out, "provenance.json"), args, cfg,
                         slices=len(records), errors=errors)
    print(f"wrote {len(manifest['slices'])} slices to {args.out}")
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_RUNTIME if errors else EXIT_OK


def cmd_synth(args, cfg):
    args.synthetic, args.in_dir = True, None
    return cmd_preprocess(args, cfg)


def cmd_encode_cache(args, cfg):
    _need_dir(args.data)
    cache = _cache(args)
    if cache is None:
        raise CliError("encode-cache needs --cache-dir or FEWSEG_CACHE", EXIT_USAGE)
    backend = _backend(cfg)
    records = read_slice_dir(args.data, split=args.split)
    with run_lock(cache.root):
        for r in records:
            cache_get_or_encode(cache, backend, to_model_input(r.image))
    summary = {"slices": len(records), "encoded": backend.calls, "cached": len(records) - backend.calls,
               "encoder_identity": backend.identity, "entries": len(cache)}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_build_prompts(args, cfg):
    _need_dir(args.data)
    backend, cache = _backend(cfg), _cache(args)
    records = select_fewshot(args.data, args.ids, args.auto_select, args.n or cfg.prompts.n_shots,
                             cfg.prompts.downsample_rule)
    prompts = _prompts_for(records, backend, cache, cfg.prompts.downsample_rule)
    prompts.save(args.out)
    write_provenance(args.out + ".provenance.json", args, cfg, prompt_set_sha256=prompts.sha256(),
                     fewshot_slices=[r.slice_id for r in records], encoder_identity=backend.identity)
    print(f"wrote prompt set with N_L={prompts.n_shots} to {args.out}")
    return EXIT_OK


def cmd_finetune(args, cfg):
    _need_dir(args.data)
    backend, cache = _backend(cfg), _cache(args)
    records = select_fewshot(args.data, args.ids, args.auto_select, args.n or cfg.prompts.n_shots,
                             cfg.prompts.downsample_rule)
    prompts = _prompts_for(records, backend, cache, cfg.prompts.downsample_rule)
    tc = _train_config(cfg)
    with run_lock(args.out):
        res = finetune(_pairs(records), prompts, backend, cache, tc,
                       _decoder_config(cfg, len(prompts.label_set)))
        res.provenance["invocation"] = _invocation(args, cfg)
        res.provenance["data_manifest"] = os.path.abspath(os.path.join(args.data, "manifest.json"))
        write_run_dir(args.out, res, prompts, tc)
    print(f"trained {len(res.loss_history)} iterations, final loss {res.loss_history[-1]:.6f}"
          if res.loss_history else "no iterations run")
    return EXIT_OK


def cmd_evaluate(args, cfg):
    _need_dir(args.data)
    if not os.path.exists(os.path.join(args.bundle, "manifest.json")):
        raise CliError(f"no model bundle at {args.bundle}", EXIT_USAGE)
    decoder, prompts, manifest = load_bundle(args.bundle)
    backend, cache = _backend(cfg), _cache(args)
    if manifest["encoder_identity"] != backend.identity:
        raise CliError(f"encoder identity mismatch: bundle was trained with "
                       f"{manifest['encoder_identity']}, config gives {backend.identity}")
    records = [r for r in read_slice_dir(args.data, split=args.split) if r.mask is not None]
    if not records:
        print(f"warning: split {args.split!r} is empty; writing a 'no data' report", file=sys.stderr)
    names = _names(cfg, prompts.label_set)
    report = evaluate(decoder, prompts, _pairs(records), backend, cache, names)
    with run_lock(args.out):
        atomic_write_bytes(os.path.join(args.out, "report.json"), report.to_json().encode())
        atomic_write_bytes(os.path.join(args.out, "report.csv"), report.to_csv().encode())
        if args.save_predictions:
            for r in records:
                pred = predict(decoder, prompts, r.image, backend, cache)
                write_array(os.path.join(args.out, "predictions", f"{r.slice_id}.mask.arr"), pred)
        write_provenance(os.path.join(args.out, "provenance.json"), args, cfg,
                         bundle_params_sha256=manifest["params_sha256"], slices=len(records))
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_export_prompts(args, cfg):
    _need_dir(args.data)
    label_set = tuple(read_manifest(args.data)["label_set"])
    names = _names(cfg, label_set)
    lines = []
    for r in read_slice_dir(args.data, split=args.split):
        if r.mask is None:
            continue
        for l in label_set:
            rec = {"slice_id": r.slice_id, "label": int(l), "label_name": names[l], "mode": args.mode}
            if args.mode == "points":
                p = extract_point_prompts(r.mask, l)
                rec.update(c=len(p.coords), coords=p.coords.tolist(), labels=p.labels.tolist())
            else:
                b = extract_box_prompts(r.mask, l)
                rec.update(c=len(b.boxes), boxes=b.boxes.tolist())
            lines.append(json.dumps(rec, sort_keys=True))
    atomic_write_bytes(args.out, ("\n".join(lines) + "\n" if lines else "").encode())
    write_provenance(args.out + ".provenance.json", args, cfg, records=len(lines))
    print(f"wrote {len(lines)} {args.mode} records to {args.out}")
    return EXIT_OK


def cmd_sweep(args, cfg):
    _need_dir(args.data)
    backend, cache = _backend(cfg), _cache(args)
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else cfg.sweep.sizes
    train = _pairs(read_slice_dir(args.data, split="train"))
    test = _pairs(read_slice_dir(args.data, split="test"))
    label_set = train[0][1].label_set if train else ()
    tc = _train_config(cfg)
    with run_lock(args.out):
        try:
            rows = nshot_sweep(train, test, sizes, backend, cache, tc,
                               _decoder_config(cfg, len(label_set)), selection_seed=cfg.seed)
        except ValueError as e:
            raise CliError(str(e), EXIT_USAGE) from None
        atomic_write_bytes(os.path.join(args.out, "sweep.csv"), sweep_csv(rows).encode())
        for row in rows:
            atomic_write_bytes(os.path.join(args.out, f"report_n{row.n_shots}.json"),
                               row.report.to_json().encode())
        write_provenance(os.path.join(args.out, "provenance.json"), args, cfg,
                         iterations={str(r.n_shots): r.iterations for r in rows})
    sys.stdout.write(sweep_csv(rows))
    return EXIT_OK


def cmd_analyze(args, cfg):
    _need_dir(args.data)
    backend, cache = _backend(cfg), _cache(args)
    records = _pairs(read_slice_dir(args.data, split=args.split))
    if not records:
        raise CliError(f"split {args.split!r} has no labelled slices", EXIT_USAGE)
    label_set = records[0][1].label_set
    names = {0: "background", **_names(cfg, label_set)}
    a = cfg.analysis
    summary = {}
    with run_lock(args.out):
        for l in label_set:
            sample = sample_class_embeddings(records, backend, cache, n=a.n, rng_seed=cfg.seed,
                                             classes=[0, l], rule=cfg.prompts.downsample_rule)
            proj = tsne_project(sample, a.perplexity, a.iterations, rng_seed=cfg.seed)
            fname = f"tsne_{names[l]}.csv"
            atomic_write_bytes(os.path.join(args.out, fname), projection_csv(proj, sample, names).encode())
            summary[names[l]] = {"file": fname, "rows": int(len(sample.labels)),
                                 "shortfall": {names[k]: v for k, v in sample.shortfall.items()},
                                 "final_kl": float(proj.kl_history[-1])}
        write_provenance(os.path.join(args.out, "provenance.json"), args, cfg, projections=summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def prompt_schema():
    """The JSON schema for ``export-prompts`` records."""
    text = resources.files("fewseg").joinpath("schemas/prompts.schema.json").read_text()
    return json.loads(text)


def _add_selection(p):
    p.add_argument("--ids", type=lambda s: [x for x in s.split(",") if x],
                   help="comma-separated few-shot slice ids")
    p.add_argument("--auto-select", choices=["largest-mask"],
                   help="pick the training slices with the largest labelled area")
    p.add_argument("--n", type=int, help="few-shot size for --auto-select (default: config)")


def build_parser():
    parser = argparse.ArgumentParser(prog="fewseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fewseg {__version__}")
    parser.add_argument("--config", help="YAML or JSON run configuration")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--jobs", type=int, help="torch intra-op threads")
    parser.add_argument("--cache-dir", help="embedding cache (default: $FEWSEG_CACHE)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="volumes -> slice directory")
    p.add_argument("--in", dest="in_dir")
    p.add_argument("--synthetic", action="store_true", help="generate the synthetic dataset instead")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="write the synthetic dataset as a slice directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode-cache", help="fill the embedding cache for a slice directory")
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.set_defaults(func=cmd_encode_cache)

    p = sub.add_parser("build-prompts", help="pool few-shot target embeddings into a prompt file")
    p.add_argument("--data", required=True)
    _add_selection(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_prompts)

    p = sub.add_parser("finetune", help="train the decoder on a few-shot selection")
    p.add_argument("--data", required=True)
    _add_selection(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="IoU / ASSD report for a model bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--save-predictions", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-prompts", help="baseline point or box prompts as JSON lines")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["points", "boxes"], required=True)
    p.add_argument("--split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_prompts)

    p = sub.add_parser("sweep", help="n-shot sweep over few-shot sizes")
    p.add_argument("--data", required=True)
    p.add_argument("--sizes", help="comma-separated sizes (default: config)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="t-SNE of per-class encoder embeddings")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        if args.jobs:
            import torch
            torch.set_num_threads(args.jobs)
        return args.func(args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except Exception as e:  # anything else is a runtime failure
        log.debug("unhandled", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
