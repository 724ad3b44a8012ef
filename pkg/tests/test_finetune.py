import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fewseg.data import ImageSlice, LabelMask, SyntheticDatasetSpec, generate_synthetic_dataset
from fewseg.decoder import DecoderConfig, init_decoder
from fewseg.encoder import EmbeddingCache, build_toy_encoder
from fewseg.finetune import (AugmentConfig, DivergedError, TrainConfig, TrainState, adam_step,
                             augment, evaluate, fewshot_candidates, finetune, flip, iteration_budget,
                             loss_csv, segmentation_loss, write_run_dir)
from fewseg.prompting import build_prompt_set

SMALL = DecoderConfig(num_labels=2, num_two_way_layers=1, mlp_hidden=128, heads=4)


def test_budget_listed_sizes():
    assert [iteration_budget(n) for n in (5, 20, 50)] == [50, 80, 100]


def test_budget_rule_monotone_and_capped():
    vals = [iteration_budget(n) for n in range(1, 400)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert iteration_budget(100) == 150 and iteration_budget(200) == 200 and iteration_budget(399) == 200


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(beta2=1.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(iteration_mode="step").validate()
    assert TrainConfig().learning_rate == 1e-4
    assert (TrainConfig().beta1, TrainConfig().beta2) == (0.9, 0.99)


def test_adam_first_step_is_lr():
    cfg = TrainConfig()
    st_ = TrainState.create({"w": torch.tensor([0.5], dtype=torch.float64)})
    out = adam_step(st_, {"w": torch.tensor([1.0], dtype=torch.float64)}, cfg)
    assert float(out.params["w"]) == pytest.approx(0.5 - 1e-4, abs=1e-10)
    assert out.step == 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_adam_matches_scalar_oracle(gs):
    cfg = TrainConfig(learning_rate=1e-2)
    state = TrainState.create({"w": torch.tensor([0.3], dtype=torch.float64)})
    p, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate(gs, 1):
        state = adam_step(state, {"w": torch.tensor([g], dtype=torch.float64)}, cfg)
        p, m, v = oracles.adam(p, g, m, v, t, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    assert float(state.params["w"]) == pytest.approx(p, abs=1e-12)


def test_adam_rejects_nonfinite():
    state = TrainState.create({"w": torch.zeros(2)})
    with pytest.raises(DivergedError, match="diverged"):
        adam_step(state, {"w": torch.tensor([1.0, float("nan")])}, TrainConfig())


def test_adam_shape_mismatch():
    state = TrainState.create({"w": torch.zeros(2)})
    with pytest.raises(ValueError):
        adam_step(state, {"w": torch.zeros(3)}, TrainConfig())


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 2, 6, 7))
    target = rng.integers(0, 3, size=(6, 7))
    got = float(segmentation_loss(torch.from_numpy(logits), torch.from_numpy(target), (1, 2)))
    assert got == pytest.approx(oracles.seg_loss(logits, target, (1, 2)), abs=1e-10)


def test_loss_nonnegative_and_rejects_unknown_labels():
    logits = torch.randn(1, 2, 5, 5)
    assert float(segmentation_loss(logits, torch.zeros(5, 5, dtype=torch.long), (1,))) >= 0
    with pytest.raises(ValueError):
        segmentation_loss(logits, torch.full((5, 5), 3), (1,))


def test_perfect_logits_give_small_loss():
    target = torch.zeros(8, 8, dtype=torch.long)
    target[2:5, 2:5] = 1
    t = (target == 1).double()
    logits = torch.stack([20 * (2 * t - 1), -20 * (2 * t - 1)])[None]
    assert float(segmentation_loss(logits, target, (1,))) < 1e-6


def _pair(seed=0, size=32):
    rng = np.random.default_rng(seed)
    x = rng.random((size, size))
    y = np.zeros((size, size), int)
    y[5:15, 8:20] = 1
    return ImageSlice(x), LabelMask(y, (1,))


def test_flip_moves_image_and_mask_together():
    img, mask = _pair()
    fi, fm = flip(img, mask, 1)
    np.testing.assert_array_equal(fi.pixels, img.pixels[:, ::-1])
    np.testing.assert_array_equal(fm.labels, mask.labels[:, ::-1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_augment_preserves_shape_range_and_labels(seed):
    img, mask = _pair(seed % 7)
    ai, am = augment(img, mask, np.random.default_rng(seed), AugmentConfig(probability=0.9))
    assert ai.pixels.shape == img.pixels.shape and am.labels.shape == mask.labels.shape
    assert ai.pixels.min() >= 0 and ai.pixels.max() <= 1
    assert set(np.unique(am.labels)) <= {0, 1}


def test_augment_deterministic_per_seed():
    img, mask = _pair()
    a = augment(img, mask, np.random.default_rng(3))
    b = augment(img, mask, np.random.default_rng(3))
    np.testing.assert_array_equal(a[0].pixels, b[0].pixels)
    np.testing.assert_array_equal(a[1].labels, b[1].labels)


def test_augment_shape_mismatch():
    img, _ = _pair()
    with pytest.raises(ValueError):
        augment(img, LabelMask(np.zeros((3, 3), int), (1,)), np.random.default_rng(0))


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    enc = build_toy_encoder(depth=1, heads=1, internal_dim=16, rng_seed=0)
    cache = EmbeddingCache(tmp_path_factory.mktemp("cache"))
    data = generate_synthetic_dataset(SyntheticDatasetSpec(num_subjects=8, rng_seed=1, image_size=64,
                                                           size_range=(6, 12)))
    shots = fewshot_candidates(data)[:2]
    return enc, cache, data, shots, build_prompt_set(shots, enc, cache)


def test_zero_iterations_returns_init(setup):
    enc, cache, _, shots, ps = setup
    res = finetune(shots, ps, enc, cache, TrainConfig(max_iterations=0), SMALL)
    ref = init_decoder(SMALL, 0).state_dict()
    for k, v in res.decoder.state_dict().items():
        assert torch.equal(v, ref[k])
    assert res.loss_history == []


def test_finetune_deterministic_and_frozen(setup):
    enc, cache, _, shots, ps = setup
    h, b = enc.parameter_hash(), ps.to_bytes()
    a = finetune(shots, ps, enc, cache, TrainConfig(max_iterations=2), SMALL)
    c = finetune(shots, ps, enc, cache, TrainConfig(max_iterations=2), SMALL)
    assert a.loss_history == c.loss_history
    assert enc.parameter_hash() == h and ps.to_bytes() == b
    assert a.provenance["iteration_mode"] == "epoch" and a.provenance["iterations"] == 2


def test_loss_decreases_for_seed_panel(setup):
    enc, cache, _, shots, ps = setup
    for seed in range(5):
        res = finetune(shots, ps, enc, cache, TrainConfig(max_iterations=20, decoder_seed=seed), SMALL)
        h = np.convolve(res.loss_history, np.ones(5) / 5, mode="valid")
        assert h[-1] < h[0], seed


def test_batch_mode_takes_one_batch_per_iteration(setup):
    enc, cache, _, shots, ps = setup
    res = finetune(shots, ps, enc, cache,
                   TrainConfig(max_iterations=2, iteration_mode="batch", batch_size=1), SMALL)
    assert len(res.loss_history) == 2


def test_augmented_run_and_outputs(tmp_path, setup):
    enc, cache, data, shots, ps = setup
    cfg = TrainConfig(max_iterations=1, augment=True)
    res = finetune(shots, ps, enc, cache, cfg, SMALL)
    write_run_dir(tmp_path / "run", res, ps, cfg)
    for name in ("config.json", "loss.csv", "provenance.json", "bundle/manifest.json"):
        assert (tmp_path / "run" / name).exists()
    assert loss_csv(res.loss_history).splitlines()[0] == "iteration,loss"
    assert json.loads((tmp_path / "run" / "provenance.json").read_text())["augmented"] is True
    rep = evaluate(res.decoder, ps, data[-2:], enc, cache)
    assert {r.metric for r in rep.rows} == {"IoU", "ASSD"}


def test_encoder_mismatch_rejected(setup):
    _, cache, _, shots, ps = setup
    other = build_toy_encoder(depth=1, heads=1, internal_dim=16, rng_seed=9)
    with pytest.raises(ValueError):
        finetune(shots, ps, other, cache, TrainConfig(max_iterations=0), SMALL)
