import logging
from collections import OrderedDict

import numpy as np
import pytest
import torch

from errors import DegenerateInputError, InvalidFieldError, PreconditionError, ShapeMismatchError
from grid_core import NormStats, Rng, ScalarField
from nn_engine import (ActivationPattern, AdamState, PairDataset, TrainConfig, UNetConfig, adam_step,
                       backward, default_overlap, init_params, load_model, mse_loss, param_shapes,
                       predict, receptive_margin, restore_pair, save_model, split_train_validation,
                       train, unet_forward, validation_size)


def _tiny_params(dims=2, depth=1, base=2, seed=0):
    cfg = UNetConfig(spatial_dims=dims, depth=depth, kernel=3, base_channels=base)
    return init_params(cfg, Rng(seed), dtype=torch.float64)


def _smooth_pairs(gen, n=40, size=16, sigma=0.5):
    from scipy import ndimage
    pairs = []
    for _ in range(n):
        clean = ndimage.gaussian_filter(gen.normal(size=(size, size)), 2.0) * 4.0
        pairs.append((ScalarField(clean + gen.normal(0, sigma, clean.shape)),
                      ScalarField(clean + gen.normal(0, sigma, clean.shape))))
    return PairDataset.from_pairs(pairs)


def test_config_validation():
    with pytest.raises(PreconditionError):
        UNetConfig(spatial_dims=4)
    with pytest.raises(PreconditionError):
        UNetConfig(kernel=2)
    with pytest.raises(PreconditionError):
        UNetConfig(depth=0)
    with pytest.raises(PreconditionError):
        UNetConfig(final_activation="sigmoid")
    with pytest.raises(PreconditionError):
        TrainConfig(validation_fraction=1.0)


def test_parameter_enumeration_order():
    names = list(param_shapes(UNetConfig(spatial_dims=3, depth=2, base_channels=4)).keys())
    layers = [n.rsplit(".", 1)[0] for n in names[::2]]
    assert layers == ["enc0_conv1", "enc0_conv2", "enc1_conv1", "enc1_conv2", "mid_conv1", "mid_conv2",
                      "dec1_conv1", "dec1_conv2", "dec0_conv1", "dec0_conv2", "out"]
    shapes = param_shapes(UNetConfig(spatial_dims=2, depth=2, base_channels=4))
    assert shapes["dec1_conv1.weight"] == (8, 16 + 8, 3, 3)
    assert shapes["out.weight"] == (1, 4, 1, 1)


def test_init_is_seeded():
    a = _tiny_params(seed=3)
    b = _tiny_params(seed=3)
    c = _tiny_params(seed=4)
    assert all(torch.equal(a.tensors[k], b.tensors[k]) for k in a.names)
    assert not torch.equal(a.tensors["enc0_conv1.weight"], c.tensors["enc0_conv1.weight"])
    assert torch.count_nonzero(a.tensors["enc0_conv1.bias"]) == 0


def test_forward_shape_and_divisibility():
    p = _tiny_params(depth=2)
    out = unet_forward(torch.zeros(2, 1, 16, 12, dtype=torch.float64), p)
    assert out.shape == (2, 1, 16, 12)
    with pytest.raises(PreconditionError):
        unet_forward(torch.zeros(1, 1, 14, 16, dtype=torch.float64), p)
    with pytest.raises(ShapeMismatchError):
        unet_forward(torch.zeros(1, 1, 8, 8, 8, dtype=torch.float64), p)


def test_mse_loss_value_and_gradient():
    pred = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
    target = torch.zeros_like(pred)
    loss, grad = mse_loss(pred, target)
    assert loss == pytest.approx(7.5)
    torch.testing.assert_close(grad, pred / 2.0)


def test_gradients_match_finite_differences():
    """回放激活模式后，每个参数的中心差分与解析梯度一致"""
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(1, 1, 16, 16, generator=gen, dtype=torch.float64)
    y = torch.randn(1, 1, 16, 16, generator=gen, dtype=torch.float64)
    p = _tiny_params(depth=2, base=2)

    pattern = ActivationPattern()
    _, grads = backward(x, y, p, pattern=pattern)
    h = 1e-3
    checked = 0
    for name in p.names:
        flat = p.tensors[name].reshape(-1)
        for i in range(flat.numel()):
            losses = []
            for sign in (1.0, -1.0):
                tensors = OrderedDict((k, v.clone()) for k, v in p.tensors.items())
                tensors[name].view(-1)[i] += sign * h
                pred = unet_forward(x, p.replace(tensors), pattern=pattern.rewind(replay=True))
                losses.append(mse_loss(pred, y)[0])
            numeric = (losses[0] - losses[1]) / (2 * h)
            analytic = float(grads[name].reshape(-1)[i])
            assert abs(numeric - analytic) / (abs(analytic) + 1e-8) < 1e-4, name
            checked += 1
    assert checked == p.numel()


def test_adam_first_step_moves_by_learning_rate():
    p = _tiny_params()
    grads = OrderedDict((k, torch.full_like(v, 0.5)) for k, v in p.tensors.items())
    new, state = adam_step(p, grads, AdamState.zeros(p), lr=1e-2, eps=1e-8)
    assert state.step == 1
    for name in p.names:
        delta = new.tensors[name] - p.tensors[name]
        torch.testing.assert_close(delta, torch.full_like(delta, -1e-2 * 0.5 / (0.5 + 1e-8)))
    bad = OrderedDict(grads)
    bad["out.bias"] = torch.zeros(3, dtype=torch.float64)
    with pytest.raises(ShapeMismatchError):
        adam_step(p, bad, AdamState.zeros(p))


def test_adam_constant_gradient_steps_by_learning_rate():
    p = _tiny_params()
    grads = OrderedDict((k, torch.full_like(v, 0.3)) for k, v in p.tensors.items())
    state = AdamState.zeros(p)
    for _ in range(200):
        new, state = adam_step(p, grads, state, lr=1e-3, eps=1e-8)
        for name in p.names:
            step = (p.tensors[name] - new.tensors[name]).abs()
            torch.testing.assert_close(step, torch.full_like(step, 1e-3), rtol=1e-6, atol=0.0)
        p = new
    assert state.step == 200


def test_adam_zero_gradient_leaves_parameters_unchanged():
    p = _tiny_params()
    grads = OrderedDict((k, torch.zeros_like(v)) for k, v in p.tensors.items())
    new, state = p, AdamState.zeros(p)
    for _ in range(3):
        new, state = adam_step(new, grads, state)
    assert all(torch.equal(new.tensors[k], p.tensors[k]) for k in p.names)


@pytest.mark.parametrize("n,fraction,expected", [(10, 0.1, 1), (25, 0.1, 3), (5, 0.5, 3), (3, 0.01, 1)])
def test_validation_size(n, fraction, expected):
    assert validation_size(n, fraction) == expected


def test_split_train_validation_is_disjoint():
    train_idx, val_idx = split_train_validation(1000, 0.1, Rng(3))
    assert len(train_idx) == 900 and len(val_idx) == 100
    assert not set(train_idx.tolist()) & set(val_idx.tolist())
    assert sorted(np.concatenate([train_idx, val_idx]).tolist()) == list(range(1000))
    again, _ = split_train_validation(1000, 0.1, Rng(3))
    np.testing.assert_array_equal(train_idx, again)
    with pytest.raises(PreconditionError):
        split_train_validation(1, 0.1, Rng(3))


def test_small_dataset_keeps_one_validation_pair(gen, caplog):
    pairs = PairDataset.from_pairs([(ScalarField(gen.normal(size=(8, 8))), ScalarField(gen.normal(size=(8, 8))))
                                    for _ in range(4)])
    ucfg = UNetConfig(spatial_dims=2, depth=1, base_channels=2)
    with caplog.at_level(logging.WARNING, logger="nn_engine"):
        _, history = train(pairs, ucfg, TrainConfig(epochs=1, batch_size=2))
    assert (history.n_train, history.n_val) == (3, 1)
    assert "验证损失可能不可靠" in caplog.text


def test_training_and_prediction_restore_torch_threads(gen):
    previous = torch.get_num_threads()
    torch.set_num_threads(3)
    try:
        pairs = _smooth_pairs(gen, n=10, size=8)
        ucfg = UNetConfig(spatial_dims=2, depth=1, base_channels=2)
        params, _ = train(pairs, ucfg, TrainConfig(epochs=1))
        assert torch.get_num_threads() == 3
        predict(ScalarField(gen.normal(size=(8, 8))), params)
        assert torch.get_num_threads() == 3
        constant = ScalarField(np.ones((8, 8)))
        with pytest.raises(DegenerateInputError):
            train(PairDataset.from_pairs([(constant, constant)] * 4), ucfg, TrainConfig(epochs=1))
        assert torch.get_num_threads() == 3
    finally:
        torch.set_num_threads(previous)


def test_training_reduces_validation_loss_and_is_deterministic(gen):
    pairs = _smooth_pairs(gen)
    ucfg = UNetConfig(spatial_dims=2, depth=1, base_channels=4)
    tcfg = TrainConfig(epochs=8, batch_size=8, learning_rate=3e-3, seed=9)
    params, history = train(pairs, ucfg, tcfg)
    assert history.n_val == 4 and history.n_train == 36
    assert len(history.train_loss) == len(history.val_loss) == 8
    assert history.val_loss[-1] < history.initial_val_loss
    assert params.norm_stats is not None and params.normalize_targets

    again, _ = train(pairs, ucfg, tcfg)
    assert all(torch.equal(params.tensors[k], again.tensors[k]) for k in params.names)
    frame = history.to_frame()
    assert list(frame.columns) == ['epoch', 'train_loss', 'val_loss']


def test_training_rejects_degenerate_data():
    constant = ScalarField(np.ones((8, 8)))
    ucfg = UNetConfig(spatial_dims=2, depth=1, base_channels=2)
    with pytest.raises(PreconditionError):
        train(PairDataset.from_pairs([(constant, constant)]), ucfg, TrainConfig(epochs=1))
    with pytest.raises(DegenerateInputError):
        train(PairDataset.from_pairs([(constant, constant)] * 4), ucfg, TrainConfig(epochs=1))


def test_pair_dataset_checks_shapes():
    a = ScalarField(np.zeros((8, 8)))
    b = ScalarField(np.zeros((8, 4)))
    with pytest.raises(ShapeMismatchError):
        PairDataset.from_pairs([(a, a), (b, b)])
    patches = PairDataset.from_patches([(a, a), (a, a), (a, a)], 7, (4, 4), Rng(0))
    assert len(patches) == 7 and patches.sample_shape == (4, 4)


def test_receptive_margin_and_overlap():
    cfg = UNetConfig(spatial_dims=2, depth=2, kernel=3)
    assert receptive_margin(cfg) == 22
    assert default_overlap(cfg) == 24
    assert receptive_margin(UNetConfig(spatial_dims=2, depth=1, kernel=3)) == 6


def test_translation_covariance_on_interior():
    """平移量等于池化周期时，远离边界的输出随输入一起平移"""
    p = _tiny_params(depth=2, base=2, seed=5)
    shift = p.config.pool_period
    margin = receptive_margin(p.config)
    big = torch.randn(1, 1, 96 + shift, 96 + shift, generator=torch.Generator().manual_seed(1),
                      dtype=torch.float64)
    shifted = unet_forward(big[..., shift:, shift:], p)
    base = unet_forward(big[..., :96, :96], p)
    inner = slice(margin, 96 - margin - shift)
    outer = slice(margin + shift, 96 - margin)
    torch.testing.assert_close(shifted[..., inner, inner], base[..., outer, outer], rtol=0.0, atol=1e-5)


def test_tiled_prediction_matches_whole_field(gen):
    p = _tiny_params(depth=2, base=2, seed=1)
    field = ScalarField(gen.normal(size=(100, 90)))
    whole = predict(field, p)
    tiled = predict(field, p, tile=64)
    assert tiled.shape == field.shape
    np.testing.assert_allclose(tiled.data, whole.data, rtol=1e-5, atol=1e-5)
    threaded = predict(field, p, tile=64, threads=3)
    np.testing.assert_array_equal(threaded.data, tiled.data)
    with pytest.raises(PreconditionError):
        predict(field, p, tile=48)
    with pytest.raises(ShapeMismatchError):
        predict(ScalarField(np.zeros((8, 8, 8))), p)


def test_prediction_inverts_normalization(gen):
    p = _tiny_params().with_norm(NormStats(mean=10.0, std=2.0), normalize_targets=True)
    field = ScalarField(gen.normal(10.0, 2.0, size=(16, 16)))
    raw = predict(field, p.with_norm(None, True))
    out = predict(field, p)
    normalized_in = predict(field.with_data((field.data.astype(np.float64) - 10.0) / 2.0),
                            p.with_norm(None, True))
    np.testing.assert_allclose(out.data, normalized_in.data * 2.0 + 10.0, rtol=1e-5, atol=1e-5)
    assert raw.shape == out.shape


def test_restore_pair_averages_predictions(gen):
    p = _tiny_params(dims=3, depth=1, base=2)
    a = ScalarField(gen.normal(size=(8, 8, 8)))
    b = ScalarField(gen.normal(size=(8, 8, 8)))
    restored = restore_pair(a, b, p)
    expected = (predict(a, p).data.astype(np.float64) + predict(b, p).data) / 2.0
    np.testing.assert_allclose(restored.data, expected, rtol=1e-6, atol=1e-6)
    with pytest.raises(ShapeMismatchError):
        restore_pair(a, ScalarField(np.zeros((8, 8, 4))), p)


def test_model_save_load_round_trip(tmp_path):
    p = _tiny_params(dims=3, depth=2, base=2).with_norm(NormStats(1.5, 0.25), normalize_targets=False)
    path = save_model(p, tmp_path / "model.pt")
    loaded = load_model(path)
    assert loaded.config == p.config
    assert loaded.names == p.names
    assert loaded.norm_stats == NormStats(1.5, 0.25)
    assert loaded.normalize_targets is False
    assert all(torch.equal(loaded.tensors[k], p.tensors[k]) for k in p.names)


def test_model_load_rejects_corrupt_files(tmp_path):
    garbage = tmp_path / "garbage.pt"
    garbage.write_bytes(b"not a model")
    with pytest.raises(InvalidFieldError):
        load_model(garbage)

    p = _tiny_params()
    path = save_model(p, tmp_path / "model.pt")
    payload = torch.load(path, weights_only=True)
    payload['params'][0] = torch.zeros(1)
    torch.save(payload, path)
    with pytest.raises(InvalidFieldError):
        load_model(path)
