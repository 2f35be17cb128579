import numpy as np
import pytest

from feddetect.model import GridPrediction, ModelConfig, backward, forward, forward_batch, init_params

from oracles import central_difference, forward_ld, max_rel_error, param_count


def random_config(rng, max_side=8):
    s = int(rng.integers(1, 3))
    return ModelConfig(
        input_height=int(rng.integers(s, max_side + 1)),
        input_width=int(rng.integers(s, max_side + 1)),
        grid_size=s,
        boxes_per_cell=int(rng.integers(1, 3)),
        num_classes=int(rng.integers(1, 4)),
        hidden_width=int(rng.integers(1, 7)),
        seed=int(rng.integers(0, 2**32)),
    )


def test_param_count_hand_example():
    cfg = ModelConfig(2, 2, 1, 1, 1, 1)
    assert cfg.num_params == 17
    assert init_params(cfg).shape == (17,)


@pytest.mark.parametrize("seed", range(20))
def test_param_count_matches_enumeration(seed):
    cfg = random_config(np.random.default_rng(seed), max_side=32)
    expected = param_count(
        cfg.input_height, cfg.input_width, cfg.grid_size, cfg.boxes_per_cell, cfg.num_classes, cfg.hidden_width
    )
    assert cfg.num_params == expected
    assert init_params(cfg).size == expected


def test_init_is_deterministic_and_seed_sensitive():
    cfg = ModelConfig(8, 8, 2, 2, 3, 5, seed=11)
    a, b = init_params(cfg), init_params(cfg)
    assert np.array_equal(a, b)
    other = init_params(ModelConfig(8, 8, 2, 2, 3, 5, seed=12))
    assert not np.array_equal(a, other)


def test_init_bounds_and_zero_biases():
    cfg = ModelConfig(6, 6, 2, 1, 3, 4, seed=3)
    p = init_params(cfg)
    w1 = p[: 36 * 4]
    b1 = p[36 * 4 : 36 * 4 + 4]
    assert np.all(np.abs(w1) <= np.sqrt(6 / (36 + 4)))
    assert np.all(b1 == 0)
    assert np.all(p[-cfg.out_dim :] == 0)


@pytest.mark.parametrize(
    "kwargs",
    [dict(grid_size=0), dict(boxes_per_cell=0), dict(num_classes=0), dict(hidden_width=0), dict(input_height=1, grid_size=2)],
)
def test_invalid_config(kwargs):
    base = dict(input_height=4, input_width=4, grid_size=2, boxes_per_cell=1, num_classes=1, hidden_width=2)
    base.update(kwargs)
    with pytest.raises(ValueError):
        ModelConfig(**base)


def test_zero_params_give_half_everywhere():
    cfg = ModelConfig(5, 7, 2, 2, 3, 4)
    img = np.random.default_rng(0).random((5, 7))
    pred = forward(np.zeros(cfg.num_params), img, cfg)
    assert pred.values.shape == (4, 13)
    assert np.all(pred.values == 0.5)


def test_forward_pure_and_in_open_interval():
    rng = np.random.default_rng(1)
    cfg = ModelConfig(8, 8, 2, 2, 3, 6)
    p = rng.normal(0, 3, cfg.num_params)
    img = rng.random((8, 8))
    a, b = forward(p, img, cfg), forward(p, img, cfg)
    assert np.array_equal(a.values, b.values)
    assert np.all((a.values > 0) & (a.values < 1))


def test_forward_batch_matches_single():
    rng = np.random.default_rng(2)
    cfg = ModelConfig(6, 6, 2, 1, 3, 5)
    p = rng.normal(0, 1, cfg.num_params)
    imgs = rng.random((4, 6, 6))
    batch = forward_batch(p, imgs, cfg)
    for k in range(4):
        np.testing.assert_allclose(batch[k], forward(p, imgs[k], cfg).values, rtol=0, atol=1e-15)


def test_grid_prediction_views():
    cfg = ModelConfig(4, 4, 2, 2, 3, 2)
    vals = np.arange(cfg.out_dim, dtype=float)
    g = GridPrediction.from_flat(vals, cfg)
    assert g.boxes.shape == (4, 2, 5)
    assert g.class_probs.shape == (4, 3)
    assert g.boxes[1, 1, 0] == 13 + 5
    assert g.class_probs[2, 0] == 2 * 13 + 10


def test_forward_dimension_errors():
    cfg = ModelConfig(4, 4, 1, 1, 1, 2)
    p = init_params(cfg)
    with pytest.raises(ValueError):
        forward(p, np.zeros((4, 5)), cfg)
    with pytest.raises(ValueError):
        forward(p[:-1], np.zeros((4, 4)), cfg)
    bad = np.zeros((4, 4))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        forward(p, bad, cfg)
    with pytest.raises(ValueError):
        backward(p, np.zeros((4, 4)), np.zeros(cfg.out_dim + 1), cfg)


def test_backward_zero_upstream():
    cfg = ModelConfig(6, 6, 2, 2, 2, 3)
    rng = np.random.default_rng(4)
    g = backward(rng.normal(size=cfg.num_params), rng.random((6, 6)), np.zeros(cfg.out_dim), cfg)
    assert g.shape == (cfg.num_params,)
    assert np.all(g == 0)


def test_backward_linear_in_upstream():
    cfg = ModelConfig(6, 6, 2, 2, 3, 4)
    rng = np.random.default_rng(5)
    p, img = rng.normal(size=cfg.num_params), rng.random((6, 6))
    g1, g2 = rng.normal(size=cfg.out_dim), rng.normal(size=cfg.out_dim)
    lhs = backward(p, img, g1 + g2, cfg)
    rhs = backward(p, img, g1, cfg) + backward(p, img, g2, cfg)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-9)


def test_backward_deterministic():
    cfg = ModelConfig(8, 8, 2, 2, 3, 6)
    rng = np.random.default_rng(6)
    args = (rng.normal(size=cfg.num_params), rng.random((8, 8)), rng.normal(size=cfg.out_dim), cfg)
    assert np.array_equal(backward(*args), backward(*args))


def kink_mask(cfg, z1, step):
    """Parameters whose perturbation can cross a leaky-ReLU kink."""
    # pixels and the bias input are <= 1, so a +-step move shifts z1 by <= step
    near = np.abs(np.asarray(z1, dtype=float)) < 2 * step
    mask = np.zeros(cfg.num_params, dtype=bool)
    h = cfg.hidden_width
    w1 = np.zeros((cfg.in_dim, h), dtype=bool)
    w1[:, near] = True
    mask[: cfg.in_dim * h] = w1.ravel()
    mask[cfg.in_dim * h : cfg.in_dim * h + h] = near
    return mask


def model_gradient_error(seed, step=1e-4):
    rng = np.random.default_rng(seed)
    cfg = random_config(rng)
    p = rng.normal(0, 0.7, cfg.num_params)
    img = rng.random((cfg.input_height, cfg.input_width))
    up = rng.normal(size=cfg.out_dim)
    dims = (cfg.input_height, cfg.input_width, cfg.grid_size, cfg.boxes_per_cell, cfg.num_classes, cfg.hidden_width)

    def f(theta):
        out, _ = forward_ld(theta, img, *dims)
        return np.dot(out, up.astype(np.longdouble))

    analytic = backward(p, img, up, cfg)
    numeric = central_difference(f, p, step)
    _, z1 = forward_ld(p, img, *dims)
    keep = ~kink_mask(cfg, z1, step)
    return max_rel_error(analytic[keep], numeric[keep])


@pytest.mark.parametrize("seed", range(100))
def test_backward_matches_finite_differences(seed):
    assert model_gradient_error(seed) < 1e-4
