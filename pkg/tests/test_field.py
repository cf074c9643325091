import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import field_gradient_error

from functa.field import (
    FieldParams,
    SirenConfig,
    field_backward,
    field_forward,
    forward,
    make_coord_grid,
    siren_init,
)


def random_params(cfg, rng, scale=1.0):
    params = siren_init(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    biases = [rng.normal(0, 0.3 * scale, b.shape) for b in params.biases]
    return FieldParams(params.weights, biases)


def straight_line(params, cfg, mod, x):
    """Independent per-coordinate re-implementation with explicit loops."""
    h = np.array(x, dtype=np.float64)
    n_layers = len(params.weights)
    for i in range(n_layers):
        w, b = params.weights[i], params.biases[i]
        a = np.array([sum(h[k] * w[k, j] for k in range(w.shape[0])) + b[j] for j in range(w.shape[1])])
        if i < n_layers - 1:
            a = a + mod[i * cfg.width:(i + 1) * cfg.width]
            h = np.sin(cfg.omega0 * a)
        else:
            h = a
    return h


class TestConfig:
    def test_mod_dim(self):
        assert SirenConfig(width=64, depth=4).mod_dim == 192
        assert SirenConfig(width=5, depth=2).mod_dim == 5

    @pytest.mark.parametrize("kw", [dict(width=0), dict(depth=1), dict(omega0=0.0), dict(omega0=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SirenConfig(**kw)


class TestInit:
    def test_zero_biases(self):
        params = siren_init(SirenConfig(in_dim=1, out_dim=1, width=1, depth=2), seed=7)
        assert all(np.all(b == 0) for b in params.biases)

    def test_deterministic(self):
        cfg = SirenConfig(width=16, depth=3)
        a, b = siren_init(cfg, seed=3), siren_init(cfg, seed=3)
        for x, y in zip(a.weights + a.biases, b.weights + b.biases):
            assert np.array_equal(x, y)

    def test_hidden_bound(self):
        cfg = SirenConfig(width=64, depth=5, omega0=30.0)
        bound = np.sqrt(6 / 64) / 30
        assert bound == pytest.approx(0.01021, abs=1e-5)
        params = siren_init(cfg, seed=0, dtype=np.float64)
        for w in params.weights[1:]:
            assert np.abs(w).max() <= bound
            # the draws actually fill the interval
            assert np.abs(w).max() > 0.9 * bound

    def test_first_layer_bound(self):
        cfg = SirenConfig(in_dim=2, width=256, depth=3)
        w0 = siren_init(cfg, seed=0, dtype=np.float64).weights[0]
        assert np.abs(w0).max() <= 0.5
        assert np.abs(w0).max() > 0.45

    def test_check_accepts_and_rejects(self):
        cfg = SirenConfig(width=4, depth=3)
        params = siren_init(cfg)
        params.check(cfg)
        params.weights[1] = params.weights[1][:, :3]
        with pytest.raises(ValueError):
            params.check(cfg)


class TestForward:
    def test_zero_network(self):
        cfg = SirenConfig(width=8, depth=3)
        params = FieldParams(
            [np.zeros(s) for s in cfg.layer_shapes()], [np.zeros(s[1]) for s in cfg.layer_shapes()]
        )
        out = field_forward(params, cfg, np.zeros(cfg.mod_dim), np.array([0.3, 0.7]))
        assert np.array_equal(out, np.zeros(3))

    def test_matches_straight_line(self, rng):
        cfg = SirenConfig(in_dim=2, out_dim=3, width=4, depth=3, omega0=5.0)
        params = random_params(cfg, rng)
        for _ in range(5):
            mod = rng.normal(0, 0.2, cfg.mod_dim)
            x = rng.uniform(0, 1, 2)
            np.testing.assert_allclose(field_forward(params, cfg, mod, x), straight_line(params, cfg, mod, x), rtol=1e-12, atol=1e-14)

    def test_depth2_single_slot(self, rng):
        cfg = SirenConfig(in_dim=2, out_dim=1, width=3, depth=2, omega0=2.0)
        params = random_params(cfg, rng)
        x = np.array([0.25, 0.5])
        delta = np.zeros(3)
        delta[1] = 0.4
        diff = field_forward(params, cfg, delta, x) - field_forward(params, cfg, np.zeros(3), x)
        h0 = np.sin(2.0 * (x @ params.weights[0] + params.biases[0]))
        h1 = np.sin(2.0 * (x @ params.weights[0] + params.biases[0] + delta))
        np.testing.assert_allclose(diff, (h1 - h0) @ params.weights[1], rtol=1e-12)
        assert np.count_nonzero(h1 - h0) == 1

    def test_shape_errors(self):
        cfg = SirenConfig(width=4, depth=3)
        params = siren_init(cfg)
        with pytest.raises(ValueError):
            field_forward(params, cfg, np.zeros(cfg.mod_dim + 1), np.zeros(2))
        with pytest.raises(ValueError):
            field_forward(params, cfg, np.zeros(cfg.mod_dim), np.zeros(3))

    def test_deterministic(self, rng):
        cfg = SirenConfig(width=8, depth=4)
        params = siren_init(cfg, seed=1)
        x = rng.uniform(0, 1, (10, 2)).astype(np.float32)
        mods = rng.normal(0, 0.1, (2, 10, cfg.mod_dim)).astype(np.float32)
        a, _ = forward(params, cfg, x, mods)
        b, _ = forward(params, cfg, x, mods)
        assert np.array_equal(a, b)

    def test_modulation_locality(self, rng):
        cfg = SirenConfig(width=5, depth=4, omega0=3.0)
        params = random_params(cfg, rng)
        x = rng.uniform(0, 1, (6, 2))
        mods = rng.normal(0, 0.2, (1, 6, cfg.mod_dim))
        _, base = forward(params, cfg, x, mods)
        bumped = mods.copy()
        bumped[..., 2 * cfg.width:3 * cfg.width] += 0.5
        _, cache = forward(params, cfg, x, bumped)
        # inputs to layers 0..2 (hs[0..2]) precede the modulated slice
        for i in range(3):
            assert np.array_equal(base["hs"][i], cache["hs"][i])
        assert not np.array_equal(base["hs"][3], cache["hs"][3])


class TestBackward:
    def test_zero_at_exact_target(self, rng):
        cfg = SirenConfig(width=4, depth=3)
        params = random_params(cfg, rng)
        grid = make_coord_grid(4, 1, "global_unit", dtype=np.float64)
        mod = rng.normal(0, 0.1, cfg.mod_dim)
        target = forward(params, cfg, grid.inputs, np.broadcast_to(mod, (1, 16, cfg.mod_dim)))[0][0]
        loss, grads, g_mod = field_backward(params, cfg, mod, grid, target)
        assert loss == 0.0
        assert all(np.all(g == 0) for g in grads.weights + grads.biases)
        assert np.all(g_mod == 0)

    def test_quadratic_scaling(self, rng):
        cfg = SirenConfig(width=4, depth=3)
        params = random_params(cfg, rng)
        grid = make_coord_grid(4, 1, "global_unit", dtype=np.float64)
        mod = np.zeros(cfg.mod_dim)
        y = np.stack([field_forward(params, cfg, mod, x) for x in grid.inputs])
        r = rng.normal(size=y.shape)
        l1 = field_backward(params, cfg, mod, grid, y + r)[0]
        l2 = field_backward(params, cfg, mod, grid, y + 2 * r)[0]
        assert l2 == pytest.approx(4 * l1, rel=1e-12)

    @pytest.mark.parametrize("per_coord", [False, True])
    def test_finite_differences(self, rng, per_coord):
        cfg = SirenConfig(in_dim=2, out_dim=2, width=5, depth=3, omega0=4.0)
        params = random_params(cfg, rng)
        x = rng.uniform(0, 1, (9, 2))
        mod = rng.normal(0, 0.2, (9, cfg.mod_dim) if per_coord else cfg.mod_dim)
        target = rng.uniform(0, 1, (9, 2))
        assert field_gradient_error(cfg, params, mod, x, target) < 1e-4

    def test_target_shape_error(self):
        cfg = SirenConfig(width=4, depth=3)
        with pytest.raises(ValueError):
            field_backward(siren_init(cfg), cfg, np.zeros(cfg.mod_dim), np.zeros((4, 2)), np.zeros((4, 2)))

    @settings(max_examples=25, deadline=None)
    @given(st.permutations(list(range(8))))
    def test_loss_permutation_invariant(self, perm):
        rng = np.random.default_rng(0)
        cfg = SirenConfig(width=4, depth=3, omega0=3.0)
        params = random_params(cfg, rng)
        x = rng.uniform(0, 1, (8, 2))
        target = rng.uniform(0, 1, (8, 3))
        mod = rng.normal(0, 0.1, (8, cfg.mod_dim))
        perm = np.array(perm)
        a = field_backward(params, cfg, mod, x, target)[0]
        b = field_backward(params, cfg, mod[perm], x[perm], target[perm])[0]
        assert a == pytest.approx(b, rel=1e-12)


class TestCoordGrid:
    def test_binary_example(self):
        grid = make_coord_grid(32, 1, "binary")
        k = 3 * 32 + 5
        assert grid.inputs.shape == (1024, 10)
        assert grid.inputs[k].astype(int).tolist() == [0, 0, 0, 1, 1, 0, 0, 1, 0, 1]

    def test_binary_entries(self):
        grid = make_coord_grid(8, 1, "binary")
        assert set(np.unique(grid.inputs)) <= {0.0, 1.0}
        assert len(np.unique(grid.inputs, axis=0)) == 64

    def test_per_patch_degenerate(self):
        grid = make_coord_grid(4, 4, "per_patch")
        assert np.all(grid.inputs == grid.inputs[0])

    def test_per_patch_range(self):
        grid = make_coord_grid(16, 4, "per_patch")
        assert grid.inputs.min() > 0 and grid.inputs.max() < 1
        assert len(np.unique(grid.inputs, axis=0)) == 16

    def test_global_unit(self):
        grid = make_coord_grid(4, 1, "global_unit")
        assert grid.num_points == 16
        np.testing.assert_allclose(grid.inputs[0], [0.125, 0.125])
        np.testing.assert_allclose(grid.inputs[-1], [0.875, 0.875])
        np.testing.assert_allclose(grid.inputs[1], [0.125, 0.375])

    @pytest.mark.parametrize("args", [(10, 4, "per_patch"), (12, 1, "binary"), (4, 1, "polar")])
    def test_errors(self, args):
        with pytest.raises(ValueError):
            make_coord_grid(*args)
