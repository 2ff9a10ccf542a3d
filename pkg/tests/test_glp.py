import numpy as np
import pytest

from topdown_iqa import numerics as nx
from topdown_iqa.data import make_texture
from topdown_iqa.exceptions import ArgumentError
from topdown_iqa.glp import GatedLocalPooling, export_glp_mask, glp_fr, glp_nr, pooling_window


def block(mode="FR", channels=4, dim=6, level=1, n=3, width=8, seed=0):
    return GatedLocalPooling(channels, dim, level, n, mode, np.random.default_rng(seed), width)


def feats(rng, c=4, h=16, w=16, b=1):
    return nx.Tensor(rng.standard_normal((b, c, h, w)))


def pool_reduce(blk, x):
    pooled = nx.window_avg_pool(nx.Tensor(x), blk.window).data
    b, c, h, w = pooled.shape
    tokens = pooled.reshape(b, c, h * w).transpose(0, 2, 1)
    return tokens @ blk.reducer.weight.data.T + blk.reducer.bias.data


def test_pooling_window_schedule():
    assert pooling_window(1, 5) == 16
    assert pooling_window(2, 3) == 2
    assert pooling_window(3, 3) == 1


def test_equal_inputs_gate_at_one_half(rng):
    blk = block()
    f = feats(rng)
    mask = export_glp_mask(blk, f, f)
    assert mask.shape == (1, 1, 16, 16)
    assert np.all(mask == 0.5)


def test_mask_range(rng):
    blk = block()
    mask = export_glp_mask(blk, feats(rng), feats(rng))
    assert np.all((mask > 0) & (mask < 1))


def test_fr_geometry_for_224_input(rng):
    blk = block(channels=2, level=1, n=5, width=4)
    assert blk.window == 16
    with nx.no_grad():
        out = blk(feats(rng, 2, 112, 112), feats(rng, 2, 112, 112))
    assert out.shape == (1, 49, 6)


def test_nr_geometry(rng):
    blk = block("NR", level=2, n=3)
    assert blk.window == 2
    assert glp_nr(feats(rng), blk).shape == (1, 64, 6)


def test_fr_bypass_is_pool_reduce_of_concat(double, rng):
    blk = block().astype(np.float64)
    fd, fr = feats(rng), feats(rng)
    raw = np.concatenate([fd.data, fr.data, np.abs(fd.data - fr.data)], axis=1)
    np.testing.assert_allclose(glp_fr(fd, fr, blk, gated=False).data, pool_reduce(blk, raw), atol=1e-12)


def test_nr_zero_input_gives_reducer_bias(rng):
    blk = block("NR")
    blk.feature.bias.data[...] = 0
    out = glp_nr(np.zeros((1, 4, 16, 16), np.float32), blk).data
    assert np.array_equal(out, np.broadcast_to(blk.reducer.bias.data, out.shape))


def test_nr_identity_feature_map_bypass(double, rng):
    blk = block("NR").astype(np.float64)
    blk.feature.weight.data[...] = np.eye(4)[:, :, None, None]
    blk.feature.bias.data[...] = 0
    f = feats(rng)
    np.testing.assert_allclose(glp_nr(f, blk, gated=False).data, pool_reduce(blk, np.maximum(f.data, 0)), atol=1e-12)


def test_last_level_pools_with_window_one(rng):
    blk = block(level=3, n=3)
    assert blk.window == 1
    f, g = feats(rng, h=4, w=4), feats(rng, h=4, w=4)
    assert glp_fr(f, g, blk).shape == (1, 16, 6)


def test_fr_is_not_symmetric(rng):
    blk = block()
    a, b = feats(rng), feats(rng)
    assert not np.allclose(glp_fr(a, b, blk).data, glp_fr(b, a, blk).data)


def test_argument_errors(rng):
    with pytest.raises(ArgumentError):
        block(mode="XR")
    with pytest.raises(ArgumentError):
        glp_fr(feats(rng), feats(rng, h=8, w=8), block())
    with pytest.raises(ArgumentError):
        glp_fr(feats(rng), None, block())
    with pytest.raises(ArgumentError):
        glp_nr(feats(rng), block())
    with pytest.raises(ArgumentError):
        glp_fr(feats(rng), feats(rng), block("NR"))


@pytest.mark.parametrize("mode", ["FR", "NR"])
def test_gradients_reach_mask_feature_and_reducer(double, rng, mode):
    blk = block(mode, channels=3, dim=4, width=4, level=2).astype(np.float64)
    fd, fr = feats(rng, 3, 8, 8), feats(rng, 3, 8, 8)
    weights = nx.Tensor(rng.standard_normal((1, 16, 4)))

    def f():
        out = glp_fr(fd, fr, blk) if mode == "FR" else glp_nr(fd, blk)
        return (out * weights).sum()

    params = dict(blk.named_parameters())
    rep = nx.grad_check(f, params, max_entries=10, branch_signature=lambda: np.sign(fd.data - fr.data))
    assert rep.passed, rep.max_rel_error
    for name in params:
        if name.startswith(("mask.", "feature.", "reducer.")) and name.endswith("weight"):
            assert np.any(params[name].grad != 0), name


def test_trace_records_mask_and_difference(rng):
    blk = block()
    trace = {}
    fd = feats(rng)
    blk(fd, fd, trace=trace)
    assert np.all(trace["glp_mask"][1].data == 0.5)
    assert np.all(trace["feature_diff"][1].data == 0)


# -- trained toy model: localized distortion ------------------------------------------

def _patch_masks(model, seeds=range(5), size=16, sigma=0.2):
    """Per-level (inside, outside) mask means for a noise patch on a clean texture."""
    rows = []
    for seed in seeds:
        ref = make_texture(64, seed)
        r = np.random.default_rng(100 + seed)
        y0, x0 = (int(v) for v in r.integers(0, 64 - size, 2))
        dist = ref.copy()
        patch = dist[:, y0:y0 + size, x0:x0 + size]
        dist[:, y0:y0 + size, x0:x0 + size] = np.clip(patch + r.normal(0, sigma, patch.shape), 0, 1)
        trace = {}
        with nx.no_grad():
            model(dist[None], ref[None], trace=trace)
        for level in range(1, model.config.n):
            m = trace["glp_mask"][level].data[0, 0]
            s = 2 ** level
            inside = np.zeros(m.shape, bool)
            inside[y0 // s:(y0 + size) // s, x0 // s:(x0 + size) // s] = True
            rows.append((level, float(m[inside].mean()), float(m[~inside].mean())))
    return rows


def test_trained_mask_is_spatially_selective(trained_toy):
    rows = _patch_masks(trained_toy[0])
    level1 = [(i, o) for lvl, i, o in rows if lvl == 1]
    assert np.mean([abs(i - o) for i, o in level1]) > 0.05


@pytest.mark.xfail(strict=False, reason="toy model gates the noisy patch down at level 1 "
                                        "(inside about 0.37 vs outside 0.52); the gate sign is not identifiable")
def test_trained_mask_higher_inside_noise_patch(trained_toy):
    rows = _patch_masks(trained_toy[0])
    assert all(inside > outside for _, inside, outside in rows)
