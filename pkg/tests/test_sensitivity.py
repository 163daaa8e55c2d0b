import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lanequant.metrics import lane_distortion_score
from lanequant.postprocess import CONF, LOCAL, ROOT, decode, decode_with_replaced_head
from lanequant.scenes import generate, to_targets
from lanequant.sensitivity import (NoiseScoreCurve, SelectionConfig, build_curve, direct_scores, inject_noise,
                                   load_curves, noise_levels, query_curve, save_curves, select_heads,
                                   select_heads_direct)


def ideal_stack(n, seed=0):
    """Stacked head arrays that decode exactly to the ground-truth lanes."""
    ts = [to_targets(s.lanes) for s in generate(seed, n)]
    conf = np.stack([t.mask for t in ts]) * 0.8 + 0.1
    return {CONF: conf, LOCAL: np.stack([t.local for t in ts]), ROOT: np.stack([t.root for t in ts])}


def noisy_copy(fp, rng, sig):
    return {k: v + rng.normal(0, sig.get(k, 0.0) * v.std(), v.shape) if k in sig else v.copy()
            for k, v in fp.items()}


@pytest.fixture(scope="module")
def fp():
    return ideal_stack(12)


@pytest.fixture(scope="module")
def curves(fp):
    cfg = SelectionConfig(reruns=3)
    return {h: build_curve(fp, h, cfg, seed=0) for h in (LOCAL, ROOT)}


def test_inject_noise_statistics():
    x = np.random.default_rng(0).normal(3, 2, 100_000)
    assert np.array_equal(inject_noise(x, 0.0, np.random.default_rng(1)), x)
    eps = inject_noise(x, 0.3, np.random.default_rng(1)) - x
    assert abs(eps.std() / (0.3 * x.std()) - 1) < 0.02
    again = inject_noise(x, 0.3, np.random.default_rng(1)) - x
    assert np.array_equal(eps, again)
    with pytest.raises(ValueError):
        inject_noise(x, -0.1, np.random.default_rng(0))


def test_curve_origin_and_growth(curves):
    for c in curves.values():
        assert c.nodes[0] == (0.0, 0.0)
        assert c.means[-1] > 0


def test_conf_wipeout_scores_all_points(fp):
    for i in range(4):
        heads = {k: v[i] for k, v in fp.items()}
        base = decode(heads)
        gone = decode_with_replaced_head(heads, CONF, np.zeros_like(heads[CONF]))
        assert lane_distortion_score(base, gone) == sum(map(len, base))


def test_more_reruns_within_standard_error(fp):
    a = build_curve(fp, ROOT, SelectionConfig(reruns=4), seed=0)
    b = build_curve(fp, ROOT, SelectionConfig(reruns=8), seed=0)
    for (_, ma), (_, mb), ea, eb in zip(a.nodes, b.nodes, a.stderr, b.stderr):
        assert abs(ma - mb) <= 4 * np.hypot(ea, eb) + 1e-12


def test_query_examples():
    c = NoiseScoreCurve(LOCAL, [(0.0, 0.0), (0.1, 2.0), (0.3, 6.0)])
    assert query_curve(c, 0.1) == 2.0
    assert query_curve(c, 0.2) == pytest.approx(4.0)
    assert query_curve(c, 5.0) == 6.0
    assert query_curve(c, -1.0) == 0.0
    with pytest.raises(ValueError):
        query_curve(NoiseScoreCurve(LOCAL, [(0.0, 0.0)]), 0.1)


@settings(max_examples=100, deadline=None)
@given(means=st.lists(st.floats(0, 100), min_size=2, max_size=8), q=st.floats(-1, 3))
def test_query_within_node_range(means, q):
    means[0] = 0.0
    c = NoiseScoreCurve(LOCAL, [(0.25 * i, m) for i, m in enumerate(means)])
    v = query_curve(c, q)
    assert min(means) - 1e-12 <= v <= max(means) + 1e-12


def test_selection_config_validation():
    with pytest.raises(ValueError):
        SelectionConfig(noise_levels=(0.1, 0.2))
    with pytest.raises(ValueError):
        SelectionConfig(noise_levels=(0.0, 0.2, 0.2))


def test_exact_head_never_selected(fp, curves):
    rng = np.random.default_rng(0)
    q = noisy_copy(fp, rng, {ROOT: 0.3})
    assert query_curve(curves[ROOT], noise_levels(fp, q)[ROOT]) > 0
    assert noise_levels(fp, q)[LOCAL] == 0.0
    assert select_heads(fp, q, curves, k=1) == [ROOT]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), s1=st.floats(0.01, 1.0), s2=st.floats(0.01, 1.0), factor=st.floats(0.01, 100))
def test_selection_properties(fp, curves, seed, s1, s2, factor):
    q = noisy_copy(fp, np.random.default_rng(seed), {LOCAL: s1, ROOT: s2})
    top1 = select_heads(fp, q, curves, 1)
    top2 = select_heads(fp, q, curves, 2)
    assert top2[0] == top1[0] and sorted(top2) == [LOCAL, ROOT]
    assert select_heads(fp, q, curves, 1) == top1
    scaled = {h: c.scaled(factor) for h, c in curves.items()}
    assert select_heads(fp, q, scaled, 2) == top2


def test_k_out_of_range(fp, curves):
    with pytest.raises(ValueError):
        select_heads(fp, fp, curves, 3)
    with pytest.raises(KeyError):
        select_heads(fp, fp, {LOCAL: curves[LOCAL]}, 1)


def test_direct_selection_edge_cases(fp):
    assert direct_scores(fp, fp) == {LOCAL: 0.0, ROOT: 0.0}
    assert select_heads_direct(fp, fp, 2) == [LOCAL, ROOT]
    q = noisy_copy(fp, np.random.default_rng(0), {LOCAL: 1.0, ROOT: 1.0})
    assert select_heads_direct(fp, q, 1, heads=(ROOT,)) == [ROOT]


def test_root_with_tenfold_error_ranked_first(fp, curves):
    hits = 0
    for seed in range(20):
        q = noisy_copy(fp, np.random.default_rng(seed), {LOCAL: 0.06, ROOT: 0.6})
        hits += select_heads(fp, q, curves, 1) == [ROOT] and select_heads_direct(fp, q, 1) == [ROOT]
    assert hits >= 19


def test_curve_json_round_trip(tmp_path, curves):
    save_curves(tmp_path / "c.json", curves, {"seed": 0})
    back = load_curves(tmp_path / "c.json")
    assert back[LOCAL].nodes == curves[LOCAL].nodes and back[ROOT].reruns == 3
