import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from t3slab import trajectory as TJ
from t3slab.model import ARModel, ar_token_logprobs
from t3slab.trainer import EmptyObjectiveError, TrainConfig, train_run
from conftest import tiny_arch
from oracles import brute_argmin_earliest, scan_below, scan_positive


def prof(*deltas):
    return TJ.ConfidenceProfile.from_delta([np.array(d, dtype=float) for d in deltas])


@pytest.mark.parametrize("accs,want", [
    ([0.8, 0.5, 0.2, 0.4, 0.7], 2), ([0.1, 0.2, 0.2, 0.9], 0), ([0.9, 0.3, 0.3, 0.8], 1), ([0.5], 0)])
def test_bottleneck_examples(accs, want):
    assert TJ.find_bottleneck(accs) == want


def test_bottleneck_errors():
    with pytest.raises(ValueError):
        TJ.find_bottleneck([])
    with pytest.raises(ValueError):
        TJ.find_bottleneck([0.5, float("nan")])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5).map(lambda v: v / 5), min_size=1, max_size=30), st.integers(1, 10))
def test_bottleneck_stable_under_better_appends(accs, extra):
    b = TJ.find_bottleneck(accs)
    assert b == brute_argmin_earliest(accs)
    top = max(accs)
    assert TJ.find_bottleneck(accs + [top + 0.01 * (i + 1) for i in range(extra)]) == b


def test_online_monitor():
    mon = TJ.OnlineBottleneckMonitor(patience=2)
    flags = [mon.update(a) for a in [0.5, 0.3, 0.1, 0.2, 0.4, 0.6]]
    assert flags == [False, False, False, False, True, True]
    assert mon.best_index == 2


def test_anchor_and_ytl_examples():
    s = TJ.select(prof([0.3, -0.1, 0.0, 0.5]), 0.2)
    assert s.anchors[0].tolist() == [0, 3]
    assert TJ.anchor_set(prof([-1.0, -0.2])).anchors[0].tolist() == []
    b = TJ.yet_to_learn_set(prof([-0.5, -0.1, 0.3]), 0.2)
    assert b.yet_to_learn[0].tolist() == [0]
    b0 = TJ.yet_to_learn_set(prof([-0.5, -0.1, 0.0, 0.3]), 0.0)
    assert b0.yet_to_learn[0].tolist() == [0, 1]
    with pytest.raises(ValueError):
        TJ.yet_to_learn_set(prof([0.1]), -0.1)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.lists(st.integers(-6, 6).map(lambda v: v / 10), min_size=1, max_size=12), min_size=1, max_size=5),
       st.lists(st.integers(0, 8).map(lambda v: v / 10), min_size=2, max_size=6))
def test_set_algebra(deltas, taus):
    p = prof(*deltas)
    a = TJ.anchor_set(p)
    for d, got in zip(deltas, a.anchors):
        assert got.tolist() == scan_positive(d)
    # partition at tau = 0
    s0 = TJ.select(p, 0.0)
    for d, A in zip(deltas, s0.anchors):
        rest = [t for t in range(len(d)) if d[t] <= 0]
        assert sorted(A.tolist() + rest) == list(range(len(d)))
    sizes = []
    for tau in sorted(taus):
        s = TJ.select(p, tau)
        for d, A, B in zip(deltas, s.anchors, s.yet_to_learn):
            assert B.tolist() == scan_below(d, tau)
            assert not set(A.tolist()) & set(B.tolist())
        sizes.append(sum(B.size for B in s.yet_to_learn))
    assert all(x >= y for x, y in zip(sizes, sizes[1:]))


def test_ar_weights():
    s = TJ.select(prof([0.1, -0.2, -0.3, 0.4, 0.0]), 0.2)
    assert TJ.t3s_ar_weights(5, s, 0).tolist() == [0, 1, 1, 0, 1]
    assert TJ.inverse_t3s_weights(5, s, 0).tolist() == [1, 0, 0, 1, 0]
    none = TJ.select(prof([-0.1, -0.2]), 0.2)
    assert TJ.t3s_ar_weights(2, none, 0).tolist() == [1, 1]
    with pytest.raises(EmptyObjectiveError):
        TJ.inverse_t3s_weights(2, none, 0)
    every = TJ.select(prof([0.1, 0.2]), 0.2)
    assert TJ.inverse_t3s_weights(2, every, 0).tolist() == [1, 1]
    with pytest.raises(EmptyObjectiveError):
        TJ.t3s_ar_weights(2, every, 0)
    prov = TJ.weight_provider(every, TJ.t3s_ar_weights)

    class Ex:
        T = 2

    assert prov(0, Ex()).tolist() == [0, 0] and prov.skipped == {0}


def test_profile_confidence(small_data):
    m0 = ARModel(tiny_arch(1))
    same = TJ.profile_confidence(m0, m0, small_data)
    assert all((d == 0).all() for d in same.delta)
    mb = ARModel(tiny_arch(2))
    p = TJ.profile_confidence(m0, mb, small_data)
    for e, d in zip(small_data, p.delta):
        assert np.array_equal(d, ar_token_logprobs(mb, e) - ar_token_logprobs(m0, e))
    other = ARModel(tiny_arch(3, embed_dim=4))
    with pytest.raises(ValueError):
        TJ.profile_confidence(m0, other, small_data)


def test_doubling_probability_gives_ln2():
    c0 = [np.array([math.log(0.2), math.log(0.5)])]
    cb = [np.array([math.log(0.4), math.log(0.5)])]
    p = TJ.ConfidenceProfile.from_arrays(c0, cb)
    assert abs(p.delta[0][0] - math.log(2)) < 1e-15 and p.delta[0][1] == 0


def test_mask_sampling_basics():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = TJ.sample_random_mask(TJ.fixed_rate(1.0), 7, 4, rng)
        assert m.all() and m.shape == (7,)
        full = TJ.sample_random_mask(TJ.uniform_rate(), 7, 4, rng, include_prompt=True)
        assert full.shape == (11,) and not full[:4].any() and full[4:].any()
    # r = 0 would never mask anything; resampling guarantees coverage with a mixed rate
    rates = iter([0.0, 0.0, 1.0])
    m = TJ.sample_random_mask(lambda r: next(rates), 5, 2, rng)
    assert m.all()


def test_mask_rate_binomial():
    rng = np.random.default_rng(7)
    T, n = 12, 10_000
    hits = np.zeros(T)
    for _ in range(n):
        hits += TJ.sample_random_mask(TJ.fixed_rate(0.5), T, 3, rng)
    # resampling on all-zero draws conditions away a 2^-12 event; negligible at this n
    sigma = math.sqrt(n * 0.25)
    assert np.all(np.abs(hits - n * 0.5) < 3 * sigma)


def test_union_mask_examples():
    assert TJ.union_mask([1, 0, 0, 1], [1]).tolist() == [True, True, False, True]
    assert TJ.union_mask([0, 1, 0], []).tolist() == [False, True, False]
    assert TJ.union_mask([0, 0, 0, 0], [0, 2]).tolist() == [True, False, True, False]


def test_profile_stats_against_count():
    z = prof([0.0, 0.0], [0.0])
    st0 = TJ.profile_stats(z, TJ.select(z, 0.2))
    assert st0.drop_fraction == 0 and st0.top_increase == [] and st0.top_drop == []
    rng = np.random.default_rng(3)
    deltas = [rng.normal(size=n) for n in (5, 9, 4)]
    toks = [rng.integers(0, 6, size=d.size) for d in deltas]
    p = TJ.ConfidenceProfile.from_delta(deltas, toks)
    s = TJ.profile_stats(p, TJ.select(p, 0.2), k=3)
    count, total = 0, 0
    for d in deltas:
        for v in d:
            total += 1
            count += v < 0
    assert s.drop_fraction == count / total
    agg = {}
    for d, t in zip(deltas, toks):
        for v, tok in zip(d, t):
            agg[int(tok)] = agg.get(int(tok), 0.0) + v
    best = sorted((tok for tok in agg if agg[tok] > 0), key=lambda tok: -agg[tok])[:3]
    assert [r[0] for r in s.top_increase] == best


def test_selection_file_roundtrip(tmp_path):
    p = prof([0.3, -0.5, 0.0], [-0.9], [0.2, 0.2])
    s = TJ.select(p, 0.2)
    path = tmp_path / "sel.txt"
    TJ.write_selection(path, s)
    line = path.read_text().splitlines()[0]
    assert line.startswith("0\tA: 0\tB: 1\ttau=0.2")
    back = TJ.read_selection(path)
    assert back.lengths == s.lengths and back.tau == 0.2
    assert all(np.array_equal(a, b) for a, b in zip(back.anchors, s.anchors))
    assert TJ.check_sets(back) == []
    bad = TJ.SelectionSets([np.array([0, 5])], [np.array([0])], [3], 0.2)
    assert len(TJ.check_sets(bad)) == 2


def test_external_selector_compatibility(small_data):
    m0 = ARModel(tiny_arch(20, embed_dim=4, num_heads=1))
    store = train_run(m0, small_data, TrainConfig(num_steps=3, batch_size=4))
    p = TJ.profile_confidence(store.model(0), store.model(2), small_data, selector="external")
    s = TJ.select(p, 0.2)
    assert TJ.compatible_with(s, small_data)
    for i, e in enumerate(small_data):
        w = TJ.t3s_ar_weights(e.T, s, i) if s.anchors[i].size < e.T else np.zeros(e.T)
        assert w.shape == (e.T,) and set(np.unique(w)) <= {0.0, 1.0}
    assert not TJ.compatible_with(s, small_data.examples[:-1])
