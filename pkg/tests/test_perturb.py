import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptlrp.graph import Graph, Node, TargetSpec, forward, forward_from, select_scalar
from conceptlrp.perturb import (BenchReport, PerturbCurve, ScoreMethod, aoc, auc, channel_scores, default_target,
                                deletion_curve, insertion_curve, parse_methods, ranking, run_benchmark, step_groups)
from oracles import central_difference


def linear_graph(w):
    """logit = sum_c w_c relu(x_c) on a 1x1 map."""
    w = np.asarray(w, dtype=float)
    c = len(w)
    nodes = [Node("x", "Input", [], {"shape": [1, c, 1, 1]}), Node("a", "ReLU", ["x"]),
             Node("z", "Conv2D", ["a"], {}, {"weight": w.reshape(1, c, 1, 1)}), Node("logits", "Output", ["z"])]
    return Graph(nodes, {"x": (1, c, 1, 1)}, ["logits"])


def x_of(a):
    return np.asarray(a, dtype=float).reshape(1, -1, 1, 1)


TARGET = TargetSpec("logits", "segmentation", 0, region=np.ones((1, 1), dtype=bool))


def test_two_channel_deletion_and_insertion():
    g, x = linear_graph([3.0, 1.0]), x_of([1.0, 1.0])
    d = deletion_curve(g, x, "a", TARGET, [0, 1])
    np.testing.assert_allclose(d.values, [4, 1, 0])
    assert aoc(d) == pytest.approx((3 + 4) / 2)
    i = insertion_curve(g, x, "a", TARGET, [0, 1])
    np.testing.assert_allclose(i.values, [0, 3, 4])
    assert auc(i) == pytest.approx((3 + 4) / 2)


def test_linear_decay_aoc():
    for T in (1, 4, 10):
        curve = PerturbCurve(1 - np.arange(T + 1) / T, "deletion")
        assert aoc(curve) == pytest.approx((T + 1) / (2 * T))
    with pytest.raises(ValueError):
        auc(PerturbCurve(np.zeros(3), "deletion"))
    with pytest.raises(ValueError):
        aoc(PerturbCurve(np.zeros(3), "insertion"))


@settings(max_examples=25, deadline=None)
@given(w=st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=6),
       seed=st.integers(0, 2**31))
def test_aoc_bounds_by_brute_force(w, seed):
    g = linear_graph(w)
    x = x_of(np.random.default_rng(seed).uniform(0.1, 1, len(w)))
    tape = forward(g, x)
    all_aoc = [aoc(deletion_curve(tape, None, "a", TARGET, p)) for p in itertools.permutations(range(len(w)))]
    lo, hi = min(all_aoc), max(all_aoc)
    for name in ("lrp", "gradient", "gradcam", "activation", "random"):
        v = aoc(deletion_curve(tape, None, "a", TARGET, ranking(channel_scores(tape, "a", TARGET, ScoreMethod(name)))))
        assert lo - 1e-9 <= v <= hi + 1e-9
    # on a linear model, ranking by contribution is optimal
    best = aoc(deletion_curve(tape, None, "a", TARGET, ranking(channel_scores(tape, "a", TARGET, ScoreMethod("lrp")))))
    assert best == pytest.approx(hi, abs=1e-9)


def test_deletion_insertion_endpoints_agree(pid_hand, data_seed0):
    tape = forward(pid_hand, data_seed0.image(0))
    target = default_target(tape)
    order = ranking(channel_scores(tape, "head1", target, ScoreMethod("activation")))
    d = deletion_curve(tape, None, "head1", target, order)
    i = insertion_curve(tape, None, "head1", target, order)
    assert abs(d.values[0] - i.values[-1]) < 1e-9
    assert abs(d.values[-1] - i.values[0]) < 1e-9
    assert d.steps == 16
    assert d.values[0] == pytest.approx(select_scalar(tape, target)[0], abs=1e-9)


def test_order_must_be_permutation():
    g, x = linear_graph([1.0, 2.0]), x_of([1, 1])
    with pytest.raises(ValueError):
        deletion_curve(g, x, "a", TARGET, [0, 0])


# ---- scores


def test_activation_scores_and_ranking():
    g = linear_graph([1.0, 1.0, 1.0])
    tape = forward(g, x_of([1.0, 5.0, 3.0]))
    s = channel_scores(tape, "a", TARGET, ScoreMethod("activation"))
    np.testing.assert_array_equal(s.values, [1, 5, 3])
    assert ranking(s).tolist() == [1, 2, 0]
    assert ranking([2.0, 2.0, 1.0]).tolist() == [0, 1, 2]


def test_random_scores_reproducible():
    tape = forward(linear_graph(np.ones(20)), x_of(np.ones(20)))
    a = channel_scores(tape, "a", TARGET, ScoreMethod("random", 5), stream=(1, 0)).values
    b = channel_scores(tape, "a", TARGET, ScoreMethod("random", 5), stream=(1, 0)).values
    c = channel_scores(tape, "a", TARGET, ScoreMethod("random", 6), stream=(1, 0)).values
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert sorted(a) == list(range(20))


def test_gradient_scores_match_finite_differences(rng):
    w = rng.standard_normal(5)
    x = x_of(rng.uniform(0.5, 1, 5))
    g = linear_graph(w)
    tape = forward(g, x)
    s = channel_scores(tape, "a", TARGET, ScoreMethod("gradient")).values

    def f(a):
        return float(forward_from(tape, "a", a).values["logits"].sum())

    fd = []
    for c in range(5):
        e = np.zeros_like(x)
        e[0, c] = 1.0
        fd.append(abs(central_difference(f, tape.values["a"], e)))
    np.testing.assert_allclose(s, fd, atol=1e-6)
    gc = channel_scores(tape, "a", TARGET, ScoreMethod("gradcam")).values
    np.testing.assert_allclose(gc, w * x.ravel(), atol=1e-12)


def test_method_validation():
    with pytest.raises(ValueError, match="valid methods"):
        ScoreMethod("saliency")
    assert [m.name for m in parse_methods("lrp, random")] == ["lrp", "random"]
    with pytest.raises(ValueError):
        parse_methods(" , ")


def test_step_groups():
    assert len(step_groups(np.arange(64))) == 64
    order = np.random.default_rng(0).permutation(100)
    groups = step_groups(order)
    assert len(groups) == 32 and {len(gr) for gr in groups} <= {3, 4}
    np.testing.assert_array_equal(np.concatenate(groups), order)


def test_grouped_curve_has_32_steps():
    g = linear_graph(np.linspace(1, 2, 80))
    d = deletion_curve(g, x_of(np.ones(80)), "a", TARGET, np.arange(80))
    assert d.steps == 32 and d.values[-1] == 0


# ---- benchmark


@pytest.fixture(scope="module")
def small_bench(pid_hand, data_seed0):
    return run_benchmark(data_seed0, pid_hand, ["head2", "head1"], ["lrp", "activation", "random"], 4, seed=0)


def test_single_sample_matches_direct_curve(pid_hand, data_seed0, small_bench):
    i = small_bench.samples[0]
    rep = run_benchmark(data_seed0, pid_hand, ["head1"], ["lrp"], 1, samples=[i])
    tape = forward(pid_hand, data_seed0.image(i))
    target = default_target(tape)
    order = ranking(channel_scores(tape, "head1", target, ScoreMethod("lrp")))
    direct = aoc(deletion_curve(tape, None, "head1", target, order))
    assert rep.aoc[("lrp", "head1")][0] == pytest.approx(direct, abs=1e-12)
    assert small_bench.aoc[("lrp", "head1")][0] == pytest.approx(direct, abs=1e-12)


def test_benchmark_deterministic_and_jobs_invariant(pid_hand, data_seed0, small_bench):
    again = run_benchmark(data_seed0, pid_hand, ["head2", "head1"], ["lrp", "activation", "random"], 4, seed=0,
                          jobs=3)
    assert again.to_dict() == small_bench.to_dict()
    assert again.curves_csv() == small_bench.curves_csv()


def test_seed_changes_only_random_rows(pid_hand, data_seed0, small_bench):
    other = run_benchmark(data_seed0, pid_hand, ["head2", "head1"], ["lrp", "activation", "random"], 4, seed=1)
    assert other.samples == small_bench.samples
    for key in small_bench.aoc:
        same = small_bench.aoc[key] == other.aoc[key]
        assert same == (key[0] != "random"), key


def test_report_layout(small_bench):
    d = small_bench.to_dict()
    assert len(d["results"]) == 2 * 3
    assert {r["method"] for r in d["results"]} == {"lrp", "activation", "random"}
    assert [t["a"] for t in d["sign_tests"]] == ["lrp", "activation"]
    lines = small_bench.curves_csv().splitlines()
    assert lines[0] == "sample,layer,method,direction,step,logit"
    assert len(lines) == 1 + 4 * 2 * 3 * 2 * 17


def test_benchmark_errors(pid_hand, data_seed0):
    with pytest.raises(ValueError):
        run_benchmark(data_seed0, pid_hand, [], ["lrp"], 2)
    with pytest.raises(KeyError):
        run_benchmark(data_seed0, pid_hand, ["nope"], ["lrp"], 2)
    with pytest.raises(ValueError):
        run_benchmark(data_seed0, pid_hand, ["head1"], ["lrp"], 10_000)


def test_sign_test_counts():
    rep = BenchReport([0, 1, 2, 3], ["l"], ["a", "b"])
    rep.aoc[("a", "l")] = [2.0, 2.0, 2.0, 1.0]
    rep.aoc[("b", "l")] = [1.0, 1.0, 1.0, 1.0]
    t = rep.sign_test("a", "b")
    assert (t["wins"], t["losses"], t["ties"]) == (3, 0, 1)
    assert t["p_value"] == pytest.approx(0.125)
