import random
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from hiertool.hierarchy import ancestor_closure
from hiertool.metrics import (
    MetricError,
    aggregate,
    evaluate_manifest,
    format_path_line,
    format_report,
    hierarchical_precision,
    hierarchical_recall,
    pair_manifests,
    parse_path_manifest,
    score_sets,
    sdl,
)


def brute_force(universe, truth, pred):
    """Membership scan over the universe, exact rationals."""
    inter = only_t = only_p = 0
    for x in universe:
        a, b = x in truth, x in pred
        inter += a and b
        only_t += a and not b
        only_p += b and not a
    ph = Fraction(inter, inter + only_p) if inter + only_p else None
    rh = Fraction(inter, inter + only_t) if inter + only_t else None
    return only_t + only_p, ph, rh


S1, S2 = {"A", "B", "D"}, {"A", "B"}
P1, P2, P3 = {"A", "B", "D"}, {"A", "B", "E"}, {"A", "B"}

# every cell of the two-sample, three-prediction worked table
WORKED = [
    (P1, S1, 0, 1.00, 1.00),
    (P2, S1, 2, 0.67, 0.67),
    (P3, S1, 1, 1.00, 0.67),
    (P1, S2, 1, 0.67, 1.00),
    (P2, S2, 1, 0.67, 1.00),
    (P3, S2, 0, 1.00, 1.00),
]


@pytest.mark.parametrize("pred, truth, d, ph, rh", WORKED)
def test_worked_table(pred, truth, d, ph, rh):
    assert sdl(truth, pred) == d
    assert round(hierarchical_precision(truth, pred), 2) == ph
    assert round(hierarchical_recall(truth, pred), 2) == rh


def test_point_values_are_exact_thirds():
    assert hierarchical_precision(S1, P2) == pytest.approx(2 / 3, abs=1e-12)
    assert hierarchical_recall(S1, P2) == pytest.approx(2 / 3, abs=1e-12)


def test_subset_limits():
    assert hierarchical_precision({"A", "B", "C"}, {"A"}) == 1.0
    assert hierarchical_recall({"A"}, {"A", "B", "C"}) == 1.0
    assert sdl(S1, S1) == 0


def test_empty_sets_are_errors():
    with pytest.raises(MetricError):
        hierarchical_precision({"A"}, set())
    with pytest.raises(MetricError):
        hierarchical_recall(set(), {"A"})


def test_random_pairs_match_enumeration():
    rng = random.Random(3)
    for _ in range(1000):
        n = rng.randint(1, 16)
        universe = range(n)
        t = {x for x in universe if rng.random() < 0.5} or {0}
        p = {x for x in universe if rng.random() < 0.5} or {n - 1}
        d, ph, rh = brute_force(universe, t, p)
        assert sdl(t, p) == d
        assert abs(hierarchical_precision(t, p) - float(ph)) <= 1e-12
        assert abs(hierarchical_recall(t, p) - float(rh)) <= 1e-12


@given(st.frozensets(st.integers(0, 15), min_size=1), st.frozensets(st.integers(0, 15), min_size=1))
def test_metric_properties(t, p):
    assert sdl(t, p) == sdl(p, t)
    assert 0 <= hierarchical_precision(t, p) <= 1
    assert hierarchical_precision(t, p) == hierarchical_recall(p, t)


def test_manifest_worked_pair(abde_h):
    h = abde_h
    t = h.path_from_names(["A", "B", "D"])
    p = h.path_from_names(["A", "B", "E"])
    rep = evaluate_manifest([t], [p], h)
    assert rep.sdl_mean == 2
    assert rep.ph_mean == pytest.approx(2 / 3) and rep.rh_mean == pytest.approx(2 / 3)
    assert evaluate_manifest([t], [t], h).as_dict() == {"n": 1, "sdl": 0.0, "ph": 1.0, "rh": 1.0}


def test_manifest_means_are_hand_averages(abde_h):
    h = abde_h
    truths = [h.path_from_names(["A", "B", "D"]), h.path_from_names(["A", "B"])]
    preds = [h.path_from_names(["A", "B", "E"]), h.path_from_names(["A", "B", "D"])]
    rep = evaluate_manifest(truths, preds, h)
    singles = [score_sets(ancestor_closure(h, t), ancestor_closure(h, p)) for t, p in zip(truths, preds)]
    assert rep.sdl_mean == (singles[0].sdl + singles[1].sdl) / 2
    assert rep.ph_mean == pytest.approx((singles[0].ph + singles[1].ph) / 2, abs=1e-15)
    assert rep.rh_mean == pytest.approx((singles[0].rh + singles[1].rh) / 2, abs=1e-15)


def test_manifest_length_and_path_errors(abde_h):
    h = abde_h
    t = h.path_from_names(["A"])
    with pytest.raises(MetricError):
        evaluate_manifest([t], [], h)
    with pytest.raises(MetricError):
        evaluate_manifest([t], [(h.id_of("D"),)], h)


def test_aggregate_is_order_independent():
    rng = random.Random(0)
    scores = [score_sets({1, 2, 3}, set(rng.sample(range(6), rng.randint(1, 5)))) for _ in range(200)]
    a = aggregate(scores)
    rng.shuffle(scores)
    b = aggregate(scores)
    assert (a.sdl_mean, a.ph_mean, a.rh_mean) == (b.sdl_mean, b.ph_mean, b.rh_mean)
    assert aggregate([]).sdl_mean == 0.0


def test_report_format_uses_percent(abde_h):
    h = abde_h
    rep = evaluate_manifest([h.path_from_names(["A", "B", "D"])], [h.path_from_names(["A", "B", "E"])], h)
    assert format_report(rep) == "n=1  SDL=2.0000  P_H(%)=66.67  R_H(%)=66.67"


def test_path_manifest_round_trip(abde_h):
    h = abde_h
    text = "\n".join([
        format_path_line("img_1", h.path_from_names(["A", "B"]), h),
        format_path_line("img_2", h.path_from_names(["A", "C", "F"]), h),
    ])
    assert text.splitlines()[0] == "img_1\tA/B/None"
    parsed = parse_path_manifest(text, h)
    assert h.path_names(parsed["img_1"]) == ["A", "B"]
    json_line = '{"image_id": "img_3", "category_path": ["A"]}'
    assert h.path_names(parse_path_manifest(json_line, h)["img_3"]) == ["A"]


@pytest.mark.parametrize("text", ["x\tA/Q", "x A/B", "x\tA\nx\tA", "x\tNone"])
def test_path_manifest_errors(abde_h, text):
    with pytest.raises(MetricError):
        parse_path_manifest(text, abde_h)


def test_pairing_requires_same_ids():
    ids, t, p = pair_manifests({"b": (1,), "a": (2,)}, {"a": (3,), "b": (4,)})
    assert ids == ["a", "b"] and t == [(2,), (1,)] and p == [(3,), (4,)]
    with pytest.raises(MetricError, match="mismatch"):
        pair_manifests({"a": (1,)}, {"b": (1,)})
