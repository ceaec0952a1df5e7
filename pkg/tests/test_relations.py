import math

import numpy as np
import pytest

import oracles as O
from conftest import (
    HAND_COUNTS,
    HAND_MEANS,
    asymmetry_pair,
    box,
    hand_corpus,
    isolated_scene,
    predicate_pair,
    scene_repo,
)
from orgsynth.fixtures import CHAIR, FLOOR, PICTURE
from orgsynth.relations import (
    N_RELATIONS,
    PRIORITY,
    RelationStats,
    RelationType,
    ThresholdConfig,
    classify_pair,
    collect_stats,
    conditional_distribution,
    evaluate_predicates,
    pick_by_priority,
    relation_holds,
    scene_observations,
)

CFG = ThresholdConfig()
R = RelationType


def labels(rels):
    return {r.label for r in rels}


def test_threshold_validation():
    with pytest.raises(ValueError):
        ThresholdConfig(tau=0)
    with pytest.raises(ValueError):
        ThresholdConfig(tau_face=1.0)
    with pytest.raises(ValueError):
        ThresholdConfig(t_near=0)
    with pytest.raises(ValueError):
        ThresholdConfig(knn_k=0)


def test_relation_labels_round_trip():
    for r in RelationType:
        assert RelationType.from_label(r.label) is r
    with pytest.raises(ValueError):
        RelationType.from_label("Above")


def test_stacked_cubes_supported():
    a = box([0, 0, 1.5], [1, 1, 1])
    b = box([0, 0, 0.5], [1, 1, 1])
    rels = evaluate_predicates(a, b, CFG)
    assert R.SUPPORTED_BY in rels and R.NEARBY in rels
    assert classify_pair(a, b, CFG) is R.SUPPORTED_BY


def test_far_apart_is_empty():
    # a sits 100 m behind b along b's front, axes 45 deg apart, a's front pointing away:
    # the unbounded predicates (aligned axes, half-spaces, facing) all fail too
    b = box([0, 0, 0.5], [1, 0.8, 1], 0.0)
    a = box([-100, 0, 0.5], [1.2, 0.6, 0.9], math.pi / 4, front=[-1, 0, 0])
    assert evaluate_predicates(a, b, CFG) == set()
    assert classify_pair(a, b, CFG) is R.NONE


def test_only_nearby():
    a = box([0, 0, 0.5], [1, 0.6, 1], math.pi / 4, front=[0, -1, 0])
    b = box([0, 1.6, 0.5], [1, 0.6, 1], -math.pi / 4, front=[0, 1, 0])
    assert labels(evaluate_predicates(a, b, CFG)) == {"Nearby"}
    assert classify_pair(a, b, CFG) is R.NEARBY


def test_predicates_against_monte_carlo_oracle():
    rng = np.random.default_rng(99)
    for k in range(60):
        a, b = predicate_pair(rng)
        q = O.predicate_quantities(a, b, seed=k, n=1 << 15)
        diff = O.predicate_set(q, CFG) ^ labels(evaluate_predicates(a, b, CFG))
        assert diff <= O.borderline(q, CFG), (k, diff, q)


def test_classify_matches_priority_over_predicates():
    rng = np.random.default_rng(5)
    for _ in range(300):
        a, b = predicate_pair(rng)
        rels = evaluate_predicates(a, b, CFG)
        expect = next((r for r in PRIORITY if r in rels), R.NONE)
        assert classify_pair(a, b, CFG) is expect
        assert pick_by_priority(rels) is expect
        for r in PRIORITY:
            assert relation_holds(r, a, b, CFG) == (r in rels)
    assert relation_holds(R.NONE, a, b, CFG)


def test_two_chairs_on_floors():
    floor = box([0, 0, -0.01], [6, 6, 0.02])
    chair = box([0, 0, 0.45], [0.5, 0.45, 0.9], 0.3)
    scenes = [scene_repo(f"s{k}", floor, [], [(CHAIR, chair)]) for k in range(2)]
    stats = collect_stats(scenes, CFG)
    assert stats.category_mean == {CHAIR: 1.0}
    dist = conditional_distribution(stats, CHAIR, FLOOR)
    assert dist[R.SUPPORTED_BY] == 1.0 and dist.sum() == 1.0
    assert stats.scene_count == 2 and stats.floor_category == FLOOR


def test_hand_labeled_corpus():
    stats = collect_stats(hand_corpus(), CFG)
    got = {k: {R(r).label: int(c) for r, c in enumerate(v) if c} for k, v in stats.relation_counts.items()}
    assert got == HAND_COUNTS
    assert stats.category_mean == pytest.approx(HAND_MEANS, abs=0)
    assert stats.pair_counts == {k: sum(v.values()) for k, v in HAND_COUNTS.items()}
    for k, v in HAND_COUNTS.items():
        n = sum(v.values())
        expect = np.zeros(N_RELATIONS)
        for lab, c in v.items():
            expect[R.from_label(lab)] = c / n
        assert np.array_equal(stats.relation_dist[k], expect)
    assert stats.excluded_instances == 0


def test_asymmetric_observation():
    a, b = asymmetry_pair()
    assert classify_pair(a, b, CFG) is R.FACES
    assert classify_pair(b, a, CFG) is R.NONE
    repo = scene_repo("asym", None, [], [(CHAIR, a), (PICTURE, b)])
    obs, excluded = scene_observations(repo, CFG, "asym")
    assert [(o.subject_category, o.object_category, o.relation) for o in obs] == [(CHAIR, PICTURE, R.FACES)]
    assert excluded == 1


def test_isolated_instance_excluded():
    stats = collect_stats([isolated_scene()], CFG)
    assert stats.excluded_instances == 1
    assert all(i != PICTURE for i, _ in stats.pair_counts)
    assert stats.category_mean[PICTURE] == 1.0
    assert stats.relation_counts[(CHAIR, PICTURE)][R.FACES] == 1


def test_knn_limits_foreground_partners():
    floor = box([0, 0, -0.01], [40, 40, 0.02])
    objs = [(CHAIR, box([1.0 * k, 0, 0.45], [0.5, 0.45, 0.9])) for k in range(6)]
    repo = scene_repo("k", floor, [], objs)
    obs, _ = scene_observations(repo, ThresholdConfig(knn_k=2), "k")
    # each chair: two neighbours plus the floor
    assert len(obs) == 6 * 3


def test_conditional_distribution_cases():
    counts = {(CHAIR, FLOOR): np.eye(N_RELATIONS, dtype=np.int64)[R.SUPPORTED_BY] * 4}
    v = np.zeros(N_RELATIONS, dtype=np.int64)
    v[R.FACES], v[R.LEFT_OF] = 8, 2
    counts[(CHAIR, PICTURE)] = v
    stats = RelationStats({CHAIR: 1.0}, counts, 1)
    assert conditional_distribution(stats, CHAIR, FLOOR)[R.SUPPORTED_BY] == 1.0
    unseen = conditional_distribution(stats, PICTURE, CHAIR)
    assert unseen[R.NONE] == 1.0 and unseen.sum() == 1.0
    d = conditional_distribution(stats, CHAIR, PICTURE)
    assert d[R.FACES] == 0.8 and d[R.LEFT_OF] == 0.2 and d.sum() == 1.0


def test_stats_json_round_trip():
    stats = collect_stats(hand_corpus(), CFG)
    back = RelationStats.from_json(stats.to_json())
    assert back.to_json() == stats.to_json()
    with pytest.raises(ValueError):
        RelationStats.from_json({**stats.to_json(), "version": "0"})
