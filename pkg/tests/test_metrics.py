import string

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xltransfer.metrics import (accuracy, best_threshold, bio_entities, cosine_matrix, mean_span_score,
                                mine_parallel, mutual_nearest_candidates, normalize_answer, prf,
                                retrieval_accuracy, score_at_threshold, span_score, tagging_f1)

WORDS = ["the", "a", "an", "cat", "Cat", "sat", "down", "mat", "on", "dog,", "ran.", "The", "big"]


# ---- oracles ---------------------------------------------------------------

def oracle_normalize(s):
    s = s.lower()
    s = "".join(c for c in s if c not in string.punctuation)
    return [w for w in s.split() if w not in ("a", "an", "the")]


def oracle_f1(pred, gold):
    p, g = oracle_normalize(pred), oracle_normalize(gold)
    if not p or not g:
        return float(p == g)
    remaining = list(g)
    same = 0
    for w in p:
        if w in remaining:
            remaining.remove(w)
            same += 1
    if same == 0:
        return 0.0
    prec, rec = same / len(p), same / len(g)
    return 2 * prec * rec / (prec + rec)


def oracle_best_f1(candidates, gold):
    """Every threshold tried by brute force, including one above all scores."""
    best = 0.0
    for thr in sorted({c[0] for c in candidates}) + [np.inf]:
        pred = {(s, t) for score, s, t in candidates if score >= thr}
        tp = len(pred & gold)
        if tp:
            p, r = tp / len(pred), tp / len(gold)
            best = max(best, 2 * p * r / (p + r))
    return best


# ---- accuracy and tagging ---------------------------------------------------

def test_accuracy():
    assert accuracy([1, 0, 1, 1], [1, 0, 0, 1]) == 0.75
    assert accuracy([], []) == 0.0
    with pytest.raises(ValueError):
        accuracy([1], [1, 2])


def test_entity_f1_partial_entity_is_wrong():
    assert tagging_f1([["B-X", "O", "O"]], [["B-X", "I-X", "O"]], mode="entity_bio") == 0.0


def test_entity_f1_exact():
    gold = [["B-X", "I-X", "O", "B-Y"]]
    assert tagging_f1(gold, gold, mode="entity_bio") == 1.0
    pred = [["B-X", "I-X", "O", "O"]]
    assert tagging_f1(pred, gold, mode="entity_bio") == pytest.approx(2 / 3)


def test_malformed_bio_warns_and_repairs():
    ents, repaired = bio_entities(["O", "I-X", "I-X", "B-Y", "I-Z"])
    assert repaired
    assert ents == [("X", 1, 3), ("Y", 3, 4), ("Z", 4, 5)]
    with pytest.warns(UserWarning):
        tagging_f1([["I-X"]], [["B-X"]], mode="entity_bio")


def test_token_micro_f1():
    assert tagging_f1([["N", "V"], ["N"]], [["N", "N"], ["N"]]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        tagging_f1([["N"]], [["N", "V"]])
    with pytest.raises(ValueError):
        tagging_f1([["N"]], [["N"]], mode="nope")


# ---- span scores -------------------------------------------------------------

def test_span_example():
    s = span_score("the cat sat", "cat sat down")
    assert s.em == 0.0
    assert s.f1 == pytest.approx(0.8)


def test_span_normalization():
    assert normalize_answer("The  Cat, sat!") == "cat sat"
    assert span_score("A cat.", ["dog", "the CAT"]).em == 1.0
    with pytest.raises(ValueError):
        span_score("x", [])


def test_span_matches_oracle_on_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pred = " ".join(rng.choice(WORDS, size=rng.integers(0, 6)))
        golds = [" ".join(rng.choice(WORDS, size=rng.integers(1, 6))) for _ in range(rng.integers(1, 4))]
        got = span_score(pred, golds)
        assert got.f1 == pytest.approx(max(oracle_f1(pred, g) for g in golds))
        assert got.em == max(float(oracle_normalize(pred) == oracle_normalize(g)) for g in golds)


@given(st.lists(st.sampled_from(WORDS), max_size=6), st.lists(st.sampled_from(WORDS), min_size=1, max_size=6))
def test_span_f1_symmetric_and_bounded(p, g):
    a, b = " ".join(p), " ".join(g)
    f = span_score(a, b).f1
    assert 0.0 <= f <= 1.0
    if p:
        assert f == pytest.approx(span_score(b, a).f1)
    assert span_score(b, b).f1 == 1.0


def test_mean_span_score():
    m = mean_span_score(["cat", "dog"], [["cat"], ["cat"]])
    assert (m.f1, m.em) == (0.5, 0.5)


# ---- retrieval -----------------------------------------------------------

def test_retrieval_identity_and_swap():
    x = np.random.default_rng(0).normal(size=(50, 16))
    assert retrieval_accuracy(x, x) == 1.0
    tgt = x.copy()
    tgt[[3, 7]] = tgt[[7, 3]]
    assert retrieval_accuracy(x, tgt) == pytest.approx(48 / 50)
    gold = np.arange(50)
    gold[[3, 7]] = [7, 3]
    assert retrieval_accuracy(x, tgt, gold) == 1.0


def test_retrieval_random_near_chance():
    rng = np.random.default_rng(1)
    src, tgt = rng.normal(size=(1000, 32)), rng.normal(size=(1000, 32))
    assert retrieval_accuracy(src, tgt) < 0.01


def test_retrieval_errors():
    x = np.ones((3, 2))
    with pytest.raises(ValueError):
        retrieval_accuracy(x, x[:2])
    with pytest.raises(ValueError):
        retrieval_accuracy(x, x, [0, 0, 1])
    with pytest.raises(ValueError, match="zero-norm"):
        cosine_matrix(np.zeros((1, 2)), x)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10 ** 6), st.floats(0.1, 10))
def test_retrieval_invariant_to_positive_scaling(n, seed, scale):
    rng = np.random.default_rng(seed)
    src, tgt = rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
    assert retrieval_accuracy(src * scale, tgt) == retrieval_accuracy(src, tgt)


# ---- mining ------------------------------------------------------------------

def _mining_instance(rng, n, noise):
    base = rng.normal(size=(n, 8))
    src_ids = [f"s{i}" for i in range(n)]
    tgt_ids = [f"t{i}" for i in range(n)]
    paired = rng.random(n) < 0.6
    tgt = np.where(paired[:, None], base + noise * rng.normal(size=base.shape), rng.normal(size=base.shape))
    gold = {(src_ids[i], tgt_ids[i]) for i in range(n) if paired[i]}
    return {"src": base, "tgt": tgt, "src_ids": src_ids, "tgt_ids": tgt_ids, "gold": gold}


def test_mining_dev_f1_is_exhaustive_optimum():
    rng = np.random.default_rng(0)
    for k in range(20):
        n = int(rng.integers(5, 500))
        dev = _mining_instance(rng, n, rng.uniform(0.1, 1.5))
        test = _mining_instance(rng, 30, 0.5)
        test["src_ids"] = [f"x{i}" for i in range(30)]
        test["gold"] = {(f"x{int(s[1:])}", t) for s, t in test["gold"]}
        out = mine_parallel(dev, test, "l1")
        cands = mutual_nearest_candidates(dev["src"], dev["tgt"], dev["src_ids"], dev["tgt_ids"])
        assert out["dev"].f1 == pytest.approx(oracle_best_f1(cands, dev["gold"]), abs=1e-12)
        assert out["test"].threshold == out["dev"].threshold


def test_mining_overlap_rejected():
    rng = np.random.default_rng(0)
    dev = _mining_instance(rng, 10, 0.1)
    with pytest.raises(ValueError, match="overlap"):
        mine_parallel(dev, dev)


def test_best_threshold_ties_and_empty():
    assert best_threshold([], set()) == (float("inf"), 0.0)
    cands = [(0.9, "a", "x"), (0.9, "b", "y"), (0.5, "c", "z")]
    thr, f1 = best_threshold(cands, {("a", "x"), ("b", "y")})
    assert thr == 0.9 and f1 == 1.0
    assert best_threshold(cands, {("q", "q")}) == (float("inf"), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.booleans()), min_size=1, max_size=40))
def test_best_threshold_matches_oracle(rows):
    cands = [(s, f"s{i}", f"t{i}") for i, (s, _) in enumerate(rows)]
    gold = {(f"s{i}", f"t{i}") for i, (_, g) in enumerate(rows) if g} | {("extra", "gold")}
    thr, f1 = best_threshold(cands, gold)
    assert f1 == pytest.approx(oracle_best_f1(cands, gold), abs=1e-12)
    assert score_at_threshold(cands, gold, thr).f1 == pytest.approx(f1, abs=1e-12)


def test_prf():
    assert prf(set(), set()) == (0.0, 0.0, 0.0)
    assert prf({1, 2}, {2, 3}) == (0.5, 0.5, 0.5)


def test_mutual_nearest_ties_go_to_lowest_index():
    src = np.array([[1.0, 0.0]])
    tgt = np.array([[1.0, 0.0], [2.0, 0.0]])
    assert mutual_nearest_candidates(src, tgt, ["s"], ["t0", "t1"]) == [(pytest.approx(1.0), "s", "t0")]
