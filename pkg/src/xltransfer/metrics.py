"""Target-task scoring: accuracy, tagging F1, span F1/EM, mining and retrieval."""
from __future__ import annotations

import collections
import re
import string
import warnings
from dataclasses import dataclass, field

import numpy as np


def accuracy(predictions, golds) -> float:
    if len(predictions) != len(golds):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(golds)} golds")
    if not len(golds):
        return 0.0
    return sum(p == g for p, g in zip(predictions, golds)) / len(golds)


def bio_entities(tags):
    """Entity spans ``(type, start, end_exclusive)`` from a BIO sequence.

    An ``I-X`` that does not continue an open ``X`` entity starts a new one
    (read as ``B-X``). Returns ``(entities, repaired)``.
    """
    entities, repaired = [], False
    cur = None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, typ = tag.partition("-")
        if prefix == "I" and cur is not None and cur[0] == typ:
            continue
        if cur is not None:
            entities.append((cur[0], cur[1], i))
            cur = None
        if prefix == "B":
            cur = (typ, i)
        elif prefix == "I":
            repaired = True
            cur = (typ, i)
    return entities, repaired


def tagging_f1(predictions, golds, mode="token_micro") -> float:
    """Micro F1 over tags (``token_micro``) or over exact entity spans (``entity_bio``)."""
    if len(predictions) != len(golds):
        raise ValueError("number of predicted and gold sequences differs")
    for i, (p, g) in enumerate(zip(predictions, golds)):
        if len(p) != len(g):
            raise ValueError(f"sequence {i}: {len(p)} predicted tags vs {len(g)} gold tags")
    if mode == "token_micro":
        # every token carries exactly one predicted and one gold tag, so P = R
        total = sum(len(g) for g in golds)
        correct = sum(a == b for p, g in zip(predictions, golds) for a, b in zip(p, g))
        return correct / total if total else 0.0
    if mode == "entity_bio":
        tp = n_pred = n_gold = 0
        repaired_any = False
        for i, (p, g) in enumerate(zip(predictions, golds)):
            pe, rp = bio_entities(p)
            ge, rg = bio_entities(g)
            repaired_any |= rp or rg
            pe, ge = set(pe), set(ge)
            tp += len(pe & ge)
            n_pred += len(pe)
            n_gold += len(ge)
        if repaired_any:
            warnings.warn("malformed BIO: I- tag without a matching B- was read as B-", stacklevel=2)
        if tp == 0:
            return 0.0
        prec, rec = tp / n_pred, tp / n_gold
        return 2 * prec * rec / (prec + rec)
    raise ValueError(f"unknown tagging F1 mode {mode!r}")


_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCT = set(string.punctuation)


def normalize_answer(s):
    """Lowercase, drop punctuation and the articles a/an/the, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def _f1(pred_toks, gold_toks):
    if not pred_toks or not gold_toks:
        return float(pred_toks == gold_toks)
    common = collections.Counter(pred_toks) & collections.Counter(gold_toks)
    same = sum(common.values())
    if same == 0:
        return 0.0
    p, r = same / len(pred_toks), same / len(gold_toks)
    return 2 * p * r / (p + r)


@dataclass(frozen=True)
class SpanScore:
    f1: float
    em: float


def span_score(prediction, golds) -> SpanScore:
    """Best exact match and token-overlap F1 of one prediction over its gold answers."""
    if isinstance(golds, str):
        golds = [golds]
    if not golds:
        raise ValueError("span_score needs at least one gold answer")
    pn = normalize_answer(prediction)
    em = max(float(pn == normalize_answer(g)) for g in golds)
    f1 = max(_f1(pn.split(), normalize_answer(g).split()) for g in golds)
    return SpanScore(f1, em)


def mean_span_score(predictions, gold_lists) -> SpanScore:
    if len(predictions) != len(gold_lists):
        raise ValueError("length mismatch")
    if not predictions:
        return SpanScore(0.0, 0.0)
    scores = [span_score(p, g) for p, g in zip(predictions, gold_lists)]
    return SpanScore(float(np.mean([s.f1 for s in scores])), float(np.mean([s.em for s in scores])))


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------

def _unit_rows(x, ids=None):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        who = ids[int(bad[0])] if ids is not None else int(bad[0])
        raise ValueError(f"zero-norm embedding for id {who!r}")
    return x / norms[:, None]


def cosine_matrix(src, tgt, src_ids=None, tgt_ids=None):
    return _unit_rows(src, src_ids) @ _unit_rows(tgt, tgt_ids).T


def retrieval_accuracy(src, tgt, gold=None) -> float:
    """Share of source rows whose cosine nearest target is their gold mate.

    ``gold[i]`` is the target index paired with source ``i`` (identity by
    default). Ties go to the lowest target index.
    """
    src, tgt = np.asarray(src), np.asarray(tgt)
    if len(src) != len(tgt):
        raise ValueError(f"|src|={len(src)} != |tgt|={len(tgt)}")
    gold = np.arange(len(src)) if gold is None else np.asarray(gold)
    if sorted(gold.tolist()) != list(range(len(src))):
        raise ValueError("gold alignment must be a bijection")
    if not len(src):
        return 0.0
    nearest = np.argmax(cosine_matrix(src, tgt), axis=1)
    return float(np.mean(nearest == gold))


@dataclass
class MiningResult:
    language: str
    threshold: float
    precision: float
    recall: float
    f1: float
    predicted: set = field(default_factory=set)


def mutual_nearest_candidates(src, tgt, src_ids, tgt_ids):
    """Mutual cosine nearest neighbours as ``[(score, src_id, tgt_id)]``; ties go to the lowest index."""
    sim = cosine_matrix(src, tgt, src_ids, tgt_ids)
    if sim.size == 0:
        return []
    fwd = np.argmax(sim, axis=1)
    bwd = np.argmax(sim, axis=0)
    return [(float(sim[i, j]), src_ids[i], tgt_ids[j]) for i, j in enumerate(fwd) if bwd[j] == i]


def prf(predicted: set, gold: set):
    tp = len(predicted & gold)
    p = tp / len(predicted) if predicted else 0.0
    r = tp / len(gold) if gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def score_at_threshold(candidates, gold: set, threshold, language=""):
    pred = {(s, t) for score, s, t in candidates if score >= threshold}
    p, r, f = prf(pred, gold)
    return MiningResult(language, float(threshold), p, r, f, pred)


def best_threshold(candidates, gold: set):
    """Threshold maximizing F1 of ``{c : score(c) >= threshold}``.

    Every distinct candidate score is tried, plus +inf (no predictions).
    Among equal F1 values the highest threshold wins.
    """
    if not candidates:
        return float("inf"), 0.0
    scores = np.array([c[0] for c in candidates])
    hits = np.array([(c[1], c[2]) in gold for c in candidates], dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    n_pred = np.arange(1, len(scores) + 1)
    # a threshold equal to a score admits every tied candidate: use the last index of each tie run
    last = np.r_[scores[1:] != scores[:-1], True]
    tp, n_pred, thr = tp[last], n_pred[last], scores[last]
    prec = tp / n_pred
    rec = tp / len(gold) if gold else np.zeros_like(prec, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(tp > 0, 2 * prec * rec / (prec + rec), 0.0)
    k = int(np.argmax(f1))
    if f1[k] <= 0.0:
        return float("inf"), 0.0
    return float(thr[k]), float(f1[k])


def mine_parallel(dev, test, language=""):
    """Tune a similarity cut-off on dev mutual-NN candidates and apply it to test.

    ``dev`` and ``test`` are dicts with keys ``src``, ``tgt`` (embedding
    matrices), ``src_ids``, ``tgt_ids`` and ``gold`` (set of (src_id, tgt_id)).
    Returns ``{"dev": MiningResult, "test": MiningResult}``.
    """
    dev_gold, test_gold = set(map(tuple, dev["gold"])), set(map(tuple, test["gold"]))
    if dev_gold & test_gold:
        raise ValueError("dev and test gold pairs overlap")
    dev_c = mutual_nearest_candidates(dev["src"], dev["tgt"], dev["src_ids"], dev["tgt_ids"])
    thr, _ = best_threshold(dev_c, dev_gold)
    test_c = mutual_nearest_candidates(test["src"], test["tgt"], test["src_ids"], test["tgt_ids"])
    return {"dev": score_at_threshold(dev_c, dev_gold, thr, language),
            "test": score_at_threshold(test_c, test_gold, thr, language)}


def metric_record(task, language, name, value):
    return {"task": task, "language": language, "metric": name, "value": float(value)}
