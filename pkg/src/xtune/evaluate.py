"""Metrics, per-language reports, and the cross-lingual transfer gap."""

from __future__ import annotations

import numpy as np

from . import tokenizer as tok
from .model import predict


def accuracy(predictions, gold):
    """Fraction of exact matches between two equal-length label lists."""
    _check_lengths(predictions, gold)
    return sum(p == g for p, g in zip(predictions, gold)) / len(gold)


def span_f1_em(predicted_spans, gold_spans):
    """Position-overlap F1 and exact match for (start, end) spans, inclusive.

    F1 is computed per example over covered positions and averaged; this is
    the word-position analog of answer-token F1 (no string normalization is
    needed in the synthetic setting).
    """
    _check_lengths(predicted_spans, gold_spans)
    f1_total = 0.0
    em_total = 0
    for (ps, pe), (gs, ge) in zip(predicted_spans, gold_spans):
        overlap = max(0, min(pe, ge) - max(ps, gs) + 1)
        if overlap:
            precision = overlap / (pe - ps + 1)
            recall = overlap / (ge - gs + 1)
            f1_total += 2 * precision * recall / (precision + recall)
        em_total += int(ps == gs and pe == ge)
    n = len(gold_spans)
    return f1_total / n, em_total / n


def tag_scores(predicted_seqs, gold_seqs):
    """(accuracy, micro-F1) over flattened tag sequences.

    With exactly one predicted and one gold tag per position the micro
    average has equal precision and recall, so F1 coincides with accuracy;
    both are reported for interface parity with other benchmarks.
    """
    _check_lengths(predicted_seqs, gold_seqs)
    tp = 0
    total = 0
    for pred, gold in zip(predicted_seqs, gold_seqs):
        if len(pred) != len(gold):
            raise ValueError(f"tag sequence lengths differ: {len(pred)} vs {len(gold)}")
        tp += sum(p == g for p, g in zip(pred, gold))
        total += len(gold)
    if total == 0:
        raise ValueError("no tags to score")
    acc = tp / total
    fp = total - tp
    fn = total - tp
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return acc, f1


def _check_lengths(predictions, gold):
    if not gold:
        raise ValueError("nothing to score: empty gold list")
    if not predictions:
        raise ValueError("nothing to score: empty prediction list")
    if len(predictions) != len(gold):
        raise ValueError(f"{len(predictions)} predictions for {len(gold)} gold items")


def transfer_gap(per_language_scores, source_language):
    """Source score minus the mean score over all other languages.

    Scores may be floats or (F1, EM) pairs; pairs are averaged first.
    Positive gap means the model performs worse off-source.
    """
    def as_scalar(v):
        if isinstance(v, (tuple, list)):
            return sum(v) / len(v)
        return float(v)

    if source_language not in per_language_scores:
        raise ValueError(f"source language {source_language!r} missing from scores")
    others = [as_scalar(v) for lang, v in per_language_scores.items()
              if lang != source_language]
    if not others:
        raise ValueError("need at least one non-source language")
    return as_scalar(per_language_scores[source_language]) - sum(others) / len(others)


# ---------------------------------------------------------------------------
# Decoding and corpus-level evaluation


def decode(prediction, segmentation=None):
    """Greedy decode of one Prediction.

    Spans are decoded jointly over start <= end in subword space, then
    mapped back to word indices via the segmentation.
    """
    if prediction.task == "classification":
        return int(np.argmax(prediction.class_log.data))
    if prediction.task == "span":
        start_log = prediction.start_log.data
        end_log = prediction.end_log.data
        n = start_log.shape[0]
        best, best_pair = -np.inf, (0, 0)
        for s in range(n):
            e = s + int(np.argmax(end_log[s:]))
            if start_log[s] + end_log[e] > best:
                best = start_log[s] + end_log[e]
                best_pair = (s, e)
        s, e = best_pair
        return (segmentation.word_index[s], segmentation.word_index[e])
    return [int(t) for t in np.argmax(prediction.word_log.data, axis=1)]


def score_corpus(params, examples, vocab, pooling=None):
    """Viterbi-segment, predict, decode and score one labeled corpus.

    Returns a dict with the task's metrics ('accuracy' for classification;
    'f1'/'em'/'score' for spans; 'accuracy'/'f1' for labeling).
    """
    decoded, gold = [], []
    for ex in examples:
        seg = tok.viterbi_segment_words(vocab, ex.words)
        pred = predict(params, seg, pooling=pooling if params.task == "labeling" else None)
        decoded.append(decode(pred, seg))
        gold.append(ex.gold())
    if params.task == "classification":
        return {"accuracy": accuracy(decoded, gold)}
    if params.task == "span":
        f1, em = span_f1_em(decoded, gold)
        return {"f1": f1, "em": em, "score": (f1 + em) / 2}
    acc, f1 = tag_scores(decoded, gold)
    return {"accuracy": acc, "f1": f1}


def primary_score(task, scores):
    """The scalar used for mode comparisons and the transfer gap."""
    if task == "classification":
        return scores["accuracy"]
    if task == "span":
        return scores["score"]
    return scores["accuracy"]


def evaluate_languages(params, eval_sets, vocab, pooling=None):
    """Per-language scores plus the transfer gap against the first language."""
    per_language = {}
    for lang, examples in eval_sets.items():
        per_language[lang] = score_corpus(params, examples, vocab, pooling=pooling)
    return per_language


def report(per_language, source_language, task):
    """Machine-readable report dict with per-language scores and the gap."""
    scalar = {lang: primary_score(task, s) for lang, s in per_language.items()}
    targets = [v for lang, v in scalar.items() if lang != source_language]
    return {
        "task": task,
        "source_language": source_language,
        "per_language": per_language,
        "mean_target_score": sum(targets) / len(targets) if targets else None,
        "transfer_gap": transfer_gap(scalar, source_language) if targets else None,
    }


def format_report(rep):
    """Aligned plain-text table for terminals."""
    langs = sorted(rep["per_language"])
    metrics = sorted({k for s in rep["per_language"].values() for k in s})
    width = max(8, max(len(l) for l in langs) + 2)
    lines = ["lang".ljust(width) + "  ".join(m.rjust(10) for m in metrics)]
    for lang in langs:
        row = rep["per_language"][lang]
        cells = "  ".join(f"{row.get(m, float('nan')):10.4f}" for m in metrics)
        lines.append(lang.ljust(width) + cells)
    if rep["transfer_gap"] is not None:
        lines.append(f"transfer gap vs {rep['source_language']}: {rep['transfer_gap']:+.4f}")
    return "\n".join(lines)
