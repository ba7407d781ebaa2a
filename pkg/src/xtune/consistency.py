"""The two consistency regularizers and their distribution alignment rules.

Pair consistency penalizes disagreement between predictions on an example
and on its augmented view (symmetric KL with stop-gradient on the reference
side of each term).  Teacher consistency penalizes KL from a frozen
teacher's predictions to the student's on the identical input.
"""

from __future__ import annotations

import math

from . import autodiff as ad

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)


def kl(p_log, q_log):
    """KL(P || Q) in nats from two log-prob vectors of equal length.

    Probabilities are floored at 1e-12 before the logs so the value stays
    finite for degenerate inputs.
    """
    if p_log.shape != q_log.shape:
        raise ad.ShapeError(f"kl: shapes {p_log.shape} and {q_log.shape} differ")
    lp = ad.clip_min(p_log, LOG_FLOOR)
    lq = ad.clip_min(q_log, LOG_FLOOR)
    return ad.sum(ad.mul(ad.exp(lp), ad.sub(lp, lq)))


def symmetric_kl(p_log, q_log, stop_gradient=True):
    """KL(P||Q) + KL(Q||P); with ``stop_gradient`` each term's reference
    distribution is detached, so gradients reach P only through the term
    where P is the prediction being pulled (and likewise Q).

    Disabling the barrier changes gradients but never the value; that switch
    exists for ablation.
    """
    if stop_gradient:
        return ad.add(kl(ad.detach(p_log), q_log), kl(ad.detach(q_log), p_log))
    return ad.add(kl(p_log, q_log), kl(q_log, p_log))


def _zero():
    return ad.constant(0.0)


def aligned_first_subword_positions(seg_orig, seg_aug, alignment, modified):
    """Positions usable for restricted span consistency.

    A word contributes its first-subword position on both sides when it is
    aligned, unmodified, and identically segmented in both views.
    """
    if alignment is None:
        return [], []
    first_orig = seg_orig.first_subword_positions()
    first_aug = seg_aug.first_subword_positions()
    pos_orig, pos_aug = [], []
    for w, target in enumerate(alignment):
        if target is None or modified[w]:
            continue
        if seg_orig.pieces_of_word(w) != seg_aug.pieces_of_word(target):
            continue
        pos_orig.append(first_orig[w])
        pos_aug.append(first_aug[target])
    return pos_orig, pos_aug


def _restricted(vec_log, positions):
    """Restrict a log-prob vector to positions and renormalize."""
    return ad.log_softmax(ad.gather(vec_log, positions))


def example_consistency(pred, pred_aug, seg=None, seg_aug=None, alignment=None,
                        modified=None, stop_gradient=True):
    """Symmetric-KL agreement between an example and its augmented view.

    Classification compares the label distributions directly.  Span
    extraction compares full position distributions when the two views
    tokenize identically; otherwise both sides are restricted to aligned
    unchanged first-subword positions and renormalized (zero when no
    position survives).  Sequence labeling averages over all words,
    including substituted ones, and requires equal word counts.
    """
    if pred.task != pred_aug.task:
        raise ValueError(f"task mismatch: {pred.task} vs {pred_aug.task}")

    if pred.task == "classification":
        return symmetric_kl(pred.class_log, pred_aug.class_log, stop_gradient)

    if pred.task == "span":
        if seg is not None and seg_aug is not None and seg.pieces == seg_aug.pieces:
            start = symmetric_kl(pred.start_log, pred_aug.start_log, stop_gradient)
            end = symmetric_kl(pred.end_log, pred_aug.end_log, stop_gradient)
            return ad.add(start, end)
        pos, pos_aug = aligned_first_subword_positions(seg, seg_aug, alignment, modified)
        if not pos:
            return _zero()
        start = symmetric_kl(_restricted(pred.start_log, pos),
                             _restricted(pred_aug.start_log, pos_aug), stop_gradient)
        end = symmetric_kl(_restricted(pred.end_log, pos),
                           _restricted(pred_aug.end_log, pos_aug), stop_gradient)
        return ad.add(start, end)

    n = pred.n_words
    if n != pred_aug.n_words:
        raise ValueError(f"word counts differ: {n} vs {pred_aug.n_words}")
    terms = [
        symmetric_kl(_row(pred.word_log, w), _row(pred_aug.word_log, w), stop_gradient)
        for w in range(n)
    ]
    return ad.scale(_sum_nodes(terms), 1.0 / n)


def model_consistency(teacher_pred, student_pred):
    """KL from the frozen teacher's predictions to the student's.

    The teacher side is detached, so no gradient ever reaches teacher
    parameters; both predictions must come from the same input, which keeps
    the distributions aligned for every task.
    """
    if teacher_pred.task != student_pred.task:
        raise ValueError(f"task mismatch: {teacher_pred.task} vs {student_pred.task}")

    if teacher_pred.task == "classification":
        return kl(ad.detach(teacher_pred.class_log), student_pred.class_log)

    if teacher_pred.task == "span":
        if teacher_pred.start_log.shape != student_pred.start_log.shape:
            raise ValueError("teacher and student saw differently tokenized inputs")
        return ad.add(
            kl(ad.detach(teacher_pred.start_log), student_pred.start_log),
            kl(ad.detach(teacher_pred.end_log), student_pred.end_log),
        )

    n = teacher_pred.n_words
    if n != student_pred.n_words:
        raise ValueError(f"word counts differ: {n} vs {student_pred.n_words}")
    terms = [
        kl(ad.detach(_row(teacher_pred.word_log, w)), _row(student_pred.word_log, w))
        for w in range(n)
    ]
    return ad.scale(_sum_nodes(terms), 1.0 / n)


def _row(matrix_log, w):
    n_label = matrix_log.shape[1]
    return ad.reshape(ad.embedding_lookup(matrix_log, [w]), (n_label,))


def _sum_nodes(nodes):
    acc = nodes[0]
    for node in nodes[1:]:
        acc = ad.add(acc, node)
    return acc
