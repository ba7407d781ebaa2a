"""Two-stage fine-tuning with pair- and teacher-consistency regularization.

Stage 1 minimizes task loss plus pair consistency against the stage-1
augmentation and freezes the result as the teacher.  Stage 2 trains a fresh
student on the augmented corpus with task loss (labeled items only), weighted
pair consistency against on-the-fly views, and weighted KL to the frozen
teacher.  One master seed feeds named substreams so ablation modes share
data order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import tokenizer as tok
from .augment import (
    AugmentationStrategy,
    AugmentedCorpus,
    AugmentedExample,
    base_id,
    build_augmented_corpus,
    code_switch,
    subword_resample,
    validate_strategy,
)
from .consistency import example_consistency, model_consistency
from .data import Example
from .model import ModelParams, predict, task_loss

SETTINGS = ("cross-lingual-transfer", "translate-train-all")
MODES = ("baseline", "r1-only", "r2-only", "xtune")

# Best published hyper-parameters per benchmark dataset and setting:
# (stage-1 strategy, corpus strategy, pair strategy, pair weight, teacher weight).
PRESETS = {
    ("xnli", "cross-lingual-transfer"): ("CS", "CS", "CS", 5.0, 5.0),
    ("pawsx", "cross-lingual-transfer"): ("CS", "CS", "CS", 5.0, 2.0),
    ("pos", "cross-lingual-transfer"): ("SS", "SS", "SS", 5.0, 0.3),
    ("ner", "cross-lingual-transfer"): ("SS", "SS", "SS", 5.0, 5.0),
    ("xquad", "cross-lingual-transfer"): ("CS", "SS", "SS", 5.0, 5.0),
    ("mlqa", "cross-lingual-transfer"): ("CS", "SS", "SS", 5.0, 5.0),
    ("tydiqa", "cross-lingual-transfer"): ("SS", "SS", "SS", 5.0, 5.0),
    ("xnli", "translate-train-all"): ("MT", "MT", "MT", 5.0, 1.0),
    ("pawsx", "translate-train-all"): ("MT", "MT", "MT", 5.0, 1.0),
    ("pos", "translate-train-all"): ("SS", "MT", "SS", 5.0, 0.3),
    ("ner", "translate-train-all"): ("SS", "MT", "SS", 5.0, 1.0),
    ("xquad", "translate-train-all"): ("CS", "MT", "SS", 5.0, 0.1),
    ("mlqa", "translate-train-all"): ("CS", "MT", "SS", 5.0, 0.5),
    ("tydiqa", "translate-train-all"): ("SS", "MT", "SS", 5.0, 0.3),
}

PRESET_DATASETS = ("xnli", "pawsx", "pos", "ner", "xquad", "mlqa", "tydiqa")

# task kind and labeling pooling per benchmark dataset
PRESET_TASKS = {
    "xnli": ("classification", None),
    "pawsx": ("classification", None),
    "pos": ("labeling", "average"),
    "ner": ("labeling", "first_subword"),
    "xquad": ("span", None),
    "mlqa": ("span", None),
    "tydiqa": ("span", None),
}


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or broken invariants)."""


def substream(seed, label):
    """Named, independent random stream derived from one master seed."""
    salt = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([int(seed), salt]))


@dataclass
class TrainConfig:
    task: str = "classification"
    setting: str = "cross-lingual-transfer"
    stage1_strategy: str = "CS"
    corpus_strategy: str = "CS"
    pair_strategy: str = "CS"
    example_weight: float = 5.0      # stage-2 pair-consistency weight
    model_weight: float = 5.0        # stage-2 teacher-consistency weight
    stage1_pair_weight: float = 1.0
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    warmup_frac: float = 0.1
    seed: int = 0
    dim: int = 16
    max_len: int = 64
    n_label: int | None = None
    pooling: str = "first_subword"
    noise_sigma: float = 0.01
    cs_word_ratio: float = 0.3
    ss_alpha: float = 0.2
    mt_languages: tuple = ()
    stage1_corpus: str = "source"        # or "augmented"
    warm_start_student: bool = False
    pair_translations: bool = False      # pair items with stored translations for MT pairs

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.example_weight < 0 or self.model_weight < 0:
            raise ValueError("consistency weights must be >= 0")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in [0, 1)")
        if self.stage1_corpus not in ("source", "augmented"):
            raise ValueError(f"unknown stage1_corpus {self.stage1_corpus!r}")
        self.mt_languages = tuple(self.mt_languages)

    def strategy(self, kind):
        return AugmentationStrategy(
            kind=kind,
            alpha=self.ss_alpha,
            sigma=self.noise_sigma,
            word_ratio=self.cs_word_ratio,
            languages=self.mt_languages,
        )

    @classmethod
    def from_preset(cls, dataset, setting, **overrides):
        stage1, corpus, pair, w_pair, w_model = PRESETS[(dataset, setting)]
        task, pooling = PRESET_TASKS[dataset]
        base = dict(
            task=task,
            setting=setting,
            stage1_strategy=stage1,
            corpus_strategy=corpus,
            pair_strategy=pair,
            example_weight=w_pair,
            model_weight=w_model,
            pooling=pooling or "first_subword",
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class Resources:
    """Shared immutable inputs for a training run."""

    vocab: tok.UnigramVocab
    dictionaries: list = field(default_factory=list)
    store: object = None


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, tensors):
        return cls(
            m={k: np.zeros_like(t.data) for k, t in tensors.items()},
            v={k: np.zeros_like(t.data) for k, t in tensors.items()},
        )


def adam_step(values, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update (with bias correction) applied in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, value in values.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        value -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_at(step, total, base, warmup_frac):
    """Linear ramp 0 -> base over the warmup steps, then linear decay to 0."""
    warmup = warmup_frac * total
    if warmup < 1.0:
        raise ValueError("warmup_frac * total must be >= 1")
    if step <= warmup:
        return base * step / warmup
    return base * (total - step) / (total - warmup)


# ---------------------------------------------------------------------------
# Batch items


def _materialize(item, vocab, cfg, noise_rng):
    """(example, segmentation, encode-noise) for a corpus item.

    A subword-resampled item carries its pinned segmentation; a noise-marked
    item draws a fresh Gaussian perturbation, shared by the teacher forward
    so that both models see the identical input.
    """
    if isinstance(item, AugmentedExample):
        ex = item.example
        seg = item.segmentation or tok.viterbi_segment_words(vocab, ex.words)
        noise = None
        if item.strategy == "GN" and cfg.noise_sigma > 0:
            noise = noise_rng.normal(0.0, cfg.noise_sigma, (seg.n_pieces, cfg.dim))
        return ex, seg, noise
    return item, tok.viterbi_segment_words(vocab, item.words), None


def _labeled(item):
    ex = item.example if isinstance(item, AugmentedExample) else item
    available = item.label_available if isinstance(item, AugmentedExample) else True
    return available and ex.labeled


def _pair_view(ex, seg, kind, cfg, res, rng):
    """On-the-fly augmented view of one example for pair consistency.

    Returns (view example, view segmentation, view encode-noise, alignment,
    modified flags) or None when no view exists (e.g. no translation).
    """
    if kind == "SS":
        aug = subword_resample(ex, res.vocab, cfg.ss_alpha, rng)
        return aug.example, aug.segmentation, None, aug.alignment, aug.modified
    if kind == "CS":
        aug = code_switch(ex, res.dictionaries, cfg.cs_word_ratio, rng)
        seg2 = tok.viterbi_segment_words(res.vocab, aug.example.words)
        return aug.example, seg2, None, aug.alignment, aug.modified
    if kind == "GN":
        noise = rng.normal(0.0, cfg.noise_sigma, (seg.n_pieces, cfg.dim))
        return ex, seg, noise, list(range(len(ex.words))), [False] * len(ex.words)
    # MT: render the same underlying example in another language
    langs = [l for l in res.store.languages_for(base_id(ex.id)) if l != ex.language]
    if not langs:
        return None
    lang = langs[int(rng.integers(0, len(langs)))]
    words, _label = res.store.get(base_id(ex.id), lang)
    view = Example(id=f"{ex.id}/view", language=lang, task=ex.task, words=list(words),
                   n_label=ex.n_label, question_len=ex.question_len)
    return view, tok.viterbi_segment_words(res.vocab, words), None, None, None


def _mean(nodes):
    acc = nodes[0]
    for node in nodes[1:]:
        acc = ad.add(acc, node)
    return ad.scale(acc, 1.0 / len(nodes))


def run_stage(items, params, cfg, res, stage_label, pair_strategy=None, pair_weight=0.0,
              teacher=None, teacher_weight=0.0, pairing=None):
    """Run one optimization stage over a fixed item list.

    Every per-batch loss is mean task NLL over labeled items, plus
    ``pair_weight`` times the mean pair-consistency over views, plus
    ``teacher_weight`` times the mean teacher KL over all items.  Returns a
    per-step trace of the separate components.
    """
    if teacher is not None and not params.same_architecture(teacher):
        raise ValueError("teacher and student architectures differ")
    use_pairs = pair_strategy is not None and pair_weight != 0.0
    use_teacher = teacher is not None and teacher_weight != 0.0
    if use_pairs:
        validate_strategy(cfg.task, "pair", pair_strategy)

    batch_rng = substream(cfg.seed, f"{stage_label}/batching")
    view_rng = substream(cfg.seed, f"{stage_label}/views")
    noise_rng = substream(cfg.seed, f"{stage_label}/noise")

    partner_of = {}
    if pairing is not None and cfg.pair_translations:
        n_orig = len(pairing.originals)
        for orig, aug in pairing.pairs:
            partner_of.setdefault(orig, []).append(n_orig + aug)
            partner_of.setdefault(n_orig + aug, []).append(orig)

    n = len(items)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    # very short runs: keep at least one warmup step
    warmup_frac = max(cfg.warmup_frac, 1.0 / total_steps)
    state = OptimizerState.for_params(params.tensors)
    pooling = cfg.pooling if cfg.task == "labeling" else None
    trace = []
    step = 0

    for _epoch in range(cfg.epochs):
        order = batch_rng.permutation(n)
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size: (b + 1) * cfg.batch_size]
            step += 1
            lr = lr_at(step, total_steps, cfg.learning_rate, warmup_frac)
            params.zero_grads()

            task_terms, pair_terms, teacher_terms = [], [], []
            n_labeled = n_unlabeled = 0
            for i in batch:
                item = items[int(i)]
                ex, seg, noise = _materialize(item, res.vocab, cfg, noise_rng)
                pred = predict(params, seg, pooling=pooling, noise=noise)
                if _labeled(item):
                    task_terms.append(task_loss(pred, _gold_for(ex, seg)))
                    n_labeled += 1
                else:
                    n_unlabeled += 1

                if use_pairs:
                    if partner_of and pair_strategy == "MT":
                        options = partner_of.get(int(i), [])
                        view = None
                        if options:
                            j = options[int(view_rng.integers(0, len(options)))]
                            vex, vseg, vnoise = _materialize(items[j], res.vocab, cfg, noise_rng)
                            view = (vex, vseg, vnoise, None, None)
                    else:
                        view = _pair_view(ex, seg, pair_strategy, cfg, res, view_rng)
                    if view is not None:
                        vex, vseg, vnoise, alignment, modified = view
                        vpred = predict(params, vseg, pooling=pooling, noise=vnoise)
                        pair_terms.append(example_consistency(
                            pred, vpred, seg=seg, seg_aug=vseg,
                            alignment=alignment, modified=modified))

                if use_teacher:
                    tpred = predict(teacher, seg, pooling=pooling, noise=noise)
                    teacher_terms.append(model_consistency(tpred, pred))

            parts = {"task": 0.0, "example_consistency": 0.0, "model_consistency": 0.0}
            total = None
            if task_terms:
                node = _mean(task_terms)
                parts["task"] = node.item()
                total = node
            if pair_terms:
                node = _mean(pair_terms)
                parts["example_consistency"] = node.item()
                weighted = ad.scale(node, pair_weight)
                total = weighted if total is None else ad.add(total, weighted)
            if teacher_terms:
                node = _mean(teacher_terms)
                parts["model_consistency"] = node.item()
                weighted = ad.scale(node, teacher_weight)
                total = weighted if total is None else ad.add(total, weighted)

            total_value = 0.0
            if total is not None:
                total_value = total.item()
                if not math.isfinite(total_value):
                    raise TrainingError(
                        f"{stage_label}: non-finite loss {total_value} at step {step} "
                        f"(components {parts})"
                    )
                ad.backward(total)
                adam_step({k: t.data for k, t in params.tensors.items()},
                          {k: t.grad for k, t in params.tensors.items()},
                          state, lr)

            trace.append({
                "step": step,
                "lr": lr,
                "total": total_value,
                "task": parts["task"],
                "example_consistency": parts["example_consistency"],
                "model_consistency": parts["model_consistency"],
                "labeled": n_labeled,
                "unlabeled": n_unlabeled,
                "pairs": len(pair_terms),
            })
    return trace


def _gold_for(ex, seg):
    """Task gold in the coordinates the loss expects.

    Span answers are word indices; the loss wants first-subword positions of
    those words under the current segmentation.
    """
    if ex.task == "span":
        first = seg.first_subword_positions()
        return (first[ex.answer_start], first[ex.answer_end])
    return ex.gold()


# ---------------------------------------------------------------------------
# Stages and modes


def init_params(cfg, res):
    return ModelParams(cfg.task, len(res.vocab), cfg.dim, cfg.max_len,
                       n_label=cfg.n_label, rng=substream(cfg.seed, "init"))


def _build_corpus(train, cfg, res, stream_label):
    return build_augmented_corpus(
        train, cfg.strategy(cfg.corpus_strategy), substream(cfg.seed, stream_label),
        vocab=res.vocab, dictionaries=res.dictionaries, store=res.store,
    )


def stage1_train(train, cfg, res):
    """First stage: task loss + pair consistency against the stage-1 strategy."""
    validate_strategy(cfg.task, "pair", cfg.stage1_strategy)
    items = list(train)
    if cfg.stage1_corpus == "augmented":
        items = _build_corpus(train, cfg, res, "stage1-corpus").items
    params = init_params(cfg, res)
    trace = run_stage(items, params, cfg, res, "stage1",
                      pair_strategy=cfg.stage1_strategy,
                      pair_weight=cfg.stage1_pair_weight)
    return params, trace


def stage2_train(corpus, teacher, cfg, res):
    """Second stage: task + weighted pair and teacher consistency over D_A."""
    validate_strategy(cfg.task, "pair", cfg.pair_strategy)
    student = teacher.copy() if cfg.warm_start_student else init_params(cfg, res)
    trace = run_stage(corpus.items, student, cfg, res, "main",
                      pair_strategy=cfg.pair_strategy, pair_weight=cfg.example_weight,
                      teacher=teacher, teacher_weight=cfg.model_weight, pairing=corpus)
    return student, trace


def fine_tune(items, cfg, res, stage_label="main"):
    """Conventional fine-tuning on the labeled portion of an item list."""
    labeled = [it for it in items if _labeled(it)]
    params = init_params(cfg, res)
    trace = run_stage(labeled, params, cfg, res, stage_label)
    return params, trace


@dataclass
class TrainResult:
    mode: str
    student: ModelParams
    teacher: ModelParams | None
    traces: dict
    manifest: dict


def _manifest(cfg, mode, traces, corpus_sizes, input_digests=None):
    return {
        "format": "xtune-run v1",
        "mode": mode,
        "seed": cfg.seed,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in asdict(cfg).items()},
        "corpus_sizes": corpus_sizes,
        "input_digests": input_digests or {},
        "traces": traces,
    }


def xtune_train(train, cfg, res, input_digests=None):
    """Full two-stage run: teacher from stage 1, student from stage 2."""
    teacher, trace1 = stage1_train(train, cfg, res)
    corpus = _build_corpus(train, cfg, res, "corpus")
    student, trace2 = stage2_train(corpus, teacher, cfg, res)
    traces = {"stage1": trace1, "stage2": trace2}
    sizes = {"train": len(train), "augmented_corpus": len(corpus)}
    return TrainResult("xtune", student, teacher, traces,
                       _manifest(cfg, "xtune", traces, sizes, input_digests))


def train_with_mode(mode, train, cfg, res, input_digests=None):
    """The four training modes behind the command-line ``--mode`` flag."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    if mode == "xtune":
        return xtune_train(train, cfg, res, input_digests)

    translate_all = cfg.setting == "translate-train-all"
    if mode == "baseline":
        items = _build_corpus(train, cfg, res, "corpus").items if translate_all else list(train)
        params, trace = fine_tune(items, cfg, res)
        traces = {"stage2": trace}
        sizes = {"train": len(train), "items": len(items)}
        return TrainResult(mode, params, None, traces,
                           _manifest(cfg, mode, traces, sizes, input_digests))

    if mode == "r1-only":
        validate_strategy(cfg.task, "pair", cfg.pair_strategy)
        items = _build_corpus(train, cfg, res, "corpus").items if translate_all else list(train)
        params = init_params(cfg, res)
        trace = run_stage(items, params, cfg, res, "main",
                          pair_strategy=cfg.pair_strategy, pair_weight=cfg.example_weight)
        traces = {"stage2": trace}
        sizes = {"train": len(train), "items": len(items)}
        return TrainResult(mode, params, None, traces,
                           _manifest(cfg, mode, traces, sizes, input_digests))

    # r2-only: plain first stage, teacher consistency only in the second
    teacher, trace1 = fine_tune(list(train), cfg, res, stage_label="stage1")
    corpus = _build_corpus(train, cfg, res, "corpus")
    student = init_params(cfg, res)
    trace2 = run_stage(corpus.items, student, cfg, res, "main",
                       teacher=teacher, teacher_weight=cfg.model_weight, pairing=corpus)
    traces = {"stage1": trace1, "stage2": trace2}
    sizes = {"train": len(train), "augmented_corpus": len(corpus)}
    return TrainResult(mode, student, teacher, traces,
                       _manifest(cfg, mode, traces, sizes, input_digests))
