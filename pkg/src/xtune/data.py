"""Dataset schema and the synthetic multilingual cipher benchmark.

The cipher generator renders the same underlying lemma sequences into
disjoint per-language surface forms (``w3`` -> ``w3§de``), so gold labels are
language-invariant by construction and cross-lingual transfer is measurable
without any real multilingual data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

TASKS = ("classification", "span", "labeling")
CIPHER_SEP = "§"  # "§"

CLASSIFICATION_RULES = ("lemma_majority", "even_lemma_parity")


class SchemaError(ValueError):
    """A dataset record violates the task schema."""


@dataclass
class Example:
    """One task instance; ``words`` is the full model input.

    For span extraction the input is question words followed by context
    words and the answer indices address the full input.  ``label`` /
    ``tags`` / answer indices may be None for unlabeled examples
    (e.g. translations of token-level tasks).
    """

    id: str
    language: str
    task: str
    words: list
    label: int | None = None
    n_label: int | None = None
    question_len: int = 0
    answer_start: int | None = None
    answer_end: int | None = None
    tags: list | None = None

    @property
    def labeled(self):
        if self.task == "classification":
            return self.label is not None
        if self.task == "span":
            return self.answer_start is not None and self.answer_end is not None
        return self.tags is not None

    def gold(self):
        if self.task == "classification":
            return self.label
        if self.task == "span":
            return (self.answer_start, self.answer_end)
        return self.tags

    def validate(self):
        if self.task not in TASKS:
            raise SchemaError(f"example {self.id}: unknown task {self.task!r}")
        if not self.words or any(not w for w in self.words):
            raise SchemaError(f"example {self.id}: empty word list or empty word")
        if self.task == "classification" and self.labeled:
            if self.n_label is None or not 0 <= self.label < self.n_label:
                raise SchemaError(
                    f"example {self.id}: label {self.label} out of range for "
                    f"n_label {self.n_label}"
                )
        if self.task == "span" and self.labeled:
            lo, hi = self.question_len, len(self.words) - 1
            if not (lo <= self.answer_start <= self.answer_end <= hi):
                raise SchemaError(
                    f"example {self.id}: span ({self.answer_start}, {self.answer_end}) "
                    f"outside context [{lo}, {hi}]"
                )
        if self.task == "labeling" and self.labeled:
            if len(self.tags) != len(self.words):
                raise SchemaError(
                    f"example {self.id}: {len(self.tags)} tags for {len(self.words)} words"
                )
            if self.n_label is None or any(not 0 <= t < self.n_label for t in self.tags):
                raise SchemaError(
                    f"example {self.id}: tag out of range for n_label {self.n_label}"
                )
        return self


# ---------------------------------------------------------------------------
# JSON-lines I/O


def _example_from_record(record, task, lineno, path):
    try:
        if task == "classification":
            return Example(
                id=str(record["id"]),
                language=record["lang"],
                task=task,
                words=list(record["words"]),
                label=record.get("label"),
                n_label=record.get("n_label"),
            ).validate()
        if task == "span":
            question = list(record["question"])
            context = list(record["context"])
            start, end = record.get("answer_start"), record.get("answer_end")
            offset = len(question)
            return Example(
                id=str(record["id"]),
                language=record["lang"],
                task=task,
                words=question + context,
                question_len=offset,
                answer_start=None if start is None else offset + int(start),
                answer_end=None if end is None else offset + int(end),
            ).validate()
        return Example(
            id=str(record["id"]),
            language=record["lang"],
            task=task,
            words=list(record["words"]),
            tags=record.get("tags"),
            n_label=record.get("n_label"),
        ).validate()
    except KeyError as missing:
        raise SchemaError(f"{path}:{lineno}: missing field {missing}") from None
    except SchemaError as err:
        raise SchemaError(f"{path}:{lineno}: {err}") from None


def load_jsonl(path, task):
    """Read and validate one example per line; line numbers on every error."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({err.msg})") from None
            corpus.append(_example_from_record(record, task, lineno, path))
    return corpus


def example_to_record(ex):
    if ex.task == "classification":
        return {"id": ex.id, "lang": ex.language, "words": ex.words,
                "label": ex.label, "n_label": ex.n_label}
    if ex.task == "span":
        q = ex.words[: ex.question_len]
        c = ex.words[ex.question_len:]
        rec = {"id": ex.id, "lang": ex.language, "question": q, "context": c}
        if ex.labeled:
            rec["answer_start"] = ex.answer_start - ex.question_len
            rec["answer_end"] = ex.answer_end - ex.question_len
        return rec
    return {"id": ex.id, "lang": ex.language, "words": ex.words,
            "tags": ex.tags, "n_label": ex.n_label}


def save_jsonl(examples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex), sort_keys=True,
                                ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Synthetic cipher benchmark


@dataclass
class SyntheticSpec:
    """Shape of a generated benchmark.

    The labeling rules are functions of lemma ids only, never of surface
    forms, which is what makes gold labels language-invariant.
    """

    task: str = "classification"
    languages: tuple = ("en", "xx", "yy", "zz")
    lemma_count: int = 24
    train_examples: int = 500
    eval_examples_per_language: int = 200
    sentence_len_range: tuple = (4, 8)
    n_tag: int = 3
    classification_rule: str = "lemma_majority"
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if len(self.languages) < 2:
            raise ValueError("need a source language plus at least one target")
        if self.classification_rule not in CLASSIFICATION_RULES:
            raise ValueError(f"unknown classification rule {self.classification_rule!r}")


def surface(lemma_id, language, source_language):
    """Deterministic cipher: ``w3`` in the source, ``w3§xx`` elsewhere."""
    base = f"w{lemma_id}"
    return base if language == source_language else f"{base}{CIPHER_SEP}{language}"


def classification_label(lemmas, rule="lemma_majority", lemma_count=None):
    """Binary label computed from lemma ids.

    lemma_majority: 1 when lemmas from the upper half of the inventory
    outnumber those from the lower half.  even_lemma_parity: parity of the
    count of even-numbered lemmas.
    """
    if rule == "even_lemma_parity":
        return sum(1 for k in lemmas if k % 2 == 0) % 2
    upper = sum(1 for k in lemmas if k >= lemma_count // 2)
    return 1 if upper * 2 > len(lemmas) else 0


def labeling_tags(lemmas, n_tag):
    return [k % n_tag for k in lemmas]


@dataclass
class CipherBenchmark:
    spec: SyntheticSpec
    train: list                    # source-language training corpus
    eval_sets: dict                # language -> parallel eval corpus
    dictionaries: dict             # (src, tgt) -> BilingualDictionary
    store: "TranslationStore"      # translations of every training example
    words: list                    # surface inventory for vocab estimation

    @property
    def source_language(self):
        return self.spec.languages[0]

    @property
    def target_languages(self):
        return tuple(self.spec.languages[1:])


def _sample_lemma_sentence(spec, rng):
    lo, hi = spec.sentence_len_range
    length = int(rng.integers(lo, hi + 1))
    lemma_pool = spec.lemma_count
    if spec.task == "span":
        lemma_pool -= 1  # lemma 0 is reserved as the question trigger
        lemmas = [int(k) + 1 for k in rng.integers(0, lemma_pool, length)]
        pos = int(rng.integers(0, length))
        lemmas.insert(pos, 0)  # trigger; the following word is the answer
        return lemmas
    return [int(k) for k in rng.integers(0, lemma_pool, length)]


def _render(spec, lemmas, language, example_id):
    src = spec.languages[0]
    if spec.task == "span":
        trigger_pos = lemmas.index(0)
        question = [surface(0, language, src)]
        context = [surface(k, language, src) for k in lemmas]
        return Example(
            id=example_id,
            language=language,
            task="span",
            words=question + context,
            question_len=1,
            answer_start=1 + trigger_pos + 1,
            answer_end=1 + trigger_pos + 1,
        ).validate()
    words = [surface(k, language, src) for k in lemmas]
    if spec.task == "classification":
        label = classification_label(lemmas, spec.classification_rule, spec.lemma_count)
        return Example(id=example_id, language=language, task="classification",
                       words=words, label=label, n_label=2).validate()
    return Example(id=example_id, language=language, task="labeling", words=words,
                   tags=labeling_tags(lemmas, spec.n_tag), n_label=spec.n_tag).validate()


def generate_cipher_corpus(spec, rng):
    """Build train/eval corpora, exact dictionaries and a translation store.

    Eval sets are parallel: the same lemma sentences rendered in every
    language, so per-language scores are directly comparable.  The store
    holds exact translations of every training example (labels carried for
    classification only).
    """
    from .augment import BilingualDictionary, TranslationStore

    src = spec.languages[0]
    targets = list(spec.languages[1:])

    train = []
    store = TranslationStore()
    for i in range(spec.train_examples):
        lemmas = _sample_lemma_sentence(spec, rng)
        ex = _render(spec, lemmas, src, f"train-{i:05d}")
        train.append(ex)
        for lang in targets:
            translated = _render(spec, lemmas, lang, ex.id)
            store.add(
                ex.id,
                lang,
                translated.words,
                label=translated.label if spec.task == "classification" else None,
            )

    eval_sets = {lang: [] for lang in spec.languages}
    for i in range(spec.eval_examples_per_language):
        lemmas = _sample_lemma_sentence(spec, rng)
        for lang in spec.languages:
            eval_sets[lang].append(_render(spec, lemmas, lang, f"eval-{i:05d}-{lang}"))

    dictionaries = {}
    all_lemmas = range(spec.lemma_count)
    for lang in targets:
        fwd = {surface(k, src, src): [surface(k, lang, src)] for k in all_lemmas}
        rev = {surface(k, lang, src): [surface(k, src, src)] for k in all_lemmas}
        dictionaries[(src, lang)] = BilingualDictionary(src, lang, fwd)
        dictionaries[(lang, src)] = BilingualDictionary(lang, src, rev)

    words = [surface(k, lang, src) for k in all_lemmas for lang in spec.languages]
    return CipherBenchmark(spec=spec, train=train, eval_sets=eval_sets,
                           dictionaries=dictionaries, store=store, words=words)
