"""A deliberately tiny trainable encoder plus the three task heads.

The encoder is one embedding-sum + mixing layer: enough to carry gradients
through the consistency losses without confounding the mechanism checks with
backbone capacity.  All heads emit log-probability distributions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

TASKS = ("classification", "span", "labeling")
POOLINGS = ("first_subword", "average")

INIT_SCALE = 0.02
CHECKPOINT_HEADER = "xtune-params v1"


class ModelParams:
    """Encoder + one task head, all as autodiff leaf tensors."""

    def __init__(self, task, vocab_size, dim, max_len, n_label=None, rng=None):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        if task in ("classification", "labeling") and not n_label:
            raise ValueError(f"{task} model needs n_label")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.task = task
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_len = max_len
        self.n_label = n_label

        def w(*shape):
            return ad.Tensor(rng.normal(0.0, INIT_SCALE, shape))

        self.tensors = {
            "embeddings": w(vocab_size, dim),
            "positions": w(max_len, dim),
            "mix_weight": w(dim, dim),
            "mix_bias": ad.Tensor(np.zeros(dim)),
        }
        if task == "span":
            self.tensors["start_weight"] = w(dim, 1)
            self.tensors["end_weight"] = w(dim, 1)
        else:
            self.tensors["head_weight"] = w(dim, n_label)
            self.tensors["head_bias"] = ad.Tensor(np.zeros(n_label))

    def __getitem__(self, name):
        return self.tensors[name]

    def parameters(self):
        return list(self.tensors.values())

    def zero_grads(self):
        ad.zero_grads(self.parameters())

    def copy(self):
        """Deep copy of all buffers (used to freeze a teacher snapshot)."""
        dup = ModelParams.__new__(ModelParams)
        dup.task = self.task
        dup.vocab_size = self.vocab_size
        dup.dim = self.dim
        dup.max_len = self.max_len
        dup.n_label = self.n_label
        dup.tensors = {k: ad.Tensor(t.data.copy()) for k, t in self.tensors.items()}
        return dup

    def same_architecture(self, other):
        return (
            self.task == other.task
            and self.vocab_size == other.vocab_size
            and self.dim == other.dim
            and self.max_len == other.max_len
            and self.n_label == other.n_label
        )


@dataclass
class Prediction:
    """Log-probability outputs of one forward pass."""

    task: str
    class_log: ad.Tensor | None = None  # (n_label,)
    start_log: ad.Tensor | None = None  # (n_subword,)
    end_log: ad.Tensor | None = None    # (n_subword,)
    word_log: ad.Tensor | None = None   # (n_word, n_label)

    @property
    def n_words(self):
        return self.word_log.shape[0]


def encode(params, segmentation, noise_sigma=0.0, rng=None, noise=None):
    """Hidden states tanh((E[ids] + P[:n] + eps) W + b), one row per subword.

    ``noise`` overrides the internal Gaussian draw so that two forward passes
    can share one realization (teacher/student on the same noisy input).
    """
    ids = segmentation.ids
    n = len(ids)
    if n > params.max_len:
        raise ValueError(f"input of {n} subwords exceeds max_len {params.max_len}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    x = ad.add(
        ad.embedding_lookup(params["embeddings"], ids),
        ad.embedding_lookup(params["positions"], list(range(n))),
    )
    if noise is None and noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        noise = rng.normal(0.0, noise_sigma, (n, params.dim))
    if noise is not None:
        x = ad.add(x, ad.constant(noise))
    return ad.tanh(ad.add_rowvec(ad.matmul(x, params["mix_weight"]), params["mix_bias"]))


def _word_representations(params, hidden, segmentation, pooling):
    if pooling == "first_subword":
        return ad.embedding_lookup(hidden, segmentation.first_subword_positions())
    # average: constant pooling matrix, one row per word
    n_words = segmentation.n_words
    pool = np.zeros((n_words, segmentation.n_pieces))
    for pos, w in enumerate(segmentation.word_index):
        pool[w, pos] = 1.0
    pool /= pool.sum(axis=1, keepdims=True)
    return ad.matmul(ad.constant(pool), hidden)


def predict(params, segmentation, pooling=None, noise_sigma=0.0, rng=None, noise=None):
    """Task-head forward pass returning normalized log-prob distributions."""
    if pooling is not None and params.task != "labeling":
        raise ValueError(f"pooling is only meaningful for labeling, not {params.task}")
    hidden = encode(params, segmentation, noise_sigma=noise_sigma, rng=rng, noise=noise)

    if params.task == "classification":
        pooled = ad.reshape(ad.mean_rows(hidden), (1, params.dim))
        logits = ad.add_rowvec(ad.matmul(pooled, params["head_weight"]), params["head_bias"])
        return Prediction("classification",
                          class_log=ad.log_softmax(ad.reshape(logits, (params.n_label,))))

    if params.task == "span":
        n = segmentation.n_pieces
        start = ad.log_softmax(ad.reshape(ad.matmul(hidden, params["start_weight"]), (n,)))
        end = ad.log_softmax(ad.reshape(ad.matmul(hidden, params["end_weight"]), (n,)))
        return Prediction("span", start_log=start, end_log=end)

    reps = _word_representations(params, hidden, segmentation, pooling or "first_subword")
    logits = ad.add_rowvec(ad.matmul(reps, params["head_weight"]), params["head_bias"])
    return Prediction("labeling", word_log=ad.log_softmax(logits, axis=1))


def task_loss(prediction, gold):
    """Negative log-likelihood for the task's gold payload.

    gold: label id (classification), (start, end) subword indices (span),
    or a per-word tag id sequence (labeling).
    """
    if prediction.task == "classification":
        label = int(gold)
        n = prediction.class_log.shape[0]
        if not 0 <= label < n:
            raise ValueError(f"label {label} out of range for {n} classes")
        return ad.scale(ad.sum(ad.gather(prediction.class_log, [label])), -1.0)

    if prediction.task == "span":
        start, end = int(gold[0]), int(gold[1])
        n = prediction.start_log.shape[0]
        if not (0 <= start < n and 0 <= end < n):
            raise ValueError(f"span ({start}, {end}) out of range for {n} positions")
        picked = ad.add(
            ad.sum(ad.gather(prediction.start_log, [start])),
            ad.sum(ad.gather(prediction.end_log, [end])),
        )
        return ad.scale(picked, -1.0)

    tags = [int(t) for t in gold]
    n_words, n_label = prediction.word_log.shape
    if len(tags) != n_words:
        raise ValueError(f"{len(tags)} tags for {n_words} words")
    onehot = np.zeros((n_words, n_label))
    for w, t in enumerate(tags):
        if not 0 <= t < n_label:
            raise ValueError(f"tag {t} out of range for {n_label} classes")
        onehot[w, t] = 1.0
    picked = ad.sum(ad.mul(prediction.word_log, ad.constant(onehot)))
    return ad.scale(picked, -1.0 / n_words)


# ---------------------------------------------------------------------------
# Checkpoints: versioned plain-text dump, byte-stable across identical runs.


def save_params(params, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CHECKPOINT_HEADER + "\n")
        meta = {
            "task": params.task,
            "vocab_size": params.vocab_size,
            "dim": params.dim,
            "max_len": params.max_len,
            "n_label": params.n_label,
        }
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for name, tensor in params.tensors.items():
            dims = " ".join(str(d) for d in tensor.data.shape)
            fh.write(f"tensor {name} {dims}\n")
            fh.write(" ".join(v.hex() for v in tensor.data.reshape(-1)) + "\n")


def load_params(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != CHECKPOINT_HEADER:
            raise ValueError(f"{path}: unknown checkpoint header {header!r}")
        meta = json.loads(fh.readline())
        params = ModelParams(
            meta["task"], meta["vocab_size"], meta["dim"], meta["max_len"],
            n_label=meta["n_label"],
        )
        for line in fh:
            kind, name, *dims = line.split()
            if kind != "tensor":
                raise ValueError(f"{path}: malformed tensor record {line!r}")
            shape = tuple(int(d) for d in dims)
            values = np.array([float.fromhex(v) for v in fh.readline().split()])
            params.tensors[name] = ad.Tensor(values.reshape(shape))
    return params
