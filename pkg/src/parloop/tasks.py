"""Synthetic token tasks for training demos and convergence tests.

Each task yields (tokens, mask) batches where mask[j] marks positions whose
next-token prediction should count toward the loss; None means every
position counts. Sampling is driven by an explicit Rng so a seed pins the
whole data stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError
from .tensor import Rng, Tensor, cross_entropy


@dataclass
class TaskSpec:
    name: str
    vocab: int
    seq_len: int
    sample: Callable  # (rng: Rng, batch: int) -> (tokens [b, n], mask [b, n] | None)
    params: dict = field(default_factory=dict)


def _copy_like(src_len: int, symbols: int, reverse: bool):
    vocab = symbols + 1
    sep = symbols
    n = 2 * src_len + 1

    def sample(rng: Rng, batch: int):
        src = rng.integers(0, symbols, (batch, src_len))
        tgt = src[:, ::-1] if reverse else src
        tokens = np.concatenate(
            [src, np.full((batch, 1), sep, dtype=src.dtype), tgt], axis=1)
        mask = np.zeros((batch, n), dtype=bool)
        mask[:, src_len:n - 1] = True  # predictions of the echoed half
        return tokens, mask

    return vocab, n, sample


def make_task(name: str, **kw) -> TaskSpec:
    """Task factory.

    copy / reverse: src_len (default 8), symbols (default 16); the model
      sees the source, a separator, then must emit the source again
      (reversed for `reverse`). Only the echoed half is scored.
    modular_add: modulus (default 23), triples (default 6); sequences of
      (a, b, (a+b) mod m) triples, scored on predicting each sum.
    char_lm: seq_len (default 64); byte-level language modeling over an
      embedded proverb corpus, scored everywhere.
    """
    if name in ("copy", "reverse"):
        src_len = kw.pop("src_len", 8)
        symbols = kw.pop("symbols", 16)
        _reject_extras(name, kw)
        if src_len < 1 or symbols < 2:
            raise ConfigError("copy/reverse need src_len >= 1 and symbols >= 2")
        vocab, n, sample = _copy_like(src_len, symbols, reverse=(name == "reverse"))
        return TaskSpec(name, vocab, n, sample,
                        params={"src_len": src_len, "symbols": symbols})
    if name == "modular_add":
        modulus = kw.pop("modulus", 23)
        triples = kw.pop("triples", 6)
        _reject_extras(name, kw)
        if modulus < 2 or triples < 1:
            raise ConfigError("modular_add needs modulus >= 2 and triples >= 1")
        n = 3 * triples

        def sample(rng: Rng, batch: int):
            a = rng.integers(0, modulus, (batch, triples))
            b = rng.integers(0, modulus, (batch, triples))
            tokens = np.stack([a, b, (a + b) % modulus], axis=2).reshape(batch, n)
            mask = np.zeros((batch, n), dtype=bool)
            mask[:, 1::3] = True  # the position holding b predicts the sum
            return tokens, mask

        return TaskSpec(name, modulus, n, sample,
                        params={"modulus": modulus, "triples": triples})
    if name == "char_lm":
        seq_len = kw.pop("seq_len", 64)
        _reject_extras(name, kw)
        if seq_len < 2:
            raise ConfigError("char_lm needs seq_len >= 2")
        corpus = np.frombuffer(CORPUS.encode("utf-8"), dtype=np.uint8)
        if seq_len >= len(corpus):
            raise ConfigError(f"seq_len {seq_len} exceeds corpus size {len(corpus)}")

        def sample(rng: Rng, batch: int):
            starts = rng.integers(0, len(corpus) - seq_len, (batch,))
            tokens = np.stack([corpus[s:s + seq_len] for s in starts]).astype(np.int64)
            return tokens, None

        return TaskSpec(name, 256, seq_len, sample, params={"seq_len": seq_len})
    raise ConfigError(f"unknown task {name!r}")


def _reject_extras(name: str, kw: dict) -> None:
    if kw:
        raise ConfigError(f"unknown options for task {name!r}: {sorted(kw)}")


def cross_entropy_loss(logits: Tensor, tokens: np.ndarray,
                       mask: Optional[np.ndarray] = None) -> Tensor:
    """Next-token loss: row j of logits is scored against token j+1.

    mask, when given, is [b, n] over input positions; the final position
    has no target and never contributes.
    """
    tokens = np.asarray(tokens)
    targets = tokens[:, 1:]
    use = None if mask is None else np.asarray(mask, dtype=bool)[:, :-1]
    return cross_entropy(logits[:, :-1, :], targets, use)


def eval_accuracy(forward_fn, task: TaskSpec, seed: int, batches: int = 4,
                  batch_size: int = 32) -> float:
    """Teacher-forced argmax accuracy over the task's scored positions."""
    rng = Rng(seed)
    hit = 0
    total = 0
    for _ in range(batches):
        tokens, mask = task.sample(rng, batch_size)
        logits = forward_fn(tokens).data
        pred = np.argmax(logits[:, :-1, :], axis=-1)
        want = tokens[:, 1:]
        use = np.ones_like(want, dtype=bool) if mask is None else mask[:, :-1]
        hit += int((pred[use] == want[use]).sum())
        total += int(use.sum())
    return hit / total


# Plain proverb text for the byte-level task. Repetitive on purpose: small
# models should be able to squeeze the entropy quickly.
CORPUS = (
    "a stitch in time saves nine. a watched pot never boils. "
    "a rolling stone gathers no moss. actions speak louder than words. "
    "all that glitters is not gold. an apple a day keeps the doctor away. "
    "better late than never. birds of a feather flock together. "
    "every cloud has a silver lining. fortune favours the bold. "
    "great minds think alike. haste makes waste. honesty is the best policy. "
    "it never rains but it pours. look before you leap. "
    "many hands make light work. necessity is the mother of invention. "
    "no smoke without fire. practice makes perfect. "
    "slow and steady wins the race. strike while the iron is hot. "
    "the early bird catches the worm. the pen is mightier than the sword. "
    "there is no place like home. too many cooks spoil the broth. "
    "two heads are better than one. well begun is half done. "
    "when in rome do as the romans do. where there is a will there is a way. "
    "you cannot judge a book by its cover. "
) * 4
