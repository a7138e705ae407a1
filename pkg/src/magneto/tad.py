"""Tag adding & dropping augmentation, and outlier injection for robustness evaluation."""

from __future__ import annotations

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import TadConfig
from .data import TaggedItem, TagVocabulary
from .errors import ContractError


def coefficient_bound(coef: float, count: int) -> int:
    """floor(coef * count), robust to binary representation error (0.29 * 100 -> 29)."""
    return int(math.floor(round(coef * count, 9)))


def _candidates(item: TaggedItem, vocab: TagVocabulary, exclude=()) -> np.ndarray:
    taken = set(item.tags) | set(exclude)
    return np.array([k for k in vocab.ids() if k not in taken], dtype=np.int64)


def tad_add(item: TaggedItem, vocab: TagVocabulary, beta: float, rng: np.random.Generator,
            max_tags: Optional[int] = None) -> TaggedItem:
    """Append between 0 and floor(beta * #unimportant) new unimportant tags.

    The sampled count is cut to the available vocabulary and, when given, to
    the ``max_tags`` slot budget.
    """
    bound = coefficient_bound(beta, len(item.unimportant))
    if bound == 0:
        return item
    count = int(rng.integers(0, bound + 1))
    pool = _candidates(item, vocab)
    count = min(count, len(pool))
    if max_tags is not None:
        count = min(count, max(max_tags - len(item.tags), 0))
    if count == 0:
        return item
    added = rng.choice(pool, size=count, replace=False)
    return item.with_tags(item.tags + [int(t) for t in added], item.labels + [0] * count)


def tad_drop(item: TaggedItem, beta_hat: float, rng: np.random.Generator,
             original_count: Optional[int] = None) -> TaggedItem:
    """Remove between 0 and floor(beta_hat * #unimportant) unimportant tags.

    With ``original_count`` only the first that many slots (the item's own
    tags) are eligible, and the bound is computed on them alone.
    """
    n = len(item.tags) if original_count is None else original_count
    droppable = [i for i in range(n) if not item.labels[i]]
    bound = coefficient_bound(beta_hat, len(droppable))
    if bound == 0:
        return item
    count = int(rng.integers(0, bound + 1))
    if count == 0:
        return item
    drop = set(rng.choice(np.array(droppable), size=count, replace=False).tolist())
    keep = [i for i in range(len(item.tags)) if i not in drop]
    return item.with_tags([item.tags[i] for i in keep], [item.labels[i] for i in keep])


def augment(item: TaggedItem, vocab: TagVocabulary, cfg: TadConfig, rng: np.random.Generator,
            max_tags: Optional[int] = None) -> TaggedItem:
    """Tag adding followed by tag dropping restricted to the item's original tags."""
    n = len(item.tags)
    out = tad_add(item, vocab, cfg.beta, rng, max_tags)
    return tad_drop(out, cfg.beta_hat, rng, original_count=n)


def augment_all(items: Sequence[TaggedItem], vocab: TagVocabulary, cfg: TadConfig,
                rng: np.random.Generator, max_tags: Optional[int] = None) -> List[TaggedItem]:
    if not cfg.enabled:
        return list(items)
    return [augment(it, vocab, cfg, rng, max_tags) for it in items]


def inject_outliers(items: Sequence[TaggedItem], count_per_item: int, vocab: TagVocabulary,
                    rng: np.random.Generator, max_tags: Optional[int] = None
                    ) -> Tuple[List[TaggedItem], List[List[bool]]]:
    """Give each item ``count_per_item`` foreign tags labeled unimportant and flagged as outliers.

    Fewer are added when the vocabulary (or ``max_tags`` slot budget) runs out.
    """
    if count_per_item < 0:
        raise ContractError(f"count_per_item must be >= 0, got {count_per_item}")
    out, flags = [], []
    for item in items:
        n = count_per_item
        if max_tags is not None:
            n = min(n, max(max_tags - len(item.tags), 0))
        pool = _candidates(item, vocab)
        n = min(n, len(pool))
        added = [int(t) for t in rng.choice(pool, size=n, replace=False)] if n else []
        out.append(item.with_tags(item.tags + added, item.labels + [0] * n))
        flags.append([False] * len(item.tags) + [True] * n)
    return out, flags


def inject_irrelevant(items: Sequence[TaggedItem], vocab: TagVocabulary, ratio: float,
                      rng: np.random.Generator, max_tags: Optional[int] = None) -> List[TaggedItem]:
    """Relevance-labeled copies for pre-training: originals 1, 1..ceil(ratio*n) injected tags 0."""
    out = []
    for item in items:
        n = len(item.tags)
        upper = max(1, math.ceil(ratio * n))
        count = int(rng.integers(1, upper + 1))
        if max_tags is not None:
            count = min(count, max(max_tags - n, 0))
        pool = _candidates(item, vocab)
        count = min(count, len(pool))
        added = [int(t) for t in rng.choice(pool, size=count, replace=False)] if count else []
        out.append(item.with_tags(item.tags + added, [1] * n + [0] * count))
    return out
