"""Turn task examples into model batches with training targets."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .corpus import Tokenizer, collate
from .sampling import IGNORE_LABEL, MaskingPolicy, SeededRng, mask_tokens


@dataclass
class Features:
    fmt: str
    batch: object
    targets: dict = field(default_factory=dict)
    num_choices: int | None = None
    word_ids: list = field(default_factory=list)
    word_offsets: list = field(default_factory=list)


def word_offsets(text):
    """(start, end) character offsets of whitespace-separated words."""
    return [(m.start(), m.end()) for m in re.finditer(r"\S+", text)]


def _char_to_word(offsets, char):
    for i, (s, e) in enumerate(offsets):
        if s <= char < e:
            return i
    return None


def encode_examples(fmt, examples, tokenizer: Tokenizer, max_length, label_set=None,
                    masking: MaskingPolicy | None = None, rng: SeededRng | None = None) -> Features:
    if fmt == "classification":
        encs = [tokenizer.encode(ex.text_a, pair=ex.text_b, max_length=max_length) if ex.text_b is not None
                else tokenizer.encode(ex.text_a, max_length=max_length) for ex in examples]
        labels = np.array([label_set.index(ex.label) for ex in examples], dtype=np.int64)
        return Features(fmt, collate(encs, tokenizer.pad_id), {"labels": labels})

    if fmt == "multiple_choice":
        n = len(examples[0].choices)
        if any(len(ex.choices) != n for ex in examples):
            raise ValueError("all multiple-choice examples in a batch need the same number of choices")
        encs = []
        for ex in examples:
            first = f"{ex.context} {ex.question}".strip()
            encs.extend(tokenizer.encode(first, pair=c, max_length=max_length) for c in ex.choices)
        labels = np.array([ex.answer_index for ex in examples], dtype=np.int64)
        return Features(fmt, collate(encs, tokenizer.pad_id), {"labels": labels}, num_choices=n)

    if fmt == "span_extraction":
        encs, starts, ends, offsets = [], [], [], []
        for ex in examples:
            offs = word_offsets(ex.context)
            enc = tokenizer.encode(ex.question, pair=ex.context, max_length=max_length)
            s = e = 0
            a = ex.answers[0]
            ws = _char_to_word(offs, a.start_char)
            we = _char_to_word(offs, a.start_char + max(len(a.text), 1) - 1)
            if ws is not None and we is not None and we < len(enc.word_starts):
                s = enc.word_starts[ws]
                e = (enc.word_starts[we + 1] - 1 if we + 1 < len(enc.word_starts)
                     else len(enc.ids) - 2)
            encs.append(enc)
            starts.append(s)
            ends.append(e)
            offsets.append(offs)
        return Features(fmt, collate(encs, tokenizer.pad_id),
                        {"start": np.array(starts, dtype=np.int64), "end": np.array(ends, dtype=np.int64)},
                        word_ids=[enc.word_ids for enc in encs], word_offsets=offsets)

    if fmt == "tagging":
        encs = [tokenizer.encode(list(ex.words), max_length=max_length) for ex in examples]
        W = max(len(ex.words) for ex in examples)
        labels = np.full((len(examples), W), IGNORE_LABEL, dtype=np.int64)
        for b, (ex, enc) in enumerate(zip(examples, encs)):
            k = len(enc.word_starts)
            labels[b, :k] = [label_set.index(t) for t in ex.tags[:k]]
        batch = collate(encs, tokenizer.pad_id)
        return Features(fmt, batch, {"labels": labels})

    if fmt == "mlm":
        encs = [tokenizer.encode(ex.text, max_length=max_length) for ex in examples]
        batch = collate(encs, tokenizer.pad_id)
        ids = batch.input_ids
        special = np.flatnonzero(np.isin(ids.reshape(-1), list(tokenizer.special_ids)))
        corrupted, labels = mask_tokens(ids, masking or MaskingPolicy(), rng, special, tokenizer.mask_id,
                                        len(tokenizer), tokenizer.special_ids)
        batch.input_ids = corrupted
        return Features(fmt, batch, {"labels": labels})

    if fmt == "retrieval":
        encs = [tokenizer.encode(ex.sentence, max_length=max_length) for ex in examples]
        return Features(fmt, collate(encs, tokenizer.pad_id))

    raise ValueError(f"unknown format {fmt!r}")


def encode_sentences(sentences, tokenizer: Tokenizer, max_length):
    return collate([tokenizer.encode(s, max_length=max_length) for s in sentences], tokenizer.pad_id)
