"""Instruction templating, word-level tokenization, and text embedding.

The instruction language is a closed grammar (templates over a small palette /
shape vocabulary), so the vocabulary is built once from the grammar and every
generated instruction tokenizes without UNKs. Punctuation is emitted as
standalone space-separated tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

PAD = 0
UNK = 1

L_TEXT = 16

COLOR_WORDS = ["red", "green", "blue", "yellow", "cyan", "magenta"]
SHAPE_WORDS = ["square", "disc"]
BACKGROUND_WORDS = ["light", "dark"]

_MODALITY_WORD = {"depth": "depth", "canny": "canny", "seg": "segmentation"}

_TEMPLATE_WORDS = [
    "change", "the", "color", "of", "to", "remove", "add", "a", "keep",
    "image", "unchanged", "given", "generate", "following", "instruction",
    ",", ":", "and", "on", "background", "depth", "canny", "segmentation",
]


class TemplateError(Exception):
    pass


@dataclass
class Vocabulary:
    """Dense word -> id table with fixed PAD=0, UNK=1."""

    words: list

    def __post_init__(self):
        assert self.words[PAD] == "<pad>" and self.words[UNK] == "<unk>"
        self._ids = {w: i for i, w in enumerate(self.words)}

    @property
    def size(self):
        return len(self.words)

    def lookup(self, word):
        return self._ids.get(word, UNK)


def build_vocabulary():
    words = ["<pad>", "<unk>"]
    for w in COLOR_WORDS + SHAPE_WORDS + BACKGROUND_WORDS + _TEMPLATE_WORDS:
        if w not in words:
            words.append(w)
    return Vocabulary(words)


@dataclass
class InstructionTokens:
    """Fixed-length id list; positions >= true_len are PAD."""

    ids: np.ndarray
    true_len: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)


_EDIT_TEMPLATES = {
    "recolor": "change the color of the {color} {shape} to {color2}",
    "remove": "remove the {color} {shape}",
    "add": "add a {color} {shape}",
    "identity": "keep the image unchanged",
}

_TRANSLATION_TEMPLATE = (
    "given the {modality} , generate the image following the instruction : {desc}"
)


def render_instruction(task_kind, slots=None):
    """Fill the task's template; translation kinds get the modality prefix."""
    slots = dict(slots or {})
    try:
        if task_kind in _EDIT_TEMPLATES:
            return _EDIT_TEMPLATES[task_kind].format(**slots)
        if task_kind in _MODALITY_WORD:
            return _TRANSLATION_TEMPLATE.format(
                modality=_MODALITY_WORD[task_kind], **slots)
    except KeyError as e:
        raise TemplateError(f"missing slot {e} for task {task_kind!r}") from None
    raise TemplateError(f"unknown task kind {task_kind!r}")


def tokenize(s, vocab, l_text=L_TEXT):
    """Lower-case, whitespace-split, look up, truncate/pad to l_text."""
    words = s.lower().split()
    ids = [vocab.lookup(w) for w in words][:l_text]
    true_len = len(ids)
    ids = ids + [PAD] * (l_text - true_len)
    return InstructionTokens(np.asarray(ids, dtype=np.int64), true_len)


def embed_text(tokens, table, pos_table):
    """Row lookup plus positional embedding; PAD positions embed normally."""
    looked = T.embedding(table, tokens.ids)
    return T.add(looked, pos_table)


def null_text_embedding(null_vec, pos_table, l_text=L_TEXT):
    """One learned vector broadcast over all text slots, plus positions."""
    ones = np.ones((l_text, 1), dtype=null_vec.data.dtype)
    broadcast = T.matmul(T.Tensor(ones, _check=False), null_vec)
    return T.add(broadcast, pos_table)
