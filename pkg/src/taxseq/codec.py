"""Symbolic label vocabulary and the fixed-capacity label-sequence codec.

Original label names are replaced by opaque symbols (``[a_0]``, ``[a_1]``,
...) so that no linguistic content from the names reaches the decoder. A
sample's label set is serialized into a fixed-size token-id vector whose
layout depends on the chosen ordering strategy.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityExceeded, MalformedLine, UnknownLabel
from .taxonomy import LabelHierarchy

BOS_ID, EOS_ID, PAD_ID, SEP_ID = 0, 1, 2, 3
BOS_TOKEN, EOS_TOKEN, PAD_TOKEN = "<s>", "</s>", "<pad>"
#: The level separator deliberately reuses the name "<unk>"; it delimits
#: hierarchy levels (or paths, in one ordering) inside a sequence.
SEP_TOKEN = "<unk>"

SPECIAL_TOKENS = {BOS_TOKEN: BOS_ID, EOS_TOKEN: EOS_ID, PAD_TOKEN: PAD_ID, SEP_TOKEN: SEP_ID}
N_SPECIALS = 4


class Ordering(str, enum.Enum):
    """How a label set is laid out as a token sequence."""

    CHILD_TO_PARENT = "child_to_parent_levelwise"
    PARENT_TO_CHILD = "parent_to_child_levelwise"
    CHILD_TO_PARENT_NOSEP = "child_to_parent_nosep"
    PATH_SEPARATED = "path_separated"
    SHUFFLED = "shuffled"
    MINIMAL_CHILDREN = "minimal_children_levelwise"

    @classmethod
    def from_string(cls, s: str) -> "Ordering":
        for member in cls:
            if member.value == s:
                return member
        raise ValueError(f"unknown ordering {s!r}; expected one of "
                         f"{[m.value for m in cls]}")


class SymbolicVocab:
    """Token vocabulary of the decoder: four specials plus one id per label."""

    def __init__(self, h: LabelHierarchy):
        self.symbol_of: dict[str, str] = {}
        self.original_of: dict[str, str] = {}
        self.label_to_id: dict[str, int] = {}
        self.id_to_label: dict[int, str] = {}
        for k, name in enumerate(h.labels):
            sym = f"[a_{k}]"
            self.symbol_of[name] = sym
            self.original_of[sym] = name
            self.label_to_id[sym] = N_SPECIALS + k
            self.id_to_label[N_SPECIALS + k] = sym

    @property
    def size(self) -> int:
        return N_SPECIALS + len(self.label_to_id)

    def id_of(self, original_name: str) -> int:
        """Token id for an original label name."""
        try:
            return self.label_to_id[self.symbol_of[original_name]]
        except KeyError:
            raise UnknownLabel(original_name) from None

    def name_of(self, token_id: int) -> str:
        """Original label name for a label token id."""
        return self.original_of[self.id_to_label[token_id]]

    def is_label_id(self, token_id: int) -> bool:
        return N_SPECIALS <= token_id < self.size

    def token_string(self, token_id: int) -> str:
        for tok, i in SPECIAL_TOKENS.items():
            if i == token_id:
                return tok
        return self.id_to_label.get(token_id, f"<id_{token_id}>")


def build_vocab(h: LabelHierarchy) -> SymbolicVocab:
    """Deterministic vocabulary over a hierarchy's stable label enumeration."""
    return SymbolicVocab(h)


def write_label_map(vocab: SymbolicVocab, path: str | Path) -> None:
    """Emit the symbolic -> original name map, one pair per line."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for sym in sorted(vocab.original_of, key=lambda s: vocab.label_to_id[s]):
            fh.write(f"{sym}\t{vocab.original_of[sym]}\n")


def read_label_map(path: str | Path) -> dict[str, str]:
    out = {}
    with Path(path).open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MalformedLine(f"{path}:{n}: expected 'symbolic<TAB>original'")
            out[parts[0]] = parts[1]
    return out


@dataclass
class LabelSequence:
    """Fixed-length token-id vector with a validity mask.

    ``mask`` is 1 on real tokens (BOS/EOS/SEP included) and 0 on padding.
    """

    ids: np.ndarray
    mask: np.ndarray
    ordering: Ordering

    @property
    def capacity(self) -> int:
        return int(self.ids.shape[0])

    def trimmed(self) -> list[int]:
        """Token ids up to and including EOS (whole vector if EOS absent)."""
        out = []
        for t in self.ids.tolist():
            out.append(int(t))
            if t == EOS_ID:
                break
        return out


@dataclass
class DecodeDiagnostics:
    unknown_ids: int = 0
    repeated_labels_dropped: int = 0
    pad_inside: int = 0
    missing_bos: bool = False
    missing_eos: bool = False

    @property
    def clean(self) -> bool:
        return (self.unknown_ids == 0 and self.repeated_labels_dropped == 0
                and self.pad_inside == 0 and not self.missing_bos and not self.missing_eos)


@dataclass
class DecodeResult:
    labels: set[str]
    groups: list[list[str]]
    diagnostics: DecodeDiagnostics = field(default_factory=DecodeDiagnostics)


def capacity_for(
    label_sets: Sequence[Iterable[str]],
    h: LabelHierarchy,
    strategy: Ordering | None = None,
) -> int:
    """Fixed vector size accommodating the largest sample of a dataset.

    The default sizing is label count + number of distinct levels (one
    separator after each level group) + 2 for BOS/EOS, maximized over
    samples. Path-separated layouts repeat shared ancestors, so that
    strategy gets its own, larger bound.
    """
    best = 4  # BOS + one label + trailing SEP + EOS at minimum
    for labels in label_sets:
        s = set(labels)
        h.check_known(s)
        if strategy is Ordering.PATH_SEPARATED:
            leaves = h.leaf_labels(s)
            need = sum(h.level[l] for l in leaves) + len(leaves) + 2
        else:
            need = len(s) + len({h.level[l] for l in s}) + 2
        best = max(best, need)
    return best


def _level_groups(labels: set[str], h: LabelHierarchy, vocab: SymbolicVocab,
                  deepest_first: bool) -> list[list[int]]:
    by_level: dict[int, list[int]] = {}
    for l in labels:
        by_level.setdefault(h.level[l], []).append(vocab.id_of(l))
    levels = sorted(by_level, reverse=deepest_first)
    return [sorted(by_level[lvl]) for lvl in levels]


def encode(
    labels: Iterable[str],
    h: LabelHierarchy,
    vocab: SymbolicVocab,
    strategy: Ordering,
    capacity: int,
    rng: np.random.Generator | None = None,
) -> LabelSequence:
    """Serialize a label set into a fixed-capacity token-id vector.

    Level-wise layouts emit one separator after every level group,
    including the last one before EOS. Sibling order inside a level is
    ascending token id, which is stable and dataset-independent.
    """
    s = set(labels)
    h.check_known(s)
    body: list[int] = []

    if strategy in (Ordering.CHILD_TO_PARENT, Ordering.PARENT_TO_CHILD):
        deepest_first = strategy is Ordering.CHILD_TO_PARENT
        for group in _level_groups(s, h, vocab, deepest_first):
            body.extend(group)
            body.append(SEP_ID)
    elif strategy is Ordering.CHILD_TO_PARENT_NOSEP:
        for group in _level_groups(s, h, vocab, deepest_first=True):
            body.extend(group)
    elif strategy is Ordering.PATH_SEPARATED:
        leaves = sorted(h.leaf_labels(s), key=vocab.id_of)
        for leaf in leaves:
            body.append(vocab.id_of(leaf))
            body.extend(vocab.id_of(a) for a in h.ancestors(leaf))
            body.append(SEP_ID)
    elif strategy is Ordering.SHUFFLED:
        if rng is None:
            raise ValueError("the shuffled ordering needs an rng")
        ids = sorted(vocab.id_of(l) for l in s)
        body.extend(int(ids[i]) for i in rng.permutation(len(ids)))
    elif strategy is Ordering.MINIMAL_CHILDREN:
        minimal = h.minimize(s)
        for group in _level_groups(minimal, h, vocab, deepest_first=True):
            body.extend(group)
            body.append(SEP_ID)
    else:  # pragma: no cover - Ordering is exhaustive
        raise ValueError(f"unhandled ordering {strategy}")

    seq = [BOS_ID, *body, EOS_ID]
    if len(seq) > capacity:
        raise CapacityExceeded(
            f"sequence needs {len(seq)} tokens but capacity is {capacity}")
    ids = np.full(capacity, PAD_ID, dtype=np.int32)
    ids[: len(seq)] = seq
    mask = np.zeros(capacity, dtype=np.int8)
    mask[: len(seq)] = 1
    return LabelSequence(ids=ids, mask=mask, ordering=strategy)


def decode(
    ids: Sequence[int] | np.ndarray,
    vocab: SymbolicVocab,
    h: LabelHierarchy,
    strategy: Ordering,
) -> DecodeResult:
    """Read a (possibly model-generated) token vector back into a label set.

    Lenient by design: structural oddities are counted in the diagnostics
    rather than raised. The minimal-children strategy additionally closes
    the decoded set under ancestors.
    """
    ids = [int(t) for t in np.asarray(ids).ravel().tolist()]
    diag = DecodeDiagnostics()
    pos = 0
    if ids and ids[0] == BOS_ID:
        pos = 1
    else:
        diag.missing_bos = True

    seen: set[int] = set()
    names: list[str] = []
    groups: list[list[str]] = []
    current: list[str] = []
    saw_eos = False
    for t in ids[pos:]:
        if t == EOS_ID:
            saw_eos = True
            break
        if t == SEP_ID:
            if current:
                groups.append(current)
                current = []
            continue
        if t == PAD_ID:
            diag.pad_inside += 1
            continue
        if not vocab.is_label_id(t):
            diag.unknown_ids += 1
            continue
        if t in seen:
            diag.repeated_labels_dropped += 1
            continue
        seen.add(t)
        name = vocab.name_of(t)
        names.append(name)
        current.append(name)
    if current:
        groups.append(current)
    diag.missing_eos = not saw_eos

    labels = set(names)
    if strategy is Ordering.MINIMAL_CHILDREN and labels:
        labels = h.closure(labels)
    return DecodeResult(labels=labels, groups=groups, diagnostics=diag)
