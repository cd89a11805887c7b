"""EHR documents: vocabulary, corpus file I/O, splitting and halving."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ICD = "ICD"
ATC = "ATC"
MODALITIES = (ICD, ATC)

CORPUS_HEADER = ("patient", "code", "count")


class CorpusFormatError(ValueError):
    """Raised for malformed corpus or vocabulary files."""


@dataclass(frozen=True)
class VocabEntry:
    code: str
    modality: str
    category: int


class Vocabulary:
    """Ordered code list with dense ids that are contiguous per modality."""

    def __init__(self, entries: Iterable[VocabEntry]):
        self.entries: tuple[VocabEntry, ...] = tuple(entries)
        self._index: dict[str, tuple[str, int]] = {}
        codes: dict[str, list[str]] = {ICD: [], ATC: []}
        cats: dict[str, list[int]] = {ICD: [], ATC: []}
        for e in self.entries:
            if e.modality not in MODALITIES:
                raise ValueError(f"unknown modality {e.modality!r} for code {e.code!r}")
            if e.code in self._index:
                raise ValueError(f"duplicate code {e.code!r} in vocabulary")
            self._index[e.code] = (e.modality, len(codes[e.modality]))
            codes[e.modality].append(e.code)
            cats[e.modality].append(int(e.category))
        self.icd_codes: tuple[str, ...] = tuple(codes[ICD])
        self.atc_codes: tuple[str, ...] = tuple(codes[ATC])
        self.icd_categories = np.asarray(cats[ICD], dtype=np.int64)
        self.atc_categories = np.asarray(cats[ATC], dtype=np.int64)

    @property
    def n_icd(self) -> int:
        return len(self.icd_codes)

    @property
    def n_atc(self) -> int:
        return len(self.atc_codes)

    def size(self, modality: str) -> int:
        return self.n_icd if modality == ICD else self.n_atc

    def codes(self, modality: str) -> tuple[str, ...]:
        return self.icd_codes if modality == ICD else self.atc_codes

    def lookup(self, code: str) -> tuple[str, int]:
        """Return ``(modality, id)`` for a code string; KeyError if absent."""
        return self._index[code]

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.entries == other.entries

    def save(self, path: str | Path) -> None:
        lines = [f"{e.code}\t{e.modality}\t{e.category}\n" for e in self.entries]
        from kgetm.io import atomic_write_text

        atomic_write_text(path, "".join(lines))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise CorpusFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
                code, modality, cat = parts
                try:
                    entries.append(VocabEntry(code, modality, int(cat)))
                except ValueError as exc:
                    raise CorpusFormatError(f"{path}:{lineno}: bad category {cat!r}") from exc
        try:
            return cls(entries)
        except ValueError as exc:
            raise CorpusFormatError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class PatientDocument:
    """Sparse per-patient code counts, split by modality (zeros are absent)."""

    patient_id: str
    icd: dict[int, int] = field(default_factory=dict)
    atc: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for counts in (self.icd, self.atc):
            for k, c in counts.items():
                if c < 1:
                    raise ValueError(f"count for id {k} must be >= 1, got {c}")

    @property
    def n_icd_tokens(self) -> int:
        return sum(self.icd.values())

    @property
    def n_atc_tokens(self) -> int:
        return sum(self.atc.values())

    @property
    def n_tokens(self) -> int:
        return self.n_icd_tokens + self.n_atc_tokens

    def counts(self, modality: str) -> dict[int, int]:
        return self.icd if modality == ICD else self.atc


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[str, ...]
    valid: tuple[str, ...]
    test: tuple[str, ...]


def load_corpus(path: str | Path, vocab: Vocabulary) -> list[PatientDocument]:
    """Read a ``patient<TAB>code<TAB>count`` file, aggregating duplicate lines.

    Documents are returned in order of each patient's first appearance.
    """
    counts: dict[str, dict[str, dict[int, int]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        for lineno, row in enumerate(reader, 1):
            if lineno == 1 and tuple(row) == CORPUS_HEADER:
                continue
            if not row:
                continue
            if len(row) != 3:
                raise CorpusFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(row)}")
            pid, code, raw = row
            try:
                c = int(raw)
            except ValueError:
                raise CorpusFormatError(f"{path}:{lineno}: count {raw!r} is not an integer") from None
            if c <= 0:
                raise CorpusFormatError(f"{path}:{lineno}: count must be positive, got {c}")
            if code not in vocab:
                raise CorpusFormatError(f"{path}:{lineno}: unknown code {code!r}")
            modality, idx = vocab.lookup(code)
            doc = counts.setdefault(pid, {ICD: defaultdict(int), ATC: defaultdict(int)})
            doc[modality][idx] += c
    return [PatientDocument(pid, dict(d[ICD]), dict(d[ATC])) for pid, d in counts.items()]


def save_corpus(path: str | Path, docs: Sequence[PatientDocument], vocab: Vocabulary) -> None:
    from kgetm.io import atomic_write_text

    lines = ["\t".join(CORPUS_HEADER) + "\n"]
    for doc in docs:
        for idx in sorted(doc.icd):
            lines.append(f"{doc.patient_id}\t{vocab.icd_codes[idx]}\t{doc.icd[idx]}\n")
        for idx in sorted(doc.atc):
            lines.append(f"{doc.patient_id}\t{vocab.atc_codes[idx]}\t{doc.atc[idx]}\n")
    atomic_write_text(path, "".join(lines))


def split_corpus(docs: Sequence[PatientDocument], ratio=(0.6, 0.3, 0.1), seed: int = 0) -> CorpusSplit:
    """Shuffle patients and cut into train/valid/test by largest-remainder rounding."""
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise ValueError(f"ratio must be three positive numbers, got {ratio}")
    if abs(sum(ratio) - 1.0) > 1e-9:
        raise ValueError(f"ratio must sum to 1, got {sum(ratio)}")
    n = len(docs)
    if n < 3:
        raise ValueError(f"need at least 3 patients to split, got {n}")
    exact = [r * n for r in ratio]
    sizes = [math.floor(x) for x in exact]
    by_remainder = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in by_remainder[: n - sum(sizes)]:
        sizes[i] += 1
    # every part non-empty when possible
    for i in range(3):
        if sizes[i] == 0:
            j = max(range(3), key=lambda m: sizes[m])
            sizes[j] -= 1
            sizes[i] += 1
    ids = [d.patient_id for d in docs]
    if len(set(ids)) != n:
        raise ValueError("patient ids must be unique")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return CorpusSplit(tuple(shuffled[:a]), tuple(shuffled[a:b]), tuple(shuffled[b:]))


def select(docs: Sequence[PatientDocument], ids: Iterable[str]) -> list[PatientDocument]:
    by_id = {d.patient_id: d for d in docs}
    return [by_id[i] for i in ids]


def halve_document(doc: PatientDocument, seed: int) -> tuple[PatientDocument, PatientDocument]:
    """Randomly split the count-expanded tokens into two bags of (near) equal size.

    The first bag gets ``n // 2`` tokens, the second the rest.
    """
    tokens = [(0, k) for k, c in sorted(doc.icd.items()) for _ in range(c)]
    tokens += [(1, k) for k, c in sorted(doc.atc.items()) for _ in range(c)]
    n = len(tokens)
    if n < 2:
        raise ValueError(f"document {doc.patient_id!r} has {n} token(s); cannot halve")
    perm = np.random.default_rng(seed).permutation(n)
    halves = []
    for part in (perm[: n // 2], perm[n // 2 :]):
        bags: tuple[dict[int, int], dict[int, int]] = ({}, {})
        for t in part:
            mod, k = tokens[t]
            bags[mod][k] = bags[mod].get(k, 0) + 1
        halves.append(PatientDocument(doc.patient_id, bags[0], bags[1]))
    return halves[0], halves[1]


def count_vectors(doc: PatientDocument, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    icd = np.zeros(vocab.n_icd)
    atc = np.zeros(vocab.n_atc)
    for k, c in doc.icd.items():
        icd[k] = c
    for k, c in doc.atc.items():
        atc[k] = c
    return icd, atc


def normalize_bow(doc: PatientDocument, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Per-modality count vectors divided by that modality's token total."""
    if doc.n_tokens == 0:
        raise ValueError(f"document {doc.patient_id!r} is empty")
    out = []
    for vec in count_vectors(doc, vocab):
        total = vec.sum()
        out.append(vec / total if total > 0 else vec)
    return out[0], out[1]


def count_matrices(docs: Sequence[PatientDocument], vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``D x V_icd`` and ``D x V_atc`` count matrices."""
    icd = np.zeros((len(docs), vocab.n_icd))
    atc = np.zeros((len(docs), vocab.n_atc))
    for i, doc in enumerate(docs):
        for k, c in doc.icd.items():
            icd[i, k] = c
        for k, c in doc.atc.items():
            atc[i, k] = c
    return icd, atc


def row_normalize(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
