"""Atomic file writes and the embedding-matrix text format."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

EMBEDDING_MAGIC = "kgetm-embedding"
EMBEDDING_VERSION = 1


def _default_mode() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return 0o666 & ~mask


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a sibling temp file then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        os.fchmod(fd, _default_mode())  # mkstemp creates 0600
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_embedding(path: str | Path, matrix: np.ndarray, codes: Sequence[str]) -> None:
    """Write an ``L x N`` matrix, one column per line, in ``codes`` order.

    Layout::

        kgetm-embedding<TAB>1<TAB><L><TAB><N>
        <code><TAB><v_1><TAB>...<TAB><v_L>      (N lines)

    Values use ``repr`` so they round-trip exactly.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    dim, n = matrix.shape
    if n != len(codes):
        raise ValueError(f"{n} columns but {len(codes)} codes")
    lines = [f"{EMBEDDING_MAGIC}\t{EMBEDDING_VERSION}\t{dim}\t{n}\n"]
    for j, code in enumerate(codes):
        lines.append(code + "\t" + "\t".join(repr(float(x)) for x in matrix[:, j]) + "\n")
    atomic_write_text(path, "".join(lines))


def load_embedding(path: str | Path) -> tuple[np.ndarray, list[str]]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if len(header) != 4 or header[0] != EMBEDDING_MAGIC:
            raise ValueError(f"{path}: not an embedding file")
        if int(header[1]) != EMBEDDING_VERSION:
            raise ValueError(f"{path}: unsupported embedding version {header[1]}")
        dim, n = int(header[2]), int(header[3])
        codes = []
        matrix = np.empty((dim, n))
        for j in range(n):
            parts = fh.readline().rstrip("\n").split("\t")
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{j + 2}: expected {dim + 1} fields")
            codes.append(parts[0])
            matrix[:, j] = [float(x) for x in parts[1:]]
    return matrix, codes
