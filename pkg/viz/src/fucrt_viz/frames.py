"""Loaders for the simulator's artifact files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Malformed artifact file; the message names the offending line."""


@dataclass
class EmbeddingFrame:
    """Rows of (sample_id, original_label, current_label, representation)."""

    sample_ids: np.ndarray
    original_labels: np.ndarray
    current_labels: np.ndarray
    vectors: np.ndarray  # N x rep_dim

    def __len__(self) -> int:
        return len(self.sample_ids)

    def labels(self, color_by: str) -> np.ndarray:
        if color_by == "original":
            return self.original_labels
        if color_by == "current":
            return self.current_labels
        raise ValueError(f"color_by must be 'original' or 'current', got {color_by!r}")


def load_embedding_csv(path) -> EmbeddingFrame:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: line 1: empty file") from None
        if header[:3] != ["sample_id", "original_label", "current_label"]:
            raise ParseError(f"{path}: line 1: unexpected header {header[:3]}")
        width = len(header) - 3
        if width < 1:
            raise ParseError(f"{path}: line 1: no representation columns")

        ids, orig, cur, vecs = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width + 3:
                raise ParseError(
                    f"{path}: line {lineno}: expected {width + 3} fields, found {len(row)}"
                )
            try:
                ids.append(int(row[0]))
                orig.append(int(row[1]))
                cur.append(int(row[2]))
                vecs.append([float(v) for v in row[3:]])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if orig[-1] < 0 or cur[-1] < 0:
                raise ParseError(f"{path}: line {lineno}: negative label")
    if not ids:
        raise ParseError(f"{path}: line 2: no data rows")
    return EmbeddingFrame(
        sample_ids=np.array(ids),
        original_labels=np.array(orig),
        current_labels=np.array(cur),
        vectors=np.array(vecs),
    )


def load_rounds_jsonl(path, metric: str) -> tuple[np.ndarray, np.ndarray]:
    """(rounds, values) for one metric from a rounds.jsonl file."""
    path = Path(path)
    rounds, values = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if metric not in row:
                raise ParseError(f"{path}: line {lineno}: missing metric {metric!r}")
            if row[metric] is None:
                continue
            rounds.append(row.get("round", lineno - 1))
            values.append(float(row[metric]))
    if not values:
        raise ParseError(f"{path}: no rows carry metric {metric!r}")
    return np.array(rounds), np.array(values)
