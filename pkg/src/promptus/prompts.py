"""Categorical prompt families and their one-hot encoding.

The block order ``[nature | position | task | type]`` and the member order
inside each enum are the single source of truth for every vector layout in
the package (model projections, checkpoints, manifests).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from promptus.data import ManifestRecord


class Nature(str, enum.Enum):
    ORGAN = "organ"
    TUMOR = "tumor"


class Position(str, enum.Enum):
    BREAST = "breast"
    CARDIAC = "cardiac"
    LIVER = "liver"
    THYROID = "thyroid"
    HEAD = "head"
    KIDNEY = "kidney"
    APPENDIX = "appendix"
    # fallback for organs that were never seen during training
    INDIS = "indis"


class Task(str, enum.Enum):
    SEGMENTATION = "segmentation"
    CLASSIFICATION = "classification"


class InputType(str, enum.Enum):
    WHOLE = "whole"
    LOCAL = "local"
    LOCATION = "location"


FAMILIES: tuple[type[enum.Enum], ...] = (Nature, Position, Task, InputType)
BLOCK_SIZES: tuple[int, ...] = tuple(len(family) for family in FAMILIES)
BLOCK_OFFSETS: tuple[int, ...] = tuple(int(offset) for offset in np.cumsum((0,) + BLOCK_SIZES[:-1]))
PROMPT_DIM: int = sum(BLOCK_SIZES)


class InvalidPromptVector(ValueError):
    """Base class for rejected prompt vectors."""


class WrongLength(InvalidPromptVector):
    pass


class NonBinaryEntry(InvalidPromptVector):
    pass


class BlockSumViolation(InvalidPromptVector):
    def __init__(self, block: int, total: float):
        self.block = block
        self.total = total
        super().__init__(f"block {block} ({FAMILIES[block].__name__}) sums to {total:g}, expected 1")


class MissingMetadata(ValueError):
    pass


@dataclass(frozen=True)
class PromptSet:
    nature: Nature
    position: Position
    task: Task
    input_type: InputType

    def __post_init__(self):
        for name, family in zip(("nature", "position", "task", "input_type"), FAMILIES):
            value = getattr(self, name)
            if not isinstance(value, family):
                # accept canonical text names
                object.__setattr__(self, name, family(value))

    def members(self) -> tuple[enum.Enum, ...]:
        return (self.nature, self.position, self.task, self.input_type)


def encode_prompt_set(prompt: PromptSet) -> np.ndarray:
    """Concatenated one-hot vector of length ``PROMPT_DIM``."""
    vector = np.zeros(PROMPT_DIM, dtype=np.float32)
    for offset, family, member in zip(BLOCK_OFFSETS, FAMILIES, prompt.members()):
        vector[offset + list(family).index(member)] = 1.0
    return vector


def decode_prompt_vector(vector) -> PromptSet:
    """Per-block argmax inverse of :func:`encode_prompt_set`."""
    vector = np.asarray(vector)
    members = []
    for offset, size, family in zip(BLOCK_OFFSETS, BLOCK_SIZES, FAMILIES):
        members.append(list(family)[int(np.argmax(vector[offset:offset + size]))])
    return PromptSet(*members)


def validate_prompt_vector(vector) -> None:
    """Raise an :class:`InvalidPromptVector` subclass unless ``vector`` is a valid encoding."""
    vector = np.asarray(vector, dtype=np.float64).reshape(-1) if np.ndim(vector) else np.asarray([vector])
    if vector.shape[0] != PROMPT_DIM:
        raise WrongLength(f"prompt vector has length {vector.shape[0]}, expected {PROMPT_DIM}")
    bad = np.flatnonzero((vector != 0) & (vector != 1))
    if bad.size:
        raise NonBinaryEntry(f"entry {int(bad[0])} is {vector[bad[0]]!r}, expected 0 or 1")
    for block, (offset, size) in enumerate(zip(BLOCK_OFFSETS, BLOCK_SIZES)):
        total = float(vector[offset:offset + size].sum())
        if total != 1:
            raise BlockSumViolation(block, total)


def is_valid_prompt_vector(vector) -> bool:
    try:
        validate_prompt_vector(vector)
    except InvalidPromptVector:
        return False
    return True


def all_prompt_sets() -> list[PromptSet]:
    return [
        PromptSet(nature, position, task, kind)
        for nature in Nature for position in Position for task in Task for kind in InputType
    ]


def parse_position(name: str) -> Position:
    """Map a free-text organ name onto the vocabulary; unknown organs become INDIS."""
    try:
        return Position(name.strip().lower())
    except ValueError:
        return Position.INDIS


def prompt_from_record(record: "ManifestRecord", task: Task | str, input_type: InputType | str) -> PromptSet:
    if not getattr(record, "position", None) or not getattr(record, "nature", None):
        raise MissingMetadata(f"record {getattr(record, 'record_id', '?')} lacks position or nature")
    try:
        nature = Nature(str(record.nature).lower())
    except ValueError as exc:
        raise MissingMetadata(f"record {record.record_id} has unknown nature {record.nature!r}") from exc
    return PromptSet(nature, parse_position(str(record.position)), Task(task), InputType(input_type))
