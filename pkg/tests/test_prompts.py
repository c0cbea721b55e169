import itertools

import numpy as np
import pytest

from promptus.data import ManifestRecord
from promptus.prompts import (
    PROMPT_DIM,
    BlockSumViolation,
    InputType,
    MissingMetadata,
    Nature,
    NonBinaryEntry,
    Position,
    PromptSet,
    Task,
    WrongLength,
    all_prompt_sets,
    decode_prompt_vector,
    encode_prompt_set,
    is_valid_prompt_vector,
    prompt_from_record,
    validate_prompt_vector,
)


@pytest.mark.parametrize(
    "prompt, expected",
    [
        (("organ", "breast", "segmentation", "whole"), [1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0]),
        (("tumor", "indis", "classification", "location"), [0, 1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 1]),
        (("tumor", "thyroid", "segmentation", "local"), [0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 1, 0]),
    ],
)
def test_encode_examples(prompt, expected):
    np.testing.assert_array_equal(encode_prompt_set(PromptSet(*prompt)), expected)


def test_dimension_and_blocks():
    assert PROMPT_DIM == 15
    for prompt in all_prompt_sets():
        vector = encode_prompt_set(prompt)
        assert vector.sum() == 4
        assert vector[0:2].sum() == vector[2:10].sum() == vector[10:12].sum() == vector[12:15].sum() == 1


def test_round_trip_and_injective():
    sets = all_prompt_sets()
    assert len(sets) == 96
    assert all(decode_prompt_vector(encode_prompt_set(prompt)) == prompt for prompt in sets)
    assert len({encode_prompt_set(prompt).tobytes() for prompt in sets}) == 96


def test_validator_examples():
    validate_prompt_vector([1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0])
    with pytest.raises(BlockSumViolation) as exc:
        validate_prompt_vector([1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0])
    assert exc.value.block == 0
    with pytest.raises(WrongLength):
        validate_prompt_vector(np.zeros(14))
    vector = encode_prompt_set(all_prompt_sets()[0]).astype(float)
    vector[3] = 0.5
    with pytest.raises(NonBinaryEntry):
        validate_prompt_vector(vector)


def test_validator_rejects_every_single_bit_flip():
    for prompt in all_prompt_sets():
        vector = encode_prompt_set(prompt)
        for bit in range(PROMPT_DIM):
            flipped = vector.copy()
            flipped[bit] = 1 - flipped[bit]
            assert not is_valid_prompt_vector(flipped)


def test_text_names_are_lowercase():
    for family in (Nature, Position, Task, InputType):
        assert all(member.value == member.value.lower() for member in family)
    assert PromptSet("tumor", "breast", "segmentation", "whole").position is Position.BREAST


def _rec(position, nature):
    return ManifestRecord("d", "r1", "p1", "img.png", class_label=0, position=position, nature=nature)


@pytest.mark.parametrize(
    "position, nature, task, itype, expected",
    [
        ("breast", "tumor", Task.SEGMENTATION, InputType.WHOLE, ("tumor", "breast", "segmentation", "whole")),
        ("Lung", "organ", Task.CLASSIFICATION, InputType.WHOLE, ("organ", "indis", "classification", "whole")),
        ("cardiac", "organ", Task.SEGMENTATION, InputType.WHOLE, ("organ", "cardiac", "segmentation", "whole")),
    ],
)
def test_prompt_from_record(position, nature, task, itype, expected):
    assert prompt_from_record(_rec(position, nature), task, itype) == PromptSet(*expected)


@pytest.mark.parametrize("position, nature", [("", "tumor"), ("breast", "")])
def test_prompt_from_record_missing_metadata(position, nature):
    with pytest.raises(MissingMetadata):
        prompt_from_record(_rec(position, nature), Task.SEGMENTATION, InputType.WHOLE)


def test_validator_accepts_exactly_the_encodings():
    valid = {tuple(int(entry) for entry in encode_prompt_set(prompt)) for prompt in all_prompt_sets()}
    accepted = {bits for bits in itertools.product((0, 1), repeat=15) if is_valid_prompt_vector(bits)}
    assert accepted == valid
