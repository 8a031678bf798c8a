"""Quantized ground-truth factor spaces.

A :class:`FactorSpace` is an ordered list of named discrete factors; every
image in the lab is generated from one assignment of factor indices.  An
assignment is a plain tuple of ints, one index per factor, in row-major
(first factor most significant) order for the grid <-> integer bijection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import prod
from typing import Sequence

import numpy as np

from .rng import RngStream

RENDER_ROLES = (
    "shape",
    "size",
    "pos_x",
    "pos_y",
    "object_color",
    "background_color",
    "none",
)

KINDS = ("categorical", "ordinal")

# Spaces with more index combinations than this are rejected outright; the
# dense integer indexing below must stay within int64.
MAX_COMBINATIONS = 1 << 62

Assignment = tuple[int, ...]


@dataclass(frozen=True)
class FactorDef:
    name: str
    cardinality: int
    kind: str = "ordinal"
    render_role: str = "none"

    def __post_init__(self):
        if self.cardinality < 2:
            raise ValueError(
                f"factor {self.name!r}: cardinality must be >= 2, got {self.cardinality}"
            )
        if self.kind not in KINDS:
            raise ValueError(f"factor {self.name!r}: unknown kind {self.kind!r}")
        if self.render_role not in RENDER_ROLES:
            raise ValueError(
                f"factor {self.name!r}: unknown render_role {self.render_role!r}"
            )


@dataclass(frozen=True)
class FactorSpace:
    factors: tuple[FactorDef, ...]

    def __post_init__(self):
        if len(self.factors) < 2:
            raise ValueError("a factor space needs at least 2 factors")
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate factor names: {names}")
        if prod(f.cardinality for f in self.factors) > MAX_COMBINATIONS:
            raise ValueError("factor grid too large to index")

    @property
    def num_factors(self) -> int:
        return len(self.factors)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(f.cardinality for f in self.factors)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.factors)

    @property
    def total_combinations(self) -> int:
        return prod(self.cardinalities)

    def factor_by_role(self, role: str) -> int | None:
        """Index of the first factor with the given render role, or None."""
        for i, f in enumerate(self.factors):
            if f.render_role == role:
                return i
        return None

    def validate_assignment(self, assignment: Sequence[int]) -> Assignment:
        values = tuple(int(v) for v in assignment)
        if len(values) != self.num_factors:
            raise ValueError(
                f"assignment length {len(values)} != {self.num_factors} factors"
            )
        for v, f in zip(values, self.factors):
            if not (0 <= v < f.cardinality):
                raise ValueError(
                    f"factor {f.name!r}: index {v} out of range [0, {f.cardinality})"
                )
        return values


PRESETS: dict[str, tuple[FactorDef, ...]] = {
    # dsprites quantized for puzzle construction: 3 sizes, 4 x/y positions,
    # orientation dropped, shape untouched.
    "dsprites-like": (
        FactorDef("shape", 3, "categorical", "shape"),
        FactorDef("size", 3, "ordinal", "size"),
        FactorDef("pos_x", 4, "ordinal", "pos_x"),
        FactorDef("pos_y", 4, "ordinal", "pos_y"),
    ),
    # dsprites plus object color (6) and background color (5).
    "mod-dsprites-like": (
        FactorDef("shape", 3, "categorical", "shape"),
        FactorDef("size", 3, "ordinal", "size"),
        FactorDef("pos_x", 4, "ordinal", "pos_x"),
        FactorDef("pos_y", 4, "ordinal", "pos_y"),
        FactorDef("object_color", 6, "categorical", "object_color"),
        FactorDef("background_color", 5, "categorical", "background_color"),
    ),
    # shapes3d analog: the two scene factors that have no 2D counterpart
    # (wall color, rotation) still vary the grid but not the rendering.
    "shapes3d-like": (
        FactorDef("floor_color", 10, "categorical", "background_color"),
        FactorDef("wall_color", 10, "categorical", "none"),
        FactorDef("object_color", 10, "categorical", "object_color"),
        FactorDef("size", 4, "ordinal", "size"),
        FactorDef("shape", 4, "categorical", "shape"),
        FactorDef("rotation", 4, "ordinal", "none"),
    ),
    # minimal smoke-test spaces
    "toy2": (
        FactorDef("size", 3, "ordinal", "size"),
        FactorDef("object_color", 6, "categorical", "object_color"),
    ),
    "toy3": (
        FactorDef("size", 3, "ordinal", "size"),
        FactorDef("object_color", 6, "categorical", "object_color"),
        FactorDef("pos_x", 4, "ordinal", "pos_x"),
    ),
}


def build_space(config) -> FactorSpace:
    """Build a validated FactorSpace from a preset name or explicit factors.

    Accepts a preset name, an iterable of FactorDef (or dicts with the
    FactorDef fields), or a config mapping {"preset": name} /
    {"factors": [...]} as read from a space config file.
    """
    if isinstance(config, str):
        if config not in PRESETS:
            raise ValueError(
                f"unknown preset {config!r}; known: {sorted(PRESETS)}"
            )
        return FactorSpace(PRESETS[config])
    if isinstance(config, dict):
        if "preset" in config:
            return build_space(config["preset"])
        if "factors" in config:
            return build_space(config["factors"])
        raise ValueError("space config must contain 'preset' or 'factors'")
    factors = []
    for f in config:
        factors.append(f if isinstance(f, FactorDef) else FactorDef(**f))
    return FactorSpace(tuple(factors))


def load_space_config(path) -> FactorSpace:
    with open(path) as fh:
        return build_space(json.load(fh))


def space_config_dict(space: FactorSpace) -> dict:
    """JSON-ready description; inverse of build_space for explicit lists."""
    for name, factors in PRESETS.items():
        if factors == space.factors:
            return {"preset": name}
    return {
        "factors": [
            {
                "name": f.name,
                "cardinality": f.cardinality,
                "kind": f.kind,
                "render_role": f.render_role,
            }
            for f in space.factors
        ]
    }


def sample_assignment(space: FactorSpace, rng: RngStream) -> Assignment:
    """Uniform draw over the factor grid."""
    draws = rng.integers(np.array(space.cardinalities))
    return tuple(int(v) for v in draws)


def sample_assignments(space: FactorSpace, n: int, rng: RngStream) -> "np.ndarray":
    """n uniform assignments as an (n, num_factors) int array; one rng tick."""
    cards = np.array(space.cardinalities)
    return rng.generator().integers(0, cards, size=(n, space.num_factors))


def assignment_index(space: FactorSpace, assignment: Sequence[int]) -> int:
    """Row-major position of an assignment in the full factor grid."""
    values = space.validate_assignment(assignment)
    idx = 0
    for v, c in zip(values, space.cardinalities):
        idx = idx * c + v
    return idx


def index_to_assignment(space: FactorSpace, index: int) -> Assignment:
    if not (0 <= index < space.total_combinations):
        raise ValueError(
            f"index {index} out of range [0, {space.total_combinations})"
        )
    values = []
    rem = int(index)
    for c in reversed(space.cardinalities):
        values.append(rem % c)
        rem //= c
    return tuple(reversed(values))
