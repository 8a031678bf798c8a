"""Procedural Raven-style puzzle generation with constant-in-a-row rules.

A puzzle is a 3x3 grid of factor assignments whose bottom-right cell is
withheld and hidden among six choices.  The rule factors take one value per
row, the three row values pairwise distinct; every non-rule factor varies
freely except that it must not be row-constant in both of the first two
rows (at most one accidental "distractor" row).  Negatives are mutations of
the true answer that break at least one rule, so exactly one choice ever
completes the third row consistently.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from math import prod
from pathlib import Path

import numpy as np

from .rng import RngStream
from .space import Assignment, FactorSpace, build_space, space_config_dict

MAX_REJECTION_ROUNDS = 1000
GRID_ROWS = 3
NUM_CHOICES = 6


class Relation(enum.Enum):
    CONSTANT_IN_ROW = "constant_in_row"


@dataclass(frozen=True)
class Structure:
    """The (relation, factor) pairs governing a puzzle."""

    pairs: tuple[tuple[Relation, int], ...]

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("structure must contain at least one (relation, factor) pair")
        factors = [k for _, k in self.pairs]
        if len(set(factors)) != len(factors):
            raise ValueError(f"structure factors must be distinct: {factors}")

    @property
    def rule_factors(self) -> tuple[int, ...]:
        return tuple(k for _, k in self.pairs)


@dataclass(frozen=True)
class RpmInstance:
    space: FactorSpace
    structure: Structure
    grid: tuple[Assignment, ...]  # 9 cells row-major; grid[8] is withheld from solvers
    choices: tuple[Assignment, ...]
    answer_index: int
    provenance: tuple[int, int] = (0, 0)  # (master_seed, stream_id)

    def context(self) -> tuple[Assignment, ...]:
        """The 8 visible cells."""
        return self.grid[:8]

    def rows(self):
        return [self.grid[0:3], self.grid[3:6], self.grid[6:9]]


@dataclass
class ValidityReport:
    passed: bool
    first_violation: str | None = None
    checked: list[str] = field(default_factory=list)


def _as_generator(rng) -> np.random.Generator:
    return rng.generator() if isinstance(rng, RngStream) else rng


def sample_structure(space: FactorSpace, l: int, rng) -> Structure:
    """l distinct factors, each paired with the constant-in-a-row relation."""
    if not (1 <= l <= space.num_factors):
        raise ValueError(f"rule count l={l} out of range [1, {space.num_factors}]")
    gen = _as_generator(rng)
    picked = sorted(int(k) for k in gen.choice(space.num_factors, size=l, replace=False))
    return Structure(tuple((Relation.CONSTANT_IN_ROW, k) for k in picked))


def generate_matrix(space: FactorSpace, structure: Structure, rng) -> np.ndarray:
    """Fill the 3x3 grid; returns an int array of shape (3, 3, num_factors)."""
    gen = _as_generator(rng)
    rule = set(structure.rule_factors)
    for k in rule:
        if space.factors[k].cardinality < GRID_ROWS:
            raise ValueError(
                f"rule factor {space.factors[k].name!r} has cardinality "
                f"{space.factors[k].cardinality} < {GRID_ROWS}; cannot sample "
                "row values without replacement"
            )

    grid = np.zeros((GRID_ROWS, GRID_ROWS, space.num_factors), dtype=np.int64)
    for k in structure.rule_factors:
        row_values = gen.permutation(space.factors[k].cardinality)[:GRID_ROWS]
        grid[:, :, k] = row_values[:, None]

    for k in range(space.num_factors):
        if k in rule:
            continue
        card = space.factors[k].cardinality
        for _ in range(MAX_REJECTION_ROUNDS):
            values = gen.integers(0, card, size=(GRID_ROWS, GRID_ROWS))
            row1_const = values[0, 0] == values[0, 1] == values[0, 2]
            row2_const = values[1, 0] == values[1, 1] == values[1, 2]
            if not (row1_const and row2_const):
                grid[:, :, k] = values
                break
        else:
            raise RuntimeError(
                f"distractor constraint unsatisfied for factor "
                f"{space.factors[k].name!r} after {MAX_REJECTION_ROUNDS} rounds"
            )
    return grid


def _satisfies_rules(space, structure: Structure, row_pair, candidate) -> bool:
    """Would (row_pair[0], row_pair[1], candidate) satisfy every rule?"""
    for _, k in structure.pairs:
        if not (row_pair[0][k] == row_pair[1][k] == candidate[k]):
            return False
    return True


def count_valid_negatives(space: FactorSpace, structure: Structure) -> int:
    """Assignments that break at least one rule-factor value of row 3."""
    non_rule = [
        f.cardinality
        for i, f in enumerate(space.factors)
        if i not in set(structure.rule_factors)
    ]
    return space.total_combinations - prod(non_rule) if non_rule else space.total_combinations - 1


def generate_choices(space: FactorSpace, grid: np.ndarray, structure: Structure, rng):
    """Mutate the answer into 5 rule-breaking negatives; returns (choices, answer_index)."""
    gen = _as_generator(rng)
    answer = tuple(int(v) for v in grid[2, 2])
    row_pair = (tuple(int(v) for v in grid[2, 0]), tuple(int(v) for v in grid[2, 1]))

    available = count_valid_negatives(space, structure)
    if available < NUM_CHOICES - 1:
        raise RuntimeError(
            f"space admits only {available} distinct rule-breaking negatives; "
            f"{NUM_CHOICES - 1} required"
        )

    cards = space.cardinalities
    negatives: list[Assignment] = []
    # block-drawn mutation stream: (factor, value-offset fraction) pairs
    block_f: np.ndarray = np.empty(0, dtype=np.int64)
    block_u: np.ndarray = np.empty(0)
    cursor = 0
    rounds = 0
    while len(negatives) < NUM_CHOICES - 1:
        rounds += 1
        if rounds > MAX_REJECTION_ROUNDS:
            raise RuntimeError(
                f"failed to collect {NUM_CHOICES - 1} distinct negatives in "
                f"{MAX_REJECTION_ROUNDS} rounds"
            )
        cand = list(answer)
        mutations = 0
        while _satisfies_rules(space, structure, row_pair, cand):
            mutations += 1
            if mutations > MAX_REJECTION_ROUNDS:
                raise RuntimeError("mutation loop failed to break the rules")
            if cursor >= len(block_f):
                block_f = gen.integers(0, space.num_factors, size=64)
                block_u = gen.random(64)
                cursor = 0
            k = int(block_f[cursor])
            # jump to a different value of factor k
            offset = 1 + int(block_u[cursor] * (cards[k] - 1))
            cursor += 1
            cand[k] = (cand[k] + offset) % cards[k]
        cand_t = tuple(cand)
        if cand_t not in negatives:
            negatives.append(cand_t)

    answer_index = int(gen.integers(0, NUM_CHOICES))
    choices = negatives[:answer_index] + [answer] + negatives[answer_index:]
    return tuple(choices), answer_index


def generate_puzzle(space: FactorSpace, l: int, rng: RngStream) -> RpmInstance:
    """One puzzle from one RngStream tick."""
    provenance = (rng.master_seed, rng.stream_id)
    gen = _as_generator(rng)
    structure = sample_structure(space, l, gen)
    grid = generate_matrix(space, structure, gen)
    choices, answer_index = generate_choices(space, grid, structure, gen)
    cells = tuple(tuple(int(v) for v in grid[i, j]) for i in range(3) for j in range(3))
    return RpmInstance(
        space=space,
        structure=structure,
        grid=cells,
        choices=choices,
        answer_index=answer_index,
        provenance=provenance,
    )


def generate_batch(space: FactorSpace, l: int, rng: RngStream, count: int) -> list[RpmInstance]:
    """Independent puzzles on child streams (parallel-safe numbering)."""
    return [generate_puzzle(space, l, rng.child(i)) for i in range(count)]


def validate_puzzle(instance: RpmInstance) -> ValidityReport:
    """Check every instance invariant plus unique solvability."""
    report = ValidityReport(passed=True)

    def fail(msg):
        report.passed = False
        report.first_violation = msg
        return report

    space = instance.space
    report.checked.append("shape")
    if len(instance.grid) != 9:
        return fail(f"grid has {len(instance.grid)} cells, expected 9")
    if len(instance.choices) != NUM_CHOICES:
        return fail(f"{len(instance.choices)} choices, expected {NUM_CHOICES}")
    try:
        for cell in instance.grid:
            space.validate_assignment(cell)
        for choice in instance.choices:
            space.validate_assignment(choice)
    except ValueError as exc:
        return fail(str(exc))

    report.checked.append("answer placement")
    if not (0 <= instance.answer_index < NUM_CHOICES):
        return fail(f"answer_index {instance.answer_index} out of range")
    if instance.choices[instance.answer_index] != instance.grid[8]:
        return fail("choices[answer_index] does not equal the withheld cell")
    if len(set(instance.choices)) != NUM_CHOICES:
        return fail("choices are not pairwise distinct")

    rows = instance.rows()
    rule = instance.structure.rule_factors
    report.checked.append("rule constancy")
    for k in rule:
        row_values = []
        for r, row in enumerate(rows):
            vals = {cell[k] for cell in row}
            if len(vals) != 1:
                return fail(f"rule not satisfied in row {r + 1} for factor {k}")
            row_values.append(vals.pop())
        if len(set(row_values)) != GRID_ROWS:
            return fail(f"rule factor {k} row values not pairwise distinct: {row_values}")

    report.checked.append("distractor constraint")
    for k in range(space.num_factors):
        if k in rule:
            continue
        const1 = len({cell[k] for cell in rows[0]}) == 1
        const2 = len({cell[k] for cell in rows[1]}) == 1
        if const1 and const2:
            return fail(f"distractor constraint violated: factor {k} constant in rows 1 and 2")

    report.checked.append("unique solution")
    shared = [
        k
        for k in range(space.num_factors)
        if len({cell[k] for cell in rows[0]}) == 1
        and len({cell[k] for cell in rows[1]}) == 1
    ]
    consistent = set()
    for i, choice in enumerate(instance.choices):
        if all(rows[2][0][k] == rows[2][1][k] == choice[k] for k in shared):
            consistent.add(i)
    if consistent != {instance.answer_index}:
        return fail(f"expected unique consistent choice {instance.answer_index}, got {sorted(consistent)}")
    return report


# dataset persistence -------------------------------------------------------

MANIFEST_NAME = "manifest.json"
RECORDS_NAME = "puzzles.jsonl"


def instance_to_record(instance: RpmInstance) -> dict:
    return {
        "grid": [list(cell) for cell in instance.grid],
        "choices": [list(c) for c in instance.choices],
        "answer_index": instance.answer_index,
        "structure": [[rel.value, k] for rel, k in instance.structure.pairs],
        "provenance": list(instance.provenance),
    }


def record_to_instance(space: FactorSpace, record: dict) -> RpmInstance:
    structure = Structure(
        tuple((Relation(rel), int(k)) for rel, k in record["structure"])
    )
    return RpmInstance(
        space=space,
        structure=structure,
        grid=tuple(tuple(int(v) for v in cell) for cell in record["grid"]),
        choices=tuple(tuple(int(v) for v in c) for c in record["choices"]),
        answer_index=int(record["answer_index"]),
        provenance=tuple(record.get("provenance", (0, 0))),
    )


def write_dataset(out_dir, space: FactorSpace, count: int, l: int, master_seed: int) -> list[RpmInstance]:
    """Write manifest.json plus one JSON record per puzzle (puzzles.jsonl)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = RngStream(master_seed)
    instances = generate_batch(space, l, rng, count)
    manifest = {
        "space": space_config_dict(space),
        "count": count,
        "master_seed": master_seed,
        "l": l,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    with open(out / RECORDS_NAME, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_record(inst)) + "\n")
    return instances


def read_dataset(in_dir):
    """Returns (space, manifest, instances)."""
    path = Path(in_dir)
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    space = build_space(manifest["space"])
    instances = []
    with open(path / RECORDS_NAME) as fh:
        for line in fh:
            if line.strip():
                instances.append(record_to_instance(space, json.loads(line)))
    return space, manifest, instances
