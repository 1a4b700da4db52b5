"""Deterministic per-site instruction stacks, revealed lazily.

No stack is ever stored: the instruction at (site, slot) is a pure hash of
(master seed, site coordinates, slot index).  Reading it in any order, any
number of times, from any covering domain yields the same value, which is
what makes order-independence properties exactly testable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpec
from .model import JumpDistribution, ModelParams
from .rng import instruction_code, site_key, u64


@dataclass(frozen=True)
class Instruction:
    """Either a sleep instruction or a jump by a nearest-neighbor offset."""

    kind: str  # "Sleep" | "Jump"
    offset: tuple = None

    def __post_init__(self):
        if self.kind not in ("Sleep", "Jump"):
            raise InvalidSpec(f"bad instruction kind {self.kind!r}")
        if self.kind == "Jump":
            if self.offset is None:
                raise InvalidSpec("jump instruction needs an offset")
            object.__setattr__(self, "offset", tuple(int(c) for c in self.offset))
        elif self.offset is not None:
            raise InvalidSpec("sleep instruction carries no offset")

    @property
    def is_sleep(self):
        return self.kind == "Sleep"

    @property
    def is_jump(self):
        return self.kind == "Jump"

    def __repr__(self):
        return "Sleep" if self.is_sleep else f"Jump({self.offset})"


SLEEP = Instruction("Sleep")


class InstructionField:
    """Master seed + model parameters + jump law, with reveal bookkeeping.

    `revealed` maps site coordinates to the highest slot index examined so
    far (a high-water mark, not a call count).
    """

    __slots__ = ("seed", "params", "jumps", "revealed", "_cumw", "_offsets")

    def __init__(self, seed, params: ModelParams, jumps: JumpDistribution):
        self.seed = int(u64(seed))
        self.params = params
        self.jumps = jumps
        self.revealed = {}
        self._cumw = jumps.cum_weights()
        self._offsets = jumps.offsets()

    @property
    def sleep_prob(self):
        return self.params.sleep_prob

    @property
    def jumps_only(self):
        return self.params.is_infinite

    def code_at(self, x, j):
        """Raw decode: -1 for Sleep, else canonical offset index. No bookkeeping."""
        if j < 1:
            raise InvalidSpec("instruction slot indices start at 1")
        skey = u64(site_key(np.asarray(x, dtype=np.int64)))
        return int(
            instruction_code(
                np.uint64(self.seed),
                skey,
                j,
                self.sleep_prob,
                self._cumw,
                self.jumps_only,
            )
        )

    def mark_revealed(self, x, j):
        x = tuple(int(c) for c in x)
        if j > self.revealed.get(x, 0):
            self.revealed[x] = int(j)

    def revealed_at(self, x):
        return self.revealed.get(tuple(int(c) for c in x), 0)


def instruction_at(field: InstructionField, x, j) -> Instruction:
    """The j-th instruction (j >= 1) of the stack at site x; records the reveal."""
    code = field.code_at(x, j)
    field.mark_revealed(x, j)
    if code < 0:
        return SLEEP
    return Instruction("Jump", tuple(int(c) for c in field._offsets[code]))
