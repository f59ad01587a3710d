"""Symbolic RPM problems: configurations, panels, rules and their JSON form.

A panel is made of one or two *components*. Each component owns one or
more entity slots. Occupied slots of one component share every visual
attribute; how many are occupied is the component's ``count``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

# Attribute kinds and their value ranges (count depends on the layout).
TYPE, SIZE, SHADE, COUNT = "type", "size", "shade", "count"
ATTRIBUTES = (TYPE, SIZE, SHADE, COUNT)
ORDINAL_ATTRIBUTES = (SIZE, SHADE, COUNT)
SHAPE_NAMES = ("triangle", "square", "pentagon", "hexagon", "circle")
SHAPE_SIDES = (3, 4, 5, 6, 0)  # 0 marks a circle
ATTRIBUTE_RANGES = {TYPE: (0, 4), SIZE: (0, 5), SHADE: (0, 9), COUNT: (1, 9)}

CONSTANT = "constant"
PROGRESSION = "progression"
ARITHMETIC = "arithmetic"
DISTRIBUTE_THREE = "distribute_three"
RULE_KINDS = (CONSTANT, PROGRESSION, ARITHMETIC, DISTRIBUTE_THREE)
PROGRESSION_DELTAS = (-2, -1, 1, 2)


@dataclass(frozen=True)
class Slot:
    """Entity cell: centre and half-width as fractions of the panel side."""

    cx: float
    cy: float
    half: float


@dataclass(frozen=True)
class Layout:
    name: str
    code: int
    components: tuple[tuple[Slot, ...], ...]

    @property
    def is_grid(self) -> bool:
        return len(self.components[0]) > 1


def _grid(n: int) -> tuple[Slot, ...]:
    return tuple(Slot((2 * c + 1) / (2 * n), (2 * r + 1) / (2 * n), 1 / (2 * n))
                 for r in range(n) for c in range(n))


CENTER, GRID2, GRID3, LEFT_RIGHT, UP_DOWN = "Center", "2*2Grid", "3*3Grid", "L-R", "U-D"
LAYOUTS = {
    CENTER: Layout(CENTER, 0, ((Slot(0.5, 0.5, 0.5),),)),
    GRID2: Layout(GRID2, 1, (_grid(2),)),
    GRID3: Layout(GRID3, 2, (_grid(3),)),
    LEFT_RIGHT: Layout(LEFT_RIGHT, 3, ((Slot(0.25, 0.5, 0.25),), (Slot(0.75, 0.5, 0.25),))),
    UP_DOWN: Layout(UP_DOWN, 4, ((Slot(0.5, 0.25, 0.25),), (Slot(0.5, 0.75, 0.25),))),
}
CONFIGURATIONS = tuple(LAYOUTS)
CONFIG_BY_CODE = {lay.code: name for name, lay in LAYOUTS.items()}
UNSUPPORTED_CONFIGURATIONS = ("O-IC", "O-IG")

_ALIASES = {
    "center": CENTER, "c": CENTER,
    "2*2grid": GRID2, "2x2grid": GRID2, "2x2": GRID2, "grid2": GRID2, "distribute_four": GRID2,
    "3*3grid": GRID3, "3x3grid": GRID3, "3x3": GRID3, "grid3": GRID3, "distribute_nine": GRID3,
    "l-r": LEFT_RIGHT, "lr": LEFT_RIGHT, "left-right": LEFT_RIGHT, "left_right": LEFT_RIGHT,
    "u-d": UP_DOWN, "ud": UP_DOWN, "up-down": UP_DOWN, "up_down": UP_DOWN,
}


class UnsupportedConfiguration(ValueError):
    pass


def canonical_config(name: str) -> str:
    """Map a user-facing configuration name to its canonical form."""
    if name in LAYOUTS:
        return name
    key = name.strip().lower()
    if key in _ALIASES:
        return _ALIASES[key]
    if key.upper() in UNSUPPORTED_CONFIGURATIONS or key in ("out-incenter", "out-ingrid"):
        raise UnsupportedConfiguration(f"configuration {name!r} is not implemented")
    raise ValueError(f"unknown configuration {name!r}; expected one of {CONFIGURATIONS}")


def governed_attributes(config: str) -> tuple[str, ...]:
    if LAYOUTS[config].is_grid:
        return (TYPE, SIZE, SHADE, COUNT)
    return (TYPE, SIZE, SHADE)


def attribute_range(config: str, attr: str) -> tuple[int, int]:
    if attr == COUNT:
        return 1, len(LAYOUTS[config].components[0])
    return ATTRIBUTE_RANGES[attr]


@dataclass(frozen=True)
class Component:
    type: int
    size: int
    shade: int
    positions: tuple[int, ...] = (0,)

    @property
    def count(self) -> int:
        return len(self.positions)

    def value(self, attr: str) -> int:
        return self.count if attr == COUNT else getattr(self, attr)

    def signature(self) -> tuple[int, int, int, int]:
        return (self.type, self.size, self.shade, self.count)

    def to_json(self) -> dict:
        return {"type": self.type, "size": self.size, "shade": self.shade,
                "count": self.count, "positions": list(self.positions)}

    @classmethod
    def from_json(cls, d: dict) -> "Component":
        comp = cls(int(d["type"]), int(d["size"]), int(d["shade"]), tuple(int(i) for i in d["positions"]))
        if "count" in d and int(d["count"]) != comp.count:
            raise ValueError("component count does not match its occupied positions")
        return comp


@dataclass(frozen=True)
class Panel:
    config: str
    components: tuple[Component, ...]

    def __post_init__(self):
        layout = LAYOUTS[self.config]
        if len(self.components) != len(layout.components):
            raise ValueError(f"{self.config} panels need {len(layout.components)} components")
        for comp, slots in zip(self.components, layout.components):
            if comp.count < 1 or len(set(comp.positions)) != comp.count or any(
                    not 0 <= i < len(slots) for i in comp.positions):
                raise ValueError(f"invalid slot occupancy {comp.positions} for {self.config}")
            if tuple(sorted(comp.positions)) != comp.positions:
                raise ValueError("positions must be sorted")
            for attr in (TYPE, SIZE, SHADE):
                lo, hi = ATTRIBUTE_RANGES[attr]
                if not lo <= comp.value(attr) <= hi:
                    raise ValueError(f"{attr}={comp.value(attr)} outside [{lo}, {hi}]")

    def value(self, component: int, attr: str) -> int:
        return self.components[component].value(attr)

    def signature(self) -> tuple:
        return tuple(c.signature() for c in self.components)

    def occupancy(self, component: int = 0) -> tuple[bool, ...]:
        n = len(LAYOUTS[self.config].components[component])
        occ = set(self.components[component].positions)
        return tuple(i in occ for i in range(n))

    def to_json(self) -> list:
        return [c.to_json() for c in self.components]

    @classmethod
    def from_json(cls, config: str, d: Sequence[dict]) -> "Panel":
        return cls(config, tuple(Component.from_json(c) for c in d))


def transpose_panel(p: Panel) -> Panel:
    """Swap L-R and U-D; the left component becomes the top one."""
    if p.config == LEFT_RIGHT:
        return Panel(UP_DOWN, p.components)
    if p.config == UP_DOWN:
        return Panel(LEFT_RIGHT, p.components)
    raise ValueError(f"transpose is only defined for L-R and U-D panels, not {p.config}")


@dataclass(frozen=True)
class Rule:
    """Row-wise regularity over one attribute of one component.

    ``delta`` parametrises a progression, ``sign`` (+1/-1) an arithmetic
    rule, and ``values``/``shift`` a distribute-three rule: row ``r`` reads
    ``values[(c + shift * r) % 3]`` for column ``c``.
    """

    attr: str
    kind: str
    component: int = 0
    delta: int | None = None
    sign: int | None = None
    values: tuple[int, int, int] | None = None
    shift: int | None = None

    def __post_init__(self):
        if self.attr not in ATTRIBUTES:
            raise ValueError(f"unknown attribute {self.attr!r}")
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if self.kind in (PROGRESSION, ARITHMETIC) and self.attr not in ORDINAL_ATTRIBUTES:
            raise ValueError(f"{self.kind} needs an ordinal attribute, got {self.attr}")
        if self.kind == PROGRESSION and self.delta not in PROGRESSION_DELTAS:
            raise ValueError(f"progression delta must be one of {PROGRESSION_DELTAS}")
        if self.kind == ARITHMETIC and self.sign not in (1, -1):
            raise ValueError("arithmetic sign must be +1 or -1")
        if self.kind == DISTRIBUTE_THREE:
            if self.values is None or len(set(self.values)) != 3:
                raise ValueError("distribute-three needs three distinct values")
            if self.shift not in (1, -1):
                raise ValueError("distribute-three shift must be +1 or -1")

    def row_values(self, row: int) -> tuple[int, int, int]:
        assert self.values is not None and self.shift is not None
        return tuple(self.values[(c + self.shift * row) % 3] for c in range(3))

    def to_json(self) -> dict:
        d = {"component": self.component, "attr": self.attr, "kind": self.kind}
        if self.delta is not None:
            d["delta"] = self.delta
        if self.sign is not None:
            d["sign"] = self.sign
        if self.values is not None:
            d["values"] = list(self.values)
            d["shift"] = self.shift
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Rule":
        return cls(attr=d["attr"], kind=d["kind"], component=int(d.get("component", 0)),
                   delta=d.get("delta"), sign=d.get("sign"),
                   values=tuple(d["values"]) if "values" in d else None, shift=d.get("shift"))


RuleSet = tuple[Rule, ...]


@dataclass(frozen=True)
class RPMProblem:
    """Eight context panels, eight candidates and the 0-based answer position."""

    config: str
    context: tuple[Panel, ...]
    candidates: tuple[Panel, ...]
    answer: int
    rules: RuleSet
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if len(self.context) != 8 or len(self.candidates) != 8:
            raise ValueError("an RPM problem has exactly 8 context panels and 8 candidates")
        if not 0 <= self.answer < 8:
            raise ValueError(f"answer must be in 0..7, got {self.answer}")

    @property
    def answer_index(self) -> int:
        """1-based position of the correct candidate."""
        return self.answer + 1

    @property
    def panels(self) -> tuple[Panel, ...]:
        return self.context + self.candidates

    def with_candidates(self, candidates: Iterable[Panel], answer: int | None = None) -> "RPMProblem":
        return replace(self, candidates=tuple(candidates),
                       answer=self.answer if answer is None else answer)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "rules": [r.to_json() for r in self.rules],
            "panels": [p.to_json() for p in self.context],
            "candidates": [p.to_json() for p in self.candidates],
            "answer": self.answer,
            "seed": self.seed,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, d: dict) -> "RPMProblem":
        config = canonical_config(d["config"])
        return cls(
            config=config,
            context=tuple(Panel.from_json(config, p) for p in d["panels"]),
            candidates=tuple(Panel.from_json(config, p) for p in d["candidates"]),
            answer=int(d["answer"]),
            rules=tuple(Rule.from_json(r) for r in d["rules"]),
            seed=int(d["seed"]),
        )

    @classmethod
    def loads(cls, s: str | bytes) -> "RPMProblem":
        return cls.from_json(json.loads(s))
