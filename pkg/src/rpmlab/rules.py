"""Applying and checking row rules, plus the symbolic oracle solver."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

from .domain import (
    ARITHMETIC, CONSTANT, COUNT, DISTRIBUTE_THREE, PROGRESSION,
    Panel, RPMProblem, Rule, attribute_range,
)


class RuleRejected(ValueError):
    """The rule cannot complete this prefix inside the attribute's range."""


def third_value(rule: Rule, v1: int, v2: int, lo: int, hi: int) -> int:
    """Value the third panel of a row must take; raises RuleRejected if none."""
    if rule.kind == CONSTANT:
        if v1 != v2:
            raise RuleRejected(f"constant rule on unequal prefix ({v1}, {v2})")
        v3 = v2
    elif rule.kind == PROGRESSION:
        if v2 - v1 != rule.delta:
            raise RuleRejected(f"prefix ({v1}, {v2}) is not a step of {rule.delta}")
        v3 = v2 + rule.delta
    elif rule.kind == ARITHMETIC:
        v3 = v1 + rule.sign * v2
    else:
        rest = set(rule.values) - {v1, v2}
        if v1 == v2 or len(rest) != 1:
            raise RuleRejected(f"prefix ({v1}, {v2}) does not fit triple {rule.values}")
        v3 = rest.pop()
    if not lo <= v3 <= hi:
        raise RuleRejected(f"{rule.kind} on {rule.attr} gives {v3}, outside [{lo}, {hi}]")
    return v3


def row_holds(rule: Rule, v1: int, v2: int, v3: int) -> bool:
    if rule.kind == CONSTANT:
        return v1 == v2 == v3
    if rule.kind == PROGRESSION:
        return v2 - v1 == rule.delta and v3 - v2 == rule.delta
    if rule.kind == ARITHMETIC:
        return v3 == v1 + rule.sign * v2
    if rule.kind == DISTRIBUTE_THREE:
        return sorted((v1, v2, v3)) == sorted(rule.values)
    raise ValueError(f"unknown rule kind {rule.kind!r}")


def apply_rule(rule: Rule, prefix: Sequence[Panel]) -> Panel:
    """Complete a two-panel row so that ``rule`` holds.

    The result copies the second panel and overwrites the governed
    attribute. When a count changes, the lowest-numbered slots are occupied.
    """
    if len(prefix) != 2:
        raise ValueError("a row prefix has exactly two panels")
    a, b = prefix
    lo, hi = attribute_range(b.config, rule.attr)
    v3 = third_value(rule, a.value(rule.component, rule.attr), b.value(rule.component, rule.attr), lo, hi)
    comp = b.components[rule.component]
    if rule.attr == COUNT:
        if v3 != comp.count:
            comp = replace(comp, positions=tuple(range(v3)))
    else:
        comp = replace(comp, **{rule.attr: v3})
    comps = list(b.components)
    comps[rule.component] = comp
    return Panel(b.config, tuple(comps))


def check_rule(rule: Rule, row: Sequence[Panel]) -> bool:
    if len(row) != 3:
        raise ValueError("a row has exactly three panels")
    try:
        vals = [p.value(rule.component, rule.attr) for p in row]
    except IndexError:
        return False
    return row_holds(rule, *vals)


def rows_of(p: RPMProblem, candidate: Panel) -> tuple[tuple[Panel, ...], ...]:
    c = p.context
    return (c[0:3], c[3:6], (c[6], c[7], candidate))


def check_problem(p: RPMProblem, candidate: Panel) -> bool:
    """True iff every declared rule holds on all three rows with ``candidate`` filled in."""
    if candidate.config != p.config:
        return False
    rows = rows_of(p, candidate)
    return all(check_rule(rule, row) for rule in p.rules for row in rows)


def oracle_solve(p: RPMProblem) -> set[int]:
    """0-based indices of the candidates consistent with the declared rules."""
    return {i for i, cand in enumerate(p.candidates) if check_problem(p, cand)}


def oracle_predict(p: RPMProblem) -> int:
    """Single-answer form of the oracle; the lowest consistent index wins."""
    found = oracle_solve(p)
    return min(found) if found else 0
