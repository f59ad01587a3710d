"""Seeded procedural generation of unambiguous RPM problems."""

from __future__ import annotations

import numpy as np

from .domain import (
    ARITHMETIC, CONSTANT, COUNT, DISTRIBUTE_THREE, PROGRESSION, PROGRESSION_DELTAS, TYPE,
    LAYOUTS, Component, Panel, RPMProblem, Rule, attribute_range, canonical_config,
    governed_attributes,
)
from .rules import check_problem, oracle_solve

MAX_RETRIES = 1000
MASK64 = (1 << 64) - 1


class GenerationError(RuntimeError):
    pass


class DistractorsExhausted(GenerationError):
    pass


class _Resample(Exception):
    pass


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, ordinal: int) -> int:
    """Per-problem seed: ``splitmix64(seed XOR splitmix64(ordinal))``."""
    return splitmix64((seed & MASK64) ^ splitmix64(ordinal))


def _admissible_kinds(config: str, attr: str) -> list[str]:
    if attr == TYPE:
        return [DISTRIBUTE_THREE]
    kinds = [DISTRIBUTE_THREE]
    lo, hi = attribute_range(config, attr)
    if any(2 * abs(d) <= hi - lo for d in PROGRESSION_DELTAS):
        kinds.append(PROGRESSION)
    if _arithmetic_pairs(lo, hi, 1) or _arithmetic_pairs(lo, hi, -1):
        kinds.append(ARITHMETIC)
    return kinds


def _arithmetic_pairs(lo: int, hi: int, sign: int) -> list[tuple[int, int]]:
    # the second operand is kept >= 1 so the row never degenerates to a copy
    return [(a, b) for a in range(lo, hi + 1) for b in range(max(lo, 1), hi + 1)
            if lo <= a + sign * b <= hi]


def _sample_rule(config: str, attr: str, kind: str, component: int, rng) -> Rule:
    lo, hi = attribute_range(config, attr)
    if kind == PROGRESSION:
        deltas = [d for d in PROGRESSION_DELTAS if 2 * abs(d) <= hi - lo]
        return Rule(attr, kind, component, delta=int(rng.choice(deltas)))
    if kind == ARITHMETIC:
        signs = [s for s in (1, -1) if _arithmetic_pairs(lo, hi, s)]
        return Rule(attr, kind, component, sign=int(rng.choice(signs)))
    if kind == DISTRIBUTE_THREE:
        vals = rng.choice(np.arange(lo, hi + 1), size=3, replace=False)
        return Rule(attr, kind, component, values=tuple(int(v) for v in vals),
                    shift=int(rng.choice([1, -1])))
    return Rule(attr, CONSTANT, component)


def sample_ruleset(config: str, rng: np.random.Generator, max_rules: int = 3) -> tuple[Rule, ...]:
    """One rule per governed attribute of every component.

    Between 1 and ``max_rules`` attributes per component get a non-constant
    rule; the remaining attributes are held constant.
    """
    config = canonical_config(config)
    attrs = governed_attributes(config)
    rules = []
    for comp in range(len(LAYOUTS[config].components)):
        k = int(rng.integers(1, min(max_rules, len(attrs)) + 1))
        active = set(rng.choice(len(attrs), size=k, replace=False).tolist())
        for i, attr in enumerate(attrs):
            if i in active:
                kind = str(rng.choice(_admissible_kinds(config, attr)))
            else:
                kind = CONSTANT
            rules.append(_sample_rule(config, attr, kind, comp, rng))
    return tuple(rules)


def _rule_matrix(config: str, rule: Rule, rng) -> list[list[int]]:
    """3x3 values of the rule's attribute, row-major."""
    lo, hi = attribute_range(config, rule.attr)
    if rule.kind == CONSTANT:
        return [[v] * 3 for v in rng.integers(lo, hi + 1, size=3).tolist()]
    if rule.kind == PROGRESSION:
        d = rule.delta
        starts = [a for a in range(lo, hi + 1) if lo <= a + 2 * d <= hi]
        return [[a, a + d, a + 2 * d] for a in rng.choice(starts, size=3).tolist()]
    if rule.kind == ARITHMETIC:
        pairs = _arithmetic_pairs(lo, hi, rule.sign)
        idx = rng.integers(len(pairs), size=3)
        return [[a, b, a + rule.sign * b] for a, b in (pairs[i] for i in idx)]
    return [list(rule.row_values(r)) for r in range(3)]


def _positions(config: str, count: int, rng) -> tuple[int, ...]:
    n = len(LAYOUTS[config].components[0])
    if n == 1:
        return (0,)
    return tuple(sorted(int(i) for i in rng.choice(n, size=count, replace=False)))


def _build_grid(config: str, rules, rng) -> list[Panel]:
    ncomp = len(LAYOUTS[config].components)
    values = [dict() for _ in range(ncomp)]
    for rule in rules:
        values[rule.component][rule.attr] = _rule_matrix(config, rule, rng)
    panels = []
    for k in range(9):
        r, c = divmod(k, 3)
        comps = []
        for ci in range(ncomp):
            v = {a: m[r][c] for a, m in values[ci].items()}
            count = v.get(COUNT, 1)
            comps.append(Component(v[TYPE], v["size"], v["shade"], _positions(config, count, rng)))
        panels.append(Panel(config, tuple(comps)))
    return panels


def _perturb(config: str, panel: Panel, rng, n_changes: int) -> Panel:
    attrs = [(ci, a) for ci in range(len(panel.components)) for a in governed_attributes(config)]
    picks = rng.choice(len(attrs), size=min(n_changes, len(attrs)), replace=False)
    comps = list(panel.components)
    for idx in picks.tolist():
        ci, attr = attrs[idx]
        lo, hi = attribute_range(config, attr)
        cur = comps[ci].value(attr)
        choices = [v for v in range(lo, hi + 1) if v != cur]
        new = int(rng.choice(choices))
        c = comps[ci]
        if attr == COUNT:
            comps[ci] = Component(c.type, c.size, c.shade, _positions(config, new, rng))
        else:
            comps[ci] = Component(**{**dict(type=c.type, size=c.size, shade=c.shade,
                                            positions=c.positions), attr: new})
    return Panel(config, tuple(comps))


def generate_distractors(correct: Panel, rules, rng: np.random.Generator,
                         context=None, n: int = 7, max_attempts: int = 200) -> list[Panel]:
    """Perturb 1-2 attribute values of ``correct`` until ``n`` distinct violators exist.

    With the eight ``context`` panels given, any perturbation that still
    satisfies ``rules`` is discarded. Every governed attribute carries a
    rule that fixes the third value of a row, so without context the
    perturbations violate the rules by construction.
    """
    stub = None
    if context is not None:
        stub = RPMProblem(correct.config, tuple(context), (correct,) * 8, 0, tuple(rules))
    seen = {correct.signature()}
    out: list[Panel] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > max_attempts:
            raise DistractorsExhausted(f"found only {len(out)} of {n} distinct distractors")
        cand = _perturb(correct.config, correct, rng, int(rng.integers(1, 3)))
        sig = cand.signature()
        if sig in seen:
            continue
        if stub is not None and check_problem(stub, cand):
            continue
        seen.add(sig)
        out.append(cand)
    return out


def generate_problem(config: str, seed: int, max_rules: int = 3) -> RPMProblem:
    """Deterministic in ``(config, seed)``; retries internally on rejection."""
    config = canonical_config(config)
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RETRIES):
        try:
            rules = sample_ruleset(config, rng, max_rules)
            panels = _build_grid(config, rules, rng)
            correct = panels[8]
            stub = RPMProblem(config, tuple(panels[:8]), (correct,) * 8, 0, rules, seed)
            if not check_problem(stub, correct):
                raise _Resample("grid does not satisfy its own rules")
            distractors = generate_distractors(correct, rules, rng, context=panels[:8])
            answer = int(rng.integers(8))
            cands = distractors[:answer] + [correct] + distractors[answer:]
            problem = RPMProblem(config, tuple(panels[:8]), tuple(cands), answer, rules, seed)
            if oracle_solve(problem) != {answer}:
                raise _Resample("ambiguous problem")
            return problem
        except (_Resample, DistractorsExhausted):
            continue
    raise GenerationError(f"no valid {config} problem after {MAX_RETRIES} attempts (seed {seed})")
