# %% [markdown]
# # Puzzles and the rule oracle
#
# A problem is a 3x3 matrix of panels whose last panel is missing, plus
# eight candidate completions. Every row obeys the same small set of rules,
# one per attribute. This walk-through generates a problem, reads its rules,
# checks them with the symbolic oracle and writes the panels out as images.
#
# Run with `python3 demos/01_puzzles_and_rules.py [outdir]`.

# %%
import sys
from pathlib import Path

import numpy as np

from rpmlab.generator import derive_seed, generate_problem
from rpmlab.raster import render_panel, write_pgm
from rpmlab.rules import check_problem, check_rule, oracle_solve

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# %% [markdown]
# Problems are a pure function of (configuration, seed). Dataset packs
# derive per-problem seeds from a pack seed and the problem's ordinal.

# %%
problem = generate_problem("2*2Grid", derive_seed(2024, 0))
print(f"configuration {problem.config}, seed {problem.seed:#018x}")
for rule in problem.rules:
    extra = {k: v for k, v in (("delta", rule.delta), ("sign", rule.sign), ("values", rule.values))
             if v is not None}
    print(f"  {rule.attr:6s} {rule.kind:17s} {extra}")

# %% [markdown]
# Each of the two complete rows satisfies every declared rule; that is what
# a solver has to infer from pixels alone.

# %%
for r in range(2):
    row = problem.context[3 * r:3 * r + 3]
    print(f"row {r + 1}:", all(check_rule(rule, row) for rule in problem.rules))

# %% [markdown]
# Distractors are built from the correct panel by changing one or two
# attributes, then kept only if they break at least one rule. So the oracle
# always finds exactly one consistent candidate.

# %%
verdicts = [check_problem(problem, c) for c in problem.candidates]
print("consistent candidates:", [i + 1 for i, ok in enumerate(verdicts) if ok],
      "| stored answer:", problem.answer_index)
assert oracle_solve(problem) == {problem.answer}

# %% [markdown]
# Rendering is integer-only and therefore bit-reproducible. The 16 panels
# go to PGM files, which most image viewers open directly.

# %%
for k, panel in enumerate(problem.context):
    write_pgm(render_panel(panel, 96), out / f"context_{k + 1}.pgm")
for k, panel in enumerate(problem.candidates):
    write_pgm(render_panel(panel, 96), out / f"candidate_{k + 1}.pgm")
sheet = np.full((3 * 96 + 4, 3 * 96 + 4), 128, np.uint8)
for k, panel in enumerate([*problem.context, problem.candidates[problem.answer]]):
    r, c = divmod(k, 3)
    sheet[2 + 96 * r:2 + 96 * (r + 1), 2 + 96 * c:2 + 96 * (c + 1)] = render_panel(panel, 96)
write_pgm(sheet, out / "solved_matrix.pgm")
print(f"wrote 17 images to {out}/")

# %% [markdown]
# The JSON record carries everything needed to rebuild the problem.

# %%
print(problem.dumps()[:160], "...")
