"""Binary dataset packs (``RPMD``) and their label-redacted view.

Layout, little-endian throughout::

    "RPMD" | version u16 | count u32 | height u16 | width u16
    per problem:
        config id u8 | answer u8 (0-based)
        annotation length u32 | annotation JSON (the symbolic problem)
        16 images of height*width u8, context x1..x8 then candidates y1..y8
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .domain import CONFIG_BY_CODE, LAYOUTS, RPMProblem, canonical_config
from .generator import derive_seed, generate_problem
from .raster import render_problem

MAGIC = b"RPMD"
VERSION = 1
_HEADER = struct.Struct("<4sHIHH")


class PackError(ValueError):
    pass


class LabelAccessError(RuntimeError):
    """Raised when a label-blind consumer touches answers or annotations."""


@dataclass
class Pack:
    resolution: tuple[int, int]
    config_codes: np.ndarray  # (N,) uint8
    answers: np.ndarray  # (N,) uint8, 0-based
    annotations: list[bytes]
    images: np.ndarray  # (N, 16, H, W) uint8

    def __len__(self) -> int:
        return len(self.config_codes)

    @property
    def configs(self) -> list[str]:
        return [CONFIG_BY_CODE[int(c)] for c in self.config_codes]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for c in self.configs:
            out[c] = out.get(c, 0) + 1
        return out

    def problem(self, i: int) -> RPMProblem:
        return RPMProblem.loads(self.annotations[i])

    def float_images(self, idx) -> np.ndarray:
        """(len(idx), 16, H, W) float32 in [0, 1]."""
        return self.images[idx].astype(np.float32) / np.float32(255)

    def unlabeled(self) -> "UnlabeledPack":
        return UnlabeledPack(self.resolution, self.config_codes, self.images)

    def to_bytes(self) -> bytes:
        h, w = self.resolution
        buf = io.BytesIO()
        buf.write(_HEADER.pack(MAGIC, VERSION, len(self), h, w))
        for i in range(len(self)):
            ann = self.annotations[i]
            buf.write(struct.pack("<BBI", int(self.config_codes[i]), int(self.answers[i]), len(ann)))
            buf.write(ann)
            buf.write(np.ascontiguousarray(self.images[i], dtype=np.uint8).tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        try:
            path.write_bytes(self.to_bytes())
        except OSError as exc:
            raise OSError(f"cannot write dataset pack {path}: {exc}") from exc


@dataclass
class UnlabeledPack:
    """Images and configuration tags only; answers are not reachable."""

    resolution: tuple[int, int]
    config_codes: np.ndarray
    images: np.ndarray

    def __len__(self) -> int:
        return len(self.config_codes)

    @property
    def configs(self) -> list[str]:
        return [CONFIG_BY_CODE[int(c)] for c in self.config_codes]

    @property
    def answers(self):
        raise LabelAccessError("answers are not available to label-blind training")

    def problem(self, i: int):
        raise LabelAccessError("symbolic annotations carry the answer and are not available")

    def float_images(self, idx) -> np.ndarray:
        return self.images[idx].astype(np.float32) / np.float32(255)

    def unlabeled(self) -> "UnlabeledPack":
        return self


def pack_from_problems(problems: Sequence[RPMProblem], resolution: int = 32) -> Pack:
    n = len(problems)
    images = np.empty((n, 16, resolution, resolution), dtype=np.uint8)
    for i, p in enumerate(problems):
        images[i] = render_problem(p, resolution)
    return Pack(
        resolution=(resolution, resolution),
        config_codes=np.array([LAYOUTS[p.config].code for p in problems], dtype=np.uint8),
        answers=np.array([p.answer for p in problems], dtype=np.uint8),
        annotations=[p.dumps().encode("utf-8") for p in problems],
        images=images,
    )


def generate_dataset(counts: Mapping[str, int], seed: int, resolution: int = 32,
                     path=None, max_rules: int = 3) -> Pack:
    """Generate ``counts[config]`` problems per configuration.

    Problems are numbered in configuration-code order and problem ``k``
    uses ``derive_seed(seed, k)``.
    """
    plan = sorted(((canonical_config(c), int(n)) for c, n in counts.items()),
                  key=lambda cn: LAYOUTS[cn[0]].code)
    if any(n < 1 for _, n in plan):
        raise ValueError("every configuration needs a count of at least 1")
    problems = []
    ordinal = 0
    for config, n in plan:
        for _ in range(n):
            problems.append(generate_problem(config, derive_seed(seed, ordinal), max_rules))
            ordinal += 1
    pack = pack_from_problems(problems, resolution)
    if path is not None:
        pack.save(path)
    return pack


def parse_pack(data: bytes) -> Pack:
    if len(data) < _HEADER.size:
        raise PackError("dataset pack truncated in header")
    magic, version, count, h, w = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise PackError("not a dataset pack (bad magic)")
    if version != VERSION:
        raise PackError(f"unsupported dataset pack version {version}")
    pos = _HEADER.size
    codes = np.empty(count, dtype=np.uint8)
    answers = np.empty(count, dtype=np.uint8)
    images = np.empty((count, 16, h, w), dtype=np.uint8)
    annotations = []
    img_bytes = 16 * h * w
    for i in range(count):
        if pos + 6 > len(data):
            raise PackError(f"dataset pack truncated at problem {i}")
        code, ans, alen = struct.unpack_from("<BBI", data, pos)
        pos += 6
        if code not in CONFIG_BY_CODE:
            raise PackError(f"unknown configuration id {code} at problem {i}")
        if ans > 7:
            raise PackError(f"answer index {ans} out of range at problem {i}")
        if pos + alen + img_bytes > len(data):
            raise PackError(f"dataset pack truncated at problem {i}")
        annotations.append(bytes(data[pos:pos + alen]))
        pos += alen
        images[i] = np.frombuffer(data, dtype=np.uint8, count=img_bytes, offset=pos).reshape(16, h, w)
        pos += img_bytes
        codes[i], answers[i] = code, ans
    if pos != len(data):
        raise PackError(f"{len(data) - pos} trailing bytes after the last problem")
    return Pack((h, w), codes, answers, annotations, images)


def load_pack(path) -> Pack:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset pack {path}: {exc}") from exc
    return parse_pack(data)
