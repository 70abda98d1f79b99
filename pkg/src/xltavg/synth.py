"""Synthetic multilingual classification tasks and few-shot sampling.

Every language sees the same class-conditional Gaussian clusters in a shared
canonical space; a language is that space seen through its own rotation and
offset, with some label noise. The first language is the source.
"""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from xltavg.rng import SplitMix64


class Role(enum.Enum):
    TRAIN = "train"
    SOURCE_DEV = "source_dev"
    TARGET_DEV = "target_dev"
    TARGET_TEST = "target_test"


SOURCE_ROLES = (Role.TRAIN, Role.SOURCE_DEV)
TARGET_ROLES = (Role.TARGET_DEV, Role.TARGET_TEST)
SHOT_COUNTS = (5, 10, 50, 100, 250)
SHOT_SEEDS = (42, 43, 44, 45, 46)


@dataclass
class LanguageSpec:
    code: str
    rotation: np.ndarray
    offset: np.ndarray
    label_noise: float = 0.0

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        d = self.rotation.shape[0]
        if not self.code:
            raise ValueError("language code must be non-empty")
        if self.rotation.shape != (d, d) or self.offset.shape != (d,):
            raise ValueError(f"{self.code}: rotation must be (d, d) and offset (d,)")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(d), rtol=0, atol=1e-9):
            raise ValueError(f"{self.code}: rotation is not orthogonal")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError(f"{self.code}: label_noise must lie in [0, 1)")

    @classmethod
    def identity(cls, code: str, dim: int) -> "LanguageSpec":
        return cls(code, np.eye(dim), np.zeros(dim))


def random_orthogonal(dim: int, rng: SplitMix64) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal((dim, dim)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def make_language(code: str, dim: int, angle: float, offset: float = 0.0,
                  label_noise: float = 0.0, seed: int = 0) -> LanguageSpec:
    """A language rotated by ``angle`` radians in every plane of a random orthonormal basis.

    Larger angle and offset norm make the language more distant from the
    canonical (source) space.
    """
    rng = SplitMix64.derived(seed, "language", code)
    basis = random_orthogonal(dim, rng)
    block = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        block[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    rotation = basis @ block @ basis.T
    # re-orthonormalize so rounding never trips the 1e-9 check
    u, _, vt = np.linalg.svd(rotation)
    direction = rng.normal(dim)
    shift = offset * direction / np.linalg.norm(direction) if offset else np.zeros(dim)
    return LanguageSpec(code, u @ vt, shift, label_noise)


@dataclass
class DatasetSplit:
    x: np.ndarray
    y: np.ndarray
    lang: np.ndarray
    role: Role
    n_classes: int

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.lang = np.asarray(self.lang, dtype=object)
        self.role = Role(self.role)
        if self.x.ndim != 2 or len(self.x) != len(self.y) or len(self.y) != len(self.lang):
            raise ValueError("x must be (n, d) with matching y and lang lengths")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def languages(self) -> list[str]:
        return sorted(set(self.lang.tolist()))

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    def for_language(self, code: str) -> "DatasetSplit":
        mask = self.lang == code
        return DatasetSplit(self.x[mask], self.y[mask], self.lang[mask], self.role, self.n_classes)

    def by_language(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        out = {}
        for code in self.languages:
            mask = self.lang == code
            out[code] = (self.x[mask], self.y[mask])
        return out

    def take(self, index: np.ndarray) -> "DatasetSplit":
        return DatasetSplit(self.x[index], self.y[index], self.lang[index], self.role, self.n_classes)

    @classmethod
    def concat(cls, parts: Sequence["DatasetSplit"], role: Role | None = None) -> "DatasetSplit":
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.lang for p in parts]),
            role or parts[0].role,
            max(p.n_classes for p in parts),
        )

    def to_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for x, y, code in zip(self.x.tolist(), self.y.tolist(), self.lang.tolist()):
                fh.write(json.dumps({"lang": code, "label": y, "x": x}, separators=(",", ":")) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | os.PathLike, role: Role | str = Role.TRAIN,
                   n_classes: int | None = None) -> "DatasetSplit":
        xs, ys, langs = [], [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    xs.append([float(v) for v in obj["x"]])
                    ys.append(int(obj["label"]))
                    langs.append(str(obj["lang"]))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: malformed example ({exc})") from None
        if not xs:
            raise ValueError(f"{path}: no examples")
        if len({len(x) for x in xs}) != 1:
            raise ValueError(f"{path}: inconsistent feature dimensions")
        n_classes = n_classes if n_classes is not None else max(ys) + 1
        return cls(np.array(xs), np.array(ys), np.array(langs, dtype=object), Role(role), n_classes)


def _draw(n: int, lang: LanguageSpec, means: np.ndarray, noise: np.ndarray,
          rng: SplitMix64) -> tuple[np.ndarray, np.ndarray]:
    n_classes, dim = means.shape
    labels = (rng.u64(n) % np.uint64(n_classes)).astype(np.int64)
    canonical = means[labels] + rng.normal((n, dim)) * noise
    x = canonical @ lang.rotation.T + lang.offset
    if lang.label_noise > 0:
        flip = rng.uniform(n) < lang.label_noise
        # a flipped label moves to one of the other classes, uniformly
        shift = 1 + (rng.u64(n) % np.uint64(max(n_classes - 1, 1))).astype(np.int64)
        labels = np.where(flip, (labels + shift) % n_classes, labels)
    return x, labels


def generate_task(n_classes: int, feature_dim: int, languages: Sequence[LanguageSpec],
                  sizes: Mapping[Role | str, int], seed: int, class_sep: float = 3.0,
                  noise_scale: float | Sequence[float] = 1.0) -> dict[Role, DatasetSplit]:
    """Generate train/dev/test splits; ``sizes`` gives examples per language per role.

    Class means sit on scaled one-hot axes of the canonical space, so every
    pair of class means is ``class_sep`` apart. ``noise_scale`` is the
    per-dimension standard deviation of the within-class noise. Source roles
    (train, source_dev) hold the first language only; target roles hold the
    remaining ones.
    """
    if n_classes < 2 or feature_dim < n_classes:
        raise ValueError("need n_classes >= 2 and feature_dim >= n_classes")
    if len(languages) < 2:
        raise ValueError("need a source language and at least one target language")
    codes = [lang.code for lang in languages]
    if len(set(codes)) != len(codes):
        raise ValueError("duplicate language codes")
    for lang in languages:
        if lang.rotation.shape[0] != feature_dim:
            raise ValueError(f"{lang.code}: rotation does not match feature_dim={feature_dim}")
    sizes = {Role(r): int(n) for r, n in sizes.items()}
    for role in Role:
        if sizes.get(role, 0) < 1:
            raise ValueError(f"size for {role.value} must be >= 1")
    noise = np.broadcast_to(np.asarray(noise_scale, dtype=np.float64), (feature_dim,))
    means = np.zeros((n_classes, feature_dim))
    means[np.arange(n_classes), np.arange(n_classes)] = class_sep / np.sqrt(2.0)

    splits = {}
    for role in Role:
        members = languages[:1] if role in SOURCE_ROLES else languages[1:]
        xs, ys, ls = [], [], []
        for lang in members:
            rng = SplitMix64.derived(seed, "data", role.value, lang.code)
            x, y = _draw(sizes[role], lang, means, noise, rng)
            xs.append(x)
            ys.append(y)
            ls.append(np.full(len(y), lang.code, dtype=object))
        splits[role] = DatasetSplit(np.concatenate(xs), np.concatenate(ys), np.concatenate(ls), role, n_classes)
    return splits


@dataclass(frozen=True)
class ShotSpec:
    s: int
    seed: int

    def __post_init__(self) -> None:
        if self.s < 1:
            raise ValueError("shot count must be >= 1")


def sample_shots(pool: DatasetSplit, spec: ShotSpec) -> tuple[DatasetSplit, DatasetSplit]:
    """Shuffle each language's pool and take the first ``s`` examples as shots.

    The shuffle for a language depends only on (seed, language code), so the
    shots for a smaller ``s`` are a prefix of the shots for a larger one. The
    rest of the pool becomes the validation split.
    """
    shots, rest = [], []
    for code in pool.languages:
        index = np.flatnonzero(pool.lang == code)
        if len(index) <= spec.s:
            raise ValueError(f"{code}: pool of {len(index)} examples cannot give {spec.s} shots plus validation")
        order = SplitMix64.derived(spec.seed, "shots", code).permutation(len(index))
        index = index[order]
        shots.append(pool.take(index[:spec.s]))
        rest.append(pool.take(index[spec.s:]))
    return DatasetSplit.concat(shots, Role.TRAIN), DatasetSplit.concat(rest, pool.role)
