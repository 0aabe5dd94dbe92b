"""Attacker-side data transformation: trigger stamping, label mapping, poisoning."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import LabeledSet
from .errors import ConfigError, PoisoningDegenerateError, TriggerSpecError

PATCH_PATTERNS = ("square", "cross", "checkerboard", "random_bits")
FILTER_PATTERNS = ("channel_scale", "channel_shift")
MAPPING_KINDS = ("M2O", "M2M", "Mixed")


@dataclass(frozen=True)
class TriggerSpec:
    family: str = "patch"
    pattern: str = "checkerboard"
    area_fraction: float = 0.03
    color: tuple = (1.0,)
    # "random" or an (x, y) top-left corner, x = column
    location: object = "random"
    pattern_seed: int = 0
    # global affine filter parameters (filter family only)
    scale: tuple | None = None
    shift: tuple | None = None

    def __post_init__(self):
        if self.family == "patch":
            if self.pattern not in PATCH_PATTERNS:
                raise TriggerSpecError(f"unknown patch pattern {self.pattern!r}")
            if not 0 < self.area_fraction <= 0.10:
                raise TriggerSpecError(f"area_fraction {self.area_fraction} outside (0, 0.10]")
            if any(not 0 <= c <= 1 for c in self.color):
                raise TriggerSpecError("trigger colour values must lie in [0, 1]")
            if self.location != "random" and len(tuple(self.location)) != 2:
                raise TriggerSpecError("location must be 'random' or an (x, y) pair")
        elif self.family == "filter":
            if self.pattern not in FILTER_PATTERNS:
                raise TriggerSpecError(f"unknown filter pattern {self.pattern!r}")
        else:
            raise TriggerSpecError(f"unknown trigger family {self.family!r}")

    def to_dict(self):
        d = asdict(self)
        for key in ("color", "scale", "shift", "location"):
            if isinstance(d[key], tuple):
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("color", "scale", "shift"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if isinstance(d.get("location"), list):
            d["location"] = tuple(d["location"])
        return cls(**d)


def patch_side(spec, height, width):
    s = max(1, int(math.floor(math.sqrt(spec.area_fraction * height * width) + 0.5)))
    if s > min(height, width):
        raise TriggerSpecError(f"patch side {s} exceeds image {height}x{width}")
    return s


def patch_pattern(spec, side):
    """Binary s x s mask of the trigger pattern."""
    if spec.pattern == "square":
        return np.ones((side, side), dtype=np.float32)
    if spec.pattern == "cross":
        m = np.zeros((side, side), dtype=np.float32)
        t = max(1, side // 3)
        lo = (side - t) // 2
        m[lo:lo + t, :] = 1
        m[:, lo:lo + t] = 1
        return m
    if spec.pattern == "checkerboard":
        i, j = np.indices((side, side))
        return ((i + j) % 2 == 0).astype(np.float32)
    bits = np.random.default_rng(spec.pattern_seed).integers(0, 2, size=(side, side)).astype(np.float32)
    if not bits.any():
        bits[0, 0] = 1
    return bits


def _filter_params(spec, channels):
    scale = np.ones(channels) if spec.scale is None else np.resize(np.asarray(spec.scale, float), channels)
    shift = np.zeros(channels) if spec.shift is None else np.resize(np.asarray(spec.shift, float), channels)
    return scale[:, None, None], shift[:, None, None]


def stamp_trigger(image, spec, rng=None):
    """Return a triggered copy of one ``[C, H, W]`` image; the input is not modified."""
    image = np.asarray(image, dtype=np.float32)
    out = image.copy()
    channels, h, w = image.shape
    if spec.family == "filter":
        scale, shift = _filter_params(spec, channels)
        return np.clip(out * scale + shift, 0.0, 1.0).astype(np.float32)
    s = patch_side(spec, h, w)
    if spec.location == "random":
        if rng is None:
            raise TriggerSpecError("random trigger location needs an rng")
        top = int(rng.integers(0, h - s + 1))
        left = int(rng.integers(0, w - s + 1))
    else:
        left, top = (int(v) for v in spec.location)
        if not (0 <= top <= h - s and 0 <= left <= w - s):
            raise TriggerSpecError(f"fixed location {spec.location} does not fit a {s}x{s} patch")
    colour = np.resize(np.asarray(spec.color, dtype=np.float32), channels)
    out[:, top:top + s, left:left + s] = patch_pattern(spec, s)[None] * colour[:, None, None]
    return out


def stamp_batch(images, spec, rng=None):
    return np.stack([stamp_trigger(img, spec, rng) for img in images]) if len(images) else np.asarray(images)


@dataclass(frozen=True)
class LabelMapping:
    kind: str
    class_count: int
    target: int | None = None
    permutation: tuple | None = None
    # per-class "to_target" | "permuted" | "unchanged" (Mixed only)
    partition: tuple | None = None

    def __post_init__(self):
        c = self.class_count
        if self.kind not in MAPPING_KINDS:
            raise ConfigError(f"unknown mapping kind {self.kind!r}")
        if self.kind in ("M2O", "Mixed") and not (self.target is not None and 0 <= self.target < c):
            raise ConfigError(f"{self.kind} mapping needs a target in [0, {c})")
        if self.kind in ("M2M", "Mixed"):
            perm = self.permutation
            if perm is None or sorted(perm) != list(range(c)):
                raise ConfigError("permutation must be a permutation of range(class_count)")
        if self.kind == "M2M" and any(p == i for i, p in enumerate(self.permutation)):
            raise ConfigError("M2M permutation must have no fixed points")
        if self.kind == "Mixed":
            part = self.partition
            if part is None or len(part) != c or any(p not in ("to_target", "permuted", "unchanged") for p in part):
                raise ConfigError("Mixed mapping needs a per-class partition")
            for y in range(c):
                if part[y] == "permuted":
                    dest = self.permutation[y]
                    if dest == y or part[dest] != "permuted":
                        raise ConfigError("permuted classes must map to other permuted classes")

    def changes(self, y):
        """True when a triggered sample of class ``y`` gets a new label."""
        return map_label(y, self) != y

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("permutation", "partition"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def map_label(y, mapping):
    if mapping.kind == "M2O":
        return mapping.target
    if mapping.kind == "M2M":
        return mapping.permutation[y]
    role = mapping.partition[y]
    if role == "to_target":
        return mapping.target
    if role == "permuted":
        return mapping.permutation[y]
    return y


def map_labels(labels, mapping):
    return np.array([map_label(int(y), mapping) for y in labels], dtype=np.int64)


def m2o(class_count, target):
    return LabelMapping("M2O", class_count, target=target)


def shift_permutation(class_count, shift=1):
    return tuple((y + shift) % class_count for y in range(class_count))


def random_derangement(class_count, rng):
    while True:
        perm = rng.permutation(class_count)
        if not np.any(perm == np.arange(class_count)):
            return tuple(int(p) for p in perm)


def m2m(class_count, rng=None):
    perm = shift_permutation(class_count) if rng is None else random_derangement(class_count, rng)
    return LabelMapping("M2M", class_count, permutation=perm)


def mixed(class_count, rng):
    """Default Mixed mapping: a third of the classes go to the target, a third
    are cyclically permuted among themselves, the rest (target included) keep
    their label."""
    if class_count < 4:
        raise ConfigError("Mixed mapping needs at least 4 classes")
    order = [int(v) for v in rng.permutation(class_count)]
    target = order[0]
    n_target = max(1, int(round(class_count / 3)))
    n_perm = max(2, int(round(class_count / 3)))
    rest = order[1:]
    to_target, permuted = rest[:n_target], rest[n_target:n_target + n_perm]
    if len(permuted) < 2:
        raise ConfigError(f"cannot build a Mixed mapping for {class_count} classes")
    partition = ["unchanged"] * class_count
    perm = list(range(class_count))
    for y in to_target:
        partition[y] = "to_target"
    for i, y in enumerate(permuted):
        partition[y] = "permuted"
        perm[y] = permuted[(i + 1) % len(permuted)]
    return LabelMapping("Mixed", class_count, target=target, permutation=tuple(perm), partition=tuple(partition))


@dataclass(frozen=True)
class PoisonConfig:
    trigger: TriggerSpec
    mapping: LabelMapping
    ratio: float = 0.15
    noise_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.ratio <= 0.5:
            raise ConfigError(f"poisoning ratio {self.ratio} outside (0, 0.5]")
        if not 0 <= self.noise_amplitude <= 0.2:
            raise ConfigError(f"noise amplitude {self.noise_amplitude} outside [0, 0.2]")

    def to_dict(self):
        return {"trigger": self.trigger.to_dict(), "mapping": self.mapping.to_dict(),
                "ratio": self.ratio, "noise_amplitude": self.noise_amplitude, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(TriggerSpec.from_dict(d["trigger"]), LabelMapping.from_dict(d["mapping"]),
                   float(d["ratio"]), float(d["noise_amplitude"]), int(d["seed"]))


def poisoned_count(ratio, n):
    return int(math.floor(ratio * n + 0.5))


def add_background_noise(images, amplitude, rng):
    if amplitude == 0:
        return images
    noisy = images + rng.uniform(-amplitude, amplitude, size=images.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def poison_dataset(data, cfg, holdout=None):
    """Replace round(P*n) training samples by triggered, relabelled copies.

    Returns ``(train_poisoned, trigger_eval)``. ``trigger_eval`` is a fully
    stamped copy of ``holdout`` carrying mapped labels (``None`` when no
    holdout is given); for Mixed mappings the classes whose label stays
    unchanged are left out of it.
    """
    n = len(data)
    k = poisoned_count(cfg.ratio, n)
    if cfg.ratio * n < 1:
        raise PoisoningDegenerateError(f"P*n = {cfg.ratio * n:.3g} < 1: nothing to poison")
    data.check_labels(cfg.mapping.class_count)

    pick_rng = np.random.default_rng([cfg.seed, 0])
    stamp_rng = np.random.default_rng([cfg.seed, 1])
    noise_rng = np.random.default_rng([cfg.seed, 2])
    eval_rng = np.random.default_rng([cfg.seed, 3])

    idx = np.sort(pick_rng.choice(n, size=k, replace=False))
    images = data.images.copy()
    labels = data.labels.copy()
    images[idx] = stamp_batch(data.images[idx], cfg.trigger, stamp_rng)
    labels[idx] = map_labels(data.labels[idx], cfg.mapping)
    images = add_background_noise(images, cfg.noise_amplitude, noise_rng)
    poisoned = np.zeros(n, dtype=bool)
    poisoned[idx] = True
    train = LabeledSet(images, labels, "train", meta={"poisoned_mask": poisoned})

    trigger_eval = None
    if holdout is not None:
        keep = np.array([cfg.mapping.changes(int(y)) or cfg.mapping.kind != "Mixed" for y in holdout.labels],
                        dtype=bool)
        src = holdout.labels[keep]
        stamped = stamp_batch(holdout.images[keep], cfg.trigger, eval_rng)
        trigger_eval = LabeledSet(stamped, map_labels(src, cfg.mapping), "trigger_eval", source_labels=src)
    return train, trigger_eval


def random_trigger(rng, channels, families=("patch",), area_range=(0.01, 0.03), patterns=PATCH_PATTERNS):
    """Draw a trigger: random pattern, area in ``area_range``, random location."""
    family = families[int(rng.integers(len(families)))]
    if family == "filter":
        pattern = FILTER_PATTERNS[int(rng.integers(len(FILTER_PATTERNS)))]
        if pattern == "channel_scale":
            scale = tuple(float(v) for v in rng.uniform(0.3, 0.6, size=channels))
            return TriggerSpec("filter", pattern, scale=scale, shift=(0.0,) * channels)
        shift = tuple(float(v) for v in rng.uniform(0.3, 0.5, size=channels))
        return TriggerSpec("filter", pattern, scale=(1.0,) * channels, shift=shift)
    pattern = patterns[int(rng.integers(len(patterns)))]
    area = float(rng.uniform(*area_range))
    if channels == 1:
        color = (1.0,)
    else:
        color = tuple(float(v) for v in rng.integers(0, 2, size=channels))
        if not any(color):
            color = (1.0,) + color[1:]
    return TriggerSpec("patch", pattern, area_fraction=area, color=color,
                       pattern_seed=int(rng.integers(2 ** 31)))


def random_mapping(kind, class_count, rng):
    if kind == "M2O":
        return m2o(class_count, int(rng.integers(class_count)))
    if kind == "M2M":
        return m2m(class_count, rng)
    if kind == "Mixed":
        return mixed(class_count, rng)
    raise ConfigError(f"unknown mapping kind {kind!r}")


@dataclass(frozen=True)
class PoisonTemplate:
    """Ranges from which a zoo draws each Trojan model's attack."""
    ratio_range: tuple = (0.15, 0.20)
    families: tuple = ("patch",)
    area_range: tuple = (0.01, 0.03)
    patterns: tuple = PATCH_PATTERNS
    noise_amplitude: float = 0.05

    def draw(self, kind, class_count, channels, rng, ratio=None):
        trigger = random_trigger(rng, channels, self.families, self.area_range, self.patterns)
        mapping = random_mapping(kind, class_count, rng)
        if ratio is None:
            ratio = float(rng.uniform(*self.ratio_range))
        return PoisonConfig(trigger, mapping, ratio, self.noise_amplitude, int(rng.integers(2 ** 31)))
