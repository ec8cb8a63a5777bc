"""Synthetic banded-chromosome generator standing in for clinical karyotype images.

Each of the 24 classes has a fixed prototype: a length, a centromere position
and a piecewise-constant band profile running from the p-arm end to the
q-arm end.  A sample renders the prototype as a dark vertical rod on a white
background with a centromeric constriction, random bending and noise.  Polarity
1 (q-arm downward) renders the p-arm at the top; polarity 0 flips vertically.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import BACKGROUND, CaseRecord, Sample

N_AUTOSOMES = 22
X_TYPE, Y_TYPE = 22, 23


@dataclass(frozen=True)
class SyntheticConfig:
    """All generator constants, lengths and widths as fractions of the pad canvas side."""

    canvas_side: int = 320
    prototype_seed: int = 7321
    longest: float = 0.66          # class 0
    shortest_autosome: float = 0.26  # class 21
    x_length: float = 0.52
    y_length: float = 0.22
    width: float = 0.075
    length_jitter: float = 0.03
    max_bend: float = 0.04         # sinusoid amplitude of the centreline
    noise_std: float = 6.0
    margin: float = 0.03
    band_levels: tuple = (45.0, 115.0, 185.0)
    # acrocentric classes carry the centromere near the p-end
    acrocentric: tuple = (12, 13, 14, 20, 21, 23)


@dataclass(frozen=True)
class ClassPrototype:
    type_label: int
    length: float
    centromere: float
    bands: np.ndarray   # band intensities from p-end to q-end
    edges: np.ndarray   # band boundaries in [0, 1], len(bands) + 1


def build_prototypes(cfg: SyntheticConfig = SyntheticConfig()) -> list[ClassPrototype]:
    rng = np.random.default_rng(cfg.prototype_seed)
    lengths = list(np.linspace(cfg.longest, cfg.shortest_autosome, N_AUTOSOMES)) + [cfg.x_length, cfg.y_length]
    protos = []
    levels = np.asarray(cfg.band_levels)
    for k, length in enumerate(lengths):
        n_bands = 3 + int(round(10 * length))
        widths = rng.uniform(0.6, 1.4, n_bands)
        edges = np.r_[0.0, np.cumsum(widths) / widths.sum()]
        bands = [rng.choice(levels)]
        for _ in range(n_bands - 1):
            bands.append(rng.choice(levels[levels != bands[-1]]))
        cen = rng.uniform(0.08, 0.14) if k in cfg.acrocentric else rng.uniform(0.28, 0.45)
        protos.append(ClassPrototype(k, float(length), float(cen), np.array(bands), edges))
    return protos


def render_chromosome(proto: ClassPrototype, polarity: int, rng: Optional[np.random.Generator],
                      cfg: SyntheticConfig = SyntheticConfig(), clean: bool = False) -> np.ndarray:
    """uint8 image of one chromosome, dark on a 255 background, tightly framed."""
    side = cfg.canvas_side
    jitter = 0.0 if rng is None else rng.normal(0.0, cfg.length_jitter)
    length = proto.length * side * (1.0 + jitter)
    half_w = cfg.width * side / 2
    bend = 0.0 if (clean or rng is None) else rng.uniform(-cfg.max_bend, cfg.max_bend) * side
    phase = 0.0 if rng is None else rng.uniform(0, np.pi)
    margin = max(2, int(round(cfg.margin * side)))
    h = int(np.ceil(length)) + 2 * margin
    w = int(np.ceil(2 * half_w + 2 * abs(bend))) + 2 * margin
    h, w = min(h, side), min(w, side)

    rows = np.arange(h)[:, None] + 0.5
    cols = np.arange(w)[None, :] + 0.5
    t = (rows - (h - length) / 2) / length                      # 0 at p-end, 1 at q-end
    centre = w / 2 + bend * np.sin(np.pi * np.clip(t, 0, 1) + phase) - bend * np.sin(phase)
    constriction = 1.0 - 0.45 * np.exp(-((t - proto.centromere) / 0.035) ** 2)
    taper = np.sqrt(np.clip(1.0 - ((2 * t - 1) ** 8), 0, 1))
    radius = half_w * constriction * taper
    coverage = np.clip(radius - np.abs(cols - centre) + 0.5, 0.0, 1.0)
    coverage *= np.clip(np.minimum(t, 1 - t) * length + 0.5, 0.0, 1.0)

    band_idx = np.clip(np.searchsorted(proto.edges, np.clip(t, 0, 1), side="right") - 1, 0, len(proto.bands) - 1)
    intensity = proto.bands[band_idx] * np.ones_like(coverage)
    if not clean and rng is not None:
        intensity = intensity + rng.normal(0.0, cfg.noise_std, size=coverage.shape)
    img = BACKGROUND * (1 - coverage) + intensity * coverage
    if polarity == 0:
        img = img[::-1]
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def generate_synthetic_case(rng: np.random.Generator, prototypes: list[ClassPrototype], case_id: str,
                            sex: str = "male", trisomy: Optional[int] = None,
                            cfg: SyntheticConfig = SyntheticConfig(), clean: bool = False) -> CaseRecord:
    """46 chromosomes (47 with a trisomy of autosome ``trisomy``), random polarity each."""
    if len(prototypes) != 24:
        raise ValueError("24 class prototypes required")
    if sex not in ("male", "female"):
        raise ValueError("sex must be male or female")
    labels = [k for k in range(N_AUTOSOMES) for _ in range(2)]
    if trisomy is not None:
        if not 0 <= trisomy < N_AUTOSOMES:
            raise ValueError("trisomy applies to autosomes 0..21")
        labels.append(trisomy)
    labels += [X_TYPE, Y_TYPE] if sex == "male" else [X_TYPE, X_TYPE]
    samples = []
    for k in labels:
        polarity = int(rng.integers(0, 2))
        img = render_chromosome(prototypes[k], polarity, rng, cfg, clean=clean)
        samples.append(Sample(img, k, polarity, case_id))
    return CaseRecord(case_id, sex, samples)


def generate_cases(n_cases: int, seed: int, cfg: SyntheticConfig = SyntheticConfig(),
                   sex_ratio: float = 0.5, trisomy_fraction: float = 0.0) -> list[CaseRecord]:
    """Deterministic corpus; case ``i`` draws from its own seeded stream."""
    protos = build_prototypes(cfg)
    cases = []
    for i in range(n_cases):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        sex = "male" if rng.random() < sex_ratio else "female"
        trisomy = int(rng.integers(0, N_AUTOSOMES)) if rng.random() < trisomy_fraction else None
        cases.append(generate_synthetic_case(rng, protos, f"case{i:04d}", sex, trisomy, cfg))
    return cases
