"""Frame encoding stub and the planted-signature synthetic task.

The real system would put a frozen pretrained image encoder here. For a
desk-scale, dependency-free package the stand-ins are:

  stub_encode          a fixed seeded random projection of raw frame arrays
                       to the (N_v, D_vis) token grid.

  synthetic task       videos whose tokens are noise except for planted unit
                       signature vectors: one class signature (the label)
                       planted periodically, plus an un-prompted background
                       signature planted densely. A model must latch onto the
                       prompted signatures and ignore the background one.

Signatures are mutually orthonormal, and the perturbation added to a planted
token is kept orthogonal to its signature with a capped norm, so the cosine
between the planted token and the signature is at least 0.8 by construction
(cap 0.7 gives a floor of 1/sqrt(1 + 0.49) ~ 0.819).

Labels stay recoverable by brute force: the class signature with the highest
cosine against any single token of the video. That oracle is exact on
generated data and is the ceiling any trained model is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, SyntheticConfig
from .errors import ConfigError, InputError

_ORTH_NOISE_CAP = 0.7


def stub_encode(frames, cfg: ModelConfig, seed: int) -> np.ndarray:
    """Project raw frames, shape (T, ...), to (T, N_v, D_vis) feature grids."""
    try:
        arr = np.asarray(frames, dtype=np.float64)
    except ValueError:
        raise InputError("frames do not share a common shape")
    if arr.dtype == object:
        raise InputError("frames do not share a common shape")
    if arr.ndim < 2 or arr.shape[0] == 0:
        raise InputError(f"expected at least one frame of fixed shape, got shape {arr.shape}")
    t = arr.shape[0]
    flat = arr.reshape(t, -1)
    rng = np.random.default_rng(seed)
    width = cfg.n_visual_tokens * cfg.d_visual
    proj = rng.standard_normal((flat.shape[1], width)) / np.sqrt(flat.shape[1])
    return (flat @ proj).reshape(t, cfg.n_visual_tokens, cfg.d_visual)


def make_signatures(d_visual: int, classes: int, seed: int) -> np.ndarray:
    """(classes + 1, d) orthonormal rows; the last row is the background."""
    if classes + 1 > d_visual:
        raise ConfigError(
            f"{classes} classes plus background need d_visual > {classes}, got {d_visual}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d_visual, classes + 1)))
    return np.ascontiguousarray(q.T)


def _capped_orthogonal_noise(rng: np.random.Generator, sig: np.ndarray,
                             scale: float) -> np.ndarray:
    g = scale * rng.standard_normal(sig.shape[0])
    g = g - (g @ sig) * sig
    norm = float(np.linalg.norm(g))
    if norm > _ORTH_NOISE_CAP:
        g *= _ORTH_NOISE_CAP / norm
    return g


@dataclass
class PlantedVideo:
    tokens: np.ndarray                    # (T, N_v, D_vis)
    label: int
    plants: list[tuple[int, int]]         # (frame, slot) of class-signature tokens


def synthesize_video(rng: np.random.Generator, syn: SyntheticConfig,
                     cfg: ModelConfig, sigs: np.ndarray, label: int) -> PlantedVideo:
    t, n, d = syn.frames, cfg.n_visual_tokens, cfg.d_visual
    x = syn.noise_scale * rng.standard_normal((t, n, d))
    plants: list[tuple[int, int]] = []

    def planted(sig: np.ndarray) -> np.ndarray:
        return syn.plant_scale * (sig + _capped_orthogonal_noise(rng, sig,
                                                                 syn.noise_scale))

    for f in range(t):
        plant_class = f % syn.frames_per_occurrence == 0
        if syn.plant_frames and f >= syn.plant_frames:
            plant_class = False
        plant_background = f % syn.background_every == 0
        slots = rng.choice(n, size=2, replace=False)
        if plant_class:
            x[f, slots[0]] = planted(sigs[label])
            plants.append((f, int(slots[0])))
        if plant_background:
            x[f, slots[1]] = planted(sigs[-1])
    return PlantedVideo(tokens=x, label=label, plants=plants)


def synthesize_dataset(syn: SyntheticConfig, cfg: ModelConfig, sigs: np.ndarray,
                       content_seed: int, samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Balanced labelled corpus: features (S, T, N_v, D_vis), labels (S,)."""
    rng = np.random.default_rng(content_seed)
    labels = np.arange(samples) % syn.classes
    rng.shuffle(labels)
    features = np.empty((samples, syn.frames, cfg.n_visual_tokens, cfg.d_visual))
    for i in range(samples):
        features[i] = synthesize_video(rng, syn, cfg, sigs, int(labels[i])).tokens
    return features, labels


def make_splits(syn: SyntheticConfig, cfg: ModelConfig, seed: int):
    """Signatures plus disjoint train/val corpora derived from one seed."""
    sigs = make_signatures(cfg.d_visual, syn.classes, seed)
    train = synthesize_dataset(syn, cfg, sigs, content_seed=2 * seed + 1,
                               samples=syn.train_samples)
    val = synthesize_dataset(syn, cfg, sigs, content_seed=2 * seed + 2,
                             samples=syn.val_samples)
    return sigs, train, val


def oracle_labels(features: np.ndarray, sigs: np.ndarray) -> np.ndarray:
    """Brute-force labels: class signature with the highest token cosine.

    The planted token keeps cosine >= 0.819 with its signature by
    construction, while every other token stays well below that against
    every class signature, so scanning all (token, signature) pairs for the
    single best cosine recovers the label even when plants are restricted
    to a few early frames.
    """
    s, t, n, d = features.shape
    flat = features.reshape(s, t * n, d)
    norms = np.maximum(np.linalg.norm(flat, axis=-1, keepdims=True), 1e-12)
    cos = (flat / norms) @ sigs[:-1].T          # (S, T*N, C)
    return cos.max(axis=1).argmax(axis=1)
