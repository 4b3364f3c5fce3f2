"""Synthetic dataset generator for desk-scale denoising experiments.

Interactions come from a low-rank user/item preference model; item
features carry a relevant block (a linear projection of the item factors)
concatenated with an irrelevant block of independent noise whose
amplitude is the noise level. Two modalities are produced with
independent projections and noise draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InteractionSet, ModalityFeatures, split_interactions


@dataclass
class SynthSpec:
    num_users: int = 500
    num_items: int = 300
    rank: int = 8
    relevant_dim: int = 16
    irrelevant_dim: int = 64
    noise_level: float = 1.0
    interactions_per_user: int = 24
    selection_temperature: float = 0.5
    num_modalities: int = 2
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_users", "num_items", "rank", "relevant_dim",
                     "interactions_per_user", "num_modalities"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.irrelevant_dim < 0 or self.noise_level < 0:
            raise ValueError("irrelevant_dim and noise_level must be >= 0")
        if self.interactions_per_user >= self.num_items:
            raise ValueError("interactions_per_user must be < num_items")


@dataclass
class SynthData:
    interactions: InteractionSet
    features: ModalityFeatures
    user_factors: np.ndarray
    item_factors: np.ndarray
    preference_scores: np.ndarray  # num_users x num_items
    relevant_dim: int


def generate(spec: SynthSpec) -> SynthData:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 104)))
    user_factors = rng.normal(0.0, 1.0, (spec.num_users, spec.rank))
    item_factors = rng.normal(0.0, 1.0, (spec.num_items, spec.rank))
    scores = user_factors @ item_factors.T / np.sqrt(spec.rank)

    pairs = []
    for u in range(spec.num_users):
        logits = scores[u] / spec.selection_temperature
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        items = rng.choice(spec.num_items, size=spec.interactions_per_user,
                           replace=False, p=probs)
        pairs.extend((u, int(i)) for i in items)

    user_map = {f"u{u}": u for u in range(spec.num_users)}
    item_map = {f"i{i}": i for i in range(spec.num_items)}
    interactions = split_interactions(pairs, user_map, item_map,
                                      spec.split_ratios, seed=spec.seed,
                                      num_items=spec.num_items)

    names, matrices = [], []
    for m in range(spec.num_modalities):
        mixing = rng.normal(0.0, 1.0, (spec.rank, spec.relevant_dim))
        relevant = item_factors @ mixing / np.sqrt(spec.rank)
        irrelevant = spec.noise_level * rng.normal(
            0.0, 1.0, (spec.num_items, spec.irrelevant_dim))
        names.append(f"mod{m}")
        matrices.append(np.concatenate([relevant, irrelevant], axis=1))
    features = ModalityFeatures(names, matrices)
    return SynthData(interactions, features, user_factors, item_factors,
                     scores, spec.relevant_dim)
