import numpy as np
import pytest

import ibrec.autodiff as ad
from ibrec.losses import HsicConfig, hsic_estimate
from ibrec.synth import SynthSpec, generate


def hsic_value(x, y, sigma_sq=0.25):
    tape = ad.Tape()
    return float(hsic_estimate(tape.constant(x), tape.constant(y),
                               HsicConfig(sigma_sq)).value[0, 0])


def test_synth_deterministic():
    a = generate(SynthSpec(num_users=40, num_items=30, rank=4,
                           interactions_per_user=8, seed=5))
    b = generate(SynthSpec(num_users=40, num_items=30, rank=4,
                           interactions_per_user=8, seed=5))
    assert np.array_equal(a.features.matrices[0], b.features.matrices[0])
    for u in range(40):
        assert np.array_equal(a.interactions.train[u], b.interactions.train[u])


def test_synth_shapes_and_split():
    spec = SynthSpec(num_users=50, num_items=40, rank=4, relevant_dim=6,
                     irrelevant_dim=10, interactions_per_user=10, seed=0)
    data = generate(spec)
    assert data.interactions.num_users == 50
    assert data.interactions.num_items == 40
    assert data.features.num_modalities == 2
    assert data.features.dims == [16, 16]
    for u in range(50):
        total = (len(data.interactions.train[u]) + len(data.interactions.val[u])
                 + len(data.interactions.test[u]))
        assert total == 10
        assert len(data.interactions.train[u]) == 8


def test_synth_zero_noise_features_fully_informative():
    spec = SynthSpec(num_users=30, num_items=25, rank=3, relevant_dim=5,
                     irrelevant_dim=7, noise_level=0.0,
                     interactions_per_user=6, seed=2)
    data = generate(spec)
    for m in data.features.matrices:
        assert np.all(m[:, spec.relevant_dim:] == 0.0)
        assert np.abs(m[:, :spec.relevant_dim]).max() > 0.0


def test_synth_interactions_favor_high_scores():
    spec = SynthSpec(num_users=200, num_items=50, rank=4,
                     interactions_per_user=10, seed=3)
    data = generate(spec)
    picked, unpicked = [], []
    for u in range(200):
        chosen = set(np.concatenate([data.interactions.train[u],
                                     data.interactions.val[u],
                                     data.interactions.test[u]]).tolist())
        for i in range(50):
            (picked if i in chosen else unpicked).append(
                data.preference_scores[u, i])
    assert np.mean(picked) > np.mean(unpicked) + 0.3


def test_synth_irrelevant_block_hsic_is_null_under_permutation():
    spec = SynthSpec(num_users=60, num_items=80, rank=4, relevant_dim=6,
                     irrelevant_dim=12, noise_level=1.0,
                     interactions_per_user=10, seed=4)
    data = generate(spec)
    irrelevant = data.features.matrices[0][:, spec.relevant_dim:]
    item_pref = data.preference_scores.T  # one preference row per item
    observed = hsic_value(irrelevant, item_pref)
    rng = np.random.default_rng(0)
    null = [hsic_value(irrelevant, item_pref[rng.permutation(80)])
            for _ in range(100)]
    # permutation test: the irrelevant block carries no preference signal
    p_value = float(np.mean(np.asarray(null) >= observed))
    assert p_value > 0.05


def test_synth_relevant_block_hsic_is_significant():
    spec = SynthSpec(num_users=60, num_items=80, rank=4, relevant_dim=6,
                     irrelevant_dim=12, noise_level=1.0,
                     interactions_per_user=10, seed=4)
    data = generate(spec)
    relevant = data.features.matrices[0][:, :spec.relevant_dim]
    item_pref = data.preference_scores.T
    observed = hsic_value(relevant, item_pref)
    rng = np.random.default_rng(0)
    null = [hsic_value(relevant, item_pref[rng.permutation(80)])
            for _ in range(100)]
    assert float(np.mean(np.asarray(null) >= observed)) < 0.05


def test_synth_rejects_bad_spec():
    with pytest.raises(ValueError):
        generate(SynthSpec(num_users=0))
    with pytest.raises(ValueError):
        generate(SynthSpec(num_items=10, interactions_per_user=10))
