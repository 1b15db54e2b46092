"""World generation tests: geometry, determinism, splits, few-shot capping.

The sample-mean oracle is Monte-Carlo: at small noise the per-cell mean
embedding approaches the noiseless embedding at the usual 3 sigma / sqrt(n)
rate.  The text-direction fidelity check ties the world tokens to the
encoder's near-linear regime.
"""

import numpy as np
import pytest

from fedstyle.data import (
    TARGET_KEY,
    LabeledEmbeddings,
    WorldSpec,
    description_set,
    few_shot_subsample,
    generate_world,
    leave_one_out,
)
from fedstyle.encoder import EncoderConfig, FrozenEncoder, TokenSequence
from fedstyle.errors import ConfigurationError, ParameterError


def make_world(seed=0, **overrides):
    defaults = dict(classes=4, domains=3, samples_per_cell=20, noise=0.05, dim=16, seed=seed)
    defaults.update(overrides)
    spec = WorldSpec(**defaults)
    enc = FrozenEncoder(EncoderConfig(dim=spec.dim, max_tokens=8, seed=seed))
    return generate_world(spec, enc), enc


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def test_prototypes_are_orthonormal_and_shifts_live_off_them():
    world, _ = make_world()
    gram = world.prototypes @ world.prototypes.T
    assert np.allclose(gram, np.eye(world.spec.classes), atol=1e-10)
    # unit shifts, orthogonal to every prototype
    assert np.linalg.norm(world.shifts, axis=1) == pytest.approx(1.0, abs=1e-10)
    assert np.abs(world.shifts @ world.prototypes.T).max() < 1e-10


def test_shifts_share_a_plane_at_spread_angles():
    world, _ = make_world()
    k = world.spec.domains
    # rank 2: three or more distinct in-plane directions span the plane
    singulars = np.linalg.svd(world.shifts, compute_uv=False)
    assert singulars[1] > 0.1
    assert singulars[2:].max() < 1e-10
    # jitter is capped at an eighth of the spacing, so the angle between
    # any two shifts stays above three quarters of the even spacing
    cos_bound = np.cos(0.75 * 2.0 * np.pi / k)
    gram = world.shifts @ world.shifts.T
    off_diagonal = gram[~np.eye(k, dtype=bool)]
    assert off_diagonal.max() < cos_bound + 1e-9


def test_dimension_too_small_is_rejected():
    spec = WorldSpec(classes=10, domains=4, samples_per_cell=5, noise=0.1, dim=13, seed=0)
    enc = FrozenEncoder(EncoderConfig(dim=13, max_tokens=8, seed=0))
    with pytest.raises(ConfigurationError):
        generate_world(spec, enc)


def test_tokens_are_scaled_directions():
    world, _ = make_world()
    assert np.allclose(world.class_tokens, 0.01 * world.prototypes, atol=1e-15)
    assert np.allclose(world.domain_tokens, 0.01 * world.shifts, atol=1e-15)


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------


def test_sample_counts_labels_and_unit_norms():
    world, _ = make_world()
    spec = world.spec
    total = spec.classes * spec.domains * spec.samples_per_cell
    assert len(world.samples) == total
    assert np.linalg.norm(world.samples.embeddings, axis=1) == pytest.approx(1.0, abs=1e-9)
    for domain in range(spec.domains):
        for label in range(spec.classes):
            mask = (world.samples.domains == domain) & (world.samples.labels == label)
            assert mask.sum() == spec.samples_per_cell
    assert not world.samples.augmented.any()


def test_generation_is_deterministic_bitwise():
    a, _ = make_world(seed=9)
    b, _ = make_world(seed=9)
    assert a.samples.embeddings.tobytes() == b.samples.embeddings.tobytes()
    c, _ = make_world(seed=10)
    assert a.samples.embeddings.tobytes() != c.samples.embeddings.tobytes()


def test_zero_noise_repeats_the_cell_prototype():
    world, enc = make_world(noise=0.0)
    cell = world.samples.subset(
        np.flatnonzero((world.samples.domains == 1) & (world.samples.labels == 2))
    )
    raw = world.prototypes[2] + world.shifts[1]
    expected = enc.encode_image(raw / np.linalg.norm(raw))
    assert np.allclose(cell.embeddings, expected[None, :], atol=1e-12)


def test_cell_mean_approaches_noiseless_embedding():
    # Monte-Carlo oracle: the mean of n samples in d dimensions deviates
    # from the noiseless embedding by about sigma * sqrt(d / n); the two
    # normalizations add a curvature bias of order sigma^2 * d.
    sigma, n, d = 0.02, 400, 16
    world, enc = make_world(samples_per_cell=n, noise=sigma, dim=d)
    cell = world.samples.subset(
        np.flatnonzero((world.samples.domains == 0) & (world.samples.labels == 0))
    )
    raw = world.prototypes[0] + world.shifts[0]
    noiseless = enc.encode_image(raw / np.linalg.norm(raw))
    deviation = np.linalg.norm(cell.embeddings.mean(axis=0) - noiseless)
    assert deviation < 3.0 * sigma * np.sqrt(d / n) + sigma**2 * d


def test_text_direction_tracks_shift_difference():
    # The direction of T([t_j, t_y]) - T([t_i, t_y]) must align with the
    # projected position-scaled shift difference at cosine > 0.9.
    world, enc = make_world(dim=32)
    y = world.class_tokens[0]
    zero = np.zeros((0, world.spec.dim))
    deltas = []
    for i, j in [(0, 1), (1, 2), (2, 0)]:
        ei = enc.encode_text(TokenSequence(zero, np.stack([world.domain_tokens[i], y]), 8))
        ej = enc.encode_text(TokenSequence(zero, np.stack([world.domain_tokens[j], y]), 8))
        delta = ej - ei
        target = enc.projection @ (enc.position_scale[0] * (world.domain_tokens[j] - world.domain_tokens[i]))
        cos = float(delta @ target / (np.linalg.norm(delta) * np.linalg.norm(target)))
        deltas.append(cos)
    assert min(deltas) > 0.9


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def test_leave_one_out_partitions_and_renumbers():
    world, _ = make_world()
    split = leave_one_out(world, holdout=1)
    assert split.source_domain_ids == [0, 2]
    assert split.num_clients == 2
    per_cell = world.spec.classes * world.spec.samples_per_cell
    for client_index, ds in enumerate(split.clients):
        assert len(ds) == per_cell
        assert np.all(ds.domains == client_index)
    assert len(split.test_set) == per_cell
    assert np.all(split.test_set.domains == 1)
    total = sum(len(c) for c in split.clients) + len(split.test_set)
    assert total == len(world.samples)
    assert np.allclose(split.source_domain_tokens, world.domain_tokens[[0, 2]])
    assert np.allclose(split.target_domain_token, world.domain_tokens[1])


def test_leave_one_out_rejects_bad_holdout():
    world, _ = make_world()
    with pytest.raises(ParameterError):
        leave_one_out(world, holdout=3)
    with pytest.raises(ParameterError):
        leave_one_out(world, holdout=-1)


# ---------------------------------------------------------------------------
# few-shot
# ---------------------------------------------------------------------------


def test_few_shot_histogram_and_determinism():
    world, _ = make_world()
    split = leave_one_out(world, holdout=0)
    ds = split.clients[0]
    sub, capped = few_shot_subsample(ds, shots=5, seed=3)
    assert capped == {}
    for label in range(world.spec.classes):
        assert (sub.labels == label).sum() == 5
    again, _ = few_shot_subsample(ds, shots=5, seed=3)
    assert sub.embeddings.tobytes() == again.embeddings.tobytes()
    other, _ = few_shot_subsample(ds, shots=5, seed=4)
    assert sub.embeddings.tobytes() != other.embeddings.tobytes()


def test_few_shot_caps_at_cell_size():
    world, _ = make_world()
    split = leave_one_out(world, holdout=0)
    ds = split.clients[0]
    sub, capped = few_shot_subsample(ds, shots=10**6, seed=0)
    assert len(sub) == len(ds)
    assert set(capped) == set(range(world.spec.classes))
    with pytest.raises(ParameterError):
        few_shot_subsample(ds, shots=0, seed=0)


def test_few_shot_subset_is_a_subset():
    world, _ = make_world()
    split = leave_one_out(world, holdout=2)
    ds = split.clients[1]
    sub, _ = few_shot_subsample(ds, shots=3, seed=7)
    pool = {row.tobytes() for row in ds.embeddings}
    assert all(row.tobytes() in pool for row in sub.embeddings)


# ---------------------------------------------------------------------------
# target descriptions
# ---------------------------------------------------------------------------


def test_description_set_counts():
    world, _ = make_world()
    split = leave_one_out(world, holdout=1)
    tokens, keys = description_set(split, include_target=False)
    assert tokens.shape[0] == split.num_clients
    assert keys == [0, 1]
    tokens_t, keys_t = description_set(split, include_target=True)
    assert tokens_t.shape[0] == split.num_clients + 1
    assert keys_t == [0, 1, TARGET_KEY]
    assert np.allclose(tokens_t[-1], split.target_domain_token)


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------


def test_labeled_embeddings_validation_and_concat():
    with pytest.raises(ParameterError):
        LabeledEmbeddings(np.zeros((3, 2)), np.zeros(2), np.zeros(3), np.zeros(3, dtype=bool))
    a = LabeledEmbeddings(np.ones((2, 2)), [0, 1], [0, 0], [False, False])
    b = LabeledEmbeddings(2 * np.ones((1, 2)), [1], [1], [True])
    merged = LabeledEmbeddings.concat([a, b])
    assert len(merged) == 3
    assert merged.augmented.tolist() == [False, False, True]
