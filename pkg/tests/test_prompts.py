"""Prompt tests: prediction-path oracles, loss values rebuilt from the
public primitives, tape gradients vs finite differences, and the exactness
guarantees of the domain-prompt blend."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedstyle.data import LabeledEmbeddings
from fedstyle.encoder import EncoderConfig, FrozenEncoder
from fedstyle.errors import ConfigurationError, DataError, DomainError, ParameterError
from fedstyle.numerics import cross_entropy, grad_check, softmax
from fedstyle.prompts import (
    CONTRAST_NORM_FLOOR,
    DomainClassifier,
    PromptConfig,
    classifier_loss,
    classify_domain,
    contrastive_loss_parts,
    domain_loss,
    global_loss,
    init_prompt,
    mix_domain_prompts,
    predict_composite,
    predict_global,
    predict_unseen,
    predict_unseen_batch,
)
from fedstyle.seeding import rng

DIM = 8
TAU = 0.05


def _encoder(dim=DIM, max_tokens=12, seed=3):
    return FrozenEncoder(EncoderConfig(dim=dim, max_tokens=max_tokens, seed=seed))


def _unit_rows(generator, n, dim):
    raw = generator.normal(size=(n, dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _batch(n=6, classes=3, dim=DIM, seed=11, domains=2):
    g = rng(seed, "prompt-test-batch")
    return LabeledEmbeddings(
        embeddings=_unit_rows(g, n, dim),
        labels=g.integers(0, classes, size=n),
        domains=g.integers(0, domains, size=n),
        augmented=np.zeros(n, dtype=bool),
    )


def _class_tokens(classes=3, dim=DIM, seed=12):
    return rng(seed, "prompt-test-tokens").normal(size=(classes, dim)) * 0.05


# ---------------------------------------------------------------------------
# config and initialization
# ---------------------------------------------------------------------------


def test_prompt_config_validation():
    with pytest.raises(ConfigurationError):
        PromptConfig(length=0)
    with pytest.raises(ConfigurationError):
        PromptConfig(temperature=0.0)
    with pytest.raises(ConfigurationError):
        PromptConfig(generator_mode="hard")
    with pytest.raises(ConfigurationError):
        PromptConfig(init_scale=-1e-3)


def test_zero_init_scale_gives_exact_zero_block():
    block = init_prompt(PromptConfig(length=3, init_scale=0.0), DIM, 7, "global-prompt")
    assert block.shape == (3, DIM)
    assert np.all(block == 0.0)


def test_init_prompt_shape_scale_determinism():
    cfg = PromptConfig(length=4, init_scale=1e-3)
    a = init_prompt(cfg, DIM, 7, "global-prompt")
    b = init_prompt(cfg, DIM, 7, "global-prompt")
    c = init_prompt(cfg, DIM, 8, "global-prompt")
    assert a.shape == (4, DIM)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    # standard normal times 1e-3: every entry should be small but the block
    # must not be exactly zero
    assert 0.0 < np.abs(a).max() < 1e-2


# ---------------------------------------------------------------------------
# domain classifier and membership weights
# ---------------------------------------------------------------------------


def test_classifier_zero_init_gives_uniform_membership():
    clf = DomainClassifier.init(num_domains=4, dim=DIM)
    w = classify_domain(np.ones(DIM), clf, mode="soft")
    assert np.allclose(w, 0.25)


def test_classify_domain_hand_oracle():
    # logits on the unit input (1, 0) are exactly (weight column 0 + bias)
    clf = DomainClassifier(weight=np.array([[1.0, 0.0], [0.0, 1.0]]), bias=np.array([0.5, 0.0]))
    w = classify_domain(np.array([2.0, 0.0]), clf, mode="soft")
    z0, z1 = 1.0 + 0.5, 0.0
    expected = math.exp(z0) / (math.exp(z0) + math.exp(z1))
    assert w[0] == pytest.approx(expected, rel=1e-12)
    assert w.sum() == pytest.approx(1.0, rel=1e-12)


def test_classify_domain_onehot_and_ties():
    clf = DomainClassifier(weight=np.zeros((3, DIM)), bias=np.array([0.0, 1.0, 1.0]))
    w = classify_domain(np.ones(DIM), clf, mode="onehot")
    # domains 1 and 2 tie; the lowest index wins
    assert np.array_equal(w, np.array([0.0, 1.0, 0.0]))


def test_classify_domain_rejects_bad_input():
    clf = DomainClassifier.init(2, DIM)
    with pytest.raises(DomainError):
        classify_domain(np.zeros(DIM), clf)
    with pytest.raises(ParameterError):
        classify_domain(np.ones(DIM), clf, mode="argmax")
    with pytest.raises(ParameterError):
        DomainClassifier(weight=np.zeros((2, DIM)), bias=np.zeros(3))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_classify_domain_soft_sums_to_one(seed):
    g = np.random.default_rng(seed)
    clf = DomainClassifier(weight=g.normal(size=(3, 5)), bias=g.normal(size=3))
    w = classify_domain(g.normal(size=5) + 1e-3, clf, mode="soft")
    assert w.shape == (3,)
    assert np.all(w >= 0.0)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# domain-prompt blending
# ---------------------------------------------------------------------------


def test_mix_onehot_recovers_block_bitwise():
    blocks = rng(0, "mix-blocks").normal(size=(4, 3, DIM))
    for k in range(4):
        w = np.zeros(4)
        w[k] = 1.0
        assert np.array_equal(mix_domain_prompts(w, blocks), blocks[k])


def test_mix_matches_ordered_accumulation_oracle():
    g = rng(1, "mix-oracle")
    blocks = g.normal(size=(5, 2, DIM))
    w = g.normal(size=5)
    expected = np.zeros((2, DIM))
    for k in range(5):
        expected = expected + w[k] * blocks[k]
    assert np.array_equal(mix_domain_prompts(w, blocks), expected)


def test_mix_is_linear_in_weights():
    g = rng(2, "mix-linearity")
    worst = 0.0
    for _ in range(20):
        blocks = g.normal(size=(4, 2, DIM))
        u, v = g.normal(size=4), g.normal(size=4)
        a, b = g.normal(), g.normal()
        lhs = mix_domain_prompts(a * u + b * v, blocks)
        rhs = a * mix_domain_prompts(u, blocks) + b * mix_domain_prompts(v, blocks)
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    assert worst <= 1e-13


def test_mix_rejects_shape_mismatch():
    with pytest.raises(ConfigurationError):
        mix_domain_prompts(np.ones(3), np.zeros((4, 2, DIM)))
    with pytest.raises(ConfigurationError):
        mix_domain_prompts(np.ones(2), np.zeros((2, DIM)))


# ---------------------------------------------------------------------------
# prediction paths
# ---------------------------------------------------------------------------


def test_predict_global_matches_manual_tower():
    enc = _encoder()
    ct = _class_tokens()
    gp = init_prompt(PromptConfig(length=2), DIM, 0, "g")
    x = rng(5, "x").normal(size=DIM)
    probs = predict_global(x, gp, ct, enc, TAU)
    # the domain slot is zeroed but still occupies its token positions
    text = enc.encode_class_texts([gp, np.zeros_like(gp)], ct)
    expected = softmax(text @ (x / np.linalg.norm(x)), temperature=TAU)
    assert probs.shape == (3,)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(probs, expected, rtol=1e-12, atol=0.0)


def test_predict_composite_with_and_without_global():
    enc = _encoder()
    ct = _class_tokens()
    gp = init_prompt(PromptConfig(length=2), DIM, 0, "g")
    dp = init_prompt(PromptConfig(length=2), DIM, 0, "d")
    x = rng(6, "x").normal(size=DIM)
    xn = x / np.linalg.norm(x)
    both = predict_composite(x, gp, dp, ct, enc, TAU)
    assert np.allclose(both, softmax(enc.encode_class_texts([gp, dp], ct) @ xn, temperature=TAU))
    alone = predict_composite(x, None, dp, ct, enc, TAU)
    assert np.allclose(
        alone, softmax(enc.encode_class_texts([np.zeros_like(dp), dp], ct) @ xn, temperature=TAU)
    )


def test_class_token_position_is_stable_across_slot_usage():
    # zeroing a slot must reproduce the other path exactly: the class token
    # never moves, so global-only scores are the composite scores at D = 0
    enc = _encoder()
    ct = _class_tokens()
    gp = init_prompt(PromptConfig(length=2), DIM, 0, "g")
    x = rng(55, "x").normal(size=DIM)
    assert np.array_equal(
        predict_global(x, gp, ct, enc, TAU),
        predict_composite(x, gp, np.zeros_like(gp), ct, enc, TAU),
    )


def test_predict_unseen_onehot_equals_selected_composite():
    enc = _encoder()
    ct = _class_tokens()
    gp = init_prompt(PromptConfig(length=2), DIM, 0, "g")
    dps = rng(7, "dps").normal(size=(3, 2, DIM)) * 1e-2
    x = rng(8, "x").normal(size=DIM)
    xn = x / np.linalg.norm(x)
    # weights aligned with x make domain 1 the argmax by a wide margin
    clf = DomainClassifier(weight=np.stack([np.zeros(DIM), 5.0 * xn, np.zeros(DIM)]), bias=np.zeros(3))
    probs = predict_unseen(x, gp, dps, clf, ct, enc, TAU, mode="onehot")
    assert np.array_equal(probs, predict_composite(x, gp, dps[1], ct, enc, TAU))


def test_predict_unseen_soft_blends_prompts():
    enc = _encoder()
    ct = _class_tokens()
    gp = init_prompt(PromptConfig(length=2), DIM, 0, "g")
    dps = rng(9, "dps").normal(size=(3, 2, DIM)) * 1e-2
    clf = DomainClassifier(weight=rng(9, "clf").normal(size=(3, DIM)), bias=np.zeros(3))
    x = rng(9, "x").normal(size=DIM)
    weights = classify_domain(x, clf, mode="soft")
    blended = mix_domain_prompts(weights, dps)
    assert np.array_equal(
        predict_unseen(x, gp, dps, clf, ct, enc, TAU, mode="soft"),
        predict_composite(x, gp, blended, ct, enc, TAU),
    )


@pytest.mark.parametrize("mode", ["soft", "onehot"])
@pytest.mark.parametrize("with_global", [True, False])
def test_predict_unseen_batch_matches_per_sample(mode, with_global):
    enc = _encoder()
    ct = _class_tokens()
    gp = init_prompt(PromptConfig(length=2), DIM, 0, "g") if with_global else None
    dps = rng(10, "dps").normal(size=(3, 2, DIM)) * 1e-2
    clf = DomainClassifier(weight=rng(10, "clf").normal(size=(3, DIM)), bias=rng(10, "b").normal(size=3))
    xs = rng(10, "xs").normal(size=(7, DIM))
    batch = predict_unseen_batch(xs, gp, dps, clf, ct, enc, TAU, mode=mode)
    assert batch.shape == (7, 3)
    for i in range(7):
        single = predict_unseen(xs[i], gp, dps, clf, ct, enc, TAU, mode=mode)
        assert np.allclose(batch[i], single, rtol=1e-12, atol=1e-14)


def test_predict_rejects_degenerate_and_overfull():
    enc = _encoder(max_tokens=4)
    ct = _class_tokens()
    gp = np.zeros((2, DIM))
    with pytest.raises(DomainError):
        predict_global(np.zeros(DIM), np.ones((2, DIM)) * 1e-3, ct, enc, TAU)
    with pytest.raises(ParameterError):
        # 2 + 2 prompt rows + 1 class token exceed 4 positions
        predict_composite(np.ones(DIM), gp, np.zeros((2, DIM)), ct, enc, TAU)
    with pytest.raises(ParameterError):
        predict_unseen_batch(
            np.ones((2, DIM)), gp, np.zeros((3, 2, DIM)), DomainClassifier.init(3, DIM), ct, enc, TAU
        )
    with pytest.raises(ParameterError):
        predict_unseen_batch(np.ones(DIM), None, np.zeros((3, 1, DIM)), DomainClassifier.init(3, DIM), ct, enc, TAU)


# ---------------------------------------------------------------------------
# global-prompt loss
# ---------------------------------------------------------------------------


def _global_oracle(batch, prompt, enc, ct, temperature):
    # same quantity rebuilt from the public scalar primitives
    total = 0.0
    for x, y in zip(batch.embeddings, batch.labels):
        text = enc.encode_class_texts([prompt, np.zeros_like(prompt)], ct)
        probs = softmax(text @ (x / np.linalg.norm(x)), temperature=temperature)
        total += cross_entropy(probs, int(y))
    return total / len(batch)


def test_global_loss_matches_primitive_oracle():
    enc = _encoder()
    ct = _class_tokens()
    batch = _batch()
    prompt = init_prompt(PromptConfig(length=2), DIM, 1, "g")
    value, grad = global_loss(batch, prompt, enc, ct, TAU)
    assert value == pytest.approx(_global_oracle(batch, prompt, enc, ct, TAU), rel=1e-12)
    assert grad.shape == prompt.shape


def test_global_loss_gradient_matches_finite_differences():
    enc = _encoder()
    ct = _class_tokens()
    batch = _batch()
    prompt = init_prompt(PromptConfig(length=2), DIM, 2, "g")

    def loss_fn(params):
        value, grad = global_loss(batch, params["prompt"], enc, ct, TAU)
        return value, {"prompt": grad}

    report = grad_check(loss_fn, {"prompt": prompt})
    assert report.passed, report.format()


def test_global_loss_input_validation():
    enc = _encoder()
    ct = _class_tokens()
    with pytest.raises(ParameterError):
        global_loss(LabeledEmbeddings.empty(DIM), np.ones((2, DIM)), enc, ct, TAU)
    bad = _batch()
    bad.labels[0] = 7
    with pytest.raises(DataError):
        global_loss(bad, np.ones((2, DIM)), enc, ct, TAU)


# ---------------------------------------------------------------------------
# domain-prompt loss
# ---------------------------------------------------------------------------


def _domain_oracle(batch, dp, gp, enc, ct, own, temperature, use_contrastive):
    blocks = [gp if gp is not None else np.zeros_like(dp), dp]
    total = 0.0
    for x, y in zip(batch.embeddings, batch.labels):
        text = enc.encode_class_texts(blocks, ct)
        probs = softmax(text @ (x / np.linalg.norm(x)), temperature=temperature)
        total += cross_entropy(probs, int(y))
    cla = total / len(batch)
    if not use_contrastive:
        return cla
    pooled = dp.mean(axis=0)
    pooled = pooled / max(np.linalg.norm(pooled), CONTRAST_NORM_FLOOR)
    own_u = own / np.linalg.norm(own)
    anchor = gp.mean(axis=0)
    anchor = anchor / np.linalg.norm(anchor)
    sims = np.array([pooled @ own_u, pooled @ anchor])
    return cla + cross_entropy(softmax(sims, temperature=1.0), 0)


@pytest.mark.parametrize("use_contrastive", [True, False])
def test_domain_loss_matches_primitive_oracle(use_contrastive):
    enc = _encoder()
    ct = _class_tokens()
    batch = _batch()
    gp = init_prompt(PromptConfig(length=2), DIM, 3, "g")
    dp = init_prompt(PromptConfig(length=2), DIM, 3, "d")
    own = rng(3, "own").normal(size=DIM)
    value, grad, parts = domain_loss(
        batch, dp, gp, enc, ct, own, TAU, use_contrastive=use_contrastive
    )
    expected = _domain_oracle(batch, dp, gp, enc, ct, own, TAU, use_contrastive)
    assert value == pytest.approx(expected, rel=1e-12)
    assert grad.shape == dp.shape
    assert ("contrastive" in parts) == use_contrastive
    assert value == pytest.approx(sum(parts.values()), rel=1e-12)


def test_domain_loss_without_global_prompt():
    # the domain-only ablation trains this path
    enc = _encoder()
    ct = _class_tokens()
    batch = _batch()
    dp = init_prompt(PromptConfig(length=2), DIM, 4, "d")
    value, grad, parts = domain_loss(
        batch, dp, None, enc, ct, None, TAU, use_contrastive=False
    )
    assert value == pytest.approx(_domain_oracle(batch, dp, None, enc, ct, None, TAU, False), rel=1e-12)
    assert set(parts) == {"classification"}


@pytest.mark.parametrize("use_contrastive,with_global", [(True, True), (False, True), (False, False)])
def test_domain_loss_gradient_matches_finite_differences(use_contrastive, with_global):
    enc = _encoder()
    ct = _class_tokens()
    batch = _batch()
    gp = init_prompt(PromptConfig(length=2), DIM, 5, "g") if with_global else None
    own = rng(5, "own").normal(size=DIM)

    def loss_fn(params):
        value, grad, _ = domain_loss(
            batch, params["prompt"], gp, enc, ct,
            own if use_contrastive else None, TAU, use_contrastive=use_contrastive,
        )
        return value, {"prompt": grad}

    report = grad_check(loss_fn, {"prompt": init_prompt(PromptConfig(length=2), DIM, 5, "d")})
    assert report.passed, report.format()


def test_domain_loss_contrastive_needs_anchor_and_description():
    enc = _encoder()
    ct = _class_tokens()
    batch = _batch()
    dp = init_prompt(PromptConfig(length=2), DIM, 6, "d")
    with pytest.raises(ConfigurationError):
        domain_loss(batch, dp, None, enc, ct, np.ones(DIM), TAU, use_contrastive=True)
    with pytest.raises(ConfigurationError):
        domain_loss(batch, dp, np.ones((2, DIM)), enc, ct, None, TAU, use_contrastive=True)


def test_contrastive_parts_helper():
    dp = np.tile(np.array([1.0, 0.0] + [0.0] * (DIM - 2)), (2, 1))
    gp = np.tile(np.array([0.0, 1.0] + [0.0] * (DIM - 2)), (2, 1))
    own = np.array([1.0, 0.0] + [0.0] * (DIM - 2))
    s_own, s_anchor = contrastive_loss_parts(dp, gp, own)
    assert s_own == pytest.approx(1.0)
    assert s_anchor == pytest.approx(0.0)


def test_contrastive_direction_continuous_at_floor():
    # just under and just over the ramp boundary must agree to first order
    enc = _encoder()
    ct = _class_tokens()
    batch = _batch()
    gp = init_prompt(PromptConfig(length=2), DIM, 9, "g")
    own = rng(9, "own").normal(size=DIM)
    base = rng(9, "dir").normal(size=(2, DIM))
    base = base / np.linalg.norm(base.mean(axis=0))
    eps = 1e-9
    lo, _, _ = domain_loss(batch, base * (CONTRAST_NORM_FLOOR - eps), gp, enc, ct, own, TAU, want_grad=False)
    hi, _, _ = domain_loss(batch, base * (CONTRAST_NORM_FLOOR + eps), gp, enc, ct, own, TAU, want_grad=False)
    assert lo == pytest.approx(hi, abs=1e-6)


def test_contrastive_at_zero_prompt_gives_indifference_and_finite_pull():
    # an exactly-zero prompt has no direction: both similarities read zero,
    # the term sits at its two-way indifference value, and the ramp still
    # hands back a bounded gradient that orients the first step
    enc = _encoder()
    ct = _class_tokens()
    batch = _batch()
    gp = init_prompt(PromptConfig(length=2), DIM, 10, "g")
    own = rng(10, "own").normal(size=DIM)
    value, grad, parts = domain_loss(batch, np.zeros((2, DIM)), gp, enc, ct, own, TAU)
    assert parts["contrastive"] == pytest.approx(math.log(2.0))
    assert np.all(np.isfinite(grad))


def test_domain_prompt_norm_stays_bounded_from_zero_start():
    # small steps from a zero start must not blow the prompt up: near the
    # origin exact normalization would scale the contrastive gradient by
    # 1 / norm, turning the first nonzero iterate into an unbounded kick
    enc = _encoder()
    ct = _class_tokens()
    batch = _batch()
    gp = init_prompt(PromptConfig(length=2), DIM, 11, "g")
    own = rng(11, "own").normal(size=DIM)
    dp = np.zeros((2, DIM))
    rate = 1e-3
    for _ in range(50):
        _, grad, _ = domain_loss(batch, dp, gp, enc, ct, own, TAU)
        dp = dp - rate * grad
    assert np.linalg.norm(dp) < 1.0


# ---------------------------------------------------------------------------
# domain classifier loss
# ---------------------------------------------------------------------------


def test_classifier_loss_at_zero_init_is_log_k():
    batch = _batch(domains=3)
    clf = DomainClassifier.init(3, DIM)
    value, grads = classifier_loss(batch, clf)
    assert value == pytest.approx(math.log(3), rel=1e-12)
    assert set(grads) == {"weight", "bias"}


def test_classifier_loss_gradient_matches_finite_differences():
    batch = _batch(domains=3)
    g = rng(13, "clf-init")

    def loss_fn(params):
        clf = DomainClassifier(weight=params["weight"], bias=params["bias"])
        return classifier_loss(batch, clf)

    report = grad_check(
        loss_fn,
        {"weight": g.normal(size=(3, DIM)) * 0.1, "bias": g.normal(size=3) * 0.1},
    )
    assert report.passed, report.format()


def test_classifier_loss_rejects_out_of_range_domains():
    batch = _batch(domains=2)
    batch.domains[0] = -1  # style-target entries must be filtered out upstream
    with pytest.raises(DataError):
        classifier_loss(batch, DomainClassifier.init(2, DIM))
