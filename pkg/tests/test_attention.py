import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalab import numerics as nx
from scalab.attention import (
    ConfigError,
    SCAConfig,
    combined_weights,
    decode_output,
    encode_coefficients,
    fit_transfer_weights,
    init_sca_params,
    reference_mha,
    sca_forward,
    sparsity_ratio,
    transfer_coefficients,
)


def setup(seed=0, sigma="softmax", transfer=False, d=8, heads=2, tasks=3, tpt=2, scale=1.0, **kw):
    cfg = SCAConfig(d=d, heads=heads, tasks=tasks, tokens_per_task=tpt, sigma=sigma, transfer=transfer, **kw)
    rng = np.random.default_rng(seed)
    params = {k: v * scale for k, v in init_sca_params(cfg, rng).items()}
    if transfer:
        params["lambda"] = rng.normal(size=params["lambda"].shape)
    x = rng.normal(size=(cfg.n_tokens, d))
    return cfg, params, x


def zero_target(x, cfg):
    x = x.copy()
    x[(cfg.tasks - 1) * cfg.tokens_per_task:] = 0.0
    return x


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            SCAConfig(d=10, heads=3)

    def test_needs_context(self):
        with pytest.raises(ConfigError):
            SCAConfig(tasks=1)

    def test_negative_threshold(self):
        with pytest.raises(ConfigError):
            SCAConfig(sigma="prox", xi=-0.1)

    def test_unknown_sigma(self):
        with pytest.raises(ConfigError):
            SCAConfig(sigma="sparsemax")

    def test_parameter_shapes(self):
        cfg = SCAConfig(d=8, heads=2, tasks=5, tokens_per_task=2, xi_learnable=True)
        p = init_sca_params(cfg, np.random.default_rng(0))
        assert p["wq.0"].shape == (8, 4) and p["wo.1"].shape == (8, 4)
        assert p["lambda"].shape == (1, 4) and np.all(p["lambda"] == 0)
        assert p["xi"].shape == (1, 1) and p["xi"][0, 0] == 0.03
        wqk, wvo = combined_weights(p, cfg, 1)
        assert wqk.shape == wvo.shape == (8, 8)


class TestEncode:
    def test_softmax_zero_target_rows_are_uniform(self):
        cfg, params, x = setup(sigma="softmax")
        alpha = encode_coefficients(zero_target(x, cfg), params, cfg, 0)
        assert np.all(alpha[-cfg.tokens_per_task:] == 1.0 / cfg.n_tokens)

    def test_prox_zero_target_rows_are_zero(self):
        cfg, params, x = setup(sigma="prox")
        alpha = encode_coefficients(zero_target(x, cfg), params, cfg, 0)
        assert np.all(alpha[-cfg.tokens_per_task:] == 0.0)

    def test_prox_zero_threshold_gives_raw_logits(self):
        cfg, params, x = setup(sigma="prox", xi=0.0)
        wqk, _ = combined_weights(params, cfg, 1)
        np.testing.assert_allclose(encode_coefficients(x, params, cfg, 1), x @ wqk @ x.T, atol=1e-12)

    def test_full_matrix_mode_matches_factored(self):
        cfg, params, x = setup(sigma="prox", xi=0.0)
        full_cfg = replace(cfg, factored=False)
        full = {}
        for h in range(cfg.heads):
            full[f"wqk.{h}"], full[f"wvo.{h}"] = combined_weights(params, cfg, h)
        np.testing.assert_allclose(
            encode_coefficients(x, full, full_cfg, 0), encode_coefficients(x, params, cfg, 0), atol=1e-12
        )

    def test_phi_relu(self):
        cfg, params, x = setup(sigma="prox", xi=0.0, phi_relu=True)
        wqk, _ = combined_weights(params, cfg, 0)
        np.testing.assert_allclose(
            encode_coefficients(x, params, cfg, 0), x @ np.maximum(wqk @ x.T, 0), atol=1e-12
        )

    def test_scaled_logits(self):
        cfg, params, x = setup(sigma="prox", xi=0.0, scale_logits=True)
        wqk, _ = combined_weights(params, cfg, 0)
        np.testing.assert_allclose(
            encode_coefficients(x, params, cfg, 0), x @ wqk @ x.T / math.sqrt(cfg.head_dim), atol=1e-12
        )

    def test_shape_error(self):
        cfg, params, x = setup()
        with pytest.raises(nx.ShapeError):
            encode_coefficients(x[:-1], params, cfg, 0)

    def test_learnable_threshold_requires_param(self):
        cfg, params, x = setup(sigma="prox", xi_learnable=True)
        del params["xi"]
        with pytest.raises(ConfigError):
            encode_coefficients(x, params, cfg, 0)


class TestTransfer:
    def test_zero_weights_identity(self):
        cfg = SCAConfig(d=4, heads=1, tasks=4, tokens_per_task=2)
        alpha = np.random.default_rng(0).normal(size=(8, 8))
        np.testing.assert_array_equal(transfer_coefficients(alpha, np.zeros((1, 3)), cfg), alpha)

    def test_single_term(self):
        cfg = SCAConfig(d=4, heads=1, tasks=4, tokens_per_task=2)
        alpha = np.random.default_rng(1).normal(size=(8, 8))
        alpha[6:] = 0.0
        out = transfer_coefficients(alpha, np.array([[1.0, 0.0, 0.0]]), cfg)
        np.testing.assert_array_equal(out[6:], alpha[0:2])

    def test_against_direct_summation(self):
        rng = np.random.default_rng(2)
        cfg = SCAConfig(d=4, heads=1, tasks=5, tokens_per_task=3)
        alpha = rng.normal(size=(15, 15))
        lam = rng.normal(size=(1, 4))
        expected = alpha[12:15].copy()
        for i in range(4):
            expected = expected + lam[0, i] * alpha[3 * i:3 * i + 3]
        out = transfer_coefficients(alpha, lam, cfg)
        assert np.max(np.abs(out[12:] - expected)) <= 1e-12
        np.testing.assert_array_equal(out[:12], alpha[:12])

    def test_wrong_weight_count(self):
        cfg = SCAConfig(d=4, heads=1, tasks=4, tokens_per_task=2)
        with pytest.raises(nx.ShapeError):
            transfer_coefficients(np.zeros((8, 8)), np.zeros((1, 2)), cfg)

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(3)
        cfg = SCAConfig(d=4, heads=1, tasks=3, tokens_per_task=2)
        alpha = rng.normal(size=(4, 6, 6))
        lam = rng.normal(size=(1, 2))
        batched = transfer_coefficients(alpha, lam, cfg)
        for b in range(4):
            np.testing.assert_array_equal(batched[b], transfer_coefficients(alpha[b], lam, cfg))


class TestDecode:
    def test_identity_coefficients(self):
        cfg, params, x = setup()
        _, wvo = combined_weights(params, cfg, 0)
        np.testing.assert_allclose(decode_output(np.eye(cfg.n_tokens), x, params, cfg, 0), x @ wvo, atol=1e-12)

    def test_zero_coefficients(self):
        cfg, params, x = setup()
        assert np.all(decode_output(np.zeros((cfg.n_tokens,) * 2), x, params, cfg, 0) == 0.0)

    def test_uniform_coefficients_average_input(self):
        cfg, params, x = setup()
        _, wvo = combined_weights(params, cfg, 0)
        n = cfg.n_tokens
        out = decode_output(np.full((n, n), 1.0 / n), x, params, cfg, 0)
        expected = x.mean(axis=0) @ wvo
        assert np.max(np.abs(out - expected)) <= 1e-12

    def test_psi_relu(self):
        cfg, params, x = setup(psi_relu=True)
        _, wvo = combined_weights(params, cfg, 0)
        np.testing.assert_allclose(
            decode_output(np.eye(cfg.n_tokens), x, params, cfg, 0), np.maximum(x @ wvo, 0), atol=1e-12
        )


class TestForward:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_reference_mha(self, seed):
        cfg, params, x = setup(seed=seed, heads=[1, 2, 4][seed % 3])
        z, _ = sca_forward(x, params, cfg)
        assert np.max(np.abs(z - reference_mha(x, params, cfg))) <= 1e-12

    def test_prox_without_transfer_zero_target(self):
        cfg, params, x = setup(sigma="prox")
        z, _ = sca_forward(zero_target(x, cfg), params, cfg)
        assert np.all(z[-cfg.tokens_per_task:] == 0.0)

    def test_prox_with_transfer_target_from_context(self):
        cfg, params, x = setup(sigma="prox", transfer=True, tasks=4)
        x = zero_target(x, cfg)
        z, trace = sca_forward(x, params, cfg)
        n = cfg.tokens_per_task
        expected = np.zeros((n, cfg.d))
        for h in range(cfg.heads):
            alpha = trace.coefficients_pre[h]
            _, wvo = combined_weights(params, cfg, h)
            for i in range(cfg.tasks - 1):
                expected += params["lambda"][0, i] * alpha[i * n:(i + 1) * n] @ (x @ wvo)
        assert np.max(np.abs(z[-n:] - expected)) <= 1e-12
        assert np.any(expected != 0)

    def test_trace_contract(self):
        cfg, params, x = setup(sigma="prox", transfer=True)
        _, trace = sca_forward(x, params, cfg)
        ctx = (cfg.tasks - 1) * cfg.tokens_per_task
        for pre, post in zip(trace.coefficients_pre, trace.coefficients_post):
            np.testing.assert_array_equal(pre[:ctx], post[:ctx])
        cfg_off = replace(cfg, transfer=False)
        _, trace = sca_forward(x, params, cfg_off)
        for pre, post in zip(trace.coefficients_pre, trace.coefficients_post):
            assert pre.tobytes() == post.tobytes()

    def test_rms_norm_applies_to_summed_output(self):
        cfg, params, x = setup(rms_norm=True)
        z, _ = sca_forward(x, params, cfg)
        raw, _ = sca_forward(x, params, replace(cfg, rms_norm=False))
        np.testing.assert_allclose(z, nx.rms_normalize(raw, cfg.rms_eps), atol=1e-15)

    def test_per_head_lambda(self):
        cfg, params, x = setup(sigma="prox", transfer=True, per_head_lambda=True)
        assert params["lambda"].shape == (cfg.heads, cfg.tasks - 1)
        z, trace = sca_forward(x, params, cfg)
        for h in range(cfg.heads):
            lam = params["lambda"][h:h + 1]
            np.testing.assert_array_equal(
                trace.coefficients_post[h], transfer_coefficients(trace.coefficients_pre[h], lam, cfg, 0)
            )


class TestReferenceMha:
    def test_zero_logits_average(self):
        cfg = SCAConfig(d=4, heads=1, tasks=2, tokens_per_task=2, sigma="softmax", transfer=False, factored=False)
        x = np.eye(4)
        rng = np.random.default_rng(0)
        params = {"wqk.0": np.zeros((4, 4)), "wvo.0": rng.normal(size=(4, 4))}
        out = reference_mha(x, params, cfg)
        np.testing.assert_allclose(out, np.tile(x.mean(axis=0) @ params["wvo.0"], (4, 1)), atol=1e-14)

    def test_permutation_equivariance(self):
        cfg, params, x = setup(seed=4)
        perm = np.random.default_rng(5).permutation(cfg.n_tokens)
        np.testing.assert_allclose(
            reference_mha(x[perm], params, cfg), reference_mha(x, params, cfg)[perm], atol=1e-12
        )


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), sigma=st.sampled_from(["softmax", "prox"]))
def test_context_block_permutation_leaves_target_unchanged(seed, sigma):
    cfg, params, x = setup(seed=seed, sigma=sigma, transfer=True, tasks=4, tpt=2)
    rng = np.random.default_rng(seed + 1)
    perm = rng.permutation(cfg.tasks - 1)
    n = cfg.tokens_per_task
    blocks = [x[i * n:(i + 1) * n] for i in range(cfg.tasks)]
    x_perm = np.concatenate([blocks[i] for i in perm] + [blocks[-1]])
    p_perm = dict(params, **{"lambda": params["lambda"][:, perm]})
    z, _ = sca_forward(x, params, cfg)
    z_perm, _ = sca_forward(x_perm, p_perm, cfg)
    assert np.max(np.abs(z[-n:] - z_perm[-n:])) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_context_rows_preserved(seed):
    cfg, params, x = setup(seed=seed, sigma="prox", transfer=True, tasks=4, xi=0.1)
    _, trace = sca_forward(x, params, cfg)
    ctx = (cfg.tasks - 1) * cfg.tokens_per_task
    for pre, post in zip(trace.coefficients_pre, trace.coefficients_post):
        assert pre[:ctx].tobytes() == post[:ctx].tobytes()


def _kink_free_instance(seed, cfg_kw, h=1e-6):
    for attempt in range(100):
        cfg, params, x = setup(seed=seed * 101 + attempt, **cfg_kw)
        if cfg.sigma != "prox":
            return cfg, params, x
        xi = float(params["xi"][0, 0]) if cfg.xi_learnable else cfg.xi
        ok = True
        for head in range(cfg.heads):
            logits = encode_coefficients(x, params, replace(cfg, xi=0.0, xi_learnable=False), head)
            if np.any(np.abs(np.abs(logits) - xi) <= 10 * h):
                ok = False
        if ok:
            return cfg, params, x
    raise RuntimeError("could not draw a kink-free instance")


@pytest.mark.parametrize(
    "cfg_kw",
    [
        dict(sigma="softmax", transfer=False),
        dict(sigma="prox", transfer=True, xi=0.1),
        dict(sigma="prox", transfer=True, xi_learnable=True, xi=0.05),
        dict(sigma="prox", transfer=True, phi_relu=True, psi_relu=True, scale_logits=True, rms_norm=True, xi=0.1),
        dict(sigma="softmax", transfer=True, per_head_lambda=True, factored=False),
    ],
)
def test_parameter_gradients_match_finite_differences(cfg_kw):
    cfg, params, x = _kink_free_instance(1, cfg_kw)
    target = np.random.default_rng(99).normal(size=x.shape)
    err = nx.finite_diff_check(lambda p: nx.mse_loss(sca_forward(x, p, cfg)[0], target), params, h=1e-6)
    assert err <= 1e-4


def test_sparsity_ratio_examples():
    assert sparsity_ratio(np.zeros((3, 3))) == 1.0
    assert sparsity_ratio(np.ones((3, 3))) == 0.0
    m = np.random.default_rng(0).normal(size=(6, 6))
    xi = 0.5
    k = sum(1 for v in m.ravel() if abs(v) <= xi)
    assert sparsity_ratio(nx.soft_threshold(m, xi)) == k / 36


def test_span_reconstruction_recovers_target_coefficients():
    rng = np.random.default_rng(0)
    n, k = 12, 5
    ctx = np.zeros((k, n))
    cover = rng.permutation(n)
    for i in range(k):
        support = set(cover[i::k]) | set(rng.choice(n, size=2, replace=False))
        ctx[i, list(support)] = rng.normal(size=len(support))
    assert np.all(np.any(ctx != 0, axis=0))
    weights = rng.normal(size=k)
    target = weights @ ctx
    lam = fit_transfer_weights(ctx, target)
    a = ctx.T
    oracle = np.linalg.solve(a.T @ a, a.T @ target)
    np.testing.assert_allclose(lam, oracle, atol=1e-9)
    assert np.linalg.norm(lam @ ctx - target) <= 1e-9
