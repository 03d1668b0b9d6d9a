import numpy as np
import pytest

from maskdiff.denoiser import DenoiserConfig, DenoiserModel, embed_timesteps
from maskdiff.errors import ConfigError, ShapeError
from maskdiff.maskgen import (
    MaskGenerator,
    MaskGeneratorConfig,
    build_generator_configs,
    fuse_inputs,
    generate_masks,
    mask_logits,
)
from maskdiff.masks import (
    MaskTensor,
    apply_mask,
    deterministic_mask,
    gumbel_sigmoid,
    mask_ratio,
    masked_linear,
)
from maskdiff.tensor import Tensor, add_bias, matmul, mul, transpose, tsum


def _gen_config(**kw):
    defaults = dict(
        layer_id="hidden1",
        target_shape=(4, 2),
        in_channels=2,
        temb_dim=4,
        mlp_hidden=8,
    )
    defaults.update(kw)
    return MaskGeneratorConfig(**defaults)


def _generator(seed=0, **kw):
    return MaskGenerator(_gen_config(**kw), np.random.default_rng(seed))


# --- Gumbel-Sigmoid gate -----------------------------------------------------


def test_gate_defaults_match_initialization_convention():
    cfg = _gen_config()
    assert cfg.tau == 1.0
    assert cfg.delta == 0.5


def test_gate_saturation_positive():
    rng = np.random.default_rng(0)
    logits = Tensor(np.full((10, 10), 20.0))
    for _ in range(100):
        m = gumbel_sigmoid(logits, tau=1.0, delta=0.5, hard=True, rng=rng)
        assert np.all(m.values.data == 1.0)


def test_gate_saturation_negative():
    rng = np.random.default_rng(1)
    logits = Tensor(np.full((10, 10), -20.0))
    for _ in range(100):
        m = gumbel_sigmoid(logits, tau=1.0, delta=0.5, hard=True, rng=rng)
        assert np.all(m.values.data == 0.0)


def test_gate_zero_logit_is_a_fair_coin():
    rng = np.random.default_rng(2)
    logits = Tensor(np.zeros(100_000))
    m = gumbel_sigmoid(logits, tau=1.0, delta=0.5, hard=True, rng=rng)
    assert abs(m.values.data.mean() - 0.5) <= 0.01


def test_gate_rejects_bad_parameters():
    logits = Tensor(np.zeros(3))
    rng = np.random.default_rng(3)
    with pytest.raises(ConfigError):
        gumbel_sigmoid(logits, tau=0.0, delta=0.5, hard=True, rng=rng)
    with pytest.raises(ConfigError):
        gumbel_sigmoid(logits, tau=1.0, delta=1.0, hard=True, rng=rng)


def test_gate_discreteness_monotone_in_temperature():
    rng_lo = np.random.default_rng(4)
    rng_hi = np.random.default_rng(4)
    logits = Tensor(np.random.default_rng(5).normal(size=1000))
    lo = gumbel_sigmoid(logits, tau=0.1, delta=0.5, hard=False, rng=rng_lo)
    hi = gumbel_sigmoid(logits, tau=10.0, delta=0.5, hard=False, rng=rng_hi)

    def dist(vals):
        return np.minimum(vals, 1.0 - vals).mean()

    assert dist(lo.values.data) < dist(hi.values.data)


def test_straight_through_gradient_equals_soft_gradient():
    rng = np.random.default_rng(6)
    logit_values = rng.normal(size=(3, 4))
    noise = rng.normal(size=(3, 4))
    weights = rng.normal(size=(3, 4))

    def gate(logits, hard):
        from maskdiff.tensor import Tensor as Tn
        from maskdiff import tensor as T

        noisy = T.scale(T.add(logits, Tn(noise)), 1.0)
        soft = T.sigmoid(noisy)
        if hard:
            return T.straight_through_threshold(soft, 0.5)
        return soft

    la = Tensor(logit_values, requires_grad=True)
    tsum(mul(gate(la, hard=True), Tensor(weights))).backward()
    lb = Tensor(logit_values, requires_grad=True)
    tsum(mul(gate(lb, hard=False), Tensor(weights))).backward()
    assert np.any(la.grad != 0.0)
    assert np.max(np.abs(la.grad - lb.grad)) <= 1e-12


def test_deterministic_mask_thresholds_without_noise():
    logits = Tensor(np.array([[-1.0, 0.0, 1.0]]))
    m = deterministic_mask(logits, tau=1.0, delta=0.5)
    assert m.hard
    assert np.array_equal(m.values.data, [[0.0, 1.0, 1.0]])


# --- weight masking ----------------------------------------------------------


def test_apply_mask_identity_and_annihilation():
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(3, 4)))
    ones = Tensor(np.ones((2, 3, 4)))
    zeros = Tensor(np.zeros((2, 3, 4)))
    got = apply_mask(w, ones).data
    assert np.array_equal(got[0], w.data) and np.array_equal(got[1], w.data)
    assert np.array_equal(apply_mask(w, zeros).data, np.zeros((2, 3, 4)))


def test_apply_mask_loop_oracle_and_no_mutation():
    rng = np.random.default_rng(8)
    w = rng.normal(size=(3, 4))
    m = (rng.random((2, 3, 4)) < 0.5).astype(float)
    tw = Tensor(w)
    snap = tw.data.copy()
    got = apply_mask(tw, Tensor(m)).data
    for b in range(2):
        for i in range(3):
            for j in range(4):
                assert abs(got[b, i, j] - m[b, i, j] * w[i, j]) <= 1e-12
    assert np.array_equal(tw.data, snap)


def test_apply_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        apply_mask(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4, 3))))


def test_masked_linear_reduces_to_plain_linear():
    rng = np.random.default_rng(9)
    w = Tensor(rng.normal(size=(4, 6)))
    b = Tensor(rng.normal(size=4))
    h = Tensor(rng.normal(size=(2, 3, 6)))
    w_hat = apply_mask(w, Tensor(np.ones((2, 4, 6))))
    got = masked_linear(h, w_hat, b).data
    ref = add_bias(
        Tensor(np.concatenate([h.data[0], h.data[1]]) @ w.data.T), b
    ).data
    assert np.max(np.abs(got.reshape(6, 4) - ref)) <= 1e-12


def test_masked_linear_dead_channel_leaves_bias():
    rng = np.random.default_rng(10)
    w = Tensor(rng.normal(size=(4, 6)))
    b = Tensor(rng.normal(size=4))
    h = Tensor(rng.normal(size=(1, 3, 6)))
    mask = np.ones((1, 4, 6))
    mask[0, 2, :] = 0.0
    out = masked_linear(h, apply_mask(w, Tensor(mask)), b).data
    assert np.max(np.abs(out[0, :, 2] - b.data[2])) <= 1e-15


def test_masked_linear_per_sample_loop_oracle():
    rng = np.random.default_rng(11)
    h = rng.normal(size=(3, 2, 5))
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=4)
    m = (rng.random((3, 4, 5)) < 0.6).astype(float)
    got = masked_linear(Tensor(h), apply_mask(Tensor(w), Tensor(m)), Tensor(b)).data
    for i in range(3):
        ref = h[i] @ (m[i] * w).T + b
        assert np.max(np.abs(got[i] - ref)) <= 1e-12


def test_mask_ratio():
    ones = MaskTensor(Tensor(np.ones(10)), hard=True)
    zeros = MaskTensor(Tensor(np.zeros(10)), hard=True)
    assert mask_ratio(ones) == 0.0
    assert mask_ratio(zeros) == 1.0
    bits = np.ones(10000)
    bits[:824] = 0.0
    assert mask_ratio(MaskTensor(Tensor(bits), hard=True)) == 0.0824
    with pytest.raises(ValueError):
        mask_ratio(MaskTensor(Tensor(np.full(4, 0.5)), hard=False))


def test_hard_mask_tensor_validates_values():
    with pytest.raises(ValueError):
        MaskTensor(Tensor(np.array([0.0, 0.5, 1.0])), hard=True)


# --- generator ---------------------------------------------------------------


def test_fuse_inputs_dead_branches():
    gen = _generator(0)
    rng = np.random.default_rng(12)
    z = Tensor(rng.normal(size=(3, 2)))
    t_emb = Tensor(rng.normal(size=(3, 4)))

    gen.params["fc.w"] = Tensor(np.zeros((2, 4)), requires_grad=True)
    gen.params["fc.b"] = Tensor(np.zeros(2), requires_grad=True)
    assert np.max(np.abs(fuse_inputs(t_emb, z, gen).data - z.data)) <= 1e-15

    gen2 = _generator(1)
    zeros = Tensor(np.zeros((3, 2)))
    fc_out = matmul(t_emb, transpose(gen2.params["fc.w"])).data + gen2.params["fc.b"].data
    assert np.max(np.abs(fuse_inputs(t_emb, zeros, gen2).data - fc_out)) <= 1e-12


def test_fuse_inputs_ablation_arms():
    rng = np.random.default_rng(13)
    z = Tensor(rng.normal(size=(3, 2)))
    t_emb = Tensor(rng.normal(size=(3, 4)))
    no_temb = _generator(2, use_temb=False)
    assert np.array_equal(fuse_inputs(t_emb, z, no_temb).data, z.data)
    no_sample = _generator(3, use_sample=False)
    expected = (
        matmul(t_emb, transpose(no_sample.params["fc.w"])).data
        + no_sample.params["fc.b"].data
    )
    assert np.max(np.abs(fuse_inputs(t_emb, z, no_sample).data - expected)) <= 1e-12


def test_both_branches_off_rejected():
    with pytest.raises(ConfigError):
        _gen_config(use_temb=False, use_sample=False)


def test_mask_logits_zero_network():
    gen = _generator(4, init_logit=0.0)
    for name in list(gen.params):
        gen.params[name] = Tensor(np.zeros(gen.params[name].shape),
                                  requires_grad=True)
    fused = Tensor(np.random.default_rng(14).normal(size=(3, 2)))
    out = mask_logits(fused, gen)
    assert out.shape == (3, 8)
    assert np.array_equal(out.data, np.zeros((3, 8)))


def test_mask_logits_width_contract_and_loop_oracle():
    gen = _generator(5)
    rng = np.random.default_rng(15)
    # Give the zero-initialized last layer real weights for the oracle.
    gen.params["mlp4.w"] = Tensor(rng.normal(size=gen.params["mlp4.w"].shape),
                                  requires_grad=True)
    fused = rng.normal(size=(3, 2))
    got = mask_logits(Tensor(fused), gen)
    assert got.shape == (3, gen.config.out_dim)

    p = {k: v.data for k, v in gen.params.items()}
    for i in range(3):
        h = np.maximum(p["mlp1.w"] @ fused[i] + p["mlp1.b"], 0.0)
        h = np.maximum(p["mlp2.w"] @ h + p["mlp2.b"], 0.0)
        h = p["mlp3.w"] @ h + p["mlp3.b"]
        ref = p["mlp4.w"] @ h + p["mlp4.b"]
        assert np.max(np.abs(got.data[i] - ref)) <= 1e-12

    with pytest.raises(ShapeError):
        mask_logits(Tensor(np.zeros((3, 5))), gen)


def test_generate_masks_depends_on_timestep_and_sample():
    gen = _generator(6)
    rng = np.random.default_rng(16)
    gen.params["mlp4.w"] = Tensor(rng.normal(size=gen.params["mlp4.w"].shape),
                                  requires_grad=True)
    z = Tensor(rng.normal(size=(2, 2)))

    def logits_at(t, zz):
        t_emb = Tensor(embed_timesteps(np.full(2, t), 4))
        return mask_logits(fuse_inputs(t_emb, zz, gen), gen).data

    assert np.max(np.abs(logits_at(3, z) - logits_at(700, z))) > 0
    z2 = Tensor(rng.normal(size=(2, 2)))
    assert np.max(np.abs(logits_at(3, z) - logits_at(3, z2))) > 0

    masks = generate_masks([gen], 3, z, hard=True, rng=np.random.default_rng(17))
    vals = masks["hidden1"].values.data
    assert vals.shape == (2, 4, 2)
    assert np.all((vals == 0.0) | (vals == 1.0))


def test_generate_masks_rejects_duplicate_layers():
    g1, g2 = _generator(7), _generator(8)
    with pytest.raises(ConfigError):
        generate_masks([g1, g2], 0, Tensor(np.zeros((1, 2))), hard=True,
                       rng=np.random.default_rng(0))


def test_reshape_round_trip_through_mask_shape():
    from maskdiff.tensor import reshape

    rng = np.random.default_rng(18)
    flat = rng.normal(size=(3, 8))
    t = Tensor(flat)
    back = reshape(reshape(t, (3, 4, 2)), (3, 8))
    assert np.array_equal(back.data, flat)


def test_reduction_all_ones_masks_leave_model_unchanged():
    model = DenoiserModel(DenoiserConfig(hidden_dim=8, temb_dim=4),
                          np.random.default_rng(19))
    # init_logit=50 saturates the gate for every representable noise draw.
    configs = build_generator_configs(model.config, mlp_hidden=8, init_logit=50.0)
    gens = [MaskGenerator(c, np.random.default_rng(20 + i))
            for i, c in enumerate(configs)]
    rng = np.random.default_rng(21)
    z = rng.normal(size=(4, 2))
    cond = rng.integers(0, 9, size=4)
    for trial in range(20):
        masks = generate_masks(gens, 11, Tensor(z), hard=True, rng=rng)
        masked = model.forward(Tensor(z), 11, cond, masks=masks)
        plain = model.forward(Tensor(z), 11, cond)
        assert np.max(np.abs(masked.data - plain.data)) <= 1e-12


def test_base_weights_unchanged_by_masked_forward_backward():
    model = DenoiserModel(DenoiserConfig(hidden_dim=8, temb_dim=4),
                          np.random.default_rng(22))
    configs = build_generator_configs(model.config, mlp_hidden=8)
    gens = [MaskGenerator(c, np.random.default_rng(23 + i))
            for i, c in enumerate(configs)]
    snap = {k: v.data.copy() for k, v in model.params.items()}
    rng = np.random.default_rng(24)
    z = rng.normal(size=(4, 2))
    masks = generate_masks(gens, 5, Tensor(z), hard=True, rng=rng)
    out = model.forward(Tensor(z), 5, rng.integers(0, 9, size=4), masks=masks)
    tsum(mul(out, out)).backward()
    for k, v in model.params.items():
        assert np.array_equal(v.data, snap[k]), k


def test_generator_parameter_count_reported():
    gen = _generator(9)
    assert gen.num_parameters() == sum(p.size for p in gen.params.values())
    assert gen.num_parameters() > 0
