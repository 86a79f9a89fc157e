import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odpfl import tensor as T
from odpfl.models import (
    EncoderSpec,
    HyperNetworkSpec,
    TargetModelSpec,
    WeightBundle,
    default_descriptor_dim,
    encode_batched,
    encode_dataset,
    forward_target,
    generate_bundle,
    generate_weights,
    init_encoder,
    init_hypernet,
    init_target,
    phi_features,
    spectral_norm,
)
from odpfl.tensor import DimensionError, EmptySetError, Tape, Tensor

from oracles import central_difference, target_forward


def rel_diff(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def test_target_param_count_is_analytic():
    spec = TargetModelSpec(7, 3, (11, 5))
    assert spec.num_params == 7 * 11 + 11 + 11 * 5 + 5 + 5 * 3 + 3
    w = init_target(spec, np.random.default_rng(0))
    assert w.num_params == spec.num_params
    assert w.shapes == spec.param_shapes()


def test_zero_weights_give_zero_logits():
    spec = TargetModelSpec(4, 3, (6,))
    w = WeightBundle({k: np.zeros(s) for k, s in spec.param_shapes().items()})
    x = np.random.default_rng(1).standard_normal((5, 4))
    assert np.array_equal(forward_target(spec, w, x).data, np.zeros((5, 3)))


def test_single_layer_is_affine():
    spec = TargetModelSpec(4, 3, ())
    w = init_target(spec, np.random.default_rng(2))
    x = np.random.default_rng(3).standard_normal((6, 4))
    np.testing.assert_allclose(forward_target(spec, w, x).data, x @ w["dense0.weight"] + w["dense0.bias"], rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    hidden = tuple(int(h) for h in rng.integers(1, 9, rng.integers(0, 4)))
    spec = TargetModelSpec(int(rng.integers(1, 8)), int(rng.integers(2, 6)), hidden)
    w = init_target(spec, rng)
    x = rng.standard_normal((9, spec.input_dim))
    np.testing.assert_allclose(forward_target(spec, w, x).data, target_forward(w, x, len(hidden) + 1), rtol=0, atol=1e-10)


def test_forward_shape_error():
    spec = TargetModelSpec(4, 3, (6,))
    with pytest.raises(DimensionError):
        forward_target(spec, init_target(spec, np.random.default_rng(0)), np.zeros((2, 5)))


def test_dropout_only_when_requested():
    spec = TargetModelSpec(4, 3, (50,), dropout_rate=0.5)
    w = init_target(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((3, 4))
    plain = forward_target(spec, w, x).data
    assert np.array_equal(plain, forward_target(TargetModelSpec(4, 3, (50,)), w, x).data)
    assert not np.array_equal(plain, forward_target(spec, w, x, np.random.default_rng(2)).data)


def _encoder(rng):
    spec = EncoderSpec(3, 6, (8,), pool_split=True)
    return spec, init_encoder(spec, rng)


def test_encoder_permutation_invariance_50_perms():
    rng = np.random.default_rng(0)
    spec, gamma = _encoder(rng)
    x = rng.standard_normal((40, 3))
    ref = encode_dataset(spec, gamma, x).data
    for _ in range(50):
        assert rel_diff(encode_dataset(spec, gamma, x[rng.permutation(40)]).data, ref) <= 1e-9


def test_duplication_invariance_identity_mean():
    rng = np.random.default_rng(1)
    spec = EncoderSpec(3, 6, (8,), pool_split=False, psi_kind="identity_mean")
    gamma = init_encoder(spec, rng)
    x = rng.standard_normal((17, 3))
    assert rel_diff(encode_dataset(spec, gamma, np.vstack([x, x])).data, encode_dataset(spec, gamma, x).data) <= 1e-9


def test_identity_mean_equals_mean_of_phi():
    rng = np.random.default_rng(2)
    spec = EncoderSpec(3, 5, (8,), pool_split=False, unit_sphere_normalize=True, psi_kind="identity_mean")
    gamma = init_encoder(spec, rng)
    x = rng.standard_normal((23, 3))
    np.testing.assert_allclose(encode_dataset(spec, gamma, x).data, phi_features(spec, gamma, x).data.mean(axis=0), rtol=0, atol=1e-12)


def test_unit_sphere_norms():
    rng = np.random.default_rng(3)
    spec = EncoderSpec(3, 6, (8,), pool_split=False, unit_sphere_normalize=True)
    gamma = init_encoder(spec, rng)
    norms = np.linalg.norm(phi_features(spec, gamma, rng.standard_normal((1000, 3)) * 5).data, axis=1)
    assert np.max(np.abs(norms - 1.0)) <= 1e-9


def test_default_descriptor_dim():
    assert default_descriptor_dim(100) == 25
    assert default_descriptor_dim(50) == 12
    assert default_descriptor_dim(1) == 1


def test_pool_split_width_even():
    spec = EncoderSpec(3, 25, pool_split=True)
    assert spec.phi_out_dim == 26
    with pytest.raises(ValueError):
        EncoderSpec(3, 6, phi_out_dim=5, pool_split=True)
    with pytest.raises(ValueError):
        EncoderSpec(3, 6, pool_split=True, psi_kind="identity_mean")


def test_encode_empty_set():
    rng = np.random.default_rng(0)
    spec, gamma = _encoder(rng)
    with pytest.raises(EmptySetError, match="empty client dataset"):
        encode_dataset(spec, gamma, np.zeros((0, 3)))


def test_encode_batched_large_batch_is_identity():
    rng = np.random.default_rng(4)
    spec, gamma = _encoder(rng)
    x = rng.standard_normal((10, 3))
    assert encode_batched(spec, gamma, x, 10, rng).data.tobytes() == encode_dataset(spec, gamma, x).data.tobytes()


def test_encode_batched_mean_of_means():
    rng = np.random.default_rng(5)
    spec = EncoderSpec(3, 4, (8,), pool_split=False, psi_kind="identity_mean")
    gamma = init_encoder(spec, rng)
    x = rng.standard_normal((24, 3))
    assert rel_diff(encode_batched(spec, gamma, x, 6, rng).data, encode_dataset(spec, gamma, x).data) <= 1e-9


def test_encode_batched_two_batches_oracle():
    spec, gamma = _encoder(np.random.default_rng(6))
    x = np.random.default_rng(7).standard_normal((8, 3))
    perm = np.random.default_rng(8).permutation(8)
    expected = 0.5 * (encode_dataset(spec, gamma, x[perm[:4]]).data + encode_dataset(spec, gamma, x[perm[4:]]).data)
    got = encode_batched(spec, gamma, x, 4, np.random.default_rng(8)).data
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def _hypernet(rng, emb=4):
    target = TargetModelSpec(3, 2, (5,))
    spec = HyperNetworkSpec(emb, target, (6, 6))
    return spec, init_hypernet(spec, rng)


def test_head_sizes_sum_to_target_params():
    spec, _ = _hypernet(np.random.default_rng(0))
    assert spec.head_output_size() == spec.target.num_params


def test_generate_weights_deterministic_and_shaped():
    rng = np.random.default_rng(1)
    spec, theta = _hypernet(rng)
    e = rng.standard_normal(4)
    a, b = generate_bundle(spec, theta, e), generate_bundle(spec, theta, e)
    assert a.shapes == spec.target.param_shapes()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_zero_theta_gives_zero_bundle():
    spec, theta = _hypernet(np.random.default_rng(2))
    zero = WeightBundle({k: np.zeros_like(v) for k, v in theta.items()})
    out = generate_bundle(spec, zero, np.ones(4))
    assert all(not np.any(v) for v in out.values())


def test_generate_weights_dimension_error():
    spec, theta = _hypernet(np.random.default_rng(3))
    with pytest.raises(DimensionError):
        generate_weights(spec, theta, np.ones(5))


def test_generate_weights_jvp_matches_finite_differences():
    rng = np.random.default_rng(4)
    spec, theta = _hypernet(rng)
    e0 = rng.standard_normal(4)
    probe = {k: rng.standard_normal(s) for k, s in spec.target.param_shapes().items()}

    def scalar(e):
        out = generate_bundle(spec, theta, e)
        return float(sum(np.sum(out[k] * probe[k]) for k in probe))

    with Tape() as tape:
        e = tape.watch(Tensor(e0))
        out = generate_weights(spec, theta, e)
    seeds = [T.AdjointSeed(out[k].node_id, Tensor(probe[k])) for k in probe]
    ana = tape.backward(seeds, [e.node_id])[e.node_id].data
    num = central_difference(scalar, e0)
    assert rel_diff(ana, num) <= 1e-4


def test_composite_gradient_two_class_toy():
    # theta and gamma gradients of the full chain on 2 classes, 8 samples
    rng = np.random.default_rng(5)
    enc = EncoderSpec(3, 4, (5,), pool_split=True)
    gamma = init_encoder(enc, rng)
    hn = HyperNetworkSpec(4, TargetModelSpec(3, 2, (4,)), (5,), head_gain=1.0)
    theta = init_hypernet(hn, rng)
    x = rng.standard_normal((8, 3))
    y = rng.integers(0, 2, 8)

    def loss_of(th, ga):
        w = generate_bundle(hn, th, encode_dataset(enc, ga, x).data)
        return float(T.softmax_cross_entropy(forward_target(hn.target, w, x), y).data)

    with Tape() as tape:
        th = theta.tensors(tape)
        ga = gamma.tensors(tape)
        w = generate_weights(hn, th, encode_dataset(enc, ga, x))
        loss = T.softmax_cross_entropy(forward_target(hn.target, w, x), y)
    for group, bundle, leaves in (("theta", theta, th), ("gamma", gamma, ga)):
        for key in ("trunk0.weight",) if group == "theta" else ("phi0.weight", "psi.weight"):
            (ana,) = T.grad(tape, loss, [leaves[key]])

            def f(v, key=key, group=group, bundle=bundle):
                changed = WeightBundle({**bundle, key: v})
                return loss_of(changed, gamma) if group == "theta" else loss_of(theta, changed)

            assert rel_diff(ana, central_difference(f, bundle[key])) <= 1e-4


def test_spectral_norm_examples():
    assert abs(spectral_norm(np.eye(4)) - 1.0) <= 1e-8
    assert abs(spectral_norm(np.diag([3.0, 1.0])) - 3.0) <= 1e-8
    assert spectral_norm(np.zeros((3, 2))) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_spectral_norm_matches_svd(seed):
    w = np.random.default_rng(seed).standard_normal((10, 25))
    assert abs(spectral_norm(w) - np.linalg.svd(w, compute_uv=False)[0]) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_spectral_norm_never_below_truth(r, c, seed):
    w = np.random.default_rng(seed).standard_normal((r, c))
    truth = np.linalg.svd(w, compute_uv=False)[0]
    assert spectral_norm(w) >= truth * (1 - 1e-6)


def test_bundle_flat_round_trip():
    spec, theta = _hypernet(np.random.default_rng(6))
    back = WeightBundle.from_flat(theta.shapes, theta.flat())
    assert back.checksum() == theta.checksum()
