import numpy as np
import pytest

from prrm import ops
from prrm.errors import ShapeError, UnknownKeyError
from prrm.models import (
    ARCH_MINI_LONG,
    ARCH_MINI_SHORT,
    BN_KINDS,
    Model,
    ParamKey,
    ParamKind,
    build_model,
)
from prrm.rng import Rng
from prrm.tensor import Tensor


def params_equal(a: Model, b: Model) -> bool:
    for key in a.param_keys():
        if not np.array_equal(a.get_param(key).data, b.get_param(key).data):
            return False
    return True


class TestBuild:
    def test_build_deterministic(self):
        a = build_model(ARCH_MINI_SHORT, 7)
        b = build_model(ARCH_MINI_SHORT, 7)
        assert params_equal(a, b)

    def test_different_seeds_differ(self):
        a = build_model(ARCH_MINI_LONG, 1)
        b = build_model(ARCH_MINI_LONG, 2)
        assert not params_equal(a, b)

    def test_layer_counts(self):
        long = build_model(ARCH_MINI_LONG, 0)
        short = build_model(ARCH_MINI_SHORT, 0)
        assert long.conv_count == 11 and long.bn_count == 10
        assert short.conv_count == 11 and short.bn_count == 9

    def test_param_key_bounds(self):
        m = build_model(ARCH_MINI_LONG, 0)
        keys = m.param_keys()
        assert ParamKey(11, ParamKind.CONV_W) in keys
        assert ParamKey(12, ParamKind.CONV_W) not in keys
        assert len(keys) == 11 * 2 + 10 * 4

    def test_address_completeness(self):
        m = build_model(ARCH_MINI_SHORT, 3)
        total_via_keys = sum(m.get_param(k).size for k in m.param_keys())
        total_direct = sum(c.w.size + c.b.size for c in m.convs) + sum(
            4 * bn.state.channels for bn in m.bns
        )
        assert total_via_keys == total_direct

    def test_fresh_run_var_is_ones(self):
        m = build_model(ARCH_MINI_SHORT, 5)
        rv = m.get_param(ParamKey(1, ParamKind.BN_RV))
        assert np.array_equal(rv.data, np.ones_like(rv.data))

    def test_kaiming_bound_respected(self):
        m = build_model(ARCH_MINI_LONG, 9)
        for c in m.convs:
            _, cin, kh, kw = c.w.shape
            bound = np.sqrt(6.0 / (cin * kh * kw))
            assert np.all(np.abs(c.w.data) <= bound)
            assert not c.b.data.any()

    def test_unknown_arch_rejected(self):
        with pytest.raises(UnknownKeyError):
            build_model("mini_medium", 0)

    def test_mini_short_flags(self):
        m = build_model(ARCH_MINI_SHORT, 0)
        fd = {i + 1 for i, c in enumerate(m.convs) if c.feature_decomposition}
        rb = {i + 1 for i, c in enumerate(m.convs) if c.residual_branch}
        assert fd == {1, 4, 6, 9, 10, 11}
        assert rb == {2, 3, 4, 5, 7, 8}

    def test_mini_long_has_no_residual_branch(self):
        m = build_model(ARCH_MINI_LONG, 0)
        assert not any(c.residual_branch for c in m.convs)
        assert any(c.feature_decomposition for c in m.convs)


class TestForward:
    @pytest.mark.parametrize("arch", [ARCH_MINI_LONG, ARCH_MINI_SHORT])
    def test_output_shape(self, arch):
        m = build_model(arch, 1)
        x = Tensor(Rng(2).uniform(0, 1, (2, 1, 32, 32)))
        out = m.forward(x, "eval")
        assert out.shape == (2, 4, 32, 32)

    @pytest.mark.parametrize("arch", [ARCH_MINI_LONG, ARCH_MINI_SHORT])
    def test_other_spatial_sizes(self, arch):
        m = build_model(arch, 1)
        x = Tensor(Rng(2).uniform(0, 1, (1, 1, 16, 24)))
        assert m.forward(x, "eval").shape == (1, 4, 16, 24)

    def test_indivisible_extent_rejected(self):
        m = build_model(ARCH_MINI_LONG, 1)
        with pytest.raises(ShapeError):
            m.forward(Tensor.zeros((1, 1, 30, 32)), "eval")

    def test_eval_is_pure_and_deterministic(self):
        m = build_model(ARCH_MINI_SHORT, 3)
        x = Tensor(Rng(4).uniform(0, 1, (2, 1, 32, 32)))
        snap = {k.canonical(): m.get_param(k).data.copy() for k in m.param_keys()}
        a = m.forward(x, "eval")
        b = m.forward(x, "eval")
        assert np.array_equal(a.data, b.data)
        for k in m.param_keys():
            assert np.array_equal(m.get_param(k).data, snap[k.canonical()])

    def test_train_mode_updates_every_run_mean(self):
        m = build_model(ARCH_MINI_LONG, 3)
        x = Tensor(Rng(5).uniform(0, 1, (4, 1, 32, 32)))
        before = [bn.state.run_mean.copy() for bn in m.bns]
        m.forward(x, "train")
        for prev, bn in zip(before, m.bns):
            assert not np.array_equal(prev, bn.state.run_mean)

    def test_residual_identity_mapping(self):
        # zero residual-branch kernels + bypass BNs: the trunk reduces to
        # relu(proj(relu(stem(x)))) through the identity skips
        m = build_model(ARCH_MINI_SHORT, 6)
        for i, c in enumerate(m.convs, start=1):
            if c.residual_branch:
                m.set_param(ParamKey(i, ParamKind.CONV_W), Tensor.zeros(c.w.shape))
        for bn in m.bns:
            c = bn.state.channels
            bn.state.gamma = np.ones(c, dtype=np.float32)
            bn.state.beta = np.zeros(c, dtype=np.float32)
            bn.state.run_mean = np.zeros(c, dtype=np.float32)
            bn.state.run_var = np.full(c, 1.0 - bn.state.eps, dtype=np.float32)

        x = Tensor(Rng(7).uniform(0, 1, (1, 1, 32, 32)))
        _, values, _ = m._run(x, train=False, keep=False)
        gap_node = next(n for n in m.nodes if n.op == "gap")
        trunk = values[gap_node.inputs[0]]

        stem = ops.relu_forward(ops.conv2d_forward(x, m.convs[0].w, m.convs[0].b, 1, 1))
        proj = m.convs[5]
        expect = ops.relu_forward(ops.conv2d_forward(stem, proj.w, proj.b, proj.stride, proj.pad))
        assert np.allclose(trunk.data, expect.data, atol=1e-6)


class TestParamAccess:
    def test_get_returns_copy(self):
        m = build_model(ARCH_MINI_SHORT, 1)
        key = ParamKey(2, ParamKind.CONV_W)
        t = m.get_param(key)
        t.data[...] = 99.0
        assert not np.array_equal(m.get_param(key).data, t.data)

    def test_set_get_roundtrip_bit_identical(self):
        m = build_model(ARCH_MINI_LONG, 1)
        snap = {k.canonical(): m.get_param(k).data.copy() for k in m.param_keys()}
        for k in m.param_keys():
            m.set_param(k, m.get_param(k))
        for k in m.param_keys():
            assert np.array_equal(m.get_param(k).data, snap[k.canonical()])

    def test_set_shape_mismatch_refused_model_untouched(self):
        m = build_model(ARCH_MINI_SHORT, 1)
        key = ParamKey(1, ParamKind.CONV_W)
        before = m.get_param(key)
        wrong = Tensor.zeros(tuple(reversed(before.shape)))
        with pytest.raises(ShapeError):
            m.set_param(key, wrong)
        assert np.array_equal(m.get_param(key).data, before.data)

    def test_unknown_key_rejected(self):
        m = build_model(ARCH_MINI_SHORT, 1)
        with pytest.raises(UnknownKeyError):
            m.get_param(ParamKey(99, ParamKind.CONV_W))
        with pytest.raises(UnknownKeyError):
            m.set_param(ParamKey(0, ParamKind.BN_RM), Tensor.zeros((16,)))

    def test_bn_param_updates_are_visible_to_eval(self):
        m = build_model(ARCH_MINI_SHORT, 2)
        x = Tensor(Rng(8).uniform(0, 1, (1, 1, 32, 32)))
        base = m.forward(x, "eval")
        key = ParamKey(1, ParamKind.BN_RM)
        shifted = m.get_param(key)
        shifted.data += 0.5
        m.set_param(key, shifted)
        out = m.forward(x, "eval")
        assert not np.array_equal(base.data, out.data)

    def test_clone_is_independent(self):
        m = build_model(ARCH_MINI_LONG, 4)
        c = m.clone()
        assert params_equal(m, c)
        key = ParamKey(3, ParamKind.CONV_W)
        t = c.get_param(key)
        t.data += 1.0
        c.set_param(key, t)
        assert not params_equal(m, c)


class TestParamKeyParsing:
    def test_canonical_roundtrip(self):
        key = ParamKey(7, ParamKind.BN_RV)
        assert key.canonical() == "L7.bn_rv"
        assert ParamKey.parse("L7.bn_rv") == key

    def test_malformed_rejected(self):
        for bad in ("7.conv_w", "Lx.conv_w", "L1.conv_q", "L1"):
            with pytest.raises(UnknownKeyError):
                ParamKey.parse(bad)

    def test_stable_kind_names(self):
        assert [k.value for k in ParamKind] == [
            "conv_w", "conv_b", "bn_rm", "bn_rv", "bn_rw", "bn_rb",
        ]
        assert [k.value for k in BN_KINDS] == ["bn_rm", "bn_rv", "bn_rw", "bn_rb"]
