"""Classifier heads: reductions, derivation-form equivalence, covariance contrast."""

import numpy as np
import pytest

from scpseg.backbone import BackboneConfig, build_backbone
from scpseg.gradcheck import max_relative_error
from scpseg.heads import (
    SIGMA_FLOOR,
    CoordHeadVariant,
    CoordKind,
    HeadVariant,
    PhiNet,
    ScpForm,
    ScpHead,
    SharedHead,
    base_forward,
    coord_head_forward,
    head_parameters,
    init_head,
    normalize_musigma,
    normalize_pq,
    normalize_pq_reformulated,
    phi_forward,
    scp_forward_final,
    scp_forward_musigma,
    scp_forward_pq,
)
from scpseg.posenc import coord_channels, encode_positions
from scpseg.tensor import Tensor


def rand_tensor(rng, shape, scale=1.0, requires_grad=False):
    return Tensor((scale * rng.normal(size=shape)).astype(np.float32), requires_grad=requires_grad)


def phi_oracle(phi: PhiNet, s_vec: np.ndarray) -> np.ndarray:
    """Evaluate the generator on one position vector with plain matrix algebra."""
    w1 = phi.w1.data.reshape(phi.w1.shape[0], 4).astype(np.float64)
    w2 = phi.w2.data.reshape(phi.w2.shape[0], phi.w2.shape[1]).astype(np.float64)
    w3 = phi.w3.data.reshape(phi.w3.shape[0], phi.w3.shape[1]).astype(np.float64)
    h = np.maximum(w1 @ s_vec, 0)
    h = np.maximum(w2 @ h, 0)
    return w3 @ h


class TestBaseForward:
    def test_column_of_ones(self):
        x = np.zeros((3, 2, 2), dtype=np.float32)
        x[0], x[1], x[2] = 1.0, 2.0, 3.0
        head = SharedHead(w=Tensor(np.ones((3, 1), dtype=np.float32)))
        y = base_forward(head, Tensor(x))
        assert np.all(y.data == 6.0)

    def test_equals_conv_1x1_bitwise(self):
        from scpseg.tensor import conv2d

        rng = np.random.default_rng(0)
        x = rand_tensor(rng, (4, 5, 5))
        head = SharedHead(w=rand_tensor(rng, (4, 2)))
        got = base_forward(head, x)
        want = conv2d(x, Tensor(np.ascontiguousarray(head.w.data.T).reshape(2, 4, 1, 1)))
        assert np.array_equal(got.data, want.data)

    def test_matches_per_pixel_dot_oracle(self):
        rng = np.random.default_rng(1)
        x = rand_tensor(rng, (4, 5, 5), scale=0.5)
        head = SharedHead(w=rand_tensor(rng, (4, 1), scale=0.5))
        got = base_forward(head, x).data
        for i in range(5):
            for j in range(5):
                want = float(head.w.data[:, 0] @ x.data[:, i, j])
                assert abs(got[0, i, j] - want) < 1e-6

    def test_channel_mismatch(self):
        head = SharedHead(w=Tensor(np.ones((3, 1), dtype=np.float32)))
        with pytest.raises(Exception):
            base_forward(head, Tensor(np.zeros((4, 2, 2), dtype=np.float32)))


class TestPhiForward:
    def test_zero_last_layer_zero_weights(self):
        rng = np.random.default_rng(2)
        phi = PhiNet(
            w1=rand_tensor(rng, (8, 4, 1, 1)),
            w2=rand_tensor(rng, (8, 8, 1, 1)),
            w3=Tensor(np.zeros((6, 8, 1, 1), dtype=np.float32)),
        )
        out = phi_forward(phi, encode_positions(5, 5))
        assert np.all(out.data == 0)

    def test_single_pixel_matches_matrix_chain(self):
        rng = np.random.default_rng(3)
        phi = PhiNet(
            w1=rand_tensor(rng, (8, 4, 1, 1), 0.6),
            w2=rand_tensor(rng, (8, 8, 1, 1), 0.6),
            w3=rand_tensor(rng, (6, 8, 1, 1), 0.6),
        )
        pe = encode_positions(1, 1)
        got = phi_forward(phi, pe).data[:, 0, 0]
        want = phi_oracle(phi, pe.s.data[:, 0, 0].astype(np.float64))
        assert np.abs(got - want).max() < 1e-5

    def test_weights_vary_with_position(self):
        rng = np.random.default_rng(4)
        phi = PhiNet(
            w1=rand_tensor(rng, (8, 4, 1, 1)),
            w2=rand_tensor(rng, (8, 8, 1, 1)),
            w3=rand_tensor(rng, (6, 8, 1, 1)),
        )
        out = phi_forward(phi, encode_positions(7, 9)).data
        assert np.abs(out[:, 0, 0] - out[:, 6, 8]).max() > 1e-4


class TestScpFinal:
    def test_zero_phi_reduces_to_shared_head(self):
        rng = np.random.default_rng(5)
        for trial in range(50):
            c = int(rng.integers(2, 8))
            head = init_head(HeadVariant.SCP_FINAL, c=c, n=1, h=8, seed=trial, zero_init_phi_last=True)
            x = rand_tensor(rng, (c, 6, 6))
            s = encode_positions(6, 6)
            got = scp_forward_final(head, x, s).data
            want = base_forward(SharedHead(w=head.w_r), x).data
            assert np.abs(got - want).max() < 1e-6

    def test_zero_features_zero_logits(self):
        head = init_head(HeadVariant.SCP_FINAL, c=4, n=1, h=8, seed=0, zero_init_phi_last=False)
        y = scp_forward_final(head, Tensor(np.zeros((4, 6, 6), dtype=np.float32)), encode_positions(6, 6))
        assert np.all(y.data == 0)

    def test_matches_per_pixel_loop_oracle(self):
        rng = np.random.default_rng(6)
        c, n, hh, ww = 3, 2, 5, 4
        head = init_head(HeadVariant.SCP_FINAL, c=c, n=n, h=8, seed=11, zero_init_phi_last=False)
        x = rand_tensor(rng, (c, hh, ww), 0.5)
        pe = encode_positions(hh, ww)
        got = scp_forward_final(head, x, pe).data
        for i in range(hh):
            for j in range(ww):
                wij = phi_oracle(head.phi, pe.s.data[:, i, j].astype(np.float64)).reshape(n, c)
                want = (wij + head.w_r.data.T.astype(np.float64)) @ x.data[:, i, j].astype(np.float64)
                assert np.abs(got[:, i, j] - want).max() < 1e-5

    def test_shape_for_multiclass(self):
        head = init_head(HeadVariant.SCP_FINAL, c=4, n=3, h=8, seed=0)
        y = scp_forward_final(head, Tensor(np.zeros((4, 8, 8), dtype=np.float32)), encode_positions(8, 8))
        assert y.shape == (3, 8, 8)


class TestNormalizationForms:
    def test_identity_normalization_equals_base(self):
        rng = np.random.default_rng(7)
        c = 5
        x = rand_tensor(rng, (c, 6, 6))
        w = rand_tensor(rng, (c, 1))
        mu = Tensor(np.zeros((c, 6, 6), dtype=np.float32))
        sigma = Tensor(np.ones((c, 6, 6), dtype=np.float32))
        got = normalize_musigma(x, mu, sigma, w).data
        want = base_forward(SharedHead(w=w), x).data
        assert np.abs(got - want).max() < 1e-6

    def test_pq_and_reformulated_agree_over_seeds(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            c = int(rng.integers(2, 9))
            hh = int(rng.integers(2, 13))
            x = rand_tensor(rng, (c, hh, hh), 0.8)
            p = rand_tensor(rng, (c, hh, hh), 0.8)
            q = rand_tensor(rng, (c, hh, hh), 0.8)
            w = rand_tensor(rng, (c, 1), 0.8)
            a = normalize_pq(x, p, q, w).data
            b = normalize_pq_reformulated(x, p, q, w).data
            assert np.abs(a - b).max() < 1e-5

    def test_pq_substitution_matches_musigma(self):
        for seed in range(30):
            rng = np.random.default_rng(1000 + seed)
            c = int(rng.integers(2, 8))
            x = rand_tensor(rng, (c, 6, 6), 0.8)
            mu = rand_tensor(rng, (c, 6, 6), 0.8)
            sigma = Tensor((0.5 + rng.random((c, 6, 6))).astype(np.float32))
            w = rand_tensor(rng, (c, 1), 0.8)
            p = Tensor((1.0 / sigma.data).astype(np.float32))
            q = Tensor((-mu.data / sigma.data).astype(np.float32))
            a = normalize_musigma(x, mu, sigma, w).data
            b = normalize_pq(x, p, q, w).data
            assert np.abs(a - b).max() < 1e-5

    def test_musigma_head_clamps_and_counts(self):
        head = init_head(HeadVariant.SCP_MUSIGMA, c=4, n=1, h=8, seed=2, zero_init_phi_last=True)
        x = Tensor(np.random.default_rng(0).normal(size=(4, 6, 6)).astype(np.float32))
        before = head.sigma_clamp_count
        y = scp_forward_musigma(head, x, encode_positions(6, 6))
        # zero-init phi emits sigma == 0 everywhere: every pixel-channel clamps
        assert head.sigma_clamp_count - before == 4 * 36
        assert np.isfinite(y.data).all()


class TestCoordHeads:
    def test_baseb_zero_coord_weights_equals_base(self):
        # integer-valued entries keep every float sum exact, so the comparison
        # is immune to summation-order differences between the two widths
        rng = np.random.default_rng(8)
        c = 4
        w_full = np.zeros((c + 2, 1), dtype=np.float32)
        w_full[:c, 0] = rng.integers(-8, 9, size=c).astype(np.float32)
        variant = CoordHeadVariant(kind=CoordKind.BASE_B, head=SharedHead(w=Tensor(w_full)))
        x = Tensor(rng.integers(-8, 9, size=(c, 6, 6)).astype(np.float32))
        coords = coord_channels(6, 6)
        got = coord_head_forward(variant, x, coords).data
        want = base_forward(SharedHead(w=Tensor(w_full[:c])), x).data
        assert np.array_equal(got, want)

    def test_baseb_sensitive_to_coords(self):
        rng = np.random.default_rng(9)
        c = 4
        variant = init_head(HeadVariant.BASE_B, c=c, n=1, seed=1)
        x = np.zeros((c, 6, 6), dtype=np.float32)
        x[:, 1, 1] = x[:, 4, 3] = rng.normal(size=c).astype(np.float32)
        y = coord_head_forward(variant, Tensor(x), coord_channels(6, 6)).data
        assert abs(y[0, 1, 1] - y[0, 4, 3]) > 1e-5

    def test_basef_param_count_delta(self):
        base_cfg = BackboneConfig(in_channels=1, n_c=16, depth=2)
        widened = BackboneConfig(in_channels=3, n_c=16, depth=2)

        def count(cfg):
            return sum(int(np.prod(t.shape)) for t in build_backbone(cfg, 0).weights.values())

        first_width = base_cfg.level_widths[0]
        assert count(widened) - count(base_cfg) == 2 * first_width * 9

    def test_basef_forward_through_backbone(self):
        cfg = BackboneConfig(in_channels=3, n_c=16, depth=2)
        backbone = build_backbone(cfg, seed=0)
        variant = init_head(HeadVariant.BASE_F, c=cfg.feature_channels, n=1, seed=0)
        img = Tensor(np.random.default_rng(1).normal(size=(1, 8, 8)).astype(np.float32))
        y = coord_head_forward(variant, img, coord_channels(8, 8), backbone=backbone)
        assert y.shape == (1, 8, 8)


class TestInitHead:
    def test_zero_init_matches_base_at_step_zero(self):
        scp = init_head(HeadVariant.SCP_FINAL, c=6, n=1, h=16, seed=42, zero_init_phi_last=True)
        base = init_head(HeadVariant.BASE, c=6, n=1, seed=42)
        assert np.array_equal(scp.w_r.data, base.w.data)
        x = Tensor(np.random.default_rng(0).normal(size=(6, 8, 8)).astype(np.float32))
        got = scp_forward_final(scp, x, encode_positions(8, 8)).data
        want = base_forward(base, x).data
        assert np.abs(got - want).max() < 1e-6

    def test_same_seed_identical(self):
        a = init_head(HeadVariant.SCP_FINAL, c=4, n=1, h=8, seed=5, zero_init_phi_last=False)
        b = init_head(HeadVariant.SCP_FINAL, c=4, n=1, h=8, seed=5, zero_init_phi_last=False)
        for k in head_parameters(a):
            assert np.array_equal(head_parameters(a)[k].data, head_parameters(b)[k].data)

    def test_scp_parameter_count_closed_form(self):
        head = init_head(HeadVariant.SCP_FINAL, c=128, n=1, h=64, seed=0)
        total = sum(int(np.prod(t.shape)) for t in head_parameters(head).values())
        assert total == 4 * 64 + 64 * 64 + 64 * 128 + 128 == 12672


class TestShiftCovarianceContrast:
    def test_base_commutes_with_cyclic_shift(self):
        rng = np.random.default_rng(10)
        head = init_head(HeadVariant.BASE, c=4, n=1, seed=3)
        x = rand_tensor(rng, (4, 8, 8))
        shifted = Tensor(np.roll(x.data, shift=2, axis=(1, 2)))
        lhs = base_forward(head, shifted).data
        rhs = np.roll(base_forward(head, x).data, shift=2, axis=(1, 2))
        assert np.abs(lhs - rhs).max() < 1e-6

    def test_scp_breaks_shift_commutation(self):
        rng = np.random.default_rng(11)
        head = init_head(HeadVariant.SCP_FINAL, c=4, n=1, h=8, seed=12, zero_init_phi_last=False)
        x = rand_tensor(rng, (4, 8, 8))
        s = encode_positions(8, 8)
        shifted = Tensor(np.roll(x.data, shift=2, axis=(1, 2)))
        lhs = scp_forward_final(head, shifted, s).data
        rhs = np.roll(scp_forward_final(head, x, s).data, shift=2, axis=(1, 2))
        assert np.abs(lhs - rhs).max() > 1e-3


class TestHomogeneity:
    # bias-free heads are linear in their full input: f(a*x) == a*f(x)
    @pytest.mark.parametrize("alpha", [0.25, 3.0, -2.0])
    def test_linear_heads_scale(self, alpha):
        rng = np.random.default_rng(12)
        x = rand_tensor(rng, (4, 6, 6))
        base = init_head(HeadVariant.BASE, c=4, n=1, seed=0)
        np.testing.assert_allclose(
            base_forward(base, Tensor(alpha * x.data)).data, alpha * base_forward(base, x).data, atol=1e-5
        )
        scp = init_head(HeadVariant.SCP_FINAL, c=4, n=1, h=8, seed=1, zero_init_phi_last=False)
        s = encode_positions(6, 6)
        np.testing.assert_allclose(
            scp_forward_final(scp, Tensor(alpha * x.data), s).data,
            alpha * scp_forward_final(scp, x, s).data,
            atol=1e-5,
        )
        bb = init_head(HeadVariant.BASE_B, c=4, n=1, seed=2)
        coords = coord_channels(6, 6)
        np.testing.assert_allclose(
            coord_head_forward(bb, Tensor(alpha * x.data), Tensor(alpha * coords.data)).data,
            alpha * coord_head_forward(bb, x, coords).data,
            atol=1e-5,
        )


def strictly_active_scp_head(variant: HeadVariant, c: int, n: int, h: int, seed: int, s) -> ScpHead:
    """An SCP head whose ReLUs are all strictly active and whose scales clear the
    clamp floor, so central finite differences never straddle a kink. ReLU's own
    two-branch gradient is covered separately by the tensor-op checks."""
    from scpseg.tensor import conv2d

    rng = np.random.default_rng(seed)
    w1 = Tensor((np.abs(rng.normal(size=(h, 4, 1, 1))) * 0.4 + 0.1).astype(np.float32), requires_grad=True)
    w2 = Tensor(((np.abs(rng.normal(size=(h, h, 1, 1))) * 0.4 + 0.1) / h).astype(np.float32), requires_grad=True)
    out_channels = n * c if variant is HeadVariant.SCP_FINAL else 2 * c
    w3_arr = (0.5 * rng.normal(size=(out_channels, h, 1, 1))).astype(np.float32)
    if variant is HeadVariant.SCP_MUSIGMA:
        w3_arr[c:] = np.abs(w3_arr[c:]) + 0.2  # scale rows stay well above the floor
    w3 = Tensor(w3_arr, requires_grad=True)
    w_r = Tensor((0.5 * rng.normal(size=(c, n))).astype(np.float32), requires_grad=True)
    head = ScpHead(
        phi=PhiNet(w1=w1, w2=w2, w3=w3),
        w_r=w_r,
        form=ScpForm.FINAL if variant is HeadVariant.SCP_FINAL else ScpForm.MU_SIGMA,
    )
    pre1 = conv2d(s.s, w1).data
    pre2 = conv2d(Tensor(np.maximum(pre1, 0)), w2).data
    assert pre1.min() > 0.01 and pre2.min() > 0.01, "kink margin violated; pick another seed"
    if variant is HeadVariant.SCP_MUSIGMA:
        sigma_raw = phi_forward(head.phi, s).data[c:]
        assert (sigma_raw - SIGMA_FLOOR).min() > 0.02, "clamp margin violated; pick another seed"
    return head


class TestHeadGradients:
    """Every head's analytic gradients vs central finite differences (C=4, 6x6)."""

    C, H, W = 4, 6, 6

    def _x(self):
        return Tensor(np.random.default_rng(100).normal(size=(self.C, self.H, self.W)).astype(np.float32) * 0.5)

    def _sq_sum(self, y):
        from scpseg.tensor import mul, reduce_sum

        return reduce_sum(mul(y, y))

    def test_base_head(self):
        head = init_head(HeadVariant.BASE, c=self.C, n=1, seed=0)
        x = self._x()

        def build(params):
            return self._sq_sum(base_forward(SharedHead(w=params[0]), x))

        assert max_relative_error(build, [head.w]) < 1e-3

    def test_baseb_head(self):
        head = init_head(HeadVariant.BASE_B, c=self.C, n=1, seed=0)
        x = self._x()
        coords = coord_channels(self.H, self.W)

        def build(params):
            variant = CoordHeadVariant(kind=CoordKind.BASE_B, head=SharedHead(w=params[0]))
            return self._sq_sum(coord_head_forward(variant, x, Tensor(coords.data.astype(params[0].dtype))))

        assert max_relative_error(build, [head.head.w]) < 1e-3

    @pytest.mark.parametrize("variant", [HeadVariant.SCP_FINAL, HeadVariant.SCP_MUSIGMA])
    def test_scp_heads(self, variant):
        s = encode_positions(self.H, self.W)
        head = strictly_active_scp_head(variant, c=self.C, n=1, h=8, seed=7, s=s)
        x = self._x()

        def build(params):
            h2 = ScpHead(phi=PhiNet(w1=params[0], w2=params[1], w3=params[2]), w_r=params[3], form=head.form)
            st = Tensor(s.s.data.astype(params[0].dtype))
            if variant is HeadVariant.SCP_FINAL:
                y = scp_forward_final(h2, Tensor(x.data.astype(params[0].dtype)), st)
            else:
                y = scp_forward_musigma(h2, Tensor(x.data.astype(params[0].dtype)), st)
            return self._sq_sum(y)

        params = [head.phi.w1, head.phi.w2, head.phi.w3, head.w_r]
        assert max_relative_error(build, params) < 1e-3

    @pytest.mark.parametrize("reformulated", [False, True])
    def test_scp_pq_paths(self, reformulated):
        s = encode_positions(self.H, self.W)
        head = strictly_active_scp_head(HeadVariant.SCP_MUSIGMA, c=self.C, n=1, h=8, seed=3, s=s)
        x = self._x()

        def build(params):
            h2 = ScpHead(phi=PhiNet(w1=params[0], w2=params[1], w3=params[2]), w_r=params[3], form=head.form)
            st = Tensor(s.s.data.astype(params[0].dtype))
            y = scp_forward_pq(h2, Tensor(x.data.astype(params[0].dtype)), st, reformulated=reformulated)
            return self._sq_sum(y)

        params = [head.phi.w1, head.phi.w2, head.phi.w3, head.w_r]
        assert max_relative_error(build, params) < 1e-3
