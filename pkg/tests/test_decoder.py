import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terdnet.decoder import (
    GruState,
    GruWeights,
    RatiosForReflection,
    RecurrentDecoder,
    gru_cell,
    run_decoder,
)
from terdnet import tensor as T
from terdnet.encoder import FeaturePyramid
from terdnet.tensor import ShapeError, Tensor, conv2d


def sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def weights(variant, cin=3, hidden=4, gate=2, seed=0, scale=1.0):
    w = GruWeights(cin, hidden, gate, variant, rng=np.random.default_rng(seed), dtype=np.float64)
    for p in w.parameters():
        p.data *= scale
    return w


def inputs(seed=1, cin=3, hidden=4, gate=2, size=3):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, cin, size, size)))
    h = Tensor(np.tanh(rng.standard_normal((1, hidden, size, size))))
    f = Tensor(sig(rng.standard_normal((1, gate, size, size))))
    return x, h, f


def zero(w):
    for p in w.parameters():
        p.data[...] = 0.0


class TestClosedForms:
    def test_zero_weights_halve_state(self):
        w = weights("three-gate")
        zero(w)
        x, h, f = inputs()
        out = gru_cell(x, GruState(h, 0, f), w)
        # r = z = p = 0.5 and the candidate is tanh(0) = 0
        np.testing.assert_array_equal(out.h.data, 0.5 * h.data)

    def test_closed_update_freezes_state(self):
        w = weights("three-gate")
        w.b_z.data[...] = -60.0  # z ≈ 0
        x, h, f = inputs()
        out = gru_cell(x, GruState(h, 0, f), w)
        np.testing.assert_allclose(out.h.data, h.data, atol=1e-12)

    def test_open_update_takes_candidate(self):
        w = weights("three-gate")
        w.b_z.data[...] = 60.0  # z ≈ 1
        w.U.data[...] = 0.0
        w.F.data[...] = 0.0
        x, h, f = inputs()
        out = gru_cell(x, GruState(h, 0, f), w)
        expect = np.tanh(conv2d(x, w.W, w.b, padding=1).data)
        np.testing.assert_allclose(out.h.data, expect, atol=1e-12)

    def test_scalar_hand_oracle(self):
        # 1x1 spatial, one channel everywhere, kernel centres only contribute
        w = GruWeights(1, 1, 1, "three-gate", rng=np.random.default_rng(0), dtype=np.float64)
        rng = np.random.default_rng(5)
        for p in w.parameters():
            p.data[...] = rng.uniform(-1, 1, p.shape)
        xv, hv, fv = 0.3, -0.6, 0.7
        c = lambda k: k[..., 1, 1] if k.shape[-1] == 3 else k[..., 0, 0]
        r, z, p = (
            sig(c(w.kernel_of("W", g).data)[0, 0] * xv + w.kernel_of("b", g).data[0]
                + c(w.kernel_of("U", g).data)[0, 0] * hv + c(w.kernel_of("F", g).data)[0, 0] * fv)
            for g in "rzp"
        )
        cand = np.tanh(c(w.W.data)[0, 0] * xv + w.b.data[0] + c(w.U.data)[0, 0] * r * hv + c(w.F.data)[0, 0] * p * fv)
        expect = (1 - z) * hv + z * cand
        out = gru_cell(Tensor(np.full((1, 1, 1, 1), xv)), GruState(Tensor(np.full((1, 1, 1, 1), hv)), 0,
                                                                     Tensor(np.full((1, 1, 1, 1), fv))), w)
        assert out.h.data.item() == pytest.approx(expect, rel=1e-13)


class TestBasicReduction:
    def test_parameter_names(self):
        assert [n for n, _ in weights("basic").named_parameters()] == [
            "W_r", "b_r", "U_r", "W_z", "b_z", "U_z", "W", "b", "U"]
        assert weights("three-gate", hidden=4, gate=2).W_p.shape[0] == 2

    @pytest.mark.parametrize("seed", range(5))
    def test_bit_identical_to_standard_conv_gru(self, seed):
        w = weights("basic", seed=seed)
        x, h, _ = inputs(seed + 10)
        Wr, Wz, br, bz = w.W_r.data, w.W_z.data, w.b_r.data, w.b_z.data
        Ur, Uz = w.U_r.data, w.U_z.data
        hd = h.data
        # textbook conv-GRU with separate kernels per gate, on the same primitives
        cv = lambda a, k, b=None: conv2d(Tensor(a), Tensor(k), None if b is None else Tensor(b), padding=1).data
        sg = lambda a: T.sigmoid(Tensor(a)).data
        r = sg(cv(x.data, Wr, br) + cv(hd, Ur))
        z = sg(cv(x.data, Wz, bz) + cv(hd, Uz))
        cand = T.tanh(Tensor(cv(x.data, w.W.data, w.b.data) + cv(r * hd, w.U.data))).data
        expect = (1 - z) * hd + z * cand
        got = gru_cell(x, GruState(h, 0), w).h.data
        np.testing.assert_array_equal(got, expect)

    def test_three_gate_with_silent_gate_matches_basic(self):
        tg = weights("three-gate", seed=2)
        basic = weights("basic", seed=3)
        for name, p in basic.named_parameters():
            p.data[...] = getattr(tg, name).data
        for name in ("F_r", "F_z", "F_p", "F"):
            getattr(tg, name).data[...] = 0.0
        x, h, f = inputs(4)
        a = gru_cell(x, GruState(h, 0, f), tg).h.data
        b = gru_cell(x, GruState(h, 0), basic).h.data
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


class TestRollouts:
    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 20.0), variant=st.sampled_from(["three-gate", "basic"]))
    def test_bounded_over_ten_steps(self, seed, scale, variant):
        w = weights(variant, seed=seed % 1000, scale=scale)
        x, h, f = inputs(seed)
        x = Tensor(x.data * scale)
        states = run_decoder(x, GruState(h, 0, f), w, 10)
        assert len(states) == 10
        for s in states:
            assert np.max(np.abs(s.h.data)) <= 1.0

    def test_prefix_property(self):
        w = weights("three-gate", seed=7)
        x, h, f = inputs(8)
        long = run_decoder(x, GruState(h, 0, f), w, 7)
        short = run_decoder(x, GruState(h, 0, f), w, 3)
        for a, b in zip(short, long):
            np.testing.assert_array_equal(a.h.data, b.h.data)
        assert [s.step for s in long] == list(range(1, 8))

    def test_matches_stepwise_cell(self):
        w = weights("three-gate", seed=9)
        x, h, f = inputs(10)
        state = GruState(h, 0, f)
        for expect in run_decoder(x, state, w, 4):
            state = gru_cell(x, state, w)
            np.testing.assert_allclose(state.h.data, expect.h.data, rtol=1e-13, atol=1e-15)


class TestErrors:
    def test_none_variant_single_step_only(self):
        w = weights("none")
        x, _, _ = inputs()
        out = gru_cell(x, None, w)
        np.testing.assert_array_equal(out.h.data, np.tanh(conv2d(x, w.W, w.b, padding=1).data))
        with pytest.raises(ValueError, match="no state"):
            gru_cell(x, out, w)
        with pytest.raises(ValueError):
            run_decoder(x, None, w, 3)

    def test_zero_iterations(self):
        w = weights("basic")
        x, h, _ = inputs()
        with pytest.raises(ValueError, match="at least one"):
            run_decoder(x, GruState(h, 0), w, 0)

    def test_spatial_mismatch(self):
        w = weights("three-gate")
        x, h, f = inputs()
        with pytest.raises(ShapeError):
            gru_cell(x, GruState(Tensor(np.zeros((1, 4, 2, 2))), 0, f), w)

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="GRU variant"):
            GruWeights(3, 4, 2, "lstm")


class TestDecoderModule:
    def test_gating_map_shape_and_range(self):
        rng = np.random.default_rng(0)
        mk = lambda: FeaturePyramid([Tensor(rng.standard_normal((1, 5, 4, 4))) for _ in range(4)])
        rfr = RatiosForReflection(5, 7, rng, dtype=np.float64)
        f = rfr(mk(), mk()).data
        assert f.shape == (1, 7, 4, 4)
        assert np.all((f > 0) & (f < 1))

    def test_identical_pyramids_give_bias_only_gate(self):
        rng = np.random.default_rng(0)
        p = FeaturePyramid([Tensor(rng.standard_normal((1, 5, 4, 4))) for _ in range(4)])
        rfr = RatiosForReflection(5, 3, rng, dtype=np.float64)
        f = rfr(p, p).data
        np.testing.assert_array_equal(f, np.broadcast_to(sig(rfr.proj.bias.data)[None, :, None, None], f.shape))

    @pytest.mark.parametrize("h0", ["feature", "zero"])
    def test_forward_shapes(self, h0):
        rng = np.random.default_rng(0)
        mk = lambda: FeaturePyramid([Tensor(rng.standard_normal((2, 5, 4, 4))) for _ in range(4)])
        dec = RecurrentDecoder(6, 5, hidden=8, gate_channels=3, h0=h0, rng=rng, dtype=np.float64)
        states = dec(Tensor(rng.standard_normal((2, 6, 4, 4))), mk(), mk(), 3)
        assert [s.h.shape for s in states] == [(2, 8, 4, 4)] * 3
