import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import attention_ref
from osa_fusion.errors import ParameterError, ShapeError
from osa_fusion.fusion import (
    FusionParams,
    TokenSequence,
    attention_weights,
    autoencoder_fuse,
    cross_attend,
    init_autoencoder,
    init_fusion,
    write_attention_csv,
)
from osa_fusion.tensor import ParamStore, Tensor, grad_check


def params(d=4, d_k=None, seed=0):
    store = ParamStore()
    init_fusion(store, d, d_k, np.random.default_rng(seed))
    return store, FusionParams.from_store(store)


def seqs(n_img=3, n_txt=5, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n_img, d)), rng.normal(size=(n_txt, d))


class TestCrossAttend:
    def test_single_text_token(self):
        _, p = params()
        img, txt = seqs(n_txt=1)
        fused, w = cross_attend(img, txt, p, norm=False, return_weights=True)
        np.testing.assert_allclose(w, 1.0)
        np.testing.assert_allclose(fused.tokens.data, txt @ p.w_v.data + img, atol=1e-12)

    def test_zero_query_is_uniform(self):
        _, p = params()
        p.w_q.data[:] = 0.0
        img, txt = seqs(n_txt=5)
        np.testing.assert_allclose(attention_weights(img, txt, p), 0.2)

    def test_hand_oracle(self):
        img = [[0.5, -1.0], [2.0, 0.3]]
        txt = [[1.0, 0.0], [-0.4, 0.8]]
        wq = [[1.0, 0.5], [-0.5, 1.0]]
        wk = [[0.2, 0.0], [0.3, 1.0]]
        wv = [[1.0, 2.0], [0.0, -1.0]]
        w_ref, out_ref = attention_ref(img, txt, wq, wk, wv)
        p = FusionParams(wq, wk, wv)
        fused, w = cross_attend(np.array(img), np.array(txt), p, residual=False, norm=False, return_weights=True)
        np.testing.assert_allclose(w, w_ref, atol=1e-12)
        np.testing.assert_allclose(fused.tokens.data, out_ref, atol=1e-9)

    def test_output_rows_follow_image(self):
        _, p = params()
        img, txt = seqs(n_img=6, n_txt=2)
        out = cross_attend(img, txt, p)
        assert out.tokens.shape == (6, 4) and out.modality == "fused"

    def test_width_mismatch(self):
        _, p = params()
        with pytest.raises(ShapeError):
            cross_attend(np.ones((2, 4)), np.ones((3, 5)), p)

    def test_no_residual_zero_values(self):
        _, p = params()
        p.w_v.data[:] = 0.0
        img, txt = seqs()
        assert np.all(cross_attend(img, txt, p, residual=False).tokens.data == 0.0)

    def test_identical_keys_uniform(self):
        _, p = params()
        img = np.random.default_rng(1).normal(size=(3, 4))
        txt = np.tile(np.random.default_rng(2).normal(size=4), (4, 1))
        np.testing.assert_allclose(attention_weights(img, txt, p), 0.25, atol=1e-12)

    def test_padding_mask_zeroes_keys(self):
        _, p = params()
        img, txt = seqs(n_txt=4)
        mask = np.array([1.0, 1.0, 1.0, 0.0])
        w = attention_weights(img, TokenSequence(Tensor(txt), "text", mask), p)
        assert np.all(w[:, 3] == 0.0)
        np.testing.assert_allclose(w[:, :3], attention_weights(img, txt[:3], p), atol=1e-12)

    def test_dk_projection(self):
        _, p = params(d=4, d_k=2)
        img, txt = seqs()
        assert cross_attend(img, txt, p).tokens.shape == (3, 4)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_key_value_permutation_equivariance(self, seed):
        _, p = params(seed=seed)
        img, txt = seqs(seed=seed)
        perm = np.random.default_rng(seed).permutation(len(txt))
        f1, w1 = cross_attend(img, txt, p, return_weights=True)
        f2, w2 = cross_attend(img, txt[perm], p, return_weights=True)
        np.testing.assert_allclose(w2, w1[:, perm], atol=1e-12)
        np.testing.assert_allclose(f2.tokens.data, f1.tokens.data, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 10.0))
    def test_argmax_stable_under_qk_rescaling(self, seed, c):
        _, p = params(seed=seed)
        img, txt = seqs(seed=seed)
        base = attention_weights(img, txt, p)
        scaled = FusionParams(p.w_q.data * np.sqrt(c), p.w_k.data * np.sqrt(c), p.w_v.data)
        np.testing.assert_array_equal(np.argmax(attention_weights(img, txt, scaled), axis=1), np.argmax(base, axis=1))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        store, _ = params(d=3, seed=seed)
        rng = np.random.default_rng(seed + 100)
        store.add("img", rng.normal(size=(2, 3, 3)))
        txt = rng.normal(size=(2, 4, 3))
        mix = rng.normal(size=(2, 3, 3))

        def loss(s):
            out = cross_attend(s["img"], txt, FusionParams.from_store(s))
            return (out.tokens * mix).sum()

        assert grad_check(loss, store) < 1e-4

    def test_attention_csv(self, tmp_path):
        write_attention_csv(tmp_path / "a.csv", np.full((2, 3), 1 / 3))
        lines = (tmp_path / "a.csv").read_text().splitlines()
        assert lines[0] == "image_token,text_0,text_1,text_2" and len(lines) == 3


class TestAutoencoder:
    def store(self, d=4, b=3, seed=0):
        s = ParamStore()
        init_autoencoder(s, d, b, np.random.default_rng(seed))
        return s

    def test_zero_input_zero_code(self):
        out = autoencoder_fuse(np.zeros((3, 4)), np.zeros((2, 4)), self.store(), 3)
        assert np.all(out.code.data == 0.0)
        assert out.fused.tokens.shape == (1, 8)

    def test_boundary_bottleneck(self):
        s = self.store(d=4, b=7)
        autoencoder_fuse(np.ones((3, 4)), np.ones((2, 4)), s, 7)
        with pytest.raises(ParameterError):
            self.store(d=4, b=8)
        with pytest.raises(ParameterError):
            autoencoder_fuse(np.ones((3, 4)), np.ones((2, 4)), s, 8)

    def test_reconstruction_loss_decreases(self):
        finals = []
        for seed in range(5):
            s = self.store(d=4, b=6, seed=seed)
            rng = np.random.default_rng(seed + 50)
            img, txt = rng.normal(size=(8, 3, 4)), rng.normal(size=(8, 2, 4))
            losses = []
            for _ in range(100):
                s.zero_grad()
                out = autoencoder_fuse(img, txt, s, 6)
                out.reconstruction_loss.backward()
                s.adam_step(1e-2)
                losses.append(float(out.reconstruction_loss.data))
            finals.append(losses[-1] / losses[0])
        assert np.mean(finals) < 0.5
