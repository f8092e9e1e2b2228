import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asyncdanse import danse as DN
from asyncdanse import dsp
from asyncdanse import gevd as G


def hop1_wola(x, w, cfg, positions):
    """Hop-1 WOLA filterbank output at `positions` (independent of the tap derivation).

    Every frame starting at s covers x[s:s+N]; its filtered synthesis is
    overlap-added with weight 1/Ns.
    """
    N, Ns = cfg.N, cfg.Ns
    xp = np.concatenate([np.zeros(N), x, np.zeros(N)])
    out = []
    for n in positions:
        starts = np.arange(n - N + 1, n + 1)
        frames = np.stack([xp[s + N:s + 2 * N] for s in starts]) * cfg.analysis_window
        spec = np.fft.rfft(frames, axis=1) * np.conj(w)[None, :]
        seg = np.fft.irfft(spec, n=N, axis=1) * cfg.synthesis_window
        out.append(seg[np.arange(N), n - starts].sum() / Ns)
    return np.array(out)


def random_filter(rng, n_bins, M=None):
    shape = (n_bins,) if M is None else (n_bins, M)
    w = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    w[0] = w[0].real
    w[-1] = w[-1].real
    return w


class TestFuseFrame:
    def test_matches_per_bin_inner_product(self):
        rng = np.random.default_rng(0)
        w = random_filter(rng, 5, 3)
        y = random_filter(rng, 5, 3)
        np.testing.assert_allclose(DN.fuse_frame(w, y), np.sum(np.conj(w) * y, axis=1))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            DN.fuse_frame(np.ones((5, 2)), np.ones((5, 3)))


class TestDistortionFilter:
    @pytest.mark.parametrize("N", [16, 32, 64])
    def test_matches_hop1_oracle(self, N):
        cfg = dsp.WolaConfig.sqrt_hann(N)
        rng = np.random.default_rng(N)
        w = random_filter(rng, cfg.n_bins)
        x = rng.standard_normal(6 * N)
        taps = DN.compute_distortion_filter(w[:, None], cfg)
        fused = DN.fused_block(x[None, :], taps, 0, x.size)
        pos = np.arange(2 * N, 5 * N)
        np.testing.assert_allclose(fused[pos + N - 1], hop1_wola(x, w, cfg, pos), atol=1e-12)

    def test_shape_and_delay(self):
        cfg = dsp.WolaConfig.sqrt_hann(32)
        taps = DN.compute_distortion_filter(np.ones((cfg.n_bins, 3)), cfg)
        assert taps.shape == (3, 63)
        assert DN.DistortionFilter(taps).delay == 31

    def test_identity_filter_is_pure_delay(self):
        # w = 1 everywhere reconstructs the input N - 1 samples late
        cfg = dsp.WolaConfig.sqrt_hann(32)
        taps = DN.compute_distortion_filter(np.ones((cfg.n_bins, 1)), cfg)[0]
        expected = np.zeros(63)
        expected[31] = 1.0
        np.testing.assert_allclose(taps, expected, atol=1e-14)

    def test_zero_filter(self):
        cfg = dsp.WolaConfig.sqrt_hann(16)
        assert not DN.compute_distortion_filter(np.zeros((cfg.n_bins, 2)), cfg).any()

    def test_linear_phase_filter_shifts(self):
        # a d-sample delay filter moves the identity spike by d
        cfg = dsp.WolaConfig.sqrt_hann(32)
        d = 3
        w = np.conj(np.exp(-2j * np.pi * np.arange(cfg.n_bins) * d / cfg.N))
        taps = DN.compute_distortion_filter(w[:, None], cfg)[0]
        assert np.argmax(np.abs(taps)) == 31 + d

    def test_wrong_bins(self):
        with pytest.raises(ValueError):
            DN.compute_distortion_filter(np.ones((4, 1)), dsp.WolaConfig.sqrt_hann(16))

    def test_refresh_schedule(self):
        cfg = dsp.WolaConfig.sqrt_hann(16)
        df = DN.DistortionFilter.from_filter(np.ones((cfg.n_bins, 1)), cfg)
        assert [i for i in range(100) if df.due(i)] == [0, 30, 60, 90]
        df.refresh(np.zeros((cfg.n_bins, 1)), cfg, 30)
        assert df.last_update == 30 and not df.taps.any()


class TestFusedSamples:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 3))
    def test_block_equals_per_sample(self, seed, M):
        rng = np.random.default_rng(seed)
        taps = rng.standard_normal((M, 15))
        mics = rng.standard_normal((M, 60))
        block = DN.fused_block(mics, taps, 5, 50)
        single = [DN.fused_sample(mics[:, :n + 1], taps) for n in range(5, 50)]
        np.testing.assert_allclose(block, single, atol=1e-12)

    def test_zero_taps_on_one_mic(self):
        rng = np.random.default_rng(1)
        taps = np.vstack([rng.standard_normal(7), np.zeros(7)])
        mics = rng.standard_normal((2, 40))
        ref = np.convolve(mics[0], taps[0])[:40]
        np.testing.assert_allclose(DN.fused_block(mics, taps, 0, 40), ref, atol=1e-12)

    def test_short_history_zero_padded(self):
        assert DN.fused_sample([[2.0]], [[0.5, 1.0, 1.0]]) == 1.0


class TestDanseNode:
    def test_initial_state(self):
        cfg = dsp.WolaConfig.sqrt_hann(8)
        nd = DN.DanseNode(0, 2, 3, cfg, ref_mic=1)
        assert nd.dim == 4
        np.testing.assert_array_equal(nd.w_tilde, G.selector(cfg.n_bins, 4, 1))
        assert nd.w_kk.shape == (cfg.n_bins, 2) and nd.peer_gains.shape == (cfg.n_bins, 2)

    def test_wrong_frame_shape(self):
        nd = DN.DanseNode(0, 2, 3, dsp.WolaConfig.sqrt_hann(8))
        with pytest.raises(ValueError):
            nd.update(np.zeros((5, 3)), True)

    def test_single_node_equals_local_mwf(self):
        cfg = dsp.WolaConfig.sqrt_hann(8)
        rng = np.random.default_rng(2)
        nd = DN.DanseNode(0, 3, 1, cfg)
        cov = G.CovariancePair.zeros(cfg.n_bins, 3)
        w = G.selector(cfg.n_bins, 3, 0)
        a = random_filter(rng, cfg.n_bins, 3)
        for i in range(200):
            vad = (i // 20) % 2 == 0
            y = a * rng.standard_normal((cfg.n_bins, 1)) * vad + 0.3 * random_filter(rng, cfg.n_bins, 3)
            out = nd.update(y, vad)
            cov.update(y, vad)
            w, _ = G.update_filter(cov, w, 0)
            np.testing.assert_allclose(out, G.apply_filter(w, y), atol=1e-12)
        assert nd.n_updates > 0

    def test_update_is_deterministic(self):
        cfg = dsp.WolaConfig.sqrt_hann(8)
        frames = np.random.default_rng(3).standard_normal((60, cfg.n_bins, 4)) + 0j
        outs = []
        for _ in range(2):
            nd = DN.DanseNode(1, 2, 3, cfg)
            outs.append([nd.update(f, i % 7 < 3) for i, f in enumerate(frames)])
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_rank_one_network_converges_to_centralized(self):
        # exact covariances, sequential updates: the network-wide filter
        # of every node approaches the centralised GEVD-MWF
        rng = np.random.default_rng(4)
        Ms = [1, 2, 2]
        M, K = sum(Ms), len(Ms)
        a = rng.standard_normal(M) + 1j * rng.standard_normal(M)
        B = rng.standard_normal((M, M)) + 1j * rng.standard_normal((M, M))
        Rnn = 0.3 * B @ B.conj().T + np.eye(M)
        Ryy = np.outer(a, a.conj()) + Rnn
        split = np.split(np.arange(M), np.cumsum(Ms)[:-1])
        refs = [s[0] for s in split]
        g = G.gevd(Ryy[None], Rnn[None])
        W_c = [G.gevd_mwf_filter(g, r)[0] for r in refs]
        W = [np.eye(M)[:, r].astype(complex) for r in refs]
        for it in range(300):
            k = it % K
            C = np.zeros((M, Ms[k] + K - 1), complex)
            C[split[k], :Ms[k]] = np.eye(Ms[k])
            col = Ms[k]
            for q in range(K):
                if q != k:
                    C[split[q], col] = W[q][split[q]]
                    col += 1
            gk = G.gevd((C.conj().T @ Ryy @ C)[None], (C.conj().T @ Rnn @ C)[None])
            W[k] = C @ G.gevd_mwf_filter(gk, 0)[0]
        for k in range(K):
            assert np.linalg.norm(W[k] - W_c[k]) / np.linalg.norm(W_c[k]) < 1e-6

    def test_danse_filter_update_returns_filter(self):
        cfg = dsp.WolaConfig.sqrt_hann(8)
        nd = DN.DanseNode(0, 1, 2, cfg)
        w = DN.danse_filter_update(nd, np.ones((cfg.n_bins, 2)), False)
        assert w is nd.w_tilde
