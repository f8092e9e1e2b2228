from fractions import Fraction

import numpy as np
import pytest

from asyncdanse import dsp
from asyncdanse import gevd as G
from asyncdanse import metrics as M
from asyncdanse import network as NW
from asyncdanse import scene as S

FS = 16000
CFG = dsp.WolaConfig.sqrt_hann(1024)


def three_node_scenario(sros=(0.0, 100.0, -150.0), duration_s=4.0):
    nodes = [S.NodeSpec([[1.0, 1.0, 1.0]], sros[0]),
             S.NodeSpec([[2.0, 1.5, 1.0], [2.2, 1.5, 1.0]], sros[1]),
             S.NodeSpec([[1.0, 2.6, 1.2], [1.2, 2.6, 1.2]], sros[2])]
    sources = [S.SourceSpec([1.5, 2.0, 1.2], "speech"), S.SourceSpec([2.5, 2.5, 1.5])]
    return S.Scenario(room_dims=(3.0, 3.5, 2.5), absorption=0.9, nodes=nodes, sources=sources,
                      duration_s=duration_s, rir_length=1024, seed=5)


@pytest.fixture(scope="module")
def scene():
    sc = three_node_scenario()
    return S.render_scene(sc, S.synthetic_speech(sc.duration_s, FS, 1))


@pytest.fixture(scope="module")
def fsd_run(scene):
    return NW.run_network(scene, "async-sro-fsd", CFG, NW.NetworkOptions(record_compensated=True))


class TestClocks:
    def test_pairwise_sro_relations(self):
        eps = NW.pairwise_sro([0.0, 200.0, -200.0])
        assert np.all(np.diag(eps) == 0)
        np.testing.assert_allclose((1 + eps) * (1 + eps.T), 1.0, rtol=1e-15)
        assert eps[0, 1] == pytest.approx(200e-6)
        assert eps[1, 2] == pytest.approx(0.9998 / 1.0002 - 1)

    def test_clock_rate_exact(self):
        assert NW.clock_rate(16000, 100) == Fraction(16001.6).limit_denominator(10)
        assert NW.clock_rate(16000, -0.1) == Fraction(159999984, 10000)
        assert NW.clock_rate(16000, 0) == 16000


class TestSyncNetwork:
    def test_unknown_mode(self, scene):
        with pytest.raises(ValueError):
            NW.run_network(scene, "centralized", CFG)

    def test_frame_broadcast_bookkeeping(self, scene):
        run = NW.run_network(scene, "sync-danse", CFG)
        assert run.broadcast == "frame" and run.delay == CFG.Ns
        # every update sees exactly one hop of new samples from each peer
        for k in range(3):
            for q in range(3):
                if q != k:
                    assert np.all(run.rx_delta[k, q, 1:run.n_frames[k] + 1] == CFG.Ns)
        assert len(set(run.n_frames)) == 1
        assert [o.samples.size for o in run.outputs] == list(run.local_count)
        assert np.all(np.isnan(run.eps_hat))

    def test_ignores_clock_offsets(self, scene):
        a = NW.run_network(scene, "sync-danse", CFG)
        b = NW.run_network(scene.synchronized(), "sync-danse", CFG)
        for x, y in zip(a.outputs, b.outputs):
            np.testing.assert_array_equal(x.samples, y.samples)

    def test_single_node_matches_centralized(self):
        sc = three_node_scenario()
        sc1 = S.Scenario(room_dims=sc.room_dims, absorption=sc.absorption,
                         nodes=[S.NodeSpec(sc.nodes[1].mic_positions)], sources=sc.sources,
                         duration_s=3.0, rir_length=1024, seed=5)
        r = S.render_scene(sc1, S.synthetic_speech(3.0, FS, 1))
        run = NW.run_network(r, "sync-danse", CFG)
        cen = G.centralized_enhance(r, CFG)
        stop = r.scenario.n_samples - 2 * CFG.N
        assert M.oracle_distance(run.outputs[0], cen.estimates[0], 15 * CFG.Ns, stop) < -40


class TestSampleNetwork:
    def test_rx_counts_and_fsd_bounds(self, fsd_run):
        run = fsd_run
        assert run.broadcast == "sample" and run.delay == CFG.N - 1
        for k in range(3):
            for q in range(3):
                if q == k:
                    continue
                d = run.rx_delta[k, q, 2:run.n_frames[k] + 1]
                assert set(np.unique(d)) <= {CFG.Ns - 1, CFG.Ns, CFG.Ns + 1}
                assert np.all(np.abs(run.fsd_event[k, q]) <= 1)

    def test_fsd_sign_follows_sro(self, fsd_run):
        # node 2 runs 100 PPM fast: node 1 sees surpluses, node 2 deficits
        assert {e for _, e in fsd_run.fsd_times(0, 1)} == {1}
        assert {e for _, e in fsd_run.fsd_times(1, 0)} == {-1}

    def test_fsd_spacing(self, fsd_run):
        t = np.array([s for s, _ in fsd_run.fsd_times(0, 1)])
        expected = 1 / (FS * 100e-6)
        assert t[0] == pytest.approx(expected, abs=CFG.Ns / FS)
        np.testing.assert_allclose(np.diff(t), expected, atol=CFG.Ns / FS)

    def test_every_local_sample_is_transmitted(self, fsd_run):
        for k in range(3):
            assert fsd_run.tx_count[k] == fsd_run.local_count[k]

    def test_sro_estimates_near_truth(self, scene, fsd_run):
        true = fsd_run.true_sro(scene.scenario)
        last = fsd_run.eps_hat[0, 1, fsd_run.n_frames[0] - 20:fsd_run.n_frames[0] + 1]
        assert np.all(np.abs(last - true[0, 1]) < 20e-6)

    def test_compensation_preserves_magnitude(self, scene, fsd_run):
        st = NW.SR.SroSyncState(peer=1, N=CFG.N, Ns=CFG.Ns)
        st.tau_hat, st.fsd_count = 3.7, -2
        z = np.random.default_rng(0).standard_normal(CFG.n_bins) + 1j
        np.testing.assert_allclose(np.abs(st.compensate(z)), np.abs(z), rtol=1e-13)
        assert (0, 1) in fsd_run.compensated and (1, 0) in fsd_run.compensated

    def test_deterministic(self, scene, fsd_run):
        again = NW.run_network(scene, "async-sro-fsd", CFG)
        for x, y in zip(fsd_run.outputs, again.outputs):
            np.testing.assert_array_equal(x.samples, y.samples)
        np.testing.assert_array_equal(fsd_run.eps_hat, again.eps_hat)
