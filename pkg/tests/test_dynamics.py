import numpy as np
import pytest

from slicenav.dynamics import (DynamicsCore, LatentDynamics, dynamics_train_step,
                               emp_loss, extract_features, pack, sc_loss,
                               shortcut_corrupt, unpack_duplicate)
from slicenav.errors import ShapeError
from slicenav.nn import AdamW, SeedStream
from slicenav.nn import engine as en
from slicenav.slicer import RenderConfig
from slicenav.tokenizer import SliceTokenizer
from slicenav.trajectory import sample_trajectory
from slicenav.volumes import gen_phantom

from .gradcheck import check_gradients
from .oracles import emp_loss_bruteforce


def small_core(seed=0, d_z=8, s=2, width=16, t_max=4, mlp_ratio=4, dtype=np.float32):
    return DynamicsCore(d_z=d_z, tokens_per_frame=s, width=width, depth=1,
                        heads=2, t_max=t_max, seed=seed, mlp_ratio=mlp_ratio,
                        dtype=dtype)


class TestPack:
    def test_constant_field(self):
        tokens = np.full((16, 4), 3.5, np.float32)
        packed = pack(tokens, (4, 4))
        assert packed.shape == (4, 16)
        assert np.all(packed == 3.5)

    def test_token_count_reduction(self):
        tokens = np.zeros((64, 8), np.float32)
        assert pack(tokens, (8, 8)).shape == (16, 32)

    def test_brute_force_gather(self):
        rng = np.random.default_rng(0)
        gh = gw = 4
        d = 3
        tokens = rng.normal(size=(gh * gw, d)).astype(np.float32)
        packed = pack(tokens, (gh, gw))
        for wi in range(gh // 2):
            for wj in range(gw // 2):
                parts = []
                for di in range(2):
                    for dj in range(2):
                        parts.append(tokens[(2 * wi + di) * gw + (2 * wj + dj)])
                expect = np.concatenate(parts)
                assert np.array_equal(packed[wi * (gw // 2) + wj], expect)

    def test_indivisible_grid_rejected(self):
        with pytest.raises(ShapeError):
            pack(np.zeros((9, 4), np.float32), (3, 3))

    def test_unpack_duplicates(self):
        packed = np.arange(8, dtype=np.float32).reshape(4, 2)
        out = unpack_duplicate(packed, (4, 4))
        assert out.shape == (16, 2)
        assert np.array_equal(out[0], out[1])  # same 2x2 window
        assert np.array_equal(out[0], out[4])


class TestShortcutCorrupt:
    def test_sigma_one_bit_exact(self):
        z = SeedStream(0).normal((2, 3, 4, 8))
        s = shortcut_corrupt(z, 0, sigma=np.ones((2, 3), np.float32))
        assert np.array_equal(s.z_tilde, z)

    def test_sigma_zero_is_noise(self):
        z = SeedStream(1).normal((2, 3, 4, 8))
        s = shortcut_corrupt(z, 1, sigma=np.zeros((2, 3), np.float32))
        assert np.array_equal(s.z_tilde, s.eps)

    def test_variance_at_half(self):
        z = np.zeros((4, 5, 10, 50), np.float32)
        s = shortcut_corrupt(z, 2, sigma=np.full((4, 5), 0.5, np.float32))
        assert s.z_tilde.size >= 1e4
        assert abs(s.z_tilde.var() - 0.25) < 0.01

    def test_delta_values_dyadic(self):
        z = np.zeros((8, 8, 2, 4), np.float32)
        s = shortcut_corrupt(z, 3, m_max=3)
        assert set(np.unique(s.delta)).issubset({1.0, 0.5, 0.25, 0.125})
        s2 = shortcut_corrupt(z, 3, m_max=3, sigma_max_minus_half_delta=True)
        assert set(np.unique(s2.delta)).issubset({1.0, 0.5, 0.25})
        assert np.all(s2.sigma <= 1.0 - s2.delta / 2.0 + 1e-7)


class TestCausality:
    def test_future_edits_do_not_change_past(self):
        core = small_core()
        rng = SeedStream(5)
        z = rng.normal((2, 4, 2, 8))
        a = rng.uniform(-1, 1, (2, 4, 8))
        sig = rng.uniform(0, 1, (2, 4))
        dlt = np.full((2, 4), 0.5, np.float32)
        base = core.predict_values(z, a, sig, dlt)
        for t_edit in range(1, 4):
            z2 = z.copy()
            a2 = a.copy()
            z2[:, t_edit:] += 3.0
            a2[:, t_edit:] = 0.0
            sig2 = sig.copy()
            sig2[:, t_edit:] = 0.9
            out = core.predict_values(z2, a2, sig2, dlt)
            assert np.array_equal(out[:, :t_edit], base[:, :t_edit])
            assert not np.allclose(out[:, t_edit:], base[:, t_edit:])

    def test_untrained_model_action_invariant(self):
        # zero-initialized action embedder: actions cannot influence outputs
        core = small_core(seed=3)
        rng = SeedStream(6)
        z = rng.normal((2, 3, 2, 8))
        sig = rng.uniform(0, 1, (2, 3))
        dlt = np.full((2, 3), 1.0, np.float32)
        a1 = rng.uniform(-1, 1, (2, 3, 8))
        a2 = rng.uniform(-1, 1, (2, 3, 8))
        assert np.array_equal(core.predict_values(z, a1, sig, dlt),
                              core.predict_values(z, a2, sig, dlt))

    def test_action_path_live_once_weights_set(self):
        core = small_core(seed=3)
        core.params["cond.action.w"].data += 0.05
        rng = SeedStream(7)
        z = rng.normal((1, 3, 2, 8))
        sig = rng.uniform(0, 1, (1, 3))
        dlt = np.full((1, 3), 1.0, np.float32)
        a1 = rng.uniform(-1, 1, (1, 3, 8))
        a2 = rng.uniform(-1, 1, (1, 3, 8))
        assert not np.allclose(core.predict_values(z, a1, sig, dlt),
                               core.predict_values(z, a2, sig, dlt))


class TestEmpLoss:
    def test_zero_when_exact(self):
        z = SeedStream(0).normal((2, 3, 2, 4))
        assert emp_loss(z, z, np.zeros((2, 3), np.float32)).item() == 0.0

    def test_single_element_value(self):
        pred = np.array([[[[2.0]]]], np.float32)
        target = np.zeros((1, 1, 1, 1), np.float32)
        assert emp_loss(pred, target, np.zeros((1, 1), np.float32)).item() == 4.0

    def test_brute_force_equivalence(self):
        rng = np.random.default_rng(0)
        pred = rng.normal(size=(3, 4, 2, 5)).astype(np.float32)
        target = rng.normal(size=(3, 4, 2, 5)).astype(np.float32)
        sigma = rng.uniform(size=(3, 4)).astype(np.float32)
        for weighting, fn in [("uniform", lambda s: 1.0),
                              ("inverse-noise", lambda s: 1.0 / (1.0 - s + 0.01))]:
            got = emp_loss(pred, target, sigma, weighting).item()
            ref = np.mean([emp_loss_bruteforce(pred[b], target[b], sigma[b], fn)
                           for b in range(3)])
            assert got == pytest.approx(ref, abs=1e-7)


class TestScLoss:
    class ExactStub:
        """predict() that always returns the clean latents."""

        def __init__(self, z):
            self._z = z

        def predict(self, z_tilde, actions, sigma, delta):
            return en.constant(self._z)

    def test_exact_model_zero_loss(self):
        z = SeedStream(1).normal((2, 3, 2, 4))
        a = np.zeros((2, 3, 8), np.float32)
        loss = sc_loss(self.ExactStub(z), z, a, seed=0)
        assert loss.item() == pytest.approx(0.0, abs=1e-10)

    def test_non_negative(self):
        core = small_core()
        z = SeedStream(2).normal((2, 3, 2, 8))
        a = SeedStream(3).uniform(-1, 1, (2, 3, 8))
        assert sc_loss(core, z, a, seed=1).item() >= 0.0

    def test_lambda_zero_additivity(self):
        core = small_core()
        opt = AdamW(core.params, lr=0.0, weight_decay=0.0)
        z = SeedStream(4).normal((2, 3, 2, 8))
        a = SeedStream(5).uniform(-1, 1, (2, 3, 8))
        rec = dynamics_train_step(core, opt, z, a, seed=0, step=0, lambda_sc=0.0)
        assert rec["L_dyn"] == rec["L_emp"]
        assert rec["L_sc"] == 0.0


class TestGradients:
    def test_dynamics_block_finite_differences(self):
        core = small_core(d_z=4, s=1, width=8, t_max=2, mlp_ratio=2,
                          dtype=np.float64)
        assert core.params.count() <= 1000
        rng = SeedStream(8)
        z = rng.normal((1, 2, 1, 4), dtype=np.float64)
        a = rng.uniform(-1, 1, (1, 2, 8), dtype=np.float64)
        sig = rng.uniform(0, 1, (1, 2), dtype=np.float64)
        dlt = np.full((1, 2), 0.5)

        def loss():
            pred = core.predict(z, a, sig, dlt)
            return emp_loss(pred, np.zeros_like(z), sig)

        check_gradients(loss, core.params, h=3e-4)


@pytest.fixture(scope="module")
def latent_setup():
    """Small tokenizer + trajectories -> token sequences for dynamics."""
    vol, _, _ = gen_phantom(0, (16, 16, 16))
    cfg = RenderConfig(out_h=16, out_w=16)
    trajs = [sample_trajectory(vol, seed=s, T=10, stride=2, cfg=cfg,
                               subject_id=f"s{s}") for s in range(3)]
    frames = np.concatenate([t.pixel_stack() for t in trajs])
    tok = SliceTokenizer(patch_size=4, width=16, depth=1, heads=2, dec_width=8,
                         dec_depth=1, steps=40, batch_size=8, lr=3e-3, seed=0)
    tok.fit(frames)
    z_list = [tok.transform(t.pixel_stack()) for t in trajs]
    a_list = [t.action_matrix() for t in trajs]
    return tok, z_list, a_list


class TestEstimator:
    def test_fit_freezes_tokenizer_and_learns(self, latent_setup):
        tok, z_list, a_list = latent_setup
        tok_hash = tok.core_.params.content_hash()
        dyn = LatentDynamics(width=32, depth=1, heads=2, context=4, steps=60,
                             batch_size=4, lr=3e-3, lambda_sc=0.25, seed=0)
        dyn.fit(z_list, a_list, token_grid_hw=(4, 4))
        assert tok.core_.params.content_hash() == tok_hash
        first = np.mean([h["L_emp"] for h in dyn.history_[:10]])
        last = np.mean([h["L_emp"] for h in dyn.history_[-10:]])
        assert last < first

    def test_identical_seeds_identical_curves(self, latent_setup):
        _, z_list, a_list = latent_setup
        kwargs = dict(width=16, depth=1, heads=2, context=3, steps=15,
                      batch_size=2, lambda_sc=0.5, seed=5)
        a = LatentDynamics(**kwargs).fit(z_list, a_list, token_grid_hw=(4, 4))
        b = LatentDynamics(**kwargs).fit(z_list, a_list, token_grid_hw=(4, 4))
        assert [h["L_dyn"] for h in a.history_] == [h["L_dyn"] for h in b.history_]

    def test_save_load_round_trip(self, latent_setup, tmp_path):
        tok, z_list, a_list = latent_setup
        dyn = LatentDynamics(width=16, depth=1, heads=2, context=3, steps=5,
                             batch_size=2, seed=0)
        dyn.fit(z_list, a_list, token_grid_hw=(4, 4))
        dyn.save(tmp_path / "dyn")
        back = LatentDynamics.load(tmp_path / "dyn")
        rng = SeedStream(0)
        z = rng.normal((1, 3, dyn.s_, dyn.d_z_))
        a = rng.uniform(-1, 1, (1, 3, 8))
        sig = np.full((1, 3), 0.5, np.float32)
        dlt = np.full((1, 3), 0.5, np.float32)
        assert np.array_equal(back.core_.predict_values(z, a, sig, dlt),
                              dyn.core_.predict_values(z, a, sig, dlt))


class TestFeatures:
    def test_shapes_and_determinism(self, latent_setup):
        tok, z_list, a_list = latent_setup
        dyn = LatentDynamics(width=32, depth=1, heads=2, context=4, steps=5,
                             batch_size=2, seed=0)
        dyn.fit(z_list, a_list, token_grid_hw=(4, 4))
        vol, _, _ = gen_phantom(0, (16, 16, 16))
        cfg = RenderConfig(out_h=16, out_w=16)
        traj = sample_trajectory(vol, seed=9, T=4, cfg=cfg)
        frames, actions = traj.pixel_stack(), traj.action_matrix()
        f1 = extract_features(dyn.core_, tok.core_, frames, actions, (4, 4))
        f2 = extract_features(dyn.core_, tok.core_, frames, actions, (4, 4))
        assert f1.shape == (16, 16 + 32)  # d + dynamics width
        assert np.array_equal(f1, f2)
        tok_only = extract_features(None, tok.core_, frames, actions, (4, 4))
        assert tok_only.shape == (16, 16)
        assert np.array_equal(tok_only, f1[:, :16])

    def test_earlier_action_moves_dynamics_part_only(self, latent_setup):
        tok, z_list, a_list = latent_setup
        dyn = LatentDynamics(width=32, depth=1, heads=2, context=4, steps=5,
                             batch_size=2, seed=0)
        dyn.fit(z_list, a_list, token_grid_hw=(4, 4))
        dyn.core_.params["cond.action.w"].data += 0.05  # make action path live
        vol, _, _ = gen_phantom(0, (16, 16, 16))
        cfg = RenderConfig(out_h=16, out_w=16)
        traj = sample_trajectory(vol, seed=10, T=4, cfg=cfg)
        frames, actions = traj.pixel_stack(), traj.action_matrix()
        base = extract_features(dyn.core_, tok.core_, frames, actions, (4, 4))
        moved = actions.copy()
        moved[0] = np.clip(moved[0] + 0.3, -1, 1)
        out = extract_features(dyn.core_, tok.core_, frames, moved, (4, 4))
        d = tok.core_.width
        assert np.array_equal(out[:, :d], base[:, :d])  # tokenizer part fixed
        assert not np.allclose(out[:, d:], base[:, d:])  # dynamics part moves
