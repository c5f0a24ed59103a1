import itertools

import numpy as np
import pytest
import torch

from pvp.faceparams import FaceParams, Image
from pvp.genbackend import LatentCode, ToyEstimator, ToyGenerator, ToyInverter
from pvp.personalization import (
    PTIConfig,
    PersonalizationError,
    PersonalizedManifold,
    PivotSelectionWarning,
    PivotSet,
    load_manifold,
    locality_regularizer,
    personalize,
    pose_coverage_report,
    save_manifold,
    select_pivots,
)

from conftest import rand_params


def _params_at(yaw, pitch=0.0, expr_seed=None):
    expr = np.zeros(50)
    if expr_seed is not None:
        expr = np.random.default_rng(expr_seed).uniform(-1, 1, 50)
    return FaceParams(yaw_deg=yaw, pitch_deg=pitch, neck_pose=np.zeros(3),
                      jaw_pose=np.zeros(3), expression=expr)


class TestSelectPivots:
    def test_two_blobs_against_brute_force(self):
        # two tight, well-separated blobs; brute-force over all 2-partitions
        rng = np.random.default_rng(0)
        yaws = np.concatenate([60 + rng.normal(0, 0.5, 3), -60 + rng.normal(0, 0.5, 3)])
        params = [_params_at(y) for y in yaws]
        from pvp.faceparams import stack_features, standardize

        feats, *_ = standardize(stack_features(params))

        best_cost, best_partition = np.inf, None
        for assign in itertools.product([0, 1], repeat=6):
            if len(set(assign)) < 2:
                continue
            assign = np.array(assign)
            cost = 0.0
            for c in (0, 1):
                mem = feats[assign == c]
                cost += ((mem - mem.mean(axis=0)) ** 2).sum()
            if cost < best_cost:
                best_cost, best_partition = cost, assign

        chosen = select_pivots(params, 2, seed=0)
        assert len(chosen) == 2
        # each chosen frame is the one nearest its blob mean under the oracle partition
        for c in (0, 1):
            members = np.nonzero(best_partition == c)[0]
            mean = feats[members].mean(axis=0)
            nearest = members[np.argmin(((feats[members] - mean) ** 2).sum(axis=1))]
            assert nearest in chosen

    def test_identical_frames_dedup_with_warning(self):
        p = _params_at(10.0)
        params = [p, p, p, p]
        with pytest.warns(PivotSelectionWarning):
            chosen = select_pivots(params, 3, seed=1)
        assert chosen == [0] or len(chosen) == 1

    def test_k_equals_n_distinct(self):
        rng = np.random.default_rng(2)
        params = [rand_params(rng) for _ in range(5)]
        chosen = select_pivots(params, 5, seed=2)
        assert sorted(chosen) == [0, 1, 2, 3, 4]

    def test_k_exceeds_n_raises(self):
        params = [_params_at(0.0), _params_at(1.0)]
        with pytest.raises(ValueError, match="K exceeds frame count"):
            select_pivots(params, 3)

    def test_permutation_set_equality(self):
        # well-separated blobs: the optimum is unique, so the seed-dependent
        # init cannot change which feature rows win
        rng = np.random.default_rng(3)
        params = []
        for center in (-60.0, 0.0, 55.0):
            params.extend(_params_at(center + rng.normal(0, 0.3)) for _ in range(4))
        chosen = select_pivots(params, 3, seed=5)
        perm = rng.permutation(len(params))
        permuted = [params[i] for i in perm]
        chosen_perm = select_pivots(permuted, 3, seed=11)
        rows = {tuple(np.round(params[i].to_vector(), 9)) for i in chosen}
        rows_perm = {tuple(np.round(permuted[i].to_vector(), 9)) for i in chosen_perm}
        assert rows == rows_perm


def _imperfect_pivots(backend, yaws, color=(0.3, 0.6, 0.4)):
    """Pivot targets the inverter's zero color init cannot reconstruct."""
    params = [_params_at(y, expr_seed=i) for i, y in enumerate(yaws)]
    targets = [backend.synthesize_from_params(p, color=color) for p in params]
    inverter = ToyInverter(backend, refine_steps=0)
    latents = inverter.invert_batch(targets)
    pivots = PivotSet(frame_indices=tuple(range(len(yaws))), latents=tuple(latents),
                      params=tuple(params))
    return pivots, targets


def _shifted_pivots(backend, yaws, sketch_gain=0.85):
    """Well-inverted pivots whose targets are then darkened in the sketch rows.

    The required change lives in the subspace spanned by the pivots' color
    latents, so the locality regularizer has something real to localize.
    """
    colors = [(0.35, 0.55, 0.45), (0.6, 0.4, 0.35), (0.45, 0.45, 0.6)]
    params = [_params_at(y, expr_seed=i) for i, y in enumerate(yaws)]
    clean = [backend.synthesize_from_params(p, color=colors[i % 3])
             for i, p in enumerate(params)]
    latents = ToyInverter(backend).invert_batch(clean)
    targets = []
    for im in clean:
        px = im.pixels.copy()
        px[1:] *= sketch_gain
        targets.append(Image(pixels=px))
    pivots = PivotSet(frame_indices=tuple(range(len(yaws))), latents=tuple(latents),
                      params=tuple(params))
    return pivots, targets


class TestPersonalize:
    def test_perfect_pivots_stop_at_step_zero(self, backend):
        params = [_params_at(y) for y in (-30.0, 25.0)]
        targets = [backend.synthesize_from_params(p) for p in params]
        latents = ToyInverter(backend).invert_batch(targets)
        pivots = PivotSet((0, 1), tuple(latents), tuple(params))
        manifold = personalize(backend, pivots, targets, PTIConfig(max_steps=100, seed=0))
        assert manifold.provenance["steps_run"] == 0
        assert manifold.provenance["converged"]
        np.testing.assert_array_equal(manifold.backend.get_parameters(),
                                      backend.get_parameters())

    def test_descent_reduces_reconstruction_error(self, backend):
        pivots, targets = _imperfect_pivots(backend, (-20.0, 35.0))
        pivot_w = torch.tensor(np.stack([l.layers for l in pivots.latents]))
        target_px = torch.tensor(np.stack([t.pixels for t in targets]))

        def recon_error(b):
            with torch.no_grad():
                return float((b.synthesize_tensor(pivot_w) - target_px).pow(2).mean())

        before = recon_error(backend)
        cfg = PTIConfig(max_steps=60, lambda_reg=0.0, lpips_threshold=1e-9,
                        step_size=5e-3, seed=0)
        manifold = personalize(backend, pivots, targets, cfg)
        after = recon_error(manifold.backend)
        assert after < before

    def test_zero_budget_returns_untuned_clone_with_warning(self, backend):
        pivots, targets = _imperfect_pivots(backend, (-20.0, 35.0))
        with pytest.warns(UserWarning, match="budget"):
            manifold = personalize(backend, pivots, targets, PTIConfig(max_steps=0))
        np.testing.assert_array_equal(manifold.backend.get_parameters(),
                                      backend.get_parameters())

    def test_original_backend_never_mutated(self, backend):
        before = backend.get_parameters()
        pivots, targets = _imperfect_pivots(backend, (-20.0, 35.0))
        personalize(backend, pivots, targets,
                    PTIConfig(max_steps=30, lpips_threshold=1e-9, seed=1))
        np.testing.assert_array_equal(backend.get_parameters(), before)

    def test_regularizer_limits_heldout_drift(self, backend):
        pivots, targets = _shifted_pivots(backend, (-40.0, 10.0, 45.0))
        held_out = backend.sample_prior(16, torch.Generator().manual_seed(99))

        def drift(manifold):
            with torch.no_grad():
                a = backend.synthesize_tensor(held_out)
                b = manifold.backend.synthesize_tensor(held_out)
                return float((a - b).pow(2).mean())

        common = dict(max_steps=80, lpips_threshold=1e-9, step_size=5e-3, seed=3)
        free = personalize(backend, pivots, targets, PTIConfig(lambda_reg=0.0, **common))
        reg = personalize(backend, pivots, targets, PTIConfig(lambda_reg=0.1, **common))
        assert drift(reg) < drift(free)

    def test_non_finite_loss_aborts(self, backend):
        pivots, targets = _imperfect_pivots(backend, (-20.0, 35.0))
        bad = backend.clone()
        params = bad.get_parameters()
        params[:] = np.nan
        bad.set_parameters(params)
        with pytest.raises(PersonalizationError, match="non-finite|zero pivots"):
            personalize(bad, pivots, targets,
                        PTIConfig(max_steps=5, lpips_threshold=1e-12, seed=0))


class TestLocalityRegularizer:
    def test_identical_generators_give_zero(self, backend, small_manifold):
        val = locality_regularizer(backend, backend.clone(), small_manifold.pivots,
                                   PTIConfig(), torch.Generator().manual_seed(0))
        assert float(val) == 0.0

    def test_nonnegative(self, backend, small_manifold):
        tuned = backend.clone()
        p = tuned.get_parameters()
        p += np.random.default_rng(4).normal(0, 0.01, p.shape)
        tuned.set_parameters(p)
        val = locality_regularizer(backend, tuned, small_manifold.pivots,
                                   PTIConfig(), torch.Generator().manual_seed(1))
        assert float(val) >= 0.0

    def test_gradient_matches_finite_differences(self, backend, small_manifold):
        tuned = backend.clone()
        base = tuned.get_parameters()
        base += np.random.default_rng(5).normal(0, 0.005, base.shape)
        tuned.set_parameters(base)
        cfg = PTIConfig(locality_samples_per_step=3)

        def value(params):
            tuned.set_parameters(params)
            return float(locality_regularizer(backend, tuned, small_manifold.pivots,
                                              cfg, torch.Generator().manual_seed(7)))

        tuned.set_parameters(base)
        theta = tuned.theta.requires_grad_(True)
        loss = locality_regularizer(backend, tuned, small_manifold.pivots, cfg,
                                    torch.Generator().manual_seed(7))
        loss.backward()
        grad = theta.grad.numpy()
        theta.requires_grad_(False)

        rng = np.random.default_rng(6)
        idx = np.argsort(np.abs(grad))[-5:]
        h = 1e-5
        for j in idx:
            e = np.zeros_like(base)
            e[j] = h
            fd = (value(base + e) - value(base - e)) / (2 * h)
            assert abs(fd - grad[j]) <= 1e-3 * max(abs(fd), 1e-9)


class TestCoverage:
    def _two_pivot_manifold(self, backend):
        params = [_params_at(-60.0), _params_at(60.0)]
        targets = [backend.synthesize_from_params(p) for p in params]
        latents = ToyInverter(backend).invert_batch(targets)
        pivots = PivotSet((0, 1), tuple(latents), tuple(params))
        return PersonalizedManifold(pivots, beta=0.02, backend=backend.clone())

    def test_sampled_yaws_cover_dilated_segment(self, backend):
        manifold = self._two_pivot_manifold(backend)
        # sweep oracle over the dilated segment
        alphas = np.linspace(-manifold.beta, 1 + manifold.beta, 101)
        est = ToyEstimator()
        yaws = []
        for a in alphas:
            w = manifold.blend(np.array([a, 1 - a]))
            yaws.append(est.estimate(manifold.backend.synthesize(w)).yaw_deg)
        lo, hi = min(yaws), max(yaws)

        report = pose_coverage_report(manifold, n_samples=400, seed=0)
        assert report.sample_poses[:, 0].min() >= lo - 1e-6
        assert report.sample_poses[:, 0].max() <= hi + 1e-6
        # dilation overshoot: support reaches past the pivot poses themselves
        span = report.sample_poses[:, 0].max() - report.sample_poses[:, 0].min()
        assert span > 100.0

    def test_one_hot_reproduces_pivot_poses(self, backend):
        manifold = self._two_pivot_manifold(backend)
        est = ToyEstimator()
        for i, expected in enumerate(manifold.pivots.params):
            one_hot = np.zeros(2)
            one_hot[i] = 1.0
            img = manifold.backend.synthesize(manifold.blend(one_hot))
            assert est.estimate(img).yaw_deg == pytest.approx(expected.yaw_deg, abs=1e-6)

    def test_empty_sample_count_raises(self, backend):
        manifold = self._two_pivot_manifold(backend)
        with pytest.raises(ValueError, match="empty histogram"):
            pose_coverage_report(manifold, n_samples=0)

    def test_histogram_mass(self, small_manifold):
        report = pose_coverage_report(small_manifold, n_samples=250, seed=1)
        assert report.counts.sum() == 250


class TestManifoldPersistence:
    def test_roundtrip(self, tmp_path, small_manifold):
        save_manifold(tmp_path / "m", small_manifold)
        loaded = load_manifold(tmp_path / "m")
        assert loaded.k == small_manifold.k
        assert loaded.beta == small_manifold.beta
        assert loaded.pivots.frame_indices == small_manifold.pivots.frame_indices
        w = loaded.pivots.latents[0]
        a = loaded.backend.synthesize(w)
        b = small_manifold.backend.synthesize(w)
        assert np.abs(a.pixels - b.pixels).max() < 1e-4  # float32 storage

    def test_double_roundtrip_bit_identical(self, tmp_path, small_manifold):
        save_manifold(tmp_path / "m1", small_manifold)
        first = load_manifold(tmp_path / "m1")
        save_manifold(tmp_path / "m2", first)
        second = load_manifold(tmp_path / "m2")
        w = second.pivots.latents[1]
        np.testing.assert_array_equal(first.backend.synthesize(w).pixels,
                                      second.backend.synthesize(w).pixels)

    def test_bad_dir(self, tmp_path):
        (tmp_path / "x").mkdir()
        (tmp_path / "x" / "manifest.json").write_text("{}")
        with pytest.raises(ValueError, match="not a manifold"):
            load_manifold(tmp_path / "x")
