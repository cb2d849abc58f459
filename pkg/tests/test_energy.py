from dataclasses import replace

import numpy as np
import pytest

from bodyfit.camera import Camera, project
from bodyfit.errors import InvalidArgument
from bodyfit.field import asymmetric_field
from bodyfit.gradcheck import check_energy_terms
from bodyfit.model import JOINT, BodyParams, default_virtual_joints, forward
from bodyfit.energy import (Keypoint, Observation, TermWeights, adf_term, energy_terms, evaluate,
                            geman_mcclure, keypoint_energy, mask_energy, model_keypoints,
                            prior_energy, total_energy)
from bodyfit.raster import Silhouette
from bodyfit.synth import NoiseSpec, dilate, generate_scene

CAM = Camera.default(128, 128)
VJ = default_virtual_joints()


@pytest.fixture(scope="module")
def scene(model):
    return generate_scene(model, 5, NoiseSpec.zero(), camera=CAM)


def shifted(params, du, depth=None):
    """Params translated so the body moves ``du`` pixels to the right."""
    p = params.copy()
    z = p.trans_t[2] if depth is None else depth
    p.trans_t = p.trans_t + np.array([du * z / CAM.fx, 0.0, 0.0])
    return p


class TestGemanMcClure:
    def test_zero(self):
        assert geman_mcclure(0.0, 3.0)[0] == 0.0

    def test_asymptote(self):
        sigma = 7.0
        value, _ = geman_mcclure(1e6 * sigma, sigma)
        assert abs(value - sigma ** 2) / sigma ** 2 < 1e-6

    def test_unit(self):
        assert geman_mcclure(1.0, 1.0)[0] == 0.5

    def test_even_and_bounded(self, rng):
        e = rng.normal(0, 50, 100)
        v, d = geman_mcclure(e, 10.0)
        v2, d2 = geman_mcclure(-e, 10.0)
        assert np.array_equal(v, v2) and np.array_equal(d, -d2)
        assert np.all((v >= 0) & (v < 100.0))

    def test_derivative(self, rng):
        e = rng.normal(0, 5, 50)
        h = 1e-6
        num = (geman_mcclure(e + h, 3.0)[0] - geman_mcclure(e - h, 3.0)[0]) / (2 * h)
        assert np.allclose(num, geman_mcclure(e, 3.0)[1], rtol=1e-6, atol=1e-8)


class TestKeypoints:
    def test_perfect_fit(self, model, scene):
        w = TermWeights()
        value, grad = keypoint_energy(scene.gt_params, model, VJ, scene.observation, w)
        assert value <= 1e-18
        assert np.linalg.norm(grad) < 1e-9

    def test_zero_confidence(self, model, scene):
        obs = scene.observation.with_keypoints([k._replace(confidence=0.0, x=k.x + 9)
                                                for k in scene.observation.keypoints])
        value, grad = keypoint_energy(scene.gt_params, model, VJ, obs, TermWeights())
        assert value == 0.0 and not grad.any()

    def test_single_offset(self, model, scene):
        _, J = forward(model, scene.gt_params)
        uv = project(CAM, J[[JOINT["head"]]])[0]
        obs = Observation([Keypoint(JOINT["head"], uv[0] + 1.0, uv[1], 1.0)], CAM)
        value, _ = keypoint_energy(scene.gt_params, model, VJ, obs, TermWeights(gm_sigma=100.0))
        assert np.isclose(value, 100.0 ** 2 / (100.0 ** 2 + 1), rtol=1e-9)
        assert round(value, 5) == 0.99990

    def test_confidence_zero_points_are_no_ops(self, model, scene, rng):
        kps = list(scene.observation.keypoints)
        kps[3] = kps[3]._replace(confidence=0.0)
        obs = scene.observation.with_keypoints(kps)
        p = shifted(scene.gt_params, 3.0)
        v1, g1 = keypoint_energy(p, model, VJ, obs, TermWeights())
        kps[3] = kps[3]._replace(x=kps[3].x + 50 * rng.normal(), y=-40.0)
        v2, g2 = keypoint_energy(p, model, VJ, obs.with_keypoints(kps), TermWeights())
        assert v1 == v2 and np.array_equal(g1, g2)

    def test_unmapped_id(self, model, scene):
        obs = Observation([Keypoint(40, 1.0, 1.0, 1.0)], CAM)
        with pytest.raises(InvalidArgument):
            keypoint_energy(scene.gt_params, model, VJ, obs, TermWeights())

    def test_virtual_joints_replace_raw_targets(self, model, scene):
        cfg = VJ.with_weights(0, (0.5, 0.5, 0.0))
        _, J = forward(model, scene.gt_params)
        ids = np.arange(model.joint_count)
        X, M = model_keypoints(J, ids, cfg)
        target = cfg.entries[0].target
        assert np.allclose(X[target], 0.5 * J[JOINT["pelvis"]] + 0.5 * J[JOINT["l_hip"]], atol=1e-15)
        others = np.setdiff1d(ids, [target])
        assert np.array_equal(X[others], J[others])
        X_raw, _ = model_keypoints(J, ids, cfg, use_virtual_joints=False)
        assert np.array_equal(X_raw, J)

    def test_keypoints_may_lie_outside_image(self, model, scene):
        kps = [k._replace(x=k.x + 500.0) for k in scene.observation.keypoints]
        value, grad = keypoint_energy(scene.gt_params, model, VJ,
                                      scene.observation.with_keypoints(kps), TermWeights())
        assert np.isfinite(value) and value > 0 and np.all(np.isfinite(grad))


class TestMask:
    def test_self_consistency(self, model, scene):
        obs = scene.observation
        value, _ = mask_energy(scene.gt_params, model, obs, tau=0.05)
        assert value < 0.02 * obs.valid_mask().sum()

    def test_no_faces_empty_mask(self, model, scene):
        bare = replace(model, faces=np.zeros((0, 3), dtype=np.int64))
        obs = Observation([], CAM, Silhouette.hard(np.zeros((128, 128))))
        value, grad = mask_energy(scene.gt_params, bare, obs)
        assert value == 0.0 and not grad.any()

    def test_empty_valid_region(self, model, scene):
        obs = replace(scene.observation, valid_region=(10, 10, 10, 50))
        value, grad = mask_energy(scene.gt_params, model, obs)
        assert value == 0.0 and not grad.any()

    def test_missing_silhouette(self, model, scene):
        with pytest.raises(InvalidArgument):
            mask_energy(scene.gt_params, model, Observation([], CAM))

    def test_restricting_region_shrinks(self, model, scene):
        p = shifted(scene.gt_params, 2.5)
        full, _ = mask_energy(p, model, scene.observation)
        half, _ = mask_energy(p, model, replace(scene.observation, valid_region=(0, 0, 128, 64)))
        assert half <= full

    def test_counts_mask_outside_body_support(self, model, scene):
        # a blob far from the body still costs its area
        S = scene.observation.silhouette.values.copy()
        S[:5, :5] = 1.0
        obs = replace(scene.observation, silhouette=Silhouette.hard(S))
        base, _ = mask_energy(scene.gt_params, model, scene.observation)
        extra, _ = mask_energy(scene.gt_params, model, obs)
        assert np.isclose(extra - base, 25.0, atol=1e-9)

    def test_body_off_screen(self, model, scene):
        p = shifted(scene.gt_params, 400.0)
        value, grad = mask_energy(p, model, scene.observation)
        assert value == scene.observation.silhouette.values.sum()
        assert not grad.any()


class TestAdf:
    def test_inside_with_zero_inner_weight(self, model, scene):
        big = Silhouette.hard(dilate(scene.gt_silhouette.values > 0, 8))
        obs = replace(scene.observation, silhouette=big)
        F = asymmetric_field(big, 1.0, 0.0)
        value, grad = adf_term(scene.gt_params, model, obs, F, tau=0.5)
        assert value == 0.0 and not grad.any()

    def test_outward_shift_increases(self, model, scene):
        F = asymmetric_field(scene.observation.silhouette, 1.0, 0.1)
        values = [adf_term(shifted(scene.gt_params, du), model, scene.observation, F)[0]
                  for du in (0.0, 1.0, 2.0)]
        assert values[0] < values[1] < values[2]

    def test_aligned_render_is_not_near_zero(self, model, scene):
        # the soft boundary spreads over neighbouring pixels, so the aligned energy is
        # a positive fraction of the perimeter rather than vanishing
        F = asymmetric_field(scene.observation.silhouette, 1.0, 0.1)
        value, _ = adf_term(scene.gt_params, model, scene.observation, F, tau=0.5)
        perimeter = np.count_nonzero(F.values == 0.1)
        assert 1e-3 * perimeter < value

    def test_field_size_mismatch(self, model, scene):
        F = asymmetric_field(np.eye(8, dtype=bool), 1.0, 0.1)
        with pytest.raises(InvalidArgument):
            adf_term(scene.gt_params, model, scene.observation, F)


class TestPrior:
    def test_rest(self, model):
        assert prior_energy(BodyParams.zeros(model), TermWeights(), model)[0] == 0.0

    def test_shape_norm(self, model):
        p = BodyParams.zeros(model)
        p.beta[0] = 1.0
        assert prior_energy(p, TermWeights(w_pose=7.0, w_shape=1.0), model)[0] == 1.0

    def test_elbow_limit(self, model):
        p = BodyParams.zeros(model)
        hi = model.joint_limits[JOINT["l_elbow"], 1, 1]
        p.theta[JOINT["l_elbow"], 1] = hi + 0.2
        value, _ = prior_energy(p, TermWeights(w_pose=1.0, w_shape=0.0), model)
        assert np.isclose(value, (hi + 0.2) ** 2 + 0.04, rtol=1e-12)

    def test_root_free(self, model):
        p = BodyParams.zeros(model)
        p.theta[0] = [0.3, 0.2, 0.1]
        p.trans_rot[:] = 1.0
        assert prior_energy(p, TermWeights(), model)[0] == 0.0

    def test_default_model(self, model):
        p = BodyParams.zeros(model)
        p.theta[4] = 0.2
        v1, g1 = prior_energy(p, TermWeights())
        v2, g2 = prior_energy(p, TermWeights(), model)
        assert v1 == v2 and np.array_equal(g1, g2)


class TestTotal:
    def test_all_weights_zero(self, model, scene):
        w = TermWeights(0, 0, 0, 0, 0)
        F = asymmetric_field(scene.observation.silhouette)
        value, grad = total_energy(shifted(scene.gt_params, 3), model, VJ, scene.observation, F, w)
        assert value == 0.0 and not grad.any()

    def test_keypoint_only_matches_term(self, model, scene):
        p = shifted(scene.gt_params, 3)
        w = TermWeights(lambda_k=1.0, w_pose=0.0, w_shape=0.0)
        tv, tg = total_energy(p, model, VJ, scene.observation, None, w)
        kv, kg = keypoint_energy(p, model, VJ, scene.observation, w)
        assert tv == kv and np.array_equal(tg, kg)

    def test_silhouette_skipped_when_absent(self, model, scene):
        p = shifted(scene.gt_params, 3)
        w = TermWeights(lambda_k=1.0, lambda_m=1.0, lambda_d=1.0)
        obs = replace(scene.observation, silhouette=None)
        ev = evaluate(p, model, VJ, obs, None, w)
        assert ev.terms["mask"] == 0.0 and ev.terms["adf"] == 0.0

    def test_terms_nonnegative_and_consistent(self, model, scene):
        p = shifted(scene.gt_params, 1.5)
        p.theta[3] += 0.1
        w = TermWeights(lambda_k=1.0, lambda_m=1e-3, lambda_d=1e-2, w_pose=0.1, w_shape=0.1)
        F = asymmetric_field(scene.observation.silhouette)
        ev = evaluate(p, model, VJ, scene.observation, F, w, tau=0.5)
        vals = energy_terms(p, model, VJ, scene.observation, F, w, tau=0.5)
        for k in ("keypoints", "mask", "adf", "prior"):
            assert ev.terms[k] >= 0
            assert np.isclose(ev.terms[k], vals[k], rtol=1e-12)
        assert np.isclose(ev.value, vals["total"], rtol=1e-12)

    def test_render_cache_is_transparent(self, model, scene):
        p = shifted(scene.gt_params, 1.5)
        w = TermWeights(lambda_k=1.0, lambda_m=1e-3, lambda_d=1e-2, w_pose=0.1, w_shape=0.1)
        F = asymmetric_field(scene.observation.silhouette)
        plain = energy_terms(p, model, VJ, scene.observation, F, w, tau=0.5)
        cache = {}
        first = energy_terms(p, model, VJ, scene.observation, F, w, tau=0.5, render_cache=cache)
        q = p.copy()
        q.theta[JOINT["head"]] += 0.2          # leaf joint: same vertices, new prior
        second = energy_terms(q, model, VJ, scene.observation, F, w, tau=0.5, render_cache=cache)
        assert first == plain and len(cache) == 1
        assert second["mask"] == plain["mask"] and second["prior"] != plain["prior"]
        assert second == energy_terms(q, model, VJ, scene.observation, F, w, tau=0.5)

    def test_finite_difference_small(self, model):
        for result in check_energy_terms(model, seed=11, states=3):
            assert result.ok, result


class TestObservation:
    def test_sorted_by_id(self):
        obs = Observation([(3, 1, 1, 1.0), (1, 2, 2, 0.5)], CAM)
        assert list(obs.ids) == [1, 3]

    def test_confidence_range(self):
        with pytest.raises(InvalidArgument):
            Observation([(0, 1, 1, 1.5)], CAM)

    def test_default_region_is_image(self):
        assert Observation([], CAM).valid_mask().all()

    def test_weights_validated(self):
        with pytest.raises(InvalidArgument):
            TermWeights(lambda_m=-1.0)
        with pytest.raises(InvalidArgument):
            TermWeights(gm_sigma=0.0)
