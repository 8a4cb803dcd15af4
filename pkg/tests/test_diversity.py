import json

import numpy as np
import pytest

from mha_nw_lab.diversity import (
    cross_gram,
    hdi,
    load_weight_file,
    make_diversity_report,
    make_projection_family,
    optimize_projections,
    principal_angles,
    projection_gradient,
    projection_objective,
)
from mha_nw_lab.errors import Infeasible, NeedsTwoHeads, ShapeMismatch, WeightFileError
from mha_nw_lab.mha import ProjectionSet
from mha_nw_lab.nw_attention import HeadConfig
from mha_nw_lab.tensor_core import Matrix


def set_from_wks(wks):
    heads = []
    p = wks[0].shape[0]
    for w in wks:
        m = Matrix(np.asarray(w, dtype=float))
        heads.append(HeadConfig(wq=m, wk=m, wv=np.zeros(p)))
    return ProjectionSet(heads=tuple(heads))


def orthonormal(p, d_k, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((p, d_k)))
    return q


class TestCrossGram:
    def test_identical_orthonormal_heads(self):
        u = orthonormal(6, 3, 0)
        proj = set_from_wks([u, u])
        g = cross_gram(proj, 0, 1).a
        np.testing.assert_allclose(g, np.eye(3) / 3, atol=1e-14)
        assert float((g * g).sum()) == pytest.approx(1.0 / 3)

    def test_orthogonal_subspaces_zero(self):
        frame = orthonormal(6, 4, 1)
        proj = set_from_wks([frame[:, :2], frame[:, 2:]])
        np.testing.assert_allclose(cross_gram(proj, 0, 1).a, np.zeros((2, 2)), atol=1e-14)

    def test_45_degree_pair_by_hand(self):
        e1 = np.array([[1.0], [0.0]])
        mid = np.array([[1.0], [1.0]]) / np.sqrt(2)
        proj = set_from_wks([e1, mid])
        g = cross_gram(proj, 0, 1).a
        assert g.shape == (1, 1)
        assert g[0, 0] == pytest.approx(1.0 / np.sqrt(2))

    def test_index_validation(self):
        proj = set_from_wks([orthonormal(4, 2, 2), orthonormal(4, 2, 3)])
        with pytest.raises(IndexError):
            cross_gram(proj, 0, 5)
        with pytest.raises(ShapeMismatch):
            cross_gram(proj, 1, 1)

    def test_symmetry_of_frobenius_mass(self):
        proj = set_from_wks([orthonormal(5, 2, 4), orthonormal(5, 2, 5)])
        g01 = cross_gram(proj, 0, 1).a
        g10 = cross_gram(proj, 1, 0).a
        assert float((g01**2).sum()) == pytest.approx(float((g10**2).sum()), rel=1e-12)


class TestPrincipalAngles:
    def test_identical_subspaces_zero_angles(self):
        u = orthonormal(6, 3, 6)
        angles = principal_angles(set_from_wks([u, u]), 0, 1)
        np.testing.assert_allclose(angles, np.zeros(3), atol=1e-7)

    def test_orthogonal_subspaces_right_angles(self):
        frame = orthonormal(8, 4, 7)
        proj = set_from_wks([frame[:, :2], frame[:, 2:]])
        np.testing.assert_allclose(principal_angles(proj, 0, 1), np.full(2, np.pi / 2),
                                   atol=1e-7)

    def test_planted_45_degrees(self):
        e1 = np.array([[1.0], [0.0]])
        mid = np.array([[1.0], [1.0]]) / np.sqrt(2)
        angles = principal_angles(set_from_wks([e1, mid]), 0, 1)
        assert angles[0] == pytest.approx(np.pi / 4, rel=1e-12)

    def test_ascending_in_0_halfpi(self):
        rng = np.random.default_rng(8)
        proj = set_from_wks([rng.standard_normal((7, 3)), rng.standard_normal((7, 3))])
        angles = principal_angles(proj, 0, 1)
        assert np.all(np.diff(angles) >= 0)
        assert np.all(angles >= 0) and np.all(angles <= np.pi / 2 + 1e-12)

    def test_cosines_match_orthonormal_gram_mass(self):
        # sum cos^2(theta_j) equals the squared Frobenius mass of U_h^T U_h'
        rng = np.random.default_rng(9)
        for _ in range(10):
            proj = set_from_wks([rng.standard_normal((6, 2)), rng.standard_normal((6, 2))])
            angles = principal_angles(proj, 0, 1)
            u0 = np.linalg.qr(proj.heads[0].wk.a)[0]
            u1 = np.linalg.qr(proj.heads[1].wk.a)[0]
            mass = float(((u0.T @ u1) ** 2).sum())
            assert np.sum(np.cos(angles) ** 2) == pytest.approx(mass, abs=1e-8)


class TestHdi:
    def test_needs_two_heads(self):
        with pytest.raises(NeedsTwoHeads):
            hdi(set_from_wks([orthonormal(4, 2, 0)]))

    def test_orthogonal_endpoint(self):
        frame = orthonormal(8, 8, 10)
        proj = set_from_wks([frame[:, i * 2:(i + 1) * 2] for i in range(4)])
        literal, normalized = hdi(proj)
        assert literal == pytest.approx(1.0, abs=1e-12)
        assert normalized == pytest.approx(1.0, abs=1e-12)

    def test_identical_orthonormal_heads_dk4(self):
        u = orthonormal(8, 4, 11)
        literal, normalized = hdi(set_from_wks([u, u]))
        assert literal == pytest.approx(0.75, abs=1e-12)   # 1 - 1/d_k
        assert normalized == pytest.approx(0.0, abs=1e-12)

    def test_45_degree_pair(self):
        e1 = np.array([[1.0], [0.0]])
        mid = np.array([[1.0], [1.0]]) / np.sqrt(2)
        literal, _ = hdi(set_from_wks([e1, mid]))
        assert literal == pytest.approx(0.5, rel=1e-12)

    def test_normalized_rotation_invariant(self):
        rng = np.random.default_rng(12)
        wks = [orthonormal(6, 2, s) for s in (20, 21, 22)]
        _, base = hdi(set_from_wks(wks))
        rot = np.linalg.qr(rng.standard_normal((2, 2)))[0]
        rotated = [w @ rot for w in wks]
        _, spun = hdi(set_from_wks(rotated))
        assert spun == pytest.approx(base, abs=1e-10)

    def test_literal_not_rotation_invariant_under_scaling(self):
        # scaling a frame changes the literal index but not the normalized one
        u = orthonormal(6, 2, 23)
        v = orthonormal(6, 2, 24)
        lit1, norm1 = hdi(set_from_wks([u, v]))
        lit2, norm2 = hdi(set_from_wks([2.0 * u, v]))
        assert norm2 == pytest.approx(norm1, abs=1e-10)
        assert lit2 != pytest.approx(lit1, abs=1e-6)

    def test_report_contents(self):
        frame = orthonormal(6, 4, 25)
        proj = set_from_wks([frame[:, :2], frame[:, 2:]])
        report = make_diversity_report(proj)
        assert report.gram_frobsq.shape == (2, 2)
        assert report.gram_frobsq[0, 0] == 0.0
        assert (0, 1) in report.principal_angles
        assert report.hdi == pytest.approx(1.0, abs=1e-12)


class TestProjectionFamily:
    def test_mix0_identical_frames(self):
        proj = make_projection_family(8, 2, 4, mix=0.0, seed=1)
        _, normalized = hdi(proj)
        assert normalized == pytest.approx(0.0, abs=1e-10)
        for head in proj.heads[1:]:
            np.testing.assert_allclose(head.wk.a, proj.heads[0].wk.a, atol=1e-12)

    def test_mix1_orthogonal_blocks(self):
        proj = make_projection_family(8, 2, 4, mix=1.0, seed=2)
        literal, normalized = hdi(proj)
        assert normalized == pytest.approx(1.0, abs=1e-12)
        for h in range(4):
            for h2 in range(h + 1, 4):
                assert np.abs(cross_gram(proj, h, h2).a).max() <= 1e-12

    def test_mid_mix_strictly_between(self):
        grid = [0.0, 0.25, 0.5, 0.75, 1.0]
        values = []
        for mix in grid:
            _, normalized = hdi(make_projection_family(8, 2, 4, mix=mix, seed=3))
            values.append(normalized)
        assert all(values[i] < values[i + 1] for i in range(len(values) - 1))
        assert 0.0 < values[2] < 1.0

    def test_infeasible_orthogonal_request(self):
        with pytest.raises(Infeasible):
            make_projection_family(4, 2, 4, mix=1.0, seed=4)

    def test_infeasible_only_when_mix_positive(self):
        proj = make_projection_family(4, 2, 4, mix=0.0, seed=5)
        assert proj.H == 4

    def test_query_gain_scales_wq_only(self):
        proj = make_projection_family(8, 2, 4, mix=1.0, seed=6, query_gain=5.0)
        for head in proj.heads:
            np.testing.assert_allclose(head.wq.a, 5.0 * head.wk.a, rtol=1e-15)

    def test_balanced_value_vector_unit_norm_equal_blocks(self):
        proj = make_projection_family(8, 2, 4, mix=1.0, seed=7)
        wv = proj.heads[0].wv
        assert np.linalg.norm(wv) == pytest.approx(1.0, rel=1e-12)
        for head in proj.heads:
            captured = head.wk.a.T @ wv
            assert float(captured @ captured) == pytest.approx(0.25, rel=1e-10)

    def test_noise_scales_orthogonal_to_keys(self):
        proj = make_projection_family(12, 2, 4, mix=1.0, seed=8,
                                      noise_scales=(0.0, 1.0, 2.0, 3.0))
        base = proj.heads[0].wv
        for h, head in enumerate(proj.heads):
            extra = head.wv - base if h else np.zeros(12)
            assert np.linalg.norm(extra) == pytest.approx(float(h), abs=1e-9)
            for other in proj.heads:
                assert np.abs(other.wk.a.T @ extra).max() <= 1e-9

    def test_noise_scales_need_spare_dims(self):
        with pytest.raises(Infeasible):
            make_projection_family(8, 2, 4, mix=1.0, seed=9, noise_scales=(0, 1, 2, 3))

    def test_deterministic(self):
        a = make_projection_family(8, 2, 4, mix=0.6, seed=11)
        b = make_projection_family(8, 2, 4, mix=0.6, seed=11)
        for ha, hb in zip(a.heads, b.heads):
            np.testing.assert_array_equal(ha.wk.a, hb.wk.a)
            np.testing.assert_array_equal(ha.wv, hb.wv)


class TestOptimizer:
    def test_orthogonal_start_is_fixed_point(self):
        frame = orthonormal(8, 8, 30)
        wks = [frame[:, i * 2:(i + 1) * 2] / np.linalg.norm(frame[:, i * 2:(i + 1) * 2])
               for i in range(4)]
        initial = set_from_wks(wks)
        proj, trace = optimize_projections(8, 2, 4, seed=0, initial=initial)
        assert trace[0] <= 1e-12
        assert len(trace) == 1
        for head, w in zip(proj.heads, wks):
            # defensive renormalization of the start may move the last bit
            np.testing.assert_allclose(head.wk.a, w, atol=1e-14)

    def test_two_heads_in_plane_reach_right_angle(self):
        proj, trace = optimize_projections(2, 1, 2, seed=5)
        assert trace[-1] <= 1e-10
        w0 = proj.heads[0].wk.a.ravel()
        w1 = proj.heads[1].wk.a.ravel()
        angle = np.arccos(np.clip(abs(w0 @ w1), 0, 1))
        assert angle == pytest.approx(np.pi / 2, abs=1e-4)

    def test_trace_nonincreasing(self):
        _, trace = optimize_projections(8, 2, 4, seed=1)
        assert all(trace[i + 1] <= trace[i] for i in range(len(trace) - 1))

    def test_ten_random_starts_reach_1e8(self):
        for seed in range(10):
            proj, trace = optimize_projections(8, 2, 4, seed=seed)
            assert trace[-1] <= 1e-8
            assert proj.normalized

    def test_infeasible(self):
        with pytest.raises(Infeasible):
            optimize_projections(4, 2, 4, seed=0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(99)
        step = 1e-6
        worst = 0.0
        for _ in range(20):
            p, d_k, H = 6, 2, 3
            wks = [rng.standard_normal((p, d_k)) for _ in range(H)]
            grads = projection_gradient(wks, d_k)
            for h in range(H):
                fd = np.zeros((p, d_k))
                for i in range(p):
                    for j in range(d_k):
                        up = [w.copy() for w in wks]
                        dn = [w.copy() for w in wks]
                        up[h][i, j] += step
                        dn[h][i, j] -= step
                        fd[i, j] = (projection_objective(up, d_k)
                                    - projection_objective(dn, d_k)) / (2 * step)
                denom = np.maximum(np.maximum(np.abs(fd), np.abs(grads[h])), 1e-8)
                worst = max(worst, float((np.abs(fd - grads[h]) / denom).max()))
        assert worst <= 1e-5


class TestWeightFile:
    def _write(self, tmp_path, payload):
        path = tmp_path / "weights.json"
        path.write_text(payload if isinstance(payload, str) else json.dumps(payload))
        return path

    def test_round_trip(self, tmp_path):
        frame = orthonormal(6, 4, 40)
        doc = {"heads": [
            {"p": 6, "d_k": 2, "data": frame[:, :2].ravel().tolist()},
            {"p": 6, "d_k": 2, "data": frame[:, 2:].ravel().tolist()},
        ]}
        proj = load_weight_file(self._write(tmp_path, doc))
        assert proj.H == 2 and proj.p == 6 and proj.d_k == 2
        literal, normalized = hdi(proj)
        assert normalized == pytest.approx(1.0, abs=1e-12)

    def test_truncated_file_reports_byte_offset(self, tmp_path):
        path = self._write(tmp_path, '{"heads": [{"p": 2, "d_k": 1, "data": [1.0,')
        with pytest.raises(WeightFileError, match=r"byte offset \d+"):
            load_weight_file(path)

    def test_wrong_count_names_head(self, tmp_path):
        doc = {"heads": [{"p": 2, "d_k": 2, "data": [1.0, 0.0, 0.0]}]}
        with pytest.raises(WeightFileError, match="head 0"):
            load_weight_file(self._write(tmp_path, doc))

    def test_mixed_shapes_rejected(self, tmp_path):
        doc = {"heads": [
            {"p": 2, "d_k": 1, "data": [1.0, 0.0]},
            {"p": 3, "d_k": 1, "data": [1.0, 0.0, 0.0]},
        ]}
        with pytest.raises(WeightFileError, match="head 1"):
            load_weight_file(self._write(tmp_path, doc))

    def test_non_finite_rejected(self, tmp_path):
        doc = {"heads": [{"p": 2, "d_k": 1, "data": [1.0, None]}]}
        with pytest.raises(WeightFileError):
            load_weight_file(self._write(tmp_path, doc))

    def test_missing_fields_rejected(self, tmp_path):
        doc = {"heads": [{"p": 2, "data": [1.0, 0.0]}]}
        with pytest.raises(WeightFileError, match="d_k"):
            load_weight_file(self._write(tmp_path, doc))
