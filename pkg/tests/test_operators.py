import json
from dataclasses import replace

import numpy as np
import pytest

from transportops.errors import (
    ConsistencyError,
    DimensionError,
    DomainError,
    FormatError,
    NumericalError,
    PreconditionError,
)
from transportops.linalg import mat_expm
from transportops.operators import (
    InferenceOptions,
    LatentPair,
    OperatorDictionary,
    batch_scale,
    generator_from_coeffs,
    infer_coefficients,
    load_dictionary,
    manifold_offset,
    objective_grad_c,
    objective_grad_psi,
    pair_grads,
    prune,
    prune_threshold,
    random_dictionary,
    save_dictionary,
    train_operators,
    transport_objective,
    transport_path,
)

from helpers import central_diff_grad, grid_search_1d, grid_search_2d, rel_err

ROTATION = np.array([[0.0, -1.0], [1.0, 0.0]])


def rotation_dictionary(zeta=0.0, gamma=0.0):
    return OperatorDictionary(psi=ROTATION[None], gamma=gamma, zeta=zeta)


def random_instance(rng, d=None, num_ops=None, gamma=0.0, zeta=0.0):
    d = d or int(rng.integers(2, 7))
    num_ops = num_ops or int(rng.integers(1, 5))
    psi = rng.normal(0.0, 0.4, size=(num_ops, d, d))
    dictionary = OperatorDictionary(psi=psi, gamma=gamma, zeta=zeta)
    pair = LatentPair(rng.normal(size=d), rng.normal(size=d))
    coeffs = rng.uniform(0.2, 1.0, num_ops) * rng.choice([-1.0, 1.0], num_ops)
    return dictionary, pair, coeffs


class TestDictionaryTypes:
    def test_rejects_non_square_generators(self):
        with pytest.raises(DimensionError):
            OperatorDictionary(psi=np.zeros((1, 2, 3)))

    def test_rejects_empty(self):
        with pytest.raises(DimensionError):
            OperatorDictionary(psi=np.zeros((0, 2, 2)))

    def test_rejects_non_finite(self):
        psi = np.zeros((1, 2, 2))
        psi[0, 0, 0] = np.inf
        with pytest.raises(DomainError):
            OperatorDictionary(psi=psi)

    def test_rejects_negative_weights(self):
        with pytest.raises(DomainError):
            OperatorDictionary(psi=np.zeros((1, 2, 2)), gamma=-1.0)

    def test_magnitudes(self):
        d = OperatorDictionary(psi=np.stack([np.eye(2), 2 * np.eye(2)]))
        assert np.allclose(d.magnitudes(), [np.sqrt(2), 2 * np.sqrt(2)])

    def test_pair_validation(self):
        with pytest.raises(DimensionError):
            LatentPair(np.zeros(2), np.zeros(3))
        with pytest.raises(DomainError):
            LatentPair(np.zeros(2), np.zeros(2), scale=0.0)

    def test_pair_scaling(self):
        pair = LatentPair(np.array([2.0, 0.0]), np.array([0.0, 4.0]), scale=2.0)
        z0, z1 = pair.scaled()
        assert np.allclose(z0, [1.0, 0.0]) and np.allclose(z1, [0.0, 2.0])

    def test_batch_scale_is_max_abs(self):
        assert batch_scale(np.array([[0.5, -3.0], [1.0, 2.0]])) == 3.0
        assert batch_scale(np.zeros((2, 2))) == 1.0

    def test_inference_options_validation(self):
        with pytest.raises(DomainError):
            InferenceOptions(max_iters=0)
        with pytest.raises(DomainError):
            InferenceOptions(grad_tol=0.0)
        with pytest.raises(DomainError):
            InferenceOptions(num_restarts=0)


class TestGeneratorFromCoeffs:
    def test_zero_coeffs_give_zero(self):
        d = random_dictionary(3, 2, rng_seed=0)
        assert np.array_equal(generator_from_coeffs(d, np.zeros(2)),
                              np.zeros((3, 3)))

    def test_single_operator_scaling(self):
        d = rotation_dictionary()
        assert np.array_equal(generator_from_coeffs(d, np.array([2.0])),
                              2.0 * ROTATION)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        d, _, _ = random_instance(rng, d=3, num_ops=3)
        ca = rng.normal(size=3)
        cb = rng.normal(size=3)
        lhs = generator_from_coeffs(d, ca + cb)
        rhs = generator_from_coeffs(d, ca) + generator_from_coeffs(d, cb)
        assert np.allclose(lhs, rhs)

    def test_length_mismatch(self):
        d = rotation_dictionary()
        with pytest.raises(DimensionError):
            generator_from_coeffs(d, np.zeros(2))


class TestTransportObjective:
    def test_matched_pair_no_regularizers(self):
        d = rotation_dictionary()
        pair = LatentPair(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        terms = transport_objective(d, pair, np.zeros(1))
        assert terms.total == 0.0

    def test_only_frobenius_survives(self):
        gamma = 0.37
        d = rotation_dictionary(gamma=gamma)
        pair = LatentPair(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        terms = transport_objective(d, pair, np.zeros(1))
        expected = 0.5 * gamma * np.sum(ROTATION ** 2)
        assert terms.total == pytest.approx(expected, abs=1e-15)
        assert terms.reconstruction == 0.0 and terms.sparsity == 0.0

    def test_scalar_doubling(self):
        d = OperatorDictionary(psi=np.ones((1, 1, 1)))
        pair = LatentPair(np.array([1.0]), np.array([2.0]))
        terms = transport_objective(d, pair, np.array([np.log(2.0)]))
        assert abs(terms.total) <= 1e-15

    def test_sparsity_term_is_exact_l1(self):
        d = rotation_dictionary(zeta=0.5)
        pair = LatentPair(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        terms = transport_objective(d, pair, np.array([-2.0]))
        assert terms.sparsity == pytest.approx(1.0)


class TestGradients:
    def test_grad_c_zero_at_matched_optimum(self):
        d = rotation_dictionary()
        rng = np.random.default_rng(5)
        z0 = rng.normal(size=2)
        pair = LatentPair(z0, mat_expm(0.7 * ROTATION) @ z0)
        grad = objective_grad_c(d, pair, np.array([0.7]))
        assert np.max(np.abs(grad)) <= 1e-12

    def test_grad_c_smoothed_l1_is_zero_at_origin(self):
        d = rotation_dictionary(zeta=0.8)
        pair = LatentPair(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        grad = objective_grad_c(d, pair, np.zeros(1))
        assert np.max(np.abs(grad)) <= 1e-12

    def test_grad_c_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            d, pair, coeffs = random_instance(rng, gamma=0.1, zeta=0.05)

            def objective(c):
                return transport_objective(d, pair, c).total

            grad = objective_grad_c(d, pair, coeffs)
            fd = central_diff_grad(objective, coeffs)
            assert rel_err(grad, fd) <= 1e-5

    def test_grad_psi_reduces_to_weight_decay(self):
        gamma = 0.2
        rng = np.random.default_rng(9)
        d, _, _ = random_instance(rng, d=3, num_ops=2, gamma=gamma)
        pair = LatentPair(rng.normal(size=3), rng.normal(size=3))
        grads = objective_grad_psi(d, pair, np.zeros(2))
        # With c = 0 the reconstruction term contributes c_m * G = 0.
        assert np.allclose(grads, gamma * d.psi)

    def test_grad_psi_zero_at_matched_pair(self):
        d = rotation_dictionary()
        z0 = np.array([0.3, -1.2])
        pair = LatentPair(z0, mat_expm(0.4 * ROTATION) @ z0)
        grads = objective_grad_psi(d, pair, np.array([0.4]))
        assert np.max(np.abs(grads)) <= 1e-12

    def test_grad_psi_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            d, pair, coeffs = random_instance(rng, gamma=0.07)

            def objective(psi_flat):
                mod = d.with_psi(psi_flat.reshape(d.psi.shape))
                return transport_objective(mod, pair, coeffs).total

            grads = objective_grad_psi(d, pair, coeffs)
            fd = central_diff_grad(objective, d.psi.copy())
            assert rel_err(grads, fd.reshape(grads.shape)) <= 1e-5

    def test_pair_grads_zero_at_matched_pair(self):
        d = rotation_dictionary()
        z0 = np.array([1.0, -0.5])
        pair = LatentPair(z0, mat_expm(1.1 * ROTATION) @ z0)
        gz0, gz1 = pair_grads(d, pair, np.array([1.1]))
        assert np.max(np.abs(gz0)) <= 1e-12
        assert np.max(np.abs(gz1)) <= 1e-12

    def test_pair_grads_at_zero_generator(self):
        d = rotation_dictionary()
        z0 = np.array([1.0, 2.0])
        z1 = np.array([-1.0, 0.5])
        gz0, gz1 = pair_grads(d, LatentPair(z0, z1), np.zeros(1))
        assert np.allclose(gz0, z0 - z1)
        assert np.allclose(gz1, z1 - z0)

    def test_pair_grads_match_finite_differences(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            d, pair, coeffs = random_instance(rng)

            def recon_z0(z0):
                return transport_objective(
                    d, LatentPair(z0, pair.z1), coeffs).reconstruction

            def recon_z1(z1):
                return transport_objective(
                    d, LatentPair(pair.z0, z1), coeffs).reconstruction

            gz0, gz1 = pair_grads(d, pair, coeffs)
            assert rel_err(gz0, central_diff_grad(recon_z0, pair.z0)) <= 1e-5
            assert rel_err(gz1, central_diff_grad(recon_z1, pair.z1)) <= 1e-5

    def test_randomized_gradient_battery(self):
        # 100 joint instances across all three analytic gradients.
        rng = np.random.default_rng(15)
        for _ in range(100):
            d, pair, coeffs = random_instance(rng, gamma=0.03, zeta=0.02)

            def obj_c(c):
                return transport_objective(d, pair, c).total

            assert rel_err(objective_grad_c(d, pair, coeffs),
                           central_diff_grad(obj_c, coeffs)) <= 1e-5


class TestInferCoefficients:
    def test_identity_pair_prefers_zero(self):
        d = rotation_dictionary(zeta=0.01, gamma=0.1)
        z = np.array([0.8, -0.6])
        opts = InferenceOptions(max_iters=400, grad_tol=1e-12, rng_seed=2)
        coeffs, value = infer_coefficients(d, LatentPair(z, z), opts)
        assert np.max(np.abs(coeffs)) <= 1e-6
        regularizer_only = transport_objective(d, LatentPair(z, z),
                                               np.zeros(1)).total
        assert value == pytest.approx(regularizer_only, abs=1e-8)

    def test_quarter_turn_recovered(self):
        d = rotation_dictionary()
        pair = LatentPair(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        opts = InferenceOptions(max_iters=300, grad_tol=1e-12, rng_seed=3)
        coeffs, value = infer_coefficients(d, pair, opts)
        # Oracle: dense 1-D grid over [-pi, pi].
        def objective(c):
            return transport_objective(d, pair, c).total
        _, oracle_val = grid_search_1d(objective, -np.pi, np.pi)
        assert abs(coeffs[0] - np.pi / 2) <= 1e-4
        assert value <= oracle_val + 1e-6

    def test_beats_grid_oracle_on_random_2d(self):
        rng = np.random.default_rng(17)
        opts = InferenceOptions(max_iters=300, grad_tol=1e-10,
                                num_restarts=4, rng_seed=5)
        for _ in range(5):
            psi = rng.normal(0.0, 0.6, size=(2, 2, 2))
            d = OperatorDictionary(psi=psi, zeta=0.01)
            pair = LatentPair(rng.normal(size=2), rng.normal(size=2))

            def objective(c):
                return transport_objective(d, pair, c).total

            _, oracle_val = grid_search_2d(objective, -2.0, 2.0, num=41)
            _, value = infer_coefficients(d, pair, opts)
            assert value <= oracle_val + 1e-3

    def test_monotone_acceptance(self):
        rng = np.random.default_rng(19)
        for seed in range(20):
            d, pair, _ = random_instance(rng, gamma=0.05, zeta=0.03)
            opts = InferenceOptions(max_iters=40, grad_tol=1e-8,
                                    rng_seed=seed)
            init_rng = np.random.default_rng(seed)
            c0 = init_rng.uniform(0.0, 1.0, d.num_ops)
            start_value = transport_objective(d, pair, c0).total
            _, value = infer_coefficients(d, pair, opts)
            assert value <= start_value + 1e-12

    def test_overflow_raises_numerical_error(self):
        psi = np.full((1, 2, 2), 500.0)
        d = OperatorDictionary(psi=psi)
        pair = LatentPair(np.array([1.0, 1.0]), np.array([0.0, 1.0]))
        opts = InferenceOptions(max_iters=10, rng_seed=0)
        with pytest.raises(NumericalError):
            infer_coefficients(d, pair, opts)


class TestManifoldOffset:
    def test_orbit_point_is_reachable(self):
        d = rotation_dictionary(zeta=1e-4)
        z0 = np.array([1.0, 0.0])
        z1 = mat_expm(0.9 * ROTATION) @ z0
        opts = InferenceOptions(max_iters=300, grad_tol=1e-12,
                                num_restarts=4, rng_seed=7)
        assert manifold_offset(d, z0, z1, opts) <= 1e-6

    def test_radial_target_leaves_squared_norm_gap(self):
        # A rotation can align directions but not change the radius, so
        # the best transport of z0 toward 2 z0 leaves offset ||z0||^2.
        d = rotation_dictionary()
        rng = np.random.default_rng(21)
        z0 = rng.normal(size=2)
        opts = InferenceOptions(max_iters=400, grad_tol=1e-12,
                                num_restarts=4, rng_seed=9)
        offset = manifold_offset(d, z0, 2.0 * z0, opts)
        assert offset == pytest.approx(float(z0 @ z0), abs=1e-4)

    def test_self_offset_is_zero_without_sparsity(self):
        d = rotation_dictionary(zeta=0.0)
        z = np.array([0.4, 1.3])
        opts = InferenceOptions(max_iters=200, grad_tol=1e-14,
                                num_restarts=2, rng_seed=11)
        assert manifold_offset(d, z, z, opts) <= 1e-10

    def test_grid_pattern_matches_oracle(self):
        # Offsets from an inner-circle reference: small on the same
        # circle, large elsewhere, and matching a grid-search oracle.
        d = rotation_dictionary(zeta=1e-4)
        reference = np.array([1.0, 0.0])
        opts = InferenceOptions(max_iters=300, grad_tol=1e-10,
                                num_restarts=4, rng_seed=13)
        targets = {
            "same_circle": mat_expm(2.2 * ROTATION) @ reference,
            "outer_circle": 2.0 * (mat_expm(0.8 * ROTATION) @ reference),
            "inner_point": 0.5 * reference,
        }
        for name, target in targets.items():
            offset = manifold_offset(d, reference, target, opts)

            def objective(c):
                diff = target - mat_expm(c[0] * ROTATION) @ reference
                return float(diff @ diff)

            _, oracle = grid_search_1d(objective, -np.pi, np.pi, num=20001)
            assert offset <= oracle + 1e-3
            if name == "same_circle":
                assert offset <= 1e-4
            else:
                assert offset >= 0.2


class TestTransportPath:
    def test_t_zero_returns_start(self):
        d = rotation_dictionary()
        z0 = np.array([2.0, -1.0])
        path = transport_path(d, np.array([0.7]), z0, [0.0])
        assert np.array_equal(path[0], z0)

    def test_full_period_closes(self):
        d = rotation_dictionary()
        z0 = np.array([1.0, 0.5])
        c = np.array([0.8])
        period = 2.0 * np.pi / 0.8
        path = transport_path(d, c, z0, np.linspace(0.0, period, 9))
        assert np.linalg.norm(path[-1] - z0) <= 1e-6

    def test_composition_law(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            d, _, coeffs = random_instance(rng, d=3, num_ops=2)
            # Keep the generator norm moderate.
            a = generator_from_coeffs(d, coeffs)
            scale = min(1.0, 3.0 / max(np.linalg.norm(a), 1e-9))
            coeffs = coeffs * scale
            z0 = rng.normal(size=3)
            ta, tb = rng.uniform(0.0, 1.5, size=2)
            two_leg = transport_path(
                d, coeffs, transport_path(d, coeffs, z0, [ta])[0], [tb])[0]
            direct = transport_path(d, coeffs, z0, [ta + tb])[0]
            assert np.linalg.norm(two_leg - direct) <= 1e-8

    def test_empty_grid_rejected(self):
        d = rotation_dictionary()
        with pytest.raises(PreconditionError):
            transport_path(d, np.array([1.0]), np.array([1.0, 0.0]), [])

    def test_decreasing_grid_rejected(self):
        d = rotation_dictionary()
        with pytest.raises(DomainError):
            transport_path(d, np.array([1.0]), np.array([1.0, 0.0]),
                           [0.0, 1.0, 0.5])


def constant_pair_batches(pairs, batch_size):
    def generator():
        while True:
            yield pairs[:batch_size]
    return generator()


class TestTrainOperators:
    def test_degenerate_stream_decays_geometrically(self):
        lr, gamma = 0.5, 0.01
        d = random_dictionary(2, 3, gamma=gamma, zeta=0.05, rng_seed=29)
        z = np.array([0.9, -0.4])
        pairs = [LatentPair(z, z), LatentPair(0.5 * z, 0.5 * z)]
        opts = InferenceOptions(max_iters=400, grad_tol=1e-13, rng_seed=1)
        steps = 5
        trained, history = train_operators(
            d, constant_pair_batches(pairs, 2), steps, lr, opts)
        factor = 1.0 - lr * gamma
        for step in range(steps):
            ratios = history[step + 1] / history[step]
            assert np.max(np.abs(ratios - factor)) <= 1e-10

    def test_learns_rotation_and_prunes_noise(self):
        rng = np.random.default_rng(31)
        pairs = []
        for _ in range(200):
            theta = rng.uniform(0.0, 2.0 * np.pi)
            z0 = np.array([np.cos(theta), np.sin(theta)])
            z1 = mat_expm(0.2 * ROTATION) @ z0
            pairs.append(LatentPair(z0, z1))

        def batches():
            step = 0
            while True:
                sel = [pairs[(step * 4 + i) % len(pairs)] for i in range(4)]
                step += 1
                yield sel

        d = random_dictionary(2, 2, gamma=0.03, zeta=1e-3, rng_seed=33)
        opts = InferenceOptions(max_iters=30, grad_tol=1e-5, rng_seed=3)
        trained, history = train_operators(d, batches(), 150, 0.5, opts)
        mags = trained.magnitudes()
        assert history.shape == (151, 2)
        # One operator absorbs the rotation, the other falls below the
        # 70%-of-max pruning cut.
        survivors = prune(trained, 0.7)
        assert survivors.num_ops == 1
        assert np.min(mags) < 0.7 * np.max(mags)
        # The surviving operator's orbit from a data point must close
        # and stay circular.
        psi = survivors.psi[0]
        eigs = np.linalg.eigvals(psi)
        omega = float(np.max(np.abs(eigs.imag)))
        assert omega > 0
        period = 2.0 * np.pi / omega
        z0 = np.array([1.0, 0.0])
        path = transport_path(survivors, np.array([1.0]), z0,
                              np.linspace(0.0, period, 37))
        endpoint_err = np.linalg.norm(path[-1] - z0) / np.linalg.norm(z0)
        assert endpoint_err <= 0.05
        radii = np.linalg.norm(path, axis=1)
        assert (radii.max() - radii.min()) / radii.max() <= 0.05

    def test_exhausted_stream_raises(self):
        d = random_dictionary(2, 2, rng_seed=35)
        z = np.array([1.0, 0.0])
        batches = iter([[LatentPair(z, z)]])
        with pytest.raises(PreconditionError):
            train_operators(d, batches, 5, 0.1)

    def test_invalid_lr_rejected(self):
        d = random_dictionary(2, 2, rng_seed=37)
        with pytest.raises(DomainError):
            train_operators(d, iter([]), 1, 0.0)


class TestPrune:
    def dictionary_with_magnitudes(self, mags):
        psi = np.stack([m * np.eye(2) / np.sqrt(2.0) for m in mags])
        return OperatorDictionary(psi=psi)

    def test_keeps_only_dominant(self):
        d = self.dictionary_with_magnitudes([1.0, 0.1, 0.05, 0.02])
        kept = prune(d, 0.7)
        assert kept.num_ops == 1
        assert np.allclose(kept.magnitudes(), [1.0])

    def test_equal_magnitudes_all_survive(self):
        d = self.dictionary_with_magnitudes([0.4, 0.4, 0.4])
        assert prune(d, 0.7).num_ops == 3

    def test_idempotent(self):
        rng = np.random.default_rng(39)
        psi = rng.normal(size=(6, 3, 3)) * rng.uniform(0.1, 2.0, (6, 1, 1))
        d = OperatorDictionary(psi=psi)
        once = prune(d, 0.7)
        twice = prune(once, 0.7)
        assert np.array_equal(once.psi, twice.psi)

    def test_threshold_arithmetic_small_scale(self):
        # Max magnitude 0.0703 at fraction 0.7 puts the cutoff at 0.0492.
        d = self.dictionary_with_magnitudes([0.0703, 0.03, 0.02, 0.01])
        assert prune_threshold(d, 0.7) == pytest.approx(0.0492, abs=1e-4)
        assert prune(d, 0.7).num_ops == 1

    def test_threshold_arithmetic_large_scale(self):
        # Max magnitude 3.508 at fraction 0.7 puts the cutoff at 2.4556.
        mags = [3.508] + [1.0] * 9
        d = self.dictionary_with_magnitudes(mags)
        assert prune_threshold(d, 0.7) == pytest.approx(2.4556, abs=1e-4)
        assert prune(d, 0.7).num_ops == 1

    def test_invalid_fraction(self):
        d = self.dictionary_with_magnitudes([1.0])
        with pytest.raises(DomainError):
            prune(d, 0.0)
        with pytest.raises(DomainError):
            prune(d, 1.5)


class TestDictionaryCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        d = random_dictionary(3, 4, gamma=0.01, zeta=0.5, rng_seed=41)
        path = tmp_path / "dict.json"
        save_dictionary(d, path)
        loaded = load_dictionary(path)
        assert np.array_equal(loaded.psi, d.psi)
        assert loaded.gamma == d.gamma and loaded.zeta == d.zeta

    def test_pruned_dictionary_roundtrips(self, tmp_path):
        d = random_dictionary(2, 5, rng_seed=43)
        pruned = prune(d, 0.99)
        assert pruned.num_ops < 5
        path = tmp_path / "dict.json"
        save_dictionary(pruned, path)
        assert load_dictionary(path).num_ops == pruned.num_ops

    def test_corrupt_json_rejected(self, tmp_path):
        path = tmp_path / "dict.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(FormatError):
            load_dictionary(path)

    def test_unknown_version_rejected(self, tmp_path):
        d = random_dictionary(2, 2, rng_seed=45)
        path = tmp_path / "dict.json"
        save_dictionary(d, path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        doc["version"] = 99
        path.write_text(json.dumps(doc), encoding="utf-8")
        with pytest.raises(FormatError):
            load_dictionary(path)

    def test_inconsistent_shapes_rejected(self, tmp_path):
        d = random_dictionary(2, 2, rng_seed=47)
        path = tmp_path / "dict.json"
        save_dictionary(d, path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        doc["psi"][0] = doc["psi"][0][:-1]
        path.write_text(json.dumps(doc), encoding="utf-8")
        with pytest.raises(ConsistencyError):
            load_dictionary(path)
