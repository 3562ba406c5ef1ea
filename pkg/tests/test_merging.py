import numpy as np
import pytest

from trustmerge.errors import (
    EmptyList,
    EmptyUnlabeledSet,
    IncompatibleShapes,
    TrimOutOfRange,
)
from trustmerge.gradients import GradientEstimate, zero_shot_abs_gradient
from trustmerge.merging import (
    AdaConfig,
    MergeConfig,
    ada_coefficient_gradient,
    ada_tatr,
    save_merge_result,
    task_arithmetic,
    tatr_merge,
    ties_merge,
    ties_phi,
    ties_tatr,
    weight_average,
)
from trustmerge.mlp import LabeledBatch, entropy_loss, init_params, MlpSpec
from trustmerge.params import Checkpoint, ew_combine, load_checkpoint
from trustmerge.task_vectors import TaskVector


def ck(values):
    return Checkpoint([("x", np.asarray(values, dtype=np.float64))])


def zs_grads(tvs):
    return [zero_shot_abs_gradient(tv) for tv in tvs]


def random_merge_inputs(seed, n=12, k=3):
    rng = np.random.default_rng(seed)
    pre = ck(rng.normal(size=n))
    tvs = [TaskVector(i, ck(rng.normal(size=n))) for i in range(k)]
    grads = [
        GradientEstimate(i, ck(np.abs(rng.normal(size=n))), "exemplar", 4)
        for i in range(k)
    ]
    return pre, tvs, grads


class TestWeightAverage:
    def test_hand_value(self):
        avg = weight_average([ck([1.0, 2.0]), ck([3.0, 6.0])])
        assert np.array_equal(avg["x"], [2.0, 4.0])

    def test_empty(self):
        with pytest.raises(EmptyList):
            weight_average([])

    def test_incompatible(self):
        with pytest.raises(IncompatibleShapes):
            weight_average([ck([1.0]), ck([1.0, 2.0])])


class TestTaskArithmetic:
    def test_hand_value(self):
        pre = ck([1.0, 1.0])
        tvs = [TaskVector(0, ck([1.0, 0.0])), TaskVector(1, ck([0.0, 0.0]))]
        result = task_arithmetic(pre, tvs, lam=0.3)
        assert np.array_equal(result.merged["x"], [1.3, 1.0])
        assert result.coefficients == [0.3, 0.3]
        assert result.provenance["method"] == "task_arithmetic"

    def test_no_tasks(self):
        with pytest.raises(EmptyList):
            task_arithmetic(ck([1.0]), [], 0.3)


class TestTatr:
    def test_tau_zero_bitwise_equals_task_arithmetic(self):
        for seed in range(10):
            pre, tvs, grads = random_merge_inputs(seed)
            plain = task_arithmetic(pre, tvs, 0.3)
            masked = tatr_merge(pre, tvs, grads, 0.3, 0.0)
            assert masked.merged == plain.merged
            for n, v in masked.merged:
                assert v.tobytes() == plain.merged[n].tobytes()

    def test_excluded_coordinate_keeps_pretrained_value(self):
        pre = ck([1.0, 2.0, 3.0, 4.0])
        tvs = [TaskVector(0, ck([1.0, 1.0, 1.0, 1.0])),
               TaskVector(1, ck([1.0, 1.0, 1.0, 1.0]))]
        grads = [GradientEstimate(i, ck([9.0, 0.1, 0.1, 0.1]), "exemplar", 1)
                 for i in range(2)]
        result = tatr_merge(pre, tvs, grads, 0.5, 0.25)
        assert result.merged["x"][0] == 1.0  # highest sensitivity: untouched
        np.testing.assert_allclose(result.merged["x"][1:], [3.0, 4.0, 5.0])
        assert result.mask_used.excluded_count == 1

    def test_provenance_records_gradient_source(self):
        pre, tvs, _ = random_merge_inputs(3)
        result = tatr_merge(pre, tvs, zs_grads(tvs), 0.3, 0.01)
        assert result.provenance["grad_source"] == "zero_shot"


class TestTies:
    def test_phi_hand_example(self):
        tvs = [TaskVector(0, ck([2.0, 1.0])), TaskVector(1, ck([-2.0, 0.5]))]
        aligned, elected = ties_phi(tvs, trim_keep=0.5)
        # each task keeps only its largest-|value| coordinate
        assert np.array_equal(aligned[0].delta["x"], [2.0, 0.0])
        # summed trimmed values are 0 at both coords: elected sign is +1,
        # so task 1's -2 disagrees and is zeroed
        assert np.array_equal(elected["x"], [1.0, 1.0])
        assert np.array_equal(aligned[1].delta["x"], [0.0, 0.0])

    def test_merge_hand_example(self):
        pre = ck([10.0, 20.0])
        tvs = [TaskVector(0, ck([2.0, 1.0])), TaskVector(1, ck([-2.0, 0.5]))]
        result = ties_merge(pre, tvs, lam=0.5, trim_keep=0.5)
        # disjoint mean: coord 0 -> mean of [2] = 2; coord 1 -> no survivors -> 0
        assert np.array_equal(result.merged["x"], [11.0, 20.0])

    def test_elected_sign_majority(self):
        tvs = [
            TaskVector(0, ck([3.0, -1.0])),
            TaskVector(1, ck([-1.0, -2.0])),
            TaskVector(2, ck([-1.0, 5.0])),
        ]
        _, elected = ties_phi(tvs, trim_keep=1.0)
        # sums: [1, 2] -> both positive
        assert np.array_equal(elected["x"], [1.0, 1.0])

    def test_disjoint_mean_averages_survivors(self):
        pre = ck([0.0])
        tvs = [TaskVector(0, ck([2.0])), TaskVector(1, ck([4.0])), TaskVector(2, ck([-1.0]))]
        result = ties_merge(pre, tvs, lam=1.0, trim_keep=1.0)
        # elected +1; survivors 2 and 4; mean 3
        assert result.merged["x"][0] == 3.0

    def test_trim_out_of_range(self):
        tvs = [TaskVector(0, ck([1.0]))]
        for keep in (0.0, 1.5, -0.1):
            with pytest.raises(TrimOutOfRange):
                ties_phi(tvs, keep)

    def test_ties_tatr_tau_zero_bitwise_equals_ties(self):
        for seed in range(10):
            pre, tvs, grads = random_merge_inputs(seed + 100)
            plain = ties_merge(pre, tvs, 0.3, 0.4)
            masked = ties_tatr(pre, tvs, grads, 0.3, 0.0, 0.4)
            for n, v in masked.merged:
                assert v.tobytes() == plain.merged[n].tobytes()

    def test_ties_tatr_mask_source_flag(self):
        pre, tvs, grads = random_merge_inputs(7)
        a = ties_tatr(pre, tvs, grads, 0.3, 0.25, 0.4, mask_from_trimmed=False)
        b = ties_tatr(pre, tvs, grads, 0.3, 0.25, 0.4, mask_from_trimmed=True)
        assert a.provenance["mask_from_trimmed"] == "False"
        assert b.provenance["mask_from_trimmed"] == "True"


class TestAdaTatr:
    def _setup(self, seed=0):
        spec = MlpSpec((2, 6, 3))
        rng = np.random.default_rng(seed)
        pre = init_params(spec, seed=seed)
        tvs = [
            TaskVector(i, Checkpoint((n, 0.2 * rng.normal(size=v.shape)) for n, v in pre))
            for i in range(2)
        ]
        pools = [
            LabeledBatch(rng.normal(size=(10, 2)), np.zeros(10, dtype=int))
            for _ in range(2)
        ]
        return pre, tvs, pools

    def test_zero_steps_bitwise_equals_tatr(self):
        pre, tvs, pools = self._setup()
        grads = zs_grads(tvs)
        ada = ada_tatr(pre, tvs, grads, 0.05, pools, AdaConfig(steps=0, init_lambda=0.3))
        plain = tatr_merge(pre, tvs, grads, 0.3, 0.05)
        for n, v in ada.merged:
            assert v.tobytes() == plain.merged[n].tobytes()

    def test_coefficient_gradient_matches_finite_differences(self):
        pre, tvs, pools = self._setup(1)
        masked = [tv.delta for tv in tvs]
        coeffs = np.array([0.3, 0.5])

        def total_entropy(c):
            from trustmerge.merging import _assemble
            merged = _assemble(pre, masked, c)
            return sum(entropy_loss(merged, b)[0] for b in pools)

        _, analytic = ada_coefficient_gradient(pre, masked, coeffs, pools)
        step = 1e-5
        for k in range(2):
            up, down = coeffs.copy(), coeffs.copy()
            up[k] += step
            down[k] -= step
            numeric = (total_entropy(up) - total_entropy(down)) / (2 * step)
            assert abs(analytic[k] - numeric) / max(abs(numeric), 1e-12) < 1e-5

    def test_descent_reduces_entropy(self):
        pre, tvs, pools = self._setup(2)
        grads = zs_grads(tvs)
        cfg = AdaConfig(steps=25, learning_rate=0.05, init_lambda=0.3)
        result = ada_tatr(pre, tvs, grads, 0.0, pools, cfg)
        start = sum(
            entropy_loss(task_arithmetic(pre, tvs, 0.3).merged, b)[0] for b in pools
        )
        end = sum(entropy_loss(result.merged, b)[0] for b in pools)
        assert end < start
        assert len(result.coefficients) == 2

    def test_empty_pool_rejected(self):
        pre, tvs, _ = self._setup(3)
        with pytest.raises(EmptyUnlabeledSet):
            ada_tatr(pre, tvs, zs_grads(tvs), 0.0, [], AdaConfig())


class TestMergeConfig:
    def test_unknown_method(self):
        with pytest.raises(ValueError):
            MergeConfig(method="soup")

    def test_lambda_must_be_positive(self):
        with pytest.raises(ValueError):
            MergeConfig(lam=0.0)
        with pytest.raises(ValueError):
            MergeConfig(lam=float("nan"))


class TestSaveMergeResult:
    def test_files_and_provenance(self, tmp_path):
        pre, tvs, grads = random_merge_inputs(5)
        result = tatr_merge(pre, tvs, grads, 0.3, 0.25)
        out = tmp_path / "merge"
        save_merge_result(result, out)
        assert load_checkpoint(out / "merged.tmrg") == result.merged
        assert load_checkpoint(out / "mask.tmrg") == result.mask_used.mask
        prov = dict(
            line.split("=", 1) for line in (out / "provenance.txt").read_text().splitlines()
        )
        assert prov["method"] == "tatr"
        assert prov["tau"] == "0.25"
        assert int(prov["excluded_count"]) == result.mask_used.excluded_count
        assert float(prov["epsilon"]) == result.mask_used.epsilon

    def test_no_mask_file_for_plain_merge(self, tmp_path):
        pre, tvs, _ = random_merge_inputs(6)
        result = task_arithmetic(pre, tvs, 0.3)
        out = tmp_path / "ta"
        save_merge_result(result, out)
        assert not (out / "mask.tmrg").exists()
