"""Acceptance suite: one test per criterion, printed as a PASS line each.

Run with ``pytest tests/test_acceptance.py -v -s``.  The training-based
criteria share session-scoped reference runs; expect several minutes on
one core.  All thresholds are frozen here, calibrated once against the
reference runs and never loosened at test time.
"""

import struct
import time

import numpy as np
import pytest

from nxmprune.admm import (
    ADMMSchedule,
    augmented_loss,
    dual_step,
    finalize,
    init_admm,
    penalty_term,
    run_admm_finetune,
    sparsity_step,
)
from nxmprune.autodiff import (
    Adam,
    Tensor,
    add,
    cross_entropy_loss,
    gelu,
    layer_norm,
    matmul,
    mean_over,
    mse_loss,
    mul,
    relu,
    reshape,
    softmax,
    squared_distance,
    sum_all,
    transpose,
    parameters_state,
)
from nxmprune.baselines import MagnitudeProjector, asp_prune, dense_finetune, masked_finetune
from nxmprune.codec import MAGIC, compress, decompress, to_bytes
from nxmprune.models import ModelConfig, build_model, build_policy, load_state
from nxmprune.nxm import SparsityPattern, check_compliance, extract_mask, project_nxm
from nxmprune.tasks import TaskSpec, evaluate, generate_task, pretrain_dense, pretrain_spec

from oracles import assert_close_to_fd, brute_force_projection, dual_accumulation, fd_gradient

P42 = SparsityPattern(4, 2)

# Frozen reference configuration (criteria 6, 8, 9).
REFERENCE_TASK = TaskSpec(train_samples=20_000, val_samples=1_000, seed=0, input_shift=0.6)
REFERENCE_MODEL = ModelConfig(blocks=2, hidden=32, heads=2, feature_dim=16, seq_len=8)
REFERENCE_LR = 5e-4
REFERENCE_EPOCHS = 6
REFERENCE_RHO = 1e-2

# Frozen low-resource configuration (criterion 7).
LOW_RESOURCE_TASK = TaskSpec(train_samples=2_500, val_samples=1_000, seed=0, input_shift=1.5,
                             label_noise=0.05, teacher_blocks=2, teacher_hidden=32)
LOW_RESOURCE_LR = 1e-3
LOW_RESOURCE_RHO = 3e-2
LOW_RESOURCE_EPOCHS = 30
LOW_RESOURCE_STEPS_PER_ITERATION = 78


def _report(number: int, text: str) -> None:
    print(f"\n[PASS] criterion {number}: {text}")


def _fresh_model(checkpoint):
    model = build_model(REFERENCE_MODEL, seed=0)
    load_state(model, checkpoint)
    return model


@pytest.fixture(scope="session")
def reference_bundle():
    """Pretrain + dense fine-tune + ADMM reference run, shared by criteria 5, 6, 9."""
    start = time.perf_counter()
    pre_model, pre_info = pretrain_dense(pretrain_spec(REFERENCE_TASK, 20_000), REFERENCE_MODEL,
                                         epochs=4, seed=0, lr=1e-3, batch_size=32)
    checkpoint = parameters_state(pre_model.params)
    data = generate_task(REFERENCE_TASK)

    dense_model = _fresh_model(checkpoint)
    dense_finetune(dense_model, data, Adam(dense_model.params, lr=REFERENCE_LR),
                   epochs=REFERENCE_EPOCHS, batch_size=32, seed=0)
    dense_val = evaluate(dense_model, data.x_val, data.y_val)

    admm_model = _fresh_model(checkpoint)
    policy = build_policy(admm_model)
    state = init_admm(admm_model, policy, P42, REFERENCE_RHO)
    schedule = ADMMSchedule(total_epochs=REFERENCE_EPOCHS, steps_per_iteration=80, min_iterations=10)
    result = run_admm_finetune(admm_model, state, schedule, data,
                               Adam(admm_model.params, lr=REFERENCE_LR), batch_size=32, seed=0)
    finalize(admm_model, state)
    finalized_val = evaluate(admm_model, data.x_val, data.y_val)
    return {
        "pretrain_info": pre_info,
        "checkpoint": checkpoint,
        "policy": policy,
        "state": state,
        "model": admm_model,
        "result": result,
        "dense_val": dense_val,
        "finalized_val": finalized_val,
        "elapsed": time.perf_counter() - start,
    }


@pytest.fixture(scope="session")
def low_resource_outcomes():
    """Finalized ADMM vs ASP validation losses across 10 fine-tune seeds."""
    start = time.perf_counter()
    pre_model, _ = pretrain_dense(pretrain_spec(LOW_RESOURCE_TASK, 20_000), REFERENCE_MODEL,
                                  epochs=8, seed=0, lr=1e-3, batch_size=32)
    checkpoint = parameters_state(pre_model.params)
    data = generate_task(LOW_RESOURCE_TASK)
    outcomes = []
    for seed in range(10):
        admm_model = _fresh_model(checkpoint)
        state = init_admm(admm_model, build_policy(admm_model), P42, LOW_RESOURCE_RHO)
        schedule = ADMMSchedule(total_epochs=LOW_RESOURCE_EPOCHS,
                                steps_per_iteration=LOW_RESOURCE_STEPS_PER_ITERATION,
                                min_iterations=10)
        run_admm_finetune(admm_model, state, schedule, data,
                          Adam(admm_model.params, lr=LOW_RESOURCE_LR), batch_size=32, seed=seed)
        finalize(admm_model, state)
        admm_val = evaluate(admm_model, data.x_val, data.y_val)

        asp_model = _fresh_model(checkpoint)
        frozen = asp_prune(asp_model, build_policy(asp_model), P42)
        masked_finetune(asp_model, frozen, data, Adam(asp_model.params, lr=LOW_RESOURCE_LR),
                        epochs=LOW_RESOURCE_EPOCHS, batch_size=32, seed=seed)
        asp_val = evaluate(asp_model, data.x_val, data.y_val)
        outcomes.append((seed, admm_val, asp_val))
    return {"outcomes": outcomes, "elapsed": time.perf_counter() - start}


class TestCriterion1:
    def test_projection_optimality_exhaustive(self):
        """project output == brute-force Euclidean projection, bitwise, 4:2 and 8:4."""
        start = time.perf_counter()
        for pattern in (SparsityPattern(4, 2), SparsityPattern(8, 4)):
            rng = np.random.default_rng(pattern.n * 100 + pattern.m)
            for trial in range(1000):
                w = rng.standard_normal((2, 8)) * rng.choice([0.01, 1.0, 100.0])
                if trial % 10 == 0:
                    w[0, :4] = w[0, 0]  # exercise magnitude ties
                projected = project_nxm(w, pattern)
                brute, supports = brute_force_projection(w, pattern.n, pattern.m)
                assert projected.tobytes() == brute.tobytes()
                mask = extract_mask(w, pattern).reshape(-1, pattern.n)
                for g, support in enumerate(supports):
                    assert tuple(np.flatnonzero(mask[g])) == support
        elapsed = time.perf_counter() - start
        assert elapsed < 10.0
        _report(1, f"projection equals exhaustive search, 1000 tensors x (4:2, 8:4), {elapsed:.1f}s")


class TestCriterion2:
    N_CONFIGS = 10  # x >=10 probed elements per config >= 100 probes per primitive

    def _probe(self, build, arrays):
        """FD-check every element of every input array (one probe per element)."""
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        build(*tensors).backward()
        for idx, (t, a) in enumerate(zip(tensors, arrays)):
            def f(v, idx=idx):
                trial = [Tensor(x) for x in arrays]
                trial[idx] = Tensor(v)
                return build(*trial).item()

            assert_close_to_fd(t.grad, fd_gradient(f, a))

    def test_all_primitives_match_finite_differences(self):
        start = time.perf_counter()
        for c in range(self.N_CONFIGS):
            rng = np.random.default_rng(1000 + c)
            # Direction constants drawn once, so FD re-evaluations see a fixed function.
            d2 = rng.standard_normal((3, 4))
            d3 = rng.standard_normal((2, 3, 4))
            d26 = rng.standard_normal((2, 6))
            d24 = rng.standard_normal((2, 4))
            labels = rng.integers(4, size=5)
            away_from_kink = rng.uniform(0.05, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))

            self._probe(lambda a, b: sum_all(mul(add(a, b), Tensor(d3))),
                        [rng.standard_normal((2, 3, 4)), rng.standard_normal(4)])  # broadcast add
            self._probe(lambda a, b: sum_all(mul(a, b)),
                        [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))])
            self._probe(lambda a, b: mse_loss(matmul(a, b), np.zeros((3, 5))),
                        [rng.standard_normal((3, 4)), rng.standard_normal((4, 5))])
            self._probe(lambda a, b: sum_all(matmul(a, b)),
                        [rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 3, 2))])  # batched
            self._probe(lambda a: sum_all(mul(reshape(transpose(a, (1, 0)), (2, 6)), Tensor(d26))),
                        [rng.standard_normal((3, 4))])
            self._probe(lambda a: sum_all(mul(mean_over(a, 1), Tensor(d24))),
                        [d3.copy()])
            self._probe(lambda a: sum_all(mul(relu(a), Tensor(d2))),
                        [away_from_kink])
            self._probe(lambda a: sum_all(mul(gelu(a), Tensor(d2))),
                        [rng.standard_normal((3, 4))])
            self._probe(lambda a: sum_all(mul(softmax(a), Tensor(d2))),
                        [rng.standard_normal((3, 4))])
            self._probe(lambda x, g, o: sum_all(mul(layer_norm(x, g, o), Tensor(d2))),
                        [rng.standard_normal((3, 4)), rng.standard_normal(4), rng.standard_normal(4)])
            self._probe(lambda a: mse_loss(a, d2), [rng.standard_normal((3, 4))])
            self._probe(lambda a: cross_entropy_loss(a, labels), [rng.standard_normal((5, 4))])
            self._probe(lambda a: mul(squared_distance(a, d2), Tensor(0.77)),
                        [rng.standard_normal((3, 4))])
        elapsed = time.perf_counter() - start
        assert elapsed < 30.0
        _report(2, f"{self.N_CONFIGS} configs x >=10 elements per primitive, rel err < 1e-4, {elapsed:.1f}s")

    def test_penalty_gradient_matches_finite_differences(self):
        """The quadratic coupling term's gradient, probed through the augmented loss."""
        from test_admm import TinyLinear, tiny_policy

        for c in range(self.N_CONFIGS):
            rng = np.random.default_rng(2000 + c)
            model = TinyLinear(seed=3000 + c)
            state = init_admm(model, tiny_policy(), P42, rho=float(rng.uniform(1e-3, 1e-1)))
            state.u["hidden0.weight"] = rng.standard_normal((4, 8))
            pen = penalty_term(model, state)
            pen.backward()
            w0 = model.params["hidden0.weight"].data.copy()
            target = state.z["hidden0.weight"] - state.u["hidden0.weight"]
            fd = fd_gradient(lambda v: state.rho / 2.0 * float(((v - target) ** 2).sum()), w0)
            assert_close_to_fd(model.params["hidden0.weight"].grad, fd)
        _report(2, "penalty gradient matches finite differences over random states")


class TestCriterion3:
    def test_rho_zero_trajectory_bit_identical_to_vanilla(self):
        """50 steps of the ADMM loop at rho=0 equal plain Adam fine-tuning exactly."""
        task = TaskSpec(train_samples=200, val_samples=40, seed=7, seq_len=3, feature_dim=4,
                        teacher_hidden=8, teacher_blocks=1)
        cfg = ModelConfig(blocks=1, hidden=8, heads=2, feature_dim=4, seq_len=3)
        data = generate_task(task)

        def snapshots(run):
            frames = []
            run(lambda step, m: frames.append({n: p.data.copy() for n, p in m.params.items()}))
            return frames

        model_a = build_model(cfg, seed=7)
        state = init_admm(model_a, build_policy(model_a), P42, rho=0.0)
        schedule = ADMMSchedule(total_epochs=1, steps_per_iteration=10, min_iterations=1,
                                prune_eval_each_epoch=False)
        frames_admm = snapshots(lambda cb: run_admm_finetune(
            model_a, state, schedule, data, Adam(model_a.params, lr=1e-3),
            batch_size=4, seed=7, on_step=cb))

        model_b = build_model(cfg, seed=7)
        frames_dense = snapshots(lambda cb: dense_finetune(
            model_b, data, Adam(model_b.params, lr=1e-3), epochs=1, batch_size=4, seed=7,
            on_step=cb))

        assert len(frames_admm) == len(frames_dense) == 50
        for step, (fa, fd_frame) in enumerate(zip(frames_admm, frames_dense)):
            for name in fa:
                assert np.array_equal(fa[name], fd_frame[name]), f"step {step}, tensor {name}"
        _report(3, "rho=0 run bit-identical to vanilla Adam over 50 steps, all tensors")


class TestCriterion4:
    def test_dual_recurrence_cumulative_sum(self):
        """After 5 scripted iterations, U equals the explicit ordered sum of (W - Z)."""
        task = TaskSpec(train_samples=64, val_samples=16, seed=9, seq_len=3, feature_dim=4,
                        teacher_hidden=8, teacher_blocks=1)
        cfg = ModelConfig(blocks=1, hidden=8, heads=2, feature_dim=4, seq_len=3)
        data = generate_task(task)
        model = build_model(cfg, seed=9)
        policy = build_policy(model)
        state = init_admm(model, policy, P42, rho=1e-2)
        adam = Adam(model.params, lr=1e-3)
        names = state.constrained_names
        w_hist = {n: [] for n in names}
        z_hist = {n: [] for n in names}
        step = 0
        for iteration in range(5):
            for _ in range(4):
                adam.zero_grad()
                total, _ = augmented_loss(model, state, data.x_train[step % 16 * 4:][:4],
                                          data.y_train[step % 16 * 4:][:4])
                total.backward()
                adam.step()
                step += 1
            sparsity_step(model, state)
            for n in names:
                w_hist[n].append(model.params[n].data.copy())
                z_hist[n].append(state.z[n].copy())
            dual_step(model, state)
        assert state.k == 5
        for n in names:
            expected = dual_accumulation(np.zeros_like(state.u[n]), w_hist[n], z_hist[n])
            assert state.u[n].tobytes() == expected.tobytes(), n
        _report(4, "dual variable equals ordered cumulative sum over 5 iterations, bitwise")


class TestCriterion5:
    def test_compliance_and_packed_format(self, reference_bundle):
        model = reference_bundle["model"]
        policy = reference_bundle["policy"]
        names = policy.constrained_names
        compliant = [check_compliance(model.params[n].data, P42) for n in names]
        assert all(compliant) and len(compliant) == 12

        for n in names:
            w = model.params[n].data
            assert decompress(compress(w, P42)).tobytes() == w.tobytes()

        # 32x32 4:2 tensor: bytes must match an independent encoding of the layout.
        w = model.params["block0.attn.q.weight"].data
        assert w.shape == (32, 32)
        blob = to_bytes(compress(w, P42))
        expected = bytearray()
        expected += MAGIC
        expected += struct.pack("<III", 4, 2, 2)
        expected += struct.pack("<QQ", 32, 32)
        for group in w.reshape(-1, 4):
            positions = sorted(np.argsort(-np.abs(group), kind="stable")[:2])
            expected += struct.pack("<dd", group[positions[0]], group[positions[1]])
            expected += bytes([positions[0] | (positions[1] << 2)])
        assert len(blob) == 36 + 256 * 17 == 4388
        assert blob == bytes(expected)
        _report(5, "100% layer compliance, bit-exact round trip, 4388-byte 32x32 layout match")


class TestReferenceBaseline:
    """Frozen dense-pretrain reference values for the acceptance configuration.

    Recorded once from the reference run; asserted loosely enough to
    survive BLAS differences across machines, while same-machine reruns
    are bit-identical (see the determinism tests).
    """

    def test_pretrain_baseline_matches_frozen_record(self, reference_bundle):
        info = reference_bundle["pretrain_info"]
        assert info["steps"] == 2500
        assert info["final_train_loss"] == pytest.approx(0.011659692600538858, rel=1e-3)
        assert info["val_loss"] == pytest.approx(0.014841005420502545, rel=1e-3)


class TestCriterion6:
    def test_reference_convergence_and_accuracy(self, reference_bundle):
        result = reference_bundle["result"]
        final_rel = result.residuals[-1].max_relative
        ratio = reference_bundle["finalized_val"] / reference_bundle["dense_val"]
        elapsed = reference_bundle["elapsed"]
        assert result.residuals[-1].iteration >= 10
        assert final_rel < 5e-2
        assert reference_bundle["finalized_val"] <= 1.15 * reference_bundle["dense_val"]
        assert elapsed < 600.0
        _report(6, f"final max relative residual {final_rel:.4f} < 0.05, "
                   f"finalized/dense val ratio {ratio:.3f} <= 1.15, {elapsed:.0f}s")


class TestCriterion7:
    def test_admm_beats_asp_on_low_resource_majority(self, low_resource_outcomes):
        outcomes = low_resource_outcomes["outcomes"]
        wins = sum(1 for _, admm_val, asp_val in outcomes if admm_val < asp_val)
        elapsed = low_resource_outcomes["elapsed"]
        detail = " ".join(f"s{s}:{'W' if a < b else 'L'}" for s, a, b in outcomes)
        assert wins >= 7, detail
        assert elapsed < 1800.0
        _report(7, f"ADMM < ASP in {wins}/10 seeds ({detail}), {elapsed:.0f}s")


class TestCriterion8:
    RHOS = (1e-3, 3e-3, 1e-2)

    def test_similarity_nondecreasing_in_rho_per_seed(self):
        start = time.perf_counter()
        pre_model, _ = pretrain_dense(pretrain_spec(REFERENCE_TASK, 20_000), REFERENCE_MODEL,
                                      epochs=4, seed=0, lr=1e-3, batch_size=32)
        checkpoint = parameters_state(pre_model.params)
        data = generate_task(REFERENCE_TASK)

        def mean_similarity(rho, seed):
            model = _fresh_model(checkpoint)
            state = init_admm(model, build_policy(model), P42, rho)
            schedule = ADMMSchedule(total_epochs=2, steps_per_iteration=80, min_iterations=10)
            result = run_admm_finetune(model, state, schedule, data,
                                       Adam(model.params, lr=REFERENCE_LR), batch_size=32, seed=seed)
            return float(np.mean(result.similarities))

        monotone = 0
        rows = []
        for seed in range(10):
            sims = [mean_similarity(rho, seed) for rho in self.RHOS]
            ok = sims[0] <= sims[1] <= sims[2]
            monotone += ok
            rows.append(f"s{seed}:{'+' if ok else '-'}")
        elapsed = time.perf_counter() - start
        assert monotone >= 8, rows
        _report(8, f"mean similarity non-decreasing in rho for {monotone}/10 seeds "
                   f"({' '.join(rows)}), {elapsed:.0f}s")


class TestCriterion9:
    def test_magnitude_decay_monotone_in_presence_count(self, reference_bundle):
        from nxmprune.analytics import decay_report

        result = reference_bundle["result"]
        histogram = decay_report(reference_bundle["checkpoint"],
                                 parameters_state(reference_bundle["model"].params),
                                 result.mask_history,
                                 expected_iterations=reference_bundle["state"].k)
        rows = histogram.coarse(bins=5)
        assert len(rows) >= 3
        means = [mean for _, _, _, mean in rows]
        assert all(a <= b for a, b in zip(means, means[1:])), rows
        always = rows[-1]
        assert always[0] == histogram.total_iterations  # separate always-present bucket
        assert always[3] == max(means)
        pretty = ", ".join(f"[{lo}-{hi}]={mean:.3f}" for lo, hi, _, mean in rows)
        _report(9, f"decay ratios non-increasing as presence count drops: {pretty}")


class TestCriterion10:
    def test_unstructured_distance_dominates_grouped(self):
        projector = MagnitudeProjector(keep_fraction=0.5)
        rng = np.random.default_rng(77)
        for _ in range(1000):
            w = rng.standard_normal((4, 16))
            d_unstructured = float(((w - projector.project(w)) ** 2).sum())
            d_grouped = float(((w - project_nxm(w, P42)) ** 2).sum())
            assert d_unstructured <= d_grouped
        _report(10, "unstructured 50% projection distance <= grouped distance, 1000 layers, exact")
