"""Supernet numerics: probabilities, sampling, forward, and gradients."""

import math

import numpy as np
import pytest
import torch

from sslnas.contrastive import ProjectionHeadSpec
from sslnas.errors import DomainError, StructureError
from sslnas.space import (
    KIND_ZERO,
    MBCONV_CANDIDATES,
    ZERO_OP,
    arch_from_choices,
    build_default_space,
    count_params,
    enumerate_cells,
)
from sslnas.supernet import (
    GateSample,
    MixedEdge,
    arch_gradient,
    derive_architecture,
    forward_subnet,
    init_supernet,
    path_probabilities,
    sample_gates,
)

from conftest import micro_space, rng_for_test

TINY_PROJECTION = ProjectionHeadSpec(hidden_dim=16, out_dim=8)


def tiny_supernet(seed=0, width=0.5, **kwargs):
    space = build_default_space(width)
    return init_supernet(space, seed, projection=TINY_PROJECTION, **kwargs)


class TestInit:
    def test_default_space_has_21_edges(self):
        state = tiny_supernet()
        assert len(state.edges) == 21
        sizes = [len(e.candidates) for e in state.edges]
        assert sizes.count(7) == 15  # non-initial cells carry the zero op
        assert sizes.count(6) == 6

    def test_uniform_probabilities_at_init(self):
        state = tiny_supernet()
        for edge in state.edges:
            probs = path_probabilities(edge)
            np.testing.assert_allclose(probs, np.full(len(probs), 1.0 / len(probs)), atol=1e-12)

    def test_same_seed_bit_identical(self):
        a = tiny_supernet(seed=9)
        b = tiny_supernet(seed=9)
        sd_a, sd_b = a.net.state_dict(), b.net.state_dict()
        assert sd_a.keys() == sd_b.keys()
        for key in sd_a:
            assert torch.equal(sd_a[key], sd_b[key]), key

    def test_different_seeds_differ(self):
        a = tiny_supernet(seed=1)
        b = tiny_supernet(seed=2)
        stem_a = a.net.stem[0].weight
        stem_b = b.net.stem[0].weight
        assert not torch.equal(stem_a, stem_b)


class TestPathProbabilities:
    def test_zero_logits_uniform(self):
        edge = MixedEdge(0, MBCONV_CANDIDATES[:3], torch.nn.Parameter(torch.zeros(3, dtype=torch.float64)))
        np.testing.assert_allclose(path_probabilities(edge), [1 / 3] * 3, atol=1e-12)

    def test_log_two_closed_form(self):
        alpha = torch.nn.Parameter(torch.tensor([math.log(2.0), 0.0], dtype=torch.float64))
        edge = MixedEdge(0, MBCONV_CANDIDATES[:2], alpha)
        np.testing.assert_allclose(path_probabilities(edge), [2 / 3, 1 / 3], atol=1e-12)

    def test_single_candidate(self):
        edge = MixedEdge(0, MBCONV_CANDIDATES[:1], torch.nn.Parameter(torch.zeros(1, dtype=torch.float64)))
        np.testing.assert_allclose(path_probabilities(edge), [1.0])

    def test_non_finite_alpha_rejected(self):
        alpha = torch.nn.Parameter(torch.tensor([float("nan"), 0.0], dtype=torch.float64))
        edge = MixedEdge(0, MBCONV_CANDIDATES[:2], alpha)
        with pytest.raises(DomainError):
            path_probabilities(edge)

    def test_extreme_logits_stay_normalized(self):
        alpha = torch.nn.Parameter(torch.tensor([1e4, 0.0, -1e4], dtype=torch.float64))
        edge = MixedEdge(0, MBCONV_CANDIDATES[:3], alpha)
        probs = path_probabilities(edge)
        assert abs(probs.sum() - 1.0) < 1e-12
        assert probs[0] == pytest.approx(1.0)


class TestSampleGates:
    def test_dominant_logit_always_chosen(self):
        state = tiny_supernet()
        for edge in state.edges:
            edge.alpha.data[2] = 1e6
        gates = sample_gates(state, rng_for_test("gates-dom"))
        assert all(c == 2 for c in gates.chosen)

    def test_uniform_frequencies_within_3_sigma(self):
        state = init_supernet(micro_space(stages=((2, 8, False),)), 0, projection=TINY_PROJECTION)
        edge_count = len(state.edges[1].candidates)
        draws = 10_000
        rng = rng_for_test("gates-freq")
        counts = np.zeros(edge_count)
        for _ in range(draws):
            counts[sample_gates(state, rng).chosen[1]] += 1
        p = 1.0 / edge_count
        sigma = math.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) < 3 * sigma)

    def test_same_stream_same_sample(self):
        state = tiny_supernet()
        a = sample_gates(state, rng_for_test("gates-det"))
        b = sample_gates(state, rng_for_test("gates-det"))
        assert a.chosen == b.chosen

    def test_probs_rows_validated(self):
        with pytest.raises(StructureError):
            GateSample(chosen=(0,), probs=(np.array([0.7, 0.7]),))
        with pytest.raises(StructureError):
            GateSample(chosen=(5,), probs=(np.array([0.5, 0.5]),))


class TestForwardSubnet:
    def test_zero_cells_reduce_to_mandatory_network(self):
        state = tiny_supernet(seed=4)
        choices = []
        for edge in state.edges:
            zero_idx = next((i for i, op in enumerate(edge.candidates) if op.kind == KIND_ZERO), None)
            choices.append(zero_idx if zero_idx is not None else 0)
        gates = GateSample(chosen=tuple(choices), probs=tuple(path_probabilities(e) for e in state.edges))
        state.net.eval()
        batch = torch.from_numpy(rng_for_test("fwd-zero").uniform(size=(2, 3, 32, 32)))
        with torch.no_grad():
            full = forward_subnet(state, gates, batch)
            # mandatory-cell network: run only the stage-initial cells
            x = state.net.stem(batch)
            for cell, choice in zip(state.net.cells, choices):
                if cell.candidates[choice].kind != KIND_ZERO:
                    x = cell(x, choice)
            reduced = torch.nn.functional.adaptive_avg_pool2d(x, 1).flatten(1)
        assert torch.equal(full, reduced)

    def test_eval_mode_deterministic(self):
        state = tiny_supernet(seed=5)
        state.net.eval()
        gates = sample_gates(state, rng_for_test("fwd-det"))
        batch = torch.from_numpy(rng_for_test("fwd-det-batch").uniform(size=(2, 3, 32, 32)))
        with torch.no_grad():
            assert torch.equal(forward_subnet(state, gates, batch), forward_subnet(state, gates, batch))

    def test_feature_dim_tracks_width(self):
        for width, expected in ((0.5, 160), (1.0, 320), (1.75, 560)):
            state = tiny_supernet(width=width)
            state.net.eval()
            gates = sample_gates(state, rng_for_test("fwd-dim"))
            batch = torch.zeros(1, 3, 32, 32, dtype=torch.float64)
            with torch.no_grad():
                features = forward_subnet(state, gates, batch)
            assert features.shape == (1, expected)

    def test_shape_errors(self):
        state = tiny_supernet()
        gates = sample_gates(state, rng_for_test("fwd-err"))
        with pytest.raises(StructureError):
            forward_subnet(state, gates, torch.zeros(2, 4, 32, 32, dtype=torch.float64))
        with pytest.raises(StructureError):
            forward_subnet(state, gates, torch.zeros(2, 3, 8, 8, dtype=torch.float64))
        with pytest.raises(StructureError):
            forward_subnet(state, gates, torch.zeros(3, 32, 32, dtype=torch.float64))

    def test_zero_cell_is_bitwise_identity(self):
        state = init_supernet(micro_space(stages=((2, 8, False),)), 3, projection=TINY_PROJECTION)
        cell = state.net.cells[1]
        zero_idx = next(i for i, op in enumerate(cell.candidates) if op.kind == KIND_ZERO)
        x = torch.from_numpy(rng_for_test("cell-zero").normal(size=(2, 8, 8, 8)))
        assert cell(x, zero_idx) is x


class TestArchGradient:
    def test_constant_sensitivities_give_zero(self):
        probs = np.array([0.2, 0.3, 0.5])
        grads = arch_gradient(probs, np.full(3, 1.7))
        np.testing.assert_allclose(grads, 0.0, atol=1e-15)

    def test_components_sum_to_zero(self):
        rng = rng_for_test("archgrad-sum")
        for _ in range(200):
            k = int(rng.integers(1, 9))
            logits = rng.normal(size=k)
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            grads = arch_gradient(probs, rng.normal(size=k))
            assert abs(grads.sum()) < 1e-12

    def test_single_candidate_gradient_zero(self):
        np.testing.assert_allclose(arch_gradient(np.array([1.0]), np.array([3.3])), [0.0], atol=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(DomainError):
            arch_gradient(np.array([0.5, 0.5]), np.array([1.0]))

    def test_matches_finite_differences_of_exact_expectation(self):
        """Two-candidate micro-model; the expected loss over both gates is exact."""
        space = micro_space(stages=((2, 8, False),))
        state = init_supernet(
            space, 11, projection=TINY_PROJECTION,
            candidates_fn=lambda sp, i: [MBCONV_CANDIDATES[0], MBCONV_CANDIDATES[3]],
        )
        state.net.eval()
        batch = torch.from_numpy(rng_for_test("archgrad-fd").uniform(size=(2, 3, 16, 16)))

        def path_losses() -> np.ndarray:
            values = []
            for choice in (0, 1):
                gates = GateSample(
                    chosen=(0, choice), probs=tuple(path_probabilities(e) for e in state.edges)
                )
                with torch.no_grad():
                    features = forward_subnet(state, gates, batch)
                values.append(float((features**2).mean()))
            return np.asarray(values)

        losses = path_losses()
        alpha = np.array([0.3, -0.2])

        def expected_loss(a: np.ndarray) -> float:
            shifted = a - a.max()
            p = np.exp(shifted) / np.exp(shifted).sum()
            return float((p * losses).sum())

        p = np.exp(alpha - alpha.max())
        p /= p.sum()
        analytic = arch_gradient(p, losses)
        h = 1e-6
        for k in range(2):
            up, down = alpha.copy(), alpha.copy()
            up[k] += h
            down[k] -= h
            numeric = (expected_loss(up) - expected_loss(down)) / (2 * h)
            assert abs(analytic[k] - numeric) / max(abs(numeric), 1e-12) < 1e-3


class TestWeightGradients:
    def test_matches_central_differences_on_micro_model(self):
        """Micro-model under 500 params, 64-bit, rel err < 1e-3."""
        space = micro_space(stem=4, stages=((1, 8, False),), floor=4)
        state = init_supernet(
            space, 2, projection=TINY_PROJECTION, candidates_fn=lambda sp, i: [MBCONV_CANDIDATES[0]]
        )
        net = state.net
        names = _param_names(net)
        weights = [p for p in net.weight_parameters() if "projection" not in names[id(p)]]
        assert sum(p.numel() for p in weights) <= 500
        gates = GateSample(chosen=(0,), probs=tuple(path_probabilities(e) for e in state.edges))
        batch = torch.from_numpy(rng_for_test("weight-fd").uniform(size=(4, 3, 16, 16)))
        target = torch.from_numpy(rng_for_test("weight-fd-target").normal(size=(4, 8)))

        net.train()

        def loss_fn() -> torch.Tensor:
            features = forward_subnet(state, gates, batch)
            return ((features - target) ** 2).mean()

        loss = loss_fn()
        grads = torch.autograd.grad(loss, weights)

        h = 1e-6
        checked = 0
        rng = rng_for_test("weight-fd-pick")
        for p, g in zip(weights, grads):
            flat = p.data.view(-1)
            picks = rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False)
            for idx in picks:
                original = float(flat[idx])
                flat[idx] = original + h
                with torch.no_grad():
                    up = float(loss_fn())
                flat[idx] = original - h
                with torch.no_grad():
                    down = float(loss_fn())
                flat[idx] = original
                numeric = (up - down) / (2 * h)
                analytic = float(g.view(-1)[idx])
                assert abs(analytic - numeric) / max(abs(numeric), 1e-8) < 1e-3
                checked += 1
        assert checked >= 20


def _param_names(net) -> dict:
    return {id(p): name for name, p in net.named_parameters()}


class TestDeriveArchitecture:
    def test_zero_alpha_picks_lowest_index(self):
        state = tiny_supernet()
        arch = derive_architecture(state)
        assert all(cell.op == MBCONV_CANDIDATES[0] for cell in arch.cells)

    def test_alpha_shift_invariance(self):
        state = tiny_supernet(seed=6)
        rng = rng_for_test("derive-shift")
        for edge in state.edges:
            edge.alpha.data = torch.from_numpy(rng.normal(size=len(edge.candidates)))
        before = derive_architecture(state)
        for edge in state.edges:
            edge.alpha.data += 123.456
        assert derive_architecture(state) == before

    def test_heaviest_op_everywhere(self):
        """Pushing alpha toward MB6 7x7 yields the all-MB6-7x7 topology."""
        state = tiny_supernet(seed=7)
        target = MBCONV_CANDIDATES[5]
        assert target.kernel == 7 and target.expansion == 6
        for edge in state.edges:
            edge.alpha.data[5] = 10.0
        arch = derive_architecture(state)
        assert all(cell.op == target for cell in arch.cells)

    def test_derived_params_inside_envelope(self):
        space = build_default_space(0.5)
        state = init_supernet(space, 8, projection=TINY_PROJECTION)
        rng = rng_for_test("derive-envelope")
        for edge in state.edges:
            edge.alpha.data = torch.from_numpy(rng.normal(size=len(edge.candidates)))
        derived = count_params(derive_architecture(state))

        infos = enumerate_cells(space)
        lower = count_params(
            arch_from_choices(space, [ZERO_OP if i.allows_zero else MBCONV_CANDIDATES[0] for i in infos])
        )
        upper = count_params(arch_from_choices(space, [MBCONV_CANDIDATES[5]] * len(infos)))
        assert lower <= derived <= upper

    def test_weights_not_copied(self):
        state = tiny_supernet(seed=12)
        arch = derive_architecture(state)
        from sslnas.networks import build_backbone

        fresh = build_backbone(arch)
        stem_supernet = state.net.stem[0].weight
        stem_fresh = fresh.stem[0].weight
        assert not torch.equal(stem_supernet, stem_fresh)


class TestNormalizationPrivacy:
    def test_candidate_stats_never_mix(self):
        state = init_supernet(micro_space(stages=((2, 8, False),)), 5, projection=TINY_PROJECTION)
        net = state.net
        net.train()
        before = {
            name: buf.clone()
            for name, buf in net.named_buffers()
            if "cells.1.ops" in name and "running" in name
        }
        gates = GateSample(chosen=(0, 0), probs=tuple(path_probabilities(e) for e in state.edges))
        batch = torch.from_numpy(rng_for_test("bn-priv").uniform(size=(4, 3, 16, 16)))
        for _ in range(3):
            forward_subnet(state, gates, batch)
        changed = unchanged = 0
        for name, buf in net.named_buffers():
            if name not in before:
                continue
            if name.startswith("cells.1.ops.0"):
                changed += int(not torch.equal(before[name], buf))
            else:
                assert torch.equal(before[name], buf), f"{name} leaked statistics"
                unchanged += 1
        assert changed > 0
        assert unchanged > 0
