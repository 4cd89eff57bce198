import dataclasses
import math

import numpy as np
import pytest
import torch

from acmil.reasoner import (
    CapsuleReasoner,
    RELATIONS,
    attribution_for_room,
    build_adjacency,
    build_relation_masks,
    compute_similarity,
    relation_masks,
    relation_structure,
)
from acmil.room_data import build_capsule_grid, preprocess_room

from conftest import make_room

A, B, C, D = range(4)
USERS = ("s", "v0", "v1", "v2", "v3", "v4")


def _random_grid(rng, pre, max_capsules=12):
    """Room with 1..max_capsules nonempty cells scattered over the user x slot grid."""
    cells = [(u, k) for u in USERS for k in range(pre.num_slots)]
    rows = []
    for c in rng.choice(len(cells), size=int(rng.integers(1, max_capsules + 1)), replace=False):
        user, k = cells[int(c)]
        for _ in range(int(rng.integers(1, 3))):
            t = k * pre.slot_len_s + float(rng.uniform(1.0, pre.slot_len_s - 1.0))
            rows.append((user, t, 11 if user == "s" else 1))
    return build_capsule_grid(make_room(rows), pre)


def _stack(grids):
    """Padded (slots, users, streamer, capsule_mask) for a list of grids."""
    n = max(g.num_capsules for g in grids)
    slots = torch.zeros(len(grids), n, dtype=torch.long)
    users = torch.full((len(grids), n), -1, dtype=torch.long)
    streamer = torch.zeros(len(grids), n, dtype=torch.bool)
    mask = torch.zeros(len(grids), n, dtype=torch.bool)
    for b, grid in enumerate(grids):
        for i, (ui, k) in enumerate(grid.capsules):
            slots[b, i], users[b, i] = k, ui
            streamer[b, i] = grid.is_streamer_user(ui)
            mask[b, i] = True
    return slots, users, streamer, mask


def _loop_masks(grid):
    keys = [grid.capsule_key(i) for i in range(grid.num_capsules)]
    n = len(keys)
    out = [[[False] * n for _ in range(n)] for _ in range(4)]
    for i, (ui, ki) in enumerate(keys):
        for j, (uj, kj) in enumerate(keys):
            temporal = abs(ki - kj) <= 1
            same = ui == uj
            role = (ui == grid.streamer_id) != (uj == grid.streamer_id)
            out[0][i][j], out[1][i][j], out[2][i][j] = temporal, same, role
            out[3][i][j] = not (temporal or same or role)
    return out


def _loop_similarity(capsules):
    n = len(capsules)
    sim = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            x = sum(a * b for a, b in zip(capsules[i], capsules[j]))
            sim[i][j] = 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))
    return sim


def _loop_adjacency(sim, masks, gamma, gamma_cls):
    n = len(sim)
    logits = [[gamma_cls] * (n + 1) for _ in range(n + 1)]
    for i in range(n):
        for j in range(n):
            logits[i + 1][j + 1] = sum(gamma[z] * float(masks[z][i][j]) * sim[i][j] for z in range(4))
    out = []
    for row in logits:
        top = max(row)
        exp = [math.exp(v - top) for v in row]
        out.append([v / sum(exp) for v in exp])
    return out


@pytest.fixture
def four_capsule_grid(pre):
    # A=(streamer, 0), B=(v2, 0), C=(v2, 2), D=(v3, 3)
    room = make_room([("s", 0.0, 10), ("v2", 10.0, 1), ("v2", 250.0, 6), ("v3", 350.0, 1)])
    grid = build_capsule_grid(preprocess_room(room, pre), pre)
    assert [grid.capsule_key(i) for i in range(4)] == [("s", 0), ("v2", 0), ("v2", 2), ("v3", 3)]
    return grid


def test_temporal_mask(four_capsule_grid):
    m = build_relation_masks(four_capsule_grid)[RELATIONS.index("temporal")]
    assert m[A, B] and not m[A, C] and m[C, D]


def test_user_mask(four_capsule_grid):
    m = build_relation_masks(four_capsule_grid)[RELATIONS.index("user")]
    assert m[B, C] and not m[A, B]
    assert bool(m.diagonal().all())


def test_role_mask(four_capsule_grid):
    m = build_relation_masks(four_capsule_grid)[RELATIONS.index("role")]
    assert m[A, B] and m[A, C] and not m[B, D]
    assert not bool(m.diagonal().any())


def test_residual_mask(four_capsule_grid):
    m = build_relation_masks(four_capsule_grid)[RELATIONS.index("residual")]
    assert m[B, D] and not m[A, C]


@pytest.mark.parametrize("seed", range(4))
def test_masks_match_loop_oracle_on_random_grids(pre, seed):
    rng = np.random.default_rng(seed)
    for _ in range(25):
        grid = _random_grid(rng, pre)
        masks = build_relation_masks(grid)
        assert masks.tolist() == _loop_masks(grid)
        assert torch.equal(masks, masks.transpose(-1, -2))
        assert torch.equal(masks[3], ~(masks[0] | masks[1] | masks[2]))


def test_padded_pairs_are_masked_out():
    slots = torch.tensor([0, 0, -1])
    users = torch.tensor([0, 1, -1])
    streamer = torch.tensor([True, False, False])
    masks = relation_masks(slots, users, streamer, torch.tensor([True, True, False]))
    assert not bool(masks[:, 2, :].any()) and not bool(masks[:, :, 2].any())


def test_similarity_values():
    c = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    sim = compute_similarity(c)
    assert sim[0, 1].item() == 0.0
    assert sim[0, 2].item() == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-12)
    assert sim[0, 2].item() == pytest.approx(0.8413, abs=1e-4)
    torch.testing.assert_close(sim, sim.T)


@pytest.mark.parametrize("seed", range(4))
def test_adjacency_matches_loop_oracle_on_random_grids(pre, seed):
    rng = np.random.default_rng(100 + seed)
    for _ in range(25):
        grid = _random_grid(rng, pre)
        capsules = rng.normal(size=(grid.num_capsules, 4))
        gamma = rng.uniform(-1.0, 2.0, size=4).tolist()
        gamma_cls = float(rng.uniform(0.1, 2.0))
        structure = relation_structure(
            grid, torch.from_numpy(capsules), torch.tensor(gamma, dtype=torch.float64), gamma_cls
        )
        expected = _loop_adjacency(_loop_similarity(capsules.tolist()), _loop_masks(grid), gamma, gamma_cls)
        np.testing.assert_allclose(structure.adjacency.numpy(), np.asarray(expected), atol=1e-6)


def test_overlapping_relations_accumulate():
    # streamer capsule and a viewer capsule in the same slot: temporal and role both hold
    masks = relation_masks(torch.tensor([0, 0]), torch.tensor([0, 1]), torch.tensor([True, False]))
    gamma = torch.tensor([0.3, 0.0, 0.7, 0.0], dtype=torch.float64)
    sim = torch.full((2, 2), 2.0, dtype=torch.float64)
    weights = torch.einsum("z,zij->ij", gamma, masks.to(sim.dtype))
    assert weights[0, 1].item() == pytest.approx(1.0)
    adjacency = build_adjacency(sim, masks, gamma, 0.0)
    # row of the viewer capsule: CLS, the streamer pair (temporal + role), itself (temporal)
    row = torch.tensor([0.0, 2.0 * 1.0, 2.0 * 0.3], dtype=torch.float64)
    torch.testing.assert_close(adjacency[2], torch.softmax(row, dim=0))


def test_zero_gammas_give_uniform_capsule_rows():
    masks = relation_masks(torch.tensor([0, 1, 2]), torch.tensor([0, 1, 2]), torch.tensor([True, False, False]))
    sim = torch.randn(3, 3)
    adjacency = build_adjacency(sim, masks, torch.zeros(4), 0.0)
    torch.testing.assert_close(adjacency, torch.full((4, 4), 0.25))


def test_adjacency_is_row_stochastic_over_many_rooms(pre):
    rng = np.random.default_rng(2)
    torch.manual_seed(2)
    for _ in range(100):
        grids = [_random_grid(rng, pre) for _ in range(10)]
        slots, users, streamer, mask = _stack(grids)
        capsules = torch.randn(*mask.shape, 5, dtype=torch.float64)
        gamma = torch.randn(4, dtype=torch.float64) * 3
        masks = relation_masks(slots, users, streamer, mask)
        adjacency = build_adjacency(compute_similarity(capsules), masks, gamma, float(rng.uniform(0.1, 2.0)), mask)
        n = mask.shape[1]
        torch.testing.assert_close(adjacency.sum(dim=-1), torch.ones(10, n + 1, dtype=torch.float64), rtol=0, atol=1e-6)
        assert torch.all(adjacency >= 0)
        # padded columns carry no weight
        keys = torch.cat([torch.ones(10, 1, dtype=torch.bool), mask], dim=1)
        assert torch.all(adjacency.masked_select(~keys[:, None, :].expand_as(adjacency)) == 0)


def test_relation_structure_of_a_grid(four_capsule_grid):
    capsules = torch.randn(4, 3)
    structure = relation_structure(four_capsule_grid, capsules, torch.ones(4), 1.0)
    assert structure.adjacency.shape == (5, 5)
    assert structure.mask("user")[B, C]
    torch.testing.assert_close(structure.sim, compute_similarity(capsules))


@pytest.fixture
def reasoner(tiny_cfg):
    torch.manual_seed(0)
    return CapsuleReasoner(tiny_cfg).double().eval()


def test_single_capsule_takes_all_attribution(reasoner, tiny_cfg):
    capsules = torch.randn(1, 1, tiny_cfg.d_k, dtype=torch.float64)
    out = reasoner(capsules, torch.tensor([[3]]), torch.tensor([[0]]), torch.tensor([[True]]),
                   torch.tensor([[True]]))
    assert out.attribution.item() == pytest.approx(1.0)
    assert out.h_c.shape == (1, tiny_cfg.d_k)


def test_attribution_is_a_distribution_over_real_capsules(reasoner, tiny_cfg, pre):
    rng = np.random.default_rng(3)
    torch.manual_seed(3)
    with torch.no_grad():
        for _ in range(100):
            slots, users, streamer, mask = _stack([_random_grid(rng, pre) for _ in range(10)])
            capsules = torch.randn(*mask.shape, tiny_cfg.d_k, dtype=torch.float64)
            out = reasoner(capsules, slots, users, streamer, mask)
            torch.testing.assert_close(out.attribution.sum(dim=-1), torch.ones(10, dtype=torch.float64),
                                       rtol=0, atol=1e-6)
            assert torch.all(out.attribution >= 0)
            assert torch.all(out.attribution[~mask] == 0)
            assert out.adjacency.shape == (10, mask.shape[1] + 1, mask.shape[1] + 1)


def test_reasoner_is_permutation_equivariant(reasoner, tiny_cfg, pre):
    rng = np.random.default_rng(4)
    torch.manual_seed(4)
    with torch.no_grad():
        for _ in range(10):
            grid = _random_grid(rng, pre)
            slots, users, streamer, mask = _stack([grid])
            capsules = torch.randn(1, grid.num_capsules, tiny_cfg.d_k, dtype=torch.float64)
            base = reasoner(capsules, slots, users, streamer, mask)
            for _ in range(20):
                perm = torch.from_numpy(rng.permutation(grid.num_capsules))
                out = reasoner(capsules[:, perm], slots[:, perm], users[:, perm], streamer[:, perm], mask)
                torch.testing.assert_close(out.h_c, base.h_c, rtol=0, atol=1e-5)
                torch.testing.assert_close(out.refined, base.refined[:, perm], rtol=0, atol=1e-5)
                torch.testing.assert_close(out.attribution, base.attribution[:, perm], rtol=0, atol=1e-5)


def test_graph_bias_can_be_switched_off(tiny_cfg):
    torch.manual_seed(0)
    reasoner = CapsuleReasoner(dataclasses.replace(tiny_cfg, use_graph_bias=False)).eval()
    capsules = torch.randn(1, 3, tiny_cfg.d_k)
    out = reasoner(capsules, torch.tensor([[0, 1, 2]]), torch.tensor([[0, 1, 1]]),
                   torch.tensor([[True, False, False]]), torch.ones(1, 3, dtype=torch.bool))
    assert out.adjacency is None
    torch.testing.assert_close(out.attribution.sum(), torch.tensor(1.0))


def test_attribution_for_room_trims_padding():
    attribution = attribution_for_room([("s", 0), ("v", 1)], torch.tensor([0.75, 0.25, 0.0]))
    assert attribution.scores == [0.75, 0.25]
    assert attribution.ranked()[0] == (("s", 0), 0.75)
    assert attribution.as_records()[1] == {"user_id": "v", "slot": 1, "score": 0.25}
