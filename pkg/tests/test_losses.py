import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from seeable.core.exceptions import DegenerateBatchError, DomainError
from seeable.models.data_models import EmbeddingBatch, PrototypeSet
from seeable.services.guidance_graph import build_grid_graph, guidance_weight
from seeable.services.losses import (
    bcr,
    compute_objective,
    guidance_loss,
    lambda_schedule,
    nt_xent,
    regression_distance,
    supcon,
    total_loss,
)
from seeable.services.prototype_geometry import make_simplex_prototypes, match_prototypes

TAU = 0.5


def random_instance(seed, n=8, dim=16, n_classes=4):
    gen = torch.Generator().manual_seed(seed)
    raw = torch.randn(n, dim, generator=gen, dtype=torch.float64)
    labels = torch.randint(0, n_classes, (n,), generator=gen)
    return raw, labels


def brute_force_bcr(z, labels, protos, tau):
    """逐项循环的参考实现"""
    z = F.normalize(z, dim=1)
    vectors = protos.as_tensor()
    n = z.shape[0]
    total = 0.0
    for i in range(n):
        others = [j for j in range(n) if j != i]
        positives = [p for p in others if labels[p] == labels[i]]
        contrast = z[others]
        supcon_part = sum(float(nt_xent(z[i], z[p], contrast, tau)) for p in positives)
        target = vectors[int(labels[i]) + protos.reserve_offset]
        proto_part = float(nt_xent(z[i], target, torch.cat([contrast, vectors]), tau))
        total += (supcon_part + proto_part) / max(len(positives), 1)
    return total


class TestNtXent:
    def test_matches_formula(self):
        a = torch.tensor([1.0, 0.0], dtype=torch.float64)
        p = torch.tensor([0.0, 1.0], dtype=torch.float64)
        contrast = torch.stack([p, -a])
        expected = -math.log(math.exp(0.0) / (math.exp(0.0) + math.exp(-1.0 / TAU)))
        assert float(nt_xent(a, p, contrast, TAU)) == pytest.approx(expected, rel=1e-12)

    def test_orthogonal_negative(self):
        a = torch.tensor([1.0, 0.0], dtype=torch.float64)
        n = torch.tensor([0.0, 1.0], dtype=torch.float64)
        value = float(nt_xent(a, a, torch.stack([a, n]), 1.0))
        assert value == pytest.approx(-math.log(math.e / (math.e + 1.0)), rel=1e-12)
        assert value == pytest.approx(0.3133, abs=5e-5)

    def test_symmetric_logits(self):
        a = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        p = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
        n = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
        assert float(nt_xent(a, p, torch.stack([p, n]), 1.0)) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_empty_contrast(self):
        a = torch.ones(3, dtype=torch.float64)
        with pytest.raises(DomainError):
            nt_xent(a, a, torch.empty(0, 3, dtype=torch.float64), TAU)

    def test_nonpositive_tau(self):
        a = torch.ones(3, dtype=torch.float64)
        with pytest.raises(DomainError):
            nt_xent(a, a, a[None], 0.0)


class TestSupcon:
    def test_degenerate_batch(self):
        raw, _ = random_instance(0, n=4)
        batch = EmbeddingBatch.from_projections(raw, [0, 1, 2, 3])
        with pytest.raises(DegenerateBatchError):
            supcon(batch, TAU)

    def test_two_identical_positives(self):
        z = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        batch = EmbeddingBatch(z=z, labels=torch.tensor([0, 0]))
        # 对比集合只有正样本本身，损失为 0
        assert float(supcon(batch, TAU)) == pytest.approx(0.0, abs=1e-12)

    def test_antipodal_classes(self):
        v = F.normalize(torch.tensor([1.0, 2.0, -0.5], dtype=torch.float64), dim=0)
        z = torch.stack([v, v, -v, -v])
        labels = torch.tensor([0, 0, 1, 1])
        expected = 0.0
        for i in range(4):
            others = [j for j in range(4) if j != i]
            positives = [p for p in others if labels[p] == labels[i]]
            expected += sum(float(nt_xent(z[i], z[p], z[others], 1.0)) for p in positives) / len(positives)
        value = float(supcon(EmbeddingBatch(z=z, labels=labels), 1.0))
        assert value == pytest.approx(expected, rel=1e-12)
        assert value == pytest.approx(4.0 * math.log(1.0 + 2.0 * math.exp(-2.0)), rel=1e-12)


class TestBcr:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, protos_16_5, seed):
        raw, labels = random_instance(seed)
        batch = EmbeddingBatch.from_projections(raw, labels)
        expected = brute_force_bcr(raw, labels, protos_16_5, TAU)
        assert float(bcr(batch, protos_16_5, TAU)) == pytest.approx(expected, rel=1e-10)

    def test_label_beyond_prototypes(self, protos_16_5):
        raw, _ = random_instance(0, n=4)
        batch = EmbeddingBatch.from_projections(raw, [0, 1, 2, 4])
        with pytest.raises(DomainError):
            bcr(batch, protos_16_5, TAU)

    def test_dimension_mismatch(self, protos_16_5):
        raw, labels = random_instance(0, dim=8)
        with pytest.raises(DomainError):
            bcr(EmbeddingBatch.from_projections(raw, labels), protos_16_5, TAU)

    def test_collapse_is_optimal(self):
        protos = make_simplex_prototypes(16, 5)
        labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3, 4, 4])
        collapsed = protos.as_tensor()[labels]
        best = float(bcr(EmbeddingBatch(z=collapsed, labels=labels), protos, 0.1))

        rng = np.random.default_rng(0)
        for _ in range(1000):
            directions = torch.as_tensor(rng.normal(size=collapsed.shape))
            directions = directions - (directions * collapsed).sum(dim=1, keepdim=True) * collapsed
            directions = F.normalize(directions, dim=1)
            angles = torch.as_tensor(rng.uniform(0.05, 0.3, size=(len(labels), 1)))
            jittered = torch.cos(angles) * collapsed + torch.sin(angles) * directions
            batch = EmbeddingBatch.from_projections(jittered, labels)
            assert float(bcr(batch, protos, 0.1)) > best


class TestGuidanceLoss:
    def setup_method(self):
        self.graph = build_grid_graph(1, 2)

    def test_zero_at_prototypes(self, protos_16_5):
        labels = torch.tensor([0, 1, 2, 3])
        z = protos_16_5.as_tensor()[labels + 1]
        loss = guidance_loss(EmbeddingBatch(z=z, labels=labels), protos_16_5, self.graph, 2)
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_matches_weighted_sum(self, protos_16_5):
        raw, labels = random_instance(3)
        batch = EmbeddingBatch.from_projections(raw, labels)
        predicted = match_prototypes(batch.z, protos_16_5, classes_only=True).tolist()
        r = regression_distance(batch, protos_16_5).tolist()
        expected = sum(
            guidance_weight(p, int(y), self.graph, 2) * ri for p, y, ri in zip(predicted, labels.tolist(), r)
        )
        assert float(guidance_loss(batch, protos_16_5, self.graph, 2)) == pytest.approx(expected, rel=1e-12)

    def test_same_position_wrong_type(self):
        protos = make_simplex_prototypes(32, 33, reserve_offset=1)
        graph = build_grid_graph(4, 4)
        vectors = protos.as_tensor()
        # 样本 0 真实类别为 (位置 0, 类型 0)，却落在 (位置 0, 类型 1) 的原型上
        z = torch.stack([vectors[1 + 1], vectors[5 + 1]])
        batch = EmbeddingBatch(z=z, labels=torch.tensor([0, 5]))
        expected = 0.25 * 33 / 32
        assert float(guidance_loss(batch, protos, graph, 2)) == pytest.approx(expected, rel=1e-12)
        assert expected == 0.2578125

    def test_label_beyond_graph(self, protos_16_5):
        graph = build_grid_graph(1, 1)
        raw, _ = random_instance(0)
        labels = [0, 1, 2, 3, 0, 1, 2, 3]
        with pytest.raises(DomainError):
            guidance_loss(EmbeddingBatch.from_projections(raw, labels), protos_16_5, graph, 2)


class TestGradients:
    """解析梯度与中心差分比较(双精度)"""

    @pytest.mark.parametrize("seed", range(20))
    def test_loss_gradients(self, protos_16_5, seed):
        raw, labels = random_instance(100 + seed)
        raw.requires_grad_(True)
        graph = build_grid_graph(1, 2)

        def make(x):
            return EmbeddingBatch.from_projections(x, labels)

        checks = [
            lambda x: supcon(make(x), TAU),
            lambda x: bcr(make(x), protos_16_5, TAU),
            lambda x: guidance_loss(make(x), protos_16_5, graph, 2),
            lambda x: total_loss(make(x), protos_16_5, graph, TAU, 0.1, 2),
        ]
        for fn in checks:
            assert torch.autograd.gradcheck(fn, (raw,), eps=1e-6, atol=1e-7, rtol=1e-4)


class TestObjective:
    def test_total_is_bcr_plus_weighted_guidance(self, protos_16_5):
        graph = build_grid_graph(1, 2)
        raw, labels = random_instance(9)
        batch = EmbeddingBatch.from_projections(raw, labels)
        parts = compute_objective(batch, protos_16_5, graph, TAU, 0.1, 2, "bcr")
        assert float(parts.total) == pytest.approx(float(parts.bcr) + 0.1 * float(parts.guidance), rel=1e-12)
        assert float(total_loss(batch, protos_16_5, graph, TAU, 0.0, 2)) == float(bcr(batch, protos_16_5, TAU))

    def test_cross_entropy_objective(self, protos_16_5):
        graph = build_grid_graph(1, 2)
        raw, labels = random_instance(4)
        batch = EmbeddingBatch.from_projections(raw, labels)
        parts = compute_objective(batch, protos_16_5, graph, TAU, 0.1, 2, "cross_entropy")
        logits = F.normalize(raw, dim=1) @ protos_16_5.as_tensor()[1:].T / TAU
        expected = F.cross_entropy(logits, labels, reduction="sum")
        assert float(parts.total) == pytest.approx(float(expected), rel=1e-10)

    def test_supcon_objective_tolerates_singletons(self, protos_16_5):
        graph = build_grid_graph(1, 2)
        raw, _ = random_instance(0, n=4)
        batch = EmbeddingBatch.from_projections(raw, [0, 1, 2, 3])
        parts = compute_objective(batch, protos_16_5, graph, TAU, 0.1, 2, "supcon")
        assert float(parts.total) == 0.0

    def test_unknown_objective(self, protos_16_5):
        raw, labels = random_instance(0)
        with pytest.raises(DomainError):
            compute_objective(
                EmbeddingBatch.from_projections(raw, labels), protos_16_5, build_grid_graph(1, 2), TAU, 0.0, 2, "mse"
            )


class TestLambdaSchedule:
    def test_ramp_endpoints(self):
        assert lambda_schedule(0, 200, 0.1) == 0.0
        assert lambda_schedule(199, 200, 0.1) == pytest.approx(0.1)
        assert lambda_schedule(100, 201, 0.1) == pytest.approx(0.05)

    def test_ramp_is_linear(self):
        values = [lambda_schedule(e, 11, 1.0) for e in range(11)]
        assert np.allclose(np.diff(values), 0.1)

    def test_modes(self):
        assert lambda_schedule(0, 10, 0.1, "constant") == 0.1
        assert lambda_schedule(9, 10, 0.1, "off") == 0.0
        assert lambda_schedule(0, 1, 0.1) == 0.0

    def test_invalid(self):
        with pytest.raises(DomainError):
            lambda_schedule(10, 10, 0.1)
        with pytest.raises(DomainError):
            lambda_schedule(0, 10, 0.1, "step")


def random_orthogonal(dim, seed):
    gen = torch.Generator().manual_seed(seed)
    q, r = torch.linalg.qr(torch.randn(dim, dim, generator=gen, dtype=torch.float64))
    return q * torch.sign(torch.diagonal(r))


class TestSymmetries:
    """批次重排与整体正交变换(嵌入与原型同时旋转)不改变损失"""

    def setup_method(self):
        self.graph = build_grid_graph(1, 2)

    def losses(self, batch, protos):
        return [
            float(supcon(batch, TAU)),
            float(bcr(batch, protos, TAU)),
            float(guidance_loss(batch, protos, self.graph, 2)),
        ]

    @pytest.mark.parametrize("seed", range(3))
    def test_permutation(self, protos_16_5, seed):
        raw, labels = random_instance(seed)
        labels[:2] = labels[0]
        order = torch.randperm(len(labels), generator=torch.Generator().manual_seed(seed))
        original = self.losses(EmbeddingBatch.from_projections(raw, labels), protos_16_5)
        permuted = self.losses(EmbeddingBatch.from_projections(raw[order], labels[order]), protos_16_5)
        assert permuted == pytest.approx(original, rel=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_orthogonal_transform(self, protos_16_5, seed):
        raw, labels = random_instance(seed)
        labels[:2] = labels[0]
        q = random_orthogonal(16, seed)
        rotated_protos = PrototypeSet(
            dim=16, count=5, vectors=protos_16_5.vectors @ q.numpy().T, reserve_offset=1
        )
        original = self.losses(EmbeddingBatch.from_projections(raw, labels), protos_16_5)
        rotated = self.losses(EmbeddingBatch.from_projections(raw @ q.T, labels), rotated_protos)
        assert rotated == pytest.approx(original, rel=1e-10)
