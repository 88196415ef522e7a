"""
Analytic gradients against central finite differences, in double precision.
"""

import math

import numpy as np
import pytest
import torch

from src.models.aggregator import FeatureAggregator
from src.models.heads import DetectionHead
from src.models.scene_decomposition import SceneDecompositionModule
from src.models.tensors import FeaturePyramid
from src.schemas.config_schemas import LossConfig
from src.services.anchor_service import generate_anchors, match
from src.services.loss_service import detection_loss

pytestmark = pytest.mark.unit


STEP = 1e-4
TOLERANCE = 1e-3
SAMPLES = 200
KINK_MARGIN = 10 * STEP
SIDES = (32, 16, 8, 4, 2, 1)


def max_relative_error(module, loss_fn, samples=SAMPLES, seed=0):
    """Worst relative error between autograd and central differences over sampled parameters."""
    params = [p for p in module.parameters() if p.requires_grad]
    analytic = torch.autograd.grad(loss_fn(), params)
    coords = [(i, k) for i, p in enumerate(params) for k in range(p.numel())]
    assert len(coords) >= samples
    chosen = np.random.default_rng(seed).choice(len(coords), size=samples, replace=False)

    a_values, n_values = [], []
    with torch.no_grad():
        for c in chosen:
            i, k = coords[c]
            flat = params[i].view(-1)
            original = flat[k].item()
            flat[k] = original + STEP
            plus = loss_fn().item()
            flat[k] = original - STEP
            minus = loss_fn().item()
            flat[k] = original
            a_values.append(analytic[i].reshape(-1)[k].item())
            n_values.append((plus - minus) / (2 * STEP))

    a_values = np.array(a_values)
    n_values = np.array(n_values)
    floor = 1e-3 * np.abs(a_values).max()
    denom = np.maximum(np.maximum(np.abs(a_values), np.abs(n_values)), floor)
    return float((np.abs(a_values - n_values) / denom).max())


def random_pyramid(channels, generator):
    return FeaturePyramid.from_tensors(
        [torch.rand(1, channels, s, s, generator=generator, dtype=torch.float64) for s in SIDES]
    )


def kink_free_decomposer(width=3):
    """Eval-mode decomposer whose ReLUs each stay on one side of zero.

    Batch norm scales every conv output by 0.1 and shifts it by +2 (channels
    kept on) or -2 (last channel, kept off); the output adapter is damped so
    the illumination stays well inside (eps, 1).
    """
    torch.manual_seed(0)
    module = SceneDecompositionModule(width=width).double().eval()
    shift = torch.full((width,), 2.0, dtype=torch.float64)
    shift[-1] = -2.0
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, torch.nn.BatchNorm2d):
                layer.weight.fill_(0.1)
                layer.bias.copy_(shift)
        module.out_adapter.weight.mul_(0.1)
    image = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    return module, image


def decomposer_kink_margin(module, image):
    """Distance of the nearest ReLU input to 0 and of the illumination to its clamp bounds."""
    inputs = []
    hooks = [
        layer.register_forward_hook(lambda mod, args, out: inputs.append(args[0].detach()))
        for layer in module.modules()
        if isinstance(layer, torch.nn.ReLU)
    ]
    try:
        with torch.no_grad():
            scene = module(image, require_divisible=False)
    finally:
        for hook in hooks:
            hook.remove()
    relu = min(x.abs().min().item() for x in inputs)
    clamp = min((scene.illumination - module.eps).min().item(), (1.0 - scene.illumination).min().item())
    return min(relu, clamp)


class TestGradients:
    """Finite-difference audits of the differentiable stages."""

    def test_scene_decomposition(self):
        """Decomposer parameter gradients on a 3x32x32 input, away from every kink."""
        module, image = kink_free_decomposer()
        assert decomposer_kink_margin(module, image) > KINK_MARGIN
        generator = torch.Generator().manual_seed(1)
        w_r = torch.randn(1, 3, 32, 32, generator=generator, dtype=torch.float64)
        w_i = torch.randn(1, 3, 32, 32, generator=generator, dtype=torch.float64)

        def objective():
            scene = module(image, require_divisible=False)
            return (scene.reflectance * w_r).sum() + (scene.illumination * w_i).sum()

        assert max_relative_error(module, objective) < TOLERANCE

    def test_aggregator(self):
        """Multiplicative top-down fusion over a tiny pyramid."""
        torch.manual_seed(0)
        aggregator = FeatureAggregator([2] * 6, width=3, streams=2).double()
        generator = torch.Generator().manual_seed(2)
        pyr_i = random_pyramid(2, generator)
        pyr_r = random_pyramid(2, generator)
        weights = [torch.randn(1, 3, s, s, generator=generator, dtype=torch.float64) for s in SIDES]

        def objective():
            fused = aggregator(pyr_r, pyr_i)
            return sum((m.data * w).sum() for m, w in zip(fused, weights))

        assert max_relative_error(aggregator, objective) < TOLERANCE

    def test_detection_loss(self):
        """Focal plus smooth L1 loss through a tiny head, without mining."""
        torch.manual_seed(0)
        head = DetectionHead([3] * 6, num_classes=4).double()
        for conv in list(head.cls_convs) + list(head.reg_convs):
            torch.nn.init.normal_(conv.weight, std=0.3)
        generator = torch.Generator().manual_seed(3)
        pyramid = random_pyramid(3, generator)
        anchors = generate_anchors(128, 128)
        boxes = [torch.tensor([[10.0, 12.0, 40.0, 44.0], [70.0, 60.0, 120.0, 110.0]], dtype=torch.float64)]
        labels = [torch.tensor([1, 3])]
        matches = [match(anchors, boxes[0])]
        config = LossConfig(neg_pos_ratio=math.inf)

        def objective():
            return detection_loss(head(pyramid), matches, boxes, labels, anchors, config).total

        assert objective().item() >= 0
        assert max_relative_error(head, objective) < TOLERANCE


@pytest.mark.parametrize("ratio", [3.0, math.inf])
def test_loss_is_non_negative(ratio):
    """Focal and smooth L1 terms never sum below zero."""
    anchors = generate_anchors(128, 128)
    generator = torch.Generator().manual_seed(4)
    head = DetectionHead([3] * 6, num_classes=4).double()
    boxes = [torch.tensor([[0.0, 0.0, 30.0, 30.0]], dtype=torch.float64)]
    outputs = head(random_pyramid(3, generator))
    losses = detection_loss(outputs, [match(anchors, boxes[0])], boxes, [torch.tensor([2])], anchors,
                            LossConfig(neg_pos_ratio=ratio))
    assert losses.total.item() >= 0
