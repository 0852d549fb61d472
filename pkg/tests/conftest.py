import numpy as np
import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture(autouse=True)
def _seed_everything():
    np.random.seed(0)
    torch.manual_seed(0)


def box_iou_reference(a, b) -> float:
    """Scalar box IoU, written independently of the library kernels."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def brute_force_nms(items, scores, iou_fn, threshold):
    """O(n^2) greedy reference: descending score, lower index wins ties."""
    order = sorted(range(len(items)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        ok = True
        for k in keep:
            if iou_fn(items[i], items[k]) > threshold:
                ok = False
                break
        if ok:
            keep.append(i)
    return keep


def finite_difference_grads(module, loss_fn, eps=1e-5):
    """Central finite differences of loss_fn() w.r.t. every parameter of a
    float64 module. Returns {name: grad array}."""
    grads = {}
    for name, param in module.named_parameters():
        flat = param.detach().view(-1)
        g = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                hi = float(loss_fn())
                flat[i] = orig - eps
                lo = float(loss_fn())
                flat[i] = orig
            g[i] = (hi - lo) / (2 * eps)
        grads[name] = g.view(param.shape)
    return grads


def max_relative_gradient_error(module, loss_fn, eps=1e-5, floor=1e-6):
    """Compare autograd gradients of loss_fn against central differences;
    returns the worst relative error over all parameter elements."""
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    fd = finite_difference_grads(module, loss_fn, eps)
    worst = 0.0
    for name, param in module.named_parameters():
        analytic = param.grad if param.grad is not None \
            else torch.zeros_like(param)
        diff = (analytic - fd[name]).abs()
        scale = torch.maximum(analytic.abs(), fd[name].abs()).clamp_min(floor)
        worst = max(worst, float((diff / scale).max()))
    return worst
