"""Shared oracles for the test suite."""

import numpy as np
import torch

from promptus.model import PromptedUSNet
from promptus.prompts import PromptSet, encode_prompt_set


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def randomize_projections(model: PromptedUSNet, seed: int = 0, scale: float = 0.1) -> None:
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.startswith("projection."):
                param.copy_(torch.randn(param.shape, generator=generator, dtype=torch.float64).to(param.dtype) * scale)


def copy_shared_weights(src: PromptedUSNet, dst: PromptedUSNet) -> None:
    """Load every non-projection parameter of ``src`` into ``dst``."""
    state = {key: value for key, value in src.state_dict().items() if not key.startswith("projection.")}
    missing, unexpected = dst.load_state_dict(state, strict=False)
    assert not unexpected
    assert all(key.startswith("projection.") for key in missing)


def central_difference(loss_fn, param: torch.Tensor, indices, step: float = 1e-6) -> np.ndarray:
    """Numerical d(loss)/d(param[idx]) for each flat index, by (f(x+h) - f(x-h)) / 2h."""
    flat = param.data.view(-1)
    out = []
    for idx in indices:
        orig = flat[idx].item()
        flat[idx] = orig + step
        fp = loss_fn().item()
        flat[idx] = orig - step
        fm = loss_fn().item()
        flat[idx] = orig
        out.append((fp - fm) / (2 * step))
    return np.array(out)


def relative_error(got, expected) -> float:
    got, expected = np.asarray(got, dtype=np.float64), np.asarray(expected, dtype=np.float64)
    denom = max(np.linalg.norm(got), np.linalg.norm(expected), 1e-30)
    return float(np.linalg.norm(got - expected) / denom)


def mixed_prompts(task: str) -> list[PromptSet]:
    return [
        PromptSet("tumor", "breast", task, "whole"),
        PromptSet("organ", "kidney", task, "local"),
    ]


def projection_gradient_errors(model: PromptedUSNet, task: str, seed: int = 0,
                               weight_samples: int = 16, step: float = 1e-6) -> dict[str, float]:
    """Relative error between autograd and central differences for every projection tensor.

    Works in float64.  Bias tensors are checked entry by entry; weight tensors on a
    random subset of entries (drawn from both active and inactive prompt rows) plus
    one random full-tensor direction.
    """
    from promptus.training import cross_entropy_loss, segmentation_loss

    model = model.double().eval()
    randomize_projections(model, seed)
    generator = torch.Generator().manual_seed(seed)
    image = torch.rand(2, 1, model.config.image_size, model.config.image_size, generator=generator, dtype=torch.float64)
    prompts = mixed_prompts(task)
    branch = "seg" if task == "segmentation" else "cls"
    if branch == "seg":
        target = (torch.rand(2, model.config.image_size, model.config.image_size, generator=generator) > 0.5).long()
    else:
        target = torch.tensor([0, 1])

    def loss_fn():
        out = model(image, prompts)
        if branch == "seg":
            return segmentation_loss(out.seg_logits, target)
        return cross_entropy_loss(out.cls_logits, target)

    model.zero_grad()
    loss_fn().backward()

    active = sorted({int(bit) for prompt in prompts for bit in np.flatnonzero(encode_prompt_set(prompt))})
    inactive = [bit for bit in range(15) if bit not in active]
    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for name, param in model.named_parameters():
            if not name.startswith(f"projection.{branch}."):
                continue
            analytic = param.grad.detach().view(-1).numpy().copy()
            if name.endswith("bias"):
                idx = list(range(param.numel()))
            else:
                cols = param.shape[1]
                rows = list(rng.choice(active, weight_samples * 3 // 4)) + list(rng.choice(inactive, weight_samples // 4))
                idx = [int(row) * cols + int(rng.integers(cols)) for row in rows]
            numeric = central_difference(loss_fn, param, idx, step)
            vec_a, vec_n = list(analytic[idx]), list(numeric)
            if name.endswith("weight"):
                direction = torch.randn(param.shape, generator=generator, dtype=torch.float64)
                param.add_(step * direction)
                fp = loss_fn().item()
                param.sub_(2 * step * direction)
                fm = loss_fn().item()
                param.add_(step * direction)
                vec_a.append(float((param.grad * direction).sum()))
                vec_n.append((fp - fm) / (2 * step))
            errors[name] = relative_error(vec_a, vec_n)
    return errors

