import numpy as np
import pytest
import torch

from mose_pipeline.data_io import save_frame, save_mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def double():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def make_dataset(root, videos):
    """``videos``: name -> list of (frame, mask or None)."""
    for name, pairs in videos.items():
        for t, (frame, mask) in enumerate(pairs):
            save_frame(frame, root / "JPEGImages" / name / f"{t:05d}.jpg")
            if mask is not None:
                save_mask(mask, root / "Annotations" / name / f"{t:05d}.png")
    return root


def fd_relative_error(fn, inputs, eps=1e-6):
    """Relative error between autograd and central differences of ``sum(fn * w)``.

    A fixed random projection ``w`` turns the output into a scalar so every
    output element contributes to the check.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    gen = torch.Generator().manual_seed(7)
    w = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    (out * w).sum().backward()
    errs = []
    for k, x in enumerate(inputs):
        analytic = x.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = x.detach().reshape(-1)
        others = [y.detach() for y in inputs]
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            with torch.no_grad():
                up = (fn(*others[:k], flat.reshape(x.shape), *others[k + 1:]) * w).sum()
                flat[i] = orig - eps
                down = (fn(*others[:k], flat.reshape(x.shape), *others[k + 1:]) * w).sum()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * eps)
        errs.append(((analytic - numeric).norm() / numeric.norm().clamp_min(1e-30)).item())
    return max(errs)
