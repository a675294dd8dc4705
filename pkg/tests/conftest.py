import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_codec_config():
    from uidsc.codec import CodecConfig

    return CodecConfig(
        stage_channels=(4, 8, 4),
        downsample_factors=(2, 2, 2),
        first_kernel_size=3,
    )


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """A small deterministic shape corpus shared across tests."""
    from uidsc.data import synth_generate

    root = tmp_path_factory.mktemp("synth")
    manifests = synth_generate(12, 32, seed=7, out_dir=root)
    return root, manifests


def fd_gradient(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        fp = float(f(x).detach())
        flat[i] = orig - eps
        fm = float(f(x).detach())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_err(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> float:
    """Elementwise |a-b| / max(|a|, |b|, floor), maximized."""
    a = a.detach().double()
    b = b.detach().double()
    denom = torch.maximum(a.abs(), b.abs()).clamp_min(floor)
    return float(((a - b).abs() / denom).max())


def autograd_input_gradient(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    return x.grad.detach().clone()


def check_gradient(f, x: torch.Tensor, tol: float = 1e-3, eps: float = 1e-6) -> float:
    """Compare autograd against central differences; returns the max rel err."""
    err = max_rel_err(autograd_input_gradient(f, x), fd_gradient(f, x, eps=eps))
    assert err < tol, f"gradient mismatch: max rel err {err:.3e} >= {tol}"
    return err


def images_allclose(a: np.ndarray, b: np.ndarray, atol: float = 0.0) -> bool:
    return np.allclose(a, b, rtol=0.0, atol=atol)
