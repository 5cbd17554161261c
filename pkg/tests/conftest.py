import numpy as np
import pytest
import torch

from leop.chemdata import ToyDatasetSpec, generate_dataset
from leop.egnn import EGNNDenoiser
from leop.schedule import build_schedule

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_records():
    return generate_dataset(ToyDatasetSpec(n_complexes=8, random_seed=3))


@pytest.fixture(scope="session")
def tiny_model():
    return EGNNDenoiser(hidden=16, edge_hidden=8, n_layers=2, k=8, time_dim=8, n_rbf=8, label_dim=4, seed=1)


@pytest.fixture(scope="session")
def sched10():
    return build_schedule(T=10)


def randomize_(module, scale=0.3, seed=0):
    """Give every parameter (including zero-initialized ones) a random value."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_batch(rng, n_pocket=4, n_lig=6, n_gen=3, t=5, B=1, spread=2.0):
    """Random dense complexes; the last ``n_gen`` ligand atoms are generated."""
    from leop.chemdata import ATOM_VOCAB, BOND_VOCAB
    from leop.egnn import collate

    items = []
    for _ in range(B):
        b = np.zeros((n_lig, n_lig, BOND_VOCAB.k))
        types = rng.integers(0, BOND_VOCAB.k, size=(n_lig, n_lig))
        types = np.triu(types, 1) + np.triu(types, 1).T
        b[np.arange(n_lig)[:, None], np.arange(n_lig)[None], types] = 1.0
        items.append(dict(
            pocket_x=spread * rng.standard_normal((n_pocket, 3)),
            pocket_v=np.eye(ATOM_VOCAB.k)[rng.integers(0, ATOM_VOCAB.k - 1, n_pocket)],
            lig_x=spread * rng.standard_normal((n_lig, 3)),
            lig_v=np.eye(ATOM_VOCAB.k)[rng.integers(0, ATOM_VOCAB.k, n_lig)],
            lig_b=b,
            gen_mask=np.arange(n_lig) >= n_lig - n_gen,
            t=t,
        ))
    return collate(items)


def central_difference(f, tensor, index, h=1e-5):
    """Central finite difference of scalar ``f()`` w.r.t. ``tensor[index]`` (in place, restored)."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        up = float(f())
        tensor[index] = orig - h
        down = float(f())
        tensor[index] = orig
    return (up - down) / (2 * h)


def rel_close(a, b, rtol=1e-4, atol=1e-9):
    return abs(a - b) <= rtol * max(abs(a), abs(b)) + atol
