import torch


def randomize(module, seed, scale=0.5):
    """Overwrite every parameter with seeded noise (incl. zero-initialised ones)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def rand_map(seed, *shape):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def np64(t):
    return t.detach().double().numpy()
