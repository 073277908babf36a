import torch

TABLE_VOID = {'sigma_a': 0.001, 'sigma_s': 0.01}
TABLE_TISSUE = {'sigma_a': 0.05, 'sigma_s': 0.5}


def random_realizable(n, generator, max_flux=1.0):
    """n random states (psi0, psi1x, psi1y) with |psi1| <= max_flux * psi0."""
    psi0 = torch.rand(n, generator=generator, dtype=torch.float64) * 2.0 + 1e-3
    radius = torch.rand(n, generator=generator, dtype=torch.float64) * max_flux * psi0
    angle = torch.rand(n, generator=generator, dtype=torch.float64) * 2.0 * torch.pi
    return torch.stack([psi0, radius * torch.cos(angle), radius * torch.sin(angle)])


def gaussian_pulse(grid, width=0.2, center=(0.0, 0.0)):
    """Isotropic initial state with a Gaussian density."""
    X, Y = grid.centers()
    u = grid.zeros(3)
    u[0] = torch.exp(-((X - center[0]) ** 2 + (Y - center[1]) ** 2) / (2 * width ** 2))
    return u
