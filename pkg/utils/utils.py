import os

import h5py
import numpy as np
import pandas as pd
import torch

from geometry.grid import DOMAIN, Region


def _header(ny, nx, dtype):
    xmin, xmax, ymin, ymax = DOMAIN
    return f'nx={nx},ny={ny},xmin={xmin:g},xmax={xmax:g},ymin={ymin:g},ymax={ymax:g},dtype={dtype}'


def _write_grid(values, path):
    integer = np.issubdtype(values.dtype, np.integer)
    ny, nx = values.shape
    try:
        np.savetxt(path, values, fmt='%d' if integer else '%.17g', delimiter=',',
                   header=_header(ny, nx, 'int64' if integer else 'float64'))
    except OSError as e:
        raise OSError(f"cannot write field to {path}: {e.strerror or e}") from e
    return path


def export_field(field, path):
    """Write a (ny, nx) field as CSV, rows running over y; a (2, ny, nx) field
    goes to two files suffixed _x and _y. Returns the written paths."""
    values = field.detach().cpu().numpy() if isinstance(field, torch.Tensor) else np.asarray(field)
    if values.ndim == 2:
        return [_write_grid(values, path)]
    if values.ndim == 3 and values.shape[0] == 2:
        stem, ext = os.path.splitext(path)
        return [_write_grid(values[0], f'{stem}_x{ext}'), _write_grid(values[1], f'{stem}_y{ext}')]
    raise ValueError(f"expected a (ny, nx) or (2, ny, nx) field, got shape {values.shape}")


def read_field(path):
    """Inverse of export_field for one file; returns (tensor, header dict)."""
    try:
        with open(path, 'r') as f:
            first = f.readline()
        values = np.loadtxt(path, delimiter=',', ndmin=2)
    except OSError as e:
        raise OSError(f"cannot read field from {path}: {e.strerror or e}") from e
    header = dict(item.split('=') for item in first.lstrip('# ').strip().split(','))
    if values.shape != (int(header['ny']), int(header['nx'])):
        raise ValueError(f"{path}: data shape {values.shape} does not match header ny={header['ny']}, nx={header['nx']}")
    dtype = torch.int64 if header.get('dtype') == 'int64' else torch.float64
    if dtype == torch.int64:
        values = values.astype(np.int64)
    return torch.as_tensor(values, dtype=dtype), header


def band_map(values, step, n_bands=None):
    """Integer band index floor(values / step), clipped to [0, n_bands - 1] when given."""
    bands = torch.floor(values / step).to(torch.int64).clamp_min(0)
    if n_bands is not None:
        bands = bands.clamp_max(n_bands - 1)
    return bands


def region_statistics(dose_map, regions, alpha=None, beta=None):
    """Per-region area and dose statistics; with LQ parameters (indexed by Region)
    also the mean surviving and killed fractions."""
    D = dose_map.values
    rows = []
    for region in Region:
        mask = regions.mask(region)
        row = {'region': region.name.lower(), 'area': regions.area(region), 'cells': int(mask.sum())}
        if mask.any():
            d = D[mask]
            row.update(dose_mean=float(d.mean()), dose_min=float(d.min()), dose_max=float(d.max()))
        else:
            row.update(dose_mean=float('nan'), dose_min=float('nan'), dose_max=float('nan'))
        if alpha is not None:
            a, b = alpha[int(region)], beta[int(region)]
            sf = float(torch.exp(-a * D[mask] - b * D[mask] ** 2).mean()) if mask.any() else float('nan')
            row.update(survival_mean=sf, killed=1.0 - sf)
        rows.append(row)
    return pd.DataFrame(rows)


def dump_trajectory(traj, path):
    hf = h5py.File(path, 'w')
    hf.create_dataset('times', data=traj.times.cpu().numpy())
    hf.create_dataset('snapshot_steps', data=np.asarray(traj.snapshot_steps, dtype=np.int64))
    hf.create_dataset('snapshots', data=torch.stack(traj.snapshots).cpu().numpy())
    hf.create_dataset('integral', data=traj.integral.cpu().numpy())
    hf.attrs['dt'] = traj.dt
    hf.attrs['reversed_time'] = traj.reversed_time
    hf.close()
