import textwrap

import pytest

from geometry.grid import build_grid, classify_regions
from transport.materials import materials_from_regions, uniform_materials
from helpers import TABLE_TISSUE, TABLE_VOID


@pytest.fixture
def grid10():
    return build_grid(10, 10)


@pytest.fixture
def grid20():
    return build_grid(20, 20)


@pytest.fixture
def basic10(grid10):
    return classify_regions(grid10, 'basic')


@pytest.fixture
def table_materials10(basic10):
    return materials_from_regions(basic10, TABLE_VOID, TABLE_TISSUE, 0.85)


@pytest.fixture
def thick20(grid20):
    """Optically thick, isotropically scattering medium."""
    return uniform_materials(grid20, sigma_a=0.5, sigma_s=10.0, g=0.0)


@pytest.fixture
def small_config_text(tmp_path):
    return textwrap.dedent(f"""\
        GRID:
          NX: 10
          NY: 10
        SOLVER:
          T: 0.5
        OPTIM:
          MAX_ITER: 0
          CHECKPOINT_FREQ: 0
        EXPORT:
          PROGRESS: False
        OUTPUT: '{tmp_path.as_posix()}/runs'
        """)


@pytest.fixture
def small_config_file(tmp_path, small_config_text):
    path = tmp_path / 'small.yaml'
    path.write_text(small_config_text)
    return str(path)
