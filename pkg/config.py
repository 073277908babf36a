# --------------------------------------------------------
# Run configuration for the M1 dose planner
# Layout follows the yacs default-tree pattern: one _C tree,
# YAML documents merged over it (BASE first), then presets,
# then command-line KEY VALUE pairs.
# --------------------------------------------------------

import logging
import os
from ast import literal_eval

import yaml
from yacs.config import CfgNode as CN

from geometry.grid import EDGES, TARGET_CASES
from planning.optimizer import ADJOINTS, OBJECTIVES, STEP_RULES
from transport.m1_parts import BOUNDARIES
from transport.m1_solver import CFL_MAX
from transport.materials import check_hypotheses
from transport.sn_oracle import SN_ANGLES

logger = logging.getLogger(__name__)

CONTROL_MODES = ('stationary', 'time_varying')


class ConfigError(ValueError):
    def __init__(self, key, constraint):
        super().__init__(f"{key}: {constraint}")
        self.key = key
        self.constraint = constraint


_C = CN()

# Base config files
_C.BASE = ['']
# Named scenario preset applied before the document body (see configs/presets.py)
_C.PRESET = ''

# -----------------------------------------------------------------------------
# Grid settings
# -----------------------------------------------------------------------------
_C.GRID = CN()
# Cell counts over [-1,1]x[-1,1]
_C.GRID.NX = 100
_C.GRID.NY = 100
# torch device for all fields ('cpu' or 'cuda:<id>')
_C.GRID.DEVICE = 'cpu'

# -----------------------------------------------------------------------------
# Tumor / risk geometry, rectangles as [xmin, xmax, ymin, ymax]
# -----------------------------------------------------------------------------
_C.REGIONS = CN()
_C.REGIONS.CASE = 'basic'
for _case, _rects in TARGET_CASES.items():
    _C.REGIONS[_case.upper()] = CN()
    _C.REGIONS[_case.upper()].TUMOR = [list(r) for r in _rects['tumor']]
    _C.REGIONS[_case.upper()].RISK = [list(r) for r in _rects['risk']]

# -----------------------------------------------------------------------------
# Material table (1/length); the void annulus takes VOID, all else TISSUE
# -----------------------------------------------------------------------------
_C.MATERIALS = CN()
_C.MATERIALS.VOID = CN()
_C.MATERIALS.VOID.SIGMA_A = 0.001
_C.MATERIALS.VOID.SIGMA_S = 0.01
_C.MATERIALS.TISSUE = CN()
_C.MATERIALS.TISSUE.SIGMA_A = 0.05
_C.MATERIALS.TISSUE.SIGMA_S = 0.5
# Mean scattering cosine, uniform
_C.MATERIALS.G = 0.85

# -----------------------------------------------------------------------------
# Solver settings
# -----------------------------------------------------------------------------
_C.SOLVER = CN()
_C.SOLVER.T = 5.0
_C.SOLVER.CFL = 0.45
# 'vacuum' or 'periodic' (test hook)
_C.SOLVER.BOUNDARY = 'vacuum'
# Keep every k-th state snapshot, 0 picks k so that at most 200 are kept
_C.SOLVER.SNAPSHOT_STRIDE = 0
# 'discrete' differentiates the scheme itself, 'continuous' solves the adjoint equation
_C.SOLVER.ADJOINT = 'discrete'

# -----------------------------------------------------------------------------
# Source cap U(x); -1 selects min(dx,dy) for EPS and 1e-4*min(dx,dy) for DELTA
# -----------------------------------------------------------------------------
_C.SOURCE = CN()
# Not fixed by the planning setup; chosen default
_C.SOURCE.Q_MAX = 100.0
_C.SOURCE.EPS = -1.0
_C.SOURCE.DELTA = -1.0
_C.SOURCE.BLOCKED = []

_C.CONTROL = CN()
# 'stationary' or 'time_varying'
_C.CONTROL.MODE = 'stationary'

# -----------------------------------------------------------------------------
# Objective settings
# -----------------------------------------------------------------------------
_C.OBJECTIVE = CN()
# 'tracking' or 'sf'
_C.OBJECTIVE.NAME = 'tracking'
# Not fixed by the planning setup; chosen default
_C.OBJECTIVE.C2 = 1e-3
_C.OBJECTIVE.TRACKING = CN()
# c_T, c_R, c_N
_C.OBJECTIVE.TRACKING.WEIGHTS = [25.0, 150.0, 1.0]
# Prescribed tumor dose, -1 selects T
_C.OBJECTIVE.TRACKING.DOSE_LEVEL = -1.0
_C.OBJECTIVE.SF = CN()
# Tumor, risk, normal
_C.OBJECTIVE.SF.A = [500.0, 2000.0, 1.0]
_C.OBJECTIVE.SF.ALPHA = [0.52, 0.170, 0.170]
_C.OBJECTIVE.SF.BETA = [0.171, 0.0078, 0.0078]

# -----------------------------------------------------------------------------
# Optimizer settings
# -----------------------------------------------------------------------------
_C.OPTIM = CN()
_C.OPTIM.MAX_ITER = 100
_C.OPTIM.TOL = 1e-4
_C.OPTIM.STEP0 = 1.0
_C.OPTIM.SHRINK = 0.5
_C.OPTIM.SIGMA = 1e-4
_C.OPTIM.MAX_BACKTRACKS = 30
# 'spectral' starts each line search at the Barzilai-Borwein step, 'fixed' at STEP0
_C.OPTIM.STEP_RULE = 'spectral'
# Save the current control every k iterations, 0 disables
_C.OPTIM.CHECKPOINT_FREQ = 10
# Control checkpoint to restart from
_C.OPTIM.RESUME = ''

# -----------------------------------------------------------------------------
# Discrete-ordinates oracle
# -----------------------------------------------------------------------------
_C.ORACLE = CN()
_C.ORACLE.N_ANGLES = 16
# Polar nodes per hemisphere, 0 keeps only the in-plane directions
_C.ORACLE.N_POLAR = 4
_C.ORACLE.ALLOW_LARGE = False
# Uniform isotropic source strength in the tumor for the oracle comparison
_C.ORACLE.SOURCE = 1.0

# -----------------------------------------------------------------------------
# Export settings
# -----------------------------------------------------------------------------
_C.EXPORT = CN()
_C.EXPORT.FIELDS = True
_C.EXPORT.SNAPSHOTS = False
_C.EXPORT.TENSORBOARD = False
_C.EXPORT.PROGRESS = True

# -----------------------------------------------------------------------------
# Misc
# -----------------------------------------------------------------------------
# Path to output folder, overwritten by command line argument
_C.OUTPUT = 'output'
# Tag of experiment, names the run directory
_C.TAG = 'default'
_C.SEED = 1234


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _normalize_document(doc, defaults, prefix=''):
    """Reject unknown keys and nulls; widen ints where the default is a float."""
    for key, value in list(doc.items()):
        name = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(name, "unknown key")
        if isinstance(value, dict) and isinstance(defaults[key], CN):
            _normalize_document(value, defaults[key], name + '.')
        elif value is None:
            hint = " (absorption coercivity needs sigma_a > 0)" if key == 'SIGMA_A' else ''
            raise ConfigError(name, f"required value is missing{hint}")
        elif isinstance(defaults[key], float) and _is_int(value):
            doc[key] = float(value)


def _lookup(config, dotted):
    node = config
    for part in dotted.split('.'):
        if not isinstance(node, CN) or part not in node:
            raise ConfigError(dotted, "unknown key")
        node = node[part]
    return node


def _merge_document(config, doc, base_dir):
    if not isinstance(doc, dict):
        raise ConfigError('<document>', "top level must be a mapping of keys")
    for cfg in doc.get('BASE', ['']) or ['']:
        if cfg:
            _update_config_from_file(config, os.path.join(base_dir, cfg))
    _normalize_document(doc, config)
    preset = doc.get('PRESET')
    if preset:
        apply_preset(config, preset)
    try:
        config.merge_from_other_cfg(CN(doc))
    except (KeyError, ValueError) as e:
        raise ConfigError('<document>', str(e).strip('"')) from None


def _update_config_from_file(config, cfg_file):
    config.defrost()
    try:
        with open(cfg_file, 'r') as f:
            yaml_cfg = yaml.safe_load(f) or {}
    except OSError as e:
        raise ConfigError(cfg_file, f"cannot read config file ({e.strerror})") from None
    except yaml.YAMLError as e:
        raise ConfigError(cfg_file, f"malformed YAML ({e})") from None
    logger.info('=> merge config from %s', cfg_file)
    _merge_document(config, yaml_cfg, os.path.dirname(cfg_file))


def apply_preset(config, name):
    from configs.presets import preset_opts
    try:
        opts = preset_opts(name)
    except KeyError as e:
        raise ConfigError('PRESET', e.args[0]) from None
    config.defrost()
    config.merge_from_list(opts)
    config.PRESET = name


def merge_opts(config, opts):
    if not opts:
        return
    if len(opts) % 2:
        raise ConfigError('--opts', "expects KEY VALUE pairs")
    opts = list(opts)
    for i in range(0, len(opts), 2):
        default = _lookup(config, opts[i])
        value = opts[i + 1]
        if isinstance(value, str) and isinstance(default, float):
            try:
                value = literal_eval(value)
            except (ValueError, SyntaxError):
                pass
        if isinstance(default, float) and _is_int(value):
            opts[i + 1] = float(value)
    config.defrost()
    try:
        config.merge_from_list(opts)
    except (AssertionError, KeyError, ValueError) as e:
        raise ConfigError('--opts', str(e).strip('"')) from None


def _grid_spacing(config):
    nx, ny = config.GRID.NX, config.GRID.NY
    if not isinstance(nx, int) or not isinstance(ny, int) or nx < 2 or ny < 2:
        raise ConfigError('GRID.NX/GRID.NY', f"cell counts must be integers >= 2, got {nx}, {ny}")
    return min(2.0 / nx, 2.0 / ny)


def resolve_config(config):
    """Replace the -1 sentinels by concrete values; returns a frozen clone."""
    config = config.clone()
    config.defrost()
    h = _grid_spacing(config)
    if config.SOURCE.EPS == -1:
        config.SOURCE.EPS = h
    if config.SOURCE.DELTA == -1:
        config.SOURCE.DELTA = 1e-4 * h
    if config.OBJECTIVE.TRACKING.DOSE_LEVEL == -1:
        config.OBJECTIVE.TRACKING.DOSE_LEVEL = float(config.SOLVER.T)
    config.REGIONS.CASE = config.REGIONS.CASE.lower()
    config.SOURCE.BLOCKED = sorted({b.lower() for b in config.SOURCE.BLOCKED})
    config.freeze()
    return config


def _check(cond, key, constraint):
    if not cond:
        raise ConfigError(key, constraint)


def _check_rects(rects, key):
    _check(isinstance(rects, (list, tuple)), key, "must be a list of [xmin, xmax, ymin, ymax]")
    for r in rects:
        _check(isinstance(r, (list, tuple)) and len(r) == 4, key, f"rectangle {r} needs 4 bounds")
        _check(r[0] <= r[1] and r[2] <= r[3], key, f"rectangle {r} has inverted bounds")


def _positive_list(values, key, n=3, strict=True):
    _check(len(values) == n, key, f"needs {n} values, got {len(values)}")
    for v in values:
        _check(v > 0 if strict else v >= 0, key, f"values must be {'positive' if strict else 'non-negative'}, got {list(values)}")


def validate_config(config):
    """Check every module precondition; raises ConfigError(key, constraint)."""
    _grid_spacing(config)
    _check(config.REGIONS.CASE in TARGET_CASES, 'REGIONS.CASE',
           f"unknown target case '{config.REGIONS.CASE}', expected one of {sorted(TARGET_CASES)}")
    for case in TARGET_CASES:
        _check_rects(config.REGIONS[case.upper()].TUMOR, f'REGIONS.{case.upper()}.TUMOR')
        _check_rects(config.REGIONS[case.upper()].RISK, f'REGIONS.{case.upper()}.RISK')

    for part in ('VOID', 'TISSUE'):
        node = config.MATERIALS[part]
        try:
            check_hypotheses(node.SIGMA_A, node.SIGMA_S, part.lower())
        except ValueError as e:
            raise ConfigError(f'MATERIALS.{part}', str(e)) from None
    _check(abs(config.MATERIALS.G) < 1, 'MATERIALS.G', f"|g| must be < 1, got {config.MATERIALS.G}")

    _check(config.SOLVER.T > 0, 'SOLVER.T', f"final time must be positive, got {config.SOLVER.T}")
    _check(0 < config.SOLVER.CFL <= CFL_MAX, 'SOLVER.CFL', f"must lie in (0, {CFL_MAX}], got {config.SOLVER.CFL}")
    _check(config.SOLVER.BOUNDARY in BOUNDARIES, 'SOLVER.BOUNDARY', f"must be one of {BOUNDARIES}")
    _check(config.SOLVER.SNAPSHOT_STRIDE >= 0, 'SOLVER.SNAPSHOT_STRIDE', "must be >= 0")
    _check(config.SOLVER.ADJOINT in ADJOINTS, 'SOLVER.ADJOINT', f"must be one of {ADJOINTS}")

    src = config.SOURCE
    _check(src.DELTA > 0, 'SOURCE.DELTA', f"must be positive, got {src.DELTA}")
    _check(src.Q_MAX > src.DELTA, 'SOURCE.Q_MAX', f"must exceed DELTA ({src.DELTA}), got {src.Q_MAX}")
    _check(src.EPS > 0, 'SOURCE.EPS', f"must be positive, got {src.EPS}")
    unknown = set(b.lower() for b in src.BLOCKED) - set(EDGES)
    _check(not unknown, 'SOURCE.BLOCKED', f"unknown edges {sorted(unknown)}, expected a subset of {EDGES}")
    _check(len(set(src.BLOCKED)) < len(EDGES), 'SOURCE.BLOCKED', "all four edges blocked, active boundary is empty")

    _check(config.CONTROL.MODE in CONTROL_MODES, 'CONTROL.MODE', f"must be one of {CONTROL_MODES}")

    obj = config.OBJECTIVE
    _check(obj.NAME in OBJECTIVES, 'OBJECTIVE.NAME', f"must be one of {OBJECTIVES}, got {obj.NAME!r}")
    _check(obj.C2 > 0, 'OBJECTIVE.C2', f"control weight must be positive, got {obj.C2}")
    _positive_list(obj.TRACKING.WEIGHTS, 'OBJECTIVE.TRACKING.WEIGHTS', strict=False)
    _check(obj.TRACKING.DOSE_LEVEL >= 0, 'OBJECTIVE.TRACKING.DOSE_LEVEL', "must be non-negative")
    _positive_list(obj.SF.A, 'OBJECTIVE.SF.A')
    _positive_list(obj.SF.ALPHA, 'OBJECTIVE.SF.ALPHA')
    _positive_list(obj.SF.BETA, 'OBJECTIVE.SF.BETA')

    opt = config.OPTIM
    _check(opt.MAX_ITER >= 0, 'OPTIM.MAX_ITER', "must be >= 0")
    _check(opt.TOL > 0, 'OPTIM.TOL', "tolerance must be positive")
    _check(opt.STEP0 > 0, 'OPTIM.STEP0', "initial step must be positive")
    _check(0 < opt.SHRINK < 1, 'OPTIM.SHRINK', "must lie in (0, 1)")
    _check(0 < opt.SIGMA < 1, 'OPTIM.SIGMA', "must lie in (0, 1)")
    _check(opt.MAX_BACKTRACKS >= 0, 'OPTIM.MAX_BACKTRACKS', "must be >= 0")
    _check(opt.STEP_RULE in STEP_RULES, 'OPTIM.STEP_RULE', f"must be one of {STEP_RULES}")
    _check(opt.CHECKPOINT_FREQ >= 0, 'OPTIM.CHECKPOINT_FREQ', "must be >= 0")
    _check(not opt.RESUME or os.path.isfile(opt.RESUME), 'OPTIM.RESUME', f"checkpoint not found: {opt.RESUME}")

    _check(config.ORACLE.N_ANGLES in SN_ANGLES, 'ORACLE.N_ANGLES', f"must be one of {SN_ANGLES}")
    _check(config.ORACLE.N_POLAR >= 0, 'ORACLE.N_POLAR', "must be >= 0")
    _check(config.ORACLE.SOURCE > 0, 'ORACLE.SOURCE', "must be positive")
    _check(bool(config.TAG), 'TAG', "must not be empty")
    return config


def finalize(config):
    config = resolve_config(config)
    validate_config(config)
    return config


def parse_config(text, opts=None, base_dir='.'):
    """Build a resolved, validated config from a YAML document string."""
    config = _C.clone()
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError('<document>', f"malformed YAML ({e})") from None
    _merge_document(config, doc, base_dir)
    merge_opts(config, opts)
    return finalize(config)


def update_config(config, args):
    if getattr(args, 'cfg', None):
        _update_config_from_file(config, args.cfg)
    if getattr(args, 'preset', None):
        apply_preset(config, args.preset)

    config.defrost()
    merge_opts(config, args.opts)

    # merge from specific arguments
    if getattr(args, 'output_dir', None):
        config.OUTPUT = args.output_dir
    if getattr(args, 'tag', None):
        config.TAG = args.tag
    if getattr(args, 'resume', None):
        config.OPTIM.RESUME = args.resume

    config.freeze()


def get_config(args):
    """Get a resolved and validated yacs CfgNode for the command-line arguments."""
    # Return a clone so that the defaults will not be altered
    config = _C.clone()
    update_config(config, args)
    return finalize(config)
