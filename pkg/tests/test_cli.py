import os
import textwrap

import pandas as pd
import pytest
import torch
import yaml

import planner
from config import ConfigError, parse_config
from configs.presets import PRESETS, expand_presets, preset_opts
from geometry.grid import Region
from plan import main
from planner import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, run_scenario
from transport.m1_solver import SolverError
from utils.misc import content_hash
from utils.utils import band_map, export_field, read_field


class TestParseConfig:
    def test_defaults_resolved(self):
        config = parse_config('')
        assert config.SOURCE.EPS == pytest.approx(0.02)
        assert config.SOURCE.DELTA == pytest.approx(2e-6)
        assert config.OBJECTIVE.TRACKING.DOSE_LEVEL == 5.0
        assert config.is_frozen()

    def test_chosen_defaults(self):
        config = parse_config('')
        assert config.SOURCE.Q_MAX == 100.0 and config.OBJECTIVE.C2 == 1e-3
        assert config.SOLVER.ADJOINT == 'discrete' and config.OPTIM.STEP_RULE == 'spectral'
        assert config.ORACLE.N_POLAR == 4

    def test_preset_baseline(self):
        config = parse_config('PRESET: basic-tracking-baseline')
        assert config.REGIONS.CASE == 'basic'
        assert config.OBJECTIVE.NAME == 'tracking'
        assert list(config.OBJECTIVE.TRACKING.WEIGHTS) == [25.0, 150.0, 1.0]
        assert list(config.SOURCE.BLOCKED) == []

    def test_preset_blocked(self):
        config = parse_config('PRESET: complex-sf-blocked')
        assert list(config.SOURCE.BLOCKED) == ['right']
        assert config.OBJECTIVE.NAME == 'sf'
        assert config.OBJECTIVE.SF.A[1] == 2000.0

    def test_preset_low_risk_spelling(self):
        config = parse_config('PRESET: intermediate-tracking-low-risk')
        assert list(config.OBJECTIVE.TRACKING.WEIGHTS) == [25.0, 50.0, 1.0]
        assert config.REGIONS.CASE == 'intermediate'

    def test_document_overrides_preset(self):
        text = textwrap.dedent("""\
            PRESET: basic-sf-low_risk
            OBJECTIVE:
              SF:
                A: [500.0, 750.0, 1.0]
            """)
        assert parse_config(text).OBJECTIVE.SF.A[1] == 750.0

    def test_int_widened_for_float_keys(self):
        config = parse_config('SOLVER:\n  T: 2\n')
        assert isinstance(config.SOLVER.T, float)
        assert config.OBJECTIVE.TRACKING.DOSE_LEVEL == 2.0

    def test_opts_override(self):
        config = parse_config('', opts=['GRID.NX', '50', 'SOLVER.T', '1'])
        assert config.GRID.NX == 50
        assert config.SOURCE.EPS == pytest.approx(0.02)
        assert config.SOURCE.DELTA == pytest.approx(2e-6)
        assert config.SOLVER.T == 1.0

    def test_coarse_grid_sentinels(self):
        config = parse_config('GRID:\n  NX: 50\n  NY: 50\n')
        assert config.SOURCE.EPS == pytest.approx(0.04)
        assert config.SOURCE.DELTA == pytest.approx(4e-6)

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as e:
            parse_config('GRID:\n  NZ: 10\n')
        assert e.value.key == 'GRID.NZ'

    def test_missing_absorption_names_coercivity(self):
        with pytest.raises(ConfigError, match='coercivity'):
            parse_config('MATERIALS:\n  TISSUE:\n    SIGMA_A: null\n')

    def test_zero_absorption_names_coercivity(self):
        with pytest.raises(ConfigError, match='coercivity') as e:
            parse_config('MATERIALS:\n  TISSUE:\n    SIGMA_A: 0\n')
        assert e.value.key == 'MATERIALS.TISSUE'

    @pytest.mark.parametrize('text,key', [
        ('SOLVER:\n  CFL: 0.6\n', 'SOLVER.CFL'),
        ('SOLVER:\n  T: -1.0\n', 'SOLVER.T'),
        ('SOURCE:\n  BLOCKED: [left, right, top, bottom]\n', 'SOURCE.BLOCKED'),
        ('SOURCE:\n  BLOCKED: [north]\n', 'SOURCE.BLOCKED'),
        ('REGIONS:\n  CASE: simple\n', 'REGIONS.CASE'),
        ('OBJECTIVE:\n  NAME: dose\n', 'OBJECTIVE.NAME'),
        ('OBJECTIVE:\n  C2: 0.0\n', 'OBJECTIVE.C2'),
        ('OBJECTIVE:\n  SF:\n    ALPHA: [0.52, 0.17]\n', 'OBJECTIVE.SF.ALPHA'),
        ('CONTROL:\n  MODE: pulsed\n', 'CONTROL.MODE'),
        ('ORACLE:\n  N_ANGLES: 12\n', 'ORACLE.N_ANGLES'),
        ('ORACLE:\n  N_POLAR: -1\n', 'ORACLE.N_POLAR'),
        ('SOLVER:\n  ADJOINT: exact\n', 'SOLVER.ADJOINT'),
        ('OPTIM:\n  STEP_RULE: newton\n', 'OPTIM.STEP_RULE'),
        ('OPTIM:\n  RESUME: /nonexistent/control.pth\n', 'OPTIM.RESUME'),
        ('PRESET: basic-dose-baseline\n', 'PRESET'),
        ('GRID:\n  NX: 1\n', 'GRID.NX/GRID.NY'),
    ])
    def test_invalid_values(self, text, key):
        with pytest.raises(ConfigError) as e:
            parse_config(text)
        assert e.value.key == key

    def test_malformed_yaml(self):
        with pytest.raises(ConfigError):
            parse_config('GRID: [unclosed\n')

    def test_base_file(self, tmp_path):
        (tmp_path / 'base.yaml').write_text('GRID:\n  NX: 20\n  NY: 20\n')
        config = parse_config("BASE: ['base.yaml']\nSOLVER:\n  T: 1.0\n", base_dir=str(tmp_path))
        assert config.GRID.NX == 20 and config.SOLVER.T == 1.0


CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'configs')


@pytest.mark.parametrize('name', ['basic_sf_baseline.yaml', 'smoke.yaml', 'figure_risk.yaml', 'time_varying.yaml'])
def test_example_documents_parse(name):
    with open(os.path.join(CONFIG_DIR, name)) as f:
        config = parse_config(f.read(), base_dir=CONFIG_DIR)
    if name == 'figure_risk.yaml':
        assert config.REGIONS.BASIC.RISK[0][0] == 0.29
        assert config.OBJECTIVE.NAME == 'sf'
    if name == 'time_varying.yaml':
        assert config.GRID.NX == 20 and list(config.SOURCE.BLOCKED) == ['right']


class TestPresets:
    def test_eighteen_presets(self):
        assert len(PRESETS) == 18
        assert expand_presets(['all']) == list(PRESETS)
        assert expand_presets(['basic-sf-blocked']) == ['basic-sf-blocked']

    def test_blocked_edges(self):
        assert preset_opts('complex-tracking-blocked')[-1] == ['right']
        assert preset_opts('basic-tracking-blocked')[-1] == ['left']

    def test_unknown(self):
        with pytest.raises(KeyError):
            preset_opts('basic-tracking')


class TestFieldExport:
    def test_zero_field_layout(self, tmp_path):
        path = str(tmp_path / 'zero.csv')
        export_field(torch.zeros(2, 2, dtype=torch.float64), path)
        with open(path) as f:
            lines = f.read().splitlines()
        assert lines[0] == '# nx=2,ny=2,xmin=-1,xmax=1,ymin=-1,ymax=1,dtype=float64'
        assert lines[1:] == ['0,0', '0,0']

    def test_region_map_round_trip(self, tmp_path, basic10):
        path = str(tmp_path / 'regions.csv')
        export_field(basic10.labels, path)
        labels, header = read_field(path)
        assert torch.equal(labels, basic10.labels)
        assert header['nx'] == '10' and header['dtype'] == 'int64'

    def test_float_values_exact(self, tmp_path):
        values = torch.tensor([[1 / 3, 2e-300], [-7.25, 123456.789]], dtype=torch.float64)
        path = str(tmp_path / 'values.csv')
        export_field(values, path)
        assert torch.equal(read_field(path)[0], values)

    def test_vector_field(self, tmp_path, grid10):
        paths = export_field(grid10.zeros(2), str(tmp_path / 'flux.csv'))
        assert [os.path.basename(p) for p in paths] == ['flux_x.csv', 'flux_y.csv']

    def test_bad_shape(self, tmp_path):
        with pytest.raises(ValueError):
            export_field(torch.zeros(3, 2, 2), str(tmp_path / 'bad.csv'))

    def test_unwritable_path(self, tmp_path):
        path = str(tmp_path / 'missing' / 'dose.csv')
        with pytest.raises(OSError, match='missing'):
            export_field(torch.zeros(2, 2), path)

    def test_band_map(self):
        values = torch.tensor([0.0, 0.24, 0.25, 0.74, 5.0], dtype=torch.float64)
        assert band_map(values, 0.25).tolist() == [0, 0, 1, 2, 20]
        assert band_map(values, 0.25, n_bands=3).tolist() == [0, 0, 1, 2, 2]


class TestRunScenario:
    def test_dry_run(self, small_config_text):
        config = parse_config(small_config_text)
        code, run_dir = run_scenario(config)
        assert code == EXIT_OK
        for name in ('manifest.yaml', 'iterations.csv', 'control.pth', 'control_q0.csv', 'control_q1_x.csv',
                     'control_q1_y.csv', 'dose.csv', 'regions.csv', 'adjoint_source.csv', 'survival.csv',
                     'survival_bands.csv', 'dose_bands.csv', 'summary.csv', 'result.yaml', 'log.txt'):
            assert os.path.exists(os.path.join(run_dir, name)), name
        assert not os.path.exists(os.path.join(run_dir, 'PARTIAL'))
        dose, _ = read_field(os.path.join(run_dir, 'dose.csv'))
        assert (dose == 0).all()
        summary = pd.read_csv(os.path.join(run_dir, 'summary.csv')).set_index('region')
        assert summary.loc['tumor', 'survival_mean'] == 1.0
        with open(os.path.join(run_dir, 'result.yaml')) as f:
            result = yaml.safe_load(f)
        assert result['status'] == 'max_iterations' and result['iterations'] == 0

    def test_manifest_reproduces_config(self, small_config_text):
        config = parse_config(small_config_text)
        _, run_dir = run_scenario(config)
        with open(os.path.join(run_dir, 'manifest.yaml')) as f:
            first, body = f.readline(), f.read()
        assert first.strip() == f'# content-hash: {content_hash(body)}'
        assert parse_config(body).dump() == config.dump()

    def test_identical_configs_identical_outputs(self, small_config_text):
        outputs = []
        for tag in ('first', 'second'):
            config = parse_config(small_config_text, opts=['OPTIM.MAX_ITER', '2', 'TAG', tag])
            code, run_dir = run_scenario(config)
            assert code == EXIT_OK
            outputs.append({name: open(os.path.join(run_dir, name), 'rb').read()
                            for name in ('dose.csv', 'control_q0.csv', 'control_q1_x.csv')})
        assert outputs[0] == outputs[1]

    def test_summary_matches_exported_fields(self, small_config_text):
        config = parse_config(small_config_text, opts=['OPTIM.MAX_ITER', '2'])
        _, run_dir = run_scenario(config)
        dose, _ = read_field(os.path.join(run_dir, 'dose.csv'))
        labels, _ = read_field(os.path.join(run_dir, 'regions.csv'))
        summary = pd.read_csv(os.path.join(run_dir, 'summary.csv')).set_index('region')
        for region in Region:
            mask = labels == int(region)
            assert summary.loc[region.name.lower(), 'dose_mean'] == pytest.approx(float(dose[mask].mean()), rel=1e-12)
            assert summary.loc[region.name.lower(), 'cells'] == int(mask.sum())

    def test_solver_failure_marks_partial(self, small_config_text, monkeypatch):
        def fail(*args, **kwargs):
            raise SolverError('non-finite moments after step')

        monkeypatch.setattr(planner, 'optimize', fail)
        code, run_dir = run_scenario(parse_config(small_config_text))
        assert code == EXIT_SOLVER
        with open(os.path.join(run_dir, 'PARTIAL')) as f:
            assert 'SolverError' in f.read()
        assert os.path.exists(os.path.join(run_dir, 'manifest.yaml'))


class TestMain:
    def test_validate(self, small_config_file, capsys):
        assert main(['validate', small_config_file]) == EXIT_OK
        assert '# content-hash:' in capsys.readouterr().out

    def test_validate_rejects_bad_config(self, tmp_path, capsys):
        path = tmp_path / 'bad.yaml'
        path.write_text('MATERIALS:\n  TISSUE:\n    SIGMA_A: 0.0\n')
        assert main(['validate', str(path)]) == EXIT_CONFIG
        assert 'coercivity' in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(['validate', str(tmp_path / 'nope.yaml')]) == EXIT_CONFIG

    def test_run(self, small_config_file, tmp_path):
        assert main(['run', small_config_file, '--tag', 'cli']) == EXIT_OK
        assert os.path.exists(tmp_path / 'runs' / 'cli' / 'summary.csv')

    def test_output_dir_option(self, small_config_file, tmp_path):
        out = tmp_path / 'elsewhere'
        assert main(['run', small_config_file, '--output_dir', str(out), '--tag', 'x']) == EXIT_OK
        assert os.path.exists(out / 'x' / 'dose.csv')

    def test_resume(self, small_config_file, tmp_path):
        assert main(['run', small_config_file, '--tag', 'first',
                     '--opts', 'OPTIM.MAX_ITER', '1', 'OPTIM.CHECKPOINT_FREQ', '1']) == EXIT_OK
        checkpoint = tmp_path / 'runs' / 'first' / 'control_latest.pth'
        assert checkpoint.exists()
        assert main(['run', small_config_file, '--tag', 'second', '--resume', str(checkpoint),
                     '--opts', 'OPTIM.MAX_ITER', '1']) == EXIT_OK
        frame = pd.read_csv(tmp_path / 'runs' / 'second' / 'iterations.csv')
        assert frame['iteration'].iloc[0] == 1

    def test_preset_batch(self, small_config_file, tmp_path):
        assert main(['preset', 'basic-sf-blocked', 'complex-tracking-low-risk',
                     '--cfg', small_config_file]) == EXIT_OK
        assert os.path.exists(tmp_path / 'runs' / 'basic-sf-blocked' / 'summary.csv')
        assert os.path.exists(tmp_path / 'runs' / 'complex-tracking-low-risk' / 'summary.csv')
        manifest = parse_config(open(tmp_path / 'runs' / 'basic-sf-blocked' / 'manifest.yaml').read())
        assert manifest.OBJECTIVE.NAME == 'sf' and list(manifest.SOURCE.BLOCKED) == ['left']

    def test_unknown_preset(self, small_config_file):
        assert main(['preset', 'basic-dose-baseline', '--cfg', small_config_file]) == EXIT_CONFIG

    def test_oracle(self, small_config_file, tmp_path):
        assert main(['oracle', small_config_file, '--tag', 'sn', '--opts', 'ORACLE.N_ANGLES', '8']) == EXIT_OK
        with open(tmp_path / 'runs' / 'sn' / 'oracle.yaml') as f:
            result = yaml.safe_load(f)
        assert result['n_angles'] == 8 and 0 <= result['relative_l1'] < float('inf')

    def test_oracle_in_plane(self, small_config_file, tmp_path):
        assert main(['oracle', small_config_file, '--tag', 'sn2d', '--opts', 'ORACLE.N_POLAR', '0']) == EXIT_OK
        with open(tmp_path / 'runs' / 'sn2d' / 'oracle.yaml') as f:
            result = yaml.safe_load(f)
        assert result['n_polar'] == 0 and 0 <= result['relative_l1'] < float('inf')

    def test_no_command(self):
        with pytest.raises(SystemExit):
            main([])
