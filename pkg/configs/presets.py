from collections import OrderedDict
from dataclasses import dataclass
from itertools import product

CASES = ('basic', 'intermediate', 'complex')
OBJECTIVES = ('tracking', 'sf')
VARIANTS = ('baseline', 'low_risk', 'blocked')


@dataclass(frozen=True)
class ScenarioPreset:
    case: str
    objective: str
    variant: str

    @property
    def name(self):
        return f'{self.case}-{self.objective}-{self.variant}'

    def opts(self):
        return (get_case_opts(self.case)
                + get_objective_opts(self.objective)
                + get_variant_opts(self.variant, self.case))


def get_case_opts(case):
    return ['REGIONS.CASE', case]


def get_objective_opts(objective):
    # Baseline weights, c_T, c_R, c_N and a_0, a_1, a_2
    return ['OBJECTIVE.NAME', objective,
            'OBJECTIVE.TRACKING.WEIGHTS', [25.0, 150.0, 1.0],
            'OBJECTIVE.SF.A', [500.0, 2000.0, 1.0],
            'SOURCE.BLOCKED', []]


def get_variant_opts(variant, case):
    if variant == 'baseline':
        return []
    if variant == 'low_risk':
        return ['OBJECTIVE.TRACKING.WEIGHTS', [25.0, 50.0, 1.0],
                'OBJECTIVE.SF.A', [500.0, 1000.0, 1.0]]
    if variant == 'blocked':
        return ['SOURCE.BLOCKED', ['right'] if case == 'complex' else ['left']]
    raise KeyError(f"unknown variant '{variant}', expected one of {VARIANTS}")


PRESETS = OrderedDict((p.name, p) for p in (ScenarioPreset(c, o, v)
                                             for c, o, v in product(CASES, OBJECTIVES, VARIANTS)))


def preset_opts(name):
    """KEY VALUE list for a preset name such as 'basic-tracking-baseline'."""
    key = name.lower().replace('low-risk', 'low_risk')
    if key not in PRESETS:
        raise KeyError(f"unknown preset '{name}', expected one of {list(PRESETS)}")
    return PRESETS[key].opts()


def expand_presets(names):
    """Resolve 'all' and keep the requested order otherwise."""
    out = []
    for name in names:
        out.extend(PRESETS if name == 'all' else [name])
    return out
