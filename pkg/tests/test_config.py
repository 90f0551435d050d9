import pytest

from kdsde.components import ConfigError, UnknownComponentError
from kdsde.components.config import load_config, parse_config
from kdsde.constants import Semantics


def test_defaults():
    config = parse_config({})
    domain = config.build_domain()
    assert domain.contains([0.5])
    gamma = config.build_initial(domain)
    assert gamma.mass == 1.0
    assert gamma.locations.tolist() == [[0.5]]
    assert config.simulation.semantics == Semantics.FREEZE_AT_EXIT
    assert config.picard_config().grid.M == config.grid.M


def test_overrides():
    config = parse_config({'solver': {'particles': 100}}, {'seed': 9, 'threads': 4, 'out': 'somewhere', 'tier': None})
    assert config.seed == 9
    assert config.solver.threads == 4
    assert config.solver.particles == 100
    assert config.output.directory == 'somewhere'


def test_step_must_divide_grid():
    with pytest.raises(ConfigError) as info:
        parse_config({'grid': {'T': 1.0, 'M': 10, 'dt': 0.03}})
    assert info.value.context['field'] == 'grid.dt'
    assert info.value.exit_code == 64


def test_validation_error_names_field():
    with pytest.raises(ConfigError) as info:
        parse_config({'solver': {'particles': 0}})
    assert info.value.context['field'] == 'solver.particles'


@pytest.mark.parametrize('content', [
    {'coefficients': {'family': 'heston'}},
    {'initial': {'kind': 'gaussian'}},
    {'solver': {'semantics': 'reflect'}},
    {'tier': 'huge'},
    {'test_function': {'kind': 'bump'}},
])
def test_unknown_components(content):
    with pytest.raises(UnknownComponentError) as info:
        parse_config(content)
    assert info.value.exit_code == 64


def test_bad_seed():
    with pytest.raises(ConfigError):
        parse_config({'seed': -1})


def test_second_system():
    config = parse_config({'initial2': {'kind': 'dirac', 'point': [0.7], 'mass': 0.5},
                           'coefficients2': {'family': 'mean_field', 'params': {'lam': 1.0}}})
    domain = config.build_domain()
    assert config.build_initial(domain, second=True).mass == 0.5
    assert config.build_coefficients(second=True).name != config.build_coefficients().name


def test_load_yaml_with_env(tmp_path):
    (tmp_path / 'exp_tests.yml').write_text(
        'seed: 5\n'
        'domain:\n'
        '  kind: ball\n'
        '  center: [0, 0]\n'
        '  radius: 1\n'
        'initial:\n'
        '  kind: atoms\n'
        '  atoms: [[0.1, 0.2], [0.0, -0.3]]\n'
    )
    config = load_config(tmp_path / 'exp_{env}.yml', env='tests')
    assert config.seed == 5
    assert config.env == 'tests'
    gamma = config.build_initial(config.build_domain())
    assert gamma.mass == pytest.approx(1.0)
    assert gamma.locations.shape == (2, 2)


def test_load_ini(tmp_path):
    path = tmp_path / 'exp.ini'
    path.write_text(
        '[experiment]\n'
        'seed = 3\n'
        'tier = full\n'
        '[grid]\n'
        'T = 0.5\n'
        'M = 5\n'
        'dt = 0.01\n'
        '[solver.transport]\n'
        'method = exact\n'
    )
    config = load_config(str(path))
    assert config.seed == 3
    assert config.tier == 'full'
    assert config.grid.T == 0.5
    assert config.solver.transport.method == 'exact'


def test_yaml_syntax_error(tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text('seed: 1\ngrid: [1, 2\n')
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.line is not None


@pytest.mark.parametrize('name, text', [
    ('list.yml', '- 1\n- 2\n'),
    ('exp.toml', 'seed = 1\n'),
])
def test_rejected_files(tmp_path, name, text):
    (tmp_path / name).write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path / name)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / 'nothing.yml')
