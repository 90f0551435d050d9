"""
Experiment configuration: YAML or INI files validated into ``ExperimentConfig``.
"""
import math
from configparser import ConfigParser, Error as ConfigParserError
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from pydantic import BaseModel, Field, ValidationError

from kdsde.constants import DEFAULT_COARSEN_ATOMS, Environment, MAX_SEED, Semantics, THETA_SCHEDULE, Tier
from kdsde.components.exceptions import ConfigError, InvalidArgumentError, UnknownComponentError
from kdsde.components.geometry import Domain, DomainSpec, domain_from_spec
from kdsde.components.killed_sde import (
    COEFFICIENT_FAMILIES,
    CoefficientField,
    CoefficientSpec,
    SimulationOptions,
    coefficient_from_spec,
)
from kdsde.components.measures import SubProbMeasure, TimeGrid
from kdsde.components.picard import DirichletTestFunction, PicardConfig
from kdsde.components.transport import TransportSolverOptions

__all__ = (
    'InitialSpec',
    'GridSpec',
    'SolverSpec',
    'TestFunctionSpec',
    'OutputSpec',
    'ExperimentConfig',
    'load_config',
    'parse_config',
)

_INITIAL_KINDS = ('dirac', 'uniform', 'atoms', 'file', 'zero')
_TEST_FUNCTIONS = ('sine', 'zero')


class InitialSpec(BaseModel):
    kind: str = 'dirac'
    point: Optional[List[float]] = None
    lower: Optional[float] = None
    upper: Optional[float] = None
    atoms: Optional[List[List[float]]] = None
    weights: Optional[List[float]] = None
    mass: float = Field(1.0, ge=0, le=1)
    path: Optional[str] = None

    def build(self, domain: Domain, particles: int) -> SubProbMeasure:
        """
        ``uniform`` is discretized on as many equal-mass midpoints as there are
        particles, so ensembles start on its atoms without sampling.
        """
        if self.kind == 'dirac':
            point = self.point if self.point is not None else [0.5] * domain.dim
            return SubProbMeasure.dirac(domain, point, self.mass)
        if self.kind == 'uniform':
            if self.lower is None or self.upper is None:
                raise InvalidArgumentError("uniform initial law needs lower and upper")
            return SubProbMeasure.uniform_grid(domain, self.lower, self.upper, particles, self.mass)
        if self.kind == 'atoms':
            if not self.atoms:
                raise InvalidArgumentError("atom initial law needs at least one atom")
            weights = self.weights if self.weights is not None else [self.mass / len(self.atoms)] * len(self.atoms)
            return SubProbMeasure.atoms(domain, self.atoms, weights)
        if self.kind == 'file':
            return SubProbMeasure.load(self.path, domain)
        if self.kind == 'zero':
            return SubProbMeasure.zero(domain)
        raise UnknownComponentError(f"unknown initial law {self.kind!r}", known=list(_INITIAL_KINDS))


class GridSpec(BaseModel):
    T: float = Field(1.0, gt=0)
    M: int = Field(10, ge=1)
    dt: float = Field(1e-3, gt=0)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.M)


class SolverSpec(BaseModel):
    particles: int = Field(10000, gt=0)
    tol: float = Field(1e-3, gt=0)
    max_iter: int = Field(20, ge=1)
    theta: Optional[float] = Field(None, ge=0)
    thetas: List[float] = list(THETA_SCHEDULE)
    lambdas: List[float] = [1.0, 10.0, 100.0]
    metric: Optional[str] = None
    semantics: str = Semantics.FREEZE_AT_EXIT
    bridge_correction: bool = False
    threads: int = Field(1, ge=1)
    transport: TransportSolverOptions = Field(default_factory=lambda: TransportSolverOptions(max_atoms=DEFAULT_COARSEN_ATOMS))


class TestFunctionSpec(BaseModel):
    __test__ = False

    kind: str = 'sine'
    k: int = Field(1, ge=1)

    def build(self, domain: Domain) -> DirichletTestFunction:
        if self.kind == 'sine':
            return DirichletTestFunction.sine_mode(domain, self.k)
        if self.kind == 'zero':
            return DirichletTestFunction.zero(domain.dim)
        raise UnknownComponentError(f"unknown test function {self.kind!r}", known=list(_TEST_FUNCTIONS))


class OutputSpec(BaseModel):
    directory: str = 'out'
    save_flow: bool = True


class ExperimentConfig(BaseModel):
    command: Optional[str] = None
    env: str = Environment.LOCAL
    domain: DomainSpec = Field(default_factory=DomainSpec)
    coefficients: CoefficientSpec = Field(default_factory=CoefficientSpec)
    coefficients2: Optional[CoefficientSpec] = None
    initial: InitialSpec = Field(default_factory=InitialSpec)
    initial2: Optional[InitialSpec] = None
    grid: GridSpec = Field(default_factory=GridSpec)
    solver: SolverSpec = Field(default_factory=SolverSpec)
    test_function: TestFunctionSpec = Field(default_factory=TestFunctionSpec)
    output: OutputSpec = Field(default_factory=OutputSpec)
    tier: str = Tier.FAST
    tolerance_override: Optional[float] = None
    seed: int = 0
    logging: Optional[Dict[str, Any]] = None

    def check(self) -> 'ExperimentConfig':
        step = self.grid.T / self.grid.M
        ratio = step / self.grid.dt
        if not math.isclose(ratio, round(ratio), rel_tol=1e-9) or round(ratio) < 1:
            raise ConfigError(f"dt({self.grid.dt}) does not divide T/M({step})", field='grid.dt')
        if not 0 <= self.seed < MAX_SEED:
            raise ConfigError(f"seed({self.seed}) is not a 64-bit value", field='seed')
        if self.solver.semantics not in (Semantics.FREEZE_AT_EXIT, Semantics.INDICATOR_GATED):
            raise UnknownComponentError(f"unknown killing semantics {self.solver.semantics!r}")
        if self.tier not in (Tier.FAST, Tier.FULL):
            raise UnknownComponentError(f"unknown tier {self.tier!r}")
        for spec in (self.coefficients, self.coefficients2):
            if spec is not None and spec.family not in COEFFICIENT_FAMILIES:
                raise UnknownComponentError(f"unknown coefficient family {spec.family!r}",
                                            known=sorted(COEFFICIENT_FAMILIES))
        for spec in (self.initial, self.initial2):
            if spec is not None and spec.kind not in _INITIAL_KINDS:
                raise UnknownComponentError(f"unknown initial law {spec.kind!r}", known=list(_INITIAL_KINDS))
        if self.test_function.kind not in _TEST_FUNCTIONS:
            raise UnknownComponentError(f"unknown test function {self.test_function.kind!r}",
                                        known=list(_TEST_FUNCTIONS))
        return self

    def build_domain(self) -> Domain:
        return domain_from_spec(self.domain)

    def build_coefficients(self, second: bool = False) -> CoefficientField:
        spec = self.coefficients2 if second and self.coefficients2 is not None else self.coefficients
        return coefficient_from_spec(spec, self.build_domain().dim)

    def build_initial(self, domain: Domain, second: bool = False) -> SubProbMeasure:
        spec = self.initial2 if second and self.initial2 is not None else self.initial
        return spec.build(domain, self.solver.particles)

    @property
    def simulation(self) -> SimulationOptions:
        return SimulationOptions(dt=self.grid.dt, semantics=self.solver.semantics,
                                 bridge_correction=self.solver.bridge_correction)

    def picard_config(self) -> PicardConfig:
        s = self.solver
        return PicardConfig(theta=s.theta, tol=s.tol, max_iter=s.max_iter, particles=s.particles, dt=self.grid.dt,
                            T=self.grid.T, M=self.grid.M, metric=s.metric, semantics=s.semantics,
                            bridge_correction=s.bridge_correction, seed=self.seed, threads=s.threads,
                            transport=s.transport)


def _ini_value(raw: str) -> Any:
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw


def _read_ini(path: Path) -> Dict[str, Any]:
    parser = ConfigParser()
    # field names are case sensitive (grid.T, grid.M)
    parser.optionxform = str
    try:
        parser.read(str(path.resolve()))
    except ConfigParserError as e:
        raise ConfigError(str(e), line=getattr(e, 'lineno', None), path=str(path))
    content: Dict[str, Any] = {}
    for section in parser.sections():
        # dotted sections nest: [solver.transport]
        target = content
        for part in section.split('.'):
            target = target.setdefault(part, {})
        for option in parser.options(section):
            target[option] = _ini_value(parser.get(section, option))
    top = content.pop('experiment', {})
    top.update(content)
    return top


def _read_yaml(path: Path) -> Dict[str, Any]:
    with path.open() as f:
        try:
            content = yaml.safe_load(f)
        except yaml.YAMLError as e:
            mark = getattr(e, 'problem_mark', None)
            raise ConfigError(str(getattr(e, 'problem', None) or e),
                              line=None if mark is None else mark.line + 1,
                              column=None if mark is None else mark.column + 1,
                              path=str(path))
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise ConfigError("config file must hold a mapping at the top level", path=str(path))
    return content


def parse_config(content: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    content = dict(content)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == 'threads':
            content.setdefault('solver', {})
            content['solver'] = dict(content['solver'], threads=value)
        elif key == 'out':
            content['output'] = dict(content.get('output') or {}, directory=value)
        else:
            content[key] = value
    try:
        config = ExperimentConfig(**content)
    except ValidationError as e:
        first = e.errors()[0]
        field = '.'.join(str(part) for part in first['loc'])
        raise ConfigError(f"{field}: {first['msg']}", field=field)
    return config.check()


def load_config(config_file: Union[str, Path],
                env: str = Environment.LOCAL,
                overrides: Optional[Dict[str, Any]] = None,
                ) -> ExperimentConfig:
    if isinstance(config_file, str):
        config_file = Path(config_file)
    config_file = config_file.parent / config_file.name.format(env=env)
    if not config_file.exists():
        raise ConfigError(f"config file {str(config_file)!r} does not exist")

    suf = config_file.suffix
    if suf == '.ini':
        content = _read_ini(config_file)
    elif suf in ('.yml', '.yaml'):
        content = _read_yaml(config_file)
    else:
        raise ConfigError(f"not supported config file type {suf!r}")
    content.setdefault('env', env)
    return parse_config(content, overrides)
