import logging
import sys
from argparse import ArgumentParser
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, Union

from pydantic import BaseModel

from kdsde.components.config import ExperimentConfig, load_config, parse_config
from kdsde.components.exceptions import ConfigError, KdsdeError, UnknownComponentError
from kdsde.components.handlers import (
    AcceptHandler,
    BaseCommandHandler,
    CoupleHandler,
    DistHandler,
    FpResidualHandler,
    GirsanovCheckHandler,
    PicardHandler,
    SimulateHandler,
    ValidateHandler,
)
from kdsde.components.status import UsageStatus
from kdsde.constants import DEFAULT_LOGGING_FORMAT, DEFAULT_LOGGING_FILE_INTERVAL, DEFAULT_LOGGING_FILE_ENCODING, \
    DEFAULT_LOGGING_FILE_DELAY, DEFAULT_LOGGING_FILE_WHEN, DEFAULT_LOGGING_LEVEL, Environment, Tier
from kdsde.log import app_logger, diag_logger, sde_logger, solver_logger, transport_logger

__all__ = ('KdsdeApplication', 'LoggingConfig', 'DEFAULT_ROUTES', 'run_experiment')

_LOGGERS = {
    'app': app_logger,
    'sde': sde_logger,
    'transport': transport_logger,
    'solver': solver_logger,
    'diag': diag_logger,
}

DEFAULT_ROUTES = [
    ('simulate', SimulateHandler),
    ('picard', PicardHandler),
    ('couple', CoupleHandler),
    ('dist', DistHandler),
    ('girsanov-check', GirsanovCheckHandler),
    ('validate', ValidateHandler),
    ('fp-residual', FpResidualHandler),
    ('accept', AcceptHandler),
]


class LoggingConfig(BaseModel):
    class LoggingFileConfig(BaseModel):
        path: Union[str, Path]
        when: str = DEFAULT_LOGGING_FILE_WHEN
        interval: int = DEFAULT_LOGGING_FILE_INTERVAL
        delay: bool = DEFAULT_LOGGING_FILE_DELAY
        encoding: str = DEFAULT_LOGGING_FILE_ENCODING

    adding_stream: bool = True
    format: str = DEFAULT_LOGGING_FORMAT
    level: int = DEFAULT_LOGGING_LEVEL
    file: Optional[LoggingFileConfig] = None


class _ArgumentParser(ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


class KdsdeApplication:
    def __init__(self, *,
                 routes: List[Tuple[str, Type[BaseCommandHandler]]] = None,
                 app_name: str = 'kdsde',
                 env: str = Environment.LOCAL,
                 config_file: Optional[Union[str, Path]] = None,
                 logging_config: Union[LoggingConfig, Dict[str, LoggingConfig]] = None,
                 argv: Optional[List[str]] = None,
                 ) -> None:
        self._app_name = app_name
        self._env = env
        self._routes = routes if routes is not None else DEFAULT_ROUTES
        self._handlers: Dict[str, Type[BaseCommandHandler]] = {}
        self._config_file = config_file
        self._logging_config = logging_config
        self._argv = sys.argv[1:] if argv is None else list(argv)
        self._command: Optional[str] = None
        self._overrides: Dict[str, Any] = {}
        self._config: Optional[ExperimentConfig] = None
        self._usage_error: Optional[KdsdeError] = None

        try:
            self._init_sys_argv()
        except KdsdeError as e:
            self._usage_error = e
        self._init_routes()

    def _init_logging(self) -> None:
        configs = self._config.logging if self._config is not None and self._config.logging else \
            self._logging_config

        if not configs:
            configs = {'app': LoggingConfig()}
        elif isinstance(configs, LoggingConfig):
            configs = {'app': configs}

        for name, logger in _LOGGERS.items():
            logger.name = f'{self._app_name}.{name}'

            cfg = configs.get(name, None)
            if not cfg:
                cfg = LoggingConfig()
            elif isinstance(cfg, dict):
                cfg = LoggingConfig(**cfg)

            formatter = logging.Formatter(cfg.format)
            for hdr in list(logger.handlers):
                logger.removeHandler(hdr)

            if cfg.adding_stream:
                hdr = logging.StreamHandler()
                hdr.setFormatter(formatter)
                logger.addHandler(hdr)

            if cfg.file:
                file_path = cfg.file.path if isinstance(cfg.file.path, Path) else Path(cfg.file.path)
                if not file_path.exists():
                    file_path.open('a').close()
                hdr = TimedRotatingFileHandler(
                    str(file_path.resolve()),
                    when=cfg.file.when,
                    interval=cfg.file.interval,
                    encoding=cfg.file.encoding,
                    delay=cfg.file.delay,
                )
                hdr.setFormatter(formatter)
                logger.addHandler(hdr)

            logger.setLevel(cfg.level)
            logger.propagate = False

    def _init_config(self) -> ExperimentConfig:
        overrides = dict(self._overrides, command=self._command)
        if self._config_file is None:
            return parse_config({'env': self._env}, overrides)
        return load_config(self._config_file, env=self._env, overrides=overrides)

    def _init_sys_argv(self) -> None:
        arg_parser = _ArgumentParser(
            prog=self._app_name,
            description=f'{self._app_name.capitalize()} killed distribution-dependent SDE experiments',
        )
        arg_parser.add_argument('command', help='experiment to run')
        arg_parser.add_argument(
            '-c', '--config',
            help='YAML or INI experiment file, may contain {env} (default: %(default)r)',
            default=self._config_file,
        )
        arg_parser.add_argument(
            '-e', '--env',
            help='Config environment (default: %(default)r)',
            default=self._env,
        )
        arg_parser.add_argument('--seed', type=int, help='override the config seed')
        arg_parser.add_argument('--threads', type=int, help='worker threads for per-node transport')
        arg_parser.add_argument('--out', help='output directory')
        arg_parser.add_argument('--tier', choices=(Tier.FAST, Tier.FULL), help='acceptance tier')
        arg_parser.add_argument('--tolerance', type=float, help='override every acceptance threshold')
        args, extra_argv = arg_parser.parse_known_args(self._argv)
        self._command = args.command
        self._config_file = args.config
        self._env = args.env
        self._overrides = {'seed': args.seed, 'threads': args.threads, 'out': args.out, 'tier': args.tier,
                           'tolerance_override': args.tolerance}
        self.init_extra_sys_argv(extra_argv)

    def init_extra_sys_argv(self, extra_args: List[str]) -> None:
        """
        override to custom system arguments value
        """
        if extra_args:
            raise ConfigError(f"usage: unrecognized arguments {extra_args}")

    def _init_routes(self) -> None:
        for command, handler_cls in self._routes:
            if not issubclass(handler_cls, BaseCommandHandler):
                raise TypeError(f"{handler_cls!r} is not a command handler")
            handler_cls.command = command
            self._handlers[command] = handler_cls

    @property
    def commands(self) -> List[str]:
        return list(self._handlers)

    @property
    def config(self) -> Optional[ExperimentConfig]:
        return self._config

    def run(self) -> int:
        """run the selected command; every failure ends as an exit code"""
        if self._usage_error is not None:
            self._init_logging()
            app_logger.error(f"{self._usage_error}")
            return self._usage_error.exit_code
        try:
            if self._command not in self._handlers:
                raise UnknownComponentError(f"unknown command {self._command!r}", known=self.commands)
            self._config = self._init_config()
            self._init_logging()
            handler = self._handlers[self._command](self._config)
            app_logger.info(f"{self._command}: seed {self._config.seed}, output {handler.out_dir}")
            status = handler.handle()
            handler.manifest(status)
        except KdsdeError as e:
            self._init_logging()
            seed = self._config.seed if self._config is not None else self._overrides.get('seed')
            app_logger.error(f"{self._command} failed (config={self._config_file}, seed={seed}): {e}")
            return e.exit_code
        app_logger.info(f"{self._command}: {status.reason}")
        return status.code


def run_experiment(config_path: Union[str, Path], command: Optional[str] = None, env: str = Environment.LOCAL) -> int:
    """
    Run ``command``, or the command named in the experiment file, and return
    its exit status. Outputs go to the file's output directory.
    """
    if command is None:
        try:
            command = load_config(config_path, env=env).command
        except KdsdeError as e:
            app_logger.error(f"cannot read {config_path}: {e}")
            return e.exit_code
    if not command:
        app_logger.error(f"{config_path} names no command")
        return UsageStatus.code
    return KdsdeApplication(config_file=config_path, env=env, argv=[command, '-c', str(config_path)]).run()
