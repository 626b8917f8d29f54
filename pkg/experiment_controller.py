import importlib
import inspect
import json
import math
import os
import pkgutil
import sys
import time
import warnings
from typing import Any

import numpy as np

try:
    from .report_writer import ReportWriter
    from .run_config import RunConfig, build_system, default_horizon, initial_segments, load_config
    from .sfde.errors import ConfigError, NumericalError, SfdeError, UnknownNameError
    from .sfde.measure.algorithms import GRID_TOL, SystemSpec
    from .sfde.presets.templates import BasePresetTemplate
    from .sfde.resolvent.algorithms import ResolventTable, compute_resolvent
    from .sfde.spectral.algorithms import StabilityCertificate, certify, contraction_bound, default_alpha_grid, spectral_abscissa
    from .sfde.stochastic import algorithms as stochastic
    from .sfde.stochastic.ensembles import mc_moments
    from .sfde.stochastic.paths import derive_seed, sample_path
    from .utils.string_matching import closest_name
except ImportError:
    from report_writer import ReportWriter
    from run_config import RunConfig, build_system, default_horizon, initial_segments, load_config
    from sfde.errors import ConfigError, NumericalError, SfdeError, UnknownNameError
    from sfde.measure.algorithms import GRID_TOL, SystemSpec
    from sfde.presets.templates import BasePresetTemplate
    from sfde.resolvent.algorithms import ResolventTable, compute_resolvent
    from sfde.spectral.algorithms import StabilityCertificate, certify, contraction_bound, default_alpha_grid, spectral_abscissa
    from sfde.stochastic import algorithms as stochastic
    from sfde.stochastic.ensembles import mc_moments
    from sfde.stochastic.paths import derive_seed, sample_path
    from utils.string_matching import closest_name

COMMANDS = ("analyze", "resolvent", "simulate", "pullback", "equilibrium", "moments", "synchronize", "tempered", "presets")

DEFAULT_TIMES = {
    "pullback": [5.0, 10.0, 15.0, 20.0],
    "equilibrium": [1.0, 2.0, 5.0],
    "tempered": [-20.0, -10.0, 0.0, 10.0, 20.0],
}


def _on_grid(t: float, h: float) -> float:
    return math.ceil(t / h - GRID_TOL) * h


class ExperimentController:
    def __init__(self, quiet: bool = False):
        """
        Args:
            quiet: suppress progress messages on standard error.
        """
        self.quiet: bool = quiet
        self.presets: dict[str, type[BasePresetTemplate]] = {}
        self.load_presets()

    def log(self, message: str) -> None:
        if not self.quiet:
            print(message, file=sys.stderr)

    def load_presets(self):
        """
        Scans the 'sfde.presets' package, imports every module in it and
        registers all classes that inherit from BasePresetTemplate.
        """
        self.log("Loading experiment presets...")
        self.presets = {}

        try:
            from .sfde import presets
        except ImportError:
            from sfde import presets

        package_path = os.path.dirname(presets.__file__)
        for _, module_name, is_pkg in pkgutil.iter_modules([package_path]):
            if is_pkg:
                continue
            try:
                module = importlib.import_module(f"{presets.__name__}.{module_name}")
            except ImportError as e:
                self.log(f"Warning: Could not load presets from {module_name}. {e}")
                continue

            for name, cls in inspect.getmembers(module, inspect.isclass):
                if issubclass(cls, BasePresetTemplate) and cls is not BasePresetTemplate:
                    self.presets[cls.id] = cls
                    self.log(f"  - Found preset: {cls.id} ({name})")

    # --- Configuration ---

    def resolve_config(self, args: Any) -> RunConfig:
        """Preset or config file, then command-line overrides."""
        if args.preset and args.config:
            raise ConfigError("give either --preset or --config, not both")
        if args.preset:
            if args.preset not in self.presets:
                raise UnknownNameError(f"unknown preset {args.preset!r}", closest_name(args.preset, list(self.presets)))
            config = self.presets[args.preset]().generate(sigma=args.sigma)
        elif args.config:
            config = load_config(args.config)
            if args.sigma is not None:
                config.sigma = (args.sigma * np.eye(config.n, config.m)).tolist()
        else:
            raise ConfigError("a run needs --preset NAME or --config PATH")

        if args.replicas is not None:
            config.replicas = args.replicas
        if args.master_seed is not None:
            config.master_seed = args.master_seed
        return config

    def certificate(self, config: RunConfig, system: SystemSpec) -> tuple[StabilityCertificate, ResolventTable]:
        """Spectral abscissa, resolvent table on the default horizon and the certificate."""
        m = system.measure
        lipschitz = system.nonlinearity.lipschitz if system.nonlinearity is not None else 0.0
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            alpha0 = spectral_abscissa(m, config.abscissa_tol)
            self.log(f"  spectral abscissa ~ {alpha0:.6g}")
            grid = config.alpha_grid if config.alpha_grid is not None else default_alpha_grid(alpha0)
            horizon = config.horizon if config.horizon is not None else default_horizon(m.tau, grid)
            table = compute_resolvent(m, config.step, _on_grid(horizon, config.step))
            cert = certify(m, lipschitz, grid, table, config.safety, config.abscissa_tol, alpha0)
        for warning in caught:
            message = f"warning: {warning.message}"
            if message not in cert.diagnostics:
                cert.diagnostics.append(message)
        return (cert, table)

    # --- Dispatch ---

    def run(self, command: str, args: Any) -> int:
        """Runs one subcommand. Returns the process exit code."""
        if command not in COMMANDS:
            error = UnknownNameError(f"unknown command {command!r}", closest_name(command, list(COMMANDS)))
            return self.fail(error)

        self.log(f"Running {command}...")
        start_time = time.perf_counter()
        try:
            if command == "presets":
                self.list_presets()
            else:
                config = self.resolve_config(args)
                system = build_system(config)
                writer = ReportWriter(args.out)
                getattr(self, f"cmd_{command}")(config, system, writer, args)
                for path in writer.written:
                    self.log(f"  wrote {path}")
        except SfdeError as e:
            return self.fail(e)
        end_time = time.perf_counter()
        self.log(f"Finished {command} in {end_time - start_time:.2f} s")
        return 0

    def fail(self, error: SfdeError) -> int:
        print(json.dumps(error.to_json_dict()), file=sys.stderr)
        return error.exit_code

    def list_presets(self) -> None:
        for preset_id in sorted(self.presets):
            print(f"{preset_id}\t{self.presets[preset_id].description}")

    # --- Subcommands ---

    def cmd_analyze(self, config: RunConfig, system: SystemSpec, writer: ReportWriter, args: Any) -> None:
        cert, table = self.certificate(config, system)
        payload = cert.to_json_dict()
        payload["horizon"] = table.horizon
        writer.report(payload)

    def cmd_resolvent(self, config: RunConfig, system: SystemSpec, writer: ReportWriter, args: Any) -> None:
        horizon = args.T if args.T is not None else 20.0 * max(config.tau, 1.0)
        table = compute_resolvent(system.measure, config.step, _on_grid(horizon, config.step))
        writer.resolvent(table.times, table.values)

    def _path_seed(self, config: RunConfig, args: Any) -> int:
        return args.seed if args.seed is not None else derive_seed(config.master_seed, 0)

    def cmd_simulate(self, config: RunConfig, system: SystemSpec, writer: ReportWriter, args: Any) -> None:
        T = _on_grid(args.T if args.T is not None else 20.0, config.step)
        xi, _ = initial_segments(config)
        path = sample_path(self._path_seed(config, args), config.step, 0.0, T, system.noise_dim)
        trajectory, _ = stochastic.em_solve(system, path, xi, 0.0, T)
        writer.trajectory(trajectory.times, trajectory.values)

    def cmd_pullback(self, config: RunConfig, system: SystemSpec, writer: ReportWriter, args: Any) -> None:
        times = args.times or DEFAULT_TIMES["pullback"]
        reference = _on_grid(args.T if args.T is not None else 2.0 * max(times), config.step)
        xi, _ = initial_segments(config)
        path = sample_path(self._path_seed(config, args), config.step, -reference, 0.0, system.noise_dim)
        distances, slope = stochastic.pullback_distances(system, path, xi, times, reference)
        self.log(f"  fitted log-slope {slope:.6g} against pullback({reference:g})")
        writer.series(times, distances)

    def cmd_equilibrium(self, config: RunConfig, system: SystemSpec, writer: ReportWriter, args: Any) -> None:
        cert, _ = self.certificate(config, system)
        T_trunc = config.T_trunc or stochastic.default_truncation(system, cert, config.step)
        times = args.times or DEFAULT_TIMES["equilibrium"]
        path = sample_path(self._path_seed(config, args), config.step, -T_trunc, max(times), system.noise_dim)
        u = stochastic.stationary_segment(system, path, T_trunc, cert)
        self.log(f"  T_trunc = {u.truncation:g}, tail bound {u.tail_bound:.3g}")
        residuals = [stochastic.equilibrium_residual(system, path, u, t) for t in times]
        writer.series(times, residuals, "residual")

    def cmd_moments(self, config: RunConfig, system: SystemSpec, writer: ReportWriter, args: Any) -> None:
        cert, _ = self.certificate(config, system)
        stats = mc_moments(
            system,
            cert,
            config.replicas,
            config.master_seed,
            T_trunc=config.T_trunc,
            h=config.step,
            workers=args.workers,
        )
        payload = stats.to_json_dict()
        payload["alpha"] = cert.alpha_star
        payload["c_alpha"] = cert.c_alpha
        writer.report(payload)

    def cmd_synchronize(self, config: RunConfig, system: SystemSpec, writer: ReportWriter, args: Any) -> None:
        T = _on_grid(args.T if args.T is not None else 30.0, config.step)
        xi, eta = initial_segments(config)
        path = sample_path(self._path_seed(config, args), config.step, 0.0, T, system.noise_dim)
        result = stochastic.synchronize(system, path, xi, eta, T)
        self.log(
            f"  distance {result.initial_distance:.6g} at t=0 (segments), {result.distances[-1]:.6g} at t={T:g}"
        )
        if args.gnuplot and writer.out_path is None:
            writer.out_path = os.path.splitext(args.gnuplot)[0] + ".csv"
        xi_csv, eta_csv = writer.synchronization(result.first, result.second, result.distances)
        if args.gnuplot:
            writer.gnuplot_synchronization(args.gnuplot, xi_csv, eta_csv, writer.out_path)
            self.log(f"  gnuplot script written to {args.gnuplot}")

        self.report_contraction(config, system, path, xi, eta, T, result.initial_distance)

    def report_contraction(self, config, system, path, xi, eta, T: float, initial_distance: float) -> None:
        """Logs the fitted contraction slope next to the certified bound."""
        try:
            cert, _ = self.certificate(config, system)
        except NumericalError as e:
            self.log(f"  no contraction bound: {e}")
            return
        fit = stochastic.contraction_rate(system, path, xi, eta, T)
        note = " (converged to rounding level)" if fit.early_convergence else ""
        self.log(f"  fitted contraction slope {fit.slope:.6g}{note}, certified rate {cert.rate:.6g}")
        self.log(f"  bound K |xi - eta| e^{{rate T}} = {contraction_bound(cert, initial_distance, T):.6g}")

    def cmd_tempered(self, config: RunConfig, system: SystemSpec, writer: ReportWriter, args: Any) -> None:
        cert, _ = self.certificate(config, system)
        T_trunc = config.T_trunc or stochastic.default_truncation(system, cert, config.step)
        times = args.times or DEFAULT_TIMES["tempered"]
        path = sample_path(
            self._path_seed(config, args),
            config.step,
            min(0.0, min(times) - T_trunc),
            max(0.0, max(times)),
            system.noise_dim,
        )
        profile = stochastic.tempered_profile(system, path, T_trunc, args.gamma, times, cert)
        writer.series(times, profile, "tempered")

