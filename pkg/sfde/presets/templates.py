from typing import Any

try:
    from ...run_config import RunConfig
    from ..errors import ConfigError
except ImportError:
    from run_config import RunConfig
    from sfde.errors import ConfigError


# This is the Base Class for all experiment presets.
# The controller will look for classes that inherit from this.
class BasePresetTemplate:
    # The name used with --preset
    id: str = "base_preset"
    # One line shown by the 'presets' subcommand
    description: str = ""

    def __init__(self):
        # Values the preset pins; generate() lets callers override them
        self.params: dict[str, Any] = {}

    def generate(self, **overrides: Any) -> RunConfig:
        """
        Builds the run configuration of this preset.
        Keyword overrides replace RunConfig fields (e.g. sigma=0.5 or master_seed=7);
        a scalar sigma multiplies the identity noise.
        """
        raise NotImplementedError

    def _apply(self, config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "sigma" and not isinstance(value, list):
                value = [[float(value) if i == j else 0.0 for j in range(config.m)] for i in range(config.n)]
            if not hasattr(config, key):
                raise ConfigError(f"unknown preset override {key!r}")
            setattr(config, key, value)
        self.params = config.to_json_dict()
        return config


# --- Preset 1: scalar delayed feedback ---


class DelayedFeedbackPreset(BasePresetTemplate):
    """dx = [-2 x(t) + x(t-1)] dt + sigma dW."""

    id = "example61"
    description = "affine scalar system x' = -2x(t) + x(t-1) + sigma W', tau = 1"

    def generate(self, **overrides: Any) -> RunConfig:
        config = RunConfig(
            n=1,
            m=1,
            tau=1.0,
            atoms=[{"s": 0.0, "A": [[-2.0]]}, {"s": -1.0, "A": [[1.0]]}],
            sigma=[[1.0]],
            h=1.0 / 256,
            initial={"xi": ["sin(t)"], "eta": ["2*cos(t)"]},
        )
        return self._apply(config, overrides)


# --- Preset 2: delayed feedback with a sine nonlinearity ---


class SineFeedbackPreset(BasePresetTemplate):
    """dx = [-2 x(t) + x(t-1) + sin(x(t-1))/4] dt + sigma dW, certified at alpha = 0.4."""

    id = "example62"
    description = "nonlinear scalar system adding sin(x(t-1))/4 (L = 1/4), certified at alpha = 0.4"

    def generate(self, **overrides: Any) -> RunConfig:
        config = RunConfig(
            n=1,
            m=1,
            tau=1.0,
            atoms=[{"s": 0.0, "A": [[-2.0]]}, {"s": -1.0, "A": [[1.0]]}],
            sigma=[[1.0]],
            nonlinearity={"exprs": ["0.25*sin(x0@1.0)"], "lipschitz": 0.25},
            h=1.0 / 256,
            # |r(t)| <= e^{-0.4 t} holds with C = 1, no safety margin needed
            alpha_grid=[0.4],
            safety=1.0,
            initial={"xi": ["sin(t)"], "eta": ["2*cos(t)"]},
        )
        return self._apply(config, overrides)


# --- Preset 3: Ornstein-Uhlenbeck without delay ---


class ScalarOUPreset(BasePresetTemplate):
    id = "scalar_ou"
    description = "tau = 0, dx = -x dt + dW (stationary variance 1/2)"

    def generate(self, **overrides: Any) -> RunConfig:
        config = RunConfig(
            n=1,
            m=1,
            tau=0.0,
            atoms=[{"s": 0.0, "A": [[-1.0]]}],
            sigma=[[1.0]],
            h=1.0 / 256,
            initial={"xi": ["1"], "eta": ["-1"]},
        )
        return self._apply(config, overrides)


# --- Preset 4: pure delay ---


class PureDelayPreset(BasePresetTemplate):
    id = "pure_delay"
    description = "x' = -x(t-1) + sigma W', oscillatory decay"

    def generate(self, **overrides: Any) -> RunConfig:
        config = RunConfig(
            n=1,
            m=1,
            tau=1.0,
            atoms=[{"s": -1.0, "A": [[-1.0]]}],
            sigma=[[1.0]],
            h=1.0 / 256,
            initial={"xi": ["1"], "eta": ["0"]},
        )
        return self._apply(config, overrides)
