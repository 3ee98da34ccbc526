"""
Run Configuration Module

Line-oriented `[section]` / `key = value` configuration with profiles.

Resolution order: profile defaults, then the file, then command-line
overrides. Schedule bounds left unset are rescaled from the reference
bounds so that a T-step schedule accumulates the same noise as the
1000-step one.

This file is part of mambo.

mambo is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

mambo is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with mambo. If not, see <https://www.gnu.org/licenses/>.
"""

from __future__ import annotations

__author__ = "mambo contributors"
__license__ = "GPLv3"
__version__ = "1.0"

from typing import Any, Optional

from mambo.diffusion.sampler import SamplerPlan
from mambo.diffusion.schedule import NoiseSchedule, build_linear_schedule, scaled_bounds
from mambo.exec.utils import parse_int_list
from mambo.imaging.dataset import GeometryConfig
from mambo.mmio.errors import ConfigurationError
from mambo.models.unet import NetConfig
from mambo.tasks.anomaly import AnomalyConfig
from mambo.diffusion.training import TrainConfig

PROFILES = ('desk', 'paper', 'custom')

# Section -> ordered (key, type)
FIELDS: dict[str, list[tuple[str, str]]] = {
    'run': [('profile', 'str'), ('seed', 'int'), ('jobs', 'int')],
    'geometry': [('s', 'int'), ('k', 'int'), ('N', 'int'), ('overlap', 'int')],
    'schedule': [('timesteps', 'int'), ('beta_min', 'float'), ('beta_max', 'float'), ('sigma', 'str')],
    'network': [('base_channels', 'int'), ('channel_multipliers', 'ints'), ('time_embed_dim', 'int'), ('num_res_blocks', 'int'), ('attention', 'bool')],
    'train': [('learning_rate', 'float'), ('batch_size', 'int'), ('max_iterations', 'int'), ('checkpoint_every', 'int'), ('grad_clip', 'float'), ('ema_decay', 'float')],
    'sampler': [('plan', 'str'), ('stage2_channels', 'int')],
    'anomaly': [('lambda', 'int'), ('blur_sigma', 'float'), ('threshold_frac', 'float'), ('binarize_eps', 'float'), ('dark', 'bool')],
    'models': [('stage1', 'path'), ('stage2', 'path'), ('stage3', 'path')],
}

PAPER_DEFAULTS: dict[str, dict[str, Any]] = {
    'run': {'seed': 0, 'jobs': 1},
    'geometry': {'s': 256, 'k': 3, 'N': 3840, 'overlap': 32},
    'schedule': {'timesteps': 1000, 'sigma': 'beta'},
    'network': {'base_channels': 128, 'channel_multipliers': [1, 2, 2, 4, 4], 'time_embed_dim': 128, 'num_res_blocks': 2, 'attention': True},
    'train': {'learning_rate': 5e-5, 'batch_size': 8, 'max_iterations': 124500, 'checkpoint_every': 5000, 'grad_clip': 0.0, 'ema_decay': 0.0},
    'sampler': {'plan': 'ddim:150', 'stage2_channels': 3},
    'anomaly': {'lambda': 700, 'blur_sigma': 4.0, 'threshold_frac': 0.3, 'binarize_eps': 0.05, 'dark': False},
    'models': {'stage1': None, 'stage2': None, 'stage3': None},
}

DESK_OVERRIDES: dict[str, dict[str, Any]] = {
    'geometry': {'s': 32, 'k': 3, 'N': 288, 'overlap': 4},
    'schedule': {'timesteps': 200},
    'network': {'base_channels': 16, 'channel_multipliers': [1, 2, 4], 'time_embed_dim': 64, 'num_res_blocks': 1, 'attention': False},
    'train': {'learning_rate': 5e-4, 'max_iterations': 2000, 'checkpoint_every': 500},
    'sampler': {'plan': 'ddim:50'},
    'anomaly': {'lambda': 140, 'blur_sigma': 0.5},
}

# Keys a custom profile must state explicitly
CUSTOM_REQUIRED = [('geometry', key) for key, _ in FIELDS['geometry']] + [('schedule', 'timesteps')]


def profile_defaults(profile: str) -> dict[str, dict[str, Any]]:
    """ Expanded defaults of a profile.
    """
    if profile not in PROFILES:
        raise ConfigurationError("unknown profile '{}' (expected one of {})".format(profile, ', '.join(PROFILES)))

    values = {section: dict(keys) for section, keys in PAPER_DEFAULTS.items()}
    if profile == 'desk':
        for section, keys in DESK_OVERRIDES.items():
            values[section].update(keys)
    values['run']['profile'] = profile
    return values


def parse_value(text: str, kind: str) -> Any:
    text = text.strip()
    try:
        if kind == 'int':
            return int(text)
        if kind == 'float':
            return float(text)
        if kind == 'bool':
            if text.lower() not in ('true', 'false', 'yes', 'no', '1', '0'):
                raise ValueError(text)
            return text.lower() in ('true', 'yes', '1')
        if kind == 'ints':
            return list(parse_int_list(text))
        if kind == 'path':
            return text or None
        return text
    except ValueError:
        raise ConfigurationError("invalid {} value '{}'".format(kind, text))


def format_value(value: Any, kind: str) -> str:
    if value is None:
        return ''
    if kind == 'bool':
        return 'true' if value else 'false'
    if kind == 'ints':
        return ','.join(str(v) for v in value)
    if kind == 'float':
        return repr(float(value))
    return str(value)


class RunConfig:
    """ Resolved run configuration.

    Attributes
    ----------
    values : dict of str: dict of str: Any
        Resolved value of every key, per section.
    explicit : set of (str, str)
        Keys set by a file or an override.
    """

    def __init__(self, profile: str = 'desk') -> None:
        self.values: dict[str, dict[str, Any]] = profile_defaults(profile)
        self.explicit: set[tuple[str, str]] = set()

    @classmethod
    def from_file(cls, filename: str, overrides: Optional[list[tuple[str, str, str]]] = None) -> RunConfig:
        """ Parse a configuration file, then apply (section, key, value) overrides.
        """
        try:
            with open(filename, 'r', encoding='utf-8') as fp:
                text = fp.read()
        except OSError as error:
            raise ConfigurationError("cannot read configuration {} ({})".format(filename, error))

        return cls.from_text(text, overrides, source=filename)

    @classmethod
    def from_text(cls, text: str, overrides: Optional[list[tuple[str, str, str]]] = None, source: str = '<config>') -> RunConfig:
        entries = cls.parse_lines(text, source)
        overrides = overrides or []

        # The profile is expanded before any other key
        profile = 'desk'
        for section, key, value in entries + overrides:
            if (section, key) == ('run', 'profile'):
                profile = value.strip()

        config = cls(profile)
        for section, key, value in entries + overrides:
            config.set(section, key, value)

        config.resolve()
        return config

    @staticmethod
    def parse_lines(text: str, source: str) -> list[tuple[str, str, str]]:
        """ Parse `[section]` headers and `key = value` lines, `#` starts a comment.
        """
        entries, section = [], None

        for number, line in enumerate(text.splitlines(), start=1):
            content = line.split('#', 1)[0].strip()
            if not content:
                continue

            if content.startswith('['):
                if not content.endswith(']'):
                    raise ConfigurationError("{}:{}: malformed section header '{}'".format(source, number, content))
                section = content[1:-1].strip()
                if section not in FIELDS:
                    raise ConfigurationError("{}:{}: unknown section [{}]".format(source, number, section))
                continue

            key, sep, value = content.partition('=')
            if not sep:
                raise ConfigurationError("{}:{}: expected 'key = value', got '{}'".format(source, number, content))
            if section is None:
                raise ConfigurationError("{}:{}: key outside of any section".format(source, number))

            entries.append((section, key.strip(), value.strip()))

        return entries

    def kind(self, section: str, key: str) -> str:
        for name, kind in FIELDS.get(section, []):
            if name == key:
                return kind
        raise ConfigurationError("unknown key '{}' in section [{}]".format(key, section))

    def set(self, section: str, key: str, value: str) -> None:
        """ Set one key from its textual value.
        """
        self.values[section][key] = parse_value(value, self.kind(section, key))
        self.explicit.add((section, key))

    def resolve(self) -> None:
        """ Fill derived keys and validate.

        Raises
        ------
        ConfigurationError
            Missing keys of a custom profile or invalid values.
        """
        if self.values['run']['profile'] == 'custom':
            missing = ["{}.{}".format(*entry) for entry in CUSTOM_REQUIRED if entry not in self.explicit]
            if missing:
                raise ConfigurationError("custom profile needs explicit values for {}".format(', '.join(missing)))

        schedule = self.values['schedule']
        low, high = scaled_bounds(schedule['timesteps'])
        if ('schedule', 'beta_min') not in self.explicit:
            schedule['beta_min'] = low
        if ('schedule', 'beta_max') not in self.explicit:
            schedule['beta_max'] = high

        # Validation through the typed views
        self.geometry()
        self.schedule()
        self.net_config(3)
        self.plan()
        self.anomaly_config()
        if self.values['sampler']['stage2_channels'] not in (2, 3):
            raise ConfigurationError("stage2_channels must be 2 or 3")

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def serialize(self) -> str:
        """ Canonical text form: every section and key, in a fixed order.
        """
        lines = []
        for section, keys in FIELDS.items():
            lines.append("[{}]".format(section))
            for key, kind in keys:
                lines.append("{} = {}".format(key, format_value(self.values[section].get(key), kind)))
            lines.append("")
        return "\n".join(lines)

    def __str__(self) -> str:
        return self.serialize()

    def to_json(self) -> dict[str, dict[str, Any]]:
        return {section: {key: self.values[section].get(key) for key, _ in keys} for section, keys in FIELDS.items()}

    @property
    def seed(self) -> int:
        return self.values['run']['seed']

    def geometry(self) -> GeometryConfig:
        g = self.values['geometry']
        return GeometryConfig(g['s'], g['k'], g['N'], g['overlap'])

    def schedule(self) -> NoiseSchedule:
        sc = self.values['schedule']
        return build_linear_schedule(sc['timesteps'], sc['beta_min'], sc['beta_max'], sc['sigma'])

    def net_config(self, stage: int) -> NetConfig:
        """ Network hyperparameters for a stage (arity 1, stage2_channels or 3).
        """
        n = self.values['network']
        in_channels = {1: 1, 2: self.values['sampler']['stage2_channels'], 3: 3}[stage]
        return NetConfig(in_channels, n['base_channels'], list(n['channel_multipliers']), n['time_embed_dim'], self.values['geometry']['s'], n['num_res_blocks'], n['attention'])

    def train_config(self, stage: int, init_from: Optional[str] = None) -> TrainConfig:
        t = self.values['train']
        return TrainConfig(t['learning_rate'], t['batch_size'], t['max_iterations'], self.seed, stage, init_from, t['checkpoint_every'], t['grad_clip'], t['ema_decay'])

    def plan(self) -> SamplerPlan:
        return SamplerPlan.parse(self.values['sampler']['plan'])

    def anomaly_config(self) -> AnomalyConfig:
        a = self.values['anomaly']
        return AnomalyConfig(a['lambda'], a['blur_sigma'], a['threshold_frac'], a['binarize_eps'], a['dark'])
