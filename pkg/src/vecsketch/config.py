"""Option-based configuration system.

A list of options are declared up front, each parsing to a basic type.
Configs are stored as JSON, and hash to a stable digest so checkpoints and
run manifests can record exactly which settings produced them.
"""
import hashlib
import inspect
import json
from enum import Enum
from pathlib import Path
from typing import TypeVar, Union, Any, List, Type, Optional, Dict, IO, Mapping, overload

from vecsketch import VecSketchError, conv_bool
from vecsketch.logger import get_logger

LOGGER = get_logger(__name__)
CONFIG_VERSION = 1


class ConfigError(VecSketchError, ValueError):
    """An option was unknown, had the wrong type, or the file was invalid."""
    category = 'config'


class TYPE(Enum):
    """The types options can have."""
    STR = str
    INT = int
    FLOAT = float
    BOOL = bool

    def convert(self, value: Any) -> Any:
        """Convert a raw value to the desired option type."""
        if self is TYPE.BOOL:
            result = conv_bool(value, None)
            if result is None:
                raise ValueError(f'"{value}" is not a boolean.')
            return result
        if self is TYPE.INT and isinstance(value, float):
            if not value.is_integer():
                raise ValueError(f'{value} is not a whole number.')
            return int(value)
        if self is TYPE.INT and isinstance(value, bool):
            raise ValueError('Booleans are not whole numbers.')
        return self.value(value)


TYPE_NAMES = {
    TYPE.STR: 'Text',
    TYPE.INT: 'Whole Number',
    TYPE.FLOAT: 'Decimal Number',
    TYPE.BOOL: 'True/False',
}

OptionT = TypeVar('OptionT', str, int, float, bool)
EnumT = TypeVar('EnumT', bound=Enum)


class Opt:
    """A type of option that can be chosen."""
    default: Union[None, str, int, float, bool]

    def __init__(
        self,
        opt_id: str,
        default: Union[TYPE, OptionT],
        doc: str,
        fallback: Optional[str]=None,
    ) -> None:
        if isinstance(default, TYPE):
            self.type = default
            self.default = None
        else:
            self.type = TYPE(type(default))
            self.default = default
        self.id = opt_id.casefold()
        self.name = opt_id
        self.fallback = fallback
        # Remove indentation, and trailing carriage return
        self.doc = inspect.cleandoc(doc).rstrip().splitlines()
        if fallback is not None:
            self.doc.append(f'If unset, the value of `{fallback}` is used.')


class Config:
    """Holds the resolved value for each of a set of options."""
    def __init__(self, defaults: Union[List[Opt], 'Config']) -> None:
        if isinstance(defaults, Config):
            self.defaults: List[Opt] = defaults.defaults
        else:
            self.defaults = defaults

        self.settings: Dict[str, Union[None, str, int, float, bool]] = {}
        self.path: Optional[Path] = None

        options = {opt.id: opt for opt in self.defaults}
        if len(options) != len(self.defaults):
            from collections import Counter
            raise ConfigError('Duplicate option(s)! ({})'.format(', '.join(
                k for k, v in
                Counter(opt.id for opt in self.defaults).items()
                if v > 1
            )))
        self._options = options
        self.load({})

    def load(self, values: Mapping[str, Any]) -> None:
        """Reset to the defaults, then apply the given values."""
        self.settings.clear()
        set_vals = {key.casefold(): value for key, value in values.items()}

        fallback_opts = []
        for opt in self.defaults:
            try:
                value = set_vals.pop(opt.id)
            except KeyError:
                if opt.fallback is not None:
                    fallback_opts.append(opt)
                    assert opt.fallback in self._options, 'Invalid fallback in ' + opt.id
                else:
                    self.settings[opt.id] = opt.default
                continue
            self.settings[opt.id] = self._convert(opt, value)

        for opt in fallback_opts:
            assert opt.fallback is not None
            if opt.type is not self._options[opt.fallback].type:
                raise ConfigError(
                    f'"{opt.id}" cannot fall back to "{opt.fallback}" - different type!'
                )
            self.settings[opt.id] = self.settings[opt.fallback]

        if set_vals:
            LOGGER.warning('Extra config options: {}', sorted(set_vals))

    @staticmethod
    def _convert(opt: Opt, value: Any) -> Union[None, str, int, float, bool]:
        """Convert a raw value, failing loudly rather than keeping the default."""
        if value is None:
            return None
        try:
            return opt.type.convert(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(
                f'Option "{opt.name}" expects {TYPE_NAMES[opt.type]}, not {value!r}: {exc}'
            ) from None

    def set_opt(self, opt_name: str, value: Any) -> None:
        """Set an option to a specific value."""
        try:
            opt = self._options[opt_name.casefold()]
        except KeyError:
            raise ConfigError(f'Invalid option name "{opt_name}"!') from None
        self.settings[opt.id] = self._convert(opt, value)

    def is_default(self, opt_name: str) -> bool:
        """Check if the option still has its declared default."""
        opt = self._options[opt_name.casefold()]
        return self.settings[opt.id] == opt.default

    @overload
    def get(self, expected_type: Type[EnumT], name: str) -> EnumT: ...
    @overload
    def get(self, expected_type: Type[OptionT], name: str) -> OptionT: ...

    def get(self, expected_type: type, name: str) -> Any:
        """Get the given option.

        expected_type should be the class of the value that's expected.
        Floats also accept whole-number options. If expected_type is an Enum,
        the text value is converted to a member, raising ConfigError if invalid.
        """
        try:
            val = self.settings[name.casefold()]
        except KeyError:
            raise ConfigError(f'Option "{name}" does not exist!') from None

        if val is None:
            return None

        if issubclass(expected_type, Enum):
            enum_type: Optional[Type[Enum]] = expected_type
            expected_type = str
        else:
            enum_type = None

        if expected_type is float and type(val) is int:
            val = float(val)

        # Don't allow subclasses (bool/int)
        if type(val) is not expected_type:
            raise ConfigError('Option "{}" is {} (code expected {})'.format(
                name,
                type(val).__name__,
                expected_type.__name__,
            ))

        if enum_type is not None:
            try:
                return enum_type(val)
            except ValueError:
                raise ConfigError(
                    'Option "{}" is not a valid value. Allowed values are: {}'.format(
                        name, ', '.join([str(mem.value) for mem in enum_type]),
                    )
                ) from None
        return val

    def as_dict(self) -> Dict[str, Any]:
        """Return the settings in declaration order."""
        return {opt.name: self.settings[opt.id] for opt in self.defaults}

    def content_hash(self) -> str:
        """A SHA-256 digest of the resolved settings, independent of file layout."""
        text = json.dumps(self.as_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(text.encode('utf8')).hexdigest()

    def dumps(self) -> str:
        """Write the resolved options as JSON text."""
        return json.dumps(
            {'version': CONFIG_VERSION, 'options': self.as_dict()},
            indent=2,
        ) + '\n'

    def save(self, file: IO[str]) -> None:
        """Write the current config out to the given file."""
        file.write(self.dumps())

    def describe(self) -> str:
        """Produce the human-readable option reference, with documentation."""
        lines = []
        for option in self.defaults:
            lines.append(f'{option.name} ({TYPE_NAMES[option.type]}), default {option.default!r}:')
            lines.extend('    ' + line for line in option.doc)
        return '\n'.join(lines)

    @classmethod
    def parse(cls, defaults: List[Opt], file: IO[str], path: Optional[Path]=None) -> 'Config':
        """Read a JSON config file."""
        try:
            data = json.load(file)
        except json.JSONDecodeError as exc:
            raise ConfigError(f'Config file "{path}" is not valid JSON: {exc}') from None
        if not isinstance(data, dict):
            raise ConfigError(f'Config file "{path}" must contain an object!')
        version = data.get('version', CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f'Unknown config version {version!r} in "{path}"!')
        options = data.get('options', {})
        if not isinstance(options, dict):
            raise ConfigError(f'"options" in "{path}" must be an object!')
        conf = cls(defaults)
        conf.path = path
        conf.load(options)
        return conf
