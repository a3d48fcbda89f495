"""Handles user configuration common to the different subcommands."""
import io
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from vecsketch import logger
from vecsketch.config import Config, ConfigError, Opt
from vecsketch.sketch import DEFAULT_BEND_THRESHOLD, DEFAULT_MAX_LEN


__all__ = [
    'LOGGER',
    'OPTIONS',
    'resolve',
    'parse_assignments',
]

LOGGER = logger.get_logger(__name__)


def parse_assignments(pairs: Iterable[str]) -> Dict[str, Any]:
    """Parse name=value flags. Values are read as JSON where possible, else kept as text."""
    result: Dict[str, Any] = {}
    for pair in pairs:
        name, sep, text = pair.partition('=')
        if not sep or not name.strip():
            raise ConfigError(f'Expected name=value, not "{pair}"!')
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        result[name.strip()] = value
    return result


def resolve(
    config_file: Optional[Path]=None,
    flags: Optional[Dict[str, Any]]=None,
) -> Config:
    """Build the run config.

    Values in the config file win over command-line flags, which win over
    the defaults. The resolved options and their hash are logged.
    """
    values: Dict[str, Any] = {}
    for name, value in (flags or {}).items():
        if value is not None:
            values[name.casefold()] = value

    path = None
    if config_file is not None:
        path = Path(config_file)
        LOGGER.info('Config path: "{}"', path.absolute())
        try:
            text = path.read_text(encoding='utf8')
        except FileNotFoundError:
            raise ConfigError(f'Config file "{path}" does not exist!') from None
        from_file = Config.parse(OPTIONS, io.StringIO(text), path)
        # Only keys present in the file override flags.
        for name in json.loads(text).get('options', {}):
            if name.casefold() in from_file.settings:
                values[name.casefold()] = from_file.settings[name.casefold()]

    conf = Config(OPTIONS)
    unknown = sorted(set(values) - {opt.id for opt in OPTIONS})
    if unknown:
        raise ConfigError('Unknown option(s): {}'.format(', '.join(unknown)))
    conf.load(values)
    conf.path = path
    LOGGER.info(
        'Resolved config (hash {}):\n{}',
        conf.content_hash(),
        '\n'.join(f'{name} = {value!r}' for name, value in conf.as_dict().items()),
    )
    return conf


OPTIONS = [
    Opt(
        'seed', 0,
        """Seed for every random choice: initialisation, shuffling, noise and sampling.
        Two runs with the same config and seed produce identical files.
    """),
    Opt(
        'workers', 1,
        """Number of threads for per-stroke and per-example work.
        Results are reduced in input order, so any value gives the same output.
    """),
    # Preprocessing
    Opt(
        'max_stroke_len', DEFAULT_MAX_LEN,
        """Strokes with more points than this are cut into pieces.
    """),
    Opt(
        'bend_threshold', DEFAULT_BEND_THRESHOLD,
        """Turning angle in radians above which a point counts as a sharp bend.
        Strokes are cut so each piece holds at most one bend.
    """),
    Opt(
        'unit_scale', True,
        """Scale each sketch so the larger side of its bounding box is 1.
    """),
    Opt(
        'test_fraction', 0.1,
        """Fraction of sketches held out by the split command.
    """),
    # Encoder
    Opt(
        'encoder_hidden', 256,
        """Hidden size of each direction of the encoder's recurrent cells.
    """),
    Opt(
        'min_degree', 3,
        """Lowest curve degree the encoder predicts.
    """),
    Opt(
        'max_degree', 9,
        """Highest curve degree the encoder predicts.
    """),
    Opt(
        'beta', 1e-3,
        """Weight of the control polygon smoothness penalty.
    """),
    Opt(
        'tolerance', 1e-3,
        """Per-point loss below which the lowest sufficient degree is chosen.
    """),
    Opt(
        'cell', 'gru',
        """Recurrent cell type, "gru" or "tanh".
    """),
    Opt(
        'delta_features', True,
        """Feed the encoder point differences as well as positions.
    """),
    Opt(
        'optimizer', 'adam',
        """Training optimiser, "adam" or "sgd".
    """),
    Opt(
        'encoder_lr', 1e-3,
        """Encoder learning rate.
    """),
    Opt(
        'clip', 1.0,
        """Global gradient norm above which gradients are scaled down.
    """),
    Opt(
        'encoder_epochs', 20,
        """Passes over the encoder training data.
    """),
    Opt(
        'batch_size', 16,
        """Examples per minibatch.
    """),
    Opt(
        'synthetic', 0,
        """Random Bézier strokes added to the encoder training data.
    """),
    Opt(
        'embed_mode', 'multi',
        """How encode picks degrees: "multi" chooses per stroke, "fixed" uses fixed_degree.
    """),
    Opt(
        'fixed_degree', 9,
        """The degree used by "fixed" embedding.
    """),
    # Classical fitting
    Opt(
        'fit_degree', 3,
        """Degree used by the fit and snapshot-fit commands.
    """),
    Opt(
        'oracle_max_iter', 50,
        """Maximum alternation rounds of the classical fitter.
    """),
    Opt(
        'oracle_tolerance', 1e-9,
        """Relative loss change below which the classical fitter stops.
    """),
    Opt(
        'oracle_newton_iters', 8,
        """Newton steps per foot-point projection.
    """),
    Opt(
        'oracle_ridge', 1e-9,
        """Ridge term added to the control point normal equations.
    """),
    Opt(
        'oracle_pin_endpoints', True,
        """Fix the first and last control points to the stroke's end points.
    """),
    Opt(
        'snapshot_every', 5,
        """Training steps between frames written by snapshot-fit.
    """),
    Opt(
        'snapshot_steps', 100,
        """Total training steps run by snapshot-fit.
    """),
    # Generator
    Opt(
        'mode', 'stroke',
        """Generator sequence layout: "stroke" or "cp" (control points).
    """),
    Opt(
        'latent', 128,
        """Latent code dimension.
    """),
    Opt(
        'gen_enc_hidden', 256,
        """Hidden size of each direction of the generator's encoder.
    """),
    Opt(
        'gen_dec_hidden', 512,
        """Hidden size of the generator's decoder.
    """),
    Opt(
        'mixtures', 10,
        """Gaussian components per decoder step.
    """),
    Opt(
        'nmax', 64,
        """Maximum sequence length. Longer training sketches are skipped.
    """),
    Opt(
        'stroke_degree', 9,
        """Fixed degree of every stroke in stroke mode.
    """),
    Opt(
        'kl_weight', 1.0,
        """Final weight of the KL term, reached after the warm-up.
    """),
    Opt(
        'free_bits', 0.05,
        """Floor of the KL term, below which it is not penalised.
    """),
    Opt(
        'temperature', 0.65,
        """Sampling temperature. Lower values give tidier, less varied sketches.
    """),
    Opt(
        'augment_scale', 0.01,
        """Standard deviation of the noise added to control points each epoch.
    """),
    Opt(
        'generator_lr', 1e-3,
        """Generator learning rate.
    """),
    Opt(
        'generator_epochs', 50,
        """Passes over the generator training data.
    """),
    Opt(
        'samples', 16,
        """Sketches drawn by the sample command.
    """),
    # Rendering and evaluation
    Opt(
        'svg_resolution', 64,
        """Points per curve for polyline rendering.
    """),
    Opt(
        'canvas_size', 256,
        """Displayed SVG width and height, in pixels.
    """),
    Opt(
        'svg_mode', 'subdivide',
        """How curves above degree 3 are written: "subdivide" or "polyline".
    """),
    Opt(
        'raster_size', 64,
        """Raster side length for FID features.
    """),
    Opt(
        'feature', 'raster',
        """FID feature: "raster" (block averages) or "hog" (orientation histograms).
    """),
    Opt(
        'feature_grid', 16,
        """Grid side the raster is averaged down to.
    """),
    Opt(
        'fid_half_width', 20,
        """Real sketches within this many points of the bucket length are compared.
    """),
    Opt(
        'fid_count', 0,
        """Generated samples per bucket. 0 matches the real bucket size.
    """),
    Opt(
        'hist_bin_width', 10,
        """Width of the length histogram bins.
    """),
]
