"""The vecsketch command line: ingest, fit, train, sample, render and evaluate sketches.

Every command resolves its config (file over flags over defaults), logs it,
and writes a manifest next to its outputs recording the config, seed and
input hashes. `vecsketch replay <manifest>` re-runs a stage from one.

Failures print one line, `error: <category>: <message>`, and exit with
2 (config), 3 (io), 4 (numeric) or 5 (model).
"""
import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import attr
import numpy as np

from vecsketch import AtomicWriter, VecSketchError, __version__, logger
from vecsketch import encoder as enc_mod, generator as gen_mod
from vecsketch.bezier import EncodedStroke, eval_many
from vecsketch.config import Config, ConfigError
from vecsketch.evaluation import (
    FeatureSpec, fid_by_length, generator_sampler, length_histogram,
)
from vecsketch.fitting import OracleConfig, fit_sketch
from vecsketch.scripts import config as cli_config
from vecsketch.sketch import (
    EncodedSketch, StrokeSequence, dump_dataset, dump_encoded, load_dataset,
    load_encoded, parse_quickdraw_ndjson, preprocess,
)
from vecsketch.svg import SVGMode, to_svg
from vecsketch.synthetic import random_strokes, write_toy_ndjson

LOGGER = logger.get_logger(__name__, alias='cli')

EXIT_CODES = {
    'config': 2,
    'io': 3,
    'numeric': 4,
    'model': 5,
}
MANIFEST_VERSION = 1
# Namespace prefix of flags that set a config option.
OPTION_DEST = 'option_'
CfgT = TypeVar('CfgT')


class ReplayError(VecSketchError):
    """A manifest could not be replayed."""
    category = 'io'


def sha256_file(path: Path) -> str:
    """Hash a file's contents."""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


@attr.define
class Run:
    """One command invocation: its config, and the files it read and wrote."""
    command: str
    conf: Config
    argv: List[str]
    inputs: Dict[str, str] = attr.Factory(dict)
    outputs: List[str] = attr.Factory(list)

    @property
    def seed(self) -> int:
        """The run seed."""
        return self.conf.get(int, 'seed')

    @property
    def workers(self) -> int:
        """The worker count."""
        return max(1, self.conf.get(int, 'workers'))

    def read(self, path: str) -> Path:
        """Record an input file, returning its path."""
        file = Path(path)
        if not file.is_file():
            raise FileNotFoundError(f'Input "{file}" does not exist!')
        self.inputs[str(file)] = sha256_file(file)
        return file

    def output(self, path: Path) -> Path:
        """Record an output file, returning its path."""
        self.outputs.append(str(path))
        return path

    def write(self, path: Path, is_bytes: bool=False) -> AtomicWriter:
        """Record an output file and open it for atomic writing."""
        return AtomicWriter(self.output(path), is_bytes=is_bytes)

    def manifest(self) -> Dict[str, Any]:
        """The manifest record."""
        return {
            'version': MANIFEST_VERSION,
            'command': self.command,
            'vecsketch': __version__,
            'config_hash': self.conf.content_hash(),
            'seed': self.seed,
            'inputs': dict(sorted(self.inputs.items())),
            'outputs': list(self.outputs),
            'argv': list(self.argv),
            'config': self.conf.as_dict(),
        }

    def write_manifest(self, folder: Path) -> Path:
        """Write <command>.manifest.json into the folder."""
        path = folder / f'{self.command}.manifest.json'
        with AtomicWriter(path) as f:
            json.dump(self.manifest(), f, indent=2)
            f.write('\n')
        LOGGER.info('Wrote manifest "{}"', path)
        return path


def settings(cls: Callable[[Config], CfgT], conf: Config) -> CfgT:
    """Build a module config, reporting invalid values as config errors."""
    try:
        return cls(conf)
    except ValueError as exc:
        if isinstance(exc, VecSketchError):
            raise
        raise ConfigError(str(exc)) from None


def _out_dir(path: str) -> Path:
    folder = Path(path)
    folder.mkdir(parents=True, exist_ok=True)
    return folder


def _load_sequences(run: Run, path: str) -> List[StrokeSequence]:
    with open(run.read(path), encoding='utf8') as f:
        return load_dataset(f)


def _load_encoded(run: Run, path: str) -> List[EncodedSketch]:
    with open(run.read(path), encoding='utf8') as f:
        return load_encoded(f)


def _svg_args(conf: Config) -> Dict[str, Any]:
    try:
        mode = SVGMode(conf.get(str, 'svg_mode'))
    except ValueError:
        raise ConfigError(f'Unknown SVG mode "{conf.get(str, "svg_mode")}"!') from None
    return {
        'resolution': conf.get(int, 'svg_resolution'),
        'canvas_size': conf.get(int, 'canvas_size'),
        'mode': mode,
    }


def _write_svg(run: Run, path: Path, sketch: EncodedSketch, show_control: bool=False) -> None:
    with run.write(path) as f:
        f.write(to_svg(sketch.strokes, show_control=show_control, **_svg_args(run.conf)))


def _write_svgs(run: Run, folder: Path, sketches: Sequence[EncodedSketch], prefix: str, show_control: bool=False) -> None:
    for i, sketch in enumerate(sketches):
        _write_svg(run, folder / f'{prefix}_{i:04d}.svg', sketch, show_control)


def cmd_ingest(run: Run, args: argparse.Namespace) -> Path:
    """Parse Quick, Draw! NDJSON, preprocess every sketch, and write a dataset."""
    conf = run.conf
    with open(run.read(args.input), encoding='utf8') as f:
        report = parse_quickdraw_ndjson(f)
    sequences = []
    unusable = 0
    for i, sketch in enumerate(report.sketches):
        try:
            sequences.append(preprocess(
                sketch,
                conf.get(int, 'max_stroke_len'),
                conf.get(float, 'bend_threshold'),
                conf.get(bool, 'unit_scale'),
            ))
        except ValueError as exc:
            LOGGER.warning('Sketch {}: {}', i, exc)
            unusable += 1
    if not sequences:
        raise ValueError(f'No usable sketches in "{args.input}"!')
    output = Path(args.output)
    with run.write(output) as f:
        dump_dataset(sequences, f)
    LOGGER.info(
        'Wrote {} sketches ({} malformed lines, {} rejected, {} unusable)',
        len(sequences), report.skipped_lines, report.rejected_records, unusable,
    )
    return output.parent


def cmd_split(run: Run, args: argparse.Namespace) -> Path:
    """Shuffle a dataset and hold out a test fraction."""
    sequences = _load_sequences(run, args.input)
    fraction = run.conf.get(float, 'test_fraction')
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f'test_fraction must be in [0, 1), not {fraction}!')
    order = np.random.default_rng(run.seed).permutation(len(sequences))
    test_count = int(round(fraction * len(sequences)))
    folder = _out_dir(args.output)
    test = [sequences[i] for i in sorted(order[:test_count])]
    train = [sequences[i] for i in sorted(order[test_count:])]
    for name, part in [('train', train), ('test', test)]:
        with run.write(folder / f'{name}.ndjson') as f:
            dump_dataset(part, f)
    LOGGER.info('Split into {} train and {} test sketches.', len(train), len(test))
    return folder


def _write_json(run: Run, path: Path, data: object) -> None:
    with run.write(path) as f:
        json.dump(data, f, indent=2)
        f.write('\n')


def cmd_train_encoder(run: Run, args: argparse.Namespace) -> Path:
    """Train the stroke encoder."""
    config = settings(enc_mod.EncoderConfig.from_config, run.conf)
    strokes = [stroke for seq in _load_sequences(run, args.input) for stroke in seq.strokes]
    output = run.output(Path(args.output))
    _, history = enc_mod.train_encoder(
        strokes, config, run.seed,
        synthetic=run.conf.get(int, 'synthetic'),
        workers=run.workers,
        checkpoint_path=output,
    )
    _write_json(run, output.with_suffix('.history.json'), history.as_dict())
    return output.parent


def cmd_encode(run: Run, args: argparse.Namespace) -> Path:
    """Encode a dataset with a trained encoder."""
    config = settings(enc_mod.EncoderConfig.from_config, run.conf)
    model = enc_mod.load_model(run.read(args.model), config.content_hash() if args.strict else None)
    sequences = _load_sequences(run, args.input)
    mode = run.conf.get(str, 'embed_mode')
    fixed = run.conf.get(int, 'fixed_degree')
    encoded = [enc_mod.embed_sketch(model, seq, mode, fixed) for seq in sequences]
    output = Path(args.output)
    with run.write(output) as f:
        dump_encoded(encoded, f)
    LOGGER.info('Encoded {} sketches, {} control points.', len(encoded), sum(sk.control_point_count for sk in encoded))
    return output.parent


def cmd_fit(run: Run, args: argparse.Namespace) -> Path:
    """Fit every stroke with the classical alternating fitter."""
    oracle = settings(OracleConfig.from_config, run.conf)
    degree = run.conf.get(int, 'fit_degree')
    if args.input and args.input_file:
        raise ConfigError('Give the fit input either positionally or with --input, not both!')
    source = args.input or args.input_file
    if not source:
        raise ConfigError('fit needs an input dataset!')
    sequences = _load_sequences(run, source)
    # x.ndjson -> x.encoded.ndjson
    output = Path(args.output) if args.output else Path(source).with_suffix('.encoded.ndjson')
    encoded = []
    rows = []
    for i, seq in enumerate(sequences):
        with logger.context(f'sketch {i}'):
            sketch, fits = fit_sketch(seq, degree, oracle, run.workers)
        encoded.append(sketch)
        for j, (stroke, fit) in enumerate(zip(sketch.strokes, fits)):
            rows.append([
                i, j, stroke.degree, len(seq.strokes[j]),
                repr(stroke.loss or 0.0),
                repr(fit.per_point if fit is not None else 0.0),
                fit.iterations if fit is not None else 0,
            ])
    with run.write(output) as f:
        dump_encoded(encoded, f)
    with run.write(output.with_suffix('.losses.csv')) as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['sketch', 'stroke', 'degree', 'points', 'loss', 'per_point', 'iterations'])
        writer.writerows(rows)
    if args.svg:
        svg = Path(args.svg)
        if svg.suffix.lower() != '.svg':
            _write_svgs(run, _out_dir(args.svg), encoded, 'fit', show_control=True)
        elif len(encoded) == 1:
            _write_svg(run, svg, encoded[0], show_control=True)
        else:
            # One file per sketch, numbered after the given name.
            _write_svgs(run, _out_dir(str(svg.parent)), encoded, svg.stem, show_control=True)
    return output.parent


def cmd_train_generator(run: Run, args: argparse.Namespace) -> Path:
    """Train the sketch generator on encoded sketches."""
    config = settings(gen_mod.GeneratorConfig.from_config, run.conf)
    dataset = _load_encoded(run, args.input)
    output = run.output(Path(args.output))
    _, history = gen_mod.train_generator(
        dataset, config, run.seed,
        workers=run.workers,
        checkpoint_path=output,
    )
    _write_json(run, output.with_suffix('.history.json'), history.as_dict())
    return output.parent


def cmd_sample(run: Run, args: argparse.Namespace) -> Path:
    """Draw sketches from a trained generator."""
    if not args.output and not args.svg_dir:
        raise ConfigError('sample needs --output or --svg-dir!')
    model = gen_mod.load_model(run.read(args.model))
    temperature = run.conf.get(float, 'temperature')
    count = run.conf.get(int, 'samples')
    conditions: List[Any] = []
    if args.condition:
        for sketch in _load_encoded(run, args.condition):
            if model.mode == 'stroke':
                conditions.append(gen_mod.to_stroke_mode(sketch, model.config.degree))
            else:
                conditions.append(gen_mod.build_cp_sequence(sketch))
    seeds = np.random.SeedSequence(run.seed).spawn(count)
    samples = []
    for i, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        if conditions:
            samples.append(gen_mod.sample_conditional(model, conditions[i % len(conditions)], temperature, rng))
        else:
            samples.append(gen_mod.sample_unconditional(model, temperature, rng))
    folder = _out_dir(args.output or args.svg_dir)
    svg_folder = _out_dir(args.svg_dir) if args.svg_dir else folder
    encoded = [sample.to_encoded() for sample in samples]
    with run.write(folder / 'samples.ndjson') as f:
        dump_encoded(encoded, f)
    with run.write(folder / 'samples.csv') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['sample', 'steps', 'strokes', 'stopped'])
        for i, (sample, sketch) in enumerate(zip(samples, encoded)):
            writer.writerow([i, len(sample.sketch), len(sketch), int(sample.stopped)])
    _write_svgs(run, svg_folder, encoded, 'sample')
    stopped = sum(sample.stopped for sample in samples)
    LOGGER.info('Drew {} samples, {} stopped before the length cap.', count, stopped)
    return folder


def cmd_render_svg(run: Run, args: argparse.Namespace) -> Path:
    """Render encoded sketches as SVG files."""
    encoded = _load_encoded(run, args.input)
    folder = _out_dir(args.output)
    _write_svgs(run, folder, encoded, 'sketch', show_control=args.show_control)
    LOGGER.info('Rendered {} sketches.', len(encoded))
    return folder


def cmd_eval_fid(run: Run, args: argparse.Namespace) -> Path:
    """Compare real sketches with generated ones, bucketed by length."""
    conf = run.conf
    spec = settings(FeatureSpec.from_config, conf)
    real = _load_sequences(run, args.real)
    if args.model:
        model = gen_mod.load_model(run.read(args.model))
        conditions = _load_encoded(run, args.condition) if args.condition else None
        sampler = generator_sampler(model, conf.get(float, 'temperature'), conditions)
    elif args.generated:
        generated = _load_encoded(run, args.generated)

        def sampler(count: int, rng: np.random.Generator) -> List[EncodedSketch]:
            """Draw from a fixed set of sketches, with replacement if needed."""
            replace = count > len(generated)
            return [generated[i] for i in sorted(rng.choice(len(generated), count, replace=replace))]
    else:
        raise ConfigError('eval-fid needs --model or --generated!')
    half_width = conf.get(int, 'fid_half_width')
    count = conf.get(int, 'fid_count') or None
    folder = _out_dir(args.output)
    with run.write(folder / 'fid.csv') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['bucket', 'half_width', 'count', 'generated', 'fid'])
        for bucket in args.bucket:
            with logger.context(f'bucket {bucket}'):
                result = fid_by_length(
                    real, sampler, bucket, half_width, count, spec,
                    np.random.default_rng([run.seed, bucket]), run.workers,
                )
            writer.writerow([result.bucket, result.half_width, result.count, result.generated, repr(result.fid)])
    return folder


def cmd_histogram(run: Run, args: argparse.Namespace) -> Path:
    """Length histograms of raw and encoded sketches."""
    if not args.raw and not args.encoded:
        raise ConfigError('histogram needs --raw or --encoded!')
    width = run.conf.get(int, 'hist_bin_width')
    folder = _out_dir(args.output)
    summary: Dict[str, Any] = {}
    if args.raw:
        with open(run.read(args.raw), encoding='utf8') as f:
            report = parse_quickdraw_ndjson(f)
        hist = length_histogram(report.sketches, 'raw', width)
        with run.write(folder / 'histogram_raw.csv') as f:
            f.write(hist.to_csv())
        summary['raw'] = {'sketches': hist.total_sketches, 'mean_stroke': hist.mean_stroke_length, 'mean_sketch': hist.mean_sketch_length}
    if args.encoded:
        hist = length_histogram(_load_encoded(run, args.encoded), 'encoded', width)
        with run.write(folder / 'histogram_encoded.csv') as f:
            f.write(hist.to_csv())
        summary['encoded'] = {'sketches': hist.total_sketches, 'mean_stroke': hist.mean_stroke_length, 'mean_sketch': hist.mean_sketch_length}
    if 'raw' in summary and 'encoded' in summary:
        summary['sketch_length_ratio'] = summary['encoded']['mean_sketch'] / summary['raw']['mean_sketch']
        LOGGER.info('Encoded sketches are {:.3f}x the raw length.', summary['sketch_length_ratio'])
    _write_json(run, folder / 'histogram_summary.json', summary)
    return folder


def cmd_snapshot_fit(run: Run, args: argparse.Namespace) -> Path:
    """Train an encoder on one stroke, drawing the fit every few steps."""
    conf = run.conf
    base = settings(enc_mod.EncoderConfig.from_config, conf)
    steps = conf.get(int, 'snapshot_steps')
    every = conf.get(int, 'snapshot_every')
    if every < 1:
        raise ConfigError(f'snapshot_every must be positive, not {every}!')
    config = attr.evolve(base, epochs=steps, batch_size=1)
    sequences = _load_sequences(run, args.input)
    try:
        stroke = sequences[args.sketch].strokes[args.stroke]
    except IndexError:
        raise ValueError(f'No stroke {args.stroke} in sketch {args.sketch}!') from None
    degree = conf.get(int, 'fit_degree')
    if degree not in config.degrees:
        raise ConfigError(f'fit_degree {degree} is outside the encoder degrees {config.min_degree}..{config.max_degree}!')
    folder = _out_dir(args.output)
    svg_kwargs = _svg_args(conf)
    frames: List[List[Any]] = []

    def snapshot(step: int, model: enc_mod.EncoderModel, loss: float) -> None:
        if step % every:
            return
        fit = enc_mod.encode_stroke(model, stroke)
        poly = fit.polygons[degree]
        curve = eval_many(poly, fit.params[degree].values) + stroke.offset
        per_point = fit.per_point(degree)
        with run.write(folder / f'frame_{step:05d}.svg') as f:
            f.write(to_svg(
                [EncodedStroke(poly, stroke.offset)],
                show_control=True,
                correspondences=[(stroke.absolute(), curve)],
                metadata={'step': step, 'loss': per_point, 'degree': degree},
                **svg_kwargs,
            ))
        frames.append([step, repr(per_point), repr(loss)])

    enc_mod.train_encoder([stroke], config, run.seed, on_step=snapshot)
    with run.write(folder / 'frames.csv') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['step', 'per_point_loss', 'train_loss'])
        writer.writerows(frames)
    LOGGER.info('Wrote {} frames.', len(frames))
    return folder


def cmd_synth(run: Run, args: argparse.Namespace) -> Path:
    """Write fixture data: the toy sketch set, or random Bézier strokes."""
    output = Path(args.output)
    if args.kind == 'toy':
        with run.write(output) as f:
            count = write_toy_ndjson(f, args.count, run.seed)
    else:
        conf = run.conf
        degrees = list(range(conf.get(int, 'min_degree'), conf.get(int, 'max_degree') + 1))
        strokes = random_strokes(args.count, degrees, (8, min(64, conf.get(int, 'max_stroke_len'))), run.seed)
        with run.write(output) as f:
            count = dump_dataset([StrokeSequence([item.stroke], 'synthetic', len(item.stroke)) for item in strokes], f)
    LOGGER.info('Wrote {} {} records.', count, args.kind)
    return output.parent


COMMANDS: Dict[str, Callable[[Run, argparse.Namespace], Path]] = {
    'ingest': cmd_ingest,
    'split': cmd_split,
    'train-encoder': cmd_train_encoder,
    'encode': cmd_encode,
    'fit': cmd_fit,
    'train-generator': cmd_train_generator,
    'sample': cmd_sample,
    'render-svg': cmd_render_svg,
    'eval-fid': cmd_eval_fid,
    'histogram': cmd_histogram,
    'snapshot-fit': cmd_snapshot_fit,
    'synth': cmd_synth,
}


def _degree_range(text: str) -> Tuple[int, int]:
    """Parse "3..9", or a single degree."""
    low, sep, high = text.partition('..')
    try:
        first = int(low)
        last = int(high) if sep else first
    except ValueError:
        raise argparse.ArgumentTypeError(f'"{text}" is not a degree range like 3..9!') from None
    if first < 1 or last < first:
        raise argparse.ArgumentTypeError(f'Degree range {text} is empty!')
    return first, last


def _option(parser: argparse.ArgumentParser, flag: str, name: str, kind: Callable[[str], Any], help: str, **kwargs: Any) -> None:
    """Add a flag that sets the config option of this name."""
    parser.add_argument(flag, dest=OPTION_DEST + name, type=kind, help=f'{help} Sets {name}.', **kwargs)


def build_parser() -> argparse.ArgumentParser:
    """The argument parser for every subcommand."""
    parser = argparse.ArgumentParser(prog='vecsketch', description=__doc__.split('\n')[0])
    parser.add_argument('--version', action='version', version=f'vecsketch {__version__}')
    parser.add_argument(
        '-c', '--config',
        help="JSON config file. Its values override the command line.",
    )
    parser.add_argument(
        '-s', '--set',
        dest='assignments',
        action='append',
        default=[],
        metavar='NAME=VALUE',
        help='Set a config option. May be repeated.',
    )
    parser.add_argument('--seed', type=int, help='Shortcut for --set seed=N.')
    parser.add_argument('--workers', type=int, help='Shortcut for --set workers=N.')
    parser.add_argument('--log', help='Also write the log to this file.')
    # Accepted after the subcommand too. SUPPRESS keeps these from
    # overwriting a value given before it.
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument('--seed', type=int, default=argparse.SUPPRESS, help='Shortcut for --set seed=N.')
    shared.add_argument('--workers', type=int, default=argparse.SUPPRESS, help='Shortcut for --set workers=N.')
    sub = parser.add_subparsers(dest='command', required=True, metavar='COMMAND')

    def add(name: str, func: Optional[Callable[..., Any]]=None, help: Optional[str]=None) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help or (func.__doc__ if func else None), parents=[shared])

    p = add('ingest', cmd_ingest)
    p.add_argument('input', help='Quick, Draw! NDJSON file.')
    p.add_argument('-o', '--output', required=True, help='Dataset file to write.')
    _option(p, '--max-stroke-len', 'max_stroke_len', int, 'Longest stroke kept in one piece.')
    _option(p, '--bend-threshold', 'bend_threshold', float, 'Turning angle, in radians, that splits a stroke.')
    p.add_argument(
        '--no-unit-scale', dest=OPTION_DEST + 'unit_scale',
        action='store_const', const=False,
        help='Keep the original sketch scale. Sets unit_scale.',
    )

    p = add('split', cmd_split)
    p.add_argument('input', help='Dataset file.')
    p.add_argument('-o', '--output', required=True, help='Folder for train.ndjson and test.ndjson.')

    p = add('train-encoder', cmd_train_encoder)
    p.add_argument('input', help='Dataset file.')
    p.add_argument('-o', '--output', required=True, help='Checkpoint file to write.')
    p.add_argument(
        '--degrees', type=_degree_range, metavar='MIN..MAX',
        help='Degrees the encoder predicts. Sets min_degree and max_degree.',
    )
    _option(p, '--beta', 'beta', float, 'Weight of the smoothness penalty.')
    _option(p, '--tolerance', 'tolerance', float, 'Loss allowance when choosing the lowest degree.')

    p = add('encode', cmd_encode)
    p.add_argument('input', help='Dataset file.')
    p.add_argument('-m', '--model', required=True, help='Encoder checkpoint.')
    p.add_argument('-o', '--output', required=True, help='Encoded dataset file to write.')
    p.add_argument(
        '--strict', action='store_true',
        help='Require the checkpoint to match the current encoder config.',
    )

    p = add('fit', cmd_fit)
    p.add_argument('input', nargs='?', help='Dataset file.')
    p.add_argument('--input', dest='input_file', help='Dataset file, as an option.')
    p.add_argument(
        '-o', '--output',
        help='Encoded dataset file to write, by default <input>.encoded.ndjson. '
             'A loss table is written beside it.',
    )
    p.add_argument(
        '--svg',
        help='Also render the fits. A folder, or a .svg file name '
             '(numbered per sketch when there are several).',
    )
    _option(p, '--degree', 'fit_degree', int, 'Degree of every fitted curve.')

    p = add('train-generator', cmd_train_generator)
    p.add_argument('input', help='Encoded dataset file.')
    p.add_argument('-o', '--output', required=True, help='Checkpoint file to write.')
    _option(p, '--mode', 'mode', str, 'Sequence form.', choices=gen_mod.MODES)
    _option(p, '--latent', 'latent', int, 'Latent code size.')
    _option(p, '--mixtures', 'mixtures', int, 'Gaussians in each output mixture.')
    _option(p, '--nmax', 'nmax', int, 'Longest sequence modelled.')

    p = add('sample', cmd_sample)
    p.add_argument('-m', '--model', required=True, help='Generator checkpoint.')
    p.add_argument('-o', '--output', help='Folder for the samples. Defaults to --svg-dir.')
    p.add_argument('--svg-dir', help='Folder for the SVG drawings. Defaults to --output.')
    p.add_argument('--condition', help='Encoded sketches to condition on, used in turn.')
    _option(p, '--count', 'samples', int, 'Sketches to draw.')
    _option(p, '--temperature', 'temperature', float, 'Sampling temperature.')

    p = add('render-svg', cmd_render_svg)
    p.add_argument('input', help='Encoded dataset file.')
    p.add_argument('-o', '--output', required=True, help='Folder for the SVG files.')
    p.add_argument('--show-control', action='store_true', help='Draw the control polygons.')

    p = add('eval-fid', cmd_eval_fid)
    p.add_argument('--real', required=True, help='Dataset of real sketches.')
    group = p.add_mutually_exclusive_group()
    group.add_argument('-m', '--model', help='Generator checkpoint to sample from.')
    group.add_argument('--generated', help='Encoded dataset of already generated sketches.')
    p.add_argument('--condition', help='Encoded sketches to condition the generator on.')
    p.add_argument('--bucket', type=int, action='append', required=True, help='Bucket centre length. May be repeated.')
    p.add_argument('-o', '--output', required=True, help='Folder for fid.csv.')
    _option(p, '--halfwidth', 'fid_half_width', int, 'Real sketches within this many points of the bucket are compared.')
    _option(p, '--count', 'fid_count', int, 'Generated samples per bucket, 0 to match the real bucket.')

    p = add('histogram', cmd_histogram)
    p.add_argument('--raw', help='Quick, Draw! NDJSON file.')
    p.add_argument('--encoded', help='Encoded dataset file.')
    p.add_argument('-o', '--output', required=True, help='Folder for the histogram files.')

    p = add('snapshot-fit', cmd_snapshot_fit)
    p.add_argument('input', help='Dataset file.')
    p.add_argument('--sketch', type=int, default=0, help='Index of the sketch.')
    p.add_argument('--stroke', type=int, default=0, help='Index of the stroke within the sketch.')
    p.add_argument('-o', '--output', required=True, help='Folder for the frames.')

    p = add('synth', cmd_synth)
    p.add_argument('kind', choices=['toy', 'strokes'])
    p.add_argument('-n', '--count', type=int, default=200, help='Number of records.')
    p.add_argument('-o', '--output', required=True, help='File to write.')

    p = sub.add_parser('replay', help='Re-run a stage from its manifest.')
    p.add_argument('manifest', help='A <command>.manifest.json file.')
    p.add_argument('--check', action='store_true', help='Fail if any input changed since the manifest was written.')
    return parser


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    flags = cli_config.parse_assignments(args.assignments)
    if args.seed is not None:
        flags['seed'] = args.seed
    if args.workers is not None:
        flags['workers'] = args.workers
    degrees = getattr(args, 'degrees', None)
    if degrees is not None:
        flags['min_degree'], flags['max_degree'] = degrees
    for key, value in sorted(vars(args).items()):
        if key.startswith(OPTION_DEST) and value is not None:
            flags[key[len(OPTION_DEST):]] = value
    return flags


def run_command(
    args: argparse.Namespace,
    argv: List[str],
    overrides: Optional[Dict[str, Any]]=None,
) -> Path:
    """Run one subcommand, then write its manifest. Returns the manifest path."""
    with logger.context(args.command):
        if overrides is not None:
            conf = cli_config.resolve(None, overrides)
        else:
            conf = cli_config.resolve(Path(args.config) if args.config else None, _flags(args))
        run = Run(args.command, conf, argv)
        folder = COMMANDS[args.command](run, args)
        return run.write_manifest(folder)


def replay(manifest_path: str, check: bool=False) -> Path:
    """Re-run the stage recorded in a manifest, with its exact config."""
    path = Path(manifest_path)
    try:
        data = json.loads(path.read_text(encoding='utf8'))
    except json.JSONDecodeError as exc:
        raise ReplayError(f'Manifest "{path}" is not valid JSON: {exc}') from None
    if not isinstance(data, dict) or data.get('version') != MANIFEST_VERSION:
        raise ReplayError(f'Manifest "{path}" has an unsupported version!')
    try:
        argv = [str(arg) for arg in data['argv']]
        config = dict(data['config'])
        inputs = dict(data['inputs'])
    except (KeyError, TypeError, ValueError) as exc:
        raise ReplayError(f'Manifest "{path}" is incomplete: {exc}') from None
    for name, digest in inputs.items():
        if not Path(name).is_file():
            raise ReplayError(f'Input "{name}" no longer exists!')
        if sha256_file(Path(name)) != digest:
            if check:
                raise ReplayError(f'Input "{name}" changed since the manifest was written!')
            LOGGER.warning('Input "{}" changed since the manifest was written.', name)
    args = build_parser().parse_args(argv)
    if args.command == 'replay':
        raise ReplayError('A manifest cannot replay another replay!')
    conf = cli_config.resolve(None, config)
    if conf.content_hash() != data.get('config_hash'):
        raise ReplayError(f'Manifest "{path}" config does not match its hash!')
    LOGGER.info('Replaying {} from "{}"', args.command, path)
    return run_command(args, argv, config)


def error_category(exc: BaseException) -> str:
    """Map an exception to its exit category."""
    if isinstance(exc, VecSketchError) and exc.category in EXIT_CODES:
        return exc.category
    if isinstance(exc, (ArithmeticError, np.linalg.LinAlgError)):
        return 'numeric'
    if isinstance(exc, (OSError, ValueError, TypeError, KeyError, IndexError)):
        return 'io'
    return 'model'


def main(argv: Optional[List[str]]=None) -> int:
    """Run the command line, returning the exit code."""
    if argv is None:
        argv = sys.argv[1:]
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help, --version, or a usage error (code 2, a config problem).
        return int(exc.code or 0)

    logger.init_logging(args.log)
    try:
        if args.command == 'replay':
            replay(args.manifest, args.check)
        else:
            run_command(args, _command_argv(argv))
    except Exception as exc:
        category = error_category(exc)
        LOGGER.debug('Failed with {}', type(exc).__name__, exc_info=True)
        print(f'error: {category}: {exc}', file=sys.stderr)
        return EXIT_CODES[category]
    return 0


def _command_argv(argv: List[str]) -> List[str]:
    """Drop the options that only shape the config, which the manifest records in full."""
    result = []
    skip = False
    for arg in argv:
        if skip:
            skip = False
            continue
        if arg in ('-c', '--config', '-s', '--set', '--seed', '--workers', '--log'):
            skip = True
            continue
        if arg.split('=', 1)[0] in ('--config', '--set', '--seed', '--workers', '--log'):
            continue
        result.append(arg)
    return result


if __name__ == '__main__':
    sys.exit(main())
