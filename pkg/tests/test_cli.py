"""Test the command line, its manifests and exit codes."""
import json
from pathlib import Path

import numpy as np
import pytest

from vecsketch import encoder as enc_mod
from vecsketch.autodiff import NumericError
from vecsketch.config import ConfigError
from vecsketch.encoder import ModelError
from vecsketch.scripts import cli
from vecsketch.scripts.cli import EXIT_CODES, _flags, build_parser, error_category, main
from vecsketch.sketch import load_dataset, load_encoded

QUICK = ['--set', 'oracle_max_iter=5', '--set', 'fit_degree=3']


def run(*argv: str) -> int:
    return main(list(argv))


@pytest.fixture
def toy_dataset(tmp_path: Path) -> Path:
    """A small preprocessed dataset, built through the command line."""
    raw = tmp_path / 'raw' / 'toy.ndjson'
    assert run('--seed', '3', 'synth', 'toy', '-n', '6', '-o', str(raw)) == 0
    dataset = tmp_path / 'data' / 'toy.dataset.ndjson'
    assert run('ingest', str(raw), '-o', str(dataset)) == 0
    return dataset


def manifest(path: Path) -> dict:
    return json.loads(path.read_text(encoding='utf8'))


def test_exit_codes() -> None:
    """Each error category has a distinct code."""
    assert EXIT_CODES == {'config': 2, 'io': 3, 'numeric': 4, 'model': 5}


def test_synth_ingest(tmp_path: Path, toy_dataset: Path) -> None:
    """Toy records are ingested into a dataset, with manifests recorded."""
    raw = tmp_path / 'raw' / 'toy.ndjson'
    assert len(raw.read_text().splitlines()) == 6
    with open(toy_dataset, encoding='utf8') as f:
        sequences = load_dataset(f)
    assert len(sequences) == 6

    data = manifest(toy_dataset.parent / 'ingest.manifest.json')
    assert data['version'] == 1
    assert data['command'] == 'ingest'
    assert list(data['inputs']) == [str(raw)]
    assert data['outputs'] == [str(toy_dataset)]
    assert data['argv'] == ['ingest', str(raw), '-o', str(toy_dataset)]
    assert data['seed'] == 0
    assert data['config']['max_stroke_len'] > 0

    synth = manifest(raw.parent / 'synth.manifest.json')
    assert synth['seed'] == 3
    # Config-shaping options are left out, the config records them.
    assert synth['argv'] == ['synth', 'toy', '-n', '6', '-o', str(raw)]
    assert synth['config']['seed'] == 3


def test_fit_and_render(tmp_path: Path, toy_dataset: Path) -> None:
    """The classical fitter writes encoded sketches, losses and drawings."""
    out = tmp_path / 'fit' / 'toy.encoded.ndjson'
    svgs = tmp_path / 'fit_svg'
    assert run(*QUICK, 'fit', str(toy_dataset), '-o', str(out), '--svg', str(svgs)) == 0
    with open(out, encoding='utf8') as f:
        encoded = load_encoded(f)
    assert len(encoded) == 6
    for sketch in encoded:
        assert all(stroke.degree <= 3 for stroke in sketch.strokes)

    rows = out.with_suffix('.losses.csv').read_text().splitlines()
    assert rows[0] == 'sketch,stroke,degree,points,loss,per_point,iterations'
    assert len(rows) == 1 + sum(len(sketch.strokes) for sketch in encoded)
    assert len(list(svgs.glob('*.svg'))) == 6

    data = manifest(out.parent / 'fit.manifest.json')
    assert data['config']['oracle_max_iter'] == 5
    assert str(out.with_suffix('.losses.csv')) in data['outputs']

    render = tmp_path / 'render'
    assert run('render-svg', str(out), '-o', str(render), '--show-control') == 0
    assert sorted(p.name for p in render.glob('*.svg'))[0] == 'sketch_0000.svg'
    assert (render / 'render-svg.manifest.json').is_file()


def test_replay(tmp_path: Path, toy_dataset: Path) -> None:
    """Manifests re-run their stage, and notice changed inputs."""
    out = tmp_path / 'fit' / 'toy.encoded.ndjson'
    assert run(*QUICK, 'fit', str(toy_dataset), '-o', str(out)) == 0
    first = out.read_text()
    path = out.parent / 'fit.manifest.json'
    before = manifest(path)
    out.unlink()

    assert run('replay', str(path)) == 0
    assert out.read_text() == first
    after = manifest(path)
    assert after['config_hash'] == before['config_hash']
    assert after['config']['oracle_max_iter'] == 5

    with open(toy_dataset, 'a', encoding='utf8') as f:
        f.write('\n')
    assert run('replay', '--check', str(path)) == EXIT_CODES['io']
    assert run('replay', str(path)) == 0

    broken = tmp_path / 'broken.manifest.json'
    broken.write_text('{"version": 99}')
    assert run('replay', str(broken)) == EXIT_CODES['io']


def test_split(tmp_path: Path) -> None:
    """Synthetic strokes are split into train and test sets."""
    data = tmp_path / 'strokes.ndjson'
    assert run('--set', 'min_degree=2', '--set', 'max_degree=3', 'synth', 'strokes', '-n', '10', '-o', str(data)) == 0
    folder = tmp_path / 'split'
    assert run('--set', 'test_fraction=0.2', 'split', str(data), '-o', str(folder)) == 0
    with open(folder / 'train.ndjson', encoding='utf8') as f:
        train = load_dataset(f)
    with open(folder / 'test.ndjson', encoding='utf8') as f:
        test = load_dataset(f)
    assert len(train) == 8
    assert len(test) == 2
    assert run('--set', 'test_fraction=1.5', 'split', str(data), '-o', str(folder)) == EXIT_CODES['config']


def test_histogram(tmp_path: Path) -> None:
    """Raw length histograms and their summary."""
    raw = tmp_path / 'toy.ndjson'
    assert run('synth', 'toy', '-n', '4', '-o', str(raw)) == 0
    folder = tmp_path / 'hist'
    assert run('--set', 'hist_bin_width=5', 'histogram', '--raw', str(raw), '-o', str(folder)) == 0
    lines = (folder / 'histogram_raw.csv').read_text().splitlines()
    assert lines[0] == 'level,representation,start,end,count'
    summary = json.loads((folder / 'histogram_summary.json').read_text())
    assert summary['raw']['sketches'] == 4
    assert 'encoded' not in summary

    assert run('histogram', '-o', str(folder)) == EXIT_CODES['config']


@pytest.mark.parametrize('command', ['ingest', 'render-svg', 'fit'])
def test_missing_input(tmp_path: Path, command: str) -> None:
    """Missing files are I/O errors."""
    missing = tmp_path / 'missing.ndjson'
    assert run(command, str(missing), '-o', str(tmp_path / 'out')) == EXIT_CODES['io']
    assert not (tmp_path / 'out').exists()


def test_config_errors(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Bad options and bad usage are config errors."""
    raw = tmp_path / 'toy.ndjson'
    assert run('--set', 'no_such_option=1', 'synth', 'toy', '-o', str(raw)) == EXIT_CODES['config']
    assert 'error: config:' in capsys.readouterr().err
    assert run('--set', 'seed=abc', 'synth', 'toy', '-o', str(raw)) == EXIT_CODES['config']
    assert run('synth', 'nothing', '-o', str(raw)) == 2
    assert run('fit') == 2
    assert not raw.exists()

    conf = tmp_path / 'bad.json'
    conf.write_text('[1, 2]')
    assert run('-c', str(conf), 'synth', 'toy', '-o', str(raw)) == EXIT_CODES['config']


def test_untrained_encoder(tmp_path: Path, toy_dataset: Path) -> None:
    """Encoding with an untrained checkpoint is a model error."""
    ckpt = tmp_path / 'untrained.vskc'
    enc_mod.save_model(enc_mod.EncoderModel(enc_mod.EncoderConfig(hidden=2, max_degree=4)), ckpt)
    out = tmp_path / 'encoded.ndjson'
    assert run('encode', str(toy_dataset), '-m', str(ckpt), '-o', str(out)) == EXIT_CODES['model']
    assert not out.exists()


@pytest.mark.slow
def test_full_pipeline(tmp_path: Path) -> None:
    """Every learned stage, at a tiny size."""
    small = [
        '--seed', '1',
        '--set', 'encoder_hidden=4', '--set', 'min_degree=3', '--set', 'max_degree=4',
        '--set', 'encoder_epochs=1', '--set', 'batch_size=4', '--set', 'max_stroke_len=32',
        '--set', 'generator_epochs=1', '--set', 'samples=3', '--set', 'latent=2',
        '--set', 'gen_enc_hidden=4', '--set', 'gen_dec_hidden=4', '--set', 'mixtures=2',
        '--set', 'nmax=32', '--set', 'stroke_degree=4',
        '--set', 'fid_half_width=1000', '--set', 'raster_size=16', '--set', 'feature_grid=4',
    ]
    raw = tmp_path / 'toy.ndjson'
    data = tmp_path / 'toy.dataset.ndjson'
    assert run(*small, 'synth', 'toy', '-n', '8', '-o', str(raw)) == 0
    assert run(*small, 'ingest', str(raw), '-o', str(data)) == 0
    enc = tmp_path / 'enc' / 'encoder.vskc'
    assert run(*small, 'train-encoder', str(data), '-o', str(enc)) == 0
    assert enc.with_suffix('.history.json').is_file()
    encoded = tmp_path / 'enc' / 'toy.encoded.ndjson'
    assert run(*small, 'encode', str(data), '-m', str(enc), '-o', str(encoded)) == 0
    gen = tmp_path / 'gen' / 'generator.vskc'
    assert run(*small, 'train-generator', str(encoded), '-o', str(gen)) == 0
    samples = tmp_path / 'samples'
    assert run(*small, 'sample', '-m', str(gen), '-o', str(samples)) == 0
    assert (samples / 'sample.manifest.json').is_file()
    fid_dir = tmp_path / 'fid'
    assert run(*small, 'eval-fid', '--real', str(data), '-m', str(gen), '--bucket', '20', '-o', str(fid_dir)) == 0
    assert (fid_dir / 'fid.csv').is_file()


def test_option_flags(tmp_path: Path) -> None:
    """Subcommand flags set their config options, and are recorded."""
    raw = tmp_path / 'toy.ndjson'
    assert run('synth', 'toy', '-n', '2', '-o', str(raw), '--seed', '5') == 0
    synth = manifest(tmp_path / 'synth.manifest.json')
    assert synth['seed'] == 5
    assert synth['argv'] == ['synth', 'toy', '-n', '2', '-o', str(raw)]

    dataset = tmp_path / 'toy.dataset.ndjson'
    assert run(
        'ingest', str(raw), '-o', str(dataset),
        '--max-stroke-len', '64', '--bend-threshold', '1.5', '--no-unit-scale',
    ) == 0
    config = manifest(tmp_path / 'ingest.manifest.json')['config']
    assert config['max_stroke_len'] == 64
    assert config['bend_threshold'] == 1.5
    assert config['unit_scale'] is False


@pytest.mark.parametrize('argv, expected', [
    (['train-encoder', 'd', '-o', 'm', '--degrees', '2..5', '--beta', '0.5', '--tolerance', '0.01'], {
        'min_degree': 2, 'max_degree': 5, 'beta': 0.5, 'tolerance': 0.01,
    }),
    (['train-encoder', 'd', '-o', 'm', '--degrees', '4'], {'min_degree': 4, 'max_degree': 4}),
    (['train-generator', 'd', '-o', 'm', '--mode', 'cp', '--latent', '8', '--mixtures', '3', '--nmax', '20'], {
        'mode': 'cp', 'latent': 8, 'mixtures': 3, 'nmax': 20,
    }),
    (['sample', '-m', 'm', '--count', '4', '--temperature', '0.3', '--svg-dir', 'd'], {
        'samples': 4, 'temperature': 0.3,
    }),
    (['eval-fid', '--real', 'r', '-m', 'm', '--bucket', '9', '-o', 'o', '--halfwidth', '5', '--count', '10'], {
        'fid_half_width': 5, 'fid_count': 10,
    }),
    (['fit', '--input', 'd', '--degree', '3', '--workers', '2'], {'fit_degree': 3, 'workers': 2}),
    (['fit', 'd'], {}),
])
def test_flags_to_options(argv: list, expected: dict) -> None:
    """Each flag maps onto the config option it names."""
    assert _flags(build_parser().parse_args(argv)) == expected


def test_flag_errors(tmp_path: Path, toy_dataset: Path) -> None:
    """Bad flags and missing outputs are config errors."""
    assert run('train-encoder', str(toy_dataset), '-o', 'm', '--degrees', '3..x') == EXIT_CODES['config']
    assert run('train-encoder', str(toy_dataset), '-o', 'm', '--degrees', '5..3') == EXIT_CODES['config']
    assert run('train-generator', str(toy_dataset), '-o', 'm', '--mode', 'pixels') == EXIT_CODES['config']
    assert run('sample', '-m', str(tmp_path / 'gen.vskc')) == EXIT_CODES['config']
    out = tmp_path / 'out.ndjson'
    assert run('fit', str(toy_dataset), '--input', str(toy_dataset), '-o', str(out)) == EXIT_CODES['config']
    assert not out.exists()


def test_fit_defaults(tmp_path: Path, toy_dataset: Path) -> None:
    """fit takes --input, writes beside it by default, and numbers SVG files."""
    svg = tmp_path / 'drawn' / 'x.svg'
    assert run(
        '--set', 'oracle_max_iter=5',
        'fit', '--degree', '2', '--input', str(toy_dataset), '--svg', str(svg),
    ) == 0
    out = toy_dataset.with_suffix('.encoded.ndjson')
    assert out.name == 'toy.dataset.encoded.ndjson'
    with open(out, encoding='utf8') as f:
        encoded = load_encoded(f)
    assert len(encoded) == 6
    for sketch in encoded:
        assert all(stroke.degree <= 2 for stroke in sketch.strokes)
    assert sorted(p.name for p in svg.parent.glob('*.svg')) == [f'x_{i:04d}.svg' for i in range(6)]
    assert manifest(out.parent / 'fit.manifest.json')['config']['fit_degree'] == 2


@pytest.mark.parametrize('exc, category', [
    (NumericError('not finite'), 'numeric'),
    (FloatingPointError('overflow'), 'numeric'),
    (np.linalg.LinAlgError('singular'), 'numeric'),
    (ModelError('untrained'), 'model'),
    (ConfigError('unknown option'), 'config'),
    (FileNotFoundError('missing'), 'io'),
    (ValueError('bad line'), 'io'),
])
def test_error_category(exc: Exception, category: str) -> None:
    """Exceptions map onto their exit categories."""
    assert error_category(exc) == category


def test_numeric_exit(tmp_path: Path, monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture) -> None:
    """A numeric failure in a stage exits with its code."""
    def diverge(run: cli.Run, args: object) -> Path:
        raise NumericError('loss is nan')

    monkeypatch.setitem(cli.COMMANDS, 'synth', diverge)
    assert run('synth', 'toy', '-o', str(tmp_path / 'toy.ndjson')) == EXIT_CODES['numeric']
    assert 'error: numeric: loss is nan' in capsys.readouterr().err


def test_empty_bucket(tmp_path: Path, toy_dataset: Path) -> None:
    """FID on a length bucket with no real sketches is a model error."""
    fitted = tmp_path / 'fit' / 'toy.encoded.ndjson'
    assert run(*QUICK, 'fit', str(toy_dataset), '-o', str(fitted)) == 0
    folder = tmp_path / 'fid'
    assert run(
        'eval-fid', '--real', str(toy_dataset), '--generated', str(fitted),
        '--bucket', '10000', '--halfwidth', '1', '-o', str(folder),
    ) == EXIT_CODES['model']
    assert not (folder / 'fid.manifest.json').exists()
