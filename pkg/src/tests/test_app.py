from main import main
from src.app.evaluation import EvalReport, SampleRecord, evaluate
from src.app import selfcheck
from src.app.selfcheck import CheckResult, check_model_gradients, check_primitives, run_selfcheck, terminated_sequences
from src.backend.checkpoint import load_checkpoint, restore_model, save_checkpoint
from src.model.recognizer import VlamdModel
from src.utils.constants import EXIT_DATA_ERROR, EXIT_OK, EXIT_USAGE, EVAL_MANIFEST, TAG_IV, TAG_OOV, WORKERS_ENV_VAR
import pytest
import yaml


def record(index, gt, pred, tag):
    return SampleRecord(index, f"eval/{index:06d}.png", gt, pred, tag)


class TestEvalReport:
    @pytest.fixture
    def report(self):
        return EvalReport([
            record(0, 'abc', 'abc', TAG_IV),
            record(1, 'bad', 'bed', TAG_IV),
            record(2, 'cafe', 'cafe', TAG_IV),
            record(3, 'dab', 'dab', TAG_OOV),
            record(4, 'ace', 'Ace', TAG_OOV),
        ])

    def test_rates(self, report):
        assert (report.correct_iv, report.n_iv) == (2, 3)
        assert (report.correct_oov, report.n_oov) == (1, 2)
        assert report.crw_total == pytest.approx(3 / 5)
        assert report.crw_iv == pytest.approx(2 / 3)
        assert report.crw_oov == pytest.approx(1 / 2)

    def test_total_is_weighted_bucket_mean(self, report):
        weighted = (report.n_iv * report.crw_iv + report.n_oov * report.crw_oov) / report.n_total
        assert report.crw_total == pytest.approx(weighted)

    def test_empty_report(self):
        assert EvalReport().crw_total == 0.0

    def test_tsv(self, report, tmp_path):
        report.write_tsv(tmp_path / 'report.tsv')
        lines = (tmp_path / 'report.tsv').read_text().splitlines()
        assert lines[0].split('\t') == ['index', 'path', 'gt', 'pred', 'correct', 'tag']
        assert lines[2].split('\t')[4] == '0'
        assert lines[-2].split('\t')[:3] == ['# crw_IV', '2', '3']


class TestEvaluate:
    def test_records_follow_manifest_order(self, tiny_dataset):
        cfg, _, evals = tiny_dataset
        report = evaluate(VlamdModel(cfg), evals, cfg.decode, workers=3)
        assert [r.index for r in report.records] == list(range(len(evals)))
        assert [r.gt for r in report.records] == [s.transcript for s in evals.samples]
        assert report.n_iv == 2 and report.n_oov == 2

    def test_same_checkpoint_same_report(self, tiny_dataset, tmp_path):
        cfg, _, evals = tiny_dataset
        save_checkpoint(tmp_path / 'ckpt', VlamdModel(cfg), cfg, step=0)
        ckpt = load_checkpoint(tmp_path / 'ckpt')
        first = evaluate(restore_model(ckpt), evals, ckpt.config.decode, workers=1)
        second = evaluate(restore_model(ckpt), evals, ckpt.config.decode, workers=3)
        assert first == second
        first.write_tsv(tmp_path / 'a.tsv')
        second.write_tsv(tmp_path / 'b.tsv')
        assert (tmp_path / 'a.tsv').read_bytes() == (tmp_path / 'b.tsv').read_bytes()


class TestSelfCheck:
    def test_terminated_sequences(self):
        sequences = terminated_sequences(5, 3)
        assert len(sequences) == 1 + 4 + 16
        assert all(s[-1] == 0 and 0 not in s[:-1] for s in sequences)

    def test_primitive_gradients(self):
        assert all(r.passed for r in check_primitives(seed=1))

    def test_model_gradient(self):
        result = check_model_gradients(seed=2)
        assert result.passed, result.detail

    def test_default_run_covers_twenty_models(self, monkeypatch):
        counts = []
        monkeypatch.setattr(selfcheck, 'check_primitives', lambda: [])
        monkeypatch.setattr(selfcheck, 'check_model_gradients', lambda: CheckResult('grad', True, ''))
        monkeypatch.setattr(selfcheck, 'check_beam_enumeration', lambda n: counts.append(n) or [])
        assert run_selfcheck().passed
        assert counts == [20]

    @pytest.mark.slow
    def test_full_report(self):
        report = run_selfcheck(n_models=2)
        assert report.passed, '\n'.join(report.lines())


class TestCommandLine:
    def test_unknown_subcommand(self):
        assert main(['fly']) == EXIT_USAGE

    def test_help(self):
        assert main(['--help']) == EXIT_OK

    def test_bad_config_key(self, tmp_path):
        path = tmp_path / 'cfg.yaml'
        path.write_text('train.lamda: 0.1\n')
        assert main(['gen-data', '--config', str(path)]) == EXIT_USAGE

    def test_eval_takes_workers_from_environment_only(self, tmp_path):
        assert main(['eval', '--ckpt', 'c', '--data', 'd', '--workers', '2']) == EXIT_USAGE

    def test_missing_checkpoint(self, tmp_path):
        assert main(['eval', '--ckpt', str(tmp_path / 'none'), '--data', str(tmp_path / 'x.tsv')]) == EXIT_DATA_ERROR

    def test_eval_and_decode(self, tiny_dataset, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv(WORKERS_ENV_VAR, '2')
        cfg, _, evals = tiny_dataset
        ckpt = tmp_path / 'ckpt'
        save_checkpoint(ckpt, VlamdModel(cfg), cfg, step=0)
        report = tmp_path / 'report.tsv'

        assert main(['eval', '--ckpt', str(ckpt), '--data', str(evals.root / EVAL_MANIFEST), '--report', str(report)]) == EXIT_OK
        assert capsys.readouterr().out.startswith('crw_total\t')
        assert report.exists()

        image = evals.image_path(0)
        assert main(['decode', '--ckpt', str(ckpt), '--image', str(image), '--dump-candidates']) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[1].startswith('rank\torigin')
        assert lines[2].split('\t')[2] == lines[0]

    @pytest.mark.slow
    def test_generate_train_evaluate(self, tmp_path, capsys):
        config = {
            'data.root': str(tmp_path / 'synth'),
            'data.charset': 'abcdefg',
            'data.image_h': 16,
            'data.image_w': 32,
            'data.min_len': 1,
            'data.max_len': 3,
            'data.n_iv': 8,
            'data.n_oov': 4,
            'data.n_train': 8,
            'data.n_eval_iv': 2,
            'data.n_eval_oov': 2,
            'backbone.c_model': 16,
            'backbone.n_heads': 2,
            'backbone.n_enc_layers': 1,
            'transd.n_heads': 2,
            'transd.n_layers': 1,
            'model.max_len': 3,
            'train.batch_size': 4,
            'train.max_steps': 4,
            'train.ckpt_every': 0,
            'train.out_dir': str(tmp_path / 'run'),
        }
        path = tmp_path / 'cfg.yaml'
        path.write_text(yaml.safe_dump(config))
        assert main(['gen-data', '--config', str(path)]) == EXIT_OK
        assert main(['train', '--config', str(path)]) == EXIT_OK
        final = capsys.readouterr().out.strip().splitlines()[-1]
        assert final.endswith('ckpt_000004')
        assert main(['eval', '--ckpt', final, '--data', str(tmp_path / 'synth' / EVAL_MANIFEST)]) == EXIT_OK
