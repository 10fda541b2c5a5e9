import json

import numpy as np
import pytest

from deepcat import train as train_module
from deepcat.corpus import PAD_ID
from deepcat.errors import CorpusError, DivergenceError, NonFiniteError, ShapeError
from deepcat.models import Ablation, GeneratorConfig, LossConfig, SplitConfig, TrainConfig
from deepcat.pipeline import generate_data, load_dataset, train_model
from deepcat.network import init_params
from deepcat.train import BETA1, AdamState, adam_step, fit


class TestAdam:
    def test_first_step_moves_by_learning_rate(self, tiny_params):
        state = AdamState.for_params(tiny_params)
        grads = {name: np.full(t.shape, 0.3) for name, t in tiny_params}
        updated, state = adam_step(tiny_params, grads, state, lr=0.01)
        assert state.step == 1
        delta = tiny_params['out.w'].data - updated['out.w'].data
        np.testing.assert_allclose(delta, 0.01, rtol=1e-6)
        np.testing.assert_allclose(state.m['out.w'], (1 - BETA1) * 0.3)

    def test_pad_row_frozen(self, tiny_params):
        grads = {name: np.ones(t.shape) for name, t in tiny_params}
        updated, _ = adam_step(tiny_params, grads, AdamState.for_params(tiny_params), lr=0.1)
        np.testing.assert_array_equal(updated['word_emb'].data[PAD_ID], 0.0)
        assert not np.array_equal(updated['word_emb'].data[2], tiny_params['word_emb'].data[2])

    def test_missing_gradient_means_no_move(self, tiny_params):
        updated, _ = adam_step(tiny_params, {}, AdamState.for_params(tiny_params), lr=0.1)
        for name, t in tiny_params:
            np.testing.assert_array_equal(updated[name].data, t.data)

    def test_rejects_bad_gradients(self, tiny_params):
        state = AdamState.for_params(tiny_params)
        bad = np.zeros(tiny_params['cat_emb'].shape)
        bad[0, 0] = np.inf
        with pytest.raises(NonFiniteError, match='cat_emb'):
            adam_step(tiny_params, {'cat_emb': bad}, state, lr=0.1)
        with pytest.raises(ShapeError):
            adam_step(tiny_params, {'cat_emb': np.zeros((1, 1))}, state, lr=0.1)


class TestFit:
    def test_log_and_best_epoch(self, trained_tiny, tiny_train_config):
        log = trained_tiny.log
        assert [e['epoch'] for e in log] == [1, 2]
        for entry in log:
            assert set(entry) == {'epoch', 'ablation', 'train_loss', 'l_pc', 'l_cm',
                                  'valid_macro_f1', 'valid_micro_f1'}
            assert np.isfinite(entry['train_loss'])
        scores = [e['valid_micro_f1'] for e in log]
        meta = trained_tiny.checkpoint.meta
        assert meta.best_epoch == int(np.argmax(scores)) + 1
        assert meta.valid_micro_f1 == max(scores)
        assert meta.ablation is Ablation.JOINT_PLUS_CM
        assert meta.train_cfg == tiny_train_config

    def test_reproducible(self, trained_tiny, tiny_dataset, tiny_train_config, tiny_model_overrides):
        again = train_model(tiny_dataset, tiny_train_config, min_freq=1, model_overrides=tiny_model_overrides,
                            progress=False)
        for name, t in trained_tiny.checkpoint.params:
            np.testing.assert_array_equal(again.checkpoint.params[name].data, t.data)
        assert again.log == trained_tiny.log

    def test_zero_lambda1_reproduces_joint(self, tiny_dataset, tiny_train_config, tiny_model_overrides):
        joint_cfg = tiny_train_config.model_copy(update={'ablation': Ablation.JOINT})
        gated_cfg = tiny_train_config.model_copy(update={
            'ablation': Ablation.JOINT_PLUS_CM, 'loss_cfg': LossConfig(lambda1=0.0)})
        joint = train_model(tiny_dataset, joint_cfg, 1, tiny_model_overrides, progress=False)
        gated = train_model(tiny_dataset, gated_cfg, 1, tiny_model_overrides, progress=False)
        for name, t in joint.checkpoint.params:
            np.testing.assert_array_equal(gated.checkpoint.params[name].data, t.data)
        assert [e['valid_macro_f1'] for e in gated.log] == [e['valid_macro_f1'] for e in joint.log]

    def test_log_file(self, tmp_path, tiny_dataset, tiny_train_config, tiny_model_overrides):
        cfg = tiny_train_config.model_copy(update={'epochs': 1, 'ablation': Ablation.WORD_ONLY})
        path = tmp_path / 'log.jsonl'
        result = train_model(tiny_dataset, cfg, 1, tiny_model_overrides, log_path=str(path), progress=False)
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert lines == result.log
        assert lines[0]['l_cm'] == 0.0

    def test_log_file_is_replaced(self, tmp_path, tiny_dataset, tiny_train_config, tiny_model_overrides):
        cfg = tiny_train_config.model_copy(update={'epochs': 1, 'ablation': Ablation.WORD_ONLY})
        path = tmp_path / 'log.jsonl'
        path.write_text('{"epoch": 7, "stale": true}\n')
        result = train_model(tiny_dataset, cfg, 1, tiny_model_overrides, log_path=str(path), progress=False)
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert lines == result.log
        assert all('stale' not in line for line in lines)

    def test_word_only_leaves_category_branch_untouched(self, tiny_dataset, tiny_train_config,
                                                        tiny_model_overrides):
        cfg = tiny_train_config.model_copy(update={'ablation': Ablation.WORD_ONLY})
        result = train_model(tiny_dataset, cfg, 1, tiny_model_overrides, progress=False)
        initial = init_params(result.checkpoint.meta.model_cfg, cfg.seed)
        branch = [n for n in initial.names() if n == 'cat_emb' or n.startswith(('attn.', 'fuse.'))]
        assert 'cat_emb' in branch and any(n.startswith('attn.') for n in branch)
        for name in branch:
            np.testing.assert_array_equal(result.checkpoint.params[name].data, initial[name].data)
        assert not np.array_equal(result.checkpoint.params['out.w'].data, initial['out.w'].data)
        assert not np.array_equal(result.checkpoint.params['word_emb'].data, initial['word_emb'].data)

    def test_empty_splits(self, tiny_dataset, tiny_vocab, tiny_train_config):
        with pytest.raises(CorpusError):
            fit([], tiny_dataset.valid, tiny_vocab, tiny_dataset.taxonomy, tiny_train_config)
        with pytest.raises(CorpusError):
            fit(tiny_dataset.train, [], tiny_vocab, tiny_dataset.taxonomy, tiny_train_config)

    def test_divergence_is_reported(self, monkeypatch, tiny_dataset, tiny_train_config, tiny_model_overrides):
        def exploding(params, grads, state, lr):
            raise NonFiniteError("adam_step: non-finite gradient for parameter 'out.w'")

        monkeypatch.setattr(train_module, 'adam_step', exploding)
        with pytest.raises(DivergenceError, match='epoch 1'):
            train_model(tiny_dataset, tiny_train_config, 1, tiny_model_overrides, progress=False)


def test_training_loss_decreases_with_default_settings(tmp_path):
    """Adam 0.001, batch 64, dropout 0.5, 100-dim embeddings on a smoke corpus."""
    generate_data(GeneratorConfig(num_l1=4, num_leaves=20, vocab_size=200, num_queries=2000, seed=1),
                  SplitConfig(per_bucket=20, seed=1), str(tmp_path))
    dataset = load_dataset(str(tmp_path))
    result = train_model(dataset, TrainConfig(epochs=3, seed=1), min_freq=1, progress=False)
    losses = [e['train_loss'] for e in result.log]
    assert losses[0] > losses[1] > losses[2]
    assert all(np.isfinite(e['l_pc']) and np.isfinite(e['l_cm']) for e in result.log)
