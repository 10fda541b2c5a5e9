import json

import numpy as np
import pytest

from deepcat.checkpoint import CHECKPOINT_VERSION, PARAM_PREFIX, load_checkpoint, save_checkpoint
from deepcat.corpus import Vocabulary, generate_synthetic_corpus
from deepcat.errors import CheckpointError
from deepcat.models import GeneratorConfig
from deepcat.pipeline import predict_texts


@pytest.fixture
def saved(tmp_path, trained_tiny):
    path = tmp_path / 'model.npz'
    save_checkpoint(str(path), trained_tiny.checkpoint.params, trained_tiny.checkpoint.meta)
    return path


def _write_raw(path, arrays, meta_bytes):
    members = {PARAM_PREFIX + name: arr for name, arr in arrays.items()}
    members['meta'] = np.frombuffer(meta_bytes, dtype=np.uint8)
    with open(path, 'wb') as f:
        np.savez(f, **members)


class TestRoundTrip:
    def test_parameters_are_bit_exact(self, saved, trained_tiny):
        loaded = load_checkpoint(str(saved))
        assert loaded.meta == trained_tiny.checkpoint.meta
        for name, t in trained_tiny.checkpoint.params:
            np.testing.assert_array_equal(loaded.params[name].data, t.data)

    def test_saving_twice_is_byte_identical(self, tmp_path, saved, trained_tiny):
        other = tmp_path / 'again.npz'
        save_checkpoint(str(other), trained_tiny.checkpoint.params, trained_tiny.checkpoint.meta)
        assert other.read_bytes() == saved.read_bytes()

    def test_predictions_survive_reload(self, saved, trained_tiny, tiny_dataset):
        texts = [r.raw_text for r in tiny_dataset.test[:5]]
        before = predict_texts(trained_tiny.checkpoint, tiny_dataset.taxonomy, texts, k=3)
        after = predict_texts(load_checkpoint(str(saved)), tiny_dataset.taxonomy, texts, k=3)
        assert after == before

    def test_matching_vocab_and_taxonomy_accepted(self, saved, trained_tiny, tiny_dataset):
        vocab = trained_tiny.checkpoint.vocabulary()
        loaded = load_checkpoint(str(saved), vocab=vocab, taxonomy=tiny_dataset.taxonomy)
        assert loaded.vocabulary().tokens == vocab.tokens


class TestRejects:
    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match='not found'):
            load_checkpoint(str(tmp_path / 'nope.npz'))

    def test_not_an_archive(self, tmp_path):
        path = tmp_path / 'junk.npz'
        path.write_bytes(b'definitely not a zip file')
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_truncated_archive(self, tmp_path, saved):
        path = tmp_path / 'cut.npz'
        path.write_bytes(saved.read_bytes()[:200])
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_unsupported_version(self, tmp_path, trained_tiny):
        payload = json.loads(trained_tiny.checkpoint.meta.model_dump_json())
        payload['format_version'] = CHECKPOINT_VERSION + 1
        path = tmp_path / 'future.npz'
        _write_raw(path, trained_tiny.checkpoint.params.arrays(), json.dumps(payload).encode('utf-8'))
        with pytest.raises(CheckpointError, match='unsupported'):
            load_checkpoint(str(path))
        with pytest.raises(CheckpointError):
            bumped = trained_tiny.checkpoint.meta.model_copy(update={'format_version': CHECKPOINT_VERSION + 1})
            save_checkpoint(str(tmp_path / 'x.npz'), trained_tiny.checkpoint.params, bumped)

    def test_corrupt_metadata(self, tmp_path, trained_tiny):
        path = tmp_path / 'meta.npz'
        _write_raw(path, trained_tiny.checkpoint.params.arrays(), b'\xff\xfe not json')
        with pytest.raises(CheckpointError, match='corrupt metadata'):
            load_checkpoint(str(path))

    def test_missing_parameter(self, tmp_path, trained_tiny):
        payload = json.loads(trained_tiny.checkpoint.meta.model_dump_json())
        arrays = trained_tiny.checkpoint.params.arrays()
        arrays.pop('out.b')
        path = tmp_path / 'partial.npz'
        _write_raw(path, arrays, json.dumps(payload).encode('utf-8'))
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_vocab_mismatch(self, saved):
        with pytest.raises(CheckpointError, match='vocabulary hash mismatch'):
            load_checkpoint(str(saved), vocab=Vocabulary(['zebra', 'kitchen']))

    def test_taxonomy_mismatch(self, saved, trained_tiny):
        _, other = generate_synthetic_corpus(GeneratorConfig(num_l1=2, num_leaves=6, vocab_size=60,
                                                             num_queries=50, seed=9))
        with pytest.raises(CheckpointError, match='taxonomy hash mismatch'):
            load_checkpoint(str(saved), taxonomy=other)
        with pytest.raises(CheckpointError):
            predict_texts(trained_tiny.checkpoint, other, ['kitchen faucet'])
