import hashlib
import json
import logging

import numpy as np
import pytest

from cisper.corpus import Conversation, Utterance
from cisper.encoders import (
    RELATIONS,
    CommonsenseBackend,
    ConversationFeatures,
    PrecomputedCommonsenseBackend,
    SemanticBackend,
    cached_ids,
    encode_commonsense,
    encode_semantics_batch,
    encode_utterance_semantics,
    extract_conversation_features,
    pool_last_layers,
    read_feature_cache,
    reference_backend,
    stable_unit_vector,
    write_feature_cache,
)
from cisper.errors import BackendError, CacheMissError, ConfigurationError, CorruptCacheError, SchemaError
from cisper.toy import toy_corpus


def _utt(text="I slammed the door", cid="c", idx=0):
    return Utterance(cid, idx, "a", text)


def _conv(cid, texts):
    return Conversation(cid, tuple(Utterance(cid, i, "a", t) for i, t in enumerate(texts)))


class _FixedLayers(SemanticBackend):
    embedding_dim = 3

    def layer_vectors(self, utterance):
        e1 = np.array([1.0, 0.0, 0.0])
        return np.stack([e1, 2 * e1, 3 * e1, 4 * e1])


class _Broken(SemanticBackend, CommonsenseBackend):
    name = "broken"

    def layer_vectors(self, utterance):
        raise RuntimeError("device lost")

    def encode(self, utterance, relation):
        raise RuntimeError("device lost")


class TestReferenceBackend:
    def test_golden_vector(self):
        # frozen so a change of hash or generator shows up on every platform
        expected = [0.5633068631330802, 0.06041435499867771, -0.8213445903303179, -0.06654733347314017]
        np.testing.assert_array_equal(stable_unit_vector(0, "hello", 4), expected)

    def test_seed_and_norm(self):
        a = stable_unit_vector(0, "x", 64)
        b = stable_unit_vector(1, "x", 64)
        assert not np.allclose(a, b)
        assert abs(np.linalg.norm(a) - 1.0) < 1e-6

    def test_semantic_pool_is_unit(self):
        sem, _ = reference_backend(32, seed=3)
        v = encode_utterance_semantics(_utt(), sem)
        assert v.shape == (32,) and v.dtype == np.float32
        assert abs(np.linalg.norm(v) - 1.0) < 1e-6

    def test_truncation_warns(self, caplog):
        sem, cs = reference_backend(8)
        sem.max_length = cs.max_length = 5
        with caplog.at_level(logging.WARNING):
            encode_utterance_semantics(_utt("a b c d e f g"), sem)
            encode_commonsense(_utt("a b c d e f g"), "xReact", cs)
        assert sum("truncated" in r.message for r in caplog.records) == 2


class TestSemantics:
    def test_pool_mean(self):
        v = encode_utterance_semantics(_utt(), _FixedLayers())
        np.testing.assert_array_equal(v, [2.5, 0.0, 0.0])

    def test_pool_shape_check(self):
        with pytest.raises(ValueError):
            pool_last_layers(np.zeros((3, 5)))

    def test_deterministic(self):
        sem, _ = reference_backend(16)
        assert encode_utterance_semantics(_utt(), sem).tobytes() == encode_utterance_semantics(_utt(), sem).tobytes()

    def test_batch_equals_loop(self):
        sem, _ = reference_backend(16, seed=5)
        utts = list(toy_corpus(20, 5, seed=2).utterances())
        assert len(utts) == 100
        loop = np.stack([encode_utterance_semantics(u, sem) for u in utts])
        np.testing.assert_array_equal(encode_semantics_batch(utts, sem), loop)

    def test_backend_failure_names_utterance(self):
        with pytest.raises(BackendError) as info:
            encode_utterance_semantics(_utt(cid="dlg", idx=4), _Broken())
        assert (info.value.conversation_id, info.value.index) == ("dlg", 4)


class TestCommonsense:
    def test_relations_distinct(self):
        _, cs = reference_backend(16)
        a = encode_commonsense(_utt(), "xReact", cs)
        b = encode_commonsense(_utt(), "oReact", cs)
        assert a.shape == (16,) and not np.array_equal(a, b)

    def test_unknown_relation(self):
        _, cs = reference_backend(16)
        with pytest.raises(ConfigurationError, match="xFeel"):
            encode_commonsense(_utt(), "xFeel", cs)

    def test_nine_relations_stack(self):
        _, cs = reference_backend(8, seed=1)
        block = cs.encode_relations(_utt())
        loop = np.stack([encode_commonsense(_utt(), r, cs) for r in RELATIONS])
        np.testing.assert_array_equal(block.astype(np.float32), loop)

    def test_backend_failure(self):
        with pytest.raises(BackendError):
            encode_commonsense(_utt(), "xIntent", _Broken())

    def test_precomputed(self, tmp_path):
        table = {"c#0": np.arange(9 * 2, dtype=np.float32).reshape(9, 2)}
        np.savez(tmp_path / "cs.npz", **table)
        cs = PrecomputedCommonsenseBackend(tmp_path / "cs.npz")
        assert cs.embedding_dim == 2
        np.testing.assert_array_equal(encode_commonsense(_utt(), "oWant", cs), [12, 13])
        with pytest.raises(BackendError):
            cs.encode_relations(_utt(idx=1))


class TestConversationFeatures:
    def test_shapes(self):
        sem, cs = reference_backend(8, commonsense_dim=4)
        f = extract_conversation_features(_conv("c", ["a", "b", "c"]), sem, cs)
        assert f.x.shape == (3, 8) and f.c.shape == (3, 9, 4)
        f1 = extract_conversation_features(_conv("d", ["a"]), sem, cs)
        assert f1.x.shape == (1, 8)

    def test_compositional_loop(self):
        sem, cs = reference_backend(8, seed=2, commonsense_dim=4)
        conv = _conv("c", ["we won !", "oh no", "fine"])
        f = extract_conversation_features(conv, sem, cs)
        for t, u in enumerate(conv.utterances):
            np.testing.assert_array_equal(f.x[t], encode_utterance_semantics(u, sem))
            for j, r in enumerate(RELATIONS):
                np.testing.assert_array_equal(f.c[t, j], encode_commonsense(u, r, cs))

    def test_failure_carries_index(self):
        sem, _ = reference_backend(4)
        with pytest.raises(BackendError) as info:
            extract_conversation_features(_conv("c", ["a", "b"]), sem, _Broken())
        assert info.value.conversation_id == "c"

    def test_rejects_non_finite(self):
        with pytest.raises(SchemaError):
            ConversationFeatures("c", np.full((1, 2), np.nan), np.zeros((1, 9, 2)))


class TestFeatureCache:
    @pytest.fixture()
    def feats(self):
        sem, cs = reference_backend(8, commonsense_dim=4)
        return [extract_conversation_features(c, sem, cs) for c in toy_corpus(5, 3).conversations]

    def test_roundtrip_bit_exact(self, tmp_path, feats):
        manifest = write_feature_cache(feats, tmp_path, {"semantic": "ref"})
        assert manifest["d_u"] == 8 and manifest["d_c"] == 4 and manifest["dtype"] == "float32"
        back = read_feature_cache(tmp_path, [f.conversation_id for f in feats])
        assert all(a.equals(b) for a, b in zip(feats, back))
        assert cached_ids(tmp_path) == [f.conversation_id for f in feats]

    def test_blob_layout(self, tmp_path, feats):
        write_feature_cache(feats[:1], tmp_path)
        entry = json.loads((tmp_path / "manifest.json").read_text())["blobs"][feats[0].conversation_id]
        payload = (tmp_path / "blobs" / entry["file"]).read_bytes()
        assert payload == feats[0].x.astype("<f4").tobytes() + feats[0].c.astype("<f4").tobytes()
        assert entry["sha256"] == hashlib.sha256(payload).hexdigest()

    def test_byte_identical_rewrite(self, tmp_path, feats):
        write_feature_cache(feats, tmp_path / "a")
        write_feature_cache(list(reversed(feats)), tmp_path / "b")
        for name in ("manifest.json",):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_unknown_id_lists_available(self, tmp_path, feats):
        write_feature_cache(feats, tmp_path)
        with pytest.raises(CacheMissError) as info:
            read_feature_cache(tmp_path, ["nope"])
        assert feats[0].conversation_id in str(info.value)

    def test_checksum(self, tmp_path, feats):
        write_feature_cache(feats, tmp_path)
        blob = next((tmp_path / "blobs").iterdir())
        data = bytearray(blob.read_bytes())
        data[0] ^= 0xFF
        blob.write_bytes(bytes(data))
        with pytest.raises(CorruptCacheError, match=blob.name):
            read_feature_cache(tmp_path)

    def test_dimension_mismatch(self, tmp_path, feats):
        write_feature_cache(feats, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["d_c"] = 768
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(SchemaError):
            read_feature_cache(tmp_path)

    def test_merge_and_clash(self, tmp_path, feats):
        write_feature_cache(feats[:2], tmp_path)
        write_feature_cache(feats[2:], tmp_path)
        assert len(cached_ids(tmp_path)) == 5
        sem, cs = reference_backend(6, commonsense_dim=4)
        other = extract_conversation_features(_conv("z", ["a"]), sem, cs)
        with pytest.raises(SchemaError):
            write_feature_cache([other], tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CacheMissError):
            read_feature_cache(tmp_path)
