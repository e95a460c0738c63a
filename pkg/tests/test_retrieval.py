import os

import numpy as np
import pytest

from dva.src.models.exceptions import ContractError, DegenerateInputError, MissingArtifactError
from dva.src.models.schemas import AdapterConfig, ManifestRecord, Role, Split
from dva.src.services.adapters import attach
from dva.src.services.retrieval import (
    EmbeddingSet, build_split, embed_gallery, evaluate, rank_gallery, recall_at_k, train_class_count,
    write_recall,
)
from dva.src.services.trainer import ImagePipeline


def brute_force_recall(matrix, labels, ids, k):
    """Per-query Python sort by (-cosine, id)"""
    x = matrix / np.linalg.norm(matrix, axis=1, keepdims=True)
    hits = 0
    for q in range(len(labels)):
        others = [j for j in range(len(labels)) if j != q]
        others.sort(key=lambda j: (-float(x[q] @ x[j]), ids[j]))
        hits += any(labels[j] == labels[q] for j in others[:k])
    return hits / len(labels)


# =============================================================================
# Recall@K
# =============================================================================

def test_trivial_two_items():
    same = EmbeddingSet(np.eye(2), [0, 0], ["a", "b"])
    assert recall_at_k(same, [1]) == {1: 1.0}
    different = EmbeddingSet(np.eye(2), [0, 1], ["a", "b"])
    assert recall_at_k(different, [1]) == {1: 0.0}


def test_matches_brute_force():
    rng = np.random.default_rng(0)
    matrix = rng.standard_normal((500, 16))
    labels = rng.integers(0, 50, size=500).tolist()
    ids = [f"{i:04d}" for i in range(500)]
    embeddings = EmbeddingSet(matrix, labels, ids)
    result = recall_at_k(embeddings, [1, 2, 4, 8])
    for k, value in result.items():
        assert value == pytest.approx(brute_force_recall(embeddings.matrix.astype(np.float64), labels, ids, k))


def test_monotone_in_k():
    rng = np.random.default_rng(1)
    embeddings = EmbeddingSet(rng.standard_normal((60, 8)), rng.integers(0, 6, 60).tolist(),
                              [str(i) for i in range(60)])
    values = recall_at_k(embeddings, [1, 2, 4, 8, 16, 32])
    ordered = [values[k] for k in sorted(values)]
    assert all(a <= b for a, b in zip(ordered, ordered[1:]))


def test_row_scaling_does_not_matter():
    rng = np.random.default_rng(2)
    matrix = rng.standard_normal((40, 8))
    labels = rng.integers(0, 4, 40).tolist()
    ids = [str(i) for i in range(40)]
    scales = rng.uniform(0.1, 10.0, size=(40, 1))
    assert recall_at_k(EmbeddingSet(matrix, labels, ids), [1, 4]) == \
        recall_at_k(EmbeddingSet(matrix * scales, labels, ids), [1, 4])


def test_single_class_is_perfect():
    rng = np.random.default_rng(3)
    embeddings = EmbeddingSet(rng.standard_normal((10, 4)), [0] * 10, [str(i) for i in range(10)])
    assert recall_at_k(embeddings, [1, 9]) == {1: 1.0, 9: 1.0}


def test_k_bounds():
    embeddings = EmbeddingSet(np.eye(3), [0, 1, 2], ["a", "b", "c"])
    with pytest.raises(ContractError):
        recall_at_k(embeddings, [3])
    with pytest.raises(ContractError):
        recall_at_k(EmbeddingSet(np.ones((1, 3)), [0], ["a"]), [1])


def test_ties_broken_by_id():
    """Query 'q' is equidistant from both; the smaller id wins the tie"""
    matrix = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    embeddings = EmbeddingSet(matrix, [1, 0, 1], ["q", "b", "a"])
    order = rank_gallery(embeddings)
    assert order[0].tolist() == [2, 1]
    # b's nearest neighbour is a (similarity 1), then q
    assert order[1].tolist() == [2, 0]
    # only q hits, and only because of the tie-break
    assert recall_at_k(embeddings, [1])[1] == pytest.approx(1 / 3)


def test_zero_embedding_rejected():
    with pytest.raises(DegenerateInputError):
        rank_gallery(EmbeddingSet(np.array([[1.0, 0.0], [0.0, 0.0]]), [0, 1], ["a", "b"]))


def test_evaluate_and_write(tmp_path):
    embeddings = EmbeddingSet(np.eye(4) + 0.1, [0, 0, 1, 1], list("abcd"))
    table = evaluate(embeddings, [1, 2])
    assert table.n_queries == 4
    path = write_recall(str(tmp_path / "recall.csv"), table)
    with open(path) as f:
        assert f.readline().strip() == "K,recall"
    assert "Recall" in table.format()


# =============================================================================
# Splits
# =============================================================================

def _records(n_classes, per_class=2):
    return [
        ManifestRecord(image_path=f"/x/{c}_{i}.ppm", label_id=c,
                       split=Split.TRAIN if i == 0 else Split.TEST, image_id=f"{c}_{i}")
        for c in range(n_classes) for i in range(per_class)
    ]


def test_closed_split_uses_column():
    train, test = build_split(_records(4), "closed")
    assert [r.image_id for r in train] == ["0_0", "1_0", "2_0", "3_0"]
    assert len(test) == 4


def test_open_split_halves_classes():
    train, test = build_split(_records(6), "open")
    assert {r.label_id for r in train} == {0, 1, 2}
    assert {r.label_id for r in test} == {3, 4, 5}
    assert all(r.split == Split.TRAIN for r in train)
    assert all(r.split == Split.TEST for r in test)


def test_open_split_odd_count():
    train, test = build_split(_records(5), "open")
    assert {r.label_id for r in train} == {0, 1}
    assert {r.label_id for r in test} == {2, 3, 4}
    assert train_class_count(train) == 2


def test_split_errors():
    with pytest.raises(ContractError):
        build_split(_records(4), "random")
    with pytest.raises(ContractError):
        build_split([r for r in _records(4) if r.label_id != 1], "closed")
    with pytest.raises(ContractError):
        build_split(_records(1), "open")


# =============================================================================
# Gallery embedding
# =============================================================================

@pytest.fixture
def pipeline(toy_cfg):
    return ImagePipeline(toy_cfg.image_size, 37, hflip=False)


def test_embed_gallery(toy_encoder, pipeline, tiny_dataset):
    test = tiny_dataset["test"]
    embeddings = embed_gallery(test, toy_encoder, None, pipeline, batch_size=5)
    assert embeddings.matrix.shape == (len(test), 32)
    np.testing.assert_allclose(np.linalg.norm(embeddings.matrix, axis=1), 1.0, atol=1e-5)
    assert embeddings.ids == [r.image_id for r in test]
    assert embeddings.latency_ms > 0


def test_embed_gallery_threads_and_adapters(toy_cfg, toy_encoder, pipeline, tiny_dataset):
    test = tiny_dataset["test"]
    adapters = attach(AdapterConfig(d=4), toy_cfg, seed=0)
    serial = embed_gallery(test, toy_encoder, None, pipeline)
    threaded = embed_gallery(test, toy_encoder, adapters, pipeline, workers=3)
    np.testing.assert_array_equal(serial.matrix, threaded.matrix)


def test_duplicate_image_is_nearest(toy_encoder, pipeline, tiny_dataset):
    first = tiny_dataset["test"][0]
    twin = first.model_copy(update={"image_id": "twin", "label_id": first.label_id})
    others = [r for r in tiny_dataset["test"] if r.label_id != first.label_id]
    embeddings = embed_gallery([first, twin] + others, toy_encoder, None, pipeline)
    assert float(embeddings.matrix[0] @ embeddings.matrix[1]) == pytest.approx(1.0, abs=1e-6)
    assert recall_at_k(embeddings, [1])[1] >= 2 / len(embeddings)


def test_embed_gallery_with_discriminative_crop(toy_encoder, pipeline, tiny_dataset):
    test = tiny_dataset["test"]
    plain = embed_gallery(test, toy_encoder, None, pipeline)
    cropped = embed_gallery(test, toy_encoder, None, pipeline, detections=tiny_dataset["detections"])
    assert not np.allclose(plain.matrix, cropped.matrix)


def test_embed_gallery_errors(toy_encoder, pipeline, tiny_dataset):
    with pytest.raises(ContractError):
        embed_gallery([], toy_encoder, None, pipeline)
    with pytest.raises(ContractError):
        embed_gallery(tiny_dataset["opa"][:2], toy_encoder, None, pipeline)
    missing = tiny_dataset["test"][0].model_copy(update={"image_path": "/nonexistent/x.ppm"})
    with pytest.raises(MissingArtifactError):
        embed_gallery([missing], toy_encoder, None, pipeline)


def test_embedding_set_save_load(tmp_path):
    original = EmbeddingSet(np.eye(3, 4), [2, 0, 1], ["a", "b", "c"])
    original.save(str(tmp_path))
    assert os.path.exists(tmp_path / "index.csv")
    loaded = EmbeddingSet.load(str(tmp_path))
    np.testing.assert_array_equal(loaded.matrix, original.matrix)
    assert loaded.labels == [2, 0, 1] and loaded.ids == ["a", "b", "c"]


def test_orig_role_required_in_split():
    records = [r.model_copy(update={"role": Role.DISC}) for r in _records(2)]
    with pytest.raises(ContractError):
        build_split(records, "closed")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
