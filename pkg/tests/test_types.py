import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eegalign.errors import DegenerateInputError, DimensionError, LabelError, ParameterError
from eegalign.types import (
    EEGEpoch,
    EmbeddingBatch,
    LossBreakdown,
    Modality,
    RetrievalReport,
    check_image_class_consistency,
    cosine_similarity_matrix,
)


def test_identical_unit_rows():
    m = cosine_similarity_matrix(EmbeddingBatch.unlabeled([[1.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(m.values, [[1, 1], [1, 1]])


def test_orthogonal_rows_give_identity():
    m = cosine_similarity_matrix(EmbeddingBatch.unlabeled(np.eye(2)))
    np.testing.assert_array_equal(m.values, np.eye(2))


def test_off_diagonal_value():
    m = cosine_similarity_matrix(EmbeddingBatch.unlabeled([[1.0, 0.0], [1.0, 1.0]]))
    assert m.values[0, 1] == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert m.values[0, 1] == pytest.approx(0.70711, abs=1e-5)


def test_zero_row_guarded_and_unguarded():
    batch = EmbeddingBatch.unlabeled([[0.0, 0.0], [1.0, 2.0]])
    m = cosine_similarity_matrix(batch)
    assert np.all(np.isfinite(m.values))
    with pytest.raises(DegenerateInputError, match="row 0"):
        cosine_similarity_matrix(batch, eps=None)


finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=finite), st.data())
def test_similarity_invariants_and_rescaling(x, data):
    x = x + 1e-3 * np.sign(x + 0.5)  # keep rows away from zero norm
    batch = EmbeddingBatch.unlabeled(x)
    m = cosine_similarity_matrix(batch).values
    np.testing.assert_array_equal(m, m.T)
    assert np.all(np.abs(m) <= 1 + 1e-6)
    np.testing.assert_allclose(np.diag(m), 1.0, atol=1e-6)
    scale = np.array(data.draw(st.lists(st.floats(1e-3, 1e3), min_size=x.shape[0], max_size=x.shape[0])))
    m2 = cosine_similarity_matrix(batch.with_vectors(x * scale[:, None])).values
    np.testing.assert_allclose(m2, m, rtol=1e-9, atol=1e-12)


def test_embedding_batch_validation():
    with pytest.raises(DimensionError):
        EmbeddingBatch(np.zeros((3, 2)), [0, 1])
    with pytest.raises(DegenerateInputError, match="row 1"):
        EmbeddingBatch(np.array([[0.0, 1.0], [np.nan, 0.0]]), [0, 1])
    b = EmbeddingBatch(np.ones((2, 3)), [4, 5], Modality.IMAGE)
    assert b.size == 2 and b.dim == 3 and b.modality is Modality.IMAGE
    with pytest.raises(ValueError):
        b.vectors[0, 0] = 2.0


def test_eeg_epoch_invariants():
    ep = EEGEpoch(np.zeros((3, 5)), 1, 7, "img")
    assert (ep.n_channels, ep.n_timepoints) == (3, 5)
    with pytest.raises(DimensionError):
        EEGEpoch(np.zeros((0, 5)), 1, 0, "x")
    with pytest.raises(DegenerateInputError):
        EEGEpoch(np.full((2, 2), np.inf), 1, 0, "x")
    with pytest.raises(LabelError):
        check_image_class_consistency([EEGEpoch(np.zeros((1, 1)), 1, 0, "a"), EEGEpoch(np.zeros((1, 1)), 1, 1, "a")])


def test_loss_breakdown_total_and_linearity():
    lb = LossBreakdown(0.5, 1.5, 0.25, 0.125, (1.0, 2.0, 3.0, 4.0))
    assert lb.total == pytest.approx(0.5 + 3.0 + 0.75 + 0.5, rel=1e-12)
    doubled = LossBreakdown(0.5, 1.5, 0.25, 0.125, (1.0, 4.0, 3.0, 4.0))
    # the contrastive contribution goes from 2*1.5 to 4*1.5
    assert doubled.total - lb.total == pytest.approx(3.0, rel=1e-12)
    with pytest.raises(ParameterError):
        LossBreakdown(0, 0, 0, 0, (1, -1, 0, 0))


def test_retrieval_report_invariants():
    r = RetrievalReport(10, 1, 40, 10)
    assert r.accuracy == 0.25
    lo, hi = r.confidence_interval
    assert lo < 0.25 < hi
    with pytest.raises(ParameterError):
        RetrievalReport(2, 2, 10, 1)
    with pytest.raises(ParameterError):
        RetrievalReport(10, 1, 10, 11)
