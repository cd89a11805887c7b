import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgetm.corpus import (ATC, ICD, CorpusFormatError, PatientDocument, VocabEntry, Vocabulary, count_vectors,
                          halve_document, load_corpus, normalize_bow, save_corpus, split_corpus)

from conftest import small_vocab


@pytest.fixture
def vocab():
    return Vocabulary([VocabEntry("250.0", ICD, 0), VocabEntry("401.9", ICD, 1),
                       VocabEntry("A10BA02", ATC, 0), VocabEntry("C09AA05", ATC, 1)])


def write(tmp_path, text):
    p = tmp_path / "corpus.tsv"
    p.write_text(text)
    return p


def test_duplicate_lines_aggregate(tmp_path, vocab):
    docs = load_corpus(write(tmp_path, "p1\t250.0\t2\np1\t250.0\t1\n"), vocab)
    assert len(docs) == 1
    assert docs[0].icd == {0: 3} and docs[0].atc == {}


def test_empty_file(tmp_path, vocab):
    assert load_corpus(write(tmp_path, ""), vocab) == []


def test_unknown_code_names_line(tmp_path, vocab):
    with pytest.raises(CorpusFormatError, match=r"corpus.tsv:2: unknown code 'X99'"):
        load_corpus(write(tmp_path, "p1\t250.0\t1\np1\tX99\t1\n"), vocab)


@pytest.mark.parametrize("line,msg", [("p1\t250.0\t0", "positive"), ("p1\t250.0\tx", "not an integer"),
                                      ("p1\t250.0", "3 tab-separated")])
def test_malformed_lines(tmp_path, vocab, line, msg):
    with pytest.raises(CorpusFormatError, match=msg):
        load_corpus(write(tmp_path, line + "\n"), vocab)


def test_save_load_round_trip(tmp_path, vocab):
    docs = [PatientDocument("p1", {0: 2, 1: 1}, {1: 4}), PatientDocument("p2", {}, {0: 1})]
    save_corpus(tmp_path / "c.tsv", docs, vocab)
    assert (tmp_path / "c.tsv").read_text().startswith("patient\tcode\tcount\n")
    assert load_corpus(tmp_path / "c.tsv", vocab) == docs


def test_vocabulary_ids_dense_per_modality(tmp_path, vocab):
    assert vocab.lookup("401.9") == (ICD, 1)
    assert vocab.lookup("C09AA05") == (ATC, 1)
    vocab.save(tmp_path / "v.tsv")
    assert Vocabulary.load(tmp_path / "v.tsv") == vocab


def test_vocabulary_rejects_duplicates():
    with pytest.raises(ValueError):
        Vocabulary([VocabEntry("a", ICD, 0), VocabEntry("a", ATC, 0)])


def test_document_rejects_zero_counts():
    with pytest.raises(ValueError):
        PatientDocument("p", {0: 0})


def docs_n(n):
    return [PatientDocument(f"p{i}", {0: 1}) for i in range(n)]


def test_split_sizes():
    s = split_corpus(docs_n(10), (0.6, 0.3, 0.1), seed=7)
    assert (len(s.train), len(s.valid), len(s.test)) == (6, 3, 1)
    s = split_corpus(docs_n(1000), (0.6, 0.3, 0.1), seed=0)
    assert (len(s.train), len(s.valid), len(s.test)) == (600, 300, 100)


def test_split_deterministic():
    assert split_corpus(docs_n(10), seed=7) == split_corpus(docs_n(10), seed=7)


def test_split_too_small():
    with pytest.raises(ValueError):
        split_corpus(docs_n(2))


@given(st.integers(3, 200), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_split_partition(n, seed):
    s = split_corpus(docs_n(n), seed=seed)
    parts = [set(s.train), set(s.valid), set(s.test)]
    assert sum(len(p) for p in parts) == n
    assert set().union(*parts) == {f"p{i}" for i in range(n)}
    assert all(parts)


def test_halve_two_two():
    a, b = halve_document(PatientDocument("p", {0: 2, 1: 2}), seed=3)
    assert a.n_tokens == b.n_tokens == 2
    merged = {k: a.icd.get(k, 0) + b.icd.get(k, 0) for k in (0, 1)}
    assert merged == {0: 2, 1: 2}


def test_halve_odd_and_deterministic():
    doc = PatientDocument("p", {0: 3}, {1: 2})
    a, b = halve_document(doc, seed=11)
    assert {a.n_tokens, b.n_tokens} == {2, 3}
    assert halve_document(doc, seed=11) == (a, b)


def test_halve_needs_two_tokens():
    with pytest.raises(ValueError):
        halve_document(PatientDocument("p", {0: 1}), 0)


counts = st.dictionaries(st.integers(0, 5), st.integers(1, 6), max_size=6)


@given(counts, counts, st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_halve_conserves_counts(icd, atc, seed):
    doc = PatientDocument("p", icd, atc)
    if doc.n_tokens < 2:
        return
    vocab = small_vocab(6, 6)
    a, b = halve_document(doc, seed)
    for x, y, z in zip(count_vectors(a, vocab), count_vectors(b, vocab), count_vectors(doc, vocab)):
        np.testing.assert_array_equal(x + y, z)


def test_normalize_bow_examples():
    vocab = small_vocab(2, 2)
    icd, atc = normalize_bow(PatientDocument("p", {0: 1, 1: 3}), vocab)
    np.testing.assert_allclose(icd, [0.25, 0.75])
    np.testing.assert_array_equal(atc, [0.0, 0.0])
    icd, _ = normalize_bow(PatientDocument("p", {0: 2}), vocab)
    np.testing.assert_array_equal(icd, [1.0, 0.0])


@given(counts, counts)
def test_normalize_bow_sums(icd, atc):
    doc = PatientDocument("p", icd, atc)
    if doc.n_tokens == 0:
        return
    for vec, c in zip(normalize_bow(doc, small_vocab(6, 6)), (icd, atc)):
        if c:
            assert abs(vec.sum() - 1.0) <= 1e-9
