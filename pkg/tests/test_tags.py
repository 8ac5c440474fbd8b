import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xaln.tags import (
    EmptyTagSetError, OutOfVocabularyError, TagSet, Vocabulary, Word2VecConfig, CbowModel,
    build_vocabulary, cbow_loss_and_grads, embed_tags, lookup, normalize_tags, preprocess_tags,
    singularize, stopwords, tag_indices, train_cbow,
)


def _unit(t):
    return t / np.linalg.norm(t, axis=1, keepdims=True)


# -- preprocessing ---------------------------------------------------------------

def test_example_dogs_the_barking():
    assert set(preprocess_tags(["dogs", "the", "barking"]).tags) == {"dog", "barking"}


def test_duplicates_collapse():
    assert preprocess_tags(["synth", "synth"]).tags == ("synth",)


@pytest.mark.parametrize("word,expected", [
    ("bodies", "body"), ("glasses", "glass"), ("boxes", "box"), ("churches", "church"),
    ("brushes", "brush"), ("drums", "drum"), ("bass", "bass"), ("chorus", "chorus"),
    ("movies", "movie"), ("children", "child"), ("fx", "fx"), ("noise", "noise"),
])
def test_singularize(word, expected):
    assert singularize(word) == expected


def test_stopword_list_is_shipped():
    sw = stopwords()
    assert {"the", "and", "of"} <= sw and "dog" not in sw


def test_truncation_by_document_frequency_then_lexicographic():
    tokens = [f"t{i:02d}" for i in range(12)]
    df = {t: 10 for t in tokens}
    df["t11"], df["t10"] = 50, 40
    vocab = Vocabulary(tokens, df, 100)
    ts = preprocess_tags(tokens, vocab)
    assert ts.tags == ("t11", "t10") + tuple(f"t{i:02d}" for i in range(8))


def test_oov_tags_dropped_with_vocabulary():
    vocab = Vocabulary(["dog"], {"dog": 3}, 10)
    assert preprocess_tags(["dogs", "cat"], vocab).tags == ("dog",)


def test_all_filtered_raises():
    with pytest.raises(EmptyTagSetError):
        preprocess_tags(["the", "and"])
    with pytest.raises(EmptyTagSetError):
        preprocess_tags([])


_words = st.lists(st.sampled_from(
    ["Dogs", "the", "bass", "glasses", "boxes", "synth", "Synth", "rain", "and", "bodies", "x", "loops"]),
    min_size=1, max_size=15)


@settings(max_examples=100, deadline=None)
@given(_words)
def test_preprocess_is_idempotent(raw):
    try:
        once = preprocess_tags(raw)
    except EmptyTagSetError:
        return
    assert preprocess_tags(list(once.tags)) == once


@settings(max_examples=100, deadline=None)
@given(_words)
def test_normalize_output_is_clean(raw):
    out = normalize_tags(raw)
    assert len(out) == len(set(out))
    assert not set(out) & stopwords()
    assert all(t == t.lower() for t in out)


# -- vocabulary ------------------------------------------------------------------

def test_document_frequency_threshold_is_strict():
    corpus = [["common", "x"] for _ in range(71)] + [["y"] for _ in range(29)]
    assert "common" not in build_vocabulary(corpus)
    corpus = [["common", "x"] for _ in range(70)] + [["y"] for _ in range(30)]
    assert "common" in build_vocabulary(corpus)


def test_small_corpus_keeps_all_survivors(caplog):
    corpus = [["a", "b"], ["c"], ["d", "e"]]
    vocab = build_vocabulary(corpus, size=1000)
    assert len(vocab) == 5
    assert "survive" in caplog.text


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdefghij"), min_size=1, max_size=5), min_size=1, max_size=30),
       st.integers(1, 8))
def test_vocabulary_filters_exact(corpus, size):
    vocab = build_vocabulary(corpus, size=size)
    n = len(corpus)
    df = {t: sum(t in d for d in corpus) for d in corpus for t in d}
    survivors = sorted((t for t, c in df.items() if c <= 0.7 * n), key=lambda t: (-df[t], t))
    assert vocab.tokens == survivors[:size]
    assert all(vocab.doc_freq[t] == df[t] for t in vocab.tokens)


def test_vocabulary_json_roundtrip(tmp_path):
    vocab = build_vocabulary([["a", "b"], ["b", "c"], ["d"]])
    vocab.save(tmp_path / "v.json")
    back = Vocabulary.load(tmp_path / "v.json")
    assert back.tokens == vocab.tokens and back.doc_freq == vocab.doc_freq and back.n_docs == 3


# -- CBOW ------------------------------------------------------------------------

def test_cbow_gradient_matches_finite_differences():
    r = np.random.default_rng(0)
    w_in, w_out = r.normal(size=(3, 5)), r.normal(size=(3, 5))
    ctx, target, negs = [0, 2], 1, [0, 2, 2]
    _, g_in, g_out = cbow_loss_and_grads(w_in, w_out, ctx, target, negs)
    h = 1e-6
    worst = 0.0
    for table, grads in ((w_in, g_in), (w_out, g_out)):
        for (i, j), _ in np.ndenumerate(table):
            orig = table[i, j]
            table[i, j] = orig + h
            lp = cbow_loss_and_grads(w_in, w_out, ctx, target, negs)[0]
            table[i, j] = orig - h
            lm = cbow_loss_and_grads(w_in, w_out, ctx, target, negs)[0]
            table[i, j] = orig
            numeric = (lp - lm) / (2 * h)
            analytic = grads[i][j] if i in grads else 0.0
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8))
    assert worst < 1e-4


def test_cbow_loss_decreases_on_fixed_pair():
    model = CbowModel(6, Word2VecConfig(dim=8, seed=3))
    model.w_out[:] = np.random.default_rng(1).normal(scale=0.1, size=model.w_out.shape)
    losses = [model.step([0, 1], 2, [3, 4, 5], lr=0.01) for _ in range(11)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_single_tag_documents_leave_initialization():
    cfg = Word2VecConfig(dim=8, seed=5)
    table, _ = train_cbow([[0], [1], [2]], 3, cfg)
    assert np.array_equal(table, CbowModel(3, cfg).w_in.astype(np.float32))


def test_cbow_is_seed_deterministic():
    docs = [[0, 1, 2], [1, 3], [2, 3, 0]] * 5
    a, _ = train_cbow(docs, 4, Word2VecConfig(dim=8, seed=9, epochs=3))
    b, _ = train_cbow(docs, 4, Word2VecConfig(dim=8, seed=9, epochs=3))
    assert np.array_equal(a, b) and np.all(np.isfinite(a))


def test_cooccurring_tags_with_shared_context_align():
    # A,B co-occur with X; C,D co-occur with Y. Averaged over seeds A sits closer to B than to C.
    docs = [[0, 1, 4]] * 50 + [[2, 3, 5]] * 50
    ab, ac = [], []
    for seed in range(10):
        n = _unit(train_cbow(docs, 6, Word2VecConfig(dim=16, seed=seed))[0])
        ab.append(n[0] @ n[1])
        ac.append(n[0] @ n[2])
    assert np.mean(ab) > np.mean(ac) + 0.2


@pytest.mark.xfail(reason="in two-tag documents A and B never share a context, so their input vectors "
                          "are not tied; the pairs end up near-orthogonal", strict=False)
def test_two_tag_toy_corpus_pairs_align():
    docs = [[0, 1]] * 50 + [[2, 3]] * 50
    ab, ac = [], []
    for seed in range(10):
        n = _unit(train_cbow(docs, 4, Word2VecConfig(dim=16, seed=seed))[0])
        ab.append(n[0] @ n[1])
        ac.append(n[0] @ n[2])
    assert np.mean(ab) > np.mean(ac) + 0.2


def test_cbow_loss_history_decreases():
    docs = [[0, 1, 4]] * 20 + [[2, 3, 5]] * 20
    _, hist = train_cbow(docs, 6, Word2VecConfig(dim=8, seed=0))
    assert hist[-1] < hist[0]


# -- lookup ----------------------------------------------------------------------

def test_embed_tags_rows_and_padding():
    vocab = Vocabulary(["a", "b", "c"], {"a": 3, "b": 2, "c": 1}, 5)
    table = np.arange(12, dtype=np.float32).reshape(3, 4)
    z, mask = embed_tags(TagSet(("c", "a")), vocab, table)
    assert z.shape == (10, 4) and mask.tolist() == [True, True] + [False] * 8
    assert np.array_equal(z[0], table[2]) and np.array_equal(z[1], table[0])
    assert not z[2:].any()


def test_embed_tags_oov_raises():
    vocab = Vocabulary(["a"], {"a": 1}, 1)
    with pytest.raises(OutOfVocabularyError):
        embed_tags(TagSet(("zzz",)), vocab, np.zeros((1, 2)))


def test_embed_tags_depends_only_on_set():
    vocab = Vocabulary(["a", "b", "c"], {"a": 3, "b": 2, "c": 1}, 5)
    table = np.random.default_rng(0).normal(size=(3, 4))
    z1, _ = embed_tags(TagSet(("a", "b", "c")), vocab, table)
    z2, _ = embed_tags(TagSet(("c", "a", "b")), vocab, table)
    key = lambda z: sorted(map(tuple, z[:3]))
    assert key(z1) == key(z2)


def test_batched_lookup_matches_embed_tags():
    vocab = Vocabulary(["a", "b", "c"], {"a": 3, "b": 2, "c": 1}, 5)
    table = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    sets = [TagSet(("b",)), TagSet(("a", "c"))]
    idx = np.stack([tag_indices(s, vocab) for s in sets])
    z, mask = lookup(idx, table)
    for i, s in enumerate(sets):
        ze, me = embed_tags(s, vocab, table)
        assert np.array_equal(z[i], ze) and np.array_equal(mask[i], me)
