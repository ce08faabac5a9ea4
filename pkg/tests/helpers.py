"""Shared oracles and small tasks for the unit tests and the acceptance suite."""

import numpy as np

from domainrescore import nn_core as nn
from domainrescore.corpus import Split, Vocabulary, build_vocabulary, generate_corpus, select, split_corpus
from domainrescore.grammar import default_generator_config
from domainrescore.neural_lm import NCE, SOFTMAX, NeuralLM, NlmTrainConfig, perplexity, self_normalization, train_general

NCE_KS = (1, 5, 20)


def tiny_task():
    corpus = split_corpus(generate_corpus(default_generator_config(seed=7, utterances_per_domain=200, inventory_scale=0.15)), seed=3)
    train, dev = select(corpus, Split.TRAIN), select(corpus, Split.DEV)
    return train, dev, build_vocabulary(train, 400)


def train_tiny(loss: str, k: int = 20):
    """Train to early-stopping convergence on the tiny task; returns (model, dev)."""
    train, dev, vocab = tiny_task()
    cfg = NlmTrainConfig(learning_rate=0.01, epochs=60, embed_dim=16, hidden=24, nce_samples=k, seed=1, loss=loss)
    model, _ = train_general(train, dev, vocab, cfg)
    return model, dev


def nce_vs_softmax():
    """Dev perplexities of softmax and NCE(k) models on the tiny task.

    ``ppl`` is the explicitly normalized perplexity, ``raw_ppl`` scores NCE
    models with their self-normalized logits.
    """
    soft, dev = train_tiny(SOFTMAX)
    out = {"softmax": {"ppl": perplexity(soft, dev), "raw_ppl": perplexity(soft, dev)}}
    for k in NCE_KS:
        m, _ = train_tiny(NCE, k)
        out[k] = {
            "ppl": perplexity(m, dev, normalize=True),
            "raw_ppl": perplexity(m, dev),
            "self_norm": self_normalization(m, dev),
        }
    return out


# -- brute-force edit distance ------------------------------------------------------


def _neighbours(s, alphabet):
    for i in range(len(s)):
        yield s[:i] + s[i + 1 :]
        for c in alphabet:
            if c != s[i]:
                yield s[:i] + (c,) + s[i + 1 :]
    for i in range(len(s) + 1):
        for c in alphabet:
            yield s[:i] + (c,) + s[i:]


def brute_force_distance(a, b, alphabet):
    """Fewest unit edits turning ``a`` into ``b``, by bidirectional search
    over explicit strings (no dynamic programming)."""
    a, b = tuple(a), tuple(b)
    if a == b:
        return 0
    seen = [{a: 0}, {b: 0}]
    frontier = [[a], [b]]
    while True:
        side = 0 if len(frontier[0]) <= len(frontier[1]) else 1
        mine, other = seen[side], seen[1 - side]
        nxt, best = [], None
        for s in frontier[side]:
            for t in _neighbours(s, alphabet):
                if t in other:
                    d = mine[s] + 1 + other[t]
                    best = d if best is None else min(best, d)
                if t not in mine:
                    mine[t] = mine[s] + 1
                    nxt.append(t)
        if best is not None:
            return best
        frontier[side] = nxt


def random_pair(rng, max_len=6, alphabet=3):
    a = [rng.randrange(alphabet) for _ in range(rng.randint(0, max_len))]
    b = [rng.randrange(alphabet) for _ in range(rng.randint(0, max_len))]
    return a, b


# -- gradient-check instances -------------------------------------------------------

GRAD_TOL = 1e-4
GRAD_SEEDS = range(20)
# The full-model losses sum many terms, so a 1e-5 step lets float roundoff
# swamp gradient entries near 1e-6. A larger step keeps the difference clean.
LM_STEP = 1e-4


def affine_softmax_ce(seed):
    rng = np.random.default_rng(seed)
    lin = nn.Linear("fc", 6, 5, rng)
    lin.bias.value[:] = rng.normal(size=5)
    x = nn.Param("x", rng.normal(size=(4, 6)))
    y = rng.integers(0, 5, size=4)
    w = rng.uniform(0.1, 1.0, size=4)

    def loss():
        z, cache = lin.forward(x.value)
        val, dz = nn.softmax_cross_entropy(z, y, w)
        x.grad += lin.backward(dz, cache)
        return val

    return loss, lin.params() + [x], {}


def embedding(seed):
    rng = np.random.default_rng(seed)
    emb = nn.Embedding("e", 7, 3, rng)
    ids = rng.integers(0, 5, size=(2, 4))  # rows 5 and 6 never looked up
    proj = rng.normal(size=(2, 4, 3))

    def loss():
        x, cache = emb.forward(ids)
        emb.backward(proj, cache)
        return float((x * proj).sum())

    loss.ids = ids
    return loss, emb.params(), {}


def lstm_layer(seed, masked=False):
    rng = np.random.default_rng(seed)
    layer = nn.LSTM("l", 3, 4, rng)
    layer.bias.value += rng.normal(scale=0.5, size=layer.bias.value.shape)
    x = nn.Param("x", rng.normal(size=(2, 5, 3)))
    h0 = nn.Param("h0", rng.normal(scale=0.5, size=(2, 4)))
    c0 = nn.Param("c0", rng.normal(scale=0.5, size=(2, 4)))
    mask = None
    if masked:
        mask = np.ones((2, 5))
        mask[0, :2] = 0.0  # left padding
    proj = rng.normal(size=(2, 5, 4))
    proj_c = rng.normal(size=(2, 4))

    def loss():
        hs, (h, c), cache = layer.forward(x.value, (h0.value, c0.value), mask)
        dx, (dh0, dc0) = layer.backward(proj, cache, (np.zeros_like(h), proj_c))
        x.grad += dx
        h0.grad += dh0
        c0.grad += dc0
        return float((hs * proj).sum() + (c * proj_c).sum())

    return loss, layer.params() + [x, h0, c0], {}


def tiny_lm(seed, loss):
    """A two-layer LSTM LM over six words with three short sequences."""
    vocab = Vocabulary(["<unk>", "a", "b", "c", "d", "e"], 10)
    m = NeuralLM(vocab, embed_dim=4, hidden=3, seed=seed, loss=loss)
    rng = np.random.default_rng(seed + 100)
    m.out.bias.value[:] = rng.normal(scale=0.3, size=m.out.bias.value.shape)
    seqs = [rng.integers(0, 6, size=rng.integers(1, 5)).tolist() for _ in range(3)]
    m.noise_logq = np.log(np.full(m.size + 1, 1.0 / (m.size + 1)))
    return m, seqs


def lm_softmax(seed):
    m, seqs = tiny_lm(seed, SOFTMAX)
    return (lambda: m.batch_loss(seqs)), m.params(), {"h": LM_STEP}


def lm_nce(seed):
    m, seqs = tiny_lm(seed, NCE)
    # a fresh generator per call: every evaluation sees the same noise draws
    return (lambda: m.batch_loss(seqs, np.random.default_rng(seed), k=4)), m.params(), {"h": LM_STEP}


def nce_objective(seed):
    rng = np.random.default_rng(seed)
    k = 5
    st = nn.Param("target", rng.normal(size=6))
    sn = nn.Param("noise", rng.normal(size=(6, k)))
    lt = np.log(k * rng.uniform(0.01, 0.3, size=6))
    ln = np.log(k * rng.uniform(0.01, 0.3, size=(6, k)))

    def loss():
        val, dt, dn = nn.nce_loss(st.value, sn.value, lt, ln)
        st.grad += dt
        sn.grad += dn
        return val

    return loss, [st, sn], {}


GRAD_INSTANCES = {
    "affine+softmax-CE": affine_softmax_ce,
    "embedding": embedding,
    "LSTM layer": lstm_layer,
    "LSTM layer (masked)": lambda s: lstm_layer(s, masked=True),
    "2-layer LSTM LM (softmax)": lm_softmax,
    "2-layer LSTM LM (NCE)": lm_nce,
    "NCE objective": nce_objective,
}


def run_gradcheck(kind, seed):
    loss, params, kw = GRAD_INSTANCES[kind](seed)
    return nn.gradient_check(loss, params, GRAD_TOL, **kw)
